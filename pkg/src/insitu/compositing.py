"""Visibility-ordered compositing of per-rank partial images.

The over operator is associative but not commutative, so correctness rests on
the brick visibility order.  Binary swap exchanges image halves pairwise for
log2(R) rounds in the order-permuted rank space, leaving each rank with one
disjoint slice of the final frame, which rank 0 then collects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import GlobalVolume
from .scene import Camera


class CompositeError(Exception):
    pass


def over(front: Sequence[float], back: Sequence[float]) -> tuple[float, float, float, float]:
    """Premultiplied over: C = C_f + (1 - A_f) * C_b, same for alpha."""
    k = 1.0 - front[3]
    return tuple(float(front[c] + k * back[c]) for c in range(4))


def over_arrays(front: np.ndarray, back: np.ndarray) -> np.ndarray:
    """Vectorized :func:`over` for (..., 4) premultiplied arrays."""
    return front + (1.0 - front[..., 3:4]) * back


def visibility_order(volume: GlobalVolume, camera: Camera) -> list[int]:
    """Near-to-far permutation of rank ids for the camera.

    Nested slab ordering: per axis, slabs are sorted by distance from the
    camera coordinate to the slab interval (zero when inside), ties by
    ascending slab index; bricks are then emitted x-slab outermost, z-slab
    innermost.  Equidistant same-axis slabs lie on opposite sides of the
    camera and are never crossed by one ray, so the tie-break never reorders
    an actual overlap.
    """
    sizes = [volume.size[a] / volume.decomposition[a] for a in range(3)]
    axis_orders = []
    for axis in range(3):
        c = camera.position[axis]
        slabs = []
        for i in range(volume.decomposition[axis]):
            lo = i * sizes[axis]
            hi = lo + sizes[axis]
            dist = max(lo - c, 0.0, c - hi)
            slabs.append((dist, i))
        slabs.sort()
        axis_orders.append([i for _, i in slabs])
    order = []
    for bx in axis_orders[0]:
        for by in axis_orders[1]:
            for bz in axis_orders[2]:
                order.append(volume.rank_of((bx, by, bz)))
    return order


def composite_sequential(images: Sequence[np.ndarray], order: Sequence[int]) -> np.ndarray:
    """Fold over() front to back following the visibility order."""
    if not images:
        raise CompositeError("no images to composite")
    shape = images[0].shape
    for img in images:
        if img.shape != shape:
            raise CompositeError(f"image size mismatch: {img.shape} vs {shape}")
    out = np.zeros_like(images[0])
    for rank in order:
        out = over_arrays(out, images[rank])
    return out


@dataclass(frozen=True)
class CompositeMessage:
    """Wire unit of one swap round: a flat pixel span of premultiplied RGBA."""

    round_index: int
    sender: int
    span_offset: int
    span_length: int
    payload: np.ndarray  # (span_length, 4) float64

    HEADER = struct.Struct("<iiii")

    def to_bytes(self) -> bytes:
        head = self.HEADER.pack(self.round_index, self.sender, self.span_offset, self.span_length)
        return head + np.ascontiguousarray(self.payload, dtype="<f8").tobytes()

    @staticmethod
    def from_bytes(data: bytes) -> "CompositeMessage":
        rnd, sender, off, length = CompositeMessage.HEADER.unpack_from(data)
        payload = np.frombuffer(data, dtype="<f8", offset=CompositeMessage.HEADER.size)
        if payload.size != length * 4:
            raise CompositeError(
                f"span/payload mismatch: span {length} pixels, {payload.size} scalars"
            )
        return CompositeMessage(rnd, sender, off, length, payload.reshape(length, 4).copy())


def binary_swap(
    transport,
    local_pixels: np.ndarray,
    order: Sequence[int],
) -> np.ndarray | None:
    """Composite all ranks' images; the full frame materializes on rank 0.

    Power-of-two rank counts run the swap proper; anything else falls back to
    direct-send, where every rank ships its whole image to rank 0 for a
    sequential composite (a documented performance cliff, not an error).
    Images are treated as flat pixel spans: halving a span is geometry-free
    because over() is per pixel.
    """
    rank = transport.rank
    size = transport.size
    shape = local_pixels.shape
    flat = np.ascontiguousarray(local_pixels, dtype=np.float64).reshape(-1, 4)
    n_pixels = flat.shape[0]
    if size == 1:
        return local_pixels.copy()

    if size & (size - 1) != 0:
        return _direct_send(transport, flat, order, shape)

    # Work in visibility-permuted space: virtual index v holds the image of
    # physical rank order[v]; adjacent virtual runs are contiguous in depth.
    virtual = order.index(rank)
    rounds = size.bit_length() - 1
    span_lo, span_hi = 0, n_pixels
    mine = flat
    for r in range(rounds):
        bit = 1 << r
        partner_virtual = virtual ^ bit
        partner = order[partner_virtual]
        mid = (span_lo + span_hi) // 2
        keep_high = bool(virtual & bit)
        if keep_high:
            keep = (mid, span_hi)
            give = (span_lo, mid)
        else:
            keep = (span_lo, mid)
            give = (mid, span_hi)
        out_msg = CompositeMessage(
            r, rank, give[0], give[1] - give[0], mine[give[0] - span_lo: give[1] - span_lo]
        )
        transport.send(partner, out_msg.to_bytes())
        in_msg = CompositeMessage.from_bytes(transport.receive(partner))
        if in_msg.round_index != r:
            raise CompositeError(
                f"round mismatch: expected {r}, got {in_msg.round_index} from rank {partner}"
            )
        if in_msg.span_offset != keep[0] or in_msg.span_length != keep[1] - keep[0]:
            raise CompositeError("partner sent an unexpected span")
        kept = mine[keep[0] - span_lo: keep[1] - span_lo]
        # The virtual run starting earlier in the order is in front.
        if partner_virtual < virtual:
            merged = over_arrays(in_msg.payload, kept)
        else:
            merged = over_arrays(kept, in_msg.payload)
        mine = np.ascontiguousarray(merged)
        span_lo, span_hi = keep

    # Collection: every rank owns a disjoint 1/R span; rank 0 assembles.
    final_msg = CompositeMessage(rounds, rank, span_lo, span_hi - span_lo, mine)
    if rank != 0:
        transport.send(0, final_msg.to_bytes())
        return None
    full = np.empty((n_pixels, 4))
    full[span_lo:span_hi] = mine
    for other in range(1, size):
        msg = CompositeMessage.from_bytes(transport.receive(other))
        if msg.round_index != rounds:
            raise CompositeError("stray swap-round message during collection")
        full[msg.span_offset: msg.span_offset + msg.span_length] = msg.payload
    return full.reshape(shape)


def _direct_send(transport, flat: np.ndarray, order: Sequence[int], shape) -> np.ndarray | None:
    rank, size = transport.rank, transport.size
    if rank != 0:
        transport.send(0, CompositeMessage(0, rank, 0, flat.shape[0], flat).to_bytes())
        return None
    images = [None] * size
    images[0] = flat
    for other in range(1, size):
        msg = CompositeMessage.from_bytes(transport.receive(other))
        images[msg.sender] = msg.payload
    return composite_sequential(images, order).reshape(shape)
