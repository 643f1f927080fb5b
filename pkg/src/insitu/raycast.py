"""Front-to-back ray marching of one rank's local cuboid.

Sample positions lie on a global station grid: t_k = k * step_length along
each ray, with t measured from the camera.  A brick only marches the stations
inside its own parametric interval, so the union of all bricks' stations is
exactly the station set a single-rank render would use.  That property is what
makes the multi-rank composite match the single-rank image down to float
noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import LocalDomain, SourceHandle, SourceRegistry, sample_many
from .functors import (
    ChainLimits,
    FunctorChain,
    FunctorRegistry,
    eval_chain_array,
    parse_chain,
    reduce_to_scalar_array,
)
from .scene import (
    ISO_MODE,
    ClipPlane,
    RenderSettings,
    SceneState,
    TransferFunction,
    classify_array,
)


@dataclass
class LocalImage:
    """One rank's partial rendering: premultiplied RGBA in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 4) float64, premultiplied
    order_key: int = 0
    stations: int = 0  # ray-march stations evaluated, for scaling diagnostics

    @staticmethod
    def blank(width: int, height: int, order_key: int = 0) -> "LocalImage":
        return LocalImage(width, height, np.zeros((height, width, 4)), order_key)


@dataclass(frozen=True)
class SourcePlan:
    """Everything the march needs for one active source."""

    source_id: int
    handle: SourceHandle
    domain: LocalDomain
    chain: FunctorChain
    tf: TransferFunction
    mode: str
    iso_threshold: float


def build_plans(
    registry: SourceRegistry,
    functor_registry: FunctorRegistry,
    limits: ChainLimits,
    scene: SceneState,
) -> list[SourcePlan]:
    """Materialize per-source render inputs for the active set, id order."""
    plans = []
    known = set(registry.source_ids)
    for sid in sorted(scene.settings.active_set):
        if sid not in known:
            raise ValueError(f"active source id {sid} is not registered")
        handle = registry.render_handle(sid)
        chain = parse_chain(
            scene.chain_text(sid), functor_registry, limits, handle.descriptor.feature_dim
        )
        plans.append(
            SourcePlan(
                source_id=sid,
                handle=handle,
                domain=registry.domain,
                chain=chain,
                tf=scene.transfer_function(sid),
                mode=scene.settings.mode(sid),
                iso_threshold=scene.settings.iso_threshold(sid),
            )
        )
    return plans


# ---------------------------------------------------------------------------
# Ray / box / clip-plane intersections


def _ray_box_intervals(
    origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized slab test; returns (t_enter, t_exit), empty when t0 > t1."""
    t0 = np.full(dirs.shape[0], -np.inf)
    t1 = np.full(dirs.shape[0], np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        o = origin[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[axis] - o) / d
            tb = (hi[axis] - o) / d
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = d == 0.0
        inside = (o >= lo[axis]) & (o <= hi[axis])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return t0, t1


def _apply_clip_planes(
    origin: np.ndarray,
    dirs: np.ndarray,
    t0: np.ndarray,
    t1: np.ndarray,
    planes: Sequence[ClipPlane],
) -> tuple[np.ndarray, np.ndarray]:
    """Intersect [t0, t1] with each plane's kept half-space."""
    for plane in planes:
        n = np.asarray(plane.normal)
        f0 = np.dot(origin - np.asarray(plane.point), n)
        dn = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cross = -f0 / dn
        # dn > 0: constraint t >= t_cross; dn < 0: t <= t_cross;
        # dn == 0: whole ray kept or dropped by the sign of f0.
        t0 = np.where(dn > 0, np.maximum(t0, t_cross), t0)
        t1 = np.where(dn < 0, np.minimum(t1, t_cross), t1)
        dead = (dn == 0) & (f0 < 0)
        t1 = np.where(dead, -np.inf, t1)
    return t0, t1


def ray_box_intersection(
    origin: Sequence[float],
    direction: Sequence[float],
    box_lo: Sequence[float],
    box_hi: Sequence[float],
    clip_planes: Sequence[ClipPlane] = (),
) -> Optional[tuple[float, float]]:
    """Parametric interval of a single ray inside a cuboid, after clipping."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if not d.any():
        raise ValueError("ray direction must be non-zero")
    t0, t1 = _ray_box_intervals(o, d[None, :], np.asarray(box_lo), np.asarray(box_hi))
    t0, t1 = _apply_clip_planes(o, d[None, :], t0, t1, clip_planes)
    if t1[0] < t0[0]:
        return None
    return (float(t0[0]), float(t1[0]))


# ---------------------------------------------------------------------------
# Sampling


def _sample_scalars(plan: SourcePlan, pos: np.ndarray, interpolation: bool) -> np.ndarray:
    """Global positions (m, 3) -> chained, reduced scalars (m,)."""
    local = pos - np.asarray(plan.domain.offset, dtype=np.float64)
    if interpolation:
        values = _trilinear(plan.handle, plan.domain, local, interpolation)
    else:
        cells = np.floor(local).astype(np.intp)
        values = sample_many(
            plan.handle, plan.domain, cells[:, 0], cells[:, 1], cells[:, 2], False
        )
    return reduce_to_scalar_array(eval_chain_array(plan.chain, values))


def _trilinear(
    handle: SourceHandle, domain: LocalDomain, local: np.ndarray, interpolation: bool
) -> np.ndarray:
    i0 = np.floor(local).astype(np.intp)
    frac = local - i0
    dim = handle.descriptor.feature_dim
    out = np.zeros((local.shape[0], dim))
    for dz in (0, 1):
        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dx in (0, 1):
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                corner = sample_many(
                    handle, domain, i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, interpolation
                )
                out += (wx * wy * wz)[:, None] * corner
    return out


def _stencil_box(domain: LocalDomain, handle: SourceHandle, interpolation: bool):
    """Position range where trilinear gathers stay within the guard halo."""
    g = domain.guard_width if (handle.descriptor.has_guard and interpolation) else 0
    lo = np.asarray(domain.offset, dtype=np.float64) - g
    hi = lo + np.asarray(domain.size, dtype=np.float64) + 2 * g - 1 - 1e-9
    return lo, hi


def gradient_normals(
    plan: SourcePlan,
    pos: np.ndarray,
    view_dirs: np.ndarray,
    interpolation: bool,
) -> np.ndarray:
    """Central-difference gradient of the chained scalar, normalized.

    Stencil points are clamped into the locally samplable box, so differences
    degrade to one-sided within a cell of the halo edge.  Zero gradients fall
    back to the view-opposite direction.
    """
    lo, hi = _stencil_box(plan.domain, plan.handle, interpolation)
    grad = np.empty_like(pos)
    for axis in range(3):
        p_plus = pos.copy()
        p_minus = pos.copy()
        p_plus[:, axis] = np.clip(pos[:, axis] + 1.0, lo[axis], hi[axis])
        p_minus[:, axis] = np.clip(pos[:, axis] - 1.0, lo[axis], hi[axis])
        span = p_plus[:, axis] - p_minus[:, axis]
        span[span == 0.0] = 1.0
        grad[:, axis] = (
            _sample_scalars(plan, p_plus, interpolation)
            - _sample_scalars(plan, p_minus, interpolation)
        ) / span
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    zero = norms[:, 0] < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = grad / norms
    if zero.any():
        vd = view_dirs[zero]
        normals[zero] = -vd / np.linalg.norm(vd, axis=1, keepdims=True)
    return normals


def gradient_normal(
    plan: SourcePlan,
    position: Sequence[float],
    view_dir: Sequence[float],
    interpolation: bool = True,
) -> np.ndarray:
    return gradient_normals(
        plan,
        np.asarray([position], dtype=np.float64),
        np.asarray([view_dir], dtype=np.float64),
        interpolation,
    )[0]


# ---------------------------------------------------------------------------
# Marching


def _over_arrays(front: np.ndarray, back: np.ndarray) -> np.ndarray:
    return front + (1.0 - front[:, 3:4]) * back


StationRecorder = Callable[[int, np.ndarray], None]


def _reach_mask(offset: np.ndarray, size: np.ndarray, guard: int, pos: np.ndarray) -> np.ndarray:
    """True where trilinear gathers at pos stay within the guard halo.

    The corner pair floor(p), floor(p)+1 biases the reachable position range
    upward: with guard g the samplable box is [offset-g, offset+size+g-1).
    """
    lo = offset - guard
    hi = offset + size + guard - 1
    return ((pos >= lo[None, :]) & (pos < hi[None, :])).all(axis=1)


def _brick_of(volume, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(offset, size) arrays of the brick containing each position."""
    bsize = np.asarray(
        [volume.size[a] / volume.decomposition[a] for a in range(3)]
    )
    coords = np.floor(pos / bsize[None, :])
    coords = np.clip(coords, 0, np.asarray(volume.decomposition)[None, :] - 1)
    return coords * bsize[None, :], np.broadcast_to(bsize, pos.shape)


def march_rays(
    origin: np.ndarray,
    dirs: np.ndarray,
    local_interval: tuple[np.ndarray, np.ndarray],
    global_interval: tuple[np.ndarray, np.ndarray],
    plans: Sequence[SourcePlan],
    settings: RenderSettings,
    station_recorder: Optional[StationRecorder] = None,
    volume=None,
) -> tuple[np.ndarray, int]:
    """March every ray over its station range; returns ((n, 4) rgba, stations).

    An early-termination threshold of exactly 1.0 disables the alpha check:
    float accumulation can saturate to 1.0, and stopping there would make the
    station set depend on how the volume is decomposed.

    Iso-mode sources compare consecutive global stations.  For the pair that
    straddles a brick boundary, the brick holding the later station samples
    the earlier position through its guard; when the entry came through an
    upper face (where guard reach ends), ownership flips to the brick holding
    the earlier station, which checks the pair forward.  Both sides derive the
    decision from the shared brick layout (``volume``), so exactly one brick
    checks each pair.
    """
    n = dirs.shape[0]
    step = settings.step_length
    t0 = np.maximum(local_interval[0], 0.0)
    t1 = np.maximum(local_interval[1], 0.0)
    k_lo = np.ceil(t0 / step).astype(np.int64)
    k_hi = np.ceil(t1 / step).astype(np.int64)
    g0 = np.maximum(global_interval[0], 0.0)
    g1 = np.maximum(global_interval[1], 0.0)
    k_lo_global = np.ceil(g0 / step).astype(np.int64)
    k_hi_global = np.ceil(g1 / step).astype(np.int64)
    check_alpha = settings.early_termination_alpha < 1.0

    acc = np.zeros((n, 4))
    done = np.zeros(n, dtype=bool)
    iso_prev = {
        p.source_id: np.full(n, np.nan) for p in plans if p.mode == ISO_MODE
    }
    stations = 0
    if k_lo.size == 0 or not (k_lo < k_hi).any():
        return acc, 0

    for k in range(int(k_lo.min()), int(k_hi.max())):
        sel = ~done & (k >= k_lo) & (k < k_hi)
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            if done.all():
                break
            continue
        stations += int(idx.size)
        if station_recorder is not None:
            station_recorder(k, idx)
        pos = origin[None, :] + (k * step) * dirs[idx]
        station_rgba = np.zeros((idx.size, 4))
        terminate = np.zeros(idx.size, dtype=bool)
        for plan in plans:
            scalars = _sample_scalars(plan, pos, settings.interpolation)
            if plan.mode == ISO_MODE:
                hit, tau, hit_dist = _iso_detect(
                    plan, k, pos, scalars, idx, dirs, origin, step,
                    k_lo, k_hi, k_lo_global, k_hi_global, iso_prev, settings, volume,
                )
                if hit.any():
                    hit_pos = pos[hit] + (tau[hit] + hit_dist[hit])[:, None] * step * dirs[idx][hit]
                    normals = gradient_normals(
                        plan, hit_pos, dirs[idx][hit], settings.interpolation
                    )
                    shade = np.abs(np.sum(normals * dirs[idx][hit], axis=1))
                    base = classify_array(
                        plan.tf, np.full(int(hit.sum()), plan.iso_threshold)
                    )
                    contrib = np.empty((int(hit.sum()), 4))
                    contrib[:, :3] = base[:, :3] * shade[:, None]
                    contrib[:, 3] = 1.0
                    station_rgba[hit] = _over_arrays(station_rgba[hit], contrib)
                    terminate |= hit
            else:
                rgba = classify_array(plan.tf, scalars)
                pre = np.empty_like(rgba)
                pre[:, :3] = rgba[:, :3] * rgba[:, 3:4]
                pre[:, 3] = rgba[:, 3]
                station_rgba = _over_arrays(station_rgba, pre)
        acc[idx] = _over_arrays(acc[idx], station_rgba)
        newly_done = terminate
        if check_alpha:
            newly_done = newly_done | (acc[idx, 3] >= settings.early_termination_alpha)
        done[idx] |= newly_done
    return acc, stations


def _iso_detect(
    plan, k, pos, scalars, idx, dirs, origin, step,
    k_lo, k_hi, k_lo_global, k_hi_global, iso_prev, settings, volume,
):
    """Sign-change detection for one iso source at station k.

    Returns (hit mask over the active batch, tau in [0, 1] along the owned
    pair, pair start offset in steps relative to the current station).
    """
    m = idx.size
    threshold = plan.iso_threshold
    prev = iso_prev[plan.source_id]
    cur_prev = prev[idx]
    exact = (
        plan.handle.descriptor.has_guard and settings.interpolation and volume is not None
    )
    offset = np.asarray(plan.domain.offset, dtype=np.float64)
    size = np.asarray(plan.domain.size, dtype=np.float64)
    guard = plan.domain.guard_width

    hit = np.zeros(m, dtype=bool)
    tau = np.zeros(m)
    hit_dist = np.zeros(m)  # -1 for backward (entry) pairs, 0 for forward

    # Entry pairs: first station in this brick, previous station exists
    # globally and is reachable through the guard.
    fresh = (k == k_lo[idx]) & (k - 1 >= k_lo_global[idx])
    if fresh.any():
        prev_pos = origin[None, :] + ((k - 1) * step) * dirs[idx][fresh]
        vals = np.full(int(fresh.sum()), np.nan)
        if exact:
            can = _reach_mask(offset, size, guard, prev_pos)
        elif plan.handle.descriptor.has_guard and settings.interpolation:
            # No layout knowledge: clamp into reach rather than crash.
            lo = offset - guard
            hi = offset + size + guard - 1 - 1e-9
            prev_pos = np.clip(prev_pos, lo[None, :], hi[None, :])
            can = np.ones(prev_pos.shape[0], dtype=bool)
        else:
            can = np.ones(prev_pos.shape[0], dtype=bool)
        if can.any():
            vals[can] = _sample_scalars(plan, prev_pos[can], settings.interpolation)
        cur_prev[fresh] = vals

    s_prev = cur_prev - threshold
    s_cur = scalars - threshold
    back = np.isfinite(s_prev) & ((s_prev < 0) != (s_cur < 0))
    if back.any():
        denom = s_prev[back] - s_cur[back]
        tau[back] = np.where(denom != 0.0, s_prev[back] / denom, 1.0)
        hit_dist[back] = -1.0
        hit |= back

    # Exit pairs: the next station belongs to a neighbor brick that cannot
    # reach back through its guard (entry through one of its upper faces).
    if exact:
        last = (k == k_hi[idx] - 1) & (k + 1 < k_hi_global[idx]) & ~hit
        if last.any():
            next_pos = origin[None, :] + ((k + 1) * step) * dirs[idx][last]
            a_can = _reach_mask(offset, size, guard, next_pos)
            b_off, b_size = _brick_of(volume, next_pos)
            b_can = _reach_mask_rows(b_off, b_size, guard, pos[last])
            check = a_can & ~b_can
            if check.any():
                sub = np.nonzero(last)[0][check]
                s_next = _sample_scalars(plan, next_pos[check], settings.interpolation) - threshold
                s_here = s_cur[sub]
                forward = (s_here < 0) != (s_next < 0)
                if forward.any():
                    rows = sub[forward]
                    denom = s_here[forward] - s_next[forward]
                    tau[rows] = np.where(denom != 0.0, s_here[forward] / denom, 1.0)
                    hit_dist[rows] = 0.0
                    hit[rows] = True

    prev[idx] = scalars
    return hit, tau, hit_dist


def _reach_mask_rows(offset: np.ndarray, size: np.ndarray, guard: int,
                     pos: np.ndarray) -> np.ndarray:
    """Per-row variant of :func:`_reach_mask` (offset/size differ per row)."""
    lo = offset - guard
    hi = offset + size + guard - 1
    return ((pos >= lo) & (pos < hi)).all(axis=1)


def march_ray(
    origin: Sequence[float],
    direction: Sequence[float],
    interval: tuple[float, float],
    plans: Sequence[SourcePlan],
    settings: RenderSettings,
    global_interval: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """Single-ray convenience wrapper over :func:`march_rays`."""
    gi = global_interval if global_interval is not None else interval
    rgba, _ = march_rays(
        np.asarray(origin, dtype=np.float64),
        np.asarray([direction], dtype=np.float64),
        (np.asarray([interval[0]]), np.asarray([interval[1]])),
        (np.asarray([gi[0]]), np.asarray([gi[1]])),
        plans,
        settings,
    )
    return rgba[0]


def render_local(
    rank_ctx,
    scene: SceneState,
    plans: Optional[Sequence[SourcePlan]] = None,
    station_recorder: Optional[StationRecorder] = None,
) -> LocalImage:
    """Render the rank's cuboid into a partial image.

    ``rank_ctx`` provides ``domain``, ``global_volume``, ``registry``,
    ``functor_registry`` and ``limits``.  Pixels whose rays miss the local
    cuboid stay fully transparent.
    """
    domain = rank_ctx.domain
    volume = rank_ctx.global_volume
    if plans is None:
        plans = build_plans(rank_ctx.registry, rank_ctx.functor_registry, rank_ctx.limits, scene)
    w, h = scene.camera.image_size
    image = LocalImage.blank(w, h)
    origin = np.asarray(scene.camera.position, dtype=np.float64)
    dirs = scene.camera.ray_directions()

    lo = np.asarray(domain.offset, dtype=np.float64)
    hi = lo + np.asarray(domain.size, dtype=np.float64)
    t0, t1 = _ray_box_intervals(origin, dirs, lo, hi)
    t0, t1 = _apply_clip_planes(origin, dirs, t0, t1, scene.clip_planes)
    glo = np.zeros(3)
    ghi = np.asarray(volume.size, dtype=np.float64)
    g0, g1 = _ray_box_intervals(origin, dirs, glo, ghi)
    g0, g1 = _apply_clip_planes(origin, dirs, g0, g1, scene.clip_planes)

    hit = (t1 > np.maximum(t0, 0.0)) & (t1 > 0.0)
    idx = np.nonzero(hit)[0]
    if idx.size:
        recorder = None
        if station_recorder is not None:
            recorder = lambda k, sub: station_recorder(k, idx[sub])  # noqa: E731
        rgba, stations = march_rays(
            origin,
            dirs[idx],
            (t0[idx], t1[idx]),
            (g0[idx], g1[idx]),
            plans,
            scene.settings,
            recorder,
            volume=volume,
        )
        flat = image.pixels.reshape(-1, 4)
        flat[idx] = rgba
        image.stations = stations
    return image
