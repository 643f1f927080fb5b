"""Volumes, domain decomposition and the zero-copy source contract.

Every piece of simulation data enters the renderer through a
:class:`SourceHandle`: a named accessor that maps integer grid indices of a
rank's local sub-volume to 1-4 component values.  Handles never own the data;
they read whatever backing store (or analytic formula) the application wires
in.  Non-persistent sources are snapshotted into a private buffer once per
frame so applications may reuse scratch memory between sources.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MAX_FEATURE_DIM = 4

IntTriple = tuple[int, int, int]


class FieldError(Exception):
    """Base class for field/source contract violations."""


class DuplicateSourceError(FieldError):
    pass


class GuardContractError(FieldError):
    """An index landed beyond the guard halo that was promised readable."""


class SourceUpdateError(FieldError):
    """A per-frame update hook raised; carries the source name."""


@dataclass(frozen=True)
class FieldVector:
    """Value of a source at one grid position: 1-4 scalar components."""

    components: tuple[float, ...]

    def __post_init__(self):
        if not 1 <= len(self.components) <= MAX_FEATURE_DIM:
            raise FieldError(f"feature dimension must be 1..4, got {len(self.components)}")

    @property
    def dim(self) -> int:
        return len(self.components)

    def __getitem__(self, i: int) -> float:
        return self.components[i]


def field_vector(*components: float) -> FieldVector:
    return FieldVector(tuple(float(c) for c in components))


@dataclass(frozen=True)
class GlobalVolume:
    """Cuboid global grid plus the ranks-per-axis decomposition."""

    size: IntTriple
    decomposition: IntTriple = (1, 1, 1)

    def __post_init__(self):
        for k in range(3):
            if self.size[k] <= 0 or self.decomposition[k] <= 0:
                raise FieldError("size and decomposition must be positive per axis")
            if self.size[k] % self.decomposition[k] != 0:
                raise FieldError(
                    f"axis {k}: size {self.size[k]} not divisible by "
                    f"{self.decomposition[k]} ranks"
                )

    @property
    def rank_count(self) -> int:
        dx, dy, dz = self.decomposition
        return dx * dy * dz

    def brick_coords(self, rank: int) -> IntTriple:
        """Grid coordinates of a rank's brick; rank ids lay out x-fastest."""
        dx, dy, dz = self.decomposition
        if not 0 <= rank < self.rank_count:
            raise FieldError(f"rank {rank} out of range for {self.rank_count} ranks")
        return (rank % dx, (rank // dx) % dy, rank // (dx * dy))

    def rank_of(self, coords: IntTriple) -> int:
        dx, dy, _ = self.decomposition
        bx, by, bz = coords
        return bx + by * dx + bz * dx * dy

    def local_domain(self, rank: int, guard_width: int = 1) -> "LocalDomain":
        bx, by, bz = self.brick_coords(rank)
        lsize = tuple(self.size[k] // self.decomposition[k] for k in range(3))
        offset = (bx * lsize[0], by * lsize[1], bz * lsize[2])
        return LocalDomain(offset=offset, size=lsize, guard_width=guard_width)

    def local_domains(self, guard_width: int = 1) -> list["LocalDomain"]:
        return [self.local_domain(r, guard_width) for r in range(self.rank_count)]


@dataclass(frozen=True)
class LocalDomain:
    """One rank's disjoint cuboid, with a guard halo outside it."""

    offset: IntTriple
    size: IntTriple
    guard_width: int = 1

    def __post_init__(self):
        if any(o < 0 for o in self.offset) or any(s <= 0 for s in self.size):
            raise FieldError("offset must be non-negative, size positive")
        if self.guard_width < 0:
            raise FieldError("guard width must be non-negative")

    def contains(self, index: Sequence[int]) -> bool:
        return all(0 <= index[k] < self.size[k] for k in range(3))

    def in_halo(self, index: Sequence[int]) -> bool:
        g = self.guard_width
        return all(-g <= index[k] < self.size[k] + g for k in range(3))


@dataclass(frozen=True)
class SourceDescriptor:
    name: str
    feature_dim: int
    has_guard: bool = False
    persistent: bool = True

    def __post_init__(self):
        if not 1 <= self.feature_dim <= MAX_FEATURE_DIM:
            raise FieldError(f"feature_dim must be 1..4, got {self.feature_dim}")


# Scalar sampler: (i, j, k) local index -> FieldVector.
Sampler = Callable[[int, int, int], FieldVector]
# Batch sampler: three int arrays of local indices -> (n, dim) float array.
BatchSampler = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
UpdateHook = Callable[[bool, object], None]


class SourceHandle:
    """A registered accessor plus its per-frame update hook.

    The handle counts every sample served, which is how the renderer's
    "inactive sources are never touched" contract is verified.  Samplers must
    be pure between two update calls; the renderer relies on that to run
    data-parallel without coordination.
    """

    def __init__(
        self,
        descriptor: SourceDescriptor,
        sampler: Sampler,
        update_hook: Optional[UpdateHook] = None,
        batch_sampler: Optional[BatchSampler] = None,
    ):
        self.descriptor = descriptor
        self._sampler = sampler
        self._batch_sampler = batch_sampler
        self._update_hook = update_hook
        self.sample_count = 0

    def sample_raw(self, i: int, j: int, k: int) -> FieldVector:
        self.sample_count += 1
        return self._sampler(i, j, k)

    def sample_raw_many(self, ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
        """(n,) index arrays -> (n, dim) values, bypassing range checks."""
        self.sample_count += int(ix.size)
        if self._batch_sampler is not None:
            out = np.asarray(self._batch_sampler(ix, iy, iz), dtype=np.float64)
            if out.ndim == 1:
                out = out[:, None]
            return out
        dim = self.descriptor.feature_dim
        out = np.empty((ix.size, dim), dtype=np.float64)
        self.sample_count -= int(ix.size)  # sample_raw re-counts
        for n in range(ix.size):
            out[n, :] = self.sample_raw(int(ix[n]), int(iy[n]), int(iz[n])).components
        return out

    def update(self, enabled: bool, payload: object) -> None:
        if self._update_hook is not None:
            self._update_hook(enabled, payload)


def sample(
    source: SourceHandle,
    domain: LocalDomain,
    index: Sequence[int],
    interpolation_enabled: bool = False,
) -> FieldVector:
    """Read one value under the guard/clamp contract.

    Guard-halo indices are legal only when the source declares a guard and
    interpolation is on; otherwise out-of-range indices clamp componentwise
    into the local volume.  Indices beyond the halo are a caller bug.
    """
    i, j, k = (int(index[0]), int(index[1]), int(index[2]))
    if _guard_permitted(source, interpolation_enabled):
        if not domain.in_halo((i, j, k)):
            raise GuardContractError(
                f"index {(i, j, k)} beyond guard halo of {source.descriptor.name}"
            )
    elif not domain.contains((i, j, k)):
        i = min(max(i, 0), domain.size[0] - 1)
        j = min(max(j, 0), domain.size[1] - 1)
        k = min(max(k, 0), domain.size[2] - 1)
    return source.sample_raw(i, j, k)


def sample_many(
    source: SourceHandle,
    domain: LocalDomain,
    ix: np.ndarray,
    iy: np.ndarray,
    iz: np.ndarray,
    interpolation_enabled: bool = False,
) -> np.ndarray:
    """Vectorized :func:`sample`: same contract, (n, dim) result."""
    sx, sy, sz = domain.size
    if _guard_permitted(source, interpolation_enabled):
        g = domain.guard_width
        bad = (
            (ix < -g) | (ix >= sx + g)
            | (iy < -g) | (iy >= sy + g)
            | (iz < -g) | (iz >= sz + g)
        )
        if bad.any():
            raise GuardContractError(
                f"{int(bad.sum())} indices beyond guard halo of {source.descriptor.name}"
            )
        return source.sample_raw_many(ix, iy, iz)
    return source.sample_raw_many(
        np.clip(ix, 0, sx - 1), np.clip(iy, 0, sy - 1), np.clip(iz, 0, sz - 1)
    )


def _guard_permitted(source: SourceHandle, interpolation_enabled: bool) -> bool:
    return source.descriptor.has_guard and interpolation_enabled


def array_backed_handle(
    descriptor: SourceDescriptor,
    array: np.ndarray,
    guard_width: int,
    update_hook: Optional[UpdateHook] = None,
) -> SourceHandle:
    """Handle over a (z, y, x[, dim]) array that includes the guard halo.

    The array is read in place (zero copy); mutating it changes what the
    handle serves.  ``array.shape[k] == size[k] + 2 * guard_width`` per axis.
    """
    g = guard_width
    dim = descriptor.feature_dim
    if array.ndim == 3:
        if dim != 1:
            raise FieldError("3d array implies feature_dim 1")
    elif array.ndim != 4 or array.shape[3] != dim:
        raise FieldError("array must be (z, y, x) or (z, y, x, dim)")

    def scalar(i: int, j: int, k: int) -> FieldVector:
        v = array[k + g, j + g, i + g]
        if dim == 1 and array.ndim == 3:
            return FieldVector((float(v),))
        return FieldVector(tuple(float(c) for c in np.atleast_1d(v)))

    def batch(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
        v = array[iz + g, iy + g, ix + g]
        return v[:, None] if v.ndim == 1 else v

    return SourceHandle(descriptor, scalar, update_hook, batch)


def snapshot_non_persistent(source: SourceHandle, domain: LocalDomain) -> SourceHandle:
    """Copy a non-persistent source into a private buffer.

    The original sampler is invoked exhaustively over the local domain (plus
    guard if the source has one); afterwards the application may clobber the
    backing store without affecting the returned handle.
    """
    if source.descriptor.persistent:
        raise FieldError(f"source {source.descriptor.name} is persistent; no snapshot needed")
    g = domain.guard_width if source.descriptor.has_guard else 0
    sx, sy, sz = domain.size
    dim = source.descriptor.feature_dim
    zz, yy, xx = np.meshgrid(
        np.arange(-g, sz + g), np.arange(-g, sy + g), np.arange(-g, sx + g), indexing="ij"
    )
    values = source.sample_raw_many(xx.ravel(), yy.ravel(), zz.ravel())
    buf = np.ascontiguousarray(
        values.reshape(sz + 2 * g, sy + 2 * g, sx + 2 * g, dim).copy()
    )
    desc = replace(source.descriptor, persistent=True)
    if not source.descriptor.has_guard:
        # Buffer covers the domain only; wrap it with a zero-width halo.
        return array_backed_handle(desc, buf, 0)
    return array_backed_handle(desc, buf, g)


@dataclass
class RegisteredSource:
    source_id: int
    handle: SourceHandle
    # What the renderer reads this frame: the handle itself for persistent
    # sources, a fresh snapshot for active non-persistent ones.
    render_handle: Optional[SourceHandle] = None


class SourceRegistry:
    """Per-rank, registration-ordered list of sources."""

    def __init__(self, domain: LocalDomain):
        self.domain = domain
        self._sources: list[RegisteredSource] = []
        self._by_name: dict[str, int] = {}

    def register_source(
        self,
        descriptor: SourceDescriptor,
        sampler: Sampler,
        update_hook: Optional[UpdateHook] = None,
        batch_sampler: Optional[BatchSampler] = None,
    ) -> int:
        if descriptor.name in self._by_name:
            raise DuplicateSourceError(f"source {descriptor.name!r} already registered")
        handle = SourceHandle(descriptor, sampler, update_hook, batch_sampler)
        source_id = len(self._sources)
        self._sources.append(RegisteredSource(source_id, handle))
        self._by_name[descriptor.name] = source_id
        return source_id

    def register_handle(self, handle: SourceHandle) -> int:
        if handle.descriptor.name in self._by_name:
            raise DuplicateSourceError(f"source {handle.descriptor.name!r} already registered")
        source_id = len(self._sources)
        self._sources.append(RegisteredSource(source_id, handle))
        self._by_name[handle.descriptor.name] = source_id
        return source_id

    def __len__(self) -> int:
        return len(self._sources)

    def __iter__(self):
        return iter(self._sources)

    @property
    def source_ids(self) -> list[int]:
        return [s.source_id for s in self._sources]

    def handle(self, source_id: int) -> SourceHandle:
        return self._sources[source_id].handle

    def render_handle(self, source_id: int) -> SourceHandle:
        entry = self._sources[source_id]
        if entry.render_handle is None:
            raise FieldError(
                f"source {entry.handle.descriptor.name!r} has no render handle; "
                "was update_sources called with it active?"
            )
        return entry.render_handle

    def descriptor(self, source_id: int) -> SourceDescriptor:
        return self._sources[source_id].handle.descriptor

    def catalog(self) -> list[dict]:
        return [
            {"name": s.handle.descriptor.name, "feature_dim": s.handle.descriptor.feature_dim}
            for s in self._sources
        ]


def update_sources(registry: SourceRegistry, active_set: Iterable[int], frame_payload: object) -> None:
    """Run every update hook in registration order, snapshotting as we go.

    A non-persistent active source is snapshotted immediately after its own
    hook returns, before the next source's hook runs, so several sources may
    share one scratch buffer.
    """
    active = set(active_set)
    for entry in registry:
        enabled = entry.source_id in active
        try:
            entry.handle.update(enabled, frame_payload)
        except Exception as exc:
            raise SourceUpdateError(f"{entry.handle.descriptor.name}: {exc}") from exc
        if entry.handle.descriptor.persistent:
            entry.render_handle = entry.handle
        elif enabled:
            entry.render_handle = snapshot_non_persistent(entry.handle, registry.domain)
        else:
            entry.render_handle = None


def tile_check(volume: GlobalVolume) -> bool:
    """Exhaustively verify the decomposition tiles the volume disjointly."""
    seen = np.zeros(volume.size[::-1], dtype=np.int32)
    for dom in volume.local_domains(guard_width=0):
        ox, oy, oz = dom.offset
        sx, sy, sz = dom.size
        seen[oz:oz + sz, oy:oy + sy, ox:ox + sx] += 1
    return bool((seen == 1).all())
