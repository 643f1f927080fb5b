"""Scene state: camera, transfer functions, clip planes, render settings.

One :class:`SceneState` is owned by rank 0, mutated by steering, and broadcast
to all ranks before each frame; every rank re-derives lookup tables and
functor chains from the broadcast text so the render inputs are identical
everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

LUT_SIZE = 256


class SceneError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    """Perspective pinhole camera in global cell coordinates."""

    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = math.radians(45.0)
    image_size: tuple[int, int] = (480, 270)

    def __post_init__(self):
        if not 0.0 < self.vertical_fov < math.pi:
            raise SceneError("vertical_fov must be in (0, pi)")
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        n = np.linalg.norm(fwd)
        if n == 0.0:
            raise SceneError("camera position and look_at coincide")
        upv = np.asarray(self.up, dtype=np.float64)
        if np.linalg.norm(np.cross(fwd / n, upv)) < 1e-9:
            raise SceneError("up vector is parallel to the view direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unit (forward, right, up) triple."""
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def ray_directions(self) -> np.ndarray:
        """(H*W, 3) unit directions, row-major over pixels."""
        w, h = self.image_size
        fwd, right, up = self.basis()
        tan_half = math.tan(self.vertical_fov / 2.0)
        aspect = w / h
        px = (np.arange(w, dtype=np.float64) + 0.5) / w * 2.0 - 1.0
        py = 1.0 - (np.arange(h, dtype=np.float64) + 0.5) / h * 2.0
        xs, ys = np.meshgrid(px * tan_half * aspect, py * tan_half)
        dirs = (
            fwd[None, None, :]
            + xs[:, :, None] * right[None, None, :]
            + ys[:, :, None] * up[None, None, :]
        )
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        return dirs.reshape(-1, 3)


@dataclass(frozen=True)
class ClipPlane:
    """Keeps the half-space where dot(p - point, normal) >= 0."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.normal))
        if abs(n - 1.0) > 1e-6:
            raise SceneError(f"clip plane normal must be unit length, |n|={n}")


def clip_plane(point: Sequence[float], normal: Sequence[float]) -> ClipPlane:
    """Build a plane, normalizing the given normal."""
    n = np.asarray(normal, dtype=np.float64)
    length = np.linalg.norm(n)
    if length == 0.0:
        raise SceneError("clip plane normal must be non-zero")
    n = n / length
    return ClipPlane(tuple(float(p) for p in point), tuple(float(c) for c in n))


@dataclass(frozen=True)
class TransferFunction:
    """256-entry RGBA lookup over a per-source value range."""

    lut: np.ndarray  # (256, 4) float64 in [0, 1]
    value_range: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.value_range
        if not lo < hi:
            raise SceneError(f"value range must satisfy min < max, got {self.value_range}")
        if self.lut.shape != (LUT_SIZE, 4):
            raise SceneError(f"lut must be ({LUT_SIZE}, 4), got {self.lut.shape}")
        if not np.isfinite(self.lut).all():
            raise SceneError("lut entries must be finite")


def tf_from_points(
    points: Sequence[Sequence[float]], value_range: tuple[float, float]
) -> TransferFunction:
    """Piecewise-linear LUT from (t, r, g, b, a) control points, t in [0, 1]."""
    pts = sorted((tuple(map(float, p)) for p in points), key=lambda p: p[0])
    if not pts:
        pts = [(0.0, 0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 1.0, 1.0)]
    ts = np.asarray([p[0] for p in pts])
    lut = np.empty((LUT_SIZE, 4), dtype=np.float64)
    xs = np.linspace(0.0, 1.0, LUT_SIZE)
    for c in range(4):
        ys = np.asarray([p[c + 1] for p in pts])
        lut[:, c] = np.interp(xs, ts, ys)
    return TransferFunction(lut, value_range)


def classify(tf: TransferFunction, value: float) -> tuple[float, float, float, float]:
    """Map a scalar through the value range and LUT to straight RGBA.

    NaN (the quiet sentinel from e.g. pow on a negative base) classifies as
    fully transparent.
    """
    rgba = classify_array(tf, np.asarray([value], dtype=np.float64))[0]
    return (float(rgba[0]), float(rgba[1]), float(rgba[2]), float(rgba[3]))


def classify_array(tf: TransferFunction, values: np.ndarray) -> np.ndarray:
    lo, hi = tf.value_range
    nan = ~np.isfinite(values)
    with np.errstate(invalid="ignore"):
        t = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    t = np.where(nan, 0.0, t)
    x = t * (LUT_SIZE - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, LUT_SIZE - 1)
    frac = (x - i0)[:, None]
    rgba = tf.lut[i0] * (1.0 - frac) + tf.lut[i1] * frac
    if nan.any():
        rgba[nan] = 0.0
    return rgba


VOLUME_MODE = "volume"
ISO_MODE = "iso"


@dataclass(frozen=True)
class RenderSettings:
    active_set: tuple[int, ...] = ()
    modes: dict = field(default_factory=dict)  # source id -> "volume" | "iso"
    iso_thresholds: dict = field(default_factory=dict)
    interpolation: bool = True
    step_length: float = 0.5
    early_termination_alpha: float = 0.99

    def __post_init__(self):
        if self.step_length <= 0:
            raise SceneError("step_length must be positive")
        if not 0.0 < self.early_termination_alpha <= 1.0:
            raise SceneError("early_termination_alpha must be in (0, 1]")

    def mode(self, source_id: int) -> str:
        return self.modes.get(source_id, VOLUME_MODE)

    def iso_threshold(self, source_id: int) -> float:
        return float(self.iso_thresholds.get(source_id, 0.5))


@dataclass(frozen=True)
class SceneState:
    """Everything a rank needs to render a frame, mutable only by steering."""

    camera: Camera
    # Per source id: transfer function control points and value range.
    tf_points: dict = field(default_factory=dict)   # sid -> list of (t, r, g, b, a)
    value_ranges: dict = field(default_factory=dict)  # sid -> (lo, hi)
    chain_texts: dict = field(default_factory=dict)   # sid -> str
    settings: RenderSettings = field(default_factory=RenderSettings)
    clip_planes: tuple[ClipPlane, ...] = ()
    render_period: int = 1
    version: int = 0

    def transfer_function(self, source_id: int) -> TransferFunction:
        points = self.tf_points.get(source_id, ())
        value_range = tuple(self.value_ranges.get(source_id, (0.0, 1.0)))
        return tf_from_points(points, value_range)

    def chain_text(self, source_id: int) -> str:
        return self.chain_texts.get(source_id, "")

    def bump(self, **changes) -> "SceneState":
        return replace(self, version=self.version + 1, **changes)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "camera": {
                "position": list(self.camera.position),
                "look_at": list(self.camera.look_at),
                "up": list(self.camera.up),
                "vertical_fov": self.camera.vertical_fov,
                "image_size": list(self.camera.image_size),
            },
            "tf_points": {str(k): [list(p) for p in v] for k, v in self.tf_points.items()},
            "value_ranges": {str(k): list(v) for k, v in self.value_ranges.items()},
            "chain_texts": {str(k): v for k, v in self.chain_texts.items()},
            "settings": {
                "active_set": list(self.settings.active_set),
                "modes": {str(k): v for k, v in self.settings.modes.items()},
                "iso_thresholds": {str(k): v for k, v in self.settings.iso_thresholds.items()},
                "interpolation": self.settings.interpolation,
                "step_length": self.settings.step_length,
                "early_termination_alpha": self.settings.early_termination_alpha,
            },
            "clip_planes": [
                {"point": list(p.point), "normal": list(p.normal)} for p in self.clip_planes
            ],
            "render_period": self.render_period,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode("utf-8")

    @staticmethod
    def from_json(doc: dict) -> "SceneState":
        cam = doc["camera"]
        settings = doc["settings"]
        return SceneState(
            camera=Camera(
                position=tuple(cam["position"]),
                look_at=tuple(cam["look_at"]),
                up=tuple(cam["up"]),
                vertical_fov=float(cam["vertical_fov"]),
                image_size=tuple(int(v) for v in cam["image_size"]),
            ),
            tf_points={int(k): [tuple(p) for p in v] for k, v in doc["tf_points"].items()},
            value_ranges={int(k): tuple(v) for k, v in doc["value_ranges"].items()},
            chain_texts={int(k): v for k, v in doc["chain_texts"].items()},
            settings=RenderSettings(
                active_set=tuple(int(s) for s in settings["active_set"]),
                modes={int(k): v for k, v in settings["modes"].items()},
                iso_thresholds={int(k): float(v) for k, v in settings["iso_thresholds"].items()},
                interpolation=bool(settings["interpolation"]),
                step_length=float(settings["step_length"]),
                early_termination_alpha=float(settings["early_termination_alpha"]),
            ),
            clip_planes=tuple(
                ClipPlane(tuple(p["point"]), tuple(p["normal"])) for p in doc["clip_planes"]
            ),
            render_period=int(doc["render_period"]),
            version=int(doc["version"]),
        )

    @staticmethod
    def from_bytes(data: bytes) -> "SceneState":
        return SceneState.from_json(json.loads(data.decode("utf-8")))
