"""Per-frame pipeline across ranks: steer -> broadcast -> render -> composite
-> encode/send.

Rank 0 is the only gateway-facing endpoint.  Its encode+send of frame S runs
on a background thread while the application computes step S+1; the pipeline
for frame S+1 blocks at entry until that send completes, which is the single
rendezvous point per frame.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .compositing import binary_swap, visibility_order
from .fields import GlobalVolume, LocalDomain, SourceRegistry, update_sources
from .functors import ChainLimits, ChainError, FunctorRegistry, parse_chain
from .raycast import LocalImage, build_plans, render_local
from .scene import Camera, RenderSettings, SceneState, clip_plane

log = logging.getLogger(__name__)

RAW_RGBA8 = "raw-rgba8"
PNG = "png"

# Steering actions that control the harness rather than the scene.
CONTROL_ACTIONS = ("pause", "resume", "step", "exit")


class FrameAborted(Exception):
    def __init__(self, reason: str, controls: Optional[list[dict]] = None):
        super().__init__(reason)
        self.controls = controls or []


def encode_frame(image: np.ndarray, encoding: str = RAW_RGBA8,
                 quality: Optional[int] = None) -> str:
    """Encode premultiplied float RGBA to base64.

    The quality knob is part of the message schema for compatibility; both
    encodings here are lossless past the 8-bit quantization.
    """
    data = to_rgba8(image)
    if encoding == RAW_RGBA8:
        raw = data.tobytes()
    elif encoding == PNG:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(data, mode="RGBA").save(buf, format="PNG")
        raw = buf.getvalue()
    else:
        raise ValueError(f"unknown frame encoding {encoding!r}")
    return base64.b64encode(raw).decode("ascii")


def to_rgba8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def decode_frame(data: str, width: int, height: int, encoding: str = RAW_RGBA8) -> np.ndarray:
    raw = base64.b64decode(data)
    if encoding == RAW_RGBA8:
        return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 4)
    if encoding == PNG:
        from PIL import Image

        return np.asarray(Image.open(io.BytesIO(raw)).convert("RGBA"))
    raise ValueError(f"unknown frame encoding {encoding!r}")


def merge_metadata(per_rank_docs: Sequence[dict]) -> dict:
    """Merge rank metadata documents into one valid JSON object.

    Keys appear in rank order.  A key whose every contribution is an array
    concatenates in rank order; any other duplicated key keeps its first
    occurrence and later ones are dropped.
    """
    occurrences: dict = {}
    for doc in per_rank_docs:
        if not doc:
            continue
        for key, value in doc.items():
            occurrences.setdefault(key, []).append(value)
    merged: dict = {}
    for key, values in occurrences.items():
        if len(values) > 1 and all(isinstance(v, list) for v in values):
            merged[key] = [item for v in values for item in v]
        else:
            merged[key] = values[0]
    return merged


@dataclass
class SteeringResult:
    scene: SceneState
    controls: list[dict]
    dropped: int = 0
    unknown: int = 0


def apply_steering(scene: SceneState, messages: Sequence[object]) -> SteeringResult:
    """Fold steering payloads into the scene, last writer wins per field.

    Harness-level actions (pause/resume/step/exit) are returned as control
    events instead of touching the scene.  Malformed JSON strings are dropped
    and counted; unknown actions are counted and ignored.
    """
    controls: list[dict] = []
    dropped = 0
    unknown = 0
    for raw in messages:
        if isinstance(raw, (str, bytes)):
            try:
                msg = json.loads(raw)
            except (ValueError, UnicodeDecodeError):
                dropped += 1
                continue
        else:
            msg = raw
        if not isinstance(msg, dict):
            dropped += 1
            continue
        action = msg.get("action")
        try:
            if action in CONTROL_ACTIONS:
                controls.append(msg)
            elif action == "set_period":
                scene = scene.bump(render_period=max(1, int(msg["value"])))
            elif action == "set_active_sources":
                scene = scene.bump(
                    settings=replace(
                        scene.settings,
                        active_set=tuple(sorted(int(s) for s in msg["ids"])),
                    )
                )
            elif action == "set_functor_chain":
                texts = dict(scene.chain_texts)
                texts[int(msg["source_id"])] = str(msg["text"])
                scene = scene.bump(chain_texts=texts)
            elif action == "set_transfer_function":
                points = dict(scene.tf_points)
                points[int(msg["source_id"])] = [tuple(map(float, p)) for p in msg["points"]]
                scene = scene.bump(tf_points=points)
            elif action == "set_range":
                ranges = dict(scene.value_ranges)
                ranges[int(msg["source_id"])] = (float(msg["min"]), float(msg["max"]))
                scene = scene.bump(value_ranges=ranges)
            elif action == "set_camera":
                cam = scene.camera
                scene = scene.bump(
                    camera=Camera(
                        position=tuple(msg.get("position", cam.position)),
                        look_at=tuple(msg.get("look_at", cam.look_at)),
                        up=tuple(msg.get("up", cam.up)),
                        vertical_fov=float(msg.get("vertical_fov", cam.vertical_fov)),
                        image_size=cam.image_size,
                    )
                )
            elif action == "set_clip_planes":
                planes = tuple(
                    clip_plane(p["point"], p["normal"]) for p in msg.get("planes", [])
                )
                scene = scene.bump(clip_planes=planes)
            elif action == "set_interpolation":
                scene = scene.bump(
                    settings=replace(scene.settings, interpolation=bool(msg["value"]))
                )
            else:
                unknown += 1
                log.warning("ignoring steering message with unknown action %r", action)
        except (KeyError, TypeError, ValueError) as exc:
            dropped += 1
            log.warning("dropping malformed steering message %r: %s", msg, exc)
    return SteeringResult(scene, controls, dropped, unknown)


class FrameStreamer:
    """Background encode+send of the finished frame on rank 0.

    Exactly one job may be in flight; wait_previous() is the per-frame
    rendezvous.  Timestamps of send begin/end feed the overlap checks.
    """

    def __init__(self, sink: Callable[[dict], None],
                 encoder: Callable[[np.ndarray, str, Optional[int]], str] = encode_frame,
                 encoding: str = RAW_RGBA8, quality: Optional[int] = None):
        self.sink = sink
        self.encoder = encoder
        self.encoding = encoding
        self.quality = quality
        self.timeline: list[tuple[str, int, float]] = []
        self._pending: Optional[threading.Thread] = None
        self._failure: Optional[BaseException] = None

    def mark(self, event: str, step: int) -> None:
        self.timeline.append((event, step, time.monotonic()))

    def wait_previous(self) -> None:
        if self._pending is not None:
            self._pending.join()
            self._pending = None
        if self._failure is not None:
            failure, self._failure = self._failure, None
            raise failure

    def submit(self, image: np.ndarray, step: int, metadata: dict, scene: SceneState) -> None:
        if self._pending is not None:
            raise RuntimeError("previous frame still in flight; wait_previous() first")

        def job():
            try:
                self.mark("send_begin", step)
                h, w = image.shape[0], image.shape[1]
                payload = {
                    "type": "frame",
                    "step": step,
                    "image": {
                        "width": w,
                        "height": h,
                        "encoding": self.encoding,
                        "data": self.encoder(image, self.encoding, self.quality),
                    },
                    "metadata": metadata,
                    "scene": scene.to_json(),
                }
                self.sink(payload)
            except BaseException as exc:  # noqa: BLE001 - surfaced at rendezvous
                self._failure = exc
            finally:
                self.mark("send_end", step)

        self._pending = threading.Thread(target=job, daemon=True)
        self._pending.start()

    def close(self) -> None:
        if self._pending is not None:
            self._pending.join()
            self._pending = None


@dataclass
class FrameResult:
    step: int
    image: Optional[np.ndarray]  # full frame, root only
    metadata: dict
    controls: list[dict]
    render_seconds: float
    composite_seconds: float
    stations: int
    aborted: bool = False


@dataclass
class RankContext:
    """Everything one rank carries across frames."""

    transport: object
    global_volume: GlobalVolume
    domain: LocalDomain
    registry: SourceRegistry
    functor_registry: FunctorRegistry
    limits: ChainLimits
    scene: SceneState
    # Root only:
    inbox: "queue.Queue[object]" = field(default_factory=queue.Queue)
    streamer: Optional[FrameStreamer] = None
    error_sink: Optional[Callable[[dict], None]] = None
    metadata_hook: Optional[Callable[[int], dict]] = None
    steering_dropped: int = 0
    steering_unknown: int = 0

    @property
    def rank(self) -> int:
        return self.transport.rank

    @property
    def is_root(self) -> bool:
        return self.transport.rank == 0

    def drain_inbox(self) -> list[object]:
        out = []
        while True:
            try:
                out.append(self.inbox.get_nowait())
            except queue.Empty:
                return out


def _validate_chains(ctx: RankContext, scene: SceneState) -> None:
    for sid in scene.settings.active_set:
        dim = ctx.registry.descriptor(sid).feature_dim
        parse_chain(scene.chain_text(sid), ctx.functor_registry, ctx.limits, dim)


def broadcast_scene(ctx: RankContext, scene: Optional[SceneState] = None,
                    controls: Sequence[dict] = ()) -> tuple[SceneState, list[dict]]:
    """Propagate the root's scene (and control events) to every rank.

    All ranks re-parse the scene from the broadcast bytes, so derived state
    like functor chains is rebuilt identically everywhere.  A chain that no
    longer parses aborts the frame on all ranks and keeps the previous scene.
    """
    if ctx.is_root:
        assert scene is not None
        envelope: dict = {"controls": list(controls)}
        try:
            _validate_chains(ctx, scene)
            envelope["scene"] = scene.to_json()
        except ChainError as exc:
            envelope["abort"] = str(exc)
            envelope["scene"] = ctx.scene.to_json()  # retained previous scene
        payload = json.dumps(envelope, sort_keys=True).encode("utf-8")
        ctx.transport.broadcast_from_root(payload)
    else:
        payload = ctx.transport.broadcast_from_root()
        envelope = json.loads(payload.decode("utf-8"))
    new_scene = SceneState.from_json(envelope["scene"])
    ctx.scene = new_scene
    if "abort" in envelope:
        if ctx.is_root and ctx.error_sink is not None:
            ctx.error_sink({"type": "error", "error": envelope["abort"]})
        raise FrameAborted(envelope["abort"], list(envelope.get("controls", ())))
    return new_scene, list(envelope.get("controls", ()))


def frame_pipeline(ctx: RankContext, frame_payload: dict) -> Optional[FrameResult]:
    """Run one frame on this rank; root hands the image to the background
    streamer and returns immediately so the application can continue."""
    step = int(frame_payload.get("step", 0))
    controls: list[dict] = []
    scene = ctx.scene
    if ctx.is_root:
        if ctx.streamer is not None:
            ctx.streamer.wait_previous()
        steering = apply_steering(ctx.scene, ctx.drain_inbox())
        ctx.steering_dropped += steering.dropped
        ctx.steering_unknown += steering.unknown
        scene = steering.scene
        controls = steering.controls
    try:
        scene, controls = broadcast_scene(ctx, scene, controls)
    except FrameAborted as abort:
        return FrameResult(step, None, {}, abort.controls, 0.0, 0.0, 0, aborted=True)

    update_sources(ctx.registry, scene.settings.active_set, frame_payload)

    t_render = time.monotonic()
    if ctx.is_root and ctx.streamer is not None:
        ctx.streamer.mark("render_begin", step)
    image = render_local(ctx, scene)
    render_seconds = time.monotonic() - t_render

    order = visibility_order(ctx.global_volume, scene.camera)
    image.order_key = order.index(ctx.rank)
    t_comp = time.monotonic()
    full = binary_swap(ctx.transport, image.pixels, order)
    composite_seconds = time.monotonic() - t_comp

    rank_doc = ctx.metadata_hook(step) if ctx.metadata_hook is not None else {}
    rank_doc = dict(rank_doc)
    rank_doc.setdefault("render_ms", [render_seconds * 1000.0])
    gathered = ctx.transport.gather_to_root(json.dumps(rank_doc).encode("utf-8"))

    metadata: dict = {}
    if ctx.is_root:
        docs = [json.loads(d.decode("utf-8")) for d in gathered]
        metadata = merge_metadata(docs)
        if ctx.streamer is not None:
            ctx.streamer.submit(full, step, metadata, scene)
    return FrameResult(
        step=step,
        image=full if ctx.is_root else None,
        metadata=metadata,
        controls=controls,
        render_seconds=render_seconds,
        composite_seconds=composite_seconds,
        stations=image.stations,
    )
