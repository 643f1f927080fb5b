"""Deterministic toy simulation driving the full stack.

Analytic shear-flow fields on a periodic, decomposed grid: density is advected
by a two-stream velocity profile with a time-dependent sinusoidal wiggle; the
state at step k is recomputed from the parameters alone, so any rank layout
reproduces the same fields bit for bit and guards are refilled analytically
with no inter-rank exchange.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .fields import (
    GlobalVolume,
    LocalDomain,
    SourceDescriptor,
    SourceRegistry,
    array_backed_handle,
)
from .functors import default_registry
from .gateway import PROTOCOL_VERSION
from .runtime import (
    RAW_RGBA8,
    FrameStreamer,
    RankContext,
    frame_pipeline,
    to_rgba8,
)
from .scene import Camera, RenderSettings, SceneState
from .transport import LocalFabric

log = logging.getLogger("insitu.harness")

GUARD = 1


@dataclass(frozen=True)
class ToyParameters:
    shear_speed: float = 0.5
    perturbation: float = 0.08
    seed: int = 7
    dt: float = 0.5


@dataclass
class HarnessConfig:
    size: tuple[int, int, int] = (64, 64, 64)
    ranks: tuple[int, int, int] = (2, 2, 2)
    steps: int = 10
    period: int = 1
    image_size: tuple[int, int] = (480, 270)
    gateway: Optional[str] = None  # "host:port", None = offline
    out_dir: Optional[str] = None
    active_sources: tuple[int, ...] = (0,)
    interpolation: bool = True
    step_length: float = 0.5
    name: str = "toy-shear-flow"
    params: ToyParameters = field(default_factory=ToyParameters)
    encoding: str = RAW_RGBA8
    steering_log: Optional[str] = None
    pause_sleep: float = 0.05

    def volume(self) -> GlobalVolume:
        return GlobalVolume(self.size, self.ranks)


def default_scene(config: HarnessConfig) -> SceneState:
    sx, sy, sz = config.size
    center = (sx / 2.0, sy / 2.0, sz / 2.0)
    diag = math.sqrt(sx * sx + sy * sy + sz * sz)
    position = (sx * 1.4, sy * 1.15, -0.8 * diag)
    warm = [
        (0.0, 0.05, 0.05, 0.25, 0.0),
        (0.45, 0.1, 0.45, 0.85, 0.35),
        (0.75, 0.95, 0.65, 0.2, 0.7),
        (1.0, 1.0, 0.95, 0.75, 0.95),
    ]
    cool = [
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.6, 0.1, 0.7, 0.4, 0.3),
        (1.0, 0.7, 1.0, 0.9, 0.8),
    ]
    return SceneState(
        camera=Camera(
            position=position,
            look_at=center,
            up=(0.0, 1.0, 0.0),
            image_size=config.image_size,
        ),
        tf_points={0: warm, 1: cool, 2: cool},
        value_ranges={0: (0.4, 1.7), 1: (-1.0, 1.0), 2: (-1.5, 1.5)},
        chain_texts={0: "", 1: "length", 2: "length"},
        settings=RenderSettings(
            active_set=tuple(config.active_sources),
            interpolation=config.interpolation,
            step_length=config.step_length,
            # 1.0 keeps frames independent of the rank layout: stopping a ray
            # early inside one brick is invisible only to that brick, and the
            # compositor would still blend the bricks behind it.
            early_termination_alpha=1.0,
        ),
        render_period=config.period,
    )


class ToyState:
    """Per-rank analytic fields over the local domain plus guard."""

    def __init__(self, config: HarnessConfig, domain: LocalDomain):
        self.params = config.params
        self.global_size = config.size
        self.domain = domain
        self.step_index = 0
        g = GUARD
        sx, sy, sz = domain.size
        shape = (sz + 2 * g, sy + 2 * g, sx + 2 * g)
        ox, oy, oz = domain.offset
        zs = np.arange(oz - g, oz + sz + g, dtype=np.float64)
        ys = np.arange(oy - g, oy + sy + g, dtype=np.float64)
        xs = np.arange(ox - g, ox + sx + g, dtype=np.float64)
        self._zg, self._yg, self._xg = np.meshgrid(zs, ys, xs, indexing="ij")
        self.density = np.empty(shape)
        self.velocity = np.empty(shape + (3,))
        self.scratch = np.empty(shape + (3,))  # shared buffer for derived sources
        self.refresh()

    # Flow definition: a tanh shear along x plus a sinusoidal vertical wiggle,
    # both periodic; each step map is volume preserving, so the continuum
    # density integral is conserved exactly and the grid sum to spectral
    # accuracy.
    def _shear_u(self, y: np.ndarray) -> np.ndarray:
        ly = self.global_size[1]
        return self.params.shear_speed * np.tanh(3.0 * np.sin(2.0 * math.pi * y / ly))

    def _wiggle_w(self, x: np.ndarray, step_index: int) -> np.ndarray:
        lx = self.global_size[0]
        p = self.params
        phase = 2.0 * math.pi * ((step_index * 0.03 + p.seed * 0.17) % 1.0)
        return p.perturbation * np.sin(2.0 * math.pi * x / lx + phase)

    def _backtrace(self, step_index: int):
        """Map grid points back through step_index inverse step maps."""
        x = self._xg.copy()
        y = self._yg.copy()
        dt = self.params.dt
        for j in range(step_index, 0, -1):
            # Forward step j-1 -> j is shear-then-wiggle; invert in reverse.
            y -= self._wiggle_w(x, j - 1) * dt
            x -= self._shear_u(y) * dt
        return x, y

    def _density0(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        lx, ly, lz = self.global_size
        return (
            1.0
            + 0.35 * np.sin(2.0 * math.pi * x / lx) * np.sin(2.0 * math.pi * y / ly)
            + 0.25 * np.cos(2.0 * math.pi * (y / ly + 2.0 * z / lz))
        )

    def refresh(self) -> None:
        x, y = self._backtrace(self.step_index)
        self.density[...] = self._density0(x, y, self._zg)
        self.velocity[..., 0] = self._shear_u(self._yg)
        self.velocity[..., 1] = self._wiggle_w(self._xg, self.step_index)
        self.velocity[..., 2] = 0.0

    def advance(self) -> None:
        self.step_index += 1
        self.refresh()

    def fill_scratch(self) -> None:
        self.scratch[...] = self.density[..., None] * self.velocity

    def density_sum(self) -> float:
        g = GUARD
        return float(self.density[g:-g, g:-g, g:-g].sum())


def step_toy(state: ToyState) -> ToyState:
    state.advance()
    return state


def build_registry(state: ToyState, domain: LocalDomain) -> SourceRegistry:
    registry = SourceRegistry(domain)

    density = array_backed_handle(
        SourceDescriptor("density", 1, has_guard=True, persistent=True),
        state.density, GUARD,
    )
    velocity = array_backed_handle(
        SourceDescriptor("velocity", 3, has_guard=True, persistent=True),
        state.velocity, GUARD,
    )

    def current_update(enabled: bool, payload: object) -> None:
        if enabled:
            state.fill_scratch()

    current = array_backed_handle(
        SourceDescriptor("current", 3, has_guard=True, persistent=False),
        state.scratch, GUARD, update_hook=current_update,
    )
    registry.register_handle(density)
    registry.register_handle(velocity)
    registry.register_handle(current)
    return registry


class FileSink:
    """Offline frame sink: standard image files plus an in-memory transcript."""

    def __init__(self, out_dir: Optional[str], keep_frames: bool = False):
        self.out_dir = out_dir
        self.keep_frames = keep_frames
        self.frames: list[dict] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def __call__(self, message: dict) -> None:
        if message.get("type") != "frame":
            return
        if self.keep_frames:
            self.frames.append(message)
        if self.out_dir:
            from PIL import Image

            from .runtime import decode_frame

            img = message["image"]
            pixels = decode_frame(img["data"], img["width"], img["height"], img["encoding"])
            path = os.path.join(self.out_dir, f"frame_{message['step']}.png")
            Image.fromarray(pixels, mode="RGBA").save(path)


class GatewayLink:
    """Rank 0's persistent line-JSON connection to the gateway."""

    def __init__(self, address: str, inbox: "queue.Queue[object]",
                 steering_log: Optional[str] = None):
        host, _, port = address.rpartition(":")
        self.sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=10)
        self._rfile = self.sock.makefile("rb")
        self._wfile = self.sock.makefile("wb")
        self.inbox = inbox
        self.steering_log = steering_log
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self) -> "GatewayLink":
        self._reader.start()
        return self

    def send_json(self, doc: dict) -> None:
        data = json.dumps(doc, separators=(",", ":")).encode("utf-8") + b"\n"
        try:
            self._wfile.write(data)
            self._wfile.flush()
        except (OSError, ValueError):
            if not self._closed.is_set():
                log.warning("gateway connection lost while sending")
                self._closed.set()

    def _read_loop(self) -> None:
        try:
            for line in self._rfile:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line.decode("utf-8"))
                except ValueError:
                    continue
                if doc.get("type") == "steer":
                    payload = doc.get("payload")
                    if self.steering_log:
                        with open(self.steering_log, "a", encoding="utf-8") as fh:
                            fh.write(json.dumps(payload, separators=(",", ":")) + "\n")
                    self.inbox.put(json.dumps(payload))
        except (OSError, ValueError):
            pass
        finally:
            self._closed.set()

    def close(self) -> None:
        self._closed.set()
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class RankMetrics:
    frames_sent: int = 0
    steps: int = 0
    render_ms: list = field(default_factory=list)
    composite_ms: list = field(default_factory=list)
    frame_steps: list = field(default_factory=list)
    stations: list = field(default_factory=list)


def run(
    config: HarnessConfig,
    frame_hook: Optional[Callable[[int, np.ndarray], None]] = None,
    steering_feed: Optional[Callable[[int, "queue.Queue[object]"], None]] = None,
    keep_frames: bool = False,
    encode_delay: float = 0.0,
) -> dict:
    """Run the toy simulation over in-process ranks; returns final metrics.

    ``frame_hook(step, image)`` observes each composited float frame on rank
    0.  ``steering_feed(step, inbox)`` injects steering messages before each
    step, standing in for a live gateway in tests.
    """
    volume = config.volume()
    ranks = volume.rank_count
    fabric = LocalFabric(ranks)
    scene0 = default_scene(config)
    limits = default_registry().limits
    log.info(
        "functor space: %d combinations (4 * f^c, f=%d, c=%d); evaluated per sample",
        limits.combination_count(), limits.functor_count, limits.max_length,
    )

    sink: Callable[[dict], None]
    link: Optional[GatewayLink] = None
    file_sink = FileSink(config.out_dir, keep_frames=keep_frames)
    root_inbox: "queue.Queue[object]" = queue.Queue()
    if config.gateway:
        link = GatewayLink(config.gateway, root_inbox, config.steering_log).start()
        sink = link.send_json
    else:
        sink = file_sink

    if encode_delay > 0.0:
        inner_sink = sink

        def sink(message: dict, _inner=inner_sink) -> None:  # type: ignore[misc]
            time.sleep(encode_delay)
            _inner(message)

    results: list[Optional[RankMetrics]] = [None] * ranks
    errors: list[tuple[int, BaseException]] = []

    def rank_body(rank: int) -> None:
        transport = fabric.endpoint(rank)
        domain = volume.local_domain(rank, GUARD)
        state = ToyState(config, domain)
        registry = build_registry(state, domain)
        functor_registry = default_registry()
        streamer = None
        if rank == 0:
            streamer = FrameStreamer(sink, encoding=config.encoding)
            if link is not None:
                link.send_json(
                    {
                        "type": "register",
                        "protocol": PROTOCOL_VERSION,
                        "name": config.name,
                        "ranks": ranks,
                        "sources": registry.catalog(),
                    }
                )
        ctx = RankContext(
            transport=transport,
            global_volume=volume,
            domain=domain,
            registry=registry,
            functor_registry=functor_registry,
            limits=functor_registry.limits,
            scene=scene0,
            inbox=root_inbox if rank == 0 else queue.Queue(),
            streamer=streamer,
            error_sink=sink if rank == 0 else None,
            metadata_hook=lambda step: {
                "step": step,
                "name": config.name,
                "density_sum": [state.density_sum()],
            },
        )
        metrics = RankMetrics()
        paused = False
        pending_steps = 0
        exited = False

        def handle_controls(controls) -> None:
            nonlocal paused, pending_steps, exited
            for msg in controls:
                action = msg.get("action")
                if action == "pause":
                    paused = True
                elif action == "resume":
                    paused = False
                elif action == "step":
                    pending_steps += 1
                elif action == "exit":
                    exited = True

        def render_frame() -> None:
            if rank == 0 and streamer is not None:
                streamer.mark("frame_begin", state.step_index)
            result = frame_pipeline(ctx, {"step": state.step_index, "time": state.step_index * config.params.dt})
            handle_controls(result.controls)
            if result.aborted:
                return
            metrics.frames_sent += 1
            metrics.frame_steps.append(state.step_index)
            metrics.render_ms.append(result.render_seconds * 1000.0)
            metrics.composite_ms.append(result.composite_seconds * 1000.0)
            metrics.stations.append(result.stations)
            if rank == 0 and frame_hook is not None and result.image is not None:
                frame_hook(state.step_index, result.image)

        while not exited and metrics.steps < config.steps:
            if rank == 0 and steering_feed is not None:
                steering_feed(state.step_index, root_inbox)
            if paused and pending_steps == 0:
                render_frame()
                if exited:
                    break
                if rank == 0:
                    time.sleep(config.pause_sleep)
                continue
            if rank == 0 and streamer is not None:
                streamer.mark("step_begin", state.step_index + 1)
            step_toy(state)
            metrics.steps += 1
            if pending_steps > 0:
                pending_steps -= 1
            if state.step_index % ctx.scene.render_period == 0:
                render_frame()
        if streamer is not None:
            streamer.close()
        results[rank] = metrics

    threads = [threading.Thread(target=lambda r=r: _guarded(rank_body, r, errors), args=())
               for r in range(ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if link is not None:
        link.close()
    if errors:
        rank, exc = errors[0]
        raise RuntimeError(f"rank {rank} failed: {exc}") from exc

    root = results[0]
    assert root is not None
    metrics_doc = {
        "frames_sent": root.frames_sent,
        "steps": root.steps,
        "mean_render_ms": float(np.mean(root.render_ms)) if root.render_ms else 0.0,
        "mean_composite_ms": float(np.mean(root.composite_ms)) if root.composite_ms else 0.0,
        "frames": [
            {
                "step": s,
                "render_ms": r,
                "composite_ms": c,
                "stations": st,
            }
            for s, r, c, st in zip(
                root.frame_steps, root.render_ms, root.composite_ms, root.stations
            )
        ],
    }
    if keep_frames:
        metrics_doc["_captured_frames"] = file_sink.frames
    return metrics_doc


def _guarded(body, rank: int, errors: list) -> None:
    try:
        body(rank)
    except BaseException as exc:  # noqa: BLE001
        errors.append((rank, exc))
        log.exception("rank %d failed", rank)


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 integers, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    return (parts[0], parts[1])


def config_from_args(argv: Optional[list[str]] = None) -> HarnessConfig:
    parser = argparse.ArgumentParser(
        prog="insitu-sim",
        description="Toy shear-flow simulation with live rendering and steering",
    )
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--size", type=_parse_triple, help="global cells, e.g. 64 or 64,64,64")
    parser.add_argument("--ranks", type=_parse_triple, help="ranks per axis, e.g. 2,2,2")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--period", type=int, help="render every n-th step")
    parser.add_argument("--image", type=_parse_pair, help="image size WxH")
    parser.add_argument("--gateway", help="gateway sim port as host:port")
    parser.add_argument("--out-dir", help="offline frame dump directory")
    parser.add_argument("--active-sources", help="comma-separated source ids")
    parser.add_argument("--no-interpolation", action="store_true")
    parser.add_argument("--step-length", type=float)
    parser.add_argument("--name")
    parser.add_argument("--encoding", choices=["raw-rgba8", "png"])
    parser.add_argument("--steering-log", help="file recording applied steering payloads")
    parser.add_argument("--log-level", default="warning")
    args = parser.parse_args(argv)

    base: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    config = HarnessConfig(
        size=tuple(base.get("size", (64, 64, 64))),
        ranks=tuple(base.get("ranks", (2, 2, 2))),
        steps=int(base.get("steps", 10)),
        period=int(base.get("period", 1)),
        image_size=tuple(base.get("image_size", (480, 270))),
        gateway=base.get("gateway"),
        out_dir=base.get("out_dir"),
        active_sources=tuple(base.get("active_sources", (0,))),
        interpolation=bool(base.get("interpolation", True)),
        step_length=float(base.get("step_length", 0.5)),
        name=str(base.get("name", "toy-shear-flow")),
        encoding=str(base.get("encoding", RAW_RGBA8)),
        steering_log=base.get("steering_log"),
        params=ToyParameters(**base.get("params", {})),
    )
    if args.size:
        config = replace(config, size=args.size)
    if args.ranks:
        config = replace(config, ranks=args.ranks)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    if args.period is not None:
        config = replace(config, period=args.period)
    if args.image:
        config = replace(config, image_size=args.image)
    if args.gateway:
        config = replace(config, gateway=args.gateway)
    if args.out_dir:
        config = replace(config, out_dir=args.out_dir)
    if args.active_sources:
        config = replace(
            config, active_sources=tuple(int(s) for s in args.active_sources.split(","))
        )
    if args.no_interpolation:
        config = replace(config, interpolation=False)
    if args.step_length is not None:
        config = replace(config, step_length=args.step_length)
    if args.name:
        config = replace(config, name=args.name)
    if args.encoding:
        config = replace(config, encoding=args.encoding)
    if args.steering_log:
        config = replace(config, steering_log=args.steering_log)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    return config


def main(argv: Optional[list[str]] = None) -> int:
    config = config_from_args(argv)
    try:
        metrics = run(config)
    except RuntimeError as exc:
        log.error("run failed: %s", exc)
        return 1
    metrics.pop("_captured_frames", None)
    print(json.dumps(metrics))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
