"""Aggregating gateway between running simulations and steering clients.

One TCP port accepts simulation connections (rank 0 of each run registers
once, then streams frames); another accepts any number of clients, speaking
either newline-delimited JSON or WebSocket on the same port.  Frames fan out
to observers through per-client queues where a newer frame replaces an unsent
older one, so a slow client never stalls anyone else.  Steering payloads are
relayed verbatim, in arrival order, to the simulation's connection.
"""

from __future__ import annotations

import argparse
import asyncio
import itertools
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import websocket

log = logging.getLogger("insitu.gateway")

PROTOCOL_VERSION = 1
ENV_PREFIX = "ISAAC_GW_"


class ProtocolError(Exception):
    pass


@dataclass
class GatewayConfig:
    sim_port: int = 23100
    client_port: int = 23101
    max_clients: int = 64
    log_level: str = "info"
    token: Optional[str] = None
    host: str = "127.0.0.1"


def config_from_args(argv: Optional[list[str]] = None) -> GatewayConfig:
    """CLI flags with ISAAC_GW_* environment overrides."""

    def env(name: str, default):
        raw = os.environ.get(ENV_PREFIX + name)
        if raw is None:
            return default
        return type(default)(raw) if default is not None else raw

    parser = argparse.ArgumentParser(
        prog="insitu-gateway",
        description="Frame-forwarding and steering gateway for live simulations",
    )
    parser.add_argument("--sim-port", type=int, default=env("SIM_PORT", 23100))
    parser.add_argument("--client-port", type=int, default=env("CLIENT_PORT", 23101))
    parser.add_argument("--max-clients", type=int, default=env("MAX_CLIENTS", 64))
    parser.add_argument("--log-level", default=env("LOG_LEVEL", "info"))
    parser.add_argument("--token", default=env("TOKEN", None))
    parser.add_argument("--host", default=env("HOST", "127.0.0.1"))
    args = parser.parse_args(argv)
    return GatewayConfig(
        sim_port=args.sim_port,
        client_port=args.client_port,
        max_clients=args.max_clients,
        log_level=args.log_level,
        token=args.token,
        host=args.host,
    )


class Connection:
    """A peer that can be handed JSON documents, however it is attached."""

    def __init__(self, writer: asyncio.StreamWriter, is_websocket: bool = False):
        self.writer = writer
        self.is_websocket = is_websocket
        self._lock = asyncio.Lock()

    async def send_json(self, doc: dict) -> None:
        text = json.dumps(doc, separators=(",", ":"))
        async with self._lock:
            if self.is_websocket:
                await websocket.send_message(self.writer, text)
            else:
                self.writer.write(text.encode("utf-8") + b"\n")
                await self.writer.drain()

    async def close(self) -> None:
        try:
            if self.is_websocket:
                await websocket.send_close(self.writer)
            self.writer.close()
        except (ConnectionError, RuntimeError):
            pass


@dataclass
class SimSession:
    session_id: int
    name: str
    ranks: int
    sources: list[dict]
    connection: Connection
    last_frame: Optional[dict] = None

    def descriptor(self) -> dict:
        return {
            "id": self.session_id,
            "name": self.name,
            "ranks": self.ranks,
            "sources": self.sources,
        }


@dataclass
class ClientSession:
    client_id: int
    connection: Connection
    observing: Optional[int] = None
    # One-slot frame mailbox plus an unbounded control queue; the writer task
    # drains controls first, then the freshest frame.
    frame_slot: Optional[dict] = None
    dropped_frames: int = 0
    controls: asyncio.Queue = field(default_factory=asyncio.Queue)
    wakeup: asyncio.Event = field(default_factory=asyncio.Event)

    def queue_frame(self, frame: dict) -> None:
        if self.frame_slot is not None:
            self.dropped_frames += 1
        self.frame_slot = frame
        self.wakeup.set()

    def queue_control(self, doc: dict) -> None:
        self.controls.put_nowait(doc)
        self.wakeup.set()


class Gateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self.sessions: dict[int, SimSession] = {}
        self.clients: dict[int, ClientSession] = {}
        self._session_ids = itertools.count()
        self._client_ids = itertools.count()
        self._servers: list[asyncio.AbstractServer] = []
        self.sim_port: Optional[int] = None
        self.client_port: Optional[int] = None

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        sim_server = await asyncio.start_server(
            self._handle_sim, self.config.host, self.config.sim_port
        )
        client_server = await asyncio.start_server(
            self._handle_client, self.config.host, self.config.client_port
        )
        self._servers = [sim_server, client_server]
        self.sim_port = sim_server.sockets[0].getsockname()[1]
        self.client_port = client_server.sockets[0].getsockname()[1]
        log.info("gateway up: sim port %d, client port %d", self.sim_port, self.client_port)

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
            await server.wait_closed()
        for client in list(self.clients.values()):
            await client.connection.close()
        for session in list(self.sessions.values()):
            await session.connection.close()

    async def serve_forever(self) -> None:
        await self.start()
        await asyncio.gather(*(s.serve_forever() for s in self._servers))

    # -- simulation side ----------------------------------------------------

    async def _handle_sim(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = Connection(writer)
        session: Optional[SimSession] = None
        try:
            raw = await reader.readline()
            if not raw:
                return
            session = await self._register(raw, conn)
            async for doc in _json_lines(reader):
                if doc is None:
                    await conn.send_json({"type": "error", "error": "invalid JSON"})
                    log.warning("closing sim %s after malformed line", session.name)
                    return
                await self._on_sim_message(session, doc)
        except ProtocolError as exc:
            await conn.send_json({"type": "error", "error": str(exc)})
        except ConnectionError:
            pass
        finally:
            if session is not None:
                self.sessions.pop(session.session_id, None)
                await self._broadcast_sessions()
                log.info("session %s closed", session.name)
            await conn.close()

    async def _register(self, raw: bytes, conn: Connection) -> SimSession:
        try:
            doc = json.loads(raw.decode("utf-8"))
        except ValueError:
            raise ProtocolError("register message is not valid JSON") from None
        if doc.get("type") != "register":
            raise ProtocolError("first message must be register")
        if doc.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {doc.get('protocol')!r}")
        if self.config.token and doc.get("token") != self.config.token:
            raise ProtocolError("bad token")
        try:
            session = SimSession(
                session_id=next(self._session_ids),
                name=str(doc["name"]),
                ranks=int(doc["ranks"]),
                sources=[
                    {"name": str(s["name"]), "feature_dim": int(s["feature_dim"])}
                    for s in doc["sources"]
                ],
                connection=conn,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed register: {exc}") from None
        self.sessions[session.session_id] = session
        log.info("registered session %d (%s, %d ranks)", session.session_id,
                 session.name, session.ranks)
        await conn.send_json({"type": "registered", "session_id": session.session_id})
        await self._broadcast_sessions()
        return session

    async def _on_sim_message(self, session: SimSession, doc: dict) -> None:
        kind = doc.get("type")
        if kind == "register":
            raise ProtocolError("session already registered on this connection")
        if kind == "frame":
            session.last_frame = doc
            for client in self.clients.values():
                if client.observing == session.session_id:
                    client.queue_frame(doc)
        elif kind == "exit":
            raise ConnectionError("session exited")
        else:
            # Error reports and future message kinds are forwarded untouched.
            for client in self.clients.values():
                if client.observing == session.session_id:
                    client.queue_control(doc)

    # -- client side --------------------------------------------------------

    async def _handle_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        # Sniff: an HTTP GET means a browser-side WebSocket upgrade, anything
        # else is treated as newline-delimited JSON.
        try:
            first = await reader.readline()
        except ConnectionError:
            return
        if not first:
            writer.close()
            return
        is_ws = first.startswith(b"GET ")
        conn = Connection(writer, is_websocket=is_ws)
        if is_ws:
            try:
                await websocket.perform_handshake(reader, writer, first)
            except websocket.WebSocketError as exc:
                log.warning("websocket handshake failed: %s", exc)
                writer.close()
                return

        if len(self.clients) >= self.config.max_clients:
            await conn.send_json({"type": "error", "error": "too many clients"})
            await conn.close()
            return

        client = ClientSession(next(self._client_ids), conn)
        self.clients[client.client_id] = client
        writer_task = asyncio.create_task(self._client_writer(client))
        try:
            await conn.send_json({"type": "sessions", "sessions": self._session_list()})
            if is_ws:
                await self._client_loop_ws(client, reader)
            else:
                await self._client_loop_lines(client, reader, first)
        except ConnectionError:
            pass
        finally:
            self.clients.pop(client.client_id, None)
            try:
                writer_task.cancel()
            except RuntimeError:
                pass  # loop already torn down
            await conn.close()

    async def _client_loop_lines(self, client, reader, first_line: bytes):
        async for doc in _json_lines(reader, first_line):
            if doc is None:
                await client.connection.send_json({"type": "error", "error": "invalid JSON"})
                return
            await self._on_client_message(client, doc)

    async def _client_loop_ws(self, client, reader):
        while True:
            text = await websocket.read_message(reader)
            if text is None:
                return
            try:
                doc = json.loads(text)
            except ValueError:
                await client.connection.send_json({"type": "error", "error": "invalid JSON"})
                return
            await self._on_client_message(client, doc)

    async def _on_client_message(self, client: ClientSession, doc: dict) -> None:
        kind = doc.get("type")
        if kind == "list":
            await client.connection.send_json(
                {"type": "sessions", "sessions": self._session_list()}
            )
        elif kind == "observe":
            try:
                session = self.sessions.get(int(doc.get("session_id")))
            except (TypeError, ValueError):
                session = None
            if session is None:
                await client.connection.send_json(
                    {"type": "error", "error": f"no session {doc.get('session_id')!r}"}
                )
                return
            client.observing = session.session_id
            await client.connection.send_json(
                {"type": "observing", "session_id": session.session_id}
            )
            if session.last_frame is not None:
                client.queue_frame(session.last_frame)
        elif kind == "steer":
            session = self.sessions.get(client.observing) if client.observing is not None else None
            if session is None:
                await client.connection.send_json(
                    {"type": "error", "error": "steer requires observing a session"}
                )
                return
            await session.connection.send_json(
                {"type": "steer", "payload": doc.get("payload")}
            )
        elif kind == "exit":
            raise ConnectionError("client exited")
        else:
            await client.connection.send_json(
                {"type": "error", "error": f"unknown message type {kind!r}"}
            )

    async def _client_writer(self, client: ClientSession) -> None:
        """Drain the client's outbound mailbox; newest frame wins."""
        try:
            while True:
                await client.wakeup.wait()
                client.wakeup.clear()
                while not client.controls.empty():
                    await client.connection.send_json(client.controls.get_nowait())
                frame, client.frame_slot = client.frame_slot, None
                if frame is not None:
                    await client.connection.send_json(frame)
        except (ConnectionError, asyncio.CancelledError):
            pass

    # -- shared -------------------------------------------------------------

    def _session_list(self) -> list[dict]:
        return [s.descriptor() for s in self.sessions.values()]

    async def _broadcast_sessions(self) -> None:
        doc = {"type": "sessions", "sessions": self._session_list()}
        for client in list(self.clients.values()):
            client.queue_control(doc)


async def _json_lines(reader: asyncio.StreamReader, first: Optional[bytes] = None):
    """Yield parsed JSON documents per line; None signals a parse failure."""
    leftover = first
    while True:
        if leftover is not None:
            line, leftover = leftover, None
        else:
            try:
                line = await reader.readline()
            except ConnectionError:
                return
            if not line:
                return
        line = line.strip()
        if not line:
            continue
        try:
            yield json.loads(line.decode("utf-8"))
        except ValueError:
            yield None


class GatewayThread:
    """Run a gateway on a dedicated event-loop thread (for tests/embedding)."""

    def __init__(self, config: Optional[GatewayConfig] = None):
        self.config = config or GatewayConfig(sim_port=0, client_port=0)
        self.gateway = Gateway(self.config)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._started = threading.Event()

    def _run(self):
        asyncio.set_event_loop(self._loop)
        self._loop.run_until_complete(self.gateway.start())
        self._started.set()
        self._loop.run_forever()

    def start(self) -> "GatewayThread":
        self._thread.start()
        if not self._started.wait(10):
            raise RuntimeError("gateway failed to start")
        return self

    @property
    def ports(self) -> tuple[int, int]:
        return self.gateway.sim_port, self.gateway.client_port

    def stop(self) -> None:
        async def shutdown():
            await self.gateway.stop()
            for task in asyncio.all_tasks():
                if task is not asyncio.current_task():
                    task.cancel()
            self._loop.stop()

        asyncio.run_coroutine_threadsafe(shutdown(), self._loop)
        self._thread.join(10)


def main(argv: Optional[list[str]] = None) -> int:
    config = config_from_args(argv)
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    gateway = Gateway(config)
    try:
        asyncio.run(gateway.serve_forever())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
