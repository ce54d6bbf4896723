"""Byte-stream service endpoint: a client submits scheduling outputs and
logits shards over a socket and receives decision batches, one iteration in
flight at a time.

Protocol on top of the shared frame format:
  - handshake: client sends a Control frame with hello=<client version>;
    the server replies ack=hello, version=<server version>, or an error
    naming both versions on mismatch.
  - per iteration: SchedulingOutput frame, then exactly t LogitsShard frames
    for the same iteration; the server answers with one DecisionBatch.
  - control: Control frames (e.g. hot_size=4096) answered with ack/error;
    shutdown=1 ends the session.
"""

from __future__ import annotations

import socket
import socketserver
import threading

from .service import ControlError, Engine, EngineConfig
from .transport import (
    ControlFrame,
    DecisionBatch,
    FrameReader,
    LogitsShardFrame,
    ProtocolError,
    SchedulingOutput,
    encode_frame,
)

SERVER_VERSION = 1


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self):  # one lockstep client session
        engine: Engine = self.server.engine  # type: ignore[attr-defined]
        reader = FrameReader()
        pending_sched: SchedulingOutput | None = None
        pending_shards: list[LogitsShardFrame] = []
        handshaken = False

        while True:
            try:
                data = self.request.recv(1 << 20)
            except ConnectionError:
                return
            if not data:
                return
            try:
                frames = reader.feed(data)
            except Exception as exc:
                self._reply_control({"error": f"{type(exc).__name__}: {exc}"})
                return
            for frame in frames:
                if isinstance(frame, ControlFrame):
                    if "hello" in frame.entries:
                        client_version = int(frame.entries["hello"])
                        if client_version != SERVER_VERSION:
                            self._reply_control(
                                {
                                    "error": "version mismatch",
                                    "client_version": str(client_version),
                                    "server_version": str(SERVER_VERSION),
                                }
                            )
                            return
                        handshaken = True
                        self._reply_control({"ack": "hello", "version": str(SERVER_VERSION)})
                        continue
                    if "shutdown" in frame.entries:
                        self._reply_control({"ack": "shutdown"})
                        self.server.shutdown_requested.set()  # type: ignore[attr-defined]
                        return
                    try:
                        for key, value in frame.entries.items():
                            note = engine.apply_control(key, value)
                        self._reply_control({"ack": note})
                    except ControlError as exc:
                        self._reply_control({"error": str(exc)})
                    continue

                if not handshaken:
                    self._reply_control({"error": "handshake required before data frames"})
                    return

                if isinstance(frame, SchedulingOutput):
                    if pending_sched is not None:
                        self._reply_control({"error": "iteration already in flight"})
                        return
                    pending_sched = frame
                    pending_shards = []
                    continue

                if isinstance(frame, LogitsShardFrame):
                    if pending_sched is None:
                        self._reply_control({"error": "shard frame before scheduling output"})
                        return
                    if frame.iteration_id != pending_sched.iteration_id:
                        self._reply_control({"error": "shard iteration mismatch"})
                        return
                    pending_shards.append(frame)
                    if len(pending_shards) == engine.cfg.tp_degree:
                        try:
                            decisions = engine.run_external_iteration(
                                pending_sched, [f.block for f in pending_shards]
                            )
                        except Exception as exc:
                            self._reply_control({"error": f"{type(exc).__name__}: {exc}"})
                            return
                        self.request.sendall(
                            encode_frame(DecisionBatch(pending_sched.iteration_id, decisions))
                        )
                        pending_sched = None
                        pending_shards = []
                    continue

                raise ProtocolError(f"unexpected frame {type(frame).__name__}")

    def _reply_control(self, entries: dict) -> None:
        try:
            self.request.sendall(encode_frame(ControlFrame(0, entries)))
        except ConnectionError:
            pass


class DecisionPlaneServer:
    """TCP server wrapping an Engine in external-drive mode."""

    def __init__(self, cfg: EngineConfig):
        cfg.validate()
        self.engine = Engine(cfg)
        self._tcp = socketserver.TCPServer((cfg.host, cfg.port), _SessionHandler, bind_and_activate=False)
        self._tcp.allow_reuse_address = True
        self._tcp.server_bind()
        self._tcp.server_activate()
        self._tcp.engine = self.engine  # type: ignore[attr-defined]
        self._tcp.shutdown_requested = threading.Event()  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address  # type: ignore[return-value]

    def serve_background(self) -> None:
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True, name="decplane-server")
        self._thread.start()

    def serve_until_shutdown(self, poll: float = 0.2) -> None:
        self.serve_background()
        try:
            while not self._tcp.shutdown_requested.wait(poll):  # type: ignore[attr-defined]
                pass
        except KeyboardInterrupt:
            pass
        self.close()

    def close(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self.engine.close()


def connect_probe(host: str, port: int, timeout: float = 2.0) -> bool:
    """Cheap reachability check used by tests and the CLI."""
    try:
        with socket.create_connection((host, port), timeout=timeout):
            return True
    except OSError:
        return False
