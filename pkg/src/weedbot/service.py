"""Live operation endpoint: a small WebSocket server that publishes telemetry
frames at 10 Hz and accepts newline-delimited JSON command messages.

The control loop runs on its own thread, paced against wall clock by a rate
factor; network I/O only ever touches the runtime under the shared lock, and
outbound sends happen outside it so slow clients cannot stall stepping.
"""
from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time

from .mission_control import ProtocolError
from .telemetry import CommandError, build_frame, parse_command, serialize_frame
from .weed_detection import InsufficientEvidenceError, NoDepthError

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ConnectionClosed(Exception):
    pass


def websocket_accept_key(key: str) -> str:
    return base64.b64encode(
        hashlib.sha1((key + WS_GUID).encode()).digest()).decode()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosed
        buf += chunk
    return buf


def encode_frame(payload: bytes, opcode: int = 0x1) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n <= 0xFFFF:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def read_message(sock: socket.socket):
    """One complete message (fragments reassembled); pings answered inline."""
    data = b""
    opcode = None
    while True:
        b0, b1 = _recv_exact(sock, 2)
        fin = b0 & 0x80
        op = b0 & 0x0F
        n = b1 & 0x7F
        if n == 126:
            n = struct.unpack(">H", _recv_exact(sock, 2))[0]
        elif n == 127:
            n = struct.unpack(">Q", _recv_exact(sock, 8))[0]
        mask = _recv_exact(sock, 4) if b1 & 0x80 else b""
        payload = _recv_exact(sock, n)
        if mask:
            payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
        if op == 0x8:
            raise ConnectionClosed
        if op == 0x9:
            sock.sendall(encode_frame(payload, opcode=0xA))
            continue
        if op == 0xA:
            continue
        if opcode is None:
            opcode = op
        data += payload
        if fin:
            return opcode, data


def server_handshake(sock: socket.socket) -> None:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionClosed
        data += chunk
        if len(data) > 65536:
            raise ConnectionClosed
    head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    headers = {}
    for line in head.split("\r\n")[1:]:
        if ":" in line:
            key, value = line.split(":", 1)
            headers[key.strip().lower()] = value.strip()
    key = headers.get("sec-websocket-key")
    if not key or "websocket" not in headers.get("upgrade", "").lower():
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise ConnectionClosed
    sock.sendall((
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {websocket_accept_key(key)}\r\n\r\n"
    ).encode())


class _Client:
    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.send_lock = threading.Lock()
        self.alive = True

    def send_text(self, text: str) -> None:
        with self.send_lock:
            self.sock.sendall(encode_frame(text.encode() + b"\n"))

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass


class RobotService:
    """Serves one RobotRuntime over WebSocket."""

    def __init__(self, runtime, host: str = "127.0.0.1", port: int = 8787,
                 rate: float = 1.0, telemetry_hz: float = 10.0):
        self.rt = runtime
        self.rate = rate
        self.telemetry_hz = telemetry_hz
        self.lock = threading.Lock()
        self.clients: list[_Client] = []
        self.clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.server_sock = socket.create_server((host, port))
        self.server_sock.settimeout(0.2)
        self.port = self.server_sock.getsockname()[1]
        cfg = runtime.cfg
        self._limits = (cfg.sim.wheel_speed_max,
                        2.0 * cfg.sim.wheel_speed_max / cfg.sim.wheelbase,
                        runtime.chain.vel_limit)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        for fn in (self._control_loop, self._telemetry_loop, self._accept_loop):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        try:
            self.server_sock.close()
        except OSError:
            pass
        with self.clients_lock:
            for c in self.clients:
                c.close()
            self.clients.clear()
        for t in self._threads:
            t.join(timeout=2.0)

    def run_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- loops ----------------------------------------------------------------

    def _control_loop(self) -> None:
        period = self.rt.sim.dt / self.rate if self.rate > 0 else 0.0
        next_wall = time.monotonic()
        while not self._stop.is_set():
            with self.lock:
                self.rt.step()
            if period <= 0.0:
                continue
            next_wall += period
            delay = next_wall - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_wall = time.monotonic()

    def _telemetry_loop(self) -> None:
        period = 1.0 / self.telemetry_hz
        while not self._stop.is_set():
            start = time.monotonic()
            with self.lock:
                text = serialize_frame(build_frame(self.rt))
            self._broadcast(text)
            remaining = period - (time.monotonic() - start)
            if remaining > 0:
                time.sleep(remaining)

    def _broadcast(self, text: str) -> None:
        with self.clients_lock:
            targets = list(self.clients)
        dead = []
        for client in targets:
            try:
                client.send_text(text)
            except OSError:
                dead.append(client)
        if dead:
            with self.clients_lock:
                for client in dead:
                    client.close()
                    if client in self.clients:
                        self.clients.remove(client)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self.server_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            client = _Client(sock, addr)
            threading.Thread(target=self._client_loop, args=(client,),
                             daemon=True).start()

    def _client_loop(self, client: _Client) -> None:
        try:
            server_handshake(client.sock)
        except (ConnectionClosed, OSError):
            client.close()
            return
        with self.clients_lock:
            self.clients.append(client)
        try:
            while not self._stop.is_set():
                _, payload = read_message(client.sock)
                for line in payload.split(b"\n"):
                    line = line.strip()
                    if line:
                        self._handle_command(client, line.decode())
        except (ConnectionClosed, OSError):
            pass
        finally:
            with self.clients_lock:
                if client in self.clients:
                    self.clients.remove(client)
            client.close()

    # -- commands ---------------------------------------------------------------

    def _handle_command(self, client: _Client, text: str) -> None:
        msg_id = None
        try:
            raw = json.loads(text)
            if isinstance(raw, dict):
                msg_id = raw.get("id")
            cmd = parse_command(raw, self._limits)
            with self.lock:
                self._apply(cmd)
            reply = {"type": "ack", "id": cmd.id, "ok": True,
                     "kind": cmd.kind}
        except (CommandError, ProtocolError, ValueError) as exc:
            reply = {"type": "ack", "id": msg_id, "ok": False,
                     "error": str(exc)}
        try:
            client.send_text(json.dumps(reply, separators=(",", ":")))
        except OSError:
            pass

    def _apply(self, cmd) -> None:
        rt = self.rt
        kind = cmd.kind
        if kind == "estop":
            rt.estop()
        elif kind == "reset":
            if not rt.reset():
                raise CommandError("reset rejected in current mode")
        elif kind == "set_mode":
            if not rt.request_mode(cmd.payload["mode"]):
                raise CommandError(
                    f"transition {rt.mode} -> {cmd.payload['mode']} rejected")
        elif kind == "jog_platform":
            if rt.mode != "joystick":
                raise CommandError("jog requires joystick mode")
            rt.jog_platform(cmd.payload["v"], cmd.payload["omega"])
        elif kind == "jog_arm":
            if rt.mode != "joystick":
                raise CommandError("arm jog requires joystick mode")
            rt.jog_arm(cmd.payload["rates"])
        elif kind == "coordinate_drive":
            if rt.mode != "coordinate_drive":
                raise CommandError("coordinate target requires coordinate_drive mode")
            rt.coordinate_drive(cmd.payload["x"], cmd.payload["y"])
        elif kind == "load_mission":
            rt.load_mission(cmd.payload["weeds"])
        elif kind == "start":
            if not rt.start_mission():
                raise CommandError("no mission loaded or mode change rejected")
        elif kind == "pause":
            rt.pause()


class WsClient:
    """Minimal WebSocket client for tests and scripts (binds to the service
    above; client frames are masked per the protocol)."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        key = base64.b64encode(b"weedbot-console!").decode()
        self.sock.sendall((
            f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        ).encode())
        data = b""
        while b"\r\n\r\n" not in data:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionClosed
            data += chunk
        status = data.split(b"\r\n", 1)[0]
        if b"101" not in status:
            raise ConnectionClosed(f"handshake failed: {status!r}")
        self._buffer: list[dict] = []

    def send_json(self, obj: dict) -> None:
        payload = (json.dumps(obj, separators=(",", ":")) + "\n").encode()
        mask = struct.pack(">I", 0x37FA213D)
        masked = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
        head = bytes([0x81])
        n = len(masked)
        if n < 126:
            head += bytes([0x80 | n])
        elif n <= 0xFFFF:
            head += bytes([0x80 | 126]) + struct.pack(">H", n)
        else:
            head += bytes([0x80 | 127]) + struct.pack(">Q", n)
        self.sock.sendall(head + mask + masked)

    def recv_json(self) -> dict:
        while not self._buffer:
            _, payload = read_message(self.sock)
            for line in payload.split(b"\n"):
                line = line.strip()
                if line:
                    self._buffer.append(json.loads(line))
        return self._buffer.pop(0)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
