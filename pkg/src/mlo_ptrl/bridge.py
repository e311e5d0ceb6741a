"""Line-oriented TCP bridge so an external simulator can stand in for WlanEnv.

Every message is one JSON object per line carrying ``"v": 1``. Requests:

    {"v": 1, "cmd": "info"}
    {"v": 1, "cmd": "reset", "seed": 7}
    {"v": 1, "cmd": "step", "assignment": {"2.4": [1, 2], "5": [3, 1], "6": [2, 2]}}
    {"v": 1, "cmd": "bye"}

Replies are ``{"v": 1, "ok": true, ...}`` or ``{"v": 1, "ok": false, "error": "..."}``.
A bad request gets an error reply and the session carries on.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver

from .wlan import BandResult, Scenario, WlanEnv

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_LINE = 1 << 20


class BridgeError(RuntimeError):
    pass


def _results_json(results: dict[str, BandResult]) -> dict:
    return {b: r.to_json() for b, r in results.items()}


class Session:
    """Protocol state machine for one client, independent of the transport."""

    def __init__(self, scenario: Scenario):
        self.env = WlanEnv(scenario)
        self.ready = False

    def info(self):
        return {"band_ids": self.env.band_ids, "n_aps": self.env.n_aps, "num_channels": self.env.num_channels()}

    def handle(self, line: str | bytes) -> dict:
        try:
            if len(line) > MAX_LINE:
                raise BridgeError(f"message longer than {MAX_LINE} bytes")
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as e:
                raise BridgeError(f"malformed message: {e.msg}") from None
            if not isinstance(msg, dict):
                raise BridgeError("message must be a JSON object")
            if msg.get("v") != PROTOCOL_VERSION:
                raise BridgeError(f"unsupported protocol version {msg.get('v')!r}")
            cmd = msg.get("cmd")
            if cmd == "info":
                return {"ok": True, **self.info()}
            if cmd == "reset":
                seed = msg.get("seed")
                if not isinstance(seed, int) or seed < 0:
                    raise BridgeError("reset needs a non-negative integer seed")
                res = self.env.reset(seed)
                self.ready = True
                return {"ok": True, "initial_assignment": self.env.initial_assignment(),
                        "bands": _results_json(res), **self.info()}
            if cmd == "step":
                if not self.ready:
                    raise BridgeError("step before reset")
                assignment = msg.get("assignment")
                if not isinstance(assignment, dict):
                    raise BridgeError("step needs an assignment object")
                try:
                    res = self.env.step(assignment)
                except (ValueError, TypeError) as e:
                    raise BridgeError(f"bad assignment: {e}") from None
                return {"ok": True, "bands": _results_json(res)}
            if cmd == "bye":
                return {"ok": True, "bye": True}
            raise BridgeError(f"unknown command {cmd!r}")
        except BridgeError as e:
            return {"ok": False, "error": str(e)}


def encode(msg: dict) -> bytes:
    return (json.dumps({"v": PROTOCOL_VERSION, **msg}, sort_keys=True) + "\n").encode()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = Session(self.server.scenario)
        log.info("bridge session from %s", self.client_address)
        while True:
            line = self.rfile.readline(MAX_LINE + 1)
            if not line:
                break
            reply = session.handle(line)
            self.wfile.write(encode(reply))
            self.wfile.flush()
            if reply.get("bye"):
                break


class BridgeServer(socketserver.TCPServer):
    """Serves one session at a time; further clients queue until it ends."""

    allow_reuse_address = True

    def __init__(self, address, scenario: Scenario):
        self.scenario = scenario
        super().__init__(address, _Handler)


def make_server(scenario: Scenario, host="127.0.0.1", port=0) -> BridgeServer:
    return BridgeServer((host, port), scenario)


def bridge_serve(port: int, scenario: Scenario, host="127.0.0.1"):
    try:
        server = make_server(scenario, host, port)
    except OSError as e:
        raise BridgeError(f"cannot bind {host}:{port}: {e}") from e
    with server:
        log.warning("bridge listening on %s:%d", *server.server_address[:2])
        server.serve_forever()


class BridgeEnv:
    """Client with the same surface as WlanEnv, for use by PtrlTrainer."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._r = self.sock.makefile("rb")
        info = self._call({"cmd": "info"})
        self.band_ids = list(info["band_ids"])
        self.n_aps = int(info["n_aps"])
        self._num_channels = {b: int(c) for b, c in info["num_channels"].items()}
        self._initial = None

    def _call(self, msg: dict) -> dict:
        self.sock.sendall(encode(msg))
        line = self._r.readline(MAX_LINE + 1)
        if not line:
            raise BridgeError("bridge closed the connection")
        reply = json.loads(line)
        if not reply.get("ok"):
            raise BridgeError(reply.get("error", "unknown bridge error"))
        return reply

    def num_channels(self) -> dict[str, int]:
        return dict(self._num_channels)

    def initial_assignment(self):
        if self._initial is None:
            raise BridgeError("reset first")
        return self._initial

    def reset(self, seed: int) -> dict[str, BandResult]:
        reply = self._call({"cmd": "reset", "seed": int(seed)})
        self._initial = reply["initial_assignment"]
        return {b: BandResult.from_json(d) for b, d in reply["bands"].items()}

    def step(self, assignment) -> dict[str, BandResult]:
        reply = self._call({"cmd": "step", "assignment": {b: [int(c) for c in ch] for b, ch in assignment.items()}})
        return {b: BandResult.from_json(d) for b, d in reply["bands"].items()}

    def close(self):
        try:
            self._call({"cmd": "bye"})
        except (OSError, BridgeError):
            pass
        self._r.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
