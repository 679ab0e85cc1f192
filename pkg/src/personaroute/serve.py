"""HTTP chat service: persona-conditioned generation with live alpha control
and per-session dialogue history.

Sessions are in-memory with idle eviction. Model weights are read-only for
the lifetime of the service; each session has its own lock so concurrent
clients on different sessions proceed in parallel while a single session's
turns stay ordered.
"""
from __future__ import annotations

import json
import re
import signal
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .data import DialogueContext, Persona, Utterance, default_persona
from .decoding import DecodeConfig, generate
from .model import DialogueModel


@dataclass
class Session:
    session_id: str
    persona: Persona
    turns: list[tuple[Utterance, Persona]] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    created: float = 0.0
    last_active: float = 0.0


class ChatService:
    """Transport-independent request handlers; the HTTP layer is a thin shim."""

    def __init__(
        self,
        model: DialogueModel | None = None,
        checkpoint_id: str | None = None,
        session_ttl_seconds: float = 3600.0,
        cors_origin: str = "*",
        decode_config: DecodeConfig | None = None,
        clock=time.monotonic,
    ):
        self.model = model
        self.checkpoint_id = checkpoint_id
        self.session_ttl = session_ttl_seconds
        self.cors_origin = cors_origin
        self.decode_config = decode_config or DecodeConfig(max_tokens=64)
        self.clock = clock
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    def attach_model(self, model: DialogueModel, checkpoint_id: str) -> None:
        self.model = model
        self.checkpoint_id = checkpoint_id

    # -- session registry ---------------------------------------------------

    def _evict_idle(self) -> None:
        now = self.clock()
        with self._registry_lock:
            dead = [
                sid for sid, s in self._sessions.items()
                if now - s.last_active > self.session_ttl
            ]
            for sid in dead:
                self._sessions.pop(sid, None)
                self._locks.pop(sid, None)

    def _get(self, session_id: str) -> tuple[Session, threading.Lock] | None:
        with self._registry_lock:
            session = self._sessions.get(session_id)
            if session is None:
                return None
            return session, self._locks[session_id]

    # -- handlers -------------------------------------------------------------

    def health(self) -> tuple[int, dict]:
        if self.model is None:
            return 503, {"status": "loading"}
        return 200, {"status": "ok", "model": self.checkpoint_id}

    def create_session(self, body: dict) -> tuple[int, dict]:
        if self.model is None:
            return 503, {"error": "model not loaded"}
        self._evict_idle()
        persona = default_persona(self.model.registries)
        if body.get("persona") is not None:
            try:
                persona = Persona.from_json(body["persona"])
                self.model.registries.validate(persona)
            except (KeyError, TypeError, ValueError) as exc:
                return 400, {"error": f"invalid persona: {exc}"}
        now = self.clock()
        session = Session(uuid.uuid4().hex, persona, created=now, last_active=now)
        with self._registry_lock:
            self._sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()
        return 200, {"session_id": session.session_id, "persona": persona.to_json()}

    def chat(self, body: dict) -> tuple[int, dict]:
        if self.model is None:
            return 503, {"error": "model not loaded"}
        self._evict_idle()
        session_id = body.get("session_id")
        found = self._get(session_id) if session_id else None
        if found is None:
            return 404, {"error": f"unknown session {session_id!r}"}
        session, lock = found
        message = body.get("message")
        if not isinstance(message, str) or not message:
            return 400, {"error": "message must be a non-empty string"}
        alpha = body.get("alpha", "auto")
        if alpha == "auto":
            fixed = None
        elif isinstance(alpha, (int, float)) and not isinstance(alpha, bool):
            if not 0.0 <= float(alpha) <= 1.0:
                return 400, {"error": f"alpha {alpha} outside [0, 1]"}
            fixed = float(alpha)
        else:
            return 400, {"error": 'alpha must be a number in [0, 1] or "auto"'}

        base = self.decode_config
        cfg = DecodeConfig(
            strategy=base.strategy, k=base.k, temperature=base.temperature,
            max_tokens=base.max_tokens, alpha=fixed, seed=base.seed,
        )
        with lock:
            session.last_active = self.clock()
            user_persona = default_persona(self.model.registries)
            session.turns.append((Utterance("user", message), user_persona))
            session.transcript.append({"role": "user", "text": message})
            gen = generate(
                self.model, DialogueContext(tuple(session.turns)), session.persona, cfg
            )
            reply = gen.response if gen.response else "..."
            session.turns.append((Utterance("agent", reply), session.persona))
            session.transcript.append(
                {"role": "agent", "text": reply, "alpha_used": gen.alpha_used.alpha}
            )
            session.last_active = self.clock()
            return 200, {
                "response": reply,
                "alpha_used": gen.alpha_used.alpha,
                "alpha_source": gen.alpha_used.source,
                "history_len": len(session.turns),
            }

    def set_persona(self, session_id: str, body: dict) -> tuple[int, dict]:
        found = self._get(session_id)
        if found is None:
            return 404, {"error": f"unknown session {session_id!r}"}
        session, lock = found
        try:
            persona = Persona.from_json(body.get("persona", body))
            self.model.registries.validate(persona)
        except (KeyError, TypeError, ValueError) as exc:
            return 400, {"error": f"invalid persona: {exc}"}
        with lock:
            session.persona = persona
            session.last_active = self.clock()
        return 200, {"persona": persona.to_json()}

    def get_session(self, session_id: str) -> tuple[int, dict]:
        found = self._get(session_id)
        if found is None:
            return 404, {"error": f"unknown session {session_id!r}"}
        session, _ = found
        return 200, {
            "session_id": session.session_id,
            "persona": session.persona.to_json(),
            "transcript": list(session.transcript),
        }


_SESSION_PERSONA = re.compile(r"^/api/session/([0-9a-f]+)/persona$")
_SESSION = re.compile(r"^/api/session/([0-9a-f]+)$")


class _Handler(BaseHTTPRequestHandler):
    service: ChatService  # set by make_handler

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.send_header("Access-Control-Allow-Origin", self.service.cors_origin)
        self.end_headers()
        self.wfile.write(blob)

    def _body(self) -> dict | None:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            return None

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", self.service.cors_origin)
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        if self.path == "/healthz":
            self._send(*self.service.health())
            return
        m = _SESSION.match(self.path)
        if m:
            self._send(*self.service.get_session(m.group(1)))
            return
        self._send(404, {"error": f"no route for GET {self.path}"})

    def do_POST(self):
        body = self._body()
        if body is None:
            self._send(400, {"error": "request body is not valid JSON"})
            return
        if self.path == "/api/session":
            self._send(*self.service.create_session(body))
            return
        if self.path == "/api/chat":
            self._send(*self.service.chat(body))
            return
        self._send(404, {"error": f"no route for POST {self.path}"})

    def do_PUT(self):
        body = self._body()
        if body is None:
            self._send(400, {"error": "request body is not valid JSON"})
            return
        m = _SESSION_PERSONA.match(self.path)
        if m:
            self._send(*self.service.set_persona(m.group(1), body))
            return
        self._send(404, {"error": f"no route for PUT {self.path}"})


def make_handler(service: ChatService):
    return type("BoundHandler", (_Handler,), {"service": service})


def start_server(service: ChatService, port: int = 0) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Bind and serve on a background thread; port 0 picks a free port."""
    server = ThreadingHTTPServer(("127.0.0.1", port), make_handler(service))
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def run_server(service: ChatService, port: int) -> None:
    """Foreground server with clean SIGINT/SIGTERM shutdown."""
    server = ThreadingHTTPServer(("0.0.0.0", port), make_handler(service))
    server.daemon_threads = True

    def stop(_sig, _frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()
