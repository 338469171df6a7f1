"""Connectors to the agent under test.

Three transports share one session contract: open a fresh conversation,
send user messages one at a time, get back (status, reply, latency).
Failures travel as statuses, never exceptions, because a crash or an empty
reply is exactly the signal the harness exists to collect.

Scripted AUTs make the harness testable against known behavior. The
boundary mock is the important one: it reads the scenario difficulty from
a "(difficulty=X)" marker in the user message and answers with a quality
marker [q=...] that degrades as difficulty exceeds its configured breaking
point, so difficulty-homing can be checked against ground truth.
"""

from __future__ import annotations

import json
import queue
import random
import re
import subprocess
import threading
import time
from dataclasses import dataclass, field

from .errors import AutUnreachableError, ConfigError, DomainError, UnknownAutError

DIFFICULTY_MARKER = re.compile(r"\(difficulty=([0-9]+(?:\.[0-9]+)?)\)")

STATUSES = ("ok", "crash", "null_reply", "timeout")


@dataclass(frozen=True)
class AutTurnResult:
    status: str
    reply: str | None
    latency: float

    def __post_init__(self):
        if self.status == "ok" and not self.reply:
            object.__setattr__(self, "status", "null_reply")
            object.__setattr__(self, "reply", None)


@dataclass
class AutRegistration:
    aut_id: str
    display_name: str = ""
    transport: str = "scripted"
    endpoint: str | None = None
    command: list[str] | None = None
    behavior: dict = field(default_factory=dict)
    codebase_path: str | None = None
    rubric_path: str | None = None
    provided_rubric: dict | None = None
    turn_timeout: float = 10.0

    def __post_init__(self):
        if not self.display_name:
            self.display_name = self.aut_id
        if self.transport == "http" and not self.endpoint:
            raise ConfigError(f"{self.aut_id}: http transport requires endpoint")
        if self.transport == "subprocess" and not self.command:
            raise ConfigError(f"{self.aut_id}: subprocess transport requires command")
        if self.transport == "scripted" and not self.behavior.get("kind"):
            raise ConfigError(f"{self.aut_id}: scripted transport requires behavior.kind")
        if self.transport not in ("http", "subprocess", "scripted"):
            raise ConfigError(f"{self.aut_id}: unknown transport {self.transport!r}")


# --- scripted behaviors -------------------------------------------------------


class _EchoBehavior:
    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        return "ok", text


class _CrashBehavior:
    def __init__(self, crash_turn: int):
        self.crash_turn = crash_turn

    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        if turn >= self.crash_turn:
            return "crash", None
        return "ok", f"Working on it: {text}"


class _NullBehavior:
    def __init__(self, null_turn: int):
        self.null_turn = null_turn

    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        if turn >= self.null_turn:
            return "null_reply", None
        return "ok", f"Sure: {text}"


class _SlowBehavior:
    def __init__(self, delay: float):
        self.delay = delay

    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        time.sleep(self.delay)
        return "ok", f"Finally: {text}"


class _CompliantBehavior:
    """Always claims success; lets user-simulator goal detection trigger."""

    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        return "ok", "Done. This completes everything you asked."


class _BoundaryBehavior:
    def __init__(self, boundary: float, noise: float, rng: random.Random):
        self.boundary = boundary
        self.noise = noise
        self.rng = rng

    def reply(self, turn: int, text: str) -> tuple[str, str | None]:
        m = DIFFICULTY_MARKER.search(text)
        d = float(m.group(1)) if m else 5.5
        q = 5.5 + 2.0 * (self.boundary - d)
        if self.noise > 0:
            q += self.rng.gauss(0.0, self.noise)
        q = min(max(q, 1.0), 10.0)
        reply = (
            f"Here is my attempt at the request. [q={q:.3f}] "
            f"I covered the parts within my ability."
        )
        return "ok", reply


def _make_behavior(spec: dict, session_seed: str):
    kind = spec.get("kind")
    if kind == "echo":
        return _EchoBehavior()
    if kind == "crash":
        return _CrashBehavior(int(spec.get("crash_turn", 3)))
    if kind == "null":
        return _NullBehavior(int(spec.get("null_turn", 2)))
    if kind == "slow":
        return _SlowBehavior(float(spec.get("delay", 30.0)))
    if kind == "compliant":
        return _CompliantBehavior()
    if kind == "boundary":
        return _BoundaryBehavior(
            float(spec["boundary"]),
            float(spec.get("noise", 0.0)),
            random.Random(session_seed),
        )
    raise ConfigError(f"unknown scripted behavior {kind!r}")


# --- sessions -----------------------------------------------------------------


class AutSession:
    """One live conversation. Sequential sends; keeps its own history."""

    def __init__(self, registration: AutRegistration, session_id: str):
        self.registration = registration
        self.session_id = session_id
        self.history: list[dict] = []
        self._turn = 0
        self._send_lock = threading.Lock()

    def send(self, user_message: str) -> AutTurnResult:
        with self._send_lock:
            self._turn += 1
            start = time.perf_counter()
            status, reply = self._transport_send(user_message)
            latency = time.perf_counter() - start
        result = AutTurnResult(status=status, reply=reply, latency=latency)
        self.history.append({"role": "user", "text": user_message})
        self.history.append(
            {"role": "aut", "text": result.reply, "status": result.status}
        )
        return result

    def _transport_send(self, text: str) -> tuple[str, str | None]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ScriptedSession(AutSession):
    def __init__(self, registration, session_id, behavior):
        super().__init__(registration, session_id)
        self._behavior = behavior

    def _transport_send(self, text: str) -> tuple[str, str | None]:
        budget = self.registration.turn_timeout
        box: list = []

        def work():
            box.append(self._behavior.reply(self._turn, text))

        t = threading.Thread(target=work, daemon=True)
        t.start()
        t.join(timeout=budget)
        if t.is_alive():
            return "timeout", None
        return box[0]


class HttpSession(AutSession):
    def _transport_send(self, text: str) -> tuple[str, str | None]:
        import httpx

        try:
            resp = httpx.post(
                self.registration.endpoint,
                json={"session_id": self.session_id, "message": text},
                timeout=self.registration.turn_timeout,
            )
            resp.raise_for_status()
            reply = resp.json().get("reply")
        except httpx.TimeoutException:
            return "timeout", None
        except (httpx.HTTPError, ValueError):
            return "crash", None
        if not reply:
            return "null_reply", None
        return "ok", str(reply)


class SubprocessSession(AutSession):
    """One process per session, newline-delimited JSON on stdio."""

    def __init__(self, registration, session_id):
        super().__init__(registration, session_id)
        try:
            self._proc = subprocess.Popen(
                registration.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise AutUnreachableError(f"{registration.aut_id}: {e}") from e
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF sentinel

    def _transport_send(self, text: str) -> tuple[str, str | None]:
        msg = {"type": "user_msg", "session": self.session_id, "text": text}
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(msg) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            return "crash", None
        try:
            line = self._lines.get(timeout=self.registration.turn_timeout)
        except queue.Empty:
            return "timeout", None
        if line is None:
            return "crash", None
        try:
            reply = json.loads(line).get("text")
        except json.JSONDecodeError:
            return "crash", None
        if not reply:
            return "null_reply", None
        return "ok", str(reply)

    def close(self):
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()


# --- registry -----------------------------------------------------------------

BUILTIN_AUTS = (
    AutRegistration("mock-echo", "Echoing mock agent", "scripted", behavior={"kind": "echo"}),
    AutRegistration(
        "mock-crash", "Crashes on turn 3", "scripted", behavior={"kind": "crash", "crash_turn": 3}
    ),
    AutRegistration(
        "mock-null", "Goes silent on turn 2", "scripted", behavior={"kind": "null", "null_turn": 2}
    ),
    AutRegistration(
        "mock-compliant", "Always claims completion", "scripted", behavior={"kind": "compliant"}
    ),
)


class AutRegistry:
    """Registered AUTs: built-in mocks plus anything from auts.json."""

    def __init__(self, seed: int = 0):
        self._auts: dict[str, AutRegistration] = {}
        self._lock = threading.Lock()
        self._session_counter = 0
        self.seed = seed
        for reg in BUILTIN_AUTS:
            self.register(reg)

    def register(self, registration: AutRegistration) -> AutRegistration:
        with self._lock:
            self._auts[registration.aut_id] = registration
        return registration

    def load_file(self, path: str) -> list[str]:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        records = doc.get("auts", doc) if isinstance(doc, dict) else doc
        if not isinstance(records, list):
            raise ConfigError(f"{path}: expected a list of AUT records")
        loaded = []
        for rec in records:
            try:
                reg = AutRegistration(**rec)
            except TypeError as e:
                raise ConfigError(f"{path}: bad AUT record: {e}") from e
            self.register(reg)
            loaded.append(reg.aut_id)
        return loaded

    def get(self, aut_id: str) -> AutRegistration:
        reg = self._auts.get(aut_id)
        if reg is None:
            raise UnknownAutError(f"AUT {aut_id!r} is not registered")
        return reg

    def list_auts(self) -> list[AutRegistration]:
        return [self._auts[k] for k in sorted(self._auts)]

    def make_boundary_mock(
        self, boundary: float, noise: float = 0.0, aut_id: str | None = None
    ) -> AutRegistration:
        if not 1.0 <= boundary <= 10.0:
            raise DomainError(f"boundary {boundary} outside [1, 10]")
        if noise < 0:
            raise DomainError(f"noise {noise} must be >= 0")
        aut_id = aut_id or f"mock-boundary-{boundary:g}"
        return self.register(
            AutRegistration(
                aut_id,
                f"Breaks past difficulty {boundary:g}",
                "scripted",
                behavior={"kind": "boundary", "boundary": boundary, "noise": noise},
            )
        )

    def open_session(self, aut_id: str) -> AutSession:
        reg = self.get(aut_id)
        with self._lock:
            self._session_counter += 1
            n = self._session_counter
        session_id = f"{aut_id}-s{n}"
        if reg.transport == "scripted":
            behavior = _make_behavior(reg.behavior, f"{self.seed}:{session_id}")
            return ScriptedSession(reg, session_id, behavior)
        if reg.transport == "subprocess":
            return SubprocessSession(reg, session_id)
        self._probe_http(reg)
        return HttpSession(reg, session_id)

    @staticmethod
    def _probe_http(reg: AutRegistration) -> None:
        import httpx

        try:
            # any HTTP response proves the endpoint is alive
            httpx.get(reg.endpoint, timeout=min(reg.turn_timeout, 5.0))
        except httpx.HTTPError as e:
            raise AutUnreachableError(f"{reg.aut_id}: {reg.endpoint} unreachable") from e
