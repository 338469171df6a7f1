"""Versioned run state with an append-only event log.

One directory per run:

    runs/<run_id>/state.json                   canonical JSON, atomic replace
    runs/<run_id>/events.ndjson                one JSON object per line
    runs/<run_id>/transcripts/<scenario>.json  full dialogue records

Commits are optimistic: the caller supplies the version its delta was
computed against and loses with a version conflict if someone else got
there first. Deltas are plain data (set/append operations on JSON paths)
so the event log alone can rebuild the state document; `replay_state`
is that rebuild and tests pin it byte-for-byte against state.json.

Write order on commit is event-append, fsync, then atomic state rename.
A crash between the two leaves a state.json older than the log; recovery
replays the missing commits. A crash mid-append leaves a torn final line;
recovery drops it.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from typing import Any, Iterator

from .clock import WallClock
from .errors import (
    DomainError,
    IntegrityError,
    PhaseViolationError,
    ReportMissingError,
    UnknownRunError,
    VersionConflictError,
)

PHASES = (
    "selecting",
    "analyzing",
    "interviewing",
    "searching",
    "hypothesizing",
    "awaiting_approval",
    "testing",
    "reporting",
    "done",
    "failed",
)
_PHASE_ORDER = {name: i for i, name in enumerate(PHASES[:-1])}

EVENT_KINDS = frozenset(
    {
        "state_commit",
        "dialogue_turn",
        "judge_result",
        "difficulty_update",
        "error",
        "user_input",
        "model_call",
    }
)


def is_terminal_phase(phase: str) -> bool:
    return phase in ("done", "failed")


def check_transition(old: str, new: str) -> None:
    """Forward-only. Skipping phases is legal; failed is reachable from anywhere."""
    if new == "failed":
        return
    if old == "failed" or old not in _PHASE_ORDER or new not in _PHASE_ORDER:
        raise PhaseViolationError(f"phase {old!r} -> {new!r}")
    if _PHASE_ORDER[new] < _PHASE_ORDER[old]:
        raise PhaseViolationError(f"phase {old!r} -> {new!r} goes backward")


def canonical_dumps(obj: Any) -> str:
    """The one serialization used for state.json and byte-equality checks."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def event_dumps(event: dict) -> str:
    return json.dumps(event, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def initial_state(run_id: str, aut_ref: str, testing_focus: str, config: dict) -> dict:
    return {
        "run_id": run_id,
        "aut_ref": aut_ref,
        "testing_focus": testing_focus,
        "user_answers": [],
        "code_analysis": None,
        "search_findings": [],
        "rubric": None,
        "weaknesses": [],
        "scenarios": {},
        "report": None,
        "phase": "selecting",
        "config": config,
    }


# --- deltas -----------------------------------------------------------------


def _set(node: Any, path: list, value: Any) -> Any:
    if not path:
        return value
    key = path[0]
    if isinstance(key, str):
        base = node if isinstance(node, dict) else {}
        out = dict(base)
        out[key] = _set(base.get(key), path[1:], value)
        return out
    if isinstance(key, int):
        if not isinstance(node, list) or not -len(node) <= key < len(node):
            raise DomainError(f"set index {key} out of range")
        out = list(node)
        out[key] = _set(node[key], path[1:], value)
        return out
    raise DomainError(f"bad path key {key!r}")


def _append(node: Any, path: list, value: Any) -> Any:
    if not path:
        if node is None:
            return [value]
        if not isinstance(node, list):
            raise DomainError("append target is not a list")
        return node + [value]
    key = path[0]
    if isinstance(key, str):
        base = node if isinstance(node, dict) else {}
        out = dict(base)
        out[key] = _append(base.get(key), path[1:], value)
        return out
    if isinstance(key, int):
        if not isinstance(node, list) or not -len(node) <= key < len(node):
            raise DomainError(f"append index {key} out of range")
        out = list(node)
        out[key] = _append(node[key], path[1:], value)
        return out
    raise DomainError(f"bad path key {key!r}")


def apply_delta(state: dict, delta: list[dict]) -> dict:
    """Apply a list of {op, path, value} mutations, copying only along the
    touched paths so existing snapshots stay valid."""
    out = state
    for op in delta:
        kind = op.get("op")
        if kind == "set":
            out = _set(out, list(op["path"]), op["value"])
        elif kind == "append":
            out = _append(out, list(op["path"]), op["value"])
        else:
            raise DomainError(f"unknown delta op {kind!r}")
    if not isinstance(out, dict):
        raise DomainError("delta must leave the state a JSON object")
    return out


def validate_state(old: dict, new: dict) -> None:
    """Structural invariants checked at every commit."""
    check_transition(old.get("phase", "selecting"), new.get("phase", "selecting"))
    known = {w["id"] for w in new.get("weaknesses", [])}
    scenarios = new.get("scenarios", {})
    if not isinstance(scenarios, dict):
        raise IntegrityError("scenarios must be a map")
    for wid, lst in scenarios.items():
        if wid not in known:
            raise IntegrityError(f"scenarios reference unknown weakness {wid!r}")
        if not isinstance(lst, list):
            raise IntegrityError(f"scenario list for {wid!r} is not a list")
    old_scen = old.get("scenarios", {})
    for wid, old_lst in old_scen.items():
        new_lst = scenarios.get(wid)
        if new_lst is None or len(new_lst) < len(old_lst):
            raise IntegrityError(f"scenario list for {wid!r} shrank")
        for i, prev in enumerate(old_lst):
            if new_lst[i].get("scenario_id") != prev.get("scenario_id"):
                raise IntegrityError(f"scenario list for {wid!r} reordered at {i}")


def replay_state(initial: dict, events: list[dict]) -> tuple[int, dict]:
    """Rebuild (version, state) from commit deltas alone."""
    version = 0
    state = initial
    for ev in events:
        if ev.get("kind") != "state_commit":
            continue
        payload = ev["payload"]
        if payload["new_version"] != version + 1:
            raise IntegrityError(
                f"commit event out of order: {payload['new_version']} after {version}"
            )
        state = apply_delta(state, payload["delta"])
        version = payload["new_version"]
    return version, state


# --- store ------------------------------------------------------------------


@dataclass(frozen=True)
class Snapshot:
    version: int
    state: dict


class Subscription:
    """Iterator over a run's events from a starting point, inclusive of
    future events. Iteration ends when close() is called or when the run
    reached a terminal phase and everything pending was delivered."""

    def __init__(self, run: "_Run", from_seq: int):
        self._run = run
        self._pos = from_seq
        self._closed = False

    def close(self) -> None:
        self._closed = True
        with self._run.cond:
            self._run.cond.notify_all()

    def __iter__(self) -> Iterator[dict]:
        run = self._run
        while True:
            with run.cond:
                while (
                    not self._closed
                    and len(run.events) <= self._pos
                    and not run.finished
                ):
                    run.cond.wait(timeout=0.5)
                batch = run.events[self._pos :]
                self._pos += len(batch)
                done = self._closed or (run.finished and len(run.events) <= self._pos)
            yield from batch
            if done:
                return


class _Run:
    def __init__(self, run_id: str, path: str):
        self.run_id = run_id
        self.path = path
        self.lock = threading.Lock()  # serializes commits and appends
        self.cond = threading.Condition()  # guards events list for readers
        self.version = 0
        self.state: dict = {}
        self.events: list[dict] = []
        self.finished = False

    @property
    def state_path(self) -> str:
        return os.path.join(self.path, "state.json")

    @property
    def events_path(self) -> str:
        return os.path.join(self.path, "events.ndjson")


class RunStore:
    """All persisted runs under one root directory."""

    def __init__(self, root: str, clock=None):
        self.root = root
        self.clock = clock or WallClock()
        self._runs: dict[str, _Run] = {}
        self._registry_lock = threading.Lock()
        os.makedirs(os.path.join(root, "runs"), exist_ok=True)

    # -- lifecycle ------------------------------------------------------

    def create_run(
        self, run_id: str, aut_ref: str, testing_focus: str = "", config: dict | None = None
    ) -> Snapshot:
        with self._registry_lock:
            if run_id in self._runs or os.path.exists(self._run_dir(run_id)):
                raise IntegrityError(f"run {run_id!r} already exists")
            run = _Run(run_id, self._run_dir(run_id))
            os.makedirs(os.path.join(run.path, "transcripts"), exist_ok=True)
            run.state = initial_state(run_id, aut_ref, testing_focus, config or {})
            self._write_state(run)
            open(run.events_path, "a", encoding="utf-8").close()
            self._runs[run_id] = run
        return Snapshot(0, run.state)

    def load_run(self, run_id: str) -> Snapshot:
        """Open an existing run directory, replaying any commits the last
        process acknowledged to the log but never folded into state.json."""
        with self._registry_lock:
            if run_id in self._runs:
                run = self._runs[run_id]
                return Snapshot(run.version, run.state)
            path = self._run_dir(run_id)
            if not os.path.isfile(os.path.join(path, "state.json")):
                raise UnknownRunError(f"no run {run_id!r} under {self.root}")
            run = _Run(run_id, path)
            with open(run.state_path, encoding="utf-8") as f:
                doc = json.load(f)
            run.version, run.state = doc["version"], doc["state"]
            run.events = _read_events_tolerant(run.events_path)
            for ev in run.events:
                if ev["kind"] != "state_commit":
                    continue
                if ev["payload"]["new_version"] > run.version:
                    run.state = apply_delta(run.state, ev["payload"]["delta"])
                    run.version = ev["payload"]["new_version"]
            if run.version > doc["version"]:
                self._write_state(run)
            if is_terminal_phase(run.state.get("phase", "")):
                run.finished = True
            self._runs[run_id] = run
        return Snapshot(run.version, run.state)

    def list_runs(self) -> list[str]:
        base = os.path.join(self.root, "runs")
        found = set(self._runs)
        for name in os.listdir(base):
            if os.path.isfile(os.path.join(base, name, "state.json")):
                found.add(name)
        return sorted(found)

    def run_dir(self, run_id: str) -> str:
        return self._run_dir(run_id)

    def _run_dir(self, run_id: str) -> str:
        if not run_id or "/" in run_id or run_id.startswith("."):
            raise UnknownRunError(f"bad run id {run_id!r}")
        return os.path.join(self.root, "runs", run_id)

    def _get(self, run_id: str) -> _Run:
        run = self._runs.get(run_id)
        if run is None:
            raise UnknownRunError(f"unknown run {run_id!r}")
        return run

    # -- reads ----------------------------------------------------------

    def snapshot(self, run_id: str) -> Snapshot:
        run = self._get(run_id)
        with run.lock:  # cheap; pairs version and state atomically
            return Snapshot(run.version, run.state)

    def events_since(self, run_id: str, from_seq: int = 0) -> list[dict]:
        run = self._get(run_id)
        with run.cond:
            return run.events[from_seq:]

    def subscribe(self, run_id: str, from_seq: int = 0) -> Subscription:
        return Subscription(self._get(run_id), from_seq)

    # -- writes ---------------------------------------------------------

    def commit(
        self,
        run_id: str,
        base_version: int,
        delta: list[dict],
        actor: str,
        note: str | None = None,
    ) -> Snapshot:
        run = self._get(run_id)
        with run.lock:
            if base_version != run.version:
                raise VersionConflictError(run_id, base_version, run.version)
            new_state = apply_delta(run.state, delta)
            validate_state(run.state, new_state)
            payload = {
                "base_version": run.version,
                "new_version": run.version + 1,
                "delta": delta,
            }
            if note:
                payload["note"] = note
            self._append_event(run, actor, "state_commit", payload)
            run.state = new_state
            run.version += 1
            self._write_state(run)
            if is_terminal_phase(new_state.get("phase", "")):
                run.finished = True
                with run.cond:
                    run.cond.notify_all()
            return Snapshot(run.version, run.state)

    def commit_retrying(
        self, run_id: str, mutate, actor: str, max_attempts: int = 50, note: str | None = None
    ) -> Snapshot:
        """Run mutate(snapshot)->delta under optimistic retry. mutate must be
        pure in the snapshot; returning None/[] skips the commit."""
        for _ in range(max_attempts):
            snap = self.snapshot(run_id)
            delta = mutate(snap)
            if not delta:
                return snap
            try:
                return self.commit(run_id, snap.version, delta, actor, note=note)
            except VersionConflictError:
                continue
        raise VersionConflictError(run_id, -1, self.snapshot(run_id).version)

    def append_event(self, run_id: str, actor: str, kind: str, payload: dict) -> int:
        run = self._get(run_id)
        with run.lock:
            return self._append_event(run, actor, kind, payload)

    # -- transcripts ------------------------------------------------------

    def write_transcript(self, run_id: str, scenario_id: str, doc: dict) -> str:
        run = self._get(run_id)
        path = os.path.join(run.path, "transcripts", f"{scenario_id}.json")
        _atomic_write(path, canonical_dumps(doc))
        return path

    def read_transcript(self, run_id: str, scenario_id: str) -> dict:
        run = self._get(run_id)
        path = os.path.join(run.path, "transcripts", f"{scenario_id}.json")
        if not os.path.isfile(path):
            raise UnknownRunError(f"no transcript {scenario_id!r} in run {run_id!r}")
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    # -- reports ----------------------------------------------------------

    def write_report(self, run_id: str, report: dict, markdown: str) -> tuple[str, str]:
        run = self._get(run_id)
        json_path = os.path.join(run.path, "report.json")
        md_path = os.path.join(run.path, "report.md")
        _atomic_write(json_path, canonical_dumps(report))
        _atomic_write(md_path, markdown)
        return json_path, md_path

    def read_report(self, run_id: str) -> dict:
        run = self._get(run_id)
        path = os.path.join(run.path, "report.json")
        if not os.path.isfile(path):
            raise ReportMissingError(f"run {run_id!r} has no report.json yet")
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    # -- internals ------------------------------------------------------

    def _append_event(self, run: _Run, actor: str, kind: str, payload: dict) -> int:
        if kind not in EVENT_KINDS:
            raise DomainError(f"unknown event kind {kind!r}")
        event = {
            "seq": len(run.events) + 1,
            "timestamp": self.clock.now(),
            "actor": actor,
            "kind": kind,
            "payload": payload,
        }
        line = event_dumps(event) + "\n"
        with open(run.events_path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())
        with run.cond:
            run.events.append(event)
            run.cond.notify_all()
        return event["seq"]

    def _write_state(self, run: _Run) -> None:
        doc = {"version": run.version, "state": run.state}
        _atomic_write(run.state_path, canonical_dumps(doc))


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _read_events_tolerant(path: str) -> list[dict]:
    """Parse the event log, dropping a torn final line left by a crash."""
    events: list[dict] = []
    if not os.path.isfile(path):
        return events
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            ev = json.loads(stripped)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise IntegrityError(f"corrupt event log line {i + 1} in {path}")
        events.append(ev)
    return events
