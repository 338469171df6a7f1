"""Run orchestration: phase sequencing, designer channels, store-backed logs.

The pipeline owns *sequencing* only. Every number comes from the module it
delegates to, and everything it learns goes through the store immediately,
so an observer tailing the event log sees scenarios, turns, and difficulty
updates as they happen rather than at the end of the run.
"""

from __future__ import annotations

import queue
import threading

from . import planner, reporter
from .config import RunConfig, build_gateway, build_registry, fixture_answers
from .errors import AtaError, ChannelClosedError, IntegrityError
from .store import RunStore, Snapshot
from .thread import ThreadLog, run_thread

_CLOSED = object()


# --- designer channels --------------------------------------------------


class ScriptedChannel:
    """Canned designer: scripted interview answers, approve-all decisions.

    Exhausted answers become "" (disengagement), which ends the interview
    after two in a row, so a short script still terminates the phase.
    """

    def __init__(self, answers=(), decisions=()):
        self._answers = list(answers)
        self._decisions = list(decisions)
        self.questions: list[str] = []
        self.presented: list[dict] = []

    def ask_question(self, text: str) -> None:
        self.questions.append(text)

    def wait_answer(self) -> str:
        return self._answers.pop(0) if self._answers else ""

    def present_weakness(self, weakness: dict) -> None:
        self.presented.append(weakness)

    def wait_decision(self) -> dict:
        return self._decisions.pop(0) if self._decisions else {"action": "approve"}


class QueueChannel:
    """Channel fed from another thread, typically HTTP request handlers.

    The pipeline blocks in wait_answer/wait_decision; the service exposes
    pending_question/pending_weakness so clients can see what is being
    waited on, and submits via submit_answer/submit_decision.
    """

    def __init__(self, timeout: float | None = None):
        self.timeout = timeout
        self._answers: queue.Queue = queue.Queue()
        self._decisions: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self.pending_question: str | None = None
        self.pending_weakness: dict | None = None

    def ask_question(self, text: str) -> None:
        with self._lock:
            self.pending_question = text

    def wait_answer(self) -> str:
        value = self._take(self._answers, "an interview answer")
        with self._lock:
            self.pending_question = None
        return value

    def submit_answer(self, text: str) -> None:
        self._answers.put(text)

    def present_weakness(self, weakness: dict) -> None:
        with self._lock:
            self.pending_weakness = weakness

    def wait_decision(self) -> dict:
        value = self._take(self._decisions, "an approval decision")
        with self._lock:
            self.pending_weakness = None
        return value

    def submit_decision(self, decision: dict) -> None:
        self._decisions.put(decision)

    def close(self) -> None:
        self._answers.put(_CLOSED)
        self._decisions.put(_CLOSED)

    def _take(self, q: queue.Queue, what: str):
        try:
            value = q.get(timeout=self.timeout)
        except queue.Empty:
            raise ChannelClosedError(f"timed out waiting for {what}") from None
        if value is _CLOSED:
            raise ChannelClosedError(f"channel closed while waiting for {what}")
        return value


class RecordingChannel:
    """Wraps a channel so every designer interaction lands in the run:
    questions/answers/decisions as user_input events, answer pairs in state."""

    def __init__(self, inner, store: RunStore, run_id: str):
        self.inner = inner
        self.store = store
        self.run_id = run_id
        self._question: str | None = None
        self._weakness_id: str | None = None

    def _event(self, payload: dict) -> None:
        self.store.append_event(self.run_id, "designer", "user_input", payload)

    def ask_question(self, text: str) -> None:
        self._question = text
        self._event({"type": "question", "text": text})
        self.inner.ask_question(text)

    def wait_answer(self) -> str:
        answer = self.inner.wait_answer()
        self._event({"type": "answer", "text": answer})
        question = self._question or ""
        self.store.commit_retrying(
            self.run_id,
            lambda snap: [
                {"op": "append", "path": ["user_answers"], "value": [question, answer]}
            ],
            actor="designer",
        )
        self._question = None
        return answer

    def present_weakness(self, weakness: dict) -> None:
        self._weakness_id = weakness.get("id")
        self._event(
            {
                "type": "weakness_presented",
                "weakness_id": self._weakness_id,
                "name": weakness.get("name"),
            }
        )
        self.inner.present_weakness(weakness)

    def wait_decision(self) -> dict:
        decision = self.inner.wait_decision()
        payload = {
            "type": "decision",
            "weakness_id": self._weakness_id,
            "action": decision.get("action", "approve"),
        }
        if decision.get("feedback"):
            payload["feedback"] = decision["feedback"]
        self._event(payload)
        return decision


# --- store-backed thread log ---------------------------------------------


class StoreThreadLog(ThreadLog):
    """Commits scenario progress and appends events as a thread runs.

    State commits hold the timeless scenario document; wall-clock stamps and
    latencies go only to events and the per-scenario transcript file, so a
    reseeded run can reproduce state.json byte for byte.
    """

    def __init__(self, store: RunStore, run_id: str, weakness_id: str):
        self.store = store
        self.run_id = run_id
        self.weakness_id = weakness_id
        self.actor = f"thread:{weakness_id}"
        self._turns: dict[str, list[dict]] = {}

    def scenario_created(self, scenario: dict) -> None:
        wid = self.weakness_id
        self.store.commit_retrying(
            self.run_id,
            lambda snap: [
                {"op": "append", "path": ["scenarios", wid], "value": scenario}
            ],
            actor=self.actor,
        )

    def dialogue_turn(self, scenario, turn_index, turn, latency) -> None:
        payload = {
            "weakness_id": self.weakness_id,
            "scenario_id": scenario["scenario_id"],
            "turn_index": turn_index,
            "speaker": turn["speaker"],
            "text": turn["text"],
            "status": turn.get("status"),
        }
        if latency is not None:
            payload["latency"] = round(latency, 6)
        self.store.append_event(self.run_id, self.actor, "dialogue_turn", payload)
        stamped = dict(turn, at=self.store.clock.now())
        self._turns.setdefault(scenario["scenario_id"], []).append(stamped)

    def scenario_executed(self, scenario: dict) -> None:
        self._replace(scenario)

    def judge_result(self, scenario, result, scored) -> None:
        self._replace(scenario)
        sid = scenario["scenario_id"]
        self.store.append_event(
            self.run_id,
            self.actor,
            "judge_result",
            {
                "weakness_id": self.weakness_id,
                "scenario_id": sid,
                "overall": result.overall,
                "criterion_scores": result.criterion_scores,
                "observation": result.observation,
                "scored": scored,
            },
        )
        doc = dict(scenario, transcript=self._turns.get(sid, scenario["transcript"]))
        self.store.write_transcript(self.run_id, sid, doc)

    def difficulty_update(self, payload: dict) -> None:
        self.store.append_event(
            self.run_id, self.actor, "difficulty_update", dict(payload)
        )

    def _replace(self, scenario: dict) -> None:
        wid, sid = self.weakness_id, scenario["scenario_id"]

        def mutate(snap):
            for i, existing in enumerate(snap.state.get("scenarios", {}).get(wid, [])):
                if existing.get("scenario_id") == sid:
                    return [{"op": "set", "path": ["scenarios", wid, i], "value": scenario}]
            raise IntegrityError(f"scenario {sid!r} vanished from the run state")

        self.store.commit_retrying(self.run_id, mutate, actor=self.actor)


# --- the pipeline ---------------------------------------------------------


class Pipeline:
    """Drives one run end to end against an already-created run record."""

    actor = "pipeline"

    def __init__(self, store, gateway, registry, config: RunConfig, channel, run_id: str):
        self.store = store
        self.gateway = gateway
        self.registry = registry
        self.config = config
        self.channel = channel
        self.run_id = run_id
        if gateway.on_call is None:
            gateway.on_call = self._record_model_call

    def _record_model_call(self, record: dict) -> None:
        self.store.append_event(self.run_id, "gateway", "model_call", dict(record))

    def _commit_set(self, path: list, value) -> Snapshot:
        return self.store.commit_retrying(
            self.run_id,
            lambda snap: [{"op": "set", "path": list(path), "value": value}],
            actor=self.actor,
        )

    def _advance(self, phase: str) -> None:
        self._commit_set(["phase"], phase)

    def _fail(self, exc: Exception) -> None:
        try:
            self.store.append_event(
                self.run_id,
                self.actor,
                "error",
                {"error": type(exc).__name__, "detail": str(exc)},
            )
            self._commit_set(["phase"], "failed")
        except AtaError:
            pass  # never mask the original failure with bookkeeping trouble

    def execute(self) -> Snapshot:
        try:
            self._run_phases()
        except Exception as exc:
            self._fail(exc)
            raise
        return self.store.snapshot(self.run_id)

    def _run_phases(self) -> None:
        config = self.config
        registration = self.registry.get(config.aut_id)
        channel = RecordingChannel(self.channel, self.store, self.run_id)

        self._advance("analyzing")
        if not config.ablate_evidence:
            graph, narrative, findings = planner.analyze_codebase(
                self.gateway, registration.codebase_path or ""
            )
            self._commit_set(
                ["code_analysis"],
                {"graph": graph.to_json(), "narrative": narrative, "findings": findings},
            )

        self._advance("interviewing")
        planner.interview(
            self.gateway,
            channel,
            config.testing_focus,
            registration.display_name,
            cap=config.interview_cap,
        )

        self._advance("searching")
        if not config.ablate_evidence:
            evidence, warnings = planner.search_loop(
                self.gateway,
                self.search_backend(),
                config.testing_focus,
                registration.display_name,
            )
            self._commit_set(["search_findings"], evidence)
            for warning in warnings:
                self.store.append_event(
                    self.run_id,
                    self.actor,
                    "error",
                    {"severity": "warning", "detail": warning},
                )

        self._advance("hypothesizing")
        state = self.store.snapshot(self.run_id).state
        analysis = state.get("code_analysis") or {}
        weaknesses = planner.generate_weaknesses(
            self.gateway,
            focus=config.testing_focus,
            aut_name=registration.display_name,
            answers=state["user_answers"],
            evidence=state["search_findings"],
            code_findings=analysis.get("findings", []),
            code_narrative=analysis.get("narrative", ""),
            max_weaknesses=config.max_weaknesses,
        )
        self._commit_set(["weaknesses"], weaknesses)

        self._advance("awaiting_approval")
        try:
            planner.approval_loop(self.gateway, channel, weaknesses)
        finally:
            # statuses (and any revisions) are worth keeping even on abort
            self._commit_set(["weaknesses"], weaknesses)

        rubric = planner.make_rubric(
            self.gateway,
            config.testing_focus,
            registration.display_name,
            provided=self._rubric_source(registration),
        )
        self._commit_set(["rubric"], rubric.to_json())

        self._advance("testing")
        approved = [w for w in weaknesses if w["status"] in ("approved", "revised")]
        results: dict = {}
        failures: dict = {}

        def worker(weakness: dict) -> None:
            wid = weakness["id"]
            log = StoreThreadLog(self.store, self.run_id, wid)
            try:
                results[wid] = run_thread(
                    self.gateway,
                    lambda: self.registry.open_session(config.aut_id),
                    weakness,
                    rubric,
                    k_max=config.k_max,
                    epsilon=config.epsilon,
                    log=log,
                    params=config.difficulty_params(),
                )
            except Exception as exc:  # sibling threads must keep going
                failures[wid] = exc
                self.store.append_event(
                    self.run_id,
                    log.actor,
                    "error",
                    {"weakness_id": wid, "error": type(exc).__name__, "detail": str(exc)},
                )

        threads = [
            threading.Thread(target=worker, args=(w,), name=f"ata-{w['id']}", daemon=True)
            for w in approved
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures and not results:
            detail = "; ".join(f"{wid}: {failures[wid]}" for wid in sorted(failures))
            raise AtaError(f"every testing thread failed: {detail}")

        self._advance("reporting")
        state = self.store.snapshot(self.run_id).state
        stats = reporter.aggregate_run(state)
        report = reporter.compose_report(self.gateway, stats, state)
        reporter.verify_report(report, state)
        self.store.write_report(self.run_id, report, reporter.render_markdown(report))
        self.store.commit_retrying(
            self.run_id,
            lambda snap: [
                {"op": "set", "path": ["report"], "value": report},
                {"op": "set", "path": ["phase"], "value": "done"},
            ],
            actor=self.actor,
        )

    def search_backend(self):
        return planner.MockSearchBackend()

    def _rubric_source(self, registration):
        if self.config.rubric != "auto":
            return self.config.rubric
        if registration.provided_rubric is not None:
            return registration.provided_rubric
        if registration.rubric_path:
            return registration.rubric_path
        return None


def run_pipeline(
    config: RunConfig,
    run_id: str,
    channel=None,
    store: RunStore | None = None,
    registry=None,
) -> tuple[RunStore, Snapshot]:
    """Create and execute a run; the one-call entry point used by the CLI."""
    store = store or RunStore(config.root)
    registry = registry or build_registry(config)
    if channel is None:
        channel = ScriptedChannel(answers=fixture_answers(config) or ())
    store.create_run(run_id, config.aut_id, config.testing_focus, config.state_config())
    gateway = build_gateway(config)
    snap = Pipeline(store, gateway, registry, config, channel, run_id).execute()
    return store, snap
