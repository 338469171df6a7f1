"""HTTP surface for run control, live events, and artifacts.

One process, one store. Each run executes on a background thread and talks
to the designer through a QueueChannel; the answer and decision endpoints
feed that channel, and both are phase-gated — input offered while the run is
elsewhere in its lifecycle is a conflict, not a silent queue write. Events
stream as server-sent events so the UI only ever appends.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse

from .aut import AutRegistry
from .config import RunConfig, build_gateway, build_registry, derived_run_id
from .errors import ConfigError, IntegrityError, ReportMissingError, UnknownRunError
from .pipeline import Pipeline, QueueChannel
from .reporter import report_qa
from .store import RunStore, Snapshot


@dataclass
class _LiveRun:
    channel: QueueChannel
    gateway: object
    thread: threading.Thread


def create_app(root: str) -> FastAPI:
    app = FastAPI(title="agent testing service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],  # the UI dev server runs on its own port
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = RunStore(root)
    live: dict[str, _LiveRun] = {}
    lock = threading.Lock()
    app.state.store = store

    def snapshot_or_404(run_id: str) -> Snapshot:
        try:
            return store.snapshot(run_id)
        except UnknownRunError:
            try:
                return store.load_run(run_id)
            except UnknownRunError as e:
                raise HTTPException(404, str(e)) from e

    # -- run lifecycle ---------------------------------------------------

    @app.post("/runs", status_code=201)
    def create_run(body: dict):
        doc = dict(body or {})
        requested_id = doc.pop("run_id", None)
        doc.pop("root", None)  # storage placement belongs to the server
        try:
            config = RunConfig.from_request(doc)
            config.root = root
            registry = build_registry(config)
            gateway = build_gateway(config)
        except ConfigError as e:
            raise HTTPException(400, str(e)) from e
        run_id = requested_id or _unused_id(config)
        try:
            store.create_run(
                run_id, config.aut_id, config.testing_focus, config.state_config()
            )
        except IntegrityError as e:
            raise HTTPException(409, str(e)) from e
        channel = QueueChannel()
        pipeline = Pipeline(store, gateway, registry, config, channel, run_id)

        def drive():
            try:
                pipeline.execute()
            except Exception:
                pass  # already recorded: error event + phase=failed

        thread = threading.Thread(target=drive, name=f"run-{run_id}", daemon=True)
        with lock:
            live[run_id] = _LiveRun(channel, gateway, thread)
        thread.start()
        return {"run_id": run_id, "phase": "selecting"}

    def _unused_id(config: RunConfig) -> str:
        base = derived_run_id(config.aut_id, config.seed)
        existing = set(store.list_runs())
        if base not in existing:
            return base
        n = 2
        while f"{base}-{n}" in existing:
            n += 1
        return f"{base}-{n}"

    @app.get("/runs")
    def list_runs():
        out = []
        for run_id in store.list_runs():
            snap = snapshot_or_404(run_id)
            out.append(
                {
                    "run_id": run_id,
                    "phase": snap.state["phase"],
                    "aut_ref": snap.state["aut_ref"],
                    "testing_focus": snap.state["testing_focus"],
                }
            )
        return {"runs": out}

    @app.get("/auts")
    def list_auts():
        registry = AutRegistry()
        return {
            "auts": [
                {
                    "aut_id": reg.aut_id,
                    "display_name": reg.display_name,
                    "transport": reg.transport,
                }
                for reg in registry.list_auts()
            ]
        }

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        snap = snapshot_or_404(run_id)
        entry = live.get(run_id)
        pending = None
        if entry is not None:
            weakness = entry.channel.pending_weakness
            pending = {
                "question": entry.channel.pending_question,
                "weakness_id": weakness.get("id") if weakness else None,
            }
        return {
            "run_id": run_id,
            "version": snap.version,
            "state": snap.state,
            "pending": pending,
        }

    @app.get("/runs/{run_id}/events")
    def get_events(
        run_id: str,
        from_seq: int = Query(0, alias="from"),
        once: bool = False,
    ):
        snapshot_or_404(run_id)  # load + 404 before committing to a stream
        if once:  # poll mode: whatever is buffered right now, as plain JSON
            events = store.events_since(run_id, from_seq)
            return {"events": events, "next": from_seq + len(events)}
        subscription = store.subscribe(run_id, from_seq)

        def gen():
            try:
                for event in subscription:
                    data = json.dumps(event, separators=(",", ":"), sort_keys=True)
                    yield f"id: {event['seq']}\ndata: {data}\n\n"
            finally:
                subscription.close()

        return StreamingResponse(
            gen(),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache"},
        )

    # -- designer input (phase-gated) -------------------------------------

    @app.post("/runs/{run_id}/answers")
    def post_answer(run_id: str, body: dict):
        snap = snapshot_or_404(run_id)
        phase = snap.state["phase"]
        if phase != "interviewing":
            raise HTTPException(409, f"run is in phase {phase!r}, not interviewing")
        entry = live.get(run_id)
        if entry is None:
            raise HTTPException(409, "run is not executing in this process")
        answer = (body or {}).get("answer")
        if not isinstance(answer, str):
            raise HTTPException(400, "body must be {'answer': <string>}")
        entry.channel.submit_answer(answer)
        return {"accepted": True}

    @app.post("/runs/{run_id}/weaknesses/{weakness_id}/decision")
    def post_decision(run_id: str, weakness_id: str, body: dict):
        snap = snapshot_or_404(run_id)
        phase = snap.state["phase"]
        if phase != "awaiting_approval":
            raise HTTPException(409, f"run is in phase {phase!r}, not awaiting_approval")
        entry = live.get(run_id)
        if entry is None:
            raise HTTPException(409, "run is not executing in this process")
        action = (body or {}).get("action")
        if action not in ("approve", "revise", "reject"):
            raise HTTPException(400, "action must be approve, revise, or reject")
        pending = entry.channel.pending_weakness
        if pending is None or pending.get("id") != weakness_id:
            pending_id = pending.get("id") if pending else None
            raise HTTPException(
                409, f"awaiting a decision for {pending_id!r}, not {weakness_id!r}"
            )
        decision = {"action": action}
        if body.get("feedback"):
            decision["feedback"] = str(body["feedback"])
        entry.channel.submit_decision(decision)
        return {"accepted": True}

    # -- artifacts ---------------------------------------------------------

    @app.get("/runs/{run_id}/scenarios/{scenario_id}")
    def get_scenario(run_id: str, scenario_id: str):
        snap = snapshot_or_404(run_id)
        try:
            return store.read_transcript(run_id, scenario_id)
        except UnknownRunError:
            pass  # not judged yet: fall back to the in-state scenario
        for scenarios in snap.state["scenarios"].values():
            for scenario in scenarios:
                if scenario["scenario_id"] == scenario_id:
                    return scenario
        raise HTTPException(404, f"no scenario {scenario_id!r} in run {run_id!r}")

    @app.get("/runs/{run_id}/report")
    def get_report(run_id: str):
        snapshot_or_404(run_id)
        try:
            return store.read_report(run_id)
        except ReportMissingError as e:
            raise HTTPException(404, str(e)) from e

    @app.post("/runs/{run_id}/qa")
    def post_qa(run_id: str, body: dict):
        snap = snapshot_or_404(run_id)
        question = (body or {}).get("question")
        if not isinstance(question, str) or not question.strip():
            raise HTTPException(400, "body must be {'question': <non-empty string>}")
        try:
            report = store.read_report(run_id)
        except ReportMissingError as e:
            raise HTTPException(409, str(e)) from e
        entry = live.get(run_id)
        if entry is not None:
            gateway = entry.gateway
        else:
            # run predates this process; answer with the offline backend
            gateway = build_gateway(RunConfig(aut_id=snap.state["aut_ref"]))
        answer = report_qa(gateway, report, snap.state, question)
        store.append_event(
            run_id,
            "designer",
            "user_input",
            {"type": "qa", "question": question, "answer": answer},
        )
        return {"answer": answer}

    return app
