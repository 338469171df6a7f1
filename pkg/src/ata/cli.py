"""Command-line surface: run the pipeline, inspect runs, serve the HTTP API."""

from __future__ import annotations

import json
import sys
import threading

import click

from .config import RunConfig, build_gateway, build_registry, derived_run_id, fixture_answers
from .errors import AtaError
from .pipeline import Pipeline, ScriptedChannel
from .store import RunStore


class TerminalChannel:
    """Interactive designer: interview and approvals as terminal prompts."""

    def ask_question(self, text: str) -> None:
        click.echo("\n" + click.style("? ", fg="cyan", bold=True) + text)

    def wait_answer(self) -> str:
        return click.prompt("  answer (empty to skip)", default="", show_default=False)

    def present_weakness(self, weakness: dict) -> None:
        click.echo("\n" + click.style(f"[{weakness['id']}] ", bold=True) + weakness["name"])
        click.echo(f"  triggers: {weakness['trigger_conditions']}")
        click.echo(f"  expected: {weakness['expected_failure']}")

    def wait_decision(self) -> dict:
        action = click.prompt(
            "  decision",
            type=click.Choice(["approve", "revise", "reject"]),
            default="approve",
        )
        if action == "revise":
            feedback = click.prompt("  feedback for revision", default="")
            return {"action": "revise", "feedback": feedback}
        return {"action": action}


def _unique(store: RunStore, base: str) -> str:
    existing = set(store.list_runs())
    if base not in existing:
        return base
    n = 2
    while f"{base}-{n}" in existing:
        n += 1
    return f"{base}-{n}"


def _echo_progress(store: RunStore, run_id: str, stop: threading.Event) -> None:
    sub = store.subscribe(run_id)
    watcher = threading.Thread(
        target=lambda: (stop.wait(), sub.close()), daemon=True
    )
    watcher.start()
    phase = None
    for ev in sub:
        kind, payload = ev["kind"], ev["payload"]
        if kind == "state_commit":
            new_phase = _phase_of(payload)
            if new_phase and new_phase != phase:
                phase = new_phase
                click.echo(f"-- phase: {phase}")
        elif kind == "difficulty_update":
            score = payload["score"]
            click.echo(
                f"   {payload['scenario_id']}: d={payload['difficulty']:.2f} "
                + (f"s={score:.2f}" if score is not None else "s=n/a (agent failure)")
            )


def _phase_of(commit_payload: dict) -> str | None:
    for op in commit_payload.get("delta", []):
        if op.get("path") == ["phase"]:
            return op.get("value")
    return None


@click.group()
def main():
    """Adversarial-testing harness for conversational agents."""


@main.command()
@click.option("--aut", "aut_id", required=True, help="Registered AUT id (see list-auts).")
@click.option("--focus", default="", help="Free-text testing focus.")
@click.option("--rubric", default="auto", show_default=True, help="Rubric JSON path, or 'auto'.")
@click.option("--max-weaknesses", default=5, show_default=True, type=int)
@click.option("--k-max", default=3, show_default=True, type=int)
@click.option("--epsilon", default=0.25, show_default=True, type=float)
@click.option("--eta", default=3.0, show_default=True, type=float)
@click.option("--ablate-evidence", is_flag=True, help="Skip code analysis and evidence search.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--root", default=".", show_default=True, help="Directory holding runs/.")
@click.option("--run-id", default=None, help="Run id [default: derived from --aut and --seed].")
@click.option("--mock-llm", default=None, help="Offline model fixture: script file or bundle dir.")
@click.option("--backends", default=None, help="Backends JSON for live model endpoints.")
@click.option("--auts", "auts_file", default=None, help="Extra AUT registrations (JSON file).")
@click.option("--answers", "answers_file", default=None, help="Canned interview answers (JSON array file).")
@click.option("--interactive", is_flag=True, help="Prompt for answers and approvals in the terminal.")
@click.option("--verbose", is_flag=True, help="Stream per-scenario progress while testing.")
def run(
    aut_id,
    focus,
    rubric,
    max_weaknesses,
    k_max,
    epsilon,
    eta,
    ablate_evidence,
    seed,
    root,
    run_id,
    mock_llm,
    backends,
    auts_file,
    answers_file,
    interactive,
    verbose,
):
    """Run the full evaluation pipeline against one AUT."""
    try:
        config = RunConfig(
            aut_id=aut_id,
            testing_focus=focus,
            rubric=rubric,
            max_weaknesses=max_weaknesses,
            k_max=k_max,
            epsilon=epsilon,
            eta=eta,
            ablate_evidence=ablate_evidence,
            seed=seed,
            root=root,
            mock_llm=mock_llm,
            backends=backends,
            auts_file=auts_file,
        )
        store = RunStore(root)
        rid = _unique(store, run_id or derived_run_id(aut_id, seed))
        if interactive:
            channel = TerminalChannel()
        else:
            answers = fixture_answers(config) or []
            if answers_file:
                with open(answers_file, encoding="utf-8") as f:
                    answers = json.load(f)
            channel = ScriptedChannel(answers=answers)
        registry = build_registry(config)
        gateway = build_gateway(config)
        store.create_run(rid, config.aut_id, config.testing_focus, config.state_config())
        click.echo(f"run {rid}: testing {aut_id}" + (f" (focus: {focus})" if focus else ""))
        stop = threading.Event()
        progress = None
        if verbose:
            progress = threading.Thread(
                target=_echo_progress, args=(store, rid, stop), daemon=True
            )
            progress.start()
        try:
            snap = Pipeline(store, gateway, registry, config, channel, rid).execute()
        finally:
            stop.set()
            if progress is not None:
                progress.join(timeout=5)
        _summarize(snap.state, store, rid)
    except AtaError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)


def _summarize(state: dict, store: RunStore, run_id: str) -> None:
    report = state["report"]
    totals = report["totals"]
    click.echo(f"\nrun {run_id}: {state['phase']}")
    click.echo(
        f"  scenarios: {totals['scenarios']} "
        f"(scored {totals['scored']}, early failures {totals['early_failures']})"
    )
    click.echo(f"  overall score: {report['overall_score']:.2f} / 10")
    for wid in sorted(report["per_weakness"]):
        entry = report["per_weakness"][wid]
        final = entry["final_score"]
        shown = f"{final:.2f}" if final is not None else " n/a"
        click.echo(f"  {wid}  {shown}  {entry['verdict']}  {entry['name']}")
    run_dir = store.run_dir(run_id)
    click.echo(f"  report: {run_dir}/report.md")


@main.command("list-auts")
@click.option("--auts", "auts_file", default=None, help="Extra AUT registrations (JSON file).")
def list_auts(auts_file):
    """List registered agents under test."""
    try:
        config = RunConfig(aut_id="mock-echo", auts_file=auts_file)
        registry = build_registry(config)
        for reg in registry.list_auts():
            click.echo(f"{reg.aut_id:<16} {reg.transport:<11} {reg.display_name}")
    except AtaError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)


@main.command()
@click.argument("run_id")
@click.option("--root", default=".", show_default=True)
@click.option("--as-json", is_flag=True, help="Print report.json instead of markdown.")
def report(run_id, root, as_json):
    """Print the report of a finished run."""
    try:
        store = RunStore(root)
        store.load_run(run_id)
        if as_json:
            click.echo(json.dumps(store.read_report(run_id), indent=2, sort_keys=True))
        else:
            with open(f"{store.run_dir(run_id)}/report.md", encoding="utf-8") as f:
                click.echo(f.read())
    except FileNotFoundError:
        click.echo(f"error: run {run_id!r} has no rendered report", err=True)
        sys.exit(1)
    except AtaError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(e.exit_code)


@main.command()
@click.option("--root", default=".", show_default=True, help="Directory holding runs/.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8200, show_default=True, type=int)
def serve(root, host, port):
    """Serve the HTTP API consumed by the web UI."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(root), host=host, port=port)


if __name__ == "__main__":
    main()
