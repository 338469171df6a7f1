"""Final report: numeric aggregation, narrative composition, verification, Q&A.

The split matters: every number in a report comes from aggregate_run, a
pure function of the persisted run state, and is injected into the report
by the composer. The narrative model writes prose only and is told not to
restate scores. verify_report re-derives all numbers from state and is run
on every report before it ships, so a report that disagrees with its own
state never leaves the building.

Per weakness, the final score is the difficulty posterior over that
thread's scored rounds: the difficulty at which the agent's quality crosses
neutral. Rounds that ended in agent failures (crash, silence, timeout)
carry no score; they are reported separately as hard failures.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from statistics import fmean

import jsonschema

from .difficulty import DifficultyHistory, posterior
from .errors import IntegrityError, NoScoredScenariosError, ReportMissingError

QA_SYSTEM = (
    "You answer follow-up questions about a completed agent test report. "
    "Ground every claim in the report facts and transcripts provided."
)

REPORT_SYSTEM = (
    "You write the narrative for an agent testing report. Be concrete and "
    "plain. Do not restate numeric scores; the report generator injects all "
    "numbers itself."
)

NARRATIVE_SCHEMA = {
    "type": "object",
    "properties": {
        "summary": {"type": "string", "minLength": 1},
        "sections": {"type": "object", "additionalProperties": {"type": "string"}},
        "code_recommendations": {"type": "array", "items": {"type": "string"}},
        "priority_improvements": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["summary", "sections", "code_recommendations", "priority_improvements"],
}

ANSWER_SCHEMA = {
    "type": "object",
    "properties": {"answer": {"type": "string", "minLength": 1}},
    "required": ["answer"],
}

_SCENARIO_ID = re.compile(r"\bW\d+-t\d+\b")


def report_schema() -> dict:
    text = resources.files("ata").joinpath("report_schema.json").read_text("utf-8")
    return json.loads(text)


def verdict_of(final_score: float | None, early_failures: int) -> str:
    """Categorical read of a final score; thresholds follow the difficulty
    bands (4 and 7) plus the 5.5 starting point."""
    if final_score is None:
        return "blocking-failures" if early_failures else "untested"
    if final_score < 4.0:
        return "confirmed-severe"
    if final_score < 5.5:
        return "confirmed"
    if final_score < 7.0:
        return "partially-confirmed"
    return "resilient"


def _active_weaknesses(state: dict) -> list[dict]:
    return [
        w for w in state.get("weaknesses", []) if w.get("status") in ("approved", "revised")
    ]


def aggregate_run(state: dict) -> dict:
    """Numeric report statistics straight from the state document.

    No model involvement; callable on any state with executed scenarios,
    which is what makes reports recomputable after the fact.
    """
    per_weakness: dict[str, dict] = {}
    finals = []
    totals = {"scenarios": 0, "scored": 0, "early_failures": 0}
    all_scores: list[float] = []
    all_difficulties: list[float] = []
    failure_statuses: dict[str, int] = {}

    for weakness in _active_weaknesses(state):
        wid = weakness["id"]
        executed = [
            s for s in state.get("scenarios", {}).get(wid, []) if s.get("outcome")
        ]
        pairs: list[tuple[float, float]] = []
        scores: list[float] = []
        difficulties: list[float] = []
        early = 0
        for s in executed:
            d = float(s["difficulty"])
            difficulties.append(d)
            if s["outcome"]["kind"] == "early_failure":
                early += 1
                status = s["outcome"].get("status", "unknown")
                failure_statuses[status] = failure_statuses.get(status, 0) + 1
                continue
            judged = s.get("judge_result")
            if not judged:
                continue  # executed but not yet judged: mid-run snapshot
            pairs.append((d, float(judged["overall"])))
            scores.append(float(judged["overall"]))
        final = posterior(DifficultyHistory.from_pairs(pairs)) if pairs else None
        if final is not None:
            finals.append(final)
        per_weakness[wid] = {
            "name": weakness.get("name", wid),
            "verdict": verdict_of(final, early),
            "final_score": final,
            "scenario_count": len(executed),
            "scores": scores,
            "difficulties": difficulties,
            "early_failures": early,
            "history": [[d, s] for d, s in pairs],
        }
        totals["scenarios"] += len(executed)
        totals["scored"] += len(scores)
        totals["early_failures"] += early
        all_scores.extend(scores)
        all_difficulties.extend(difficulties)

    if not finals:
        breakdown = ", ".join(f"{k}: {v}" for k, v in sorted(failure_statuses.items()))
        raise NoScoredScenariosError(
            "no scored scenarios to aggregate"
            + (f" (agent failures by status: {breakdown})" if breakdown else "")
        )
    totals["mean_score"] = fmean(all_scores) if all_scores else None
    totals["mean_difficulty"] = fmean(all_difficulties)
    return {
        "overall_score": fmean(finals),
        "totals": totals,
        "per_weakness": per_weakness,
    }


def _priority_order(per_weakness: dict) -> list[str]:
    """Worst first: hard failures, then ascending final score."""

    def key(wid):
        final = per_weakness[wid]["final_score"]
        return (0, 0.0, wid) if final is None else (1, final, wid)

    return sorted(per_weakness, key=key)


def compose_report(gateway, stats: dict, state: dict) -> dict:
    """Fill the narrative around the computed statistics and validate the
    assembled document against the shipped schema."""
    per_weakness = stats["per_weakness"]
    order = _priority_order(per_weakness)
    ablated = bool(state.get("config", {}).get("ablate_evidence"))
    code_findings = (state.get("code_analysis") or {}).get("findings", [])

    lines = [
        "Write the narrative sections for this agent test report.",
        "",
        f"Testing focus: {state.get('testing_focus') or 'general behavior'}",
        "Weaknesses tested, worst outcome first:",
    ]
    for wid in order:
        entry = per_weakness[wid]
        lines.append(
            f"  {wid}: {entry['name']} [{entry['verdict']}; "
            f"{entry['scenario_count']} scenarios, {entry['early_failures']} agent failures]"
        )
    if code_findings:
        lines.append("Static code findings: " + "; ".join(code_findings))
    lines += [
        "",
        "Produce: summary (executive overview), sections (one paragraph per "
        "weakness id), code_recommendations, priority_improvements (one per "
        "weakness, in the order given). Reply as JSON.",
        "CONTEXT "
        + json.dumps(
            {
                "task": "report",
                "weaknesses": [
                    {
                        "id": wid,
                        "title": per_weakness[wid]["name"],
                        "verdict": per_weakness[wid]["verdict"],
                    }
                    for wid in order
                ],
                "n_findings": len(code_findings),
                "ablated": ablated,
            },
            sort_keys=True,
        ),
    ]
    messages = [
        {"role": "system", "content": REPORT_SYSTEM},
        {"role": "user", "content": "\n".join(lines)},
    ]
    parsed = gateway.complete("report_light", messages, schema=NARRATIVE_SCHEMA).parsed

    if ablated:
        notes = (
            "Code analysis and evidence search were skipped for this run "
            "(ablated configuration); weakness hypotheses drew on designer "
            "answers only."
        )
    else:
        notes = (
            "Full pipeline: code analysis, designer interview, and evidence "
            "search all informed the weakness hypotheses."
        )
    report = {
        "run_id": state["run_id"],
        "executive_summary": parsed["summary"],
        "overall_score": stats["overall_score"],
        "totals": stats["totals"],
        "per_weakness": {
            wid: {**entry, "patterns": parsed["sections"].get(wid, "")}
            for wid, entry in per_weakness.items()
        },
        "code_recommendations": list(parsed["code_recommendations"]),
        "priority_improvements": list(parsed["priority_improvements"]),
        "methodology": {"ablate_evidence": ablated, "notes": notes},
    }
    jsonschema.validate(report, report_schema())
    return report


def _fmt(value, digits=5) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def render_markdown(report: dict) -> str:
    """Human-readable rendering; all numbers injected from the report dict."""
    totals = report["totals"]
    out = [
        f"# Agent test report: {report['run_id']}",
        "",
        "## Executive summary",
        report["executive_summary"],
        "",
        "## Overall score",
        f"**{_fmt(report['overall_score'])}** on the 1-10 difficulty scale "
        "(mean of per-weakness final scores; higher means the agent withstands "
        "harder tests).",
        "",
        f"Totals: {totals['scenarios']} scenarios tested, {totals['scored']} scored, "
        f"{totals['early_failures']} agent failures; mean judge score "
        f"{_fmt(totals['mean_score'])}; mean difficulty {_fmt(totals['mean_difficulty'])}.",
        "",
        "## Test summaries",
        "| Weakness | Verdict | Final score | Scenarios | Agent failures | Judge scores |",
        "|---|---|---|---|---|---|",
    ]
    for wid in sorted(report["per_weakness"]):
        entry = report["per_weakness"][wid]
        scores = ", ".join(f"{s:.2f}" for s in entry["scores"]) or "none"
        out.append(
            f"| {wid} {entry['name']} | {entry['verdict']} | {_fmt(entry['final_score'])} "
            f"| {entry['scenario_count']} | {entry['early_failures']} | {scores} |"
        )
    out += ["", "## Identified patterns"]
    for wid in sorted(report["per_weakness"]):
        entry = report["per_weakness"][wid]
        out += [f"### {wid}: {entry['name']}", entry["patterns"] or "No notes.", ""]
    out += ["## Code recommendations"]
    out += [f"- {rec}" for rec in report["code_recommendations"]] or ["- None."]
    out += ["", "## Priority improvements"]
    out += [f"{i + 1}. {item}" for i, item in enumerate(report["priority_improvements"])]
    out += ["", "## Methodology", report["methodology"]["notes"], ""]
    return "\n".join(out)


def verify_report(report: dict, state: dict, tol: float = 1e-9) -> None:
    """Recompute every number in the report from state; raise on any drift."""
    stats = aggregate_run(state)
    problems: list[str] = []

    def check(path: str, got, want):
        if got is None and want is None:
            return
        if got is None or want is None or abs(float(got) - float(want)) > tol:
            problems.append(f"{path}: report has {got!r}, state gives {want!r}")

    check("overall_score", report.get("overall_score"), stats["overall_score"])
    for key, want in stats["totals"].items():
        check(f"totals.{key}", report.get("totals", {}).get(key), want)
    want_per = stats["per_weakness"]
    got_per = report.get("per_weakness", {})
    if set(got_per) != set(want_per):
        problems.append(
            f"per_weakness keys differ: report {sorted(got_per)}, state {sorted(want_per)}"
        )
    for wid in sorted(set(got_per) & set(want_per)):
        got, want = got_per[wid], want_per[wid]
        check(f"{wid}.final_score", got.get("final_score"), want["final_score"])
        check(f"{wid}.scenario_count", got.get("scenario_count"), want["scenario_count"])
        check(f"{wid}.early_failures", got.get("early_failures"), want["early_failures"])
        for field in ("scores", "difficulties"):
            g, w = got.get(field, []), want[field]
            if len(g) != len(w):
                problems.append(f"{wid}.{field}: length {len(g)} vs {len(w)}")
                continue
            for i, (a, b) in enumerate(zip(g, w)):
                check(f"{wid}.{field}[{i}]", a, b)
        g, w = got.get("history", []), want["history"]
        if len(g) != len(w):
            problems.append(f"{wid}.history: length {len(g)} vs {len(w)}")
        else:
            for i, (ga, wa) in enumerate(zip(g, w)):
                check(f"{wid}.history[{i}].d", ga[0], wa[0])
                check(f"{wid}.history[{i}].s", ga[1], wa[1])
    if problems:
        raise IntegrityError("report disagrees with state: " + "; ".join(problems))


def _transcript_excerpt(state: dict, scenario_id: str, max_turns: int = 4) -> str | None:
    for scenarios in state.get("scenarios", {}).values():
        for s in scenarios:
            if s.get("scenario_id") != scenario_id:
                continue
            bits = []
            for t in s.get("transcript", [])[:max_turns]:
                who = "tester" if t["speaker"] == "simulated_user" else "agent"
                bits.append(f"{who}: {t['text'] or '<' + t['status'] + '>'}")
            return " | ".join(bits)
    return None


def report_qa(gateway, report: dict | None, state: dict, question: str) -> str:
    """Answer one question about a finished report, grounded in its facts."""
    if not report:
        raise ReportMissingError("cannot answer questions before a report exists")
    finals = {
        wid: entry["final_score"]
        for wid, entry in report["per_weakness"].items()
        if entry["final_score"] is not None
    }
    facts = {
        "overall": report["overall_score"],
        "finals": finals,
        "lowest_id": min(finals, key=finals.get) if finals else None,
    }
    excerpt = None
    for sid in _SCENARIO_ID.findall(question):
        excerpt = _transcript_excerpt(state, sid)
        if excerpt:
            break
    context = {"task": "qa", "question": question, "facts": facts}
    if excerpt:
        context["transcript_excerpt"] = excerpt
    lines = [
        "Report summary: " + report["executive_summary"],
        "Question: " + question,
    ]
    if excerpt:
        lines.append("Relevant transcript excerpt: " + excerpt)
    lines += [
        "Answer from the report facts only. Reply as JSON.",
        "CONTEXT " + json.dumps(context, sort_keys=True),
    ]
    messages = [
        {"role": "system", "content": QA_SYSTEM},
        {"role": "user", "content": "\n".join(lines)},
    ]
    return gateway.complete("report_light", messages, schema=ANSWER_SCHEMA).parsed["answer"]
