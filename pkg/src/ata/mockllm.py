"""Deterministic offline chat backend.

Replies resolve in three steps: an exact entry keyed on (role, hash of the
last user message), then a per-role default, then the script-wide default.
Any of those may be the literal string "standard", which hands the prompt
to a built-in synthesizer.

The synthesizer makes the whole pipeline runnable with zero network access.
Prompt builders end their user message with a line `CONTEXT {...json...}`
carrying the structured facts of the request; the synthesizer parses that
line and produces a schema-valid JSON reply as a pure function of it. A
hosted model reads the same line as ordinary context, so prompts need no
special casing per backend.

Scripted sequence entries (a JSON list of strings) are consumed one call at
a time and stick on the last element; they exist so tests can script
"garbage, garbage, valid" repair sequences.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading

from .errors import ConfigError

PERSONA_NAMES = (
    "Avery", "Blake", "Casey", "Devon", "Emery", "Finley", "Gray", "Harper",
)

WEAKNESS_CATEGORIES = (
    "constraint-handling",
    "robustness",
    "consistency",
    "completeness",
    "communication",
)

_QUALITY_MARKER = re.compile(r"\[q=([0-9]+(?:\.[0-9]+)?)\]")


def reply_key(text: str) -> str:
    """Script key for a user message: first 12 hex chars of its sha256."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def stable_int(text: str, mod: int) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) % mod


def parse_context(messages: list[dict]) -> dict | None:
    """Pull the CONTEXT json line out of the last user message, if any."""
    for msg in reversed(messages):
        if msg.get("role") != "user":
            continue
        for line in reversed(msg.get("content", "").splitlines()):
            line = line.strip()
            if line.startswith("CONTEXT "):
                try:
                    return json.loads(line[len("CONTEXT ") :])
                except json.JSONDecodeError:
                    return None
        return None
    return None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


class MockBackend:
    """Scripted chat backend; safe for concurrent calls."""

    def __init__(self, script: dict | None = None):
        script = script or {}
        if not isinstance(script, dict):
            raise ConfigError("mock script must be a JSON object")
        self.replies: dict = script.get("replies", {})
        self.role_defaults: dict = script.get("role_defaults", {})
        self.default = script.get("default", "standard")
        self._lock = threading.Lock()
        self._cursors: dict[tuple[str, str], int] = {}

    def chat(self, role, messages: list[dict]) -> tuple[str, str, dict]:
        role_name = getattr(role, "name", role)
        last_user = ""
        for msg in reversed(messages):
            if msg.get("role") == "user":
                last_user = msg.get("content", "")
                break
        key = reply_key(last_user)
        entry = self.replies.get(role_name, {}).get(key)
        if entry is None:
            # default sequences advance per role, not per prompt, so a
            # repair retry (whose prompt differs) still moves forward
            key = "__default__"
            entry = self.role_defaults.get(role_name, self.default)
        if isinstance(entry, list):
            with self._lock:
                i = self._cursors.get((role_name, key), 0)
                self._cursors[(role_name, key)] = i + 1
            entry = entry[min(i, len(entry) - 1)]
        if entry == "standard":
            content = synthesize(role_name, messages)
        else:
            content = str(entry)
        prompt_chars = sum(len(m.get("content", "")) for m in messages)
        usage = {
            "prompt_tokens": prompt_chars // 4,
            "completion_tokens": len(content) // 4,
        }
        return content, "stop", usage


# --- the standard synthesizer ------------------------------------------------


def synthesize(role_name: str, messages: list[dict]) -> str:
    ctx = parse_context(messages)
    if ctx is None:
        return "Understood."
    task = ctx.get("task", "")
    fn = _TASKS.get(task)
    if fn is None:
        return "Understood."
    body = ""
    for msg in reversed(messages):
        if msg.get("role") == "user":
            body = msg.get("content", "")
            break
    if task == "code-extract":
        return fn(ctx, body)
    return fn(ctx)


def _interview_next(ctx: dict) -> str:
    focus = ctx.get("focus") or "the agent's core task"
    aut = ctx.get("aut_name", "the agent")
    asked = int(ctx.get("asked", 0))
    stems = (
        f"Which user goals matter most when exercising {focus}?",
        f"What inputs or situations have made {aut} misbehave before?",
        f"Are there hard constraints {aut} must never violate around {focus}?",
        f"Which capabilities of {aut} are newest or least tested?",
        f"What would a clearly unacceptable outcome look like for {focus}?",
        f"How technical are the typical users interacting with {aut}?",
    )
    done = asked >= 3 or asked >= len(stems)
    question = "" if done else stems[asked]
    return _dumps({"question": question, "done": done})


_NODE_LINE = re.compile(r"#\s*node:\s*(\S+)\s+kind=(\S+)")
_EDGE_LINE = re.compile(r"#\s*edge:\s*(\S+)\s*->\s*(\S+)(?:\s*\[([^\]]*)\])?")
_ENTRY_LINE = re.compile(r"#\s*entry:\s*(\S+)")


def _code_extract(ctx: dict, body: str) -> str:
    """Graph extraction for the offline backend: read the structural
    annotations out of the source text embedded in the prompt. A hosted
    model would instead infer the same structure from the code itself."""
    del ctx
    nodes = [
        {"id": m.group(1), "kind": m.group(2)} for m in _NODE_LINE.finditer(body)
    ]
    edges = [
        {"src": m.group(1), "dst": m.group(2), "label": m.group(3) or ""}
        for m in _EDGE_LINE.finditer(body)
    ]
    entries = [m.group(1) for m in _ENTRY_LINE.finditer(body)]
    return _dumps({"nodes": nodes, "edges": edges, "entries": entries})


def _search_queries(ctx: dict) -> str:
    focus = ctx.get("focus") or "conversational task agents"
    aut = ctx.get("aut_name", "assistant")
    m = int(ctx.get("m", 5))
    prior = list(ctx.get("prior", []))
    if prior:
        # reformulation pass: dig into what the earlier round surfaced
        seed = _clip_text(prior[-1], 40)
        stems = tuple(
            f"round {len(prior)} deep dive {i + 1}: {seed} in {focus}" for i in range(m)
        )
    else:
        stems = (
            f"common failure modes of {aut} style agents",
            f"known edge cases in {focus}",
            f"user complaints about assistants handling {focus}",
            f"evaluation rubrics for {focus}",
            f"adversarial prompts that break agents doing {focus}",
            f"constraint violations reported for {focus}",
        )
    return _dumps({"queries": list(stems[:m])})


def _code_narrative(ctx: dict) -> str:
    nodes = ctx.get("nodes", 0)
    unreachable = ctx.get("unreachable", [])
    tool_nodes = ctx.get("tool_nodes", 0)
    parts = [
        f"The agent graph exposes {nodes} nodes, {tool_nodes} of them tool calls."
    ]
    if unreachable:
        parts.append(
            "Unreachable states suggest dead or abandoned flows: "
            + ", ".join(unreachable)
            + "."
        )
    findings = ctx.get("findings", [])
    if findings:
        parts.append("Static findings worth probing: " + "; ".join(findings) + ".")
    return _dumps({"narrative": " ".join(parts)})


def _make_weaknesses(ctx: dict) -> str:
    n = int(ctx.get("n", 5))
    focus = ctx.get("focus") or "general task handling"
    hints = list(ctx.get("hints", []))
    n_answers = int(ctx.get("n_answers", 0))
    n_evidence = int(ctx.get("n_evidence", 0))
    n_code = int(ctx.get("n_code", 0))
    items = []
    for i in range(n):
        category = WEAKNESS_CATEGORIES[i % len(WEAKNESS_CATEGORIES)]
        nice = category.replace("-", " ")
        hint = hints[i % len(hints)] if hints else focus
        provenance = []
        if n_answers:
            provenance.append({"kind": "answer", "index": i % n_answers})
        if n_evidence:
            provenance.append({"kind": "evidence", "index": i % n_evidence})
        if n_code:
            provenance.append({"kind": "code", "index": i % n_code})
        items.append(
            {
                "name": f"May mishandle {nice} around {_clip_text(hint, 60)}",
                "trigger_conditions": (
                    f"User requests that stack constraints on {_clip_text(hint, 60)} "
                    f"or shift requirements mid-dialogue."
                ),
                "expected_failure": (
                    f"The agent silently degrades on {nice}: it drops, forgets, or "
                    f"misapplies part of the request instead of flagging the problem."
                ),
                "manifestation": (
                    f"Mid-dialogue the agent contradicts an earlier commitment about "
                    f"{_clip_text(hint, 50)} or produces output missing a stated requirement."
                ),
                "example_tests": {
                    "easy": f"Single clear request touching {_clip_text(hint, 40)} with one constraint.",
                    "medium": f"Request with three interacting constraints around {_clip_text(hint, 40)}.",
                    "hard": (
                        f"Contradictory constraints plus a mid-dialogue reversal on "
                        f"{_clip_text(hint, 40)}, under time pressure."
                    ),
                },
                "provenance": provenance,
            }
        )
    return _dumps({"weaknesses": items})


def _revise_weakness(ctx: dict) -> str:
    title = ctx.get("title", "weakness")
    feedback = ctx.get("feedback", "")
    note = _clip_text(feedback, 120)
    return _dumps(
        {
            "name": f"{title} (revised)",
            "trigger_conditions": f"As before, narrowed per designer note: {note}",
            "expected_failure": f"Failure mode restated to reflect: {note}",
            "manifestation": f"Watch specifically for: {note}",
        }
    )


def _make_rubric(ctx: dict) -> str:
    focus = ctx.get("focus") or "the task"
    criteria = []
    for name, desc in (
        ("Task completion", f"Does the agent actually accomplish {focus}?"),
        ("Constraint adherence", "Are explicit user constraints respected?"),
        ("Communication quality", "Is the agent clear, honest and well organized?"),
    ):
        criteria.append(
            {
                "name": name,
                "description": desc,
                "levels": [
                    {"score": 1, "label": "Bad", "description": "Fails outright."},
                    {"score": 2, "label": "Meh", "description": "Barely usable."},
                    {"score": 3, "label": "Ok", "description": "Acceptable."},
                    {"score": 4, "label": "Good", "description": "Solid result."},
                    {"score": 5, "label": "Exceptional", "description": "Flawless."},
                ],
            }
        )
    return _dumps({"criteria": criteria})


_BAND_TONES = {"easy": "direct", "medium": "vague", "hard": "impatient"}


def _persona(ctx: dict) -> str:
    title = ctx.get("weakness_title", "the task")
    d = float(ctx.get("difficulty", 5.5))
    band = ctx.get("band", "medium")
    idx = int(ctx.get("scenario_index", 1))
    name = PERSONA_NAMES[stable_int(f"{title}|{idx}", len(PERSONA_NAMES))]
    tone = _BAND_TONES.get(band, "vague")
    goal = f"a {band}-difficulty request that stresses: {_clip_text(title, 70)}"
    attitude = (
        f"{name}, a {tone} customer who expects the agent to get every detail "
        f"right without hand-holding"
    )
    opening = (
        f"Hi, I'm {name}. I need help with {goal}. "
        f"Please take care of everything. (difficulty={d:.2f})"
    )
    return _dumps(
        {
            "persona": {"attitude": attitude, "goal": goal, "tone": tone},
            "opening_message": opening,
            "brief": f"Scenario {idx} probing '{_clip_text(title, 60)}' at difficulty {d:.2f} ({band}).",
        }
    )


def _user_turn(ctx: dict) -> str:
    d = float(ctx.get("difficulty", 5.5))
    turn = int(ctx.get("turn_index", 1))
    last = ctx.get("last_reply", "")
    goal_met = "completes everything" in last.lower()
    message = (
        f"Thanks. Tightening the requirements for round {turn}: keep every earlier "
        f"constraint and also handle the harder variant. (difficulty={d:.2f})"
    )
    return _dumps({"message": message, "goal_met": goal_met, "give_up": False})


def _judge(ctx: dict) -> str:
    criteria = list(ctx.get("criteria", []))
    aut_replies = list(ctx.get("aut_replies", []))
    statuses = list(ctx.get("statuses", []))
    hard_fail = any(s != "ok" for s in statuses)
    qualities = []
    for text in aut_replies:
        qualities.extend(float(m) for m in _QUALITY_MARKER.findall(text))
    if hard_fail:
        quality = 1.0
    elif qualities:
        quality = sum(qualities) / len(qualities)
    else:
        quality = 6.0  # plain scripted AUTs with no quality marker
    quality = min(max(quality, 1.0), 10.0)
    scores = _criterion_scores(quality, len(criteria))
    out = {}
    for name, score in zip(criteria, scores):
        out[name] = {
            "score": score,
            "reasoning": f"{name} judged at level {score} for overall quality {quality:.2f}.",
        }
    if hard_fail:
        observation = "Hard failure observed; the agent did not survive the dialogue."
    elif quality >= 8:
        observation = "Agent handled this difficulty comfortably; push harder."
    elif quality <= 3:
        observation = "Agent broke down well below the target; ease off and isolate the trigger."
    else:
        observation = "Mixed performance near the boundary; refine the same pressure point."
    return _dumps({"criteria": out, "observation": observation})


def _criterion_scores(quality: float, n: int) -> list[int]:
    """Integer 1..5 criterion scores whose mean approximates the 1..10
    quality mapped back onto the rubric scale."""
    if n <= 0:
        return []
    target = (quality - 1.0) * 4.0 / 9.0 + 1.0
    base = int(target)
    if base >= 5:
        return [5] * n
    extra = int(round((target - base) * n))
    scores = [base + 1 if i < extra else base for i in range(n)]
    return [min(max(s, 1), 5) for s in scores]


def _report(ctx: dict) -> str:
    sections = {}
    priorities = []
    for item in ctx.get("weaknesses", []):
        wid = item.get("id", "W?")
        title = item.get("title", wid)
        verdict = item.get("verdict", "inconclusive")
        sections[wid] = (
            f"Testing of '{_clip_text(title, 70)}' ran scenarios of increasing pressure. "
            f"The evidence points to a {verdict} outcome; transcripts show where the "
            f"dialogue bent or broke."
        )
        priorities.append(
            f"Harden the agent against '{_clip_text(title, 60)}' ({verdict})."
        )
    n_findings = int(ctx.get("n_findings", 0))
    if ctx.get("ablated"):
        recommendations = [
            "Code analysis was skipped for this run; re-run without ablation to "
            "get source-level recommendations."
        ]
    elif n_findings:
        recommendations = [
            f"Address the {n_findings} static findings from code analysis, starting "
            f"with missing tool-failure fallbacks.",
            "Remove or wire up unreachable dialogue states; dead flows hide "
            "untested behavior.",
        ]
    else:
        recommendations = [
            "No structural defects surfaced; focus fixes on the dialogue behaviors "
            "flagged per weakness."
        ]
    summary = (
        f"The harness probed {len(sections)} hypothesized weaknesses with adaptive "
        f"difficulty dialogues. Confirmed problems cluster where constraints stack up; "
        f"details per weakness below."
    )
    return _dumps(
        {
            "summary": summary,
            "sections": sections,
            "code_recommendations": recommendations,
            "priority_improvements": priorities,
        }
    )


def _qa(ctx: dict) -> str:
    question = str(ctx.get("question", ""))
    facts = ctx.get("facts", {})
    finals = facts.get("finals", {})
    parts = [f"Regarding '{_clip_text(question, 80)}':"]
    lowest = facts.get("lowest_id")
    if lowest and "lowest" in question.lower():
        parts.append(
            f"the lowest-scoring weakness is {lowest} with final score "
            f"{float(finals[lowest]):.2f}."
        )
    elif "overall" in question.lower() and facts.get("overall") is not None:
        parts.append(f"the overall score is {float(facts['overall']):.2f}.")
    else:
        wids = list(finals)
        parts.append(
            f"the report covers {len(wids)} scored weaknesses ({', '.join(wids)}); "
            f"judge scores and difficulty trajectories are in the per-weakness sections."
        )
    if ctx.get("transcript_excerpt"):
        parts.append(
            "The referenced transcript opens with: "
            + _clip_text(ctx["transcript_excerpt"], 100)
        )
    return _dumps({"answer": " ".join(parts)})


def _clip_text(text: str, limit: int) -> str:
    text = str(text).strip()
    return text if len(text) <= limit else text[: limit - 1] + "…"


_TASKS = {
    "interview-next": _interview_next,
    "code-extract": _code_extract,
    "search-queries": _search_queries,
    "code-narrative": _code_narrative,
    "make-weaknesses": _make_weaknesses,
    "revise-weakness": _revise_weakness,
    "make-rubric": _make_rubric,
    "persona": _persona,
    "user-turn": _user_turn,
    "judge": _judge,
    "report": _report,
    "qa": _qa,
}
