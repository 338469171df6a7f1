"""Weakness planning: code analysis, designer interview, evidence search,
weakness generation with approval, and rubric selection.

Everything here is pure with respect to the run store: functions take a
gateway plus explicit inputs and return artifacts; the pipeline owns
committing them and advancing phases. The one stateful dependency is the
user channel, a duck-typed object the caller wires to the CLI or the web
service:

    channel.ask_question(text) -> None        show a question
    channel.wait_answer() -> str              block for the designer's answer
    channel.present_weakness(w) -> None       show a proposed weakness
    channel.wait_decision() -> dict           {"action": approve|revise|reject,
                                               "feedback": str}

Raises ChannelClosedError from the wait_ methods when the designer side
goes away.
"""

from __future__ import annotations

import json
import os
import re
from collections import deque
from dataclasses import dataclass, field

from .errors import AllRejectedError, InvalidRubricError
from .judge import Rubric, load_rubric

CODE_EXTENSIONS = {".py", ".js", ".ts", ".jsx", ".tsx", ".java", ".go", ".rb", ".rs"}
CHUNK_CHARS = 6000
FALLBACK_LABEL = re.compile(r"error|fallback|fail", re.IGNORECASE)
RETRY_LABEL = re.compile(r"retry", re.IGNORECASE)

NODE_KINDS = ("dialogue_state", "tool_call", "memory_access", "exception_handler")


# --- agent graph --------------------------------------------------------------


@dataclass
class AgentGraph:
    nodes: dict[str, dict] = field(default_factory=dict)  # id -> {kind, loc}
    edges: list[dict] = field(default_factory=list)  # {src, dst, label}
    entries: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": nid, **self.nodes[nid]} for nid in sorted(self.nodes)
            ],
            "edges": sorted(
                self.edges, key=lambda e: (e["src"], e["dst"], e["label"])
            ),
            "entries": sorted(self.entries),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AgentGraph":
        g = cls()
        for rec in doc.get("nodes", []):
            rec = dict(rec)
            nid = rec.pop("id")
            g.nodes[nid] = rec
        g.edges = [dict(e) for e in doc.get("edges", [])]
        g.entries = list(doc.get("entries", []))
        return g


def unreachable_nodes(graph: AgentGraph) -> set[str]:
    """Nodes with no path from any entry node. Plain BFS; no model involved."""
    adjacent: dict[str, list[str]] = {}
    for edge in graph.edges:
        adjacent.setdefault(edge["src"], []).append(edge["dst"])
    seen = set()
    frontier = deque(e for e in graph.entries if e in graph.nodes)
    seen.update(frontier)
    while frontier:
        node = frontier.popleft()
        for nxt in adjacent.get(node, []):
            if nxt in graph.nodes and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return set(graph.nodes) - seen


def structural_findings(graph: AgentGraph) -> list[str]:
    """Deterministic defect checks over the extracted graph."""
    findings = []
    dead = sorted(unreachable_nodes(graph))
    if dead:
        findings.append("unreachable nodes: " + ", ".join(dead))
    out_labels: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for edge in graph.edges:
        if edge["src"] in out_labels:
            out_labels[edge["src"]].append(edge.get("label", ""))
    for nid in sorted(graph.nodes):
        if graph.nodes[nid].get("kind") != "tool_call":
            continue
        labels = out_labels[nid]
        if not any(FALLBACK_LABEL.search(lb or "") for lb in labels):
            findings.append(f"missing fallback: tool call {nid} has no error branch")
    for edge in graph.edges:
        if edge["src"] == edge["dst"] and RETRY_LABEL.search(edge.get("label", "")):
            findings.append(
                f"incorrect retry logic: {edge['src']} retries onto itself with no exit"
            )
    return findings


# --- code analysis ------------------------------------------------------------

EXTRACT_SCHEMA = {
    "type": "object",
    "properties": {
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string"},
                    "kind": {"enum": list(NODE_KINDS)},
                },
                "required": ["id", "kind"],
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "src": {"type": "string"},
                    "dst": {"type": "string"},
                    "label": {"type": "string"},
                },
                "required": ["src", "dst"],
            },
        },
        "entries": {"type": "array", "items": {"type": "string"}},
    },
    "required": ["nodes", "edges", "entries"],
}

NARRATIVE_SCHEMA = {
    "type": "object",
    "properties": {"narrative": {"type": "string"}},
    "required": ["narrative"],
}

EXTRACT_SYSTEM = (
    "You map conversational-agent source code into a symbolic graph: nodes "
    "are dialogue states, tool calls, memory accesses, and exception "
    "handlers; edges are tool- or condition-driven transitions."
)


def _iter_source_files(path: str):
    for root, dirs, files in os.walk(path):
        dirs[:] = sorted(d for d in dirs if not d.startswith("."))
        for name in sorted(files):
            if os.path.splitext(name)[1] in CODE_EXTENSIONS:
                yield os.path.join(root, name)


def _qualify(name: str, relpath: str) -> str:
    return name if "::" in name else f"{relpath}::{name}"


def analyze_codebase(gateway, path: str) -> tuple[AgentGraph, str, list[str]]:
    """Scan a codebase into an AgentGraph plus narrative findings.

    Returns (graph, narrative, findings). An empty or missing directory is
    not an error: closed-source AUTs are legitimate, so the result is an
    empty graph and a warning finding.
    """
    graph = AgentGraph()
    if not path or not os.path.isdir(path):
        warning = f"codebase path {path!r} not readable; proceeding without code analysis"
        return graph, warning, [warning]
    files = list(_iter_source_files(path))
    if not files:
        warning = f"no source files under {path}; proceeding without code analysis"
        return graph, warning, [warning]

    for filepath in files:
        rel = os.path.relpath(filepath, path)
        with open(filepath, encoding="utf-8", errors="replace") as f:
            text = f.read()
        for offset in range(0, max(len(text), 1), CHUNK_CHARS):
            chunk = text[offset : offset + CHUNK_CHARS]
            messages = [
                {"role": "system", "content": EXTRACT_SYSTEM},
                {
                    "role": "user",
                    "content": (
                        f"Extract the agent graph from this file ({rel}).\n"
                        f"```\n{chunk}\n```\n"
                        "Reply as JSON with nodes, edges, entries.\n"
                        "CONTEXT " + json.dumps({"task": "code-extract", "file": rel})
                    ),
                },
            ]
            parsed = gateway.complete("analysis_light", messages, schema=EXTRACT_SCHEMA).parsed
            for rec in parsed["nodes"]:
                nid = _qualify(rec["id"], rel)
                graph.nodes.setdefault(nid, {"kind": rec["kind"], "loc": rel})
            for rec in parsed["edges"]:
                graph.edges.append(
                    {
                        "src": _qualify(rec["src"], rel),
                        "dst": _qualify(rec["dst"], rel),
                        "label": rec.get("label", ""),
                    }
                )
            graph.entries.extend(_qualify(e, rel) for e in parsed["entries"])

    # extraction noise tolerance: drop edges and entries pointing nowhere
    graph.edges = [
        e for e in graph.edges if e["src"] in graph.nodes and e["dst"] in graph.nodes
    ]
    graph.entries = sorted({e for e in graph.entries if e in graph.nodes})
    if graph.nodes and not graph.entries:
        targets = {e["dst"] for e in graph.edges}
        roots = sorted(set(graph.nodes) - targets)
        graph.entries = roots or [sorted(graph.nodes)[0]]

    findings = structural_findings(graph)
    tool_nodes = sum(1 for n in graph.nodes.values() if n.get("kind") == "tool_call")
    messages = [
        {"role": "system", "content": EXTRACT_SYSTEM},
        {
            "role": "user",
            "content": (
                "Summarize what this agent graph implies for testing.\n"
                "CONTEXT "
                + json.dumps(
                    {
                        "task": "code-narrative",
                        "nodes": len(graph.nodes),
                        "tool_nodes": tool_nodes,
                        "unreachable": sorted(unreachable_nodes(graph)),
                        "findings": findings,
                    },
                    sort_keys=True,
                )
            ),
        },
    ]
    narrative = gateway.complete("analysis_light", messages, schema=NARRATIVE_SCHEMA).parsed[
        "narrative"
    ]
    return graph, narrative, findings


# --- interview ----------------------------------------------------------------

INTERVIEW_SCHEMA = {
    "type": "object",
    "properties": {"question": {"type": "string"}, "done": {"type": "boolean"}},
    "required": ["question", "done"],
}

INTERVIEW_SYSTEM = (
    "You interview an agent designer one question at a time to learn where "
    "their agent is fragile. Ask the question with the highest information "
    "gain given what you already know; say you are done when answers stop "
    "adding signal."
)


def _is_disengaged(answer: str) -> bool:
    return answer.strip().lower() in ("", "skip")


def interview(gateway, channel, focus: str, aut_name: str, cap: int = 8) -> list[list[str]]:
    """One-question-at-a-time designer interview.

    Stops when the model signals sufficiency, the designer stops engaging
    (two consecutive empty or `skip` answers), or the question cap hits.
    """
    pairs: list[list[str]] = []
    empty_streak = 0
    while len(pairs) < cap:
        ctx = {
            "task": "interview-next",
            "focus": focus,
            "aut_name": aut_name,
            "asked": len(pairs),
        }
        messages = [
            {"role": "system", "content": INTERVIEW_SYSTEM},
            {
                "role": "user",
                "content": (
                    "Prior answers:\n"
                    + "\n".join(f"Q: {q}\nA: {a}" for q, a in pairs)
                    + "\nNext question, or done.\nCONTEXT "
                    + json.dumps(ctx, sort_keys=True)
                ),
            },
        ]
        parsed = gateway.complete("planner_deep", messages, schema=INTERVIEW_SCHEMA).parsed
        if parsed["done"] or not parsed["question"].strip():
            break
        channel.ask_question(parsed["question"])
        answer = channel.wait_answer()
        pairs.append([parsed["question"], answer])
        if _is_disengaged(answer):
            empty_streak += 1
            if empty_streak >= 2:
                break
        else:
            empty_streak = 0
    return pairs


# --- evidence search ----------------------------------------------------------

QUERIES_SCHEMA = {
    "type": "object",
    "properties": {
        "queries": {"type": "array", "items": {"type": "string"}, "minItems": 1}
    },
    "required": ["queries"],
}

EVIDENCE_KINDS = ("paper", "dataset", "bug_report")


class MockSearchBackend:
    """Deterministic offline stand-in for a web search API."""

    def search(self, query: str, k: int = 1) -> list[dict]:
        results = []
        for i in range(k):
            kind = EVIDENCE_KINDS[(len(query) + i) % len(EVIDENCE_KINDS)]
            results.append(
                {
                    "title": f"{kind.replace('_', ' ').title()}: {query[:60]}",
                    "kind": kind,
                    "snippet": (
                        f"Key lesson: agents handling '{query[:50]}' degrade when "
                        f"constraints interact or context shifts mid-task."
                    ),
                }
            )
        return results


def search_loop(
    gateway,
    backend,
    focus: str,
    aut_name: str,
    n: int = 3,
    m: int = 5,
) -> tuple[list[dict], list[str]]:
    """n iterations of m-result evidence search with query reformulation.

    Returns (evidence items, warnings). A dead backend degrades to whatever
    was collected, with a warning, because evidence is helpful but optional.
    """
    items: list[dict] = []
    warnings: list[str] = []
    summaries: list[str] = []
    for iteration in range(1, n + 1):
        ctx = {
            "task": "search-queries",
            "focus": focus,
            "aut_name": aut_name,
            "m": m,
            "prior": summaries[-m:],
        }
        messages = [
            {"role": "system", "content": "You craft focused research queries."},
            {
                "role": "user",
                "content": (
                    f"Generate up to {m} search queries for weaknesses of {aut_name}."
                    "\nCONTEXT " + json.dumps(ctx, sort_keys=True)
                ),
            },
        ]
        parsed = gateway.complete("analysis_light", messages, schema=QUERIES_SCHEMA).parsed
        queries = parsed["queries"][:m]
        for query in queries:
            if len([i for i in items if i["iteration"] == iteration]) >= m:
                break
            try:
                results = backend.search(query, k=1)
            except Exception as e:  # backend down: degrade, don't die
                warnings.append(f"search backend unavailable on iteration {iteration}: {e}")
                return items, warnings
            for rec in results[:1]:
                item = {
                    "query": query,
                    "source_kind": rec.get("kind", "paper"),
                    "title": rec.get("title", query),
                    "summary": rec.get("snippet", ""),
                    "iteration": iteration,
                }
                items.append(item)
                summaries.append(item["summary"])
    return items, warnings


# --- weakness generation and approval ------------------------------------------

_WEAKNESS_ITEM_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "trigger_conditions": {"type": "string", "minLength": 1},
        "expected_failure": {"type": "string", "minLength": 1},
        "manifestation": {"type": "string", "minLength": 1},
        "example_tests": {
            "type": "object",
            "properties": {
                "easy": {"type": "string"},
                "medium": {"type": "string"},
                "hard": {"type": "string"},
            },
            "required": ["easy", "medium", "hard"],
        },
        "provenance": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"enum": ["answer", "evidence", "code"]},
                    "index": {"type": "integer", "minimum": 0},
                },
                "required": ["kind", "index"],
            },
        },
    },
    "required": [
        "name",
        "trigger_conditions",
        "expected_failure",
        "manifestation",
        "example_tests",
        "provenance",
    ],
}

WEAKNESSES_SCHEMA = {
    "type": "object",
    "properties": {
        "weaknesses": {"type": "array", "items": _WEAKNESS_ITEM_SCHEMA, "minItems": 1}
    },
    "required": ["weaknesses"],
}

PLANNER_SYSTEM = (
    "You hypothesize concrete, testable weaknesses of a conversational agent "
    "from code analysis, designer interviews, and research evidence. Think "
    "step by step about where the evidence points before listing weaknesses."
)


def generate_weaknesses(
    gateway,
    *,
    focus: str,
    aut_name: str,
    answers: list[list[str]],
    evidence: list[dict],
    code_findings: list[str],
    code_narrative: str = "",
    max_weaknesses: int = 5,
) -> list[dict]:
    """Chain-of-thought weakness hypotheses, capped at max_weaknesses."""
    hints = [a for _, a in answers if not _is_disengaged(a)]
    hints += [e["summary"] for e in evidence]
    hints += code_findings
    ctx = {
        "task": "make-weaknesses",
        "n": max_weaknesses,
        "focus": focus,
        "hints": hints[:12],
        "n_answers": len(answers),
        "n_evidence": len(evidence),
        "n_code": len(code_findings),
    }
    evidence_text = "\n".join(
        f"[evidence {i}] ({e['source_kind']}) {e['title']}: {e['summary']}"
        for i, e in enumerate(evidence)
    )
    answers_text = "\n".join(f"[answer {i}] Q: {q} A: {a}" for i, (q, a) in enumerate(answers))
    findings_text = "\n".join(f"[code {i}] {t}" for i, t in enumerate(code_findings))
    messages = [
        {"role": "system", "content": PLANNER_SYSTEM},
        {
            "role": "user",
            "content": (
                f"Agent under test: {aut_name}\nTesting focus: {focus}\n\n"
                f"## Code analysis\n{code_narrative or 'none'}\n{findings_text}\n\n"
                f"## Designer interview\n{answers_text or 'none'}\n\n"
                f"## Evidence\n{evidence_text or 'none'}\n\n"
                f"Propose up to {max_weaknesses} weaknesses. Each needs a name, "
                "trigger conditions, expected failure behavior, how it would "
                "manifest in dialogue, example tests for easy/medium/hard bands, "
                "and provenance references into the numbered items above.\n"
                "CONTEXT " + json.dumps(ctx, sort_keys=True)
            ),
        },
    ]
    parsed = gateway.complete("planner_deep", messages, schema=WEAKNESSES_SCHEMA).parsed
    weaknesses = []
    bounds = {"answer": len(answers), "evidence": len(evidence), "code": len(code_findings)}
    for i, item in enumerate(parsed["weaknesses"][:max_weaknesses]):
        provenance = [
            ref
            for ref in item["provenance"]
            if 0 <= ref["index"] < bounds.get(ref["kind"], 0)
        ]
        weaknesses.append(
            {
                "id": f"W{i + 1}",
                "name": item["name"],
                "trigger_conditions": item["trigger_conditions"],
                "expected_failure": item["expected_failure"],
                "manifestation": item["manifestation"],
                "example_tests": item["example_tests"],
                "provenance": provenance,
                "status": "proposed",
            }
        )
    return weaknesses


REVISE_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "trigger_conditions": {"type": "string"},
        "expected_failure": {"type": "string"},
        "manifestation": {"type": "string"},
    },
    "required": ["name", "trigger_conditions", "expected_failure", "manifestation"],
}


def approval_loop(gateway, channel, weaknesses: list[dict]) -> list[dict]:
    """Present each weakness for approval, revision, or rejection.

    Returns the kept weaknesses (statuses updated in place); raises
    AllRejectedError when nothing survives.
    """
    kept = []
    for weakness in weaknesses:
        channel.present_weakness(weakness)
        decision = channel.wait_decision()
        action = decision.get("action", "approve")
        if action == "reject":
            weakness["status"] = "rejected"
            continue
        if action == "revise":
            feedback = decision.get("feedback", "")
            ctx = {"task": "revise-weakness", "title": weakness["name"], "feedback": feedback}
            messages = [
                {"role": "system", "content": PLANNER_SYSTEM},
                {
                    "role": "user",
                    "content": (
                        f"Revise this weakness per the designer's feedback.\n"
                        f"Current: {json.dumps({k: weakness[k] for k in ('name', 'trigger_conditions', 'expected_failure', 'manifestation')}, sort_keys=True)}\n"
                        f"Feedback: {feedback}\n"
                        "CONTEXT " + json.dumps(ctx, sort_keys=True)
                    ),
                },
            ]
            parsed = gateway.complete("planner_deep", messages, schema=REVISE_SCHEMA).parsed
            weakness.update(
                {
                    "name": parsed["name"],
                    "trigger_conditions": parsed["trigger_conditions"],
                    "expected_failure": parsed["expected_failure"],
                    "manifestation": parsed["manifestation"],
                    "status": "revised",
                }
            )
        else:
            weakness["status"] = "approved"
        kept.append(weakness)
    if not kept:
        raise AllRejectedError("designer rejected every proposed weakness")
    return kept


# --- rubric -------------------------------------------------------------------

RUBRIC_SCHEMA = {
    "type": "object",
    "properties": {
        "criteria": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "description": {"type": "string"},
                    "levels": {
                        "type": "array",
                        "minItems": 2,
                        "items": {
                            "type": "object",
                            "properties": {
                                "score": {"type": "integer", "minimum": 1, "maximum": 5},
                                "label": {"type": "string"},
                                "description": {"type": "string"},
                            },
                            "required": ["score", "label", "description"],
                        },
                    },
                },
                "required": ["name", "description", "levels"],
            },
        }
    },
    "required": ["criteria"],
}


def make_rubric(gateway, focus: str, aut_name: str, provided=None) -> Rubric:
    """Pass a provided rubric through verbatim, else generate a general one."""
    if provided is not None:
        rubric = load_rubric(provided)
        if not rubric.criteria:
            raise InvalidRubricError("provided rubric has no criteria")
        return rubric
    ctx = {"task": "make-rubric", "focus": focus, "aut_name": aut_name}
    messages = [
        {"role": "system", "content": "You design evaluation rubrics for agent dialogues."},
        {
            "role": "user",
            "content": (
                f"Create a general rubric for judging dialogues with {aut_name} "
                f"focused on {focus or 'its core task'}. 1..5 levels per criterion.\n"
                "CONTEXT " + json.dumps(ctx, sort_keys=True)
            ),
        },
    ]
    parsed = gateway.complete("analysis_light", messages, schema=RUBRIC_SCHEMA).parsed
    return load_rubric({"name": f"generated-{aut_name}", "criteria": parsed["criteria"]}, origin="generated")
