"""Planner: graph analysis, interview, search, weakness generation, rubric."""

import random
from pathlib import Path

import pytest

from ata.errors import AllRejectedError, ChannelClosedError, InvalidRubricError
from ata.gateway import Gateway
from ata.planner import (
    AgentGraph,
    MockSearchBackend,
    analyze_codebase,
    approval_loop,
    generate_weaknesses,
    interview,
    make_rubric,
    search_loop,
    structural_findings,
    unreachable_nodes,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def mock_gateway():
    g = Gateway()
    ref = g.register_backend({"transport": "mock", "script": {}})
    g.configure_all_roles(ref)
    return g


def graph_of(nodes, edges, entries):
    g = AgentGraph()
    for nid in nodes:
        kind = "tool_call" if nid.startswith("t_") else "dialogue_state"
        g.nodes[nid] = {"kind": kind, "loc": "x"}
    g.edges = [{"src": a, "dst": b, "label": lb} for a, b, lb in edges]
    g.entries = list(entries)
    return g


class ScriptedChannel:
    def __init__(self, answers=(), decisions=()):
        self.questions = []
        self.presented = []
        self._answers = iter(answers)
        self._decisions = iter(decisions)

    def ask_question(self, q):
        self.questions.append(q)

    def wait_answer(self):
        try:
            return next(self._answers)
        except StopIteration:
            raise ChannelClosedError("no more scripted answers")

    def present_weakness(self, w):
        self.presented.append(w)

    def wait_decision(self):
        try:
            return next(self._decisions)
        except StopIteration:
            raise ChannelClosedError("no more scripted decisions")


class TestUnreachable:
    def test_empty_graph(self):
        assert unreachable_nodes(AgentGraph()) == set()

    def test_chain_fully_reachable(self):
        g = graph_of("ABC", [("A", "B", ""), ("B", "C", "")], ["A"])
        assert unreachable_nodes(g) == set()

    def test_node_without_inbound_path(self):
        g = graph_of("ABC", [("A", "B", ""), ("C", "B", "")], ["A"])
        assert unreachable_nodes(g) == {"C"}

    def test_no_entries_all_unreachable(self):
        g = graph_of("AB", [("A", "B", "")], [])
        assert unreachable_nodes(g) == {"A", "B"}

    def test_cycle_reachable_through_entry(self):
        g = graph_of("ABC", [("A", "B", ""), ("B", "C", ""), ("C", "A", "")], ["A"])
        assert unreachable_nodes(g) == set()

    def test_agrees_with_brute_force_on_random_graphs(self):
        rng = random.Random(42)
        for _ in range(150):
            n = rng.randint(0, 30)
            nodes = [f"n{i}" for i in range(n)]
            edges = []
            for _ in range(rng.randint(0, 3 * max(n, 1))):
                if n == 0:
                    break
                edges.append((rng.choice(nodes), rng.choice(nodes), ""))
            entries = [v for v in nodes if rng.random() < 0.15]
            g = graph_of(nodes, edges, entries)

            # oracle: iterate reachability to a fixed point
            reach = set(entries)
            while True:
                grew = False
                for a, b, _ in edges:
                    if a in reach and b not in reach:
                        reach.add(b)
                        grew = True
                if not grew:
                    break
            assert unreachable_nodes(g) == set(nodes) - reach


class TestStructuralFindings:
    def test_tool_call_without_error_branch(self):
        g = graph_of(["a", "t_search"], [("a", "t_search", ""), ("t_search", "a", "success")], ["a"])
        findings = structural_findings(g)
        assert any("missing fallback" in f and "t_search" in f for f in findings)

    def test_tool_call_with_error_branch_clean(self):
        g = graph_of(
            ["a", "t_search", "h"],
            [("a", "t_search", ""), ("t_search", "a", "success"), ("t_search", "h", "on error")],
            ["a"],
        )
        assert not any("missing fallback" in f for f in structural_findings(g))

    def test_retry_self_loop_flagged(self):
        g = graph_of(["a"], [("a", "a", "retry")], ["a"])
        assert any("retry" in f for f in structural_findings(g))

    def test_unreachable_listed(self):
        g = graph_of("AB", [], ["A"])
        assert any("unreachable" in f and "B" in f for f in structural_findings(g))


class TestAnalyzeCodebase:
    def test_four_state_fixture(self, tmp_path):
        (tmp_path / "flow.py").write_text(
            "# entry: A\n"
            "# node: A kind=dialogue_state\n"
            "# node: B kind=dialogue_state\n"
            "# node: C kind=dialogue_state\n"
            "# node: D kind=dialogue_state\n"
            "# edge: A -> B [next]\n"
            "# edge: B -> C [next]\n"
            "STATES = 'ABCD'\n"
        )
        graph, narrative, findings = analyze_codebase(mock_gateway(), str(tmp_path))
        assert len(graph.nodes) == 4
        assert unreachable_nodes(graph) == {"flow.py::D"}
        assert "flow.py::D" in " ".join(findings)
        assert narrative

    def test_empty_directory_degrades(self, tmp_path):
        graph, narrative, findings = analyze_codebase(mock_gateway(), str(tmp_path))
        assert graph.nodes == {}
        assert "without code analysis" in narrative
        assert findings

    def test_missing_directory_degrades(self, tmp_path):
        graph, narrative, _ = analyze_codebase(mock_gateway(), str(tmp_path / "ghost"))
        assert graph.nodes == {}
        assert "not readable" in narrative

    def test_shipped_fixture_defects(self):
        graph, _, findings = analyze_codebase(mock_gateway(), str(FIXTURES / "codebase"))
        dead = unreachable_nodes(graph)
        assert "agent.py::legacy_upsell" in dead
        assert "tools.py::format_error" in dead
        text = " ".join(findings)
        assert "missing fallback" in text and "search_flights" in text
        assert "retry" in text

    def test_cross_file_edges_survive_merge(self):
        graph, _, _ = analyze_codebase(mock_gateway(), str(FIXTURES / "codebase"))
        assert {"src": "agent.py::confirm", "dst": "tools.py::search_flights", "label": "invoke search"} in graph.edges

    def test_graph_json_round_trip(self):
        graph, _, _ = analyze_codebase(mock_gateway(), str(FIXTURES / "codebase"))
        again = AgentGraph.from_json(graph.to_json())
        assert again.to_json() == graph.to_json()


class TestInterview:
    def test_three_questions_then_model_done(self):
        ch = ScriptedChannel(answers=["users book late", "dates change", "no refunds"])
        pairs = interview(mock_gateway(), ch, "bookings", "demo-agent")
        assert len(pairs) == 3
        assert len(ch.questions) == 3
        assert pairs[0][1] == "users book late"

    def test_two_consecutive_empty_answers_end_it(self):
        ch = ScriptedChannel(answers=["", "skip", "never read"])
        pairs = interview(mock_gateway(), ch, "bookings", "demo-agent")
        assert len(pairs) == 2

    def test_question_cap(self):
        ch = ScriptedChannel(answers=["a", "b", "c", "d"])
        pairs = interview(mock_gateway(), ch, "bookings", "demo-agent", cap=2)
        assert len(pairs) == 2

    def test_closed_channel_propagates(self):
        ch = ScriptedChannel(answers=[])
        with pytest.raises(ChannelClosedError):
            interview(mock_gateway(), ch, "bookings", "demo-agent")


class TestSearchLoop:
    def test_n2_m3_collects_and_reformulates(self):
        backend = MockSearchBackend()
        queries_seen = []

        class Spy:
            def search(self, query, k=1):
                queries_seen.append(query)
                return backend.search(query, k)

        items, warnings = search_loop(mock_gateway(), Spy(), "trips", "demo", n=2, m=3)
        assert len(items) == 6
        assert warnings == []
        assert {i["iteration"] for i in items} == {1, 2}
        first = queries_seen[:3]
        second = queries_seen[3:]
        assert set(first).isdisjoint(second)
        assert all(i["source_kind"] in ("paper", "dataset", "bug_report") for i in items)

    def test_n1_m1(self):
        items, _ = search_loop(mock_gateway(), MockSearchBackend(), "trips", "demo", n=1, m=1)
        assert len(items) == 1
        assert items[0]["iteration"] == 1

    def test_dead_backend_degrades_to_empty(self):
        class Dead:
            def search(self, query, k=1):
                raise ConnectionError("no network")

        items, warnings = search_loop(mock_gateway(), Dead(), "trips", "demo", n=2, m=2)
        assert items == []
        assert len(warnings) == 1

    def test_backend_dying_midway_keeps_earlier_items(self):
        calls = {"n": 0}

        class Flaky:
            def search(self, query, k=1):
                calls["n"] += 1
                if calls["n"] > 2:
                    raise ConnectionError("gone")
                return MockSearchBackend().search(query, k)

        items, warnings = search_loop(mock_gateway(), Flaky(), "trips", "demo", n=2, m=2)
        assert len(items) == 2
        assert warnings


class TestGenerateWeaknesses:
    def gen(self, **kw):
        defaults = dict(
            focus="constraint juggling",
            aut_name="demo-agent",
            answers=[["Q1", "late bookings"], ["Q2", "refund rules"]],
            evidence=[
                {"query": "q", "source_kind": "paper", "title": "t", "summary": "s", "iteration": 1}
            ],
            code_findings=["missing fallback: tool call x has no error branch"],
            max_weaknesses=5,
        )
        defaults.update(kw)
        return generate_weaknesses(mock_gateway(), **defaults)

    def test_five_with_band_examples(self):
        ws = self.gen()
        assert [w["id"] for w in ws] == ["W1", "W2", "W3", "W4", "W5"]
        for w in ws:
            assert set(w["example_tests"]) == {"easy", "medium", "hard"}
            assert w["status"] == "proposed"
            assert w["trigger_conditions"] and w["expected_failure"] and w["manifestation"]

    def test_cap_respected(self):
        assert len(self.gen(max_weaknesses=2)) == 2

    def test_provenance_references_exist(self):
        ws = self.gen()
        for w in ws:
            assert w["provenance"], "expected provenance refs"
            for ref in w["provenance"]:
                if ref["kind"] == "answer":
                    assert 0 <= ref["index"] < 2
                elif ref["kind"] == "evidence":
                    assert ref["index"] == 0
                else:
                    assert ref["index"] == 0

    def test_ablated_inputs_leave_only_answer_provenance(self):
        ws = self.gen(evidence=[], code_findings=[])
        kinds = {ref["kind"] for w in ws for ref in w["provenance"]}
        assert kinds <= {"answer"}


class TestApprovalLoop:
    def test_approve_all(self):
        ws = [{"id": f"W{i}", "name": f"w{i}", "trigger_conditions": "t",
               "expected_failure": "e", "manifestation": "m",
               "example_tests": {"easy": "a", "medium": "b", "hard": "c"},
               "provenance": [], "status": "proposed"} for i in range(1, 4)]
        ch = ScriptedChannel(decisions=[{"action": "approve"}] * 3)
        kept = approval_loop(mock_gateway(), ch, ws)
        assert len(kept) == 3
        assert all(w["status"] == "approved" for w in kept)

    def test_revision_merges_and_keeps_provenance(self):
        w = {"id": "W1", "name": "drops constraints", "trigger_conditions": "t",
             "expected_failure": "e", "manifestation": "m",
             "example_tests": {"easy": "a", "medium": "b", "hard": "c"},
             "provenance": [{"kind": "answer", "index": 0}], "status": "proposed"}
        ch = ScriptedChannel(
            decisions=[{"action": "revise", "feedback": "focus on date constraints"}]
        )
        kept = approval_loop(mock_gateway(), ch, [w])
        assert kept[0]["status"] == "revised"
        assert "revised" in kept[0]["name"]
        assert "date constraints" in kept[0]["trigger_conditions"]
        assert kept[0]["provenance"] == [{"kind": "answer", "index": 0}]
        assert kept[0]["example_tests"]["hard"] == "c"

    def test_reject_all_raises(self):
        ws = [{"id": "W1", "name": "x", "trigger_conditions": "t", "expected_failure": "e",
               "manifestation": "m", "example_tests": {"easy": "a", "medium": "b", "hard": "c"},
               "provenance": [], "status": "proposed"}]
        ch = ScriptedChannel(decisions=[{"action": "reject"}])
        with pytest.raises(AllRejectedError):
            approval_loop(mock_gateway(), ch, ws)

    def test_mixed_keeps_survivors(self):
        ws = [dict(id=f"W{i}", name=f"w{i}", trigger_conditions="t", expected_failure="e",
                   manifestation="m", example_tests={"easy": "a", "medium": "b", "hard": "c"},
                   provenance=[], status="proposed") for i in (1, 2)]
        ch = ScriptedChannel(decisions=[{"action": "reject"}, {"action": "approve"}])
        kept = approval_loop(mock_gateway(), ch, ws)
        assert [w["id"] for w in kept] == ["W2"]
        assert ws[0]["status"] == "rejected"


class TestMakeRubric:
    def test_provided_passes_through_verbatim(self):
        path = str(FIXTURES / "rubrics" / "travel.json")
        rubric = make_rubric(mock_gateway(), "trips", "demo", provided=path)
        assert rubric.criterion_names() == [
            "Overall utility",
            "Constraint handling",
            "User communication",
        ]
        assert rubric.source == "provided"

    def test_generated_when_absent(self):
        rubric = make_rubric(mock_gateway(), "trips", "demo")
        assert rubric.source == "generated"
        assert len(rubric.criteria) == 3
        assert rubric.level_to_score is None

    def test_invalid_provided_rejected(self):
        with pytest.raises(InvalidRubricError):
            make_rubric(mock_gateway(), "trips", "demo", provided={"criteria": []})
