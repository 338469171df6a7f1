"""Report aggregation, composition, verification, and Q&A."""

import json
from statistics import fmean

import jsonschema
import pytest

from ata.difficulty import step
from ata.errors import IntegrityError, NoScoredScenariosError, ReportMissingError
from ata.gateway import Gateway
from ata.reporter import (
    aggregate_run,
    compose_report,
    render_markdown,
    report_qa,
    report_schema,
    verdict_of,
    verify_report,
)
from ata.store import initial_state

ORACLE_STEP_55_10 = 7.927903210605343


def mock_gateway():
    g = Gateway()
    ref = g.register_backend({"transport": "mock", "script": {}})
    g.configure_all_roles(ref)
    return g


def weakness(wid, status="approved"):
    return {
        "id": wid,
        "name": f"weakness {wid}",
        "trigger_conditions": "t",
        "expected_failure": "e",
        "manifestation": "m",
        "example_tests": {"easy": "a", "medium": "b", "hard": "c"},
        "provenance": [],
        "status": status,
    }


def scenario(wid, k, d, overall=None, failure=None, judged=True):
    out = {"kind": "completed"}
    if failure:
        out = {"kind": "early_failure", "status": failure}
    s = {
        "scenario_id": f"{wid}-t{k}",
        "weakness_id": wid,
        "index": k,
        "difficulty": d,
        "band": "medium",
        "persona": {"attitude": "a", "goal": "g", "tone": "vague"},
        "opening_prompt": "hello",
        "brief": "probe",
        "turn_limit": 9,
        "evaluation_criteria": [],
        "transcript": [
            {"speaker": "simulated_user", "text": "hello agent", "status": "ok"},
            {"speaker": "aut", "text": "greetings tester", "status": "ok"},
        ],
        "outcome": out,
        "judge_result": None,
    }
    if judged and not failure and overall is not None:
        s["judge_result"] = {
            "criterion_scores": {"Quality": {"score": 3, "reasoning": "r"}},
            "overall": overall,
            "observation": "observed",
        }
    elif failure:
        s["judge_result"] = {
            "criterion_scores": {"Quality": {"score": 1, "reasoning": "r"}},
            "overall": 1.0,
            "observation": "hard failure",
        }
    return s


def make_state(weaknesses, scenarios, config=None):
    state = initial_state("run-x", "mock-echo", "constraint handling", config or {})
    state["weaknesses"] = weaknesses
    state["scenarios"] = scenarios
    return state


def two_weakness_state(**kw):
    return make_state(
        [weakness("W1"), weakness("W2")],
        {
            "W1": [scenario("W1", 1, 5.5, overall=10.0)],
            "W2": [scenario("W2", 1, 5.5, overall=5.5)],
        },
        **kw,
    )


class TestAggregate:
    def test_neutral_fixed_point(self):
        state = make_state([weakness("W1")], {"W1": [scenario("W1", 1, 5.5, overall=5.5)]})
        stats = aggregate_run(state)
        assert stats["per_weakness"]["W1"]["final_score"] == 5.5
        assert stats["overall_score"] == 5.5

    def test_overall_is_mean_of_finals(self):
        stats = aggregate_run(two_weakness_state())
        finals = [stats["per_weakness"][w]["final_score"] for w in ("W1", "W2")]
        assert finals[0] == pytest.approx(ORACLE_STEP_55_10, abs=1e-9)
        assert finals[1] == 5.5
        assert stats["overall_score"] == pytest.approx(
            (ORACLE_STEP_55_10 + 5.5) / 2, abs=1e-12
        )
        assert stats["overall_score"] == pytest.approx(6.71395, abs=1e-5)

    def test_no_scored_scenarios_raises_with_breakdown(self):
        state = make_state(
            [weakness("W1")],
            {"W1": [scenario("W1", 1, 5.5, failure="crash"), scenario("W1", 2, 5.5, failure="crash")]},
        )
        with pytest.raises(NoScoredScenariosError) as err:
            aggregate_run(state)
        assert "crash: 2" in str(err.value)

    def test_rejected_weaknesses_excluded(self):
        state = make_state(
            [weakness("W1"), weakness("W2", status="rejected")],
            {"W1": [scenario("W1", 1, 5.5, overall=5.5)]},
        )
        stats = aggregate_run(state)
        assert set(stats["per_weakness"]) == {"W1"}

    def test_early_failures_tracked_but_unscored(self):
        state = make_state(
            [weakness("W1")],
            {
                "W1": [
                    scenario("W1", 1, 5.5, failure="timeout"),
                    scenario("W1", 2, 5.5, overall=7.0),
                ]
            },
        )
        stats = aggregate_run(state)
        entry = stats["per_weakness"]["W1"]
        assert entry["early_failures"] == 1
        assert entry["scenario_count"] == 2
        assert entry["scores"] == [7.0]
        assert entry["history"] == [[5.5, 7.0]]
        assert stats["totals"] == {
            "scenarios": 2,
            "scored": 1,
            "early_failures": 1,
            "mean_score": 7.0,
            "mean_difficulty": 5.5,
        }

    def test_multi_round_history_and_means(self):
        d2 = step(5.5, 10.0)
        state = make_state(
            [weakness("W1")],
            {"W1": [scenario("W1", 1, 5.5, overall=10.0), scenario("W1", 2, d2, overall=2.0)]},
        )
        stats = aggregate_run(state)
        entry = stats["per_weakness"]["W1"]
        assert entry["history"] == [[5.5, 10.0], [d2, 2.0]]
        assert stats["totals"]["mean_score"] == pytest.approx(fmean([10.0, 2.0]))
        assert stats["totals"]["mean_difficulty"] == pytest.approx(fmean([5.5, d2]))

    def test_unjudged_scenario_counts_but_does_not_score(self):
        state = make_state(
            [weakness("W1")],
            {
                "W1": [
                    scenario("W1", 1, 5.5, overall=5.5),
                    scenario("W1", 2, 6.0, overall=None, judged=False),
                ]
            },
        )
        stats = aggregate_run(state)
        assert stats["per_weakness"]["W1"]["scenario_count"] == 2
        assert stats["per_weakness"]["W1"]["scores"] == [5.5]

    def test_weakness_without_scenarios_untested(self):
        state = make_state(
            [weakness("W1"), weakness("W2")],
            {"W1": [scenario("W1", 1, 5.5, overall=6.0)]},
        )
        stats = aggregate_run(state)
        assert stats["per_weakness"]["W2"]["verdict"] == "untested"
        assert stats["per_weakness"]["W2"]["final_score"] is None
        # overall averages only weaknesses that produced a final
        assert stats["overall_score"] == stats["per_weakness"]["W1"]["final_score"]


class TestVerdicts:
    @pytest.mark.parametrize(
        "final,failures,expected",
        [
            (None, 2, "blocking-failures"),
            (None, 0, "untested"),
            (3.9, 0, "confirmed-severe"),
            (4.0, 0, "confirmed"),
            (5.4, 1, "confirmed"),
            (5.5, 0, "partially-confirmed"),
            (6.99, 0, "partially-confirmed"),
            (7.0, 0, "resilient"),
            (10.0, 0, "resilient"),
        ],
    )
    def test_thresholds(self, final, failures, expected):
        assert verdict_of(final, failures) == expected


class TestCompose:
    def compose(self, state=None):
        state = state or two_weakness_state()
        stats = aggregate_run(state)
        return compose_report(mock_gateway(), stats, state), stats, state

    def test_all_sections_present_and_valid(self):
        report, stats, _ = self.compose()
        for key in (
            "executive_summary",
            "overall_score",
            "per_weakness",
            "totals",
            "code_recommendations",
            "priority_improvements",
            "methodology",
        ):
            assert key in report
        jsonschema.validate(report, report_schema())
        for wid, entry in report["per_weakness"].items():
            assert entry["patterns"], f"missing patterns for {wid}"

    def test_numbers_injected_verbatim(self):
        report, stats, _ = self.compose()
        assert report["overall_score"] == stats["overall_score"]
        assert report["totals"] == stats["totals"]
        md = render_markdown(report)
        assert f"{stats['overall_score']:.5f}" in md
        assert "6.71395" in md

    def test_priority_order_worst_first(self):
        state = make_state(
            [weakness("W1"), weakness("W2"), weakness("W3")],
            {
                "W1": [scenario("W1", 1, 5.5, overall=9.0)],
                "W2": [scenario("W2", 1, 5.5, failure="crash")],
                "W3": [scenario("W3", 1, 5.5, overall=2.0)],
            },
        )
        report, _, _ = self.compose(state)
        priorities = report["priority_improvements"]
        assert "weakness W2" in priorities[0]  # hard failures outrank low scores
        assert "weakness W3" in priorities[1]
        assert "weakness W1" in priorities[2]

    def test_ablation_marks_methodology(self):
        state = two_weakness_state(config={"ablate_evidence": True})
        report, _, _ = self.compose(state)
        assert report["methodology"]["ablate_evidence"] is True
        assert "skipped" in report["methodology"]["notes"]
        assert any("skipped" in r or "ablation" in r for r in report["code_recommendations"])

    def test_round_trip(self):
        report, _, _ = self.compose()
        assert json.loads(json.dumps(report)) == report


class TestRenderMarkdown:
    def test_sections_and_na(self):
        state = make_state(
            [weakness("W1"), weakness("W2")],
            {
                "W1": [scenario("W1", 1, 5.5, overall=6.0)],
                "W2": [scenario("W2", 1, 5.5, failure="crash")],
            },
        )
        stats = aggregate_run(state)
        report = compose_report(mock_gateway(), stats, state)
        md = render_markdown(report)
        for heading in (
            "## Executive summary",
            "## Overall score",
            "## Test summaries",
            "## Identified patterns",
            "## Code recommendations",
            "## Priority improvements",
            "## Methodology",
        ):
            assert heading in md
        assert "n/a" in md  # W2 has no final score
        rows = [ln for ln in md.splitlines() if ln.startswith("| W1") or ln.startswith("| W2")]
        assert len(rows) == 2  # one table row per weakness


class TestVerify:
    def report_and_state(self):
        state = two_weakness_state()
        stats = aggregate_run(state)
        return compose_report(mock_gateway(), stats, state), state

    def test_clean_report_passes(self):
        report, state = self.report_and_state()
        verify_report(report, state)

    def test_tampered_overall_detected(self):
        report, state = self.report_and_state()
        report["overall_score"] += 0.001
        with pytest.raises(IntegrityError, match="overall_score"):
            verify_report(report, state)

    def test_tampered_score_list_detected(self):
        report, state = self.report_and_state()
        report["per_weakness"]["W1"]["scores"][0] = 9.0
        with pytest.raises(IntegrityError, match="scores"):
            verify_report(report, state)

    def test_missing_weakness_detected(self):
        report, state = self.report_and_state()
        del report["per_weakness"]["W2"]
        with pytest.raises(IntegrityError, match="keys differ"):
            verify_report(report, state)

    def test_tolerance_respected(self):
        report, state = self.report_and_state()
        report["overall_score"] += 1e-12
        verify_report(report, state)  # within 1e-9


class TestQa:
    def ready(self):
        state = two_weakness_state()
        stats = aggregate_run(state)
        report = compose_report(mock_gateway(), stats, state)
        return report, state

    def test_requires_report(self):
        with pytest.raises(ReportMissingError):
            report_qa(mock_gateway(), None, {}, "how did it go?")

    def test_lowest_scoring_weakness_named(self):
        report, state = self.ready()
        answer = report_qa(mock_gateway(), report, state, "Which weakness scored lowest?")
        assert "W2" in answer  # final 5.5 < 7.92790

    def test_scenario_id_pulls_transcript(self):
        report, state = self.ready()
        answer = report_qa(mock_gateway(), report, state, "What happened in W1-t1?")
        assert "hello agent" in answer

    def test_generic_question_counts_weaknesses(self):
        report, state = self.ready()
        answer = report_qa(mock_gateway(), report, state, "Summarize the run")
        assert "2" in answer
