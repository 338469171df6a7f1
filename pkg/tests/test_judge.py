"""Judge: aggregation exactness, rubric loading and mapping, evaluation."""

import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ata.errors import AlreadyJudgedError, DomainError, InvalidRubricError
from ata.gateway import Gateway
from ata.judge import (
    JudgeResult,
    Rubric,
    RubricCriterion,
    RubricLevel,
    aggregate,
    build_judge_messages,
    evaluate,
    judge_schema,
    load_rubric,
)

RUBRIC_DIR = Path(__file__).resolve().parent.parent / "fixtures" / "rubrics"


def simple_rubric(names=("A", "B")) -> Rubric:
    levels = tuple(
        RubricLevel(i, f"L{i}", f"level {i}") for i in range(1, 6)
    )
    return Rubric(
        name="simple",
        criteria=tuple(RubricCriterion(n, f"criterion {n}", levels) for n in names),
    )


def transcript(turns=None, outcome=None, scenario_id="W1-s1"):
    return {
        "scenario_id": scenario_id,
        "weakness_id": "W1",
        "difficulty": 5.5,
        "turns": turns
        or [
            {"role": "user", "text": "please plan a trip (difficulty=5.50)"},
            {"role": "aut", "text": "Sure, here is a plan.", "status": "ok"},
        ],
        "outcome": outcome or {"kind": "completed"},
        "judgment": None,
    }


class TestAggregate:
    def test_all_ones_is_one(self):
        assert aggregate({"a": 1, "b": 1, "c": 1}) == 1.0

    def test_all_fives_is_ten(self):
        assert aggregate({"a": 5, "b": 5}) == 10.0

    def test_all_threes_is_anchor(self):
        assert aggregate({"a": 3, "b": 3, "c": 3}) == 5.5

    def test_five_and_three(self):
        assert aggregate({"a": 5, "b": 3}) == 7.75

    def test_constant_scores_span(self):
        for c, expect in [(1, 1.0), (2, 3.25), (3, 5.5), (4, 7.75), (5, 10.0)]:
            assert aggregate({"x": c, "y": c}) == expect

    def test_accepts_score_dicts(self):
        scores = {"a": {"score": 4, "reasoning": "ok"}, "b": {"score": 2, "reasoning": "eh"}}
        assert aggregate(scores) == aggregate({"a": 4, "b": 2})

    def test_weights(self):
        # weight 3 on the 5 pulls the mean to 4.5 -> s = 8.875
        s = aggregate({"a": 5, "b": 3}, weights={"a": 3.0, "b": 1.0})
        assert s == pytest.approx((4.5 - 1) * 2.25 + 1)

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            aggregate({})

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            aggregate({"a": 0})
        with pytest.raises(DomainError):
            aggregate({"a": 6})

    @given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=8))
    def test_range_and_formula(self, scores):
        s = aggregate(scores)
        assert 1.0 <= s <= 10.0
        mean = sum(scores) / len(scores)
        assert s == pytest.approx((mean - 1) * 2.25 + 1)

    @given(
        st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=6),
        st.data(),
    )
    def test_monotone_in_each_criterion(self, scores, data):
        idx = data.draw(st.integers(min_value=0, max_value=len(scores) - 1))
        if scores[idx] == 5:
            return
        bumped = list(scores)
        bumped[idx] += 1
        assert aggregate(bumped) > aggregate(scores)


class TestRubricLoading:
    def test_travel_fixture_loads(self):
        r = load_rubric(str(RUBRIC_DIR / "travel.json"))
        assert r.name == "travel-planner"
        assert r.criterion_names() == [
            "Overall utility",
            "Constraint handling",
            "User communication",
        ]
        assert r.level_to_score == {-1: 1, 0: 2, 1: 3, 2: 4, 3: 5}

    def test_wikipedia_fixture_loads(self):
        r = load_rubric(str(RUBRIC_DIR / "wikipedia.json"))
        assert r.criterion_names() == [
            "Overall utility",
            "Citations and sourcing",
            "Completeness",
            "Style and organization",
        ]

    def test_native_levels_mapped_to_1_5(self):
        r = load_rubric(str(RUBRIC_DIR / "travel.json"))
        constraint = r.criteria[1]
        mapped = r.mapped_levels(constraint)
        assert [lv.score for lv in mapped] == [1, 2, 3, 4, 5]
        assert mapped[0].label == "Bad"
        assert mapped[4].label == "Exceptional"

    def test_missing_mapping_for_native_levels(self):
        doc = {
            "criteria": [
                {
                    "name": "X",
                    "levels": [{"score": -1, "label": "Bad", "description": "d"}],
                }
            ]
        }
        with pytest.raises(InvalidRubricError):
            load_rubric(doc)

    def test_mapping_must_be_increasing(self):
        doc = {
            "level_to_score": {"-1": 5, "0": 1, "1": 2, "2": 3, "3": 4},
            "criteria": [
                {"name": "X", "levels": [{"score": -1, "label": "Bad", "description": "d"}]}
            ],
        }
        with pytest.raises(InvalidRubricError):
            load_rubric(doc)

    def test_mapping_values_within_scale(self):
        doc = {
            "level_to_score": {"-1": 0, "0": 2, "1": 3, "2": 4, "3": 5},
            "criteria": [
                {"name": "X", "levels": [{"score": -1, "label": "Bad", "description": "d"}]}
            ],
        }
        with pytest.raises(InvalidRubricError):
            load_rubric(doc)

    def test_duplicate_criterion_rejected(self):
        doc = {
            "criteria": [
                {"name": "X", "levels": [{"score": 1, "label": "a", "description": "d"}]},
                {"name": "X", "levels": [{"score": 1, "label": "a", "description": "d"}]},
            ]
        }
        with pytest.raises(InvalidRubricError):
            load_rubric(doc)

    def test_empty_criteria_rejected(self):
        with pytest.raises(InvalidRubricError):
            load_rubric({"criteria": []})

    def test_round_trip(self):
        r = load_rubric(str(RUBRIC_DIR / "travel.json"))
        again = load_rubric(r.to_json())
        assert again == r


class TestPromptConstruction:
    def test_prompt_contains_rubric_and_transcript(self):
        r = simple_rubric()
        msgs = build_judge_messages(transcript(), r, {"weakness_title": "drops constraints"})
        text = msgs[1]["content"]
        assert "criterion A" in text
        assert "TESTER: please plan a trip" in text
        assert "AGENT: Sure, here is a plan." in text
        assert "drops constraints" in text

    def test_early_failure_status_line_present(self):
        r = simple_rubric()
        doc = transcript(
            turns=[
                {"role": "user", "text": "hi"},
                {"role": "aut", "text": None, "status": "crash"},
            ],
            outcome={"kind": "early_failure", "status": "crash"},
        )
        text = build_judge_messages(doc, r)[1]["content"]
        assert "status=crash" in text

    def test_mapped_scale_shown_for_native_rubrics(self):
        r = load_rubric(str(RUBRIC_DIR / "travel.json"))
        text = build_judge_messages(transcript(), r)[1]["content"]
        assert "score 1 (Bad)" in text
        assert "score 5 (Exceptional)" in text
        assert "score -1" not in text

    def test_schema_requires_every_criterion(self):
        schema = judge_schema(simple_rubric(("A", "B", "C")))
        crit = schema["properties"]["criteria"]
        assert crit["required"] == ["A", "B", "C"]
        assert crit["additionalProperties"] is False


def mock_gateway(script=None):
    g = Gateway()
    ref = g.register_backend({"transport": "mock", "script": script or {}})
    g.configure_all_roles(ref)
    return g


class TestEvaluate:
    def test_standard_mock_round_trip(self):
        g = mock_gateway()
        r = simple_rubric()
        doc = transcript(
            turns=[
                {"role": "user", "text": "go (difficulty=5.50)"},
                {"role": "aut", "text": "done [q=10.0]", "status": "ok"},
            ]
        )
        result = evaluate(g, doc, r)
        assert set(result.criterion_scores) == {"A", "B"}
        assert result.criterion_scores["A"]["score"] == 5
        assert result.overall == 10.0
        assert result.observation

    def test_anchor_quality_maps_to_anchor_overall(self):
        g = mock_gateway()
        r = simple_rubric(("A", "B", "C", "D"))
        doc = transcript(
            turns=[
                {"role": "user", "text": "go (difficulty=5.50)"},
                {"role": "aut", "text": "ok [q=5.5]", "status": "ok"},
            ]
        )
        result = evaluate(g, doc, r)
        assert abs(result.overall - 5.5) < 0.8  # integer quantization slack

    def test_already_judged_rejected(self):
        g = mock_gateway()
        doc = transcript()
        doc["judgment"] = {"overall": 5.0}
        with pytest.raises(AlreadyJudgedError):
            evaluate(g, doc, simple_rubric())

    def test_deterministic_under_mock(self):
        r = simple_rubric()
        doc = transcript(
            turns=[
                {"role": "user", "text": "go (difficulty=7.25)"},
                {"role": "aut", "text": "partial [q=4.2]", "status": "ok"},
            ]
        )
        a = evaluate(mock_gateway(), doc, r)
        b = evaluate(mock_gateway(), doc, r)
        assert a == b

    def test_result_serialization_round_trip(self):
        g = mock_gateway()
        result = evaluate(g, transcript(), simple_rubric())
        doc = json.loads(json.dumps(result.to_json()))
        assert JudgeResult.from_json(doc) == result
