"""Dialogue evaluation: per-criterion rubric scoring and aggregation.

The judge sees the finished transcript, the rubric, and the scenario
generator's own framing of what the test was probing (it runs on the same
backend as the persona generator for exactly that reason). It returns one
integer 1..5 score per criterion plus reasoning, an overall 1..10 score,
and an observation that steers the thread's next scenario.

Aggregation is the affine map s = (mean - 1) * 9/4 + 1, chosen so the
neutral criterion score 3 lands exactly on 5.5, the anchor of the
difficulty update; an "average" dialogue therefore leaves difficulty
untouched.

Rubrics may be authored on a native level scale (e.g. -1..3 with labels
Bad/Meh/Ok/Good/Exceptional). Such files declare a level_to_score table
mapping native levels onto 1..5; prompts always present the mapped scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import AlreadyJudgedError, DomainError, InvalidRubricError

JUDGE_SYSTEM = (
    "You are a meticulous, impartial evaluator of agent dialogues. Score "
    "strictly against the rubric. You generated this test scenario, so use "
    "that context to judge whether the agent met the scenario's real intent."
)


@dataclass(frozen=True)
class RubricLevel:
    score: int
    label: str
    description: str


@dataclass(frozen=True)
class RubricCriterion:
    name: str
    description: str
    levels: tuple[RubricLevel, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class Rubric:
    name: str
    criteria: tuple[RubricCriterion, ...]
    level_to_score: dict[int, int] | None = None
    source: str = "provided"

    def criterion_names(self) -> list[str]:
        return [c.name for c in self.criteria]

    def weights(self) -> dict[str, float]:
        return {c.name: c.weight for c in self.criteria}

    def mapped_levels(self, criterion: RubricCriterion) -> list[RubricLevel]:
        """Levels re-expressed on the 1..5 judging scale."""
        if self.level_to_score is None:
            return list(criterion.levels)
        return [
            RubricLevel(self.level_to_score[lv.score], lv.label, lv.description)
            for lv in criterion.levels
        ]

    def to_json(self) -> dict:
        doc = {
            "name": self.name,
            "source": self.source,
            "criteria": [
                {
                    "name": c.name,
                    "description": c.description,
                    "weight": c.weight,
                    "levels": [
                        {"score": lv.score, "label": lv.label, "description": lv.description}
                        for lv in c.levels
                    ],
                }
                for c in self.criteria
            ],
        }
        if self.level_to_score is not None:
            doc["level_to_score"] = {str(k): v for k, v in self.level_to_score.items()}
        return doc


def load_rubric(source: str | dict, origin: str = "provided") -> Rubric:
    """Parse and validate a rubric from a file path or a decoded dict."""
    if isinstance(source, str):
        try:
            with open(source, encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidRubricError(f"{source}: {e}") from e
    else:
        doc = source
    if not isinstance(doc, dict) or not isinstance(doc.get("criteria"), list):
        raise InvalidRubricError("rubric must be an object with a criteria list")
    if not doc["criteria"]:
        raise InvalidRubricError("rubric has no criteria")

    mapping = None
    if "level_to_score" in doc:
        try:
            mapping = {int(k): int(v) for k, v in doc["level_to_score"].items()}
        except (TypeError, ValueError) as e:
            raise InvalidRubricError(f"bad level_to_score table: {e}") from e
        if any(not 1 <= v <= 5 for v in mapping.values()):
            raise InvalidRubricError("level_to_score values must be within 1..5")
        keys = sorted(mapping)
        mapped = [mapping[k] for k in keys]
        if mapped != sorted(mapped) or len(set(mapped)) != len(mapped):
            raise InvalidRubricError("level_to_score must be strictly increasing")

    criteria = []
    seen = set()
    for rec in doc["criteria"]:
        name = rec.get("name")
        if not name:
            raise InvalidRubricError("criterion without a name")
        if name in seen:
            raise InvalidRubricError(f"duplicate criterion {name!r}")
        seen.add(name)
        levels = []
        for lv in rec.get("levels", []):
            levels.append(
                RubricLevel(int(lv["score"]), str(lv.get("label", "")), str(lv.get("description", "")))
            )
        if not levels:
            raise InvalidRubricError(f"criterion {name!r} has no levels")
        native = {lv.score for lv in levels}
        if mapping is not None:
            missing = native - set(mapping)
            if missing:
                raise InvalidRubricError(
                    f"criterion {name!r} has levels {sorted(missing)} absent from level_to_score"
                )
        elif not native <= {1, 2, 3, 4, 5}:
            raise InvalidRubricError(
                f"criterion {name!r} uses non-1..5 levels but rubric has no level_to_score table"
            )
        weight = float(rec.get("weight", 1.0))
        if weight <= 0:
            raise InvalidRubricError(f"criterion {name!r} weight must be positive")
        criteria.append(RubricCriterion(name, str(rec.get("description", "")), tuple(levels), weight))
    return Rubric(
        name=str(doc.get("name", "rubric")),
        criteria=tuple(criteria),
        level_to_score=mapping,
        source=doc.get("source", origin),
    )


def aggregate(criterion_scores, weights: dict[str, float] | None = None) -> float:
    """Affine map of the (weighted) mean criterion score from [1,5] to [1,10]."""
    if isinstance(criterion_scores, dict):
        items = list(criterion_scores.items())
    else:
        items = [(str(i), s) for i, s in enumerate(criterion_scores)]
    if not items:
        raise DomainError("aggregate needs at least one criterion score")
    num = 0.0
    den = 0.0
    for name, score in items:
        if isinstance(score, dict):
            score = score["score"]
        if not 1 <= score <= 5:
            raise DomainError(f"criterion {name!r} score {score} outside [1, 5]")
        w = 1.0 if weights is None else weights.get(name, 1.0)
        num += w * float(score)
        den += w
    mean = num / den
    return (mean - 1.0) * (9.0 / 4.0) + 1.0


@dataclass(frozen=True)
class JudgeResult:
    criterion_scores: dict  # name -> {"score": int, "reasoning": str}
    overall: float
    observation: str

    def to_json(self) -> dict:
        return {
            "criterion_scores": self.criterion_scores,
            "overall": self.overall,
            "observation": self.observation,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "JudgeResult":
        return cls(
            criterion_scores=doc["criterion_scores"],
            overall=doc["overall"],
            observation=doc["observation"],
        )


def format_transcript(turns: list[dict]) -> str:
    lines = []
    for turn in turns:
        who = "TESTER" if turn.get("role") == "user" else "AGENT"
        status = turn.get("status", "ok")
        if turn.get("role") != "user" and status != "ok":
            lines.append(f"{who}: <no reply — status={status}>")
        else:
            lines.append(f"{who}: {turn.get('text', '')}")
    return "\n".join(lines)


def _rubric_prompt(rubric: Rubric) -> str:
    parts = [f"Rubric: {rubric.name}"]
    for criterion in rubric.criteria:
        parts.append(f"\n## {criterion.name}\n{criterion.description}")
        for lv in rubric.mapped_levels(criterion):
            parts.append(f"  score {lv.score} ({lv.label}): {lv.description}")
    return "\n".join(parts)


def judge_schema(rubric: Rubric) -> dict:
    per_criterion = {
        "type": "object",
        "properties": {
            "score": {"type": "integer", "minimum": 1, "maximum": 5},
            "reasoning": {"type": "string"},
        },
        "required": ["score", "reasoning"],
    }
    return {
        "type": "object",
        "properties": {
            "criteria": {
                "type": "object",
                "properties": {name: per_criterion for name in rubric.criterion_names()},
                "required": rubric.criterion_names(),
                "additionalProperties": False,
            },
            "observation": {"type": "string"},
        },
        "required": ["criteria", "observation"],
    }


def build_judge_messages(
    transcript_doc: dict, rubric: Rubric, thread_context: dict | None = None
) -> list[dict]:
    turns = transcript_doc.get("turns", [])
    statuses = [t.get("status", "ok") for t in turns if t.get("role") != "user"]
    aut_replies = [
        t.get("text") or "" for t in turns if t.get("role") != "user"
    ]
    context = thread_context or {}
    sections = [
        "Evaluate the agent's performance in this dialogue against the rubric.",
        "",
        _rubric_prompt(rubric),
        "",
        "## Scenario context (you designed this test)",
        f"Weakness under test: {context.get('weakness_title', 'n/a')}",
        f"Scenario brief: {context.get('brief', 'n/a')}",
        f"Target difficulty: {transcript_doc.get('difficulty', 'n/a')}",
    ]
    if context.get("observations"):
        sections.append("Earlier observations: " + " | ".join(context["observations"]))
    outcome = transcript_doc.get("outcome", {})
    if outcome.get("kind") == "early_failure":
        sections.append(f"Outcome: early failure, status={outcome.get('status')}")
    sections += [
        "",
        "## Transcript",
        format_transcript(turns),
        "",
        "Score every criterion (integer 1..5) with reasoning, then give one "
        "observation covering strengths, weaknesses, a dialogue example, and "
        "guidance for the next test. Reply as JSON.",
        "CONTEXT "
        + json.dumps(
            {
                "task": "judge",
                "criteria": rubric.criterion_names(),
                "aut_replies": aut_replies,
                "statuses": statuses,
                "scenario_id": transcript_doc.get("scenario_id", ""),
            },
            sort_keys=True,
        ),
    ]
    return [
        {"role": "system", "content": JUDGE_SYSTEM},
        {"role": "user", "content": "\n".join(sections)},
    ]


def evaluate(
    gateway,
    transcript_doc: dict,
    rubric: Rubric,
    thread_context: dict | None = None,
) -> JudgeResult:
    if transcript_doc.get("judgment") is not None:
        raise AlreadyJudgedError(
            f"scenario {transcript_doc.get('scenario_id')!r} was already judged"
        )
    messages = build_judge_messages(transcript_doc, rubric, thread_context)
    exchange = gateway.complete("judge_deep", messages, schema=judge_schema(rubric))
    parsed = exchange.parsed
    scores = parsed["criteria"]
    overall = aggregate(scores, rubric.weights())
    return JudgeResult(
        criterion_scores=scores, overall=overall, observation=parsed["observation"]
    )
