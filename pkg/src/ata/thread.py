"""Per-weakness testing loop.

Each approved weakness gets one thread. A round generates a persona and
opening prompt at the current difficulty, plays the dialogue against the
agent under test, hands the transcript to the judge, and feeds the score
back into the difficulty posterior. Difficulties start mid-scale at 5.5;
later rounds use the posterior of everything scored so far, so the thread
homes in on the difficulty where the agent starts to break.

Agent failures (crash, silence, timeout) end the dialogue as an
early_failure outcome. Those scenarios are still judged, because the judge
observation steers the next round, but they contribute no (difficulty,
score) pair: a crash says nothing about where the quality boundary lies,
so the next round retries at the same difficulty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .difficulty import (
    DEFAULT_EPSILON,
    INITIAL_DIFFICULTY,
    DifficultyHistory,
    DifficultyParams,
    band_of,
    converged,
    posterior,
)
from .errors import DomainError
from .judge import JudgeResult, Rubric, evaluate

#: Dialogue length per band, in simulated-user turns. Within a band the
#: limit is linear in difficulty, rounded half-up.
TURN_LIMIT_RANGES = {"easy": (6, 7), "medium": (8, 10), "hard": (11, 12)}

PERSONA_SYSTEM = (
    "You design test personas for stress-testing conversational agents. "
    "Given a hypothesized weakness and a target difficulty, invent a "
    "realistic user whose request will put pressure exactly there."
)

USER_SIM_SYSTEM = (
    "You are role-playing a user in a live conversation with an assistant "
    "agent. Stay in character and never reveal that this is a test."
)

PERSONA_SCHEMA = {
    "type": "object",
    "properties": {
        "persona": {
            "type": "object",
            "properties": {
                "attitude": {"type": "string", "minLength": 1},
                "goal": {"type": "string", "minLength": 1},
                "tone": {"type": "string"},
            },
            "required": ["attitude", "goal", "tone"],
        },
        "opening_message": {"type": "string", "minLength": 1},
        "brief": {"type": "string"},
    },
    "required": ["persona", "opening_message", "brief"],
}

USER_TURN_SCHEMA = {
    "type": "object",
    "properties": {
        "message": {"type": "string", "minLength": 1},
        "goal_met": {"type": "boolean"},
    },
    "required": ["message", "goal_met"],
}


def turn_limit_for(d: float) -> int:
    band = band_of(d)
    lo, hi = TURN_LIMIT_RANGES[band.name]
    frac = (d - band.lo) / (band.hi - band.lo)
    # half-up; round() would send 8.5 down to 8
    return int(math.floor(lo + frac * (hi - lo) + 0.5))


class ThreadLog:
    """Progress observer. Every hook defaults to a no-op; the pipeline
    overrides them to commit scenarios and append events as they happen."""

    def scenario_created(self, scenario: dict) -> None:
        pass

    def dialogue_turn(
        self, scenario: dict, turn_index: int, turn: dict, latency: float | None
    ) -> None:
        pass

    def scenario_executed(self, scenario: dict) -> None:
        pass

    def judge_result(self, scenario: dict, result: JudgeResult, scored: bool) -> None:
        pass

    def difficulty_update(self, payload: dict) -> None:
        pass


@dataclass
class ThreadResult:
    weakness_id: str
    history: DifficultyHistory
    scenarios: list[dict] = field(default_factory=list)
    final_score: float | None = None
    early_failures: int = 0


def generate_testcase(
    gateway,
    weakness: dict,
    d: float,
    k: int,
    observations=(),
    criteria=(),
) -> dict:
    """Build the unexecuted scenario for round k at difficulty d."""
    band = band_of(d)  # validates d in [1, 10]
    example = weakness.get("example_tests", {}).get(band.name, "")
    sections = [
        f"Design test round {k} against this hypothesized weakness.",
        "",
        f"Weakness: {weakness['name']}",
        f"Trigger conditions: {weakness.get('trigger_conditions', '')}",
        f"Expected failure: {weakness.get('expected_failure', '')}",
        f"How it manifests: {weakness.get('manifestation', '')}",
        f"Target difficulty: {d:.2f} ({band.name} band)",
        f"Reference test at this band: {example}",
    ]
    if observations:
        sections.append("Observations from earlier rounds, most recent last:")
        sections.extend(f"  {i + 1}. {o}" for i, o in enumerate(observations))
    sections += [
        "",
        "Produce the persona (attitude, goal, tone), the user's opening "
        "message, and a one-line brief of what this scenario probes. "
        "Reply as JSON.",
        "CONTEXT "
        + json.dumps(
            {
                "task": "persona",
                "weakness_title": weakness["name"],
                "difficulty": d,
                "band": band.name,
                "scenario_index": k,
            },
            sort_keys=True,
        ),
    ]
    messages = [
        {"role": "system", "content": PERSONA_SYSTEM},
        {"role": "user", "content": "\n".join(sections)},
    ]
    parsed = gateway.complete("persona_deep", messages, schema=PERSONA_SCHEMA).parsed
    evaluation_criteria = list(criteria) + [
        f"Weakness-specific: {weakness.get('expected_failure', weakness['name'])}"
    ]
    return {
        "scenario_id": f"{weakness['id']}-t{k}",
        "weakness_id": weakness["id"],
        "index": k,
        "difficulty": d,
        "band": band.name,
        "persona": parsed["persona"],
        "opening_prompt": parsed["opening_message"],
        "brief": parsed.get("brief", ""),
        "turn_limit": turn_limit_for(d),
        "evaluation_criteria": evaluation_criteria,
        "transcript": [],
        "outcome": None,
        "judge_result": None,
    }


def _next_user_turn(gateway, scenario: dict, turns: list[dict], turn_index: int) -> dict:
    persona = scenario["persona"]
    system = (
        f"{USER_SIM_SYSTEM}\nAttitude: {persona['attitude']}\n"
        f"Goal: {persona['goal']}\nTone: {persona['tone']}"
    )
    convo = []
    for t in turns:
        who = "YOU" if t["speaker"] == "simulated_user" else "AGENT"
        text = t["text"] if t["status"] == "ok" else f"<no reply, status={t['status']}>"
        convo.append(f"{who}: {text}")
    last_reply = next(
        (t["text"] or "" for t in reversed(turns) if t["speaker"] == "aut"), ""
    )
    content = "\n".join(
        [
            "The conversation so far:",
            *convo,
            "",
            "Write your next message. Set goal_met true only if the agent has "
            "already fully satisfied your goal; the dialogue then ends and your "
            "message is not sent. Reply as JSON.",
            "CONTEXT "
            + json.dumps(
                {
                    "task": "user-turn",
                    "difficulty": scenario["difficulty"],
                    "turn_index": turn_index,
                    "last_reply": last_reply,
                },
                sort_keys=True,
            ),
        ]
    )
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": content},
    ]
    return gateway.complete("dialogue_light", messages, schema=USER_TURN_SCHEMA).parsed


def run_dialogue(gateway, scenario: dict, session, log: ThreadLog | None = None) -> dict:
    """Play the scenario against one live AUT session.

    Returns a new scenario dict with the transcript and outcome filled in.
    AUT failures become the early_failure outcome, never exceptions.
    """
    if scenario.get("outcome") is not None:
        raise DomainError(f"scenario {scenario['scenario_id']!r} already executed")
    log = log or ThreadLog()
    turns: list[dict] = []
    message = scenario["opening_prompt"]
    user_turns = 0
    while True:
        user_turns += 1
        turn = {"speaker": "simulated_user", "text": message, "status": "ok"}
        turns.append(turn)
        log.dialogue_turn(scenario, len(turns), turn, None)
        result = session.send(message)
        turn = {"speaker": "aut", "text": result.reply, "status": result.status}
        turns.append(turn)
        log.dialogue_turn(scenario, len(turns), turn, result.latency)
        if result.status != "ok":
            outcome = {"kind": "early_failure", "status": result.status}
            break
        if user_turns >= scenario["turn_limit"]:
            outcome = {"kind": "completed"}
            break
        nxt = _next_user_turn(gateway, scenario, turns, user_turns + 1)
        if nxt["goal_met"]:
            outcome = {"kind": "early_success"}
            break
        message = nxt["message"]
    return dict(scenario, transcript=turns, outcome=outcome)


def judge_doc(scenario: dict) -> dict:
    """Scenario reshaped into the judge's transcript document."""
    return {
        "scenario_id": scenario["scenario_id"],
        "weakness_id": scenario["weakness_id"],
        "difficulty": scenario["difficulty"],
        "turns": [
            {
                "role": "user" if t["speaker"] == "simulated_user" else "aut",
                "text": t["text"],
                "status": t["status"],
            }
            for t in scenario["transcript"]
        ],
        "outcome": scenario["outcome"],
        "judgment": scenario.get("judge_result"),
    }


def judge_scenario(
    gateway,
    scenario: dict,
    rubric: Rubric,
    observations=(),
    weakness: dict | None = None,
) -> JudgeResult:
    if scenario.get("outcome") is None:
        raise DomainError(f"scenario {scenario['scenario_id']!r} not executed yet")
    context = {
        "weakness_title": (weakness or {}).get("name", scenario["weakness_id"]),
        "brief": scenario.get("brief", ""),
        "observations": list(observations),
    }
    return evaluate(gateway, judge_doc(scenario), rubric, context)


def run_thread(
    gateway,
    open_session,
    weakness: dict,
    rubric: Rubric,
    k_max: int = 3,
    epsilon: float = DEFAULT_EPSILON,
    log: ThreadLog | None = None,
    params: DifficultyParams | None = None,
) -> ThreadResult:
    """Run up to k_max generate/run/judge rounds for one weakness.

    open_session() must return a fresh AUT session per round. Stops early
    once the posterior moves less than epsilon between rounds. The final
    score is the posterior over all scored rounds, or None if every round
    ended in an agent failure.
    """
    if weakness.get("status") not in ("approved", "revised"):
        raise DomainError(
            f"weakness {weakness.get('id')!r} is {weakness.get('status')!r}, not approved"
        )
    if k_max < 1:
        raise DomainError(f"k_max must be >= 1, got {k_max}")
    log = log or ThreadLog()
    history = DifficultyHistory(params=params or DifficultyParams())
    result = ThreadResult(weakness_id=weakness["id"], history=history)
    observations: list[str] = []
    criteria = rubric.criterion_names()
    for k in range(1, k_max + 1):
        d = INITIAL_DIFFICULTY if len(history) == 0 else posterior(history)
        scenario = generate_testcase(gateway, weakness, d, k, observations, criteria)
        log.scenario_created(scenario)
        session = open_session()
        try:
            scenario = run_dialogue(gateway, scenario, session, log)
        finally:
            session.close()
        log.scenario_executed(scenario)
        judged = judge_scenario(gateway, scenario, rubric, observations, weakness)
        scenario = dict(scenario, judge_result=judged.to_json())
        scored = scenario["outcome"]["kind"] != "early_failure"
        if scored:
            history = history.append(d, judged.overall)
        else:
            result.early_failures += 1
        observations.append(judged.observation)
        log.judge_result(scenario, judged, scored)
        log.difficulty_update(
            {
                "weakness_id": weakness["id"],
                "scenario_id": scenario["scenario_id"],
                "round": k,
                "difficulty": d,
                "score": judged.overall if scored else None,
                "scored": scored,
                "posterior": posterior(history) if len(history) else None,
                "history": history.to_json(),
            }
        )
        result.scenarios.append(scenario)
        if len(history) >= 2 and converged(history, epsilon):
            break
    result.history = history
    result.final_score = posterior(history) if len(history) else None
    return result
