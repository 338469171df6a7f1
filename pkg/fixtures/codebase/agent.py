"""Dialogue flow for the demo booking agent.

Each state decides the next prompt from the filled slots. Transitions are
annotated for graph tooling:

# entry: greet
# node: greet kind=dialogue_state
# node: collect_dates kind=dialogue_state
# node: confirm kind=dialogue_state
# node: legacy_upsell kind=dialogue_state
# edge: greet -> collect_dates [dates missing]
# edge: collect_dates -> confirm [dates ok]
# edge: confirm -> tools.py::search_flights [invoke search]
"""

PROMPTS = {
    "greet": "Hi! Where would you like to go?",
    "collect_dates": "Great. Which dates work for you?",
    "confirm": "Here is what I have so far. Shall I search?",
    # legacy_upsell was cut from the flow in v2 but never deleted
    "legacy_upsell": "Before you go, can I interest you in travel insurance?",
}


def next_state(state: str, slots: dict) -> str:
    if state == "greet":
        return "collect_dates" if "destination" in slots else "greet"
    if state == "collect_dates":
        return "confirm" if "dates" in slots else "collect_dates"
    if state == "confirm":
        return "search_flights"
    return "greet"


def prompt_for(state: str) -> str:
    return PROMPTS.get(state, PROMPTS["greet"])
