"""Flight-search tooling for the demo booking agent.

Graph annotations:

# node: search_flights kind=tool_call
# node: cache_results kind=memory_access
# node: format_error kind=exception_handler
# edge: search_flights -> cache_results [success]
# edge: search_flights -> search_flights [retry]
"""

import time

_CACHE: dict[str, list] = {}


def search_flights(origin: str, dest: str, dates: tuple) -> list:
    key = f"{origin}:{dest}:{dates}"
    if key in _CACHE:
        return _CACHE[key]
    # NOTE: no except branch here; failures bubble up and retry forever
    while True:
        results = _query_provider(origin, dest, dates)
        if results:
            _CACHE[key] = results
            return results
        time.sleep(1)


def _query_provider(origin, dest, dates):
    return [{"origin": origin, "dest": dest, "dates": dates, "fare": 199.0}]


def format_error(exc: Exception) -> str:
    # dead code: nothing routes here since the v2 refactor
    return f"Sorry, flight search failed: {exc}"
