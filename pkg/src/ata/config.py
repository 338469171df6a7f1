"""Run configuration plus the wiring helpers that turn it into live objects.

`RunConfig` carries two kinds of fields and keeps them apart on purpose:
semantic knobs (difficulty step size, convergence threshold, round caps,
seed) that belong in the persisted run state, and host concerns (fixture
paths, backend files, where runs land on disk) that must never leak into
state.json or the artifacts stop being portable between machines.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, fields

from .aut import AutRegistry
from .difficulty import DEFAULT_EPSILON, DifficultyParams
from .errors import ConfigError
from .gateway import ROLE_NAMES, Gateway


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def derived_run_id(aut_id: str, seed: int) -> str:
    """Deterministic default id: rerunning one config in a fresh root must
    produce byte-identical artifacts, and the id is part of them."""
    slug = re.sub(r"[^A-Za-z0-9_-]+", "-", aut_id).strip("-") or "run"
    return f"{slug}-s{seed}"


@dataclass
class RunConfig:
    aut_id: str
    testing_focus: str = ""
    rubric: str = "auto"  # "auto" or a path to a rubric JSON file
    max_weaknesses: int = 5
    k_max: int = 3
    epsilon: float = DEFAULT_EPSILON
    eta: float = 3.0
    ablate_evidence: bool = False
    seed: int = 0
    root: str = "."  # runs land under <root>/runs/<run_id>
    mock_llm: str | None = None  # offline fixture: script file or bundle dir
    backends: str | None = None  # backends JSON for live model endpoints
    auts_file: str | None = None
    interview_cap: int = 8

    def __post_init__(self):
        if not self.aut_id:
            raise ConfigError("aut_id is required")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be at least 1, got {self.k_max}")
        if self.max_weaknesses < 1:
            raise ConfigError(
                f"max_weaknesses must be at least 1, got {self.max_weaknesses}"
            )
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.eta <= 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.interview_cap < 0:
            raise ConfigError("interview_cap must be non-negative")
        if self.mock_llm and self.backends:
            raise ConfigError("mock_llm and backends are mutually exclusive")

    def difficulty_params(self) -> DifficultyParams:
        return DifficultyParams(eta=self.eta)

    def state_config(self) -> dict:
        """The slice of the config that belongs in the run state.

        Host paths are reduced to basenames: two runs of the same fixtures
        from different directories must still produce identical state files.
        """
        return {
            "ablate_evidence": self.ablate_evidence,
            "epsilon": self.epsilon,
            "eta": self.eta,
            "interview_cap": self.interview_cap,
            "k_max": self.k_max,
            "max_weaknesses": self.max_weaknesses,
            "rubric": self.rubric if self.rubric == "auto" else os.path.basename(self.rubric),
            "seed": self.seed,
        }

    @classmethod
    def from_request(cls, doc: dict) -> "RunConfig":
        """Build from an untrusted request body, rejecting unknown keys."""
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_mock_fixture(path: str) -> tuple[dict, list | None]:
    """Load an offline fixture: a script file, or a bundle directory holding
    mockllm.json plus optional canned interview answers in answers.json."""
    if os.path.isdir(path):
        script_path = os.path.join(path, "mockllm.json")
        if not os.path.isfile(script_path):
            raise ConfigError(f"fixture dir {path!r} has no mockllm.json")
        script = _read_json(script_path)
        answers = None
        answers_path = os.path.join(path, "answers.json")
        if os.path.isfile(answers_path):
            answers = _read_json(answers_path)
            if not isinstance(answers, list) or not all(
                isinstance(a, str) for a in answers
            ):
                raise ConfigError(f"{answers_path}: must be a JSON array of strings")
        return script, answers
    if os.path.isfile(path):
        return _read_json(path), None
    raise ConfigError(f"mock fixture {path!r} not found")


def _wire_from_file(gateway: Gateway, path: str) -> None:
    doc = _read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("backends"), dict):
        raise ConfigError(f"{path}: expected an object with a 'backends' map")
    base = os.path.dirname(os.path.abspath(path))
    refs = {}
    for name, spec in sorted(doc["backends"].items()):
        if not isinstance(spec, dict):
            raise ConfigError(f"{path}: backend {name!r} must be an object")
        spec = dict(spec, name=name)
        script = spec.get("script")
        # script paths are relative to the backends file, not the cwd
        if isinstance(script, str) and not os.path.isabs(script):
            spec["script"] = os.path.join(base, script)
        refs[name] = gateway.register_backend(spec)

    roles = doc.get("roles", {})
    if not isinstance(roles, dict):
        raise ConfigError(f"{path}: 'roles' must be an object")
    fallback = roles.get("default")
    if fallback is None and len(refs) == 1:
        fallback = next(iter(refs))
    overrides = doc.get("role_overrides", {})
    for role in ROLE_NAMES:
        ref_name = roles.get(role, fallback)
        if ref_name is None:
            raise ConfigError(f"{path}: no backend mapped for role {role!r}")
        if ref_name not in refs:
            raise ConfigError(f"{path}: role {role!r} points at unknown backend {ref_name!r}")
        gateway.configure_role(role, refs[ref_name], **overrides.get(role, {}))


def build_gateway(config: RunConfig, on_call=None) -> Gateway:
    """A gateway wired per config; with no backends file, fully offline."""
    gateway = Gateway(on_call=on_call)
    if config.backends:
        _wire_from_file(gateway, config.backends)
        return gateway
    script = {"default": "standard"}
    if config.mock_llm:
        script, _ = load_mock_fixture(config.mock_llm)
    ref = gateway.register_backend(
        {"name": "offline", "transport": "mock", "script": script}
    )
    gateway.configure_all_roles(ref)
    return gateway


def fixture_answers(config: RunConfig) -> list | None:
    """Canned interview answers riding along with a fixture bundle, if any."""
    if config.mock_llm and os.path.isdir(config.mock_llm):
        _, answers = load_mock_fixture(config.mock_llm)
        return answers
    return None


def build_registry(config: RunConfig) -> AutRegistry:
    registry = AutRegistry(seed=config.seed)
    if config.auts_file:
        registry.load_file(config.auts_file)
    registry.get(config.aut_id)  # fail fast on a bad id
    return registry
