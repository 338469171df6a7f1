"""Single doorway to chat models for every reasoning step.

Six named roles cover the pipeline: planner_deep, persona_deep, judge_deep,
dialogue_light, analysis_light, report_light. Each role points at a
registered backend (mock script or HTTP chat-completions endpoint) and
carries its own sampling knobs. The judge must share the persona
generator's backend so it evaluates with the scenario designer's context;
configure_role enforces that pairing.

Structured output is the default calling style: pass a JSON schema and the
gateway extracts the first JSON value from the reply, validates it, and on
failure appends a repair instruction and retries within the role's budget.

Every physical call is reported through the on_call hook (role, usage,
latency, prompt hash). Prompt text and credentials never pass through the
hook, so event logs stay free of secrets.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import jsonschema

from .errors import (
    BackendUnreachableError,
    CallTimeoutError,
    ConfigError,
    DomainError,
    SchemaViolationExhaustedError,
)
from .mockllm import MockBackend

ROLE_NAMES = (
    "planner_deep",
    "persona_deep",
    "judge_deep",
    "dialogue_light",
    "analysis_light",
    "report_light",
)

# judge at temperature 0 for scoring stability; deep planning and dialogue
# keep some variety; summarization-ish light roles stay low.
DEFAULT_TEMPERATURES = {
    "planner_deep": 0.7,
    "persona_deep": 0.7,
    "judge_deep": 0.0,
    "dialogue_light": 0.7,
    "analysis_light": 0.3,
    "report_light": 0.3,
}


@dataclass(frozen=True)
class RoleConfig:
    name: str
    backend_ref: str
    temperature: float
    max_tokens: int = 2048
    timeout: float = 60.0
    retry_budget: int = 2
    max_concurrent: int = 8


@dataclass(frozen=True)
class ChatExchange:
    role: str
    messages: list[dict]
    content: str
    finish_reason: str
    usage: dict  # prompt_tokens, completion_tokens, calls
    latency: float
    parsed: Any = None


@dataclass
class _Backend:
    ref: str
    transport: str
    impl: Any
    model: str = ""
    sem_lock: threading.Lock = field(default_factory=threading.Lock)


def extract_json(text: str) -> Any:
    """First JSON object or array embedded in text, or None."""
    for start, ch in enumerate(text):
        if ch not in "{[":
            continue
        depth = 0
        in_str = False
        escape = False
        for end in range(start, len(text)):
            c = text[end]
            if in_str:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c in "{[":
                depth += 1
            elif c in "}]":
                depth -= 1
                if depth == 0:
                    try:
                        return json.loads(text[start : end + 1])
                    except json.JSONDecodeError:
                        break
        # unbalanced from this start; try the next opener
    return None


class HttpBackend:
    """Chat-completions wire format over HTTP."""

    def __init__(self, endpoint: str, model: str, api_key_env: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env

    def chat(self, role: RoleConfig, messages: list[dict]) -> tuple[str, str, dict]:
        import httpx

        headers = {}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": messages,
            "temperature": role.temperature,
            "max_tokens": role.max_tokens,
        }
        try:
            resp = httpx.post(
                f"{self.endpoint}/chat/completions",
                json=body,
                headers=headers,
                timeout=role.timeout,
            )
            resp.raise_for_status()
        except httpx.TimeoutException as e:
            raise CallTimeoutError(f"{role.name}: call exceeded {role.timeout}s") from e
        except httpx.HTTPError as e:
            raise BackendUnreachableError(f"{role.name}: {e}") from e
        data = resp.json()
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as e:
            raise BackendUnreachableError(f"{role.name}: malformed response") from e
        usage = data.get("usage", {})
        return (
            content,
            finish,
            {
                "prompt_tokens": usage.get("prompt_tokens", 0),
                "completion_tokens": usage.get("completion_tokens", 0),
            },
        )


REPAIR_INSTRUCTION = (
    "Your previous reply did not contain valid JSON matching the required "
    "schema. Respond again with ONLY a JSON value matching this schema:\n"
)


class Gateway:
    """Shared, thread-safe router from roles to backends."""

    def __init__(self, on_call: Callable[[dict], None] | None = None):
        self._backends: dict[str, _Backend] = {}
        self._roles: dict[str, RoleConfig] = {}
        self._sems: dict[str, threading.Semaphore] = {}
        self._lock = threading.Lock()
        self.on_call = on_call

    # -- configuration ----------------------------------------------------

    def register_backend(self, config: dict) -> str:
        transport = config.get("transport")
        ref = config.get("name") or f"backend{len(self._backends) + 1}"
        if transport == "mock":
            script = config.get("script")
            if isinstance(script, str):
                with open(script, encoding="utf-8") as f:
                    script = json.load(f)
            impl = MockBackend(script)
            model = "mock"
        elif transport == "http":
            endpoint = config.get("endpoint")
            model = config.get("model")
            if not endpoint or not model:
                raise ConfigError("http backend requires endpoint and model")
            impl = HttpBackend(endpoint, model, config.get("api_key_env"))
        else:
            raise ConfigError(f"unknown transport {transport!r}")
        with self._lock:
            self._backends[ref] = _Backend(ref=ref, transport=transport, impl=impl, model=model)
        return ref

    def configure_role(self, name: str, backend_ref: str, **overrides) -> RoleConfig:
        if name not in ROLE_NAMES:
            raise ConfigError(f"unknown role {name!r}")
        if backend_ref not in self._backends:
            raise ConfigError(f"unknown backend {backend_ref!r}")
        cfg = RoleConfig(
            name=name,
            backend_ref=backend_ref,
            temperature=DEFAULT_TEMPERATURES[name],
        )
        if overrides:
            cfg = replace(cfg, **overrides)
        # The judge scores scenarios with the generator's context, which
        # only holds if both roles resolve to the same backend.
        pair = {"judge_deep": "persona_deep", "persona_deep": "judge_deep"}.get(name)
        if pair and pair in self._roles and self._roles[pair].backend_ref != backend_ref:
            raise ConfigError(f"{name} and {pair} must share one backend")
        with self._lock:
            self._roles[name] = cfg
            self._sems[name] = threading.Semaphore(cfg.max_concurrent)
        return cfg

    def configure_all_roles(self, backend_ref: str, **overrides) -> None:
        for name in ROLE_NAMES:
            self.configure_role(name, backend_ref, **overrides)

    def role(self, name: str) -> RoleConfig:
        if name not in self._roles:
            raise ConfigError(f"role {name!r} not configured")
        return self._roles[name]

    # -- calling ----------------------------------------------------------

    def complete(
        self, role_name: str, messages: list[dict], schema: dict | None = None
    ) -> ChatExchange:
        role = self.role(role_name)
        if not messages:
            raise DomainError("messages must be nonempty")
        if messages[0].get("role") != "system":
            raise DomainError("first message must be the system message")
        backend = self._backends[role.backend_ref]
        sem = self._sems[role_name]
        msgs = list(messages)
        raw_replies: list[str] = []
        usage_total = {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0}
        latency_total = 0.0
        for attempt in range(role.retry_budget + 1):
            start = time.perf_counter()
            with sem:
                content, finish, usage = backend.impl.chat(role, msgs)
            latency = time.perf_counter() - start
            usage_total["prompt_tokens"] += usage.get("prompt_tokens", 0)
            usage_total["completion_tokens"] += usage.get("completion_tokens", 0)
            usage_total["calls"] += 1
            latency_total += latency
            parsed = extract_json(content) if schema is not None else None
            schema_ok = True
            if schema is not None:
                schema_ok = parsed is not None and _valid(parsed, schema)
            self._report_call(role, backend, msgs, content, usage, latency, attempt, schema_ok)
            if schema is None:
                return ChatExchange(
                    role_name, msgs, content, finish, usage_total, latency_total
                )
            if schema_ok:
                return ChatExchange(
                    role_name, msgs, content, finish, usage_total, latency_total, parsed
                )
            raw_replies.append(content)
            msgs = msgs + [
                {"role": "assistant", "content": content},
                {
                    "role": "user",
                    "content": REPAIR_INSTRUCTION + json.dumps(schema, sort_keys=True),
                },
            ]
        raise SchemaViolationExhaustedError(role_name, raw_replies)

    def _report_call(self, role, backend, msgs, content, usage, latency, attempt, ok):
        if self.on_call is None:
            return
        prompt_hash = hashlib.sha256(
            "\x1f".join(m.get("content", "") for m in msgs).encode("utf-8")
        ).hexdigest()[:12]
        self.on_call(
            {
                "role": role.name,
                "backend": backend.ref,
                "transport": backend.transport,
                "attempt": attempt,
                "prompt_hash": prompt_hash,
                "prompt_chars": sum(len(m.get("content", "")) for m in msgs),
                "reply_chars": len(content),
                "usage": dict(usage),
                "latency": latency,
                "schema_ok": ok,
            }
        )


def _valid(obj: Any, schema: dict) -> bool:
    try:
        jsonschema.validate(obj, schema)
        return True
    except jsonschema.ValidationError:
        return False
