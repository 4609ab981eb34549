"""Chat-completion adapter for hosted actor and reward models."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import httpx

from ..core import ActionKind, Problem, ReasoningStep, StepCritique, StepLabel, Trajectory
from ..errors import ProtocolError, RemoteUnavailable
from .prompts import build_prompt

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    max_in_flight: int = 4
    use_logprobs: bool = False
    max_tokens: Optional[int] = None
    headers: dict[str, str] = field(default_factory=dict)

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) if self.api_key_env else None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EndpointConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class ChatClient:
    """Thread-safe chat-completion client with bounded retries and in-flight cap."""

    def __init__(self, config: EndpointConfig, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))
        headers = {"Content-Type": "application/json", **config.headers}
        key = config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    def close(self):
        self._http.close()

    def request(self, messages: list[dict], temperature: float, **extra) -> dict:
        """POST one chat request and return the decoded JSON body."""
        body = {"model": self.config.model, "messages": messages, "temperature": temperature}
        if self.config.max_tokens is not None:
            body["max_tokens"] = self.config.max_tokens
        body.update(extra)
        cid = uuid.uuid4().hex
        delay = self.config.backoff_base
        attempts = self.config.max_retries + 1
        last_error = None
        for attempt in range(1, attempts + 1):
            logger.debug("chat request cid=%s attempt=%d model=%s", cid, attempt, self.config.model)
            try:
                with self._slots:
                    resp = self._http.post(self.config.url, json=body, headers={"X-Request-ID": cid})
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
            else:
                if resp.status_code < 300:
                    try:
                        data = resp.json()
                    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                        raise ProtocolError(f"cid={cid}: response body is not JSON") from exc
                    logger.debug("chat response cid=%s status=%d", cid, resp.status_code)
                    return data
                if resp.status_code not in RETRYABLE_STATUS:
                    raise ProtocolError(f"cid={cid}: HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            if attempt < attempts:
                logger.warning("chat request cid=%s failed (%s); retrying in %.2fs", cid, last_error, delay)
                self._sleep(delay)
                delay *= self.config.backoff_factor
        raise RemoteUnavailable(f"cid={cid}: gave up after {attempts} attempts ({last_error})")

    def complete(self, prompt: str, temperature: float, **extra) -> tuple[str, dict]:
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        data = self.request([{"role": "user", "content": prompt}], temperature, **extra)
        return first_message_text(data), data


def first_message_text(data: Any) -> str:
    try:
        text = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError("response has no choices[0].message.content") from exc
    if not isinstance(text, str):
        raise ProtocolError("message content is not text")
    return text


def affirmative_probability(data: Any, token: str = "yes") -> Optional[float]:
    """Probability mass on the affirmative first token, or None without logprobs."""
    try:
        first = data["choices"][0]["logprobs"]["content"][0]
    except (KeyError, IndexError, TypeError):
        return None
    candidates = first.get("top_logprobs") or [first]
    mass = 0.0
    for entry in candidates:
        if str(entry.get("token", "")).strip().lower() == token:
            mass += math.exp(float(entry["logprob"]))
    return mass


def remote_generate(config: EndpointConfig, prompt: str, temperature: float,
                    client: Optional[ChatClient] = None) -> str:
    own = client is None
    client = client or ChatClient(config)
    try:
        return client.complete(prompt, temperature)[0]
    finally:
        if own:
            client.close()


_JSON_SPAN = re.compile(r"(\{.*\}|\[.*\])", re.S)


def _extract_json(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    m = _JSON_SPAN.search(text)
    if not m:
        raise ProtocolError("no JSON found in critique")
    try:
        return json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        raise ProtocolError("malformed JSON in critique") from exc


def parse_label(raw: Any) -> StepLabel:
    key = re.sub(r"[^a-z]+", "_", str(raw).strip().lower()).strip("_")
    key = {"correct": "correct_step", "off_topic": "off_topic_or_incongruent"}.get(key, key)
    try:
        return StepLabel(key)
    except ValueError:
        raise ProtocolError(f"unknown step label {raw!r}") from None


def parse_critique(obj: Any, content: str, score_override: Optional[float] = None) -> StepCritique:
    if not isinstance(obj, dict):
        raise ProtocolError("critique is not a JSON object")
    score = obj.get("score") if score_override is None else score_override
    try:
        score = float(score)
    except (TypeError, ValueError):
        raise ProtocolError(f"critique score {score!r} is not numeric") from None
    if not 0.0 <= score <= 1.0:
        raise ProtocolError(f"critique score {score} outside [0, 1]")
    return StepCritique(content, parse_label(obj.get("label")), str(obj.get("explanation", "")), score)


class RemoteActor:
    def __init__(self, id: str, client: ChatClient):
        self.id = id
        self.client = client

    def generate(self, problem: Problem, prefix: Sequence[ReasoningStep], action: ActionKind,
                 temperature: float) -> ReasoningStep:
        text, _ = self.client.complete(build_prompt(action.value, problem, prefix), temperature)
        text = text.strip()
        if not text:
            raise ProtocolError(f"actor {self.id} returned an empty step")
        return ReasoningStep(action, text, self.id)

    def complete(self, prompt: str, temperature: float, payload: Optional[Mapping[str, Any]] = None) -> str:
        return self.client.complete(prompt, temperature)[0]


class RemoteRewardModel:
    """Generative critic behind a chat endpoint.

    With ``use_logprobs`` the score is the probability of a "Yes" verdict
    token from a separate one-token request; otherwise the score field of
    the structured critique is used.

    ``critique_full`` asks for all steps in one call. A malformed list falls
    back to one call per step unless ``strict`` is set.
    """

    def __init__(self, id: str, client: ChatClient, temperature: float = 0.01, strict: bool = False):
        self.id = id
        self.client = client
        self.temperature = temperature
        self.strict = strict

    def _yes_probability(self, problem, prefix, step) -> Optional[float]:
        prompt = build_prompt("critique_verdict", problem, prefix, {"step": step})
        _, data = self.client.complete(prompt, self.temperature, logprobs=True, top_logprobs=5, max_tokens=1)
        return affirmative_probability(data)

    def critique(self, problem: Problem, prefix: Sequence[ReasoningStep], step: ReasoningStep) -> StepCritique:
        text, _ = self.client.complete(build_prompt("critique_step", problem, prefix, {"step": step}),
                                       self.temperature)
        override = self._yes_probability(problem, prefix, step) if self.client.config.use_logprobs else None
        return parse_critique(_extract_json(text), step.content, override)

    def _per_step(self, problem, trajectory):
        steps = trajectory.steps
        return [self.critique(problem, steps[:i], s) for i, s in enumerate(steps)]

    def critique_full(self, problem: Problem, trajectory: Trajectory) -> list[StepCritique]:
        if self.client.config.use_logprobs:
            return self._per_step(problem, trajectory)
        text, _ = self.client.complete(build_prompt("critique", problem, trajectory.steps), self.temperature)
        try:
            items = _extract_json(text)
            if isinstance(items, dict):
                items = items.get("steps", items.get("critiques"))
            if not isinstance(items, list) or len(items) != len(trajectory.steps):
                raise ProtocolError(f"expected {len(trajectory.steps)} step critiques")
            return [parse_critique(obj, s.content) for obj, s in zip(items, trajectory.steps)]
        except ProtocolError as exc:
            if self.strict:
                raise
            logger.warning("critic %s: %s; scoring step by step", self.id, exc)
            return self._per_step(problem, trajectory)
