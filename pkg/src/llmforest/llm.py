"""Completion backends and response parsing.

Two backends implement ``complete(bundle, tree_id=0) -> str``:

* :class:`MockBackend` answers offline and deterministically from the
  neighbour records carried by the prompt bundle.
* :class:`HttpBackend` talks to any OpenAI-compatible chat-completion
  endpoint, with timeouts, exponential backoff and a requests-per-minute
  limiter. Every live exchange is appended to a JSON-lines audit log.

:func:`parse_response` turns free-form model output into validated votes.
"""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .dataset import Cell, FeatureSpec, format_number, value_key
from .prompt import PromptBundle

logger = logging.getLogger(__name__)

# numeric answers may stray this far (relative to the observed span) outside the observed range
NUMERIC_SLACK = 0.25


class Confidence(str, Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"

    @classmethod
    def parse(cls, raw: Any) -> "Confidence":
        text = str(raw).strip().lower() if raw is not None else ""
        for level in cls:
            if text.startswith(level.value.lower()):
                return level
        return cls.MEDIUM


@dataclass(frozen=True)
class ImputationVote:
    feature: str
    value: Cell
    confidence: Confidence = Confidence.MEDIUM
    tree_id: int = 0

    def to_dict(self) -> dict:
        return {"tree": self.tree_id, "value": self.value, "confidence": self.confidence.value}


class BackendError(RuntimeError):
    pass


class AuthError(BackendError):
    pass


class RateLimitExhausted(BackendError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    rate_limit_per_minute: float | None = None
    temperature: float = 0.0
    backoff_base: float = 1.0
    audit_log: str | None = None
    mock_policy: str = "neighbor_mode"
    fixtures: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint and self.model):
            raise ValueError("an http backend needs an endpoint and a model")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.mock_policy not in ("neighbor_mode", "echo_fixture"):
            raise ValueError(f"unknown mock policy {self.mock_policy!r}")

    @classmethod
    def from_dict(cls, payload: Mapping) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown backend settings: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        return {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in self.__dict__.items()}


class MockBackend:
    """Stateless offline backend.

    ``neighbor_mode`` answers each missing feature with the most frequent
    neighbour value (ties to the smallest; numbers are averaged) and says
    High when at least three neighbours agree, Medium otherwise.
    ``echo_fixture`` returns canned text keyed by ``"target:tree"`` or
    ``"target"``.
    """

    def __init__(self, config: BackendConfig | None = None):
        self.config = config or BackendConfig()

    def complete(self, bundle: PromptBundle, tree_id: int = 0) -> str:
        if self.config.mock_policy == "echo_fixture":
            fixtures = self.config.fixtures
            return fixtures.get(f"{bundle.target}:{tree_id}", fixtures.get(str(bundle.target), "{}"))
        if not bundle.neighbor_rows:
            raise BackendError(f"mock backend got no neighbour records for target {bundle.target}")
        answer: dict[str, str] = {}
        for feature in bundle.missing_features:
            values = [row[feature] for row in bundle.neighbor_rows if row.get(feature) is not None]
            if not values:
                continue
            counts = Counter(values)
            top = max(counts.values())
            mode = min((v for v, c in counts.items() if c == top), key=value_key)
            if isinstance(mode, str):
                answer[feature] = mode
            else:
                answer[feature] = format_number(sum(values) / len(values))
            answer[f"{feature}_confidence"] = "High" if top >= 3 else "Medium"
        return json.dumps(answer)


class RateLimiter:
    """Spaces request starts at least ``60 / per_minute`` seconds apart."""

    def __init__(self, per_minute: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self.sleep(wait)


def prompt_hash(bundle: PromptBundle) -> str:
    return hashlib.sha256((bundle.system_text + "\x00" + bundle.user_text).encode("utf-8")).hexdigest()


class HttpBackend:
    """OpenAI-compatible chat-completion client."""

    RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        if config.kind != "http":
            raise ValueError("HttpBackend needs an http config")
        self.config = config
        self.sleep = sleep
        self.limiter = RateLimiter(config.rate_limit_per_minute, clock, sleep)
        self.client = httpx.Client(timeout=config.timeout, transport=transport)
        self._audit_lock = threading.Lock()

    def _token(self) -> str:
        token = os.environ.get(self.config.api_key_env)
        if not token:
            raise AuthError(f"environment variable {self.config.api_key_env} is not set")
        return token

    def _audit(self, bundle: PromptBundle, tree_id: int, raw: str) -> None:
        if not self.config.audit_log:
            return
        record = {
            "timestamp": time.time(),
            "tree_id": tree_id,
            "target": bundle.target,
            "prompt_hash": prompt_hash(bundle),
            "raw_response": raw,
        }
        with self._audit_lock:
            Path(self.config.audit_log).parent.mkdir(parents=True, exist_ok=True)
            with open(self.config.audit_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None and "retry-after" in response.headers:
            try:
                return float(response.headers["retry-after"])
            except ValueError:
                pass
        return self.config.backoff_base * 2 ** attempt

    def complete(self, bundle: PromptBundle, tree_id: int = 0) -> str:
        headers = {"Authorization": f"Bearer {self._token()}"}
        payload = {
            "model": self.config.model,
            "messages": bundle.messages(),
            "temperature": self.config.temperature,
        }
        last = None
        for attempt in range(self.config.max_retries + 1):
            self.limiter.acquire()
            response = None
            try:
                response = self.client.post(self.config.endpoint, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                logger.warning("request for target %s failed: %s", bundle.target, exc)
            else:
                if response.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({response.status_code})")
                if response.status_code == 200:
                    try:
                        text = response.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"malformed completion payload: {exc}") from exc
                    self._audit(bundle, tree_id, text)
                    return text
                if response.status_code not in self.RETRY_STATUS:
                    raise BackendError(f"endpoint returned {response.status_code}: {response.text[:200]}")
                last = response
                logger.warning("target %s: status %s, retrying", bundle.target, response.status_code)
            if attempt < self.config.max_retries:
                self.sleep(self._delay(attempt, response))
        if isinstance(last, httpx.Response) and last.status_code == 429:
            raise RateLimitExhausted(f"still rate limited after {self.config.max_retries} retries")
        raise BackendError(f"request failed after {self.config.max_retries} retries: {last}")


def make_backend(config: BackendConfig, **kwargs):
    return HttpBackend(config, **kwargs) if config.kind == "http" else MockBackend(config)


def complete(bundle: PromptBundle, config: BackendConfig) -> str:
    return make_backend(config).complete(bundle)


# ---------------------------------------------------------------- parsing


@dataclass(frozen=True)
class ParseResult:
    votes: tuple[ImputationVote, ...] = ()
    unimputed: tuple[str, ...] = ()
    invalid: tuple[str, ...] = ()
    parse_failed: bool = False


def _balanced_end(text: str, start: int) -> int | None:
    depth, quote, escape = 0, None, False
    for k in range(start, len(text)):
        ch = text[k]
        if quote:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return k + 1
    return None


def extract_json_object(text: str) -> dict | None:
    """First well-formed object in ``text``, tolerating prose and code fences.

    Python-literal dicts (single quotes) are accepted as a fallback.
    """
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except ValueError:
            obj = None
            end = _balanced_end(text, start)
            if end is not None:
                try:
                    obj = ast.literal_eval(text[start:end])
                except (ValueError, SyntaxError, MemoryError, RecursionError):
                    obj = None
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    return None


def _lookup(obj: Mapping, key: str):
    if key in obj:
        return obj[key], True
    folded = key.casefold()
    for k, v in obj.items():
        if isinstance(k, str) and k.strip().casefold() == folded:
            return v, True
    return None, False


def validate_value(raw: Any, spec: FeatureSpec) -> Cell:
    """Schema-checked value, or ``None`` when ``raw`` is not acceptable."""
    if isinstance(raw, bool) or isinstance(raw, (dict, list)):
        return None
    if spec.numeric:
        try:
            value = float(raw.strip()) if isinstance(raw, str) else float(raw)
        except (TypeError, ValueError):
            return None
        if not math.isfinite(value):
            return None
        if spec.lower is not None:
            slack = NUMERIC_SLACK * max(spec.upper - spec.lower, abs(spec.upper), abs(spec.lower), 1.0)
            if not spec.lower - slack <= value <= spec.upper + slack:
                return None
        return value
    text = format_number(raw) if isinstance(raw, (int, float)) else str(raw).strip()
    domain = spec.distinct_values
    if text in domain:
        return text
    folded = [v for v in domain if v.casefold() == text.casefold()]
    if len(folded) == 1:
        return folded[0]
    try:
        as_num = float(text)
    except ValueError:
        return None
    for v in domain:
        try:
            if float(v) == as_num:
                return v
        except ValueError:
            continue
    return None


def parse_response(text: str | None, target_missing: Sequence[str], schema: Sequence[FeatureSpec],
                   tree_id: int = 0) -> ParseResult:
    """Votes for the requested features found in a model reply.

    Absent or empty answers count as unimputed, answers that fail schema
    validation as invalid; votes, unimputed and invalid always add up to
    ``len(target_missing)``.
    """
    obj = extract_json_object(text or "")
    if obj is None:
        return ParseResult((), tuple(target_missing), (), True)
    specs = {s.name: s for s in schema}
    votes, unimputed, invalid = [], [], []
    fallback_conf, _ = _lookup(obj, "confidence")
    for feature in target_missing:
        raw, found = _lookup(obj, feature)
        conf, _ = _lookup(obj, f"{feature}_confidence")
        if isinstance(raw, dict):
            conf = raw.get("confidence", conf)
            raw, found = _lookup(raw, "value")
        if not found or raw is None or (isinstance(raw, str) and not raw.strip()):
            unimputed.append(feature)
            continue
        value = validate_value(raw, specs[feature])
        if value is None:
            invalid.append(feature)
            continue
        if conf is None and not isinstance(fallback_conf, dict):
            conf = fallback_conf
        votes.append(ImputationVote(feature, value, Confidence.parse(conf), tree_id))
    return ParseResult(tuple(votes), tuple(unimputed), tuple(invalid), False)
