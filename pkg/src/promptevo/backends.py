"""Pluggable clients for the three external dependencies: the chat-completion
operator, the video/image generation service, and the reward scorers.

Every client shares the same machinery: canonical request hashing, a
content-addressed file cache, bounded retries with exponential backoff, and a
per-backend concurrency limit. Deterministic mock implementations allow full
offline runs; their outputs are pure functions of (seed, request).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import requests

from .scores import MetricScale, ordered_metrics
from .templates import parse_sft_user_content
from .util import atomic_write_text, stable_digest

log = logging.getLogger(__name__)

CHAT_API_KEY_ENV = "PAV_CHAT_API_KEY"
GEN_API_KEY_ENV = "PAV_GEN_API_KEY"
SCORER_API_KEY_ENV = "PAV_SCORER_API_KEY"


class BackendError(Exception):
    retryable = False


class InvalidRequest(BackendError):
    pass


class MalformedScore(BackendError):
    pass


class TransportError(BackendError):
    retryable = True


class NonRetryableStatus(BackendError):
    pass


class RetriesExhausted(BackendError):
    pass


# ---------------------------------------------------------------------------
# Request / response types
# ---------------------------------------------------------------------------

_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown chat role: {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 1.0
    max_tokens: int = 1024
    # Distinguishes repeated samples of one prompt; part of the cache key but
    # never sent on the wire (real backends vary by temperature).
    sample_tag: Optional[str] = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("message list must be nonempty")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    usage: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    negative_prompt: Optional[str] = None
    profile: str = "default"


@dataclass(frozen=True)
class GenerationResult:
    artifact_ref: str
    latency: float = 0.0
    status: str = "ok"


@dataclass(frozen=True)
class ScorerDescriptor:
    """One scorer service: the metrics it produces and their raw scales."""

    name: str
    metrics: tuple[str, ...]
    scales: Mapping[str, MetricScale]
    endpoint: Optional[str] = None

    def __post_init__(self):
        missing = [m for m in self.metrics if m not in self.scales]
        if missing:
            raise ValueError(f"scorer {self.name}: no scale for metrics {missing}")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    initial_delay: float = 0.5
    multiplier: float = 2.0
    max_delay: float = 8.0
    retryable_statuses: tuple[int, ...] = (429, 500, 502, 503, 504)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.initial_delay <= 0 or self.max_delay <= 0:
            raise ValueError("retry delays must be positive")


# ---------------------------------------------------------------------------
# Content-addressed cache
# ---------------------------------------------------------------------------


class FileCache:
    """File cache under root/<first-2-hex>/<hash>.json.

    Safe for concurrent readers and writers; identical keys may race benignly
    (last write wins with identical content for deterministic backends).
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        try:
            text = self._path(key).read_text(encoding="utf-8")
            payload = json.loads(text)
        except (FileNotFoundError, json.JSONDecodeError):
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return payload

    def put(self, key: str, payload) -> None:
        atomic_write_text(self._path(key), json.dumps(payload, ensure_ascii=False))


# ---------------------------------------------------------------------------
# Shared client machinery
# ---------------------------------------------------------------------------


class _ClientBase:
    """Hashing, caching, retries, and counters common to all client kinds.

    Subclasses implement _fingerprint() (cache-key identity of the backend)
    and _invoke(payload) -> JSON-serializable response dict.
    """

    kind = "abstract"

    def __init__(self, *, cache: Optional[FileCache] = None, retry: Optional[RetryPolicy] = None,
                 max_concurrency: int = 8, sleep=time.sleep):
        self._cache = cache
        self._retry = retry or RetryPolicy()
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._sleep = sleep
        self._count_lock = threading.Lock()
        self.calls = 0      # backend invocations (cache hits excluded)
        self.attempts = 0   # individual attempts, retries included

    def _fingerprint(self) -> dict:
        raise NotImplementedError

    def _invoke(self, payload: dict) -> dict:
        raise NotImplementedError

    def _call(self, payload: dict) -> dict:
        envelope = {"kind": self.kind, "fingerprint": self._fingerprint(), "request": payload}
        key = stable_digest(envelope)
        if self._cache is not None:
            cached = self._cache.get(key)
            if cached is not None:
                return cached
        result = self._execute(payload)
        if self._cache is not None:
            self._cache.put(key, result)
        return result

    def _execute(self, payload: dict) -> dict:
        policy = self._retry
        with self._count_lock:
            self.calls += 1
        delay = policy.initial_delay
        for attempt in range(1, policy.max_attempts + 1):
            with self._count_lock:
                self.attempts += 1
            try:
                with self._sem:
                    return self._invoke(payload)
            except BackendError as exc:
                if not exc.retryable:
                    raise
                if attempt == policy.max_attempts:
                    raise RetriesExhausted(
                        f"{self.kind} backend failed after {policy.max_attempts} attempts: {exc}"
                    ) from exc
                log.warning("%s backend attempt %d failed (%s); retrying in %.2fs",
                            self.kind, attempt, exc, delay)
                self._sleep(delay)
                delay = min(delay * policy.multiplier, policy.max_delay)
        raise AssertionError("unreachable")


def _bearer_headers(env_name: str) -> dict:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(env_name)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _post_json(endpoint: str, payload: dict, headers: dict, timeout: float,
               policy: RetryPolicy) -> dict:
    try:
        resp = requests.post(endpoint, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if resp.status_code in policy.retryable_statuses:
        raise TransportError(f"status {resp.status_code}")
    if resp.status_code >= 400:
        raise NonRetryableStatus(f"status {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as exc:
        raise NonRetryableStatus(f"response is not JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Chat clients
# ---------------------------------------------------------------------------


class ChatClientBase(_ClientBase):
    kind = "chat"

    def __init__(self, model: str, *, temperature: float = 1.0, max_tokens: int = 1024, **kw):
        super().__init__(**kw)
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens

    def request(self, content: str, *, system: Optional[str] = None,
                sample_tag: Optional[str] = None) -> ChatRequest:
        """Build a request with this client's defaults and a single user turn."""
        messages = []
        if system is not None:
            messages.append(ChatMessage("system", system))
        messages.append(ChatMessage("user", content))
        return ChatRequest(model=self.model, messages=tuple(messages),
                           temperature=self.temperature, max_tokens=self.max_tokens,
                           sample_tag=sample_tag)

    def chat(self, req: ChatRequest) -> ChatResponse:
        payload = {
            "model": req.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "sample_tag": req.sample_tag,
        }
        result = self._call(payload)
        return ChatResponse(content=result["content"],
                            finish_reason=result.get("finish_reason", "stop"),
                            usage=result.get("usage", {}))


class HttpChatClient(ChatClientBase):
    """Chat-completions client: POST {model, messages, temperature, max_tokens}."""

    def __init__(self, endpoint: str, model: str, *, api_key_env: str = CHAT_API_KEY_ENV,
                 timeout: float = 120.0, **kw):
        super().__init__(model, **kw)
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _fingerprint(self) -> dict:
        return {"endpoint": self.endpoint, "model": self.model, "temperature": self.temperature}

    def _invoke(self, payload: dict) -> dict:
        wire = {
            "model": payload["model"],
            "messages": payload["messages"],
            "temperature": payload["temperature"],
            "max_tokens": payload["max_tokens"],
        }
        data = _post_json(self.endpoint, wire, _bearer_headers(self.api_key_env),
                          self.timeout, self._retry)
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise NonRetryableStatus(f"malformed chat response: {exc}") from exc
        return {"content": content,
                "finish_reason": choice.get("finish_reason", "stop"),
                "usage": data.get("usage", {})}


# Word pool backing the deterministic mocks: the synthetic scorer prefers a
# seeded subset, and the mock operator/refiner enrich prompts from it.
WORD_POOL: tuple[str, ...] = (
    "serene", "tranquil", "luminous", "cinematic", "detailed", "vibrant", "soft",
    "lighting", "ambient", "golden", "crisp", "smooth", "gentle", "atmospheric",
    "panoramic", "shallow", "focus", "composition", "graceful", "vivid", "textured",
    "balanced", "immersive", "dynamic", "elegant", "radiant", "warm", "natural",
    "depth", "clarity", "pristine", "subtle", "glow", "contrast", "harmonious",
    "fluid", "steady", "sunlit", "misty", "dusk", "dawn", "reflections", "shadows",
    "silhouette", "palette", "tones", "framing", "perspective", "motion",
    "stillness", "calm", "peaceful", "airy", "lush", "delicate", "polished",
    "coherent", "consistent", "realistic", "expressive", "intimate", "majestic",
)


def preferred_vocabulary(seed, size: int = 24) -> tuple[str, ...]:
    """Seeded subset of the word pool; shared by mocks so evolution can 'learn' it."""
    rng = random.Random(str(seed))
    return tuple(rng.sample(WORD_POOL, size))


def _word_tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


_CANDIDATE_LINE = re.compile(r"^(\d+)\.\s(.*)\s\(([^()]*)\)$")


def _parse_candidate_lines(text: str) -> list[tuple[int, str]]:
    out = []
    for line in text.splitlines():
        m = _CANDIDATE_LINE.match(line.strip())
        if m:
            out.append((int(m.group(1)), m.group(2)))
    return out


class MockEvolutionOperator(ChatClientBase):
    """Offline stand-in for the evolutionary operator.

    Reads the indexed candidate list from the rendered instruction, builds on
    the candidate with the most vocabulary hits, and returns the requested
    number of <PROMPT>-wrapped variants. Output depends only on (seed, request).
    """

    def __init__(self, *, seed, vocabulary: Sequence[str], model: str = "mock-operator", **kw):
        super().__init__(model, **kw)
        self.seed = str(seed)
        self.vocabulary = tuple(vocabulary)

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "model": self.model, "temperature": self.temperature,
                "seed": self.seed}

    def _invoke(self, payload: dict) -> dict:
        text = payload["messages"][-1]["content"]
        count_match = re.search(r"Generate (\d+) paraphrases", text)
        want = int(count_match.group(1)) if count_match else 3
        candidates = _parse_candidate_lines(text)
        vocab = set(self.vocabulary)
        if candidates:
            base = max(candidates, key=lambda c: (len(set(_word_tokens(c[1])) & vocab), c[0]))[1]
        else:
            lines = [ln for ln in text.strip().splitlines() if ln.strip()]
            base = lines[-1] if lines else "a simple scene"
        base_words = set(_word_tokens(base))
        fresh = [w for w in self.vocabulary if w not in base_words]
        if len(fresh) < 2 * want:
            fresh = list(self.vocabulary)
        rng = random.Random(stable_digest([self.seed, payload]))
        picks = rng.sample(fresh, min(2 * want, len(fresh)))
        refined = []
        for i in range(want):
            pair = picks[2 * i:2 * i + 2] or [f"variant {i}"]
            refined.append(f"{base}, {' '.join(pair)}")
        body = "\n".join(f"<PROMPT>{t}</PROMPT>" for t in refined)
        return {"content": f"Here are the refined prompts:\n{body}",
                "finish_reason": "stop", "usage": {}}


class MockRefinerModel(ChatClientBase):
    """Offline stand-in for the fine-tuned refiner sampled during triplet building."""

    def __init__(self, *, seed, vocabulary: Sequence[str], model: str = "mock-refiner", **kw):
        super().__init__(model, **kw)
        self.seed = str(seed)
        self.vocabulary = tuple(vocabulary)

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "model": self.model, "temperature": self.temperature,
                "seed": self.seed}

    def _invoke(self, payload: dict) -> dict:
        content = payload["messages"][-1]["content"]
        try:
            source = parse_sft_user_content(content)
        except ValueError:
            source = content.strip()
        rng = random.Random(stable_digest([self.seed, payload]))
        count = rng.randint(1, min(4, len(self.vocabulary)))
        words = rng.sample(self.vocabulary, count)
        return {"content": f"{source}, {' '.join(words)}", "finish_reason": "stop", "usage": {}}


_NEGATIVE_DESCRIPTOR_POOL: tuple[str, ...] = (
    "low resolution", "blurry frames", "deformed hands", "flickering",
    "washed-out colors", "overexposed highlights", "jittery camera",
    "distorted faces", "compression artifacts", "watermark", "text overlays",
    "unnatural motion", "oversaturated", "color banding", "ghosting",
    "stretched proportions", "dropped frames", "muddy shadows",
)


class MockNegativeModel(ChatClientBase):
    """Offline negative-prompt generator: a seeded comma-separated descriptor list."""

    def __init__(self, *, seed, model: str = "mock-negatives", **kw):
        super().__init__(model, **kw)
        self.seed = str(seed)

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "model": self.model, "temperature": self.temperature,
                "seed": self.seed}

    def _invoke(self, payload: dict) -> dict:
        rng = random.Random(stable_digest([self.seed, payload]))
        picks = rng.sample(_NEGATIVE_DESCRIPTOR_POOL, 8)
        return {"content": ", ".join(picks) + ".", "finish_reason": "stop", "usage": {}}


class StaticChatClient(ChatClientBase):
    """Always answers with one canned string (test double)."""

    def __init__(self, content: str, model: str = "static", **kw):
        super().__init__(model, **kw)
        self.content = content

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "model": self.model, "temperature": self.temperature,
                "static": stable_digest(self.content)}

    def _invoke(self, payload: dict) -> dict:
        return {"content": self.content, "finish_reason": "stop", "usage": {}}


# ---------------------------------------------------------------------------
# Generation clients
# ---------------------------------------------------------------------------


class GenerationClientBase(_ClientBase):
    kind = "generate"

    def generate(self, req: GenerationRequest) -> GenerationResult:
        if not req.prompt or not req.prompt.strip():
            raise InvalidRequest("generation prompt is empty")
        payload = {"prompt": req.prompt, "negative_prompt": req.negative_prompt,
                   "profile": req.profile}
        result = self._call(payload)
        ref = result.get("artifact_ref")
        if not ref:
            raise BackendError("generation response lacks artifact_ref")
        return GenerationResult(artifact_ref=ref, latency=result.get("latency", 0.0),
                                status=result.get("status", "ok"))


class HttpGenerationClient(GenerationClientBase):
    """POST {prompt, negative_prompt, profile} -> {artifact_ref, ...}."""

    def __init__(self, endpoint: str, *, profile: str = "default",
                 api_key_env: str = GEN_API_KEY_ENV, timeout: float = 600.0, **kw):
        super().__init__(**kw)
        self.endpoint = endpoint
        self.profile = profile
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _fingerprint(self) -> dict:
        return {"endpoint": self.endpoint, "profile": self.profile}

    def _invoke(self, payload: dict) -> dict:
        started = time.monotonic()
        data = _post_json(self.endpoint, payload, _bearer_headers(self.api_key_env),
                          self.timeout, self._retry)
        ref = data.get("artifact_ref")
        if not ref:
            raise NonRetryableStatus("generation response lacks artifact_ref")
        return {"artifact_ref": ref, "latency": time.monotonic() - started, "status": "ok"}


class MockGenerationClient(GenerationClientBase):
    """Returns artifact_ref = "mock://" + sha256 digest (first 32 hex chars) of
    the canonical JSON of [seed, prompt, negative_prompt, profile]."""

    def __init__(self, *, seed, profile: str = "default", **kw):
        super().__init__(**kw)
        self.seed = str(seed)
        self.profile = profile

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "profile": self.profile, "seed": self.seed}

    def _invoke(self, payload: dict) -> dict:
        digest = stable_digest([self.seed, payload["prompt"], payload["negative_prompt"],
                                payload["profile"]])
        return {"artifact_ref": f"mock://{digest[:32]}", "latency": 0.0, "status": "ok"}


# ---------------------------------------------------------------------------
# Scorer clients
# ---------------------------------------------------------------------------


class ScorerClientBase(_ClientBase):
    kind = "score"

    def __init__(self, descriptor: ScorerDescriptor, **kw):
        super().__init__(**kw)
        self.descriptor = descriptor

    def score(self, artifact_ref: str, prompt: str) -> dict[str, float]:
        """Raw values for exactly this scorer's declared metrics."""
        payload = {"artifact_ref": artifact_ref, "prompt": prompt}
        result = self._call(payload)
        scores = result.get("scores") or {}
        missing = [m for m in self.descriptor.metrics if m not in scores]
        if missing:
            raise MalformedScore(f"scorer {self.descriptor.name} missing metrics {missing}")
        return {m: float(scores[m]) for m in self.descriptor.metrics}


class HttpScorerClient(ScorerClientBase):
    """POST {artifact_ref, prompt} -> {scores: {metric: value, ...}}."""

    def __init__(self, descriptor: ScorerDescriptor, *, api_key_env: str = SCORER_API_KEY_ENV,
                 timeout: float = 300.0, **kw):
        super().__init__(descriptor, **kw)
        if not descriptor.endpoint:
            raise ValueError(f"scorer {descriptor.name} has no endpoint")
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _fingerprint(self) -> dict:
        return {"endpoint": self.descriptor.endpoint, "scorer": self.descriptor.name,
                "metrics": list(self.descriptor.metrics)}

    def _invoke(self, payload: dict) -> dict:
        data = _post_json(self.descriptor.endpoint, payload,
                          _bearer_headers(self.api_key_env), self.timeout, self._retry)
        return {"scores": data.get("scores", {})}


def _unit_hash(obj) -> float:
    """Deterministic value in [0, 1) from the canonical hash of obj."""
    digest = hashlib.sha256(stable_digest(obj).encode("ascii")).hexdigest()
    return int(digest[:13], 16) / 16 ** 13


class SyntheticScorer(ScorerClientBase):
    """Deterministic scorer for offline runs.

    Per metric, a base value is hashed from the prompt's non-preferred words
    (raw_min + 25-50% of the raw span); each distinct preferred-vocabulary word
    present then adds a non-negative hash-derived bonus (word_bonus * span on
    average, uniform in [0, 2x]), clamped to raw_max. Adding a preferred word
    therefore never decreases any metric until the clamp. An optional fixture
    table (exact prompt text -> {metric: raw}) overrides the formula.
    """

    def __init__(self, descriptor: ScorerDescriptor, *, seed,
                 vocabulary: Sequence[str] = (), fixture: Optional[Mapping[str, Mapping[str, float]]] = None,
                 word_bonus: float = 0.08, **kw):
        super().__init__(descriptor, **kw)
        self.seed = str(seed)
        self.vocabulary = tuple(vocabulary)
        self.fixture = dict(fixture) if fixture else None
        self.word_bonus = word_bonus

    def _fingerprint(self) -> dict:
        return {"endpoint": None, "scorer": self.descriptor.name,
                "metrics": list(self.descriptor.metrics), "seed": self.seed,
                "fixture": stable_digest(self.fixture) if self.fixture else None}

    def _invoke(self, payload: dict) -> dict:
        prompt = payload["prompt"]
        if self.fixture is not None and prompt in self.fixture:
            row = self.fixture[prompt]
            return {"scores": {m: float(row[m]) for m in self.descriptor.metrics}}
        tokens = _word_tokens(prompt)
        preferred = set(self.vocabulary)
        base_tokens = [t for t in tokens if t not in preferred]
        hits = sorted(set(tokens) & preferred)
        scores = {}
        for metric in self.descriptor.metrics:
            scale = self.descriptor.scales[metric]
            span = scale.raw_max - scale.raw_min
            u = _unit_hash([self.seed, metric, base_tokens])
            base = scale.raw_min + span * (0.25 + 0.25 * u)
            bonus = sum(2 * self.word_bonus * span * _unit_hash([self.seed, metric, "word", w])
                        for w in hits)
            scores[metric] = min(scale.raw_max, base + bonus)
        return {"scores": scores}


# ---------------------------------------------------------------------------
# Suite assembly
# ---------------------------------------------------------------------------


def validate_scorer_coverage(scorers: Sequence[ScorerClientBase], metric_set: Sequence[str]) -> None:
    """Configured scorers must produce disjoint metrics that cover metric_set."""
    produced: dict[str, str] = {}
    for client in scorers:
        for metric in client.descriptor.metrics:
            if metric in produced:
                raise ValueError(
                    f"metric {metric} produced by both {produced[metric]} and {client.descriptor.name}"
                )
            produced[metric] = client.descriptor.name
    want = set(metric_set)
    if set(produced) != want:
        raise ValueError(
            f"scorer metrics {sorted(produced)} do not cover metric set {sorted(want)}"
        )


@dataclass
class BackendSuite:
    """The clients one evolution or triplet run needs, plus shared scales."""

    operator: ChatClientBase
    generator: GenerationClientBase
    scorers: list[ScorerClientBase]
    scales: Mapping[str, MetricScale]
    evaluate_workers: int = 4

    def metric_set(self) -> tuple[str, ...]:
        names = [m for s in self.scorers for m in s.descriptor.metrics]
        return ordered_metrics(names)

    def backend_calls(self) -> int:
        clients = [self.operator, self.generator, *self.scorers]
        return sum(c.calls for c in clients)
