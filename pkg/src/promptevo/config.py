"""Application configuration: documented defaults, strict JSON loading, and
backend construction from the resolved config."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Optional

from .backends import (
    BackendSuite,
    ChatClientBase,
    FileCache,
    HttpChatClient,
    HttpGenerationClient,
    HttpScorerClient,
    MockEvolutionOperator,
    MockGenerationClient,
    MockNegativeModel,
    MockRefinerModel,
    RetryPolicy,
    ScorerDescriptor,
    SyntheticScorer,
    preferred_vocabulary,
    validate_scorer_coverage,
)
from .evolution import EvolutionConfig
from .scores import CORE_METRICS, MetricScale, ThresholdPolicy, ordered_metrics
from .templates import SFT_TEMPLATES
from .util import stable_digest


class ConfigError(Exception):
    pass


_VIDEOSCORE_METRICS = ("VQ", "TC", "DD", "TVA", "FC")

DEFAULTS: dict = {
    "seed": 0,
    "paths": {"cache_dir": "cache"},
    "concurrency": {"runs": 4, "evaluate": 4, "backend": 8},
    "metrics": {
        "metric_set": list(CORE_METRICS),
        "target_min": 0.0,
        "target_max": 5.0,
        "scales": {
            **{m: {"raw_min": 1.0, "raw_max": 4.0} for m in _VIDEOSCORE_METRICS},
            "AES": {"raw_min": 0.0, "raw_max": 10.0},
            "MPS": {"raw_min": 0.0, "raw_max": 15.0},
        },
    },
    "thresholds": {
        "per_metric_min": {m: 2.5 for m in CORE_METRICS},
        "fallback": "highest_overall",
    },
    "selection_rule": "sum",
    "evolution": {
        "max_iterations": 4,
        "offspring_per_iteration": 3,
        "top_n": 3,
        "operator_instruction": "t2v-default",
        "parse_retries": 2,
    },
    "backends": {
        "cache": True,
        "retry": {"max_attempts": 3, "initial_delay": 0.5, "multiplier": 2.0, "max_delay": 8.0},
        "operator": {"kind": "mock", "model": "gpt-4o", "temperature": 1.0,
                     "max_tokens": 1024, "endpoint": None},
        "sampler": {"kind": "mock", "model": "prompt-refiner", "temperature": 0.9,
                    "max_tokens": 512, "endpoints": {}},
        "negatives": {"kind": "mock", "model": "gpt-4o", "temperature": 1.0,
                      "max_tokens": 256, "endpoint": None},
        "generation": {"kind": "mock", "profile": "default", "endpoint": None},
        "scorers": [
            {"kind": "mock", "name": "videoscore", "metrics": list(_VIDEOSCORE_METRICS),
             "endpoint": None},
            {"kind": "mock", "name": "aesthetic", "metrics": ["AES"], "endpoint": None},
            {"kind": "mock", "name": "mps", "metrics": ["MPS"], "endpoint": None},
        ],
    },
    "datasets": {
        "candidates_per_source": 5,
        "margin": 0.05,
        "dpo_rounds": 2,
        "require_threshold": False,
        "sft_instruction": "sft-chat-default",
    },
    "negative": {"strategy": "fixed", "few_shots": None},
    "objectives": {"beta": 0.1},
}

# Maps whose keys are user-defined (metric names, round names), exempt from
# unknown-key checking during the merge.
_OPEN_MAPS = {
    "metrics.scales",
    "thresholds.per_metric_min",
    "backends.sampler.endpoints",
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if dotted in _OPEN_MAPS:
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be an object")
            merged = dict(out.get(key) or {})
            merged.update(value)
            out[key] = merged
            continue
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{dotted}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


class AppConfig:
    """Fully-resolved configuration with validated, typed views."""

    def __init__(self, data: dict):
        self.data = data
        try:
            self._build()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def _build(self) -> None:
        data = self.data
        self.seed = int(data["seed"])
        self.cache_dir = str(data["paths"]["cache_dir"])
        self.concurrency = {k: int(v) for k, v in data["concurrency"].items()}
        for name, value in self.concurrency.items():
            if value < 1:
                raise ValueError(f"concurrency.{name} must be >= 1")

        metrics = data["metrics"]
        self.metric_set = ordered_metrics(metrics["metric_set"])
        tmin, tmax = float(metrics["target_min"]), float(metrics["target_max"])
        self.scales: dict[str, MetricScale] = {}
        for m in self.metric_set:
            raw = metrics["scales"].get(m)
            if raw is None:
                raise ValueError(f"no raw scale configured for metric {m}")
            self.scales[m] = MetricScale(
                metric=m,
                raw_min=float(raw["raw_min"]),
                raw_max=float(raw["raw_max"]),
                target_min=float(raw.get("target_min", tmin)),
                target_max=float(raw.get("target_max", tmax)),
            )

        thr = data["thresholds"]
        per_metric = {str(k): float(v) for k, v in thr["per_metric_min"].items()}
        for m, v in per_metric.items():
            if m not in self.scales:
                raise ValueError(f"threshold for unknown metric {m}")
            scale = self.scales[m]
            if not scale.target_min <= v <= scale.target_max:
                raise ValueError(f"threshold {m}={v} outside target interval "
                                 f"[{scale.target_min}, {scale.target_max}]")
        self.thresholds = ThresholdPolicy(per_metric_min=per_metric, fallback=thr["fallback"])

        evo = data["evolution"]
        self.evolution = EvolutionConfig(
            thresholds=self.thresholds,
            max_iterations=int(evo["max_iterations"]),
            offspring_per_iteration=int(evo["offspring_per_iteration"]),
            top_n=int(evo["top_n"]),
            operator_instruction=evo["operator_instruction"],
            parse_retries=int(evo["parse_retries"]),
            selection_rule=data["selection_rule"],
        )

        ds = data["datasets"]
        if int(ds["candidates_per_source"]) < 2:
            raise ValueError("datasets.candidates_per_source must be >= 2")
        if float(ds["margin"]) <= 0:
            raise ValueError("datasets.margin must be positive")
        if int(ds["dpo_rounds"]) < 1:
            raise ValueError("datasets.dpo_rounds must be >= 1")
        if ds["sft_instruction"] not in SFT_TEMPLATES:
            raise ValueError(f"unknown SFT instruction template: {ds['sft_instruction']!r}")
        self.candidates_per_source = int(ds["candidates_per_source"])
        self.margin = float(ds["margin"])
        self.dpo_rounds = int(ds["dpo_rounds"])
        self.require_threshold = bool(ds["require_threshold"])
        self.sft_instruction = str(ds["sft_instruction"])

        backends = data["backends"]
        self.retry = RetryPolicy(
            max_attempts=int(backends["retry"]["max_attempts"]),
            initial_delay=float(backends["retry"]["initial_delay"]),
            multiplier=float(backends["retry"]["multiplier"]),
            max_delay=float(backends["retry"]["max_delay"]),
        )
        self.cache_enabled = bool(backends["cache"])
        for section in ("operator", "sampler", "negatives", "generation"):
            kind = backends[section]["kind"]
            if kind not in ("mock", "http"):
                raise ValueError(f"backends.{section}.kind must be 'mock' or 'http'")
            if kind == "http" and section != "sampler" and not backends[section].get("endpoint"):
                raise ValueError(f"backends.{section} requires an endpoint when kind='http'")
        self.scorer_descriptors: list[tuple[str, ScorerDescriptor]] = []
        produced: dict[str, str] = {}
        for sc in backends["scorers"]:
            kind = sc["kind"]
            if kind not in ("mock", "http"):
                raise ValueError(f"scorer {sc.get('name')}: kind must be 'mock' or 'http'")
            name = str(sc["name"])
            metric_list = tuple(str(m) for m in sc["metrics"])
            for m in metric_list:
                if m not in self.scales:
                    raise ValueError(f"scorer {name} declares unknown metric {m}")
                if m in produced:
                    raise ValueError(f"metric {m} produced by both {produced[m]} and {name}")
                produced[m] = name
            if kind == "http" and not sc.get("endpoint"):
                raise ValueError(f"scorer {name} requires an endpoint when kind='http'")
            descriptor = ScorerDescriptor(name=name, metrics=metric_list,
                                          scales=self.scales, endpoint=sc.get("endpoint"))
            self.scorer_descriptors.append((kind, descriptor))
        if set(produced) != set(self.metric_set):
            raise ValueError(f"scorers produce {sorted(produced)} but the metric set is "
                             f"{sorted(self.metric_set)}")

        neg = data["negative"]
        if neg["strategy"] not in ("fixed", "icl", "tuned_pair"):
            raise ValueError(f"unknown negative strategy: {neg['strategy']!r}")
        self.negative_strategy = neg["strategy"]
        shots = neg["few_shots"]
        self.negative_few_shots = (
            None if shots is None else tuple((str(p), str(n)) for p, n in shots)
        )
        self.beta = float(data["objectives"]["beta"])
        if self.beta <= 0:
            raise ValueError("objectives.beta must be positive")

    def snapshot(self) -> dict:
        """Behavior-relevant config: everything except machine-local paths and
        concurrency knobs, which cannot change run results."""
        return {k: copy.deepcopy(v) for k, v in self.data.items()
                if k not in ("paths", "concurrency")}

    def hash(self) -> str:
        return stable_digest(self.snapshot())


def load_config(path: Optional[Path | str]) -> AppConfig:
    """Load defaults, overlaid with the JSON config file when given."""
    if path is None:
        return AppConfig(copy.deepcopy(DEFAULTS))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return AppConfig(_merge(DEFAULTS, user))


def config_from_snapshot(snapshot: dict) -> AppConfig:
    """Rebuild a config from a persisted run snapshot (paths/concurrency default)."""
    return AppConfig(_merge(DEFAULTS, snapshot))


# ---------------------------------------------------------------------------
# Client construction
# ---------------------------------------------------------------------------


def build_cache(cfg: AppConfig, base_dir: Optional[Path | str] = None) -> Optional[FileCache]:
    if not cfg.cache_enabled:
        return None
    root = Path(cfg.cache_dir)
    if base_dir is not None and not root.is_absolute():
        root = Path(base_dir) / root
    return FileCache(root)


def _client_kwargs(cfg: AppConfig, cache: Optional[FileCache]) -> dict:
    return {"cache": cache, "retry": cfg.retry, "max_concurrency": cfg.concurrency["backend"]}


def build_suite(cfg: AppConfig, cache: Optional[FileCache] = None) -> BackendSuite:
    """Operator, generator, and scorer clients per the configured kinds."""
    vocabulary = preferred_vocabulary(f"{cfg.seed}/vocab")
    common = _client_kwargs(cfg, cache)

    op = cfg.data["backends"]["operator"]
    if op["kind"] == "http":
        operator = HttpChatClient(op["endpoint"], op["model"], temperature=float(op["temperature"]),
                                  max_tokens=int(op["max_tokens"]), **common)
    else:
        operator = MockEvolutionOperator(seed=f"{cfg.seed}/operator", vocabulary=vocabulary,
                                         model=op["model"], temperature=float(op["temperature"]),
                                         max_tokens=int(op["max_tokens"]), **common)

    gen = cfg.data["backends"]["generation"]
    if gen["kind"] == "http":
        generator = HttpGenerationClient(gen["endpoint"], profile=gen["profile"], **common)
    else:
        generator = MockGenerationClient(seed=f"{cfg.seed}/generation", profile=gen["profile"],
                                         **common)

    scorers = []
    for kind, descriptor in cfg.scorer_descriptors:
        if kind == "http":
            scorers.append(HttpScorerClient(descriptor, **common))
        else:
            scorers.append(SyntheticScorer(descriptor, seed=f"{cfg.seed}/score",
                                           vocabulary=vocabulary, **common))
    validate_scorer_coverage(scorers, cfg.metric_set)

    return BackendSuite(operator=operator, generator=generator, scorers=scorers,
                        scales=cfg.scales, evaluate_workers=cfg.concurrency["evaluate"])


def build_sampler(cfg: AppConfig, sample_from: str,
                  cache: Optional[FileCache] = None) -> ChatClientBase:
    """Chat client for the model a DPO round samples from ("sft", "dpo-1", ...)."""
    section = cfg.data["backends"]["sampler"]
    common = _client_kwargs(cfg, cache)
    if section["kind"] == "http":
        endpoint = (section.get("endpoints") or {}).get(sample_from)
        if not endpoint:
            raise ConfigError(f"backends.sampler.endpoints lacks an entry for {sample_from!r}")
        return HttpChatClient(endpoint, section["model"],
                              temperature=float(section["temperature"]),
                              max_tokens=int(section["max_tokens"]), **common)
    vocabulary = preferred_vocabulary(f"{cfg.seed}/vocab")
    return MockRefinerModel(seed=f"{cfg.seed}/sampler/{sample_from}", vocabulary=vocabulary,
                            model=f"{section['model']}:{sample_from}",
                            temperature=float(section["temperature"]),
                            max_tokens=int(section["max_tokens"]), **common)


def build_negatives_client(cfg: AppConfig, cache: Optional[FileCache] = None) -> ChatClientBase:
    section = cfg.data["backends"]["negatives"]
    common = _client_kwargs(cfg, cache)
    if section["kind"] == "http":
        return HttpChatClient(section["endpoint"], section["model"],
                              temperature=float(section["temperature"]),
                              max_tokens=int(section["max_tokens"]), **common)
    return MockNegativeModel(seed=f"{cfg.seed}/negatives", model=section["model"],
                             temperature=float(section["temperature"]),
                             max_tokens=int(section["max_tokens"]), **common)
