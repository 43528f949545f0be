"""Run configuration: nested dataclasses loaded from JSON with dotted-path overrides.

Schema (every section and field optional)::

    {
      "seed": 0,
      "paths": {"out_dir", "catalog", "definitions", "events", "metadata", "vocab"},
      "synth": {"n_patients", "n_concepts", "prevalences", "strength", "n_correlated", "n_weak"},
      "preprocess": {"window_days", "min_terms", "k"},
      "tokenizer": {"vocab_size", "max_subword_len"},
      "masking": {"p_remove", "p_retain", "p_replace"},
      "mlm": {"p_select", "p_mask_token", "p_random", "p_keep"},
      "model": {"max_tokens", "hidden_dim", "num_layers", "num_heads", "feedforward_dim",
                "dropout_rate", "init_std"},
      "train": {TrainConfig fields except seed, "models", "mlm_max_steps"},
      "evaluation": {"threshold", "controls_high", "cases_high", "cases_low",
                     "expand_percentile", "biomarker_quantile"}
    }

Relative paths resolve against ``paths.out_dir``. Component seeds are derived
from the global ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augmentation import MaskingConfig, MlmConfig
from .encoder import ModelConfig
from .errors import ConfigInvalid
from .evaluation import GroupPercentiles
from .training.loops import TrainConfig


@dataclass
class PathsSection:
    out_dir: str = "run"
    catalog: str = "catalog.tsv"
    definitions: str = "definitions.json"
    events: str = "events.jsonl"
    metadata: str = "metadata.jsonl"
    vocab: str = "vocab.txt"


@dataclass
class SynthSection:
    n_patients: int = 2000
    n_concepts: int = 400
    prevalences: list[float] = field(default_factory=lambda: [0.12, 0.05, 0.03, 0.03])
    strength: float = 0.8
    n_correlated: int = 16
    n_weak: int = 12


@dataclass
class PreprocessSection:
    window_days: int = 7
    min_terms: int = 5
    k: int = 5


@dataclass
class TokenizerSection:
    vocab_size: int = 2000
    max_subword_len: int | None = None


@dataclass
class MaskingSection:
    p_remove: float = 0.8
    p_retain: float = 0.1
    p_replace: float = 0.1


@dataclass
class MlmSection:
    p_select: float = 0.15
    p_mask_token: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1


@dataclass
class ModelSection:
    max_tokens: int = 128
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int = 256
    dropout_rate: float = 0.1
    init_std: float = 0.02


@dataclass
class TrainSection:
    batch_size: int = 32
    mlm_lr: float = 1e-3
    cls_lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_proportion: float = 0.1
    mlm_epochs: int = 4
    cls_epochs: int = 6
    eval_every: float = 0.5
    patience: int = 2
    mlm_val_fraction: float = 0.05
    eval_batch_size: int = 64
    rho_max: float | None = None
    models: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    mlm_max_steps: int | None = None


@dataclass
class EvaluationSection:
    threshold: float = 0.5
    controls_high: float = 98.0
    cases_high: float = 90.0
    cases_low: float = 12.0
    expand_percentile: float = 98.0
    biomarker_quantile: float = 95.0


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    synth: SynthSection = field(default_factory=SynthSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    mlm: MlmSection = field(default_factory=MlmSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # -- derived component configs --

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() or name == "out_dir" else self.out_dir / p

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    def masking_config(self) -> MaskingConfig:
        return MaskingConfig(**dataclasses.asdict(self.masking), seed=self.seed + 101)

    def mlm_config(self) -> MlmConfig:
        return MlmConfig(**dataclasses.asdict(self.mlm), seed=self.seed + 202)

    def model_config(self, vocab_size: int, num_phenotypes: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_phenotypes=num_phenotypes,
                           **dataclasses.asdict(self.model))

    def train_config(self) -> TrainConfig:
        d = dataclasses.asdict(self.train)
        d.pop("models")
        d.pop("mlm_max_steps")
        return TrainConfig(**d, seed=self.seed + 303)

    def percentiles(self) -> GroupPercentiles:
        e = self.evaluation
        return GroupPercentiles(e.controls_high, e.cases_high, e.cases_low)

    def validate(self) -> None:
        try:
            self.masking_config()
            self.mlm_config()
            self.model_config(vocab_size=max(self.tokenizer.vocab_size, 1), num_phenotypes=1)
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from None
        if any(not 0 <= m < self.preprocess.k for m in self.train.models):
            raise ConfigInvalid(f"train.models must lie in [0, {self.preprocess.k})")
        if self.preprocess.k < 3:
            raise ConfigInvalid("preprocess.k must be at least 3")
        e = self.evaluation
        for name in ("controls_high", "cases_high", "cases_low", "expand_percentile",
                     "biomarker_quantile"):
            if not 0 <= getattr(e, name) <= 100:
                raise ConfigInvalid(f"evaluation.{name} must lie in [0, 100]")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigInvalid(f"unknown field(s) {sorted(unknown)} in {where or 'config'}")
    kwargs = {}
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for name, value in data.items():
        sub = _SECTIONS.get(hints[name]) if isinstance(hints[name], str) else None
        kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    c.__name__: c
    for c in (PathsSection, SynthSection, PreprocessSection, TokenizerSection, MaskingSection,
              MlmSection, ModelSection, TrainSection, EvaluationSection)
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a raw config dict; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigInvalid(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(f"override {key!r} descends into a non-object")
    node[parts[-1]] = _parse_value(value)


def load_config(
    path: str | Path | None = None,
    overrides: list[str] = (),
    seed: int | None = None,
    out: str | None = None,
) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigInvalid(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigInvalid("config file must hold a JSON object")
    for o in overrides:
        apply_override(raw, o)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw.setdefault("paths", {})["out_dir"] = out
    try:
        cfg = _build(RunConfig, raw, "")
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from None
    cfg.validate()
    return cfg
