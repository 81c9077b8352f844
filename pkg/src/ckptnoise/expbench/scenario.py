"""Scenario specification: everything a study needs, serialisable to TOML/JSON."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import tomli

from ..errors import ConfigError
from ..perturb import DEFAULT_LAMBDA
from ..toymodel import ModelConfig
from ..trainkit import LAMBDA_GRID, Mixout, RecAdam, TrainConfig
from . import data


@dataclass(frozen=True)
class PretrainData:
    n_sequences: int = 2000
    seq_len: int = 16
    temperature: float = 1.0
    mask_rate: float = 0.15
    affinity: float = 2.0  # logit bonus for staying inside a bucket


@dataclass(frozen=True)
class Downstream:
    n_train: int = 32
    n_eval: int = 400
    shift: float = 0.5
    n_classes: int = 2
    label_rule: str = "dominant-bucket"


LABEL_RULES = ("dominant-bucket",)


def _default_model() -> ModelConfig:
    return ModelConfig(vocab_size=33, d_model=16, n_heads=2, d_ffn=32, max_seq_len=16, n_classes=2)


@dataclass(frozen=True)
class ScenarioSpec:
    pretrain_data: PretrainData = field(default_factory=PretrainData)
    downstream: Downstream = field(default_factory=Downstream)
    model: ModelConfig = field(default_factory=_default_model)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, epochs=5, batch_size=32, seed=1234))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=3, batch_size=8, seed=0))
    seeds: tuple[int, ...] = tuple(range(20))
    world_seed: int = 1234
    n_buckets: int = 2
    lam: float = DEFAULT_LAMBDA
    exclude: tuple[str, ...] = ()
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    mixout: Mixout = field(default_factory=Mixout)
    recadam: RecAdam = field(default_factory=RecAdam)

    def __post_init__(self) -> None:
        d, p, m = self.downstream, self.pretrain_data, self.model
        if not self.seeds:
            raise ConfigError("scenario needs at least one seed")
        if not 0.0 <= d.shift <= 1.0:
            raise ConfigError(f"downstream.shift must lie in [0, 1], got {d.shift}")
        if d.n_train < self.finetune.batch_size:
            raise ConfigError(f"downstream.n_train={d.n_train} is smaller than finetune.batch_size={self.finetune.batch_size}")
        if d.n_eval < 1:
            raise ConfigError("downstream.n_eval must be >= 1")
        if d.label_rule not in LABEL_RULES:
            raise ConfigError(f"unknown label rule {d.label_rule!r}; known: {LABEL_RULES}")
        if d.n_classes != m.n_classes:
            raise ConfigError(f"downstream.n_classes={d.n_classes} != model.n_classes={m.n_classes}")
        if p.seq_len > m.max_seq_len:
            raise ConfigError(f"seq_len={p.seq_len} exceeds model.max_seq_len={m.max_seq_len}")
        if m.vocab_size - 1 < self.n_buckets:
            raise ConfigError("vocab_size - 1 (the mask token) must be at least n_buckets")
        if self.n_buckets < d.n_classes:
            raise ConfigError("n_buckets must be >= n_classes or some classes can never occur")
        if not 0.0 <= p.mask_rate <= 1.0:
            raise ConfigError("pretrain_data.mask_rate must lie in [0, 1]")
        if p.temperature <= 0:
            raise ConfigError("pretrain_data.temperature must be > 0")
        if not all(0.0 < f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        if self.lam < 0 or any(x < 0 for x in self.lambda_grid):
            raise ConfigError("noise intensities must be >= 0")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        object.__setattr__(self, "fractions", tuple(float(x) for x in self.fractions))
        object.__setattr__(self, "exclude", tuple(self.exclude))

    # --- serialisation ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "pretrain_data": vars(self.pretrain_data).copy(),
            "downstream": vars(self.downstream).copy(),
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "seeds": list(self.seeds),
            "world_seed": self.world_seed,
            "n_buckets": self.n_buckets,
            "lambda": self.lam,
            "exclude": list(self.exclude),
            "lambda_grid": list(self.lambda_grid),
            "fractions": list(self.fractions),
            "mixout": {"p": self.mixout.p},
            "recadam": {
                "anneal_a": self.recadam.anneal_a,
                "anneal_t0": self.recadam.anneal_t0,
                "penalty_weight": self.recadam.penalty_weight,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioSpec":
        d = dict(d)
        known = set(default_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            if "pretrain_data" in d:
                kw["pretrain_data"] = _section(PretrainData, d["pretrain_data"], "pretrain_data")
            if "downstream" in d:
                kw["downstream"] = _section(Downstream, d["downstream"], "downstream")
            if "model" in d:
                kw["model"] = ModelConfig.from_dict(d["model"])
            if "pretrain" in d:
                kw["pretrain"] = TrainConfig.from_dict(d["pretrain"])
            if "finetune" in d:
                kw["finetune"] = TrainConfig.from_dict(d["finetune"])
            if "mixout" in d:
                kw["mixout"] = _section(Mixout, d["mixout"], "mixout")
            if "recadam" in d:
                kw["recadam"] = _section(RecAdam, d["recadam"], "recadam")
            for key, attr in (("seeds", "seeds"), ("lambda_grid", "lambda_grid"), ("fractions", "fractions"), ("exclude", "exclude")):
                if key in d:
                    kw[attr] = tuple(d[key])
            for key in ("world_seed", "n_buckets"):
                if key in d:
                    kw[key] = int(d[key])
            if "lambda" in d:
                kw["lam"] = float(d["lambda"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad scenario value: {exc}") from None
        return cls(**kw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def pretrain_hash(self) -> str:
        """Hash of only the fields that influence the pretrained checkpoint."""
        d = self.to_dict()
        sub = {k: d[k] for k in ("pretrain_data", "model", "pretrain", "world_seed", "n_buckets")}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode("utf-8")).hexdigest()

    # --- data ---------------------------------------------------------------

    def world(self) -> data.World:
        p = self.pretrain_data
        return data.make_world(self.model.vocab_size, self.n_buckets, p.temperature, p.affinity, self.world_seed)

    def pretrain_corpus(self, seed: int | None = None) -> data.MlmCorpus:
        p = self.pretrain_data
        return data.gen_pretrain_corpus(
            self.world(), p.n_sequences, p.seq_len, p.mask_rate, self.world_seed if seed is None else seed
        )

    def downstream_data(self, seed: int):
        d = self.downstream
        return data.gen_downstream(
            self.world(), d.n_train, d.n_eval, self.pretrain_data.seq_len, d.shift, self.n_buckets, d.n_classes, seed
        )


def _section(cls, d: Mapping[str, Any], name: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**d)


def default_dict() -> dict[str, Any]:
    return ScenarioSpec().to_dict()


def parse_value(text: str) -> Any:
    """Parse an override value as JSON, falling back to a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Set dotted keys (``finetune.lr``) on a copy of ``d``.

    Keys must exist in the full scenario schema; values are used as given.
    """
    schema = default_dict()
    out = copy.deepcopy(dict(d))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node_schema: Any = schema
        for p in parts:
            if not isinstance(node_schema, dict) or p not in node_schema:
                raise ConfigError(f"override key {dotted!r} is not part of the scenario schema")
            node_schema = node_schema[p]
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def read_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read config {path}: {exc.strerror}", str(path)) from exc
    try:
        if path.suffix.lower() == ".toml":
            return tomli.loads(raw.decode("utf-8"))
        if path.suffix.lower() == ".json":
            return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}: config files must end in .toml or .json")


def load_scenario(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ScenarioSpec:
    """Built-in defaults, then the file, then overrides, then validation."""
    d = read_config(path) if path is not None else {}
    if overrides:
        d = apply_overrides(d, overrides)
    return ScenarioSpec.from_dict(d)
