"""Matrix-wise noise injection into checkpoint tensors.

Each tensor ``W`` gets ``W + U(-lam/2, lam/2) * std(W)`` elementwise, where
``std`` is the Bessel-corrected sample standard deviation of that tensor.
Constant tensors have zero std and are left untouched. Two ablation knobs
are exposed: a Gaussian distribution with the same variance as the uniform
one, and a global scope that uses one pooled std for every tensor.

Every tensor draws from its own generator seeded by ``(seed, name)``, so the
output does not depend on the order in which tensors are processed.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .tensorstore import Checkpoint, NamedTensor

DEFAULT_LAMBDA = 0.15
_F32 = np.dtype("<f4")


class Distribution(str, enum.Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


class Scope(str, enum.Enum):
    MATRIX = "matrix"
    GLOBAL = "global"


class Status(str, enum.Enum):
    PERTURBED = "perturbed"
    SKIPPED_ZERO_STD = "skipped_zero_std"
    SKIPPED_EXCLUDED = "skipped_excluded"


def _check_pattern(p: Any) -> str:
    if not isinstance(p, str) or not p:
        raise ConfigError(f"exclude pattern must be a nonempty string, got {p!r}")
    return p


@lru_cache(maxsize=256)
def _compile(pattern: str) -> re.Pattern[str]:
    return re.compile(".*".join(re.escape(part) for part in pattern.split("*")))


def matches(pattern: str, name: str) -> bool:
    """Glob match where ``*`` is the only wildcard; the whole name must match."""
    return _compile(pattern).fullmatch(name) is not None


def is_excluded(name: str, patterns: Iterable[str]) -> bool:
    return any(matches(p, name) for p in patterns)


@dataclass(frozen=True)
class NoiseSpec:
    lam: float = DEFAULT_LAMBDA
    distribution: Distribution = Distribution.UNIFORM
    scope: Scope = Scope.MATRIX
    exclude: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            lam = float(self.lam)
        except (TypeError, ValueError):
            raise ConfigError(f"lambda must be a real number, got {self.lam!r}") from None
        if not math.isfinite(lam) or lam < 0:
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam!r}")
        try:
            dist = Distribution(self.distribution)
            scope = Scope(self.scope)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(self.exclude, str):
            raise ConfigError("exclude must be a list of patterns, not a string")
        exclude = tuple(_check_pattern(p) for p in self.exclude)
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "distribution", dist)
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "exclude", exclude)
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "distribution": self.distribution.value,
            "scope": self.scope.value,
            "exclude": list(self.exclude),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NoiseSpec":
        known = {"lambda", "distribution", "scope", "exclude", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown noise spec keys: {sorted(unknown)}")
        return cls(
            lam=d.get("lambda", DEFAULT_LAMBDA),
            distribution=d.get("distribution", "uniform"),
            scope=d.get("scope", "matrix"),
            exclude=tuple(d.get("exclude", ())),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class TensorRecord:
    std: float
    scale: float
    status: Status

    def to_dict(self) -> dict[str, Any]:
        return {"std": self.std, "scale": self.scale, "status": self.status.value}


@dataclass
class PerturbReport:
    records: dict[str, TensorRecord]
    spec: NoiseSpec
    pooled_std: float | None = None

    @property
    def seed(self) -> int:
        return self.spec.seed

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.spec.seed,
            "pooled_std": self.pooled_std,
            "tensors": [{"name": n, **r.to_dict()} for n, r in self.records.items()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _name_key(name: str) -> int:
    # blake2b is stable across processes and platforms, unlike hash()
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest(), "little")


def derive_substream(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 generator for ``(seed, name)``.

    The 128-bit blake2b digest of the UTF-8 name and the 64-bit seed are fed
    together to :class:`numpy.random.SeedSequence`.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed out of u64 range: {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _name_key(name)])))


def tensor_std(t: NamedTensor | np.ndarray) -> float:
    """Sample standard deviation (n - 1 divisor); 0 for constant or 1-element input."""
    x = np.asarray(t.data if isinstance(t, NamedTensor) else t, dtype=np.float64).reshape(-1)
    return _std64(x)


def _std64(x: np.ndarray) -> float:
    n = x.size
    if n <= 1 or np.all(x == x[0]):
        return 0.0
    mean = x.sum() / n
    dev = x - mean
    return float(math.sqrt(float(np.dot(dev, dev)) / (n - 1)))


def pooled_std(ckpt: Checkpoint, exclude: Sequence[str] = ()) -> float:
    parts = [t.data for t in ckpt if not is_excluded(t.name, exclude)]
    if not parts or sum(p.size for p in parts) == 0:
        raise DomainError("pooled std over an empty pool: every tensor is excluded")
    return _std64(np.concatenate(parts).astype(np.float64))


def _draw(rng: np.random.Generator, n: int, lam: float, dist: Distribution) -> np.ndarray:
    if dist is Distribution.UNIFORM:
        # random() - 0.5 is exact, so |u| <= lam / 2 holds without rounding slack
        return (rng.random(n) - 0.5) * lam
    return rng.standard_normal(n) * (lam / math.sqrt(12.0))


def _apply(t: NamedTensor, s: float, spec: NoiseSpec) -> NamedTensor:
    w = t.data.astype(np.float64)
    rng = derive_substream(spec.seed, t.name)
    delta = _draw(rng, w.size, spec.lam, spec.distribution) * s
    out = (w + delta).astype(_F32)
    if spec.distribution is Distribution.UNIFORM:
        # rounding to f32 may step past the bound by half an ulp; pull those back
        bound = (spec.lam / 2.0) * s
        over = np.abs(out.astype(np.float64) - w) > bound
        while over.any():
            out[over] = np.nextafter(out[over], t.data[over])
            over = np.abs(out.astype(np.float64) - w) > bound
    return NamedTensor(t.name, t.shape, out)


def perturb_checkpoint(ckpt: Checkpoint, spec: NoiseSpec) -> tuple[Checkpoint, PerturbReport]:
    """Return a perturbed copy of ``ckpt`` and a per-tensor report."""
    pooled = pooled_std(ckpt, spec.exclude) if spec.scope is Scope.GLOBAL else None
    records: dict[str, TensorRecord] = {}
    out: list[NamedTensor] = []
    for t in ckpt:
        if is_excluded(t.name, spec.exclude):
            records[t.name] = TensorRecord(0.0, 0.0, Status.SKIPPED_EXCLUDED)
            out.append(t)
            continue
        s = tensor_std(t) if pooled is None else pooled
        if pooled is None and s == 0.0:
            records[t.name] = TensorRecord(0.0, 0.0, Status.SKIPPED_ZERO_STD)
            out.append(t)
            continue
        scale = spec.lam * s
        records[t.name] = TensorRecord(s, scale, Status.PERTURBED)
        # a zero scale would only flip signed zeros
        out.append(t if scale == 0.0 else _apply(t, s, spec))
    meta = dict(ckpt.metadata)
    return Checkpoint.from_tensors(out, meta), PerturbReport(records, spec, pooled)
