"""Adam, the finetuning loop and the Mixout / RecAdam-style regularisers."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError
from .perturb import derive_substream
from .tensorstore import Checkpoint
from .toymodel import (
    PARAM_GROUPS,
    Batch,
    Gradients,
    Head,
    ModelConfig,
    ModelParams,
    accuracy,
    checkpoint_to_params,
    loss_and_backward,
)

# learning rates are rescaled for the toy model; the other grids are kept as is
LR_GRID = (3e-4, 1e-3, 3e-3)
EPOCH_GRID = (3, 5, 7, 10, 15, 20)
BATCH_GRID = (8, 16, 32)
LAMBDA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)

# constant tensors that never receive updates
FROZEN = frozenset({"type_embedding"})


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.lr, (int, float)) and math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr!r}")
        for k in ("epochs", "batch_size"):
            v = getattr(self, k)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError(f"adam betas must lie in (0, 1), got {self.betas!r}")
        if not self.eps > 0:
            raise ConfigError(f"adam eps must be > 0, got {self.eps!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be u64, got {self.seed!r}")
        object.__setattr__(self, "betas", (float(b1), float(b2)))
        object.__setattr__(self, "lr", float(self.lr))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass(frozen=True)
class Vanilla:
    def to_dict(self) -> dict[str, Any]:
        return {"variant": "vanilla"}


@dataclass(frozen=True)
class Mixout:
    p: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"mixout probability must lie in [0, 1], got {self.p!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"variant": "mixout", "p": self.p}


@dataclass(frozen=True)
class RecAdam:
    """``anneal_t0=None`` means half of the total number of steps."""

    anneal_a: float = 0.5
    anneal_t0: int | None = None
    penalty_weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.anneal_a > 0:
            raise ConfigError("anneal_a must be > 0")
        if self.anneal_t0 is not None and self.anneal_t0 < 0:
            raise ConfigError("anneal_t0 must be >= 0")
        if not self.penalty_weight > 0:
            raise ConfigError("penalty_weight must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return {"variant": "recadam", **asdict(self)}


FinetuneMethod = Vanilla | Mixout | RecAdam


def method_from_dict(d: Mapping[str, Any]) -> FinetuneMethod:
    d = dict(d)
    variant = d.pop("variant", "vanilla")
    classes = {"vanilla": Vanilla, "mixout": Mixout, "recadam": RecAdam}
    if variant not in classes:
        raise ConfigError(f"unknown finetune method {variant!r}; expected one of {sorted(classes)}")
    try:
        return classes[variant](**d)
    except TypeError as exc:
        raise ConfigError(f"bad {variant} parameters: {exc}") from None


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()})


def adam_step(
    params: ModelParams, grads: Gradients, state: OptimizerState, config: TrainConfig
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    b1, b2 = config.betas
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, param has {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = p - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return new_p, OptimizerState(new_m, new_v, t)


def mixout_apply(
    current: ModelParams, pretrained: ModelParams, p: float, seed: int, step: int
) -> ModelParams:
    """Reset each element to its pretrained value with probability ``p``.

    Draws come from one substream per ``(seed, step, tensor name)``.
    """
    if p == 0.0:
        return dict(current)
    out = {}
    for name, cur in current.items():
        if p == 1.0:
            out[name] = pretrained[name].copy()
            continue
        rng = derive_substream(seed, f"mixout/{step}/{name}")
        keep_pre = rng.random(cur.shape) < p
        out[name] = np.where(keep_pre, pretrained[name], cur)
    return out


def recadam_coefficient(t: int, method: RecAdam, total_steps: int) -> float:
    t0 = method.anneal_t0 if method.anneal_t0 is not None else total_steps // 2
    z = -method.anneal_a * (t - t0)
    # 1/(1+exp(z)) without overflow for large |z|
    if z > 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def recadam_penalty(
    current: ModelParams, pretrained: ModelParams, k: float, method: RecAdam
) -> tuple[float, Gradients]:
    """Quadratic pull toward ``pretrained`` weighted by ``penalty_weight * (1 - k)``."""
    w = method.penalty_weight * (1.0 - k)
    penalty = 0.0
    grads = {}
    for name, cur in current.items():
        diff = cur - pretrained[name]
        penalty += 0.5 * float(np.dot(diff.ravel(), diff.ravel()))
        grads[name] = w * diff
    return w * penalty, grads


def group_l1(params: ModelParams, grouping: Mapping[str, str] = PARAM_GROUPS) -> dict[str, float]:
    out: dict[str, float] = {}
    for name, p in params.items():
        g = grouping[name]
        out[g] = out.get(g, 0.0) + float(np.abs(p).sum())
    return out


def l1_relative_change(
    before: ModelParams, after: ModelParams, grouping: Mapping[str, str] = PARAM_GROUPS
) -> dict[str, float]:
    """``|L1(after_g) - L1(before_g)| / L1(before_g)`` per group.

    A change in norm, not a norm of the change: sign flips can cancel.
    Groups whose starting L1 is zero report 0 (see :func:`zero_l1_groups`).
    """
    b = group_l1(before, grouping)
    a = group_l1(after, grouping)
    return {g: (abs(a[g] - b[g]) / b[g] if b[g] > 0 else 0.0) for g in b}


def zero_l1_groups(params: ModelParams, grouping: Mapping[str, str] = PARAM_GROUPS) -> list[str]:
    return sorted(g for g, v in group_l1(params, grouping).items() if v == 0.0)


@dataclass
class MetricTrajectory:
    step_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    l1_change: list[dict[str, float]] = field(default_factory=list)
    initial_accuracy: float = float("nan")
    final_accuracy: float = float("nan")
    l1_flagged: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        groups = sorted({g for row in self.l1_change for g in row})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "eval_accuracy", *[f"l1_change_{g}" for g in groups]])
        for i, (acc, l1) in enumerate(zip(self.eval_accuracy, self.l1_change), start=1):
            w.writerow([i, repr(acc), *[repr(l1[g]) for g in groups]])
        return buf.getvalue()


@dataclass(frozen=True)
class Dataset:
    """Classification examples: ``tokens [n, seq]`` and ``labels [n]``."""

    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.tokens[idx], self.labels[idx])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_loop(
    params: ModelParams,
    make_batch,
    n_examples: int,
    config: TrainConfig,
    head: Head,
    model: ModelConfig,
    method: FinetuneMethod = Vanilla(),
    anchor: ModelParams | None = None,
    on_epoch=None,
) -> tuple[ModelParams, list[float]]:
    """Generic Adam loop shared by pretraining and finetuning.

    ``make_batch(idx)`` turns example indices into a :class:`Batch`. Data
    order depends only on ``config.seed`` and the epoch, so runs that differ
    in method or starting point still see identical batches.
    """
    if n_examples == 0:
        raise DomainError("empty training set")
    anchor = anchor if anchor is not None else {n: p.copy() for n, p in params.items()}
    state = OptimizerState.zeros_like(params)
    steps_per_epoch = -(-n_examples // config.batch_size)
    total = steps_per_epoch * config.epochs
    losses: list[float] = []
    for epoch in range(config.epochs):
        rng = derive_substream(config.seed, f"shuffle/{epoch}")
        for idx in _batches(n_examples, config.batch_size, rng):
            loss, grads = loss_and_backward(params, make_batch(idx), head, model)
            if isinstance(method, RecAdam):
                k = recadam_coefficient(state.t, method, total)
                pen, pgrads = recadam_penalty(params, anchor, k, method)
                grads = {n: k * g + pgrads[n] for n, g in grads.items()}
                loss = k * loss + pen
            for name in FROZEN:
                if name in grads:
                    grads[name] = np.zeros_like(grads[name])
            params, state = adam_step(params, grads, state, config)
            if isinstance(method, Mixout):
                params = mixout_apply(params, anchor, method.p, config.seed, state.t)
            losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, losses


def finetune(
    start: Checkpoint | ModelParams,
    method: FinetuneMethod,
    train: Dataset,
    eval: Dataset,
    config: TrainConfig,
    model: ModelConfig,
    anchor: ModelParams | None = None,
) -> tuple[ModelParams, MetricTrajectory]:
    """Finetune a CLS head from ``start``.

    Mixout and RecAdam pull toward ``anchor``, which defaults to ``start``
    (pass the unperturbed pretrained weights to anchor a perturbed start to
    the original model).
    """
    params = checkpoint_to_params(start, model) if isinstance(start, Checkpoint) else {n: np.array(p, dtype=np.float64) for n, p in start.items()}
    if len(train) == 0:
        raise DomainError("empty training set")
    begin = {n: p.copy() for n, p in params.items()}
    traj = MetricTrajectory(l1_flagged=zero_l1_groups(begin))
    traj.initial_accuracy = accuracy(params, eval.tokens, eval.labels, model)

    def make_batch(idx):
        return Batch.unmasked(train.tokens[idx], train.labels[idx])

    def on_epoch(epoch, p):
        traj.eval_accuracy.append(accuracy(p, eval.tokens, eval.labels, model))
        traj.l1_change.append(l1_relative_change(begin, p))

    params, traj.step_loss = train_loop(
        params, make_batch, len(train), config, Head.CLS, model, method, anchor if anchor is not None else begin, on_epoch
    )
    traj.final_accuracy = traj.eval_accuracy[-1]
    return params, traj
