"""Single-block pre-norm transformer encoder with hand-written backprop.

All arithmetic is float64. Parameters live in a plain ``dict[str, ndarray]``
keyed by :data:`PARAM_NAMES`; gradients use the same layout.

Pipeline::

    x0 = tok + pos + type
    x1 = x0 + attn(ln1(x0))
    x2 = x1 + ffn2(gelu(ffn1(ln2(x1))))
    CLS: masked mean over positions -> cls_head
    MLM: per position -> mlm_head
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError, DomainError, MissingTensorError, ShapeError, ValidationError
from .perturb import derive_substream
from .tensorstore import Checkpoint, NamedTensor

ModelParams = dict[str, np.ndarray]
Gradients = dict[str, np.ndarray]

PARAM_NAMES = (
    "embed_tokens",
    "embed_pos",
    "type_embedding",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "ffn1",
    "ffn2",
    "ln1_gain",
    "ln1_bias",
    "ln2_gain",
    "ln2_bias",
    "mlm_head",
    "cls_head",
)

PARAM_GROUPS = {
    "embed_tokens": "embeddings",
    "embed_pos": "embeddings",
    "type_embedding": "embeddings",
    "attn_q": "attention",
    "attn_k": "attention",
    "attn_v": "attention",
    "attn_o": "attention",
    "ffn1": "ffn",
    "ffn2": "ffn",
    "ln1_gain": "layernorm",
    "ln1_bias": "layernorm",
    "ln2_gain": "layernorm",
    "ln2_bias": "layernorm",
    "mlm_head": "heads",
    "cls_head": "heads",
}

DEFAULT_INIT_PROFILE = {"embeddings": 0.5, "attention": 0.08, "ffn": 0.02, "heads": 0.05}

LN_EPS = 1e-5
_MASKED_SCORE = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


class Head(str, enum.Enum):
    MLM = "mlm"
    CLS = "cls"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 16
    n_heads: int = 2
    d_ffn: int = 32
    max_seq_len: int = 16
    n_classes: int = 2
    init_profile: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_INIT_PROFILE))

    def __post_init__(self) -> None:
        for k in ("vocab_size", "d_model", "n_heads", "d_ffn", "max_seq_len", "n_classes"):
            v = getattr(self, k)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"ModelConfig.{k} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        profile = dict(DEFAULT_INIT_PROFILE)
        profile.update(self.init_profile)
        unknown = set(profile) - set(DEFAULT_INIT_PROFILE)
        if unknown:
            raise ConfigError(f"unknown init_profile groups: {sorted(unknown)}")
        if any(not (v >= 0 and math.isfinite(v)) for v in profile.values()):
            raise ConfigError("init_profile stds must be finite and >= 0")
        object.__setattr__(self, "init_profile", {k: float(v) for k, v in profile.items()})

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, d, f, l, c = self.vocab_size, self.d_model, self.d_ffn, self.max_seq_len, self.n_classes
        return {
            "embed_tokens": (v, d),
            "embed_pos": (l, d),
            "type_embedding": (1, d),
            "attn_q": (d, d),
            "attn_k": (d, d),
            "attn_v": (d, d),
            "attn_o": (d, d),
            "ffn1": (d, f),
            "ffn2": (f, d),
            "ln1_gain": (d,),
            "ln1_bias": (d,),
            "ln2_gain": (d,),
            "ln2_bias": (d,),
            "mlm_head": (d, v),
            "cls_head": (d, c),
        }

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Batch:
    """``labels`` is ``[batch]`` class ids for CLS or ``[batch, seq]`` targets
    for MLM, where -1 marks positions without a target."""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def unmasked(cls, tokens: np.ndarray, labels: np.ndarray | None = None) -> "Batch":
        tokens = np.asarray(tokens)
        return cls(tokens, np.ones(tokens.shape, dtype=np.int8), labels)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    prof = config.init_profile
    params: ModelParams = {}
    for name, shape in config.shapes().items():
        if name == "type_embedding" or name.endswith("_bias"):
            params[name] = np.zeros(shape)
        elif name.endswith("_gain"):
            params[name] = np.ones(shape)
        else:
            rng = derive_substream(seed, f"init/{name}")
            w = rng.standard_normal(shape) * prof[PARAM_GROUPS[name]]
            # keep values f32-representable so checkpoint round trips are exact
            params[name] = w.astype(np.float32).astype(np.float64)
    return params


def validate_params(params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    shapes = config.shapes()
    for name, shape in shapes.items():
        if name not in params:
            raise MissingTensorError(f"missing parameter tensor {name!r}")
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"tensor {name!r} has shape {list(np.shape(params[name]))}, expected {list(shape)}")
    extra = set(params) - set(shapes)
    if extra:
        raise ValidationError(f"unexpected parameter tensors: {sorted(extra)}")


def params_to_checkpoint(params: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> Checkpoint:
    return Checkpoint.from_tensors(
        (NamedTensor.from_array(n, params[n]) for n in PARAM_NAMES if n in params), metadata
    )


def checkpoint_to_params(ckpt: Checkpoint, config: ModelConfig) -> ModelParams:
    shapes = config.shapes()
    params: ModelParams = {}
    for name, shape in shapes.items():
        if name not in ckpt:
            raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
        t = ckpt[name]
        if t.shape != shape:
            raise ShapeError(f"tensor {name!r} has shape {list(t.shape)}, expected {list(shape)}")
        params[name] = t.array().astype(np.float64)
    extra = [n for n in ckpt.names() if n not in shapes]
    if extra:
        raise ValidationError(f"checkpoint has tensors unknown to the model: {extra}")
    return params


def _check_batch(params: ModelParams, batch: Batch, head: Head) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(batch.tokens)
    mask = np.asarray(batch.mask)
    if tokens.ndim != 2 or mask.shape != tokens.shape:
        raise ShapeError(f"tokens {tokens.shape} and mask {mask.shape} must be matching [batch, seq]")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("token ids must be integers")
    vocab = params["embed_tokens"].shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValidationError(f"token ids must lie in [0, {vocab})")
    if tokens.shape[1] > params["embed_pos"].shape[0]:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {params['embed_pos'].shape[0]}")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("attention mask entries must be 0 or 1")
    if (mask.sum(axis=1) == 0).any():
        raise ValidationError("every row needs at least one unmasked position")
    return tokens, mask.astype(np.float64)


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _split(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def forward(params: ModelParams, batch: Batch, head: Head | str, config: ModelConfig) -> tuple[np.ndarray, dict]:
    """Return ``(logits, cache)``; CLS logits are ``[batch, classes]``, MLM ``[batch, seq, vocab]``."""
    head = Head(head)
    validate_params(params, config)
    tokens, mask = _check_batch(params, batch, head)
    n_heads = config.n_heads
    d = config.d_model
    seq = tokens.shape[1]
    dh = d // n_heads

    x0 = params["embed_tokens"][tokens] + params["embed_pos"][:seq] + params["type_embedding"][0]
    a, ln1 = _layer_norm(x0, params["ln1_gain"], params["ln1_bias"])
    q = _split(a @ params["attn_q"], n_heads)
    k = _split(a @ params["attn_k"], n_heads)
    v = _split(a @ params["attn_v"], n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    keep = mask[:, None, None, :] > 0
    scores = np.where(keep, scores, _MASKED_SCORE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = _merge(probs @ v)
    x1 = x0 + ctx @ params["attn_o"]
    b, ln2 = _layer_norm(x1, params["ln2_gain"], params["ln2_bias"])
    hpre = b @ params["ffn1"]
    hact, t = _gelu(hpre)
    x2 = x1 + hact @ params["ffn2"]

    cache = dict(
        tokens=tokens, mask=mask, n_heads=n_heads, x0=x0, a=a, ln1=ln1, q=q, k=k, v=v,
        probs=probs, ctx=ctx, x1=x1, b=b, ln2=ln2, hpre=hpre, hact=hact, t=t, x2=x2, head=head,
    )
    if head is Head.CLS:
        denom = mask.sum(axis=1, keepdims=True)
        pooled = (x2 * mask[:, :, None]).sum(axis=1) / denom
        cache["pooled"] = pooled
        cache["denom"] = denom
        logits = pooled @ params["cls_head"]
    else:
        logits = x2 @ params["mlm_head"]
    return logits, cache


def _targets(batch: Batch, head: Head, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if batch.labels is None:
        raise ValidationError("batch has no labels")
    labels = np.asarray(batch.labels)
    n_out = logits.shape[-1]
    if head is Head.CLS:
        if labels.shape != logits.shape[:1]:
            raise ShapeError(f"CLS labels must have shape {logits.shape[:1]}, got {labels.shape}")
        valid = np.ones(labels.shape, dtype=bool)
    else:
        if labels.shape != logits.shape[:2]:
            raise ShapeError(f"MLM targets must have shape {logits.shape[:2]}, got {labels.shape}")
        valid = labels >= 0
    if not valid.any():
        raise DomainError("batch has no labeled positions")
    if labels[valid].max() >= n_out or labels[valid].min() < 0:
        raise ValidationError(f"labels must lie in [0, {n_out})")
    return labels, valid


def cross_entropy(logits: np.ndarray, labels: np.ndarray, valid: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over valid positions and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = int(valid.sum())
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float(picked[valid].sum()) / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, safe[..., None], np.take_along_axis(dlogits, safe[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= valid[..., None] / n
    return loss, dlogits


def loss_and_backward(
    params: ModelParams, batch: Batch, head: Head | str, config: ModelConfig
) -> tuple[float, Gradients]:
    head = Head(head)
    logits, c = forward(params, batch, head, config)
    labels, valid = _targets(batch, head, logits)
    loss, dlogits = cross_entropy(logits, labels, valid)

    grads: Gradients = {n: np.zeros_like(p) for n, p in params.items()}
    x2 = c["x2"]
    if head is Head.CLS:
        grads["cls_head"] = c["pooled"].T @ dlogits
        dpooled = dlogits @ params["cls_head"].T
        dx2 = dpooled[:, None, :] * (c["mask"] / c["denom"])[:, :, None]
    else:
        grads["mlm_head"] = np.einsum("bsd,bsv->dv", x2, dlogits)
        dx2 = dlogits @ params["mlm_head"].T

    # FFN branch
    grads["ffn2"] = np.einsum("bsf,bsd->fd", c["hact"], dx2)
    dhact = dx2 @ params["ffn2"].T
    dhpre = _gelu_back(dhact, c["hpre"], c["t"])
    grads["ffn1"] = np.einsum("bsd,bsf->df", c["b"], dhpre)
    db = dhpre @ params["ffn1"].T
    dx1_ln, grads["ln2_gain"], grads["ln2_bias"] = _layer_norm_back(db, params["ln2_gain"], c["ln2"])
    dx1 = dx2 + dx1_ln

    # attention branch
    grads["attn_o"] = np.einsum("bsd,bse->de", c["ctx"], dx1)
    dctx = _split(dx1 @ params["attn_o"].T, c["n_heads"])
    probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(q.shape[-1])
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
    dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
    a = c["a"]
    grads["attn_q"] = np.einsum("bsd,bse->de", a, dq)
    grads["attn_k"] = np.einsum("bsd,bse->de", a, dk)
    grads["attn_v"] = np.einsum("bsd,bse->de", a, dv)
    da = dq @ params["attn_q"].T + dk @ params["attn_k"].T + dv @ params["attn_v"].T
    dx0_ln, grads["ln1_gain"], grads["ln1_bias"] = _layer_norm_back(da, params["ln1_gain"], c["ln1"])
    dx0 = dx1 + dx0_ln

    # embeddings
    tokens = c["tokens"]
    seq = tokens.shape[1]
    np.add.at(grads["embed_tokens"], tokens.reshape(-1), dx0.reshape(-1, dx0.shape[-1]))
    grads["embed_pos"][:seq] = dx0.sum(axis=0)
    grads["type_embedding"][0] = dx0.sum(axis=(0, 1))
    return loss, grads


def predict(params: ModelParams, tokens: np.ndarray, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Argmax CLS predictions; ties go to the lowest class index."""
    out = []
    for i in range(0, len(tokens), batch_size):
        logits, _ = forward(params, Batch.unmasked(tokens[i : i + batch_size]), Head.CLS, config)
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, tokens: np.ndarray, labels: np.ndarray, config: ModelConfig) -> float:
    return float(np.mean(predict(params, tokens, config) == labels))
