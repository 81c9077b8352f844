import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckptnoise.errors import ConfigError, DomainError, MissingTensorError, ShapeError
from ckptnoise.tensorstore import Checkpoint
from ckptnoise.toymodel import (
    PARAM_NAMES,
    Batch,
    Head,
    ModelConfig,
    checkpoint_to_params,
    cross_entropy,
    forward,
    init_params,
    loss_and_backward,
    params_to_checkpoint,
)

TINY = ModelConfig(vocab_size=7, d_model=4, n_heads=1, d_ffn=6, max_seq_len=3, n_classes=3)


def jitter(params, seed, scale=0.3):
    """Randomise every tensor so biases, gains and type embedding matter too."""
    rng = np.random.default_rng(seed)
    return {n: p + rng.normal(0, scale, p.shape) for n, p in params.items()}


# --- reference forward, written with explicit loops ---------------------------


def ref_layer_norm(x, g, b):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return [g[i] * (x[i] - mu) / math.sqrt(var + 1e-5) + b[i] for i in range(len(x))]


def ref_gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def matvec(v, w):
    return [sum(v[i] * w[i][j] for i in range(len(v))) for j in range(len(w[0]))]


def ref_forward(p, tokens, mask, n_heads, head):
    p = {k: v.tolist() for k, v in p.items()}
    seq = len(tokens)
    d = len(p["ln1_gain"])
    dh = d // n_heads
    x0 = [[p["embed_tokens"][tokens[s]][i] + p["embed_pos"][s][i] + p["type_embedding"][0][i] for i in range(d)] for s in range(seq)]
    a = [ref_layer_norm(x, p["ln1_gain"], p["ln1_bias"]) for x in x0]
    q = [matvec(r, p["attn_q"]) for r in a]
    k = [matvec(r, p["attn_k"]) for r in a]
    v = [matvec(r, p["attn_v"]) for r in a]
    ctx = [[0.0] * d for _ in range(seq)]
    for h in range(n_heads):
        sl = range(h * dh, (h + 1) * dh)
        for i in range(seq):
            scores = [sum(q[i][c] * k[j][c] for c in sl) / math.sqrt(dh) if mask[j] else None for j in range(seq)]
            m = max(s for s in scores if s is not None)
            e = [math.exp(s - m) if s is not None else 0.0 for s in scores]
            z = sum(e)
            for c in sl:
                ctx[i][c] = sum(e[j] / z * v[j][c] for j in range(seq))
    x1 = [[x0[s][i] + matvec(ctx[s], p["attn_o"])[i] for i in range(d)] for s in range(seq)]
    b = [ref_layer_norm(x, p["ln2_gain"], p["ln2_bias"]) for x in x1]
    hid = [[ref_gelu(u) for u in matvec(r, p["ffn1"])] for r in b]
    x2 = [[x1[s][i] + matvec(hid[s], p["ffn2"])[i] for i in range(d)] for s in range(seq)]
    if head == "cls":
        n = sum(mask)
        pooled = [sum(x2[s][i] for s in range(seq) if mask[s]) / n for i in range(d)]
        return np.array(matvec(pooled, p["cls_head"]))
    return np.array([matvec(x, p["mlm_head"]) for x in x2])


@pytest.mark.parametrize("head", ["cls", "mlm"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_loop_reference(head, seed):
    params = jitter(init_params(TINY, seed), seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 7, (2, 3))
    mask = np.array([[1, 1, 1], [1, 0, 1]])
    logits, _ = forward(params, Batch(tokens, mask), head, TINY)
    for row in range(2):
        ref = ref_forward(params, tokens[row].tolist(), mask[row].tolist(), 1, head)
        np.testing.assert_allclose(logits[row], ref, rtol=1e-10, atol=1e-12)


def test_forward_matches_reference_with_two_heads():
    cfg = ModelConfig(vocab_size=5, d_model=4, n_heads=2, d_ffn=3, max_seq_len=4, n_classes=2)
    params = jitter(init_params(cfg, 3), 3)
    tokens = np.array([[0, 4, 2, 1]])
    logits, _ = forward(params, Batch.unmasked(tokens), "cls", cfg)
    np.testing.assert_allclose(logits[0], ref_forward(params, [0, 4, 2, 1], [1, 1, 1, 1], 2, "cls"), rtol=1e-10)


# --- init and config -----------------------------------------------------------


def test_init_constants_and_scale():
    cfg = ModelConfig(vocab_size=400, d_model=32)
    p = init_params(cfg, 0)
    assert not p["type_embedding"].any()
    assert (p["ln1_gain"] == 1).all() and (p["ln2_gain"] == 1).all()
    assert not p["ln1_bias"].any()
    assert p["embed_tokens"].size >= 10**4
    assert abs(p["embed_tokens"].std(ddof=1) / 0.5 - 1) < 0.05


def test_init_is_deterministic():
    a, b = init_params(TINY, 5), init_params(TINY, 5)
    assert all(np.array_equal(a[n], b[n]) for n in PARAM_NAMES)


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_model=5, n_heads=2), dict(vocab_size=0), dict(n_classes=-1), dict(init_profile={"bogus": 1.0})],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


# --- masking and heads -----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(0, 6), min_size=2, max_size=2))
def test_masked_positions_do_not_influence_logits(seed, replacement):
    params = jitter(init_params(TINY, seed % 97), seed)
    tokens = np.array([[1, 2, 3]])
    mask = np.array([[1, 0, 0]])
    changed = tokens.copy()
    changed[0, 1:] = replacement
    a, _ = forward(params, Batch(tokens, mask), "cls", TINY)
    b, _ = forward(params, Batch(changed, mask), "cls", TINY)
    assert np.array_equal(a, b)
    a, _ = forward(params, Batch(tokens, mask), "mlm", TINY)
    b, _ = forward(params, Batch(changed, mask), "mlm", TINY)
    assert np.array_equal(a[:, 0], b[:, 0])


def test_zero_cls_head_gives_uniform_softmax():
    params = init_params(TINY, 0)
    params["cls_head"][:] = 0
    logits, _ = forward(params, Batch.unmasked(np.array([[1, 2, 3]])), "cls", TINY)
    assert not logits.any()


def test_uniform_logits_loss_is_ln_n():
    loss, _ = cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]), np.ones(5, dtype=bool))
    assert loss == pytest.approx(math.log(4), abs=1e-7)
    assert loss == pytest.approx(1.3862944, abs=1e-7)


def test_no_labeled_positions_is_domain_error():
    params = init_params(TINY, 0)
    batch = Batch.unmasked(np.array([[1, 2, 3]]), np.full((1, 3), -1))
    with pytest.raises(DomainError):
        loss_and_backward(params, batch, "mlm", TINY)


def test_unused_head_gradient_is_exactly_zero():
    params = jitter(init_params(TINY, 1), 1)
    toks = np.array([[1, 2, 3], [4, 5, 6]])
    _, g = loss_and_backward(params, Batch.unmasked(toks, np.array([0, 2])), "cls", TINY)
    assert not g["mlm_head"].any()
    _, g = loss_and_backward(params, Batch.unmasked(toks, np.array([[1, -1, 2], [-1, -1, 0]])), "mlm", TINY)
    assert not g["cls_head"].any()


def test_forward_backward_bit_deterministic():
    params = jitter(init_params(TINY, 2), 2)
    batch = Batch.unmasked(np.array([[1, 2, 3]]), np.array([1]))
    l1, g1 = loss_and_backward(params, batch, "cls", TINY)
    l2, g2 = loss_and_backward(params, batch, "cls", TINY)
    assert l1 == l2 and all(np.array_equal(g1[n], g2[n]) for n in PARAM_NAMES)


# --- gradients vs finite differences ---------------------------------------------


def max_rel_error(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-300)
    return np.abs(analytic - numeric).max() / scale


def numeric_grad(params, batch, head, cfg, name, eps=1e-4):
    out = np.zeros_like(params[name])
    for idx in np.ndindex(out.shape):
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[name][idx] += eps
        minus[name][idx] -= eps
        lp, _ = loss_and_backward(plus, batch, head, cfg)
        lm, _ = loss_and_backward(minus, batch, head, cfg)
        out[idx] = (lp - lm) / (2 * eps)
    return out


def random_case(seed, head):
    rng = np.random.default_rng(seed)
    n_heads = int(rng.choice([1, 2]))
    cfg = ModelConfig(
        vocab_size=int(rng.integers(4, 8)),
        d_model=2 * n_heads * int(rng.integers(1, 3)),
        n_heads=n_heads,
        d_ffn=int(rng.integers(2, 6)),
        max_seq_len=4,
        n_classes=int(rng.integers(2, 4)),
    )
    params = jitter(init_params(cfg, seed), seed, scale=0.5)
    batch_size, seq = 3, int(rng.integers(2, 5))
    tokens = rng.integers(0, cfg.vocab_size, (batch_size, seq))
    mask = (rng.random((batch_size, seq)) < 0.8).astype(np.int8)
    mask[:, 0] = 1
    if head == "cls":
        labels = rng.integers(0, cfg.n_classes, batch_size)
    else:
        labels = np.where(rng.random((batch_size, seq)) < 0.6, rng.integers(0, cfg.vocab_size, (batch_size, seq)), -1)
        labels[0, 0] = 1
    return cfg, params, Batch(tokens, mask, labels)


@pytest.mark.parametrize("head", ["cls", "mlm"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(head, seed):
    cfg, params, batch = random_case(seed, head)
    _, grads = loss_and_backward(params, batch, head, cfg)
    unused = "mlm_head" if head == "cls" else "cls_head"
    for name in PARAM_NAMES:
        num = numeric_grad(params, batch, head, cfg, name)
        if name == unused:
            assert not grads[name].any() and not num.any()
            continue
        assert max_rel_error(grads[name], num) < 1e-4, name


# --- checkpoint conversion -------------------------------------------------------


def test_checkpoint_round_trip_is_value_identical():
    params = init_params(TINY, 4)
    ckpt = params_to_checkpoint(params)
    assert ckpt.names() == list(PARAM_NAMES)
    back = checkpoint_to_params(ckpt, TINY)
    assert all(np.array_equal(back[n], params[n]) for n in PARAM_NAMES)


def test_missing_tensor_is_named():
    ckpt = params_to_checkpoint(init_params(TINY, 0))
    partial = Checkpoint.from_tensors([t for t in ckpt if t.name != "attn_q"])
    with pytest.raises(MissingTensorError, match="attn_q"):
        checkpoint_to_params(partial, TINY)


def test_transposed_tensor_is_shape_error():
    params = init_params(TINY, 0)
    params["ffn1"] = params["ffn1"].T.copy()
    ckpt = Checkpoint.from_arrays({n: params[n] for n in PARAM_NAMES})
    with pytest.raises(ShapeError, match="ffn1"):
        checkpoint_to_params(ckpt, TINY)


def test_head_enum_accepts_strings():
    assert Head("cls") is Head.CLS
