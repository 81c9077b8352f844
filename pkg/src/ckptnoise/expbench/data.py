"""Synthetic pretraining corpus and downstream classification data.

A scenario defines a fixed "world": a partition of the content vocabulary
into buckets, a pretraining Markov chain whose transitions favour staying
inside a bucket, and an unrelated chain. Downstream sequences come from a
mix of the two chains, with mixing weight ``shift``; labels are the index of
the most frequent bucket, modulo the number of classes.

The last vocabulary id is reserved as the mask token.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..perturb import derive_substream
from ..trainkit import Dataset


@dataclass(frozen=True)
class World:
    buckets: np.ndarray  # bucket id per content token
    pretrain_chain: np.ndarray  # [n_content, n_content] row-stochastic
    independent_chain: np.ndarray

    @property
    def n_content(self) -> int:
        return len(self.buckets)

    @property
    def mask_token(self) -> int:
        return self.n_content

    def downstream_chain(self, shift: float) -> np.ndarray:
        return (1.0 - shift) * self.pretrain_chain + shift * self.independent_chain


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@lru_cache(maxsize=32)
def make_world(vocab_size: int, n_buckets: int, temperature: float, affinity: float, seed: int) -> World:
    n = vocab_size - 1
    if n < n_buckets:
        raise ValueError(f"need at least {n_buckets} content tokens, vocab leaves {n}")
    rng = derive_substream(seed, "world/buckets")
    buckets = np.empty(n, dtype=np.int64)
    buckets[rng.permutation(n)] = np.arange(n) % n_buckets
    same = (buckets[:, None] == buckets[None, :]).astype(np.float64)
    g = derive_substream(seed, "world/pretrain_chain").standard_normal((n, n))
    pre = _softmax_rows(g / temperature + affinity * same)
    h = derive_substream(seed, "world/independent_chain").standard_normal((n, n))
    ind = _softmax_rows(h / temperature)
    for arr in (buckets, pre, ind):
        arr.flags.writeable = False
    return World(buckets, pre, ind)


def sample_chain(chain: np.ndarray, n_seq: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """``n_seq`` sequences with a uniform start state, vectorised over rows."""
    n = chain.shape[0]
    cdf = np.cumsum(chain, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n_seq, seq_len), dtype=np.int64)
    out[:, 0] = rng.integers(0, n, n_seq)
    u = rng.random((n_seq, seq_len))
    for j in range(1, seq_len):
        rows = cdf[out[:, j - 1]]
        out[:, j] = (u[:, j][:, None] >= rows).sum(axis=1)
    return out


def dominant_bucket_labels(tokens: np.ndarray, buckets: np.ndarray, n_buckets: int, n_classes: int) -> np.ndarray:
    counts = np.zeros((len(tokens), n_buckets), dtype=np.int64)
    b = buckets[tokens]
    for k in range(n_buckets):
        counts[:, k] = (b == k).sum(axis=1)
    return np.argmax(counts, axis=1) % n_classes


@dataclass(frozen=True)
class MlmCorpus:
    """``tokens`` with masked positions replaced by the mask id;
    ``targets`` holds original ids there and -1 elsewhere."""

    tokens: np.ndarray
    targets: np.ndarray
    original: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def gen_pretrain_corpus(world: World, n_sequences: int, seq_len: int, mask_rate: float, seed: int) -> MlmCorpus:
    rng = derive_substream(seed, "corpus/sequences")
    seqs = sample_chain(world.pretrain_chain, n_sequences, seq_len, rng)
    if mask_rate <= 0:
        warnings.warn("mask rate is 0: the corpus has no MLM targets", stacklevel=2)
        return MlmCorpus(seqs.copy(), np.full(seqs.shape, -1, dtype=np.int64), seqs)
    mrng = derive_substream(seed, "corpus/mask")
    masked = mrng.random(seqs.shape) < mask_rate
    # every row gets at least one target so no batch is label-free
    empty = ~masked.any(axis=1)
    masked[np.flatnonzero(empty), mrng.integers(0, seq_len, int(empty.sum()))] = True
    tokens = np.where(masked, world.mask_token, seqs)
    targets = np.where(masked, seqs, -1)
    return MlmCorpus(tokens, targets, seqs)


def gen_downstream(
    world: World,
    n_train: int,
    n_eval: int,
    seq_len: int,
    shift: float,
    n_buckets: int,
    n_classes: int,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Class-balanced, disjoint train and eval sets.

    Sequences are drawn in blocks and accepted while their class still has
    room, so each split holds ``n // n_classes`` examples per class (the
    remainder goes to the lowest classes).
    """
    chain = world.downstream_chain(shift)
    rng = derive_substream(seed, "downstream/sequences")
    quotas = []
    for n in (n_train, n_eval):
        q = np.full(n_classes, n // n_classes)
        q[: n % n_classes] += 1
        quotas.append(q)
    need = np.concatenate(quotas)  # train quotas then eval quotas
    filled = [[] for _ in range(2 * n_classes)]
    seen: set[bytes] = set()
    block = max(64, 2 * (n_train + n_eval))
    attempts = 0
    while any(len(filled[i]) < need[i] for i in range(len(need))):
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("could not fill class quotas; label rule too unbalanced for this chain")
        seqs = sample_chain(chain, block, seq_len, rng)
        labels = dominant_bucket_labels(seqs, world.buckets, n_buckets, n_classes)
        for s, y in zip(seqs, labels):
            key = s.tobytes()
            if key in seen:
                continue
            slot = y if len(filled[y]) < need[y] else n_classes + y
            if len(filled[slot]) < need[slot]:
                seen.add(key)
                filled[slot].append(s)

    def assemble(slots) -> Dataset:
        toks = [s for k in slots for s in filled[k]]
        labels = [k % n_classes for k in slots for _ in filled[k]]
        order = derive_substream(seed, f"downstream/order/{slots[0]}").permutation(len(toks))
        return Dataset(np.array(toks, dtype=np.int64)[order], np.array(labels, dtype=np.int64)[order])

    return assemble(list(range(n_classes))), assemble(list(range(n_classes, 2 * n_classes)))
