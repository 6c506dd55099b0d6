"""Causal softmax attention with an explicit KV cache.

The quadratic recall layer of the hybrid stack: softmax(Q K^T / sqrt(d)) V
under a strict causal mask. `decode_step` is the incremental form; replaying
a sequence through it matches the batch computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as ng


def causal_mask(L):
    return np.tril(np.ones((L, L), dtype=bool))


def causal_attention_nodes(q, k, v):
    """Graph form: q, k, v are (L, d) nodes; returns the (L, d) output node."""
    L, d = q.shape
    scores = ng.scale(ng.matmul(q, ng.transpose(k)), 1.0 / np.sqrt(d))
    probs = ng.row_softmax(scores, mask=causal_mask(L))
    return ng.matmul(probs, v)


def causal_attention(Q, K, V):
    """Numeric causal attention over full (L, d) arrays."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.shape != K.shape or K.shape[0] != V.shape[0] or Q.ndim != 2:
        raise ng.ShapeError(f"causal_attention: {Q.shape}, {K.shape}, {V.shape}")
    return ng.evaluate(causal_attention_nodes(ng.const(Q), ng.const(K), ng.const(V)))


@dataclass
class KVCache:
    """Growing key/value history for one attention head. Single-owner."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def __len__(self):
        return len(self.keys)


def decode_step(cache, q, k, v):
    """Append (k, v) and attend from q over the full history.

    Returns (cache, o); the cache is mutated in place and returned for
    convenience.
    """
    q = np.asarray(q, dtype=np.float64)
    cache.keys.append(np.asarray(k, dtype=np.float64))
    cache.values.append(np.asarray(v, dtype=np.float64))
    K = np.stack(cache.keys, axis=0)
    V = np.stack(cache.values, axis=0)
    scores = K @ q / np.sqrt(q.shape[0])
    scores = scores - scores.max()
    w = np.exp(scores)
    w = w / w.sum()
    return cache, w @ V
