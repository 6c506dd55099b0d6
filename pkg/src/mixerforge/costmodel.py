"""Analytic forward-pass FLOP model for token mixers, plus Pareto utilities.

Exact integer arithmetic throughout. Per token, per layer, summed over all
heads:

* vector mixers (HGRN, Hawk):        5 * d_model
* matrix mixers:                     k * d_model**2 / H
    k = 5  RetNet, Mamba-2
    k = 7  GLA, RWKV-6, HGRN-2      (two extra gating passes)
    k = 8  DeltaNet, GatedDeltaNet  (one further forget/restore pass)
* causal softmax attention:          2 * L * d_model  (2 L^2 d_model per sequence)

Only the token mixer is costed; projections, MLPs, norms and residuals are
identical across models and omitted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

from . import hybrid
from .mixers import MixerKind, VECTOR_KINDS

SOFTMAX = "softmax"

MATRIX_K = {
    MixerKind.RETNET: 5,
    MixerKind.MAMBA2: 5,
    MixerKind.GLA: 7,
    MixerKind.RWKV6: 7,
    MixerKind.HGRN2: 7,
    MixerKind.DELTANET: 8,
    MixerKind.GATED_DELTANET: 8,
}


def cost_class(kind):
    """'vector', 'matrix', or 'softmax'."""
    if kind == SOFTMAX:
        return "softmax"
    return "vector" if kind in VECTOR_KINDS else "matrix"


@dataclass(frozen=True)
class PerTokenCost:
    flops: int  # exact value truncated toward zero when fractional
    exact: Fraction
    truncated: bool


def per_token_flops(kind, dims):
    """Per-token mixer FLOPs for one layer, summed over heads.

    `kind` is a MixerKind or the SOFTMAX marker; softmax uses the amortized
    per-token form 2*L*d_model with L taken from `dims`.
    """
    if kind == SOFTMAX:
        exact = Fraction(2 * dims.L * dims.d_model)
    elif kind in VECTOR_KINDS:
        dims.check_kind(kind)
        exact = Fraction(5 * dims.d_model)
    else:
        exact = Fraction(MATRIX_K[kind] * dims.d_model**2, dims.H)
    flops = int(exact)  # Fraction truncates toward zero
    return PerTokenCost(flops=flops, exact=exact, truncated=exact != flops)


@dataclass(frozen=True)
class CostReport:
    per_token_flops: int  # whole stack, one token
    per_sequence_flops: int  # whole stack, L tokens
    per_model_flops: int  # alias of the full-stack sequence cost
    kv_cache_bytes: int
    breakdown: dict  # layer-kind -> (layer count, per-sequence flops)
    exact: bool  # False when a matrix cost was not integral


def model_flops(config, L, elem_size=2):
    """Sum mixer costs over the layer schedule at sequence length L."""
    dims = config.dims
    run = type(dims)(L, dims.H, dims.d, dims.d_model)
    schedule = hybrid.build_schedule(config)
    linear_cost = per_token_flops(config.kind, run)
    softmax_cost = per_token_flops(SOFTMAX, run)
    n_full = schedule.count(hybrid.FULL)
    n_linear = len(schedule) - n_full
    per_token = n_linear * linear_cost.exact + n_full * softmax_cost.exact
    per_seq = per_token * L
    breakdown = {
        "linear": (n_linear, int(n_linear * linear_cost.exact * L)),
        "full": (n_full, int(n_full * softmax_cost.exact * L)),
    }
    return CostReport(
        per_token_flops=int(per_token),
        per_sequence_flops=int(per_seq),
        per_model_flops=int(per_seq),
        kv_cache_bytes=hybrid.cache_report(config, L, elem_size).kv_cache_bytes,
        breakdown=breakdown,
        exact=not linear_cost.truncated,
    )


def pareto(points):
    """Non-dominated subset of (flops, score) points: lower flops and higher
    score are both better. Sorted by flops; exact ties are all retained in
    input order."""
    points = list(points)
    front = []
    for i, (f, s) in enumerate(points):
        dominated = False
        for j, (f2, s2) in enumerate(points):
            if j == i:
                continue
            if f2 <= f and s2 >= s and (f2 < f or s2 > s):
                dominated = True
                break
        if not dominated:
            front.append((i, (f, s)))
    front.sort(key=lambda item: (item[1][0], item[0]))
    return [p for _, p in front]


CSV_HEADER = ["label", "ratio", "kind", "L", "d_model", "H", "per_token_flops", "per_sequence_flops", "kv_cache_bytes", "score"]


def rows_to_csv(rows):
    """Serialize dict rows with the standard cost-report header."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
