"""Equivalence drivers: scan-vs-oracle trials and reduction-lattice checks."""

from __future__ import annotations

import numpy as np

from . import mixers
from .mixers import Dimensions, GateSet, MixerKind, TokenProjection


def max_rel_err(a, b):
    """Max elementwise |a-b| scaled by the larger magnitude (floor 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / denom


def random_case(kind, rng, L_max=64, d_max=8, H_max=2):
    """Random (dims, params, tokens) within the given bounds."""
    H = 1 if kind in mixers.VECTOR_KINDS else int(rng.integers(1, H_max + 1))
    d = int(rng.integers(1, d_max + 1))
    L = int(rng.integers(1, L_max + 1))
    dims = Dimensions(L, H, d, H * d)
    params = mixers.init_params(kind, dims, rng)
    tokens = rng.standard_normal((L, dims.d_model))
    return dims, params, tokens


def scan_vs_oracle(kind, trials, seed, L_max=64, d_max=8, H_max=2, fault=False):
    """Max relative error between scan and the unrolled oracle over trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        dims, params, tokens = random_case(kind, rng, L_max, d_max, H_max)
        got = mixers.scan(kind, params, tokens, dims)
        if fault:
            got = got.copy()
            got.flat[0] += 1e-6  # negative-control hook
        worst = max(worst, max_rel_err(got, mixers.oracle_unrolled(kind, params, tokens, dims)))
    return worst


def _shared_qkv_params(rng, dims):
    base = mixers.init_params(MixerKind.RETNET, dims, rng)
    return {k: v for k, v in base.items() if k.split(".")[1] in ("Wq", "Wk", "Wv")}


def _logit(g):
    return float(np.log(g / (1.0 - g)))


def reduction_checks(trials, seed, L_max=16, d_max=6):
    """Argument-level identities of the decay family.

    GLA with alpha fixed at gamma*1 and Mamba-2 with gamma_t fixed at gamma
    both reproduce RetNet(gamma); HGRN-2 equals GLA stepped with the key
    replaced by (1 - alpha). Returns {name: max relative error}.
    """
    rng = np.random.default_rng(seed)
    errs = {"gla_vs_retnet": 0.0, "mamba2_vs_retnet": 0.0, "hgrn2_vs_gla": 0.0}
    for _ in range(trials):
        d = int(rng.integers(1, d_max + 1))
        L = int(rng.integers(1, L_max + 1))
        dims = Dimensions(L, 1, d, d)
        qkv = _shared_qkv_params(rng, dims)
        tokens = rng.standard_normal((L, d))
        gamma = float(rng.uniform(0.05, 0.95))

        ret = dict(qkv)
        ret["h0.gamma_logit"] = np.asarray(_logit(gamma))
        ref = mixers.scan(MixerKind.RETNET, ret, tokens, dims)

        gla = dict(qkv)
        gla["h0.Wa"] = np.zeros((d, d))
        gla["h0.ba"] = np.full(d, _logit(gamma))
        errs["gla_vs_retnet"] = max(
            errs["gla_vs_retnet"], max_rel_err(mixers.scan(MixerKind.GLA, gla, tokens, dims), ref)
        )

        mam = dict(qkv)
        mam["h0.wg"] = np.zeros(d)
        mam["h0.bg"] = np.asarray(_logit(gamma))
        errs["mamba2_vs_retnet"] = max(
            errs["mamba2_vs_retnet"],
            max_rel_err(mixers.scan(MixerKind.MAMBA2, mam, tokens, dims), ref),
        )

        h2 = dict(qkv)
        h2["h0.Wa"] = rng.standard_normal((d, d))
        h2["h0.ba"] = rng.standard_normal(d)
        got = mixers.scan(MixerKind.HGRN2, h2, tokens, dims)
        # GLA stepped by hand with k_t := 1 - alpha_t
        Q, _, V, ex = mixers.head_inputs(MixerKind.HGRN2, h2, tokens, dims, 0)
        state = mixers.init_state(MixerKind.GLA, dims)
        via_gla = np.zeros((L, d))
        for t in range(L):
            proj = TokenProjection(q=Q[t], k=1.0 - ex["alpha"][t], v=V[t])
            state, via_gla[t] = mixers.step(
                MixerKind.GLA, state, proj, GateSet(alpha=ex["alpha"][t])
            )
        errs["hgrn2_vs_gla"] = max(errs["hgrn2_vs_gla"], max_rel_err(got[0], via_gla))
    return errs


def chunked_checks(kind, trials, seed, chunks=(1, 7, 16), L=64, d_max=8):
    """Max relative error of scan_chunked against scan for a decay kind."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        dims, params, tokens = random_case(kind, rng, L_max=L, d_max=d_max, H_max=2)
        ref = mixers.scan(kind, params, tokens, dims)
        for chunk in list(chunks) + [dims.L]:
            got = mixers.scan_chunked(kind, params, tokens, dims, chunk)
            worst = max(worst, max_rel_err(got, ref))
    return worst
