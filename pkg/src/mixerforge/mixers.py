"""Linear-time token mixers behind a single state-update interface.

Nine mixer kinds across three generations:

* generation 1, vector state h in R^d:
    HGRN      h' = a*h + (1-a)*v            o = h'*q
    Hawk      h' = r*h + i*v                o = h'*q
* generation 2, matrix state S in R^{d x d} with multiplicative decay:
    RetNet    S' = g*S + v k^T              o = S' q     (g fixed per head)
    GLA       S' = S . (1 a^T) + v k^T      o = S' q     (per-channel a_t)
    Mamba-2   S' = g_t*S + v k^T            o = S' q     (scalar a_t)
    RWKV-6    S' = S Diag(a) + v k^T        o = (S + (d*v) k^T) q   (pre-update S)
    HGRN-2    S' = S Diag(a) + v (1-a)^T    o = S' q     (tied key gate)
* generation 3, delta-rule controlled forgetting:
    DeltaNet        S' = S (I - b k k^T) + b v k^T               o = S' q
    GatedDeltaNet   S' = a * S (I - b k k^T) + b v k^T           o = S' q

Keys of the delta family are L2-normalized so the forget projector is a
contraction. `scan` runs the recurrence through the autodiff graph;
`oracle_unrolled` is an intentionally naive O(L^2) numpy re-derivation used
as the correctness reference, and `scan_chunked` is a blocked evaluation
for the decay family.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as ng


class MixerError(Exception):
    pass


class MixerKind(Enum):
    HGRN = "hgrn"
    HAWK = "hawk"
    RETNET = "retnet"
    GLA = "gla"
    MAMBA2 = "mamba2"
    RWKV6 = "rwkv6"
    HGRN2 = "hgrn2"
    DELTANET = "deltanet"
    GATED_DELTANET = "gated_deltanet"


VECTOR_KINDS = frozenset({MixerKind.HGRN, MixerKind.HAWK})
DECAY_KINDS = frozenset(
    {MixerKind.RETNET, MixerKind.GLA, MixerKind.MAMBA2, MixerKind.RWKV6, MixerKind.HGRN2}
)
DELTA_KINDS = frozenset({MixerKind.DELTANET, MixerKind.GATED_DELTANET})

GENERATION = {
    MixerKind.HGRN: 1,
    MixerKind.HAWK: 1,
    MixerKind.RETNET: 2,
    MixerKind.GLA: 2,
    MixerKind.MAMBA2: 2,
    MixerKind.RWKV6: 2,
    MixerKind.HGRN2: 2,
    MixerKind.DELTANET: 3,
    MixerKind.GATED_DELTANET: 3,
}


def state_form(kind):
    return "vector" if kind in VECTOR_KINDS else "matrix"


@dataclass(frozen=True)
class Dimensions:
    """Sequence/width bookkeeping: L tokens, H heads of width d, d_model = H*d."""

    L: int
    H: int
    d: int
    d_model: int

    def __post_init__(self):
        if min(self.L, self.H, self.d, self.d_model) < 1:
            raise MixerError("Dimensions must all be positive")
        if self.d_model != self.H * self.d:
            raise MixerError(f"d_model={self.d_model} != H*d={self.H * self.d}")

    def check_kind(self, kind):
        if kind in VECTOR_KINDS and self.H != 1:
            raise MixerError(f"{kind.value} is single-head by design, got H={self.H}")


@dataclass
class GateSet:
    """Per-token gate values; only the fields the active kind uses are set."""

    alpha: np.ndarray | None = None  # per-channel decay, (d,)
    beta: float | None = None  # delta write strength
    gamma: float | None = None  # fixed decay (RetNet)
    gamma_t: float | None = None  # data-dependent scalar decay (Mamba-2)
    r: np.ndarray | None = None  # Hawk recurrence gate, (d,)
    i: np.ndarray | None = None  # Hawk input gate, (d,)
    bonus: np.ndarray | None = None  # RWKV-6 read-out vector, (d,)
    alpha_scalar: float | None = None  # GatedDeltaNet scalar decay

    def validate(self):
        for name in ("alpha", "r", "i"):
            v = getattr(self, name)
            if v is not None and not np.all((v > 0.0) & (v < 1.0)):
                raise MixerError(f"gate {name} out of (0,1)")
        for name in ("beta", "gamma", "gamma_t", "alpha_scalar"):
            v = getattr(self, name)
            if v is not None and not 0.0 < float(v) < 1.0:
                raise MixerError(f"gate {name} out of (0,1)")


@dataclass
class TokenProjection:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass
class MixerState:
    """Hidden state per head: vector h (gen 1) or matrix S (gen 2/3)."""

    kind: MixerKind
    value: np.ndarray

    @property
    def is_vector(self):
        return self.value.ndim == 1


def init_state(kind, dims):
    """Zero state of the correct form for one head."""
    dims.check_kind(kind)
    if kind in VECTOR_KINDS:
        return MixerState(kind, np.zeros(dims.d))
    return MixerState(kind, np.zeros((dims.d, dims.d)))


# ---------------------------------------------------------------------------
# parameters

_GATE_SHAPES = {
    MixerKind.HGRN: {"Wa": "md", "ba": "d"},
    MixerKind.HAWK: {"Wr": "md", "br": "d", "Wi": "md", "bi": "d"},
    MixerKind.RETNET: {"gamma_logit": "s"},
    MixerKind.GLA: {"Wa": "md", "ba": "d"},
    MixerKind.MAMBA2: {"wg": "m", "bg": "s"},
    MixerKind.RWKV6: {"Wa": "md", "ba": "d", "bonus": "d"},
    MixerKind.HGRN2: {"Wa": "md", "ba": "d"},
    MixerKind.DELTANET: {"wb": "m", "bb": "s"},
    MixerKind.GATED_DELTANET: {"wb": "m", "bb": "s", "wg": "m", "bg": "s"},
}


def param_shapes(kind, dims):
    """Per-head parameter name -> shape map for one mixer head."""
    m, d = dims.d_model, dims.d
    shapes = {"Wq": (m, d), "Wk": (m, d), "Wv": (m, d)}
    codes = {"md": (m, d), "m": (m,), "d": (d,), "s": ()}
    for name, code in _GATE_SHAPES[kind].items():
        shapes[name] = codes[code]
    return shapes


def init_params(kind, dims, rng):
    """Random per-head parameters: dict of {f"h{h}.{name}": array}.

    Weights are uniform +-1/sqrt(fan_in); RetNet decays start log-spaced in
    (0.9, 0.999); the RWKV-6 bonus vector starts at zero.
    """
    dims.check_kind(kind)
    params = {}
    gammas = np.exp(np.linspace(np.log(0.9), np.log(0.999), dims.H))
    for h in range(dims.H):
        for name, shape in param_shapes(kind, dims).items():
            key = f"h{h}.{name}"
            if name == "bonus":
                params[key] = np.zeros(shape)
            elif name == "gamma_logit":
                g = gammas[h]
                params[key] = np.asarray(np.log(g / (1.0 - g)))
            elif name.startswith("b"):
                params[key] = np.zeros(shape)
            else:
                fan_in = shape[0] if shape else 1
                bound = 1.0 / np.sqrt(fan_in)
                params[key] = rng.uniform(-bound, bound, size=shape)
    return params


def head_view(params, h):
    prefix = f"h{h}."
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# graph construction (shared by the numeric API and the hybrid model)


def gate_nodes(kind, p, x):
    """Gate expressions for one head given node map `p` and token node `x`."""
    g = {}
    if kind is MixerKind.HGRN:
        g["alpha"] = ng.sigmoid(ng.add(ng.matmul(x, p["Wa"]), p["ba"]))
    elif kind is MixerKind.HAWK:
        g["r"] = ng.sigmoid(ng.add(ng.matmul(x, p["Wr"]), p["br"]))
        g["i"] = ng.sigmoid(ng.add(ng.matmul(x, p["Wi"]), p["bi"]))
    elif kind is MixerKind.RETNET:
        g["gamma"] = ng.sigmoid(p["gamma_logit"])
    elif kind in (MixerKind.GLA, MixerKind.RWKV6, MixerKind.HGRN2):
        g["alpha"] = ng.sigmoid(ng.add(ng.matmul(x, p["Wa"]), p["ba"]))
        if kind is MixerKind.RWKV6:
            g["bonus"] = p["bonus"]
    elif kind is MixerKind.MAMBA2:
        g["gamma_t"] = ng.sigmoid(ng.add(ng.sum_all(ng.mul(x, p["wg"])), p["bg"]))
    elif kind in DELTA_KINDS:
        g["beta"] = ng.sigmoid(ng.add(ng.sum_all(ng.mul(x, p["wb"])), p["bb"]))
        if kind is MixerKind.GATED_DELTANET:
            g["alpha_scalar"] = ng.sigmoid(ng.add(ng.sum_all(ng.mul(x, p["wg"])), p["bg"]))
    return g


def normalize_key(k):
    """L2-normalize a key node (delta family)."""
    return ng.smul(ng.rsqrt(ng.sum_all(ng.mul(k, k))), k)


def step_nodes(kind, state, q, k, v, gates):
    """One recurrence step as graph nodes; returns (state', o)."""
    d = q.shape[0]
    ones = ng.const(np.ones(d))
    if kind is MixerKind.HGRN:
        a = gates["alpha"]
        h = ng.add(ng.mul(a, state), ng.mul(ng.sub(ones, a), v))
        return h, ng.mul(h, q)
    if kind is MixerKind.HAWK:
        h = ng.add(ng.mul(gates["r"], state), ng.mul(gates["i"], v))
        return h, ng.mul(h, q)
    if kind is MixerKind.RETNET:
        s = ng.add(ng.smul(gates["gamma"], state), ng.outer(v, k))
        return s, ng.matmul(s, q)
    if kind is MixerKind.GLA:
        s = ng.add(ng.mul_cols(state, gates["alpha"]), ng.outer(v, k))
        return s, ng.matmul(s, q)
    if kind is MixerKind.MAMBA2:
        s = ng.add(ng.smul(gates["gamma_t"], state), ng.outer(v, k))
        return s, ng.matmul(s, q)
    if kind is MixerKind.RWKV6:
        s = ng.add(ng.mul_cols(state, gates["alpha"]), ng.outer(v, k))
        read = ng.add(state, ng.outer(ng.mul(gates["bonus"], v), k))
        return s, ng.matmul(read, q)
    if kind is MixerKind.HGRN2:
        a = gates["alpha"]
        s = ng.add(ng.mul_cols(state, a), ng.outer(v, ng.sub(ones, a)))
        return s, ng.matmul(s, q)
    if kind in DELTA_KINDS:
        b = gates["beta"]
        sk = ng.matmul(state, k)
        forgotten = ng.sub(state, ng.smul(b, ng.outer(sk, k)))
        if kind is MixerKind.GATED_DELTANET:
            forgotten = ng.smul(gates["alpha_scalar"], forgotten)
        s = ng.add(forgotten, ng.smul(b, ng.outer(v, k)))
        return s, ng.matmul(s, q)
    raise MixerError(f"unknown kind {kind}")


def _scan_fused(kind, p, x, H, d):
    """Fused scan node over H heads: x (L, d_model) -> (L, H*d) column blocks.

    Projections and gate pre-activations stay as batched graph ops; the
    recurrence itself is one fused node per layer (kernels below), so graph
    size is independent of L and H.
    """
    L = x.shape[0]
    shape = (L, H * d)
    attrs = {"H": H, "d": d}

    def heads(name):
        return [p[f"h{h}.{name}"] for h in range(H)]

    def proj(name):
        cols = [ng.matmul(x, w) for w in heads(name)]
        return cols[0] if H == 1 else ng.concat_cols(cols)

    def vec_gate(wn, bn):
        cols = [
            ng.sigmoid(ng.add_rowvec(ng.matmul(x, w), b)) for w, b in zip(heads(wn), heads(bn))
        ]
        return cols[0] if H == 1 else ng.concat_cols(cols)

    def scalar_gate(wn, bn):
        # one (L,) gate per head, stacked to (H, L)
        rows = [
            ng.sigmoid(ng.add_scalar(ng.matmul(x, w), b)) for w, b in zip(heads(wn), heads(bn))
        ]
        return ng.stack_rows(rows)

    Q, V = proj("Wq"), proj("Wv")
    if kind is MixerKind.HGRN:
        return ng.fused("scan_hgrn", (Q, V, vec_gate("Wa", "ba")), shape, attrs)
    if kind is MixerKind.HAWK:
        return ng.fused(
            "scan_hawk", (Q, V, vec_gate("Wr", "br"), vec_gate("Wi", "bi")), shape, attrs
        )
    if kind is MixerKind.HGRN2:
        return ng.fused("scan_hgrn2", (Q, V, vec_gate("Wa", "ba")), shape, attrs)
    K = proj("Wk")
    if kind is MixerKind.RETNET:
        gammas = [ng.sigmoid(gl) for gl in heads("gamma_logit")]
        return ng.fused("scan_retnet", (Q, K, V, *gammas), shape, attrs)
    if kind is MixerKind.GLA:
        return ng.fused("scan_gla", (Q, K, V, vec_gate("Wa", "ba")), shape, attrs)
    if kind is MixerKind.MAMBA2:
        return ng.fused("scan_mamba2", (Q, K, V, scalar_gate("wg", "bg")), shape, attrs)
    if kind is MixerKind.RWKV6:
        bonus = ng.stack_rows(heads("bonus"))
        return ng.fused("scan_rwkv6", (Q, K, V, vec_gate("Wa", "ba"), bonus), shape, attrs)
    if kind is MixerKind.DELTANET:
        return ng.fused("scan_deltanet", (Q, K, V, scalar_gate("wb", "bb")), shape, attrs)
    if kind is MixerKind.GATED_DELTANET:
        return ng.fused(
            "scan_gated_deltanet",
            (Q, K, V, scalar_gate("wb", "bb"), scalar_gate("wg", "bg")),
            shape,
            attrs,
        )
    raise MixerError(f"unknown kind {kind}")


def scan_heads_nodes(kind, p, x, dims):
    """All heads of one mixer layer; p maps "h{h}.{name}" -> node."""
    dims.check_kind(kind)
    return _scan_fused(kind, p, x, dims.H, dims.d)


def scan_nodes(kind, p, x, dims):
    """Single-head scan: per-head node map p, token node x -> (L, d) node."""
    return _scan_fused(kind, {f"h0.{n}": v for n, v in p.items()}, x, 1, dims.d)


# ---------------------------------------------------------------------------
# fused scan kernels: hand-written forward recurrences and their adjoints.
# The backward sweeps recompute the state trajectory (cheap at these sizes)
# and run the adjoint of the recurrence in reverse; finite-difference tests pin
# every one of them. Matrix-kind arrays carry a head axis: (L, H, d).


def _h3(M, attrs):
    return M.reshape(M.shape[0], attrs["H"], attrs["d"])


def _flat(M3):
    L, H, d = M3.shape
    return M3.reshape(L, H * d)


def _vector_states(keep, write):
    """All h_t for h_t = keep_t * h_{t-1} + write_t; row 0 of result is h_0=0."""
    L, d = keep.shape
    states = np.zeros((L + 1, d))
    for t in range(L):
        states[t + 1] = keep[t] * states[t] + write[t]
    return states


def _fwd_scan_hgrn(vals, attrs):
    Q, V, A = vals
    return _vector_states(A, (1.0 - A) * V)[1:] * Q


def _vjp_scan_hgrn(g, vals, out, attrs):
    Q, V, A = vals
    L, d = Q.shape
    states = _vector_states(A, (1.0 - A) * V)
    dQ = g * states[1:]
    dV, dA = np.empty_like(V), np.empty_like(A)
    dh = np.zeros(d)
    for t in reversed(range(L)):
        dh = dh + g[t] * Q[t]
        dA[t] = dh * (states[t] - V[t])
        dV[t] = dh * (1.0 - A[t])
        dh = dh * A[t]
    return dQ, dV, dA


def _fwd_scan_hawk(vals, attrs):
    Q, V, R, I = vals
    return _vector_states(R, I * V)[1:] * Q


def _vjp_scan_hawk(g, vals, out, attrs):
    Q, V, R, I = vals
    L, d = Q.shape
    states = _vector_states(R, I * V)
    dQ = g * states[1:]
    dV, dR, dI = np.empty_like(V), np.empty_like(R), np.empty_like(I)
    dh = np.zeros(d)
    for t in reversed(range(L)):
        dh = dh + g[t] * Q[t]
        dR[t] = dh * states[t]
        dI[t] = dh * V[t]
        dV[t] = dh * I[t]
        dh = dh * R[t]
    return dQ, dV, dR, dI


def _decay_states(V3, A3, Keff3):
    """All S_t for S_t = S_{t-1} * a_t (columns) + v_t keff_t^T; index 0 is S_0=0."""
    L, H, d = V3.shape
    states = np.zeros((L + 1, H, d, d))
    for t in range(L):
        states[t + 1] = states[t] * A3[t][:, None, :] + V3[t][:, :, None] * Keff3[t][:, None, :]
    return states


def _decay_fwd(Q3, V3, A3, Keff3):
    states = _decay_states(V3, A3, Keff3)
    return np.einsum("thij,thj->thi", states[1:], Q3)


def _decay_vjp(g3, Q3, V3, A3, Keff3):
    """Adjoint of the column-decay recurrence; returns (dQ, dV, dKeff, dA)."""
    L, H, d = Q3.shape
    states = _decay_states(V3, A3, Keff3)
    dQ, dV = np.empty_like(Q3), np.empty_like(V3)
    dKeff, dA = np.empty_like(Keff3), np.empty_like(A3)
    D = np.zeros((H, d, d))
    for t in reversed(range(L)):
        dQ[t] = np.einsum("hij,hi->hj", states[t + 1], g3[t])
        D += g3[t][:, :, None] * Q3[t][:, None, :]
        dA[t] = (D * states[t]).sum(axis=1)
        dV[t] = np.einsum("hij,hj->hi", D, Keff3[t])
        dKeff[t] = np.einsum("hij,hi->hj", D, V3[t])
        D = D * A3[t][:, None, :]
    return dQ, dV, dKeff, dA


def _fwd_scan_retnet(vals, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    gammas = np.array([float(v) for v in vals[3:]])
    A = np.broadcast_to(gammas[None, :, None], Q.shape)
    return _flat(_decay_fwd(Q, V, A, K))


def _vjp_scan_retnet(g, vals, out, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    gammas = np.array([float(v) for v in vals[3:]])
    A = np.broadcast_to(gammas[None, :, None], Q.shape)
    dQ, dV, dK, dA = _decay_vjp(_h3(g, attrs), Q, V, A, K)
    dgammas = tuple(np.asarray(dA[:, h, :].sum()) for h in range(attrs["H"]))
    return (_flat(dQ), _flat(dK), _flat(dV)) + dgammas


def _fwd_scan_gla(vals, attrs):
    Q, K, V, A = (_h3(v, attrs) for v in vals)
    return _flat(_decay_fwd(Q, V, A, K))


def _vjp_scan_gla(g, vals, out, attrs):
    Q, K, V, A = (_h3(v, attrs) for v in vals)
    dQ, dV, dK, dA = _decay_vjp(_h3(g, attrs), Q, V, A, K)
    return _flat(dQ), _flat(dK), _flat(dV), _flat(dA)


def _fwd_scan_mamba2(vals, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    A = np.broadcast_to(vals[3].T[:, :, None], Q.shape)  # (H, L) scalar decays
    return _flat(_decay_fwd(Q, V, A, K))


def _vjp_scan_mamba2(g, vals, out, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    A = np.broadcast_to(vals[3].T[:, :, None], Q.shape)
    dQ, dV, dK, dA = _decay_vjp(_h3(g, attrs), Q, V, A, K)
    return _flat(dQ), _flat(dK), _flat(dV), dA.sum(axis=2).T


def _fwd_scan_hgrn2(vals, attrs):
    Q, V, A = (_h3(v, attrs) for v in vals)
    return _flat(_decay_fwd(Q, V, A, 1.0 - A))


def _vjp_scan_hgrn2(g, vals, out, attrs):
    Q, V, A = (_h3(v, attrs) for v in vals)
    dQ, dV, dKeff, dA = _decay_vjp(_h3(g, attrs), Q, V, A, 1.0 - A)
    return _flat(dQ), _flat(dV), _flat(dA - dKeff)


def _fwd_scan_rwkv6(vals, attrs):
    Q, K, V, A = (_h3(v, attrs) for v in vals[:4])
    bonus = vals[4]  # (H, d)
    L, H, d = Q.shape
    out = np.empty_like(Q)
    S = np.zeros((H, d, d))
    for t in range(L):
        R = S + (bonus * V[t])[:, :, None] * K[t][:, None, :]
        out[t] = np.einsum("hij,hj->hi", R, Q[t])
        S = S * A[t][:, None, :] + V[t][:, :, None] * K[t][:, None, :]
    return _flat(out)


def _vjp_scan_rwkv6(g, vals, out, attrs):
    Q, K, V, A = (_h3(v, attrs) for v in vals[:4])
    bonus = vals[4]
    g3 = _h3(g, attrs)
    L, H, d = Q.shape
    states = _decay_states(V, A, K)  # states[t] = S_{t-1}, the read-out state
    dQ, dK, dV, dA = (np.empty_like(x) for x in (Q, K, V, A))
    db = np.zeros((H, d))
    D = np.zeros((H, d, d))
    for t in reversed(range(L)):
        w = bonus * V[t]
        R = states[t] + w[:, :, None] * K[t][:, None, :]
        dQ[t] = np.einsum("hij,hi->hj", R, g3[t])
        dR = g3[t][:, :, None] * Q[t][:, None, :]  # cotangent of the read-out matrix
        dw = np.einsum("hij,hj->hi", dR, K[t])
        db += dw * V[t]
        dV[t] = dw * bonus
        dK[t] = np.einsum("hij,hi->hj", dR, w)
        dA[t] = (D * states[t]).sum(axis=1)
        dV[t] += np.einsum("hij,hj->hi", D, K[t])
        dK[t] += np.einsum("hij,hi->hj", D, V[t])
        D = D * A[t][:, None, :] + dR
    return _flat(dQ), _flat(dK), _flat(dV), _flat(dA), db


def _delta_fwd_core(Q3, K3, V3, B, G):
    """Delta-rule forward; B and optional G are (H, L) per-head scalars."""
    L, H, d = Q3.shape
    Khat = K3 / np.linalg.norm(K3, axis=2, keepdims=True)
    out = np.empty_like(Q3)
    states = np.zeros((L + 1, H, d, d))
    for t in range(L):
        k = Khat[t]
        b = B[:, t][:, None, None]
        S = states[t]
        u = np.einsum("hij,hj->hi", S, k)
        F = S - b * (u[:, :, None] * k[:, None, :])
        if G is not None:
            F = G[:, t][:, None, None] * F
        S = F + b * (V3[t][:, :, None] * k[:, None, :])
        states[t + 1] = S
        out[t] = np.einsum("hij,hj->hi", S, Q3[t])
    return out, states, Khat


def _fwd_scan_deltanet(vals, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    return _flat(_delta_fwd_core(Q, K, V, vals[3], None)[0])


def _fwd_scan_gated_deltanet(vals, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    return _flat(_delta_fwd_core(Q, K, V, vals[3], vals[4])[0])


def _delta_vjp_core(g3, Q3, K3, V3, B, G):
    L, H, d = Q3.shape
    _, states, Khat = _delta_fwd_core(Q3, K3, V3, B, G)
    dQ, dV, dKhat = np.empty_like(Q3), np.empty_like(V3), np.empty_like(K3)
    dB = np.empty((H, L))
    dG = np.empty((H, L)) if G is not None else None
    D = np.zeros((H, d, d))
    for t in reversed(range(L)):
        k = Khat[t]
        b = B[:, t]
        S_prev = states[t]
        dQ[t] = np.einsum("hij,hi->hj", states[t + 1], g3[t])
        D += g3[t][:, :, None] * Q3[t][:, None, :]
        Dk = np.einsum("hij,hj->hi", D, k)
        dB[:, t] = (V3[t] * Dk).sum(axis=1)
        dV[t] = b[:, None] * Dk
        dk = b[:, None] * np.einsum("hij,hi->hj", D, V3[t])
        u = np.einsum("hij,hj->hi", S_prev, k)
        if G is not None:
            F_pre = S_prev - b[:, None, None] * (u[:, :, None] * k[:, None, :])
            dG[:, t] = (D * F_pre).sum(axis=(1, 2))
            dF = G[:, t][:, None, None] * D
        else:
            dF = D
        dFk = np.einsum("hij,hj->hi", dF, k)
        dB[:, t] -= (u * dFk).sum(axis=1)
        dk -= b[:, None] * (
            np.einsum("hij,hi->hj", S_prev, dFk) + np.einsum("hij,hi->hj", dF, u)
        )
        D = dF - b[:, None, None] * (dFk[:, :, None] * k[:, None, :])
        dKhat[t] = dk
    # through the row-wise L2 normalization k = K / ||K||
    norms = np.linalg.norm(K3, axis=2, keepdims=True)
    dK = (dKhat - (dKhat * Khat).sum(axis=2, keepdims=True) * Khat) / norms
    return dQ, dK, dV, dB, dG


def _vjp_scan_deltanet(g, vals, out, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    dQ, dK, dV, dB, _ = _delta_vjp_core(_h3(g, attrs), Q, K, V, vals[3], None)
    return _flat(dQ), _flat(dK), _flat(dV), dB


def _vjp_scan_gated_deltanet(g, vals, out, attrs):
    Q, K, V = (_h3(v, attrs) for v in vals[:3])
    dQ, dK, dV, dB, dG = _delta_vjp_core(_h3(g, attrs), Q, K, V, vals[3], vals[4])
    return _flat(dQ), _flat(dK), _flat(dV), dB, dG


for _name, _fwd, _vjp in [
    ("scan_hgrn", _fwd_scan_hgrn, _vjp_scan_hgrn),
    ("scan_hawk", _fwd_scan_hawk, _vjp_scan_hawk),
    ("scan_retnet", _fwd_scan_retnet, _vjp_scan_retnet),
    ("scan_gla", _fwd_scan_gla, _vjp_scan_gla),
    ("scan_mamba2", _fwd_scan_mamba2, _vjp_scan_mamba2),
    ("scan_rwkv6", _fwd_scan_rwkv6, _vjp_scan_rwkv6),
    ("scan_hgrn2", _fwd_scan_hgrn2, _vjp_scan_hgrn2),
    ("scan_deltanet", _fwd_scan_deltanet, _vjp_scan_deltanet),
    ("scan_gated_deltanet", _fwd_scan_gated_deltanet, _vjp_scan_gated_deltanet),
]:
    ng.register_op(_name, _fwd, _vjp)


# ---------------------------------------------------------------------------
# numeric API


def _const_map(params):
    return {k: ng.const(v) for k, v in params.items()}


def compute_gates(kind, params, x_t, head=0):
    """Numeric gates for one head at one token; returns a validated GateSet."""
    p = _const_map(head_view(params, head))
    nodes = gate_nodes(kind, p, ng.const(x_t))
    names = list(nodes)
    vals = ng.evaluate_many([nodes[n] for n in names])
    out = GateSet()
    for n, v in zip(names, vals):
        setattr(out, n, float(v) if v.ndim == 0 else v)
    out.validate()
    return out


def step(kind, state, proj, gates):
    """Numeric single recurrence step; returns (MixerState, o)."""
    gates.validate()
    k = np.asarray(proj.k, dtype=np.float64)
    if kind in DELTA_KINDS:
        if abs(np.linalg.norm(k) - 1.0) > 1e-12:
            raise MixerError("delta-family key must be L2-normalized")
    gate_node_map = {
        name: ng.const(getattr(gates, name))
        for name in ("alpha", "beta", "gamma", "gamma_t", "r", "i", "bonus", "alpha_scalar")
        if getattr(gates, name) is not None
    }
    s_node, o_node = step_nodes(
        kind, ng.const(state.value), ng.const(proj.q), ng.const(k), ng.const(proj.v), gate_node_map
    )
    s_val, o_val = ng.evaluate_many([s_node, o_node])
    return MixerState(kind, s_val), o_val


def scan(kind, params, tokens, dims):
    """Sequential scan over all heads; returns (H, L, d) outputs."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != dims.d_model:
        raise MixerError(f"tokens must be (L, d_model), got {tokens.shape}")
    if tokens.shape[0] < 1:
        raise MixerError("L must be >= 1")
    dims.check_kind(kind)
    x = ng.const(tokens)
    p = {f"h{h}.{n}": ng.const(v) for h in range(dims.H) for n, v in head_view(params, h).items()}
    flat = ng.evaluate(scan_heads_nodes(kind, p, x, dims))
    L = tokens.shape[0]
    return np.ascontiguousarray(flat.reshape(L, dims.H, dims.d).transpose(1, 0, 2))


# ---------------------------------------------------------------------------
# numpy-only helpers shared by the oracle and the chunked path


def _np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def head_inputs(kind, params, tokens, dims, head):
    """Plain-numpy projections and gates for one head.

    Returns (Q, K, V, extras) with shapes (L, d); extras carries the
    per-kind gate arrays. Independent of the graph machinery on purpose.
    """
    p = head_view(params, head)
    X = np.asarray(tokens, dtype=np.float64)
    Q, K, V = X @ p["Wq"], X @ p["Wk"], X @ p["Wv"]
    ex = {}
    if kind in (MixerKind.HGRN, MixerKind.GLA, MixerKind.RWKV6, MixerKind.HGRN2):
        ex["alpha"] = _np_sigmoid(X @ p["Wa"] + p["ba"])
    if kind is MixerKind.HAWK:
        ex["r"] = _np_sigmoid(X @ p["Wr"] + p["br"])
        ex["i"] = _np_sigmoid(X @ p["Wi"] + p["bi"])
    if kind is MixerKind.RETNET:
        ex["gamma"] = float(_np_sigmoid(p["gamma_logit"]))
    if kind is MixerKind.MAMBA2:
        ex["gamma_t"] = _np_sigmoid(X @ p["wg"] + p["bg"])
    if kind is MixerKind.RWKV6:
        ex["bonus"] = p["bonus"]
    if kind in DELTA_KINDS:
        ex["beta"] = _np_sigmoid(X @ p["wb"] + p["bb"])
        K = K / np.linalg.norm(K, axis=1, keepdims=True)
        if kind is MixerKind.GATED_DELTANET:
            ex["alpha_scalar"] = _np_sigmoid(X @ p["wg"] + p["bg"])
    return Q, K, V, ex


def _decay_vectors(kind, ex, L, d):
    """Per-token column-decay vectors a_t (L, d) for the decay family."""
    if kind is MixerKind.RETNET:
        return np.full((L, d), ex["gamma"])
    if kind is MixerKind.MAMBA2:
        return np.repeat(ex["gamma_t"][:, None], d, axis=1)
    return ex["alpha"]


def oracle_unrolled(kind, params, tokens, dims):
    """Deliberately naive O(L^2) reference; returns (H, L, d).

    Decay-family outputs are explicit prefix sums with cumulative decay
    products; the delta family re-materializes S_t from scratch for every t.
    """
    dims.check_kind(kind)
    tokens = np.asarray(tokens, dtype=np.float64)
    L, d = tokens.shape[0], dims.d
    outs = np.zeros((dims.H, L, d))
    for h in range(dims.H):
        Q, K, V, ex = head_inputs(kind, params, tokens, dims, h)
        if kind in VECTOR_KINDS:
            if kind is MixerKind.HGRN:
                keep, write = ex["alpha"], (1.0 - ex["alpha"]) * V
            else:
                keep, write = ex["r"], ex["i"] * V
            for t in range(L):
                h_t = np.zeros(d)
                for s in range(t + 1):
                    decay = np.ones(d)
                    for u in range(s + 1, t + 1):
                        decay = decay * keep[u]
                    h_t = h_t + decay * write[s]
                outs[h, t] = h_t * Q[t]
        elif kind in DECAY_KINDS:
            A = _decay_vectors(kind, ex, L, d)
            Keff = (1.0 - ex["alpha"]) if kind is MixerKind.HGRN2 else K
            for t in range(L):
                o_t = np.zeros(d)
                upto = t - 1 if kind is MixerKind.RWKV6 else t
                for s in range(upto + 1):
                    decay = np.ones(d)
                    for u in range(s + 1, upto + 1):
                        decay = decay * A[u]
                    o_t = o_t + (Keff[s] * decay) @ Q[t] * V[s]
                if kind is MixerKind.RWKV6:
                    o_t = o_t + (ex["bonus"] * V[t]) * (K[t] @ Q[t])
                outs[h, t] = o_t
        else:  # delta family: rebuild S_t from t=1 for every read-out
            for t in range(L):
                S = np.zeros((d, d))
                for s in range(t + 1):
                    b = ex["beta"][s]
                    S = S @ (np.eye(d) - b * np.outer(K[s], K[s]))
                    if kind is MixerKind.GATED_DELTANET:
                        S = ex["alpha_scalar"][s] * S
                    S = S + b * np.outer(V[s], K[s])
                outs[h, t] = S @ Q[t]
    return outs


def scan_chunked(kind, params, tokens, dims, chunk):
    """Blocked scan for the decay family; equals `scan` to high precision.

    Intra-chunk terms use the quadratic prefix form; the state entering a
    chunk is carried forward with its cumulative decay.
    """
    if kind not in DECAY_KINDS:
        raise MixerError("scan_chunked supports the decay family only")
    if chunk < 1:
        raise MixerError("chunk must be >= 1")
    dims.check_kind(kind)
    tokens = np.asarray(tokens, dtype=np.float64)
    L, d = tokens.shape[0], dims.d
    outs = np.zeros((dims.H, L, d))
    for h in range(dims.H):
        Q, K, V, ex = head_inputs(kind, params, tokens, dims, h)
        A = _decay_vectors(kind, ex, L, d)
        Keff = (1.0 - ex["alpha"]) if kind is MixerKind.HGRN2 else K
        delayed = kind is MixerKind.RWKV6
        S = np.zeros((d, d))
        for a0 in range(0, L, chunk):
            b0 = min(a0 + chunk, L)
            for t in range(a0, b0):
                upto = t - 1 if delayed else t
                # carried state decayed from chunk start through `upto`
                decay_in = np.ones(d)
                for u in range(a0, upto + 1):
                    decay_in = decay_in * A[u]
                o_t = (S * decay_in[None, :]) @ Q[t]
                # intra-chunk quadratic contribution
                decay = np.ones(d)
                for s in range(upto, a0 - 1, -1):
                    o_t = o_t + (Keff[s] * decay) @ Q[t] * V[s]
                    decay = decay * A[s]
                if delayed:
                    o_t = o_t + (ex["bonus"] * V[t]) * (K[t] @ Q[t])
                outs[h, t] = o_t
            # advance the boundary state to the end of the chunk
            decay = np.ones(d)
            add = np.zeros((d, d))
            for s in range(b0 - 1, a0 - 1, -1):
                add = add + np.outer(V[s], Keff[s] * decay)
                decay = decay * A[s]
            S = S * decay[None, :] + add
    return outs
