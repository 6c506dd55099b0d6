"""Hybrid linear/full-attention stack.

Embedding + learned absolute positions, then N repetitions of (r linear
mixer layers followed by one full-attention layer), each sub-layer wrapped
in pre-RMS-norm with a residual connection and followed by a gated MLP
channel mixer, and finally a normalized projection head.

`PURE_LINEAR` and `FULL_TRANSFORMER` sentinels build all-linear /
all-attention stacks at the same total depth as the r_ref:1 hybrid they
are compared against. Only full-attention layers grow the KV cache;
`cache_report` does the accounting.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import mixers, numerics as ng
from .attention import causal_attention_nodes
from .mixers import Dimensions, MixerKind

PURE_LINEAR = "pure_linear"
FULL_TRANSFORMER = "full_transformer"

LINEAR = "linear"
FULL = "full"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class HybridConfig:
    kind: MixerKind
    dims: Dimensions  # dims.L is the maximum (position-table) length
    vocab: int
    ratio: int | str = 3  # r in r:1, or PURE_LINEAR / FULL_TRANSFORMER
    N: int = 1
    mlp_mult: int = 4
    r_ref: int = 3  # depth-matching ratio for the sentinel stacks

    def __post_init__(self):
        if isinstance(self.ratio, int):
            if self.ratio < 1:
                raise ConfigError("ratio r must be >= 1")
        elif self.ratio not in (PURE_LINEAR, FULL_TRANSFORMER):
            raise ConfigError(f"unknown ratio {self.ratio!r}")
        if self.N < 0:
            raise ConfigError("N must be >= 0")
        if self.vocab < 1:
            raise ConfigError("vocab must be positive")


def build_schedule(config):
    """Ordered layer kinds: (LINEAR * r, FULL) * N, or the sentinel stacks."""
    if config.ratio == PURE_LINEAR:
        return [LINEAR] * (config.N * (config.r_ref + 1))
    if config.ratio == FULL_TRANSFORMER:
        return [FULL] * (config.N * (config.r_ref + 1))
    return ([LINEAR] * config.ratio + [FULL]) * config.N


@dataclass
class Model:
    config: HybridConfig
    params: dict


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config, seed=0):
    rng = np.random.default_rng(seed)
    d_model, d, H = config.dims.d_model, config.dims.d, config.dims.H
    m = config.mlp_mult * d_model
    params = {
        "emb.tok": _uniform(rng, (config.vocab, d_model), d_model),
        "emb.pos": _uniform(rng, (config.dims.L, d_model), d_model),
    }
    for i, layer_kind in enumerate(build_schedule(config)):
        pre = f"L{i}."
        params[pre + "n1.g"] = np.ones(d_model)
        if layer_kind == LINEAR:
            for name, val in mixers.init_params(config.kind, config.dims, rng).items():
                params[pre + "mix." + name] = val
            params[pre + "mix.Wo"] = _uniform(rng, (d_model, d_model), d_model)
        else:
            for h in range(H):
                for w in ("Wq", "Wk", "Wv"):
                    params[f"{pre}att.h{h}.{w}"] = _uniform(rng, (d_model, d), d_model)
            params[pre + "att.Wo"] = _uniform(rng, (d_model, d_model), d_model)
        params[pre + "n2.g"] = np.ones(d_model)
        params[pre + "mlp.W1"] = _uniform(rng, (d_model, m), d_model)
        params[pre + "mlp.b1"] = np.zeros(m)
        params[pre + "mlp.Wg"] = _uniform(rng, (d_model, m), d_model)
        params[pre + "mlp.bg"] = np.zeros(m)
        params[pre + "mlp.W2"] = _uniform(rng, (m, d_model), m)
        params[pre + "mlp.b2"] = np.zeros(d_model)
    params["head.n.g"] = np.ones(d_model)
    params["head.W"] = _uniform(rng, (d_model, config.vocab), d_model)
    return Model(config, params)


def _sub(p, prefix):
    return {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}


def build_forward(config, token_ids, p):
    """Logits graph for one sequence; `p` maps param name -> Node."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    L = token_ids.shape[0]
    if L < 1:
        raise ConfigError("empty token sequence")
    if L > config.dims.L:
        raise ConfigError(f"sequence length {L} exceeds position table {config.dims.L}")
    if token_ids.min() < 0 or token_ids.max() >= config.vocab:
        raise ConfigError("token id out of vocabulary")
    dims = config.dims
    run_dims = Dimensions(L, dims.H, dims.d, dims.d_model)
    x = ng.add(ng.take_rows(p["emb.tok"], token_ids), ng.take_rows(p["emb.pos"], np.arange(L)))
    for i, layer_kind in enumerate(build_schedule(config)):
        pre = f"L{i}."
        xn = ng.rms_norm(x, p[pre + "n1.g"])
        if layer_kind == LINEAR:
            mixed = mixers.scan_heads_nodes(config.kind, _sub(p, f"{pre}mix."), xn, run_dims)
        else:
            heads = []
            for h in range(dims.H):
                hp = _sub(p, f"{pre}att.h{h}.")
                heads.append(
                    causal_attention_nodes(
                        ng.matmul(xn, hp["Wq"]), ng.matmul(xn, hp["Wk"]), ng.matmul(xn, hp["Wv"])
                    )
                )
            mixed = heads[0] if len(heads) == 1 else ng.concat_cols(heads)
        wo = p[pre + ("mix.Wo" if layer_kind == LINEAR else "att.Wo")]
        x = ng.add(x, ng.matmul(mixed, wo))
        xn = ng.rms_norm(x, p[pre + "n2.g"])
        mp = _sub(p, pre + "mlp.")
        u = ng.add_rowvec(ng.matmul(xn, mp["W1"]), mp["b1"])
        gate = ng.sigmoid(ng.add_rowvec(ng.matmul(xn, mp["Wg"]), mp["bg"]))
        x = ng.add(x, ng.add_rowvec(ng.matmul(ng.mul(u, gate), mp["W2"]), mp["b2"]))
    return ng.matmul(ng.rms_norm(x, p["head.n.g"]), p["head.W"])


def make_leaves(model):
    """Leaf nodes and their bindings for every parameter (for training)."""
    leaves = {name: ng.leaf(name, v.shape) for name, v in model.params.items()}
    bindings = {leaves[name]: model.params[name] for name in model.params}
    return leaves, bindings


def forward(model, token_ids):
    """Numeric forward pass; returns logits (L, vocab)."""
    p = {name: ng.const(v) for name, v in model.params.items()}
    return ng.evaluate(build_forward(model.config, token_ids, p))


# ---------------------------------------------------------------------------
# cache accounting


@dataclass(frozen=True)
class CacheReport:
    kv_cache_bytes: int  # grows with L; full-attention layers only
    linear_state_bytes: int  # constant recurrent state of the linear layers
    full_layers: int
    linear_layers: int

    @property
    def total_bytes(self):
        return self.kv_cache_bytes + self.linear_state_bytes


def cache_report(config, L, elem_size=2):
    """Decode-time memory at sequence length L (default 16-bit elements)."""
    schedule = build_schedule(config)
    n_full = schedule.count(FULL)
    n_linear = len(schedule) - n_full
    dims = config.dims
    state_elems = dims.d_model if config.kind in mixers.VECTOR_KINDS else dims.H * dims.d * dims.d
    return CacheReport(
        kv_cache_bytes=n_full * 2 * L * dims.d_model * elem_size,
        linear_state_bytes=n_linear * state_elems * elem_size,
        full_layers=n_full,
        linear_layers=n_linear,
    )


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON header + named raw little-endian payloads

_MAGIC = b"MIXERFORGE1\n"


def config_to_dict(config):
    return {
        "kind": config.kind.value,
        "dims": [config.dims.L, config.dims.H, config.dims.d, config.dims.d_model],
        "vocab": config.vocab,
        "ratio": config.ratio,
        "N": config.N,
        "mlp_mult": config.mlp_mult,
        "r_ref": config.r_ref,
    }


def config_from_dict(d):
    return HybridConfig(
        kind=MixerKind(d["kind"]),
        dims=Dimensions(*d["dims"]),
        vocab=d["vocab"],
        ratio=d["ratio"],
        N=d["N"],
        mlp_mult=d["mlp_mult"],
        r_ref=d["r_ref"],
    )


def write_checkpoint(path, header, tensors):
    buf = io.BytesIO()
    buf.write(_MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ConfigError("not a mixerforge checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += size * 8
        tensors[name] = arr
    return header, tensors


def save_model(path, model):
    write_checkpoint(path, {"type": "model", "config": config_to_dict(model.config)}, model.params)


def load_model(path):
    header, tensors = read_checkpoint(path)
    if header.get("type") != "model":
        raise ConfigError("checkpoint does not contain a model")
    return Model(config_from_dict(header["config"]), tensors)
