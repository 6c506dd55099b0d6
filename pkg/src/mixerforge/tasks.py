"""Synthetic datasets and metrics for desk-scale recall and LM evaluation.

Three task families:

* KV_RECALL: `k1 v1 ... kn vn SEP q1 q2 ...`; at each query position the
  supervised target is the value bound to that key earlier in the sequence.
  Key and value token ranges are disjoint so targets are unambiguous.
* COPY: a random prefix, a separator, then blank slots whose targets echo
  the prefix.
* CHAR_LM: byte-level next-token prediction over windows of a checked-in
  text corpus.

Positions without supervision carry the ignore index -1. Generation is a
pure function of the config (seed included).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import hybrid

IGNORE = -1
PAD, SEP, BLANK = 0, 1, 2
FIRST_CONTENT = 3
CHAR_VOCAB = 256


class TaskError(Exception):
    pass


class TaskKind(Enum):
    KV_RECALL = "kv_recall"
    COPY = "copy"
    CHAR_LM = "char_lm"


@dataclass(frozen=True)
class TaskConfig:
    kind: TaskKind
    vocab: int
    seq_len: int
    n_pairs: int = 0  # KV_RECALL
    n_queries: int = 0  # KV_RECALL
    prefix_len: int = 0  # COPY
    corpus: str | None = None  # CHAR_LM; None uses the bundled corpus
    n_examples: int = 32
    seed: int = 0


@dataclass
class Dataset:
    inputs: list  # list of list[int], each exactly seq_len long
    targets: list  # parallel, IGNORE at unsupervised positions


def key_value_ranges(config):
    """Disjoint (key_lo, key_hi), (val_lo, val_hi) token ranges."""
    span = (config.vocab - FIRST_CONTENT) // 2
    if span < 1:
        raise TaskError("vocab too small for disjoint key/value ranges")
    key_lo = FIRST_CONTENT
    val_lo = FIRST_CONTENT + span
    return (key_lo, key_lo + span), (val_lo, val_lo + span)


def default_corpus_path():
    return str(Path(__file__).parent / "data" / "char_corpus.txt")


def _pad(seq, tgt, n):
    return seq + [PAD] * (n - len(seq)), tgt + [IGNORE] * (n - len(tgt))


def generate(config):
    """Deterministic dataset for the given config."""
    rng = np.random.default_rng(config.seed)
    inputs, targets = [], []
    if config.kind is TaskKind.KV_RECALL:
        (key_lo, key_hi), (val_lo, _) = key_value_ranges(config)
        if config.n_pairs < 1 or config.n_queries < 1:
            raise TaskError("KV_RECALL needs n_pairs and n_queries >= 1")
        if config.n_pairs > key_hi - key_lo:
            raise TaskError("more pairs than distinct keys available")
        if config.n_queries > config.n_pairs:
            raise TaskError("cannot query more keys than were presented")
        if 2 * config.n_pairs + config.n_queries + 1 > config.seq_len:
            raise TaskError("pairs*2 + queries + separator exceed seq_len")
        span = key_hi - key_lo
        for _ in range(config.n_examples):
            keys = rng.permutation(span)[: config.n_pairs] + key_lo
            vals = rng.integers(0, span, size=config.n_pairs) + val_lo
            seq, tgt = [], []
            for k, v in zip(keys, vals):
                seq += [int(k), int(v)]
                tgt += [IGNORE, IGNORE]
            seq.append(SEP)
            tgt.append(IGNORE)
            which = rng.permutation(config.n_pairs)[: config.n_queries]
            for j in which:
                seq.append(int(keys[j]))
                tgt.append(int(vals[j]))
            seq, tgt = _pad(seq, tgt, config.seq_len)
            inputs.append(seq)
            targets.append(tgt)
    elif config.kind is TaskKind.COPY:
        if config.prefix_len < 1:
            raise TaskError("COPY needs prefix_len >= 1")
        if 2 * config.prefix_len + 1 > config.seq_len:
            raise TaskError("prefix does not fit twice in seq_len")
        lo, hi = FIRST_CONTENT, config.vocab
        if hi <= lo:
            raise TaskError("vocab too small for COPY content tokens")
        for _ in range(config.n_examples):
            prefix = [int(t) for t in rng.integers(lo, hi, size=config.prefix_len)]
            seq = prefix + [SEP] + [BLANK] * config.prefix_len
            tgt = [IGNORE] * (config.prefix_len + 1) + prefix
            seq, tgt = _pad(seq, tgt, config.seq_len)
            inputs.append(seq)
            targets.append(tgt)
    elif config.kind is TaskKind.CHAR_LM:
        if config.vocab < CHAR_VOCAB:
            raise TaskError(f"CHAR_LM needs vocab >= {CHAR_VOCAB}")
        path = config.corpus or default_corpus_path()
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        if data.size < config.seq_len + 1:
            raise TaskError("corpus shorter than one window")
        for _ in range(config.n_examples):
            s = int(rng.integers(0, data.size - config.seq_len - 1))
            window = data[s : s + config.seq_len].astype(int)
            inputs.append([int(t) for t in window])
            targets.append([int(t) for t in window[1:]] + [IGNORE])
    else:
        raise TaskError(f"unknown task kind {config.kind}")
    return Dataset(inputs, targets)


def rederive_targets(config, seq):
    """Independent re-derivation of the supervised targets from one input.

    Walks the raw token sequence with the task's rule; used to cross-check
    `generate` without sharing its code path.
    """
    n = len(seq)
    tgt = [IGNORE] * n
    if config.kind is TaskKind.KV_RECALL:
        (key_lo, key_hi), _ = key_value_ranges(config)
        binding = {}
        seen_sep = False
        i = 0
        while i < n:
            tok = seq[i]
            if tok == SEP:
                seen_sep = True
                i += 1
                continue
            if tok == PAD:
                break
            if not seen_sep:
                binding[tok] = seq[i + 1]
                i += 2
            else:
                tgt[i] = binding[tok]
                i += 1
    elif config.kind is TaskKind.COPY:
        try:
            sep = seq.index(SEP)
        except ValueError:
            return tgt
        for j in range(sep):
            pos = sep + 1 + j
            if pos < n and seq[pos] == BLANK:
                tgt[pos] = seq[j]
    else:  # CHAR_LM: plain next-token
        for i in range(n - 1):
            tgt[i] = seq[i + 1]
    return tgt


# ---------------------------------------------------------------------------
# metrics


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def evaluate(model, dataset, metric):
    """accuracy or token_loss of a hybrid model over the supervised positions."""
    if metric not in ("accuracy", "token_loss"):
        raise TaskError(f"unknown metric {metric!r}")
    hits = total = 0
    loss_sum = 0.0
    for seq, tgt in zip(dataset.inputs, dataset.targets):
        logits = hybrid.forward(model, seq)
        tgt = np.asarray(tgt)
        sup = np.nonzero(tgt != IGNORE)[0]
        if sup.size == 0:
            continue
        total += sup.size
        if metric == "accuracy":
            hits += int((logits[sup].argmax(axis=1) == tgt[sup]).sum())
        else:
            lp = _log_softmax(logits[sup])
            loss_sum -= float(lp[np.arange(sup.size), tgt[sup]].sum())
    if total == 0:
        raise TaskError("dataset has no supervised positions")
    return hits / total if metric == "accuracy" else loss_sum / total


# ---------------------------------------------------------------------------
# line-based serialization: input line, then target line, per example


def save_dataset(path, dataset):
    with open(path, "w") as fh:
        for seq, tgt in zip(dataset.inputs, dataset.targets):
            fh.write(" ".join(str(t) for t in seq) + "\n")
            fh.write(" ".join(str(t) for t in tgt) + "\n")


def load_dataset(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) % 2:
        raise TaskError("dataset file must alternate input/target lines")
    inputs = [[int(t) for t in lines[i].split()] for i in range(0, len(lines), 2)]
    targets = [[int(t) for t in lines[i].split()] for i in range(1, len(lines), 2)]
    return Dataset(inputs, targets)
