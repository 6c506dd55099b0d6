"""Tests for synthetic dataset generation, metrics, and serialization."""

import numpy as np
import pytest

from mixerforge import hybrid, tasks
from mixerforge.mixers import Dimensions, MixerKind
from mixerforge.tasks import (
    BLANK,
    IGNORE,
    PAD,
    SEP,
    TaskConfig,
    TaskError,
    TaskKind,
    generate,
    rederive_targets,
)


def kv_cfg(**kw):
    base = dict(
        kind=TaskKind.KV_RECALL, vocab=32, seq_len=24, n_pairs=5, n_queries=3, n_examples=16
    )
    base.update(kw)
    return TaskConfig(**base)


def copy_cfg(**kw):
    base = dict(kind=TaskKind.COPY, vocab=32, seq_len=16, prefix_len=5, n_examples=16)
    base.update(kw)
    return TaskConfig(**base)


# ---------------------------------------------------------------------------
# KV_RECALL


def test_kv_recall_targets_match_independent_rederivation():
    ds = generate(kv_cfg(n_examples=50))
    for seq, tgt in zip(ds.inputs, ds.targets):
        assert rederive_targets(kv_cfg(), seq) == tgt


def test_kv_recall_structure():
    config = kv_cfg()
    (key_lo, key_hi), (val_lo, val_hi) = tasks.key_value_ranges(config)
    ds = generate(config)
    for seq, tgt in zip(ds.inputs, ds.targets):
        assert len(seq) == len(tgt) == config.seq_len
        sep = seq.index(SEP)
        assert sep == 2 * config.n_pairs
        pairs = {seq[i]: seq[i + 1] for i in range(0, sep, 2)}
        assert len(pairs) == config.n_pairs  # keys are distinct
        assert all(key_lo <= k < key_hi for k in pairs)
        assert all(val_lo <= v < val_hi for v in pairs.values())
        queries = seq[sep + 1 : sep + 1 + config.n_queries]
        for q, t in zip(queries, tgt[sep + 1 :]):
            assert t == pairs[q]
        # supervision only at query positions; padding afterwards
        assert all(t == IGNORE for t in tgt[: sep + 1])
        assert all(s == PAD for s in seq[sep + 1 + config.n_queries :])


def test_kv_recall_deterministic():
    a, b = generate(kv_cfg(seed=7)), generate(kv_cfg(seed=7))
    assert a.inputs == b.inputs and a.targets == b.targets
    assert generate(kv_cfg(seed=8)).inputs != a.inputs


@pytest.mark.parametrize(
    "kw",
    [
        dict(vocab=4),  # no room for disjoint key/value ranges
        dict(n_pairs=0),
        dict(n_pairs=20),  # more pairs than distinct keys
        dict(n_queries=9),  # more queries than pairs
        dict(seq_len=10),  # pairs + queries + separator do not fit
    ],
)
def test_kv_recall_rejects_bad_configs(kw):
    with pytest.raises(TaskError):
        generate(kv_cfg(**kw))


# ---------------------------------------------------------------------------
# COPY


def test_copy_echoes_prefix():
    config = copy_cfg()
    ds = generate(config)
    for seq, tgt in zip(ds.inputs, ds.targets):
        sep = seq.index(SEP)
        assert sep == config.prefix_len
        prefix = seq[:sep]
        assert all(tasks.FIRST_CONTENT <= t < config.vocab for t in prefix)
        assert seq[sep + 1 : sep + 1 + sep] == [BLANK] * sep
        assert tgt[sep + 1 : sep + 1 + sep] == prefix
        assert all(t == IGNORE for t in tgt[: sep + 1])
        assert rederive_targets(config, seq) == tgt


def test_copy_rejects_bad_configs():
    with pytest.raises(TaskError):
        generate(copy_cfg(prefix_len=0))
    with pytest.raises(TaskError):
        generate(copy_cfg(prefix_len=8))  # prefix does not fit twice


# ---------------------------------------------------------------------------
# CHAR_LM


def test_char_lm_targets_are_next_tokens(tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_bytes(bytes(range(65, 91)) * 8)
    config = TaskConfig(
        kind=TaskKind.CHAR_LM, vocab=256, seq_len=12, corpus=str(corpus), n_examples=10
    )
    ds = generate(config)
    for seq, tgt in zip(ds.inputs, ds.targets):
        assert tgt[:-1] == seq[1:]
        assert tgt[-1] == IGNORE
        assert rederive_targets(config, seq) == tgt


def test_char_lm_bundled_corpus_loads():
    config = TaskConfig(kind=TaskKind.CHAR_LM, vocab=256, seq_len=32, n_examples=4)
    ds = generate(config)
    assert len(ds.inputs) == 4
    assert all(0 <= t < 256 for seq in ds.inputs for t in seq)


def test_char_lm_rejects_small_vocab_and_short_corpus(tmp_path):
    with pytest.raises(TaskError):
        generate(TaskConfig(kind=TaskKind.CHAR_LM, vocab=64, seq_len=8))
    tiny = tmp_path / "tiny.txt"
    tiny.write_bytes(b"abc")
    with pytest.raises(TaskError):
        generate(TaskConfig(kind=TaskKind.CHAR_LM, vocab=256, seq_len=8, corpus=str(tiny)))


# ---------------------------------------------------------------------------
# metrics


def zero_head_model(vocab=32):
    # depth-0 model whose output weights are zero: logits are uniform
    config = hybrid.HybridConfig(
        kind=MixerKind.HGRN2, dims=Dimensions(32, 2, 4, 8), vocab=vocab, ratio=3, N=0
    )
    model = hybrid.init_model(config, seed=0)
    model.params["head.W"] = np.zeros_like(model.params["head.W"])
    return model


def test_uniform_logits_loss_is_log_vocab():
    config = kv_cfg()
    ds = generate(config)
    loss = tasks.evaluate(zero_head_model(config.vocab), ds, "token_loss")
    assert abs(loss - np.log(config.vocab)) <= 1e-12


def test_random_model_accuracy_near_chance():
    # an untrained model guesses blindly among the value tokens
    config = kv_cfg(vocab=32, n_examples=64)
    _, (val_lo, val_hi) = tasks.key_value_ranges(config)
    ds = generate(config)
    model = hybrid.init_model(
        hybrid.HybridConfig(
            kind=MixerKind.HGRN2, dims=Dimensions(32, 2, 4, 8), vocab=32, ratio=3, N=1
        ),
        seed=0,
    )
    acc = tasks.evaluate(model, ds, "accuracy")
    assert acc <= 3.0 / (val_hi - val_lo)


def test_evaluate_rejects_unknown_metric():
    ds = generate(kv_cfg())
    with pytest.raises(TaskError):
        tasks.evaluate(zero_head_model(), ds, "f1")


# ---------------------------------------------------------------------------
# serialization


def test_dataset_round_trip(tmp_path):
    ds = generate(kv_cfg())
    path = tmp_path / "ds.txt"
    tasks.save_dataset(path, ds)
    loaded = tasks.load_dataset(path)
    assert loaded.inputs == ds.inputs and loaded.targets == ds.targets


def test_load_rejects_odd_line_count(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(TaskError):
        tasks.load_dataset(path)
