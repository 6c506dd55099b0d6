"""Tests for the AdamW optimizer, LR schedule, and training loop."""

from dataclasses import replace

import numpy as np
import pytest

from mixerforge import hybrid, tasks, trainer
from mixerforge.mixers import Dimensions, MixerKind
from mixerforge.trainer import (
    AdamMoments,
    OptimizerHyperparams,
    TrainerError,
    adamw_step,
    clip_global_norm,
    cosine_lr,
    train,
)


def tiny_setup(**task_kw):
    config = hybrid.HybridConfig(
        kind=MixerKind.HGRN2, dims=Dimensions(16, 2, 4, 8), vocab=16, ratio=1, N=1
    )
    base = dict(
        kind=tasks.TaskKind.KV_RECALL, vocab=16, seq_len=16, n_pairs=3, n_queries=2, n_examples=8
    )
    base.update(task_kw)
    return config, tasks.TaskConfig(**base)


# ---------------------------------------------------------------------------
# schedule


def test_cosine_lr_endpoints_and_midpoint():
    hp = OptimizerHyperparams(total_steps=1000, base_lr=1e-2, min_lr=1e-3, warmup_steps=100)
    assert cosine_lr(0, hp) == 0.0
    assert cosine_lr(100, hp) == pytest.approx(hp.base_lr, rel=1e-15)
    assert abs(cosine_lr(550, hp) - (hp.base_lr + hp.min_lr) / 2) <= 1e-15
    assert abs(cosine_lr(1000, hp) - hp.min_lr) <= 1e-15


def test_cosine_lr_warmup_is_linear():
    hp = OptimizerHyperparams(total_steps=100, base_lr=4e-3, warmup_steps=4)
    assert [cosine_lr(s, hp) for s in range(5)] == [0.0, 1e-3, 2e-3, 3e-3, 4e-3]


def test_cosine_lr_rejects_out_of_range_step():
    hp = OptimizerHyperparams(total_steps=10)
    with pytest.raises(TrainerError):
        cosine_lr(11, hp)
    with pytest.raises(TrainerError):
        cosine_lr(-1, hp)


def test_hyperparams_validation():
    with pytest.raises(TrainerError):
        OptimizerHyperparams(total_steps=10, beta1=1.0)
    with pytest.raises(TrainerError):
        OptimizerHyperparams(total_steps=10, eps=0.0)
    with pytest.raises(TrainerError):
        OptimizerHyperparams(total_steps=10, base_lr=1e-3, min_lr=1e-2)


# ---------------------------------------------------------------------------
# adamw


def test_adamw_first_step_hand_case():
    hp = OptimizerHyperparams(total_steps=10, base_lr=0.1)
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([1.0])}
    new_p, moments = adamw_step(params, grads, AdamMoments(), 1, hp)
    # bias-corrected m and v are both exactly g on step one, so the update is
    # g / (|g| + eps) ~= sign(g); with weight decay: 1*(1 - 0.1*0.01) - 0.1
    expected = 1.0 * (1.0 - 0.1 * hp.weight_decay) - 0.1 * (1.0 / (1.0 + hp.eps))
    np.testing.assert_allclose(new_p["w"], [expected], rtol=1e-15)
    assert abs(new_p["w"][0] - 0.9) < 1e-3
    np.testing.assert_allclose(moments.m["w"], [1.0 - hp.beta1])
    np.testing.assert_allclose(moments.v["w"], [1.0 - hp.beta2])


def test_adamw_zero_gradient_is_pure_decay():
    hp = OptimizerHyperparams(total_steps=10, base_lr=0.1, weight_decay=0.5)
    params = {"w": np.array([2.0])}
    new_p, _ = adamw_step(params, {"w": np.array([0.0])}, AdamMoments(), 1, hp)
    np.testing.assert_allclose(new_p["w"], [2.0 * (1.0 - 0.1 * 0.5)], rtol=1e-15)


def test_adamw_zero_lr_is_noop():
    hp = OptimizerHyperparams(total_steps=10, base_lr=0.1)
    params = {"w": np.array([3.0, -1.0])}
    new_p, _ = adamw_step(params, {"w": np.array([5.0, 2.0])}, AdamMoments(), 1, hp, lr=0.0)
    np.testing.assert_array_equal(new_p["w"], params["w"])


def test_adamw_rejects_nonfinite_gradient_and_bad_step():
    hp = OptimizerHyperparams(total_steps=10)
    with pytest.raises(TrainerError):
        adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, AdamMoments(), 1, hp)
    with pytest.raises(TrainerError):
        adamw_step({"w": np.ones(2)}, {"w": np.ones(2)}, AdamMoments(), 0, hp)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}  # norm 5
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    same, _ = clip_global_norm(grads, 10.0)
    assert same is grads


# ---------------------------------------------------------------------------
# training loop


def test_single_batch_overfit_reaches_full_accuracy():
    config, task = tiny_setup()
    hp = OptimizerHyperparams(total_steps=400, base_lr=1e-2, min_lr=1e-3)
    model, _, report = train(config, task, hp, seed=0, batch_size=1, fixed_batch=[0])
    assert not report.diverged
    train_set = tasks.generate(replace(task, seed=0))
    one = tasks.Dataset([train_set.inputs[0]], [train_set.targets[0]])
    assert tasks.evaluate(model, one, "accuracy") == 1.0
    assert report.losses[-1] < 0.05


def test_training_is_deterministic():
    config, task = tiny_setup()
    hp = OptimizerHyperparams(total_steps=20, base_lr=3e-3)
    runs = [train(config, task, hp, seed=3, batch_size=2) for _ in range(2)]
    (m1, _, r1), (m2, _, r2) = runs
    assert r1.losses == r2.losses
    assert r1.final_metrics == r2.final_metrics
    assert all(m1.params[n].tobytes() == m2.params[n].tobytes() for n in m1.params)


def test_loss_trends_down_over_fifty_steps():
    config, task = tiny_setup(n_examples=32)
    hp = OptimizerHyperparams(total_steps=50, base_lr=5e-3)
    _, _, report = train(config, task, hp, seed=1, batch_size=4)
    assert not report.diverged and len(report.losses) == 50
    assert np.mean(report.losses[-10:]) < np.mean(report.losses[:10])


def test_report_serializes():
    config, task = tiny_setup()
    hp = OptimizerHyperparams(total_steps=3)
    _, _, report = train(config, task, hp, seed=0, batch_size=2)
    d = report.to_dict()
    assert d["seed"] == 0 and len(d["losses"]) == 3


# ---------------------------------------------------------------------------
# checkpointing


def test_training_state_round_trip(tmp_path):
    config, task = tiny_setup()
    hp = OptimizerHyperparams(total_steps=5, base_lr=3e-3)
    model, moments, _ = train(config, task, hp, seed=2, batch_size=2)
    path = tmp_path / "state.bin"
    trainer.save_training_state(path, model, moments)
    loaded_model, loaded_moments = trainer.load_training_state(path)
    assert loaded_model.config == model.config
    for name in model.params:
        assert loaded_model.params[name].tobytes() == model.params[name].tobytes()
        assert loaded_moments.m[name].tobytes() == np.asarray(moments.m[name]).tobytes()
        assert loaded_moments.v[name].tobytes() == np.asarray(moments.v[name]).tobytes()


def test_load_training_state_rejects_plain_model(tmp_path):
    config, _ = tiny_setup()
    model = hybrid.init_model(config, seed=0)
    path = tmp_path / "model.bin"
    hybrid.save_model(path, model)
    with pytest.raises(TrainerError):
        trainer.load_training_state(path)
