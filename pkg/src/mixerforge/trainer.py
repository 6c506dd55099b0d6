"""AdamW with cosine learning-rate decay and a deterministic toy training loop.

Single-threaded and bit-reproducible given the seed: batches, parameter
initialization, and data generation all derive from it. Gradients are
clipped at global norm 1.0; a non-finite loss aborts the run with the last
good parameters kept.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import hybrid, numerics as ng, tasks


class TrainerError(Exception):
    pass


@dataclass(frozen=True)
class OptimizerHyperparams:
    total_steps: int
    base_lr: float = 3e-3
    min_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int | None = None  # defaults to 5% of total_steps
    clip_norm: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise TrainerError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise TrainerError("eps must be positive")
        if self.min_lr > self.base_lr:
            raise TrainerError("min_lr must not exceed base_lr")

    @property
    def warmup(self):
        return self.warmup_steps if self.warmup_steps is not None else max(1, self.total_steps // 20)


def cosine_lr(step, hp):
    """Linear warmup to base_lr, then cosine decay to min_lr at total_steps."""
    if not 0 <= step <= hp.total_steps:
        raise TrainerError(f"step {step} outside [0, {hp.total_steps}]")
    if step < hp.warmup:
        return hp.base_lr * step / hp.warmup
    span = max(1, hp.total_steps - hp.warmup)
    progress = (step - hp.warmup) / span
    return hp.min_lr + 0.5 * (hp.base_lr - hp.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, moments, step, hp, lr=None):
    """One decoupled-weight-decay Adam update; returns new (params, moments)."""
    if step < 1:
        raise TrainerError("step must be >= 1")
    lr = hp.base_lr if lr is None else lr
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - hp.beta1**step
    bc2 = 1.0 - hp.beta2**step
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainerError(f"non-finite gradient for {name!r}")
        m = hp.beta1 * moments.m.get(name, 0.0) + (1.0 - hp.beta1) * g
        v = hp.beta2 * moments.v.get(name, 0.0) + (1.0 - hp.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
        new_p[name] = w * (1.0 - lr * hp.weight_decay) - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamMoments(new_m, new_v)


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}, total


@dataclass
class TrainReport:
    seed: int
    losses: list
    final_metrics: dict
    wall_time: float
    diverged: bool = False

    def to_dict(self):
        return {
            "seed": self.seed,
            "losses": [float(x) for x in self.losses],
            "final_metrics": self.final_metrics,
            "wall_time": self.wall_time,
            "diverged": self.diverged,
        }


def batch_loss_nodes(config, leaves, batch):
    """Mean cross-entropy node over all supervised positions of a batch."""
    terms = []
    count = 0
    for seq, tgt in batch:
        tgt = np.asarray(tgt)
        sup = np.nonzero(tgt != tasks.IGNORE)[0]
        if sup.size == 0:
            continue
        logits = hybrid.build_forward(config, seq, leaves)
        lp = ng.log_row_softmax(logits)
        terms.append(ng.sum_all(ng.take_at(lp, sup, tgt[sup])))
        count += sup.size
    if not terms:
        raise TrainerError("batch has no supervised positions")
    total = terms[0]
    for t in terms[1:]:
        total = ng.add(total, t)
    return ng.scale(total, -1.0 / count)


def train(config, task, hp, seed=0, batch_size=4, eval_examples=None, fixed_batch=None):
    """Deterministic training loop; returns a TrainReport.

    `fixed_batch` pins every step to the same examples (overfit checks).
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = hybrid.init_model(config, seed)
    train_set = tasks.generate(replace(task, seed=seed))
    eval_set = tasks.generate(
        replace(task, seed=seed + 10_000, n_examples=eval_examples or task.n_examples)
    )
    moments = AdamMoments()
    losses = []
    diverged = False
    n = len(train_set.inputs)
    leaves, _ = hybrid.make_leaves(model)
    for step in range(1, hp.total_steps + 1):
        if fixed_batch is not None:
            idx = list(fixed_batch)
        else:
            idx = [int(i) for i in rng.integers(0, n, size=min(batch_size, n))]
        batch = [(train_set.inputs[i], train_set.targets[i]) for i in idx]
        bindings = {leaves[name]: model.params[name] for name in model.params}
        try:
            loss_node = batch_loss_nodes(config, leaves, batch)
            grads_by_leaf, loss_val = ng.gradient(
                loss_node, bindings, list(leaves.values()), return_value=True
            )
            loss = float(loss_val)
        except ng.NonFiniteError:
            diverged = True
            break
        if not math.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        grads = {name: grads_by_leaf[leaves[name]] for name in leaves}
        grads, _ = clip_global_norm(grads, hp.clip_norm)
        model.params, moments = adamw_step(
            model.params, grads, moments, step, hp, lr=cosine_lr(step, hp)
        )
    metrics = {
        "accuracy": tasks.evaluate(model, eval_set, "accuracy"),
        "token_loss": tasks.evaluate(model, eval_set, "token_loss"),
    }
    report = TrainReport(
        seed=seed,
        losses=losses,
        final_metrics=metrics,
        wall_time=time.perf_counter() - t0,
        diverged=diverged,
    )
    return model, moments, report


def save_training_state(path, model, moments):
    tensors = dict(model.params)
    tensors.update({f"adam.m.{k}": v for k, v in moments.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in moments.v.items()})
    hybrid.write_checkpoint(
        path, {"type": "training_state", "config": hybrid.config_to_dict(model.config)}, tensors
    )


def load_training_state(path):
    header, tensors = hybrid.read_checkpoint(path)
    if header.get("type") != "training_state":
        raise TrainerError("checkpoint does not contain training state")
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v.") :]] = arr
        else:
            params[name] = arr
    model = hybrid.Model(hybrid.config_from_dict(header["config"]), params)
    return model, AdamMoments(m, v)
