"""Deterministic mini-batch SGD training loop.

Classical heavy-ball momentum with weight decay folded into the gradient,
an exponential step schedule, and EMA center tracking after every step.
All randomness (batch order, score dropout, activation dropout) is derived
from (seed, epoch) and (seed, step), so a resumed run reproduces the
straight run bit for bit and never depends on call history.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .fusion import model_forward


class TrainAbort(Exception):
    """Raised when a step cannot proceed; the last checkpoint stays valid."""


@dataclass
class Schedule:
    lr0: float = 0.1
    decay: float = 0.1
    s0: int = 100_000
    s1: int = 50_000
    lr_min: float = 1e-6


def lr_at(schedule, step):
    """Piecewise-constant decay: lr0 until s0, then a decade per s1 steps."""
    if step < schedule.s0:
        return schedule.lr0
    k = 1 + (step - schedule.s0) // schedule.s1
    return max(schedule.lr_min, schedule.lr0 * schedule.decay ** k)


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step: int = 0
    velocities: dict = field(default_factory=dict)

    def velocity(self, name, like):
        if name not in self.velocities:
            self.velocities[name] = np.zeros_like(like)
        return self.velocities[name]


def sgd_step(params, state, lr, renorm_rows=()):
    """One momentum update over a name -> tensor dict.

    g' = g + wd*w; v <- momentum*v + g'; w <- w - lr*v. Parameters without
    a gradient this step keep a zero gradient (their velocity still decays
    into motion only if previously nonzero). Tensors listed in renorm_rows
    get their rows rescaled to unit norm afterwards.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise TrainAbort(f"non-finite gradient in {name}")
        g = g + state.weight_decay * p.value
        v = state.velocity(name, p.value)
        v *= state.momentum
        v += g
        p.value -= lr * v
    for t in renorm_rows:
        t.value /= np.linalg.norm(t.value, axis=1, keepdims=True)
    state.step += 1


@dataclass
class TrainLog:
    columns: list
    rows: list = field(default_factory=list)

    def to_csv(self):
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row))
        return "\n".join(lines) + "\n"


LOSS_COLUMNS = ["total", "angular", "uniform", "center_align", "repr",
                "unimodal", "compact_hidden", "compact_out"]


def _batch_plan(n_sets, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101, epoch]))
    order = rng.permutation(n_sets)
    return [order[i:i + batch_size] for i in range(0, n_sets, batch_size)]


def _collect_center_batch(outputs, n_modalities):
    per_space = {"z": {}}
    for k in range(n_modalities):
        per_space[f"y{k}"] = {}
    for fo in outputs:
        per_space["z"].setdefault(fo.label, []).append(fo.z.value.copy())
        for k in range(n_modalities):
            per_space[f"y{k}"].setdefault(fo.label, []).append(
                fo.y[k].value.copy())
    return per_space


def train(model, dataset, hp, dropout, schedule, epochs, batch_size, seed,
          opt_state=None, checkpoint_every=0, checkpoint_hook=None):
    """Run the full loop; deterministic given (model seed, data, seed).

    Batches group whole sample sets; the final partial batch is used.
    Resuming with a restored opt_state continues at opt_state.step and
    reproduces the uninterrupted trajectory.
    """
    if epochs < 0 or batch_size < 1:
        raise TrainAbort("epochs must be >= 0 and batch_size >= 1")
    if len(dataset.sets) == 0:
        raise TrainAbort("empty dataset")
    opt = opt_state if opt_state is not None else OptimizerState()
    params = model.parameters()
    k = model.n_modalities
    columns = (["step", "lr"] + LOSS_COLUMNS
               + [f"p_b_{i}" for i in range(k)])
    log = TrainLog(columns=columns)
    renorm = [h.weights for h in model.heads.values()]
    if model.projections.learnable:
        renorm += list(model.projections.by_width.values())

    steps_per_epoch = math.ceil(len(dataset.sets) / batch_size)
    total_steps = epochs * steps_per_epoch
    train_dropout = replace(dropout, training=True)

    while opt.step < total_steps:
        step = opt.step
        epoch = step // steps_per_epoch
        batches = _batch_plan(len(dataset.sets), batch_size, seed, epoch)
        batch_idx = batches[step % steps_per_epoch]
        batch = [dataset.sets[i] for i in batch_idx]

        rng = np.random.default_rng(np.random.SeedSequence([seed, 202, step]))
        try:
            outputs = [model_forward(model, s, train_dropout, rng)
                       for s in batch]
            loss, breakdown = ls.total_loss(outputs, model, hp)
        except (ad.NonFiniteValue, ls.LossError) as e:
            raise TrainAbort(f"step {step}: {e}") from e
        if not np.isfinite(breakdown["total"]):
            raise TrainAbort(f"step {step}: non-finite loss")

        model.zero_grad()
        ad.backward(loss)
        lr = lr_at(schedule, step)
        sgd_step(params, opt, lr, renorm_rows=renorm)
        ls.update_centers(model.centers, _collect_center_batch(outputs, k))

        p_b = np.mean([fo.inter_weights.value for fo in outputs], axis=0)
        log.rows.append([step, lr] + [breakdown[c] for c in LOSS_COLUMNS]
                        + [float(x) for x in p_b])

        if checkpoint_hook is not None and checkpoint_every > 0 \
                and opt.step % checkpoint_every == 0 and opt.step < total_steps:
            checkpoint_hook(opt.step)
    if checkpoint_hook is not None:
        checkpoint_hook(opt.step)
    return log
