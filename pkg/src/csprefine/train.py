"""Self-supervised single-step training.

Each batch draws fresh random assignments and fresh update subsets, runs one
refinement forward pass, scores the soft outputs with the penalty loss, and
takes one AdamW step. No multi-step unrolling: the model only ever sees a
single improvement step during training.

Batches are vectorized when the instances allow it: instances with identical
constraint sets (sudoku, nurse rostering) share one loss program, and
not-equal-only instances (coloring, maxcut) get their pair-coefficient
matrices stacked along the batch axis. Anything else falls back to a
per-instance loop inside the same tape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .csp import CspInstance, NotEqual
from .model import (
    InstanceContext,
    ModelConfig,
    ModelWeights,
    forward,
    init_weights,
    select_subset,
)
from .penalty import LossConfig, LossProgram, default_loss_config, one_hot
from .tensor import Tape, Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    epochs: int = 5000
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch size, epochs and learning rate must be positive")


# ---------------------------------------------------------------------------
# Optimizer


class OptimizerError(Exception):
    pass


def _decays(name: str, p: Tensor) -> bool:
    # scalars (alpha/beta/gamma/rpe_theta) and normalization params skip decay
    return p.data.ndim > 0 and "ln" not in name


class AdamW:
    """Adam with decoupled weight decay; state mirrors the parameter dict."""

    def __init__(self, weights: ModelWeights, cfg: TrainConfig):
        self.weights = weights
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in weights.named_parameters()}
        self.v = {k: np.zeros_like(p.data) for k, p in weights.named_parameters()}

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        grads = {}
        for name, p in self.weights.named_parameters():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        for name, p in self.weights.named_parameters():
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            if _decays(name, p):
                p.data *= 1.0 - cfg.lr * cfg.weight_decay
            p.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def adamw_step(weights: ModelWeights, opt: AdamW) -> None:
    """One optimizer step from the gradients currently held by the weights."""
    opt.step()
    weights.zero_grad()


# ---------------------------------------------------------------------------
# Assignment sampling and relaxation


def random_assignment(inst: CspInstance, rng: np.random.Generator) -> np.ndarray:
    """Uniform values on non-fixed variables, givens kept."""
    values = rng.integers(0, inst.m, size=inst.n)
    for i, v in enumerate(inst.fixed):
        if v is not None:
            values[i] = v
    return values


def assemble_relaxed(values: np.ndarray, selected: np.ndarray, yhat: Tensor) -> Tensor:
    """Soft rows for selected variables, exact one-hot rows elsewhere."""
    m = yhat.shape[-1]
    sel = Tensor(selected.astype(np.float64)[..., None])
    hard = Tensor(one_hot(values, m))
    return sel * yhat + (1.0 - sel) * hard


# ---------------------------------------------------------------------------
# Batch preparation


@dataclass
class InstanceBundle:
    inst: CspInstance
    ctx: InstanceContext
    program: LossProgram


def prepare(instances, mcfg: ModelConfig, loss_cfg: LossConfig | None = None):
    return [
        InstanceBundle(inst, InstanceContext.build(inst, mcfg), LossProgram(inst, loss_cfg))
        for inst in instances
    ]


class _StackedPairLoss:
    """Per-sample loss for a batch of not-equal-only instances."""

    def __init__(self, programs):
        self.coeff = Tensor(np.stack([p._pairs.data for p in programs]))
        self.transform = programs[0].cfg.transform

    def loss(self, rel: Tensor) -> Tensor:
        from .penalty import _apply_f

        axes = (0, 2, 1)
        dots = T.matmul(rel, T.transpose(rel, axes))
        return 0.5 * (_apply_f(dots, self.transform) * self.coeff).sum(axis=-1).sum(axis=-1)


def _collate(bundles):
    """Batched (ctx, loss) when the instances permit, else None."""
    first = bundles[0]
    n, m = first.inst.n, first.inst.m
    if any(b.inst.n != n or b.inst.m != m for b in bundles):
        return None
    if any(b.inst.index_tuples != first.inst.index_tuples for b in bundles):
        return None

    same_structure = all(b.inst.constraints == first.inst.constraints for b in bundles)
    pairs_only = all(
        all(isinstance(c, NotEqual) for c in b.inst.constraints) and b.program._pairs is not None
        for b in bundles
    )
    if not same_structure and not pairs_only:
        return None

    fixed_mask = np.stack([b.ctx.fixed_mask for b in bundles])
    fixed_values = np.stack([b.ctx.fixed_values for b in bundles])
    if same_structure:
        ctx = InstanceContext(
            first.inst, first.ctx.ape, first.ctx.nonedge, first.ctx.masked_bias,
            fixed_mask, fixed_values,
        )
        return ctx, first.program
    nonedge = np.stack([b.ctx.nonedge for b in bundles])[:, None]  # (B,1,n,n)
    masked = None
    if first.ctx.masked_bias is not None:
        masked = np.stack([b.ctx.masked_bias for b in bundles])[:, None]
    ctx = InstanceContext(first.inst, first.ctx.ape, nonedge, masked, fixed_mask, fixed_values)
    return ctx, _StackedPairLoss([b.program for b in bundles])


# ---------------------------------------------------------------------------
# Epoch loop


def _batch_loss(weights, bundles, rng, training=True):
    """Forward one batch inside the active tape; returns the mean loss."""
    B = len(bundles)
    values = np.stack([random_assignment(b.inst, rng) for b in bundles])
    selected = np.stack(
        [select_subset(b.ctx.fixed_mask, weights.config.select_p, rng) for b in bundles]
    )
    plan = _collate(bundles)
    if plan is not None:
        ctx, program = plan
        yhat = forward(weights, ctx, values, selected, rng=rng, training=training)
        rel = assemble_relaxed(values, selected, yhat)
        return program.loss(rel).mean()
    total = Tensor(0.0)
    for b, vals, sel in zip(bundles, values, selected):
        yhat = forward(weights, b.ctx, vals[None], sel[None], rng=rng, training=training)
        rel = assemble_relaxed(vals[None], sel[None], yhat)
        total = total + b.program.loss(rel).sum()
    return total * (1.0 / B)


def train_epoch(weights: ModelWeights, opt: AdamW, bundles, cfg: TrainConfig,
                rng: np.random.Generator) -> float:
    """One shuffled pass over the dataset; returns the epoch mean loss."""
    if not bundles:
        raise ValueError("empty training dataset")
    order = rng.permutation(len(bundles))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        chunk = [bundles[i] for i in order[start : start + cfg.batch_size]]
        weights.zero_grad()
        with Tape():
            loss = _batch_loss(weights, chunk, rng)
            backward(loss)
        adamw_step(weights, opt)
        losses.append(loss.item())
    return float(np.mean(losses))


@dataclass
class TrainResult:
    weights: ModelWeights
    best_params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)

    def load_best(self) -> ModelWeights:
        for name, p in self.weights.named_parameters():
            p.data = self.best_params[name].copy()
        return self.weights


def train(
    instances,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    weights: ModelWeights | None = None,
    opt: AdamW | None = None,
    log=None,
) -> TrainResult:
    """Train a refiner from scratch (or resume) on a list of instances."""
    rng = np.random.default_rng(tcfg.seed)
    if loss_cfg is None:
        loss_cfg = default_loss_config(instances[0])
    if weights is None:
        weights = init_weights(mcfg, instances[0].m, rng)
    if opt is None:
        opt = AdamW(weights, tcfg)
    bundles = prepare(instances, mcfg, loss_cfg)
    history: list[float] = []
    best = {k: p.data.copy() for k, p in weights.named_parameters()}
    best_loss = float("inf")
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        mean_loss = train_epoch(weights, opt, bundles, tcfg, rng)
        history.append(mean_loss)
        if mean_loss < best_loss:
            best_loss = mean_loss
            best = {k: p.data.copy() for k, p in weights.named_parameters()}
        if log is not None:
            ms = (time.perf_counter() - t0) * 1000.0
            log(f"epoch={epoch} loss={mean_loss:.6f} time_ms={ms:.1f}")
    return TrainResult(weights=weights, best_params=best, history=history)
