"""Test-time deployment of a trained refiner, plus non-neural baselines.

``iterate`` feeds the model its own output assignment until the instance is
feasible or the budget runs out. ``multi_start`` advances a pool of
candidates in lockstep rounds and accepts the first feasible one; candidate
0 replays the single-start stream, so a bigger pool can never do worse on
the same seed. Maximization instances (maxcut) never exit early and just
track the best cut found.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .csp import (
    AllDifferentAtMostOnce,
    AllDifferentExact,
    Cardinality,
    CspInstance,
    NotEqual,
)
from .model import (
    InstanceContext,
    ModelWeights,
    apply_update,
    forward,
    gumbel_noise,
    select_subset,
)
from .penalty import LossProgram, one_hot
from .tensor import Tape, Tensor, backward


@dataclass(frozen=True)
class Budget:
    max_iterations: int | None = None
    time_limit_ms: float | None = None

    def __post_init__(self):
        if self.max_iterations is None and self.time_limit_ms is None:
            raise ValueError("budget needs an iteration or time limit")
        if self.max_iterations is not None and self.max_iterations <= 0:
            raise ValueError("iteration limit must be positive")
        if self.time_limit_ms is not None and self.time_limit_ms <= 0:
            raise ValueError("time limit must be positive")


@dataclass
class SolveReport:
    feasible: bool
    iterations_used: int
    elapsed_ms: float
    final_assignment: np.ndarray
    best_assignment: np.ndarray
    objective: float | None = None  # best cut value in maximization mode
    violation_trace: list[int] | None = None
    winner: int | None = None  # candidate index that finished first


# ---------------------------------------------------------------------------
# Vectorized constraint checking (hot loop)


class ViolationChecker:
    """Batched discrete violation degrees for one instance."""

    def __init__(self, inst: CspInstance):
        self.inst = inst
        self.pair_i = np.array(
            [c.i for c in inst.constraints if isinstance(c, NotEqual)], dtype=np.int64
        )
        self.pair_k = np.array(
            [c.k for c in inst.constraints if isinstance(c, NotEqual)], dtype=np.int64
        )
        scopes = [
            c.scope
            for c in inst.constraints
            if isinstance(c, (AllDifferentExact, AllDifferentAtMostOnce))
        ]
        if scopes:
            member = np.zeros((len(scopes), inst.n))
            for r, s in enumerate(scopes):
                for i in s:
                    member[r, i] += 1.0
            self.member = member
        else:
            self.member = None
        cards = [c for c in inst.constraints if isinstance(c, Cardinality)]
        if cards:
            cmember = np.zeros((len(cards), inst.n))
            for r, c in enumerate(cards):
                for i in c.scope:
                    cmember[r, i] += 1.0
            self.cmember = cmember
            self.cvalue = np.array([c.value for c in cards], dtype=np.int64)
            self.ccount = np.array([c.count for c in cards])
        else:
            self.cmember = None

    def total(self, values: np.ndarray) -> np.ndarray:
        """Sum of violation degrees; values is (B, n), result (B,)."""
        out = np.zeros(values.shape[0])
        if self.pair_i.size:
            out += (values[:, self.pair_i] == values[:, self.pair_k]).sum(axis=1)
        if self.member is not None or self.cmember is not None:
            hot = one_hot(values, self.inst.m)  # (B, n, m)
            if self.member is not None:
                counts = np.matmul(self.member, hot)  # (B, C, m)
                out += np.maximum(counts - 1.0, 0.0).sum(axis=(1, 2))
            if self.cmember is not None:
                counts = np.matmul(self.cmember, hot)
                got = np.take_along_axis(
                    counts, np.broadcast_to(self.cvalue[None, :, None], counts.shape[:2] + (1,)), axis=2
                )[..., 0]
                out += np.abs(self.ccount[None, :] - got).sum(axis=1)
        return out

    def feasible(self, values: np.ndarray) -> np.ndarray:
        return self.total(values) == 0


# ---------------------------------------------------------------------------
# MAXCUT helpers


def cut_value(weighted_edges, values) -> float:
    """Total weight of edges whose endpoints land on different sides."""
    values = np.asarray(values)
    return float(
        sum(w for u, v, w in weighted_edges if values[u] != values[v])
    )


def instance_cut_value(inst: CspInstance, values) -> float:
    edges = [(c.i, c.k, c.weight) for c in inst.constraints if isinstance(c, NotEqual)]
    return cut_value(edges, values)


# ---------------------------------------------------------------------------
# Iterative refinement


def _candidate_rngs(seed: int, pool: int):
    return [np.random.default_rng([seed, c]) for c in range(pool)]


def multi_start(
    weights: ModelWeights,
    inst: CspInstance,
    pool_size: int,
    budget: Budget,
    seed: int = 0,
    inits: np.ndarray | None = None,
    ctx: InstanceContext | None = None,
    trace: bool = False,
) -> SolveReport:
    """Advance ``pool_size`` candidates in lockstep refinement rounds.

    Each candidate owns an rng seeded from (seed, index); candidate 0
    therefore replays the single-start stream of ``iterate`` with the same
    seed. First feasible candidate wins (lowest index on ties).
    """
    if pool_size < 1:
        raise ValueError("pool size must be at least 1")
    if ctx is None:
        ctx = InstanceContext.build(inst, weights.config)
    checker = ViolationChecker(inst)
    rngs = _candidate_rngs(seed, pool_size)
    maximize = inst.mode == "maximization"

    if inits is None:
        values = np.stack(
            [_random_init(inst, rngs[c]) for c in range(pool_size)]
        )
    else:
        inits = np.asarray(inits)
        values = np.array(inits if inits.ndim == 2 else inits[None], copy=True)
        if values.shape[0] != pool_size:
            raise ValueError("need one initial assignment per candidate")

    fixed_mask = np.broadcast_to(ctx.fixed_mask, values.shape) \
        if ctx.fixed_mask.ndim == 1 else ctx.fixed_mask
    t0 = time.perf_counter()
    viol = checker.total(values)
    best_viol = viol.copy()
    best_values = values.copy()
    trace_rows: list[int] | None = [int(viol.min())] if trace else None
    best_cut = None
    if maximize:
        cuts = np.array([instance_cut_value(inst, v) for v in values])
        best_cut = float(cuts.max())
        best_values = values[int(cuts.argmax())][None].repeat(pool_size, axis=0)

    if not maximize:
        feas = viol == 0
        if feas.any():
            win = int(np.argmax(feas))
            return SolveReport(
                feasible=True,
                iterations_used=0,
                elapsed_ms=(time.perf_counter() - t0) * 1000.0,
                final_assignment=values[win].copy(),
                best_assignment=values[win].copy(),
                violation_trace=trace_rows,
                winner=win,
            )
    if not (~fixed_mask).any():
        # fully fixed instance: nothing can ever change
        return SolveReport(
            feasible=bool((viol == 0).any()),
            iterations_used=0,
            elapsed_ms=(time.perf_counter() - t0) * 1000.0,
            final_assignment=values[0].copy(),
            best_assignment=values[0].copy(),
            violation_trace=trace_rows,
            winner=0 if (viol == 0).any() else None,
        )

    gumbel = weights.config.sampler == "gumbel"
    m = inst.m
    rounds = 0
    while True:
        if budget.max_iterations is not None and rounds >= budget.max_iterations:
            break
        if budget.time_limit_ms is not None and (time.perf_counter() - t0) * 1000.0 >= budget.time_limit_ms:
            break
        selected = np.stack(
            [select_subset(fixed_mask[c], weights.config.select_p, rngs[c]) for c in range(pool_size)]
        )
        noise = None
        if gumbel:
            noise = np.stack([gumbel_noise(rngs[c], (inst.n, m)) for c in range(pool_size)])
        yhat = forward(weights, ctx, values, selected, training=False, noise=noise)
        values = apply_update(values, selected, yhat)
        rounds += 1

        viol = checker.total(values)
        improved = viol < best_viol
        best_viol = np.where(improved, viol, best_viol)
        best_values[improved] = values[improved]
        if trace_rows is not None:
            trace_rows.append(int(viol.min()))
        if maximize:
            cuts = np.array([instance_cut_value(inst, v) for v in values])
            if float(cuts.max()) > best_cut:
                best_cut = float(cuts.max())
                best_values = values[int(cuts.argmax())][None].repeat(pool_size, axis=0)
        else:
            feas = viol == 0
            if feas.any():
                win = int(np.argmax(feas))
                return SolveReport(
                    feasible=True,
                    iterations_used=rounds,
                    elapsed_ms=(time.perf_counter() - t0) * 1000.0,
                    final_assignment=values[win].copy(),
                    best_assignment=values[win].copy(),
                    violation_trace=trace_rows,
                    winner=win,
                )

    elapsed = (time.perf_counter() - t0) * 1000.0
    best_idx = int(best_viol.argmin())
    return SolveReport(
        feasible=False,
        iterations_used=rounds,
        elapsed_ms=elapsed,
        final_assignment=values[0].copy(),
        best_assignment=best_values[0].copy() if maximize else best_values[best_idx].copy(),
        objective=best_cut,
        violation_trace=trace_rows,
        winner=None,
    )


def iterate(
    weights: ModelWeights,
    inst: CspInstance,
    init: np.ndarray,
    budget: Budget,
    seed: int = 0,
    ctx: InstanceContext | None = None,
    trace: bool = False,
) -> SolveReport:
    """Single-candidate refinement loop; the pool of size 1."""
    return multi_start(
        weights, inst, 1, budget, seed=seed, inits=np.asarray(init)[None],
        ctx=ctx, trace=trace,
    )


def _random_init(inst: CspInstance, rng: np.random.Generator) -> np.ndarray:
    values = rng.integers(0, inst.m, size=inst.n)
    for i, v in enumerate(inst.fixed):
        if v is not None:
            values[i] = v
    return values


# ---------------------------------------------------------------------------
# Baselines


def greedy_coloring(n_vertices: int, edges) -> tuple[np.ndarray, int]:
    """First-fit coloring in ascending vertex order; returns (colors, k')."""
    adj: list[set[int]] = [set() for _ in range(n_vertices)]
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    colors = np.full(n_vertices, -1, dtype=np.int64)
    for v in range(n_vertices):
        used = {colors[u] for u in adj[v] if colors[u] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors, int(colors.max()) + 1 if n_vertices else 0


def direct_sgd_counts(
    inst: CspInstance,
    runs: int = 1,
    steps: int = 10000,
    lr: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """Optimize free logit rows by plain gradient descent on the penalty
    loss; returns the number of satisfied constraints per run.

    Variables are kept on the simplex through a softmax of the logits, so
    no projection is needed. Runs are batched along the leading axis and
    optimized independently.
    """
    rng = np.random.default_rng(seed)
    program = LossProgram(inst)
    free = np.array([v is None for v in inst.fixed])
    hard = one_hot(np.array([v if v is not None else 0 for v in inst.fixed]), inst.m)
    fixed_rows = Tensor(np.broadcast_to(hard, (runs, inst.n, inst.m)).copy())
    free_mask = Tensor(free.astype(np.float64)[None, :, None])

    z = Tensor(rng.normal(0.0, 0.1, size=(runs, inst.n, inst.m)), requires_grad=True)
    for _ in range(steps):
        z.zero_grad()
        with Tape():
            rel = free_mask * T.softmax(z, axis=-1) + (1.0 - free_mask) * fixed_rows
            loss = program.loss(rel).sum()
            backward(loss)
        z.data -= lr * z.grad

    rounded = np.argmax(z.data, axis=-1)
    rounded[:, ~free] = np.argmax(hard[~free], axis=-1)
    sat = np.zeros(runs, dtype=np.int64)
    from .csp import violation_degree

    for r in range(runs):
        sat[r] = sum(1 for c in inst.constraints if violation_degree(c, rounded[r]) == 0)
    return sat


def direct_sgd_baseline(inst: CspInstance, steps: int = 10000, lr: float = 0.1, seed: int = 0) -> int:
    """Satisfied-constraint count for a single direct-descent run."""
    if inst.mode != "satisfaction":
        raise ValueError("direct gradient baseline targets satisfaction instances")
    return int(direct_sgd_counts(inst, runs=1, steps=steps, lr=lr, seed=seed)[0])
