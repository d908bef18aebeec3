"""Continuous penalties for discrete constraints and the training loss.

Each variable is relaxed to a probability row over the domain; a penalty is
a differentiable non-negative function of those rows that is zero on one-hot
inputs exactly when the discrete constraint holds. The loss over an instance
is ``sum_i lambda_i * f(p_i)`` with f quadratic by default (identity for
maximization instances, so edge weights keep their sign).

``compile_loss`` turns an instance into a vectorized evaluator that handles
arbitrary leading batch dimensions; the ``pen_*`` functions are the direct
single-constraint forms used for spot values and gradient checks.
"""

from __future__ import annotations

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
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    """Per-constraint weights and the penalty transform f."""

    lambdas: tuple[float, ...] | None = None  # None: all 1.0
    transform: str = "quadratic"  # or "identity"

    def weight(self, idx: int) -> float:
        if self.lambdas is None:
            return 1.0
        return self.lambdas[idx]


def default_loss_config(inst: CspInstance) -> LossConfig:
    transform = "identity" if inst.mode == "maximization" else "quadratic"
    return LossConfig(transform=transform)


def one_hot(values, m: int) -> np.ndarray:
    """Exact one-hot rows, shape ``values.shape + (m,)``."""
    values = np.asarray(values, dtype=np.int64)
    out = np.zeros(values.shape + (m,), dtype=np.float64)
    np.put_along_axis(out, values[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# Single-constraint penalties (rel: Tensor of shape (n, m))


def _rows(rel: Tensor, scope) -> Tensor:
    return T.gather_rows(rel, np.asarray(scope, dtype=np.int64))


def pen_cardinality(rel: Tensor, scope, value: int, count: int) -> Tensor:
    """|count - sum_i x_i^(value)| over the scope."""
    col = T.gather_rows(rel, np.asarray(scope, dtype=np.int64))
    total = col.sum(axis=0)  # (m,)
    sel = T.gather_rows(total.reshape(-1, 1), np.array([value])).reshape(())
    return T.abs_(float(count) - sel)


def pen_alldiff_exact(rel: Tensor, scope) -> Tensor:
    """sum_j |1 - colsum_j|; scope size must equal the domain size."""
    if len(scope) != rel.shape[-1]:
        raise ValueError(
            f"exact alldifferent penalty needs |scope|=={rel.shape[-1]}, "
            f"got {len(scope)}"
        )
    colsum = _rows(rel, scope).sum(axis=0)
    return T.abs_(1.0 - colsum).sum()


def pen_alldiff_atmost(rel: Tensor, scope) -> Tensor:
    """sum_j [relu(colsum_j - 1) + colsum_j * |1 - colsum_j|]."""
    if len(scope) >= rel.shape[-1]:
        raise ValueError(
            f"at-most-once alldifferent penalty needs |scope|<{rel.shape[-1]}, "
            f"got {len(scope)}"
        )
    colsum = _rows(rel, scope).sum(axis=0)
    over = T.relu(colsum - 1.0)
    frac = colsum * T.abs_(1.0 - colsum)
    return (over + frac).sum()


def pen_not_equal(rel: Tensor, i: int, k: int, weight: float = 1.0) -> Tensor:
    """weight * dot(x_i, x_k): the overlap of the two rows."""
    if i == k:
        raise ValueError(f"not-equal penalty needs two distinct variables, got {i}")
    pair = T.gather_rows(rel, np.array([i, k]))
    xi = T.gather_rows(pair, np.array([0])).reshape(-1)
    xk = T.gather_rows(pair, np.array([1])).reshape(-1)
    return weight * (xi * xk).sum()


def constraint_penalty(c, rel: Tensor) -> Tensor:
    if isinstance(c, Cardinality):
        return pen_cardinality(rel, c.scope, c.value, c.count)
    if isinstance(c, AllDifferentExact):
        return pen_alldiff_exact(rel, c.scope)
    if isinstance(c, AllDifferentAtMostOnce):
        return pen_alldiff_atmost(rel, c.scope)
    if isinstance(c, NotEqual):
        return pen_not_equal(rel, c.i, c.k, c.weight)
    raise TypeError(f"no penalty for constraint {type(c).__name__}")


# ---------------------------------------------------------------------------
# Compiled, batched loss


def _membership(scopes, n: int) -> np.ndarray:
    mat = np.zeros((len(scopes), n), dtype=np.float64)
    for r, scope in enumerate(scopes):
        for i in scope:
            mat[r, i] += 1.0
    return mat


def _apply_f(p: Tensor, transform: str) -> Tensor:
    if transform == "quadratic":
        return T.square(p)
    if transform == "identity":
        return p
    raise ValueError(f"unknown penalty transform {transform!r}")


class LossProgram:
    """Vectorized penalty evaluator for one instance.

    Accepts relaxed assignments of shape ``(..., n, m)`` and returns the
    per-sample loss with shape equal to the leading dimensions. Constraints
    are grouped by kind so the whole evaluation is a handful of tensor ops.
    """

    def __init__(self, inst: CspInstance, cfg: LossConfig | None = None):
        cfg = cfg or default_loss_config(inst)
        self.inst = inst
        self.cfg = cfg
        self.n, self.m = inst.n, inst.m

        exact_scopes, exact_lam = [], []
        atmost_scopes, atmost_lam = [], []
        card, card_lam = [], []
        # pair coefficient matrix; f applies to the dot product, so per-pair
        # lambda*w (identity) or lambda*w^2 (quadratic) folds in linearly
        pair_coeff = np.zeros((inst.n, inst.n), dtype=np.float64)
        has_pairs = False
        for idx, c in enumerate(inst.constraints):
            lam = cfg.weight(idx)
            if isinstance(c, AllDifferentExact):
                exact_scopes.append(c.scope)
                exact_lam.append(lam)
            elif isinstance(c, AllDifferentAtMostOnce):
                atmost_scopes.append(c.scope)
                atmost_lam.append(lam)
            elif isinstance(c, Cardinality):
                card.append(c)
                card_lam.append(lam)
            elif isinstance(c, NotEqual):
                w = lam * (c.weight**2 if cfg.transform == "quadratic" else c.weight)
                pair_coeff[c.i, c.k] += w
                pair_coeff[c.k, c.i] += w
                has_pairs = True
            else:
                raise TypeError(f"no penalty for constraint {type(c).__name__}")

        self._exact = (_membership(exact_scopes, inst.n), np.array(exact_lam)) if exact_scopes else None
        self._atmost = (_membership(atmost_scopes, inst.n), np.array(atmost_lam)) if atmost_scopes else None
        if card:
            self._card = (
                _membership([c.scope for c in card], inst.n),
                one_hot(np.array([c.value for c in card]), inst.m),
                np.array([float(c.count) for c in card]),
                np.array(card_lam),
            )
        else:
            self._card = None
        self._pairs = Tensor(pair_coeff) if has_pairs else None

    def loss(self, rel: Tensor) -> Tensor:
        """Per-sample loss; shape = rel.shape[:-2]."""
        batch = rel.shape[:-2]
        total = Tensor(np.zeros(batch))
        f = self.cfg.transform

        if self._exact is not None:
            mat, lam = self._exact
            colsum = T.matmul(Tensor(mat), rel)  # (..., C, m)
            p = T.abs_(1.0 - colsum).sum(axis=-1)
            total = total + (_apply_f(p, f) * Tensor(lam)).sum(axis=-1)

        if self._atmost is not None:
            mat, lam = self._atmost
            colsum = T.matmul(Tensor(mat), rel)
            p = (T.relu(colsum - 1.0) + colsum * T.abs_(1.0 - colsum)).sum(axis=-1)
            total = total + (_apply_f(p, f) * Tensor(lam)).sum(axis=-1)

        if self._card is not None:
            mat, sel, counts, lam = self._card
            colsum = T.matmul(Tensor(mat), rel)
            got = (colsum * Tensor(sel)).sum(axis=-1)  # (..., C)
            p = T.abs_(Tensor(counts) - got)
            total = total + (_apply_f(p, f) * Tensor(lam)).sum(axis=-1)

        if self._pairs is not None:
            axes = tuple(range(rel.data.ndim - 2)) + (rel.data.ndim - 1, rel.data.ndim - 2)
            dots = T.matmul(rel, T.transpose(rel, axes))  # (..., n, n)
            # each unordered pair appears twice in the symmetric matrix
            total = total + 0.5 * (_apply_f(dots, f) * self._pairs).sum(axis=-1).sum(axis=-1)

        return total


def total_loss(inst: CspInstance, rel: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """sum_i lambda_i f(p_i) for one relaxed assignment of shape (n, m)."""
    return LossProgram(inst, cfg).loss(rel)
