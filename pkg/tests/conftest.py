"""Shared fixtures and small builders used across the test modules."""

import numpy as np
import pytest

from csprefine.csp import AllDifferentExact, CspInstance, build_sudoku
from csprefine.model import ModelConfig


def toy_alldiff(n: int = 4) -> CspInstance:
    """Single exact alldifferent over n variables with n values."""
    return CspInstance(
        n=n,
        m=n,
        index_tuples=tuple((i,) for i in range(n)),
        constraints=(AllDifferentExact(tuple(range(n))),),
        fixed=(None,) * n,
    )


def full_sudoku_grid() -> np.ndarray:
    """A complete valid sudoku grid as 81 digits in 1..9."""
    return np.array(
        [(i * 3 + i // 3 + j) % 9 + 1 for i in range(9) for j in range(9)]
    )


def sudoku_puzzle(missing: int, seed: int):
    """Blank ``missing`` random cells of the full grid."""
    grid = full_sudoku_grid()
    rng = np.random.default_rng(seed)
    blank = rng.choice(81, size=missing, replace=False)
    givens = grid.copy()
    givens[blank] = 0
    return build_sudoku(givens.tolist())


def tiny_config(**kw) -> ModelConfig:
    """Small deterministic model for unit tests."""
    base = dict(
        layers=1,
        heads=1,
        d_model=16,
        select_p=0.5,
        rpe_mode="masked",
        ape_mode="none",
        tau=0.5,
        sampler="softmax",
        dropout=0.0,
        ffn_mult=1,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
