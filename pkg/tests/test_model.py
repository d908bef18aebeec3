"""Model tests: positional encodings, attention bias construction, subset
selection, the forward contract, and update semantics."""

import numpy as np
import pytest

from csprefine.csp import build_graph_coloring, build_sudoku, constraint_graph
from csprefine.model import (
    InstanceContext,
    ModelConfig,
    apply_update,
    ape,
    ape_table,
    forward,
    gumbel_noise,
    init_weights,
    nonedge_indicator,
    rpe_bias,
    select_subset,
    select_subset_batch,
    sinusoidal_pe,
)
from conftest import sudoku_puzzle, tiny_config, toy_alldiff


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(select_p=0.0)
    with pytest.raises(ValueError):
        ModelConfig(select_p=1.5)
    with pytest.raises(ValueError):
        ModelConfig(rpe_mode="banded")
    with pytest.raises(ValueError):
        ModelConfig(ape_mode="learned")
    with pytest.raises(ValueError):
        ModelConfig(sampler="argmax")
    with pytest.raises(ValueError):
        ModelConfig(tau=0.0)


def test_sinusoidal_pe_position_zero():
    pe = sinusoidal_pe(0, 8)
    assert np.allclose(pe, [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoidal_pe_first_pair():
    pe = sinusoidal_pe(3, 8)
    assert np.isclose(pe[0], np.sin(3.0))
    assert np.isclose(pe[1], np.cos(3.0))
    assert np.all(np.abs(pe) <= 1.0)


def test_multi_dim_ape_concatenates():
    enc = ape((2, 5), 8)
    assert enc.shape == (8,)
    assert np.allclose(enc[:4], sinusoidal_pe(2, 4))
    assert np.allclose(enc[4:], sinusoidal_pe(5, 4))
    with pytest.raises(ValueError):
        ape((0, 1, 2), 8)


def test_ape_table_modes():
    inst = build_sudoku([0] * 81)
    cfg = tiny_config(ape_mode="none")
    assert np.all(ape_table(inst, cfg) == 0.0)
    table = ape_table(inst, tiny_config(ape_mode="multi"))
    assert table.shape == (81, 16)
    # cells (1,1) and (1,2) share the row half of the encoding
    assert np.allclose(table[10][:8], table[11][:8])
    assert not np.allclose(table[10][8:], table[11][8:])
    table1d = ape_table(inst, tiny_config(ape_mode="1d"))
    assert np.allclose(table1d[5], sinusoidal_pe(5, 16))


def test_nonedge_indicator_diag_and_edges():
    inst = build_graph_coloring(3, [(0, 1)], 2)
    ind = nonedge_indicator(constraint_graph(inst))
    assert np.array_equal(ind, [[0, 0, 1], [0, 0, 1], [1, 1, 0]])


def test_rpe_bias_modes():
    g = constraint_graph(build_graph_coloring(3, [(0, 1)], 2))
    masked = rpe_bias(g, "masked")
    assert masked[0, 2] == -np.inf
    assert masked[0, 1] == 0.0 and masked[0, 0] == 0.0
    learned = rpe_bias(g, "learned", c=-0.5)
    assert learned[0, 2] == -0.5 and learned[0, 1] == 0.0
    assert np.all(rpe_bias(g, "none") == 0.0)


def test_init_weights_shapes():
    cfg = tiny_config(layers=2, rpe_mode="learned")
    w = init_weights(cfg, 5, np.random.default_rng(0))
    assert w["embed"].shape == (5, 16)
    assert w["w_out"].shape == (16, 5)
    assert "l1.wq" in w.params
    assert "rpe_theta" in w.params
    assert all(p.requires_grad for _, p in w.named_parameters())
    # softplus of the initial theta puts the learned offset near -1
    assert np.isclose(np.log1p(np.exp(w["rpe_theta"].item())), 1.0)


def test_instance_context_fixed_arrays():
    inst = sudoku_puzzle(40, 0)
    ctx = InstanceContext.build(inst, tiny_config())
    assert ctx.fixed_mask.sum() == 41
    fixed_idx = np.flatnonzero(ctx.fixed_mask)
    assert all(ctx.fixed_values[i] == inst.fixed[i] for i in fixed_idx)
    assert ctx.masked_bias is not None
    ctx2 = InstanceContext.build(inst, tiny_config(rpe_mode="learned"))
    assert ctx2.masked_bias is None


def test_select_subset_respects_fixed_and_nonempty():
    rng = np.random.default_rng(0)
    fixed = np.array([True, False, False, True])
    for _ in range(200):
        sel = select_subset(fixed, 0.3, rng)
        assert sel.any()
        assert not sel[fixed].any()


def test_select_subset_all_fixed_is_empty():
    sel = select_subset(np.array([True, True]), 0.9, np.random.default_rng(0))
    assert not sel.any()


def test_select_subset_batch_shape():
    rngs = [np.random.default_rng([7, c]) for c in range(3)]
    fixed = np.zeros((3, 5), dtype=bool)
    sel = select_subset_batch(fixed, 0.5, rngs)
    assert sel.shape == (3, 5)
    assert sel.any(axis=1).all()


def test_gumbel_noise_deterministic():
    a = gumbel_noise(np.random.default_rng(4), (3, 2))
    b = gumbel_noise(np.random.default_rng(4), (3, 2))
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def _toy_forward_setup(**cfg_kw):
    inst = toy_alldiff(4)
    cfg = tiny_config(**cfg_kw)
    w = init_weights(cfg, inst.m, np.random.default_rng(1))
    ctx = InstanceContext.build(inst, cfg)
    return inst, cfg, w, ctx


def test_forward_rows_are_distributions():
    inst, cfg, w, ctx = _toy_forward_setup()
    values = np.array([[0, 1, 2, 3], [3, 3, 0, 0]])
    selected = np.array([[True, True, False, False]] * 2)
    out = forward(w, ctx, values, selected)
    assert out.shape == (2, 4, 4)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    assert np.all(out.data >= 0.0)


def test_forward_deterministic_without_sampling():
    inst, cfg, w, ctx = _toy_forward_setup(sampler="softmax")
    values = np.array([[0, 1, 1, 2]])
    selected = np.array([[True, False, True, False]])
    a = forward(w, ctx, values, selected)
    b = forward(w, ctx, values, selected)
    assert np.array_equal(a.data, b.data)


def test_forward_gumbel_needs_rng_or_noise():
    inst, cfg, w, ctx = _toy_forward_setup(sampler="gumbel")
    values = np.array([[0, 1, 2, 3]])
    selected = np.array([[True, False, False, False]])
    with pytest.raises(ValueError):
        forward(w, ctx, values, selected)
    noise = gumbel_noise(np.random.default_rng(2), (1, 4, 4))
    out = forward(w, ctx, values, selected, noise=noise)
    assert np.allclose(out.data.sum(axis=-1), 1.0)


def test_forward_selection_marker_changes_output():
    inst, cfg, w, ctx = _toy_forward_setup(sampler="softmax")
    values = np.array([[0, 1, 2, 3]])
    sel_a = np.array([[True, False, False, False]])
    sel_b = np.array([[False, False, False, True]])
    a = forward(w, ctx, values, sel_a)
    b = forward(w, ctx, values, sel_b)
    assert not np.allclose(a.data, b.data)


def test_forward_learned_rpe_runs():
    inst, cfg, w, ctx = _toy_forward_setup(sampler="softmax", rpe_mode="learned")
    values = np.array([[0, 1, 2, 3]])
    selected = np.array([[True, True, True, True]])
    out = forward(w, ctx, values, selected)
    assert np.allclose(out.data.sum(axis=-1), 1.0)


def test_forward_vertex_relabel_consistency():
    # with no positional encoding, relabeling the vertices of a graph
    # permutes the output rows the same way
    edges = [(0, 1), (1, 2), (2, 3), (0, 3)]
    inst = build_graph_coloring(4, edges, 3)
    perm = np.array([2, 0, 3, 1])  # new index of each old vertex
    pedges = [(int(perm[u]), int(perm[v])) for u, v in edges]
    pinst = build_graph_coloring(4, pedges, 3)

    cfg = tiny_config(sampler="softmax", ape_mode="none")
    w = init_weights(cfg, 3, np.random.default_rng(6))
    values = np.array([[0, 1, 2, 0]])
    selected = np.array([[True, False, True, True]])
    out = forward(w, InstanceContext.build(inst, cfg), values, selected)

    pvalues = np.empty_like(values)
    psel = np.empty_like(selected)
    pvalues[0, perm] = values[0]
    psel[0, perm] = selected[0]
    pout = forward(w, InstanceContext.build(pinst, cfg), pvalues, psel)
    assert np.allclose(pout.data[0, perm], out.data[0], atol=1e-12)


def test_apply_update_only_touches_selected():
    values = np.array([[0, 1, 2]])
    selected = np.array([[False, True, False]])
    yhat = np.array([[[0.9, 0.1, 0.0], [0.1, 0.2, 0.7], [0.8, 0.1, 0.1]]])
    out = apply_update(values, selected, yhat)
    assert np.array_equal(out, [[0, 2, 2]])


def test_apply_update_tie_goes_to_lowest_index():
    values = np.array([[1]])
    selected = np.array([[True]])
    yhat = np.array([[[0.4, 0.4, 0.2]]])
    assert apply_update(values, selected, yhat)[0, 0] == 0


def test_apply_update_empty_selection_is_identity():
    values = np.array([[2, 0, 1]])
    selected = np.zeros((1, 3), dtype=bool)
    yhat = np.random.default_rng(0).random((1, 3, 3))
    assert np.array_equal(apply_update(values, selected, yhat), values)
