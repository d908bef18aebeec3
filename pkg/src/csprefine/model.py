"""Single-step assignment refiner.

The model takes a batch of variable assignments for one CSP instance and
produces, for every variable, a probability row over the domain. Inputs mix
three encodings: a learned embedding of the current value, a sinusoidal
positional encoding of the variable's index tuple, and a learned marker for
the variables chosen for update this step. The constraint graph enters the
attention as an additive bias on the logits (hard mask or a learned
non-positive offset). The output head is a temperature softmax, optionally
perturbed by Gumbel noise for differentiable discrete sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .csp import ConstraintGraph, CspInstance, constraint_graph
from .tensor import NumericError, Tensor

RPE_MODES = ("masked", "learned", "none")
APE_MODES = ("none", "1d", "multi")
SAMPLERS = ("gumbel", "softmax")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 7
    heads: int = 3
    d_model: int = 128
    select_p: float = 0.5
    rpe_mode: str = "masked"
    ape_mode: str = "multi"
    tau: float = 0.1
    sampler: str = "gumbel"
    dropout: float = 0.1
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if not 0.0 < self.select_p <= 1.0:
            raise ValueError(f"selection probability {self.select_p} outside (0,1]")
        if self.rpe_mode not in RPE_MODES:
            raise ValueError(f"rpe_mode must be one of {RPE_MODES}")
        if self.ape_mode not in APE_MODES:
            raise ValueError(f"ape_mode must be one of {APE_MODES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.tau <= 0.0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------------------
# Positional encodings


def sinusoidal_pe(position: int, width: int) -> np.ndarray:
    """Interleaved sin/cos encoding; position 0 gives [0, 1, 0, 1, ...]."""
    out = np.zeros(width)
    half = (width + 1) // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half) / width)
    out[0::2] = np.sin(position * freqs)
    out[1::2] = np.cos(position * freqs[: width // 2])
    return out


def ape(index_tuple, d_model: int) -> np.ndarray:
    """Concatenation of per-dimension sinusoidal encodings."""
    k = len(index_tuple)
    if d_model % k != 0:
        raise ValueError(f"d_model {d_model} not divisible by index arity {k}")
    width = d_model // k
    return np.concatenate([sinusoidal_pe(i, width) for i in index_tuple])


def ape_table(inst: CspInstance, cfg: ModelConfig) -> np.ndarray:
    """(n, d_model) positional table for one instance, per cfg.ape_mode."""
    if cfg.ape_mode == "none":
        return np.zeros((inst.n, cfg.d_model))
    if cfg.ape_mode == "1d":
        return np.stack([sinusoidal_pe(i, cfg.d_model) for i in range(inst.n)])
    return np.stack([ape(t, cfg.d_model) for t in inst.index_tuples])


def nonedge_indicator(graph: ConstraintGraph) -> np.ndarray:
    """(n, n) matrix: 1 where no constraint links i and j, 0 otherwise.

    The diagonal counts as an edge so every variable attends to itself.
    """
    out = np.ones((graph.n, graph.n))
    np.fill_diagonal(out, 0.0)
    for i, j in graph.edges:
        out[i, j] = 0.0
        out[j, i] = 0.0
    return out


def rpe_bias(graph: ConstraintGraph, mode: str, c: float = -1.0) -> np.ndarray:
    """Additive attention bias for a fixed (non-learned) c."""
    if mode == "none":
        return np.zeros((graph.n, graph.n))
    ind = nonedge_indicator(graph)
    if mode == "masked":
        bias = np.zeros_like(ind)
        bias[ind > 0] = -np.inf
        return bias
    if mode == "learned":
        return c * ind
    raise ValueError(f"rpe_mode must be one of {RPE_MODES}")


# ---------------------------------------------------------------------------
# Weights


class ModelWeights:
    """All learnable parameters plus the architecture they belong to."""

    def __init__(self, config: ModelConfig, domain_size: int, params: dict[str, Tensor]):
        self.config = config
        self.domain_size = domain_size
        self.params = params
        for p in params.values():
            p.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_weights(config: ModelConfig, domain_size: int, rng: np.random.Generator) -> ModelWeights:
    d = config.d_model
    ff = config.ffn_mult * d
    m = domain_size
    p: dict[str, Tensor] = {
        "embed": Tensor(rng.normal(0.0, 0.02, size=(m, d))),
        "select_embed": Tensor(rng.normal(0.0, 0.02, size=(d,))),
        "alpha": Tensor(1.0),
        "beta": Tensor(1.0),
        "gamma": Tensor(1.0),
        "w_out": Tensor(_xavier(rng, d, m)),
        "b_out": Tensor(np.zeros(m)),
        "lnf.g": Tensor(np.ones(d)),
        "lnf.b": Tensor(np.zeros(d)),
    }
    if config.rpe_mode == "learned":
        # c = -softplus(theta); this value puts c near -1
        p["rpe_theta"] = Tensor(math.log(math.e - 1.0))
    for l in range(config.layers):
        p[f"l{l}.ln1.g"] = Tensor(np.ones(d))
        p[f"l{l}.ln1.b"] = Tensor(np.zeros(d))
        p[f"l{l}.wq"] = Tensor(_xavier(rng, d, d))
        p[f"l{l}.wk"] = Tensor(_xavier(rng, d, d))
        p[f"l{l}.wv"] = Tensor(_xavier(rng, d, d))
        p[f"l{l}.wo"] = Tensor(_xavier(rng, d, d))
        p[f"l{l}.ln2.g"] = Tensor(np.ones(d))
        p[f"l{l}.ln2.b"] = Tensor(np.zeros(d))
        p[f"l{l}.w1"] = Tensor(_xavier(rng, d, ff))
        p[f"l{l}.b1"] = Tensor(np.zeros(ff))
        p[f"l{l}.w2"] = Tensor(_xavier(rng, ff, d))
        p[f"l{l}.b2"] = Tensor(np.zeros(d))
    return ModelWeights(config, domain_size, p)


# ---------------------------------------------------------------------------
# Per-instance context


@dataclass
class InstanceContext:
    """Constant per-instance arrays shared across forward passes."""

    inst: CspInstance
    ape: np.ndarray  # (n, d)
    nonedge: np.ndarray  # (n, n)
    masked_bias: np.ndarray | None  # (n, n), -inf on non-edges
    fixed_mask: np.ndarray  # (n,) bool
    fixed_values: np.ndarray  # (n,) int, arbitrary where not fixed

    @staticmethod
    def build(inst: CspInstance, cfg: ModelConfig) -> "InstanceContext":
        graph = constraint_graph(inst)
        nonedge = nonedge_indicator(graph)
        masked = None
        if cfg.rpe_mode == "masked":
            masked = np.where(nonedge > 0, -np.inf, 0.0)
        fixed_mask = np.array([v is not None for v in inst.fixed])
        fixed_values = np.array([v if v is not None else 0 for v in inst.fixed])
        return InstanceContext(inst, ape_table(inst, cfg), nonedge, masked, fixed_mask, fixed_values)


# ---------------------------------------------------------------------------
# Stochastic subset selection


def select_subset(fixed_mask: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) inclusion per non-fixed variable; (n,) bool.

    Redraws when nothing was selected but selectable variables exist: an
    empty step would be the identity and waste an iteration.
    """
    free = ~fixed_mask
    if not free.any():
        return np.zeros_like(fixed_mask)
    while True:
        sel = (rng.random(fixed_mask.shape[0]) < p) & free
        if sel.any():
            return sel


def select_subset_batch(fixed_mask: np.ndarray, p: float, rngs) -> np.ndarray:
    """Stack of per-row subset draws; fixed_mask is (B, n) and rngs has B
    independent generators (one stochastic stream per candidate)."""
    return np.stack([select_subset(fixed_mask[b], p, rngs[b]) for b in range(fixed_mask.shape[0])])


# ---------------------------------------------------------------------------
# Forward pass


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = T.square(centered).mean(axis=-1, keepdims=True)
    inv = T.pow_scalar(var + eps, -0.5)
    return centered * inv * g + b


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def forward(
    w: ModelWeights,
    ctx: InstanceContext,
    values: np.ndarray,
    selected: np.ndarray,
    rng: np.random.Generator | None = None,
    training: bool = False,
    noise: np.ndarray | None = None,
) -> Tensor:
    """One refinement step over a batch of assignments of one instance.

    values: (B, n) ints; selected: (B, n) bool. Returns (B, n, m)
    probability rows; only the selected rows are meaningful downstream.
    Gumbel noise comes from ``noise`` when given, else from ``rng``.
    """
    cfg = w.config
    B, n = values.shape
    d = cfg.d_model
    H = cfg.heads
    dh = d // H

    sel = Tensor(selected.astype(np.float64)[..., None])  # (B, n, 1)
    emb = T.gather_rows(w["embed"], values)  # (B, n, d)
    h = w["alpha"] * emb + w["beta"] * Tensor(ctx.ape) + w["gamma"] * (sel * w["select_embed"])

    if cfg.rpe_mode == "masked":
        bias = Tensor(ctx.masked_bias)
    elif cfg.rpe_mode == "learned":
        c = -T.log(1.0 + T.exp(w["rpe_theta"]))  # softplus keeps c <= 0
        bias = c * Tensor(ctx.nonedge)
    else:
        bias = None

    scale = 1.0 / math.sqrt(dh)
    for l in range(cfg.layers):
        x = _layer_norm(h, w[f"l{l}.ln1.g"], w[f"l{l}.ln1.b"])
        q = T.transpose((x @ w[f"l{l}.wq"]).reshape(B, n, H, dh), (0, 2, 1, 3))
        k = T.transpose((x @ w[f"l{l}.wk"]).reshape(B, n, H, dh), (0, 2, 1, 3))
        v = T.transpose((x @ w[f"l{l}.wv"]).reshape(B, n, H, dh), (0, 2, 1, 3))
        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale  # (B, H, n, n)
        if bias is not None:
            logits = logits + bias
        attn = T.softmax(logits, axis=-1)
        z = T.matmul(attn, v)  # (B, H, n, dh)
        z = T.transpose(z, (0, 2, 1, 3)).reshape(B, n, d) @ w[f"l{l}.wo"]
        z = T.dropout(z, cfg.dropout, rng, training) if rng is not None else z
        h = h + z

        x = _layer_norm(h, w[f"l{l}.ln2.g"], w[f"l{l}.ln2.b"])
        x = T.gelu(x @ w[f"l{l}.w1"] + w[f"l{l}.b1"]) @ w[f"l{l}.w2"] + w[f"l{l}.b2"]
        x = T.dropout(x, cfg.dropout, rng, training) if rng is not None else x
        h = h + x

    h = _layer_norm(h, w["lnf.g"], w["lnf.b"])
    out_logits = h @ w["w_out"] + w["b_out"]  # (B, n, m)
    if not np.all(np.isfinite(out_logits.data)):
        raise NumericError("non-finite output logits")

    if cfg.sampler == "gumbel":
        if noise is None:
            if rng is None:
                raise ValueError("gumbel sampler needs an rng or explicit noise")
            noise = gumbel_noise(rng, out_logits.shape)
        out_logits = out_logits + Tensor(noise)
    return T.softmax(out_logits * (1.0 / cfg.tau), axis=-1)


def apply_update(values: np.ndarray, selected: np.ndarray, yhat) -> np.ndarray:
    """Argmax update on the selected variables; ties go to the lowest value."""
    probs = yhat.data if isinstance(yhat, Tensor) else np.asarray(yhat)
    picks = np.argmax(probs, axis=-1)
    return np.where(selected, picks, values)
