"""Instance generation and file I/O.

Graph generators (Erdos-Renyi, Barabasi-Albert, random geometric) feed the
coloring and maxcut builders; the coloring dataset poses each graph with a
color count derived from a greedy coloring. Instances round-trip through a
JSON-lines format, model weights through a small binary container, and
every generated dataset carries a plain-text manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .csp import (
    AllDifferentAtMostOnce,
    AllDifferentExact,
    Cardinality,
    CspInstance,
    CspError,
    NotEqual,
    build_graph_coloring,
    build_maxcut,
    build_nurse_rostering,
    build_sudoku,
)
from .model import ModelConfig, ModelWeights
from .solve import greedy_coloring
from .tensor import Tensor


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# Graphs


@dataclass(frozen=True)
class WeightedGraph:
    n: int
    edges: tuple[tuple[int, int, float], ...]  # (u, v, w) with u < v

    def __post_init__(self):
        seen = set()
        for u, v, _ in self.edges:
            if not (0 <= u < v < self.n):
                raise DataError(f"bad edge ({u},{v}) for {self.n} vertices")
            if (u, v) in seen:
                raise DataError(f"duplicate edge ({u},{v})")
            seen.add((u, v))

    def unweighted(self):
        return [(u, v) for u, v, _ in self.edges]


def gen_erdos_renyi(n: int, p: float, rng: np.random.Generator) -> WeightedGraph:
    """Each of the n(n-1)/2 pairs becomes an edge independently with
    probability p."""
    if n < 1 or not 0.0 <= p <= 1.0:
        raise DataError(f"bad erdos-renyi parameters n={n}, p={p}")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = tuple((int(u), int(v), 1.0) for u, v in zip(iu[keep], ju[keep]))
    return WeightedGraph(n, edges)


def gen_barabasi_albert(n: int, m_attach: int, rng: np.random.Generator) -> WeightedGraph:
    """Preferential attachment growing from a clique on m_attach vertices;
    each newcomer links to m_attach distinct existing vertices with
    probability proportional to degree."""
    if not 1 <= m_attach < n:
        raise DataError(f"barabasi-albert needs 1 <= m_attach < n, got {m_attach}, {n}")
    edges = []
    degree = np.zeros(n)
    for u in range(m_attach):
        for v in range(u + 1, m_attach):
            edges.append((u, v, 1.0))
            degree[u] += 1
            degree[v] += 1
    for v in range(m_attach, n):
        targets: set[int] = set()
        weights = degree[:v].copy()
        if weights.sum() == 0:  # m_attach == 1: seed vertex has degree 0
            weights[:] = 1.0
        while len(targets) < m_attach:
            w = weights.copy()
            w[list(targets)] = 0.0
            pick = int(rng.choice(v, p=w / w.sum()))
            targets.add(pick)
        for u in sorted(targets):
            edges.append((u, v, 1.0))
            degree[u] += 1
            degree[v] += 1
    return WeightedGraph(n, tuple(edges))


def gen_geometric(n: int, r: float, rng: np.random.Generator) -> WeightedGraph:
    """Uniform points in the unit square; edge iff distance <= r."""
    if n < 1 or r < 0.0:
        raise DataError(f"bad geometric parameters n={n}, r={r}")
    pts = rng.random((n, 2))
    iu, ju = np.triu_indices(n, k=1)
    d = np.linalg.norm(pts[iu] - pts[ju], axis=1)
    keep = d <= r
    edges = tuple((int(u), int(v), 1.0) for u, v in zip(iu[keep], ju[keep]))
    return WeightedGraph(n, edges)


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class DatasetManifest:
    problem: str
    count: int
    seed: int
    params: dict
    per_instance: list[dict]

    def to_text(self) -> str:
        lines = [
            f"problem={self.problem}",
            f"count={self.count}",
            f"seed={self.seed}",
            f"params={json.dumps(self.params, sort_keys=True)}",
        ]
        for i, rec in enumerate(self.per_instance):
            lines.append(f"instance.{i}={json.dumps(rec, sort_keys=True)}")
        return "\n".join(lines) + "\n"


COLOR_DISTRIBUTIONS = ("erdos_renyi", "barabasi_albert", "geometric")


def _sample_graph(n: int, rng: np.random.Generator, distributions=COLOR_DISTRIBUTIONS) -> tuple[str, WeightedGraph]:
    kind = distributions[int(rng.integers(len(distributions)))]
    if kind == "erdos_renyi":
        return kind, gen_erdos_renyi(n, rng.uniform(0.1, 0.3), rng)
    if kind == "barabasi_albert":
        m_attach = min(int(rng.integers(2, 11)), n - 1)
        return kind, gen_barabasi_albert(n, m_attach, rng)
    return kind, gen_geometric(n, rng.uniform(0.15, 0.3), rng)


def posed_color_count(k_greedy: int) -> int:
    """Colors to pose a graph with, from the greedy coloring's k'."""
    return max(3, min(10, k_greedy - 1))


def gen_coloring_dataset(
    count: int,
    n_vertices: int,
    seed: int,
    distributions=COLOR_DISTRIBUTIONS,
    fixed_k: int | None = None,
    pose_at_greedy: bool = False,
) -> tuple[list[CspInstance], DatasetManifest]:
    """Graphs colored greedily to find k', posed with k = max(3, min(10, k'-1)).

    ``fixed_k`` keeps only instances posed with that exact k (the generator
    keeps drawing until ``count`` of them exist). ``pose_at_greedy`` poses
    at k = k' instead, which makes every instance satisfiable.
    """
    rng = np.random.default_rng(seed)
    instances: list[CspInstance] = []
    records: list[dict] = []
    while len(instances) < count:
        kind, graph = _sample_graph(n_vertices, rng, distributions)
        _, k_greedy = greedy_coloring(graph.n, graph.unweighted())
        k = k_greedy if pose_at_greedy else posed_color_count(k_greedy)
        if fixed_k is not None and k != fixed_k:
            continue
        instances.append(build_graph_coloring(graph.n, graph.unweighted(), k))
        records.append({"distribution": kind, "k_greedy": k_greedy, "k": k,
                        "edges": len(graph.edges)})
    manifest = DatasetManifest(
        problem="coloring",
        count=count,
        seed=seed,
        params={"n_vertices": n_vertices, "fixed_k": fixed_k,
                "pose_at_greedy": pose_at_greedy,
                "distributions": list(distributions)},
        per_instance=records,
    )
    return instances, manifest


def gen_nurse_dataset(
    count: int, days: int, shifts: int, per_shift: int, nurses: int, seed: int
) -> tuple[list[CspInstance], list[np.ndarray], DatasetManifest]:
    """Nurse instances plus an initial assignment per instance where every
    nurse holds at least one slot. The fixed-variable set stays empty."""
    rng = np.random.default_rng(seed)
    inst = build_nurse_rostering(days, shifts, per_shift, nurses)
    instances = [inst] * count
    inits = []
    for _ in range(count):
        init = rng.integers(0, nurses, size=inst.n)
        # give each nurse one random slot so everyone appears at least once
        slots = rng.permutation(inst.n)[:nurses]
        init[slots] = np.arange(nurses)
        inits.append(init)
    manifest = DatasetManifest(
        problem="nurse",
        count=count,
        seed=seed,
        params={"days": days, "shifts": shifts, "per_shift": per_shift, "nurses": nurses},
        per_instance=[{"init_covers_all_nurses": True}] * count,
    )
    return instances, inits, manifest


def gen_maxcut_dataset(count: int, n_vertices: int, seed: int) -> tuple[list[CspInstance], DatasetManifest]:
    rng = np.random.default_rng(seed)
    instances = []
    records = []
    for _ in range(count):
        kind, graph = _sample_graph(n_vertices, rng)
        instances.append(build_maxcut(graph.n, graph.edges))
        records.append({"distribution": kind, "edges": len(graph.edges)})
    manifest = DatasetManifest(
        problem="maxcut", count=count, seed=seed,
        params={"n_vertices": n_vertices}, per_instance=records,
    )
    return instances, manifest


# ---------------------------------------------------------------------------
# Instance (de)serialization


def _constraint_to_json(c) -> dict:
    if isinstance(c, NotEqual):
        return {"kind": "ne", "i": c.i, "k": c.k, "w": c.weight}
    if isinstance(c, AllDifferentExact):
        return {"kind": "alldiff_exact", "scope": list(c.scope)}
    if isinstance(c, AllDifferentAtMostOnce):
        return {"kind": "alldiff_atmost", "scope": list(c.scope)}
    if isinstance(c, Cardinality):
        return {"kind": "cardinality", "value": c.value, "count": c.count,
                "scope": list(c.scope)}
    raise DataError(f"cannot serialize constraint {type(c).__name__}")


def _constraint_from_json(d: dict):
    kind = d["kind"]
    if kind == "ne":
        return NotEqual(d["i"], d["k"], d.get("w", 1.0))
    if kind == "alldiff_exact":
        return AllDifferentExact(tuple(d["scope"]))
    if kind == "alldiff_atmost":
        return AllDifferentAtMostOnce(tuple(d["scope"]))
    if kind == "cardinality":
        return Cardinality(d["value"], d["count"], tuple(d["scope"]))
    raise DataError(f"unknown constraint kind {kind!r}")


def instance_to_json(inst: CspInstance) -> str:
    return json.dumps(
        {
            "n": inst.n,
            "m": inst.m,
            "mode": inst.mode,
            "index_tuples": [list(t) for t in inst.index_tuples],
            "fixed": list(inst.fixed),
            "constraints": [_constraint_to_json(c) for c in inst.constraints],
        },
        sort_keys=True,
    )


def instance_from_json(line: str) -> CspInstance:
    d = json.loads(line)
    return CspInstance(
        n=d["n"],
        m=d["m"],
        mode=d.get("mode", "satisfaction"),
        index_tuples=tuple(tuple(t) for t in d["index_tuples"]),
        fixed=tuple(d["fixed"]),
        constraints=tuple(_constraint_from_json(c) for c in d["constraints"]),
    )


def save_instances(instances, path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst) + "\n")


def load_instances(path) -> list[CspInstance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(instance_from_json(line))
            except (json.JSONDecodeError, KeyError, CspError) as exc:
                raise DataError(f"{path}:{lineno}: bad instance line: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Sudoku and GSET files


def load_sudoku(path) -> list[CspInstance]:
    """One 81-character puzzle per line; '1'-'9' are givens, '0'/'.' blanks."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if len(line) != 81:
                raise DataError(f"{path}:{lineno}: expected 81 characters, got {len(line)}")
            givens = []
            for ch in line:
                if ch in "0.":
                    givens.append(0)
                elif ch.isdigit():
                    givens.append(int(ch))
                else:
                    raise DataError(f"{path}:{lineno}: bad character {ch!r}")
            out.append(build_sudoku(givens))
    return out


def save_sudoku(instances, path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write("".join(
                "0" if v is None else str(v + 1) for v in inst.fixed
            ) + "\n")


def load_gset(path) -> WeightedGraph:
    """Header 'n m', then m lines 'u v w' with 1-based vertex ids."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}:1: expected 'n m' header")
        n, m = int(header[0]), int(header[1])
        edges = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'u v w'")
            u, v, w = int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])
            edges.append((min(u, v), max(u, v), w))
    if len(edges) != m:
        raise DataError(f"{path}: header declares {m} edges, found {len(edges)}")
    return WeightedGraph(n, tuple(edges))


def save_gset(graph: WeightedGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{graph.n} {len(graph.edges)}\n")
        for u, v, w in graph.edges:
            wtxt = str(int(w)) if float(w).is_integer() else repr(w)
            fh.write(f"{u + 1} {v + 1} {wtxt}\n")


# ---------------------------------------------------------------------------
# Weight serialization


_MAGIC = b"CSPW"
_VERSION = 1


def save_weights(weights: ModelWeights, path) -> None:
    """Binary container: magic, version, JSON header, float64 LE blocks."""
    names = sorted(weights.params)
    header = json.dumps(
        {
            "config": vars(weights.config) if not hasattr(weights.config, "__dataclass_fields__")
            else {f: getattr(weights.config, f) for f in weights.config.__dataclass_fields__},
            "domain_size": weights.domain_size,
            "tensors": {name: list(weights.params[name].shape) for name in names},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            data = np.ascontiguousarray(weights.params[name].data, dtype="<f8")
            fh.write(data.tobytes())


def load_weights(path, expect_config: ModelConfig | None = None) -> ModelWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a weight file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise DataError(f"{path}: unsupported weight format version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        config = ModelConfig(**header["config"])
        if expect_config is not None and config != expect_config:
            raise DataError(
                f"{path}: stored model config {config} does not match expected {expect_config}"
            )
        params: dict[str, Tensor] = {}
        for name in sorted(header["tensors"]):
            shape = tuple(header["tensors"][name])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise DataError(f"{path}: truncated tensor block {name!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params[name] = Tensor(arr)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after tensor blocks")
    return ModelWeights(config, header["domain_size"], params)
