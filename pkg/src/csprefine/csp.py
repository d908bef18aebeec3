"""Discrete CSP data model: instances, constraints, checking, violation
degrees, constraint-graph extraction, and the four problem builders
(sudoku, graph coloring, nurse rostering, maxcut).

Domains are normalized to ``0..m-1`` internally; the builders shift
1-based digits/colors down on the way in.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field


class CspError(Exception):
    pass


# ---------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True)
class Cardinality:
    """Exactly ``count`` variables in ``scope`` take the value ``value``."""

    value: int
    count: int
    scope: tuple[int, ...]


@dataclass(frozen=True)
class AllDifferentExact:
    """All scope variables distinct; scope size equals the domain size, so
    every value appears exactly once."""

    scope: tuple[int, ...]


@dataclass(frozen=True)
class AllDifferentAtMostOnce:
    """All scope variables distinct; domain larger than the scope, so every
    value appears at most once."""

    scope: tuple[int, ...]


@dataclass(frozen=True)
class NotEqual:
    """Two variables must differ; ``weight`` matters only for maximization."""

    i: int
    k: int
    weight: float = 1.0

    @property
    def scope(self) -> tuple[int, int]:
        return (self.i, self.k)


Constraint = Cardinality | AllDifferentExact | AllDifferentAtMostOnce | NotEqual


def all_different(scope, domain_size: int) -> Constraint:
    """Pick the AllDifferent variant from scope size vs domain size."""
    scope = tuple(scope)
    if len(scope) > domain_size:
        raise CspError(
            f"alldifferent over {len(scope)} variables with only "
            f"{domain_size} values is unsatisfiable"
        )
    if len(scope) == domain_size:
        return AllDifferentExact(scope)
    return AllDifferentAtMostOnce(scope)


# ---------------------------------------------------------------------------
# Instances


@dataclass(frozen=True)
class CspInstance:
    n: int
    m: int
    index_tuples: tuple[tuple[int, ...], ...]
    constraints: tuple[Constraint, ...]
    fixed: tuple[int | None, ...]
    mode: str = "satisfaction"  # or "maximization"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise CspError("need at least one variable and one domain value")
        dims = {len(t) for t in self.index_tuples}
        if len(self.index_tuples) != self.n or len(dims) != 1:
            raise CspError("index tuples must cover all variables with a shared arity")
        if len(self.fixed) != self.n:
            raise CspError("fixed markers must cover all variables")
        for v in self.fixed:
            if v is not None and not 0 <= v < self.m:
                raise CspError(f"fixed value {v} outside domain [0,{self.m})")
        for c in self.constraints:
            _validate_constraint(c, self.n, self.m)

    @property
    def index_dim(self) -> int:
        return len(self.index_tuples[0])

    @property
    def fixed_indices(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.fixed) if v is not None)


def _validate_constraint(c: Constraint, n: int, m: int) -> None:
    for i in c.scope:
        if not 0 <= i < n:
            raise CspError(f"constraint scope index {i} out of range [0,{n})")
    if isinstance(c, Cardinality):
        if not 0 <= c.value < m:
            raise CspError(f"cardinality value {c.value} outside domain")
        if not 0 <= c.count <= len(c.scope):
            raise CspError(f"cardinality count {c.count} outside [0,{len(c.scope)}]")
    elif isinstance(c, AllDifferentExact):
        if len(c.scope) != m:
            raise CspError("exact alldifferent needs scope size == domain size")
    elif isinstance(c, AllDifferentAtMostOnce):
        if len(c.scope) >= m:
            raise CspError("at-most-once alldifferent needs scope size < domain size")
    elif isinstance(c, NotEqual):
        if c.i == c.k:
            raise CspError(f"not-equal constraint on a single variable {c.i}")


def validate_assignment(inst: CspInstance, values) -> None:
    if len(values) != inst.n:
        raise CspError(f"assignment has {len(values)} values, expected {inst.n}")
    for i, v in enumerate(values):
        if not 0 <= v < inst.m:
            raise CspError(f"value {v} at variable {i} outside domain [0,{inst.m})")


# ---------------------------------------------------------------------------
# Checking and violation degrees


def check_constraint(c: Constraint, values) -> bool:
    return violation_degree(c, values) == 0


def violation_degree(c: Constraint, values) -> int:
    """Non-negative distance from satisfaction; 0 iff the constraint holds."""
    if isinstance(c, NotEqual):
        return int(values[c.i] == values[c.k])
    if isinstance(c, Cardinality):
        count = sum(1 for i in c.scope if values[i] == c.value)
        return abs(c.count - count)
    # both alldifferent variants: surplus occupancy per value
    counts = Counter(values[i] for i in c.scope)
    return sum(cnt - 1 for cnt in counts.values() if cnt > 1)


def is_feasible(inst: CspInstance, values) -> bool:
    return all(check_constraint(c, values) for c in inst.constraints)


def total_violation(inst: CspInstance, values) -> int:
    return sum(violation_degree(c, values) for c in inst.constraints)


# ---------------------------------------------------------------------------
# Constraint graph


@dataclass(frozen=True)
class ConstraintGraph:
    n: int
    edges: frozenset[tuple[int, int]]  # (i, j) with i < j

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)


def constraint_graph(inst: CspInstance) -> ConstraintGraph:
    """One edge per pair of variables sharing at least one constraint scope."""
    edges = set()
    for c in inst.constraints:
        scope = c.scope
        for a in range(len(scope)):
            for b in range(a + 1, len(scope)):
                i, j = scope[a], scope[b]
                if i != j:
                    edges.add((min(i, j), max(i, j)))
    return ConstraintGraph(inst.n, frozenset(edges))


# ---------------------------------------------------------------------------
# Problem builders


def build_sudoku(givens) -> CspInstance:
    """9x9 sudoku from 81 entries: digits 1-9 are givens, 0/None are blanks.

    Consistency of the givens is not checked; an inconsistent puzzle is a
    legal (unsolvable) instance.
    """
    givens = list(givens)
    if len(givens) != 81:
        raise CspError(f"sudoku needs 81 entries, got {len(givens)}")
    fixed: list[int | None] = []
    for g in givens:
        if g is None or g == 0:
            fixed.append(None)
        elif isinstance(g, int) and 1 <= g <= 9:
            fixed.append(g - 1)
        else:
            raise CspError(f"sudoku entry {g!r} not a digit 1-9 or blank")
    index_tuples = tuple((r, c) for r in range(9) for c in range(9))
    constraints: list[Constraint] = []
    for r in range(9):
        constraints.append(AllDifferentExact(tuple(r * 9 + c for c in range(9))))
    for c in range(9):
        constraints.append(AllDifferentExact(tuple(r * 9 + c for r in range(9))))
    for br in range(3):
        for bc in range(3):
            scope = tuple(
                (3 * br + dr) * 9 + (3 * bc + dc) for dr in range(3) for dc in range(3)
            )
            constraints.append(AllDifferentExact(scope))
    return CspInstance(
        n=81,
        m=9,
        index_tuples=index_tuples,
        constraints=tuple(constraints),
        fixed=tuple(fixed),
    )


def build_graph_coloring(n_vertices: int, edges, k: int) -> CspInstance:
    """Color ``n_vertices`` with ``k`` colors; one not-equal per edge."""
    if k < 1:
        raise CspError("need at least one color")
    constraints = tuple(NotEqual(min(u, v), max(u, v)) for u, v in edges)
    return CspInstance(
        n=n_vertices,
        m=k,
        index_tuples=tuple((v,) for v in range(n_vertices)),
        constraints=constraints,
        fixed=(None,) * n_vertices,
    )


def build_nurse_rostering(days: int, shifts: int, per_shift: int, nurses: int) -> CspInstance:
    """Shift slots indexed (day, shift, slot), domain = nurse ids.

    Per day: one at-most-once alldifferent over all slots (no nurse works
    two shifts a day). Across days: the last shift of day d and the first
    shift of day d+1 share no nurse.
    """
    if shifts * per_shift > nurses:
        raise CspError(
            f"{shifts}*{per_shift} slots per day cannot host distinct "
            f"nurses out of {nurses}"
        )
    if days < 1 or shifts < 1 or per_shift < 1 or nurses < 1:
        raise CspError("all nurse rostering parameters must be positive")

    def var(d: int, s: int, slot: int) -> int:
        return (d * shifts + s) * per_shift + slot

    n = days * shifts * per_shift
    index_tuples = tuple(
        (d, s, slot)
        for d in range(days)
        for s in range(shifts)
        for slot in range(per_shift)
    )
    constraints: list[Constraint] = []
    for d in range(days):
        scope = tuple(
            var(d, s, slot) for s in range(shifts) for slot in range(per_shift)
        )
        constraints.append(all_different(scope, nurses))
    for d in range(days - 1):
        for a in range(per_shift):
            for b in range(per_shift):
                constraints.append(
                    NotEqual(var(d, shifts - 1, a), var(d + 1, 0, b))
                )
    return CspInstance(
        n=n,
        m=nurses,
        index_tuples=index_tuples,
        constraints=tuple(constraints),
        fixed=(None,) * n,
    )


def build_maxcut(n_vertices: int, weighted_edges) -> CspInstance:
    """2-coloring with weighted not-equals, maximization mode."""
    constraints = tuple(
        NotEqual(min(u, v), max(u, v), weight=float(w)) for u, v, w in weighted_edges
    )
    return CspInstance(
        n=n_vertices,
        m=2,
        index_tuples=tuple((v,) for v in range(n_vertices)),
        constraints=constraints,
        fixed=(None,) * n_vertices,
        mode="maximization",
    )
