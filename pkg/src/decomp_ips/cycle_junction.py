"""Junction-tree submodel IPS for J-way cycle models.

The cycle ``{12, 23, ..., (J-1)J, J1}`` is triangulated by the chords
``{1,3}, ..., {1,J-1}``, giving the chain of cliques ``C_j = {1, j-1, j}``
for ``j = 3..J`` joined by separators ``{1, j}``. Only the clique
potentials are stored. Vertices use the 1-based labels of the cycle
throughout this module; vertex ``v`` is schema variable ``v - 1``.

Each sweep refits one of two path submodels. ``propagate_m1`` fits the
path ``M \\ {1J}`` with a forward pass along the chain. ``propagate_m2``
fits ``M \\ {J'-1, J'}``: it sweeps forward to ``C_{J'-1}``, backward from
``C_J`` to ``C_{J'+1}`` and finishes at ``C_{J'}`` with both incoming
messages. Inside a clique update every iterate marginal comes from that
clique's own potential, so potentials of different cliques need not agree
on their shared separator until convergence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engines import FitConfig, FitReport, SupportError, TraceRow
from .models import GeneratingClass
from .tables import DenseTable, Schema, marginalize

__all__ = [
    "CycleSpec",
    "TriangulatedStructure",
    "PotentialSet",
    "triangulate_cycle",
    "edge_marginals",
    "init_potentials",
    "propagate_m1",
    "propagate_m2",
    "implied_joint",
    "fit_cycle_tree",
    "cycle_order",
    "edges_to_json",
    "edges_from_json",
]


@dataclass(frozen=True)
class CycleSpec:
    J: int
    levels: tuple[int, ...]

    def __init__(self, J: int, levels: int | Sequence[int] = 2):
        J = int(J)
        if J < 4:
            raise ValueError("cycle models need J >= 4")
        lv = (int(levels),) * J if np.isscalar(levels) else tuple(int(k) for k in levels)
        if len(lv) != J:
            raise ValueError("need one level count per vertex")
        if min(lv) < 2:
            raise ValueError("every vertex needs at least two levels")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "levels", lv)

    def level(self, v: int) -> int:
        return self.levels[v - 1]


@dataclass(frozen=True)
class TriangulatedStructure:
    spec: CycleSpec
    cliques: tuple[tuple[int, int, int], ...]
    separators: tuple[tuple[int, int], ...]
    j_prime: int

    @property
    def J(self) -> int:
        return self.spec.J

    def deleted_edges(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Edges left out by the first and second submodel."""
        return (1, self.J), (self.j_prime - 1, self.j_prime)


def triangulate_cycle(spec: CycleSpec, j_prime: int | None = None) -> TriangulatedStructure:
    """Chord the cycle from vertex 1; ``j_prime`` defaults to ``J // 2 + 1``."""
    J = spec.J
    jp = J // 2 + 1 if j_prime is None else int(j_prime)
    if not 3 <= jp <= J - 1:
        raise ValueError(f"J' must lie in [3, {J - 1}]")
    cliques = tuple((1, j - 1, j) for j in range(3, J + 1))
    seps = tuple((1, j) for j in range(3, J))
    return TriangulatedStructure(spec, cliques, seps, jp)


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class PotentialSet:
    """Clique potentials, separator messages and fixed data marginals.

    ``cliques[j]`` has axes ``(1, j-1, j)``; ``messages[j]`` holds
    ``r(i_{1j})`` with axes ``(1, j)``. ``messages[2]`` and ``messages[J]``
    are the data marginals on the edges ``{1,2}`` and ``{1,J}`` and are
    never replaced.
    """

    structure: TriangulatedStructure
    cliques: dict[int, np.ndarray]
    messages: dict[int, np.ndarray]
    edges: dict[tuple[int, int], np.ndarray]
    singles: dict[int, np.ndarray]
    touches: int = 0

    def copy(self) -> "PotentialSet":
        return PotentialSet(
            self.structure,
            {j: a.copy() for j, a in self.cliques.items()},
            {j: a.copy() for j, a in self.messages.items()},
            self.edges,
            self.singles,
            self.touches,
        )

    def edge(self, a: int, b: int) -> np.ndarray:
        """Data marginal on ``{a, b}`` with axes ``(a, b)``."""
        arr = self.edges[_edge_key(a, b)]
        return arr if a < b else arr.T

    def distance(self, other: "PotentialSet") -> float:
        """L1 distance summed over all clique potentials."""
        return float(sum(np.abs(self.cliques[j] - other.cliques[j]).sum() for j in self.cliques))


def cycle_edges(J: int) -> list[tuple[int, int]]:
    return [(k, k + 1) for k in range(1, J)] + [(1, J)]


def edge_marginals(table: DenseTable, order: Sequence[str] | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Edge marginals of a full table; vertex ``v`` is ``order[v-1]``."""
    names = list(order) if order is not None else list(table.schema.names)
    out = {}
    for a, b in cycle_edges(len(names)):
        m = marginalize(table, [names[a - 1], names[b - 1]]).transpose([names[a - 1], names[b - 1]])
        out[(a, b)] = np.array(m.values)
    return out


def init_potentials(
    ts: TriangulatedStructure,
    r_edges: Mapping[tuple[int, int], np.ndarray],
    atol: float = 1e-10,
) -> PotentialSet:
    """Uniform clique potentials plus the fixed data marginals.

    Each potential is ``1 / |I_C|`` per cell, so the implied joint is the
    uniform distribution. Edge marginals must agree on every shared vertex
    within ``atol``.
    """
    spec = ts.spec
    J = spec.J
    edges = {}
    for a, b in cycle_edges(J):
        key = _edge_key(a, b)
        arr = r_edges.get(key)
        if arr is None:
            raise KeyError(f"missing edge marginal {key}")
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (spec.level(key[0]), spec.level(key[1])):
            raise ValueError(f"edge {key} marginal has shape {arr.shape}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError(f"edge {key} marginal must be finite and nonnegative")
        edges[key] = arr
    singles = {}
    for v in range(1, J + 1):
        views = []
        for (a, b), arr in edges.items():
            if a == v:
                views.append(arr.sum(axis=1))
            elif b == v:
                views.append(arr.sum(axis=0))
        for other in views[1:]:
            if np.max(np.abs(other - views[0])) > atol:
                raise ValueError(f"edge marginals disagree on vertex {v}")
        singles[v] = views[0]
    cliques = {}
    for (_, a, b) in ts.cliques:
        shape = (spec.level(1), spec.level(a), spec.level(b))
        cliques[b] = np.full(shape, 1.0 / np.prod(shape))
    messages = {2: edges[(1, 2)], J: edges[(1, J)]}
    return PotentialSet(ts, cliques, messages, edges, singles)


def _guard(q_marg: np.ndarray, target: np.ndarray):
    if np.any((q_marg == 0) & (target > 0)):
        raise SupportError("zero potential marginal under a positive data marginal")


def _div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b > 0)


def _forward(ps: PotentialSet, j: int, send: bool):
    """Refit ``C_j`` from the message on ``{1, j-1}`` and edge ``{j-1, j}``."""
    Q = ps.cliques[j]
    q_1a = Q.sum(axis=2)
    q_ab = Q.sum(axis=0)
    q_a = q_ab.sum(axis=1)
    msg = ps.messages[j - 1]
    e = ps.edge(j - 1, j)
    _guard(q_1a, msg)
    _guard(q_ab, e)
    target = msg[:, :, None] * _div(e, ps.singles[j - 1][:, None])[None, :, :]
    corr = _div(q_a[None, :, None], q_1a[:, :, None] * q_ab[None, :, :])
    Q = Q * target * corr
    ps.cliques[j] = Q
    ps.touches += Q.size
    if send:
        ps.messages[j] = Q.sum(axis=1)


def _backward(ps: PotentialSet, j: int):
    """Refit ``C_j`` from the message on ``{1, j}`` and edge ``{j-1, j}``."""
    Q = ps.cliques[j]
    q_1b = Q.sum(axis=1)
    q_ab = Q.sum(axis=0)
    q_b = q_ab.sum(axis=0)
    msg = ps.messages[j]
    e = ps.edge(j - 1, j)
    _guard(q_1b, msg)
    _guard(q_ab, e)
    target = msg[:, None, :] * _div(e, ps.singles[j][None, :])[None, :, :]
    corr = _div(q_b[None, None, :], q_1b[:, None, :] * q_ab[None, :, :])
    Q = Q * target * corr
    ps.cliques[j] = Q
    ps.touches += Q.size
    ps.messages[j - 1] = Q.sum(axis=2)


def _center(ps: PotentialSet, j: int):
    """Refit ``C_j`` from both incoming messages on ``{1, j-1}`` and ``{1, j}``."""
    Q = ps.cliques[j]
    q_1a = Q.sum(axis=2)
    q_1b = Q.sum(axis=1)
    q_1 = q_1a.sum(axis=1)
    m_a, m_b = ps.messages[j - 1], ps.messages[j]
    _guard(q_1a, m_a)
    _guard(q_1b, m_b)
    target = _div(m_a[:, :, None] * m_b[:, None, :], ps.singles[1][:, None, None])
    corr = _div(q_1[:, None, None], q_1a[:, :, None] * q_1b[:, None, :])
    Q = Q * target * corr
    ps.cliques[j] = Q
    ps.touches += Q.size


def propagate_m1(ps: PotentialSet) -> PotentialSet:
    """Sweep C_3 ... C_J, refitting the path submodel without edge ``{1,J}``."""
    out = ps.copy()
    J = out.structure.J
    for j in range(3, J + 1):
        _forward(out, j, send=j < J)
    return out


def propagate_m2(ps: PotentialSet) -> PotentialSet:
    """Refit the submodel without edge ``{J'-1, J'}``."""
    out = ps.copy()
    J, jp = out.structure.J, out.structure.j_prime
    for j in range(3, jp):
        _forward(out, j, send=True)
    for j in range(J, jp, -1):
        _backward(out, j)
    _center(out, jp)
    return out


def implied_joint(ps: PotentialSet, schema: Schema | None = None, normalized: bool = True) -> DenseTable:
    """Joint table ``Q_3 * prod_{j>3} Q_j / Q_j[1, j-1]`` over all J vertices.

    Each separator marginal is taken from the clique on its far side, so
    the product has the same total as ``Q_3``.
    """
    J = ps.structure.J
    spec = ps.structure.spec
    if schema is None:
        schema = Schema.of([(str(v), spec.level(v)) for v in range(1, J + 1)])
    log_joint = np.zeros((1,) * J)
    zero = np.zeros((1,) * J, dtype=bool)

    def place(arr, verts):
        shape = [1] * J
        for v in verts:
            shape[v - 1] = spec.level(v)
        return arr.reshape(shape)

    with np.errstate(divide="ignore"):
        for j in range(3, J + 1):
            Q = ps.cliques[j]
            num = place(Q, (1, j - 1, j))
            zero = zero | (num == 0)
            log_joint = log_joint + np.log(np.where(num > 0, num, 1.0))
            if j > 3:
                den = place(Q.sum(axis=2), (1, j - 1))
                log_joint = log_joint - np.log(np.where(den > 0, den, 1.0))
    joint = np.where(zero, 0.0, np.exp(log_joint))
    joint = np.broadcast_to(joint, schema.shape)
    if normalized:
        joint = joint / joint.sum()
    return DenseTable(schema, joint)


def fit_cycle_tree(
    spec: CycleSpec,
    r_edges: Mapping[tuple[int, int], np.ndarray],
    cfg: FitConfig = FitConfig(criterion="clique-l1"),
    j_prime: int | None = None,
    materialize: bool = True,
    schema: Schema | None = None,
) -> FitReport:
    """Alternate the two sweeps until the clique L1 change is small.

    With ``cfg.check == "cycle"`` one step is an (M1, M2) pair and the
    change is measured across the pair; with ``"update"`` every sweep is a
    step. The criterion is always the summed L1 change of the clique
    potentials. ``FitReport.extra["potentials"]`` holds the final
    :class:`PotentialSet`.
    """
    ts = triangulate_cycle(spec, j_prime)
    ps = init_potentials(ts, r_edges)
    sweeps = (propagate_m1, propagate_m2)
    trace: list[TraceRow] = []
    converged = False
    updates = 0
    cycle_start = ps
    t0 = time.perf_counter_ns()
    for cycle in range(1, cfg.max_cycles + 1):
        for sweep in sweeps:
            new = sweep(ps)
            updates += 1
            if cfg.check == "update":
                value = new.distance(ps)
                trace.append(TraceRow(cycle, updates, value, _mass(new), (1.0,)))
                if value <= cfg.tolerance:
                    converged = True
            ps = new
            if converged:
                break
        if converged:
            break
        if cfg.check == "cycle":
            value = ps.distance(cycle_start)
            trace.append(TraceRow(cycle, updates, value, _mass(ps), (1.0, 1.0)))
            if value <= cfg.tolerance:
                converged = True
                break
            cycle_start = ps
    wall = time.perf_counter_ns() - t0
    p_hat = implied_joint(ps, schema) if materialize else None
    return FitReport(
        p_hat=p_hat,
        cycles=cycle,
        updates=updates,
        converged=converged,
        trace=trace,
        wall_time_ns=wall,
        cell_touches=ps.touches,
        algorithm="cycle-tree",
        extra={"potentials": ps},
    )


def _mass(ps: PotentialSet) -> float:
    return float(ps.cliques[3].sum())


def cycle_order(c: GeneratingClass) -> list[str] | None:
    """Vertex order ``v_1, ..., v_J`` if ``c`` is a cycle of pairs with J >= 4.

    The order starts at the smallest name and walks towards the smaller of
    its two neighbours, so ``{12, 23, 34, 14}`` gives ``1, 2, 3, 4``.
    """
    gens = list(c.generators)
    if len(gens) < 4 or any(len(g) != 2 for g in gens):
        return None
    nbrs: dict[str, set[str]] = {}
    for g in gens:
        a, b = sorted(g)
        nbrs.setdefault(a, set()).add(b)
        nbrs.setdefault(b, set()).add(a)
    if len(nbrs) != len(gens) or any(len(s) != 2 for s in nbrs.values()):
        return None
    start = min(nbrs)
    order = [start, min(nbrs[start])]
    while len(order) < len(nbrs):
        nxt = [v for v in nbrs[order[-1]] if v != order[-2]]
        if nxt[0] == start:
            return None
        order.append(nxt[0])
    if start not in nbrs[order[-1]]:
        return None
    return order


def edges_to_json(spec: CycleSpec, r_edges: Mapping[tuple[int, int], np.ndarray], names: Sequence[str] | None = None) -> str:
    names = list(names) if names is not None else [str(v) for v in range(1, spec.J + 1)]
    return json.dumps(
        {
            "variables": [{"name": n, "levels": spec.level(v)} for v, n in enumerate(names, start=1)],
            "edges": [
                {"vars": [names[a - 1], names[b - 1]], "values": np.asarray(r_edges[(a, b)]).ravel().tolist()}
                for a, b in cycle_edges(spec.J)
            ],
        }
    )


def edges_from_json(text: str) -> tuple[CycleSpec, dict[tuple[int, int], np.ndarray], list[str]]:
    """Read an edge-marginal bundle; variables are listed in cycle order."""
    obj = json.loads(text)
    names = [v["name"] for v in obj["variables"]]
    levels = [int(v["levels"]) for v in obj["variables"]]
    spec = CycleSpec(len(names), levels)
    pos = {n: k + 1 for k, n in enumerate(names)}
    edges = {}
    for e in obj["edges"]:
        a, b = (pos[n] for n in e["vars"])
        arr = np.asarray(e["values"], dtype=float).reshape(spec.level(a), spec.level(b))
        key = _edge_key(a, b)
        edges[key] = arr if a < b else arr.T
    return spec, edges, names
