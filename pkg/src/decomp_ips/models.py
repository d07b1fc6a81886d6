"""Hierarchical model structure: generating classes, perfect sequences,
spanning families of decomposable submodels, and the product-form
maximum-entropy extension of consistent marginals.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tables import DenseTable, Schema, marginalize

__all__ = [
    "GeneratingClass",
    "PerfectSequence",
    "SpanningFamily",
    "SpanningReport",
    "NotReducedError",
    "reduce",
    "is_submodel",
    "has_rip",
    "find_perfect_sequence",
    "greedy_spanning",
    "validate_spanning",
    "max_entropy_extension",
    "cycle_model",
    "model_to_json",
    "model_from_json",
    "family_to_json",
    "family_from_json",
]


class NotReducedError(ValueError):
    """A generator is contained in another generator."""


def _fs(gen: Iterable) -> frozenset[str]:
    return frozenset(str(v) for v in gen)


def _label(gen: frozenset[str]) -> str:
    return "".join(sorted(gen)) if all(len(v) == 1 for v in gen) else "{" + ",".join(sorted(gen)) + "}"


@dataclass(frozen=True)
class GeneratingClass:
    """Reduced family of generators; input order is kept for tie-breaking."""

    generators: tuple[frozenset[str], ...]

    def __init__(self, generators: Iterable[Iterable[str]]):
        gens = tuple(_fs(g) for g in generators)
        if any(not g for g in gens):
            raise ValueError("generators must be nonempty")
        if len(set(gens)) != len(gens):
            raise NotReducedError("duplicate generator")
        for a in gens:
            for b in gens:
                if a is not b and a < b:
                    raise NotReducedError(f"generator {_label(a)} is contained in {_label(b)}")
        object.__setattr__(self, "generators", gens)

    def __len__(self):
        return len(self.generators)

    def __iter__(self):
        return iter(self.generators)

    def __repr__(self):
        return "GeneratingClass([" + ", ".join(_label(g) for g in self.generators) + "])"

    @property
    def variables(self) -> frozenset[str]:
        return frozenset().union(*self.generators)

    def same_as(self, other: "GeneratingClass") -> bool:
        """Set equality, ignoring order."""
        return set(self.generators) == set(other.generators)


def reduce(generators: Iterable[Iterable[str]]) -> GeneratingClass:
    """Drop generators contained in others (and duplicates)."""
    gens: list[frozenset[str]] = []
    for g in map(_fs, generators):
        if g and g not in gens:
            gens.append(g)
    keep = [g for g in gens if not any(g < h for h in gens)]
    return GeneratingClass(keep)


def is_submodel(child: GeneratingClass, parent: GeneratingClass) -> bool:
    return all(any(c <= p for p in parent) for c in child)


def _separators(order: Sequence[frozenset[str]]) -> list[frozenset[str]]:
    seps = []
    seen: frozenset[str] = frozenset()
    for j, c in enumerate(order):
        if j:
            seps.append(c & seen)
        seen = seen | c
    return seps


def has_rip(order: Sequence[Iterable[str]]) -> bool:
    """Whether this exact ordering satisfies the running intersection property."""
    order = [_fs(c) for c in order]
    seen: frozenset[str] = frozenset()
    for j, c in enumerate(order):
        if j and not any(c & seen <= order[k] for k in range(j)):
            return False
        seen = seen | c
    return True


@dataclass(frozen=True)
class PerfectSequence:
    order: tuple[frozenset[str], ...]
    separators: tuple[frozenset[str], ...]

    @classmethod
    def from_order(cls, order: Sequence[Iterable[str]]) -> "PerfectSequence":
        order = tuple(_fs(c) for c in order)
        if not has_rip(order):
            raise ValueError("ordering does not satisfy the running intersection property")
        return cls(order, tuple(_separators(order)))

    @property
    def connected(self) -> bool:
        return all(self.separators)

    @property
    def generating_class(self) -> GeneratingClass:
        return GeneratingClass(self.order)

    @property
    def variables(self) -> frozenset[str]:
        return frozenset().union(*self.order)

    def separator_multiset(self) -> Counter:
        return Counter(self.separators)

    def __repr__(self):
        return "PerfectSequence(" + ", ".join(_label(c) for c in self.order) + ")"


def find_perfect_sequence(c: GeneratingClass) -> PerfectSequence | None:
    """A RIP ordering of ``c``, or ``None`` when the model is not decomposable.

    Leaves are eliminated one at a time: a generator whose intersection with
    the union of the remaining ones lies inside a single remaining generator.
    Candidates are scanned from the highest input index down, and the
    elimination order is reversed at the end.
    """
    if not isinstance(c, GeneratingClass):
        c = GeneratingClass(c)
    remaining = list(c.generators)
    eliminated: list[frozenset[str]] = []
    while len(remaining) > 1:
        for idx in range(len(remaining) - 1, -1, -1):
            gen = remaining[idx]
            others = remaining[:idx] + remaining[idx + 1:]
            inter = gen & frozenset().union(*others)
            if any(inter <= o for o in others):
                eliminated.append(remaining.pop(idx))
                break
        else:
            return None
    eliminated.extend(remaining)
    return PerfectSequence.from_order(eliminated[::-1])


def _is_connected_decomposable(gens: Sequence[frozenset[str]]) -> bool:
    ps = find_perfect_sequence(GeneratingClass(gens))
    return ps is not None and ps.connected


@dataclass(frozen=True)
class SpanningFamily:
    """Connected decomposable submodels jointly covering a parent model."""

    parent: GeneratingClass
    members: tuple[PerfectSequence, ...]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @classmethod
    def from_classes(cls, parent: GeneratingClass, classes: Iterable) -> "SpanningFamily":
        """Build from generating classes (perfect sequences are found here).

        Raises ``ValueError`` for a member that is not a connected
        decomposable submodel of ``parent``; coverage is left to
        :func:`validate_spanning`.
        """
        members = []
        for k, gc in enumerate(classes):
            gc = gc if isinstance(gc, GeneratingClass) else GeneratingClass(gc)
            ps = find_perfect_sequence(gc)
            if ps is None:
                raise ValueError(f"member {k} {gc!r} is not decomposable")
            if not ps.connected:
                raise ValueError(f"member {k} {gc!r} is disconnected")
            if not is_submodel(gc, parent):
                raise ValueError(f"member {k} {gc!r} is not a submodel of {parent!r}")
            members.append(ps)
        return cls(parent, tuple(members))


def _chain_order(gens: Sequence[frozenset[str]], start: int) -> list[int]:
    order = [start]
    left = [i for i in range(len(gens)) if i != start]
    while left:
        prev = gens[order[-1]]
        best = max(left, key=lambda i: (len(prev & gens[i]), -i))
        order.append(best)
        left.remove(best)
    return order


def greedy_spanning(c: GeneratingClass) -> SpanningFamily:
    """Spanning family from the greedy chain-and-accept procedure.

    For every starting generator, generators are chained so that each next
    one shares as many variables as possible with its predecessor (ties go
    to the lower input index) and accepted whenever the accepted set stays
    a connected decomposable model. The candidates are then combined by
    greedy set cover: the candidate covering the most uncovered parent
    generators wins, ties going to the lower starting index.
    """
    gens = list(c.generators)
    if not gens:
        raise ValueError("empty generating class")
    candidates: list[list[frozenset[str]]] = []
    for start in range(len(gens)):
        order = _chain_order(gens, start)
        accepted = [gens[order[0]]]
        for i in order[1:]:
            if _is_connected_decomposable(accepted + [gens[i]]):
                accepted.append(gens[i])
        candidates.append(accepted)

    def covers(cand, g):
        return any(g <= h for h in cand)

    uncovered = set(gens)
    chosen: list[list[frozenset[str]]] = []
    while uncovered:
        gains = [sum(covers(cand, g) for g in uncovered) for cand in candidates]
        best = max(range(len(candidates)), key=lambda k: (gains[k], len(candidates[k]), -k))
        if gains[best] == 0:  # pragma: no cover - singletons always cover themselves
            raise RuntimeError("greedy spanning made no progress")
        chosen.append(candidates[best])
        uncovered = {g for g in uncovered if not covers(candidates[best], g)}
    return SpanningFamily.from_classes(c, [GeneratingClass(m) for m in chosen])


@dataclass
class SpanningReport:
    members: list[dict] = field(default_factory=list)
    uncovered: list[frozenset[str]] = field(default_factory=list)
    uncovered_exact: list[frozenset[str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.members) and not self.uncovered and all(
            m["decomposable"] and m["connected"] and m["submodel"] for m in self.members
        )

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "members": self.members,
            "uncovered": [sorted(g) for g in self.uncovered],
            "uncovered_by_membership": [sorted(g) for g in self.uncovered_exact],
        }


def validate_spanning(c: GeneratingClass, fam) -> SpanningReport:
    """Check each member and the coverage of ``c``.

    ``fam`` may be a :class:`SpanningFamily` or any iterable of generator
    families. Coverage counts a parent generator as covered when it is a
    subset of some member generator; exact membership is reported too.
    """
    classes = [m.order if isinstance(m, PerfectSequence) else m for m in fam]
    report = SpanningReport()
    member_gens: list[frozenset[str]] = []
    for k, gens in enumerate(classes):
        gens = [_fs(g) for g in gens]
        entry = {"index": k, "generators": [sorted(g) for g in gens]}
        try:
            ps = find_perfect_sequence(GeneratingClass(gens))
        except NotReducedError:
            ps = None
        entry["decomposable"] = ps is not None
        entry["connected"] = ps is not None and ps.connected
        entry["submodel"] = all(any(g <= p for p in c) for g in gens)
        report.members.append(entry)
        member_gens.extend(gens)
    report.uncovered = [g for g in c if not any(g <= h for h in member_gens)]
    report.uncovered_exact = [g for g in c if g not in member_gens]
    return report


# --- product-form extension -------------------------------------------------


def _broadcast(t: DenseTable, schema: Schema) -> np.ndarray:
    """``t.values`` reshaped so it broadcasts against ``schema.shape``."""
    names = [n for n in schema.names if n in t.schema]
    arr = t.transpose(names).values if list(t.schema.names) != names else t.values
    shape = [schema.levels_of(n) if n in t.schema else 1 for n in schema.names]
    return arr.reshape(shape)


def _union_schema(tables: Iterable[DenseTable]) -> Schema:
    seen = {}
    for t in tables:
        for v in t.schema.variables:
            if v.name in seen and seen[v.name] != v:
                raise ValueError(f"variable {v.name!r} has inconsistent level counts")
            seen.setdefault(v.name, v)
    return Schema(tuple(seen.values()))


def max_entropy_extension(
    marginals: Mapping[frozenset[str], DenseTable],
    ps: PerfectSequence,
    schema: Schema | None = None,
    atol: float = 1e-10,
) -> DenseTable:
    """Product-form extension ``prod_C m_C(i_C) / prod_S m_S(i_S)``.

    ``marginals`` maps each generator of ``ps`` to its table; separator
    tables are derived from the generator tables. Inputs need not be
    normalized but must agree on overlaps within ``atol`` (relative to the
    largest total). Cells with a zero generator factor are 0.
    """
    tabs = []
    for c in ps.order:
        if c not in marginals:
            raise KeyError(f"missing marginal for {_label(c)}")
        t = marginals[c]
        if set(t.schema.names) != set(c):
            raise ValueError(f"marginal for {_label(c)} is over {t.schema.names}")
        tabs.append(t)
    scale = max(1.0, max(t.total() for t in tabs))
    for a in range(len(tabs)):
        for b in range(a + 1, len(tabs)):
            common = ps.order[a] & ps.order[b]
            ma = marginalize(tabs[a], common)
            mb = marginalize(tabs[b], common)
            gap = np.max(np.abs(ma.values - mb.transpose(ma.schema.names).values))
            if gap > atol * scale:
                raise ValueError(
                    f"inconsistent marginals on {sorted(common)} "
                    f"({_label(ps.order[a])} vs {_label(ps.order[b])}, gap {gap:.3g})"
                )
    out_schema = _union_schema(tabs)
    if schema is not None:
        out_schema = schema.sub(out_schema.names)

    log_sum = np.zeros(out_schema.shape)
    zero = np.zeros(out_schema.shape, dtype=bool)
    with np.errstate(divide="ignore"):
        for t in tabs:
            a = _broadcast(t, out_schema)
            zero = zero | (a == 0)
            log_sum = log_sum + np.log(np.where(a > 0, a, 1.0))
        for j, s in enumerate(ps.separators, start=1):
            b = _broadcast(marginalize(tabs[j], s), out_schema)
            if np.any((b == 0) & ~zero):
                raise ValueError(f"zero separator marginal on {sorted(s)} under a positive numerator")
            log_sum = log_sum - np.log(np.where(b > 0, b, 1.0))
    return DenseTable(out_schema, np.where(zero, 0.0, np.exp(log_sum)))


def cycle_model(names: Sequence[str]) -> GeneratingClass:
    """The cycle model ``{12, 23, ..., (J-1)J, J1}`` over ``names``."""
    names = list(names)
    if len(names) < 3:
        raise ValueError("a cycle needs at least three variables")
    return GeneratingClass(
        [(names[k], names[k + 1]) for k in range(len(names) - 1)] + [(names[0], names[-1])]
    )


# --- JSON -------------------------------------------------------------------


def _ordered(gen: frozenset[str], order: Sequence[str] | None) -> list[str]:
    if order is None:
        return sorted(gen)
    return sorted(gen, key=lambda n: (order.index(n) if n in order else len(order), n))


def model_to_json(c, order: Sequence[str] | None = None) -> str:
    gens = c.order if isinstance(c, PerfectSequence) else c.generators
    return json.dumps([_ordered(g, order) for g in gens])


def model_from_json(text: str) -> GeneratingClass:
    obj = json.loads(text)
    if not isinstance(obj, list) or not all(isinstance(g, list) for g in obj):
        raise ValueError("model JSON must be a list of generator lists")
    return GeneratingClass(obj)


def family_to_json(fam: SpanningFamily, order: Sequence[str] | None = None) -> str:
    return json.dumps([[_ordered(g, order) for g in m.order] for m in fam.members])


def family_from_json(text: str, parent: GeneratingClass) -> SpanningFamily:
    obj = json.loads(text)
    if isinstance(obj, dict) and "members" in obj:
        obj = obj["members"]
    if not isinstance(obj, list):
        raise ValueError("spanning-family JSON must be a list of models")
    return SpanningFamily.from_classes(parent, [GeneratingClass(m) for m in obj])
