"""Dense multiway contingency tables.

A table is a nonnegative array over the cell lattice of a :class:`Schema`.
Axes follow the schema's variable order, so the flat (C-order) layout is
mixed-radix with the last variable varying fastest.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Variable",
    "Schema",
    "DenseTable",
    "from_counts",
    "marginalize",
    "normalize",
    "kl_divergence",
    "table_to_json",
    "table_from_json",
    "table_to_csv",
    "table_from_csv",
]

_INT_LIMIT = np.iinfo(np.int64).max


@dataclass(frozen=True)
class Variable:
    name: str
    levels: int


@dataclass(frozen=True)
class Schema:
    """Ordered variables with their level counts."""

    variables: tuple[Variable, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("variable names must be nonempty strings")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        size = 1
        for v in self.variables:
            if int(v.levels) < 1:
                raise ValueError(f"variable {v.name!r} needs at least one level")
            size *= int(v.levels)
            if size > _INT_LIMIT:
                raise ValueError("cell count exceeds machine integer range")

    @classmethod
    def of(cls, spec: dict[str, int] | Iterable[tuple[str, int]]) -> "Schema":
        """Build from ``{"A": 2, "B": 3}`` or ``[("A", 2), ("B", 3)]``."""
        items = spec.items() if isinstance(spec, dict) else spec
        return cls(tuple(Variable(str(n), int(k)) for n, k in items))

    @classmethod
    def uniform(cls, names: Sequence[str], levels: int) -> "Schema":
        return cls(tuple(Variable(str(n), int(levels)) for n in names))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(v.levels) for v in self.variables)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __len__(self):
        return len(self.variables)

    def __contains__(self, name):
        return name in self.names

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def axes(self, names: Iterable[str]) -> tuple[int, ...]:
        """Axes of ``names`` in schema order (duplicates collapse)."""
        return tuple(sorted({self.axis(n) for n in names}))

    def sub(self, names: Iterable[str]) -> "Schema":
        """Restriction to ``names``, keeping the schema's relative order."""
        return Schema(tuple(self.variables[a] for a in self.axes(names)))

    def levels_of(self, name: str) -> int:
        return self.shape[self.axis(name)]

    def ravel(self, cell: Sequence[int]) -> int:
        """Flat position of a cell given as 0-based level indices."""
        if len(cell) != len(self):
            raise ValueError("cell index length does not match schema")
        for i, k in zip(cell, self.shape):
            if not 0 <= int(i) < k:
                raise IndexError(f"level index {i} out of range for {k} levels")
        return int(np.ravel_multi_index(tuple(int(i) for i in cell), self.shape))

    def unravel(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))


class DenseTable:
    """Immutable nonnegative array over a schema's cells.

    ``values`` is shaped like ``schema.shape``; ``flat`` is the canonical
    1-D view. Inputs are copied and frozen.
    """

    __slots__ = ("schema", "values")

    def __init__(self, schema: Schema, values):
        arr = np.array(values, dtype=np.float64)
        if arr.size != schema.size:
            raise ValueError(
                f"expected {schema.size} values for schema {schema.names}, got {arr.size}"
            )
        arr = arr.reshape(schema.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("table values must be finite")
        if np.any(arr < 0):
            raise ValueError("table values must be nonnegative")
        arr.setflags(write=False)
        self.schema = schema
        self.values = arr

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def total(self) -> float:
        return float(self.values.sum())

    def __getitem__(self, cell):
        return float(self.values[tuple(cell)])

    def __repr__(self):
        return f"DenseTable({self.schema.names}, shape={self.schema.shape}, total={self.total():.6g})"

    def allclose(self, other: "DenseTable", atol: float = 1e-12) -> bool:
        return self.schema == other.schema and bool(
            np.allclose(self.values, other.values, rtol=0.0, atol=atol)
        )

    def transpose(self, names: Sequence[str]) -> "DenseTable":
        """Same table with axes reordered to ``names``."""
        if sorted(names) != sorted(self.schema.names):
            raise ValueError("transpose needs a permutation of the schema variables")
        perm = [self.schema.axis(n) for n in names]
        schema = Schema(tuple(self.schema.variables[a] for a in perm))
        return DenseTable(schema, np.transpose(self.values, perm))


def from_counts(schema: Schema, counts) -> DenseTable:
    """Relative frequencies ``r(i) = n(i) / n`` from cell counts."""
    arr = np.asarray(counts)
    if arr.size != schema.size:
        raise ValueError(f"length mismatch: {arr.size} counts for {schema.size} cells")
    arr = arr.astype(np.float64).reshape(schema.shape)
    if np.any(arr < 0):
        raise ValueError("negative count")
    n = arr.sum()
    if n <= 0:
        raise ValueError("all-zero counts")
    return DenseTable(schema, arr / n)


def marginalize(t: DenseTable, names: Iterable[str]) -> DenseTable:
    """Marginal table on ``names``; an empty set gives the scalar total."""
    keep = t.schema.axes(names)
    drop = tuple(a for a in range(len(t.schema)) if a not in keep)
    sub = Schema(tuple(t.schema.variables[a] for a in keep))
    return DenseTable(sub, t.values.sum(axis=drop))


def normalize(t: DenseTable) -> DenseTable:
    total = t.values.sum()
    if total <= 0:
        raise ValueError("cannot normalize a table with zero total")
    return DenseTable(t.schema, t.values / total)


def kl_divergence(p: DenseTable, q: DenseTable) -> float:
    """``I(p:q) = sum p log(p/q)`` in nats.

    Uses ``0 log 0 = 0`` and returns ``math.inf`` when ``p`` puts mass on a
    cell where ``q`` is zero.
    """
    if p.schema != q.schema:
        raise ValueError("KL divergence needs tables on the same schema")
    for name, t in (("p", p), ("q", q)):
        if abs(t.total() - 1.0) > 1e-8:
            raise ValueError(f"{name} is not normalized (total {t.total()!r})")
    pv, qv = p.flat, q.flat
    support = pv > 0
    if np.any(qv[support] == 0):
        return math.inf
    return float(np.sum(pv[support] * np.log(pv[support] / qv[support])))


# --- file formats -----------------------------------------------------------


def _schema_json(schema: Schema) -> list[dict]:
    return [{"name": v.name, "levels": v.levels} for v in schema.variables]


def schema_from_json(obj) -> Schema:
    return Schema(tuple(Variable(str(v["name"]), int(v["levels"])) for v in obj))


def table_to_json(t: DenseTable, key: str = "counts") -> str:
    values = t.flat.tolist()
    if key == "counts" and all(float(x).is_integer() for x in values):
        values = [int(x) for x in values]
    return json.dumps({"variables": _schema_json(t.schema), key: values})


def table_from_json(text: str, raw: bool = False) -> DenseTable:
    """Read table JSON.

    A ``counts`` payload is turned into relative frequencies unless ``raw``;
    a ``values`` payload is taken as is.
    """
    obj = json.loads(text)
    try:
        schema = schema_from_json(obj["variables"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed table JSON: {exc}") from exc
    if "counts" in obj:
        if raw:
            return DenseTable(schema, obj["counts"])
        return from_counts(schema, obj["counts"])
    if "values" in obj:
        return DenseTable(schema, obj["values"])
    raise ValueError("table JSON needs a 'counts' or 'values' field")


def table_to_csv(t: DenseTable, value_column: str = "count") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*t.schema.names, value_column])
    for flat, value in enumerate(t.flat):
        v = float(value)
        w.writerow([*t.schema.unravel(flat), int(v) if v.is_integer() else repr(v)])
    return buf.getvalue()


def table_from_csv(
    text: str, schema: Schema | None = None, raw: bool = False, value_column: str = "count"
) -> DenseTable:
    """Read CSV long form (one row per cell plus a ``value_column``).

    Without ``schema`` the level count of each variable is one more than the
    largest index seen. Missing cells count as zero.
    """
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    if value_column not in header:
        raise ValueError(f"CSV needs a {value_column!r} column")
    ci = header.index(value_column)
    names = [h for i, h in enumerate(header) if i != ci]
    cells = [[int(r[header.index(n)]) for n in names] for r in body]
    if schema is None:
        levels = [max(c[k] for c in cells) + 1 for k in range(len(names))]
        schema = Schema.of(list(zip(names, levels)))
    elif list(schema.names) != names:
        schema_names = list(schema.names)
        if sorted(schema_names) != sorted(names):
            raise ValueError("CSV columns do not match schema")
        perm = [names.index(n) for n in schema_names]
        cells = [[c[k] for k in perm] for c in cells]
    arr = np.zeros(schema.shape)
    for c, r in zip(cells, body):
        arr[tuple(c)] += float(r[ci])
    return DenseTable(schema, arr) if raw else from_counts(schema, arr)
