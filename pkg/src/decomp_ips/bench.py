"""Random cycle-model experiments: junction-tree submodel IPS against
conventional IPS, reported as step and timing statistics per (J, I).
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .cycle_junction import CycleSpec, edge_marginals, fit_cycle_tree
from .engines import FitConfig, fit_conventional
from .models import cycle_model
from .tables import Schema, from_counts

__all__ = [
    "ExperimentPlan",
    "RunRecord",
    "SummaryRow",
    "rng_for",
    "random_table",
    "clique_sets",
    "run_replicate",
    "run_experiment",
    "summarize",
    "records_to_csv",
    "summary_to_csv",
    "summary_to_markdown",
]

MAX_COUNT = 10**6
_WARMUP = 2**32 - 1  # stream key reserved for the untimed warm-up


@dataclass(frozen=True)
class ExperimentPlan:
    dims: tuple[int, ...] = (4, 5, 6, 7, 8)
    levels: tuple[int, ...] = (2, 3, 4)
    replicates: int = 1000
    seed: int = 0
    tolerance: float = 1e-6
    max_cycles: int = 10000

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if any(J < 4 for J in self.dims):
            raise ValueError("cycle dimensions must be >= 4")
        if any(I < 2 for I in self.levels):
            raise ValueError("level counts must be >= 2")


@dataclass
class RunRecord:
    J: int
    I: int
    replicate: int
    algorithm: str
    steps: int
    wall_time_ns: int
    converged: bool
    cell_touches: int
    max_abs_diff: float = float("nan")


def rng_for(seed: int, J: int, I: int, replicate: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, J, I, replicate)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, J, I, replicate])))


def random_table(schema: Schema, rng: np.random.Generator) -> np.ndarray:
    """Cell counts drawn i.i.d. uniformly from ``1 .. 10**6``."""
    return rng.integers(1, MAX_COUNT, size=schema.shape, endpoint=True)


def clique_sets(names: Sequence[str]) -> tuple[frozenset[str], ...]:
    """Cliques ``{1, j-1, j}`` of the chorded cycle, for the L1 criterion."""
    return tuple(frozenset((names[0], names[j - 2], names[j - 1])) for j in range(3, len(names) + 1))


def run_replicate(J: int, I: int, counts: np.ndarray, plan: ExperimentPlan, replicate: int = 0) -> list[RunRecord]:
    """Fit one table with both engines; steps are counted per update."""
    names = [str(v) for v in range(1, J + 1)]
    schema = Schema.uniform(names, I)
    r = from_counts(schema, counts)
    cfg_tree = FitConfig(tolerance=plan.tolerance, max_cycles=plan.max_cycles, criterion="clique-l1", check="update")
    cfg_conv = FitConfig(
        tolerance=plan.tolerance,
        max_cycles=plan.max_cycles,
        criterion="clique-l1",
        check="update",
        criterion_sets=clique_sets(names),
    )
    edges = edge_marginals(r)
    tree = fit_cycle_tree(CycleSpec(J, I), edges, cfg_tree, schema=schema)
    conv = fit_conventional(r, cycle_model(names), cfg_conv)
    diff = float(np.max(np.abs(tree.p_hat.values - conv.p_hat.values)))
    return [
        RunRecord(J, I, replicate, "cycle-tree", tree.updates, tree.wall_time_ns, tree.converged, tree.cell_touches, diff),
        RunRecord(J, I, replicate, "conventional", conv.updates, conv.wall_time_ns, conv.converged, conv.cell_touches, diff),
    ]


def run_experiment(
    plan: ExperimentPlan, progress: Callable[[int, int, int], None] | None = None
) -> list[RunRecord]:
    """All (J, I, replicate) runs of ``plan``.

    Each (J, I) cell starts with an untimed warm-up pair on its own stream.
    """
    records: list[RunRecord] = []
    for J in plan.dims:
        for I in plan.levels:
            schema = Schema.uniform([str(v) for v in range(1, J + 1)], I)
            run_replicate(J, I, random_table(schema, rng_for(plan.seed, J, I, _WARMUP)), plan)
            for rep in range(plan.replicates):
                counts = random_table(schema, rng_for(plan.seed, J, I, rep))
                records.extend(run_replicate(J, I, counts, plan, rep))
            if progress is not None:
                progress(J, I, plan.replicates)
    return records


@dataclass
class SummaryRow:
    J: int
    I: int
    n: int
    tau_conv: float
    tau: float
    pr_faster: float
    nu_conv: float
    nu: float
    ratio: float
    touches_conv: float = 0.0
    touches: float = 0.0
    all_converged: bool = True
    max_abs_diff: float = 0.0


def summarize(records: Iterable[RunRecord]) -> list[SummaryRow]:
    """Per-(J, I) means of times, step counts and cell touches.

    Times are seconds. Cells with no paired runs are omitted.
    """
    cells: dict[tuple[int, int], dict[int, dict[str, RunRecord]]] = {}
    for rec in records:
        cells.setdefault((rec.J, rec.I), {}).setdefault(rec.replicate, {})[rec.algorithm] = rec
    rows = []
    for (J, I), reps in sorted(cells.items()):
        pairs = [(d["cycle-tree"], d["conventional"]) for d in reps.values() if len(d) == 2]
        if not pairs:
            continue
        tree, conv = zip(*pairs)
        nu = float(np.mean([t.steps for t in tree]))
        nu_conv = float(np.mean([c.steps for c in conv]))
        rows.append(
            SummaryRow(
                J=J,
                I=I,
                n=len(pairs),
                tau_conv=float(np.mean([c.wall_time_ns for c in conv])) / 1e9,
                tau=float(np.mean([t.wall_time_ns for t in tree])) / 1e9,
                pr_faster=float(np.mean([t.wall_time_ns < c.wall_time_ns for t, c in pairs])),
                nu_conv=nu_conv,
                nu=nu,
                ratio=nu / nu_conv,
                touches_conv=float(np.mean([c.cell_touches for c in conv])),
                touches=float(np.mean([t.cell_touches for t in tree])),
                all_converged=all(t.converged and c.converged for t, c in pairs),
                max_abs_diff=float(max(t.max_abs_diff for t in tree)),
            )
        )
    return rows


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def records_to_csv(records: Sequence[RunRecord]) -> str:
    return _csv([asdict(r) for r in records])


def summary_to_csv(rows: Sequence[SummaryRow]) -> str:
    return _csv([asdict(r) for r in rows])


def summary_to_markdown(rows: Sequence[SummaryRow], seed: int | None = None) -> str:
    lines = []
    for I in sorted({r.I for r in rows}):
        lines.append(f"### I = {I}")
        lines.append("")
        lines.append("| Dim | tau_conv (s) | tau (s) | Pr(tau < tau_conv) | nu_conv | nu | nu/nu_conv |")
        lines.append("|---:|---:|---:|---:|---:|---:|---:|")
        for r in rows:
            if r.I == I:
                lines.append(
                    f"| {r.J} | {r.tau_conv:.4f} | {r.tau:.4f} | {r.pr_faster:.3f} | "
                    f"{r.nu_conv:.3f} | {r.nu:.3f} | {r.ratio:.3f} |"
                )
        lines.append("")
    if seed is not None:
        lines.append(f"seed = {seed}, replicates per cell = {rows[0].n if rows else 0}")
        lines.append("")
    return "\n".join(lines)
