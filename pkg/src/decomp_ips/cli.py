"""Command line entry point: ``fit``, ``span``, ``bench`` and ``analyze-alpha``.

Exit codes: 0 success (and convergence for ``fit``), 1 input or usage
error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench as bench_mod
from .cycle_junction import CycleSpec, cycle_order, edge_marginals, fit_cycle_tree
from .engines import FitConfig, fit_conventional, fit_submodel_ips, report_to_json
from .local_analysis import diagnose, figure1_curves, perturb
from .models import (
    GeneratingClass,
    SpanningFamily,
    family_from_json,
    family_to_json,
    greedy_spanning,
    model_from_json,
    validate_spanning,
)
from .tables import DenseTable, marginalize, normalize, table_from_csv, table_from_json, table_to_csv

log = logging.getLogger("decomp_ips")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
ALGORITHMS = ("conventional", "submodel", "submodel-alpha0", "submodel-fixed:<alpha>", "cycle-tree")


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# --- input helpers -----------------------------------------------------------


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


def _load_table(path: str) -> DenseTable:
    text = _read(path)
    try:
        if path.lower().endswith(".csv"):
            return table_from_csv(text)
        return table_from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _load_model(path: str) -> GeneratingClass:
    try:
        return model_from_json(_read(path))
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _restrict(data: DenseTable, model: GeneratingClass) -> DenseTable:
    missing = model.variables - set(data.schema.names)
    if missing:
        raise InputError(f"model variables not in data: {sorted(missing)}")
    if len(model.variables) == len(data.schema):
        return data
    keep = [n for n in data.schema.names if n in model.variables]
    return normalize(marginalize(data, keep))


def _family(args, model: GeneratingClass) -> SpanningFamily:
    if args.submodels:
        try:
            fam = family_from_json(_read(args.submodels), model)
        except (ValueError, TypeError) as exc:
            raise InputError(f"{args.submodels}: {exc}") from exc
        report = validate_spanning(model, fam)
        if not report.ok:
            print(json.dumps(report.to_dict(), indent=2), file=sys.stderr)
            raise InputError("submodels do not span the model")
        return fam
    return greedy_spanning(model)


def _parse_algorithm(name: str) -> tuple[str, float]:
    if name.startswith("submodel-fixed:"):
        try:
            alpha = float(name.split(":", 1)[1])
        except ValueError as exc:
            raise InputError(f"bad alpha in {name!r}") from exc
        if not alpha >= 0:
            raise InputError("fixed alpha must be nonnegative")
        return "submodel-fixed", alpha
    if name not in ("conventional", "submodel", "submodel-alpha0", "cycle-tree"):
        raise InputError(f"unknown algorithm {name!r}; choose from {', '.join(ALGORITHMS)}")
    return name, 1.0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --- subcommands -------------------------------------------------------------


def cmd_fit(args) -> int:
    algo, alpha = _parse_algorithm(args.algorithm)
    model = _load_model(args.model)
    r = _restrict(_load_table(args.data), model)
    base = dict(tolerance=args.tol, max_cycles=args.max_cycles)
    if algo == "cycle-tree":
        order = cycle_order(model)
        if order is None:
            raise InputError("cycle-tree needs a cycle model of pairs with at least 4 vertices")
        cyc = r.transpose(order)
        spec = CycleSpec(len(order), [cyc.schema.levels_of(n) for n in order])
        rep = fit_cycle_tree(spec, edge_marginals(cyc), FitConfig(criterion="clique-l1", **base), schema=cyc.schema)
        rep.p_hat = rep.p_hat.transpose(r.schema.names)
    elif algo == "conventional":
        rep = fit_conventional(r, model, FitConfig(**base))
    else:
        fam = _family(args, model)
        policy = {"submodel": "unit", "submodel-alpha0": "lemma1", "submodel-fixed": "fixed"}[algo]
        rep = fit_submodel_ips(r, fam, FitConfig(alpha_policy=policy, alpha=alpha, **base))
    if args.format == "csv":
        _emit(table_to_csv(rep.p_hat, value_column="probability"), args.out)
    else:
        _emit(report_to_json(rep), args.out)
    status = "converged" if rep.converged else "did not converge"
    log.info("%s %s after %d cycles (%d updates)", rep.algorithm, status, rep.cycles, rep.updates)
    if not rep.converged:
        print(f"{rep.algorithm}: no convergence within {args.max_cycles} cycles", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_span(args) -> int:
    model = _load_model(args.model)
    fam = greedy_spanning(model)
    report = validate_spanning(model, fam)
    if args.format == "markdown":
        lines = ["| member | generators | decomposable | connected | submodel |", "|---:|---|---|---|---|"]
        for k, (m, info) in enumerate(zip(fam.members, report.members), start=1):
            gens = ", ".join("".join(sorted(g)) if all(len(v) == 1 for v in g) else "{" + ",".join(sorted(g)) + "}" for g in m.order)
            lines.append(f"| {k} | {gens} | {info['decomposable']} | {info['connected']} | {info['submodel']} |")
        lines.append("")
        lines.append(f"spans model: {report.ok}")
        _emit("\n".join(lines), args.out)
    else:
        obj = {"members": json.loads(family_to_json(fam)), "validation": report.to_dict()}
        _emit(json.dumps(obj, indent=2), args.out)
    return EXIT_OK if report.ok else EXIT_INPUT


def _int_range(text: str) -> tuple[int, ...]:
    """``"4..8"`` or ``"2,3,4"`` (or a mix like ``"4..6,8"``)."""
    out: list[int] = []
    try:
        for part in text.split(","):
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                out.append(int(part))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers like '4..8' or '2,3,4', got {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("empty integer list")
    return tuple(out)


def cmd_bench(args) -> int:
    try:
        plan = bench_mod.ExperimentPlan(
            dims=args.dims, levels=args.levels, replicates=args.replicates, seed=args.seed, tolerance=args.tol
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    def progress(J, I, n):
        log.info("J=%d I=%d: %d replicates done", J, I, n)

    records = bench_mod.run_experiment(plan, progress)
    rows = bench_mod.summarize(records)
    md = bench_mod.summary_to_markdown(rows, seed=plan.seed)
    if args.out:
        Path(args.out).write_text(bench_mod.summary_to_csv(rows))
    if args.records:
        Path(args.records).write_text(bench_mod.records_to_csv(records))
    if args.markdown:
        Path(args.markdown).write_text(md)
    if not (args.out or args.markdown):
        fmt = args.format or "markdown"
        if fmt == "csv":
            _emit(bench_mod.summary_to_csv(rows), None)
        elif fmt == "json":
            from dataclasses import asdict

            _emit(json.dumps({"seed": plan.seed, "rows": [asdict(r) for r in rows]}, indent=2), None)
        else:
            _emit(md, None)
    failed = sum(not r.converged for r in records)
    if failed:
        print(f"{failed} runs did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _alpha_grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("grid must be 'start:stop:step'") from exc
    if step <= 0 or lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError("grid needs 0 <= start <= stop and step > 0")
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def cmd_analyze_alpha(args) -> int:
    model = _load_model(args.model)
    r = _restrict(_load_table(args.data), model)
    fam = _family(args, model)
    if not 1 <= args.member <= len(fam.members):
        raise InputError(f"--member must be in 1..{len(fam.members)}")
    cj = fam.members[args.member - 1]
    ref = fit_conventional(r, model, FitConfig(tolerance=args.ref_tol, max_cycles=100000))
    if not ref.converged:
        print("reference fit did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    p_star = ref.p_hat
    if args.iterate:
        p = _load_table(args.iterate)
        if p.schema != r.schema:
            raise InputError("iterate table must have the data's variables and levels")
    else:
        p = perturb(p_star, args.delta, np.random.default_rng(args.seed))
    diag = diagnose(p_star, p, r, model, cj, fam)
    rows = figure1_curves(p_star, p, r, cj, args.grid)
    if args.format == "json":
        obj = {
            "member": args.member,
            "diagnostics": diag.to_dict(),
            "curves": [{"alpha": a, "log_g": lg, "kl_decrease": d} for a, lg, d in rows],
        }
        _emit(json.dumps(obj, indent=2), args.out)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "log_g", "kl_decrease"])
        w.writerows([repr(a), repr(lg), repr(d)] for a, lg, d in rows)
        _emit(buf.getvalue(), args.out)
        if args.diagnostics:
            Path(args.diagnostics).write_text(json.dumps(diag.to_dict(), indent=2))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="decomp-ips", description="Iterative proportional scaling via decomposable submodels.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a hierarchical log-linear model")
    f.add_argument("--data", required=True, help="table JSON or long-form CSV with a 'count' column")
    f.add_argument("--model", required=True, help="model JSON: list of generator lists")
    f.add_argument("--algorithm", default="conventional", help=" | ".join(ALGORITHMS))
    g = f.add_mutually_exclusive_group()
    g.add_argument("--submodels", help="spanning-family JSON (default: greedy construction)")
    g.add_argument("--auto-span", action="store_true", help="build the spanning family greedily")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-cycles", type=int, default=10000)
    f.add_argument("--out", help="output path (default stdout)")
    f.add_argument("--format", choices=("json", "csv"), default="json", help="report JSON or fitted-table CSV")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("span", help="greedy spanning family of decomposable submodels")
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.add_argument("--format", choices=("json", "markdown"), default="json")
    s.set_defaults(func=cmd_span)

    b = sub.add_parser("bench", help="random cycle-model step and timing experiment")
    b.add_argument("--dims", type=_int_range, default=(4, 5, 6, 7, 8), help="e.g. 4..8")
    b.add_argument("--levels", type=_int_range, default=(2, 3, 4), help="e.g. 2,3,4")
    b.add_argument("--replicates", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--tol", type=float, default=1e-6)
    b.add_argument("--out", help="summary CSV path")
    b.add_argument("--markdown", help="summary markdown path")
    b.add_argument("--records", help="per-run CSV path")
    b.add_argument("--format", choices=("markdown", "csv", "json"), help="stdout format when no file is given")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze-alpha", help="scaling-exponent diagnostics near the MLE")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    g = a.add_mutually_exclusive_group()
    g.add_argument("--submodels")
    g.add_argument("--auto-span", action="store_true")
    a.add_argument("--member", type=int, default=1, help="1-based member of the spanning family")
    a.add_argument("--iterate", help="iterate table JSON (default: perturbed MLE)")
    a.add_argument("--delta", type=float, default=0.01, help="perturbation size around the MLE")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--ref-tol", type=float, default=1e-12, help="tolerance of the reference MLE fit")
    a.add_argument("--grid", type=_alpha_grid, default=_alpha_grid("0:3:0.05"), help="alpha grid start:stop:step")
    a.add_argument("--out")
    a.add_argument("--diagnostics", help="diagnostics JSON path (CSV mode)")
    a.add_argument("--format", choices=("csv", "json"), default="csv")
    a.set_defaults(func=cmd_analyze_alpha)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("DECOMP_IPS_LOG", "").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "DEBUG" if args.verbose > 1 else "INFO" if args.verbose else "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
