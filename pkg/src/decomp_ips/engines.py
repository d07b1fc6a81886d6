"""Iterative proportional scaling engines.

``fit_conventional`` cycles single-generator rescaling. ``fit_submodel_ips``
cycles through a spanning family of decomposable submodels and multiplies
the iterate by ``(r_j / q_j) ** alpha`` where ``r_j`` and ``q_j`` are the
product-form extensions of the data and iterate marginals on member ``j``.
The exponent is 1 (``unit``), a constant (``fixed``) or the root of the
mass equation ``g(alpha) = 1`` (``lemma1``).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .models import GeneratingClass, PerfectSequence, SpanningFamily
from .tables import DenseTable, kl_divergence

__all__ = [
    "FitConfig",
    "FitState",
    "TraceRow",
    "FitReport",
    "SupportError",
    "AlreadyFittedError",
    "ips_step",
    "submodel_step",
    "evaluate_g",
    "find_alpha0",
    "g_excess",
    "conventional_updates",
    "submodel_updates",
    "fit_conventional",
    "fit_submodel_ips",
    "max_marginal_gap",
    "report_to_json",
    "report_from_json",
]

ALPHA_POLICIES = ("unit", "fixed", "lemma1")
CRITERIA = ("marginal-linf", "clique-l1")
FITTED_ATOL = 1e-12


class SupportError(ValueError):
    """An iterate marginal is zero where the data marginal is positive."""


class AlreadyFittedError(ValueError):
    """The iterate already matches the data on every member generator."""


@dataclass(frozen=True)
class FitConfig:
    tolerance: float = 1e-6
    max_cycles: int = 10000
    criterion: str = "marginal-linf"
    alpha_policy: str = "unit"
    alpha: float = 1.0
    # "cycle": test the criterion after each full pass; "update": after every
    # single update (the counting used for the benchmark tables)
    check: str = "cycle"
    # variable sets for the clique-l1 criterion; None means the model generators
    criterion_sets: tuple[frozenset[str], ...] | None = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be at least 1")
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}")
        if self.alpha_policy not in ALPHA_POLICIES:
            raise ValueError(f"alpha_policy must be one of {ALPHA_POLICIES}")
        if self.alpha_policy == "fixed" and not self.alpha >= 0:
            raise ValueError("fixed alpha must be nonnegative")
        if self.check not in ("cycle", "update"):
            raise ValueError("check must be 'cycle' or 'update'")


@dataclass(frozen=True)
class FitState:
    """Iterate after one update. ``q`` is unnormalized and read-only."""

    q: np.ndarray
    cycle: int
    update: int
    member: int
    alpha: float


@dataclass(frozen=True)
class TraceRow:
    cycle: int
    update: int
    criterion: float
    total_mass: float
    alphas: tuple[float, ...]
    kl: float | None = None


@dataclass
class FitReport:
    p_hat: DenseTable | None
    cycles: int
    updates: int
    converged: bool
    trace: list[TraceRow]
    wall_time_ns: int
    cell_touches: int = 0
    algorithm: str = ""
    extra: dict = field(default_factory=dict)


# --- marginal plumbing -------------------------------------------------------


def _drop_axes(schema, names) -> tuple[int, ...]:
    keep = schema.axes(names)
    return tuple(a for a in range(len(schema)) if a not in keep)


def _marg(arr: np.ndarray, drop: tuple[int, ...]) -> np.ndarray:
    return arr.sum(axis=drop, keepdims=True) if drop else arr


class _MemberPlan:
    """Precomputed data-side terms of one decomposable member."""

    def __init__(self, r: DenseTable, member: PerfectSequence):
        schema = r.schema
        missing = member.variables - set(schema.names)
        if missing:
            raise KeyError(f"unknown variables {sorted(missing)}")
        self.member = member
        self.c_drops = [_drop_axes(schema, c) for c in member.order]
        self.s_drops = [_drop_axes(schema, s) for s in member.separators]
        self.r_c = [_marg(r.values, d) for d in self.c_drops]
        self.r_s = [_marg(r.values, d) for d in self.s_drops]

    def log_multiplier(self, q: np.ndarray) -> np.ndarray:
        """``log(r_j / q_j)`` per cell; ``-inf`` where the data numerator is 0.

        Each factor is taken as ``log1p((r_a - q_a) / q_a)`` so the result
        keeps full relative precision near a fit. Cells with ``q == 0`` get 0
        since they stay 0 anyway.
        """
        out = np.zeros((1,) * q.ndim)
        with np.errstate(divide="ignore", invalid="ignore"):
            for d, rc in zip(self.c_drops, self.r_c):
                qc = _marg(q, d)
                if np.any((qc == 0) & (rc > 0)):
                    raise SupportError("zero iterate marginal under a positive data marginal")
                out = out + np.where(qc > 0, np.log1p((rc - qc) / np.where(qc > 0, qc, 1.0)), -np.inf)
            for d, rs in zip(self.s_drops, self.r_s):
                qs = _marg(q, d)
                ok = (qs > 0) & (rs > 0)
                out = out - np.where(ok, np.log1p((rs - qs) / np.where(ok, qs, 1.0)), 0.0)
        return np.where(q > 0, out, 0.0)

    def slope(self, q: np.ndarray) -> float:
        """``g'(0)`` for the normalized iterate, in generalized-KL form.

        Each marginal contributes ``sum a (u - log1p(u))`` with
        ``u = (b - a) / a``, which is second order in the gap and does not
        pick up the rounding error of ``sum(q)`` at first order.
        """
        w = q / q.sum()

        def gkl(d, b):
            a = _marg(w, d)
            pos = a > 0
            u = (b[pos] if b.shape == a.shape else np.broadcast_to(b, a.shape)[pos]) - a[pos]
            u = u / a[pos]
            return float(np.sum(a[pos] * (u - np.log1p(u))))

        return -sum(gkl(d, rc) for d, rc in zip(self.c_drops, self.r_c)) + sum(
            gkl(d, rs) for d, rs in zip(self.s_drops, self.r_s)
        )

    def gap(self, q: np.ndarray) -> float:
        """Largest |q[C]/sum(q) - r[C]| over member generators."""
        p = q / q.sum()
        return max(float(np.max(np.abs(_marg(p, d) - rc))) for d, rc in zip(self.c_drops, self.r_c))


def _scaled(q: np.ndarray, log_m: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return q.copy()
    with np.errstate(over="ignore"):
        return q * np.exp(alpha * log_m)


class _MassEquation:
    """``h(alpha) = g(alpha) - g(0)`` for the normalized iterate.

    When every multiplier is finite the linear part is replaced by
    ``alpha * g'(0)`` from :meth:`_MemberPlan.slope`; the remainder
    ``expm1(x) - x`` is second order, so the sign of ``h`` near 0 is
    reliable even when ``g'(0)`` is far below the float resolution of 1.
    """

    def __init__(self, plan: _MemberPlan, q: np.ndarray, log_m: np.ndarray):
        self.w = q / q.sum()
        self.log_m = log_m
        self.robust = bool(np.all(np.isfinite(log_m)))
        self.d0 = plan.slope(q) if self.robust else float(np.sum(self.w * np.where(np.isfinite(log_m), log_m, 0.0)))

    def __call__(self, alpha: float) -> float:
        if alpha == 0:
            return 0.0
        x = alpha * self.log_m
        with np.errstate(over="ignore", invalid="ignore"):
            if self.robust:
                return float(np.sum(self.w * (np.expm1(x) - x))) + alpha * self.d0
            return float(np.sum(self.w * np.expm1(x)))


def _alpha0(plan: _MemberPlan, q: np.ndarray, log_m: np.ndarray) -> float:
    h = _MassEquation(plan, q, log_m)
    if h.robust and not h.d0 < 0:
        raise AlreadyFittedError("g'(0) is not negative; marginals are numerically matched")
    lo = 1.0
    for _ in range(1100):
        if h(lo) < 0:
            break
        lo /= 2
    else:
        raise AlreadyFittedError("g stays >= 1 near zero; marginals are numerically matched")
    hi = 2 * lo
    for _ in range(1100):
        h_hi = h(hi)
        if h_hi >= 0:
            break
        lo, hi = hi, 2 * hi
    else:
        raise RuntimeError("g(alpha) did not reach 1; no positive root")
    best, best_h = hi, abs(h_hi)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        h_mid = h(mid)
        if abs(h_mid) < best_h:
            best, best_h = mid, abs(h_mid)
        if h_mid < 0:
            lo = mid
        else:
            hi = mid
    return best


# --- single updates ----------------------------------------------------------


def ips_step(q: DenseTable, r: DenseTable, names) -> DenseTable:
    """One conventional rescaling ``q * r[C] / q[C]``.

    Cells whose data marginal is 0 become 0. Raises :class:`SupportError`
    when ``q[C]`` is 0 under a positive ``r[C]``.
    """
    if q.schema != r.schema:
        raise ValueError("q and r must share a schema")
    return DenseTable(q.schema, _ips_update(q.values, r.values, _drop_axes(q.schema, names)))


def _ips_update(q: np.ndarray, r: np.ndarray, drop, r_c: np.ndarray | None = None) -> np.ndarray:
    rc = _marg(r, drop) if r_c is None else r_c
    qc = _marg(q, drop)
    if np.any((qc == 0) & (rc > 0)):
        raise SupportError("zero iterate marginal under a positive data marginal")
    ratio = np.divide(rc, qc, out=np.zeros(np.broadcast(rc, qc).shape), where=qc > 0)
    return q * ratio


def _as_member(r: DenseTable, cj) -> _MemberPlan:
    if isinstance(cj, _MemberPlan):
        return cj
    if not isinstance(cj, PerfectSequence):
        from .models import find_perfect_sequence

        gc = cj if isinstance(cj, GeneratingClass) else GeneratingClass(cj)
        ps = find_perfect_sequence(gc)
        if ps is None:
            raise ValueError(f"{gc!r} is not decomposable")
        cj = ps
    return _MemberPlan(r, cj)


def submodel_step(q: DenseTable, r: DenseTable, cj, alpha: float = 1.0) -> DenseTable:
    """One decomposable-submodel update ``q * (r_j / q_j) ** alpha``.

    The factor is evaluated in log space from the marginals of ``q`` and
    ``r`` on the generators and separators of ``cj``.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if q.schema != r.schema:
        raise ValueError("q and r must share a schema")
    plan = _as_member(r, cj)
    return DenseTable(q.schema, _scaled(q.values, plan.log_multiplier(q.values), alpha))


def evaluate_g(q: DenseTable, r: DenseTable, cj, alpha: float) -> float:
    """``g(alpha) = sum_i q(i) (r_j(i) / q_j(i)) ** alpha``."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    plan = _as_member(r, cj)
    if alpha == 0:
        return q.total()
    return float(_scaled(q.values, plan.log_multiplier(q.values), alpha).sum())


def g_excess(q: DenseTable, r: DenseTable, cj, alpha: float) -> float:
    """``g(alpha) - 1`` for the normalized ``q``, without cancellation.

    Near a fit ``g(alpha) - 1`` is of the order of the squared marginal gap
    and drops below the resolution of a plain sum around 1; this form keeps
    its sign and leading digits.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    plan = _as_member(r, cj)
    return _MassEquation(plan, q.values, plan.log_multiplier(q.values))(alpha)


def find_alpha0(q: DenseTable, r: DenseTable, cj) -> float:
    """The unique positive root of ``g(alpha) = 1``.

    Starting from 1 the exponent is halved until ``g < 1``, then doubled
    until ``g >= 1``, and the bracket is bisected down to float resolution.
    Raises :class:`AlreadyFittedError` if the member marginals of ``q``
    already match ``r`` within 1e-12.
    """
    plan = _as_member(r, cj)
    if plan.gap(q.values) <= FITTED_ATOL:
        raise AlreadyFittedError("iterate marginals already match the data on this member")
    return _alpha0(plan, q.values, plan.log_multiplier(q.values))


def max_marginal_gap(p: DenseTable, r: DenseTable, c: GeneratingClass) -> float:
    """``max_C || p[C]/sum(p) - r[C] ||_inf``."""
    pv = p.values / p.values.sum()
    return max(
        float(np.max(np.abs(_marg(pv, d) - _marg(r.values, d))))
        for d in (_drop_axes(p.schema, g) for g in c)
    )


# --- update streams ----------------------------------------------------------


def _uniform(r: DenseTable) -> np.ndarray:
    return np.full(r.schema.shape, 1.0 / r.schema.size)


def conventional_updates(r: DenseTable, c: GeneratingClass, q0: np.ndarray | None = None) -> Iterator[FitState]:
    """Endless stream of conventional IPS iterates, one per generator."""
    drops = [_drop_axes(r.schema, g) for g in c]
    r_cs = [_marg(r.values, d) for d in drops]
    q = _uniform(r) if q0 is None else np.array(q0, dtype=float)
    update = 0
    while True:
        for k, (d, rc) in enumerate(zip(drops, r_cs)):
            q = _ips_update(q, r.values, d, rc)
            q.setflags(write=False)
            update += 1
            yield FitState(q, (update - 1) // len(drops) + 1, update, k, 1.0)


def submodel_updates(
    r: DenseTable,
    fam: SpanningFamily | Sequence[PerfectSequence],
    alpha_policy: str = "unit",
    alpha: float = 1.0,
    q0: np.ndarray | None = None,
) -> Iterator[FitState]:
    """Endless stream of submodel-IPS iterates, one per family member.

    Under ``lemma1`` a member whose marginals already match within 1e-12 is
    skipped as the identity (reported with ``alpha = 0``).
    """
    if alpha_policy not in ALPHA_POLICIES:
        raise ValueError(f"alpha_policy must be one of {ALPHA_POLICIES}")
    members = fam.members if isinstance(fam, SpanningFamily) else tuple(fam)
    plans = [_MemberPlan(r, m) for m in members]
    q = _uniform(r) if q0 is None else np.array(q0, dtype=float)
    update = 0
    while True:
        for k, plan in enumerate(plans):
            log_m = plan.log_multiplier(q)
            if alpha_policy == "unit":
                a = 1.0
            elif alpha_policy == "fixed":
                a = float(alpha)
            elif plan.gap(q) <= FITTED_ATOL:
                a = 0.0
            else:
                try:
                    a = _alpha0(plan, q, log_m)
                except AlreadyFittedError:
                    a = 0.0
            q = _scaled(q, log_m, a)
            q.setflags(write=False)
            update += 1
            yield FitState(q, (update - 1) // len(plans) + 1, update, k, a)


# --- drivers -----------------------------------------------------------------


def _criterion_fn(r: DenseTable, c: GeneratingClass, cfg: FitConfig) -> Callable:
    if cfg.criterion == "marginal-linf":
        drops = [_drop_axes(r.schema, g) for g in c]
        r_cs = [_marg(r.values, d) for d in drops]

        def linf(q_new, q_old):
            p = q_new / q_new.sum()
            return max(float(np.max(np.abs(_marg(p, d) - rc))) for d, rc in zip(drops, r_cs))

        return linf
    sets = cfg.criterion_sets if cfg.criterion_sets is not None else tuple(c)
    drops = [_drop_axes(r.schema, s) for s in sets]

    def l1(q_new, q_old):
        return float(sum(np.abs(_marg(q_new, d) - _marg(q_old, d)).sum() for d in drops))

    return l1


def _drive(
    stream: Iterator[FitState],
    per_cycle: int,
    r: DenseTable,
    c: GeneratingClass,
    cfg: FitConfig,
    reference: DenseTable | None,
    algorithm: str,
) -> FitReport:
    crit = _criterion_fn(r, c, cfg)
    trace: list[TraceRow] = []
    q_prev = _uniform(r)
    q_cycle_start = q_prev
    alphas: list[float] = []
    converged = False
    state = None
    t0 = time.perf_counter_ns()
    max_updates = cfg.max_cycles * per_cycle
    for state in stream:
        alphas.append(state.alpha)
        end_of_cycle = state.update % per_cycle == 0
        if cfg.check == "update" or end_of_cycle:
            base = q_prev if cfg.check == "update" else q_cycle_start
            value = crit(state.q, base)
            kl = None
            if reference is not None:
                kl = kl_divergence(reference, DenseTable(r.schema, state.q / state.q.sum()))
            trace.append(TraceRow(state.cycle, state.update, value, float(state.q.sum()), tuple(alphas), kl))
            alphas = []
            if value <= cfg.tolerance:
                converged = True
                break
        if end_of_cycle:
            q_cycle_start = state.q
        q_prev = state.q
        if state.update >= max_updates:
            break
    wall = time.perf_counter_ns() - t0
    q = state.q
    return FitReport(
        p_hat=DenseTable(r.schema, q / q.sum()),
        cycles=state.cycle,
        updates=state.update,
        converged=converged,
        trace=trace,
        wall_time_ns=wall,
        cell_touches=state.update * r.schema.size,
        algorithm=algorithm,
    )


def _check_normalized(r: DenseTable):
    if abs(r.total() - 1.0) > 1e-8:
        raise ValueError("r must be normalized relative frequencies")


def fit_conventional(
    r: DenseTable,
    c: GeneratingClass,
    cfg: FitConfig = FitConfig(),
    reference: DenseTable | None = None,
) -> FitReport:
    """Conventional IPS from the uniform table, generators in listed order.

    Non-convergence within ``cfg.max_cycles`` is reported through
    ``FitReport.converged``, never raised.
    """
    _check_normalized(r)
    return _drive(conventional_updates(r, c), len(c), r, c, cfg, reference, "conventional")


def fit_submodel_ips(
    r: DenseTable,
    fam: SpanningFamily,
    cfg: FitConfig = FitConfig(),
    reference: DenseTable | None = None,
) -> FitReport:
    """Submodel IPS over a spanning family, alpha chosen by ``cfg.alpha_policy``."""
    _check_normalized(r)
    stream = submodel_updates(r, fam, cfg.alpha_policy, cfg.alpha)
    name = {"unit": "submodel", "fixed": f"submodel-fixed:{cfg.alpha:g}", "lemma1": "submodel-alpha0"}
    return _drive(stream, len(fam.members), r, fam.parent, cfg, reference, name[cfg.alpha_policy])


# --- report JSON -------------------------------------------------------------


def _num(x):
    if x is None:
        return None
    if math.isinf(x):
        return "infinite"
    return x


def report_to_json(rep: FitReport) -> str:
    obj = {
        "algorithm": rep.algorithm,
        "converged": rep.converged,
        "cycles": rep.cycles,
        "updates": rep.updates,
        "wall_time_ns": rep.wall_time_ns,
        "cell_touches": rep.cell_touches,
        "trace": [
            {
                "cycle": t.cycle,
                "update": t.update,
                "criterion": t.criterion,
                "total_mass": t.total_mass,
                "alphas": list(t.alphas),
                "kl": _num(t.kl),
            }
            for t in rep.trace
        ],
    }
    if rep.p_hat is not None:
        obj["variables"] = [{"name": v.name, "levels": v.levels} for v in rep.p_hat.schema.variables]
        obj["fitted"] = rep.p_hat.flat.tolist()
    obj.update({k: v for k, v in rep.extra.items() if _jsonable(v)})
    return json.dumps(obj)


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
    except (TypeError, ValueError):
        return False
    return True


def report_from_json(text: str) -> FitReport:
    from .tables import Schema, Variable

    obj = json.loads(text)
    p_hat = None
    if "fitted" in obj:
        schema = Schema(tuple(Variable(v["name"], int(v["levels"])) for v in obj["variables"]))
        p_hat = DenseTable(schema, obj["fitted"])
    trace = [
        TraceRow(
            t["cycle"],
            t["update"],
            t["criterion"],
            t["total_mass"],
            tuple(t["alphas"]),
            math.inf if t["kl"] == "infinite" else t["kl"],
        )
        for t in obj["trace"]
    ]
    return FitReport(
        p_hat=p_hat,
        cycles=obj["cycles"],
        updates=obj["updates"],
        converged=obj["converged"],
        trace=trace,
        wall_time_ns=obj["wall_time_ns"],
        cell_touches=obj.get("cell_touches", 0),
        algorithm=obj.get("algorithm", ""),
    )
