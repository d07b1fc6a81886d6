"""Diagnostics for the scaling exponent near the maximum likelihood estimate.

For an iterate ``p`` and a decomposable member ``cj`` the update is
``p * M ** alpha`` with ``M = r_j / p_j``. After normalization the KL
divergence to the MLE ``p_star`` drops by ``F(alpha) - log g(alpha)`` where
``F(alpha) = alpha * sum p_star log M``. This module locates

* ``alpha0``: the mass-preserving root ``g(alpha) = 1``,
* ``alpha1``: the maximizer of the KL decrease,
* ``alpha2``: the positive break-even point of the KL decrease,

and a closed-form approximation of ``alpha0`` built from marginal ratios.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .engines import (
    AlreadyFittedError,
    FITTED_ATOL,
    _alpha0,
    _as_member,
    _drop_axes,
    _marg,
    _MassEquation,
    _MemberPlan,
    _scaled,
)
from .models import GeneratingClass, PerfectSequence, SpanningFamily
from .tables import DenseTable

__all__ = [
    "AlphaDiagnostics",
    "epsilon_of",
    "alpha0_approx",
    "alpha0_approx_terms",
    "evaluate_F",
    "kl_decrease",
    "find_alpha1",
    "find_alpha2",
    "figure1_curves",
    "perturb",
    "diagnose",
    "repeat_until_fixed",
]

_INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass
class AlphaDiagnostics:
    alpha0_exact: float | None
    alpha0_approx: float | None
    alpha1: float | None
    alpha2: float | None
    epsilon: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(p: np.ndarray, r: np.ndarray, drop) -> np.ndarray:
    pa = _marg(p, drop)
    if np.any(pa == 0):
        raise ZeroDivisionError("zero marginal in the iterate")
    return _marg(r, drop) / pa


def epsilon_of(p: DenseTable, r: DenseTable, c: GeneratingClass, fam: SpanningFamily | None = None) -> float:
    """Largest ``|r(i_a) / p(i_a) - 1|`` over generators of ``c`` and the
    separators of every member of ``fam``."""
    sets = list(c)
    if fam is not None:
        for m in fam.members:
            sets.extend(s for s in m.separators if s not in sets)
    pv = p.values / p.values.sum()
    return max(float(np.max(np.abs(_ratio(pv, r.values, _drop_axes(p.schema, a)) - 1))) for a in sets)


def alpha0_approx_terms(p: DenseTable, r: DenseTable, cj, form: str = "telescoped") -> tuple[float, float]:
    """Numerator and denominator of the closed-form ``alpha0`` approximation.

    ``form="telescoped"`` writes the numerator as
    ``sum p_C1 (rho_C1 - 1)^2 + sum_k sum p_Ck (rho_Ck - rho_Sk)^2``, a sum of
    nonnegative terms; ``form="direct"`` uses the generator-minus-separator
    squares. Both agree exactly in exact arithmetic.
    """
    plan = _as_member(r, cj)
    pv = p.values / p.values.sum()
    rv = r.values
    rho_c = [_ratio(pv, rv, d) for d in plan.c_drops]
    rho_s = [_ratio(pv, rv, d) for d in plan.s_drops]
    if form == "telescoped":
        num = float(np.sum(_marg(pv, plan.c_drops[0]) * (rho_c[0] - 1) ** 2))
        for d, rc, rs in zip(plan.c_drops[1:], rho_c[1:], rho_s):
            num += float(np.sum(_marg(pv, d) * (rc - rs) ** 2))
    elif form == "direct":
        num = sum(float(np.sum(_marg(pv, d) * (rc - 1) ** 2)) for d, rc in zip(plan.c_drops, rho_c))
        num -= sum(float(np.sum(_marg(pv, d) * (rs - 1) ** 2)) for d, rs in zip(plan.s_drops, rho_s))
    else:
        raise ValueError("form must be 'telescoped' or 'direct'")
    lin = sum(rc - 1 for rc in rho_c) - sum((rs - 1 for rs in rho_s), np.zeros((1,) * pv.ndim))
    den = float(np.sum(pv * lin**2))
    return num, den


def alpha0_approx(p: DenseTable, r: DenseTable, cj) -> float:
    """Closed-form estimate of ``alpha0`` from first-order marginal ratios.

    Degenerate (raises :class:`AlreadyFittedError`) under the same 1e-12
    marginal tolerance as the exact root.
    """
    plan = _as_member(r, cj)
    if plan.gap(p.values) <= FITTED_ATOL:
        raise AlreadyFittedError("degenerate: all marginal ratios are 1")
    num, den = alpha0_approx_terms(p, r, plan)
    if den <= 0:
        raise AlreadyFittedError("degenerate: all marginal ratios are 1")
    return num / den


# --- the KL decrease F - log g -----------------------------------------------


class _Decrease:
    """``alpha -> F(alpha) - log g(alpha)`` for fixed ``p_star``, ``p``, member."""

    def __init__(self, p_star: DenseTable, p: DenseTable, r: DenseTable, cj):
        if p_star.schema != p.schema or p.schema != r.schema:
            raise ValueError("p_star, p and r must share a schema")
        self.plan: _MemberPlan = _as_member(r, cj)
        self.q = p.values / p.values.sum()
        self.log_m = self.plan.log_multiplier(self.q)
        star = p_star.values
        if np.any((star > 0) & ~np.isfinite(self.log_m)):
            raise ValueError("p_star has mass where the update vanishes")
        self.slope_F = float(np.sum(np.where(star > 0, star * self.log_m, 0.0)))
        self.h = _MassEquation(self.plan, self.q, self.log_m)

    def F(self, alpha: float) -> float:
        return alpha * self.slope_F

    def log_g(self, alpha: float) -> float:
        return math.log1p(self.h(alpha))

    def __call__(self, alpha: float) -> float:
        return self.F(alpha) - self.log_g(alpha)

    def alpha0(self) -> float:
        if self.plan.gap(self.q) <= FITTED_ATOL:
            raise AlreadyFittedError("iterate marginals already match the data on this member")
        return _alpha0(self.plan, self.q, self.log_m)


def evaluate_F(alpha: float, p_star: DenseTable, p: DenseTable, r: DenseTable, cj) -> float:
    """``alpha * sum_i p_star(i) log(r_j(i) / p_j(i))``."""
    return _Decrease(p_star, p, r, cj).F(alpha)


def kl_decrease(alpha: float, p_star: DenseTable, p: DenseTable, r: DenseTable, cj) -> float:
    """``I(p_star : p) - I(p_star : p')`` for the normalized update ``p'``."""
    return _Decrease(p_star, p, r, cj)(alpha)


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def find_alpha1(p_star: DenseTable, p: DenseTable, r: DenseTable, cj, tol: float = 1e-10) -> float:
    """Exponent with the largest KL decrease, by golden section on ``[0, 4 alpha0]``."""
    dec = _Decrease(p_star, p, r, cj)
    a0 = dec.alpha0()
    return _golden_max(dec, 0.0, 4 * a0, tol)


def find_alpha2(p_star: DenseTable, p: DenseTable, r: DenseTable, cj, tol: float = 1e-10) -> float:
    """Positive exponent at which the KL decrease returns to zero.

    Brackets outward from ``alpha1`` by doubling (up to ``64 alpha0``) and
    bisects.
    """
    dec = _Decrease(p_star, p, r, cj)
    a0 = dec.alpha0()
    lo = _golden_max(dec, 0.0, 4 * a0, tol)
    if not dec(lo) > 0:
        raise ValueError("the KL decrease is not positive at its maximizer")
    hi = 2 * lo
    while dec(hi) >= 0:
        if hi > 64 * a0:
            raise ValueError("no positive break-even exponent below 64 * alpha0")
        lo, hi = hi, 2 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if dec(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def figure1_curves(
    p_star: DenseTable, p: DenseTable, r: DenseTable, cj, alpha_grid: Iterable[float]
) -> list[tuple[float, float, float]]:
    """Rows ``(alpha, log g(alpha), F(alpha) - log g(alpha))``."""
    dec = _Decrease(p_star, p, r, cj)
    rows = []
    for a in alpha_grid:
        a = float(a)
        if a < 0:
            raise ValueError("alpha grid must be nonnegative")
        lg = dec.log_g(a)
        rows.append((a, lg, dec.F(a) - lg))
    return rows


# --- helpers for near-MLE experiments ----------------------------------------


def perturb(p_mle: DenseTable, delta: float, rng: np.random.Generator) -> DenseTable:
    """``normalize(p_mle * (1 + delta * z))`` with ``z`` uniform on [-1, 1]."""
    z = rng.uniform(-1.0, 1.0, size=p_mle.schema.shape)
    v = p_mle.values * (1.0 + delta * z)
    return DenseTable(p_mle.schema, v / v.sum())


def diagnose(
    p_star: DenseTable,
    p: DenseTable,
    r: DenseTable,
    c: GeneratingClass,
    cj,
    fam: SpanningFamily | None = None,
) -> AlphaDiagnostics:
    """All exponents for one member; entries are ``None`` when undefined."""
    dec = _Decrease(p_star, p, r, cj)

    def attempt(fn):
        try:
            return fn()
        except (AlreadyFittedError, ValueError, ZeroDivisionError):
            return None

    return AlphaDiagnostics(
        alpha0_exact=attempt(dec.alpha0),
        alpha0_approx=attempt(lambda: alpha0_approx(p, r, dec.plan)),
        alpha1=attempt(lambda: find_alpha1(p_star, p, r, dec.plan)),
        alpha2=attempt(lambda: find_alpha2(p_star, p, r, dec.plan)),
        epsilon=epsilon_of(p, r, c, fam),
    )


def repeat_until_fixed(
    p: DenseTable, r: DenseTable, cj, tol: float = 1e-12, max_steps: int = 10000
) -> tuple[DenseTable, int]:
    """Repeat the mass-preserving member update until the member marginals fit.

    The limit is the closest table to ``p`` (in the likelihood sense) of the
    form ``p * prod_C mu(i_C)`` that matches ``r`` on the member generators.
    Returns the limit and the number of steps taken.
    """
    plan = _as_member(r, cj)
    q = p.values / p.values.sum()
    for step in range(max_steps):
        if plan.gap(q) <= tol:
            return DenseTable(p.schema, q / q.sum()), step
        log_m = plan.log_multiplier(q)
        try:
            a = _alpha0(plan, q, log_m)
        except AlreadyFittedError:
            return DenseTable(p.schema, q / q.sum()), step
        q = _scaled(q, log_m, a)
    return DenseTable(p.schema, q / q.sum()), max_steps
