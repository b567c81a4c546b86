"""Exact majority-sample distributions and the amplification inequalities.

Everything here is deterministic. ``exact_maj_distribution`` enumerates every
composition of the sample size, so the amplification checks compare the
closed-form lower bound against exact probabilities rather than estimates.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import NoisyPushError

# Absolute slack for comparing exact probabilities accumulated in floating point.
PROB_TOL = 1e-12
DEFAULT_BUDGET = 10**7


class BudgetExceededError(NoisyPushError):
    pass


class BadRangeError(NoisyPushError):
    pass


def n_compositions(ell: int, k: int) -> int:
    return math.comb(ell + k - 1, k - 1)


@lru_cache(maxsize=64)
def compositions(ell: int, k: int) -> np.ndarray:
    """All ways to write ``ell`` as an ordered sum of ``k`` non-negative parts.

    Odometer over the first ``k - 1`` parts; the last part takes the rest.
    """
    rows = []
    x = [0] * (k - 1)
    used = 0
    while True:
        rows.append(x + [ell - used])
        i = k - 2
        while i >= 0:
            if used < ell:
                x[i] += 1
                used += 1
                break
            used -= x[i]
            x[i] = 0
            i -= 1
        if i < 0:
            break
    out = np.array(rows, dtype=np.int64)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _tables(ell: int, k: int):
    X = compositions(ell, k)
    log_coef = _log_coef_vec(X, ell)
    top = X.max(axis=1, keepdims=True)
    winners = X == top
    size = winners.sum(axis=1, keepdims=True)
    share = winners / size
    strict = winners & (size == 1)
    return X, np.asarray(log_coef, dtype=float), share, strict.astype(float)


def _log_coef_vec(X: np.ndarray, ell: int) -> np.ndarray:
    lf = np.array([math.lgamma(v + 1) for v in range(ell + 1)])
    return math.lgamma(ell + 1) - lf[X].sum(axis=1)


def multinomial_pmf(ell: int, q: Sequence[float]) -> tuple:
    """``(compositions, pmf)`` of a multinomial with ``ell`` trials."""
    q = np.asarray(q, dtype=float)
    X, log_coef, _, _ = _tables(ell, len(q))
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    terms = np.where(X > 0, X * np.where(np.isfinite(logq), logq, 0.0), 0.0)
    impossible = ((X > 0) & ~np.isfinite(logq)).any(axis=1)
    pmf = np.exp(log_coef + terms.sum(axis=1))
    pmf[impossible] = 0.0
    return X, pmf


@dataclass
class MajDistribution:
    """Law of the majority of ``ell`` i.i.d. draws from ``q``.

    ``probs[i]`` is Pr(maj = i + 1) with ties broken uniformly;
    ``strict_probs[i]`` is Pr(opinion i + 1 is the unique most frequent).
    """

    ell: int
    q: np.ndarray
    probs: np.ndarray
    strict_probs: np.ndarray


def _check_simplex(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or len(q) < 1 or q.min() < 0 or abs(q.sum() - 1.0) > 1e-9:
        raise BadRangeError(f"q must be a probability vector, got {q}")
    return q


def exact_maj_distribution(ell: int, q: Sequence[float], budget: int = DEFAULT_BUDGET) -> MajDistribution:
    if ell < 1:
        raise BadRangeError(f"ell must be >= 1, got {ell}")
    q = _check_simplex(q)
    size = n_compositions(ell, len(q))
    if size > budget:
        raise BudgetExceededError(f"{size} compositions of {ell} into {len(q)} parts exceed budget {budget}")
    _, _, share, strict = _tables(ell, len(q))
    _, pmf = multinomial_pmf(ell, q)
    return MajDistribution(ell, q, pmf @ share, pmf @ strict)


def g(delta: float, ell: float) -> float:
    """Piecewise amplification profile; constant once ``delta >= 1/sqrt(ell)``.

    The capped branch is the value of the first branch at ``1/sqrt(ell)``,
    which keeps ``g`` continuous and non-decreasing in ``delta``.
    """
    if not (0.0 <= delta <= 1.0):
        raise BadRangeError(f"delta must lie in [0, 1], got {delta}")
    if ell < 1:
        raise BadRangeError(f"ell must be >= 1, got {ell}")
    cap = 1.0 / math.sqrt(ell)
    if delta < cap:
        return delta * (1.0 - delta * delta) ** ((ell - 1) / 2)
    return cap * (1.0 - 1.0 / ell) ** ((ell - 1) / 2)


def amplification_bound(delta: float, ell: int, k: int) -> float:
    """``sqrt(2 ell / pi) * g(delta, ell) / 4**(k - 2)``."""
    if ell < 1 or ell % 2 == 0:
        raise BadRangeError(f"ell must be a positive odd integer, got {ell}")
    if k < 2:
        raise BadRangeError(f"k must be >= 2, got {k}")
    return math.sqrt(2.0 * ell / math.pi) * g(delta, ell) / 4.0 ** (k - 2)


@dataclass
class AmplificationCheck:
    ell: int
    q: np.ndarray
    m: int
    delta: float
    exact_diff: float
    bound: float
    strict_diff: float
    ties_favor_m: bool  # probs_m - probs_i >= strict_m - strict_i for every rival

    @property
    def ok(self) -> bool:
        return self.exact_diff >= self.bound - PROB_TOL

    @property
    def strict_ok(self) -> bool:
        return self.strict_diff >= self.bound - PROB_TOL

    @property
    def slack(self) -> float:
        return self.exact_diff - self.bound


def check_amplification(ell: int, q: Sequence[float], m: Optional[int] = None) -> AmplificationCheck:
    """Compare the exact majority lead of ``m`` with the amplification bound.

    ``q`` is the post-noise distribution; the bound uses its own bias.
    """
    q = _check_simplex(q)
    k = len(q)
    if m is None:
        m = int(np.argmax(q)) + 1
    if q[m - 1] < q.max():
        raise BadRangeError(f"opinion {m} is not a most likely opinion of {q}")
    rivals = [i for i in range(k) if i != m - 1]
    delta = float(q[m - 1] - q[rivals].max())
    dist = exact_maj_distribution(ell, q)
    p, s = dist.probs, dist.strict_probs
    diffs = p[m - 1] - p[rivals]
    sdiffs = s[m - 1] - s[rivals]
    return AmplificationCheck(
        ell=ell, q=q, m=m, delta=delta,
        exact_diff=float(diffs.min()),
        bound=amplification_bound(delta, ell, k),
        strict_diff=float(sdiffs.min()),
        ties_favor_m=bool(np.all(diffs >= sdiffs - PROB_TOL)),
    )


def simplex_grid(k: int, step: float) -> np.ndarray:
    """Points of the probability simplex whose coordinates are multiples of ``step``."""
    steps = int(round(1.0 / step))
    return compositions(steps, k) / steps


@dataclass
class ScanReport:
    name: str
    checked: int = 0
    violations: list = field(default_factory=list)
    worst_slack: float = math.inf
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.violations

    def note(self, slack: float, ok: bool, where) -> None:
        self.checked += 1
        self.worst_slack = min(self.worst_slack, slack)
        if not ok:
            self.violations.append(where)


def amplification_scan(ks: Iterable[int] = (2, 3, 4), ells: Iterable[int] = range(1, 16, 2),
                       step: float = 0.05) -> ScanReport:
    """Exact majority lead vs the amplification bound over a grid of ``q``.

    Only grid points with a unique most likely opinion are checked. Also
    records where the tie-free lead satisfies the bound and whether ties ever
    favour a rival.
    """
    rep = ScanReport("amplification")
    strict_fail_ells = set()
    tie_violations = 0
    ells = list(ells)
    for k in ks:
        grid = simplex_grid(k, step)
        top = grid.max(axis=1)
        unique = (np.isclose(grid, top[:, None])).sum(axis=1) == 1
        for ell in ells:
            for q in grid[unique]:
                chk = check_amplification(ell, q)
                rep.note(chk.slack, chk.ok, (k, ell, tuple(np.round(q, 4))))
                if not chk.strict_ok:
                    strict_fail_ells.add(ell)
                if not chk.ties_favor_m:
                    tie_violations += 1
    # smallest ell from which the tie-free inequality holds on the whole grid
    ell0 = None
    for ell in sorted(ells):
        if all(e < ell for e in strict_fail_ells):
            ell0 = ell
            break
    rep.info = {"strict_ell0": ell0, "tie_violations": tie_violations}
    return rep


def binomial_majority_lead(ell: int, q1: float) -> float:
    """Pr(maj = 1) - Pr(maj = 2) for ``ell`` Bernoulli(q1) draws, ties split evenly."""
    q2 = 1.0 - q1
    lead = 0.0
    for i in range(ell + 1):
        w = math.comb(ell, i) * q1**i * q2 ** (ell - i)
        if 2 * i > ell:
            lead += w
        elif 2 * i < ell:
            lead -= w
    return lead


def binary_amplification_scan(ells: Iterable[int] = range(3, 22, 2),
                              deltas: Optional[Sequence[float]] = None) -> ScanReport:
    """Two-opinion case: exact lead vs ``sqrt(2 ell / pi) * g(q1 - q2, ell)``."""
    if deltas is None:
        deltas = [round(0.02 * i, 10) for i in range(1, 26)]
    rep = ScanReport("binary amplification")
    for ell in ells:
        for d in deltas:
            lead = binomial_majority_lead(ell, (1.0 + d) / 2.0)
            bound = math.sqrt(2.0 * ell / math.pi) * g(d, ell)
            rep.note(lead - bound, lead >= bound - PROB_TOL, (ell, d))
    return rep


def adaptive_simpson(f: Callable[[float], float], a: float, b: float,
                     tol: float = 1e-12, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with Richardson correction."""

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2.0, depth - 1))

    # a few fixed panels first, so symmetric integrands cannot fool the first test
    panels = 8
    edges = [a + (b - a) * i / panels for i in range(panels + 1)]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        flo, fhi, fm = f(lo), f(hi), f(0.5 * (lo + hi))
        total += rec(lo, hi, flo, fm, fhi, simpson(flo, fm, fhi, lo, hi), tol / panels, max_depth)
    return total


def binbeta_identity(ell: int, j: int, p: float) -> tuple:
    """Binomial upper tail and the matching incomplete-beta integral.

    Returns ``(lhs, rhs)`` with ``lhs = Pr(Bin(ell, p) > j)`` summed directly
    and ``rhs = C(ell, j+1) (j+1) * integral_0^p z^j (1-z)^(ell-j-1) dz``.
    """
    if not (0 <= j <= ell):
        raise BadRangeError(f"need 0 <= j <= ell, got j={j}, ell={ell}")
    if not (0.0 < p < 1.0):
        raise BadRangeError(f"p must lie in (0, 1), got {p}")
    lhs = math.fsum(math.comb(ell, i) * p**i * (1.0 - p) ** (ell - i) for i in range(j + 1, ell + 1))
    if j == ell:
        return lhs, 0.0
    coef = math.comb(ell, j + 1) * (j + 1)
    e = ell - j - 1
    integral = adaptive_simpson(lambda z: z**j * (1.0 - z) ** e, 0.0, p, tol=1e-12 / coef)
    return lhs, coef * integral


def binbeta_scan(max_ell: int = 30, ps: Optional[Sequence[float]] = None, tol: float = 1e-9) -> ScanReport:
    if ps is None:
        ps = [round(0.05 * i, 10) for i in range(1, 20)]
    rep = ScanReport("binomial/beta identity")
    for ell in range(1, max_ell + 1):
        for j in range(ell + 1):
            for p in ps:
                lhs, rhs = binbeta_identity(ell, j, p)
                err = abs(lhs - rhs)
                rep.note(tol - err, err <= tol, (ell, j, p))
    return rep


def stirling_central_binomial_bounds(r: int) -> tuple:
    """``4**r / sqrt(pi r)`` times ``exp(1/(9r))`` and ``exp(1/(8r))``."""
    if r < 1:
        raise BadRangeError(f"r must be >= 1, got {r}")
    base = r * math.log(4.0) - 0.5 * math.log(math.pi * r)
    return math.exp(base + 1.0 / (9 * r)), math.exp(base + 1.0 / (8 * r))


def stirling_scan(r_max: int = 200, sign: int = +1) -> ScanReport:
    """Check ``C(2r, r)`` against the sandwich, in log space with exact binomials.

    ``sign=+1`` tests the exponents as printed (``1/(9r)`` below, ``1/(8r)``
    above); ``sign=-1`` tests ``exp(-1/(8r)) <= C(2r,r) sqrt(pi r) / 4^r <= exp(-1/(9r))``.
    """
    rep = ScanReport("central binomial sandwich" + (" (as printed)" if sign > 0 else " (negated exponents)"))
    for r in range(1, r_max + 1):
        log_c = math.log(math.comb(2 * r, r))
        base = r * math.log(4.0) - 0.5 * math.log(math.pi * r)
        if sign > 0:
            lo, hi = base + 1.0 / (9 * r), base + 1.0 / (8 * r)
        else:
            lo, hi = base - 1.0 / (8 * r), base - 1.0 / (9 * r)
        slack = min(log_c - lo, hi - log_c)
        rep.note(slack, slack >= 0.0, r)
    return rep


def chernoff_diff_bound(n: int, p: float, r: float, q: float, theta: float) -> float:
    """Bound on Pr(sum X <= (1 - theta) E - theta n) for i.i.d. X in {1, 0, -1}."""
    if min(p, r, q) < 0 or abs(p + r + q - 1.0) > 1e-12:
        raise BadRangeError(f"(p, r, q) = ({p}, {r}, {q}) is not a distribution")
    if not (0.0 < theta < 1.0):
        raise BadRangeError(f"theta must lie in (0, 1), got {theta}")
    mean = n * (p - q)
    return math.exp(-(theta**2) / 4.0 * (mean + n))


def chernoff_diff_tail(n: int, p: float, r: float, q: float, theta: float,
                       trials: int, rng: np.random.Generator) -> float:
    """Monte Carlo frequency of the event bounded by ``chernoff_diff_bound``."""
    draws = rng.multinomial(n, [p, r, q], size=trials)
    total = draws[:, 0] - draws[:, 2]
    thresh = (1.0 - theta) * n * (p - q) - theta * n
    return float(np.mean(total <= thresh))


@dataclass
class ParityReport:
    ell: int
    q: tuple
    win: tuple  # Pr(maj = 1) at ell, ell + 1, ell + 2
    lose: tuple  # Pr(maj = 2) at ell, ell + 1, ell + 2

    @property
    def equal_ok(self) -> bool:
        return abs(self.win[0] - self.win[1]) <= PROB_TOL and abs(self.lose[0] - self.lose[1]) <= PROB_TOL

    @property
    def monotone_ok(self) -> bool:
        return self.win[2] >= self.win[1] - PROB_TOL and self.lose[2] <= self.lose[1] + PROB_TOL

    @property
    def ok(self) -> bool:
        return self.equal_ok and self.monotone_ok


def parity_check(ell_odd: int, q: Sequence[float]) -> ParityReport:
    """An even sample of size ``ell + 1`` behaves exactly like ``ell``; ``ell + 2`` helps."""
    if ell_odd < 1 or ell_odd % 2 == 0:
        raise BadRangeError(f"ell must be a positive odd integer, got {ell_odd}")
    q = _check_simplex(q)
    if len(q) != 2 or q[0] < q[1]:
        raise BadRangeError(f"need two opinions with q1 >= q2, got {q}")
    dists = [exact_maj_distribution(ell_odd + d, q) for d in range(3)]
    return ParityReport(
        ell_odd, tuple(q),
        tuple(float(x.probs[0]) for x in dists),
        tuple(float(x.probs[1]) for x in dists),
    )


def parity_scan(max_ell: int = 21, q1s: Optional[Sequence[float]] = None) -> ScanReport:
    if q1s is None:
        q1s = [round(0.5 + 0.05 * i, 10) for i in range(10)]
    rep = ScanReport("parity")
    for ell in range(1, max_ell + 1, 2):
        for q1 in q1s:
            r = parity_check(ell, (q1, 1.0 - q1))
            slack = min(PROB_TOL - abs(r.win[0] - r.win[1]), r.win[2] - r.win[1] + PROB_TOL)
            rep.note(slack, r.ok, (ell, q1))
    return rep


def g_monotonicity_scan(x_step: float = 0.01, y_max: int = 200, tol: float = 1e-12) -> ScanReport:
    """``g`` non-decreasing in its first argument and non-increasing in the second."""
    steps = int(round(1.0 / x_step))
    xs = [i / steps for i in range(steps + 1)]
    ys = list(range(1, y_max + 1))
    vals = np.array([[g(x, y) for y in ys] for x in xs])
    rep = ScanReport("g monotonicity")
    dx = np.diff(vals, axis=0)  # should be >= 0
    dy = np.diff(vals, axis=1)  # should be <= 0
    for (i, j) in zip(*np.nonzero(dx < -tol)):
        rep.violations.append(("x", xs[i], ys[j]))
    for (i, j) in zip(*np.nonzero(dy > tol)):
        rep.violations.append(("y", xs[i], ys[j]))
    rep.checked = dx.size + dy.size
    rep.worst_slack = float(min(dx.min(), -dy.max()))
    jump = max(abs(y ** -0.5 * (1 - 1 / y) ** ((y - 1) / 2) - g(y ** -0.5, y)) for y in ys)
    rep.info = {"branch_gap": jump}
    return rep


@dataclass
class LemmaRow:
    name: str
    passed: bool
    worst_slack: float
    checked: int
    detail: str = ""
    gating: bool = True  # False: reported but does not fail the suite


def run_verification(rng: Optional[np.random.Generator] = None, chernoff_trials: int = 200_000) -> list:
    """Run every deterministic check and return one row per result."""
    rng = rng or np.random.default_rng(0)
    rows = []

    amp = amplification_scan()
    rows.append(LemmaRow("majority amplification, k<=4, odd ell<=15", amp.passed, amp.worst_slack,
                         amp.checked, f"{len(amp.violations)} violations"))
    rows.append(LemmaRow("ties never favour a rival", amp.info["tie_violations"] == 0, 0.0, amp.checked,
                         f"{amp.info['tie_violations']} violations"))
    rows.append(LemmaRow("tie-free lead bound", amp.info["strict_ell0"] is not None, 0.0, amp.checked,
                         f"holds on the grid from ell={amp.info['strict_ell0']}"))

    binr = binary_amplification_scan()
    rows.append(LemmaRow("two-opinion amplification, odd ell<=21", binr.passed, binr.worst_slack,
                         binr.checked, f"{len(binr.violations)} violations"))

    bb = binbeta_scan()
    rows.append(LemmaRow("binomial tail = incomplete beta, ell<=30", bb.passed, bb.worst_slack,
                         bb.checked, f"{len(bb.violations)} points above 1e-9"))

    par = parity_scan()
    rows.append(LemmaRow("sample parity, odd ell<=21", par.passed, par.worst_slack, par.checked,
                         f"{len(par.violations)} violations"))

    gm = g_monotonicity_scan()
    rows.append(LemmaRow("g monotone in delta and ell", gm.passed, gm.worst_slack, gm.checked,
                         f"branch gap {gm.info['branch_gap']:.2e}"))

    st = stirling_scan(sign=+1)
    rows.append(LemmaRow("central binomial sandwich as printed", st.passed, st.worst_slack, st.checked,
                         f"fails for {len(st.violations)} of {st.checked} r", gating=False))
    st2 = stirling_scan(sign=-1)
    rows.append(LemmaRow("central binomial sandwich, negated exponents", st2.passed, st2.worst_slack,
                         st2.checked, f"{len(st2.violations)} violations"))

    cases = [(2000, 0.4, 0.3, 0.3, 0.2), (200, 0.35, 0.3, 0.35, 0.5), (100, 0.5, 0.1, 0.4, 0.3)]
    worst, ok = math.inf, True
    for n, p, r, q, th in cases:
        bound = chernoff_diff_bound(n, p, r, q, th)
        freq = chernoff_diff_tail(n, p, r, q, th, chernoff_trials, rng)
        worst = min(worst, bound - freq)
        ok &= freq <= bound
    rows.append(LemmaRow("three-valued Chernoff bound (Monte Carlo)", ok, worst, len(cases)))
    return rows


def format_table(rows: Sequence[LemmaRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  result   worst slack   n       detail"]
    for r in rows:
        status = "PASS" if r.passed else ("FAIL" if r.gating else "FLAG")
        lines.append(f"{r.name:<{width}}  {status:<7}  {r.worst_slack:>11.3e}  {r.checked:<6}  {r.detail}")
    return "\n".join(lines)
