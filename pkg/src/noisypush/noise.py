"""Noise matrices: construction, validation, channel sampling and the
majority-preservation check.

All products use the row-vector convention ``c @ P``: ``P[i, j]`` is the
probability that a sent opinion ``i + 1`` is delivered as ``j + 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .core import MASS_TOL, NoisyPushError, OpinionDistribution

FEAS_TOL = 1e-9


class NotStochasticError(NoisyPushError):
    def __init__(self, row: int, deviation: float, msg: str = ""):
        self.row = row
        self.deviation = deviation
        super().__init__(msg or f"row {row} is not a probability vector (deviation {deviation:.3g})")


class DimensionMismatchError(NoisyPushError):
    pass


class BadEpsilonError(NoisyPushError):
    pass


class BadRangeError(NoisyPushError):
    pass


class EmptyPolytopeError(NoisyPushError):
    pass


def validate(entries) -> None:
    """Raise NotStochasticError unless ``entries`` is a square row-stochastic matrix."""
    a = np.asarray(entries, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"noise matrix must be square, got shape {a.shape}")
    for i, row in enumerate(a):
        if row.min() < 0:
            raise NotStochasticError(i, float(row.min()), f"row {i} has a negative entry {row.min()}")
        dev = math.fsum(row) - 1.0
        if abs(dev) > MASS_TOL:
            raise NotStochasticError(i, dev)


@dataclass(frozen=True, eq=False)
class NoiseMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        validate(a)
        if a.shape[0] < 2:
            raise DimensionMismatchError("noise matrix needs k >= 2")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def __eq__(self, other):
        return isinstance(other, NoiseMatrix) and np.array_equal(self.entries, other.entries)

    def __repr__(self):
        return f"NoiseMatrix(k={self.k}, rows={self.entries.tolist()})"

    def row(self, i: int) -> np.ndarray:
        return self.entries[i - 1]

    def compose(self, other: "NoiseMatrix") -> "NoiseMatrix":
        """Channel ``self`` followed by channel ``other``."""
        if other.k != self.k:
            raise DimensionMismatchError(f"cannot compose k={self.k} with k={other.k}")
        return NoiseMatrix(self.entries @ other.entries)

    def transpose(self) -> "NoiseMatrix":
        """Transposed matrix; only valid when the input is doubly stochastic."""
        return NoiseMatrix(self.entries.T)

    @property
    def T(self) -> "NoiseMatrix":
        return self.transpose()

    def cumulative(self) -> np.ndarray:
        """Per-row CDFs with the last column pinned to exactly 1."""
        cum = np.cumsum(self.entries, axis=1)
        cum[:, -1] = 1.0
        return cum

    def to_dict(self) -> dict:
        return {"k": self.k, "rows": self.entries.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseMatrix":
        rows = d["rows"]
        if "k" in d and (len(rows) != int(d["k"]) or any(len(r) != int(d["k"]) for r in rows)):
            raise DimensionMismatchError(f"declared k={d['k']} does not match rows")
        return cls(np.asarray(rows, dtype=float))


def identity(k: int) -> NoiseMatrix:
    return NoiseMatrix(np.eye(k))


def make_binary(epsilon: float) -> NoiseMatrix:
    if not (0.0 <= epsilon < 0.5):
        raise BadEpsilonError(f"binary channel needs 0 <= epsilon < 1/2, got {epsilon}")
    o = 0.5 - epsilon
    d = 1.0 - o
    return NoiseMatrix([[d, o], [o, d]])


def make_uniform(k: int, epsilon: float) -> NoiseMatrix:
    """Diagonal ``1/k + eps``, every off-diagonal entry ``1/k - eps/(k-1)``."""
    if k < 2:
        raise DimensionMismatchError(f"k must be >= 2, got {k}")
    if not (0.0 <= epsilon < 1.0 - 1.0 / k):
        raise BadEpsilonError(f"uniform channel with k={k} needs 0 <= epsilon < {1 - 1 / k:.4g}, got {epsilon}")
    off = 1.0 / k - epsilon / (k - 1)
    a = np.full((k, k), off)
    # diagonal as 1 - (k-1)*off rather than 1/k + eps keeps rows summing to 1
    np.fill_diagonal(a, 1.0 - off * (k - 1))
    return NoiseMatrix(a)


def make_cyclic_dominant(epsilon: float) -> NoiseMatrix:
    """Diagonally dominant 3x3 matrix that fails to preserve the majority."""
    if not (0.0 < epsilon < 0.5):
        raise BadEpsilonError(f"cyclic channel needs 0 < epsilon < 1/2, got {epsilon}")
    hi, lo = 0.5 + epsilon, 0.5 - epsilon
    return NoiseMatrix([[hi, 0.0, lo], [lo, hi, 0.0], [0.0, lo, hi]])


def push_through(c: OpinionDistribution, P: NoiseMatrix) -> OpinionDistribution:
    """Expected post-noise distribution ``c @ P``; undecided mass is untouched."""
    if c.k != P.k:
        raise DimensionMismatchError(f"distribution has k={c.k}, matrix has k={P.k}")
    x = c.as_array()
    y = x @ P.entries
    a = c.opinionated
    s = y.sum()
    if s > 0:
        y = y * (a / s)
    y = np.clip(y, 0.0, None)
    return OpinionDistribution(tuple(y), c.undecided, c.n_ref)


def sample_channel(i: int, P: NoiseMatrix, rng: np.random.Generator) -> int:
    """Deliver one message ``i`` through the channel (inverse-CDF on row ``i``)."""
    if not (1 <= i <= P.k):
        raise NoisyPushError(f"opinion {i} outside 1..{P.k}")
    u = rng.random()
    cum = P.cumulative()[i - 1]
    return int(np.searchsorted(cum, u, side="right")) + 1


def apply_noise(sent: np.ndarray, P: NoiseMatrix, rng: np.random.Generator,
                cum: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorised ``sample_channel`` over an array of sent opinions (1..k)."""
    sent = np.asarray(sent)
    if sent.size == 0:
        return sent.astype(np.int8)
    if cum is None:
        cum = P.cumulative()
    u = rng.random(sent.size)
    rows = cum[sent - 1]
    return (1 + (u[:, None] >= rows[:, :-1]).sum(axis=1)).astype(np.int8)


def recolor_counts(sent_counts: Sequence[int], P: NoiseMatrix, rng: np.random.Generator) -> np.ndarray:
    """Post-noise colour counts for ``sent_counts[i]`` balls of each colour.

    Each ball is recoloured independently, so the counts per source colour are
    multinomial with the corresponding row of ``P``.
    """
    out = np.zeros(P.k, dtype=np.int64)
    for i, cnt in enumerate(sent_counts):
        if cnt:
            out += rng.multinomial(int(cnt), P.entries[i])
    return out


def check_bounded_sufficient(p: float, q_l: float, q_u: float, delta: float) -> bool:
    """Sufficient condition for a constant-diagonal matrix to be majority preserving.

    For a matrix with diagonal ``p`` and off-diagonal entries in ``[q_l, q_u]``
    the worst-case lead is at least ``(p - q_u) * delta - (q_u - q_l)``; with
    ``epsilon = (p - q_u) / 2`` that exceeds ``epsilon * delta`` iff the
    returned condition holds.
    """
    if not (0.0 <= q_l <= q_u <= p <= 1.0):
        raise BadRangeError(f"need 0 <= q_l <= q_u <= p <= 1, got q_l={q_l}, q_u={q_u}, p={p}")
    if not (0.0 < delta <= 1.0):
        raise BadRangeError(f"delta must lie in (0, 1], got {delta}")
    return (p - q_u) * delta / 2.0 >= (q_u - q_l) - 1e-12


def implied_epsilon(p: float, q_u: float) -> float:
    return (p - q_u) / 2.0


def bounded_class_params(P: NoiseMatrix) -> tuple:
    """Return ``(p, q_l, q_u)`` for a matrix with a constant diagonal."""
    a = P.entries
    diag = np.diag(a)
    if np.ptp(diag) > 1e-12:
        raise BadRangeError("matrix diagonal is not constant")
    off = a[~np.eye(P.k, dtype=bool)]
    return float(diag[0]), float(off.min()), float(off.max())


@dataclass
class MpReport:
    """Worst-case post-noise lead of opinion ``m`` over each rival.

    ``per_rival_margin[r]`` is the minimum of ``(c @ P)[m] - (c @ P)[r]`` over
    every ``delta``-biased ``c``; ``witness_distributions[r]`` attains it.
    """

    m: int
    delta: float
    rivals: list
    per_rival_margin: list
    witness_distributions: list
    matrix: NoiseMatrix = field(repr=False)
    is_mp_for_epsilon: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return min(self.per_rival_margin)

    def is_mp(self, epsilon: float) -> bool:
        # strict inequality; margins within FEAS_TOL of the threshold count as equal
        return all(x - epsilon * self.delta > FEAS_TOL for x in self.per_rival_margin)

    def max_epsilon(self) -> float:
        """Supremum of the epsilons for which the matrix is m.p. at this delta."""
        return self.margin / self.delta

    def objective(self, c, rival: int) -> float:
        y = np.asarray(c, dtype=float) @ self.matrix.entries
        return float(y[self.m - 1] - y[rival - 1])


def lead_objective(P: NoiseMatrix, c, m: int, i: int) -> float:
    """``(c @ P)[m] - (c @ P)[i]`` for 1-based opinions."""
    y = np.asarray(c, dtype=float) @ P.entries
    return float(y[m - 1] - y[i - 1])


def _solve(a: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    """Gaussian elimination with partial pivoting; None if singular."""
    a = a.astype(float).copy()
    b = b.astype(float).copy()
    n = len(b)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < 1e-12:
            return None
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        f = a[col + 1:, col] / a[col, col]
        a[col + 1:] -= np.outer(f, a[col])
        b[col + 1:] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def biased_polytope_vertices(k: int, m: int, delta: float) -> np.ndarray:
    """Vertices of ``{c >= 0, sum c = 1, c_m - c_j >= delta for j != m}``."""
    others = [j for j in range(k) if j != m - 1]
    # candidate tight constraints: ("zero", j) -> c_j = 0 ; ("gap", j) -> c_m - c_j = delta
    cands = [("zero", j) for j in others] + [("gap", j) for j in others]
    verts = []
    for subset in itertools.combinations(cands, k - 1):
        a = np.zeros((k, k))
        b = np.zeros(k)
        a[0, :] = 1.0
        b[0] = 1.0
        for r, (kind, j) in enumerate(subset, start=1):
            if kind == "zero":
                a[r, j] = 1.0
            else:
                a[r, m - 1] = 1.0
                a[r, j] = -1.0
                b[r] = delta
        x = _solve(a, b)
        if x is None:
            continue
        if x.min() < -FEAS_TOL:
            continue
        if any(x[m - 1] - x[j] < delta - FEAS_TOL for j in others):
            continue
        x = np.clip(x, 0.0, None)
        if not any(np.allclose(x, v, atol=1e-12) for v in verts):
            verts.append(x)
    return np.array(verts)


def mp_margin(P: NoiseMatrix, m: int, delta: float,
              epsilons: Iterable[float] = ()) -> MpReport:
    """Minimum post-noise lead of ``m`` over each rival across delta-biased inputs.

    The objective is linear, so its minimum over the polytope is attained at a
    vertex; vertices come from every choice of ``k - 1`` tight constraints.
    """
    if not (1 <= m <= P.k):
        raise NoisyPushError(f"opinion {m} outside 1..{P.k}")
    if not (0.0 < delta <= 1.0):
        raise BadRangeError(f"delta must lie in (0, 1], got {delta}")
    verts = biased_polytope_vertices(P.k, m, delta)
    if len(verts) == 0:
        raise EmptyPolytopeError(f"no {delta}-biased distribution exists for k={P.k}")
    y = verts @ P.entries
    rivals, margins, witnesses = [], [], []
    for i in range(1, P.k + 1):
        if i == m:
            continue
        obj = y[:, m - 1] - y[:, i - 1]
        best = int(np.argmin(obj))
        rivals.append(i)
        margins.append(float(obj[best]))
        witnesses.append(verts[best].copy())
    rep = MpReport(m, float(delta), rivals, margins, witnesses, P)
    rep.is_mp_for_epsilon = {float(e): rep.is_mp(e) for e in epsilons}
    return rep


def grid_margin(P: NoiseMatrix, m: int, delta: float, step: float = 0.01) -> list:
    """Brute-force per-rival minimum over a regular simplex grid (oracle)."""
    steps = int(round(1.0 / step))
    k = P.k
    pts = np.array([c for c in itertools.product(range(steps + 1), repeat=k - 1) if sum(c) <= steps])
    pts = np.column_stack([pts, steps - pts.sum(axis=1)]) / steps
    others = [j for j in range(k) if j != m - 1]
    ok = np.all(pts[:, [m - 1]] - pts[:, others] >= delta - 1e-12, axis=1)
    pts = pts[ok]
    if len(pts) == 0:
        raise EmptyPolytopeError("grid contains no biased point")
    y = pts @ P.entries
    return [float((y[:, m - 1] - y[:, i]).min()) for i in others]


def load_matrix(path) -> NoiseMatrix:
    """Read a ``{k: ..., rows: [[...], ...]}`` document (YAML or JSON)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as e:
        raise NoisyPushError(f"cannot read noise matrix file {path}: {e}") from e
    if not isinstance(doc, dict) or "rows" not in doc:
        raise NoisyPushError(f"{path}: expected a mapping with a 'rows' field")
    return NoiseMatrix.from_dict(doc)


def save_matrix(P: NoiseMatrix, path) -> None:
    Path(path).write_text(yaml.safe_dump(P.to_dict(), sort_keys=False))


def parse_noise_spec(spec: str) -> NoiseMatrix:
    """Parse ``binary:eps``, ``uniform:k:eps``, ``cyclic:eps`` or ``file:path``."""
    kind, _, rest = spec.partition(":")
    try:
        if kind == "binary":
            return make_binary(float(rest))
        if kind == "uniform":
            k, eps = rest.split(":")
            return make_uniform(int(k), float(eps))
        if kind == "cyclic":
            return make_cyclic_dominant(float(rest))
        if kind == "identity":
            return identity(int(rest))
    except ValueError as e:
        if isinstance(e, NoisyPushError):
            raise
        raise NoisyPushError(f"malformed noise spec {spec!r}: {e}") from e
    if kind == "file":
        return load_matrix(rest)
    raise NoisyPushError(f"unknown noise spec {spec!r}")
