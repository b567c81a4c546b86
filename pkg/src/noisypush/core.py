"""Shared domain types: opinion distributions, protocol parameters, schedules
and run records.

Opinions are integers ``1..k``. ``UNDECIDED`` (0) marks nodes that hold no
opinion yet; it is a sentinel, never a message value.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

UNDECIDED = 0

# Tolerance on the unit-total invariant of distributions and matrix rows.
MASS_TOL = 1e-12

RUMOR = "rumor"
PLURALITY = "plurality"
PROCESS_KINDS = ("O", "B", "P")


class NoisyPushError(ValueError):
    """Base class for every validation error raised by this package."""


class ZeroOpinionatedError(NoisyPushError):
    pass


class CountOverflowError(NoisyPushError):
    pass


class BadParamsError(NoisyPushError):
    pass


class RegimeWarning(UserWarning):
    """Parameters fall outside the regime in which success is guaranteed."""


@dataclass(frozen=True)
class OpinionDistribution:
    """Fractions of nodes holding each opinion, plus the undecided mass.

    ``fractions[i]`` is the fraction of *all* nodes holding opinion ``i + 1``,
    so ``sum(fractions) + undecided == 1``.
    """

    fractions: tuple
    undecided: float = 0.0
    n_ref: Optional[int] = None

    def __post_init__(self):
        fr = tuple(float(x) for x in self.fractions)
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "undecided", float(self.undecided))
        if len(fr) < 1:
            raise NoisyPushError("distribution needs at least one opinion")
        if min(fr) < -MASS_TOL or self.undecided < -MASS_TOL:
            raise NoisyPushError(f"negative mass in distribution {fr}, undecided={self.undecided}")
        total = math.fsum(fr) + self.undecided
        if abs(total - 1.0) > MASS_TOL:
            raise NoisyPushError(f"distribution total is {total!r}, expected 1")

    @classmethod
    def from_fractions(cls, fractions: Sequence[float], n_ref: Optional[int] = None):
        """Build a distribution whose undecided mass is whatever is left over."""
        fr = tuple(float(x) for x in fractions)
        return cls(fr, max(0.0, 1.0 - math.fsum(fr)), n_ref)

    @property
    def k(self) -> int:
        return len(self.fractions)

    @property
    def opinionated(self) -> float:
        """The opinionated mass ``a``."""
        return math.fsum(self.fractions)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.fractions, dtype=float)

    def normalized(self) -> np.ndarray:
        """Fractions among opinionated nodes only."""
        a = self.opinionated
        if a <= 0:
            raise ZeroOpinionatedError("no opinionated mass to normalize")
        return self.as_array() / a

    def is_unanimous(self, tol: float = 0.0) -> Optional[int]:
        """Return the opinion every node holds, or None."""
        if self.undecided > tol:
            return None
        for i, x in enumerate(self.fractions):
            if x >= 1.0 - tol:
                return i + 1
        return None

    def counts(self) -> np.ndarray:
        if self.n_ref is None:
            raise NoisyPushError("distribution has no reference population size")
        return np.rint(self.as_array() * self.n_ref).astype(np.int64)


def _check_opinion(m: int, k: int) -> None:
    if not (1 <= m <= k):
        raise NoisyPushError(f"opinion {m} outside 1..{k}")


def bias(c: OpinionDistribution, m: int) -> float:
    """Lead of opinion ``m`` over its strongest rival among opinionated nodes."""
    _check_opinion(m, c.k)
    x = c.normalized()
    if c.k == 1:
        return float(x[0])
    rivals = np.delete(x, m - 1)
    return float(x[m - 1] - rivals.max())


def counts_to_distribution(counts: Sequence[int], n: int) -> OpinionDistribution:
    counts = [int(x) for x in counts]
    if any(x < 0 for x in counts):
        raise NoisyPushError(f"negative count in {counts}")
    total = sum(counts)
    if total > n:
        raise CountOverflowError(f"counts sum to {total} > n={n}")
    # exact rational undecided mass, so the unit total holds to rounding
    return OpinionDistribution(tuple(x / n for x in counts), (n - total) / n, n)


@dataclass(frozen=True)
class ProtocolParams:
    """Population size, noise level and the protocol's tuning constants.

    ``initial_opinionated`` is the size of the initially opinionated set; the
    plurality schedule needs it, rumor mode ignores it.
    """

    n: int
    k: int
    epsilon: float
    s: float = 1.0
    beta: float = 2.0
    phi: float = 3.0
    c_stage2: float = 3.0
    c_final: float = 4.0
    mode: str = RUMOR
    initial_opinionated: Optional[int] = None

    def __post_init__(self):
        if self.n < 2:
            raise BadParamsError(f"n must be >= 2, got {self.n}")
        if self.k < 2:
            raise BadParamsError(f"k must be >= 2, got {self.k}")
        if not (0.0 < self.epsilon < 1.0):
            raise BadParamsError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not (self.phi > self.beta > self.s > 0):
            raise BadParamsError(
                f"need phi > beta > s > 0, got phi={self.phi}, beta={self.beta}, s={self.s}"
            )
        if self.c_stage2 <= 0 or self.c_final <= 0:
            raise BadParamsError("stage-2 constants must be positive")
        if self.mode not in (RUMOR, PLURALITY):
            raise BadParamsError(f"unknown mode {self.mode!r}")
        if self.mode == PLURALITY:
            if self.initial_opinionated is None or not (1 <= self.initial_opinionated <= self.n):
                raise BadParamsError("plurality mode needs 1 <= initial_opinionated <= n")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolParams":
        return cls(**d)


def regime_warnings(params: ProtocolParams) -> list:
    """Messages for parameter choices outside the guaranteed-success regime."""
    out = []
    if params.epsilon < params.n ** -0.25:
        out.append(
            f"epsilon={params.epsilon} is below n^(-1/4)={params.n ** -0.25:.4g}; "
            "rumor spreading may fail"
        )
    if params.mode == PLURALITY and params.initial_opinionated is not None:
        need = math.log(params.n) / params.epsilon**2
        if params.initial_opinionated < need:
            out.append(
                f"|S|={params.initial_opinionated} is below ln(n)/eps^2={need:.1f}; "
                "plurality consensus may fail"
            )
    for msg in out:
        warnings.warn(msg, RegimeWarning, stacklevel=2)
    return out


@dataclass(frozen=True)
class Phase:
    stage: int
    index: int
    length: int
    sample_size: int  # L: 1 in stage 1 (single-slot reservoir), l or l' in stage 2
    start_round: int  # rounds already elapsed before this phase

    def __post_init__(self):
        if self.stage == 2 and self.length != 2 * self.sample_size:
            raise BadParamsError(
                f"stage-2 phase length {self.length} must be twice the sample size {self.sample_size}"
            )

    @property
    def end_round(self) -> int:
        return self.start_round + self.length


@dataclass(frozen=True)
class PhaseSchedule:
    stage1_phase_lengths: tuple
    stage2_phase_lengths: tuple
    T: int
    T_prime: int
    ell: int
    ell_prime: int
    tau: tuple = field(default=())

    def __post_init__(self):
        if not self.tau:
            lengths = self.stage1_phase_lengths + self.stage2_phase_lengths
            object.__setattr__(self, "tau", tuple(int(x) for x in np.cumsum(lengths)))

    @property
    def total_rounds(self) -> int:
        return self.tau[-1]

    @property
    def stage1_rounds(self) -> int:
        return int(sum(self.stage1_phase_lengths))

    def phases(self, stage1_only: bool = False):
        """Yield every phase of both stages in execution order."""
        start = 0
        for j, length in enumerate(self.stage1_phase_lengths):
            yield Phase(1, j, length, 1, start)
            start += length
        if stage1_only:
            return
        last = len(self.stage2_phase_lengths) - 1
        for j, length in enumerate(self.stage2_phase_lengths):
            yield Phase(2, j, length, self.ell_prime if j == last else self.ell, start)
            start += length


@dataclass
class RunRecord:
    seed: int
    params: ProtocolParams
    process_kind: str
    target: int
    phases: list = field(default_factory=list)  # Phase per boundary
    per_phase_distributions: list = field(default_factory=list)
    per_phase_traffic: list = field(default_factory=list)  # h per phase
    converged_to: Optional[int] = None
    convergence_round: Optional[int] = None
    max_sample_size: int = 0
    max_round_deliveries: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "params": self.params.to_dict(),
            "process": self.process_kind,
            "target": self.target,
            "stage": [p.stage for p in self.phases],
            "phase": [p.index for p in self.phases],
            "round": [p.end_round for p in self.phases],
            "phase_length": [p.length for p in self.phases],
            "sample_size": [p.sample_size for p in self.phases],
            "fractions": [list(d.fractions) for d in self.per_phase_distributions],
            "undecided": [d.undecided for d in self.per_phase_distributions],
            "traffic": list(self.per_phase_traffic),
            "converged_to": self.converged_to,
            "convergence_round": self.convergence_round,
            "max_sample_size": self.max_sample_size,
            "max_round_deliveries": self.max_round_deliveries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        params = ProtocolParams.from_dict(d["params"])
        phases = [
            Phase(st, ix, ln, L, rnd - ln)
            for st, ix, ln, L, rnd in zip(
                d["stage"], d["phase"], d["phase_length"], d["sample_size"], d["round"]
            )
        ]
        dists = [
            OpinionDistribution(tuple(fr), und, params.n)
            for fr, und in zip(d["fractions"], d["undecided"])
        ]
        return cls(
            seed=d["seed"],
            params=params,
            process_kind=d["process"],
            target=d["target"],
            phases=phases,
            per_phase_distributions=dists,
            per_phase_traffic=list(d["traffic"]),
            converged_to=d["converged_to"],
            convergence_round=d["convergence_round"],
            max_sample_size=d["max_sample_size"],
            max_round_deliveries=d["max_round_deliveries"],
        )

    def succeeded(self) -> bool:
        return self.converged_to == self.target


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by the seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
