"""Execution of the protocol under the three stochastic processes.

* ``O``: the real push model, round by round, every node keeping a reservoir
  sample of what it receives.
* ``B``: per phase, all sent messages are recoloured by the noise and thrown
  into uniformly random bins at once.
* ``P``: per phase, node ``u`` receives an independent Poisson(h_i / n) number
  of copies of every opinion ``i``.

All three share the phase-end rules of :mod:`noisypush.protocol`, applied to
whole populations with array operations.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    PLURALITY,
    PROCESS_KINDS,
    RUMOR,
    UNDECIDED,
    NoisyPushError,
    Phase,
    ProtocolParams,
    RunRecord,
    bias,
    counts_to_distribution,
    make_rng,
)
from .noise import NoiseMatrix, recolor_counts
from .protocol import compute_schedule

log = logging.getLogger(__name__)

# Balls thrown per vectorised chunk in process B; bounds peak memory.
_CHUNK = 1 << 22


@dataclass(frozen=True)
class InitialCondition:
    kind: str
    counts: tuple  # nodes initially holding each opinion 1..k

    @property
    def target(self) -> int:
        return int(np.argmax(self.counts)) + 1

    @property
    def size(self) -> int:
        return int(sum(self.counts))


def rumor(m: int, k: int) -> InitialCondition:
    """A single source node holding opinion ``m``."""
    if not (1 <= m <= k):
        raise NoisyPushError(f"source opinion {m} outside 1..{k}")
    counts = [0] * k
    counts[m - 1] = 1
    return InitialCondition(RUMOR, tuple(counts))


def plurality(counts: Sequence[int]) -> InitialCondition:
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise NoisyPushError(f"plurality counts must be non-negative and not all zero: {counts}")
    return InitialCondition(PLURALITY, counts)


@dataclass
class PhaseTraffic:
    """Messages of one phase: ``sent`` before noise, ``delivered`` after."""

    sent: np.ndarray
    delivered: np.ndarray

    @property
    def h(self) -> int:
        return int(self.delivered.sum())


@dataclass
class SystemState:
    """Population state: one opinion per node plus the current phase's buffers.

    ``j_u`` is the phase in which a node first became opinionated (-1 for
    nodes opinionated from the start). ``buffer``/``seen`` are the process-O
    reservoirs of the phase in progress.
    """

    n: int
    k: int
    opinions: np.ndarray
    j_u: np.ndarray
    round: int = 0
    phase: Optional[Phase] = None
    senders: Optional[np.ndarray] = None
    sender_counts: Optional[np.ndarray] = None
    buffer: Optional[np.ndarray] = None
    seen: Optional[np.ndarray] = None
    receptive: Optional[np.ndarray] = None
    delivered: Optional[np.ndarray] = None
    max_round_deliveries: int = 0

    @classmethod
    def from_initial(cls, n: int, init: InitialCondition) -> "SystemState":
        k = len(init.counts)
        if init.size > n:
            raise NoisyPushError(f"initial opinions need {init.size} nodes, n={n}")
        ops = np.zeros(n, dtype=np.int8)
        ops[: init.size] = np.repeat(np.arange(1, k + 1, dtype=np.int8), init.counts)
        j_u = np.where(ops != UNDECIDED, -1, np.iinfo(np.int32).max).astype(np.int32)
        return cls(n, k, ops, j_u)

    def opinion_counts(self) -> np.ndarray:
        return np.bincount(self.opinions, minlength=self.k + 1)[1:]

    def distribution(self):
        return counts_to_distribution(self.opinion_counts(), self.n)

    def begin_phase(self, phase: Phase) -> None:
        """Fix the senders and reset the reception buffers for ``phase``."""
        self.phase = phase
        self.senders = self.opinions[self.opinions != UNDECIDED].copy()
        self.sender_counts = np.bincount(self.senders, minlength=self.k + 1)[1:]
        self.seen = np.zeros(self.n, dtype=np.int64)
        self.buffer = np.zeros((self.n, phase.sample_size), dtype=np.int8)
        self.delivered = np.zeros(self.k, dtype=np.int64)
        if phase.stage == 1:
            # opinionated nodes ignore everything they hear in stage 1
            self.receptive = self.opinions == UNDECIDED
        else:
            self.receptive = self.opinions != UNDECIDED


def _fold_into_reservoirs(state: SystemState, recv: np.ndarray, msgs: np.ndarray,
                          rng: np.random.Generator) -> None:
    """Deliver messages (already in random order) into per-node reservoirs."""
    L = state.phase.sample_size
    owner = np.empty(state.n, dtype=np.int64)
    pending = np.arange(recv.size)
    # each pass handles exactly one pending message per receiver, so the
    # fancy-index writes below never collide
    while pending.size:
        r = recv[pending]
        owner[r] = pending
        chosen = owner[r] == pending
        v, msg = r[chosen], msgs[pending[chosen]]
        pending = pending[~chosen]
        t = state.seen[v] + 1
        state.seen[v] = t
        if L == 1:
            # single slot: replace with probability 1/t
            take = rng.random(v.size) * t < 1.0
            state.buffer[v[take], 0] = msg[take]
            continue
        fill = t <= L
        state.buffer[v[fill], t[fill] - 1] = msg[fill]
        over = ~fill
        if over.any():
            vo, mo, to = v[over], msg[over], t[over]
            slot = rng.integers(0, to)
            keep = slot < L
            state.buffer[vo[keep], slot[keep]] = mo[keep]


def run_round_O(state: SystemState, P: NoiseMatrix, rng: np.random.Generator) -> SystemState:
    """One synchronous round of the noisy push model.

    Every sender pushes once to a uniformly random node (itself included);
    all simultaneous messages are delivered, in random order.
    """
    if state.phase is None:
        raise NoisyPushError("begin_phase must be called before running rounds")
    m = state.senders.size
    state.round += 1
    if m == 0:
        return state
    # per-message noise, drawn as per-opinion multinomials and shuffled into
    # a uniformly random delivery order
    colors = recolor_counts(state.sender_counts, P, rng)
    state.delivered += colors
    msgs = rng.permutation(np.repeat(np.arange(1, state.k + 1, dtype=np.int8), colors))
    recv = rng.integers(0, state.n, size=m)
    load = np.bincount(recv, minlength=state.n).max()
    state.max_round_deliveries = max(state.max_round_deliveries, int(load))
    keep = state.receptive[recv]
    _fold_into_reservoirs(state, recv[keep], msgs[keep], rng)
    return state


def _sample_without_replacement(counts: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    """Per-row colour counts of a uniform ``L``-subset of each row's balls."""
    rows, k = counts.shape
    out = np.zeros_like(counts)
    remaining = counts.sum(axis=1)
    need = np.full(rows, L, dtype=np.int64)
    for i in range(k - 1):
        act = need > 0
        if not act.any():
            break
        good = counts[act, i]
        bad = remaining[act] - good
        x = np.zeros(good.shape, dtype=np.int64)
        nonzero = good > 0
        if nonzero.any():
            x[nonzero] = rng.hypergeometric(good[nonzero], bad[nonzero], need[act][nonzero])
        out[act, i] = x
        need[act] -= x
        remaining[act] -= good
    out[:, k - 1] = need
    return out


def _argmax_random_ties(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax (1-based) with ties broken uniformly at random."""
    jitter = rng.random(counts.shape)
    return (np.argmax(counts + jitter, axis=1) + 1).astype(np.int8)


def _pick_proportional(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise colour of one ball drawn uniformly from each row's multiset."""
    tot = counts.sum(axis=1)
    u = rng.random(len(tot)) * tot
    cum = np.cumsum(counts, axis=1)[:, :-1]
    return (1 + (u[:, None] >= cum).sum(axis=1)).astype(np.int8)


def _stage1_adopt(state: SystemState, phase: Phase, nodes: np.ndarray, picks: np.ndarray) -> None:
    state.opinions[nodes] = picks
    state.j_u[nodes] = phase.index


def _end_phase_from_buffers(state: SystemState, rng: np.random.Generator) -> None:
    phase = state.phase
    L = phase.sample_size
    if phase.stage == 1:
        nodes = np.flatnonzero(state.receptive & (state.seen > 0))
        _stage1_adopt(state, phase, nodes, state.buffer[nodes, 0])
    else:
        nodes = np.flatnonzero(state.receptive & (state.seen >= L))
        sample = state.buffer[nodes]
        occ = np.stack([(sample == i).sum(axis=1) for i in range(1, state.k + 1)], axis=1)
        state.opinions[nodes] = _argmax_random_ties(occ, rng)


def apply_phase_end(state: SystemState, phase: Phase, counts: np.ndarray,
                    rng: np.random.Generator) -> None:
    """Phase-end rules given each node's received opinion counts (n x k)."""
    tot = counts.sum(axis=1)
    if phase.stage == 1:
        nodes = np.flatnonzero((state.opinions == UNDECIDED) & (tot > 0))
        _stage1_adopt(state, phase, nodes, _pick_proportional(counts[nodes], rng))
    else:
        L = phase.sample_size
        nodes = np.flatnonzero((state.opinions != UNDECIDED) & (tot >= L))
        sample = _sample_without_replacement(counts[nodes], L, rng)
        state.opinions[nodes] = _argmax_random_ties(sample, rng)


def phase_traffic(state: SystemState, phase: Phase, P: NoiseMatrix,
                  rng: np.random.Generator) -> PhaseTraffic:
    """Sent messages of a phase and their recolouring by the noise."""
    sent = state.opinion_counts() * phase.length
    return PhaseTraffic(sent, recolor_counts(sent, P, rng))


def throw_balls(delivered: Sequence[int], n: int, rng: np.random.Generator) -> np.ndarray:
    """Throw ``delivered[i]`` balls of colour ``i`` into ``n`` uniform bins."""
    k = len(delivered)
    counts = np.zeros((n, k), dtype=np.int64)
    for i, h_i in enumerate(delivered):
        left = int(h_i)
        while left > 0:
            chunk = min(left, _CHUNK)
            counts[:, i] += np.bincount(rng.integers(0, n, size=chunk), minlength=n)
            left -= chunk
    return counts


def poisson_counts(delivered: Sequence[int], n: int, rng: np.random.Generator) -> np.ndarray:
    """Independent Poisson(h_i / n) copies of each colour for every node."""
    lam = np.asarray(delivered, dtype=float) / n
    return rng.poisson(lam, size=(n, len(lam)))


def run_phase_O(state: SystemState, phase: Phase, P: NoiseMatrix,
                rng: np.random.Generator) -> PhaseTraffic:
    state.begin_phase(phase)
    sent = np.bincount(state.senders, minlength=state.k + 1)[1:] * phase.length
    for _ in range(phase.length):
        run_round_O(state, P, rng)
    traffic = PhaseTraffic(sent, state.delivered.copy())
    _end_phase_from_buffers(state, rng)
    state.phase = None
    return traffic


def run_phase_B(state: SystemState, phase: Phase, P: NoiseMatrix,
                rng: np.random.Generator) -> PhaseTraffic:
    """Recolour every ball of the phase, then throw them all into uniform bins."""
    traffic = phase_traffic(state, phase, P, rng)
    counts = throw_balls(traffic.delivered, state.n, rng)
    apply_phase_end(state, phase, counts, rng)
    state.round += phase.length
    return traffic


def run_phase_P(state: SystemState, phase: Phase, P: NoiseMatrix,
                rng: np.random.Generator) -> PhaseTraffic:
    """Poissonised phase: delivered mass is not conserved."""
    traffic = phase_traffic(state, phase, P, rng)
    counts = poisson_counts(traffic.delivered, state.n, rng)
    apply_phase_end(state, phase, counts, rng)
    state.round += phase.length
    return traffic


def run_phase(state: SystemState, phase: Phase, P: NoiseMatrix, process: str,
              rng: np.random.Generator) -> PhaseTraffic:
    if process == "O":
        return run_phase_O(state, phase, P, rng)
    if process == "B":
        return run_phase_B(state, phase, P, rng)
    if process == "P":
        return run_phase_P(state, phase, P, rng)
    raise NoisyPushError(f"unknown process {process!r}; expected one of {PROCESS_KINDS}")


def _convergence(record: RunRecord) -> None:
    dists = record.per_phase_distributions
    if not dists:
        return
    final = dists[-1].is_unanimous()
    record.converged_to = final
    if final is None:
        return
    first = len(dists) - 1
    while first > 0 and dists[first - 1].is_unanimous() == final:
        first -= 1
    record.convergence_round = record.phases[first].end_round


def run_trial(params: ProtocolParams, matrix: NoiseMatrix, process: str,
              initial: InitialCondition, seed: int, stage1_only: bool = False) -> RunRecord:
    """Run the whole protocol once; deterministic given ``seed``."""
    if process not in PROCESS_KINDS:
        raise NoisyPushError(f"unknown process {process!r}; expected one of {PROCESS_KINDS}")
    if matrix.k != params.k or len(initial.counts) != params.k:
        raise NoisyPushError(
            f"k mismatch: params k={params.k}, matrix k={matrix.k}, initial k={len(initial.counts)}"
        )
    sched = compute_schedule(params)
    rng = make_rng(seed)
    state = SystemState.from_initial(params.n, initial)
    rec = RunRecord(seed=seed, params=params, process_kind=process, target=initial.target)
    for phase in sched.phases(stage1_only=stage1_only):
        traffic = run_phase(state, phase, matrix, process, rng)
        rec.phases.append(phase)
        rec.per_phase_distributions.append(state.distribution())
        rec.per_phase_traffic.append(traffic.h)
        rec.max_sample_size = max(rec.max_sample_size, phase.sample_size)
    if process == "O":
        rec.max_round_deliveries = state.max_round_deliveries
    _convergence(rec)
    return rec


@dataclass(frozen=True)
class TrialConfig:
    params: ProtocolParams
    matrix: NoiseMatrix
    process: str
    initial: InitialCondition
    stage1_only: bool = False


@dataclass
class BatchSummary:
    n_trials: int
    success_rate: float
    converged_trials: int
    mean_convergence_round: Optional[float]
    median_convergence_round: Optional[float]
    p10_convergence_round: Optional[float]
    p90_convergence_round: Optional[float]
    mean_bias_trajectory: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BatchResult:
    records: list
    summary: BatchSummary


def _run_one(args) -> RunRecord:
    cfg, seed = args
    return run_trial(cfg.params, cfg.matrix, cfg.process, cfg.initial, seed, cfg.stage1_only)


def summarize(records: Sequence[RunRecord]) -> BatchSummary:
    n = len(records)
    rounds = np.array([r.convergence_round for r in records if r.convergence_round is not None], dtype=float)
    succ = sum(r.succeeded() for r in records)
    traj = []
    if records:
        length = min(len(r.per_phase_distributions) for r in records)
        for j in range(length):
            vals = []
            for r in records:
                d = r.per_phase_distributions[j]
                vals.append(bias(d, r.target) if d.opinionated > 0 else np.nan)
            traj.append(float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else None)

    def q(p):
        return float(np.percentile(rounds, p)) if rounds.size else None

    return BatchSummary(
        n_trials=n,
        success_rate=succ / n if n else 0.0,
        converged_trials=int(rounds.size),
        mean_convergence_round=float(rounds.mean()) if rounds.size else None,
        median_convergence_round=q(50),
        p10_convergence_round=q(10),
        p90_convergence_round=q(90),
        mean_bias_trajectory=traj,
    )


def trial_batch(config: TrialConfig, n_trials: int, base_seed: int = 0,
                parallelism: int = 1) -> BatchResult:
    """Independent trials with seeds ``base_seed + i``; results in trial order."""
    if n_trials < 1:
        raise NoisyPushError(f"n_trials must be >= 1, got {n_trials}")
    jobs = [(config, base_seed + i) for i in range(n_trials)]
    if parallelism <= 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            records = list(ex.map(_run_one, jobs))
    log.debug("batch of %d trials done", n_trials)
    return BatchResult(records, summarize(records))
