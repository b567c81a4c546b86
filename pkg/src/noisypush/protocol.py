"""Phase schedule and the per-node rules of the two-stage protocol.

The functions here act on a single node and are the reference semantics; the
engine applies the same rules to whole populations with array operations.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    PLURALITY,
    UNDECIDED,
    BadParamsError,
    NoisyPushError,
    Phase,
    PhaseSchedule,
    ProtocolParams,
)

StageRuleConfig = Phase


class EmptySampleError(NoisyPushError):
    pass


def sample_target(c: float, epsilon: float, force_odd: bool = True) -> int:
    """Stage-2 sample size ``ceil(c / eps^2)``, bumped to the next odd value."""
    ell = math.ceil(c / epsilon**2)
    if force_odd and ell % 2 == 0:
        ell += 1
    return ell


def stage1_phase_count(params: ProtocolParams) -> int:
    """Number T of middle phases of stage 1."""
    eps2 = params.epsilon**2
    growth = math.log(params.beta / eps2 + 1.0)
    if params.mode == PLURALITY:
        return max(0, math.floor(math.log(params.n / params.initial_opinionated) / growth))
    seed_size = (2.0 * params.s / eps2) * math.log(params.n)
    inner = params.n / seed_size
    if inner <= 1.0:
        raise BadParamsError(
            f"n={params.n} too small: n / ((2s/eps^2) ln n) = {inner:.4g} <= 1"
        )
    return max(0, math.floor(math.log(inner) / growth))


def compute_schedule(params: ProtocolParams) -> PhaseSchedule:
    """Round layout of both stages; every fractional length is rounded up.

    In plurality mode phase 0 has length zero: the initial set already plays
    the role of the seed population that phase 0 grows in rumor mode.
    """
    n, eps2 = params.n, params.epsilon**2
    ln_n = math.log(n)
    T = stage1_phase_count(params)
    phase0 = 0 if params.mode == PLURALITY else math.ceil(params.s / eps2 * ln_n)
    middle = math.ceil(params.beta / eps2)
    last = math.ceil(params.phi / eps2 * ln_n)
    stage1 = (phase0,) + (middle,) * T + (last,)

    T_prime = max(0, math.ceil(math.log(math.sqrt(n / ln_n))))
    ell = sample_target(params.c_stage2, params.epsilon)
    ell_prime = math.ceil(params.c_final * ln_n / eps2)
    stage2 = (2 * ell,) * T_prime + (2 * ell_prime,)
    return PhaseSchedule(stage1, stage2, T, T_prime, ell, ell_prime)


def schedule_round_bound(params: ProtocolParams, sched: Optional[PhaseSchedule] = None) -> float:
    """Upper bound on total rounds that is linear in ``ln(n) / eps^2``."""
    sched = sched or compute_schedule(params)
    eps2, ln_n = params.epsilon**2, math.log(params.n)
    T, Tp = sched.T, sched.T_prime
    exact = ((params.s + params.phi) * ln_n + T * params.beta
             + 2 * params.c_stage2 * Tp + 2 * params.c_final * ln_n) / eps2
    # rounding slack: < 1 round per stage-1 phase; 2*ceil(x) (+2 for parity) per stage-2 phase
    return exact + (T + 2) + 4 * Tp + 2


@dataclass
class NodeState:
    """One node's protocol memory."""

    opinion: int = UNDECIDED
    j_u: Optional[int] = None
    buffer: list = field(default_factory=list)
    seen: int = 0

    def start_phase(self) -> "NodeState":
        return replace(self, buffer=[], seen=0)


def reservoir_push(buffer: list, new_msg: int, seen_count: int, L: int,
                   rng: np.random.Generator) -> list:
    """Feed one message into a size-``L`` reservoir (Algorithm R).

    ``seen_count`` is the number of messages fed before this one. The buffer
    is updated in place and returned.
    """
    t = seen_count + 1
    if len(buffer) < L:
        buffer.append(new_msg)
    else:
        slot = int(rng.integers(t))
        if slot < L:
            buffer[slot] = new_msg
    return buffer


def receive(node: NodeState, msgs: Iterable[int], L: int, rng: np.random.Generator) -> NodeState:
    """Fold a stream of delivered messages into the node's reservoir."""
    buf = list(node.buffer)
    seen = node.seen
    for msg in msgs:
        reservoir_push(buf, msg, seen, L, rng)
        seen += 1
    return replace(node, buffer=buf, seen=seen)


def stage1_on_phase_end(node: NodeState, received: Sequence[int], phase: int,
                        rng: np.random.Generator) -> NodeState:
    """Undecided nodes adopt one received opinion chosen u.a.r.; others keep theirs."""
    if node.opinion != UNDECIDED or len(received) == 0:
        return replace(node, buffer=[], seen=0)
    pick = receive(NodeState(), received, 1, rng).buffer[0]
    return NodeState(opinion=pick, j_u=phase)


def mode(sample: Sequence[int]) -> list:
    occ = Counter(sample)
    top = max(occ.values())
    return sorted(i for i, c in occ.items() if c == top)


def majority(sample: Sequence[int], k: int, rng: np.random.Generator) -> int:
    """Most frequent opinion in ``sample``, ties broken uniformly at random."""
    if len(sample) == 0:
        raise EmptySampleError("majority of an empty sample")
    if any(not (1 <= x <= k) for x in sample):
        raise NoisyPushError(f"sample contains an opinion outside 1..{k}")
    winners = mode(sample)
    if len(winners) == 1:
        return winners[0]
    return winners[int(rng.integers(len(winners)))]


def stage2_on_phase_end(node: NodeState, L: int, k: int, rng: np.random.Generator) -> NodeState:
    """Adopt the sample majority if at least ``L`` messages arrived this phase."""
    if node.opinion == UNDECIDED or node.seen < L:
        return node.start_phase()
    return replace(node, opinion=majority(node.buffer, k, rng), buffer=[], seen=0)
