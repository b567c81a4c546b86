import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisypush.analysis import exact_maj_distribution
from noisypush.core import UNDECIDED, BadParamsError, NoisyPushError, ProtocolParams, make_rng
from noisypush.protocol import (
    EmptySampleError,
    NodeState,
    compute_schedule,
    majority,
    mode,
    receive,
    reservoir_push,
    sample_target,
    schedule_round_bound,
    stage1_on_phase_end,
    stage1_phase_count,
    stage2_on_phase_end,
)


def test_schedule_small_example():
    p = ProtocolParams(n=1024, k=2, epsilon=0.5)
    s = compute_schedule(p)
    assert s.stage1_phase_lengths[0] == 28 == math.ceil(4 * math.log(1024))
    assert s.T == 1
    assert s.T_prime == 3
    assert len(s.stage1_phase_lengths) == s.T + 2
    assert len(s.stage2_phase_lengths) == s.T_prime + 1


def test_sample_target_parity():
    assert sample_target(3, 0.5, force_odd=False) == 12
    assert sample_target(3, 0.5) == 13
    s = compute_schedule(ProtocolParams(n=1024, k=2, epsilon=0.5))
    assert s.ell == 13
    assert s.stage2_phase_lengths[0] == 26
    assert s.ell_prime == math.ceil(4 * math.log(1024) / 0.25)
    assert s.stage2_phase_lengths[-1] == 2 * s.ell_prime


def test_schedule_requires_large_enough_n():
    with pytest.raises(BadParamsError):
        compute_schedule(ProtocolParams(n=50, k=2, epsilon=0.3))


def test_plurality_schedule():
    p = ProtocolParams(n=10**4, k=3, epsilon=0.5, mode="plurality", initial_opinionated=100)
    s = compute_schedule(p)
    assert s.stage1_phase_lengths[0] == 0
    assert s.T == stage1_phase_count(p) == math.floor(math.log(100) / math.log(9))
    assert len(s.stage1_phase_lengths) == s.T + 2


@settings(max_examples=150, deadline=None)
@given(st.integers(2000, 10**7), st.floats(0.08, 0.9), st.integers(2, 5))
def test_schedule_invariants(n, eps, k):
    p = ProtocolParams(n=n, k=k, epsilon=eps)
    try:
        s = compute_schedule(p)
    except BadParamsError:
        return
    assert len(s.stage1_phase_lengths) == s.T + 2
    assert len(s.stage2_phase_lengths) == s.T_prime + 1
    assert all(b > a for a, b in zip(s.tau, s.tau[1:]))
    assert s.ell % 2 == 1
    for ph in s.phases():
        if ph.stage == 2:
            assert ph.length == 2 * ph.sample_size
    assert s.total_rounds <= schedule_round_bound(p, s)
    # linear in ln(n)/eps^2 with a constant fixed by the tuning constants
    assert s.total_rounds <= 60 * math.log(n) / eps**2


def test_reservoir_fill():
    rng = make_rng(0)
    buf = []
    for t, msg in enumerate([4, 5, 6, 7, 8]):
        reservoir_push(buf, msg, t, 5, rng)
    assert buf == [4, 5, 6, 7, 8]
    buf = []
    for t in range(3):
        reservoir_push(buf, 2, t, 3, rng)
    assert buf == [2, 2, 2]


def test_reservoir_single_slot_uniform():
    rng = make_rng(1)
    t, trials = 7, 10**5
    hits = Counter()
    for _ in range(trials):
        buf = []
        for i in range(t):
            reservoir_push(buf, i, i, 1, rng)
        hits[buf[0]] += 1
    sigma = math.sqrt(trials * (1 / t) * (1 - 1 / t))
    for i in range(t):
        assert abs(hits[i] - trials / t) <= 3 * sigma + 1


def test_reservoir_subset_uniform():
    # every 2-subset of 5 messages equally likely
    rng = make_rng(2)
    trials = 60000
    hits = Counter()
    for _ in range(trials):
        node = receive(NodeState(opinion=1), range(5), 2, rng)
        hits[tuple(sorted(node.buffer))] += 1
    assert len(hits) == 10
    for c in hits.values():
        assert abs(c - trials / 10) < 5 * math.sqrt(trials * 0.1 * 0.9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 5), max_size=40), st.integers(1, 6), st.integers(0, 10**6))
def test_reservoir_never_exceeds_L(msgs, L, seed):
    rng = make_rng(seed)
    buf = []
    for t, m in enumerate(msgs):
        reservoir_push(buf, m, t, L, rng)
        assert len(buf) <= L
    assert len(buf) == min(L, len(msgs))
    assert Counter(buf) <= Counter(msgs)


def test_stage1_examples():
    rng = make_rng(3)
    picks = Counter(stage1_on_phase_end(NodeState(), [3, 3, 7], 2, rng).opinion for _ in range(30000))
    assert set(picks) == {3, 7}
    assert picks[3] / 30000 == pytest.approx(2 / 3, abs=0.015)
    node = stage1_on_phase_end(NodeState(), [3, 7], 4, rng)
    assert node.j_u == 4
    assert stage1_on_phase_end(NodeState(), [], 1, rng).opinion == UNDECIDED
    assert stage1_on_phase_end(NodeState(opinion=2, j_u=0), [5, 5, 5], 1, rng).opinion == 2


class _ScriptedRng:
    """Replays a fixed sequence of ``integers`` outcomes."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)

    def integers(self, high):
        return self.outcomes.pop(0)


def _adoption_law(received):
    # the t-th message (t >= 2) draws integers(t) once; enumerate all draws
    law = Counter()
    branches = list(itertools.product(*[range(t) for t in range(2, len(received) + 1)]))
    for draws in branches:
        node = stage1_on_phase_end(NodeState(), list(received), 0, _ScriptedRng(draws))
        law[node.opinion] += 1 / len(branches)
    return law


def test_stage1_order_insensitive():
    for size in range(1, 5):
        for ms in itertools.combinations_with_replacement([1, 2, 3], size):
            target = {o: pytest.approx(ms.count(o) / size) for o in set(ms)}
            for perm in set(itertools.permutations(ms)):
                assert dict(_adoption_law(perm)) == target


def test_majority_examples():
    rng = make_rng(4)
    assert majority([1, 1, 2], 2, rng) == 1
    ties = Counter(majority([1, 2], 2, rng) for _ in range(20000))
    assert ties[1] / 20000 == pytest.approx(0.5, abs=0.015)
    three = Counter(majority([3, 3, 5, 5, 2], 5, rng) for _ in range(20000))
    assert three[2] == 0 and three[3] / 20000 == pytest.approx(0.5, abs=0.015)
    assert mode([3, 3, 5, 5, 2]) == [3, 5]
    with pytest.raises(EmptySampleError):
        majority([], 2, rng)
    with pytest.raises(NoisyPushError):
        majority([0, 1], 2, rng)


@pytest.mark.parametrize("L,k", [(3, 2), (5, 3), (7, 3)])
def test_majority_matches_exact(L, k):
    rng = np.random.default_rng(L * 10 + k)
    q = np.linspace(1.0, 0.5, k)
    q = q / q.sum()
    trials = 10**6
    # vectorised version of majority(): count, jitter, argmax
    draws = rng.choice(np.arange(1, k + 1), size=(trials, L), p=q)
    occ = np.stack([(draws == i).sum(axis=1) for i in range(1, k + 1)], axis=1)
    winners = np.argmax(occ + rng.random(occ.shape), axis=1)
    emp = np.bincount(winners, minlength=k) / trials
    exact = exact_maj_distribution(L, q).probs
    assert 0.5 * np.abs(emp - exact).sum() <= 0.01
    # the scalar rule agrees on a smaller sample
    few = Counter(majority(list(row), k, rng) for row in draws[:20000])
    small = np.array([few[i] for i in range(1, k + 1)]) / 20000
    assert 0.5 * np.abs(small - exact).sum() <= 0.03


def test_stage2_examples():
    rng = make_rng(5)
    L = 3
    node = receive(NodeState(opinion=2), [1, 1, 1, 1, 1, 1], L, rng)
    assert stage2_on_phase_end(node, L, 3, rng).opinion == 1
    short = receive(NodeState(opinion=2), [1, 1], L, rng)
    assert stage2_on_phase_end(short, L, 3, rng).opinion == 2
    exact = receive(NodeState(opinion=2), [3, 1, 3], L, rng)
    assert sorted(exact.buffer) == [1, 3, 3]
    assert stage2_on_phase_end(exact, L, 3, rng).opinion == 3
    silent = receive(NodeState(), [1, 1, 1], L, rng)
    assert stage2_on_phase_end(silent, L, 3, rng).opinion == UNDECIDED
