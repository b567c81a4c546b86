"""Simulation and exact analysis of noisy rumor spreading and plurality
consensus in the uniform push model."""

from .core import (
    UNDECIDED,
    NoisyPushError,
    OpinionDistribution,
    PhaseSchedule,
    ProtocolParams,
    RunRecord,
    bias,
    counts_to_distribution,
)
from .engine import TrialConfig, plurality, run_trial, rumor, trial_batch
from .noise import (
    NoiseMatrix,
    make_binary,
    make_cyclic_dominant,
    make_uniform,
    mp_margin,
    push_through,
)
from .protocol import compute_schedule

__version__ = "0.1.0"

__all__ = [
    "UNDECIDED",
    "NoisyPushError",
    "OpinionDistribution",
    "PhaseSchedule",
    "ProtocolParams",
    "RunRecord",
    "bias",
    "counts_to_distribution",
    "TrialConfig",
    "plurality",
    "run_trial",
    "rumor",
    "trial_batch",
    "NoiseMatrix",
    "make_binary",
    "make_cyclic_dominant",
    "make_uniform",
    "mp_margin",
    "push_through",
    "compute_schedule",
]
