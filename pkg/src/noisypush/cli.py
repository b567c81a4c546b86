"""Command-line front end: run batches, sweep a parameter, check matrices and
run the analysis checks.

Subcommands: ``run``, ``sweep``, ``verify``, ``mp-check``, ``maj-table``.
Exit status is 0 on success, 1 on a configuration error and 2 when ``verify``
finds a failing check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import analysis, noise
from .core import (
    PLURALITY,
    PROCESS_KINDS,
    RUMOR,
    NoisyPushError,
    ProtocolParams,
    RunRecord,
    bias,
    regime_warnings,
)
from .engine import TrialConfig, plurality, rumor, trial_batch

log = logging.getLogger(__name__)

OUT_DIR_ENV = "NOISYPUSH_OUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2

SWEEP_AXES = ("epsilon", "n")


class ConfigError(NoisyPushError):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a batch or a sweep.

    ``noise_spec`` of None means uniform noise at the protocol's epsilon.
    ``initial`` holds per-opinion counts for plurality mode; rumor mode uses a
    single source holding opinion ``source``.
    """

    params: ProtocolParams
    noise_spec: Optional[str] = None
    process: str = "O"
    initial: Optional[tuple] = None
    source: int = 1
    trials: int = 1
    base_seed: int = 0
    output: str = "noisypush"
    sweep_axis: Optional[str] = None
    sweep_values: tuple = ()
    parallelism: int = 1

    def __post_init__(self):
        if self.initial is not None:
            self.initial = tuple(int(x) for x in self.initial)
        self.sweep_values = tuple(self.sweep_values)
        self.validate()

    def validate(self) -> None:
        p = self.params
        if self.process not in PROCESS_KINDS:
            raise ConfigError(f"process: expected one of {PROCESS_KINDS}, got {self.process!r}")
        if self.trials < 1:
            raise ConfigError(f"trials: must be >= 1, got {self.trials}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism: must be >= 1, got {self.parallelism}")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis: expected one of {SWEEP_AXES}, got {self.sweep_axis!r}")
        if p.mode == PLURALITY:
            if self.initial is None:
                raise ConfigError("initial: plurality mode needs per-opinion counts")
            if len(self.initial) != p.k:
                raise ConfigError(f"initial: {len(self.initial)} counts given for k={p.k}")
            if sum(self.initial) > p.n:
                raise ConfigError(f"initial: counts sum to {sum(self.initial)} > n={p.n}")
            if sum(self.initial) != p.initial_opinionated:
                raise ConfigError("initial: counts disagree with params.initial_opinionated")
        elif not (1 <= self.source <= p.k):
            raise ConfigError(f"source: opinion {self.source} outside 1..{p.k}")

    def matrix(self, epsilon: Optional[float] = None) -> noise.NoiseMatrix:
        if self.noise_spec is None:
            return noise.make_uniform(self.params.k, self.params.epsilon if epsilon is None else epsilon)
        P = noise.parse_noise_spec(self.noise_spec)
        if P.k != self.params.k:
            raise ConfigError(f"noise: matrix has k={P.k} but params.k={self.params.k}")
        return P

    def initial_condition(self):
        if self.params.mode == PLURALITY:
            return plurality(self.initial)
        return rumor(self.source, self.params.k)

    def trial_config(self) -> TrialConfig:
        return TrialConfig(self.params, self.matrix(), self.process, self.initial_condition())

    def to_dict(self) -> dict:
        d = {
            "params": self.params.to_dict(),
            "noise_spec": self.noise_spec,
            "process": self.process,
            "initial": list(self.initial) if self.initial is not None else None,
            "source": self.source,
            "trials": self.trials,
            "base_seed": self.base_seed,
            "output": self.output,
            "sweep_axis": self.sweep_axis,
            "sweep_values": list(self.sweep_values),
            "parallelism": self.parallelism,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "params" not in d:
            raise ConfigError("params: missing")
        d["params"] = _params_from_dict(d["params"])
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})


def _params_from_dict(d: dict) -> ProtocolParams:
    fields = ProtocolParams.__dataclass_fields__
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"params: unknown fields {sorted(unknown)}")
    try:
        return ProtocolParams(**d)
    except TypeError as e:
        raise ConfigError(f"params: {e}") from None


def parse_initial(text: str) -> dict:
    """``"1:60,2:40"`` -> ``{1: 60, 2: 40}``."""
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            op, cnt = part.split(":")
            out[int(op)] = int(cnt)
        except ValueError:
            raise ConfigError(f"initial: cannot parse {part!r}; expected opinion:count") from None
    return out


def parse_floats(text: str, name: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def plurality_warnings(counts: Sequence[int]) -> list:
    out = []
    top = max(counts)
    if sum(1 for c in counts if c == top) > 1:
        out.append(f"initial counts {tuple(counts)} have no strictly largest opinion")
    for msg in out:
        warnings.warn(msg, UserWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------- output

def csv_header(k: int) -> list:
    return ["trial", "stage", "phase", "round", "a"] + [f"c_{i}" for i in range(1, k + 1)] + ["bias", "converged"]


def _num(x) -> str:
    return repr(float(x))


def record_rows(trial: int, rec: RunRecord):
    for ph, dist in zip(rec.phases, rec.per_phase_distributions):
        a = dist.opinionated
        b = bias(dist, rec.target) if a > 0 else math.nan
        converged = int(dist.is_unanimous() == rec.target)
        yield ([trial, ph.stage, ph.index, ph.end_round, _num(a)]
               + [_num(x) for x in dist.fractions] + [_num(b), converged])


def emit_csv(records: Sequence[RunRecord], path=None, k: Optional[int] = None) -> str:
    """Write one row per (trial, phase) boundary; returns the CSV text.

    ``k`` is only needed to write the header of an empty batch.
    """
    if records:
        ks = {r.params.k for r in records}
        if len(ks) != 1:
            raise ConfigError(f"records disagree on k: {sorted(ks)}")
        k = ks.pop()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(k or 0))
    for i, rec in enumerate(records):
        w.writerows(record_rows(i, rec))
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as e:
            raise OSError(f"cannot write CSV to {path}: {e}") from e
    return text


def emit_json(cfg: ExperimentConfig, result, path=None) -> str:
    doc = {
        "config": cfg.to_dict(),
        "summary": result.summary.to_dict(),
        "records": [r.to_dict() for r in result.records],
    }
    text = json.dumps(doc, indent=1)
    if path is not None:
        Path(path).write_text(text)
    return text


def output_prefix(prefix: str) -> Path:
    p = Path(prefix)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_run(cfg: ExperimentConfig) -> int:
    regime_warnings(cfg.params)
    if cfg.params.mode == PLURALITY:
        plurality_warnings(cfg.initial)
    result = trial_batch(cfg.trial_config(), cfg.trials, cfg.base_seed, cfg.parallelism)
    prefix = output_prefix(cfg.output)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    emit_csv(result.records, csv_path)
    emit_json(cfg, result, json_path)
    s = result.summary
    print(f"trials={s.n_trials} success_rate={s.success_rate:.4f} "
          f"median_convergence_round={s.median_convergence_round}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


SWEEP_COLUMNS = ["n", "epsilon", "trials", "success_rate", "median_convergence_round"]


def sweep_points(cfg: ExperimentConfig):
    """Yield ``(params, matrix)`` for each value of the sweep axis."""
    if cfg.sweep_axis is None or not cfg.sweep_values:
        raise ConfigError("sweep: give --sweep-epsilon or --sweep-n")
    for v in cfg.sweep_values:
        if cfg.sweep_axis == "epsilon":
            params = replace(cfg.params, epsilon=float(v))
            yield params, cfg.matrix(epsilon=float(v))
        else:
            params = replace(cfg.params, n=int(v))
            yield params, cfg.matrix()


def cmd_sweep(cfg: ExperimentConfig) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    init = cfg.initial_condition()
    for params, P in sweep_points(cfg):
        regime_warnings(params)
        res = trial_batch(TrialConfig(params, P, cfg.process, init), cfg.trials, cfg.base_seed, cfg.parallelism)
        s = res.summary
        med = "" if s.median_convergence_round is None else _num(s.median_convergence_round)
        w.writerow([params.n, _num(params.epsilon), s.n_trials, _num(s.success_rate), med])
        print(f"n={params.n} epsilon={params.epsilon} success_rate={s.success_rate:.4f} median={med}")
    path = output_prefix(cfg.output).with_suffix(".sweep.csv")
    path.write_text(buf.getvalue())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rows = analysis.run_verification(np.random.default_rng(args.seed))
    print(analysis.format_table(rows))
    failed = [r.name for r in rows if r.gating and not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_mp_check(args) -> int:
    if args.noise is None:
        raise ConfigError("noise: mp-check needs --noise")
    P = noise.parse_noise_spec(args.noise)
    if args.transpose:
        P = P.T
    eps = [args.epsilon] if args.epsilon is not None else []
    rep = noise.mp_margin(P, args.m, args.delta, eps)
    print(f"matrix k={P.k}, m={rep.m}, delta={rep.delta}")
    for i, margin, wit in zip(rep.rivals, rep.per_rival_margin, rep.witness_distributions):
        print(f"  rival {i}: margin {margin:.12g} at c = {np.round(wit, 12).tolist()}")
    if rep.margin > noise.FEAS_TOL:
        print(f"min margin {rep.margin:.12g}; majority-preserving for epsilon < {rep.max_epsilon():.12g}")
    else:
        print(f"min margin {rep.margin:.12g}; not majority-preserving for any epsilon > 0")
    for e, ok in rep.is_mp_for_epsilon.items():
        print(f"  epsilon={e}: {'yes' if ok else 'no'}")
    return EXIT_OK


def cmd_maj_table(args) -> int:
    q = parse_floats(args.q, "q")
    dist = analysis.exact_maj_distribution(args.ell, q)
    print(f"ell={args.ell} q={q}")
    print("opinion  Pr(maj)            Pr(unique top)")
    for i, (p, s) in enumerate(zip(dist.probs, dist.strict_probs), start=1):
        print(f"{i:<8} {p:<18.15f} {s:.15f}")
    return EXIT_OK


# ---------------------------------------------------------------- parsing

class _Parser(argparse.ArgumentParser):
    """Argument errors are configuration errors (exit 1), not usage exit 2."""

    def error(self, message):
        raise ConfigError(message)


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment config; flags override its values")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--c", dest="c_stage2", type=float, help="stage-2 sample constant")
    p.add_argument("--c-final", dest="c_final", type=float)
    p.add_argument("--noise", help="binary:eps | uniform:k:eps | cyclic:eps | identity:k | file:path")
    p.add_argument("--process", choices=PROCESS_KINDS)
    p.add_argument("--mode", choices=(RUMOR, PLURALITY))
    p.add_argument("--initial", help='plurality counts "opinion:count,..."')
    p.add_argument("--source", type=int, help="rumor source opinion (default 1)")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", dest="base_seed", type=int)
    p.add_argument("--out", dest="output")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--sweep-epsilon")
    p.add_argument("--sweep-n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisypush", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _experiment_flags(sub.add_parser("run", help="run a batch of trials, write CSV and JSON"))
    _experiment_flags(sub.add_parser("sweep", help="one summary row per epsilon or n value"))
    v = sub.add_parser("verify", help="run the exact analysis checks")
    v.add_argument("--seed", type=int, default=0, help="seed for the Monte Carlo check")
    mp = sub.add_parser("mp-check", help="majority-preservation margins of a noise matrix")
    mp.add_argument("--noise")
    mp.add_argument("--m", type=int, default=1)
    mp.add_argument("--delta", type=float, required=True)
    mp.add_argument("--epsilon", type=float)
    mp.add_argument("--transpose", action="store_true", help="check the transposed matrix")
    mt = sub.add_parser("maj-table", help="exact law of a sample majority")
    mt.add_argument("--ell", type=int, required=True)
    mt.add_argument("--q", required=True, help='comma-separated distribution, e.g. "0.6,0.4"')
    return parser


PARAM_FLAGS = ("n", "k", "epsilon", "s", "beta", "phi", "c_stage2", "c_final", "mode")
TOP_FLAGS = ("noise_spec", "process", "source", "trials", "base_seed", "output", "parallelism")


def config_from_args(args) -> ExperimentConfig:
    """Merge a config file (if any) with command-line overrides."""
    base = {}
    if args.config:
        try:
            base = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"config: cannot read {args.config}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config: {args.config} is not valid YAML/JSON: {e}") from e
        if not isinstance(base, dict):
            raise ConfigError(f"config: {args.config} must hold a mapping")
    d = dict(base)
    params = dict(d.get("params") or {})
    for name in PARAM_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            params[name] = val
    args.noise_spec = args.noise
    for name in TOP_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            d[name] = val
    if args.initial is not None:
        counts = parse_initial(args.initial)
        k = params.get("k") or max(counts)
        if any(not (1 <= o <= k) for o in counts):
            raise ConfigError(f"initial: opinion outside 1..{k} in {args.initial!r}")
        d["initial"] = [counts.get(i, 0) for i in range(1, k + 1)]
        params.setdefault("mode", PLURALITY)
    if params.get("mode") == PLURALITY and d.get("initial") is not None:
        params["initial_opinionated"] = int(sum(d["initial"]))
    if args.sweep_epsilon is not None:
        d["sweep_axis"], d["sweep_values"] = "epsilon", parse_floats(args.sweep_epsilon, "sweep-epsilon")
    elif args.sweep_n is not None:
        d["sweep_axis"], d["sweep_values"] = "n", [int(x) for x in parse_floats(args.sweep_n, "sweep-n")]
    for need in ("n", "k", "epsilon"):
        if need not in params:
            raise ConfigError(f"{need}: required (flag --{need} or config params.{need})")
    d["params"] = params
    return ExperimentConfig.from_dict(d)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "mp-check":
            return cmd_mp_check(args)
        if args.command == "maj-table":
            return cmd_maj_table(args)
        cfg = config_from_args(args)
        return cmd_run(cfg) if args.command == "run" else cmd_sweep(cfg)
    except NoisyPushError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
