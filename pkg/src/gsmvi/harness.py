"""Experiment runner: config files in, CSV traces out.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Targets
are compact strings::

    target = gauss:d=10,c=100,seed=0,mean=zero
    target = sas:d=10,c=1,s=0.5,t=1
    target = dsl:file=model.txt,d=2

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import difflib
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .bbvi import ENTROPY_MODES, BbviConfig, run_bbvi
from .gaussian import GaussianParams
from .gsm import GsmConfig, RunAborted, gsm_step, run_gsm
from .metrics import (
    METRIC_STREAM_XOR,
    FklMonitor,
    NegElboMonitor,
    ReferenceSampleSet,
    TraceRecord,
)
from .targets import (
    GaussianTarget,
    GaussianTargetSpec,
    MeanMode,
    SinhArcsinhSpec,
    make_dsl_target,
    make_gaussian_target,
    make_sinh_arcsinh_target,
)

log = logging.getLogger(__name__)

EXPERIMENTS = ("fit", "dims", "cond", "nongauss", "vectorfield")
ALGORITHMS = ("gsm", "bbvi", "both")
TRACE_HEADER = "algorithm,run_id,iteration,grad_evals,metric,value"
VECTORFIELD_HEADER = "mu,sigma,dmu,dsigma"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- target specs

@dataclass(frozen=True)
class DslProgramSpec:
    path: Path
    dim: int
    source: str


def _spec_items(body, text):
    items = {}
    for part in filter(None, (p.strip() for p in body.split(","))):
        if "=" not in part:
            raise ConfigError(f"target {text!r}: expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        items[k] = v
    return items


def _pop_num(items, key, cast, default, text):
    if key not in items:
        if default is None:
            raise ConfigError(f"target {text!r}: missing {key}=")
        return default
    raw = items.pop(key)
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"target {text!r}: {key}={raw!r} is not a valid {cast.__name__}") from None


def parse_target(text, base_dir="."):
    """Parse a compact target string into a target spec."""
    kind, sep, body = text.partition(":")
    kind = kind.strip()
    if not sep:
        raise ConfigError(f"target {text!r}: expected '<kind>:<params>'")
    items = _spec_items(body, text)
    try:
        if kind == "gauss" or kind == "sas":
            base = GaussianTargetSpec(
                dim=_pop_num(items, "d", int, None, text),
                condition_number=_pop_num(items, "c", float, 1.0, text),
                seed=_pop_num(items, "seed", int, 0, text),
                mean_mode=MeanMode(items.pop("mean", MeanMode.STANDARD_NORMAL_DRAW.value)),
            )
            if kind == "gauss":
                spec = base
            else:
                spec = SinhArcsinhSpec(
                    base,
                    skewness=_pop_num(items, "s", float, 0.0, text),
                    tail_weight=_pop_num(items, "t", float, 1.0, text),
                )
        elif kind == "dsl":
            if "file" not in items:
                raise ConfigError(f"target {text!r}: missing file=")
            path = Path(items.pop("file"))
            if not path.is_absolute():
                path = (Path(base_dir) / path).resolve()
            dim = _pop_num(items, "d", int, None, text)
            if not path.is_file():
                raise ConfigError(f"target {text!r}: program file {str(path)!r} not found")
            source = path.read_text(encoding="utf-8")
            make_dsl_target(source, dim)  # surface parse errors at load time
            spec = DslProgramSpec(path, dim, source)
        else:
            raise ConfigError(f"target {text!r}: unknown kind {kind!r} (gauss, sas, dsl)")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"target {text!r}: {exc}") from exc
    if items:
        raise ConfigError(f"target {text!r}: unknown parameter(s) {', '.join(sorted(items))}")
    return spec


def format_target(spec):
    if isinstance(spec, DslProgramSpec):
        return f"dsl:file={spec.path},d={spec.dim}"
    if isinstance(spec, SinhArcsinhSpec):
        b = spec.base
        return (f"sas:d={b.dim},c={b.condition_number!r},seed={b.seed},"
                f"mean={b.mean_mode.value},s={spec.skewness!r},t={spec.tail_weight!r}")
    return (f"gauss:d={spec.dim},c={spec.condition_number!r},seed={spec.seed},"
            f"mean={spec.mean_mode.value}")


def build_target(spec):
    if isinstance(spec, DslProgramSpec):
        return make_dsl_target(spec.source, spec.dim)
    if isinstance(spec, SinhArcsinhSpec):
        return make_sinh_arcsinh_target(spec)
    return make_gaussian_target(spec)


# ---------------------------------------------------------------- config

def _ints(raw):
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _floats(raw):
    return tuple(float(x) for x in raw.split(",") if x.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    algorithm: str = "both"
    target: object = None
    runs: int = 10
    base_seed: int = 0
    output_dir: Path = Path("results")
    # GSM
    gsm_iterations: int = 500
    gsm_batch_size: int = 2
    # BBVI
    bbvi_iterations: int = 2000
    bbvi_batch_size: int = 2
    learning_rates: tuple = (1e-1, 1e-2, 1e-3)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    bbvi_entropy: str = "analytic"
    # monitoring
    monitor_every: int = 1
    bbvi_monitor_every: int | None = None  # None: same as monitor_every
    n_reference: int = 1000
    reference_seed: int = 2023
    elbo_batch: int = 100
    # sweeps
    target_seed: int = 0
    target_mean: str = MeanMode.STANDARD_NORMAL_DRAW.value
    dims: tuple = (2, 4, 8, 16, 32)
    dims_condition_number: float = 1.0
    cond_dim: int = 10
    condition_numbers: tuple = (1.0, 10.0, 100.0, 1000.0)
    nongauss_dim: int = 10
    nongauss_condition_number: float = 1.0
    skewness: tuple = (0.0, 0.5, 1.0, 1.8)
    tail_weights: tuple = (0.5, 1.0, 1.5)
    vf_resolution: int = 21
    vf_samples: int = 5
    source_dir: Path = field(default=Path("."), compare=False, repr=False)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.experiment == "fit" and self.target is None:
            raise ConfigError("experiment 'fit' requires a target")
        positive = ("runs", "gsm_iterations", "gsm_batch_size", "bbvi_iterations",
                    "bbvi_batch_size", "monitor_every", "n_reference", "elbo_batch",
                    "cond_dim", "nongauss_dim", "vf_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.bbvi_monitor_every is not None and self.bbvi_monitor_every < 1:
            raise ConfigError(f"bbvi_monitor_every must be >= 1, got {self.bbvi_monitor_every}")
        if self.vf_resolution < 2:
            raise ConfigError("vf_resolution must be >= 2")
        if not self.learning_rates:
            raise ConfigError("learning_rates must not be empty")
        for lr in self.learning_rates:
            if not 1e-6 <= lr <= 1.0:
                raise ConfigError(f"learning rate {lr!r} outside [1e-6, 1]")
        if self.bbvi_entropy not in ENTROPY_MODES:
            raise ConfigError(f"bbvi_entropy must be one of {ENTROPY_MODES}")
        if self.target_mean not in [m.value for m in MeanMode]:
            raise ConfigError(f"target_mean must be one of {[m.value for m in MeanMode]}")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("base_seed must be a 64-bit unsigned integer")
        for name in ("dims", "condition_numbers", "skewness", "tail_weights"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        try:
            BbviConfig(1, self.bbvi_batch_size, self.learning_rates[0], self.adam_beta1,
                       self.adam_beta2, self.adam_epsilon, entropy=self.bbvi_entropy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def echo(self):
        """The fully resolved config in the input format (loadable)."""
        lines = []
        for f in fields(self):
            if f.name == "source_dir":
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "experiment": str,
    "algorithm": str,
    "target": None,  # handled separately
    "runs": int,
    "base_seed": int,
    "output_dir": Path,
    "gsm_iterations": int,
    "gsm_batch_size": int,
    "bbvi_iterations": int,
    "bbvi_batch_size": int,
    "learning_rates": _floats,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_epsilon": float,
    "bbvi_entropy": str,
    "monitor_every": int,
    "bbvi_monitor_every": int,
    "n_reference": int,
    "reference_seed": int,
    "elbo_batch": int,
    "target_seed": int,
    "target_mean": str,
    "dims": _ints,
    "dims_condition_number": float,
    "cond_dim": int,
    "condition_numbers": _floats,
    "nongauss_dim": int,
    "nongauss_condition_number": float,
    "skewness": _floats,
    "tail_weights": _floats,
    "vf_resolution": int,
    "vf_samples": int,
}
KEYS = tuple(_PARSERS)


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (GaussianTargetSpec, SinhArcsinhSpec, DslProgramSpec)):
        return format_target(value)
    return str(value)


def parse_config_text(text, base_dir="."):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            close = difflib.get_close_matches(key, KEYS, n=1, cutoff=0.0)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"line {lineno}: unknown key {key!r}{hint}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key == "target":
            values[key] = parse_target(value, base_dir)
            continue
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    if "experiment" not in values:
        raise ConfigError("missing required key 'experiment'")
    out = values.get("output_dir", ExperimentConfig.output_dir)
    if not out.is_absolute():
        out = (Path(base_dir) / out).resolve()
    values["output_dir"] = out
    return ExperimentConfig(source_dir=Path(base_dir), **values).validate()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse_config_text(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------- CSV

def format_float(x):
    return repr(float(x))


def write_trace_csv(records, path):
    """Write trace rows sorted by ``(algorithm, run_id, iteration)``."""
    if not records:
        raise ValueError("no trace records to write")
    rows = sorted(records, key=lambda r: (r.algorithm, r.run_id, r.iteration, r.metric))
    lines = [TRACE_HEADER]
    for r in rows:
        lines.append(f"{r.algorithm},{r.run_id},{r.iteration},{r.grad_evals},{r.metric},"
                     f"{format_float(r.value)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected header {header!r}")
        out = []
        for line in fh:
            alg, run_id, it, ge, metric, value = line.rstrip("\n").split(",")
            out.append(TraceRecord(int(it), int(ge), metric, float(value), int(run_id), alg))
    return out


def write_vectorfield_csv(rows, path):
    lines = [VECTORFIELD_HEADER]
    lines += [",".join(format_float(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- runners

def bbvi_label(lr):
    return f"bbvi@lr={lr!r}"


def run_case(config, target, target_id, update_hook=None):
    """All runs of the configured algorithms on one target.

    ``update_hook`` is forwarded to :func:`run_gsm`.

    Returns:
        ``(records, failures, best_label)``.
    """
    records, failures = [], []
    init = GaussianParams.standard(target.dim)
    shared_fkl = None
    if target.normalizer_known and target.sample is not None:
        refs = ReferenceSampleSet.generate(target, config.reference_seed, config.n_reference,
                                           target_id)
        shared_fkl = FklMonitor(refs, target)

    def monitor_for(seed):
        if shared_fkl is not None:
            return shared_fkl
        return NegElboMonitor(target, seed ^ METRIC_STREAM_XOR, config.elbo_batch)

    def attempt(fn, label, run_id):
        try:
            _, trace = fn()
        except RunAborted as exc:
            failures.append(f"{target_id} {label} run {run_id}: {exc}")
            log.error("%s %s run %d failed: %s", target_id, label, run_id, exc)
            trace = exc.trace
        records.extend(trace)
        return trace

    for r in range(config.runs):
        seed = config.base_seed + r
        if config.algorithm in ("gsm", "both"):
            cfg = GsmConfig(config.gsm_iterations, config.gsm_batch_size, init, seed)
            attempt(lambda: run_gsm(target, cfg, monitor_for(seed), config.monitor_every,
                                    update_hook, run_id=r, algorithm="gsm"), "gsm", r)

    best = None
    if config.algorithm in ("bbvi", "both"):
        finals = {}
        bbvi_every = config.bbvi_monitor_every or config.monitor_every
        for lr in config.learning_rates:
            label = bbvi_label(lr)
            last = []
            for r in range(config.runs):
                seed = config.base_seed + r
                cfg = BbviConfig(config.bbvi_iterations, config.bbvi_batch_size, lr,
                                 config.adam_beta1, config.adam_beta2, config.adam_epsilon,
                                 init, seed, config.bbvi_entropy)
                trace = attempt(lambda: run_bbvi(target, cfg, monitor_for(seed), bbvi_every,
                                                 run_id=r,
                                                 algorithm=label), label, r)
                last.append(trace[-1].value if trace else math.inf)
            score = float(np.mean(last))
            finals[label] = score if math.isfinite(score) else math.inf
        best = min(finals, key=lambda k: (finals[k], k))
    return records, failures, best


def vectorfield(config):
    """GSM update direction on a (mu, sigma) grid for the target N(0, 1)."""
    target = GaussianTarget(GaussianParams.standard(1))
    rng = np.random.default_rng(config.base_seed)
    n = config.vf_resolution
    rows = []
    for mu in np.linspace(-2.0, 2.0, n):
        for sigma in np.linspace(0.2, 3.0, n):
            q = GaussianParams.from_moments([mu], [[sigma * sigma]])
            q_next, _ = gsm_step(q, target, config.vf_samples, rng)
            rows.append((mu, sigma, q_next.mean[0] - mu,
                         math.sqrt(q_next.covariance[0, 0]) - sigma))
    return rows


def _cases(config):
    mean = MeanMode(config.target_mean)
    if config.experiment == "fit":
        yield None, config.target
    elif config.experiment == "dims":
        for d in config.dims:
            yield f"d{d}", GaussianTargetSpec(d, config.dims_condition_number,
                                              config.target_seed, mean)
    elif config.experiment == "cond":
        for c in config.condition_numbers:
            yield f"c{c:g}", GaussianTargetSpec(config.cond_dim, c, config.target_seed, mean)
    elif config.experiment == "nongauss":
        base = GaussianTargetSpec(config.nongauss_dim, config.nongauss_condition_number,
                                  config.target_seed, mean)
        pairs = [(s, 1.0) for s in config.skewness]
        pairs += [(0.0, t) for t in config.tail_weights if (0.0, t) not in pairs]
        for s, t in pairs:
            yield f"s{s:g}_t{t:g}", SinhArcsinhSpec(base, s, t)


def run_experiment(config, update_hook=None):
    """Run ``config`` and write its outputs under ``config.output_dir``.

    ``update_hook(q_before, q_after, diags)`` observes every GSM iteration.

    Returns:
        0 on success, 2 if any run failed (partial outputs are kept).
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(config.echo(), encoding="utf-8")

    if config.experiment == "vectorfield":
        write_vectorfield_csv(vectorfield(config), out / "vectorfield.csv")
        return 0

    failures = []
    for name, spec in _cases(config):
        case_dir = out if name is None else out / name
        case_dir.mkdir(parents=True, exist_ok=True)
        case_cfg = replace(config, target=spec, output_dir=case_dir)
        if name is not None:
            (case_dir / "config.echo").write_text(case_cfg.echo(), encoding="utf-8")
        target_id = format_target(spec)
        log.info("running %s", target_id)
        records, fails, best = run_case(case_cfg, build_target(spec), target_id, update_hook)
        failures += fails
        if records:
            write_trace_csv(records, case_dir / "trace.csv")
        if best is not None:
            (case_dir / "best.txt").write_text(best + "\n", encoding="utf-8")
    if failures:
        for f in failures:
            log.error("run failed: %s", f)
        return 2
    return 0


def main(argv=None):
    import argparse
    import sys

    parser = argparse.ArgumentParser(prog="gsmvi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run an experiment"), ("validate", "check a config file")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--output-dir", type=Path, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=os.environ.get("GSMVI_LOG", "WARNING"),
                        format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        if args.output_dir is not None:
            config = replace(config, output_dir=args.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.command == "validate":
        sys.stdout.write(config.echo())
        return 0
    try:
        status = run_experiment(config)
    except Exception as exc:  # noqa: BLE001 - reported as runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    if status:
        print("runtime failure: one or more runs failed (see log)", file=sys.stderr)
    return status
