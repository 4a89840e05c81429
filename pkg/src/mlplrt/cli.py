"""Command-line front end: fit, test, simulate, gradcheck.

Usage:

    mlplrt <command> --config cfg.json [--seed N] [--out DIR] [--reps N] [--quiet]

The config is a single JSON document; command-line flags override the
corresponding config fields.  All file references are validated and parsed
before any computation starts, and every report is written atomically.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure (singular covariance, no usable optimization start, inconsistent
nested fits).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import estimate, hypothesis, mlp, serialize, simulate
from .cost import Dataset, SingularCovariance, grad_u_n, hessian_u_n, u_n
from .estimate import AllStartsFailed, FitConfig
from .hypothesis import InconsistentFits
from .mlp import MLPArchitecture, ParameterMask, WeightVector
from .simulate import GeneratorSpec

SCHEMA_VERSION = 1
COMMANDS = ("fit", "test", "simulate", "gradcheck")

GRADCHECK_GRAD_TOL = 1e-5
GRADCHECK_HESS_TOL = 1e-4


class ConfigInvalid(Exception):
    pass


def _require(cond, message):
    if not cond:
        raise ConfigInvalid(message)


def _get(cfg, field, typ, default=None, required=False):
    if field not in cfg:
        _require(not required, f"missing required config field '{field}'")
        return default
    value = cfg[field]
    _require(isinstance(value, typ), f"config field '{field}' has the wrong type")
    return value


def _parse_arch(cfg):
    arch_cfg = _get(cfg, "architecture", dict, required=True)
    try:
        return MLPArchitecture.from_dict(arch_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid architecture: {exc}") from exc


def _parse_mask(cfg, arch, field="mask", required=False):
    raw = _get(cfg, field, list, required=required)
    if raw is None:
        return None
    _require(all(isinstance(v, bool) for v in raw), f"'{field}' must be a list of booleans")
    try:
        return ParameterMask(arch, np.asarray(raw, dtype=bool))
    except (mlp.ArchMismatch, ValueError) as exc:
        raise ConfigInvalid(f"invalid {field}: {exc}") from exc


def _parse_weights(cfg, arch, field, required=False):
    raw = _get(cfg, field, list, required=required)
    if raw is None:
        return None
    try:
        return WeightVector(arch, np.asarray(raw, dtype=float))
    except (mlp.ArchMismatch, ValueError) as exc:
        raise ConfigInvalid(f"invalid {field}: {exc}") from exc


def _parse_fit_config(cfg, seed):
    fit_cfg = _get(cfg, "fit", dict, default={})
    known = {"max_iterations", "gradient_tolerance", "n_starts", "box_radius"}
    unknown = set(fit_cfg) - known
    _require(not unknown, f"unknown fit fields {sorted(unknown)}")
    try:
        return FitConfig(seed=seed, **fit_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid fit settings: {exc}") from exc


def _parse_generator(cfg, arch, seed):
    gen = _get(cfg, "generator", dict)
    if gen is None:
        return None
    known = {"true_weights", "noise_cov", "n", "noise_family", "input_law",
             "input_half_width", "seed"}
    unknown = set(gen) - known
    _require(not unknown, f"unknown generator fields {sorted(unknown)}")
    weights = _parse_weights(gen, arch, "true_weights", required=True)
    noise_cov = _get(gen, "noise_cov", list, required=True)
    n = _get(gen, "n", int, required=True)
    try:
        return GeneratorSpec(
            arch=arch,
            true_weights=weights,
            noise_cov=np.asarray(noise_cov, dtype=float),
            n=n,
            seed=gen.get("seed", seed),
            noise_family=gen.get("noise_family", "gaussian"),
            input_law=gen.get("input_law", "standard-gaussian"),
            input_half_width=float(gen.get("input_half_width", 1.0)),
        )
    except (ValueError, mlp.ArchMismatch) as exc:
        raise ConfigInvalid(f"invalid generator: {exc}") from exc


class RunConfig:
    """Validated run description; building one performs all file I/O checks."""

    def __init__(self, command, raw, seed_override=None, out_override=None,
                 reps_override=None, quiet=False):
        _require(command in COMMANDS, f"unknown command '{command}'")
        _require(isinstance(raw, dict), "config root must be a JSON object")
        self.command = command
        self.quiet = quiet
        self.seed = seed_override if seed_override is not None else _get(raw, "seed", int, 0)
        _require(self.seed >= 0, "seed must be non-negative")
        self.out_dir = out_override or _get(raw, "out", str, ".")
        self.arch = _parse_arch(raw)
        self.fit_cfg = _parse_fit_config(raw, self.seed)

        dataset_path = _get(raw, "dataset_path", str)
        self.generator = _parse_generator(raw, self.arch, self.seed)
        _require(
            (dataset_path is None) != (self.generator is None),
            "exactly one of 'dataset_path' and 'generator' must be given",
        )
        self.dataset = None
        if dataset_path is not None:
            _require(os.path.isfile(dataset_path), f"dataset file '{dataset_path}' not found")
            try:
                with open(dataset_path, encoding="utf-8") as handle:
                    self.dataset = Dataset.from_csv(handle.read())
            except ValueError as exc:
                raise ConfigInvalid(f"cannot parse '{dataset_path}': {exc}") from exc
            _require(
                self.dataset.input_dim == self.arch.input_dim
                and self.dataset.output_dim == self.arch.output_dim,
                "dataset dimensions do not match the architecture",
            )

        self.mask = _parse_mask(raw, self.arch, required=(command == "test"))
        if command == "test":
            _require(self.mask.n_pinned >= 1, "the test mask must pin at least one weight")
        self.reps = reps_override if reps_override is not None else _get(raw, "reps", int, 200)
        _require(self.reps >= 1, "reps must be at least 1")
        self.statistics = tuple(_get(raw, "statistics", list, ["t"]))
        _require(
            set(self.statistics) <= {"t", "s"} and self.statistics,
            "'statistics' must be a non-empty subset of ['t', 's']",
        )
        if command == "simulate":
            _require(self.generator is not None, "'simulate' requires a generator")
            _require(self.mask is not None, "'simulate' requires a mask")
        self.eval_weights = _parse_weights(raw, self.arch, "weights")
        self.resolved = {
            "command": command,
            "seed": self.seed,
            "out": self.out_dir,
            "architecture": self.arch.to_dict(),
            "fit": {
                "max_iterations": self.fit_cfg.max_iterations,
                "gradient_tolerance": self.fit_cfg.gradient_tolerance,
                "n_starts": self.fit_cfg.n_starts,
                "box_radius": self.fit_cfg.box_radius,
            },
            "dataset_path": dataset_path,
            "generator": None if self.generator is None else {
                "true_weights": list(self.generator.true_weights.values),
                "noise_cov": [list(r) for r in self.generator.noise_cov],
                "n": self.generator.n,
                "seed": self.generator.seed,
                "noise_family": self.generator.noise_family,
                "input_law": self.generator.input_law,
                "input_half_width": self.generator.input_half_width,
            },
            "mask": None if self.mask is None else [bool(b) for b in self.mask.free],
            "reps": self.reps,
            "statistics": list(self.statistics),
        }

    def resolve_dataset(self):
        if self.dataset is not None:
            return self.dataset
        return simulate.generate(self.generator)


def _report_envelope(config, body):
    return {"schema_version": SCHEMA_VERSION, "config": config.resolved, **body}


def _write_report(config, name, body):
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, name)
    serialize.write_atomic(path, serialize.dumps(_report_envelope(config, body), indent=2) + "\n")
    return path


def _write_csv(config, name, text):
    path = os.path.join(config.out_dir, name)
    serialize.write_atomic(path, text)
    return path


def _say(config, message):
    if not config.quiet:
        print(message)


def _run_fit(config):
    data = config.resolve_dataset()
    mask = config.mask or ParameterMask.all_free(config.arch)
    fit = estimate.minimize(data, config.arch, mask, config.fit_cfg, "logdet", with_info=True)
    path = _write_report(config, "fit.json", {"fit": fit.to_json_dict()})
    _say(config, f"cost {fit.cost:.6f}  gradient_norm {fit.gradient_norm:.2e}  "
                 f"converged {fit.converged}")
    _say(config, f"wrote {path}")
    return 0


def _run_test(config):
    data = config.resolve_dataset()
    report = hypothesis.t_statistic(data, config.arch, config.mask, config.fit_cfg)
    if "s" in config.statistics:
        report.s_n = hypothesis.s_statistic(data, config.arch, config.mask, config.fit_cfg)
    path = _write_report(config, "test.json", {"test": report.to_json_dict()})
    _say(config, report.table())
    _say(config, f"wrote {path}")
    return 0


def _run_simulate(config):
    report = simulate.run_replications(
        config.generator, config.mask, config.fit_cfg, config.reps,
        statistic_kinds=config.statistics,
    )
    body = {"monte_carlo": report.to_json_dict()}
    path = _write_report(config, "simulate.json", body)
    _write_csv(config, "replications.csv", report.replications_csv())
    lead = "t_n" if "t" in config.statistics else "s_n"
    if report.converged_values(lead).size >= 2:
        _write_csv(config, "qq.csv", report.qq_csv(lead))
    _say(config, f"replications {report.replications}  failures {report.failures}  "
                 f"valid {report.valid}")
    if report.ks_t_vs_chi2 is not None:
        _say(config, f"KS(t_n, chi2_{report.dof}) = {report.ks_t_vs_chi2:.4f}  "
                     f"mean t_n = {report.empirical_mean_t:.4f}")
    if report.ks_s_vs_chi2 is not None:
        _say(config, f"KS(s_n, chi2_{report.dof}) = {report.ks_s_vs_chi2:.4f}")
    _say(config, f"wrote {path}")
    return 0


def _finite_difference_gradient(w, data, step=1e-6):
    base = w.values
    out = np.zeros_like(base)
    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += step
        down[k] -= step
        out[k] = (
            u_n(WeightVector(w.arch, up, w.box_radius), data)
            - u_n(WeightVector(w.arch, down, w.box_radius), data)
        ) / (2 * step)
    return out


def _finite_difference_hessian(w, data, step=1e-6):
    base = w.values
    s = base.size
    out = np.zeros((s, s))
    for k in range(s):
        up, down = base.copy(), base.copy()
        up[k] += step
        down[k] -= step
        gu = grad_u_n(WeightVector(w.arch, up, w.box_radius), data)
        gd = grad_u_n(WeightVector(w.arch, down, w.box_radius), data)
        out[k] = (gu - gd) / (2 * step)
    return (out + out.T) / 2


def _max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b),
                                                           np.full(a.shape, floor)])))


def _run_gradcheck(config):
    data = config.resolve_dataset()
    w = config.eval_weights
    if w is None:
        w = mlp.random_init(config.arch, ParameterMask.all_free(config.arch), config.seed)
    grad_err = _max_rel_err(grad_u_n(w, data), _finite_difference_gradient(w, data))
    hess_err = _max_rel_err(hessian_u_n(w, data), _finite_difference_hessian(w, data))
    rows = [
        ("grad_u_n", grad_err, GRADCHECK_GRAD_TOL),
        ("hessian_u_n", hess_err, GRADCHECK_HESS_TOL),
    ]
    ok = all(err < tol for _, err, tol in rows)
    body = {
        "gradcheck": {
            "passed": ok,
            "checks": [
                {"name": name, "max_rel_err": err, "tolerance": tol, "passed": err < tol}
                for name, err, tol in rows
            ],
        }
    }
    path = _write_report(config, "gradcheck.json", body)
    for name, err, tol in rows:
        _say(config, f"{name:<14} max rel err {err:.3e}  tol {tol:.0e}  "
                     f"{'pass' if err < tol else 'FAIL'}")
    _say(config, f"wrote {path}")
    return 0 if ok else 2


def run(config: RunConfig):
    """Execute a validated run configuration; returns the process exit code."""
    handlers = {
        "fit": _run_fit,
        "test": _run_test,
        "simulate": _run_simulate,
        "gradcheck": _run_gradcheck,
    }
    try:
        return handlers[config.command](config)
    except (SingularCovariance, AllStartsFailed, InconsistentFits) as exc:
        print(f"numerical failure in '{config.command}': {exc}", file=sys.stderr)
        return 2


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mlplrt",
        description="Fit and test one-hidden-layer MLPs under the log-det residual cost.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--reps", type=int, default=None, help="override simulate replications")
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return 1
    try:
        config = RunConfig(
            args.command, raw, seed_override=args.seed, out_override=args.out,
            reps_override=args.reps, quiet=args.quiet,
        )
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
