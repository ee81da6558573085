"""Config-driven experiment runner.

A config is a plain text file of ``key = value`` lines::

    experiment = strong_convergence
    model = pendulum
    param.c = 1
    damping = constant
    damping_amplitude = 2
    schemes = conformal_exp, euler_maruyama, midpoint
    T = 1
    tau_list = 2^-5 .. 2^-10
    tau_ref = 2^-13
    samples = 200
    seed = 1
    initial_value = 0.2, 1

Numbers may be written as small arithmetic expressions (``2/3``, ``cos(1.1)``,
``2^-5``). ``a .. b`` expands to every power of two between ``a`` and ``b``.
Running a config writes ``manifest.txt`` plus one CSV per scheme (and per
test function for weak runs) into the output directory.
"""
from __future__ import annotations

import argparse
import ast
import math
import operator
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .analysis import TestFunction, dyadic_factor, invariant_series, strong_errors, weak_errors
from .errors import ConfigError, ConformalSDEError, DomainError, InvalidArgument, StepDiverged
from .integrators import SCHEMES, SolverConfig, integrate_path
from .models import MODEL_NAMES, build_model, model_parameters
from .noise import TruncationLevel, make_time_grid, sample_noise

EXPERIMENTS = ("trajectory", "conservation", "strong_convergence", "weak_convergence")
CONVERGENCE = ("strong_convergence", "weak_convergence")
DAMPING_KEYS = ("damping", "damping_amplitude", "damping_frequency")

EXIT_OK, EXIT_CONFIG, EXIT_INVALID_LEVEL, EXIT_STEP_FAILURE = 0, 2, 3, 4


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: str
    T: float
    tau_list: tuple
    initial_value: tuple
    params: dict = field(default_factory=dict)
    schemes: tuple = ("conformal_exp",)
    tau_ref: Optional[float] = None
    samples: int = 1
    seed: int = 0
    truncation_k: Optional[int] = None
    fp_tolerance: float = 1e-13
    fp_max_iterations: int = 100
    quadrature_nodes: int = 16
    test_functions: tuple = ()
    invariant: Optional[str] = None
    sup_norm: bool = False
    chunk_size: int = 2000
    plot_script: bool = False
    output_dir: str = "output"

    def solver_config(self, noise_channels: int) -> SolverConfig:
        return SolverConfig(
            fp_tolerance=self.fp_tolerance,
            fp_max_iterations=self.fp_max_iterations,
            truncation=TruncationLevel(self.resolved_k(noise_channels)),
            quadrature_nodes=self.quadrature_nodes,
        )

    def resolved_k(self, noise_channels: int) -> int:
        """Explicit ``truncation_k`` or the default for this run."""
        if self.truncation_k is not None:
            return self.truncation_k
        if self.experiment == "weak_convergence" or noise_channels <= 1:
            return 2
        return 1


# --------------------------------------------------------------------------
# value syntax

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {
    "sqrt": math.sqrt, "cos": math.cos, "sin": math.sin, "tan": math.tan,
    "exp": math.exp, "log": math.log, "log2": math.log2,
}
_CONSTS = {"pi": math.pi, "e": math.e}


def _eval_node(node):
    if isinstance(node, ast.Constant) and type(node.value) in (int, float):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_eval_node(node.operand))
    if isinstance(node, ast.Name) and node.id in _CONSTS:
        return _CONSTS[node.id]
    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id in _FUNCS
        and len(node.args) == 1
        and not node.keywords
    ):
        return _FUNCS[node.func.id](_eval_node(node.args[0]))
    raise ValueError("unsupported expression")


def eval_number(text: str):
    """Evaluate a numeric expression; ``^`` means power. Integers stay integers."""
    try:
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
        value = _eval_node(tree.body)
    except (SyntaxError, ValueError, ZeroDivisionError, OverflowError, TypeError) as exc:
        raise ValueError(f"cannot evaluate {text.strip()!r}: {exc}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ValueError(f"{text.strip()!r} is not finite")
    return value


def _is_identifier(text: str) -> bool:
    return text.replace("_", "a").replace("-", "a").isalnum() and not text[0].isdigit()


def parse_value(text: str):
    """Number, comma-separated tuple of numbers, ``a .. b`` ladder or bare word."""
    text = text.strip()
    if not text:
        raise ValueError("empty value")
    if ".." in text:
        lo, _, hi = text.partition("..")
        return dyadic_ladder(eval_number(lo), eval_number(hi))
    if "," in text:
        return tuple(parse_value(p) for p in text.split(","))
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return eval_number(text)
    except ValueError:
        if _is_identifier(text):
            return text
        raise


def _log2_exact(x) -> int:
    if not x > 0:
        raise ValueError(f"ladder end {x!r} is not positive")
    j = round(math.log2(x))
    if 2.0**j != x:
        raise ValueError(f"ladder end {x!r} is not a power of two")
    return j


def dyadic_ladder(a, b) -> tuple:
    """Every power of two from ``a`` to ``b`` inclusive, largest first."""
    ja, jb = _log2_exact(a), _log2_exact(b)
    hi, lo = max(ja, jb), min(ja, jb)
    return tuple(2.0**j for j in range(hi, lo - 1, -1))


def render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(render_value(v) for v in value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# parsing

_SCALAR_KEYS = {
    # key: (kind, required)
    "experiment": ("word", True),
    "model": ("word", True),
    "schemes": ("words", False),
    "T": ("real", True),
    "tau_list": ("reals", True),
    "tau_ref": ("real", False),
    "samples": ("int", False),
    "seed": ("int", False),
    "truncation_k": ("int", False),
    "fp_tolerance": ("real", False),
    "fp_max_iterations": ("int", False),
    "quadrature_nodes": ("int", False),
    "initial_value": ("reals", True),
    "test_functions": ("words", False),
    "invariant": ("word", False),
    "sup_norm": ("bool", False),
    "chunk_size": ("int", False),
    "plot_script": ("bool", False),
    "output_dir": ("text", False),
}
_ALIASES = {"scheme": "schemes", "test_function": "test_functions"}


def _coerce(kind, raw, value, line):
    def bad(what):
        return ConfigError(f"expected {what}, got {raw.strip()!r}", line)

    if kind == "text":
        return raw.strip()
    if kind == "word":
        if not isinstance(value, str):
            raise bad("a name")
        return value
    if kind == "words":
        vals = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, str) for v in vals):
            raise bad("a list of names")
        return tuple(vals)
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad("true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if kind == "real":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if kind == "reals":
        vals = value if isinstance(value, tuple) else (value,)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            raise bad("a list of numbers")
        return tuple(float(v) for v in vals)
    raise AssertionError(kind)


def _read_lines(text: str):
    """Yield ``(line_number, key, raw_value)`` for every assignment."""
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError("expected 'key = value'", number)
        yield number, key, raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config; errors name the offending line."""
    values, lines, params = {}, {}, {}
    for number, key, raw in _read_lines(text):
        key = _ALIASES.get(key, key)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first given on line {lines[key]})", number)
        lines[key] = number
        if _SCALAR_KEYS.get(key, ("",))[0] == "text":
            if not raw.strip():
                raise ConfigError(f"empty value for {key!r}", number)
            values[key] = raw.strip()
            continue
        try:
            value = parse_value(raw)
        except ValueError as exc:
            raise ConfigError(str(exc), number) from None
        if key.startswith("param."):
            params[key[len("param."):]] = value
        elif key in DAMPING_KEYS:
            params[key] = value
        elif key in _SCALAR_KEYS:
            values[key] = _coerce(_SCALAR_KEYS[key][0], raw, value, number)
        else:
            raise ConfigError(f"unknown key {key!r}", number)
    for key, (_, required) in _SCALAR_KEYS.items():
        if required and key not in values:
            raise ConfigError(f"missing required key {key!r}")
    cfg = ExperimentConfig(params=params, **values)
    validate_config(cfg, lines)
    return cfg


def validate_config(cfg: ExperimentConfig, lines: Optional[dict] = None):
    """Semantic checks shared by parsing and programmatic construction."""
    lines = lines or {}

    def fail(message, key=None):
        raise ConfigError(message, lines.get(key))

    if cfg.experiment not in EXPERIMENTS:
        fail(f"unknown experiment {cfg.experiment!r}; choose from {', '.join(EXPERIMENTS)}", "experiment")
    if cfg.model not in MODEL_NAMES:
        fail(f"unknown model {cfg.model!r}; choose from {', '.join(MODEL_NAMES)}", "model")
    try:
        system = build_model(cfg.model, cfg.params)
    except ConfigError as exc:
        required, optional = model_parameters(cfg.model)
        key = next((f"param.{k}" for k in cfg.params if k not in required + optional), "model")
        fail(str(exc), key)
    if not cfg.schemes:
        fail("at least one scheme is required", "schemes")
    for s in cfg.schemes:
        if s not in SCHEMES:
            fail(f"unknown scheme {s!r}; choose from {', '.join(SCHEMES)}", "schemes")
    if not (cfg.T > 0):
        fail("T must be positive", "T")
    if not cfg.tau_list or not all(t > 0 for t in cfg.tau_list):
        fail("step sizes must be positive", "tau_list")
    if len(cfg.initial_value) != system.dimension:
        fail(f"{cfg.model} needs {system.dimension} initial values, got {len(cfg.initial_value)}", "initial_value")
    if not np.all(system.in_domain(np.array(cfg.initial_value))):
        fail(f"initial value lies outside the domain of {cfg.model}", "initial_value")
    for key in ("samples", "fp_max_iterations", "chunk_size"):
        if getattr(cfg, key) < 1:
            fail(f"{key} must be at least 1", key)
    if cfg.seed < 0:
        fail("seed must be non-negative", "seed")
    if cfg.truncation_k is not None and cfg.truncation_k < 1:
        fail("truncation_k must be at least 1", "truncation_k")
    if not (cfg.fp_tolerance > 0):
        fail("fp_tolerance must be positive", "fp_tolerance")
    if cfg.quadrature_nodes < 2:
        fail("quadrature_nodes must be at least 2", "quadrature_nodes")
    for t in cfg.tau_list:
        if not t < 1:
            fail(f"step size {t!r} must be below 1 for truncation", "tau_list")

    if cfg.experiment in CONVERGENCE:
        if cfg.tau_ref is None:
            fail("convergence experiments need tau_ref", "tau_list")
        if not (0 < cfg.tau_ref < 1):
            fail("tau_ref must lie in (0, 1)", "tau_ref")
        n_ref = cfg.T / cfg.tau_ref
        if abs(n_ref - round(n_ref)) > 1e-9 * n_ref:
            fail(f"tau_ref={cfg.tau_ref!r} does not divide T={cfg.T!r}", "tau_ref")
        for t in cfg.tau_list:
            try:
                dyadic_factor(t, cfg.tau_ref)
            except InvalidArgument as exc:
                fail(str(exc), "tau_list")
        if len(cfg.tau_list) < 3:
            fail("a convergence ladder needs at least 3 step sizes", "tau_list")
    else:
        if len(cfg.tau_list) != 1:
            fail(f"{cfg.experiment} runs take exactly one step size", "tau_list")
        n = cfg.T / cfg.tau_list[0]
        if abs(n - round(n)) > 1e-9 * n:
            fail(f"step size {cfg.tau_list[0]!r} does not divide T={cfg.T!r}", "tau_list")

    if cfg.experiment == "weak_convergence":
        if not cfg.test_functions:
            fail("weak convergence needs test_functions", "test_functions")
        for tf in cfg.test_functions:
            try:
                phi = TestFunction.parse(tf)
            except InvalidArgument as exc:
                fail(str(exc), "test_functions")
            if phi.component > system.dimension:
                fail(f"test function {tf} exceeds dimension {system.dimension}", "test_functions")
    elif cfg.test_functions:
        fail("test_functions only apply to weak convergence", "test_functions")

    if cfg.experiment == "conservation":
        names = [inv.name for inv in system.invariants]
        if not names:
            fail(f"{cfg.model} has no invariant to audit", "experiment")
        if cfg.invariant is not None and cfg.invariant not in names:
            fail(f"unknown invariant {cfg.invariant!r}; {cfg.model} has {', '.join(names)}", "invariant")
    elif cfg.invariant is not None:
        fail("invariant only applies to conservation runs", "invariant")
    return system


def render_config(cfg: ExperimentConfig) -> str:
    """Text form that ``parse_config`` maps back to an equal config."""
    out = []
    for key in _SCALAR_KEYS:
        value = getattr(cfg, key)
        if value is None or (key == "test_functions" and not value):
            continue
        out.append(f"{key} = {render_value(value)}")
        if key == "model":
            for name, pv in cfg.params.items():
                prefix = "" if name in DAMPING_KEYS else "param."
                out.append(f"{prefix}{name} = {render_value(pv)}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# running


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path, header, rows, footer=()):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
        for line in footer:
            fh.write(f"# {line}\n")


def _single_path(cfg, system, scheme):
    grid = make_time_grid(cfg.T, int(round(cfg.T / cfg.tau_list[0])))
    noise = sample_noise(grid, system.noise_channels, cfg.seed, 0)
    try:
        return integrate_path(system, scheme, grid, noise, cfg.initial_value, cfg.solver_config(system.noise_channels)), None
    except (StepDiverged, DomainError) as exc:
        return exc.trajectory, exc


def _run_paths(cfg, system, out_dir):
    files, notes, failed = [], [], False
    for scheme in cfg.schemes:
        traj, exc = _single_path(cfg, system, scheme)
        if exc is not None:
            failed = True
            notes.append(f"{scheme}: stopped at step {exc.step}: {exc}")
        times = traj.grid.nodes[: traj.states.shape[0]]
        if cfg.experiment == "trajectory":
            d = system.dimension
            header = ["n", "t"] + [f"y_{i + 1}" for i in range(d)] + ["fp_iters", "fp_residual"]
            iters = np.concatenate([[0], traj.fp_iterations])
            resid = np.concatenate([[0.0], traj.fp_residuals])
            rows = [
                [n, times[n], *traj.states[n], int(iters[n]), resid[n]]
                for n in range(traj.states.shape[0])
            ]
            name = f"trajectory_{scheme}.csv"
        else:
            inv = next(i for i in system.invariants if cfg.invariant in (None, i.name))
            value, predicted, rel = invariant_series(traj, inv, system)
            header = ["n", "t", "invariant_value", "predicted_value", "rel_deviation"]
            rows = [[n, times[n], value[n], predicted[n], rel[n]] for n in range(len(value))]
            name = f"conservation_{scheme}.csv"
            notes.append(f"{scheme}: {inv.name} max rel_deviation = {fmt(np.max(rel))}")
        _write_csv(os.path.join(out_dir, name), header, rows)
        files.append(name)
    return files, notes, (EXIT_STEP_FAILURE if failed else EXIT_OK)


def _run_convergence(cfg, system, out_dir, threads):
    solver = cfg.solver_config(system.noise_channels)
    common = dict(
        system=system, schemes=list(cfg.schemes), tau_list=list(cfg.tau_list), tau_ref=cfg.tau_ref,
        samples=cfg.samples, T=cfg.T, y0=list(cfg.initial_value), seed=cfg.seed, cfg=solver,
        chunk_size=cfg.chunk_size, threads=threads,
    )
    if cfg.experiment == "strong_convergence":
        tables = {(s, None): t for s, t in strong_errors(sup_norm=cfg.sup_norm, **common).items()}
    else:
        tfs = [TestFunction.parse(t) for t in cfg.test_functions]
        tables = {key: t for key, t in weak_errors(test_functions=tfs, **common).items()}
    files, notes, code = [], [], EXIT_OK
    prefix = "strong" if cfg.experiment == "strong_convergence" else "weak"
    for (scheme, tf), table in tables.items():
        name = f"{prefix}_{scheme}.csv" if tf is None else f"{prefix}_{scheme}_{tf}.csv"
        rows = [[t, e, s, d] for t, e, s, d in table.rows()]
        footer = [f"slope_stderr = {fmt(table.slope_stderr)}", f"fitted_slope = {fmt(table.fitted_slope)}"]
        _write_csv(os.path.join(out_dir, name), ["tau", "error", "mc_stderr", "divergent_samples"], rows, footer)
        files.append(name)
        notes.append(f"{name[:-4]}: fitted_slope = {table.fitted_slope:.4f} +- {table.slope_stderr:.4f}")
        if not table.all_valid:
            code = EXIT_INVALID_LEVEL
            bad = [fmt(t) for t, v in zip(table.step_sizes, table.valid) if not v]
            notes.append(f"{name[:-4]}: invalid levels tau = {', '.join(bad)}")
    return files, notes, code


def plot_script(cfg: ExperimentConfig, files) -> str:
    """Generic gnuplot commands for the CSVs of one run."""
    lines = ["set datafile separator ','", "set key autotitle columnhead"]
    if cfg.experiment in CONVERGENCE:
        lines += ["set logscale xy 2", "set xlabel 'tau'", "set ylabel 'error'"]
        plots = [f"'{f}' using 'tau':'error' with linespoints title '{f[:-4]}'" for f in files]
    elif cfg.experiment == "conservation":
        lines += ["set xlabel 't'", "set ylabel 'invariant'"]
        plots = [f"'{f}' using 't':'invariant_value' with lines title '{f[:-4]}'" for f in files]
        plots += [f"'{files[0]}' using 't':'predicted_value' with lines dashtype 2 title 'predicted'"]
    else:
        lines += ["set xlabel 't'"]
        plots = [f"'{f}' using 't':'y_1' with lines title '{f[:-4]}'" for f in files]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def run(cfg: ExperimentConfig, threads: int = 1, log=None) -> int:
    """Execute one experiment and write its files; returns the exit code."""
    start = time.perf_counter()
    system = validate_config(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    if cfg.experiment in CONVERGENCE:
        files, notes, code = _run_convergence(cfg, system, cfg.output_dir, threads)
    else:
        files, notes, code = _run_paths(cfg, system, cfg.output_dir)
    if cfg.plot_script:
        with open(os.path.join(cfg.output_dir, "plot.gp"), "w", encoding="utf-8") as fh:
            fh.write(plot_script(cfg, files))
        files.append("plot.gp")
    elapsed = time.perf_counter() - start
    with open(os.path.join(cfg.output_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))
        fh.write(f"# library_version = {__version__}\n")
        fh.write(f"# truncation_k_used = {cfg.resolved_k(system.noise_channels)}\n")
        fh.write(f"# threads = {threads}\n")
        fh.write(f"# wall_time_seconds = {elapsed:.3f}\n")
        fh.write(f"# exit_code = {code}\n")
        for f in files:
            fh.write(f"# output = {f}\n")
        for note in notes:
            fh.write(f"# note = {note}\n")
    if log is not None:
        for note in notes:
            print(note, file=log)
    return code


# --------------------------------------------------------------------------
# command line


def _load(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="conformal-sde", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", help="override the output directory in the config")
    p_run.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo runs (results do not depend on it)")
    p_run.add_argument("--seed", type=int, help="override the seed in the config")
    p_run.add_argument("--plot-script", action="store_true", help="also write a gnuplot script")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    sub.add_parser("list-models", help="list built-in models and their parameters")
    args = parser.parse_args(argv)

    if args.command == "list-models":
        for name in MODEL_NAMES:
            required, optional = model_parameters(name)
            print(f"{name}: required [{', '.join(required)}] optional [{', '.join(optional)}]")
        return EXIT_OK
    try:
        cfg = _load(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.experiment}, {cfg.model})")
            return EXIT_OK
        overrides = {}
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.plot_script:
            overrides["plot_script"] = True
        cfg = replace(cfg, **overrides)
        validate_config(cfg)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(cfg, threads=args.threads, log=sys.stdout)
    except ConformalSDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STEP_FAILURE


if __name__ == "__main__":
    sys.exit(main())
