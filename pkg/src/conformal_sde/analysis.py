"""Monte Carlo strong/weak error estimation, order fitting and invariant audits.

Strong and weak errors are measured against a reference solution computed by
the conformal exponential integrator on a fine grid. Every coarse run reuses
the fine Brownian path of the same sample (summed increments), so the
estimator sees scheme error only. Samples are processed in fixed-size chunks
and all reductions run over full per-sample arrays, which makes the results
independent of chunking and of the number of worker threads.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientData, InvalidArgument
from .integrators import OK, SCHEMES, SolverConfig, Trajectory, integrate_batch
from .models import InvariantSpec, PoissonSystem
from .noise import coarsen_increments, make_time_grid, sample_noise_batch

DEFAULT_CHUNK = 2000
INVALID_FRACTION = 1e-3

__all__ = [
    "ErrorTable",
    "TestFunction",
    "Trajectory",
    "fit_order",
    "fit_order_with_error",
    "strong_error",
    "strong_errors",
    "weak_error",
    "weak_errors",
    "invariant_drift",
    "invariant_series",
    "dyadic_factor",
]


@dataclass(frozen=True)
class TestFunction:
    """Scalar observable ``phi(y)`` of one state component (1-based)."""

    __test__ = False  # not a pytest class

    kind: str
    component: int

    KINDS = ("coordinate", "square", "cos", "sin")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgument(f"unknown test function {self.kind!r}")
        if self.component < 1:
            raise InvalidArgument("test function component is 1-based")

    @property
    def id(self) -> str:
        return f"{self.kind}_{self.component}"

    @classmethod
    def parse(cls, text: str) -> "TestFunction":
        kind, _, j = text.strip().rpartition("_")
        if not kind or not j.isdigit():
            raise InvalidArgument(f"test function must look like 'sin_1', got {text!r}")
        return cls(kind, int(j))

    def __call__(self, y):
        x = np.asarray(y)[..., self.component - 1]
        if self.kind == "coordinate":
            return x
        if self.kind == "square":
            return x * x
        if self.kind == "cos":
            return np.cos(x)
        return np.sin(x)


@dataclass
class ErrorTable:
    scheme: str
    system: str
    mode: str
    step_sizes: list
    errors: list
    samples: int
    mc_stderr: list
    divergent_samples: list
    valid: list
    fitted_slope: float = float("nan")
    slope_stderr: float = float("nan")
    test_function: Optional[str] = None
    max_norm: list = field(default_factory=list)
    reference_max_norm: float = float("nan")

    def rows(self):
        return list(zip(self.step_sizes, self.errors, self.mc_stderr, self.divergent_samples))

    @property
    def all_valid(self) -> bool:
        return all(self.valid)


# --------------------------------------------------------------------------
# order fitting


def fit_order_with_error(step_sizes, errors, stderr=None):
    """Least-squares slope of log2(error) against log2(tau) and its MC width.

    Non-positive or non-finite errors are dropped with a warning; at least
    three pairs must remain. The width propagates the per-level standard
    errors through the regression (levels treated as independent).
    """
    tau = np.asarray(step_sizes, dtype=float)
    err = np.asarray(errors, dtype=float)
    if tau.shape != err.shape:
        raise InvalidArgument("step sizes and errors differ in length")
    keep = np.isfinite(err) & (err > 0) & (tau > 0)
    if not keep.all():
        warnings.warn(f"fit_order: dropping {int((~keep).sum())} non-positive error(s)", stacklevel=2)
    if keep.sum() < 3:
        raise InsufficientData(f"need at least 3 positive errors to fit an order, got {int(keep.sum())}")
    x = np.log2(tau[keep])
    y = np.log2(err[keep])
    xc = x - x.mean()
    slope = float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))
    width = float("nan")
    if stderr is not None:
        se = np.asarray(stderr, dtype=float)[keep]
        sd_log = se / (err[keep] * math.log(2.0))
        c = xc / np.dot(xc, xc)
        width = float(math.sqrt(np.sum((c * sd_log) ** 2)))
    return slope, width


def fit_order(step_sizes, errors) -> float:
    return fit_order_with_error(step_sizes, errors)[0]


# --------------------------------------------------------------------------
# Monte Carlo drivers


def dyadic_factor(tau: float, tau_ref: float) -> int:
    """Integer ``2^j`` with ``tau = 2^j tau_ref``; raises if there is none."""
    ratio = tau / tau_ref
    j = round(math.log2(ratio)) if ratio > 0 else -1
    if j < 0 or abs(ratio - 2.0**j) > 1e-9 * ratio:
        raise InvalidArgument(f"step size {tau!r} is not a power-of-two multiple of {tau_ref!r}")
    return 2**j


def _levels(T, tau_list, tau_ref):
    n_ref = T / tau_ref
    N_ref = int(round(n_ref))
    if N_ref < 1 or abs(n_ref - N_ref) > 1e-9 * n_ref:
        raise InvalidArgument(f"tau_ref={tau_ref!r} does not divide T={T!r}")
    taus = sorted((float(t) for t in tau_list), reverse=True)
    factors = [dyadic_factor(t, tau_ref) for t in taus]
    for f in factors:
        if N_ref % f:
            raise InvalidArgument(f"coarsening factor {f} does not divide {N_ref} reference steps")
    return N_ref, taus, factors


def _chunks(samples, chunk_size):
    return [range(s, min(s + chunk_size, samples)) for s in range(0, samples, chunk_size)]


def _map_chunks(fn, chunks, threads):
    if threads is None or threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _run_coupled(system, schemes, T, tau_list, tau_ref, samples, y0, seed, cfg,
                 observe, chunk_size, threads, sup_norm=False):
    """Integrate reference and coarse runs on shared noise.

    ``observe(coarse_final, ref_final, coarse_snaps, ref_snaps)`` returns one
    value (or tuple) per sample. Returns ``taus, factors, values, bad, norms``
    with ``values[scheme][level]`` of shape ``(samples, ...)``, ``bad`` the
    matching boolean failure masks and ``norms`` the largest state norm seen
    per scheme and level (key ``None`` for the reference run).
    """
    if samples < 1:
        raise InvalidArgument("need at least one Monte Carlo sample")
    for s in schemes:
        if s not in SCHEMES:
            raise InvalidArgument(f"unknown scheme {s!r}")
    cfg = cfg or SolverConfig()
    N_ref, taus, factors = _levels(T, tau_list, tau_ref)
    ref_grid = make_time_grid(T, N_ref)
    M = system.noise_channels
    y0 = np.asarray(y0, dtype=float)
    record = min(factors) if sup_norm else None

    def work(chunk):
        inc = sample_noise_batch(ref_grid, M, seed, chunk)
        ref = integrate_batch(system, "conformal_exp", ref_grid, inc, y0, cfg, record_every=record)
        ref_bad = ref.status != OK
        out = {None: _nanmax(ref.max_norm)}
        for s in schemes:
            per_level = []
            for f in factors:
                grid = make_time_grid(T, N_ref // f)
                coarse = inc if f == 1 else coarsen_increments(inc, f)
                run = integrate_batch(system, s, grid, coarse, y0, cfg, record_every=1 if sup_norm else None)
                ref_snaps = None
                if sup_norm:
                    step = f // record
                    ref_snaps = ref.snapshots[:, ::step]
                val = observe(run.final, ref.final, run.snapshots, ref_snaps)
                per_level.append((val, ref_bad | (run.status != OK), _nanmax(run.max_norm)))
            out[s] = per_level
        return out

    results = _map_chunks(work, _chunks(samples, chunk_size), threads)
    values, bad = {}, {}
    norms = {None: _nanmax([r[None] for r in results])}
    for s in schemes:
        values[s], bad[s], norms[s] = [], [], []
        for li in range(len(factors)):
            values[s].append(np.concatenate([r[s][li][0] for r in results]))
            bad[s].append(np.concatenate([r[s][li][1] for r in results]))
            norms[s].append(_nanmax([r[s][li][2] for r in results]))
    return taus, factors, values, bad, norms


def _nanmax(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.nanmax(values)) if np.any(np.isfinite(values)) else float("nan")


def _finish(table: ErrorTable):
    ok = [v for v in table.valid]
    taus = [t for t, v in zip(table.step_sizes, ok) if v]
    errs = [e for e, v in zip(table.errors, ok) if v]
    ses = [e for e, v in zip(table.mc_stderr, ok) if v]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            table.fitted_slope, table.slope_stderr = fit_order_with_error(taus, errs, ses)
    except InsufficientData:
        pass
    return table


def strong_errors(
    system: PoissonSystem,
    schemes: Sequence[str],
    tau_list,
    tau_ref: float,
    samples: int,
    T: float,
    y0,
    seed: int,
    cfg: Optional[SolverConfig] = None,
    sup_norm: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> dict:
    """Root-mean-square errors against the coupled reference for several schemes.

    The error is measured at the final time, or as the max over common nodes
    when ``sup_norm`` is set. Returns ``{scheme: ErrorTable}``.
    """

    def observe(fin, ref, snaps, ref_snaps):
        d = (snaps - ref_snaps) if sup_norm else (fin - ref)[:, None, :]
        return np.sum(d * d, axis=-1)

    taus, factors, values, bad, norms = _run_coupled(
        system, list(schemes), T, tau_list, tau_ref, samples, y0, seed, cfg,
        observe, chunk_size, threads, sup_norm,
    )
    tables = {}
    for s in schemes:
        errs, ses, divs, valid = [], [], [], []
        for li in range(len(factors)):
            sq, b = values[s][li], bad[s][li]
            n_bad = int(b.sum())
            ok = n_bad <= INVALID_FRACTION * samples and n_bad < samples
            divs.append(n_bad)
            valid.append(bool(ok))
            if not ok:
                errs.append(float("nan"))
                ses.append(float("nan"))
                continue
            good = sq[~b]
            node_ms = np.mean(good, axis=0)
            k = int(np.argmax(node_ms))
            e = math.sqrt(float(node_ms[k]))
            errs.append(e)
            if good.shape[0] > 1 and e > 0:
                ses.append(float(np.std(good[:, k], ddof=1) / math.sqrt(good.shape[0]) / (2.0 * e)))
            else:
                ses.append(0.0)
        table = ErrorTable(s, system.name, "strong", taus, errs, samples, ses, divs, valid,
                           max_norm=norms[s], reference_max_norm=norms[None])
        tables[s] = _finish(table)
    return tables


def strong_error(system, scheme, tau_list, tau_ref, samples, T, y0, seed, cfg=None, **kw) -> ErrorTable:
    return strong_errors(system, [scheme], tau_list, tau_ref, samples, T, y0, seed, cfg, **kw)[scheme]


def weak_errors(
    system: PoissonSystem,
    schemes: Sequence[str],
    tau_list,
    tau_ref: float,
    samples: int,
    T: float,
    y0,
    test_functions: Sequence[TestFunction],
    seed: int,
    cfg: Optional[SolverConfig] = None,
    chunk_size: int = DEFAULT_CHUNK,
    threads: int = 1,
) -> dict:
    """Coupled weak errors ``|mean(phi(y_N) - phi(y_ref))|`` per scheme and test function.

    Returns ``{(scheme, test_function.id): ErrorTable}``; ``mc_stderr`` is the
    standard error of the mean difference.
    """
    tfs = list(test_functions)
    for tf in tfs:
        if tf.component > system.dimension:
            raise InvalidArgument(f"test function {tf.id} exceeds dimension {system.dimension}")

    def observe(fin, ref, snaps, ref_snaps):
        return np.stack([tf(fin) - tf(ref) for tf in tfs], axis=-1)

    taus, factors, values, bad, norms = _run_coupled(
        system, list(schemes), T, tau_list, tau_ref, samples, y0, seed, cfg,
        observe, chunk_size, threads,
    )
    tables = {}
    for s in schemes:
        for k, tf in enumerate(tfs):
            errs, ses, divs, valid = [], [], [], []
            for li in range(len(factors)):
                diff, b = values[s][li][:, k], bad[s][li]
                n_bad = int(b.sum())
                ok = n_bad <= INVALID_FRACTION * samples and n_bad < samples
                divs.append(n_bad)
                valid.append(bool(ok))
                if not ok:
                    errs.append(float("nan"))
                    ses.append(float("nan"))
                    continue
                good = diff[~b]
                errs.append(abs(float(np.mean(good))))
                ses.append(float(np.std(good, ddof=1) / math.sqrt(good.size)) if good.size > 1 else 0.0)
            table = ErrorTable(s, system.name, "weak", taus, errs, samples, ses, divs, valid, test_function=tf.id,
                               max_norm=norms[s], reference_max_norm=norms[None])
            tables[(s, tf.id)] = _finish(table)
    return tables


def weak_error(system, scheme, tau_list, tau_ref, samples, T, y0, phi, seed, cfg=None, **kw) -> ErrorTable:
    return weak_errors(system, [scheme], tau_list, tau_ref, samples, T, y0, [phi], seed, cfg, **kw)[(scheme, phi.id)]


# --------------------------------------------------------------------------
# invariant audits


def predicted_invariant(system: PoissonSystem, invariant: InvariantSpec, times, initial_value: float):
    """``exp(-p int_0^t gamma) F(y0)`` at each time."""
    p = invariant.homogeneity_degree
    if p is None:
        raise InvalidArgument(f"invariant {invariant.name} has no homogeneity degree")
    times = np.asarray(times, dtype=float)
    damping = system.damping
    if damping.has_antiderivative:
        integral = damping.antiderivative(times) - damping.antiderivative(0.0)
    else:
        integral = np.array([damping.integral(0.0, t) for t in times])
    return np.exp(-p * integral) * initial_value


def invariant_series(trajectory: Trajectory, invariant: InvariantSpec, system: PoissonSystem):
    """Per-node ``(value, predicted, relative deviation)`` arrays."""
    values = invariant(trajectory.states)
    predicted = predicted_invariant(system, invariant, trajectory.grid.nodes, values[0])
    rel = np.abs(values - predicted) / (abs(values[0]) + 1e-300)
    return values, predicted, rel


def invariant_drift(trajectory: Trajectory, invariant: InvariantSpec, system: PoissonSystem) -> float:
    """Largest relative departure of ``F(y_n)`` from its exact conformal law."""
    return float(np.max(invariant_series(trajectory, invariant, system)[2]))


def casimir_norm_bound(system: PoissonSystem, invariant: InvariantSpec, y0, T: float) -> float:
    """A-priori bound ``(F(y0)/m(F))^(1/p) exp(int_0^T |gamma|)`` on ``|y_n|``."""
    floor = invariant.positivity_floor
    if not floor or floor <= 0:
        raise InvalidArgument(f"invariant {invariant.name} has no positive floor")
    p = invariant.homogeneity_degree
    F0 = float(invariant(np.asarray(y0, dtype=float)))
    return (F0 / floor) ** (1.0 / p) * math.exp(system.damping.abs_integral(0.0, T))
