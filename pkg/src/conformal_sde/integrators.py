"""One-step maps and trajectory drivers.

Three schemes share one batched engine:

* ``conformal_exp``: exact damping on each half step around an implicit
  discrete-gradient step for the conservative part,
* ``euler_maruyama``: explicit Euler-Maruyama on the Ito form,
* ``midpoint``: the stochastic implicit midpoint rule.

Every kernel works on a batch of states ``(S, d)`` with noise ``(S, M)``.
Fixed-point iterations are masked row by row: a converged row is frozen and
never touched again, so the result for one sample does not depend on which
other samples share its batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .discrete_gradient import GradientRule, discrete_gradient, gauss_legendre_unit
from .errors import DomainError, InvalidArgument, StepDiverged
from .models import PoissonSystem, ito_correction, matvec as _matvec
from .noise import NoisePath, TimeGrid, TruncationLevel, truncate_increments

SCHEMES = ("conformal_exp", "euler_maruyama", "midpoint")

OK, DIVERGED, OUT_OF_DOMAIN = 0, 1, 2


@dataclass(frozen=True)
class SolverConfig:
    fp_tolerance: float = 1e-13
    fp_max_iterations: int = 100
    truncation: TruncationLevel = TruncationLevel(1)
    quadrature_nodes: int = 16

    def __post_init__(self):
        if not self.fp_tolerance > 0:
            raise InvalidArgument("fixed-point tolerance must be positive")
        if self.fp_max_iterations < 1:
            raise InvalidArgument("fixed-point iteration cap must be at least 1")
        if self.quadrature_nodes < 2:
            raise InvalidArgument("quadrature needs at least 2 nodes")


@dataclass(frozen=True)
class DampingFactors:
    X0: float
    X1: float


@dataclass
class StepRecord:
    state: np.ndarray
    fp_iterations: object
    fp_residual: object


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    scheme: str
    fp_iterations: np.ndarray = field(repr=False, default=None)
    fp_residuals: np.ndarray = field(repr=False, default=None)

    @property
    def max_fp_residual(self) -> float:
        if self.fp_residuals is None or self.fp_residuals.size == 0:
            return 0.0
        return float(np.max(self.fp_residuals))

    @property
    def times(self):
        return self.grid.nodes


# --------------------------------------------------------------------------
# damping


def _gl_integral(rate, a: float, b: float, nodes: int = 5) -> float:
    eta, w = gauss_legendre_unit(nodes)
    acc = 0.0
    for q in range(nodes):
        acc += w[q] * float(rate(a + eta[q] * (b - a)))
    return acc * (b - a)


def damping_factors(system: PoissonSystem, grid: TimeGrid, n: int) -> DampingFactors:
    """``X0 = int_{t_{n+1/2}}^{t_n} gamma`` and ``X1 = int_{t_{n+1/2}}^{t_{n+1}} gamma``."""
    if not 0 <= n < grid.steps:
        raise InvalidArgument(f"step index {n} outside 0..{grid.steps - 1}")
    t0, th, t1 = grid.node(n), grid.midpoint(n), grid.node(n + 1)
    damping = system.damping
    if damping.kind == "none":
        return DampingFactors(0.0, 0.0)
    if damping.has_antiderivative:
        G = damping.antiderivative
        g0, gh, g1 = float(G(t0)), float(G(th)), float(G(t1))
        return DampingFactors(g0 - gh, g1 - gh)
    return DampingFactors(-_gl_integral(damping.rate, t0, th), _gl_integral(damping.rate, th, t1))


def _all_damping_factors(system: PoissonSystem, grid: TimeGrid):
    out = np.empty((grid.steps, 2))
    if system.damping.kind == "none":
        out[:] = 0.0
        return out
    for n in range(grid.steps):
        f = damping_factors(system, grid, n)
        out[n] = (f.X0, f.X1)
    return out


# --------------------------------------------------------------------------
# kernels


def _sqnorm(x):
    acc = x[..., 0] * x[..., 0]
    for j in range(1, x.shape[-1]):
        acc = acc + x[..., j] * x[..., j]
    return acc


def _norm(x):
    return np.sqrt(_sqnorm(x))


def _solve_fixed_point(psi, start, row_args, cfg: SolverConfig, valid):
    """Iterate ``z <- psi(z, *row_args)`` per row until the update is small.

    A row stops once ``|z_new - z| <= tol (1 + |z|)``. Returns
    ``(z, iterations, residual, status)``; the residual is the relative
    defect ``|psi(z) - z| / (1 + |z|)`` evaluated once after convergence.
    """
    S = start.shape[0]
    z = np.array(start, dtype=float, copy=True)
    iters = np.zeros(S, dtype=np.int64)
    status = np.zeros(S, dtype=np.int8)
    active = np.arange(S)
    tol = cfg.fp_tolerance
    with np.errstate(all="ignore"):
        for it in range(1, cfg.fp_max_iterations + 1):
            if active.size == 0:
                break
            whole = active.size == S
            zc = z if whole else z[active]
            zn = psi(zc, *(row_args if whole else [a[active] for a in row_args]))
            good = valid(zn)
            bound = tol * (1.0 + _norm(zc))
            conv = good & (_sqnorm(zn - zc) <= bound * bound)
            iters[active] = it
            if good.all():
                if whole:
                    z = zn
                else:
                    z[active] = zn
            else:
                z[active[good]] = zn[good]
                bad = active[~good]
                status[bad] = OUT_OF_DOMAIN
                z[bad] = np.nan
            active = active[good & ~conv]
        status[active] = DIVERGED
        resid = np.full(S, np.nan)
        ok = np.flatnonzero(status == OK)
        if ok.size:
            whole = ok.size == S
            zo = z if whole else z[ok]
            r = psi(zo, *(row_args if whole else [a[ok] for a in row_args])) - zo
            resid[ok] = _norm(r) / (1.0 + _norm(zo))
    return z, iters, resid, status


class _Stepper:
    """Precomputed per-system state for the batched kernels."""

    def __init__(self, system: PoissonSystem, cfg: SolverConfig):
        self.system = system
        self.cfg = cfg
        rules = [H.default_rule(cfg.quadrature_nodes) for H in system.hamiltonians]
        self.dg = [
            (lambda H, r: (lambda z0, z1: discrete_gradient(H, z0, z1, r, check_domain=False)))(H, r)
            for H, r in zip(system.hamiltonians, rules)
        ]
        self.grads = [H.gradient for H in system.hamiltonians]
        self.M = system.noise_channels
        # Hamiltonians with gradient D_m y: fold tau D_0 + sum_m W_m D_m once per step.
        mats = [H.gradient_matrix for H in system.hamiltonians]
        self.diagonal = None
        self.matrices = None
        if all(D is not None for D in mats):
            if all(np.count_nonzero(D - np.diag(np.diag(D))) == 0 for D in mats):
                self.diagonal = [np.diag(D).copy() for D in mats]
            else:
                self.matrices = [np.array(D, dtype=float) for D in mats]

    def valid(self, z):
        d = z.shape[-1]
        acc = z[..., 0]
        for j in range(1, d):
            acc = acc + z[..., j]
        ok = np.isfinite(acc)
        if self.system.domain is not None:
            ok &= self.system.domain(z)
        return ok

    def _folded(self, tau, W):
        """Per-row ``tau D_0 + sum_m W_m D_m`` (diagonal ``(S, d)`` or full ``(S, d, d)``)."""
        src = self.diagonal if self.diagonal is not None else self.matrices
        extra = (None,) * src[0].ndim
        A = np.broadcast_to(tau * src[0], (W.shape[0],) + src[0].shape).copy()
        for m in range(1, self.M + 1):
            A = A + W[(slice(None), m - 1) + extra] * src[m]
        return A

    def _linear_field(self, point, A):
        g = A * point if self.diagonal is not None else _matvec(A, point)
        return self.system.apply_structure(point, g)

    def _weighted(self, fns, a, b, tau, W):
        """``tau * fns[0] + sum_m W[:, m] fns[m]`` evaluated at ``a`` (and ``b``)."""
        call = (lambda f: f(a)) if b is None else (lambda f: f(a, b))
        if self.system.single_noise_form:
            return (tau + self.system.intensity * W[:, 0])[:, None] * call(fns[0])
        g = tau * call(fns[0])
        for m in range(1, self.M + 1):
            g = g + W[:, m - 1, None] * call(fns[m])
        return g

    def conformal_exp(self, Y, W, tau, X0, X1, t_n=None, t_mid=None):
        sys = self.system
        zhat = math.exp(X0) * Y
        if self.diagonal is not None or self.matrices is not None:
            def psi(z, zh, A):
                return zh + self._linear_field(0.5 * (zh + z), A)

            args = (zhat, self._folded(tau, W))
        else:
            def psi(z, zh, w):
                g = self._weighted(self.dg, zh, z, tau, w)
                return zh + sys.apply_structure(0.5 * (zh + z), g)

            args = (zhat, W)
        z, iters, resid, status = _solve_fixed_point(psi, zhat, args, self.cfg, self.valid)
        return math.exp(-X1) * z, iters, resid, status

    def midpoint(self, Y, W, tau, X0=None, X1=None, t_n=None, t_mid=0.0):
        sys = self.system
        damp = tau * float(sys.damping.rate(t_mid))
        if self.diagonal is not None or self.matrices is not None:
            def psi(z, y, A):
                ybar = 0.5 * (y + z)
                return y + self._linear_field(ybar, A) - damp * ybar

            args = (Y, self._folded(tau, W))
        else:
            def psi(z, y, w):
                ybar = 0.5 * (y + z)
                g = self._weighted(self.grads, ybar, None, tau, w)
                return y + sys.apply_structure(ybar, g) - damp * ybar

            args = (Y, W)
        return _solve_fixed_point(psi, Y, args, self.cfg, self.valid)

    def euler_maruyama(self, Y, W, tau, X0=None, X1=None, t_n=0.0, t_mid=None):
        sys = self.system
        gamma = float(sys.damping.rate(t_n))
        S = Y.shape[0]
        with np.errstate(all="ignore"):
            out = Y + tau * (sys.field(0, Y) - gamma * Y + ito_correction(sys, Y))
            for m in range(1, self.M + 1):
                out = out + W[:, m - 1, None] * sys.field(m, Y)
        status = np.where(self.valid(out), OK, OUT_OF_DOMAIN).astype(np.int8)
        out[status != OK] = np.nan
        return out, np.zeros(S, dtype=np.int64), np.zeros(S), status


def _as_batch(y, W, d, M):
    y = np.asarray(y, dtype=float)
    W = np.asarray(W, dtype=float)
    single = y.ndim == 1
    Y = y.reshape(-1, d)
    W = W.reshape(Y.shape[0], M)
    return single, Y, W


def _public_step(kind, system, grid, n, y_n, truncated_noise, cfg):
    cfg = cfg or SolverConfig()
    if not 0 <= n < grid.steps:
        raise InvalidArgument(f"step index {n} outside 0..{grid.steps - 1}")
    single, Y, W = _as_batch(y_n, truncated_noise, system.dimension, system.noise_channels)
    if not np.all(system.in_domain(Y)):
        raise DomainError(f"state outside the domain of {system.name}")
    f = damping_factors(system, grid, n)
    stepper = _Stepper(system, cfg)
    out, iters, resid, status = getattr(stepper, kind)(
        Y, W, grid.step_size, f.X0, f.X1, t_n=grid.node(n), t_mid=grid.midpoint(n)
    )
    if np.any(status == OUT_OF_DOMAIN):
        raise DomainError(f"{kind} step {n} left the domain of {system.name}")
    if np.any(status == DIVERGED):
        rows = np.flatnonzero(status == DIVERGED)
        raise StepDiverged(
            f"fixed-point iteration did not reach {cfg.fp_tolerance:g} within "
            f"{cfg.fp_max_iterations} iterations at step {n}",
            step=n,
            rows=rows,
        )
    if single:
        return StepRecord(out[0], int(iters[0]), float(resid[0]))
    return StepRecord(out, iters, resid)


def conformal_exponential_step(system, grid, n, y_n, truncated_noise, cfg=None) -> StepRecord:
    """Advance ``y_n`` by one step of the stochastic conformal exponential integrator.

    ``truncated_noise`` holds the already truncated increments of the ``M``
    channels. Accepts a single state ``(d,)`` or a batch ``(S, d)``.
    """
    return _public_step("conformal_exp", system, grid, n, y_n, truncated_noise, cfg)


def euler_maruyama_step(system, grid, n, y_n, truncated_noise, cfg=None) -> StepRecord:
    return _public_step("euler_maruyama", system, grid, n, y_n, truncated_noise, cfg)


def midpoint_step(system, grid, n, y_n, truncated_noise, cfg=None) -> StepRecord:
    return _public_step("midpoint", system, grid, n, y_n, truncated_noise, cfg)


# --------------------------------------------------------------------------
# drivers


@dataclass
class BatchResult:
    """Outcome of integrating several samples at once.

    ``final`` holds ``y_N`` per sample (NaN where the sample failed);
    ``status`` is OK / DIVERGED / OUT_OF_DOMAIN; ``failed_step`` is the first
    failing step index or -1. ``max_norm`` is the largest Euclidean norm
    reached along each path before any failure. ``snapshots`` maps recorded
    node indices to ``(S, d)`` states when requested.
    """

    final: np.ndarray
    status: np.ndarray
    failed_step: np.ndarray
    max_fp_residual: np.ndarray
    max_fp_iterations: np.ndarray
    max_norm: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise InvalidArgument(f"unknown scheme {scheme!r}; choose from {', '.join(SCHEMES)}")


def integrate_batch(
    system: PoissonSystem,
    scheme: str,
    grid: TimeGrid,
    increments: np.ndarray,
    y0,
    cfg: Optional[SolverConfig] = None,
    record_every: Optional[int] = None,
) -> BatchResult:
    """Integrate ``S`` samples driven by raw increments of shape ``(S, M, N)``.

    Increments are truncated at ``cfg.truncation`` before stepping. Failed
    samples are frozen (NaN) and reported through ``status`` instead of
    raising. With ``record_every = r`` the states at nodes ``0, r, 2r, ...``
    are kept in ``snapshots`` with shape ``(S, N // r + 1, d)``.
    """
    _check_scheme(scheme)
    cfg = cfg or SolverConfig()
    increments = np.asarray(increments, dtype=float)
    S, M, N = increments.shape
    if N != grid.steps or M != system.noise_channels:
        raise InvalidArgument(
            f"noise shape {increments.shape} does not match grid ({grid.steps} steps) "
            f"and system ({system.noise_channels} channels)"
        )
    tau = grid.step_size
    W = truncate_increments(increments, tau, cfg.truncation) if M else increments
    Y = np.tile(np.asarray(y0, dtype=float), (S, 1))
    status = np.where(system.in_domain(Y), OK, OUT_OF_DOMAIN).astype(np.int8)
    failed_step = np.where(status == OK, -1, 0)
    max_res = np.zeros(S)
    max_it = np.zeros(S, dtype=np.int64)
    max_norm = np.where(status == OK, np.linalg.norm(Y, axis=1), np.nan)
    snaps = None
    if record_every:
        if N % record_every:
            raise InvalidArgument("record_every must divide the number of steps")
        snaps = np.empty((S, N // record_every + 1, system.dimension))
        snaps[:, 0] = Y
    factors = _all_damping_factors(system, grid)
    stepper = _Stepper(system, cfg)
    kernel = getattr(stepper, scheme)
    alive = np.flatnonzero(status == OK)
    Y[status != OK] = np.nan
    for n in range(N):
        if alive.size:
            out, iters, resid, st = kernel(
                Y[alive], W[alive, :, n], tau, factors[n, 0], factors[n, 1],
                t_n=grid.node(n), t_mid=grid.midpoint(n),
            )
            Y[alive] = out
            if (ok_rows := alive[st == OK]).size:
                max_norm[ok_rows] = np.maximum(max_norm[ok_rows], np.linalg.norm(Y[ok_rows], axis=1))
            max_it[alive] = np.maximum(max_it[alive], iters)
            ok = st == OK
            max_res[alive[ok]] = np.maximum(max_res[alive[ok]], resid[ok])
            dead = alive[~ok]
            if dead.size:
                status[dead] = st[~ok]
                failed_step[dead] = n
                Y[dead] = np.nan
                alive = alive[ok]
        if snaps is not None and (n + 1) % record_every == 0:
            snaps[:, (n + 1) // record_every] = Y
    return BatchResult(Y, status, failed_step, max_res, max_it, max_norm, snaps)


def integrate_path(
    system: PoissonSystem,
    scheme: str,
    grid: TimeGrid,
    noise: NoisePath,
    y0,
    cfg: Optional[SolverConfig] = None,
) -> Trajectory:
    """Integrate one sample path and keep every state and step diagnostic.

    The first failing step raises its error with ``.step`` set and
    ``.trajectory`` holding the states computed so far.
    """
    _check_scheme(scheme)
    cfg = cfg or SolverConfig()
    if noise.grid != grid:
        raise InvalidArgument("noise path was sampled on a different grid")
    if noise.channels != system.noise_channels:
        raise InvalidArgument(
            f"noise has {noise.channels} channels, system needs {system.noise_channels}"
        )
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (system.dimension,):
        raise InvalidArgument(f"initial value must have shape ({system.dimension},)")
    if not np.all(system.in_domain(y0)):
        raise DomainError(f"initial value outside the domain of {system.name}")
    N, tau = grid.steps, grid.step_size
    W = truncate_increments(noise.increments, tau, cfg.truncation) if noise.channels else noise.increments
    states = np.empty((N + 1, system.dimension))
    states[0] = y0
    iters = np.zeros(N, dtype=np.int64)
    resid = np.zeros(N)
    factors = _all_damping_factors(system, grid)
    kernel = getattr(_Stepper(system, cfg), scheme)
    Y = y0[None, :]
    for n in range(N):
        out, it, r, st = kernel(
            Y, W[None, :, n], tau, factors[n, 0], factors[n, 1],
            t_n=grid.node(n), t_mid=grid.midpoint(n),
        )
        if st[0] != OK:
            partial = Trajectory(grid, states[: n + 1].copy(), scheme, iters[:n].copy(), resid[:n].copy())
            if st[0] == OUT_OF_DOMAIN:
                exc = DomainError(f"{scheme} step {n} left the domain of {system.name}")
            else:
                exc = StepDiverged(
                    f"fixed-point iteration did not converge at step {n}", step=n, rows=np.array([0])
                )
            exc.step = n
            exc.trajectory = partial
            raise exc
        Y = out
        states[n + 1] = out[0]
        iters[n] = it[0]
        resid[n] = r[0]
    return Trajectory(grid, states, scheme, iters, resid)
