"""Time grids, Brownian increments, truncation and dyadic coarsening.

Increments for one Monte Carlo sample are drawn from a Philox stream keyed by
``(seed, sample_index, channel)``, so any sample can be regenerated on its own
and the ensemble does not depend on evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    final_time: float
    steps: int

    def __post_init__(self):
        if not (self.final_time > 0) or not math.isfinite(self.final_time):
            raise InvalidArgument(f"final time must be positive, got {self.final_time!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument(f"number of steps must be a positive integer, got {self.steps!r}")

    @property
    def step_size(self) -> float:
        return self.final_time / self.steps

    @property
    def nodes(self) -> np.ndarray:
        # t_n = n * tau, computed directly (no accumulation) and pinned at the end.
        t = np.arange(self.steps + 1) * self.step_size
        t[-1] = self.final_time
        return t

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.steps) + 0.5) * self.step_size

    def node(self, n: int) -> float:
        return self.final_time if n == self.steps else n * self.step_size

    def midpoint(self, n: int) -> float:
        return (n + 0.5) * self.step_size


def make_time_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), N)


@dataclass(frozen=True)
class TruncationLevel:
    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidArgument(f"truncation level must be an integer >= 1, got {self.k!r}")

    def threshold(self, tau: float) -> float:
        """Clamp level ``sqrt(2 k |ln tau|)`` for normalised increments."""
        if not (0 < tau < 1):
            raise InvalidArgument(f"truncation needs 0 < tau < 1, got {tau!r}")
        return math.sqrt(2 * self.k * abs(math.log(tau)))


@dataclass(frozen=True, eq=False)
class NoisePath:
    grid: TimeGrid
    increments: np.ndarray = field(repr=False)
    seed: int = 0
    sample_index: int = 0

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[1] != self.grid.steps:
            raise InvalidArgument(
                f"increments must have shape (M, {self.grid.steps}), got {inc.shape}"
            )
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def channels(self) -> int:
        return self.increments.shape[0]

    def __eq__(self, other):
        if not isinstance(other, NoisePath):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.seed == other.seed
            and self.sample_index == other.sample_index
            and np.array_equal(self.increments, other.increments)
        )


def _channel_generator(seed: int, sample_index: int, channel: int) -> np.random.Generator:
    key = np.random.SeedSequence(int(seed) & _SEED_MASK, spawn_key=(int(sample_index), int(channel)))
    return np.random.Generator(np.random.Philox(key))


def sample_noise(grid: TimeGrid, M: int, seed: int, sample_index: int) -> NoisePath:
    """Draw an ``M x N`` matrix of independent N(0, tau) increments."""
    if M < 0:
        raise InvalidArgument(f"number of channels must be non-negative, got {M}")
    sd = math.sqrt(grid.step_size)
    rows = np.empty((M, grid.steps))
    for m in range(M):
        rows[m] = _channel_generator(seed, sample_index, m).standard_normal(grid.steps) * sd
    return NoisePath(grid, rows, seed=seed, sample_index=sample_index)


def sample_noise_batch(grid: TimeGrid, M: int, seed: int, sample_indices) -> np.ndarray:
    """Stack the increments of several samples into an ``(S, M, N)`` array.

    Row ``s`` equals ``sample_noise(grid, M, seed, sample_indices[s]).increments``.
    """
    sample_indices = list(sample_indices)
    out = np.empty((len(sample_indices), M, grid.steps))
    sd = math.sqrt(grid.step_size)
    for s, idx in enumerate(sample_indices):
        for m in range(M):
            out[s, m] = _channel_generator(seed, idx, m).standard_normal(grid.steps) * sd
    return out


def truncate_increments(dw, tau: float, level: TruncationLevel):
    """Vectorised truncation: clamp each increment to ``[-sqrt(tau) A, sqrt(tau) A]``.

    Clamping keeps untouched entries bit-identical and preserves sign, which
    is the same map as ``sqrt(tau) * chi(dw / sqrt(tau))``.
    """
    A = level.threshold(tau)
    bound = math.sqrt(tau) * A
    return np.clip(dw, -bound, bound)


def truncate_increment(dw: float, tau: float, level: TruncationLevel) -> float:
    return float(truncate_increments(float(dw), tau, level))


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum blocks of ``factor`` consecutive increments along the last axis.

    The power-of-two part of ``factor`` is reduced by repeated pairwise
    halving and any odd remainder left to right. Nested dyadic coarsening is
    therefore bit-identical to a single coarsening by the product factor.
    """
    factor = int(factor)
    n = increments.shape[-1]
    if factor < 1 or n % factor:
        raise InvalidArgument(f"factor {factor} does not divide {n} steps")
    out = np.array(increments, dtype=float, copy=True)
    while factor % 2 == 0:
        out = out[..., 0::2] + out[..., 1::2]
        factor //= 2
    if factor > 1:
        blocks = out.reshape(out.shape[:-1] + (out.shape[-1] // factor, factor))
        acc = blocks[..., 0].copy()
        for j in range(1, factor):
            acc += blocks[..., j]
        out = acc
    return out


def coarsen(path: NoisePath, factor: int) -> NoisePath:
    increments = coarsen_increments(path.increments, factor)
    grid = make_time_grid(path.grid.final_time, increments.shape[-1])
    return NoisePath(grid, increments, seed=path.seed, sample_index=path.sample_index)


@dataclass(frozen=True)
class TruncationDefect:
    """Monte Carlo estimates of how much truncation removes from ``dW``.

    ``rms`` estimates ``sqrt(E[(dW - What)^2])`` and ``second_moment_defect``
    estimates ``E[dW^2] - E[What^2]``; ``bound`` is ``(1 + A) tau^(k+1)``.
    """

    tau: float
    k: int
    samples: int
    rms: float
    rms_stderr: float
    second_moment_defect: float
    defect_stderr: float
    bound: float


def truncation_defect(tau: float, level: TruncationLevel, samples: int, seed: int = 0) -> TruncationDefect:
    """Estimate the truncation defect by sampling the clamped tail exactly.

    Only increments with ``|Z| > A`` (``Z = dW / sqrt(tau)``) contribute, and
    for small ``tau`` they are far too rare for plain sampling. The draws are
    taken from the law of ``|Z|`` conditioned on ``|Z| > A`` (inverse survival
    function) and weighted by the exact tail mass ``P(|Z| > A)``, which keeps
    the estimator unbiased.
    """
    from scipy.stats import norm

    if samples < 2:
        raise InvalidArgument("need at least two samples")
    A = level.threshold(tau)
    half_tail = float(norm.sf(A))
    u = _channel_generator(seed, 0, 0).random(samples)
    z = norm.isf(u * half_tail)  # |Z| given |Z| > A
    mass = 2.0 * half_tail
    sq_gap = (z - A) ** 2
    sq_cut = z * z - A * A
    ms, ms_se = mass * sq_gap.mean(), mass * sq_gap.std(ddof=1) / math.sqrt(samples)
    defect, defect_se = mass * sq_cut.mean(), mass * sq_cut.std(ddof=1) / math.sqrt(samples)
    rms = math.sqrt(tau * ms)
    return TruncationDefect(
        tau=tau,
        k=level.k,
        samples=samples,
        rms=rms,
        rms_stderr=tau * ms_se / (2.0 * rms) if rms > 0 else 0.0,
        second_moment_defect=tau * defect,
        defect_stderr=tau * defect_se,
        bound=(1.0 + A) * tau ** (level.k + 1),
    )
