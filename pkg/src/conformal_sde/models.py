"""Linearly damped stochastic Poisson systems.

A system is

    dy = (B(y) grad H_0(y) - gamma(t) y) dt + sum_m B(y) grad H_m(y) o dW_m

with a skew-symmetric structure matrix ``B`` and Stratonovich noise. All
callables here are vectorised: states have shape ``(..., d)``, structure
matrices ``(..., d, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .discrete_gradient import Hamiltonian, sinc
from .errors import ConfigError, DomainError, InvalidArgument


def matvec(A, x):
    """Row-wise ``A @ x`` over leading axes with a fixed summation order."""
    out = A[..., :, 0] * x[..., None, 0]
    for j in range(1, x.shape[-1]):
        out = out + A[..., :, j] * x[..., None, j]
    return out


# --------------------------------------------------------------------------
# damping


@dataclass(frozen=True)
class Damping:
    """Time-dependent damping rate gamma(t) with optional antiderivative."""

    kind: str = "none"
    amplitude: float = 1.0
    frequency: float = 1.0
    rate_fn: Optional[Callable] = field(default=None, compare=False, repr=False)
    antiderivative_fn: Optional[Callable] = field(default=None, compare=False, repr=False)

    KINDS = ("none", "constant", "cosine", "sine", "linear", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidArgument(f"unknown damping kind {self.kind!r}")
        if self.kind in ("cosine", "sine") and self.frequency == 0:
            raise InvalidArgument("oscillating damping needs a non-zero frequency")
        if self.kind == "custom" and self.rate_fn is None:
            raise InvalidArgument("custom damping needs a rate function")

    def rate(self, t):
        a, w = self.amplitude, self.frequency
        if self.kind == "none":
            return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
        if self.kind == "constant":
            return a + 0.0 * np.asarray(t, dtype=float) if np.ndim(t) else a
        if self.kind == "cosine":
            return a * np.cos(w * np.asarray(t, dtype=float))
        if self.kind == "sine":
            return a * np.sin(w * np.asarray(t, dtype=float))
        if self.kind == "linear":
            return a * np.asarray(t, dtype=float)
        return self.rate_fn(t)

    @property
    def has_antiderivative(self) -> bool:
        return self.kind != "custom" or self.antiderivative_fn is not None

    def antiderivative(self, t):
        """Gamma(t) with Gamma' = gamma; defined up to a constant."""
        a, w = self.amplitude, self.frequency
        t = np.asarray(t, dtype=float)
        if self.kind == "none":
            return 0.0 * t
        if self.kind == "constant":
            return a * t
        if self.kind == "cosine":
            return a * np.sin(w * t) / w
        if self.kind == "sine":
            return -a * np.cos(w * t) / w
        if self.kind == "linear":
            return 0.5 * a * t * t
        if self.antiderivative_fn is None:
            raise InvalidArgument("custom damping has no antiderivative")
        return self.antiderivative_fn(t)

    def integral(self, t0: float, t1: float) -> float:
        """``int_{t0}^{t1} gamma(s) ds``."""
        if self.has_antiderivative:
            return float(self.antiderivative(t1) - self.antiderivative(t0))
        from scipy.integrate import quad

        return float(quad(lambda s: float(self.rate(s)), t0, t1, epsabs=1e-14, epsrel=1e-13)[0])

    def abs_integral(self, t0: float, t1: float) -> float:
        """``int_{t0}^{t1} |gamma(s)| ds``, used for a-priori bounds."""
        from scipy.integrate import quad

        if self.kind == "none":
            return 0.0
        if self.kind in ("constant",):
            return abs(self.amplitude) * (t1 - t0)
        points = None
        if self.kind in ("cosine", "sine"):
            period = math.pi / abs(self.frequency)
            k0, k1 = math.floor(t0 / period) - 1, math.ceil(t1 / period) + 1
            offset = 0.5 * period if self.kind == "cosine" else 0.0
            points = [k * period + offset for k in range(k0, k1 + 1) if t0 < k * period + offset < t1]
        val, _ = quad(lambda s: abs(float(self.rate(s))), t0, t1, points=points or None,
                      epsabs=1e-14, epsrel=1e-12, limit=200)
        return float(val)


# --------------------------------------------------------------------------
# invariant metadata


@dataclass(frozen=True)
class InvariantSpec:
    kind: str  # "casimir" or "hamiltonian"
    value: Callable
    gradient: Callable
    homogeneity_degree: Optional[float] = None
    quadratic_matrix: Optional[np.ndarray] = None
    positivity_floor: Optional[float] = None
    name: str = "C"

    def __post_init__(self):
        if self.kind not in ("casimir", "hamiltonian"):
            raise InvalidArgument(f"unknown invariant kind {self.kind!r}")

    def __call__(self, y):
        return self.value(np.asarray(y, dtype=float))


def quadratic_invariant(D, kind="casimir", name="C", floor=None) -> InvariantSpec:
    D = np.array(D, dtype=float)
    D.setflags(write=False)
    if floor is None:
        floor = 0.5 * float(np.linalg.eigvalsh(D).min())
    return InvariantSpec(
        kind=kind,
        value=lambda y: 0.5 * np.sum(y * matvec(D, y), axis=-1),
        gradient=lambda y: matvec(np.broadcast_to(D, y.shape[:-1] + D.shape), y),
        homogeneity_degree=2.0,
        quadratic_matrix=D,
        positivity_floor=floor,
        name=name,
    )


# --------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class PoissonSystem:
    """A linearly damped stochastic Poisson system.

    ``hamiltonians[0]`` is the drift Hamiltonian, ``hamiltonians[m]`` drives
    noise channel ``m``. ``structure_derivative(y)`` returns
    ``dB[..., i, j, k] = d B_ij / d y_k`` and, together with the Hamiltonian
    Hessians, gives analytic diffusion Jacobians for the Ito correction.
    """

    name: str
    dimension: int
    structure_matrix: Callable
    hamiltonians: Sequence[Hamiltonian]
    damping: Damping = Damping()
    invariants: Sequence[InvariantSpec] = ()
    structure_derivative: Optional[Callable] = None
    jacobian_of_diffusion: Optional[Sequence[Callable]] = None
    single_noise_form: bool = False
    intensity: Optional[float] = None
    domain: Optional[Callable] = None
    structure_action: Optional[Callable] = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidArgument("dimension must be positive")
        if len(self.hamiltonians) < 1:
            raise InvalidArgument("at least the drift Hamiltonian is required")
        if self.single_noise_form and (self.noise_channels != 1 or self.intensity is None):
            raise InvalidArgument("single-noise form needs exactly one channel and an intensity")
        if self.jacobian_of_diffusion is None and self.structure_derivative is not None:
            if all(H.hessian is not None for H in self.hamiltonians[1:]):
                jacs = tuple(
                    _poisson_jacobian(self.structure_matrix, self.structure_derivative, H)
                    for H in self.hamiltonians[1:]
                )
                object.__setattr__(self, "jacobian_of_diffusion", jacs)

    @property
    def noise_channels(self) -> int:
        return len(self.hamiltonians) - 1

    @property
    def gradients(self):
        return tuple(H.gradient for H in self.hamiltonians)

    @property
    def damping_rate(self):
        return self.damping.rate

    @property
    def damping_antiderivative(self):
        return self.damping.antiderivative if self.damping.has_antiderivative else None

    def in_domain(self, y):
        """Boolean mask over leading axes: finite and inside the model domain."""
        y = np.asarray(y, dtype=float)
        ok = np.all(np.isfinite(y), axis=-1)
        if self.domain is not None:
            with np.errstate(invalid="ignore"):
                ok = ok & self.domain(y)
        return ok

    def check_domain(self, y):
        if not np.all(self.in_domain(y)):
            raise DomainError(f"state outside the domain of {self.name}")

    def apply_structure(self, y, v):
        """``B(y) v`` row-wise."""
        if self.structure_action is not None:
            return self.structure_action(y, v)
        return matvec(self.structure_matrix(y), v)

    def field(self, m: int, y):
        """``f_m(y) = B(y) grad H_m(y)`` without domain checks."""
        return self.apply_structure(y, self.hamiltonians[m].gradient(y))


def _poisson_jacobian(B: Callable, dB: Callable, H: Hamiltonian) -> Callable:
    """Jacobian of ``y -> B(y) grad H(y)``."""

    def jac(y):
        g = H.gradient(y)
        # sum_j dB_ij/dy_k g_j
        first = dB(y)[..., :, 0, :] * g[..., None, 0, None]
        for j in range(1, g.shape[-1]):
            first = first + dB(y)[..., :, j, :] * g[..., None, j, None]
        Bm = B(y)
        Hs = H.hessian(y)
        second = Bm[..., :, 0, None] * Hs[..., None, 0, :]
        for j in range(1, g.shape[-1]):
            second = second + Bm[..., :, j, None] * Hs[..., None, j, :]
        return first + second

    return jac


def _fd_jacobian(fn: Callable, y):
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    h = np.cbrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(y, axis=-1))
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        step = h[..., None] * e
        cols.append((fn(y + step) - fn(y - step)) / (2.0 * h[..., None]))
    return np.stack(cols, axis=-1)


def drift(system: PoissonSystem, y):
    """Conservative drift ``B(y) grad H_0(y)`` (damping excluded)."""
    y = np.asarray(y, dtype=float)
    system.check_domain(y)
    return system.field(0, y)


def diffusion(system: PoissonSystem, m: int, y):
    """Noise column ``B(y) grad H_m(y)`` for channel ``1 <= m <= M``."""
    if not 1 <= m <= system.noise_channels:
        raise InvalidArgument(f"channel {m} out of range 1..{system.noise_channels}")
    y = np.asarray(y, dtype=float)
    system.check_domain(y)
    return system.field(m, y)


def diffusion_jacobian(system: PoissonSystem, m: int, y):
    if system.jacobian_of_diffusion is not None:
        return system.jacobian_of_diffusion[m - 1](y)
    return _fd_jacobian(lambda z: system.field(m, z), y)


def ito_correction(system: PoissonSystem, y):
    """``1/2 sum_m f_m'(y) f_m(y)``."""
    y = np.asarray(y, dtype=float)
    corr = np.zeros_like(y)
    for m in range(1, system.noise_channels + 1):
        corr = corr + matvec(diffusion_jacobian(system, m, y), system.field(m, y))
    return 0.5 * corr


def ito_corrected_drift(system: PoissonSystem, t: float, y):
    """Ito drift ``f_0(y) - gamma(t) y + 1/2 sum_m f_m'(y) f_m(y)``."""
    y = np.asarray(y, dtype=float)
    system.check_domain(y)
    return system.field(0, y) - system.damping.rate(t) * y + ito_correction(system, y)


@dataclass(frozen=True)
class ModelState:
    time: float
    state: np.ndarray

    def __post_init__(self):
        s = np.array(self.state, dtype=float)
        if not (math.isfinite(self.time) and np.all(np.isfinite(s))):
            raise InvalidArgument("model state must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "state", s)


# --------------------------------------------------------------------------
# concrete models


def _const(M):
    M = np.array(M, dtype=float)
    M.setflags(write=False)
    return lambda y: np.broadcast_to(M, y.shape[:-1] + M.shape)


def _pendulum(params, damping):
    c = float(params["c"])
    J = np.array([[0.0, -1.0], [1.0, 0.0]])

    def value(y):
        return 0.5 * y[..., 0] ** 2 - np.cos(y[..., 1])

    def gradient(y):
        return np.stack([y[..., 0], np.sin(y[..., 1])], axis=-1)

    def hessian(y):
        out = np.zeros(y.shape + (2,))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.cos(y[..., 1])
        return out

    def closed_form(z0, z1):
        # int_0^1 sin(a + eta (b - a)) = sin(mid) sinc(half-width)
        a, b = z0[..., 1], z1[..., 1]
        second = np.sin(0.5 * (a + b)) * sinc(0.5 * (b - a))
        return np.stack([0.5 * (z0[..., 0] + z1[..., 0]), second], axis=-1)

    H = Hamiltonian(value, gradient, hessian, closed_form=closed_form, name="H")
    return PoissonSystem(
        name="pendulum",
        dimension=2,
        structure_matrix=_const(J),
        structure_derivative=_const(np.zeros((2, 2, 2))),
        hamiltonians=(H, H.scaled(c, "H_1")),
        damping=damping,
        single_noise_form=True,
        intensity=c,
        params={"c": c},
    )


_CROSS = np.zeros((3, 3, 3))
# B(y) v = y x v, so B_ij = sum_k eps_{ikj} y_k and dB_ij/dy_k = eps_{ikj}
for _i, _j, _k, _s in [(0, 1, 2, 1), (1, 2, 0, 1), (2, 0, 1, 1), (0, 2, 1, -1), (2, 1, 0, -1), (1, 0, 2, -1)]:
    _CROSS[_i, _k, _j] = _s
_CROSS.setflags(write=False)


def _cross_matrix(y):
    out = np.zeros(y.shape + (3,))
    out[..., 0, 1] = -y[..., 2]
    out[..., 0, 2] = y[..., 1]
    out[..., 1, 0] = y[..., 2]
    out[..., 1, 2] = -y[..., 0]
    out[..., 2, 0] = -y[..., 1]
    out[..., 2, 1] = y[..., 0]
    return out


def _cross(y, v):
    return np.stack(
        [
            y[..., 1] * v[..., 2] - y[..., 2] * v[..., 1],
            y[..., 2] * v[..., 0] - y[..., 0] * v[..., 2],
            y[..., 0] * v[..., 1] - y[..., 1] * v[..., 0],
        ],
        axis=-1,
    )


def _diagonal_quadratic(weights, name):
    w = np.array(weights, dtype=float)
    w.setflags(write=False)
    return Hamiltonian(
        value=lambda y: 0.5 * np.sum(w * y * y, axis=-1),
        gradient=lambda y: w * y,
        hessian=lambda y: np.broadcast_to(np.diag(w), y.shape + (y.shape[-1],)),
        quadratic=True,
        name=name,
        gradient_matrix=np.diag(w),
    )


def _vector_param(params, key, n):
    v = params[key]
    v = [float(x) for x in (v if np.ndim(v) else [v])]
    if len(v) != n:
        raise ConfigError(f"parameter {key!r} needs {n} values, got {len(v)}")
    return v


def _rigid_body(params, damping):
    inertia = _vector_param(params, "I", 3)
    inertia_hat = _vector_param(params, "Ihat", 3)
    if min(inertia) <= 0 or min(inertia_hat) <= 0:
        raise ConfigError("moments of inertia must be positive")
    channels = params.get("channels", (1, 2, 3))
    channels = [int(c) for c in (channels if np.ndim(channels) else [channels])]
    if not channels or any(c not in (1, 2, 3) for c in channels) or len(set(channels)) != len(channels):
        raise ConfigError(f"rigid body channels must be distinct values in 1..3, got {channels}")
    H0 = _diagonal_quadratic([1.0 / I for I in inertia], "H_0")
    noise = []
    for m in channels:
        w = [0.0, 0.0, 0.0]
        w[m - 1] = 1.0 / inertia_hat[m - 1]
        noise.append(_diagonal_quadratic(w, f"H_{m}"))
    dB = np.array(_CROSS)
    return PoissonSystem(
        name="rigid_body",
        dimension=3,
        structure_matrix=_cross_matrix,
        structure_action=_cross,
        structure_derivative=_const(dB),
        hamiltonians=(H0, *noise),
        damping=damping,
        invariants=(quadratic_invariant(np.eye(3), name="casimir", floor=0.5),),
        params={"I": inertia, "Ihat": inertia_hat, "channels": channels},
    )


def _lotka_volterra(params, damping):
    a, b, c = float(params["a"]), float(params["b"]), float(params["c"])
    sigma = float(params.get("noise_intensity", 1.0))
    d = a * b * c
    K = np.array([[0.0, a * c, c], [-a * c, 0.0, -d], [-c, d, 0.0]])
    p = np.array([a * b, -b, 1.0])
    q = np.array([1.0 - a * b, b + 1.0, 0.0])

    def positive(y):
        return np.all(y > 0, axis=-1)

    def scale(y):
        return y[..., 0] ** q[0] * y[..., 1] ** q[1]

    def structure(y):
        return scale(y)[..., None, None] * K

    def structure_derivative(y):
        ds = scale(y)[..., None] * np.stack([q[0] / y[..., 0], q[1] / y[..., 1], np.zeros(y.shape[:-1])], axis=-1)
        return K[..., None] * ds[..., None, None, :]

    def value(y):
        return y[..., 0] ** p[0] * y[..., 1] ** p[1] * y[..., 2]

    def gradient(y):
        m12 = y[..., 0] ** p[0] * y[..., 1] ** p[1]
        h = m12 * y[..., 2]
        return np.stack([p[0] * h / y[..., 0], p[1] * h / y[..., 1], m12], axis=-1)

    def hessian(y):
        h = value(y)
        inv = 1.0 / y
        out = h[..., None, None] * (np.outer(p, p) - np.diag(p)) * inv[..., :, None] * inv[..., None, :]
        return out

    H = Hamiltonian(value, gradient, hessian, domain=positive, name="H")
    degree = a * b - b + 1.0
    invariants = ()
    if degree > 0:
        invariants = (
            InvariantSpec("hamiltonian", value, gradient, homogeneity_degree=degree,
                          positivity_floor=0.0, name="hamiltonian"),
        )
    return PoissonSystem(
        name="lotka_volterra",
        dimension=3,
        structure_matrix=structure,
        structure_derivative=structure_derivative,
        hamiltonians=(H, H.scaled(sigma, "H_1")),
        damping=damping,
        invariants=invariants,
        single_noise_form=True,
        intensity=sigma,
        domain=positive,
        params={"a": a, "b": b, "c": c, "noise_intensity": sigma},
    )


def _maxwell_bloch(params, damping):
    def structure(y):
        out = np.zeros(y.shape + (3,))
        out[..., 0, 1] = -y[..., 2]
        out[..., 0, 2] = y[..., 1]
        out[..., 1, 0] = y[..., 2]
        out[..., 2, 0] = -y[..., 1]
        return out

    dB = np.zeros((3, 3, 3))
    dB[0, 1, 2] = -1.0
    dB[0, 2, 1] = 1.0
    dB[1, 0, 2] = 1.0
    dB[2, 0, 1] = -1.0

    def h0(y):
        return 0.5 * y[..., 0] ** 2 + y[..., 2]

    def g0(y):
        return np.stack([y[..., 0], np.zeros(y.shape[:-1]), np.ones(y.shape[:-1])], axis=-1)

    def hess0(y):
        return np.broadcast_to(np.diag([1.0, 0.0, 0.0]), y.shape + (3,))

    def h1(y):
        return y[..., 2] + 0.0

    def g1(y):
        out = np.zeros(y.shape)
        out[..., 2] = 1.0
        return out

    def hess1(y):
        return np.zeros(y.shape + (3,))

    return PoissonSystem(
        name="maxwell_bloch",
        dimension=3,
        structure_matrix=structure,
        structure_derivative=_const(dB),
        hamiltonians=(
            Hamiltonian(h0, g0, hess0, quadratic=True, name="H_0"),
            Hamiltonian(h1, g1, hess1, quadratic=True, name="H_1"),
        ),
        damping=damping,
        invariants=(quadratic_invariant(np.diag([0.0, 1.0, 1.0]), name="casimir", floor=0.0),),
        params={},
    )


def _sine_poisson(params, damping):
    c = float(params["c"])
    B = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]])

    def value(y):
        return np.sum(np.sin(y), axis=-1)

    def gradient(y):
        return np.cos(y)

    def hessian(y):
        out = np.zeros(y.shape + (3,))
        s = -np.sin(y)
        for i in range(3):
            out[..., i, i] = s[..., i]
        return out

    def closed_form(z0, z1):
        # int_0^1 cos(a + eta (b - a)) = cos(mid) sinc(half-width)
        return np.cos(0.5 * (z0 + z1)) * sinc(0.5 * (z1 - z0))

    H = Hamiltonian(value, gradient, hessian, closed_form=closed_form, name="H")
    return PoissonSystem(
        name="sine_poisson",
        dimension=3,
        structure_matrix=_const(B),
        structure_derivative=_const(np.zeros((3, 3, 3))),
        hamiltonians=(H, H.scaled(c, "H_1")),
        damping=damping,
        invariants=(quadratic_invariant(np.ones((3, 3)), name="casimir", floor=0.0),),
        single_noise_form=True,
        intensity=c,
        params={"c": c},
    )


_BUILDERS = {
    "pendulum": (_pendulum, ("c",), ()),
    "rigid_body": (_rigid_body, ("I", "Ihat"), ("channels",)),
    "lotka_volterra": (_lotka_volterra, ("a", "b", "c"), ("noise_intensity",)),
    "maxwell_bloch": (_maxwell_bloch, (), ()),
    "sine_poisson": (_sine_poisson, ("c",), ()),
}
_DAMPING_KEYS = ("damping", "damping_amplitude", "damping_frequency")

MODEL_NAMES = tuple(_BUILDERS)


def model_parameters(name: str):
    """Required and optional parameter names of a built-in model."""
    if name not in _BUILDERS:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(_BUILDERS)}")
    _, required, optional = _BUILDERS[name]
    return required, optional + _DAMPING_KEYS


def make_damping(params) -> Damping:
    kind = params.get("damping", "none")
    try:
        return Damping(
            kind=str(kind),
            amplitude=float(params.get("damping_amplitude", 1.0)),
            frequency=float(params.get("damping_frequency", 1.0)),
        )
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None


def build_model(name: str, params: Optional[dict] = None) -> PoissonSystem:
    """Build one of the built-in systems from a parameter map.

    Damping is described by ``damping`` (none, constant, cosine, sine,
    linear) with ``damping_amplitude`` and ``damping_frequency``.
    """
    params = dict(params or {})
    required, optional = model_parameters(name)
    missing = [k for k in required if k not in params]
    if missing:
        raise ConfigError(f"model {name!r} is missing parameter(s): {', '.join(missing)}")
    unknown = [k for k in params if k not in required and k not in optional]
    if unknown:
        raise ConfigError(f"model {name!r} does not take parameter(s): {', '.join(unknown)}")
    builder = _BUILDERS[name][0]
    try:
        return builder(params, make_damping(params))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad parameters for {name!r}: {exc}") from None
