"""Average (mean-value) discrete gradient.

    dgH(z0, z1) = int_0^1 grad H((1 - eta) z0 + eta z1) d eta

It satisfies the chain identity ``H(z1) - H(z0) = dgH(z0, z1) . (z1 - z0)``
exactly, which is what makes the conformal integrator conserve energy-like
quantities. Quadratic Hamiltonians have an exact midpoint form, a few others
(sums of sines/cosines) have hand-written closed forms, and everything else
goes through fixed-order Gauss-Legendre quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, InvalidArgument

MODES = ("closed_form_quadratic", "closed_form_custom", "gauss_legendre")


@dataclass(frozen=True)
class GradientRule:
    mode: str = "gauss_legendre"
    quadrature_nodes: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown discrete gradient mode {self.mode!r}")
        if self.mode == "gauss_legendre" and self.quadrature_nodes < 2:
            raise InvalidArgument("Gauss-Legendre rule needs at least 2 nodes")


@dataclass(frozen=True)
class Hamiltonian:
    """A scalar function with its gradient, vectorised over leading axes.

    ``value(y)`` maps ``(..., d) -> (...)`` and ``gradient(y)`` maps
    ``(..., d) -> (..., d)``. ``hessian`` is optional and only used for Ito
    corrections. ``quadratic`` marks Hamiltonians whose gradient is affine,
    for which the discrete gradient is the gradient at the midpoint; when the
    gradient is exactly ``D @ y`` the constant ``gradient_matrix`` D may be
    given so that solvers can fold several Hamiltonians into one matrix.
    ``domain`` returns a boolean mask of admissible points; it must describe a
    convex set since only segment endpoints are checked.
    """

    value: Callable
    gradient: Callable
    hessian: Optional[Callable] = None
    quadratic: bool = False
    closed_form: Optional[Callable] = None
    domain: Optional[Callable] = None
    name: str = "H"
    gradient_matrix: Optional[np.ndarray] = None

    def __call__(self, y):
        return self.value(np.asarray(y, dtype=float))

    def default_rule(self, quadrature_nodes: int = 16) -> GradientRule:
        if self.quadratic:
            return GradientRule("closed_form_quadratic", quadrature_nodes)
        if self.closed_form is not None:
            return GradientRule("closed_form_custom", quadrature_nodes)
        return GradientRule("gauss_legendre", quadrature_nodes)

    def scaled(self, c: float, name: Optional[str] = None) -> "Hamiltonian":
        """Return ``c * H`` with every derived quantity scaled accordingly."""
        c = float(c)
        return Hamiltonian(
            value=lambda y: c * self.value(y),
            gradient=lambda y: c * self.gradient(y),
            hessian=None if self.hessian is None else (lambda y: c * self.hessian(y)),
            quadratic=self.quadratic,
            closed_form=None if self.closed_form is None else (lambda z0, z1: c * self.closed_form(z0, z1)),
            domain=self.domain,
            name=name or f"{c:g}*{self.name}",
            gradient_matrix=None if self.gradient_matrix is None else c * self.gradient_matrix,
        )


@lru_cache(maxsize=None)
def gauss_legendre_unit(nodes: int):
    """Nodes and weights of the ``nodes``-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    eta = 0.5 * (x + 1.0)
    w = 0.5 * w
    eta.setflags(write=False)
    w.setflags(write=False)
    return eta, w


def _check_segment(H: Hamiltonian, z0, z1):
    if H.domain is None:
        return
    if not (np.all(H.domain(z0)) and np.all(H.domain(z1))):
        raise DomainError(f"segment leaves the domain of {H.name}")


def quadrature_gradient(gradient: Callable, z0, z1, nodes: int = 16):
    eta, w = gauss_legendre_unit(nodes)
    diff = z1 - z0
    acc = None
    for q in range(nodes):
        term = w[q] * gradient(z0 + eta[q] * diff)
        acc = term if acc is None else acc + term
    return acc


def discrete_gradient(H: Hamiltonian, z0, z1, rule: Optional[GradientRule] = None, check_domain=True):
    """Average discrete gradient of ``H`` between ``z0`` and ``z1``.

    Inputs may carry leading batch axes; the rule is applied row-wise.
    """
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    rule = rule or H.default_rule()
    if check_domain:
        _check_segment(H, z0, z1)
    if rule.mode == "closed_form_quadratic":
        if not H.quadratic:
            raise InvalidArgument(f"{H.name} is not quadratic")
        return H.gradient(0.5 * (z0 + z1))
    if rule.mode == "closed_form_custom":
        if H.closed_form is None:
            raise InvalidArgument(f"{H.name} has no closed-form discrete gradient")
        return H.closed_form(z0, z1)
    return quadrature_gradient(H.gradient, z0, z1, rule.quadrature_nodes)


def chain_residual(H: Hamiltonian, z0, z1, g) -> float:
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    return abs(float(H(z1) - H(z0) - np.dot(g, z1 - z0)))


def sinc(x):
    """``sin(x) / x`` with the removable singularity filled in."""
    return np.sinc(np.asarray(x) / np.pi)
