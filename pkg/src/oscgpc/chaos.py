"""Orthonormal polynomial chaos bases, Gauss quadrature, and Galerkin assembly.

Supports the two classical pairs (Legendre / uniform on [-1,1] and
probabilists' Hermite / standard Gaussian), both normalized so that the
density integrates to one and ``<psi_j, psi_l> = delta_jl``.  All projection
vectors, matrices and triple tensors consumed by the solvers are assembled
here by Gauss quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NonlinearEvaluationError, SingularWeightError

_FAMILIES = ("legendre", "hermite")
_ALIASES = {
    "legendre": "legendre",
    "legendre-uniform": "legendre",
    "uniform": "legendre",
    "hermite": "hermite",
    "hermite-gaussian": "hermite",
    "gaussian": "hermite",
}


def _recurrence(family: str, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Three-term recurrence coefficients (alpha_k, beta_k) for the
    orthonormal family: beta_{k+1} psi_{k+1} = (z - alpha_k) psi_k - beta_k psi_{k-1}.

    Returns alpha[0..n-1] and beta[0..n] with beta[0] unused.
    """
    k = np.arange(1, n + 1, dtype=float)
    alpha = np.zeros(n)
    if family == "legendre":
        beta = k / np.sqrt(4.0 * k * k - 1.0)
    else:  # hermite, standard normal weight
        beta = np.sqrt(k)
    return alpha, np.concatenate(([0.0], beta))


@dataclass(frozen=True)
class ChaosBasis:
    """Orthonormal polynomial basis of total degree <= P in n random variables.

    Only n = 1 is constructible; the multi-index bookkeeping is kept so the
    data model matches the general definition K = C(n+P, P).
    """

    family: str
    max_degree: int
    n_vars: int = 1
    multi_indices: tuple = field(default=(), repr=False)

    @property
    def dim(self) -> int:
        return self.max_degree + 1

    def eval_all(self, z) -> np.ndarray:
        """Table psi_j(z) for j = 1..K, shape z.shape + (K,)."""
        z = np.asarray(z, dtype=float)
        K = self.dim
        out = np.empty(z.shape + (K,))
        out[..., 0] = 1.0
        if K > 1:
            alpha, beta = _recurrence(self.family, K)
            out[..., 1] = (z - alpha[0]) / beta[1]
            for j in range(2, K):
                out[..., j] = (
                    (z - alpha[j - 1]) * out[..., j - 1] - beta[j - 1] * out[..., j - 2]
                ) / beta[j]
        return out


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss rule with weights absorbing the probability density."""

    nodes: np.ndarray
    weights: np.ndarray
    basis: ChaosBasis = field(repr=False, default=None)
    # psi table at the nodes, shape (n_g, K); cached because every Galerkin
    # assembly and nonlinear projection reuses it
    psi: np.ndarray = field(repr=False, default=None)

    @property
    def n_points(self) -> int:
        return len(self.nodes)


def build_basis(family: str, max_degree: int, n_vars: int = 1) -> ChaosBasis:
    """Construct the orthonormal basis for the given family and degree."""
    key = _ALIASES.get(str(family).lower())
    if key is None:
        raise ConfigurationError(
            f"unsupported basis family {family!r}; expected one of {_FAMILIES}"
        )
    if n_vars != 1:
        raise ConfigurationError(
            "only one random dimension is implemented (n_vars = 1); "
            f"got n_vars = {n_vars}"
        )
    if max_degree < 0:
        raise ConfigurationError(f"max_degree must be >= 0, got {max_degree}")
    indices = tuple((j,) for j in range(max_degree + 1))
    return ChaosBasis(family=key, max_degree=max_degree, multi_indices=indices)


def gauss_rule(basis: ChaosBasis, n_g: int) -> QuadratureRule:
    """Gauss rule of the basis family: nodes are the roots of the degree-n_g
    orthogonal polynomial (Golub-Welsch on the Jacobi matrix)."""
    if n_g < 1:
        raise ConfigurationError(f"quadrature size must be >= 1, got {n_g}")
    alpha, beta = _recurrence(basis.family, n_g)
    if n_g == 1:
        nodes = np.array([alpha[0]])
        weights = np.array([1.0])
    else:
        jac = np.diag(alpha) + np.diag(beta[1:n_g], 1) + np.diag(beta[1:n_g], -1)
        nodes, vecs = np.linalg.eigh(jac)
        weights = vecs[0] ** 2  # first-component squared; total mass is one
    return QuadratureRule(nodes=nodes, weights=weights, basis=basis,
                          psi=basis.eval_all(nodes))


@dataclass(frozen=True)
class GalerkinOperator:
    """Assembled projection data: a K-vector, K x K matrix, or K x K x K
    tensor, optionally carrying leading grid axes."""

    kind: str  # "vector" | "matrix" | "tensor"
    values: np.ndarray


def _weight_values(weight, rule: QuadratureRule, what: str) -> np.ndarray:
    vals = np.asarray(weight(rule.nodes) if callable(weight) else weight, dtype=float)
    if vals.shape[-1] != rule.n_points:
        raise ValueError(
            f"{what}: last axis must match the quadrature size {rule.n_points}, "
            f"got shape {vals.shape}"
        )
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))
        grid_pt = tuple(bad[0][:-1])
        raise SingularWeightError(
            f"{what}: weight is non-finite at grid point {grid_pt}, "
            f"quadrature node {bad[0][-1]}"
        )
    return vals


def assemble_weighted_matrix(basis: ChaosBasis, rule: QuadratureRule, weight) -> GalerkinOperator:
    """M_sj = sum_l w(z_l) psi_s(z_l) psi_j(z_l) omega_l, per grid point.

    ``weight`` is a callable of z or an array whose last axis runs over the
    quadrature nodes; leading axes are grid points.
    """
    vals = _weight_values(weight, rule, "assemble_weighted_matrix")
    m = np.einsum("...q,qs,qj,q->...sj", vals, rule.psi, rule.psi, rule.weights,
                  optimize=True)
    return GalerkinOperator(kind="matrix", values=m)


def assemble_triple_tensor(basis: ChaosBasis, rule: QuadratureRule, weight) -> GalerkinOperator:
    """D_lmk = sum w(z) psi_l psi_m psi_k omega, fully symmetric in (l, m, k)."""
    vals = _weight_values(weight, rule, "assemble_triple_tensor")
    d = np.einsum("...q,ql,qm,qk,q->...lmk", vals, rule.psi, rule.psi, rule.psi,
                  rule.weights, optimize=True)
    return GalerkinOperator(kind="tensor", values=d)


def project_function(basis: ChaosBasis, rule: QuadratureRule, f) -> GalerkinOperator:
    """Projection vector with components <f, psi_j>, per grid point."""
    vals = np.asarray(f(rule.nodes) if callable(f) else f)
    if vals.shape[-1] != rule.n_points:
        raise ValueError(
            f"project_function: last axis must match the quadrature size "
            f"{rule.n_points}, got shape {vals.shape}"
        )
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))
        raise SingularWeightError(
            f"project_function: non-finite value at grid point "
            f"{tuple(bad[0][:-1])}, quadrature node {bad[0][-1]}"
        )
    v = np.einsum("...q,qj,q->...j", vals, rule.psi, rule.weights, optimize=True)
    return GalerkinOperator(kind="vector", values=v)


def galerkin_nonlinear(basis: ChaosBasis, rule: QuadratureRule, r, coeffs,
                       weight=None) -> np.ndarray:
    """Project r(u) back onto the basis, u given by its coefficients.

    Evaluates u at the quadrature nodes, applies ``r`` pointwise and projects,
    optionally against an extra weight (e.g. 1/a).  ``coeffs`` may carry
    leading grid axes; the chaos axis is the last one.
    """
    coeffs = np.asarray(coeffs)
    u_nodes = np.einsum("...k,qk->...q", coeffs, rule.psi)
    r_nodes = np.asarray(r(u_nodes))
    if not np.all(np.isfinite(r_nodes)):
        bad = np.argwhere(~np.isfinite(r_nodes))
        raise NonlinearEvaluationError(
            f"nonlinearity returned a non-finite value at quadrature node "
            f"{bad[0][-1]} (grid point {tuple(bad[0][:-1])})"
        )
    if weight is not None:
        r_nodes = r_nodes * _weight_values(weight, rule, "galerkin_nonlinear")
    return np.einsum("...q,qj,q->...j", r_nodes, rule.psi, rule.weights,
                     optimize=True)


def moments_from_coeffs(coeffs, axis: int = -1):
    """(mean, sd) of the expansion: mean is the first coefficient, sd the
    l2 norm of the remaining ones."""
    coeffs = np.asarray(coeffs)
    coeffs = np.moveaxis(coeffs, axis, -1)
    mean = coeffs[..., 0]
    sd = np.sqrt(np.sum(np.abs(coeffs[..., 1:]) ** 2, axis=-1))
    return mean, sd


def default_quadrature_size(max_degree: int, requested: int | None = None) -> int:
    """Quadrature size used by the solvers: at least 2P + 2 so that matrices
    with polynomial weights of degree <= 2 are integrated exactly."""
    floor = 2 * max_degree + 2
    return floor if requested is None else max(floor, int(requested))
