"""Solvers for the 1D scalar oscillatory transport model.

The model is

    d_t u + c(x) d_x u + r(u) = i a(x, z)/eps * u,   u(0, x, z) = u_in(x, z),

with periodic boundary conditions in x, a >= 0, and one uniform or Gaussian
random variable z.  Four strategies are provided:

* ``solve_direct``         -- stochastic Galerkin on u itself (gPC-SG-D),
* ``solve_n1``             -- Galerkin on the two-scale profile V(t, x, tau, z),
* ``solve_n2``             -- Galerkin on the profile W(s, x, tau, z) driven by
                              the phase variable s, whose chaos coefficients
                              stay smooth in z uniformly in eps,
* ``solve_collocation``    -- batched deterministic runs at quadrature nodes
                              (reference driver), inner scheme direct/N1/N2.

All solvers split each step into oscillatory -> nonlinear -> transport
sub-steps, in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import chaos
from .errors import ConfigurationError, SingularWeightError
from .spectral import (
    PeriodicGrid,
    backward_euler_tau,
    fourier_derivative,
    mean_free_antiderivative,
    rk3_transport_step,
    rk4_step,
    trig_interpolate,
    upwind_transport_step,
)

_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# problem and configuration


@dataclass(frozen=True)
class ScalarProblem:
    """Coefficients of the scalar model; all callables broadcast on arrays.

    ``c(x)``, ``a(x, z)``, ``u_in(x, z)`` and optional ``r(u)`` (None means
    r == 0).  ``eps`` is the oscillation wavelength, in (0, 1].
    """

    c: object
    a: object
    u_in: object
    eps: float
    domain: tuple = (-np.pi / 2, np.pi / 2)
    r: object = None
    family: str = "legendre"

    def __post_init__(self):
        if not (0.0 < self.eps <= 1.0):
            raise ConfigurationError(f"eps must be in (0, 1], got {self.eps}")


@dataclass(frozen=True)
class ScalarConfig:
    """Numerical knobs shared by the scalar solvers."""

    k_modes: int
    n_x: int
    n_tau: int = 32
    dt: float = 1e-3
    t_final: float = 0.1
    ds: float | None = None      # N2 phase step; default dt * (mean of a)
    n_quad: int | None = None    # N_g; effective value >= 2P + 2
    n_recon: int | None = None   # N_s reconstruction nodes; default N_g
    n_colloc: int = 64           # N_c collocation nodes
    upwind: bool = False         # first-order upwind x-transport in N1

    def __post_init__(self):
        for name in ("k_modes", "n_x", "n_tau"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("dt", "t_final"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.ds is not None and self.ds <= 0:
            raise ConfigurationError("ds must be positive")
        if self.n_colloc < 1:
            raise ConfigurationError("n_colloc must be positive")

    @property
    def n_quad_eff(self) -> int:
        return chaos.default_quadrature_size(self.k_modes - 1,
                                             32 if self.n_quad is None else self.n_quad)

    @property
    def n_recon_eff(self) -> int:
        return self.n_quad_eff if self.n_recon is None else self.n_recon


def _eval_xz(fn, x, z):
    """Evaluate fn(x, z) on the tensor grid, returning shape (len(x), len(z))."""
    out = np.asarray(fn(x[:, None], z[None, :]))
    return np.broadcast_to(out, (len(x), len(z)))


def _eval_x(fn, x):
    return np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape)


def _steps(t_final: float, dt: float):
    """Number of steps and the (possibly shorter) size of the last one."""
    n = max(int(np.ceil(t_final / dt - 1e-9)), 1)
    return n, t_final - (n - 1) * dt


def _check_positive(a_nodes, what: str, floor: float = 1e-14):
    if np.min(a_nodes) < floor:
        bad = np.unravel_index(np.argmin(a_nodes), a_nodes.shape)
        raise SingularWeightError(
            f"{what} requires a strictly positive coefficient; "
            f"min value {np.min(a_nodes):.3e} at grid point {bad}"
        )


# ---------------------------------------------------------------------------
# phase equation


@dataclass
class PhaseField:
    """Chaos coefficients of the phase S with full time history."""

    t: np.ndarray                 # (n_steps + 1,)
    coeffs: np.ndarray            # (n_steps + 1, n_x, K)

    @property
    def final(self) -> np.ndarray:
        return self.coeffs[-1]

    def at_nodes(self, psi: np.ndarray, step: int = -1) -> np.ndarray:
        """Evaluate S at quadrature nodes, shape (n_x, n_nodes)."""
        return self.coeffs[step] @ psi.T


def solve_phase_scalar(problem: ScalarProblem, basis, rule, grid: PeriodicGrid,
                       dt: float, t_final: float) -> PhaseField:
    """Integrate d_t S + c d_x S = a by RK4 with spectral x-derivatives.

    S(0) = 0.  The full history is stored; only the final slice is needed by
    the scalar reconstruction but the hopping-style inversion reuses this
    layout.
    """
    c_x = _eval_x(problem.c, grid.nodes)
    a_nodes = _eval_xz(problem.a, grid.nodes, rule.nodes)
    forcing = chaos.project_function(basis, rule, a_nodes).values  # (n_x, K)

    def rhs(s):
        return forcing - c_x[:, None] * fourier_derivative(s, grid, axis=0)

    n_steps, last = _steps(t_final, dt)
    coeffs = np.zeros((n_steps + 1, grid.n, basis.dim))
    t = np.zeros(n_steps + 1)
    s = coeffs[0]
    for n in range(n_steps):
        h = dt if n < n_steps - 1 else last
        s = rk4_step(s, rhs, h)
        coeffs[n + 1] = s
        t[n + 1] = t[n] + h
    return PhaseField(t=t, coeffs=coeffs)


# ---------------------------------------------------------------------------
# well-prepared initial data


def chapman_enskog_profile(g, axis: int = -1):
    """Mean-free tau-antiderivative of the mean-free part of g.

    This is the correction kernel of the well-prepared initial data: applied
    to g(tau) = e^{-i tau} r(e^{i tau} u_in) it produces the profile whose
    tau-derivative balances the nonlinearity at t = 0.
    """
    return mean_free_antiderivative(g, axis=axis)


def _initial_profile_nodes(problem: ScalarProblem, x, z, tau):
    """V(0, x, tau, z) at quadrature nodes, shape (n_x, n_tau, n_z)."""
    u0 = np.asarray(problem.u_in(x[:, None], z[None, :]), dtype=complex)
    u0 = np.broadcast_to(u0, (len(x), len(z)))
    if problem.r is None:
        return np.repeat(u0[:, None, :], len(tau), axis=1)
    a_nodes = _eval_xz(problem.a, x, z)
    _check_positive(a_nodes, "well-prepared initial data (eps/a correction)")
    phase = np.exp(1j * tau)[None, :, None]
    g = np.conj(phase) * problem.r(phase * u0[:, None, :])
    corr = chapman_enskog_profile(g, axis=1)
    # G(0, .) is the tau = 0 grid value (the tau grid starts at 0)
    return u0[:, None, :] + (problem.eps / a_nodes[:, None, :]) * (corr[:, :1] - corr)


def prepare_initial_V(problem: ScalarProblem, basis, rule, grid: PeriodicGrid,
                      tau_grid: PeriodicGrid) -> np.ndarray:
    """Chaos coefficients of the well-prepared profile, shape (n_x, n_tau, K)."""
    v_nodes = _initial_profile_nodes(problem, grid.nodes, rule.nodes,
                                     tau_grid.nodes)
    return np.einsum("xtq,qk,q->xtk", v_nodes, rule.psi, rule.weights,
                     optimize=True)


# ---------------------------------------------------------------------------
# gPC-SG-D


@dataclass
class ScalarDirectResult:
    grid: PeriodicGrid
    basis: object
    rule: object
    coeffs: np.ndarray            # (n_x, K) complex

    @property
    def x(self):
        return self.grid.nodes


def _symmetric_expi(mats, theta: float):
    """exp(i * theta * M) for symmetric M, batched over leading axes."""
    w, q = np.linalg.eigh(mats)
    return np.einsum("...ke,...e,...je->...kj", q, np.exp(1j * theta * w), q,
                     optimize=True)


def solve_direct(problem: ScalarProblem, cfg: ScalarConfig) -> ScalarDirectResult:
    """Direct stochastic Galerkin solver with Lie splitting.

    Per step: exact oscillatory rotation exp(i A dt / eps), forward-Euler
    nonlinear step with Gauss-quadrature projection, and RK3 pseudo-spectral
    transport.
    """
    grid = PeriodicGrid(cfg.n_x, *problem.domain)
    basis = chaos.build_basis(problem.family, cfg.k_modes - 1)
    rule = chaos.gauss_rule(basis, cfg.n_quad_eff)
    c_x = _eval_x(problem.c, grid.nodes)
    a_nodes = _eval_xz(problem.a, grid.nodes, rule.nodes)
    if np.min(a_nodes) < -1e-12:
        raise SingularWeightError("oscillation coefficient a must be >= 0")
    amat = chaos.assemble_weighted_matrix(basis, rule, a_nodes).values

    u0_nodes = np.asarray(problem.u_in(grid.nodes[:, None], rule.nodes[None, :]),
                          dtype=complex)
    u0_nodes = np.broadcast_to(u0_nodes, (grid.n, rule.n_points))
    u = np.einsum("xq,qk,q->xk", u0_nodes, rule.psi, rule.weights, optimize=True)

    n_steps, last = _steps(cfg.t_final, cfg.dt)
    osc = _symmetric_expi(amat, cfg.dt / problem.eps)
    osc_last = osc if abs(last - cfg.dt) < 1e-15 else \
        _symmetric_expi(amat, last / problem.eps)

    for n in range(n_steps):
        h, rot = (cfg.dt, osc) if n < n_steps - 1 else (last, osc_last)
        u = np.einsum("xkj,xj->xk", rot, u)
        if problem.r is not None:
            u = u - h * chaos.galerkin_nonlinear(basis, rule, problem.r, u)
        u = rk3_transport_step(u, c_x[:, None], grid, h, axis=0)
    return ScalarDirectResult(grid=grid, basis=basis, rule=rule, coeffs=u)


# ---------------------------------------------------------------------------
# gPC-SG-N1


@dataclass
class ScalarN1Result:
    grid: PeriodicGrid
    tau_grid: PeriodicGrid
    basis: object
    rule: object
    profile: np.ndarray           # V, (n_x, n_tau, K) complex
    phase: PhaseField
    eps: float

    @property
    def x(self):
        return self.grid.nodes


def _tau_resolvent(amat, zeta, ratio):
    """(I + i zeta ratio A)^{-1} for every x and tau-wavenumber zeta."""
    w, q = np.linalg.eigh(amat)
    den = 1.0 + 1j * zeta[None, :, None] * ratio * w[:, None, :]
    return np.einsum("xke,xze,xje->xzkj", q, 1.0 / den, q, optimize=True)


def solve_n1(problem: ScalarProblem, cfg: ScalarConfig) -> ScalarN1Result:
    """NGO Galerkin solver in physical time (gPC-SG-N1).

    The profile system for V is advanced by splitting: backward-Euler
    tau-transport with the matrix A(x), forward-Euler nonlinear step, RK3
    spectral x-transport (or first-order upwind when cfg.upwind is set).
    """
    grid = PeriodicGrid(cfg.n_x, *problem.domain)
    tau_grid = PeriodicGrid.tau(cfg.n_tau)
    basis = chaos.build_basis(problem.family, cfg.k_modes - 1)
    rule = chaos.gauss_rule(basis, cfg.n_quad_eff)
    c_x = _eval_x(problem.c, grid.nodes)
    if cfg.upwind and np.min(c_x) < 0:
        raise ConfigurationError("upwind transport requires c(x) >= 0")
    a_nodes = _eval_xz(problem.a, grid.nodes, rule.nodes)
    _check_positive(a_nodes, "gPC-SG-N1")
    amat = chaos.assemble_weighted_matrix(basis, rule, a_nodes).values

    v = prepare_initial_V(problem, basis, rule, grid, tau_grid)
    phase = solve_phase_scalar(problem, basis, rule, grid, cfg.dt, cfg.t_final)

    zeta = np.fft.fftfreq(cfg.n_tau) * cfg.n_tau
    n_steps, last = _steps(cfg.t_final, cfg.dt)
    res = _tau_resolvent(amat, zeta, cfg.dt / problem.eps)
    res_last = res if abs(last - cfg.dt) < 1e-15 else \
        _tau_resolvent(amat, zeta, last / problem.eps)
    eitau = np.exp(1j * tau_grid.nodes)[None, :, None]

    for n in range(n_steps):
        h, rop = (cfg.dt, res) if n < n_steps - 1 else (last, res_last)
        vh = np.fft.fft(v, axis=1)
        vh = np.einsum("xzkj,xzj->xzk", rop, vh)
        v = np.fft.ifft(vh, axis=1)
        if problem.r is not None:
            v_nodes = np.einsum("xtk,qk->xtq", v, rule.psi)
            r_nodes = problem.r(eitau * v_nodes)
            gam = np.einsum("xtq,qj,q->xtj", r_nodes, rule.psi, rule.weights,
                            optimize=True)
            v = v - h * np.conj(eitau) * gam
        if cfg.upwind:
            v = upwind_transport_step(v, c_x[:, None, None], grid, h, axis=0)
        else:
            v = rk3_transport_step(v, c_x[:, None, None], grid, h, axis=0)
    return ScalarN1Result(grid=grid, tau_grid=tau_grid, basis=basis, rule=rule,
                          profile=v, phase=phase, eps=problem.eps)


# ---------------------------------------------------------------------------
# gPC-SG-N2


@dataclass
class ScalarN2Result:
    grid: PeriodicGrid
    tau_grid: PeriodicGrid
    basis: object
    rule: object
    s_nodes: np.ndarray           # (L + 1,)
    history: np.ndarray           # W, (L + 1, n_x, n_tau, K) complex
    phase: PhaseField
    s_star: float
    eps: float

    @property
    def x(self):
        return self.grid.nodes


def solve_n2(problem: ScalarProblem, cfg: ScalarConfig) -> ScalarN2Result:
    """NGO Galerkin solver in the phase variable s (gPC-SG-N2).

    Builds the s-grid up to S* (the largest phase reached at the final
    time over all x and reconstruction nodes), then advances the W system:
    scalar backward-Euler tau-step, weighted nonlinear projection, RK3
    transport with the matrix speed c(x) A*(x).  Every s-slice is stored for
    the reconstruction interpolation.
    """
    grid = PeriodicGrid(cfg.n_x, *problem.domain)
    tau_grid = PeriodicGrid.tau(cfg.n_tau)
    basis = chaos.build_basis(problem.family, cfg.k_modes - 1)
    rule = chaos.gauss_rule(basis, cfg.n_quad_eff)
    c_x = _eval_x(problem.c, grid.nodes)
    a_nodes = _eval_xz(problem.a, grid.nodes, rule.nodes)
    _check_positive(a_nodes, "gPC-SG-N2 (1/a weights)")
    astar = chaos.assemble_weighted_matrix(basis, rule, 1.0 / a_nodes).values
    speed = (c_x[:, None, None] * astar)[:, None, :, :]  # broadcast over tau

    phase = solve_phase_scalar(problem, basis, rule, grid, cfg.dt, cfg.t_final)
    rule_rec = chaos.gauss_rule(basis, cfg.n_recon_eff)
    s_final = phase.at_nodes(rule_rec.psi)                # (n_x, N_s)
    s_star = float(np.max(s_final)) * (1.0 + 1e-12)

    ds = cfg.ds
    if ds is None:
        # step in s comparable to dt steps in t: scale by the mean of a
        a_mean = float(np.einsum("xq,q->", a_nodes, rule.weights) / grid.n)
        ds = cfg.dt * a_mean
    n_slices = int(np.floor(s_star / ds)) + 1

    w = prepare_initial_V(problem, basis, rule, grid, tau_grid)
    history = np.empty((n_slices + 1,) + w.shape, dtype=complex)
    history[0] = w
    eitau = np.exp(1j * tau_grid.nodes)[None, :, None]
    inv_a = 1.0 / a_nodes

    for n in range(n_slices):
        w = backward_euler_tau(w, ds, problem.eps, axis=1)
        if problem.r is not None:
            w_nodes = np.einsum("xtk,qk->xtq", w, rule.psi)
            r_nodes = problem.r(eitau * w_nodes) * inv_a[:, None, :]
            gam = np.einsum("xtq,qj,q->xtj", r_nodes, rule.psi, rule.weights,
                            optimize=True)
            w = w - ds * np.conj(eitau) * gam
        w = rk3_transport_step(w, speed, grid, ds, axis=0, matrix=True)
        history[n + 1] = w

    s_nodes = ds * np.arange(n_slices + 1)
    return ScalarN2Result(grid=grid, tau_grid=tau_grid, basis=basis, rule=rule,
                          s_nodes=s_nodes, history=history, phase=phase,
                          s_star=s_star, eps=problem.eps)


# ---------------------------------------------------------------------------
# reconstruction and moments


def moments_from_samples(values, weights, axis: int = 0):
    """Mean and per-component SD of sampled values under quadrature weights.

    Returns (mean complex, sd_re, sd_im) with the sampling axis reduced.
    SD uses sum(w * v^2) - mean^2 per real component, clipped at zero.
    """
    values = np.asarray(values)
    w = np.asarray(weights)
    shape = [1] * values.ndim
    shape[axis] = len(w)
    w = w.reshape(shape)
    mean = np.sum(values * w, axis=axis)
    var_re = np.clip(np.sum(values.real**2 * w, axis=axis) - mean.real**2, 0, None)
    var_im = np.clip(np.sum(values.imag**2 * w, axis=axis) - mean.imag**2, 0, None)
    return mean, np.sqrt(var_re), np.sqrt(var_im)


@dataclass
class ReconstructedScalar:
    """Pointwise solution at reconstruction nodes plus its moments."""

    x: np.ndarray
    z_nodes: np.ndarray
    z_weights: np.ndarray
    u: np.ndarray                 # (n_x, N_s) complex
    mean: np.ndarray
    sd_re: np.ndarray
    sd_im: np.ndarray


def _finish_reconstruction(x, z_nodes, z_weights, u_nodes) -> ReconstructedScalar:
    mean, sd_re, sd_im = moments_from_samples(u_nodes, z_weights, axis=1)
    return ReconstructedScalar(x=x, z_nodes=z_nodes, z_weights=z_weights,
                               u=u_nodes, mean=mean, sd_re=sd_re, sd_im=sd_im)


def reconstruct_n1(result: ScalarN1Result, n_recon: int | None = None
                   ) -> ReconstructedScalar:
    """u(T, x, z_l) = e^{i S/eps} V(T, x, tau = S/eps, z_l) at Gauss nodes."""
    rule_rec = chaos.gauss_rule(result.basis,
                                n_recon if n_recon else result.rule.n_points)
    s_final = result.phase.at_nodes(rule_rec.psi)          # (n_x, N_s)
    v_nodes = np.einsum("xtk,lk->xtl", result.profile, rule_rec.psi)
    tau_star = np.mod(s_final / result.eps, _TWO_PI)
    vals = trig_interpolate(np.moveaxis(v_nodes, 1, -1), tau_star, axis=-1)
    u_nodes = np.exp(1j * tau_star) * vals
    return _finish_reconstruction(result.x, rule_rec.nodes, rule_rec.weights,
                                  u_nodes)


def interp_profile_in_s(result: ScalarN2Result, s_query: np.ndarray) -> np.ndarray:
    """W linearly interpolated in s at per-(x, node) phases.

    ``s_query`` has shape (n_x, m); returns (n_x, m, n_tau, K).
    """
    ds = result.s_nodes[1] - result.s_nodes[0]
    pos = s_query / ds
    idx = np.clip(np.floor(pos).astype(int), 0, len(result.s_nodes) - 2)
    lam = pos - idx
    ix = np.arange(result.grid.n)[:, None]
    lo = result.history[idx, ix]                            # (n_x, m, n_tau, K)
    hi = result.history[idx + 1, ix]
    return lo + lam[..., None, None] * (hi - lo)


def reconstruct_n2(result: ScalarN2Result, n_recon: int | None = None
                   ) -> ReconstructedScalar:
    """Interpolate W at s = S(T, x, z_l), then in tau at S/eps, then scale."""
    rule_rec = chaos.gauss_rule(result.basis,
                                n_recon if n_recon else result.rule.n_points)
    s_final = result.phase.at_nodes(rule_rec.psi)          # (n_x, N_s)
    w_at_s = interp_profile_in_s(result, s_final)          # (n_x, N_s, n_tau, K)
    w_nodes = np.einsum("xltk,lk->xlt", w_at_s, rule_rec.psi)
    tau_star = np.mod(s_final / result.eps, _TWO_PI)
    vals = trig_interpolate(w_nodes, tau_star, axis=-1)
    u_nodes = np.exp(1j * tau_star) * vals
    return _finish_reconstruction(result.x, rule_rec.nodes, rule_rec.weights,
                                  u_nodes)


# ---------------------------------------------------------------------------
# stochastic collocation (batched deterministic runs)


@dataclass
class ScalarCollocationResult:
    grid: PeriodicGrid
    z_nodes: np.ndarray
    z_weights: np.ndarray
    u: np.ndarray                 # (N_c, n_x) complex ensemble
    mean: np.ndarray
    sd_re: np.ndarray
    sd_im: np.ndarray

    @property
    def x(self):
        return self.grid.nodes

    def evaluate_at(self, z: float) -> np.ndarray:
        """Lagrange interpolation of the ensemble at an off-node z."""
        zn = self.z_nodes
        diffs = z - zn
        exact = np.isclose(diffs, 0.0, atol=1e-14)
        if exact.any():
            return self.u[int(np.argmax(exact))]
        basis_vals = np.empty(len(zn))
        for j in range(len(zn)):
            others = np.delete(zn, j)
            basis_vals[j] = np.prod((z - others) / (zn[j] - others))
        return basis_vals @ self.u


def _colloc_direct(problem, cfg, grid, a_c, u0, c_x):
    n_steps, last = _steps(cfg.t_final, cfg.dt)
    osc = np.exp(1j * a_c * cfg.dt / problem.eps)
    osc_last = osc if abs(last - cfg.dt) < 1e-15 else \
        np.exp(1j * a_c * last / problem.eps)
    u = u0.copy()
    for n in range(n_steps):
        h, rot = (cfg.dt, osc) if n < n_steps - 1 else (last, osc_last)
        u = rot * u
        if problem.r is not None:
            u = u - h * problem.r(u)
        u = rk3_transport_step(u, c_x[None, :], grid, h, axis=1)
    return u


def _colloc_phase(cfg, grid, a_c, c_x):
    def rhs(s):
        return a_c - c_x[None, :] * fourier_derivative(s, grid, axis=1)

    n_steps, last = _steps(cfg.t_final, cfg.dt)
    s = np.zeros_like(a_c)
    for n in range(n_steps):
        s = rk4_step(s, rhs, cfg.dt if n < n_steps - 1 else last)
    return s


def _colloc_initial_profile(problem, a_c, u0, tau):
    if problem.r is None:
        return np.repeat(u0[:, :, None], len(tau), axis=2).astype(complex)
    phase = np.exp(1j * tau)[None, None, :]
    g = np.conj(phase) * problem.r(phase * u0[:, :, None])
    corr = chapman_enskog_profile(g, axis=2)
    return u0[:, :, None] + (problem.eps / a_c[:, :, None]) * (corr[:, :, :1] - corr)


def _colloc_n1(problem, cfg, grid, a_c, u0, c_x):
    tau = PeriodicGrid.tau(cfg.n_tau).nodes
    if problem.r is not None:
        _check_positive(a_c, "collocation N1 initial data")
    v = _colloc_initial_profile(problem, a_c, u0, tau)      # (N_c, n_x, n_tau)
    s = _colloc_phase(cfg, grid, a_c, c_x)
    n_steps, last = _steps(cfg.t_final, cfg.dt)
    eitau = np.exp(1j * tau)[None, None, :]
    for n in range(n_steps):
        h = cfg.dt if n < n_steps - 1 else last
        v = backward_euler_tau(v, h, problem.eps, generator=a_c[:, :, None],
                               axis=2)
        if problem.r is not None:
            v = v - h * np.conj(eitau) * problem.r(eitau * v)
        v = rk3_transport_step(v, c_x[None, :, None], grid, h, axis=1)
    tau_star = np.mod(s / problem.eps, _TWO_PI)
    return np.exp(1j * tau_star) * trig_interpolate(v, tau_star, axis=2)


def _colloc_n2(problem, cfg, grid, a_c, u0, c_x):
    tau = PeriodicGrid.tau(cfg.n_tau).nodes
    _check_positive(a_c, "collocation N2 (1/a transport)")
    w = _colloc_initial_profile(problem, a_c, u0, tau)
    s = _colloc_phase(cfg, grid, a_c, c_x)
    s_star = float(np.max(s)) * (1.0 + 1e-12)
    ds = cfg.ds if cfg.ds is not None else cfg.dt * float(np.mean(a_c))
    n_slices = int(np.floor(s_star / ds)) + 1
    speed = (c_x[None, :] / a_c)[:, :, None]
    history = np.empty((n_slices + 1,) + w.shape, dtype=complex)
    history[0] = w
    eitau = np.exp(1j * tau)[None, None, :]
    a_exp = a_c[:, :, None]
    for n in range(n_slices):
        w = backward_euler_tau(w, ds, problem.eps, axis=2)
        if problem.r is not None:
            w = w - ds * np.conj(eitau) * (problem.r(eitau * w) / a_exp)
        w = rk3_transport_step(w, speed, grid, ds, axis=1)
        history[n + 1] = w
    pos = s / ds
    idx = np.clip(np.floor(pos).astype(int), 0, n_slices - 1)
    lam = (pos - idx)[..., None]
    ic = np.arange(s.shape[0])[:, None]
    ix = np.arange(s.shape[1])[None, :]
    w_at = history[idx, ic, ix] + lam * (history[idx + 1, ic, ix] - history[idx, ic, ix])
    tau_star = np.mod(s / problem.eps, _TWO_PI)
    return np.exp(1j * tau_star) * trig_interpolate(w_at, tau_star, axis=2)


def solve_collocation(problem: ScalarProblem, cfg: ScalarConfig,
                      inner: str = "direct") -> ScalarCollocationResult:
    """Reference driver: one deterministic run per Gauss node, batched.

    ``inner`` selects the deterministic scheme (direct, n1 or n2).  Moments
    are assembled with the Gauss weights; a Lagrange interpolant over z is
    available on the result.
    """
    grid = PeriodicGrid(cfg.n_x, *problem.domain)
    rule_c = chaos.gauss_rule(chaos.build_basis(problem.family, 0), cfg.n_colloc)
    z = rule_c.nodes
    c_x = _eval_x(problem.c, grid.nodes)
    a_c = _eval_xz(problem.a, grid.nodes, z).T.copy()       # (N_c, n_x)
    u0 = np.asarray(problem.u_in(grid.nodes[None, :], z[:, None]), dtype=complex)
    u0 = np.broadcast_to(u0, (len(z), grid.n)).copy()

    inner = inner.lower()
    if inner in ("direct", "d"):
        if np.min(a_c) < -1e-12:
            raise SingularWeightError("a must be >= 0 for the direct scheme")
        u = _colloc_direct(problem, cfg, grid, a_c, u0, c_x)
    elif inner == "n1":
        u = _colloc_n1(problem, cfg, grid, a_c, u0, c_x)
    elif inner == "n2":
        u = _colloc_n2(problem, cfg, grid, a_c, u0, c_x)
    else:
        raise ConfigurationError(f"unknown inner collocation method {inner!r}")

    mean, sd_re, sd_im = moments_from_samples(u, rule_c.weights, axis=0)
    return ScalarCollocationResult(grid=grid, z_nodes=z, z_weights=rule_c.weights,
                                   u=u, mean=mean, sd_re=sd_re, sd_im=sd_im)
