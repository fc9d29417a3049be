"""Solvers for the semiclassical surface-hopping system with random band gap.

The unknowns are the band densities f^+, f^- >= 0 and the complex coherence
f^i on a periodic (x, p) phase-space box:

    d_t f^+ + p d_x f^+ - d_x(E) d_p f^+ =  2 b g,
    d_t f^- + p d_x f^- + d_x(E) d_p f^- = -2 b g,
    d_t f^i + p d_x f^i = -i (2E/eps) f^i + b (f^- - f^+),

written here for the implemented case: potential U == 0, real coupling
b = b^i(x, p), b^{+-} == 0, g = Re f^i.  The band gap half-width E(x, z) > 0
carries the randomness.

Three Galerkin solvers (direct with Crank-Nicolson substitution source,
NGO in physical time, NGO in the phase variable s) plus a batched stochastic
collocation reference.  All NGO fields are real arrays of shape
(4, n_x, n_p, n_tau, K) holding (F^+, F^-, G, H).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import chaos
from .errors import (
    ConfigurationError,
    PhaseInversionError,
    SingularWeightError,
)
from .spectral import (
    PeriodicGrid,
    backward_euler_tau,
    exact_advect_fourier,
    fourier_derivative,
    rk3_transport_step,
    rk4_step,
    trig_interpolate,
)

_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# problem and configuration


@dataclass(frozen=True)
class HoppingProblem:
    """Coefficients of the surface-hopping model.

    ``E(x, z)`` is the positive band-gap half-width, ``b_i(x, p)`` the real
    interband coupling, and the initial data are deterministic (z enters only
    through E).  ``u_pot`` may be given but must be identically zero: the
    Galerkin systems are implemented for U == 0, which is the regime of every
    computed case.
    """

    E: object
    b_i: object
    f_plus_in: object
    f_minus_in: object
    f_i_in: object
    eps: float
    x_domain: tuple = (-_TWO_PI, _TWO_PI)
    p_domain: tuple = (-_TWO_PI, _TWO_PI)
    family: str = "legendre"
    u_pot: object = None

    def __post_init__(self):
        if not (0.0 < self.eps <= 1.0):
            raise ConfigurationError(f"eps must be in (0, 1], got {self.eps}")


@dataclass(frozen=True)
class HoppingConfig:
    """Numerical knobs shared by the hopping solvers."""

    k_modes: int
    n_x: int
    n_p: int = 32
    n_tau: int = 8
    dt: float = 1e-3
    t_final: float = 0.5
    ds: float | None = None      # N2 step; default dt * (mean of 2E)
    n_quad: int | None = None
    n_recon: int | None = None
    n_colloc: int = 32
    source_rk2: bool = False     # midpoint variant of the N2 source step
    cfl_guard: bool = True       # cap ds by the transport stability bound

    def __post_init__(self):
        for name in ("k_modes", "n_x", "n_p", "n_tau"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("dt", "t_final"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.ds is not None and self.ds <= 0:
            raise ConfigurationError("ds must be positive")

    @property
    def n_quad_eff(self) -> int:
        return chaos.default_quadrature_size(self.k_modes - 1,
                                             32 if self.n_quad is None else self.n_quad)

    @property
    def n_recon_eff(self) -> int:
        return self.n_quad_eff if self.n_recon is None else self.n_recon


class _Workspace:
    """Grids, rules and nodal coefficient tables shared by the solvers."""

    def __init__(self, problem: HoppingProblem, cfg: HoppingConfig):
        self.problem = problem
        self.cfg = cfg
        self.gx = PeriodicGrid(cfg.n_x, *problem.x_domain)
        self.gp = PeriodicGrid(cfg.n_p, *problem.p_domain)
        self.basis = chaos.build_basis(problem.family, cfg.k_modes - 1)
        self.rule = chaos.gauss_rule(self.basis, cfg.n_quad_eff)
        x, p, z = self.gx.nodes, self.gp.nodes, self.rule.nodes
        if problem.u_pot is not None:
            u_val = np.broadcast_to(np.asarray(problem.u_pot(x), dtype=float), x.shape)
            if np.max(np.abs(u_val)) > 1e-14:
                raise ConfigurationError(
                    "the hopping solvers are implemented for U == 0")
        self.e_nodes = np.broadcast_to(
            np.asarray(problem.E(x[:, None], z[None, :]), dtype=float),
            (len(x), len(z))).copy()
        if np.min(self.e_nodes) < 1e-14:
            bad = np.unravel_index(np.argmin(self.e_nodes), self.e_nodes.shape)
            raise SingularWeightError(
                f"band gap E must be strictly positive; min {np.min(self.e_nodes):.3e} "
                f"at (x index, node) {bad}"
            )
        # d_x E computed spectrally; exact for the band-limited presets
        self.dex_nodes = fourier_derivative(self.e_nodes, self.gx, axis=0)
        self.b_nodes = np.broadcast_to(
            np.asarray(problem.b_i(x[:, None], p[None, :]), dtype=float),
            (len(x), len(p))).copy()
        self.f_plus0 = self._eval_xp(problem.f_plus_in).astype(float)
        self.f_minus0 = self._eval_xp(problem.f_minus_in).astype(float)
        self.f_i0 = np.asarray(problem.f_i_in(x[:, None], p[None, :]),
                               dtype=complex)
        self.f_i0 = np.broadcast_to(self.f_i0, (len(x), len(p))).copy()
        if min(np.min(self.f_plus0), np.min(self.f_minus0)) < -1e-12:
            raise ConfigurationError("band densities f^+-_in must be nonnegative")

    def _eval_xp(self, fn):
        x, p = self.gx.nodes, self.gp.nodes
        return np.broadcast_to(np.asarray(fn(x[:, None], p[None, :])),
                               (len(x), len(p))).copy()

    def recon_rule(self):
        return chaos.gauss_rule(self.basis, self.cfg.n_recon_eff)


def _steps(t_final: float, dt: float):
    n = max(int(np.ceil(t_final / dt - 1e-9)), 1)
    return n, t_final - (n - 1) * dt


# ---------------------------------------------------------------------------
# phase equation in (x, p)


@dataclass
class PhaseHistory:
    """Chaos coefficients of S and d_p S at every stored step."""

    t: np.ndarray                  # (n + 1,)
    coeffs: np.ndarray             # (n + 1, n_x, n_p, K)
    dp_coeffs: np.ndarray          # (n + 1, n_x, n_p, K)

    @property
    def final(self) -> np.ndarray:
        return self.coeffs[-1]

    def at_nodes(self, psi: np.ndarray, step: int = -1) -> np.ndarray:
        """S at quadrature nodes for one stored step, shape (n_x, n_p, n_nodes)."""
        return np.einsum("xyk,qk->xyq", self.coeffs[step], psi)


def solve_phase_hopping(problem: HoppingProblem, cfg: HoppingConfig,
                        ws: _Workspace | None = None) -> PhaseHistory:
    """Integrate d_t S + p d_x S = 2 E by RK4 with spectral x-derivatives.

    S(0) = 0 and S is strictly increasing in t at every node since E > 0.
    d_p S (needed by the interband matrices) is co-integrated from its own
    transport equation d_t(d_p S) + p d_x(d_p S) = -d_x S: S is periodic in
    x but not in p (only the kinetic fields vanish at the p boundary), so a
    Fourier p-derivative of S would pollute the boundary rows.
    """
    ws = ws or _Workspace(problem, cfg)
    gx, gp = ws.gx, ws.gp
    forcing = 2.0 * chaos.project_function(ws.basis, ws.rule, ws.e_nodes).values
    forcing = forcing[:, None, :]                    # broadcast over p
    p_col = gp.nodes[None, :, None]

    def rhs(y):
        ds_x = fourier_derivative(y[0], gx, axis=0)
        dv_x = fourier_derivative(y[1], gx, axis=0)
        return np.stack([forcing - p_col * ds_x, -ds_x - p_col * dv_x])

    n_steps, last = _steps(cfg.t_final, cfg.dt)
    k = ws.basis.dim
    coeffs = np.zeros((n_steps + 1, gx.n, gp.n, k))
    dp = np.zeros_like(coeffs)
    t = np.zeros(n_steps + 1)
    y = np.zeros((2, gx.n, gp.n, k))
    for n in range(n_steps):
        h = cfg.dt if n < n_steps - 1 else last
        y = rk4_step(y, rhs, h)
        coeffs[n + 1] = y[0]
        dp[n + 1] = y[1]
        t[n + 1] = t[n] + h
    return PhaseHistory(t=t, coeffs=coeffs, dp_coeffs=dp)


# ---------------------------------------------------------------------------
# well-prepared initial data


def prepare_initial_hopping(problem: HoppingProblem, cfg: HoppingConfig,
                            ws: _Workspace | None = None) -> np.ndarray:
    """Chaos coefficients of the well-prepared profiles at t = 0.

    Returns a real array (4, n_x, n_p, n_tau, K) holding (F^+, F^-, G, H).
    At t = 0 the phase gradients vanish, so both oscillation rates reduce to
    2E and all corrections carry the factor eps * b / (2E).
    """
    ws = ws or _Workspace(problem, cfg)
    tau = PeriodicGrid.tau(cfg.n_tau).nodes
    inv_2e = 1.0 / (2.0 * ws.e_nodes)                      # (n_x, n_q)
    b = ws.b_nodes[:, :, None, None]                       # (n_x, n_p, 1, 1)
    eps = problem.eps
    one_m_exp = (1.0 - np.exp(-1j * tau))[None, None, :, None]
    fi = ws.f_i0[:, :, None, None]
    imx = np.imag(fi * one_m_exp)                          # Im(f^i (1 - e^{-i tau}))
    corr = 2.0 * eps * b * imx * inv_2e[:, None, None, :]
    f_plus = ws.f_plus0[:, :, None, None] + corr
    f_minus = ws.f_minus0[:, :, None, None] - corr
    df = (ws.f_plus0 - ws.f_minus0)[:, :, None, None]
    sin_t = np.sin(tau)[None, None, :, None]
    cos_m1 = (np.cos(tau) - 1.0)[None, None, :, None]
    g = np.real(fi) - eps * b * df * sin_t * inv_2e[:, None, None, :]
    h = np.imag(fi) + eps * b * df * cos_m1 * inv_2e[:, None, None, :]
    nodes = np.stack([np.broadcast_to(f_plus, f_plus.shape),
                      np.broadcast_to(f_minus, f_minus.shape),
                      np.broadcast_to(g, f_plus.shape),
                      np.broadcast_to(h, f_plus.shape)])
    return np.einsum("fxytq,qk,q->fxytk", nodes, ws.rule.psi, ws.rule.weights,
                     optimize=True)


# ---------------------------------------------------------------------------
# direct gPC-SG solver (Crank-Nicolson substitution source)


@dataclass
class HoppingDirectResult:
    gx: PeriodicGrid
    gp: PeriodicGrid
    basis: object
    rule: object
    coeffs: np.ndarray             # (4, n_x, n_p, K) real: f^+, f^-, g, h


def solve_hopping_direct(problem: HoppingProblem, cfg: HoppingConfig
                         ) -> HoppingDirectResult:
    """Direct Galerkin solver: exact Fourier transport in x and p, then the
    substitution form of the Crank-Nicolson source step.

    The g-update solves [I + (b dt)^2 I + (dt/eps)^2 P] g' = ... with
    P the E^2-weighted Galerkin matrix; f^+-, h follow explicitly.  The
    source step conserves f^+ + f^- pointwise and, for constant E, the
    quadratic invariant g^2 + h^2 per node.
    """
    ws = _Workspace(problem, cfg)
    gx, gp, basis, rule = ws.gx, ws.gp, ws.basis, ws.rule
    k = basis.dim
    eps = problem.eps

    w_mat = chaos.assemble_weighted_matrix(basis, rule, ws.e_nodes).values
    p_mat = chaos.assemble_weighted_matrix(basis, rule, ws.e_nodes**2).values
    cx_mat = chaos.assemble_weighted_matrix(basis, rule, ws.dex_nodes).values
    wx, qx = np.linalg.eigh(cx_mat)                       # (n_x, K), (n_x, K, K)

    f0 = np.stack([ws.f_plus0, ws.f_minus0, ws.f_i0.real, ws.f_i0.imag])
    # z-independent initial data: only the first chaos mode is populated
    f = np.zeros((4, gx.n, gp.n, k))
    f[..., 0] = f0

    n_steps, last = _steps(cfg.t_final, cfg.dt)
    b = ws.b_nodes[None, :, :]                             # (1, n_x, n_p) for stack ops
    p_gen = gp.nodes[None, None, :, None]                  # x-transport generator

    def source_matrices(h):
        eye = np.eye(k)
        denom = ((1.0 + (ws.b_nodes * h) ** 2)[:, :, None, None] * eye
                 + (h / eps) ** 2 * p_mat[:, None])
        return np.linalg.inv(denom)

    inv_default = source_matrices(cfg.dt)
    inv_last = inv_default if abs(last - cfg.dt) < 1e-15 else source_matrices(last)

    for n in range(n_steps):
        h = cfg.dt if n < n_steps - 1 else last
        inv = inv_default if n < n_steps - 1 else inv_last
        # x-transport, all fields at once
        f = exact_advect_fourier(f, gx, h, axis=1, generator=p_gen)
        # p-transport: f^+ with generator -Cx, f^- with +Cx; g, h untouched
        eig_p = (-wx[:, None, :], qx[:, None, :, :])
        eig_m = (wx[:, None, :], qx[:, None, :, :])
        f[0] = exact_advect_fourier(f[0], gp, h, axis=1, generator=None,
                                    matrix=True, eig=eig_p)
        f[1] = exact_advect_fourier(f[1], gp, h, axis=1, generator=None,
                                    matrix=True, eig=eig_m)
        # source step (substitution form)
        fp, fm, g, hh = f
        bb = ws.b_nodes[:, :, None]
        wg_h = np.einsum("xkj,xyj->xyk", w_mat, hh)
        pg_g = np.einsum("xkj,xyj->xyk", p_mat, g)
        rhs = g + h * (-bb * fp + bb * fm + (2.0 / eps) * wg_h
                       - bb**2 * h * g - (h / eps**2) * pg_g)
        g_new = np.einsum("xykj,xyj->xyk", inv, rhs)
        gsum = g + g_new
        f[0] = fp + bb * h * gsum
        f[1] = fm - bb * h * gsum
        f[3] = hh - (h / eps) * np.einsum("xkj,xyj->xyk", w_mat, gsum)
        f[2] = g_new
    return HoppingDirectResult(gx=gx, gp=gp, basis=basis, rule=rule, coeffs=f)


# ---------------------------------------------------------------------------
# NGO solver in physical time (appendix scheme)


@dataclass
class HoppingN1Result:
    gx: PeriodicGrid
    gp: PeriodicGrid
    tau_grid: PeriodicGrid
    basis: object
    rule: object
    profile: np.ndarray            # (4, n_x, n_p, n_tau, K) real
    phase: PhaseHistory
    eps: float


def _rotation_source(f, b, tau, dt):
    """Exact solve of the interband rotation system over one step.

    Per (x, p, tau) the quantities u = F^+ - F^-, v = G cos + H sin rotate at
    frequency 2 b while F^+ + F^- and -G sin + H cos are invariant.
    """
    cos_t = np.cos(tau)[None, None, :, None]
    sin_t = np.sin(tau)[None, None, :, None]
    fp, fm, g, hh = f
    sigma = fp + fm
    u = fp - fm
    v = g * cos_t + hh * sin_t
    w = -g * sin_t + hh * cos_t
    ang = 2.0 * b[:, :, None, None] * dt
    ca, sa = np.cos(ang), np.sin(ang)
    u_new = u * ca + 2.0 * v * sa
    v_new = v * ca - 0.5 * u * sa
    out = np.empty_like(f)
    out[0] = 0.5 * (sigma + u_new)
    out[1] = 0.5 * (sigma - u_new)
    out[2] = v_new * cos_t - w * sin_t
    out[3] = v_new * sin_t + w * cos_t
    return out


def solve_hopping_n1(problem: HoppingProblem, cfg: HoppingConfig
                     ) -> HoppingN1Result:
    """NGO Galerkin solver marching in t with the four-step splitting.

    Steps: exact Fourier x-transport (speed p); exact Fourier p-transport of
    F^+- with the projected d_x E matrix; exact interband rotation source;
    backward-Euler tau-step with the matrices 2 C_E -+ Hmat (F^+-) and 2 C_E
    (G, H), where C_E projects E and Hmat contracts the d_x E triple tensor
    with the chaos modes of d_p S at the new time.
    """
    ws = _Workspace(problem, cfg)
    gx, gp, basis, rule = ws.gx, ws.gp, ws.basis, ws.rule
    tau_grid = PeriodicGrid.tau(cfg.n_tau)
    eps = problem.eps

    ce_mat = chaos.assemble_weighted_matrix(basis, rule, ws.e_nodes).values
    cx_mat = chaos.assemble_weighted_matrix(basis, rule, ws.dex_nodes).values
    d_tens = chaos.assemble_triple_tensor(basis, rule, ws.dex_nodes).values
    wx, qx = np.linalg.eigh(cx_mat)

    phase = solve_phase_hopping(problem, cfg, ws)
    f = prepare_initial_hopping(problem, cfg, ws)
    p_gen = gp.nodes[None, None, :, None, None]

    # G and H relax with the time-independent generator 2 C_E
    wge, qge = np.linalg.eigh(2.0 * ce_mat)
    eig_gh = (wge[:, None, None, :], qge[:, None, None, :, :])

    n_steps, last = _steps(cfg.t_final, cfg.dt)
    for n in range(n_steps):
        h = cfg.dt if n < n_steps - 1 else last
        f = exact_advect_fourier(f, gx, h, axis=1, generator=p_gen)
        eig_p = (-wx[:, None, None, :], qx[:, None, None, :, :])
        eig_m = (wx[:, None, None, :], qx[:, None, None, :, :])
        f[0] = exact_advect_fourier(f[0], gp, h, axis=1, generator=None,
                                    matrix=True, eig=eig_p)
        f[1] = exact_advect_fourier(f[1], gp, h, axis=1, generator=None,
                                    matrix=True, eig=eig_m)
        f = _rotation_source(f, ws.b_nodes, tau_grid.nodes, h)
        # tau-step at the end-of-step phase gradient
        hmat = np.einsum("xyl,xlmk->xykm", phase.dp_coeffs[n + 1], d_tens)
        gen_p = 2.0 * ce_mat[:, None, None] - hmat[:, :, None]
        gen_m = 2.0 * ce_mat[:, None, None] + hmat[:, :, None]
        f[0] = backward_euler_tau(f[0], h, eps, generator=gen_p, axis=2,
                                  matrix=True)
        f[1] = backward_euler_tau(f[1], h, eps, generator=gen_m, axis=2,
                                  matrix=True)
        f[2] = backward_euler_tau(f[2], h, eps, generator=None, axis=2,
                                  matrix=True, eig=eig_gh)
        f[3] = backward_euler_tau(f[3], h, eps, generator=None, axis=2,
                                  matrix=True, eig=eig_gh)
    return HoppingN1Result(gx=gx, gp=gp, tau_grid=tau_grid, basis=basis,
                           rule=rule, profile=f, phase=phase, eps=eps)


# ---------------------------------------------------------------------------
# NGO solver in the phase variable (gPC-SG-N2)


class _PhaseInverter:
    """Bracketing search for t such that S(t, x, p, z_q) = s, per node.

    Pointers advance monotonically with s; values of S at the candidate rows
    are evaluated lazily from the stored chaos modes.  Queries beyond the
    final time clamp to the last interval (coefficients freeze at T).
    """

    def __init__(self, phase: PhaseHistory, psi: np.ndarray):
        self.phase = phase
        self.psi = psi
        n_x, n_p = phase.coeffs.shape[1:3]
        n_q = psi.shape[0]
        self.n_t = len(phase.t) - 1
        self.ptr = np.zeros((n_x, n_p, n_q), dtype=np.int64)
        self._ix = np.arange(n_x)[:, None, None]
        self._iy = np.arange(n_p)[None, :, None]
        self.left = self._rows(self.ptr)
        self.right = self._rows(np.minimum(self.ptr + 1, self.n_t))

    def _rows(self, rows):
        modes = self.phase.coeffs[rows, self._ix, self._iy]     # (.., n_q, K)
        return np.einsum("xyqk,qk->xyq", modes, self.psi)

    def _rows_subset(self, rows, mask):
        xi, yi, qi = np.nonzero(mask)
        modes = self.phase.coeffs[rows[mask], xi, yi]
        return np.sum(modes * self.psi[qi], axis=-1)

    def advance(self, s: float):
        """Move pointers so S[ptr] <= s < S[ptr+1] (clamped at the ends)."""
        while True:
            need = (self.right < s) & (self.ptr < self.n_t - 1)
            if not need.any():
                break
            self.ptr[need] += 1
            self.left[need] = self.right[need]
            self.right[need] = self._rows_subset(
                np.minimum(self.ptr + 1, self.n_t), need)
        if np.any(self.right < self.left - 1e-12):
            raise PhaseInversionError("phase history is not increasing in t")

    def dp_s_at(self, s: float) -> np.ndarray:
        """d_p S at the inverse time of s, per (x, p, node)."""
        denom = np.maximum(self.right - self.left, 1e-300)
        lam = np.clip((s - self.left) / denom, 0.0, 1.0)
        lo = self.phase.dp_coeffs[self.ptr, self._ix, self._iy]
        hi = self.phase.dp_coeffs[np.minimum(self.ptr + 1, self.n_t),
                                  self._ix, self._iy]
        modes = lo + lam[..., None] * (hi - lo)
        return np.einsum("xyqk,qk->xyq", modes, self.psi)


@dataclass
class HoppingN2Result:
    gx: PeriodicGrid
    gp: PeriodicGrid
    tau_grid: PeriodicGrid
    basis: object
    rule: object
    recon_rule: object
    phase: PhaseHistory
    s_nodes: np.ndarray
    s_star: float
    s_final_nodes: np.ndarray      # S(T) at recon nodes, (n_x, n_p, N_s)
    bracket_lo: np.ndarray         # profiles at the bracketing s-slices,
    bracket_hi: np.ndarray         # (4, n_x, n_p, N_s, n_tau), z-evaluated
    bracket_lam: np.ndarray        # interpolation fractions, (n_x, n_p, N_s)
    final_profile: np.ndarray      # W at s = s_nodes[-1], (4, n_x, n_p, n_tau, K)
    eps: float


def _assemble_pair(weights_q, psi, w):
    """K x K matrices from nodal weights, shape (n_x, n_p, K, K)."""
    return np.einsum("xyq,qm,qn,q->xymn", weights_q, psi, psi, w, optimize=True)


def solve_hopping_n2(problem: HoppingProblem, cfg: HoppingConfig
                     ) -> HoppingN2Result:
    """NGO Galerkin solver marching in the phase variable s.

    The phase history is inverted per (x, p, quadrature node) to evaluate the
    oscillation rates at each s-node; the interband matrices are reassembled
    there, and the profiles advance by the four-step splitting (RK3 x- and
    p-transport with matrix speeds, explicit source, scalar backward-Euler
    tau-step).  Only the s-slices bracketing each reconstruction phase are
    retained.
    """
    ws = _Workspace(problem, cfg)
    gx, gp, basis, rule = ws.gx, ws.gp, ws.basis, ws.rule
    tau_grid = PeriodicGrid.tau(cfg.n_tau)
    eps = problem.eps
    psi, wq = rule.psi, rule.weights

    phase = solve_phase_hopping(problem, cfg, ws)
    rule_rec = ws.recon_rule()
    s_final = phase.at_nodes(rule_rec.psi)                  # (n_x, n_p, N_s)
    s_star = float(np.max(s_final)) * (1.0 + 1e-12)

    hmat = chaos.assemble_weighted_matrix(basis, rule, 1.0 / (2.0 * ws.e_nodes)).values

    ds = cfg.ds
    if ds is None:
        e_mean = float(np.einsum("xq,q->", ws.e_nodes, wq) / gx.n)
        ds = cfg.dt * 2.0 * e_mean
    if cfg.cfl_guard:
        ds = _apply_cfl_guard(ds, ws, phase, hmat)
    n_slices = int(np.floor(s_star / ds)) + 1
    s_nodes = ds * np.arange(n_slices + 1)

    # bracketing indices for the reconstruction capture
    n_lo = np.clip((s_final / ds).astype(np.int64), 0, n_slices - 1)
    lam = s_final / ds - n_lo
    n_s = rule_rec.n_points
    cap_shape = (4, gx.n, gp.n, n_s, cfg.n_tau)
    bracket = [np.zeros(cap_shape), np.zeros(cap_shape)]

    def capture(step, w_now):
        for side in (0, 1):
            mask = (n_lo + side) == step
            if not mask.any():
                continue
            xi, yi, li = np.nonzero(mask)
            vals = w_now[:, xi, yi]                        # (4, m, n_tau, K)
            nodal = np.einsum("fmtk,mk->fmt", vals, rule_rec.psi[li])
            bracket[side][:, xi, yi, li] = nodal

    w = prepare_initial_hopping(problem, cfg, ws)
    capture(0, w)

    inverter = _PhaseInverter(phase, psi)
    tau = tau_grid.nodes
    cos_t = np.cos(tau)[None, None, :, None]
    sin_t = np.sin(tau)[None, None, :, None]
    b2 = ws.b_nodes[:, :, None, None]
    two_e = 2.0 * ws.e_nodes[:, None, :]                   # (n_x, 1, n_q)
    dex = ws.dex_nodes[:, None, :]

    for n in range(n_slices):
        s_here = s_nodes[n]
        inverter.advance(s_here)
        dps = inverter.dp_s_at(s_here)                     # (n_x, n_p, n_q)
        e_plus = two_e - dex * dps
        e_minus = two_e + dex * dps
        small = min(e_plus.min(), e_minus.min())
        if small < 1e-14:
            which = "E+" if e_plus.min() <= e_minus.min() else "E-"
            arr = e_plus if which == "E+" else e_minus
            bad = np.unravel_index(np.argmin(arr), arr.shape)
            raise SingularWeightError(
                f"oscillation rate {which} hit {small:.3e} at s={s_here:.4g}, "
                f"(x, p, node) index {bad}"
            )
        jmat = _assemble_pair(1.0 / e_plus, psi, wq)
        lmat = _assemble_pair(1.0 / e_minus, psi, wq)
        cmat = _assemble_pair(dex / e_plus, psi, wq)

        # step 1: x-transport with matrix speeds p J, p L, p H
        p_col = gp.nodes[:, None, None, None]              # aligns with n_p axis
        f0 = rk3_transport_step(w[0], p_col * jmat[:, :, None], gx, ds, axis=0,
                                matrix=True)
        f1 = rk3_transport_step(w[1], p_col * lmat[:, :, None], gx, ds, axis=0,
                                matrix=True)
        hsp = p_col * hmat[:, None, None]
        f2 = rk3_transport_step(w[2], hsp, gx, ds, axis=0, matrix=True)
        f3 = rk3_transport_step(w[3], hsp, gx, ds, axis=0, matrix=True)
        # step 2: p-transport of W1, W2 with -+ C
        f0 = rk3_transport_step(f0, -cmat[:, :, None], gp, ds, axis=1,
                                matrix=True)
        f1 = rk3_transport_step(f1, cmat[:, :, None], gp, ds, axis=1,
                                matrix=True)
        w = np.stack([f0, f1, f2, f3])
        # step 3: interband source
        w = _n2_source(w, jmat, lmat, hmat, b2, cos_t, sin_t, ds, cfg.source_rk2)
        # step 4: oscillatory tau-step
        w = backward_euler_tau(w, ds, eps, axis=3)
        capture(n + 1, w)

    return HoppingN2Result(gx=gx, gp=gp, tau_grid=tau_grid, basis=basis,
                           rule=rule, recon_rule=rule_rec, phase=phase,
                           s_nodes=s_nodes, s_star=s_star, s_final_nodes=s_final,
                           bracket_lo=bracket[0], bracket_hi=bracket[1],
                           bracket_lam=lam, final_profile=w, eps=eps)


def _n2_rhs(w, jmat, lmat, hmat, b2, cos_t, sin_t):
    mix = w[2] * cos_t + w[3] * sin_t
    diff = w[1] - w[0]
    out = np.empty_like(w)
    out[0] = 2.0 * b2 * np.einsum("xykj,xytj->xytk", jmat, mix)
    out[1] = -2.0 * b2 * np.einsum("xykj,xytj->xytk", lmat, mix)
    hd = np.einsum("xkj,xytj->xytk", hmat, diff)
    out[2] = b2 * hd * cos_t
    out[3] = b2 * hd * sin_t
    return out


def _n2_source(w, jmat, lmat, hmat, b2, cos_t, sin_t, ds, rk2: bool):
    k1 = _n2_rhs(w, jmat, lmat, hmat, b2, cos_t, sin_t)
    if not rk2:
        return w + ds * k1
    k2 = _n2_rhs(w + 0.5 * ds * k1, jmat, lmat, hmat, b2, cos_t, sin_t)
    return w + ds * k2


def _apply_cfl_guard(ds, ws: _Workspace, phase: PhaseHistory, hmat) -> float:
    """Cap ds by the RK3 transport stability bound derived from the phase
    history (minimum oscillation rate over all times and nodes)."""
    psi = ws.rule.psi
    two_e = 2.0 * ws.e_nodes[:, None, :]
    dex = ws.dex_nodes[:, None, :]
    e_min = np.inf
    dp_amp = 0.0
    chunk = 64
    for start in range(0, phase.dp_coeffs.shape[0], chunk):
        dps = np.einsum("nxyk,qk->nxyq", phase.dp_coeffs[start:start + chunk], psi)
        e_min = min(e_min,
                    float(np.min(two_e - dex * dps)),
                    float(np.min(two_e + dex * dps)))
        dp_amp = max(dp_amp, float(np.max(np.abs(dps))))
    e_min = max(e_min, 1e-14)
    p_max = float(np.max(np.abs(ws.gp.nodes)))
    rate = max(1.0 / e_min, float(np.max(np.abs(hmat))))
    speed_x = p_max * rate
    speed_p = float(np.max(np.abs(ws.dex_nodes))) / e_min
    cap = 0.5 * min(ws.gx.dx / max(speed_x, 1e-300),
                    ws.gp.dx / max(speed_p, 1e-300))
    if ds > cap:
        warnings.warn(
            f"N2 phase step reduced from {ds:.3g} to {cap:.3g} by the "
            f"transport CFL guard", stacklevel=3)
        return cap
    return ds


# ---------------------------------------------------------------------------
# reconstruction, densities, moments


@dataclass
class HoppingNodalFields:
    """Pointwise solution at reconstruction nodes in z."""

    x: np.ndarray
    p: np.ndarray
    z_nodes: np.ndarray
    z_weights: np.ndarray
    f_plus: np.ndarray             # (n_x, n_p, N_s) real
    f_minus: np.ndarray
    f_i: np.ndarray                # complex
    dp: float

    def densities(self):
        """rho^{+-, i}(x, z) by rectangle integration over the periodic p grid."""
        return (densities(self.f_plus, self.dp),
                densities(self.f_minus, self.dp),
                densities(self.f_i, self.dp))


def densities(values, dp: float, axis: int = 1):
    """Zeroth p-moment: rho = sum_p f dp on the periodic grid."""
    return np.sum(values, axis=axis) * dp


def reconstruct_hopping(result, n_recon: int | None = None) -> HoppingNodalFields:
    """Evaluate f^+-, f^i at the reconstruction nodes for any solver result.

    f^+- = W(tau = S/eps) and f^i = e^{-i S / eps} (G + i H)(tau = S/eps):
    the coherence rotates with -i 2E/eps, so the carrier phase is e^{-i tau}
    (this is the convention under which the profile system's cos/sin
    couplings and the well-prepared data close exactly).  The N2 result
    interpolates its bracketing s-slices first (its reconstruction rule is
    fixed at solve time, so ``n_recon`` is ignored there).
    """
    if isinstance(result, HoppingDirectResult):
        rule_rec = chaos.gauss_rule(result.basis,
                                    n_recon or result.rule.n_points)
        nodal = np.einsum("fxyk,lk->fxyl", result.coeffs, rule_rec.psi)
        fp, fm, g, hh = nodal
        return HoppingNodalFields(
            x=result.gx.nodes, p=result.gp.nodes, z_nodes=rule_rec.nodes,
            z_weights=rule_rec.weights, f_plus=fp, f_minus=fm, f_i=g + 1j * hh,
            dp=result.gp.dx)

    if isinstance(result, HoppingN2Result):
        rule_rec = result.recon_rule
        lam = result.bracket_lam[None, ..., None]
        w_dag = result.bracket_lo + lam * (result.bracket_hi - result.bracket_lo)
        tau_star = np.mod(result.s_final_nodes / result.eps, _TWO_PI)
        vals = trig_interpolate(w_dag, tau_star, axis=-1)   # (4, n_x, n_p, N_s)
    elif isinstance(result, HoppingN1Result):
        rule_rec = chaos.gauss_rule(result.basis,
                                    n_recon or result.rule.n_points)
        s_final = result.phase.at_nodes(rule_rec.psi)
        nodal = np.einsum("fxytk,lk->fxylt", result.profile, rule_rec.psi)
        tau_star = np.mod(s_final / result.eps, _TWO_PI)
        vals = trig_interpolate(nodal, tau_star, axis=-1)
    else:
        raise TypeError(f"unsupported result type {type(result).__name__}")

    f_i = np.exp(-1j * tau_star) * (vals[2] + 1j * vals[3])
    return HoppingNodalFields(
        x=result.gx.nodes, p=result.gp.nodes, z_nodes=rule_rec.nodes,
        z_weights=rule_rec.weights, f_plus=vals[0], f_minus=vals[1],
        f_i=f_i, dp=result.gp.dx)


# ---------------------------------------------------------------------------
# stochastic collocation reference (direct scheme per node, batched)


@dataclass
class HoppingCollocationResult:
    gx: PeriodicGrid
    gp: PeriodicGrid
    z_nodes: np.ndarray
    z_weights: np.ndarray
    f_plus: np.ndarray             # (N_c, n_x, n_p) ensembles
    f_minus: np.ndarray
    f_i: np.ndarray

    def as_nodal(self) -> HoppingNodalFields:
        """Reshape the ensemble into the common nodal-fields layout."""
        return HoppingNodalFields(
            x=self.gx.nodes, p=self.gp.nodes, z_nodes=self.z_nodes,
            z_weights=self.z_weights,
            f_plus=np.moveaxis(self.f_plus, 0, -1),
            f_minus=np.moveaxis(self.f_minus, 0, -1),
            f_i=np.moveaxis(self.f_i, 0, -1), dp=self.gp.dx)


def solve_hopping_collocation(problem: HoppingProblem, cfg: HoppingConfig
                              ) -> HoppingCollocationResult:
    """Deterministic direct runs at the Gauss nodes of the family, batched.

    Each node solves the U = 0 system with E frozen at z = z_j using the same
    splitting as the Galerkin direct solver.
    """
    gx = PeriodicGrid(cfg.n_x, *problem.x_domain)
    gp = PeriodicGrid(cfg.n_p, *problem.p_domain)
    rule_c = chaos.gauss_rule(chaos.build_basis(problem.family, 0), cfg.n_colloc)
    z = rule_c.nodes
    x, p = gx.nodes, gp.nodes
    eps = problem.eps

    e_c = np.broadcast_to(np.asarray(problem.E(x[:, None], z[None, :]), dtype=float),
                          (gx.n, len(z))).T.copy()            # (N_c, n_x)
    if np.min(e_c) < 1e-14:
        raise SingularWeightError("band gap E must be strictly positive")
    dex_c = fourier_derivative(e_c, gx, axis=1)
    b = np.broadcast_to(np.asarray(problem.b_i(x[:, None], p[None, :]), dtype=float),
                        (gx.n, gp.n))

    f0p = np.broadcast_to(np.asarray(problem.f_plus_in(x[:, None], p[None, :]),
                                     dtype=float), (gx.n, gp.n))
    f0m = np.broadcast_to(np.asarray(problem.f_minus_in(x[:, None], p[None, :]),
                                     dtype=float), (gx.n, gp.n))
    f0i = np.broadcast_to(np.asarray(problem.f_i_in(x[:, None], p[None, :]),
                                     dtype=complex), (gx.n, gp.n))

    nc = len(z)
    f = np.empty((4, nc, gx.n, gp.n))
    f[0] = f0p
    f[1] = f0m
    f[2] = f0i.real
    f[3] = f0i.imag

    p_gen = p[None, None, None, :]
    n_steps, last = _steps(cfg.t_final, cfg.dt)
    for n in range(n_steps):
        h = cfg.dt if n < n_steps - 1 else last
        # x-transport (speed p), all nodes and fields at once; xi on axis 2
        f = exact_advect_fourier(f, gx, h, axis=2, generator=p_gen)
        # p-transport: generators -+ d_x E per node
        f[0] = exact_advect_fourier(f[0], gp, h, axis=2,
                                    generator=-dex_c[:, :, None])
        f[1] = exact_advect_fourier(f[1], gp, h, axis=2,
                                    generator=dex_c[:, :, None])
        # scalar Crank-Nicolson substitution source
        fp, fm, g, hh = f
        ee = e_c[:, :, None]
        bb = b[None, :, :]
        denom = 1.0 + (bb * h) ** 2 + (ee * h / eps) ** 2
        g_new = (g + h * (-bb * fp + bb * fm + (2.0 * ee / eps) * hh
                          - bb**2 * h * g - (ee**2 / eps**2) * h * g)) / denom
        gsum = g + g_new
        f[0] = fp + bb * h * gsum
        f[1] = fm - bb * h * gsum
        f[3] = hh - (ee * h / eps) * gsum
        f[2] = g_new

    return HoppingCollocationResult(gx=gx, gp=gp, z_nodes=z,
                                    z_weights=rule_c.weights,
                                    f_plus=f[0], f_minus=f[1],
                                    f_i=f[2] + 1j * f[3])
