"""Periodic pseudo-spectral kernels shared by every solver.

Conventions
-----------
* All grids are uniform and periodic; arrays use the standard FFT layout.
* The chaos-coefficient axis, when present, is the last axis.
* For matrix-valued speeds/generators the leading axes of the matrix array
  must right-align (numpy broadcasting) with the leading axes of the field.
* Odd-order spectral derivatives zero the unpaired Nyquist mode; unitary and
  resolvent multipliers replace it by its symmetrized (real) value when the
  field is real, so real fields stay real up to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ExtrapolationError

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform periodic grid on [lo, hi) with FFT wavenumbers."""

    n: int
    lo: float
    hi: float
    nodes: np.ndarray = field(init=False, repr=False)
    dx: float = field(init=False)
    wavenumbers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least two points")
        dx = (self.hi - self.lo) / self.n
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "nodes", self.lo + dx * np.arange(self.n))
        object.__setattr__(self, "wavenumbers",
                           _TWO_PI * np.fft.fftfreq(self.n, d=dx))

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def nyquist(self) -> int | None:
        """Index of the unpaired Nyquist bin, or None for odd n."""
        return self.n // 2 if self.n % 2 == 0 else None

    def deriv_factors(self) -> np.ndarray:
        """i*xi with the Nyquist mode zeroed (odd-order derivative rule)."""
        fac = 1j * self.wavenumbers.copy()
        if self.nyquist is not None:
            fac[self.nyquist] = 0.0
        return fac

    @classmethod
    def tau(cls, n: int) -> "PeriodicGrid":
        """The canonical 2*pi-periodic fast-variable grid."""
        return cls(n, 0.0, _TWO_PI)


def _axis_shape(ndim: int, axis: int, n: int) -> tuple:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def _nyquist_slice(ndim: int, axis: int, bin_: int) -> tuple:
    sel = [slice(None)] * ndim
    sel[axis] = slice(bin_, bin_ + 1)
    return tuple(sel)


def fourier_derivative(f, grid: PeriodicGrid, axis: int = 0):
    """Spectral derivative along a periodic axis; exact for band-limited data."""
    f = np.asarray(f)
    n = grid.n
    if np.isrealobj(f):
        fh = np.fft.rfft(f, axis=axis)
        fac = 1j * _TWO_PI * np.fft.rfftfreq(n, d=grid.dx)
        if n % 2 == 0:
            fac[-1] = 0.0
        fh *= fac.reshape(_axis_shape(f.ndim, axis % f.ndim, len(fac)))
        return np.fft.irfft(fh, n=n, axis=axis)
    fh = np.fft.fft(f, axis=axis)
    fh *= grid.deriv_factors().reshape(_axis_shape(f.ndim, axis % f.ndim, n))
    return np.fft.ifft(fh, axis=axis)


def rk4_step(y, rhs, dt: float):
    """One classical fourth-order Runge-Kutta step of y' = rhs(y)."""
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _apply_speed(speed, df, matrix: bool):
    if matrix:
        return np.matmul(speed, df[..., None])[..., 0]
    return speed * df


def rk3_transport_step(f, speed, grid: PeriodicGrid, dt: float, axis: int = 0,
                       matrix: bool = False):
    """Three-stage Runge-Kutta step for d_t u = -speed * d_x u.

    The scheme is u1 = u + dt/2 T(u), u2 = u + dt/2 T(u1),
    u' = u + dt T(u2); its stability region covers [-2i, 2i] on the
    imaginary axis and it is second-order accurate in time.  ``speed`` is a
    broadcastable scalar field or, with matrix=True, a (..., K, K) matrix
    field acting on the trailing chaos axis.
    """
    def T(u):
        return -_apply_speed(speed, fourier_derivative(u, grid, axis), matrix)

    u1 = f + 0.5 * dt * T(f)
    u2 = f + 0.5 * dt * T(u1)
    return f + dt * T(u2)


def upwind_transport_step(f, speed, grid: PeriodicGrid, dt: float, axis: int = 0):
    """First-order upwind step for d_t u = -c(x) d_x u with c >= 0."""
    diff = (f - np.roll(f, 1, axis=axis)) / grid.dx
    return f - dt * speed * diff


def eigh_symmetric(mats, tol: float = 1e-10):
    """Batched eigendecomposition of symmetric matrices, with a symmetry check."""
    mats = np.asarray(mats)
    if mats.shape[-1] != mats.shape[-2]:
        raise ValueError("matrix generator must be square on its last two axes")
    skew = np.max(np.abs(mats - np.swapaxes(mats, -1, -2)))
    scale = max(np.max(np.abs(mats)), 1.0)
    if skew > tol * scale:
        raise ValueError(f"matrix generator is not symmetric (deviation {skew:.2e})")
    return np.linalg.eigh(mats)


def _forward_fft(f, ax, n):
    """FFT along ax; real fields use the half spectrum.  Returns
    (coefficients, scaled frequency index array, Nyquist bin or None)."""
    if np.isrealobj(f):
        fh = np.fft.rfft(f, axis=ax)
        freqs = np.arange(n // 2 + 1, dtype=float)
        nyq_bin = n // 2 if n % 2 == 0 else None
        return fh, freqs, nyq_bin
    fh = np.fft.fft(f, axis=ax)
    return fh, np.fft.fftfreq(n) * n, None


def _inverse_fft(fh, ax, n, real_in):
    return np.fft.irfft(fh, n=n, axis=ax) if real_in else np.fft.ifft(fh, axis=ax)


def _fix_nyquist(mult, replacement, ndim, ax, nyq_bin):
    """Overwrite the Nyquist bin of a multiplier with its symmetrized value."""
    sel = _nyquist_slice(ndim, ax, nyq_bin)
    mult = np.array(mult)
    mult[sel] = np.asarray(replacement)[sel]
    return mult


def _rotate_to_eigen(q, fh):
    return np.matmul(np.swapaxes(q, -1, -2), fh[..., None])[..., 0]


def _rotate_from_eigen(q, tmp):
    return np.matmul(q, tmp[..., None])[..., 0]


def exact_advect_fourier(f, grid: PeriodicGrid, dt: float, axis: int,
                         generator, matrix: bool = False, eig=None):
    """Exact-in-time solve of d_t u + G d_x u = 0 in Fourier space.

    Scalar ``generator``: any array broadcastable against the field with the
    frequency axis in place of ``axis``.  Matrix ``generator``: symmetric
    (..., K, K) acting on the trailing chaos axis; ``eig`` may carry a
    precomputed (w, Q) pair from :func:`eigh_symmetric`.  Real fields stay
    real: the unpaired Nyquist multiplier is replaced by its cosine.
    """
    f = np.asarray(f)
    real_in = np.isrealobj(f)
    ax = axis % f.ndim
    fh, freqs, nyq_bin = _forward_fft(f, ax, grid.n)
    xi = (freqs * (_TWO_PI / grid.length) if real_in else grid.wavenumbers)
    xi = xi.reshape(_axis_shape(f.ndim, ax, len(xi)))
    if not matrix:
        theta = dt * np.asarray(generator) * xi
        phase = np.exp(-1j * theta)
        if nyq_bin is not None:
            phase = _fix_nyquist(phase, np.cos(theta), f.ndim, ax, nyq_bin)
        fh = fh * phase
    else:
        w, q = eig if eig is not None else eigh_symmetric(generator)
        tmp = _rotate_to_eigen(q, fh)
        theta = dt * w * xi
        phase = np.exp(-1j * theta)
        if nyq_bin is not None:
            phase = _fix_nyquist(phase, np.cos(theta), f.ndim, ax, nyq_bin)
        fh = _rotate_from_eigen(q, tmp * phase)
    return _inverse_fft(fh, ax, grid.n, real_in)


def backward_euler_tau(f, dt: float, eps: float, generator=None, axis: int = -2,
                       matrix: bool = False, eig=None):
    """One backward-Euler step of d_t w = -(G/eps) d_tau w, spectral in tau.

    Per tau-wavenumber zeta this solves (I + i zeta (dt/eps) G) w' = w;
    the step never increases any per-zeta l2 norm.  ``generator`` is None
    (identity), a broadcastable scalar field, or with matrix=True a symmetric
    (..., K, K) field on the trailing chaos axis.  The tau axis spans
    [0, 2*pi); real fields stay real (symmetrized Nyquist resolvent).
    """
    f = np.asarray(f)
    real_in = np.isrealobj(f)
    ax = axis % f.ndim
    n = f.shape[ax]
    fh, zeta, nyq_bin = _forward_fft(f, ax, n)
    zeta = zeta.reshape(_axis_shape(f.ndim, ax, len(zeta)))
    ratio = dt / eps
    if not matrix:
        lam = 1.0 if generator is None else np.asarray(generator)
        x = zeta * ratio * lam
        mult = 1.0 / (1.0 + 1j * x)
        if nyq_bin is not None:
            mult = _fix_nyquist(mult, 1.0 / (1.0 + x**2), f.ndim, ax, nyq_bin)
        fh = fh * mult
    else:
        w, q = eig if eig is not None else eigh_symmetric(generator)
        tmp = _rotate_to_eigen(q, fh)
        x = zeta * ratio * w
        mult = 1.0 / (1.0 + 1j * x)
        if nyq_bin is not None:
            mult = _fix_nyquist(mult, 1.0 / (1.0 + x**2), f.ndim, ax, nyq_bin)
        fh = _rotate_from_eigen(q, tmp * mult)
    return _inverse_fft(fh, ax, n, real_in)


def trig_interpolate(f, tau_star, axis: int = -1):
    """Evaluate the tau-Fourier series of ``f`` at off-grid points.

    ``tau_star`` must broadcast against the field with ``axis`` removed: one
    evaluation point per remaining grid index.  Large arguments should be
    reduced mod 2*pi by the caller before the phase loses digits.
    """
    f = np.asarray(f)
    real_in = np.isrealobj(f)
    n = f.shape[axis]
    fh = np.moveaxis(np.fft.fft(f, axis=axis), axis, -1) / n
    modes = np.fft.fftfreq(n) * n
    tau_star = np.asarray(tau_star, dtype=float)
    phases = np.exp(1j * tau_star[..., None] * modes)
    if n % 2 == 0:
        # unpaired Nyquist: cosine keeps real data real and is the symmetric
        # choice for complex data as well
        phases[..., n // 2] = np.cos(tau_star * (n // 2))
    out = np.sum(fh * phases, axis=-1)
    return out.real if real_in else out


def linear_interp(xs, values, x_star: float):
    """Two-point Lagrange interpolation on the bracketing interval.

    ``xs`` is sorted ascending with the matching entries of ``values`` on
    axis 0.  Raises :class:`ExtrapolationError` outside [xs[0], xs[-1]].
    """
    xs = np.asarray(xs, dtype=float)
    values = np.asarray(values)
    if not (xs[0] <= x_star <= xs[-1]):
        raise ExtrapolationError(
            f"query {x_star} outside the tabulated range [{xs[0]}, {xs[-1]}]"
        )
    i = int(np.searchsorted(xs, x_star, side="right")) - 1
    i = min(max(i, 0), len(xs) - 2)
    x1, x2 = xs[i], xs[i + 1]
    lam = (x_star - x1) / (x2 - x1)
    return (1.0 - lam) * values[i] + lam * values[i + 1]


def mean_free_antiderivative(g, axis: int = -1):
    """The unique mean-free tau-antiderivative of the mean-free part of g.

    Spectrally: mode m != 0 divided by i*m, mode 0 dropped.  This realizes
    the inverse of d_tau restricted to mean-free periodic functions.
    """
    g = np.asarray(g)
    real_in = np.isrealobj(g)
    n = g.shape[axis]
    gh = np.fft.fft(g, axis=axis)
    modes = np.fft.fftfreq(n) * n
    fac = np.zeros(n, dtype=complex)
    fac[1:] = 1.0 / (1j * modes[1:])
    gh *= fac.reshape(_axis_shape(g.ndim, axis % g.ndim, n))
    out = np.fft.ifft(gh, axis=axis)
    return out.real if real_in else out
