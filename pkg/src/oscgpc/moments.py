"""Per-grid-point moment records shared by the solvers and the harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MomentProfile:
    """Mean and standard deviation of one observable along a grid.

    Complex observables carry both components; real observables leave the
    imaginary columns at zero.
    """

    x: np.ndarray
    mean_re: np.ndarray
    mean_im: np.ndarray
    sd_re: np.ndarray
    sd_im: np.ndarray

    def __post_init__(self):
        n = len(self.x)
        for name in ("mean_re", "mean_im", "sd_re", "sd_im"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == ():
                arr = np.full(n, float(arr))
            if len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != grid length {n}")
            setattr(self, name, arr)

    @property
    def columns(self) -> tuple:
        return ("mean_re", "mean_im", "sd_re", "sd_im")

    @classmethod
    def from_samples(cls, x, values, weights, axis: int = -1) -> "MomentProfile":
        """Moments of nodal samples under quadrature weights.

        SD per real component is sqrt(sum w v^2 - mean^2), clipped at zero.
        """
        values = np.asarray(values)
        w = np.asarray(weights)
        shape = [1] * values.ndim
        shape[axis] = len(w)
        w = w.reshape(shape)
        mean = np.sum(values * w, axis=axis)
        var_re = np.clip(np.sum(values.real**2 * w, axis=axis) - mean.real**2,
                         0.0, None)
        var_im = np.clip(np.sum(values.imag**2 * w, axis=axis) - mean.imag**2,
                         0.0, None)
        return cls(x=np.asarray(x, dtype=float), mean_re=mean.real,
                   mean_im=np.asarray(mean).imag, sd_re=np.sqrt(var_re),
                   sd_im=np.sqrt(var_im))

    @classmethod
    def from_coeffs(cls, x, coeffs, axis: int = -1) -> "MomentProfile":
        """Moments straight from chaos coefficients: the mean is the first
        coefficient, the SD the l2 norm of the rest, per real component."""
        coeffs = np.moveaxis(np.asarray(coeffs), axis, -1)
        mean = coeffs[..., 0]
        sd_re = np.sqrt(np.sum(coeffs[..., 1:].real ** 2, axis=-1))
        sd_im = np.sqrt(np.sum(coeffs[..., 1:].imag ** 2, axis=-1))
        return cls(x=np.asarray(x, dtype=float), mean_re=mean.real,
                   mean_im=np.asarray(mean).imag, sd_re=sd_re, sd_im=sd_im)
