"""Coefficient presets for the benchmark experiments, plus a safe
expression evaluator for user-defined coefficients.

Scalar presets
--------------
* ``example21``  -- the nonlinear benchmark: r(u) = u^2/(u^2 + 2|u|^2),
  c = cos^2 x, a = (3/2 + cos 2x)(1 + z/2), complex trigonometric initial
  data on [-pi/2, pi/2].
* ``linear21``   -- the linear analytic-oracle case: r = 0, c = 1,
  a = 1 + z/2, same initial data.

Hopping presets
---------------
* ``example41``          -- avoided-crossing band gap
  E = (1 - cos(x/2) + sqrt(eps))(1 + z/2) on [-2pi, 2pi]^2.
* ``example41-big-gap``  -- O(1) band gap E = (10 - cos(x/2))(1 + z/2).

``custom`` presets take coefficient expressions evaluated in a numpy-only
namespace (variables x, z, p, u as appropriate).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError
from .hopping import HoppingProblem
from .scalar import ScalarProblem

_SAFE_NAMES = {
    "pi": np.pi,
    "e": math.e,
    "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "real": np.real, "imag": np.imag, "conj": np.conj,
    "minimum": np.minimum, "maximum": np.maximum,
}


def compile_expression(expr: str, variables: tuple):
    """Compile a coefficient expression over the given variable names.

    Only numpy functions from a fixed namespace are visible; double
    underscores are rejected outright.
    """
    if "__" in expr:
        raise ConfigurationError(f"invalid expression {expr!r}")
    try:
        code = compile(expr, "<coefficient>", "eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {expr!r}: {exc}") from exc
    for name in code.co_names:
        if name not in _SAFE_NAMES and name not in variables:
            raise ConfigurationError(
                f"unknown name {name!r} in expression {expr!r}; "
                f"allowed variables: {variables}"
            )

    def fn(*args):
        scope = dict(zip(variables, args))
        return eval(code, {"__builtins__": {}, **_SAFE_NAMES}, scope)

    fn.expression = expr
    return fn


def _example21_u_in(x, z):
    return (1.0 + 0.5 * np.cos(2 * x)) + 1j * (1.0 + 0.5 * np.sin(2 * x)) + 0.0 * z


def _example21_r(u):
    return u**2 / (u**2 + 2.0 * np.abs(u) ** 2)


def scalar_problem(preset: str, eps: float, custom: dict | None = None
                   ) -> ScalarProblem:
    preset = preset.lower()
    if preset == "example21":
        return ScalarProblem(
            c=lambda x: np.cos(x) ** 2,
            a=lambda x, z: (1.5 + np.cos(2 * x)) * (1.0 + 0.5 * z),
            u_in=_example21_u_in,
            r=_example21_r,
            eps=eps,
            domain=(-np.pi / 2, np.pi / 2),
        )
    if preset == "linear21":
        return ScalarProblem(
            c=lambda x: np.ones_like(x),
            a=lambda x, z: np.ones_like(x) * (1.0 + 0.5 * z),
            u_in=_example21_u_in,
            r=None,
            eps=eps,
            domain=(-np.pi / 2, np.pi / 2),
        )
    if preset == "custom":
        custom = custom or {}
        required = ("c", "a", "u_in", "domain")
        missing = [k for k in required if k not in custom]
        if missing:
            raise ConfigurationError(
                f"custom scalar preset needs expressions for {missing}")
        lo, hi = (float(v) for v in str(custom["domain"]).split(","))
        r_expr = custom.get("r")
        return ScalarProblem(
            c=compile_expression(custom["c"], ("x",)),
            a=compile_expression(custom["a"], ("x", "z")),
            u_in=compile_expression(custom["u_in"], ("x", "z")),
            r=None if r_expr in (None, "", "0") else compile_expression(r_expr, ("u",)),
            eps=eps,
            domain=(lo, hi),
        )
    raise ConfigurationError(f"unknown scalar preset {preset!r}")


def _gaussian_bump(x, p):
    return (1.0 + 0.5 * np.cos(x)) * np.exp(-(p**2) / 2.0) / np.sqrt(2.0 * np.pi)


def hopping_problem(preset: str, eps: float, custom: dict | None = None
                    ) -> HoppingProblem:
    preset = preset.lower()
    common = dict(
        b_i=lambda x, p: -0.5 * np.sin(p + 1.0) + 0.0 * x,
        f_plus_in=_gaussian_bump,
        f_minus_in=_gaussian_bump,
        f_i_in=lambda x, p: ((1.0 + 0.5 * np.sin(x)) + 1j * (1.0 + 0.5 * np.cos(x)))
        * np.exp(-(p**2) / 2.0) / np.sqrt(2.0 * np.pi),
        eps=eps,
        x_domain=(-2 * np.pi, 2 * np.pi),
        p_domain=(-2 * np.pi, 2 * np.pi),
    )
    if preset == "example41":
        root_eps = np.sqrt(eps)
        return HoppingProblem(
            E=lambda x, z: (1.0 - np.cos(x / 2) + root_eps) * (1.0 + 0.5 * z),
            **common,
        )
    if preset in ("example41-big-gap", "example41_big_gap"):
        return HoppingProblem(
            E=lambda x, z: (10.0 - np.cos(x / 2)) * (1.0 + 0.5 * z),
            **common,
        )
    if preset == "custom":
        custom = custom or {}
        required = ("E", "b_i", "f_plus_in", "f_minus_in", "f_i_in",
                    "x_domain", "p_domain")
        missing = [k for k in required if k not in custom]
        if missing:
            raise ConfigurationError(
                f"custom hopping preset needs expressions for {missing}")
        xd = tuple(float(v) for v in str(custom["x_domain"]).split(","))
        pd = tuple(float(v) for v in str(custom["p_domain"]).split(","))
        return HoppingProblem(
            E=compile_expression(custom["E"], ("x", "z")),
            b_i=compile_expression(custom["b_i"], ("x", "p")),
            f_plus_in=compile_expression(custom["f_plus_in"], ("x", "p")),
            f_minus_in=compile_expression(custom["f_minus_in"], ("x", "p")),
            f_i_in=compile_expression(custom["f_i_in"], ("x", "p")),
            eps=eps,
            x_domain=xd,
            p_domain=pd,
        )
    raise ConfigurationError(f"unknown hopping preset {preset!r}")


SCALAR_PRESETS = ("example21", "linear21", "custom")
HOPPING_PRESETS = ("example41", "example41-big-gap", "custom")
