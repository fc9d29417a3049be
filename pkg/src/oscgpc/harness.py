"""Batch experiment harness: configuration, runners, comparisons, sweeps, CSV.

Configuration files are flat ``key = value`` text (``#`` starts a comment
line); every key can be overridden on the command line with ``--set``.
Unknown keys are rejected and validation reports all violations at once.
Reference runs for sweeps are described by ``ref_*`` keys and cached by a
hash covering every semantic field.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import presets
from .errors import ConfigurationError, GridMismatchError
from .hopping import (
    HoppingConfig,
    densities,
    reconstruct_hopping,
    solve_hopping_collocation,
    solve_hopping_direct,
    solve_hopping_n1,
    solve_hopping_n2,
)
from .moments import MomentProfile
from .scalar import (
    ScalarConfig,
    reconstruct_n1,
    reconstruct_n2,
    solve_collocation,
    solve_direct,
    solve_n1,
    solve_n2,
)

_SCALAR_METHODS = ("direct", "n1", "n2", "sc-d", "sc-n1", "sc-n2")
_HOPPING_METHODS = ("direct", "n1", "n2", "sc-d")
_METHOD_ALIASES = {
    "d": "direct", "direct": "direct", "sg-d": "direct",
    "n1": "n1", "sg-n1": "n1",
    "n2": "n2", "sg-n2": "n2",
    "sc-d": "sc-d", "scd": "sc-d", "collocation": "sc-d", "sc": "sc-d",
    "sc-n1": "sc-n1", "sc-n2": "sc-n2",
}
_BOOL_KEYS = ("upwind", "source_rk2", "cfl_guard")
_INT_KEYS = ("K", "P", "N_x", "N_p", "N_tau", "N_g", "N_s", "N_c", "seed")
_FLOAT_KEYS = ("epsilon", "dt", "ds", "T")
_STR_KEYS = ("model", "method", "preset")
_KNOWN_KEYS = set(_BOOL_KEYS) | set(_INT_KEYS) | set(_FLOAT_KEYS) | set(_STR_KEYS)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one solver run."""

    model: str
    method: str
    preset: str
    epsilon: float
    n_x: int
    dt: float
    t_final: float
    k_modes: int | None = None
    n_p: int | None = None
    n_tau: int | None = None
    ds: float | None = None
    n_g: int | None = None
    n_s: int | None = None
    n_c: int | None = None
    seed: int | None = None
    upwind: bool = False
    source_rk2: bool = False
    cfl_guard: bool = True
    coeffs: tuple = ()           # sorted (name, expression) pairs
    reference: tuple = ()        # sorted raw (key, value) reference overrides

    def canonical_text(self) -> str:
        """Stable textual form of every semantic field (reference excluded)."""
        items = []
        for name in ("model", "method", "preset", "epsilon", "n_x", "dt",
                     "t_final", "k_modes", "n_p", "n_tau", "ds", "n_g", "n_s",
                     "n_c", "seed", "upwind", "source_rk2", "cfl_guard"):
            items.append(f"{name}={getattr(self, name)!r}")
        for name, expr in self.coeffs:
            items.append(f"coeff_{name}={expr!r}")
        return "\n".join(items) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def reference_config(self) -> "ExperimentConfig":
        """The reference run described by the ref_* keys (which override the
        base settings)."""
        if not self.reference:
            raise ConfigurationError(
                "no reference specified: add ref_* keys (e.g. ref_method, "
                "ref_N_x, ref_dt) to the configuration"
            )
        mapping = dict(self.as_mapping())
        mapping.update(dict(self.reference))
        return config_from_mapping(mapping)

    def as_mapping(self) -> dict:
        """External key=value form (strings), omitting unset fields."""
        out = {
            "model": self.model, "method": self.method, "preset": self.preset,
            "epsilon": repr(self.epsilon), "N_x": str(self.n_x),
            "dt": repr(self.dt), "T": repr(self.t_final),
        }
        if self.k_modes is not None:
            out["K"] = str(self.k_modes)
        for key, val in (("N_p", self.n_p), ("N_tau", self.n_tau),
                         ("N_g", self.n_g), ("N_s", self.n_s),
                         ("N_c", self.n_c), ("seed", self.seed)):
            if val is not None:
                out[key] = str(val)
        if self.ds is not None:
            out["ds"] = repr(self.ds)
        for key, val in (("upwind", self.upwind),
                         ("source_rk2", self.source_rk2)):
            if val:
                out[key] = "true"
        if not self.cfl_guard:
            out["cfl_guard"] = "false"
        for name, expr in self.coeffs:
            out[f"coeff_{name}"] = expr
        return out


def parse_config_text(text: str) -> dict:
    """Parse flat key = value lines into a raw string mapping."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigurationError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Validate a raw string mapping; reports every violation at once."""
    errors: list[str] = []
    raw = dict(mapping)
    coeffs = {}
    reference = {}
    for key in list(raw):
        if key.startswith("coeff_"):
            coeffs[key[len("coeff_"):]] = raw.pop(key)
        elif key.startswith("ref_"):
            sub = key[len("ref_"):]
            if sub not in _KNOWN_KEYS and not sub.startswith("coeff_"):
                errors.append(f"unknown reference key {key!r}")
            reference[sub] = raw.pop(key)
    unknown = sorted(set(raw) - _KNOWN_KEYS)
    for key in unknown:
        errors.append(f"unknown key {key!r}")
        raw.pop(key)

    parsed: dict = {}
    for key, value in raw.items():
        try:
            if key in _BOOL_KEYS:
                parsed[key] = _parse_bool(value)
            elif key in _INT_KEYS:
                parsed[key] = int(value)
            elif key in _FLOAT_KEYS:
                parsed[key] = float(value)
            else:
                parsed[key] = value.strip().lower()
        except ValueError:
            errors.append(f"key {key!r}: cannot parse value {value!r}")

    model = parsed.get("model")
    if model not in ("scalar", "hopping"):
        errors.append("model must be 'scalar' or 'hopping'")
    method = _METHOD_ALIASES.get(parsed.get("method", ""))
    if method is None:
        errors.append(f"method must be one of {_SCALAR_METHODS}")
    elif model == "hopping" and method not in _HOPPING_METHODS:
        errors.append(f"method {method!r} is not available for the hopping model")

    preset = parsed.get("preset")
    if model == "scalar" and preset not in presets.SCALAR_PRESETS:
        errors.append(f"preset must be one of {presets.SCALAR_PRESETS}")
    if model == "hopping" and preset not in presets.HOPPING_PRESETS:
        errors.append(f"preset must be one of {presets.HOPPING_PRESETS}")
    if preset != "custom" and coeffs:
        errors.append("coeff_* keys are only allowed with preset = custom")

    eps = parsed.get("epsilon")
    if eps is None or not (0.0 < eps <= 1.0):
        errors.append("epsilon must be given, in (0, 1]")

    k_modes = parsed.get("K")
    p_deg = parsed.get("P")
    if k_modes is not None and p_deg is not None and k_modes != p_deg + 1:
        errors.append(f"inconsistent K={k_modes} and P={p_deg} (need K = P + 1)")
    if k_modes is None and p_deg is not None:
        k_modes = p_deg + 1
    galerkin = method in ("direct", "n1", "n2")
    if galerkin and k_modes is None:
        errors.append(f"K (or P) is required for the Galerkin method {method!r}")
    if k_modes is not None and k_modes < 1:
        errors.append("K must be >= 1")

    for key, cond in (("N_x", lambda v: v >= 2), ("dt", lambda v: v > 0),
                      ("T", lambda v: v > 0)):
        if parsed.get(key) is None:
            errors.append(f"{key} is required")
        elif not cond(parsed[key]):
            errors.append(f"{key} has an invalid value {parsed[key]}")
    for key in ("N_p", "N_tau", "N_g", "N_s", "N_c"):
        if parsed.get(key) is not None and parsed[key] < 1:
            errors.append(f"{key} must be positive")
    if parsed.get("ds") is not None and parsed["ds"] <= 0:
        errors.append("ds must be positive")

    if errors:
        raise ConfigurationError(
            "invalid configuration:\n  - " + "\n  - ".join(errors))

    n_tau = parsed.get("N_tau")
    if n_tau is None:
        n_tau = 32 if model == "scalar" else 8
    n_p = parsed.get("N_p")
    if model == "hopping" and n_p is None:
        n_p = 32
    n_c = parsed.get("N_c")
    if method.startswith("sc") and n_c is None:
        n_c = 64 if model == "scalar" else 32

    return ExperimentConfig(
        model=model, method=method, preset=preset, epsilon=eps,
        n_x=parsed["N_x"], dt=parsed["dt"], t_final=parsed["T"],
        k_modes=k_modes, n_p=n_p, n_tau=n_tau, ds=parsed.get("ds"),
        n_g=parsed.get("N_g"), n_s=parsed.get("N_s"), n_c=n_c,
        seed=parsed.get("seed"), upwind=parsed.get("upwind", False),
        source_rk2=parsed.get("source_rk2", False),
        cfl_guard=parsed.get("cfl_guard", True),
        coeffs=tuple(sorted(coeffs.items())),
        reference=tuple(sorted(reference.items())),
    )


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a config file and apply ``key=value`` command-line overrides."""
    try:
        with open(path, encoding="utf-8") as fh:
            mapping = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping)


# ---------------------------------------------------------------------------
# running experiments


def _scalar_solver_config(cfg: ExperimentConfig) -> ScalarConfig:
    return ScalarConfig(
        k_modes=cfg.k_modes or 1, n_x=cfg.n_x, n_tau=cfg.n_tau, dt=cfg.dt,
        t_final=cfg.t_final, ds=cfg.ds, n_quad=cfg.n_g, n_recon=cfg.n_s,
        n_colloc=cfg.n_c or 64, upwind=cfg.upwind,
    )


def _hopping_solver_config(cfg: ExperimentConfig) -> HoppingConfig:
    return HoppingConfig(
        k_modes=cfg.k_modes or 1, n_x=cfg.n_x, n_p=cfg.n_p, n_tau=cfg.n_tau,
        dt=cfg.dt, t_final=cfg.t_final, ds=cfg.ds, n_quad=cfg.n_g,
        n_recon=cfg.n_s, n_colloc=cfg.n_c or 32, source_rk2=cfg.source_rk2,
        cfl_guard=cfg.cfl_guard,
    )


def hopping_profiles(nodal, p_slice: float = 0.0) -> dict:
    """The eight hopping observables as moment profiles: the kinetic fields
    on the x line p = p_slice and the three densities."""
    i0 = int(np.argmin(np.abs(nodal.p - p_slice)))
    w = nodal.z_weights
    rho_p = densities(nodal.f_plus, nodal.dp)
    rho_m = densities(nodal.f_minus, nodal.dp)
    rho_i = densities(nodal.f_i, nodal.dp)
    obs = {
        "f_plus": nodal.f_plus[:, i0], "f_minus": nodal.f_minus[:, i0],
        "re_f_i": nodal.f_i[:, i0].real, "im_f_i": nodal.f_i[:, i0].imag,
        "rho_plus": rho_p, "rho_minus": rho_m,
        "re_rho_i": rho_i.real, "im_rho_i": rho_i.imag,
    }
    return {name: MomentProfile.from_samples(nodal.x, vals, w, axis=-1)
            for name, vals in obs.items()}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Dispatch to the configured solver; returns {observable: MomentProfile}.

    Deterministic: identical configurations produce identical profiles.
    """
    profiles, _ = execute(cfg)
    return profiles


def execute(cfg: ExperimentConfig):
    """Like :func:`run_experiment` but also returns raw solver output."""
    if cfg.model == "scalar":
        problem = presets.scalar_problem(cfg.preset, cfg.epsilon,
                                         dict(cfg.coeffs))
        scfg = _scalar_solver_config(cfg)
        if cfg.method == "direct":
            res = solve_direct(problem, scfg)
            prof = MomentProfile.from_coeffs(res.x, res.coeffs)
            return {"u": prof}, res
        if cfg.method == "n1":
            res = solve_n1(problem, scfg)
            rec = reconstruct_n1(res, n_recon=scfg.n_recon_eff)
        elif cfg.method == "n2":
            res = solve_n2(problem, scfg)
            rec = reconstruct_n2(res, n_recon=scfg.n_recon_eff)
        else:
            inner = cfg.method.split("-")[1]
            res = solve_collocation(problem, scfg, inner=inner)
            prof = MomentProfile.from_samples(res.x, np.moveaxis(res.u, 0, -1),
                                              res.z_weights, axis=-1)
            return {"u": prof}, res
        prof = MomentProfile.from_samples(rec.x, rec.u, rec.z_weights, axis=-1)
        return {"u": prof}, res

    problem = presets.hopping_problem(cfg.preset, cfg.epsilon, dict(cfg.coeffs))
    hcfg = _hopping_solver_config(cfg)
    if cfg.method == "direct":
        res = solve_hopping_direct(problem, hcfg)
        nodal = reconstruct_hopping(res, n_recon=hcfg.n_recon_eff)
    elif cfg.method == "n1":
        res = solve_hopping_n1(problem, hcfg)
        nodal = reconstruct_hopping(res, n_recon=hcfg.n_recon_eff)
    elif cfg.method == "n2":
        res = solve_hopping_n2(problem, hcfg)
        nodal = reconstruct_hopping(res)
    else:
        res = solve_hopping_collocation(problem, hcfg)
        nodal = res.as_nodal()
    return hopping_profiles(nodal), res


# ---------------------------------------------------------------------------
# CSV IO


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_profile_csv(profile: MomentProfile, path: str, complex_obs: bool = True):
    """Write one observable.  Complex observables use the scalar schema
    (x, mean_re, mean_im, sd_re, sd_im); real ones use (x, mean, sd)."""
    lines = []
    if complex_obs:
        lines.append("x,mean_re,mean_im,sd_re,sd_im")
        for i, xv in enumerate(profile.x):
            lines.append(",".join(_fmt(v) for v in (
                xv, profile.mean_re[i], profile.mean_im[i],
                profile.sd_re[i], profile.sd_im[i])))
    else:
        lines.append("x,mean,sd")
        for i, xv in enumerate(profile.x):
            lines.append(",".join(_fmt(v) for v in (
                xv, profile.mean_re[i], profile.sd_re[i])))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_profile_csv(path: str) -> MomentProfile:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    cols = {name: data[:, i] for i, name in enumerate(header)}
    x = cols["x"]
    zeros = np.zeros_like(x)
    if "mean_re" in cols:
        return MomentProfile(x=x, mean_re=cols["mean_re"],
                             mean_im=cols.get("mean_im", zeros),
                             sd_re=cols["sd_re"],
                             sd_im=cols.get("sd_im", zeros))
    return MomentProfile(x=x, mean_re=cols["mean"], mean_im=zeros,
                         sd_re=cols["sd"], sd_im=zeros)


def write_profiles(profiles: dict, out_dir: str, model: str):
    os.makedirs(out_dir, exist_ok=True)
    complex_obs = model == "scalar"
    for name, prof in profiles.items():
        write_profile_csv(prof, os.path.join(out_dir, f"{name}.csv"),
                          complex_obs=complex_obs)


def write_table_csv(rows: list, header: tuple, path: str):
    """Generic table writer (sweep results, comparison reports)."""
    lines = [",".join(header)]
    for row in rows:
        parts = []
        for v in row:
            if isinstance(v, float):
                parts.append(_fmt(v))
            elif v is None:
                parts.append("")
            else:
                parts.append(str(v))
        lines.append(",".join(parts))
    _atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# comparisons


@dataclass
class ComparisonRow:
    observable: str
    column: str
    norm: str
    error: float
    n_points: int


def _shared_indices(xc, xr, atol=1e-8):
    """Indices (ic, ir) of abscissae common to both grids."""
    order = np.argsort(xr)
    xr_sorted = xr[order]
    pos = np.searchsorted(xr_sorted, xc)
    ic, ir = [], []
    for i, xv in enumerate(xc):
        for j in (pos[i] - 1, pos[i]):
            if 0 <= j < len(xr_sorted) and abs(xr_sorted[j] - xv) <= atol:
                ic.append(i)
                ir.append(order[j])
                break
    return np.array(ic, dtype=int), np.array(ir, dtype=int)


def _norm(diff: np.ndarray, kind: str) -> float:
    if kind == "linf":
        return float(np.max(np.abs(diff))) if diff.size else 0.0
    if kind == "l2":
        return float(np.sqrt(np.mean(np.abs(diff) ** 2))) if diff.size else 0.0
    raise ConfigurationError(f"unknown norm {kind!r} (use linf or l2)")


def compare_profiles(candidate: dict, reference: dict, norm: str = "linf",
                     window: tuple | None = None) -> list:
    """Per-observable, per-column errors at shared grid points.

    ``window = (lo, hi)`` restricts the comparison to lo <= x <= hi.
    Raises :class:`GridMismatchError` when no grid points are shared.
    """
    if isinstance(candidate, MomentProfile):
        candidate = {"value": candidate}
    if isinstance(reference, MomentProfile):
        reference = {"value": reference}
    shared_obs = sorted(set(candidate) & set(reference))
    if not shared_obs:
        raise GridMismatchError("candidate and reference share no observables")
    rows = []
    for name in shared_obs:
        cand, ref = candidate[name], reference[name]
        ic, ir = _shared_indices(cand.x, ref.x)
        if ic.size == 0:
            raise GridMismatchError(
                f"no shared grid points for observable {name!r}")
        if window is not None:
            lo, hi = window
            keep = (cand.x[ic] >= lo) & (cand.x[ic] <= hi)
            ic, ir = ic[keep], ir[keep]
        for col in cand.columns:
            diff = getattr(cand, col)[ic] - getattr(ref, col)[ir]
            rows.append(ComparisonRow(observable=name, column=col, norm=norm,
                                      error=_norm(diff, norm),
                                      n_points=int(ic.size)))
    return rows


# ---------------------------------------------------------------------------
# sweeps with reference caching


def _cache_path(cache_dir: str, cfg: ExperimentConfig) -> str:
    return os.path.join(cache_dir, f"ref_{cfg.config_hash()}.npz")


def cached_run(cfg: ExperimentConfig, cache_dir: str | None = None) -> dict:
    """Run an experiment, reusing an on-disk result when the config hash
    matches."""
    if cache_dir is None:
        return run_experiment(cfg)
    path = _cache_path(cache_dir, cfg)
    if os.path.exists(path):
        with np.load(path) as data:
            names = sorted({key.split("/")[0] for key in data.files})
            return {
                name: MomentProfile(
                    x=data[f"{name}/x"], mean_re=data[f"{name}/mean_re"],
                    mean_im=data[f"{name}/mean_im"], sd_re=data[f"{name}/sd_re"],
                    sd_im=data[f"{name}/sd_im"])
                for name in names
            }
    profiles = run_experiment(cfg)
    os.makedirs(cache_dir, exist_ok=True)
    payload = {}
    for name, prof in profiles.items():
        for col in ("x",) + prof.columns:
            payload[f"{name}/{col}"] = getattr(prof, col)
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".npz.tmp")
    os.close(fd)
    try:
        np.savez(tmp, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return profiles


@dataclass
class SweepRow:
    param: str
    value: float
    observable: str
    column: str
    norm: str
    error: float
    observed_order: float | None


def convergence_sweep(cfg: ExperimentConfig, param: str, values: list,
                      cache_dir: str | None = None, norm: str = "linf",
                      window: tuple | None = None) -> list:
    """Run the experiment for each parameter value against a fixed reference.

    The reference comes from the config's ref_* keys and is cached by config
    hash.  Emits one row per (value, observable, column) with the error and,
    where meaningful, the observed order (log-log slope against the previous
    value).
    """
    if len(values) < 3:
        raise ConfigurationError("a sweep needs at least 3 parameter values")
    reference = cached_run(cfg.reference_config(), cache_dir)
    base = cfg.as_mapping()
    runs = []
    for value in values:
        mapping = dict(base)
        mapping[param] = str(value)
        run_cfg = config_from_mapping(mapping)
        profiles = cached_run(run_cfg, cache_dir)
        runs.append((float(value), compare_profiles(profiles, reference,
                                                    norm=norm, window=window)))
    rows: list[SweepRow] = []
    prev: dict = {}
    prev_value = None
    for value, comparisons in runs:
        for comp in comparisons:
            key = (comp.observable, comp.column)
            order = None
            if prev_value is not None and key in prev:
                e0, e1 = prev[key], comp.error
                if e0 > 0 and e1 > 0 and value != prev_value:
                    order = float(np.log(e0 / e1) / np.log(prev_value / value))
            rows.append(SweepRow(param=param, value=value,
                                 observable=comp.observable, column=comp.column,
                                 norm=norm, error=comp.error,
                                 observed_order=order))
            prev[key] = comp.error
        prev_value = value
    return rows
