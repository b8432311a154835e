"""Experiment config files (TOML) and their schema.

Layout::

    seed = 7
    experiments = ["variance_direct", "bad_lower_check"]

    [potential]
    variant = "exponential"        # exponential | laplace_measure | quadratic | perturbed
    beta = 1.0

    [simulation]
    theta = 1.0
    N = [8, 16]
    replicas = 2000
    dt = 0.01
    scheme = "tamed_euler"
    t_rule = { kind = "characteristic" }

Optional per-experiment tables: ``gaussian_closed_form``, ``generating_function``,
``exponent``, ``tails``, ``lower_bound``, ``audit``.  Every default is written
back into the resolved config so the manifest has no hidden values.
"""
import copy
import hashlib
import json
import re

import tomli

from . import potential as pot
from ._kernels import SCHEMES

EXPERIMENTS = (
    "gaussian_closed_form", "variance_direct", "variance_via_representation",
    "bad_lower_check", "generating_function", "exponent_fit", "offchar_normality",
    "tail_bound_audit", "lower_bound_probe", "marginal_stationarity",
)

DEFAULTS = {
    "seed": 0,
    "experiments": ["variance_direct"],
    "potential": {"variant": "exponential", "beta": 1.0},
    "simulation": {
        "theta": 1.0, "N": [8], "replicas": 1000, "dt": 0.01, "scheme": "tamed_euler",
        "t_rule": {"kind": "characteristic"}, "max_failure_rate": 0.01, "n_batches": 32,
    },
    "gaussian_closed_form": {"N": [1, 4, 16], "t_mults": [0.5, 1.0, 2.0],
                             "scheme": "exact_gaussian", "dt": 0.0},
    "generating_function": {"eta_offsets": [-0.05, 0.05], "richardson": False},
    "exponent": {"band": [0.55, 0.80]},
    "tails": {"w": [0.0, 2.0, 4.0, 8.0], "C0": 1.0},
    "lower_bound": {"c2": 0.1, "threshold": 0.05},
    "representation": {"halve_dt": False},
    "audit": {"allow_quadratic": False, "x_min": -30.0, "x_max": 30.0, "n_grid": 4096},
}

T_RULES = {"characteristic": (), "fixed": ("t",), "scaled": ("c",), "offset": ("c",)}


class ConfigError(ValueError):
    """Schema violation; ``diagnostics`` holds (field, line, message) triples."""

    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(_fmt_diag(d) for d in diagnostics))


def _fmt_diag(d):
    field, line, msg = d
    where = f"line {line}: " if line else ""
    return f"{where}{field}: {msg}"


def _line_of(text, field):
    if not text:
        return None
    key = re.escape(field.split(".")[-1].split("[")[0])
    for i, ln in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{key}\s*=", ln):
            return i
    return None


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "t_rule":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(errs, d, key, path, lo=None, hi=None, integer=False, strict_lo=False):
    v = d.get(key)
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type:
        errs.append((path, f"must be {'an integer' if integer else 'a number'}, got {v!r}"))
        return
    if lo is not None and (v <= lo if strict_lo else v < lo):
        errs.append((path, f"must be {'>' if strict_lo else '>='} {lo}, got {v!r}"))
    if hi is not None and v > hi:
        errs.append((path, f"must be <= {hi}, got {v!r}"))


def _num_list(errs, d, key, path, lo=None, integer=False, strict_lo=False, min_len=1):
    v = d.get(key)
    if not isinstance(v, list) or len(v) < min_len:
        errs.append((path, f"must be a list with at least {min_len} entries"))
        return
    for i, x in enumerate(v):
        _num(errs, {"x": x}, "x", f"{path}[{i}]", lo, integer=integer, strict_lo=strict_lo)


def validate(cfg, text=None):
    """Return the resolved config or raise ConfigError."""
    errs = []
    unknown = set(cfg) - set(DEFAULTS)
    for k in sorted(unknown):
        errs.append((k, "unknown top-level key"))
    r = _merge(DEFAULTS, {k: v for k, v in cfg.items() if k not in unknown})
    _num(errs, r, "seed", "seed", 0, integer=True)
    ex = r["experiments"]
    if not isinstance(ex, list) or not ex:
        errs.append(("experiments", "must be a non-empty list"))
    else:
        for e in ex:
            if e not in EXPERIMENTS:
                errs.append(("experiments", f"unknown experiment {e!r}"))
    s = r["simulation"]
    for k in sorted(set(s) - set(DEFAULTS["simulation"])):
        errs.append((f"simulation.{k}", "unknown key"))
    _num(errs, s, "theta", "simulation.theta", 0, strict_lo=True)
    _num_list(errs, s, "N", "simulation.N", 1, integer=True)
    _num(errs, s, "replicas", "simulation.replicas", 2, integer=True)
    _num(errs, s, "dt", "simulation.dt", 0, strict_lo=True)
    _num(errs, s, "max_failure_rate", "simulation.max_failure_rate", 0, 1)
    _num(errs, s, "n_batches", "simulation.n_batches", 2, integer=True)
    if s.get("scheme") not in SCHEMES:
        errs.append(("simulation.scheme", f"must be one of {sorted(SCHEMES)}"))
    tr = s.get("t_rule")
    if not isinstance(tr, dict) or tr.get("kind") not in T_RULES:
        errs.append(("simulation.t_rule", f"kind must be one of {sorted(T_RULES)}"))
    else:
        for k in T_RULES[tr["kind"]]:
            _num(errs, tr, k, f"simulation.t_rule.{k}", 0 if tr["kind"] != "offset" else None)
    g = r["gaussian_closed_form"]
    _num_list(errs, g, "N", "gaussian_closed_form.N", 1, integer=True)
    _num_list(errs, g, "t_mults", "gaussian_closed_form.t_mults", 0)
    _num(errs, g, "dt", "gaussian_closed_form.dt", 0)
    if g.get("scheme") not in SCHEMES:
        errs.append(("gaussian_closed_form.scheme", f"must be one of {sorted(SCHEMES)}"))
    _num_list(errs, r["generating_function"], "eta_offsets", "generating_function.eta_offsets")
    _num_list(errs, r["exponent"], "band", "exponent.band", min_len=2)
    _num_list(errs, r["tails"], "w", "tails.w", 0)
    _num(errs, r["tails"], "C0", "tails.C0", 0)
    _num(errs, r["lower_bound"], "c2", "lower_bound.c2", 0)
    _num(errs, r["lower_bound"], "threshold", "lower_bound.threshold", 0, 1)
    if not isinstance(r["audit"].get("allow_quadratic"), bool):
        errs.append(("audit.allow_quadratic", "must be true or false"))
    if not isinstance(r["generating_function"].get("richardson"), bool):
        errs.append(("generating_function.richardson", "must be true or false"))
    if not isinstance(r["representation"].get("halve_dt"), bool):
        errs.append(("representation.halve_dt", "must be true or false"))
    p = r["potential"]
    if "variant" in cfg.get("potential", {}):
        p = copy.deepcopy(cfg["potential"])
        r["potential"] = p
    try:
        pot.from_dict(p)
    except (pot.PotentialError, KeyError, TypeError) as exc:
        errs.append(("potential", str(exc) if not isinstance(exc, KeyError) else f"missing {exc}"))
    if errs:
        raise ConfigError([(f, _line_of(text, f), m) for f, m in errs])
    return r


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    try:
        cfg = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError([("<file>", int(m.group(1)) if m else None, str(exc))]) from None
    return validate(cfg, text)


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
