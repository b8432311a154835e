"""Command line entry point.

Exit codes: 0 success, 2 invalid config or request, 3 explosion rate above
the configured limit, 4 property violations found (reports are still written).
The default thread count comes from OYDIFF_THREADS.
"""
import argparse
import copy
import csv
from dataclasses import dataclass, field, asdict
import datetime as _dt
import io
import json
import os
import sys

import numpy as np

from . import __version__
from . import config as C
from . import dynamics as dyn
from . import equilibrium as eq
from . import experiments as X
from . import potential as pot
from . import pseudo_gibbs as psg

EXIT_OK, EXIT_CONFIG, EXIT_EXPLOSION, EXIT_VIOLATION = 0, 2, 3, 4
THREADS_ENV = "OYDIFF_THREADS"


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    started: str
    finished: str = None
    outputs: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def set_threads(n=None):
    import numba
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def experiment_config(resolved):
    s = resolved["simulation"]
    return X.ExperimentConfig(
        potential=pot.from_dict(resolved["potential"]), theta=float(s["theta"]),
        N_list=tuple(s["N"]), t_rule=dict(s["t_rule"]), replicas=int(s["replicas"]),
        base_seed=int(resolved["seed"]), scheme=s["scheme"], dt=float(s["dt"]),
        max_failure_rate=float(s["max_failure_rate"]), n_batches=int(s["n_batches"]))


def _audit_gate(resolved, names):
    uses_potential = [n for n in names if n != "gaussian_closed_form"]
    if not uses_potential:
        return
    spec = pot.from_dict(resolved["potential"])
    a = resolved["audit"]
    if spec.variant == "quadratic" and a["allow_quadratic"]:
        return
    res = pot.audit_oy_type(spec, a["x_min"], a["x_max"], a["n_grid"])
    if not res.passed:
        raise C.ConfigError([("potential", None, f"potential audit failed: {res.reason}; "
                              "set audit.allow_quadratic = true for the Gaussian control")])


def run_experiment(name, resolved):
    cfg = experiment_config(resolved)
    if name == "gaussian_closed_form":
        g = resolved["gaussian_closed_form"]
        return X.gaussian_closed_form(tuple(g["N"]), tuple(g["t_mults"]), cfg.replicas,
                                      cfg.base_seed, g["scheme"], g["dt"] or None)
    if name == "variance_direct":
        return X.variance_direct(cfg)
    if name == "variance_via_representation":
        return X.variance_via_representation(cfg, resolved["representation"]["halve_dt"])
    if name == "bad_lower_check":
        return X.bad_lower_check(cfg)
    if name == "generating_function":
        rows, passed = [], []
        gf = resolved["generating_function"]
        for off in gf["eta_offsets"]:
            r = X.generating_function_check(cfg, cfg.theta + off, gf["richardson"])
            rows += r.rows
            passed.append(r.passed)
        return X.ExperimentResult("generating_function", rows, all(passed))
    if name == "exponent_fit":
        return X.exponent_fit(cfg, tuple(resolved["exponent"]["band"]))
    if name == "offchar_normality":
        return X.offchar_normality(cfg)
    if name == "tail_bound_audit":
        t = resolved["tails"]
        return X.tail_bound_audit(cfg, t["w"], t["C0"])
    if name == "lower_bound_probe":
        lb = resolved["lower_bound"]
        return X.lower_bound_probe(cfg, lb["c2"], lb["threshold"])
    if name == "marginal_stationarity":
        return X.marginal_stationarity(cfg)
    raise C.ConfigError([("experiments", None, f"unknown experiment {name!r}")])


def execute(resolved, out_dir=None, stream=None):
    """Run every configured experiment; returns (manifest, exit code)."""
    names = list(resolved["experiments"])
    _audit_gate(resolved, names)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    man = RunManifest(C.config_hash(resolved), int(resolved["seed"]), __version__, _now(),
                      config=copy.deepcopy(resolved))
    results = []
    code = EXIT_OK
    for name in names:
        res = run_experiment(name, resolved)
        results.append(res)
        man.verdicts[name] = res.passed
        man.failures[name] = int(sum(r.get("failed", 0) or 0 for r in res.rows))
        if res.passed is False:
            code = EXIT_VIOLATION
        if out_dir is not None:
            base = os.path.join(out_dir, name)
            X.write_reports([res], base + ".csv", base + ".json")
            man.outputs[name] = {"csv": base + ".csv", "json": base + ".json"}
    if stream is not None:
        stream.write(_csv_text(results))
    man.finished = _now()
    if out_dir is not None:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(X._jsonable(asdict(man)), fh, indent=2, sort_keys=True)
    return man, code


def _csv_text(results):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(X.REPORT_FIELDS)
    for res in results:
        for r in res.rows:
            wr.writerow([X._fmt(r.get(k)) for k in X.REPORT_FIELDS])
    return buf.getvalue()


# ----------------------------------------------------------------------------- flags

def _ints(s):
    return [int(x) for x in s.split(",") if x]


def _floats(s):
    return [float(x) for x in s.split(",") if x]


def _atoms(s):
    out = []
    for item in s.split(","):
        a, b = item.split(":")
        out.append([float(a), float(b)])
    return out


def _add_common(p, experiments=True):
    p.add_argument("--config", help="TOML config providing defaults for these flags")
    p.add_argument("--potential", "--variant", dest="variant",
                   choices=["exponential", "laplace_measure", "quadratic", "perturbed"])
    p.add_argument("--beta", type=float)
    p.add_argument("--atoms", type=_atoms, help="laplace_measure atoms as s:w,s:w")
    p.add_argument("--eps", type=float, help="bump amplitude for perturbed")
    p.add_argument("--center", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--N", type=_ints, help="comma separated chain lengths")
    p.add_argument("--t", type=float, help="fixed time horizon (default: characteristic)")
    p.add_argument("--replicas", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--scheme", choices=sorted(dyn.K.SCHEMES))
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-quadratic", action="store_true")
    p.add_argument("--threads", type=int)
    if experiments:
        p.add_argument("--out", help="directory for CSV/JSON reports and the manifest")


def _potential_from_flags(a, current):
    if a.variant is None and a.beta is None and a.atoms is None and a.eps is None:
        return current
    v = a.variant or current.get("variant", "exponential")
    if v == "exponential":
        return {"variant": v, "beta": a.beta if a.beta is not None else current.get("beta", 1.0)}
    if v == "laplace_measure":
        return {"variant": v, "atoms": a.atoms or current.get("atoms", [[1.0, 1.0]])}
    if v == "quadratic":
        return {"variant": v}
    base = {"variant": "laplace_measure", "atoms": a.atoms} if a.atoms else \
        {"variant": "exponential", "beta": a.beta if a.beta is not None else 1.0}
    return {"variant": v, "base": current.get("base", base) if a.variant is None else base,
            "eps": a.eps if a.eps is not None else current.get("eps", 0.0),
            "bump": {"center": a.center or 0.0, "width": a.width or 1.0}}


def resolve_flags(a, experiments, extra=None):
    raw = {}
    text = None
    if getattr(a, "config", None):
        with open(a.config, "rb") as fh:
            text = fh.read().decode()
        try:
            raw = C.tomli.loads(text)
        except C.tomli.TOMLDecodeError as exc:
            raise C.ConfigError([("<file>", None, str(exc))]) from None
    raw = copy.deepcopy(raw)
    raw["experiments"] = experiments
    sim = raw.setdefault("simulation", {})
    for key in ("theta", "replicas", "dt", "scheme"):
        if getattr(a, key, None) is not None:
            sim[key] = getattr(a, key)
    if a.N is not None:
        sim["N"] = a.N
    if a.t is not None:
        sim["t_rule"] = {"kind": "fixed", "t": a.t}
    if a.seed is not None:
        raw["seed"] = a.seed
    pot_tab = _potential_from_flags(a, raw.get("potential", {}))
    if pot_tab:
        raw["potential"] = pot_tab
    if a.allow_quadratic:
        raw.setdefault("audit", {})["allow_quadratic"] = True
    for tab, vals in (extra or {}).items():
        raw.setdefault(tab, {}).update({k: v for k, v in vals.items() if v is not None})
    return C.validate(raw, text)


# ----------------------------------------------------------------------------- commands

def cmd_run(a):
    resolved = C.load(a.config_path)
    if a.seed is not None:
        resolved["seed"] = a.seed
        resolved = C.validate(resolved)
    out = a.out or os.path.splitext(os.path.basename(a.config_path))[0] + "_out"
    man, code = execute(resolved, out, sys.stdout)
    print(f"# manifest: {os.path.join(out, 'manifest.json')}", file=sys.stderr)
    return code


def _bound_experiment(a, names, extra=None):
    resolved = resolve_flags(a, names, extra)
    _, code = execute(resolved, a.out, sys.stdout)
    return code


def cmd_variance(a):
    names = {"direct": ["variance_direct"], "representation": ["variance_via_representation"],
             "bad-lower": ["bad_lower_check"]}[a.method]
    return _bound_experiment(a, names, {"representation": {"halve_dt": a.halve_dt or None}})


def cmd_gf(a):
    offs = a.eta_offsets if a.eta is None else [e - (a.theta or 1.0) for e in a.eta]
    return _bound_experiment(a, ["generating_function"],
                             {"generating_function": {"eta_offsets": offs,
                                                      "richardson": a.richardson or None}})


def cmd_exponent(a):
    return _bound_experiment(a, ["exponent_fit"], {"exponent": {"band": a.band}})


def cmd_tails(a):
    return _bound_experiment(a, ["tail_bound_audit"], {"tails": {"w": a.w, "C0": a.C0}})


def cmd_check_potential(a):
    spec = pot.from_dict(_potential_from_flags(a, {"variant": "exponential", "beta": 1.0}))
    res = pot.audit_oy_type(spec, a.x_min, a.x_max, a.n_grid)
    print(f"variant={spec.variant} passed={res.passed} c0={res.c0:.6g} "
          f"c_lower={res.c_lower:.6g} c_upper={res.c_upper:.6g}"
          + (f" reason={res.reason}" if res.reason else ""))
    if a.theta_grid:
        lo, hi, n = a.theta_grid
        worst = max(v for _, v in eq.psi2_grid_check(spec, np.linspace(lo, hi, int(n)), 1e-8))
        print(f"max psi2 on grid = {worst:.3e}")
    return EXIT_OK if res.passed else EXIT_VIOLATION


def _single_spec(a):
    resolved = resolve_flags(a, ["variance_direct"])
    return resolved, pot.from_dict(resolved["potential"])


def _horizon(resolved, m, N):
    return experiment_config(resolved).t_for(N, m.psi[1])


def cmd_simulate(a):
    resolved, spec = _single_spec(a)
    s = resolved["simulation"]
    theta = s["theta"]
    eta = a.eta if a.eta is not None else theta
    m = eq.build(spec, eta)
    N = s["N"][0]
    t = _horizon(resolved, eq.build(spec, theta) if eta != theta else m, N)
    n, dt = dyn.snap_grid(t, s["dt"])
    noise = dyn.NoiseBlock(resolved["seed"], dt, n, replica=a.replica)
    traj = dyn.simulate(spec, m, theta, N, n * dt, noise, s["scheme"])
    hs = dyn.height(traj, traj.t_end)
    print(f"N={N} t={traj.t_end!r} dt={dt!r} W={hs.W!r} sum_u={hs.sum_u!r} B0={hs.B0!r}")
    if a.dump:
        if a.dump.endswith(".npz"):
            np.savez(a.dump, u=traj.u, time=traj.grid, B0=traj.B0_path)
        else:
            dyn.dump_trajectory(traj, a.dump)
    return EXIT_OK


def _query(s, t):
    if s == "total-mass":
        return psg.PsgQuery.total_mass()
    if s == "mean-s0":
        return psg.PsgQuery.mean_s0()
    kind, _, val = s.partition(":")
    v = t / 2 if val in ("", "half") else float(val)
    if kind == "tail":
        return psg.PsgQuery.tail(v)
    if kind == "positive-part":
        return psg.PsgQuery.positive_part(v)
    raise C.ConfigError([("query", None, f"unknown query {s!r}")])


def cmd_psg(a):
    if a.t is None:
        a.t = 1.0
    if a.dt is None:
        a.dt = 1e-3
    resolved, spec = _single_spec(a)
    s = resolved["simulation"]
    m = eq.build(spec, s["theta"])
    N = s["N"][0]
    t = s["t_rule"]["t"]
    n, dt = dyn.snap_grid(t, s["dt"])
    if a.oracle and N > 3:
        raise C.ConfigError([("N", None, "the quadrature oracle supports N <= 3")])
    worst = 0.0
    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(["replica", "query", "ode"] + (["quadrature", "abs_diff"] if a.oracle else []))
    for r in range(a.paths):
        traj = dyn.simulate(spec, m, s["theta"], N, n * dt,
                            dyn.NoiseBlock(resolved["seed"], dt, n, replica=r), s["scheme"])
        for qs in a.query:
            q = _query(qs, n * dt)
            v = psg.evaluate_ode(traj, q).value
            row = [r, q.label(), repr(v)]
            if a.oracle:
                w = psg.evaluate_quadrature(traj, q).value
                worst = max(worst, abs(v - w))
                row += [repr(w), repr(abs(v - w))]
            wr.writerow(row)
    if a.oracle:
        ok = worst <= 1e-6
        print(f"# max |ode - quadrature| = {worst:.3e} ({'pass' if ok else 'FAIL'})",
              file=sys.stderr)
        return EXIT_OK if ok else EXIT_VIOLATION
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="oydiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run the experiments listed in a config file")
    r.add_argument("config_path")
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check-potential", help="audit a potential")
    _add_common(c, experiments=False)
    c.add_argument("--x-min", type=float, default=-30.0)
    c.add_argument("--x-max", type=float, default=30.0)
    c.add_argument("--n-grid", type=int, default=4096)
    c.add_argument("--theta-grid", type=_floats, help="lo,hi,n for a psi2 sign scan")
    c.set_defaults(func=cmd_check_potential)

    s = sub.add_parser("simulate", help="simulate one path and print W(t)")
    _add_common(s, experiments=False)
    s.add_argument("--eta", type=float)
    s.add_argument("--replica", type=int, default=0)
    s.add_argument("--dump", help="trajectory file (.csv or .npz)")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("variance", help="Monte Carlo variance of W")
    _add_common(v)
    v.add_argument("--method", choices=["direct", "representation", "bad-lower"],
                   default="direct")
    v.add_argument("--halve-dt", action="store_true")
    v.set_defaults(func=cmd_variance)

    g = sub.add_parser("gf-check", help="generating function identity")
    _add_common(g)
    g.add_argument("--eta", type=_floats)
    g.add_argument("--eta-offsets", type=_floats, default=[-0.05, 0.05])
    g.add_argument("--richardson", action="store_true",
                   help="combine dt and dt/2 on one Brownian path to cancel O(dt) bias")
    g.set_defaults(func=cmd_gf)

    e = sub.add_parser("exponent", help="log-log fit of Var W against N")
    _add_common(e)
    e.add_argument("--band", type=_floats)
    e.set_defaults(func=cmd_exponent)

    q = sub.add_parser("psg", help="pseudo-Gibbs functionals along paths")
    _add_common(q, experiments=False)
    q.add_argument("--query", action="append",
                   help="total-mass, mean-s0, tail:T or positive-part:Y (repeatable)")
    q.add_argument("--paths", type=int, default=5)
    q.add_argument("--oracle", action="store_true", help="compare with nested quadrature")
    q.set_defaults(func=cmd_psg)

    t = sub.add_parser("tails", help="tail bound audit for the first jump time")
    _add_common(t)
    t.add_argument("--w", type=_floats)
    t.add_argument("--C0", type=float)
    t.set_defaults(func=cmd_tails)
    return p


def main(argv=None):
    parser = build_parser()
    a = parser.parse_args(argv)
    if getattr(a, "cmd", None) == "psg" and not a.query:
        a.query = ["total-mass"]
    try:
        set_threads(getattr(a, "threads", None))
        return a.func(a)
    except C.ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {C._fmt_diag(d)}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.PreconditionError, pot.PotentialError) as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except X.ExplosionRateError as exc:
        print(f"explosion rate too high: {exc}", file=sys.stderr)
        return EXIT_EXPLOSION


if __name__ == "__main__":
    sys.exit(main())
