"""Command line front end.

Subcommands map one to one onto the experiment drivers:

  run       one simulation, energy trace + final state
  converge  coarse-mesh error table (report.csv / plot.gp / convergence.png)
  energy    drift across localization depths
  decay     corrector localization error table
  cache     inspect or clear the basis/reference cache

Options come from an INI file (--config) plus flags; flags win.
"""

import argparse
import configparser
import json
import shutil
import sys
from pathlib import Path

from .experiments import (ExperimentConfig, convergence_study, energy_study,
                          decay_study, run_single)

_INT_LIST = lambda s: [int(x) for x in str(s).replace(",", " ").split()]


def _build_parser():
    p = argparse.ArgumentParser(
        prog="lodnls",
        description="Localized orthogonal decomposition solver for the "
                    "nonlinear Schrodinger equation with a wave operator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with [problem] [discretization] [solver] [output]")
        sp.add_argument("--example", type=int, help="example problem id (1..5)")
        sp.add_argument("--H", help="coarse resolutions, e.g. '2,4,8,16' (1/H values)")
        sp.add_argument("--h", help="fine resolution(s), e.g. '128' or '64,64,128,256'")
        sp.add_argument("--tau", type=float, help="time step")
        sp.add_argument("--tau-rule", choices=["fixed", "H2"], dest="tau_rule",
                        help="fixed tau or tau = H^2 per row")
        sp.add_argument("--T", type=float, help="final time")
        sp.add_argument("--compare", choices=["auto", "exact", "reference"],
                        help="error comparator; auto prefers the closed form when one exists")
        sp.add_argument("--ref-h", type=int, dest="reference_h",
                        help="surrogate fine resolution override")
        sp.add_argument("--ref-tau", type=float, dest="reference_tau",
                        help="surrogate time step override")
        sp.add_argument("--ell", help="localization layers: int, 'sat', or 'default'")
        sp.add_argument("--seed", type=int, help="seed for randomized coefficients")
        sp.add_argument("--center-domain", action="store_true", default=None,
                        help="center the shifted harmonic potential on the domain")
        sp.add_argument("--threads", type=int, help="worker threads for corrector solves")
        sp.add_argument("--tol", type=float, help="fixed point tolerance")
        sp.add_argument("--max-iters", type=int, dest="max_iters",
                        help="fixed point iteration cap")
        sp.add_argument("--no-cache", action="store_true", default=None,
                        help="skip the on-disk basis/reference cache")
        sp.add_argument("--cache-dir", dest="cache_dir", help="cache directory override")
        sp.add_argument("--out", help="output directory")

    for name, doc in [("run", "single simulation"),
                      ("converge", "convergence table over coarse meshes"),
                      ("energy", "energy drift across localization depths"),
                      ("decay", "corrector localization decay table")]:
        common(sub.add_parser(name, help=doc))

    c = sub.add_parser("cache", help="inspect or clear the cache directory")
    c.add_argument("--cache-dir", dest="cache_dir")
    c.add_argument("--clear", action="store_true")
    return p


_SCHEMA = {
    "problem": {"example": int, "seed": int, "center_domain": bool, "T": float},
    "discretization": {"H": _INT_LIST, "h": _INT_LIST, "tau": float,
                       "tau_rule": str, "ell": str, "compare": str,
                       "reference_h": int, "reference_tau": float},
    "solver": {"tol": float, "max_iters": int, "threads": int},
    "output": {"dir": str, "no_cache": bool, "cache_dir": str},
}
_RENAME = {"H": "H_list", "dir": "output_dir"}


def _load_ini(path):
    cp = configparser.ConfigParser()
    cp.optionxform = str  # H and h are distinct options
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for section, keys in _SCHEMA.items():
        if not cp.has_section(section):
            continue
        for key, conv in keys.items():
            if not cp.has_option(section, key):
                continue
            if conv is bool:
                values[_RENAME.get(key, key)] = cp.getboolean(section, key)
            else:
                values[_RENAME.get(key, key)] = conv(cp.get(section, key))
    return values


def _coerce_ell(v):
    if v is None or v in ("default", "sat"):
        return v if v is not None else "default"
    try:
        return int(v)
    except ValueError:
        return _INT_LIST(v)


def build_config(args):
    values = {}
    if getattr(args, "config", None):
        values.update(_load_ini(args.config))
    overrides = {
        "example": args.example,
        "H_list": _INT_LIST(args.H) if args.H else None,
        "h": _INT_LIST(args.h) if args.h else None,
        "tau": args.tau,
        "tau_rule": args.tau_rule,
        "T": args.T,
        "compare": args.compare,
        "reference_h": args.reference_h,
        "reference_tau": args.reference_tau,
        "ell": args.ell,
        "seed": args.seed,
        "center_domain": args.center_domain,
        "threads": args.threads,
        "tol": args.tol,
        "max_iters": args.max_iters,
        "no_cache": args.no_cache,
        "cache_dir": args.cache_dir,
        "output_dir": args.out,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "ell" in values:
        values["ell"] = _coerce_ell(values["ell"])
    if "h" in values and isinstance(values["h"], list) and len(values["h"]) == 1:
        values["h"] = values["h"][0]
    cfg = ExperimentConfig()
    for k, v in values.items():
        if not hasattr(cfg, k):
            raise ValueError(f"unknown option {k!r}")
        setattr(cfg, k, v)
    return cfg


def _cmd_cache(args):
    cfg = ExperimentConfig(cache_dir=getattr(args, "cache_dir", None))
    d = Path(cfg.resolved_cache_dir())
    entries = sorted(d.glob("*.npz"))
    if args.clear:
        shutil.rmtree(d)
        print(f"cleared {d} ({len(entries)} entries)")
        return 0
    total = sum(e.stat().st_size for e in entries)
    print(f"cache: {d}")
    print(f"entries: {len(entries)}  bytes: {total}")
    for e in entries:
        print(f"  {e.name}  {e.stat().st_size}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "cache":
            return _cmd_cache(args)
        cfg = build_config(args)
        if args.command == "run":
            summary = run_single(cfg, H=cfg.H_list[0],
                                 ell=cfg.ell if cfg.ell != "default" else None)
            print(f"steps {summary.nsteps}  fp max {summary.fp_max}  "
                  f"fp mean {summary.fp_mean:.2f}")
            if summary.energy:
                drift = max(abs(r.drift) for r in summary.energy)
                print(f"energy drift {drift:.3e}")
        elif args.command == "converge":
            report = convergence_study(cfg)
            for r in report.rows:
                if r.get("failed"):
                    print(f"H=1/{int(round(1/r['H']))}  FAILED  {r['message']}")
                else:
                    print(f"H=1/{int(round(1/r['H']))}  L2 {r['error_L2']:.4e}"
                          f"  L4 {r['error_L4']:.4e}"
                          + (f"  rate {r['rate_L2']:.2f}" if "rate_L2" in r else ""))
        elif args.command == "energy":
            ells = cfg.ell if isinstance(cfg.ell, list) else None
            rows = energy_study(cfg, ell_list=ells, H=cfg.H_list[0])
            for r in rows:
                print(f"layers {r['ell']}  rel drift {r['rel_drift']:.3e}")
        elif args.command == "decay":
            rows = decay_study(cfg, n_side=cfg.H_list[0])
            for r in rows:
                print(f"layers {r['ell']}  error {r['error']:.3e}")
        print(f"outputs in {cfg.output_dir}")
        return 0
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr, indent=None)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
