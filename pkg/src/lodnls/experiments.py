"""Experiment drivers: reference runs, convergence tables, energy studies.

Every driver is declarative-config in, files out: a delimited report, a
gnuplot script, rendered figures, and a manifest recording the exact
configuration hash so runs are reproducible and cacheable.
"""

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import fem
from .mesh import build_structured_mesh, refine
from .lod import BilinearFormSpec, LodBasis, build_lod_basis, basis_cache_key, localization_decay_study
from .timestepping import DiscreteSpace, run
from .energy import write_energy_csv
from .problems import configure_example

__all__ = [
    "ExperimentConfig",
    "ConvergenceReport",
    "sigma_for",
    "default_layers",
    "reference_solution",
    "convergence_study",
    "energy_study",
    "decay_study",
    "run_single",
]

REPORT_COLUMNS = ["H", "tau", "ell", "error_L2", "error_L4", "error_H1",
                  "rate_L2", "rate_L4", "rate_H1", "runtime", "fp_max", "fp_mean"]


@dataclass
class ExperimentConfig:
    example: int = 1
    H_list: list = field(default_factory=lambda: [2, 4, 8, 16])
    h: object = None          # int, list of ints, or None for the example default
    tau: float = 1e-3
    tau_rule: str = "fixed"   # fixed | H2
    ell: object = "default"   # "default" (4 log2 n), "sat", an int, or a list
    T: float = None
    seed: int = 0
    center_domain: bool = False
    tol: float = 1e-11
    max_iters: int = 100
    threads: int = 1
    output_dir: str = "out"
    no_cache: bool = False
    cache_dir: str = None
    compare: str = "auto"      # auto | exact | reference
    reference_h: int = None    # surrogate resolution, None for the example default
    reference_tau: float = None

    def resolved_cache_dir(self):
        if self.no_cache:
            return None
        base = self.cache_dir or os.environ.get("LODNLS_CACHE") \
            or os.path.join(os.path.expanduser("~"), ".cache", "lodnls")
        Path(base).mkdir(parents=True, exist_ok=True)
        return base

    def config_hash(self):
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ConvergenceReport:
    rows: list
    config: ExperimentConfig

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            for r in self.rows:
                cells = []
                for c in REPORT_COLUMNS:
                    v = r.get(c)
                    if v is None:
                        cells.append("")
                    elif c in ("ell", "fp_max"):
                        cells.append(str(int(v)))
                    else:
                        cells.append(f"{v:.6g}")
                if r.get("failed"):
                    cells.append(f"FAILED: {r.get('message', '')}")
                fh.write(",".join(cells) + "\n")


def sigma_for(V):
    """Coercivity shift making the corrector form positive definite."""
    if V is None:
        return 1.0
    return max(0.0, 1.0 - V.sample_min())


def default_layers(n_side):
    """ceil(4 log2(1/H)), the localization depth that keeps H^4 visible."""
    return int(np.ceil(4 * np.log2(max(2, n_side))))


def _resolve_layers(ell, n_side):
    if ell in (None, "default"):
        return default_layers(n_side)
    if ell == "sat":
        return 2 * n_side
    return int(ell)


def build_basis(problem, n_side, h, ell, threads=1, cache_dir=None):
    """Corrected basis for one coarse/fine mesh pair, disk-cached."""
    if h % n_side != 0:
        raise ValueError(f"fine resolution {h} does not refine H=1/{n_side}")
    refmap = refine(build_structured_mesh(n_side), h // n_side)
    form = BilinearFormSpec(problem.b, problem.V, sigma_for(problem.V), refmap)
    if cache_dir is not None:
        key = basis_cache_key(refmap, form, ell)
        path = Path(cache_dir) / f"basis-{key}.npz"
        if path.exists():
            return LodBasis.load(path, refmap), form
    basis = build_lod_basis(refmap, form, ell, threads=threads)
    if cache_dir is not None:
        tmp = path.with_suffix(".tmp")
        basis.save(tmp)
        os.replace(tmp, path)
    return basis, form


def _reference_key(problem, h, tau, T, tol):
    bh = problem.b.content_hash() if problem.b is not None else "unit"
    vh = problem.V.content_hash() if problem.V is not None else "zero"
    raw = f"ref-v1-ex{problem.example_id}-h{h}-tau{tau:.12g}-T{T:.12g}-tol{tol:.3g}-b{bh}-V{vh}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def reference_solution(problem, h=None, tau=None, T=None, tol=1e-11,
                       cache_dir=None, record_energy=False):
    """Fine-space run of the same scheme, used as the error surrogate.

    Returns (mesh, u_final_full, info). Cached on disk by configuration
    hash; a cache hit reproduces the stored trajectory bit for bit.
    """
    h = h or problem.reference_h
    tau = tau or problem.reference_tau
    T = T if T is not None else problem.T
    mesh = build_structured_mesh(h)
    if cache_dir is not None:
        key = _reference_key(problem, h, tau, T, tol)
        path = Path(cache_dir) / f"{key}.npz"
        if path.exists():
            with np.load(path) as z:
                info = json.loads(str(z["info"]))
                return mesh, z["u_final"], info
    space = DiscreteSpace.fine(mesh, problem.b, problem.V)
    if problem.b is not None:
        space.generalized_energy = True
    t0 = time.perf_counter()
    summary = run(problem, space, tau, T, nl=problem.nonlinearity, tol=tol,
                  record_energy=record_energy)
    u_final = space.to_fine(summary.state.u_curr)
    info = {"h": h, "tau": tau, "T": T, "runtime": time.perf_counter() - t0,
            "fp_max": summary.fp_max, "fp_mean": summary.fp_mean,
            "max_modulus": summary.max_modulus}
    if cache_dir is not None:
        tmp = path.with_name("tmp-" + path.name)
        np.savez_compressed(tmp, u_final=u_final, info=json.dumps(info))
        os.replace(tmp, path)
    return mesh, u_final, info


def _lod_run(problem, n_side, h, tau, T, ell, cfg):
    cache = cfg.resolved_cache_dir()
    basis, form = build_basis(problem, n_side, h, ell, threads=cfg.threads,
                              cache_dir=cache)
    space = DiscreteSpace.lod(basis, problem.b, problem.V, form=form)
    if problem.b is not None:
        space.generalized_energy = True
    summary = run(problem, space, tau, T, nl=problem.nonlinearity,
                  tol=cfg.tol, max_iters=cfg.max_iters)
    return space, summary


def _errors_vs_exact(u_full, mesh, problem, t):
    ex = lambda x, y: problem.exact(x, y, t)
    out = {
        "error_L2": fem.norm(u_full, "L2", mesh, exact=ex),
        "error_L4": fem.norm(u_full, "L4", mesh, exact=ex),
    }
    if problem.exact_grad is not None:
        eg = lambda x, y: problem.exact_grad(x, y, t)
        out["error_H1"] = fem.norm(u_full, "H1", mesh, exact=ex, exact_grad=eg)
    else:
        out["error_H1"] = float("nan")
    return out


def _errors_vs_reference(u_full, mesh, ref_full):
    d = u_full - ref_full
    return {
        "error_L2": fem.norm(d, "L2", mesh),
        "error_L4": fem.norm(d, "L4", mesh),
        "error_H1": fem.norm(d, "H1", mesh),
    }


def convergence_study(cfg):
    """Error table over the coarse-mesh list; writes report, plots, manifest."""
    problem = configure_example(cfg.example, seed=cfg.seed,
                                center_domain=cfg.center_domain)
    T = cfg.T if cfg.T is not None else problem.T
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cfg.resolved_cache_dir()

    if cfg.compare not in ("auto", "exact", "reference"):
        raise ValueError(f"compare must be auto, exact, or reference: {cfg.compare!r}")
    if cfg.compare == "exact" and problem.exact is None:
        raise ValueError(f"example {cfg.example} has no closed-form solution")
    use_exact = problem.exact is not None and cfg.compare != "reference"
    ref_mesh = ref_u = None
    if not use_exact:
        ref_mesh, ref_u, _ = reference_solution(problem, h=cfg.reference_h,
                                                tau=cfg.reference_tau, T=T,
                                                tol=cfg.tol, cache_dir=cache)

    h_list = cfg.h
    if h_list is None:
        h_default = ref_mesh.n_side if ref_mesh is not None else problem.reference_h
        h_list = [h_default] * len(cfg.H_list)
    elif np.isscalar(h_list):
        h_list = [int(h_list)] * len(cfg.H_list)

    ell_list = cfg.ell if isinstance(cfg.ell, list) \
        else [cfg.ell] * len(cfg.H_list)

    rows = []
    for n_side, h, ell_spec in zip(cfg.H_list, h_list, ell_list):
        ell = _resolve_layers(ell_spec, n_side)
        row = {"H": 1.0 / n_side, "tau": cfg.tau, "ell": ell}
        if cfg.tau_rule == "H2":
            row["tau"] = 1.0 / n_side**2
        t0 = time.perf_counter()
        try:
            space, summary = _lod_run(problem, n_side, h, row["tau"], T, ell, cfg)
            u_full = space.to_fine(summary.state.u_curr)
            mesh = space.fine_mesh
            if use_exact:
                row.update(_errors_vs_exact(u_full, mesh, problem, T))
            else:
                if h != ref_mesh.n_side:
                    if ref_mesh.n_side % h != 0:
                        raise ValueError("row fine mesh does not nest in the reference")
                    emb = refine(mesh, ref_mesh.n_side // h)
                    u_full = fem.prolong(u_full, emb)
                    mesh = ref_mesh
                row.update(_errors_vs_reference(u_full, mesh, ref_u))
            row["fp_max"] = summary.fp_max
            row["fp_mean"] = summary.fp_mean
        except Exception as exc:  # failed rows are reported, not fatal
            row["failed"] = True
            row["message"] = f"{type(exc).__name__}: {exc}"
        row["runtime"] = time.perf_counter() - t0
        rows.append(row)

    for prev, cur in zip(rows, rows[1:]):
        if prev.get("failed") or cur.get("failed"):
            continue
        if abs(prev["H"] / cur["H"] - 2.0) > 1e-12:
            continue
        for kind in ("L2", "L4", "H1"):
            e0, e1 = prev[f"error_{kind}"], cur[f"error_{kind}"]
            if e0 > 0 and e1 > 0 and np.isfinite(e0) and np.isfinite(e1):
                cur[f"rate_{kind}"] = float(np.log2(e0 / e1))

    report = ConvergenceReport(rows, cfg)
    report.to_csv(out / "report.csv")
    _write_convergence_gnuplot(out / "plot.gp")
    _plot_convergence(rows, out / "convergence.png", cfg)
    _write_manifest(cfg, out, outputs=["report.csv", "plot.gp", "convergence.png"])
    return report


def energy_study(cfg, ell_list=None, H=4):
    """Energy drift across localization depths at fixed coarse mesh."""
    problem = configure_example(cfg.example, seed=cfg.seed,
                                center_domain=cfg.center_domain)
    T = cfg.T if cfg.T is not None else problem.T
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ell_list = ell_list or (cfg.ell if isinstance(cfg.ell, (list, tuple)) else [2, 3, 4, 5, 6, 7, 8])
    n_side = H if isinstance(H, int) else int(round(1 / H))
    h = cfg.h if cfg.h is not None and np.isscalar(cfg.h) else problem.reference_h

    summary_rows = []
    traces = {}
    for ell in ell_list:
        space, summary = _lod_run(problem, n_side, int(h), cfg.tau, T, int(ell), cfg)
        write_energy_csv(summary.energy, out / f"energy_l{int(ell)}.csv")
        e0 = summary.energy[0].E
        drift = max(abs(r.drift) for r in summary.energy)
        summary_rows.append({"ell": int(ell), "E0": e0, "max_drift": drift,
                             "rel_drift": drift / abs(e0) if e0 else float("inf")})
        traces[int(ell)] = [r.E for r in summary.energy]

    with open(out / "energy.csv", "w", newline="") as fh:
        fh.write("ell,E0,max_drift,rel_drift\n")
        for r in summary_rows:
            fh.write(f"{r['ell']},{r['E0']:.6g},{r['max_drift']:.6g},{r['rel_drift']:.6g}\n")
    _plot_energy(traces, cfg.tau, out / "energy.png")
    _write_manifest(cfg, out, outputs=["energy.csv", "energy.png"]
                    + [f"energy_l{e}.csv" for e in traces])
    return summary_rows


def decay_study(cfg, n_side=8, factor=8, ell_range=None):
    """Localization error against the saturated space, written as a table."""
    problem = configure_example(cfg.example, seed=cfg.seed,
                                center_domain=cfg.center_domain)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    refmap = refine(build_structured_mesh(n_side), factor)
    form = BilinearFormSpec(problem.b, problem.V, sigma_for(problem.V), refmap)
    rows = localization_decay_study(refmap, form,
                                    ell_range or range(0, n_side + 1),
                                    threads=cfg.threads)
    with open(out / "decay.csv", "w", newline="") as fh:
        fh.write("ell,error,ratio\n")
        for r in rows:
            fh.write(f"{r['ell']},{r['error']:.6g},{r['ratio']:.6g}\n")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy([r["ell"] for r in rows],
                [max(r["error"], 1e-17) for r in rows], "o-")
    ax.set_xlabel("localization layers")
    ax.set_ylabel("distance to saturated projection")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "decay.png", dpi=150)
    plt.close(fig)
    _write_manifest(cfg, out, outputs=["decay.csv", "decay.png"])
    return rows


def run_single(cfg, H=4, ell=None):
    """One simulation: energy trace, final state dump, figure, manifest."""
    problem = configure_example(cfg.example, seed=cfg.seed,
                                center_domain=cfg.center_domain)
    T = cfg.T if cfg.T is not None else problem.T
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_side = H if isinstance(H, int) else int(round(1 / H))
    h = cfg.h if cfg.h is not None and np.isscalar(cfg.h) else problem.reference_h
    layers = _resolve_layers(ell if ell is not None else cfg.ell, n_side)
    space, summary = _lod_run(problem, n_side, int(h), cfg.tau, T, layers, cfg)
    write_energy_csv(summary.energy, out / "energy.csv")
    u = space.to_fine(summary.state.u_curr)
    np.savez_compressed(out / "solution.npz", u_final=u,
                        nodes=space.fine_mesh.nodes)
    _plot_energy({layers: [r.E for r in summary.energy]}, cfg.tau, out / "energy.png")
    _write_manifest(cfg, out, outputs=["energy.csv", "solution.npz", "energy.png"],
                    extra={"fp_max": summary.fp_max, "fp_mean": summary.fp_mean,
                           "max_modulus": summary.max_modulus})
    return summary


def _write_convergence_gnuplot(path):
    script = """# log-log convergence plot from report.csv
set datafile separator ','
set logscale xy
set xlabel 'H'
set ylabel 'error at final time'
set key left top
set grid
plot 'report.csv' using 1:4 every ::1 with linespoints title 'L2', \\
     'report.csv' using 1:5 every ::1 with linespoints title 'L4', \\
     'report.csv' using 1:6 every ::1 with linespoints title 'H1'
"""
    Path(path).write_text(script)


def _plot_convergence(rows, path, cfg):
    ok = [r for r in rows if not r.get("failed")]
    if not ok:
        return
    H = np.array([r["H"] for r in ok])
    fig, ax = plt.subplots(figsize=(5, 4))
    for kind, marker in (("L2", "o"), ("L4", "s"), ("H1", "^")):
        e = np.array([r[f"error_{kind}"] for r in ok])
        if np.all(np.isfinite(e)):
            ax.loglog(H, e, marker + "-", label=kind)
    if len(H) > 1:
        ax.loglog(H, H**4 * ok[0]["error_L2"] / H[0]**4, "k--", alpha=0.5,
                  label="H^4")
    ax.set_xlabel("H")
    ax.set_ylabel("error at final time")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_energy(traces, tau, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for ell, Es in sorted(traces.items()):
        t = np.arange(len(Es)) * tau
        ax.plot(t, Es, label=f"layers {ell}")
    ax.set_xlabel("t")
    ax.set_ylabel("discrete energy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _write_manifest(cfg, out, outputs, extra=None):
    import scipy
    from . import __version__
    manifest = {
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "versions": {"package": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "seed": cfg.seed,
        "outputs": outputs,
        "written_at_unix": int(time.time()),
    }
    if extra:
        manifest.update(extra)
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
