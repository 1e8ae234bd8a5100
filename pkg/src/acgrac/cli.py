"""Experiment driver: di-vacancy and micro-crack studies with the four
method variants (l1/l2 reconstruction x with/without stabilization).

Outputs per run: a trace CSV with the fixed schema
`step,N,R,eta_T,eta_M,eta_C,rho,h1_err,energy_err,seconds`, a JSON summary,
and a final mesh snapshot.  All floats serialize with 17 significant digits
so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, make_state, run
from .config import ConfigError, ExperimentConfig, load_config
from .lattice import LatticeSpec, build_lattice
from .mesh import MicroMesh
from .model import (
    AtomisticModel,
    SolverError,
    make_free_fun,
    solve_equilibrium,
)
from .potential import EamParams, minimize_cauchy_born_dilation

VARIANTS = {
    "l1s1": ("l1", True),
    "l1s0": ("l1", False),
    "l2s1": ("lsq", True),
    "l2s0": ("lsq", False),
}

_REF_KEYS = ("problem", "S", "gamma_I", "gamma_II", "eam.a", "eam.b", "eam.C",
             "solve.tol", "mesh.R0", "reference.R_ref")


def g17(x):
    return f"{float(x):.17g}"


def build_strain(cfg: ExperimentConfig, eam=None):
    """Applied far-field strain B of the configured problem."""
    eam = eam or EamParams.with_defaults(cfg["eam.a"], cfg["eam.b"], cfg["eam.C"])
    _, F0 = minimize_cauchy_born_dilation(eam)
    if cfg.problem == "divacancy":
        S, g2 = cfg["S"], cfg["gamma_II"]
        M = np.array([[1.0 + S, g2], [0.0, 1.0 + S]])
    else:
        g1, g2 = cfg["gamma_I"], cfg["gamma_II"]
        M = np.array([[1.0, g2], [0.0, 1.0 + g1]])
    return M @ F0, eam, F0


def reference_solution(cfg: ExperimentConfig, out_dir=None, progress=None):
    """Full atomistic equilibrium on the R_ref domain, cached by config hash.

    Returns (lattice, model, U, cache_path).
    """
    out = Path(out_dir or cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    cache = out / f"reference_{cfg.hash_key(_REF_KEYS)}.npz"
    B, eam, F0 = build_strain(cfg)
    R_ref = cfg.R_ref
    lat = build_lattice(LatticeSpec(cutoff=2.0, defect_count=cfg.defect_count,
                                    radius=R_ref + 2))
    model = AtomisticModel(lat, R_ref, eam, B)
    if cache.exists():
        data = np.load(cache)
        U = data["U"]
        if U.shape == (lat.n_sites, 2):
            return lat, model, U, cache
    if progress:
        progress(f"solving reference (R_ref={R_ref}, {model.n_free} free sites)")
    fun, expand, idx = make_free_fun(model, model.free)

    def hv(v, w):
        W = np.zeros((lat.n_sites, 2))
        W[idx] = w.reshape(-1, 2)
        Uv = np.zeros((lat.n_sites, 2))
        Uv[idx] = v.reshape(-1, 2)
        return model.hessian_apply(Uv, W)[idx].ravel()

    x = solve_equilibrium(fun, np.zeros(2 * model.n_free), tol=cfg["solve.tol"],
                          maxiter=cfg["solve.maxiter"], hess_apply=hv)
    U = expand(x)
    np.savez_compressed(cache, U=U)
    return lat, model, U, cache


def error_metrics(mesh, U_h, ref_lattice, ref_model, U_ref, micro_ref=None):
    """H1-seminorm and referenced-energy error against the reference state.

    The coarse solution is interpolated to every reference lattice site
    (zero displacement outside its own domain).
    """
    lat = mesh.lattice
    coords = ref_lattice.coords
    u = np.zeros((ref_lattice.n_sites, 2))
    own = np.full(ref_lattice.n_sites, -1, dtype=np.int64)
    for i, c in enumerate(coords):
        s = lat.index.get((int(c[0]), int(c[1])))
        if s is not None:
            own[i] = s
    res = own >= 0
    u[res] = mesh.values_at_sites(U_h, own[res])

    micro = micro_ref or MicroMesh(ref_lattice, ref_lattice.spec.radius)
    d = np.zeros((micro.n_verts, 2))
    sites = micro.vert_site >= 0
    d[sites] = (U_ref - u)[micro.vert_site[sites]]
    e1 = d[micro.tris[:, 1]] - d[micro.tris[:, 0]]
    e2 = d[micro.tris[:, 2]] - d[micro.tris[:, 0]]
    g = micro.grads()
    grads = (
        e1[:, :, None] * g[:, 1, :][:, None, :]
        + e2[:, :, None] * g[:, 2, :][:, None, :]
    )
    # seminorm over the reference domain hexagon (not its clamped halo)
    from .lattice import hexdist_arr

    corner_hex = hexdist_arr(micro.verts_lat.astype(np.int64)[micro.tris])
    dom = corner_hex.max(axis=1) <= ref_model.R
    h1 = float(np.sqrt(np.sum(micro.area * np.sum(grads[dom] * grads[dom], axis=(1, 2)))))
    e_h = ref_model.energy_grad(u)[0]
    e_ref = ref_model.energy_grad(U_ref)[0]
    return h1, abs(e_h - e_ref)


TRACE_COLUMNS = ["step", "N", "R", "eta_T", "eta_M", "eta_C", "rho",
                 "h1_err", "energy_err", "seconds"]


def write_trace(path, records):
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for r in records:
            row = []
            for c in TRACE_COLUMNS:
                v = r.get(c, "")
                row.append(str(v) if isinstance(v, (int, np.integer)) else g17(v))
            fh.write(",".join(row) + "\n")


def run_experiment(cfg: ExperimentConfig, variant=None, out_dir=None,
                   progress=print):
    """Adaptive run for one method variant; returns the summary dict."""
    tag = variant or ("l1" if cfg["grac.method"] == "l1" else "l2") + \
        ("s1" if cfg["grac.stabilize"] else "s0")
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant: {tag}")
    method, stab = VARIANTS[tag]
    kappa = cfg["grac.kappa"] if stab else 0.0

    out = Path(out_dir or cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    ref_lat, ref_model, U_ref, cache = reference_solution(cfg, out, progress)
    micro_ref = MicroMesh(ref_lat, ref_lat.spec.radius)
    B, eam, F0 = build_strain(cfg)

    lat = build_lattice(LatticeSpec(cutoff=2.0, defect_count=cfg.defect_count,
                                    radius=cfg["adapt.R_max"] + 2))
    state = make_state(lat, eam, B, R_a=cfg.R_a0, R=cfg["mesh.R0"],
                       method=method, kappa=kappa, variant=cfg["grac.variant"],
                       grading=cfg["mesh.grading"])
    acfg = AdaptConfig(
        N_max=cfg["adapt.N_max"], rho_tol=cfg["adapt.rho_tol"],
        tau1=cfg["adapt.tau1"], tau2=cfg["adapt.tau2"], tau3=cfg["adapt.tau3"],
        R_max=cfg["adapt.R_max"], K=cfg["adapt.K"],
        dorfler_theta=cfg["adapt.theta"], grading=cfg["mesh.grading"],
        solve_tol=cfg["solve.tol"], solve_maxiter=cfg["solve.maxiter"],
        max_steps=cfg["adapt.max_steps"],
    )

    def metrics(st, U):
        h1, de = error_metrics(st.mesh, U, ref_lat, ref_model, U_ref, micro_ref)
        return {"h1_err": h1, "energy_err": de}

    snapshot = None
    if cfg["out.snapshots"]:
        def snapshot(step, st, report):
            with open(out / f"mesh_{tag}_{step:03d}.txt", "w") as fh:
                st.mesh.dump(fh)

    trace = run(state, acfg, metrics=metrics, snapshot=snapshot)
    write_trace(out / f"trace_{tag}.csv", trace.records)
    with open(out / f"mesh_{tag}_final.txt", "w") as fh:
        state.mesh.dump(fh)
    with open(out / f"params_{tag}.txt", "w") as fh:
        state.params.dump(fh, lat)

    last = trace.records[-1]
    summary = {
        "variant": tag,
        "problem": cfg.problem,
        "steps": len(trace.records),
        "final_N": int(last["N"]),
        "final_R": int(last["R"]),
        "final_h1_err": last.get("h1_err"),
        "final_energy_err": last.get("energy_err"),
        "estimators": {k: last[k] for k in ("eta_T", "eta_M", "eta_C", "rho")},
        "flags": state.flags,
        "reference_cache": str(cache),
        "seconds": time.perf_counter() - t_start,
        "seed": cfg["seed"],
    }
    with open(out / f"summary_{tag}.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
    return summary


# -- verification suite -------------------------------------------------------


def verify(quick=True, progress=print):
    """Patch-test / weak-form / bond-weight property checks; returns failures."""
    from fractions import Fraction

    from .grac import assemble_constraints, solve_l1, solve_lsq
    from .lattice import classify_bond
    from .mesh import build_ac_mesh, effective_volumes
    from .model import CoupledModel
    from .stress import bond_pattern, sigma_h, weak_form_residual

    eam = EamParams()
    _, F0 = minimize_cauchy_born_dilation(eam)
    lat = build_lattice(LatticeSpec(radius=16))
    mesh = build_ac_mesh(lat, R_a=5, R=12)
    vols = effective_volumes(mesh)
    sys_ = assemble_constraints(lat, mesh, vols)
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok)))
        progress(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")

    for name, solver in (("l1", solve_l1), ("lsq", solve_lsq)):
        params = solver(sys_)
        cm = CoupledModel(mesh, vols, params, eam, F0, kappa=1.0)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(5 if quick else 20):
            F = F0 @ (np.eye(2) + 0.05 * (rng.random((2, 2)) - 0.5))
            U = mesh.verts_pos @ (F - F0).T
            _, g = cm.energy_grad(U)
            worst = max(worst, float(np.max(np.abs(g[mesh.free]))))
        check(f"force patch test ({name})", worst <= 1e-8, f"max force {worst:.2e}")

    params = solve_l1(sys_)
    cm = CoupledModel(mesh, vols, params, eam, F0, kappa=1.0)
    rng = np.random.default_rng(1)
    U = np.zeros((mesh.n_verts, 2))
    U[mesh.free] = 0.02 * rng.standard_normal((int(mesh.free.sum()), 2))
    _, g = cm.energy_grad(U)
    field = sigma_h(cm, U)
    worst = 0.0
    for _ in range(5 if quick else 20):
        v = np.zeros((mesh.n_verts, 2))
        v[mesh.free] = rng.standard_normal((int(mesh.free.sum()), 2))
        worst = max(worst, weak_form_residual(field, g, [v]) / max(1.0, np.abs(v).max()))
    check("weak-form identity (sigma_h)", worst <= 1e-10, f"residual {worst:.2e}")

    bad = 0
    for d in lat.dirs:
        pat = bond_pattern(d)
        bv = classify_bond(d)
        n_expect = 2 * bv.alpha if (bv.beta == 0 or bv.alpha == bv.beta) \
            else 2 * (bv.alpha + bv.beta - 1)
        if pat.total != Fraction(1) or len(pat.entries) != n_expect:
            bad += 1
    check("bond weight partition (18 directions)", bad == 0, f"{bad} bad")

    h = 1e-6
    rng = np.random.default_rng(2)
    V = np.zeros_like(U)
    V[mesh.free] = rng.standard_normal((int(mesh.free.sum()), 2))
    ep, _ = cm.energy_grad(U + h * V)
    em, _ = cm.energy_grad(U - h * V)
    fd = (ep - em) / (2 * h)
    an = float(np.sum(g * V))
    check("total-energy gradient FD", abs(an - fd) <= 1e-6 * (1 + abs(an)),
          f"|an-fd| {abs(an - fd):.2e}")
    return [name for name, ok in results if not ok]


def main(argv=None):
    ap = argparse.ArgumentParser(prog="acgrac",
                                 description="adaptive a/c coupling experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an adaptive experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p_run.add_argument("--out", default=None)
    p_ref = sub.add_parser("reference", help="compute/cache the reference solution")
    p_ref.add_argument("--config", required=True)
    p_ref.add_argument("--out", default=None)
    sub.add_parser("verify", help="run the patch-test/weak-form suite")
    args = ap.parse_args(argv)

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            summary = run_experiment(cfg, variant=args.variant, out_dir=args.out)
            print(json.dumps(summary, indent=2, default=float))
        elif args.command == "reference":
            cfg = load_config(args.config)
            lat, model, U, cache = reference_solution(cfg, args.out, print)
            print(json.dumps({"cache": str(cache), "sites": int(lat.n_sites)}))
        elif args.command == "verify":
            failures = verify(quick=True)
            if failures:
                print(json.dumps({"failed": failures}))
                return 1
        return 0
    except (ConfigError, SolverError, FileNotFoundError) as e:
        json.dump({"error": type(e).__name__, "message": str(e)}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
