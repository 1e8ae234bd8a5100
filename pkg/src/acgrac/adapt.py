"""Adaptive loop: solve, estimate, Dörfler mark, expand/enlarge/bisect.

Interface expansion and domain enlargement regenerate the mesh at the new
radii and replay the previous refinement pattern through a size field; plain
refinement bisects the marked continuum elements in place.  Reconstruction
parameters are re-solved after every mesh change (their force rows depend on
the first continuum strip's geometry).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .estimate import run_estimate
from .grac import assemble_constraints, solve_l1, solve_lsq
from .mesh import (
    REGION_CONT,
    AcMesh,
    MicroMesh,
    bisect,
    build_ac_mesh,
    effective_volumes,
)
from .model import CoupledModel, SolverError, make_free_fun, solve_equilibrium


@dataclass
class AdaptConfig:
    N_max: int = 20000
    rho_tol: float = 1e-3
    tau1: float = 0.5
    tau2: float = math.inf
    tau3: float = 0.7
    R_max: int = 128
    K: int = 3
    dorfler_theta: float = 0.5
    grading: float = 0.5
    solve_tol: float = 1e-8
    solve_maxiter: int = 20000
    max_steps: int = 100

    def validate(self):
        if not (0.0 < self.tau1 < 1.0):
            raise ValueError("tau1 must lie in (0, 1)")
        if not (0.0 < self.dorfler_theta <= 1.0):
            raise ValueError("dorfler_theta must lie in (0, 1]")


@dataclass
class AdaptTrace:
    records: list = field(default_factory=list)

    def add(self, **kw):
        if self.records and kw["N"] <= self.records[-1]["N"]:
            kw["monotonicity_note"] = "N did not increase"
        self.records.append(kw)

    def column(self, key):
        return np.array([r[key] for r in self.records])


@dataclass
class AdaptState:
    lattice: object
    mesh: AcMesh
    vols: object
    params: object
    cm: CoupledModel
    U: np.ndarray
    eam: object
    B: np.ndarray
    method: str = "l1"
    kappa: float = 0.0
    variant: str = "reflect"
    flags: dict = field(default_factory=dict)


def make_state(lattice, eam, B, R_a, R, method="l1", kappa=0.0,
               variant="reflect", grading=0.5) -> AdaptState:
    mesh = build_ac_mesh(lattice, R_a, R, grading)
    return _with_mesh(
        AdaptState(lattice=lattice, mesh=None, vols=None, params=None, cm=None,
                   U=None, eam=eam, B=np.asarray(B, dtype=float), method=method,
                   kappa=kappa, variant=variant),
        mesh,
    )


def _solve_params(state, mesh, vols):
    sys_ = assemble_constraints(state.lattice, mesh, vols, state.variant)
    if state.method == "l1":
        return solve_l1(sys_)
    if state.method in ("lsq", "l2"):
        return solve_lsq(sys_)
    raise ValueError(f"unknown reconstruction method {state.method!r}")


def _with_mesh(state, mesh, U_old_mesh=None, U_old=None) -> AdaptState:
    vols = effective_volumes(mesh, state.variant)
    params = _solve_params(state, mesh, vols)
    cm = CoupledModel(mesh, vols, params, state.eam, state.B, kappa=state.kappa)
    U = np.zeros((mesh.n_verts, 2))
    if U_old is not None and U_old_mesh is not None:
        U = interpolate_field(U_old_mesh, U_old, mesh)
        U[~mesh.free] = 0.0
    state.mesh = mesh
    state.vols = vols
    state.params = params
    state.cm = cm
    state.U = U
    return state


def interpolate_field(old_mesh: AcMesh, U_old, new_mesh: AcMesh):
    """Transfer a nodal field between meshes (zero outside the old domain)."""
    U = np.zeros((new_mesh.n_verts, 2))
    shared = min(old_mesh.n_verts, new_mesh.n_verts)
    same = np.all(old_mesh.verts_lat[:shared] == new_mesh.verts_lat[:shared], axis=1)
    U[:shared][same] = U_old[:shared][same]
    todo = np.ones(new_mesh.n_verts, dtype=bool)
    todo[:shared][same] = False
    idx = np.nonzero(todo)[0]
    if len(idx):
        U[idx] = old_mesh.eval_p1(U_old, new_mesh.verts_lat[idx])
    return U


def dorfler_mark(rho_T, theta=0.5):
    """Minimal element set carrying a theta-fraction of the indicator sum.

    Sorted-descending prefix with element-id tie break; empty for an
    all-zero indicator field.
    """
    rho_T = np.asarray(rho_T, dtype=float)
    total = rho_T.sum()
    if total <= 0.0:
        return np.array([], dtype=np.int64)
    order = np.lexsort((np.arange(len(rho_T)), -rho_T))
    csum = np.cumsum(rho_T[order])
    k = int(np.searchsorted(csum, theta * total - 1e-15)) + 1
    return np.sort(order[:k])


def elem_layer_distance(mesh: AcMesh):
    """Atom-layer distance of each element from the interface ring."""
    return np.maximum(1.0, np.ceil(mesh.elem_min_hex() - mesh.R_a))


def interface_expansion_check(marked, mesh: AcMesh, rho_T, tau1=0.5, K=3):
    """First k <= K whose near-interface marked subset carries a tau1
    fraction; returns (k, reduced marked set)."""
    marked = np.asarray(marked, dtype=np.int64)
    if len(marked) == 0:
        return 0, marked
    layer = elem_layer_distance(mesh)
    total = rho_T[marked].sum()
    cont = mesh.region[marked] == REGION_CONT
    for k in range(1, K + 1):
        sel = cont & (layer[marked] <= k)
        if rho_T[marked[sel]].sum() >= tau1 * total - 1e-15:
            return k, marked[~sel]
    return 0, marked


def _rebuild(state: AdaptState, R_a, R, grading):
    """Regenerate the mesh at new radii, replaying refinement from sizes."""
    old = state.mesh
    old_sizes = old.elem_sizes()
    mesh = build_ac_mesh(state.lattice, R_a, R, grading)
    min_area = 0.51 * abs(np.linalg.det(state.lattice.basis))
    for _ in range(40):
        sizes = mesh.elem_sizes()
        cents = mesh.verts_lat[mesh.tris].mean(axis=1)
        marked = []
        for t in range(mesh.n_elems):
            if mesh.region[t] != REGION_CONT or mesh.areas[t] <= min_area:
                continue
            told = old.locate(cents[t, 0], cents[t, 1])
            if told < 0:
                continue
            if sizes[t] > 1.05 * old_sizes[told]:
                marked.append(t)
        if not marked:
            break
        mesh = bisect(mesh, marked)
    return mesh


def refine_step(state: AdaptState, marked, expand_layers, report, config) -> AdaptState:
    """Expand the interface, enlarge the domain, bisect what remains."""
    mesh = state.mesh
    R_a, R = mesh.R_a, mesh.R
    grow = int(expand_layers)
    enlarge = report.eta_T > 0 and report.eta_T >= config.tau3 * report.rho
    state.flags.pop("enlarge_skipped", None)
    if enlarge:
        gaps = np.diff(sorted({int(round(h)) for h in np.ceil(mesh.vert_hex)}))
        coarsest = int(gaps.max()) if len(gaps) else 1
        if R + coarsest > config.R_max:
            state.flags["enlarge_skipped"] = True
            enlarge = False
        else:
            R = R + coarsest
    if grow:
        R_a = R_a + grow

    marked = np.asarray(marked, dtype=np.int64)
    if grow or enlarge:
        cents = mesh.verts_lat[mesh.tris[marked]].mean(axis=1) if len(marked) else None
        new_mesh = _rebuild(state, R_a, R, config.grading)
        if cents is not None:
            mapped = [new_mesh.locate(x, y) for x, y in cents]
            marked = np.array(sorted({t for t in mapped if t >= 0}), dtype=np.int64)
    else:
        new_mesh = mesh

    min_area = 0.51 * abs(np.linalg.det(state.lattice.basis))
    refinable = [t for t in marked
                 if new_mesh.region[t] == REGION_CONT and new_mesh.areas[t] > min_area]
    if refinable:
        new_mesh = bisect(new_mesh, refinable)
    return _with_mesh(state, new_mesh, U_old_mesh=mesh, U_old=state.U)


def solve_state(state: AdaptState, tol=1e-8, maxiter=20000):
    """Equilibrate the current coupled model from the stored warm start."""
    mesh = state.mesh
    fun, expand, idx = make_free_fun(state.cm, mesh.free)

    def hv(v, w):
        W = np.zeros((mesh.n_verts, 2))
        W[idx] = w.reshape(-1, 2)
        Uv = np.zeros((mesh.n_verts, 2))
        Uv[idx] = v.reshape(-1, 2)
        return state.cm.hessian_apply(Uv, W)[idx].ravel()

    pre = state.cm.stiffness_diagonal()[idx].repeat(2)
    x0 = state.U[idx].ravel()
    x = solve_equilibrium(fun, x0, tol=tol, maxiter=maxiter, precond=pre,
                          hess_apply=hv)
    state.U = expand(x)
    return state.U


def run(state: AdaptState, config: AdaptConfig, metrics=None,
        snapshot=None) -> AdaptTrace:
    """Algorithm main loop (solve / estimate / mark / refine).

    metrics(state, U) may supply extra trace columns (reference errors);
    snapshot(step, state, report) runs after each estimate when given.
    """
    config.validate()
    trace = AdaptTrace()
    micro_cache = {}
    for step in range(config.max_steps):
        t0 = time.perf_counter()
        try:
            solve_state(state, tol=config.solve_tol, maxiter=config.solve_maxiter)
        except SolverError as e:
            raise SolverError(f"step {step}: {e}") from e
        mr = min(state.mesh.R + 2, state.lattice.spec.radius)
        if mr not in micro_cache:
            micro_cache[mr] = MicroMesh(state.lattice, mr)
        micro = micro_cache[mr]
        report, corrected, sig_a = run_estimate(state.cm, state.U, micro)
        rec = dict(step=step, N=state.mesh.n_free, R=state.mesh.R,
                   eta_T=report.eta_T, eta_M=report.eta_M, eta_C=report.eta_C,
                   rho=report.rho)
        if metrics is not None:
            rec.update(metrics(state, state.U))
        rec["seconds"] = time.perf_counter() - t0
        trace.add(**rec)
        if snapshot is not None:
            snapshot(step, state, report)

        if rec["N"] > config.N_max or report.rho < config.rho_tol \
                or state.mesh.R > config.R_max:
            break
        if report.eta_M + report.eta_C > 0 and \
                report.eta_T / (report.eta_M + report.eta_C) >= config.tau2:
            break

        marked = dorfler_mark(report.rho_T, config.dorfler_theta)
        k, reduced = interface_expansion_check(marked, state.mesh, report.rho_T,
                                               config.tau1, config.K)
        before = (state.mesh.n_free, state.mesh.n_elems)
        state = refine_step(state, reduced, k, report, config)
        if (state.mesh.n_free, state.mesh.n_elems) == before:
            state.flags["stalled"] = True
            break
    return trace
