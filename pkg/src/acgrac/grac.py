"""Reconstruction parameters for the consistent interface site potential.

For every interface site the reconstructed stencil entry in direction rho is
a linear combination sum_sigma C[rho, sigma] * D_sigma y of the available
finite differences.  The parameters are pinned down by

* energy rows:  rho = sum_sigma C[rho, sigma] * sigma  (uniform fields
  reconstruct exactly), two scalar rows per (site, rho), and
* force rows:   c_a + c_i + c_c = 0 per (site', rho in R+), which make the
  first variation of the coupled energy vanish on uniform deformations.

The joint system is underdetermined; solve_l1 picks the minimum-l1 solution
through an LP and solve_lsq the minimum-l2-norm solution.  The default
"reflect" variant restricts the sources sigma to differences that stay in
the atomistic region and clips interface Voronoi cells accordingly; the
"full" variant allows every source and weights interface sites by their full
cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
from scipy.optimize import linprog

from .mesh import AcMesh, EffectiveVolumes
from .potential import site_energy_gradient
from . import simplex


class InfeasibleSystemError(RuntimeError):
    def __init__(self, residual):
        super().__init__(f"patch-test system infeasible, max row residual {residual:.3e}")
        self.residual = residual


@dataclass
class ConstraintSystem:
    site_ids: np.ndarray              # interface sites, sorted
    allowed: dict                     # site -> list of source dir indices
    var_index: dict                   # (site, rho_idx, sigma_idx) -> column
    n_dirs: int                       # size of the full reconstruction range
    A: sparse.csr_matrix
    b: np.ndarray
    n_energy_rows: int
    force_sites: list
    variant: str
    omega: dict                       # site -> interface effective volume
    row_meta: list = None             # ("energy"|"force", site, rho_idx) per row

    @property
    def n_vars(self):
        return self.A.shape[1]

    @property
    def n_rows(self):
        return self.A.shape[0]


@dataclass
class ReconstructionParams:
    site_ids: np.ndarray
    allowed: dict
    C: dict                           # site -> (n_dirs, n_allowed) matrix
    objective_value: float
    method: str
    max_residual: float
    duality_gap: float = 0.0

    def dump(self, fh, lattice):
        """Text rows `ell rho sigma value` for every nonzero parameter."""
        for s in self.site_ids:
            Cs = self.C[int(s)]
            for r in range(Cs.shape[0]):
                for kk, sig in enumerate(self.allowed[int(s)]):
                    v = Cs[r, kk]
                    if v != 0.0:
                        fh.write(f"{int(s)} {r} {sig} {v:.17g}\n")


def half_range(lattice):
    """Indices of a positive half R+ of the direction set and the opposite map."""
    opp = np.empty(len(lattice.dirs), dtype=np.int64)
    for k, d in enumerate(lattice.dirs):
        opp[k] = lattice.dir_index[(-d[0], -d[1])]
    plus = [k for k in range(len(lattice.dirs)) if k < opp[k]]
    return plus, opp


def assemble_constraints(lattice, mesh: AcMesh, vols: EffectiveVolumes,
                         variant="reflect") -> ConstraintSystem:
    """Build the energy + force patch-test rows for the current interface."""
    nd = len(lattice.dirs)
    site_ids = np.asarray(mesh.interface_sites, dtype=np.int64)
    omega = {int(s): float(w) for s, w in zip(site_ids, vols.omega_site)}
    iface = set(int(s) for s in site_ids)
    hd = lattice.hexdists()
    core_max = mesh.R_a - 2 if not mesh.pure_atomistic else mesh.R_a

    from .lattice import hexdist

    if variant == "reflect":
        def allowed_dirs(s):
            m, n = lattice.coords[s]
            return [k for k, d in enumerate(lattice.dirs)
                    if hexdist(m + d[0], n + d[1]) <= mesh.R_a]
    elif variant == "full":
        def allowed_dirs(s):
            return [k for k in range(nd) if lattice.nbr[s, k] >= 0]
    else:
        raise ValueError(f"unknown variant {variant!r}")

    allowed = {int(s): allowed_dirs(int(s)) for s in site_ids}
    var_index = {}
    for s in site_ids:
        for r in range(nd):
            for sig in allowed[int(s)]:
                var_index[(int(s), r, sig)] = len(var_index)
    nvars = len(var_index)

    rows = []
    cols = []
    vals = []
    rhs = []
    row_meta = []

    def add(row, col, v):
        rows.append(row)
        cols.append(col)
        vals.append(v)

    # energy rows: rho = sum_sigma C[rho, sigma] sigma (lattice coordinates)
    nrow = 0
    for s in site_ids:
        s = int(s)
        for r in range(nd):
            for comp in range(2):
                for sig in allowed[s]:
                    add(nrow, var_index[(s, r, sig)], float(lattice.dirs[sig][comp]))
                rhs.append(float(lattice.dirs[r][comp]))
                row_meta.append(("energy", s, r))
                nrow += 1
    n_energy = nrow

    # force rows at every coordinate the interface variation can reach; the
    # patch test lives on the homogeneous lattice, so membership tests use
    # hexagon geometry and ignore the (distant) defect
    plus, opp = half_range(lattice)
    force_coords = set()
    for s in site_ids:
        m, n = (int(c) for c in lattice.coords[s])
        for d in lattice.dirs:
            q = (m + d[0], n + d[1])
            if variant == "reflect":
                if hexdist(*q) <= core_max:
                    force_coords.add(q)
            else:
                force_coords.add(q)
        force_coords.add((m, n))
    force_coords = sorted(force_coords)

    vert2elems = {}
    for t, tri in enumerate(mesh.tris):
        for v in tri:
            vert2elems.setdefault(int(v), []).append(t)
    det_a = abs(np.linalg.det(lattice.basis))
    dirs_cart = np.array(lattice.dirs, dtype=float) @ lattice.basis.T

    def site_at(coord):
        return lattice.index.get(coord, -1)

    for coord in force_coords:
        sp_ = site_at(coord)
        vtx = int(mesh.site_vert[sp_]) if sp_ >= 0 else -1
        in_iface = sp_ in iface
        for r in plus:
            dr = lattice.dirs[r]
            ca = float(hexdist(coord[0] - dr[0], coord[1] - dr[1]) <= core_max)
            ca -= float(hexdist(coord[0] + dr[0], coord[1] + dr[1]) <= core_max)
            cc = 0.0
            if vtx >= 0:
                for t in vert2elems.get(vtx, ()):
                    w = vols.omega_elem[t]
                    if w == 0.0:
                        continue
                    loc = int(np.nonzero(mesh.tris[t] == vtx)[0][0])
                    cc += 2.0 * (w / det_a) * float(mesh.grads[t, loc] @ dirs_cart[r])
            coeffs = {}

            def bump(site, rr, sig, v):
                key = (site, rr, sig)
                if key in var_index:
                    coeffs[key] = coeffs.get(key, 0.0) + v

            for sig, ds in enumerate(lattice.dirs):
                q = site_at((coord[0] - ds[0], coord[1] - ds[1]))
                if q >= 0 and q in iface:
                    bump(q, r, sig, omega[q])
                    bump(q, opp[r], sig, -omega[q])
            if in_iface:
                for sig in allowed[sp_]:
                    bump(sp_, r, sig, -omega[sp_])
                    bump(sp_, opp[r], sig, omega[sp_])
            if not coeffs:
                if abs(ca + cc) > 1e-9:
                    raise InfeasibleSystemError(abs(ca + cc))
                continue
            for (site, rr, sig), v in coeffs.items():
                add(nrow, var_index[(site, rr, sig)], v)
            rhs.append(-(ca + cc))
            row_meta.append(("force", sp_, r))
            nrow += 1

    A = sparse.csr_matrix((vals, (rows, cols)), shape=(nrow, nvars))
    return ConstraintSystem(
        site_ids=site_ids,
        allowed=allowed,
        var_index=var_index,
        n_dirs=nd,
        A=A,
        b=np.array(rhs),
        n_energy_rows=n_energy,
        force_sites=force_coords,
        variant=variant,
        omega=omega,
        row_meta=row_meta,
    )


def _pack(sys: ConstraintSystem, x, objective, method, gap=0.0):
    resid = 0.0
    if sys.n_rows:
        resid = float(np.max(np.abs(sys.A @ x - sys.b)))
        if resid > 1e-7:
            raise InfeasibleSystemError(resid)
    C = {}
    for s in sys.site_ids:
        s = int(s)
        srcs = sys.allowed[s]
        Cs = np.zeros((sys.n_dirs, len(srcs)))
        for r in range(sys.n_dirs):
            for kk, sig in enumerate(srcs):
                Cs[r, kk] = x[sys.var_index[(s, r, sig)]]
        C[s] = Cs
    return ReconstructionParams(
        site_ids=sys.site_ids,
        allowed=sys.allowed,
        C=C,
        objective_value=float(objective),
        method=method,
        max_residual=resid,
        duality_gap=gap,
    )


def solve_l1(sys: ConstraintSystem, engine="highs") -> ReconstructionParams:
    """Minimum-l1 parameters via the split-variable LP."""
    if sys.n_vars == 0:
        return _pack(sys, np.zeros(0), 0.0, "l1")
    if engine == "dense":
        x, fun = simplex.minimize_l1(sys.A.toarray(), sys.b)
        return _pack(sys, x, fun, "l1")
    n = sys.n_vars
    A_eq = sparse.hstack([sys.A, -sys.A], format="csc")
    c = np.ones(2 * n)
    res = linprog(c, A_eq=A_eq, b_eq=sys.b, bounds=(0, None), method="highs")
    if res.status == 2:
        raise InfeasibleSystemError(np.inf)
    if res.status != 0:
        raise RuntimeError(f"LP solver failure: {res.message}")
    x = res.x[:n] - res.x[n:]
    gap = 0.0
    if res.eqlin is not None and res.eqlin.marginals is not None:
        # marginals are d(fun)/d(b), i.e. the dual vector of the eq rows
        dual = float(sys.b @ np.asarray(res.eqlin.marginals))
        gap = abs(res.fun - dual) / (1.0 + abs(res.fun))
    return _pack(sys, x, res.fun, "l1", gap)


def solve_lsq(sys: ConstraintSystem) -> ReconstructionParams:
    """Minimum-l2-norm solution of the patch-test rows."""
    if sys.n_vars == 0:
        return _pack(sys, np.zeros(0), 0.0, "lsq")
    AAT = (sys.A @ sys.A.T).toarray()
    z, *_ = np.linalg.lstsq(AAT, sys.b, rcond=None)
    x = sys.A.T @ z
    return _pack(sys, x, float(np.abs(x).sum()), "lsq")


def identity_params(lattice, site_ids):
    """C = identity on the full range; useful for pure-atomistic checks."""
    nd = len(lattice.dirs)
    allowed = {int(s): list(range(nd)) for s in site_ids}
    C = {int(s): np.eye(nd) for s in site_ids}
    return ReconstructionParams(
        site_ids=np.asarray(site_ids, dtype=np.int64),
        allowed=allowed,
        C=C,
        objective_value=float(nd * len(site_ids)),
        method="identity",
        max_residual=0.0,
    )


def interface_energy(eam, C, D):
    """Site energy of the reconstructed stencil and its chain-rule gradient.

    C is the (n_rho, n_sigma) parameter matrix of one site and D the
    (n_sigma, 2) array of available finite differences D_sigma y.  Returns
    (V_i, dV_i/dD) with the gradient shaped like D.
    """
    G = C @ np.asarray(D, dtype=float)
    e, gV = site_energy_gradient(eam, G)
    return e, C.T @ gV


def stabilization_site(kappa, y_center, y_plus, y_minus, present=None, diag=None):
    """Second-difference penalty kappa * sum_j |y(l+a_j) - 2y(l) + y(l-a_j)|^2.

    y_plus / y_minus hold the three independent nearest-neighbour values
    (directions a_1, a_2, a_3); `present` masks directions whose stencil
    leaves the domain, which are dropped and counted in diag["dropped"].
    Returns (energy, g_center, g_plus, g_minus).
    """
    y_plus = np.asarray(y_plus, dtype=float)
    y_minus = np.asarray(y_minus, dtype=float)
    if present is None:
        present = np.ones(len(y_plus), dtype=bool)
    else:
        present = np.asarray(present, dtype=bool)
        if diag is not None and not present.all():
            diag["dropped"] = diag.get("dropped", 0) + int((~present).sum())
    d2 = y_plus - 2.0 * y_center + y_minus
    d2[~present] = 0.0
    e = kappa * float(np.sum(d2 * d2))
    g_plus = 2.0 * kappa * d2
    g_minus = 2.0 * kappa * d2
    g_center = -4.0 * kappa * d2.sum(axis=0)
    return e, g_center, g_plus, g_minus
