"""Total energies and gradients of the atomistic and coupled models.

Energies are ground-state referenced: every site contributes
V_ell(y) - V_ell(y_B) and every continuum element omega_T (W(F) - W(B)), so
the homogeneous state carries zero energy and sums stay finite as domains
grow.  Displacements are stored relative to y_B = B x on all mesh vertices /
lattice sites, with clamped entries pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from scipy.optimize import line_search

from . import kernels
from .grac import interface_energy, stabilization_site
from .lattice import NN_DIRS
from .mesh import AcMesh
from .potential import cauchy_born, site_energy_gradient


class SolverError(RuntimeError):
    pass


@dataclass
class AppliedStrain:
    """Macroscopic strain B applied through the far-field boundary."""

    B: np.ndarray

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        if np.linalg.det(self.B) <= 0:
            raise ValueError("applied strain must have positive determinant")


@dataclass
class Displacement:
    """Nodal displacement relative to y_B on a mesh or site set."""

    U: np.ndarray
    B: np.ndarray


def _partner_verts(site_vert, nbr_sites):
    safe = np.clip(nbr_sites, 0, None)
    pv = np.where(nbr_sites >= 0, site_vert[safe], -1)
    return np.where(pv >= 0, pv, -1)


class AtomisticModel:
    """Lattice statics on the hexagon H(R): all sites of the lattice carry a
    referenced site energy, sites with hexdist >= R (boundary ring and halo)
    are clamped."""

    def __init__(self, lattice, R, eam, B):
        if lattice.spec.radius < R + int(np.ceil(lattice.spec.cutoff)):
            raise ValueError("lattice must include a clamped halo beyond R")
        self.lattice = lattice
        self.R = int(R)
        self.eam = eam
        self.B = np.asarray(B, dtype=float)
        self.base_pos = lattice.positions @ self.B.T
        hd = lattice.hexdists()
        self.center = np.nonzero(hd <= self.R)[0].astype(np.int64)
        self.partner = lattice.nbr[self.center]
        # clamp a band of width r_cut inside the hexagon boundary: every
        # interacting stencil of a free site is then complete and uniform
        # states are exact critical points
        self.free = hd <= self.R - int(np.ceil(lattice.spec.cutoff))
        p = eam
        self.eref = kernels.site_energies(
            self.base_pos, self.center, self.partner, p.a, p.b, p.C, p.rho0
        )

    @property
    def n_free(self):
        return int(self.free.sum())

    def zero_displacement(self):
        return np.zeros((self.lattice.n_sites, 2))

    def energy_grad(self, U):
        """Referenced total energy and its gradient over all sites."""
        p = self.eam
        e, g = kernels.energy_grad(
            self.base_pos + U, self.center, self.partner, p.a, p.b, p.C, p.rho0, self.eref
        )
        return e, g

    def hessian_apply(self, U, W):
        p = self.eam
        return kernels.hessian_apply(
            self.base_pos + U, W, self.center, self.partner, p.a, p.b, p.C, p.rho0
        )

    def stiffness_diagonal(self):
        # nearest-neighbour lattice Laplacian scale; uniform for this model
        return np.ones(self.lattice.n_sites)

    def site_energies(self, U):
        p = self.eam
        return kernels.site_energies(
            self.base_pos + U, self.center, self.partner, p.a, p.b, p.C, p.rho0
        ) - self.eref


@dataclass
class _InterfaceSite:
    site: int
    vert: int
    omega: float
    C: np.ndarray
    partner_verts: np.ndarray
    eref: float


class CoupledModel:
    """GRAC coupled energy E_h = sum_a V + sum_i omega V_i + sum_T omega_T W
    (+ optional interface stabilization kappa |D2_nn u|^2).

    Site stencils that reach beyond the mesh (pure-atomistic domains, outer
    interface rings when R_a ~ R) are closed by clamped halo entries
    appended after the mesh vertices; their displacement is pinned to zero.
    """

    def __init__(self, mesh: AcMesh, vols, params, eam, B, kappa=0.0):
        lat = mesh.lattice
        self.mesh = mesh
        self.eam = eam
        self.B = np.asarray(B, dtype=float)
        self.kappa = float(kappa)
        self.vols = vols
        self.params = params
        self.det_a = abs(np.linalg.det(lat.basis))
        self.dirs_cart = np.array(lat.dirs, dtype=float) @ lat.basis.T

        ext_ids = []
        ext_index = {}

        def vert_of(site):
            site = int(site)
            v = mesh.site_vert[site]
            if v >= 0:
                return int(v)
            k = ext_index.get(site)
            if k is None:
                k = len(ext_ids)
                ext_index[site] = k
                ext_ids.append(site)
            return mesh.n_verts + k

        def partner_row(site, dir_idxs):
            out = np.empty(len(dir_idxs), dtype=np.int64)
            for j, k in enumerate(dir_idxs):
                ps = lat.nbr[site, k]
                out[j] = vert_of(ps) if ps >= 0 else -1
            return out

        # atomistic core
        core = mesh.core_sites
        self.core_center = mesh.site_vert[core]
        if np.any(self.core_center < 0):
            raise SolverError("core site missing from mesh vertices")
        nd = len(lat.dirs)
        self.core_partner = np.stack([partner_row(int(s), range(nd)) for s in core]) \
            if len(core) else np.zeros((0, nd), dtype=np.int64)

        # interface sites
        self.iface = []
        omega_lut = {int(s): float(w) for s, w in zip(mesh.interface_sites, vols.omega_site)}
        iface_pv = {}
        for s in mesh.interface_sites:
            s = int(s)
            pv = partner_row(s, params.allowed[s])
            if np.any(pv < 0):
                raise SolverError(f"interface stencil of site {s} hits a missing atom")
            iface_pv[s] = pv

        # stabilization stencils over a_1, a_2, a_3
        self.stab_sites = []
        self.stab_diag = {}
        if self.kappa > 0.0:
            up = [lat.dir_index[NN_DIRS[j]] for j in range(3)]
            dn = [lat.dir_index[(-NN_DIRS[j][0], -NN_DIRS[j][1])] for j in range(3)]
            for s in mesh.interface_sites:
                s = int(s)
                vp = partner_row(s, up)
                vm = partner_row(s, dn)
                present = (vp >= 0) & (vm >= 0)
                if not present.all():
                    self.stab_diag["dropped"] = self.stab_diag.get("dropped", 0) + int((~present).sum())
                self.stab_sites.append((int(mesh.site_vert[s]), vp, vm, present))

        self.ext_ids = np.array(ext_ids, dtype=np.int64)
        pos = mesh.verts_pos
        if len(ext_ids):
            pos = np.vstack([pos, lat.positions[self.ext_ids]])
        self.base_pos = pos @ self.B.T
        self.n_mesh_verts = mesh.n_verts

        p = eam
        self.core_eref = kernels.site_energies(
            self.base_pos, self.core_center, self.core_partner, p.a, p.b, p.C, p.rho0
        )
        for s in mesh.interface_sites:
            s = int(s)
            pv = iface_pv[s]
            C = params.C[s]
            vert = int(mesh.site_vert[s])
            D_B = self.base_pos[pv] - self.base_pos[vert]
            eref, _ = interface_energy(eam, C, D_B)
            self.iface.append(
                _InterfaceSite(site=s, vert=vert, omega=omega_lut[s], C=C,
                               partner_verts=pv, eref=eref)
            )

        # continuum elements
        ce = np.nonzero(vols.omega_elem > 0)[0]
        self.cont_elems = ce
        self.cont_omega = vols.omega_elem[ce]
        self.cont_tris = mesh.tris[ce]
        self.cont_grads = mesh.grads[ce]
        self.W_B = cauchy_born(eam, self.B, lat.dirs, lat.basis)[0]

    def extend(self, U):
        """Append zero displacement rows for the clamped halo entries."""
        if not len(self.ext_ids):
            return U
        return np.vstack([U, np.zeros((len(self.ext_ids), U.shape[1]))])

    def positions(self, U):
        return self.base_pos + self.extend(U)

    # -- energy and gradient -------------------------------------------------

    def energy_grad(self, U, parts=False):
        p = self.eam
        pos = self.base_pos + self.extend(U)
        e_a, grad = kernels.energy_grad(
            pos, self.core_center, self.core_partner, p.a, p.b, p.C, p.rho0, self.core_eref
        )

        e_i = 0.0
        for rec in self.iface:
            D = pos[rec.partner_verts] - pos[rec.vert]
            e, gD = interface_energy(p, rec.C, D)
            e_i += rec.omega * (e - rec.eref)
            gD = rec.omega * gD
            np.add.at(grad, rec.partner_verts, gD)
            grad[rec.vert] -= gD.sum(axis=0)

        e_s = 0.0
        if self.kappa > 0.0:
            Ux = self.extend(U)
            for vert, vp, vm, present in self.stab_sites:
                es, gc, gp, gm = stabilization_site(
                    self.kappa, Ux[vert], Ux[np.clip(vp, 0, None)], Ux[np.clip(vm, 0, None)], present
                )
                e_s += es
                grad[vert] += gc
                np.add.at(grad, vp[present], gp[present])
                np.add.at(grad, vm[present], gm[present])

        e_c = 0.0
        if len(self.cont_elems):
            gradU = np.einsum("eik,eig->ekg", U[self.cont_tris], self.cont_grads)
            F = self.B[None, :, :] + gradU
            S = np.einsum("ekg,dg->edk", F, self.dirs_cart)
            r = np.linalg.norm(S, axis=2)
            a, b, C, rho0 = p.a, p.b, p.C, p.rho0
            pair = (np.exp(-2 * a * (r - 1)) - 2 * np.exp(-a * (r - 1))).sum(axis=1)
            dens = np.exp(-b * r).sum(axis=1)
            dt = dens - rho0
            w = (pair + C * (dt ** 2 + dt ** 4)) / self.det_a
            e_c = float(np.sum(self.cont_omega * (w - self.W_B)))
            coef = (
                -2 * a * np.exp(-2 * a * (r - 1))
                + 2 * a * np.exp(-a * (r - 1))
                + (C * (2 * dt + 4 * dt ** 3))[:, None] * (-b * np.exp(-b * r))
            ) / r
            dW = np.einsum("ed,edk,dg->ekg", coef, S, self.dirs_cart) / self.det_a
            fe = np.einsum("ekg,eig->eik", dW, self.cont_grads) * self.cont_omega[:, None, None]
            np.add.at(grad, self.cont_tris, fe)

        grad = grad[: self.n_mesh_verts]
        total = e_a + e_i + e_c + e_s
        if parts:
            return total, grad, {"atomistic": e_a, "interface": e_i,
                                 "continuum": e_c, "stabilization": e_s}
        return total, grad

    def stiffness_diagonal(self):
        mesh = self.mesh
        diag = np.zeros(mesh.n_verts)
        w = mesh.areas[:, None] * np.sum(mesh.grads * mesh.grads, axis=2)
        np.add.at(diag, mesh.tris, w)
        return np.maximum(diag, 1e-12)

    def hessian_apply(self, U, W):
        """Exact Hessian-vector product of the coupled energy."""
        from .potential import site_hessian_apply

        p = self.eam
        pos = self.base_pos + self.extend(U)
        W = self.extend(W)
        out = kernels.hessian_apply(
            pos, W, self.core_center, self.core_partner, p.a, p.b, p.C, p.rho0
        )

        for rec in self.iface:
            D = pos[rec.partner_verts] - pos[rec.vert]
            wD = W[rec.partner_verts] - W[rec.vert]
            G = rec.C @ D
            hG = site_hessian_apply(p, G, rec.C @ wD)
            hD = rec.omega * (rec.C.T @ hG)
            np.add.at(out, rec.partner_verts, hD)
            out[rec.vert] -= hD.sum(axis=0)

        if self.kappa > 0.0:
            for vert, vp, vm, present in self.stab_sites:
                es, gc, gp, gm = stabilization_site(
                    self.kappa, W[vert], W[np.clip(vp, 0, None)], W[np.clip(vm, 0, None)], present
                )
                out[vert] += gc
                np.add.at(out, vp[present], gp[present])
                np.add.at(out, vm[present], gm[present])

        if len(self.cont_elems):
            gradU = np.einsum("eik,eig->ekg", U[self.cont_tris], self.cont_grads)
            gradW = np.einsum("eik,eig->ekg", W[self.cont_tris], self.cont_grads)
            F = self.B[None, :, :] + gradU
            S = np.einsum("ekg,dg->edk", F, self.dirs_cart)
            P = np.einsum("ekg,dg->edk", gradW, self.dirs_cart)
            r = np.linalg.norm(S, axis=2)
            gh = S / r[:, :, None]
            a, b, C, rho0 = p.a, p.b, p.C, p.rho0
            dens = np.exp(-b * r).sum(axis=1)
            dt = dens - rho0
            dF = C * (2 * dt + 4 * dt ** 3)
            ddF = C * (2 + 12 * dt * dt)
            dpsi = -b * np.exp(-b * r)
            pr = (
                -2 * a * np.exp(-2 * a * (r - 1))
                + 2 * a * np.exp(-a * (r - 1))
                + dF[:, None] * dpsi
            )
            ppr = (
                4 * a * a * np.exp(-2 * a * (r - 1))
                - 2 * a * a * np.exp(-a * (r - 1))
                + dF[:, None] * (b * b * np.exp(-b * r))
            )
            u = np.sum(gh * P, axis=2)
            s = np.sum(dpsi * u, axis=1)
            hS = (
                (ppr * u)[:, :, None] * gh
                + (pr / r)[:, :, None] * (P - u[:, :, None] * gh)
                + (ddF[:, None] * dpsi * s[:, None])[:, :, None] * gh
            )
            d2 = np.einsum("edk,dg->ekg", hS, self.dirs_cart) / self.det_a
            fe = np.einsum("ekg,eig->eik", d2, self.cont_grads) * self.cont_omega[:, None, None]
            np.add.at(out, self.cont_tris, fe)
        return out[: self.n_mesh_verts]


def stiffness_matrix(mesh, free_mask):
    """P1 Laplacian over the free vertices (2 dofs per vertex, interleaved)."""
    nv = mesh.n_verts
    rows, cols, vals = [], [], []
    for t in range(mesh.n_elems):
        tri = mesh.tris[t]
        g = mesh.grads[t]
        for i in range(3):
            for j in range(3):
                rows.append(tri[i])
                cols.append(tri[j])
                vals.append(mesh.areas[t] * float(g[i] @ g[j]))
    K = sparse.csr_matrix((vals, (rows, cols)), shape=(nv, nv))
    idx = np.nonzero(free_mask)[0]
    K = K[idx][:, idx]
    return sparse.kron(K, sparse.eye(2)).tocsr()


# -- equilibrium solver -------------------------------------------------------


def solve_equilibrium(fun_grad, u0, tol=1e-8, maxiter=20000, precond=None,
                      trace=None, hess_apply=None, newton_switch=1e-5):
    """Preconditioned Polak-Ribiere CG with strong-Wolfe line search.

    fun_grad maps a flat dof vector to (energy, flat gradient); returns the
    minimizer dof vector.  Once the residual drops below `newton_switch`
    (where energy differences reach summation noise and Armijo tests go
    blind) the run finishes with Newton-CG steps driven purely by gradients;
    hess_apply supplies exact Hessian-vector products and defaults to a
    central difference of the gradient.  Raises SolverError on line-search
    failure or iteration cap with the final residual attached.
    """
    x = np.asarray(u0, dtype=float).copy()
    minv = 1.0 / np.asarray(precond, dtype=float) if precond is not None else None

    cache = {}

    def fg(v):
        key = v.tobytes()
        if cache.get("k") != key:
            cache["k"] = key
            cache["v"] = fun_grad(v)
        return cache["v"]

    if hess_apply is None:
        def hess_apply(v, w):
            nw = np.linalg.norm(w)
            if nw == 0:
                return np.zeros_like(w)
            h = 1e-6 * (1.0 + np.linalg.norm(v)) / nw
            return (fun_grad(v + h * w)[1] - fun_grad(v - h * w)[1]) / (2 * h)

    e, g = fg(x)
    z = g * minv if minv is not None else g.copy()
    d = -z
    gz = g @ z
    it = 0
    stalled = False
    while np.max(np.abs(g), initial=0.0) > max(tol, newton_switch) and not stalled:
        if it >= maxiter:
            raise SolverError(
                f"no convergence in {maxiter} iterations, residual {np.max(np.abs(g)):.3e}"
            )
        res = line_search(lambda v: fg(v)[0], lambda v: fg(v)[1], x, d,
                          gfk=g, old_fval=e, c1=1e-4, c2=0.4, maxiter=40)
        alpha = res[0]
        if alpha is None:
            d = -z
            try:
                alpha = _backtrack(fg, x, d, e, g)
            except SolverError:
                stalled = True
                continue
        xn = x + alpha * d
        en, gn = fg(xn)
        if en > e + 1e-10 * (1 + abs(e)):
            raise SolverError(f"line search failed to decrease energy at it {it}")
        zn = gn * minv if minv is not None else gn.copy()
        gzn = gn @ zn
        beta = max(0.0, (zn @ (gn - g)) / gz) if gz > 0 else 0.0
        d = -zn + beta * d
        if d @ gn >= 0:
            d = -zn
        x, e, g, z, gz = xn, en, gn, zn, gzn
        it += 1
        if trace is not None:
            trace.append((it, e, float(np.max(np.abs(g), initial=0.0))))

    # Newton-CG endgame on the gradient alone
    for _ in range(60):
        res = np.max(np.abs(g), initial=0.0)
        if res <= tol:
            return x
        if it >= maxiter + 60:
            break
        d = _newton_cg(lambda w: hess_apply(x, w), -g, minv, rtol=0.05)
        step = 1.0
        for _ in range(25):
            xn = x + step * d
            _, gn = fg(xn)
            if np.max(np.abs(gn), initial=0.0) < res:
                break
            step *= 0.5
        else:
            raise SolverError(f"stalled at residual {res:.3e} (tol {tol:.1e})")
        x, g = xn, gn
        it += 1
        if trace is not None:
            trace.append((it, fg(x)[0], float(np.max(np.abs(g), initial=0.0))))
    res = np.max(np.abs(g), initial=0.0)
    if res > tol:
        raise SolverError(f"no convergence, final residual {res:.3e} (tol {tol:.1e})")
    return x


def _newton_cg(apply_h, rhs, minv, rtol=0.05, maxiter=400):
    """Linear CG on H d = rhs, truncated at a relative residual."""
    d = np.zeros_like(rhs)
    r = rhs.copy()
    z = r * minv if minv is not None else r.copy()
    p = z.copy()
    rz = r @ z
    target = rtol * np.linalg.norm(rhs)
    for _ in range(maxiter):
        hp = apply_h(p)
        php = p @ hp
        if php <= 0:
            return d if np.any(d) else rhs.copy()
        alpha = rz / php
        d += alpha * p
        r -= alpha * hp
        if np.linalg.norm(r) <= target:
            break
        zn = r * minv if minv is not None else r.copy()
        rzn = r @ zn
        p = zn + (rzn / rz) * p
        rz = rzn
    return d


def _backtrack(fg, x, d, e0, g0):
    slope = g0 @ d
    if slope >= 0:
        raise SolverError("backtracking called with non-descent direction")
    alpha = 1.0
    for _ in range(60):
        e, _ = fg(x + alpha * d)
        if e <= e0 + 1e-4 * alpha * slope:
            return alpha
        alpha *= 0.5
    raise SolverError("backtracking line search failed")


def make_free_fun(model, mesh_free_mask, U_template=None):
    """Wrap a model's full-array energy_grad as a flat free-dof callable."""
    idx = np.nonzero(mesh_free_mask)[0]
    nv = len(mesh_free_mask)

    def expand(x):
        U = np.zeros((nv, 2)) if U_template is None else U_template.copy()
        U[idx] = x.reshape(-1, 2)
        return U

    def fun(x):
        e, g = model.energy_grad(expand(x))
        return e, g[idx].ravel()

    return fun, expand, idx


# -- stability ----------------------------------------------------------------


def stability_check(hess_apply, stiffness, n, probes=3, tol=1e-8):
    """Smallest Rayleigh quotients <Hv, v> / <Kv, v> via Lanczos iteration.

    hess_apply maps a flat vector to H v; stiffness is the SPD H1-seminorm
    Gram matrix of the free dofs.  Returns the `probes` smallest generalized
    eigenvalue estimates (the empirical stability constant is the first).
    """
    if n == 0:
        raise ValueError("empty dof set")
    op = spla.LinearOperator((n, n), matvec=lambda v: hess_apply(np.asarray(v)))
    k = min(probes, n - 1)
    vals = spla.eigsh(op, k=k, M=stiffness, which="SA", tol=tol,
                      return_eigenvectors=False)
    return np.sort(vals)
