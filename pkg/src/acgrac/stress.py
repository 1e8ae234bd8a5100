"""Computable piecewise-constant stress tensors and their correction.

Every first variation assembled here is rewritten through bond-element
weights: a finite difference D_rho v(l) equals the weighted sum of
grad_T v . rho over the elements supporting the bond segment, with weights
1/(2|rho|) on the 2|rho| edge-sharing elements for Type I bonds and exact
crossing-length fractions for Type II bonds.  Scattering the per-bond force
vectors with those weights yields P0 tensor fields sigma with

    <dE(y), v> = sum_T |T| sigma(T) : grad_T v      for all P1 fields v,

which the estimators and the Crouzeix-Raviart correction rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import hexnorm as geo_hexnorm
from .geometry import walk_segment_cells
from .lattice import classify_bond
from .mesh import INTERFACE_LAYERS, REGION_CONT, REGION_INTERFACE, AcMesh, MicroMesh
from .potential import cauchy_born, site_energy_gradient


@dataclass
class StressField:
    mesh: object
    sig: np.ndarray  # (n_elems, 2, 2)
    tag: str

    def copy(self):
        return StressField(self.mesh, self.sig.copy(), self.tag)

    def dump(self, fh, region_names=("atomistic", "interface", "continuum")):
        reg = getattr(self.mesh, "region", None)
        for t in range(len(self.sig)):
            tag = region_names[int(reg[t])] if reg is not None else self.tag
            s = self.sig[t]
            fh.write(f"{tag} {s[0,0]:.17g} {s[0,1]:.17g} {s[1,0]:.17g} {s[1,1]:.17g}\n")


@dataclass
class BondWeights:
    """Element weights of one bond: [((m, n, orient), Fraction), ...]."""

    offset: tuple
    entries: list

    @property
    def total(self):
        return sum(w for _, w in self.entries)


_UNIT_EDGE_CELLS = {
    (1, 0): (((0, 0), 0), ((0, -1), 1)),
    (0, 1): (((0, 0), 0), ((-1, 0), 1)),
    (-1, 1): (((-1, 0), 0), ((-1, 0), 1)),
}


def unit_edge_cells(q, d):
    """The two canonical cells sharing the unit edge (q, q+d)."""
    if d not in _UNIT_EDGE_CELLS:
        q = (q[0] + d[0], q[1] + d[1])
        d = (-d[0], -d[1])
    (o1, s1), (o2, s2) = _UNIT_EDGE_CELLS[d]
    return (
        (q[0] + o1[0], q[1] + o1[1], s1),
        (q[0] + o2[0], q[1] + o2[1], s2),
    )


_PATTERN_CACHE = {}


def bond_pattern(offset):
    """Element offsets and exact weights of a bond anchored at the origin."""
    offset = (int(offset[0]), int(offset[1]))
    pat = _PATTERN_CACHE.get(offset)
    if pat is not None:
        return pat
    bv = classify_bond(offset)
    entries = []
    if bv.beta == 0:
        d = (offset[0] // bv.alpha, offset[1] // bv.alpha)
        w = Fraction(1, 2 * bv.alpha)
        for k in range(bv.alpha):
            q = (k * d[0], k * d[1])
            for cell in unit_edge_cells(q, d):
                entries.append((cell, w))
    else:
        entries = [(c, w) for c, w in walk_segment_cells((0, 0), offset)]
    pat = BondWeights(offset=offset, entries=entries)
    _PATTERN_CACHE[offset] = pat
    return pat


def bond_weights(lattice, micro: MicroMesh, site, dir_idx):
    """BondWeights of bond (site, site+rho) with absolute cell coordinates."""
    if lattice.nbr[site, dir_idx] < 0:
        raise ValueError("bond does not exist at this site")
    m, n = lattice.coords[site]
    pat = bond_pattern(lattice.dirs[dir_idx])
    entries = []
    for (dm, dn, o), w in pat.entries:
        cell = (m + dm, n + dn, o)
        if cell not in micro.cell_index:
            raise ValueError("bond leaves the micro-triangulation")
        entries.append((cell, w))
    return BondWeights(offset=pat.offset, entries=entries)


def bond_forces(eam, pos, center, partner):
    """Per-(site, direction) force vectors dV/d(D_rho y), nan-free masked."""
    mask = partner >= 0
    safe = np.where(mask, partner, 0)
    g = pos[safe] - pos[center][:, None, :]
    r = np.linalg.norm(g, axis=2)
    r = np.where(mask, r, 1.0)
    a, b, C, rho0 = eam.a, eam.b, eam.C, eam.rho0
    dens = np.where(mask, np.exp(-b * r), 0.0).sum(axis=1)
    dF = C * (2 * (dens - rho0) + 4 * (dens - rho0) ** 3)
    coef = (
        -2 * a * np.exp(-2 * a * (r - 1))
        + 2 * a * np.exp(-a * (r - 1))
        + dF[:, None] * (-b * np.exp(-b * r))
    ) / r
    coef = np.where(mask, coef, 0.0)
    return coef[:, :, None] * g, mask


class _CellGrid:
    """Dense (m, n, orient) -> element index lookup."""

    def __init__(self, cells, values, pad=4):
        cells = np.asarray(cells, dtype=np.int64)
        self.m0 = cells[:, 0].min() - pad
        self.n0 = cells[:, 1].min() - pad
        M = cells[:, 0].max() - self.m0 + pad + 1
        N = cells[:, 1].max() - self.n0 + pad + 1
        self.grid = np.full((M, N, 2), -1, dtype=np.int64)
        self.grid[cells[:, 0] - self.m0, cells[:, 1] - self.n0, cells[:, 2]] = values

    def lookup(self, m, n, o):
        mm = m - self.m0
        nn = n - self.n0
        ok = (mm >= 0) & (mm < self.grid.shape[0]) & (nn >= 0) & (nn < self.grid.shape[1])
        out = np.full(len(mm), -1, dtype=np.int64)
        out[ok] = self.grid[mm[ok], nn[ok], o]
        return out


def sigma_a(eam, lattice, micro: MicroMesh, y_sites, centers=None) -> StressField:
    """Canonical atomistic stress on the micro-triangulation.

    y_sites are deformed positions per lattice site; `centers` selects the
    site-energy set whose first variation the field represents (default all
    lattice sites).  Bonds whose support leaves the micro mesh scatter only
    into resident elements (their outside parts multiply vanishing test
    gradients for supported fields).
    """
    det_a = micro.det_a
    sig = np.zeros((micro.n_elems, 2, 2))
    grid = _CellGrid(micro.cells, np.arange(micro.n_elems))
    center = np.arange(lattice.n_sites) if centers is None else np.asarray(centers)
    f, mask = bond_forces(eam, np.asarray(y_sites, dtype=float), center, lattice.nbr[center])
    coords = lattice.coords[center]
    dirs_cart = np.array(lattice.dirs, dtype=float) @ lattice.basis.T
    for k, d in enumerate(lattice.dirs):
        has = np.nonzero(mask[:, k])[0]
        if not len(has):
            continue
        outer = f[has, k][:, :, None] * dirs_cart[k][None, None, :]
        pat = bond_pattern(d)
        for (dm, dn, o), w in pat.entries:
            idx = grid.lookup(coords[has, 0] + dm, coords[has, 1] + dn, o)
            ok = idx >= 0
            np.add.at(sig, idx[ok], (2.0 * float(w) / det_a) * outer[ok])
    return StressField(micro, sig, "atomistic")


def sigma_cb(eam, lattice, F):
    """Continuum (Cauchy-Born) stress of a uniform deformation gradient."""
    return cauchy_born(eam, F, lattice.dirs, lattice.basis)[1]


def _edge_pieces(mesh: AcMesh, a, b, frac, out, depth=0):
    if depth > 32:
        raise RuntimeError("edge walk recursion overflow")
    key = (min(a, b), max(a, b))
    els = mesh.face_map.get(key)
    if els:
        share = frac / len(els)
        for t in els:
            out.append((t, share))
        return
    mx = (mesh.verts_lat[a] + mesh.verts_lat[b]) / 2.0
    mid = mesh._vkey.get((mx[0], mx[1]))
    if mid is None:
        raise RuntimeError("bond segment is not resolved by mesh edges")
    _edge_pieces(mesh, a, mid, frac / 2.0, out, depth + 1)
    _edge_pieces(mesh, mid, b, frac / 2.0, out, depth + 1)


def sigma_h(cm, U) -> StressField:
    """Canonical coupled stress of a CoupledModel state (see eq-level notes).

    Per element: 2 omega_l w_l^rho(T) dV^h_rho x rho / detA over supported
    bonds, plus (omega_T/|T|) sigma_cb(grad y), plus the exact first
    variation of the stabilization term distributed over nearest-neighbour
    bond segments.
    """
    mesh = cm.mesh
    lat = mesh.lattice
    det_a = cm.det_a
    sig = np.zeros((mesh.n_elems, 2, 2))
    pos = cm.positions(U)
    dirs_cart = cm.dirs_cart

    def outside_domain(cell):
        from .geometry import micro_cell_corners, hexnorm
        return any(hexnorm(*c) > mesh.R + 1e-9 for c in micro_cell_corners(*cell))

    def scatter_bond(site_coord, dir_idx, tensor, omega):
        pat = bond_pattern(lat.dirs[dir_idx])
        m, n = site_coord
        for (dm, dn, o), w in pat.entries:
            cell = (m + dm, n + dn, o)
            t = mesh.cell_map.get(cell)
            if t is not None and mesh.region[t] != REGION_CONT:
                sig[t] += (2.0 * float(w) * omega / det_a) * tensor
                continue
            if t is None and outside_domain(cell):
                # clamped test fields vanish there; the restricted identity
                # drops these pieces exactly
                continue
            # straddling Type I sub-edge: absorb into the interface-side twin
            bv = classify_bond(lat.dirs[dir_idx])
            if bv.beta != 0:
                raise RuntimeError("type II bond escaped the atomistic region")
            d = (lat.dirs[dir_idx][0] // bv.alpha, lat.dirs[dir_idx][1] // bv.alpha)
            q = None
            for k in range(bv.alpha):
                qq = (m + k * d[0], n + k * d[1])
                if cell in unit_edge_cells(qq, d):
                    q = qq
                    break
            if q is None:
                raise RuntimeError("bond sub-edge bookkeeping failed")
            twin = [c for c in unit_edge_cells(q, d) if c != cell][0]
            tt = mesh.cell_map.get(twin)
            if tt is None or mesh.region[tt] == REGION_CONT:
                if outside_domain(cell) and (tt is None or outside_domain(twin)):
                    continue
                raise RuntimeError("bond sub-edge has no interface-side element")
            sig[tt] += (2.0 * float(w) * omega / det_a) * tensor

    # atomistic core bonds: their supports stay in the a/i region (or exit
    # the domain entirely for pure-atomistic meshes), so they scatter
    # through a dense cell grid in one vectorized pass
    inner = np.nonzero(mesh.region != REGION_CONT)[0]
    if len(inner):
        grid = _CellGrid(mesh.micro_cell[inner], inner)
        f, mask = bond_forces(cm.eam, pos, cm.core_center, cm.core_partner)
        core = mesh.core_sites
        coords = lat.coords
        for k, d in enumerate(lat.dirs):
            has = np.nonzero(mask[:, k])[0]
            if not len(has):
                continue
            outer = f[has, k][:, :, None] * dirs_cart[k][None, None, :]
            for (dm, dn, o), w in bond_pattern(d).entries:
                mm = coords[core[has], 0] + dm
                nn = coords[core[has], 1] + dn
                idx = grid.lookup(mm, nn, o)
                ok = idx >= 0
                if not np.all(ok):
                    # only cells beyond the domain hexagon may be absent
                    for mmi, nni in zip(mm[~ok], nn[~ok]):
                        if not outside_domain((int(mmi), int(nni), o)):
                            raise RuntimeError("core bond left the atomistic region")
                np.add.at(sig, idx[ok], (2.0 * float(w) / det_a) * outer[ok])

    # interface bonds with reconstructed forces
    for rec in cm.iface:
        D = pos[rec.partner_verts] - pos[rec.vert]
        G = rec.C @ D
        _, gV = site_energy_gradient(cm.eam, G)
        H = rec.C.T @ gV  # force per used source direction
        srcs = cm.params.allowed[rec.site]
        for kk, sig_dir in enumerate(srcs):
            tensor = np.outer(H[kk], dirs_cart[sig_dir])
            scatter_bond(lat.coords[rec.site], sig_dir, tensor, rec.omega)

    # continuum part
    if len(cm.cont_elems):
        gradU = np.einsum("eik,eig->ekg", U[cm.cont_tris], cm.cont_grads)
        F = cm.B[None, :, :] + gradU
        S = np.einsum("ekg,dg->edk", F, dirs_cart)
        r = np.linalg.norm(S, axis=2)
        a, b, C, rho0 = cm.eam.a, cm.eam.b, cm.eam.C, cm.eam.rho0
        dens = np.exp(-b * r).sum(axis=1)
        dF = C * (2 * (dens - rho0) + 4 * (dens - rho0) ** 3)
        coef = (
            -2 * a * np.exp(-2 * a * (r - 1))
            + 2 * a * np.exp(-a * (r - 1))
            + dF[:, None] * (-b * np.exp(-b * r))
        ) / r
        sc = np.einsum("ed,edk,dg->ekg", coef, S, dirs_cart) / det_a
        w = (cm.cont_omega / mesh.areas[cm.cont_elems])[:, None, None]
        np.add.at(sig, cm.cont_elems, w * sc)

    # stabilization first variation over nearest-neighbour segments
    if cm.kappa > 0.0:
        half = [lat.dir_index[d] for d in [(1, 0), (1, -1), (0, -1)]]
        for vert, vp, vm, present in cm.stab_sites:
            for j in range(3):
                if not present[j]:
                    continue
                d2 = U[vp[j]] - 2.0 * U[vert] + U[vm[j]]
                tvec = 2.0 * cm.kappa * d2
                for b_vert, dcart in ((vp[j], dirs_cart[half[j]]),
                                      (vm[j], -dirs_cart[half[j]])):
                    pieces = []
                    _edge_pieces(mesh, vert, int(b_vert), 1.0, pieces)
                    tensor = np.outer(tvec, dcart)
                    for t, share in pieces:
                        sig[t] += share * tensor / mesh.areas[t]
    return StressField(mesh, sig, "coupled")


def weak_form_residual(field: StressField, grad_vec, test_fields):
    """max |<g, v> - sum_T |T| sigma : grad_T v| over the given test fields."""
    mesh = field.mesh
    tris = mesh.tris
    if isinstance(mesh, MicroMesh):
        grads = mesh.grads()
        areas = np.full(mesh.n_elems, mesh.area)
    else:
        grads = mesh.grads
        areas = mesh.areas
    worst = 0.0
    for v in test_fields:
        gv = np.einsum("tkl,til,tik->t", field.sig, grads, v[tris])
        rhs = float(np.sum(areas * gv))
        lhs = float(np.sum(grad_vec * v))
        worst = max(worst, abs(lhs - rhs))
    return worst


def divergence_residual(field: StressField, free_verts):
    """max over nodal hats of |sum_T |T| sigma(T) : (e_k x grad phi_v)|."""
    mesh = field.mesh
    if isinstance(mesh, MicroMesh):
        grads = mesh.grads()
        areas = np.full(mesh.n_elems, mesh.area)
        nv = mesh.n_verts
    else:
        grads = mesh.grads
        areas = mesh.areas
        nv = mesh.n_verts
    acc = np.zeros((nv, 2))
    contrib = np.einsum("t,tkl,til->tik", areas, field.sig, grads)
    np.add.at(acc, mesh.tris, contrib)
    if len(free_verts) == 0:
        return 0.0
    return float(np.max(np.abs(acc[free_verts])))


def is_divergence_free(field: StressField, free_verts, tol=1e-12):
    return divergence_residual(field, free_verts) <= tol


_J = np.array([[0.0, -1.0], [1.0, 0.0]])


def cr_field(mesh: AcMesh, c_faces):
    """P0 tensor field grad(c) J of a vector Crouzeix-Raviart function c.

    c_faces maps face index -> value (2,) at the face midpoint; missing
    faces are zero.
    """
    sig = np.zeros((mesh.n_elems, 2, 2))
    face_of = {tuple(f): i for i, f in enumerate(np.asarray(mesh.faces))}
    for t in range(mesh.n_elems):
        tri = mesh.tris[t]
        for loc in range(3):
            a, b = tri[(loc + 1) % 3], tri[(loc + 2) % 3]
            fi = face_of[(min(a, b), max(a, b))]
            cf = c_faces.get(fi)
            if cf is None:
                continue
            grad_eta = -2.0 * mesh.grads[t, loc]
            sig[t] += np.outer(cf, _J.T @ grad_eta)
    return StressField(mesh, sig, "crJ")


def cr_correct(sig_a: StressField, sig_h: StressField, mesh: AcMesh,
               micro: MicroMesh):
    """Crouzeix-Raviart stress correction of Algorithm-style step 2.

    Minimizes the interface mismatch sum_T |T| |sig_a - sig_h - grad c J|_F^2
    over face-midpoint values c supported on the faces of the interface
    elements (zero elsewhere).  The sum runs over every element owning a
    free face: anchoring the closure keeps the corrected field equal to the
    atomistic stress in the atomistic region and to the continuum stress at
    uniform states.  Returns (corrected field, mismatch before, after).
    """
    # the correction band: interface elements plus the r_cut layers of
    # atomistic elements their reconstructed bonds scatter into
    r_cut = int(np.ceil(mesh.lattice.spec.cutoff))
    band = np.nonzero(
        (mesh.region != REGION_CONT)
        & (mesh.vert_hex[mesh.tris].max(axis=1) >= mesh.R_a - INTERFACE_LAYERS + 1 - r_cut)
    )[0]
    faces = np.asarray(mesh.faces)
    face_of = {tuple(f): i for i, f in enumerate(faces)}
    free = set()
    for t in band:
        tri = mesh.tris[t]
        for loc in range(3):
            a, b = tri[(loc + 1) % 3], tri[(loc + 2) % 3]
            free.add(face_of[(min(a, b), max(a, b))])
    free_faces = sorted(free)
    fcol = {f: k for k, f in enumerate(free_faces)}
    nf = len(free_faces)
    touched = sorted({int(e) for f in free_faces for e in mesh.face_elems[f] if e >= 0})

    def micro_sig_of(t):
        cell = tuple(mesh.micro_cell[t])
        if cell[0] <= -(2 ** 30) or cell not in micro.cell_index:
            return None
        return sig_a.sig[micro.cell_index[cell]]

    def mismatch(field):
        total = 0.0
        for t in touched:
            sa = micro_sig_of(t)
            if sa is None:
                continue
            diff = sa - field.sig[t]
            total += mesh.areas[t] * float(np.sum(diff * diff))
        return total

    corrected = sig_h.copy()
    corrected.tag = "coupled-corrected"
    mismatch0 = mismatch(sig_h)
    if nf == 0:
        return corrected, mismatch0, mismatch0

    # pinned faces outside the band carry one shared unknown offset on the
    # continuum side (c locally constant there keeps grad c J = 0 far away);
    # this removes the inner/outer constant mismatch the pinning creates
    mid_hex = np.array([
        geo_hexnorm(*(0.5 * (mesh.verts_lat[a] + mesh.verts_lat[b])))
        for a, b in faces
    ])
    ncols = 2 * nf + 2

    def face_cols(fi):
        col = fcol.get(fi)
        if col is not None:
            return 2 * col
        if mid_hex[fi] >= mesh.R_a - 1:
            return 2 * nf
        return -1

    rows = []
    rhs = []
    for t in touched:
        sa = micro_sig_of(t)
        # bisected collar neighbours carry no canonical cell: pin the
        # correction there instead of fitting an unknown target
        target = np.zeros((2, 2)) if sa is None else sa - sig_h.sig[t]
        sq = np.sqrt(mesh.areas[t])
        tri = mesh.tris[t]
        for k in range(2):
            for l in range(2):
                row = np.zeros(ncols)
                for loc in range(3):
                    a, b = tri[(loc + 1) % 3], tri[(loc + 2) % 3]
                    base = face_cols(face_of[(min(a, b), max(a, b))])
                    if base < 0:
                        continue
                    gj = _J.T @ (-2.0 * mesh.grads[t, loc])
                    row[base + k] += gj[l]
                rows.append(sq * row)
                rhs.append(sq * target[k, l])
    A = np.array(rows)
    y = np.array(rhs)
    G = A.T @ A + 1e-12 * np.eye(ncols)
    sol = np.linalg.solve(G, A.T @ y)
    c_out = sol[2 * nf: 2 * nf + 2]
    c_faces = {free_faces[k]: sol[2 * k: 2 * k + 2] for k in range(nf)}
    # the outer offset applies to every pinned face on the continuum side,
    # so far elements see a constant c and a vanishing correction
    for fi in range(len(faces)):
        if fi not in c_faces and mid_hex[fi] >= mesh.R_a - 1:
            c_faces[fi] = c_out
    corr = cr_field(mesh, c_faces)
    corrected.sig = sig_h.sig + corr.sig
    return corrected, mismatch0, mismatch(corrected)
