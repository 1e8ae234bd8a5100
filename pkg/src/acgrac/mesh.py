"""Coupled a/c triangulation: micro zone, interface band, graded continuum.

The computational domain is the hexagon H(R) of graph radius R around the
origin.  The atomistic region is H(R_a); its outermost ceil(r_cut) = 2 atom
layers form the interface band.  All elements inside H(r_fine) with
r_fine = R_a + 2 are canonical micro-triangles of the lattice; beyond that
the continuum is meshed by concentric hexagonal rings whose spacing grows
geometrically, capped by ``grading * (distance to the interface)``, zipped
together into conforming transition strips.

Error-driven refinement uses newest-vertex bisection with recursive
conformity closure.  Interface expansion and domain enlargement are realized
by regenerating the mesh at the new radii and replaying the refinement
pattern from a size field (see adapt module).

Vacancy positions stay in the triangulation as geometric vertices (no
degrees of freedom); P1 conformity keeps all weak-form stress identities
exact across them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .lattice import Lattice, hexdist

REGION_ATOM = 0
REGION_INTERFACE = 1
REGION_CONT = 2

INTERFACE_LAYERS = 2  # ceil(r_cut) atom layers for the shipped r_cut = 2

_CCW_CORNERS = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))


class MeshError(RuntimeError):
    pass


def ring_coords(radius, spacing):
    """CCW lattice coordinates of hexagon ring `radius`, one per `spacing`
    steps along each side (corners always included), starting at (radius, 0).
    Returns (coords, perimeter parameters in [0, 6))."""
    if radius == 0:
        return [(0, 0)], [0.0]
    out = []
    params = []
    for k in range(6):
        c0 = (_CCW_CORNERS[k][0] * radius, _CCW_CORNERS[k][1] * radius)
        c1 = (_CCW_CORNERS[(k + 1) % 6][0] * radius, _CCW_CORNERS[(k + 1) % 6][1] * radius)
        step = ((c1[0] - c0[0]) // radius, (c1[1] - c0[1]) // radius)
        for t in range(0, radius, spacing):
            out.append((c0[0] + t * step[0], c0[1] + t * step[1]))
            params.append(k + t / radius)
    return out, params


def ring_schedule(r_fine, R_a, R, grading):
    """Radii of the continuum rings from r_fine out to R."""
    radii = [r_fine]
    s = 1
    while radii[-1] < R:
        allow = max(1, int(grading * (radii[-1] - R_a)))
        s = max(1, min(2 * s, allow, R - radii[-1]))
        radii.append(radii[-1] + s)
    return radii


class AcMesh:
    """Conforming triangulation of the coupled configuration.

    Arrays (rebuilt by _finalize after construction or bisection):

    verts_lat : (nv, 2) lattice coordinates (dyadic-exact float64)
    verts_pos : (nv, 2) cartesian positions
    vert_site : (nv,) lattice site id, -1 non-lattice vertex, -2 vacancy
    site_vert : (n_sites,) vertex id of resident lattice sites, else -1
    tris      : (nt, 3) CCW vertex triples
    region    : (nt,) REGION_* tag
    micro_cell: (nt, 3) canonical cell key (m, n, orient), -2**30 sentinel
    clamped   : (nv,) bool, u = 0 Dirichlet flags (domain boundary)
    """

    def __init__(self, lattice: Lattice, R_a, R, grading=0.5, _build=True):
        self.lattice = lattice
        self.R_a = int(R_a)
        self.R = int(R)
        self.grading = float(grading)
        if _build:
            self._build()

    # -- construction ------------------------------------------------------

    def _build(self):
        lat = self.lattice
        R_a, R = self.R_a, self.R
        if R > lat.spec.radius:
            raise MeshError("lattice does not cover the requested domain")
        core_ids = lat.defect_core_ids()
        if len(core_ids) and not self.pure_atomistic:
            core_ring = int(max(hexdist(*lat.coords[i]) for i in core_ids))
            if R_a < core_ring + INTERFACE_LAYERS:
                raise MeshError(
                    f"R_a={R_a} too small to contain defect core (ring {core_ring})"
                )

        self._verts = []
        self._vkey = {}
        self._clamped_set = set()
        r_fine = self.r_fine

        def vid(x, y):
            key = (float(x), float(y))
            i = self._vkey.get(key)
            if i is None:
                i = len(self._verts)
                self._verts.append(key)
                self._vkey[key] = i
            return i

        self._vid = vid

        tris = []
        micro = []
        for m in range(-r_fine - 1, r_fine + 1):
            for n in range(-r_fine - 1, r_fine + 1):
                for o in (0, 1):
                    corners = geo.micro_cell_corners(m, n, o)
                    if all(hexdist(*c) <= r_fine for c in corners):
                        tris.append(tuple(vid(*c) for c in corners))
                        micro.append((m, n, o))

        radii = ring_schedule(r_fine, R_a, R, self.grading) if r_fine < R else [r_fine]
        rings = []
        ring_params = []
        for k, rho in enumerate(radii):
            spacing = 1 if k == 0 else radii[k] - radii[k - 1]
            coords, params = ring_coords(rho, spacing)
            rings.append([vid(*c) for c in coords])
            ring_params.append(params)
        for k in range(len(rings) - 1):
            for t in geo.zip_rings(rings[k], ring_params[k],
                                   rings[k + 1], ring_params[k + 1]):
                tris.append(t)
                micro.append(None)
        for v in rings[-1]:
            self._clamped_set.add(v)

        self._raw_tris = tris
        self._raw_micro = micro
        self._finalize()

    @property
    def pure_atomistic(self):
        return self.R_a >= self.R

    @property
    def r_fine(self):
        return self.R if self.pure_atomistic else min(self.R, self.R_a + 2)

    def _finalize(self):
        lat = self.lattice
        self.verts_lat = np.array(self._verts, dtype=float)
        self.verts_pos = self.verts_lat @ lat.basis.T
        nv = len(self._verts)
        vac = set(lat.defect_coords)

        self.vert_site = np.full(nv, -1, dtype=np.int64)
        self.site_vert = np.full(lat.n_sites, -1, dtype=np.int64)
        for i, (x, y) in enumerate(self._verts):
            if x == int(x) and y == int(y):
                c = (int(x), int(y))
                s = lat.index.get(c)
                if s is not None:
                    self.vert_site[i] = s
                    self.site_vert[s] = i
                elif c in vac:
                    self.vert_site[i] = -2

        tris = np.array(self._raw_tris, dtype=np.int64)
        # enforce CCW orientation
        p = self.verts_pos
        u = p[tris[:, 1]] - p[tris[:, 0]]
        v = p[tris[:, 2]] - p[tris[:, 0]]
        cr = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        flip = cr < 0
        tris[flip] = tris[flip][:, [0, 2, 1]]
        self.tris = tris
        self.micro_cell = np.full((len(tris), 3), -(2 ** 30), dtype=np.int64)
        for t, cell in enumerate(self._raw_micro):
            if cell is not None:
                self.micro_cell[t] = cell

        self.areas = 0.5 * np.abs(cr)
        if np.any(self.areas <= 1e-14):
            raise MeshError("degenerate element produced")

        # P1 barycentric gradients: grads[t, i] = grad lambda_i
        e1 = p[tris[:, 1]] - p[tris[:, 0]]
        e2 = p[tris[:, 2]] - p[tris[:, 0]]
        det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
        g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det
        g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det
        self.grads = np.stack([-g1 - g2, g1, g2], axis=1)

        # region tags
        hd = np.array([geo.hexnorm(*v) for v in self._verts])
        self.vert_hex = hd
        tri_max = hd[tris].max(axis=1)
        is_micro = self.micro_cell[:, 0] > -(2 ** 30)
        self.region = np.full(len(tris), REGION_CONT, dtype=np.int8)
        if self.pure_atomistic:
            self.region[:] = REGION_ATOM
        else:
            inside = is_micro & (tri_max <= self.R_a + 1e-9)
            self.region[inside & (tri_max > self.R_a - INTERFACE_LAYERS + 1e-9)] = REGION_INTERFACE
            self.region[inside & (tri_max <= self.R_a - INTERFACE_LAYERS + 1e-9)] = REGION_ATOM

        self.cell_map = {}
        for t in range(len(tris)):
            if is_micro[t]:
                self.cell_map[tuple(self.micro_cell[t])] = t

        # faces with incident elements
        fmap = {}
        for t, tri in enumerate(tris):
            for k in range(3):
                a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
                fmap.setdefault((min(a, b), max(a, b)), []).append(t)
        self.face_map = fmap
        faces = sorted(fmap.keys())
        self.faces = np.array(faces, dtype=np.int64)
        fe = np.full((len(faces), 2), -1, dtype=np.int64)
        for i, f in enumerate(faces):
            el = fmap[f]
            if len(el) > 2:
                raise MeshError("non-manifold edge")
            fe[i, : len(el)] = el
        self.face_elems = fe

        self.clamped = np.zeros(nv, dtype=bool)
        self.clamped[list(self._clamped_set)] = True
        if self.pure_atomistic:
            # no FE layer to carry the boundary data: clamp a band of
            # lattice width r_cut so the homogeneous state stays critical
            self.clamped |= hd > self.R - INTERFACE_LAYERS + 1e-9
        if not np.any(self.clamped):
            raise MeshError("mesh has no clamped boundary")
        self.free = ~self.clamped & (self.vert_site != -2)

        # site sets of the coupled model
        hdist = lat.hexdists()
        if self.pure_atomistic:
            self.interface_sites = np.array([], dtype=np.int64)
            self.core_sites = np.nonzero(hdist <= self.R_a)[0]
        else:
            self.interface_sites = np.nonzero(
                (hdist > self.R_a - INTERFACE_LAYERS) & (hdist <= self.R_a)
            )[0]
            self.core_sites = np.nonzero(hdist <= self.R_a - INTERFACE_LAYERS)[0]
        self._locator = None

    # -- queries -----------------------------------------------------------

    @property
    def n_verts(self):
        return len(self.verts_lat)

    @property
    def n_elems(self):
        return len(self.tris)

    @property
    def n_free(self):
        return int(self.free.sum())

    def boundary_faces(self):
        return np.nonzero(self.face_elems[:, 1] < 0)[0]

    def face_lengths(self):
        d = self.verts_pos[self.faces[:, 0]] - self.verts_pos[self.faces[:, 1]]
        return np.linalg.norm(d, axis=1)

    def elem_min_hex(self):
        return self.vert_hex[self.tris].min(axis=1)

    def is_micro_elem(self):
        return self.micro_cell[:, 0] > -(2 ** 30)

    def elem_sizes(self):
        p = self.verts_pos
        t = self.tris
        e = np.stack([
            np.linalg.norm(p[t[:, 1]] - p[t[:, 0]], axis=1),
            np.linalg.norm(p[t[:, 2]] - p[t[:, 1]], axis=1),
            np.linalg.norm(p[t[:, 0]] - p[t[:, 2]], axis=1),
        ])
        return e.max(axis=0)

    # -- point location ----------------------------------------------------

    def _buckets(self):
        if self._locator is None:
            buckets = {}
            vl = self.verts_lat
            for t, tri in enumerate(self.tris):
                xs = vl[tri, 0]
                ys = vl[tri, 1]
                for cx in range(int(np.floor(xs.min())), int(np.ceil(xs.max()))):
                    for cy in range(int(np.floor(ys.min())), int(np.ceil(ys.max()))):
                        buckets.setdefault((cx, cy), []).append(t)
            for v in buckets.values():
                v.sort()
            self._locator = buckets
        return self._locator

    def locate(self, x, y, tol=1e-9):
        """Element containing lattice point (x, y), or -1 outside the domain."""
        buckets = self._buckets()
        cx, cy = int(np.floor(x)), int(np.floor(y))
        seen = []
        for dx in (0, -1, 1):
            for dy in (0, -1, 1):
                for t in buckets.get((cx + dx, cy + dy), ()):
                    if t in seen:
                        continue
                    seen.append(t)
                    l = geo.barycentric((x, y), self.verts_lat[self.tris[t]])
                    if min(l) >= -tol:
                        return t
        return -1

    def eval_p1(self, U, pts_lat):
        """Evaluate the nodal field U (nv, m) at lattice points (k, 2).

        Points outside the mesh evaluate to zero (clamped far field).
        """
        pts = np.asarray(pts_lat, dtype=float)
        out = np.zeros((len(pts),) + U.shape[1:])
        for i, (x, y) in enumerate(pts):
            t = self.locate(x, y)
            if t < 0:
                continue
            l = geo.barycentric((x, y), self.verts_lat[self.tris[t]])
            out[i] = l[0] * U[self.tris[t, 0]] + l[1] * U[self.tris[t, 1]] + l[2] * U[self.tris[t, 2]]
        return out

    def values_at_sites(self, U, site_ids):
        """Nodal-exact I_a evaluation of U at lattice sites (vertex fast path)."""
        out = np.zeros((len(site_ids), U.shape[1]))
        sv = self.site_vert[site_ids]
        res = sv >= 0
        out[res] = U[sv[res]]
        missing = np.nonzero(~res)[0]
        if len(missing):
            out[missing] = self.eval_p1(U, self.lattice.coords[np.asarray(site_ids)[missing]])
        return out

    # -- snapshot ----------------------------------------------------------

    def dump(self, fh):
        """Plain-text snapshot: vertex rows then element rows `v0 v1 v2 tag`."""
        fh.write(f"vertices {self.n_verts}\n")
        for i in range(self.n_verts):
            x, y = self.verts_pos[i]
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
        fh.write(f"elements {self.n_elems}\n")
        tags = {REGION_ATOM: "atomistic", REGION_INTERFACE: "interface", REGION_CONT: "continuum"}
        for t in range(self.n_elems):
            v = self.tris[t]
            fh.write(f"{v[0]} {v[1]} {v[2]} {tags[int(self.region[t])]}\n")


def build_ac_mesh(lattice, R_a, R, grading=0.5) -> AcMesh:
    return AcMesh(lattice, R_a, R, grading)


# -- newest-vertex bisection ------------------------------------------------


def _edge_key(mesh_pos, verts, a, b):
    d = mesh_pos[a] - mesh_pos[b]
    return (float(d @ d), min(a, b), max(a, b))


def bisect(mesh: AcMesh, marked) -> AcMesh:
    """Newest-vertex bisection of the marked continuum elements with closure.

    Returns a new conforming AcMesh; atomistic and interface elements are
    never split (attempting to mark one raises MeshError).
    """
    marked = sorted(int(t) for t in marked)
    for t in marked:
        if mesh.region[t] != REGION_CONT:
            raise MeshError(f"element {t} is not a continuum element")

    verts = [tuple(v) for v in mesh.verts_lat]
    vkey = {v: i for i, v in enumerate(verts)}
    clamped = set(np.nonzero(mesh.clamped)[0])
    tris = [tuple(t) for t in mesh.tris]
    micro = [tuple(c) if c[0] > -(2 ** 30) else None for c in mesh.micro_cell]
    region = list(mesh.region)
    alive = [True] * len(tris)
    pos = {i: tuple(p) for i, p in enumerate(mesh.verts_pos)}
    basis = mesh.lattice.basis

    edge2elems = {}
    for t, tri in enumerate(tris):
        for k in range(3):
            a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
            edge2elems.setdefault((min(a, b), max(a, b)), set()).add(t)

    def edge_len2(a, b):
        d = (pos[a][0] - pos[b][0], pos[a][1] - pos[b][1])
        return d[0] * d[0] + d[1] * d[1]

    # peak vertex (opposite the refinement edge); base choice: longest edge
    # under a global total order so closure chains terminate
    peak = [0] * len(tris)
    for t, tri in enumerate(tris):
        keys = []
        for k in range(3):
            a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
            keys.append((edge_len2(a, b), min(a, b), max(a, b), k))
        peak[t] = max(keys)[3]

    def add_vert(x, y, on_boundary):
        key = (x, y)
        i = vkey.get(key)
        if i is None:
            i = len(verts)
            verts.append(key)
            vkey[key] = i
            pos[i] = (basis[0, 0] * x + basis[0, 1] * y, basis[1, 0] * x + basis[1, 1] * y)
            if on_boundary:
                clamped.add(i)
        return i

    def spawn(c, a, b_, cell):
        t = len(tris)
        tris.append((c, a, b_))
        micro.append(cell)
        region.append(REGION_CONT)
        alive.append(True)
        peak.append(0)
        for k in range(3):
            x, y = tris[t][(k + 1) % 3], tris[t][(k + 2) % 3]
            edge2elems.setdefault((min(x, y), max(x, y)), set()).add(t)
        return t

    def kill(t):
        alive[t] = False
        for k in range(3):
            a, b = tris[t][(k + 1) % 3], tris[t][(k + 2) % 3]
            edge2elems[(min(a, b), max(a, b))].discard(t)

    def refinement_edge(t):
        k = peak[t]
        a, b = tris[t][(k + 1) % 3], tris[t][(k + 2) % 3]
        return (min(a, b), max(a, b))

    def split_pair(t, depth=0):
        if depth > 200:
            raise MeshError("bisection closure did not terminate")
        if not alive[t]:
            return
        e = refinement_edge(t)
        nb = next((o for o in edge2elems[e] if o != t and alive[o]), None)
        while nb is not None and refinement_edge(nb) != e:
            split_pair(nb, depth + 1)
            if not alive[t]:
                # t was consumed as somebody's pair partner inside the
                # recursion; its refinement edge is already split
                return
            nb = next((o for o in edge2elems[e] if o != t and alive[o]), None)
        a, b = e
        mx = (verts[a][0] + verts[b][0]) / 2.0
        my = (verts[a][1] + verts[b][1]) / 2.0
        boundary = len(edge2elems[e]) == 1 and a in clamped and b in clamped
        m = add_vert(mx, my, boundary)
        for el in (t, nb):
            if el is None or not alive[el]:
                continue
            k = peak[el]
            c = tris[el][k]
            va, vb = tris[el][(k + 1) % 3], tris[el][(k + 2) % 3]
            if region[el] != REGION_CONT:
                raise MeshError("closure attempted to bisect a protected element")
            kill(el)
            t1 = spawn(c, va, m, None)
            peak[t1] = 2
            t2 = spawn(c, m, vb, None)
            peak[t2] = 1

    for t in marked:
        if alive[t]:
            split_pair(t)

    out = AcMesh(mesh.lattice, mesh.R_a, mesh.R, mesh.grading, _build=False)
    keep = [t for t in range(len(tris)) if alive[t]]
    out._verts = verts
    out._vkey = vkey
    out._clamped_set = clamped
    out._raw_tris = [tris[t] for t in keep]
    out._raw_micro = [micro[t] for t in keep]
    out._finalize()
    return out


# -- effective volumes -------------------------------------------------------


@dataclass
class EffectiveVolumes:
    """omega_site: per-interface-site fraction |nu_ell| / det A (aligned with
    mesh.interface_sites); omega_elem: per-element continuum volume weight."""

    omega_site: np.ndarray
    omega_elem: np.ndarray

    def site_lookup(self, mesh):
        lut = {}
        for k, s in enumerate(mesh.interface_sites):
            lut[int(s)] = float(self.omega_site[k])
        return lut


def effective_volumes(mesh: AcMesh, variant="reflect") -> EffectiveVolumes:
    """Voronoi-based effective volumes.

    reflect: interface cells are vor(ell) clipped to the atomistic region
    H(R_a); continuum element weights are 0 inside H(R_a) and |T| outside.
    full: interface cells are whole Voronoi cells; the first collar ring of
    continuum micro elements loses |T|/3 per corner on ring R_a.
    """
    lat = mesh.lattice
    omega_site = np.ones(len(mesh.interface_sites))
    omega_elem = np.where(mesh.region == REGION_CONT, mesh.areas, 0.0)
    if variant == "reflect":
        hexpoly = geo.hexagon_lat(mesh.R_a)
        for k, s in enumerate(mesh.interface_sites):
            m, n = lat.coords[s]
            if hexdist(m, n) == mesh.R_a:
                cell = geo.voronoi_hexagon_lat(m, n)
                clipped = geo.clip_convex(cell, hexpoly)
                omega_site[k] = abs(geo.polygon_area(clipped)) if clipped else 0.0
    elif variant == "full":
        on_ring = np.isclose(mesh.vert_hex[mesh.tris], mesh.R_a).sum(axis=1)
        collar = (mesh.region == REGION_CONT) & mesh.is_micro_elem() & (on_ring > 0)
        omega_elem[collar] *= 1.0 - on_ring[collar] / 3.0
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return EffectiveVolumes(omega_site=omega_site, omega_elem=omega_elem)


# -- reference micro-triangulation -------------------------------------------


class MicroMesh:
    """Canonical micro-triangulation of H(radius) over the full lattice.

    Vertices are all lattice sites (vacancy coordinates included as geometric
    vertices) with hexdist <= radius; every element is a canonical cell.
    """

    def __init__(self, lattice: Lattice, radius):
        if radius > lattice.spec.radius:
            raise MeshError("micro radius exceeds lattice radius")
        self.lattice = lattice
        self.radius = int(radius)
        vac = set(lattice.defect_coords)
        coords = []
        self.vert_site = []
        self.site_vert = np.full(lattice.n_sites, -1, dtype=np.int64)
        vid = {}
        r = self.radius
        for m in range(-r, r + 1):
            for n in range(-r, r + 1):
                if hexdist(m, n) > r:
                    continue
                i = len(coords)
                coords.append((m, n))
                vid[(m, n)] = i
                s = lattice.index.get((m, n), -1)
                if s >= 0:
                    self.site_vert[s] = i
                    self.vert_site.append(s)
                else:
                    self.vert_site.append(-2 if (m, n) in vac else -1)
        self.verts_lat = np.array(coords, dtype=float)
        self.verts_pos = self.verts_lat @ lattice.basis.T
        self.vert_site = np.array(self.vert_site, dtype=np.int64)

        tris = []
        cells = []
        self.cell_index = {}
        for m in range(-r - 1, r + 1):
            for n in range(-r - 1, r + 1):
                for o in (0, 1):
                    corners = geo.micro_cell_corners(m, n, o)
                    if all(hexdist(*c) <= r for c in corners):
                        self.cell_index[(m, n, o)] = len(tris)
                        tris.append(tuple(vid[c] for c in corners))
                        cells.append((m, n, o))
        self.tris = np.array(tris, dtype=np.int64)
        self.cells = np.array(cells, dtype=np.int64)
        self.det_a = abs(np.linalg.det(lattice.basis))
        self.area = self.det_a / 2.0

    @property
    def n_verts(self):
        return len(self.verts_lat)

    @property
    def n_elems(self):
        return len(self.tris)

    def grads(self):
        p = self.verts_pos
        t = self.tris
        e1 = p[t[:, 1]] - p[t[:, 0]]
        e2 = p[t[:, 2]] - p[t[:, 0]]
        det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
        g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det
        g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det
        return np.stack([-g1 - g2, g1, g2], axis=1)

    def centroids_lat(self):
        return self.verts_lat[self.tris].mean(axis=1)
