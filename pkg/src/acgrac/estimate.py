"""Residual-based a posteriori estimators and their element localization.

The global estimator splits into a truncation part (far-field deviation of
the atomistic stress from the homogeneous stress), a modelling part (misfit
between atomistic and coupled stress, overlap-weighted across the two
triangulations) and a coarsening part (scaled inter-element jumps of the
coupled stress).  The empirical constants multiplying each part are 1 by
default; only their ratios influence marking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import hexnorm, overlap_area
from .mesh import REGION_CONT, AcMesh, MeshError, MicroMesh
from .stress import StressField, cr_correct, sigma_a, sigma_cb, sigma_h


class EstimateError(RuntimeError):
    pass


@dataclass
class EstimatorReport:
    eta_T: float
    eta_M: float
    eta_C: float
    rho_T: np.ndarray
    constants: tuple = (1.0, 1.0, 1.0)
    eta_M_micro: np.ndarray = field(default=None, repr=False)
    eta_C_faces: np.ndarray = field(default=None, repr=False)

    @property
    def rho(self):
        """Stopping value: truncation part plus the localized indicators.

        Indicators are zeroed on atomistic/interface elements, so the fixed
        jump floor of the defect core does not enter the stopping test.
        """
        return self.eta_T + float(self.rho_T.sum())

    @property
    def eta_total(self):
        return self.eta_T + self.eta_M + self.eta_C


class OverlapTable:
    """Per micro element: the coupled elements it meets and |T' cap Ta|/|Ta|.

    Micro elements resident in the coupled mesh map to a single element of
    weight one; the rest are clipped against bucket candidates.
    """

    def __init__(self, mesh: AcMesh, micro: MicroMesh, inside_mask):
        self.elems = []
        self.weights = []
        buckets = mesh._buckets()
        # clip in lattice coordinates: every vertex is a dyadic rational
        # there, so collinear configurations test as exactly degenerate and
        # Sutherland-Hodgman produces no spurious slivers
        lat_area = 0.5
        for t in range(micro.n_elems):
            if not inside_mask[t]:
                self.elems.append(np.empty(0, dtype=np.int64))
                self.weights.append(np.empty(0))
                continue
            cell = tuple(micro.cells[t])
            hit = mesh.cell_map.get(cell)
            if hit is not None:
                self.elems.append(np.array([hit], dtype=np.int64))
                self.weights.append(np.array([1.0]))
                continue
            vl = micro.verts_lat[micro.tris[t]]
            cand = set()
            for cx in range(int(np.floor(vl[:, 0].min())), int(np.ceil(vl[:, 0].max()))):
                for cy in range(int(np.floor(vl[:, 1].min())), int(np.ceil(vl[:, 1].max()))):
                    cand.update(buckets.get((cx, cy), ()))
            es, ws = [], []
            for tc in sorted(cand):
                a = overlap_area(vl, mesh.verts_lat[mesh.tris[tc]])
                if a > 1e-13:
                    es.append(tc)
                    ws.append(a / lat_area)
            w = np.array(ws)
            if abs(w.sum() - 1.0) > 1e-8:
                raise MeshError(
                    f"overlap bookkeeping misses micro element {t}: sum {w.sum():.6f}"
                )
            self.elems.append(np.array(es, dtype=np.int64))
            self.weights.append(w / w.sum())


def trusted_zone(micro: MicroMesh, R, rim=3):
    """Micro elements whose bond sums are complete: all corners inside
    H(R - rim), clear of the clamped-boundary truncation rim."""
    corners = micro.verts_lat[micro.tris]
    hx = np.array([[hexnorm(x, y) for x, y in tri] for tri in corners])
    return hx.max(axis=1) <= R - rim + 1e-9


def truncation_estimator(sig_a: StressField, sigma_far, micro: MicroMesh,
                         R, center_cart, C1=1.0, zone=None):
    """C1 * L2 norm of sigma_a - sigma_far over the annulus outside B_{R/2}."""
    cen = micro.verts_pos[micro.tris].mean(axis=1)
    if zone is None:
        zone = trusted_zone(micro, R)
    annulus = zone & (np.linalg.norm(cen - center_cart, axis=1) > R / 2.0)
    if not np.any(annulus):
        raise EstimateError("truncation annulus is empty; domain too small")
    d = sig_a.sig[annulus] - sigma_far[None, :, :]
    return C1 * float(np.sqrt(np.sum(micro.area * np.sum(d * d, axis=(1, 2)))))


def modelling_estimator(sig_a: StressField, sig_h: StressField,
                        overlaps: OverlapTable, micro: MicroMesh, inside_mask,
                        C2=1.0):
    """C2 * sqrt(sum |Ta| [sigma_a(Ta) - overlap-avg sigma_h]^2) and the
    per-micro-element squared terms for localization."""
    terms = np.zeros(micro.n_elems)
    for t in range(micro.n_elems):
        if not inside_mask[t]:
            continue
        es = overlaps.elems[t]
        if not len(es):
            continue
        avg = np.einsum("e,ekl->kl", overlaps.weights[t], sig_h.sig[es])
        d = sig_a.sig[t] - avg
        terms[t] = micro.area * float(np.sum(d * d))
    return C2 * float(np.sqrt(terms.sum())), terms


def coarsening_estimator(sig_h: StressField, mesh: AcMesh, C3=1.0):
    """C3 * sqrt(sum_f (h_f |[sigma_h]|_F)^2) over interior faces, with the
    per-face squared terms."""
    fe = mesh.face_elems
    interior = fe[:, 1] >= 0
    jump = sig_h.sig[fe[:, 0]] - sig_h.sig[np.clip(fe[:, 1], 0, None)]
    jn = np.sqrt(np.sum(jump * jump, axis=(1, 2)))
    terms = np.where(interior, (mesh.face_lengths() * jn) ** 2, 0.0)
    return C3 * float(np.sqrt(terms.sum())), terms


def localize(mesh: AcMesh, overlaps: OverlapTable, eta_M_terms, eta_C_terms,
             eta_M, eta_C, constants=(1.0, 1.0, 1.0), zero_ai=True):
    """Element indicators rho_T; zero on atomistic and interface elements
    unless zero_ai is disabled (used by the sum-consistency checks)."""
    etaM_T = np.zeros(mesh.n_elems)
    for t in range(len(eta_M_terms)):
        if eta_M_terms[t] == 0.0:
            continue
        for e, w in zip(overlaps.elems[t], overlaps.weights[t]):
            etaM_T[e] += w * eta_M_terms[t]
    etaC_T = np.zeros(mesh.n_elems)
    fe = mesh.face_elems
    interior = fe[:, 1] >= 0
    np.add.at(etaC_T, fe[interior, 0], 0.5 * eta_C_terms[interior])
    np.add.at(etaC_T, fe[interior, 1], 0.5 * eta_C_terms[interior])

    # scaling chosen so sum_T rho_T = eta_M + eta_C for any constants
    C1, C2, C3 = constants
    rho = np.zeros(mesh.n_elems)
    if eta_M > 0:
        rho += C2 ** 2 * etaM_T / eta_M
    if eta_C > 0:
        rho += C3 ** 2 * etaC_T / eta_C
    if zero_ai:
        rho[mesh.region != REGION_CONT] = 0.0
    return rho


def run_estimate(cm, U, micro: MicroMesh, constants=(1.0, 1.0, 1.0)):
    """Stress correction + full estimator evaluation for one coupled state.

    Returns (report, corrected coupled stress, atomistic stress of the
    interpolated state).
    """
    mesh = cm.mesh
    lat = mesh.lattice
    u_sites = mesh.values_at_sites(U, np.arange(lat.n_sites))
    y_sites = lat.positions @ cm.B.T + u_sites
    # the computable functional sums site energies over the domain hexagon;
    # estimator integrals stay clear of the clamped rim where bond sums are
    # boundary-truncated (y = y_B there by the far-field condition anyway)
    centers = np.nonzero(lat.hexdists() <= mesh.R)[0]
    sig_a = sigma_a(cm.eam, lat, micro, y_sites, centers=centers)
    sig_h = sigma_h(cm, U)
    corrected, before, after = cr_correct(sig_a, sig_h, mesh, micro)

    zone = trusted_zone(micro, mesh.R)
    overlaps = OverlapTable(mesh, micro, zone)

    if lat.defect_coords:
        center_cart = (np.array(lat.defect_coords, dtype=float) @ lat.basis.T).mean(axis=0)
    else:
        center_cart = np.zeros(2)
    sigma_far = sigma_cb(cm.eam, lat, cm.B)
    C1, C2, C3 = constants
    eta_T = truncation_estimator(sig_a, sigma_far, micro, mesh.R, center_cart, C1,
                                 zone=zone)
    eta_M, m_terms = modelling_estimator(sig_a, corrected, overlaps, micro, zone, C2)
    eta_C, c_terms = coarsening_estimator(corrected, mesh, C3)
    rho_T = localize(mesh, overlaps, m_terms, c_terms, eta_M, eta_C, constants)
    report = EstimatorReport(eta_T=eta_T, eta_M=eta_M, eta_C=eta_C, rho_T=rho_T,
                             constants=constants, eta_M_micro=m_terms,
                             eta_C_faces=c_terms)
    return report, corrected, sig_a
