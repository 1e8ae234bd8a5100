"""EAM site potential, derivatives and the Cauchy-Born energy density.

The site energy of a stencil of displaced bond vectors {g_rho} is

    V(g) = sum_rho phi(|g_rho|) + F( sum_rho psi(|g_rho|) )

with the Morse-type pair term phi(r) = exp(-2a(r-1)) - 2exp(-a(r-1)),
electron density psi(r) = exp(-b r) and embedding
F(t) = C[(t - rho0)^2 + (t - rho0)^4].  Default parameters a = 4.4, b = 3,
C = 5 and rho0 = 6 exp(-b).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .lattice import TRI_BASIS, range_directions


class DegenerateStencilError(ValueError):
    """A stencil entry has zero length (coincident atoms)."""


@dataclass(frozen=True)
class EamParams:
    a: float = 4.4
    b: float = 3.0
    C: float = 5.0
    rho0: float = field(default=6.0 * math.exp(-3.0))

    @staticmethod
    def with_defaults(a=4.4, b=3.0, C=5.0):
        return EamParams(a=a, b=b, C=C, rho0=6.0 * math.exp(-b))


def pair_phi(params, r):
    r = np.asarray(r, dtype=float)
    return np.exp(-2 * params.a * (r - 1)) - 2 * np.exp(-params.a * (r - 1))


def density_psi(params, r):
    return np.exp(-params.b * np.asarray(r, dtype=float))


def embed_F(params, t):
    d = np.asarray(t, dtype=float) - params.rho0
    return params.C * (d ** 2 + d ** 4)


def _lengths(stencil):
    g = np.asarray(stencil, dtype=float)
    r = np.linalg.norm(g, axis=-1)
    if np.any(r <= 1e-14):
        raise DegenerateStencilError("stencil contains a zero-length bond")
    return g, r


def site_energy(params, stencil):
    """V(g) for a (k, 2) array of displaced bond vectors."""
    _, r = _lengths(stencil)
    return float(pair_phi(params, r).sum() + embed_F(params, density_psi(params, r).sum()))


def site_gradient(params, stencil):
    """dV/dg_rho for every stencil entry, shape (k, 2)."""
    g, r = _lengths(stencil)
    a, b, C, rho0 = params.a, params.b, params.C, params.rho0
    dphi = -2 * a * np.exp(-2 * a * (r - 1)) + 2 * a * np.exp(-a * (r - 1))
    t = np.exp(-b * r).sum()
    dF = C * (2 * (t - rho0) + 4 * (t - rho0) ** 3)
    coef = (dphi + dF * (-b * np.exp(-b * r))) / r
    return coef[:, None] * g


def site_energy_gradient(params, stencil):
    g, r = _lengths(stencil)
    a, b, C, rho0 = params.a, params.b, params.C, params.rho0
    t = np.exp(-b * r).sum()
    e = float(pair_phi(params, r).sum() + embed_F(params, t))
    dphi = -2 * a * np.exp(-2 * a * (r - 1)) + 2 * a * np.exp(-a * (r - 1))
    dF = C * (2 * (t - rho0) + 4 * (t - rho0) ** 3)
    coef = (dphi + dF * (-b * np.exp(-b * r))) / r
    return e, coef[:, None] * g


def site_hessian_apply(params, stencil, w):
    """Exact Hessian-vector product of site_energy at the stencil.

    w is a stencil-shaped perturbation of the bond vectors.
    """
    g, r = _lengths(stencil)
    w = np.asarray(w, dtype=float)
    a, b, C, rho0 = params.a, params.b, params.C, params.rho0
    gh = g / r[:, None]
    t = np.exp(-b * r).sum()
    dF = C * (2 * (t - rho0) + 4 * (t - rho0) ** 3)
    ddF = C * (2 + 12 * (t - rho0) ** 2)
    dphi = -2 * a * np.exp(-2 * a * (r - 1)) + 2 * a * np.exp(-a * (r - 1))
    ddphi = 4 * a * a * np.exp(-2 * a * (r - 1)) - 2 * a * a * np.exp(-a * (r - 1))
    dpsi = -b * np.exp(-b * r)
    ddpsi = b * b * np.exp(-b * r)

    pr = dphi + dF * dpsi           # radial first derivative per bond
    ppr = ddphi + dF * ddpsi        # radial second derivative per bond
    u = np.sum(gh * w, axis=1)      # radial perturbation components
    s = np.sum(dpsi * u)            # embedding cross coupling
    return (
        (ppr * u)[:, None] * gh
        + (pr / r)[:, None] * (w - u[:, None] * gh)
        + (ddF * dpsi * s)[:, None] * gh
    )


def cauchy_born(params, F, range_offsets=None, basis=TRI_BASIS):
    """Cauchy-Born density W(F) = det(A)^-1 V(F . R) and its derivative dW.

    range_offsets are lattice-coordinate direction offsets; the default is
    the full r_cut = 2 range of the canonical triangular lattice.
    """
    F = np.asarray(F, dtype=float)
    if abs(np.linalg.det(F)) <= 1e-12:
        raise DegenerateStencilError("singular deformation gradient")
    if range_offsets is None:
        range_offsets = range_directions(2.0)
    R = np.array(range_offsets, dtype=float) @ basis.T
    det_a = abs(np.linalg.det(basis))
    stencil = R @ F.T
    e, dv = site_energy_gradient(params, stencil)
    W = e / det_a
    dW = dv.T @ R / det_a
    return W, dW


def minimize_cauchy_born_dilation(params, range_offsets=None, basis=TRI_BASIS,
                                  bracket=(0.7, 1.3)):
    """The dilation factor t* with F0 = t* I minimizing W, and F0 itself."""
    def w_of(t):
        return cauchy_born(params, t * np.eye(2), range_offsets, basis)[0]

    res = minimize_scalar(w_of, bounds=bracket, method="bounded",
                          options={"xatol": 1e-13})
    if not res.success:
        raise RuntimeError(f"Cauchy-Born dilation search failed: {res.message}")
    t = float(res.x)
    return t, t * np.eye(2)
