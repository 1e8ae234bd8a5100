"""Hot numeric kernels: EAM site sums and force scatter over neighbor tables.

Two implementations are provided for every kernel: a numba ``@njit`` version
and a pure-numpy one.  The numpy path is selected by setting the environment
variable ``ACGRAC_PURE_NUMPY=1`` before import (useful on machines without a
working numba, and as a reference for the benchmark in ``benchmarks/``).

Conventions shared by all kernels:

* ``pos``      -- (nv, 2) float64 deformed positions of every node.
* ``center``   -- (ns,) int64 node index of each site whose energy is summed.
* ``partner``  -- (ns, nd) int64 node index of the stencil partner of each
  site in each lattice direction, or -1 where the direction is absent
  (vacancy or truncated range).
* EAM parameters appear as scalars ``(a, b, C, rho0)`` with
  ``phi(r) = exp(-2a(r-1)) - 2exp(-a(r-1))``, ``psi(r) = exp(-b r)`` and
  embedding ``F(t) = C[(t-rho0)^2 + (t-rho0)^4]``.
"""

from __future__ import annotations

import os

import numpy as np

PURE_NUMPY = os.environ.get("ACGRAC_PURE_NUMPY", "0") == "1"

if not PURE_NUMPY:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        PURE_NUMPY = True


def _phi(r, a):
    return np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0))


def _dphi(r, a):
    return -2.0 * a * np.exp(-2.0 * a * (r - 1.0)) + 2.0 * a * np.exp(-a * (r - 1.0))


def _psi(r, b):
    return np.exp(-b * r)


def _dpsi(r, b):
    return -b * np.exp(-b * r)


def _emb(t, C, rho0):
    d = t - rho0
    return C * (d * d + d * d * d * d)


def _demb(t, C, rho0):
    d = t - rho0
    return C * (2.0 * d + 4.0 * d * d * d)


def _site_energies_numpy(pos, center, partner, a, b, C, rho0):
    mask = partner >= 0
    safe = np.where(mask, partner, 0)
    g = pos[safe] - pos[center][:, None, :]
    r = np.sqrt(np.sum(g * g, axis=2))
    r = np.where(mask, r, 1.0)
    pair = np.where(mask, _phi(r, a), 0.0).sum(axis=1)
    dens = np.where(mask, _psi(r, b), 0.0).sum(axis=1)
    return pair + _emb(dens, C, rho0)


def _energy_grad_numpy(pos, center, partner, a, b, C, rho0, eref):
    nv = pos.shape[0]
    mask = partner >= 0
    safe = np.where(mask, partner, 0)
    g = pos[safe] - pos[center][:, None, :]
    r = np.sqrt(np.sum(g * g, axis=2))
    r = np.where(mask, r, 1.0)
    pair = np.where(mask, _phi(r, a), 0.0).sum(axis=1)
    dens = np.where(mask, _psi(r, b), 0.0).sum(axis=1)
    energy = float((pair + _emb(dens, C, rho0) - eref).sum())

    # bond coefficient: dV_site/d|g| for each stencil entry
    coef = _dphi(r, a) + _demb(dens, C, rho0)[:, None] * _dpsi(r, b)
    coef = np.where(mask, coef / r, 0.0)
    f = coef[:, :, None] * g  # dV/dg, shape (ns, nd, 2)

    grad = np.zeros((nv, 2))
    np.add.at(grad, partner[mask], f[mask])
    np.add.at(grad, center, -f.sum(axis=1))
    return energy, grad


def _hessian_apply_numpy(pos, w, center, partner, a, b, C, rho0):
    nv = pos.shape[0]
    mask = partner >= 0
    safe = np.where(mask, partner, 0)
    g = pos[safe] - pos[center][:, None, :]
    dwb = w[safe] - w[center][:, None, :]  # perturbation of each bond vector
    r = np.sqrt(np.sum(g * g, axis=2))
    r = np.where(mask, r, 1.0)
    gh = g / r[:, :, None]

    dens = np.where(mask, _psi(r, b), 0.0).sum(axis=1)
    d1 = t = dens - rho0
    Fp = C * (2.0 * d1 + 4.0 * d1 ** 3)
    Fpp = C * (2.0 + 12.0 * t * t)

    pr = np.where(mask, _dphi(r, a) + Fp[:, None] * _dpsi(r, b), 0.0)
    a2 = a * a
    ppr = 4.0 * a2 * np.exp(-2.0 * a * (r - 1.0)) - 2.0 * a2 * np.exp(-a * (r - 1.0))
    ppr = np.where(mask, ppr + Fp[:, None] * (b * b) * np.exp(-b * r), 0.0)
    psr = np.where(mask, _dpsi(r, b), 0.0)

    u = np.sum(gh * dwb, axis=2)  # radial component of perturbation
    s = np.sum(psr * u, axis=1)  # embedding cross term per site
    h = (
        ppr[:, :, None] * u[:, :, None] * gh
        + (pr / r)[:, :, None] * (np.where(mask[:, :, None], dwb, 0.0) - u[:, :, None] * gh)
        + (Fpp[:, None] * psr * s[:, None])[:, :, None] * gh
    )
    out = np.zeros((nv, 2))
    np.add.at(out, partner[mask], h[mask])
    np.add.at(out, center, -h.sum(axis=1))
    return out


if PURE_NUMPY:
    site_energies = _site_energies_numpy
    energy_grad = _energy_grad_numpy
    hessian_apply = _hessian_apply_numpy
else:

    @njit(cache=True)
    def site_energies(pos, center, partner, a, b, C, rho0):
        ns, nd = partner.shape
        out = np.empty(ns)
        for i in range(ns):
            c = center[i]
            pair = 0.0
            dens = 0.0
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                pair += np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0))
                dens += np.exp(-b * r)
            dt = dens - rho0
            out[i] = pair + C * (dt * dt + dt * dt * dt * dt)
        return out

    @njit(cache=True)
    def energy_grad(pos, center, partner, a, b, C, rho0, eref):
        ns, nd = partner.shape
        nv = pos.shape[0]
        grad = np.zeros((nv, 2))
        dens = np.empty(ns)
        energy = 0.0
        for i in range(ns):
            c = center[i]
            pair = 0.0
            dv = 0.0
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                pair += np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0))
                dv += np.exp(-b * r)
            dens[i] = dv
            dt = dv - rho0
            energy += pair + C * (dt * dt + dt * dt * dt * dt) - eref[i]
        for i in range(ns):
            c = center[i]
            dt = dens[i] - rho0
            Fp = C * (2.0 * dt + 4.0 * dt * dt * dt)
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                coef = (
                    -2.0 * a * np.exp(-2.0 * a * (r - 1.0))
                    + 2.0 * a * np.exp(-a * (r - 1.0))
                    - Fp * b * np.exp(-b * r)
                ) / r
                fx = coef * gx
                fy = coef * gy
                grad[p, 0] += fx
                grad[p, 1] += fy
                grad[c, 0] -= fx
                grad[c, 1] -= fy
        return energy, grad

    @njit(cache=True)
    def hessian_apply(pos, w, center, partner, a, b, C, rho0):
        ns, nd = partner.shape
        nv = pos.shape[0]
        out = np.zeros((nv, 2))
        for i in range(ns):
            c = center[i]
            dens = 0.0
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                dens += np.exp(-b * r)
            dt = dens - rho0
            Fp = C * (2.0 * dt + 4.0 * dt * dt * dt)
            Fpp = C * (2.0 + 12.0 * dt * dt)
            s = 0.0
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                ux = (w[p, 0] - w[c, 0])
                uy = (w[p, 1] - w[c, 1])
                u = (gx * ux + gy * uy) / r
                s += -b * np.exp(-b * r) * u
            for d in range(nd):
                p = partner[i, d]
                if p < 0:
                    continue
                gx = pos[p, 0] - pos[c, 0]
                gy = pos[p, 1] - pos[c, 1]
                r = np.sqrt(gx * gx + gy * gy)
                hx = gx / r
                hy = gy / r
                dwx = w[p, 0] - w[c, 0]
                dwy = w[p, 1] - w[c, 1]
                u = hx * dwx + hy * dwy
                pr = (
                    -2.0 * a * np.exp(-2.0 * a * (r - 1.0))
                    + 2.0 * a * np.exp(-a * (r - 1.0))
                    - Fp * b * np.exp(-b * r)
                )
                ppr = (
                    4.0 * a * a * np.exp(-2.0 * a * (r - 1.0))
                    - 2.0 * a * a * np.exp(-a * (r - 1.0))
                    + Fp * b * b * np.exp(-b * r)
                )
                psr = -b * np.exp(-b * r)
                rx = ppr * u * hx + pr / r * (dwx - u * hx) + Fpp * psr * s * hx
                ry = ppr * u * hy + pr / r * (dwy - u * hy) + Fpp * psr * s * hy
                out[p, 0] += rx
                out[p, 1] += ry
                out[c, 0] -= rx
                out[c, 1] -= ry
        return out
