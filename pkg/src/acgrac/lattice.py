"""Triangular reference lattice, vacancy defects and bond classification.

Sites are indexed by integer lattice coordinates ``(m, n)`` with cartesian
position ``basis @ (m, n)``.  The canonical basis is

    A = [[1, cos(pi/3)],
         [0, sin(pi/3)]]

whose nearest-neighbour directions ``a_1..a_6`` are obtained from
``a_1 = (1, 0)`` by repeated clockwise rotation through pi/3.  In lattice
coordinates these are ``(1,0), (1,-1), (0,-1), (-1,0), (-1,1), (0,1)``.

The computational domain is the hexagonal ball of a given graph radius
around the origin; ``hexdist`` below is the corresponding graph metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SQRT3 = math.sqrt(3.0)

#: canonical triangular-lattice basis (lattice units)
TRI_BASIS = np.array([[1.0, 0.5], [0.0, SQRT3 / 2.0]])

#: nearest-neighbour directions a_1..a_6 in lattice coordinates
NN_DIRS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


class BondKind(Enum):
    TYPE_I = 1
    TYPE_II = 2


class ConfigurationError(ValueError):
    """Raised for rejected lattice configurations (degenerate basis etc.)."""


def hexdist(m, n):
    """Graph distance of lattice coordinate (m, n) from the origin."""
    return (abs(m) + abs(n) + abs(m + n)) // 2


def hexdist_arr(coords):
    m = coords[..., 0]
    n = coords[..., 1]
    return (np.abs(m) + np.abs(n) + np.abs(m + n)) // 2


def range_directions(r_cut):
    """All lattice directions with cartesian length <= r_cut, 0 excluded.

    Ordered deterministically (by length, then angle).  For r_cut = 2 this
    yields the 18 directions of the next-nearest-neighbour range.
    """
    rmax = int(math.ceil(r_cut))
    dirs = []
    for m in range(-2 * rmax, 2 * rmax + 1):
        for n in range(-2 * rmax, 2 * rmax + 1):
            if m == 0 and n == 0:
                continue
            x = TRI_BASIS @ (m, n)
            d = math.hypot(x[0], x[1])
            if d <= r_cut + 1e-12:
                dirs.append((d, math.atan2(x[1], x[0]), (m, n)))
    dirs.sort()
    return [d[2] for d in dirs]


@dataclass(frozen=True)
class BondVector:
    """Interaction direction rho = alpha * a_i + beta * a_{i+1}.

    ``i`` is 1-based like the paper's nearest-neighbour numbering, with
    alpha >= 1, beta >= 0 making the representation unique.
    """

    i: int
    alpha: int
    beta: int

    @property
    def kind(self):
        return BondKind.TYPE_I if self.beta == 0 else BondKind.TYPE_II

    def offset(self):
        """Lattice-coordinate offset of the bond."""
        di = NN_DIRS[self.i - 1]
        dj = NN_DIRS[self.i % 6]
        return (self.alpha * di[0] + self.beta * dj[0],
                self.alpha * di[1] + self.beta * dj[1])

    def cartesian(self, basis=TRI_BASIS):
        return basis @ np.array(self.offset(), dtype=float)


def classify_bond(offset):
    """Canonical (i, alpha, beta) sector representation of a lattice offset.

    Raises ConfigurationError for the zero vector.  Type I bonds are the
    integer multiples of a nearest-neighbour direction (beta = 0).
    """
    m, n = int(offset[0]), int(offset[1])
    if m == 0 and n == 0:
        raise ConfigurationError("zero bond vector cannot be classified")
    for i in range(6):
        di = NN_DIRS[i]
        dj = NN_DIRS[(i + 1) % 6]
        det = di[0] * dj[1] - di[1] * dj[0]
        alpha = (m * dj[1] - n * dj[0]) / det
        beta = (n * di[0] - m * di[1]) / det
        if alpha >= 1 and beta >= 0 and alpha == int(alpha) and beta == int(beta):
            return BondVector(i + 1, int(alpha), int(beta))
    raise ConfigurationError(f"offset {offset} is not a lattice direction")


@dataclass(frozen=True)
class LatticeSpec:
    """Input for lattice construction.

    radius is the hexagonal graph radius of the site set; defect_count k
    removes the vacancy segment {-(k/2)e1 .. (k/2-1)e1} (even k) or
    {-(k-1)/2 e1 .. (k-1)/2 e1} (odd k).
    """

    basis: np.ndarray = field(default_factory=lambda: TRI_BASIS.copy())
    cutoff: float = 2.0
    defect_count: int = 0
    radius: int = 16

    def validate(self):
        b = np.asarray(self.basis, dtype=float)
        if b.shape != (2, 2) or abs(np.linalg.det(b)) <= 1e-12:
            raise ConfigurationError("degenerate lattice basis")
        if self.cutoff < 1:
            raise ConfigurationError("cutoff must be >= 1")
        if self.defect_count < 0:
            raise ConfigurationError("defect_count must be >= 0")
        if self.radius <= 0:
            raise ConfigurationError("radius must be positive")


def defect_segment(k):
    """Lattice coordinates of the removed vacancy segment for k atoms."""
    if k == 0:
        return []
    if k % 2 == 0:
        return [(m, 0) for m in range(-k // 2, k // 2)]
    return [(m, 0) for m in range(-(k - 1) // 2, (k - 1) // 2 + 1)]


class Lattice:
    """Defected triangular lattice with per-site interaction neighborhoods.

    Attributes
    ----------
    coords : (ns, 2) int array of lattice coordinates per site id
    positions : (ns, 2) float cartesian positions
    index : dict (m, n) -> site id
    dirs : list of interaction-range offsets (length 18 for r_cut = 2)
    nbr : (ns, nd) int array, partner site id per direction or -1
    defect_coords : list of removed coordinates
    """

    def __init__(self, spec: LatticeSpec):
        spec.validate()
        self.spec = spec
        self.basis = np.asarray(spec.basis, dtype=float)
        self.dirs = range_directions(spec.cutoff)
        self.dir_index = {d: k for k, d in enumerate(self.dirs)}
        self.defect_coords = defect_segment(spec.defect_count)
        removed = set(self.defect_coords)
        for c in removed:
            if hexdist(*c) > spec.radius:
                raise ConfigurationError("defect segment exceeds lattice radius")

        coords = []
        R = spec.radius
        for m in range(-R, R + 1):
            for n in range(-R, R + 1):
                if hexdist(m, n) <= R and (m, n) not in removed:
                    coords.append((m, n))
        self.coords = np.array(coords, dtype=np.int64)
        self.index = {tuple(c): i for i, c in enumerate(coords)}
        self.positions = self.coords @ self.basis.T

        nd = len(self.dirs)
        ns = len(coords)
        self.nbr = np.full((ns, nd), -1, dtype=np.int64)
        for i, (m, n) in enumerate(coords):
            for k, (dm, dn) in enumerate(self.dirs):
                j = self.index.get((m + dm, n + dn))
                if j is not None:
                    self.nbr[i, k] = j

    @property
    def n_sites(self):
        return len(self.coords)

    @property
    def nn_dirs_cartesian(self):
        return np.array([self.basis @ d for d in NN_DIRS])

    def site_id(self, coord):
        i = self.index.get((int(coord[0]), int(coord[1])))
        if i is None:
            raise KeyError(f"unknown lattice site {coord}")
        return i

    def interaction_range(self, site):
        """R_ell as BondVectors, vacancy- and boundary-aware."""
        if site < 0 or site >= self.n_sites:
            raise KeyError(f"unknown site id {site}")
        out = []
        for k, d in enumerate(self.dirs):
            if self.nbr[site, k] >= 0:
                out.append(classify_bond(d))
        return out

    def range_mask(self, site):
        return self.nbr[site] >= 0

    def hexdists(self):
        return hexdist_arr(self.coords)

    def defect_core_ids(self, dist=2.0):
        """Sites within Euclidean distance `dist` of a removed atom."""
        if not self.defect_coords:
            return np.array([], dtype=np.int64)
        dp = np.array(self.defect_coords) @ self.basis.T
        d = np.linalg.norm(self.positions[:, None, :] - dp[None, :, :], axis=2)
        return np.nonzero(d.min(axis=1) <= dist + 1e-12)[0]


def build_lattice(spec: LatticeSpec) -> Lattice:
    """Construct the (possibly defected) lattice for a validated spec."""
    return Lattice(spec)


def dump_lattice(lattice, fh, interface_ids=(), core_ids=()):
    """Plain-text site dump: `id m n x y is_interface is_core` per row."""
    iset = set(int(i) for i in interface_ids)
    cset = set(int(i) for i in core_ids)
    for i in range(lattice.n_sites):
        m, n = lattice.coords[i]
        x, y = lattice.positions[i]
        fh.write(f"{i} {m} {n} {x:.17g} {y:.17g} {int(i in iset)} {int(i in cset)}\n")
