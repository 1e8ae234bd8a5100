"""Planar geometry helpers: convex clipping, areas, lattice-path walking.

Lattice coordinates of all mesh vertices are dyadic rationals, which float64
represents exactly at the scales used here, so midpoint arithmetic and
point-in-hexagon tests below are exact.  Segment/element intersections used
for bond weights run in ``fractions.Fraction`` on integer endpoints so the
resulting weights sum to one exactly.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def polygon_area(poly):
    """Signed shoelace area of a vertex sequence (n, 2)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clip of polygon `subject` by convex `clipper`.

    Both are vertex sequences; `clipper` must be counterclockwise.  Returns
    the clipped vertex list (possibly empty).
    """
    out = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clipper]
    n = len(clip)
    for k in range(n):
        if not out:
            return []
        cp1 = clip[k]
        cp2 = clip[(k + 1) % n]
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= -1e-14

        def intersect(s, e):
            dcx, dcy = cp1[0] - cp2[0], cp1[1] - cp2[1]
            dpx, dpy = s[0] - e[0], s[1] - e[1]
            n1 = cp1[0] * cp2[1] - cp1[1] * cp2[0]
            n2 = s[0] * e[1] - s[1] * e[0]
            den = dcx * dpy - dcy * dpx
            return ((n1 * dpx - n2 * dcx) / den, (n1 * dpy - n2 * dcy) / den)

        nxt = []
        s = out[-1]
        for e in out:
            if inside(e):
                if not inside(s):
                    nxt.append(intersect(s, e))
                nxt.append(e)
            elif inside(s):
                nxt.append(intersect(s, e))
            s = e
        out = nxt
    return out


def overlap_area(tri_a, tri_b):
    """Exact-to-roundoff area of the intersection of two triangles."""
    a = np.asarray(tri_a, dtype=float)
    b = np.asarray(tri_b, dtype=float)
    if polygon_area(a) < 0:
        a = a[::-1]
    if polygon_area(b) < 0:
        b = b[::-1]
    poly = clip_convex(a, b)
    return abs(polygon_area(poly)) if poly else 0.0


def hexnorm(x, y):
    """Hexagonal norm whose unit ball is the lattice hexagon H(1)."""
    return (abs(x) + abs(y) + abs(x + y)) / 2.0


def hexagon_lat(r):
    """CCW lattice-coordinate corners of the hexagon H(r)."""
    return [(r, 0), (0, r), (-r, r), (-r, 0), (0, -r), (r, -r)]


def voronoi_hexagon_lat(m, n):
    """Lattice-coordinate corners of the Voronoi cell of site (m, n)."""
    corners = []
    dirs = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)]
    for k in range(6):
        d1 = dirs[k]
        d2 = dirs[(k + 1) % 6]
        corners.append((m + (d1[0] + d2[0]) / 3.0, n + (d1[1] + d2[1]) / 3.0))
    return corners


def barycentric(p, tri):
    """Barycentric coordinates of point p w.r.t. triangle vertices (3, 2)."""
    (x0, y0), (x1, y1), (x2, y2) = tri
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    l1 = ((p[0] - x0) * (y2 - y0) - (p[1] - y0) * (x2 - x0)) / det
    l2 = ((x1 - x0) * (p[1] - y0) - (y1 - y0) * (p[0] - x0)) / det
    return (1.0 - l1 - l2, l1, l2)


def cell_of_point(x, y):
    """Canonical micro cell (m, n, orient) containing lattice point (x, y).

    orient 0 is the 'up' triangle conv{(m,n),(m+1,n),(m,n+1)}, orient 1 the
    'down' triangle conv{(m+1,n),(m+1,n+1),(m,n+1)}.  Points on cell
    boundaries resolve deterministically (toward lower cells).
    """
    m = int(np.floor(x))
    n = int(np.floor(y))
    fx = x - m
    fy = y - n
    return (m, n, 0 if fx + fy <= 1.0 else 1)


def micro_cell_corners(m, n, o):
    if o == 0:
        return ((m, n), (m + 1, n), (m, n + 1))
    return ((m + 1, n), (m + 1, n + 1), (m, n + 1))


def walk_segment_cells(p, q):
    """Micro cells crossed by the open segment p -> q with exact fractions.

    p, q are integer lattice coordinates.  Returns a list of
    ((m, n, orient), Fraction weight) with weights the parameter-length of
    the intersection; zero-length touches (vertex passes) are dropped, so
    the weights sum to exactly 1.
    """
    p = (int(p[0]), int(p[1]))
    q = (int(q[0]), int(q[1]))
    dx = q[0] - p[0]
    dy = q[1] - p[1]
    ts = {Fraction(0), Fraction(1)}
    # crossing parameters with the three line families m=c, n=c, m+n=c
    for d, off in ((dx, p[0]), (dy, p[1]), (dx + dy, p[0] + p[1])):
        if d == 0:
            continue
        lo, hi = sorted((off, off + d))
        for c in range(lo, hi + 1):
            t = Fraction(c - off, d)
            if 0 < t < 1:
                ts.add(t)
    ts = sorted(ts)
    out = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        w = t1 - t0
        if w == 0:
            continue
        tm = (t0 + t1) / 2
        x = p[0] + tm * dx
        y = p[1] + tm * dy
        m = x.numerator // x.denominator
        n = y.numerator // y.denominator
        fx = x - m
        fy = y - n
        o = 0 if fx + fy < 1 else 1
        if fx + fy == 1:
            # midpoint on a diagonal means the sub-segment runs along it;
            # both incident cells are valid supports, pick the up cell
            o = 0
        out.append(((m, n, o), w))
    return out


def zip_rings(inner, inner_params, outer, outer_params):
    """Triangulate the annulus between two concentric hexagon rings.

    inner and outer are CCW vertex-id lists; the params give each vertex's
    hexagon-perimeter parameter in [0, 6) (side index plus fraction along
    the side), which aligns corners of the two rings exactly.  The merge by
    parameter produces a ruled, overlap-free triangulation with
    len(inner) + len(outer) CCW triangles.
    """
    thi = list(inner_params)
    tho = list(outer_params)
    ni, no = len(inner), len(outer)
    tris = []
    i = j = 0
    while i < ni or j < no:
        next_i = thi[i + 1] if i + 1 < ni else 6.0
        next_j = tho[j + 1] if j + 1 < no else 6.0
        vi = inner[i % ni]
        vo = outer[j % no]
        if i < ni and (j >= no or next_i <= next_j + 1e-12):
            tris.append((vi, inner[(i + 1) % ni], vo))
            i += 1
        else:
            tris.append((vi, vo, outer[(j + 1) % no]))
            j += 1
    return tris
