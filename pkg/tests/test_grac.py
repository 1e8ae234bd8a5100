import numpy as np
import pytest
from scipy.optimize import linprog

from acgrac import simplex
from acgrac.grac import (
    assemble_constraints,
    half_range,
    interface_energy,
    solve_l1,
    solve_lsq,
    stabilization_site,
)
from acgrac.lattice import LatticeSpec, build_lattice
from acgrac.mesh import build_ac_mesh, effective_volumes
from acgrac.model import CoupledModel
from acgrac.potential import (
    EamParams,
    minimize_cauchy_born_dilation,
    site_energy,
    site_energy_gradient,
)

EAM = EamParams()


@pytest.fixture(scope="module")
def setup():
    lat = build_lattice(LatticeSpec(radius=16))
    mesh = build_ac_mesh(lat, R_a=5, R=12)
    vols = effective_volumes(mesh)
    sys_ = assemble_constraints(lat, mesh, vols)
    return lat, mesh, vols, sys_


@pytest.fixture(scope="module")
def params(setup):
    return solve_l1(setup[3])


@pytest.fixture(scope="module")
def params_lsq(setup):
    return solve_lsq(setup[3])


@pytest.fixture(scope="module")
def f0():
    return minimize_cauchy_born_dilation(EAM)[1]


def test_energy_row_count_audit(setup):
    lat, mesh, vols, sys_ = setup
    # independent enumeration: two scalar rows per (site, direction)
    expected = sum(2 * len(lat.interaction_range(int(s))) for s in mesh.interface_sites)
    assert sys_.n_energy_rows == expected


def test_system_is_feasible_underdetermined(setup, params):
    _, _, _, sys_ = setup
    assert sys_.n_rows < sys_.n_vars
    assert params.max_residual <= 1e-9


def test_energy_patch_rows_hold(setup, params):
    lat, mesh, _, _ = setup
    for s in mesh.interface_sites[:8]:
        s = int(s)
        C = params.C[s]
        srcs = np.array(lat.dirs)[params.allowed[s]]
        for r, d in enumerate(lat.dirs):
            rec = C[r] @ srcs
            assert np.allclose(rec, d, atol=1e-10)


def test_pure_atomistic_mesh_has_empty_system():
    lat = build_lattice(LatticeSpec(radius=10))
    mesh = build_ac_mesh(lat, R_a=8, R=8)
    sys_ = assemble_constraints(lat, mesh, effective_volumes(mesh))
    assert sys_.n_rows == 0 and sys_.n_vars == 0


def test_l1_objective_not_worse_than_lsq(params, params_lsq):
    l1_of_lsq = sum(np.abs(C).sum() for C in params_lsq.C.values())
    assert params.objective_value <= l1_of_lsq + 1e-8


def test_lsq_norm_not_worse_than_l1(params, params_lsq):
    n2_l1 = sum((C ** 2).sum() for C in params.C.values())
    n2_lsq = sum((C ** 2).sum() for C in params_lsq.C.values())
    assert n2_lsq <= n2_l1 + 1e-10


def test_l1_solution_sparser_than_lsq(params, params_lsq):
    def frac_zero(p):
        tot = 0
        zer = 0
        for C in p.C.values():
            tot += C.size
            zer += int((np.abs(C) < 1e-10).sum())
        return zer / tot

    assert frac_zero(params) > frac_zero(params_lsq)


def test_duality_gap_small(params):
    assert params.duality_gap <= 1e-8


def test_ghost_forces_vanish_for_both_methods(setup, params, params_lsq, f0):
    lat, mesh, vols, _ = setup
    rng = np.random.default_rng(7)
    for par in (params, params_lsq):
        cm = CoupledModel(mesh, vols, par, EAM, f0)
        for _ in range(5):
            F = f0 @ (np.eye(2) + 0.05 * (rng.random((2, 2)) - 0.5))
            U = mesh.verts_pos @ (F - f0).T
            _, g = cm.energy_grad(U)
            assert np.max(np.abs(g[mesh.free])) <= 1e-8


def test_energy_patch_test_for_random_strains(setup, params, f0):
    lat, mesh, _, _ = setup
    rng = np.random.default_rng(3)
    dirs_cart = np.array(lat.dirs) @ lat.basis.T
    for _ in range(20):
        F = f0 @ (np.eye(2) + 0.05 * (rng.random((2, 2)) - 0.5))
        v_bulk = site_energy(EAM, dirs_cart @ F.T)
        for s in mesh.interface_sites[::6]:
            s = int(s)
            D = dirs_cart[params.allowed[s]] @ F.T
            e, _ = interface_energy(EAM, params.C[s], D)
            assert abs(e - v_bulk) <= 1e-12 * (1 + abs(v_bulk))


def test_interface_energy_identity_reconstruction():
    lat = build_lattice(LatticeSpec(radius=4))
    dirs_cart = np.array(lat.dirs) @ lat.basis.T
    rng = np.random.default_rng(0)
    D = dirs_cart + 0.05 * rng.standard_normal(dirs_cart.shape)
    C = np.eye(len(lat.dirs))
    e, gD = interface_energy(EAM, C, D)
    ev, gv = site_energy_gradient(EAM, D)
    assert e == pytest.approx(ev, rel=1e-15)
    assert np.allclose(gD, gv, atol=1e-15)


def test_interface_energy_gradient_fd():
    lat = build_lattice(LatticeSpec(radius=4))
    dirs_cart = np.array(lat.dirs) @ lat.basis.T
    rng = np.random.default_rng(5)
    C = np.eye(18) + 0.1 * rng.standard_normal((18, 18))
    D = dirs_cart + 0.03 * rng.standard_normal(dirs_cart.shape)
    _, gD = interface_energy(EAM, C, D)
    h = 1e-6
    for i in (0, 5, 11):
        for j in range(2):
            Dp = D.copy()
            Dm = D.copy()
            Dp[i, j] += h
            Dm[i, j] -= h
            fd = (interface_energy(EAM, C, Dp)[0] - interface_energy(EAM, C, Dm)[0]) / (2 * h)
            assert abs(gD[i, j] - fd) <= 1e-6 * (1 + abs(gD[i, j]))


def test_stabilization_zero_for_affine_field():
    F = np.array([[1.1, 0.2], [0.0, 0.9]])
    lat = build_lattice(LatticeSpec(radius=3))
    a = np.array([(1, 0), (1, -1), (0, -1)], dtype=float) @ lat.basis.T
    c = np.zeros(2)
    yp = a @ F.T
    ym = -a @ F.T
    e, gc, gp, gm = stabilization_site(0.7, c, yp, ym)
    assert e == 0.0
    assert np.all(gc == 0) and np.all(gp == 0) and np.all(gm == 0)


def test_stabilization_quadratic_scaling():
    rng = np.random.default_rng(1)
    c = rng.standard_normal(2)
    yp = rng.standard_normal((3, 2))
    ym = rng.standard_normal((3, 2))
    e1 = stabilization_site(0.3, c, yp, ym)[0]
    # y -> affine + lam * w scales the energy by lam^2 exactly
    for lam in (2.0, 0.5):
        e2 = stabilization_site(0.3, lam * c, lam * yp, lam * ym)[0]
        assert e2 == pytest.approx(lam ** 2 * e1, rel=1e-13)


def test_stabilization_gradient_fd():
    rng = np.random.default_rng(2)
    c = rng.standard_normal(2)
    yp = rng.standard_normal((3, 2))
    ym = rng.standard_normal((3, 2))
    kappa = 0.45
    e, gc, gp, gm = stabilization_site(kappa, c, yp, ym)
    h = 1e-7

    def e_of(c_, yp_, ym_):
        return stabilization_site(kappa, c_, yp_, ym_)[0]

    for j in range(2):
        dc = np.zeros(2)
        dc[j] = h
        fd = (e_of(c + dc, yp, ym) - e_of(c - dc, yp, ym)) / (2 * h)
        assert abs(gc[j] - fd) <= 1e-7 * (1 + abs(gc[j]))
    for i in range(3):
        for j in range(2):
            dp = np.zeros((3, 2))
            dp[i, j] = h
            fd = (e_of(c, yp + dp, ym) - e_of(c, yp - dp, ym)) / (2 * h)
            assert abs(gp[i, j] - fd) <= 1e-7 * (1 + abs(gp[i, j]))


def test_stabilization_missing_direction_dropped():
    diag = {}
    e, gc, gp, gm = stabilization_site(
        1.0, np.zeros(2), np.ones((3, 2)), np.ones((3, 2)),
        present=np.array([True, False, True]), diag=diag,
    )
    assert diag["dropped"] == 1
    # two present directions, each d2 = (2, 2) so |d2|^2 = 8
    assert e == pytest.approx(16.0, rel=1e-14)


def test_dense_simplex_matches_scipy_on_random_lps():
    rng = np.random.default_rng(9)
    for _ in range(8):
        m, n = 4, 9
        A = rng.standard_normal((m, n))
        x0 = np.abs(rng.standard_normal(n))
        b = A @ x0
        c = np.abs(rng.standard_normal(n)) + 0.1
        x, fun = simplex.solve_lp(c, A, b)
        ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        assert ref.status == 0
        assert fun == pytest.approx(ref.fun, rel=1e-8, abs=1e-10)
        assert np.max(np.abs(A @ x - b)) <= 1e-9


def test_dense_simplex_detects_infeasible():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = np.array([1.0, 2.0])
    with pytest.raises(simplex.SimplexError):
        simplex.solve_lp(np.ones(2), A, b)


def test_l1_dense_engine_agrees_with_highs_on_subsystem(setup):
    # dual-route check on real constraint data: one site's energy rows
    import dataclasses

    lat, mesh, vols, sys_ = setup
    s0 = int(mesh.interface_sites[0])
    keep_rows = [i for i, m in enumerate(sys_.row_meta) if m[1] == s0 and m[0] == "energy"]
    keep_cols = sorted({(sys_.var_index[(s0, r, sig)])
                        for r in range(sys_.n_dirs) for sig in sys_.allowed[s0]})
    A = sys_.A[keep_rows][:, keep_cols].toarray()
    b = sys_.b[keep_rows]
    x_d, fun_d = simplex.minimize_l1(A, b)
    ref = linprog(np.ones(2 * A.shape[1]), A_eq=np.hstack([A, -A]), b_eq=b,
                  bounds=(0, None), method="highs")
    assert ref.status == 0
    assert fun_d == pytest.approx(ref.fun, rel=1e-8)
    assert np.max(np.abs(A @ x_d - b)) <= 1e-9


def test_half_range_is_a_partition():
    lat = build_lattice(LatticeSpec(radius=4))
    plus, opp = half_range(lat)
    assert len(plus) == 9
    covered = set(plus) | {int(opp[k]) for k in plus}
    assert covered == set(range(18))
