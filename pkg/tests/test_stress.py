from fractions import Fraction

import numpy as np
import pytest

from acgrac.grac import assemble_constraints, solve_l1
from acgrac.lattice import NN_DIRS, LatticeSpec, build_lattice, classify_bond
from acgrac.mesh import MicroMesh, build_ac_mesh, effective_volumes
from acgrac.model import AtomisticModel, CoupledModel
from acgrac.potential import EamParams, minimize_cauchy_born_dilation
from acgrac.stress import (
    StressField,
    bond_pattern,
    bond_weights,
    cr_correct,
    cr_field,
    divergence_residual,
    is_divergence_free,
    sigma_a,
    sigma_cb,
    sigma_h,
    weak_form_residual,
)

EAM = EamParams()


@pytest.fixture(scope="module")
def f0():
    return minimize_cauchy_born_dilation(EAM)[1]


@pytest.fixture(scope="module")
def world(f0):
    lat = build_lattice(LatticeSpec(radius=16))
    mesh = build_ac_mesh(lat, R_a=5, R=12)
    vols = effective_volumes(mesh)
    params = solve_l1(assemble_constraints(lat, mesh, vols))
    cm = CoupledModel(mesh, vols, params, EAM, f0, kappa=1.0)
    micro = MicroMesh(lat, 14)
    return lat, mesh, vols, params, cm, micro


def _off(*pairs):
    m = n = 0
    for coef, j in pairs:
        m += coef * NN_DIRS[j - 1][0]
        n += coef * NN_DIRS[j - 1][1]
    return (m, n)


def test_bond_pattern_2a3_type1():
    pat = bond_pattern(_off((2, 3)))
    assert len(pat.entries) == 4
    assert all(w == Fraction(1, 4) for _, w in pat.entries)
    assert pat.total == 1


def test_bond_pattern_a1_2a2_type2():
    pat = bond_pattern(_off((1, 1), (2, 2)))
    bv = classify_bond(_off((1, 1), (2, 2)))
    assert (bv.alpha, bv.beta) == (1, 2)
    assert len(pat.entries) == 2 * (1 + 2 - 1)
    assert pat.total == 1


def test_bond_pattern_2a1_2a2_equal_coeffs():
    pat = bond_pattern(_off((2, 1), (2, 2)))
    assert len(pat.entries) == 4
    assert all(w == Fraction(1, 4) for _, w in pat.entries)
    assert pat.total == 1


def test_bond_weight_counts_full_range():
    # every direction of the r_cut = 2 range: 2|rho| for Type I,
    # 2(alpha+beta-1) or 2 alpha for Type II, partition exactly one
    lat = build_lattice(LatticeSpec(radius=6))
    for d in lat.dirs:
        bv = classify_bond(d)
        pat = bond_pattern(d)
        if bv.beta == 0:
            assert len(pat.entries) == 2 * bv.alpha
            assert all(w == Fraction(1, 2 * bv.alpha) for _, w in pat.entries)
        elif bv.alpha == bv.beta:
            assert len(pat.entries) == 2 * bv.alpha
            assert all(w == Fraction(1, 2 * bv.alpha) for _, w in pat.entries)
        else:
            assert len(pat.entries) == 2 * (bv.alpha + bv.beta - 1)
        assert pat.total == 1


def test_bond_partition_sweep_is_exact():
    lat = build_lattice(LatticeSpec(radius=16, defect_count=2))
    micro = MicroMesh(lat, 16)
    hd = lat.hexdists()
    count = 0
    for s in range(0, lat.n_sites, 7):
        if hd[s] > 14:  # keep the bond support inside the micro mesh
            continue
        for k in range(len(lat.dirs)):
            if lat.nbr[s, k] < 0:
                continue
            bw = bond_weights(lat, micro, s, k)
            assert bw.total == Fraction(1)
            count += 1
    assert count > 1000


def test_sigma_a_uniform_matches_cauchy_born(world, f0):
    lat, mesh, _, _, _, micro = world
    F = f0 @ np.array([[1.02, 0.01], [0.0, 0.99]])
    y = lat.positions @ F.T
    field = sigma_a(EAM, lat, micro, y)
    ref = sigma_cb(EAM, lat, F)
    interior = np.linalg.norm(micro.verts_pos[micro.tris].mean(axis=1), axis=1) < 10
    assert np.max(np.abs(field.sig[interior] - ref)) <= 1e-12
    # translation invariance
    field2 = sigma_a(EAM, lat, micro, y + np.array([0.3, -0.7]))
    assert np.max(np.abs(field2.sig - field.sig)) <= 1e-12


def test_sigma_a_weak_form_identity(world, f0):
    lat, _, _, _, _, micro = world
    R = 12
    am = AtomisticModel(lat, R, EAM, f0)
    rng = np.random.default_rng(0)
    hd = lat.hexdists()
    U = np.zeros((lat.n_sites, 2))
    inner = hd <= R - 2
    U[inner] = 0.02 * rng.standard_normal((int(inner.sum()), 2))
    _, g = am.energy_grad(U)
    field = sigma_a(EAM, lat, micro, am.base_pos + U, centers=am.center)
    vh = micro.verts_lat
    vhex = (np.abs(vh[:, 0]) + np.abs(vh[:, 1]) + np.abs(vh.sum(axis=1))) / 2
    support = vhex <= R - 3
    worst = 0.0
    grad_on_micro = np.zeros((micro.n_verts, 2))
    res = micro.vert_site >= 0
    grad_on_micro[res] = g[micro.vert_site[res]]
    for _ in range(20):
        v = np.zeros((micro.n_verts, 2))
        v[support] = rng.standard_normal((int(support.sum()), 2))
        worst = max(worst, weak_form_residual(field, grad_on_micro, [v]) /
                    max(1.0, np.abs(v).max()))
    assert worst <= 1e-10


def test_sigma_h_weak_form_identity(world):
    lat, mesh, vols, params, cm, _ = world
    rng = np.random.default_rng(1)
    U = np.zeros((mesh.n_verts, 2))
    U[mesh.free] = 0.02 * rng.standard_normal((int(mesh.free.sum()), 2))
    _, g = cm.energy_grad(U)
    field = sigma_h(cm, U)
    worst = 0.0
    for _ in range(20):
        v = np.zeros((mesh.n_verts, 2))
        v[mesh.free] = rng.standard_normal((int(mesh.free.sum()), 2))
        worst = max(worst, weak_form_residual(field, g, [v]) / max(1.0, np.abs(v).max()))
    assert worst <= 1e-10


def test_sigma_h_pure_continuum_elements(world, f0):
    lat, mesh, vols, params, _, _ = world
    cm0 = CoupledModel(mesh, vols, params, EAM, f0, kappa=0.0)
    rng = np.random.default_rng(2)
    U = np.zeros((mesh.n_verts, 2))
    U[mesh.free] = 0.01 * rng.standard_normal((int(mesh.free.sum()), 2))
    field = sigma_h(cm0, U)
    # far continuum elements carry exactly the Cauchy-Born stress
    outers = np.nonzero(mesh.elem_min_hex() > mesh.R_a + 2)[0]
    gradU = np.einsum("eik,eig->ekg", U[mesh.tris[outers]], mesh.grads[outers])
    for t, gu in zip(outers[:20], gradU[:20]):
        ref = sigma_cb(EAM, lat, cm0.B + gu)
        assert np.max(np.abs(field.sig[t] - ref)) <= 1e-12


def test_sigma_h_uniform_is_divergence_free(world, f0):
    lat, mesh, vols, params, cm, _ = world
    F = f0 @ np.array([[1.01, -0.02], [0.01, 1.0]])
    U = mesh.verts_pos @ (F - cm.B).T
    field = sigma_h(cm, U)
    free = np.nonzero(mesh.free)[0]
    assert divergence_residual(field, free) <= 1e-10


def test_divergence_free_constant_field(world):
    _, mesh, _, _, _, _ = world
    sig = np.tile(np.array([[1.3, -0.2], [0.4, 2.0]]), (mesh.n_elems, 1, 1))
    field = StressField(mesh, sig, "const")
    free = np.nonzero(mesh.free)[0]
    assert divergence_residual(field, free) <= 1e-12


def test_divergence_free_cr_lemma(world):
    _, mesh, _, _, _, _ = world
    rng = np.random.default_rng(3)
    free = np.nonzero(mesh.free)[0]
    sig0 = np.array([[0.5, 1.0], [-0.3, 0.2]])
    for _ in range(50):
        c = {i: rng.standard_normal(2) for i in range(len(mesh.faces))}
        field = cr_field(mesh, c)
        field.sig += sig0
        assert is_divergence_free(field, free, tol=1e-12)


def test_random_field_not_divergence_free(world):
    _, mesh, _, _, _, _ = world
    rng = np.random.default_rng(4)
    field = StressField(mesh, rng.standard_normal((mesh.n_elems, 2, 2)), "rand")
    free = np.nonzero(mesh.free)[0]
    assert divergence_residual(field, free) > 1e-3


def test_cr_correction_reduces_interface_mismatch(world, f0):
    lat, mesh, vols, params, cm, micro = world
    rng = np.random.default_rng(5)
    U = np.zeros((mesh.n_verts, 2))
    U[mesh.free] = 0.02 * rng.standard_normal((int(mesh.free.sum()), 2))
    y = lat.positions @ cm.B.T
    y += mesh.values_at_sites(U, np.arange(lat.n_sites))
    sa = sigma_a(EAM, lat, micro, y)
    sh = sigma_h(cm, U)
    corrected, before, after = cr_correct(sa, sh, mesh, micro)
    assert after <= before + 1e-14
    assert after < before  # random states have genuine mismatch
    # the correction is divergence free, so the weak form is preserved
    _, g = cm.energy_grad(U)
    v = np.zeros((mesh.n_verts, 2))
    v[mesh.free] = rng.standard_normal((int(mesh.free.sum()), 2))
    r1 = weak_form_residual(sh, g, [v])
    r2 = weak_form_residual(corrected, g, [v])
    assert r2 <= r1 + 1e-9


def test_cr_correction_zero_when_already_matching(world):
    lat, mesh, vols, params, cm, micro = world
    # fabricate sigma_h equal to sigma_a on every canonical element
    rng = np.random.default_rng(6)
    sig_h = StressField(mesh, rng.standard_normal((mesh.n_elems, 2, 2)), "h")
    sig_a = StressField(micro, np.zeros((micro.n_elems, 2, 2)), "a")
    for t in range(mesh.n_elems):
        cell = tuple(mesh.micro_cell[t])
        if cell in micro.cell_index:
            sig_a.sig[micro.cell_index[cell]] = sig_h.sig[t]
    corrected, before, after = cr_correct(sig_a, sig_h, mesh, micro)
    assert before <= 1e-18
    assert after <= before + 1e-14


def test_assembly_cost_scales_with_bond_count(f0):
    import time

    times = {}
    for r in (8, 16):
        lat = build_lattice(LatticeSpec(radius=r + 2))
        micro = MicroMesh(lat, r)
        y = lat.positions @ f0.T
        t0 = time.perf_counter()
        for _ in range(3):
            sigma_a(EAM, lat, micro, y)
        times[r] = time.perf_counter() - t0
    # bond count grows 4x; allow generous slack over the linear ratio for
    # fixed per-call overheads and machine noise
    assert times[16] / times[8] < 4 * 1.7
