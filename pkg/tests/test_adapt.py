import numpy as np
import pytest

from acgrac.adapt import (
    AdaptConfig,
    dorfler_mark,
    elem_layer_distance,
    interface_expansion_check,
    make_state,
    refine_step,
    run,
)
from acgrac.estimate import EstimatorReport
from acgrac.lattice import LatticeSpec, build_lattice
from acgrac.mesh import REGION_CONT
from acgrac.potential import EamParams, minimize_cauchy_born_dilation

EAM = EamParams()


@pytest.fixture(scope="module")
def f0():
    return minimize_cauchy_born_dilation(EAM)[1]


@pytest.fixture(scope="module")
def divac_state(f0):
    lat = build_lattice(LatticeSpec(radius=26, defect_count=2))
    B = np.array([[1.03, 0.03], [0.0, 1.03]]) @ f0
    return lat, B


def test_dorfler_equal_indicators():
    for n in (4, 7, 10):
        rho = np.ones(n)
        m = dorfler_mark(rho, 0.5)
        assert len(m) == int(np.ceil(n / 2))


def test_dorfler_dominant_element():
    rho = np.full(10, 0.1 / 9)
    rho[3] = 0.9
    m = dorfler_mark(rho, 0.5)
    assert list(m) == [3]


def test_dorfler_zero_indicators_empty():
    assert len(dorfler_mark(np.zeros(5), 0.5)) == 0


def test_dorfler_minimality_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rho = rng.random(rng.integers(1, 30))
        theta = rng.uniform(0.1, 0.9)
        m = dorfler_mark(rho, theta)
        total = rho.sum()
        assert rho[m].sum() >= theta * total - 1e-12
        # removing the smallest marked element breaks the inequality
        if len(m) > 1:
            smallest = m[np.argmin(rho[m])]
            rest = [t for t in m if t != smallest]
            assert rho[rest].sum() < theta * total


def test_interface_check_far_marks(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    mesh = state.mesh
    layer = elem_layer_distance(mesh)
    far = np.nonzero((mesh.region == REGION_CONT) & (layer > 4))[0][:5]
    rho = np.zeros(mesh.n_elems)
    rho[far] = 1.0
    k, reduced = interface_expansion_check(far, mesh, rho, tau1=0.5, K=3)
    assert k == 0 and len(reduced) == len(far)


def test_interface_check_near_marks(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    mesh = state.mesh
    layer = elem_layer_distance(mesh)
    near = np.nonzero((mesh.region == REGION_CONT) & (layer <= 1))[0][:6]
    rho = np.zeros(mesh.n_elems)
    rho[near] = 1.0
    k, reduced = interface_expansion_check(near, mesh, rho, tau1=0.5, K=3)
    assert k == 1 and len(reduced) == 0


def test_interface_check_matches_bruteforce(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    mesh = state.mesh
    rng = np.random.default_rng(1)
    layer = elem_layer_distance(mesh)
    cont = np.nonzero(mesh.region == REGION_CONT)[0]
    for trial in range(20):
        marked = rng.choice(cont, size=12, replace=False)
        rho = np.zeros(mesh.n_elems)
        rho[marked] = rng.random(12)
        tau1 = rng.uniform(0.2, 0.8)
        k, reduced = interface_expansion_check(marked, mesh, rho, tau1=tau1, K=4)
        # oracle: probe k = 1..K directly
        expect = 0
        for kk in range(1, 5):
            sel = [t for t in marked if layer[t] <= kk]
            if rho[sel].sum() >= tau1 * rho[marked].sum() - 1e-15:
                expect = kk
                break
        assert k == expect


def _fake_report(mesh, eta_T, eta_M=1.0, eta_C=1.0, rho_T=None):
    if rho_T is None:
        rho_T = np.zeros(mesh.n_elems)
    return EstimatorReport(eta_T=eta_T, eta_M=eta_M, eta_C=eta_C, rho_T=rho_T)


def test_refine_step_pure_bisection(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    mesh = state.mesh
    cont = np.nonzero((mesh.region == REGION_CONT) & (mesh.areas > 1.0))[0][:4]
    rep = _fake_report(mesh, eta_T=0.0)
    state2 = refine_step(state, cont, 0, rep, AdaptConfig())
    assert state2.mesh.R_a == 5 and state2.mesh.R == 16
    assert state2.mesh.n_elems > mesh.n_elems


def test_refine_step_domain_growth(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    rho_T = np.zeros(state.mesh.n_elems)
    rep = _fake_report(state.mesh, eta_T=1.0, rho_T=rho_T)  # rho == eta_T
    state2 = refine_step(state, np.array([], dtype=int), 0, rep, AdaptConfig(tau3=0.7))
    assert state2.mesh.R > 16


def test_refine_step_respects_R_max(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    rep = _fake_report(state.mesh, eta_T=1.0)
    cfg = AdaptConfig(tau3=0.5, R_max=16)
    state2 = refine_step(state, np.array([], dtype=int), 0, rep, cfg)
    assert state2.mesh.R == 16
    assert state2.flags.get("enlarge_skipped")


def test_refine_step_interface_expansion_repasses_patch_test(divac_state, f0):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    rep = _fake_report(state.mesh, eta_T=0.0)
    state2 = refine_step(state, np.array([], dtype=int), 2, rep, AdaptConfig())
    assert state2.mesh.R_a == 7
    mesh = state2.mesh
    # ghost forces on the new interface (uniform strain near F0)
    from acgrac.model import CoupledModel

    hom = build_lattice(LatticeSpec(radius=26))
    state_h = make_state(hom, EAM, B, R_a=7, R=16)
    F = f0 @ np.array([[1.01, 0.02], [0.0, 0.99]])
    U = state_h.mesh.verts_pos @ (F - B).T
    _, g = state_h.cm.energy_grad(U)
    assert np.max(np.abs(g[state_h.mesh.free])) <= 1e-8


def test_run_stops_immediately_on_rho_tol(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    trace = run(state, AdaptConfig(rho_tol=np.inf, N_max=10 ** 6))
    assert len(trace.records) == 1


def test_run_stops_on_N_max(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16)
    trace = run(state, AdaptConfig(N_max=1, rho_tol=0.0))
    assert len(trace.records) == 1
    assert trace.records[0]["N"] > 1


def test_run_divacancy_rho_trend(divac_state):
    lat, B = divac_state
    state = make_state(lat, EAM, B, R_a=5, R=16, method="l1", kappa=1.0)
    trace = run(state, AdaptConfig(N_max=900, rho_tol=0.0, R_max=24))
    rho = trace.column("rho")
    assert len(rho) >= 3
    # decreasing within 10% tolerance for non-monotone blips
    for a, b in zip(rho[:-1], rho[1:]):
        assert b <= 1.1 * a
    assert rho[-1] < rho[0]
    N = trace.column("N")
    assert all(b > a for a, b in zip(N[:-1], N[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(tau1=1.5).validate()
