import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from eulerporo import field_ops as fo
from eulerporo import material as mm
from eulerporo import rothe as ro
from eulerporo import tensor_core as tc

M = mm.Moduli(rho=1.0, k_v=1e-2, k_p=1e-3, k_a=1e-3, gamma=0.1)
MAT = mm.Material(mm.BiotDamageParams(chi_eq=0.1, c_h=0.2),
                  mm.DissipationParams(sigma_y=0.05, a_y=0.01),
                  mm.MobilityParams(m0=0.5, m1=0.3))
SET = ro.SolverSettings(tau=0.01)


def _grid(n=16, d=2):
    return fo.Grid((n,) * d, (1.0,) * d)


def _smooth_state(g, amp=0.02, seed=0):
    X = g.centers()
    x, y = X[0], X[-1]
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.5, 1.5, 6)
    bump = np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.05)
    v = amp * np.stack([np.sin(np.pi * x) * np.cos(np.pi * y) * c[0],
                        np.sin(np.pi * y) * np.cos(np.pi * x) * c[1]][: g.d])
    Ee = amp * np.stack([c[2] * bump, c[3] * bump * x, c[4] * bump][: tc.nsym(g.d)])
    chi = MAT.biot.chi_eq + amp * c[5] * bump
    return ro.initial_state(g, M, MAT, v=v, Ee=Ee, chi=chi)


def test_settings_validation():
    with pytest.raises(ValueError):
        ro.SolverSettings(tau=0.0)
    with pytest.raises(ValueError):
        ro.SolverSettings(tau=1e-3, tau_min=1e-2)
    with pytest.raises(ValueError):
        ro.SolverSettings(advection="lax")


@pytest.mark.parametrize("d", [1, 2])
def test_equilibrium_is_a_fixed_point(d):
    g = _grid(12, d)
    s0 = ro.initial_state(g, M, MAT)
    s1, rep = ro.rothe_step(s0, ro.Loads(), M, MAT, SET)
    for k in ro.PRIMARY + ("mu", "S"):
        assert np.max(np.abs(getattr(s1, k) - getattr(s0, k))) <= 1e-12
    res = ro.residual_norms(s1, s0, ro.Loads(), M, MAT, SET)
    assert max(res.values()) <= 1e-12
    assert rep.certificate <= 1e-12


def test_ground_state_structural_stress_vanishes():
    g = _grid(8)
    S = ro.structural_stress(np.full((3,) + g.shape, 0.01), np.ones((1,) + g.shape),
                             g.zeros(3), np.full(g.shape, MAT.biot.chi_eq), M, MAT, g)
    # a constant Ep is not stress free through phi (phi sees Ee only) nor through gradients
    np.testing.assert_array_equal(S, 0.0)


@given(st.integers(0, 2 ** 31))
def test_structural_trace_identity_2d(seed):
    g = _grid(8)
    rng = np.random.default_rng(seed)
    s = ro.initial_state(g, M, MAT, Ee=0.1 * rng.standard_normal((3,) + g.n),
                         Ep=0.1 * rng.standard_normal((3,) + g.n),
                         alpha=rng.uniform(0, 1, (1,) + g.n),
                         chi=rng.uniform(-0.4, 0.6, g.n))
    phi = mm.free_energy(s.Ee, s.alpha, s.chi, MAT.biot)
    err = g.interior(tc.matrix_trace(s.S_str) + 2.0 * phi)
    assert np.max(np.abs(err)) <= 1e-12


def test_momentum_zero_data_gives_zero():
    g = _grid(8)
    z = g.zeros(2)
    v, _ = ro.momentum_solve(z, z, g.zeros(2, 2), np.zeros((2,) + g.n), None, M, g, SET)
    np.testing.assert_array_equal(v, 0.0)


def _manufactured():
    x, y = sp.symbols("x y")
    # the wall closure is exact for fields with zero normal derivative of the
    # tangential velocity and of the normal stress, so the manufactured field
    # is taken from that class
    v = [sp.Rational(3, 10) * sp.sin(sp.pi * x) * sp.cos(sp.pi * y),
         sp.Rational(1, 5) * sp.sin(sp.pi * y) * sp.cos(sp.pi * x)]
    X = [x, y]
    E = [[(sp.diff(v[i], X[j]) + sp.diff(v[j], X[i])) / 2 for j in range(2)] for i in range(2)]
    div = sp.diff(v[0], x) + sp.diff(v[1], y)
    f = [M.rho * sum(v[j] * sp.diff(v[i], X[j]) for j in range(2)) + M.rho / 2 * div * v[i]
         - M.k_v * sum(sp.diff(E[i][j], X[j]) for j in range(2)) for i in range(2)]
    lam = lambda e: sp.lambdify((x, y), e, "numpy")
    return [lam(c) for c in v], [lam(c) for c in f], [[lam(c) for c in row] for row in E]


def test_momentum_manufactured_solution_converges():
    vfun, ffun, Efun = _manufactured()
    central = ro.SolverSettings(tau=SET.tau, advection="central")
    errs = []
    for n in (16, 32, 64):
        g = _grid(n)
        X = g.centers()
        vex = np.stack([np.broadcast_to(fn(X[0], X[1]), g.n) for fn in vfun])
        f = np.stack([np.broadcast_to(fn(X[0], X[1]), g.n) for fn in ffun])
        vp = g.pad(vex)
        fo.apply_boundary(vp, fo.WALL, g)
        gsides = []
        for a, side in g.sides:
            P = g.face_points(a, side)
            t = 1 - a  # tangential component
            sgn = 1.0 if side == 1 else -1.0
            trac = sgn * M.k_v * Efun[t][a](P[0], P[1])
            gsides.append(np.broadcast_to(trac + M.gamma * vfun[t](P[0], P[1]), g.face_shape(a)))
        v, _ = ro.momentum_solve(vp, vp, g.zeros(2, 2), f, gsides, M, g, central, v_guess=vp)
        errs.append(np.max(np.abs(g.interior(v) - vex)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.0, (errs, orders)


def test_momentum_residual_is_affine_in_velocity():
    g = _grid(12)
    s = _smooth_state(g)
    f = np.zeros((2,) + g.n)
    Stot = tc.unpack(s.S) + s.S_str
    r0, _ = ro.momentum_residual(s.v, s.v, s.v, Stot, f, None, M, SET.tau, g, "upwind")
    dv = g.zeros(2)
    dv[(slice(None),) + g.inner] = 1e-3
    r1, _ = ro.momentum_residual(s.v + dv, s.v, s.v, Stot, f, None, M, SET.tau, g, "upwind")
    Adv = ro.momentum_operator(dv, s.v, M.rho, M.k_v, SET.tau, M.gamma, g, "upwind")
    np.testing.assert_allclose(r1 - r0, Adv, rtol=0, atol=1e-12)


def test_perturbed_step_raises_momentum_residual():
    g = _grid(12)
    s0 = _smooth_state(g)
    s1, _ = ro.rothe_step(s0, ro.Loads(), M, MAT, SET)
    base = ro.residual_norms(s1, s0, ro.Loads(), M, MAT, SET)
    assert max(base.values()) <= SET.picard_tol
    bad = s1.copy()
    bad.v[(slice(None),) + g.inner] += 1e-3
    res = ro.residual_norms(bad, s0, ro.Loads(), M, MAT, SET)
    # the inertial term alone moves by rho * 1e-3 / tau against O(1e-2) terms
    assert res["momentum"] > 1e3 * SET.picard_tol
    assert res["strain"] > base["strain"]


def test_sub_solves_trivial_cases():
    g = _grid(10)
    rng = np.random.default_rng(4)
    Ee = g.pad(0.01 * np.stack([np.ones(g.n), np.zeros(g.n), 0.5 * np.ones(g.n)]))
    chi = MAT.biot.chi_eq + MAT.biot.beta * tc.trace(g.interior(Ee))
    Ep = 0.01 * rng.standard_normal((3,) + g.n)
    prev = ro.initial_state(g, M, MAT, Ee=g.interior(Ee), Ep=Ep, chi=chi)
    it = prev.copy()
    # stress of a uniform strain is below a large threshold
    big = mm.Material(MAT.biot, mm.DissipationParams(sigma_y=10.0, a_y=10.0), MAT.mobility)
    Ep1, al1, (rP, ra), cert, _ = ro.flow_rule_solve(it, prev, M, big, SET)
    np.testing.assert_array_equal(rP, 0.0)
    np.testing.assert_array_equal(g.interior(Ep1), g.interior(prev.Ep))
    np.testing.assert_array_equal(g.interior(al1), g.interior(prev.alpha))
    Ee1, _ = ro.strain_update(it, prev, g.zeros(3), M, SET)
    np.testing.assert_array_equal(g.interior(Ee1), g.interior(prev.Ee))
    zero_h = [np.zeros(g.face_shape(a)) for a, _ in g.sides]
    chi1, mu1, _ = ro.diffusion_solve(it, prev, zero_h, M, MAT, SET)
    np.testing.assert_allclose(g.interior(chi1), g.interior(prev.chi), rtol=0, atol=1e-15)
    assert np.max(np.abs(g.interior(mu1))) <= 1e-15


@given(st.integers(0, 2 ** 31))
def test_diffusion_conserves_content(seed):
    g = _grid(12)
    rng = np.random.default_rng(seed)
    prev = ro.initial_state(g, M, MAT, chi=rng.uniform(-0.5, 0.5, g.n),
                            alpha=rng.uniform(0, 1, (1,) + g.n))
    zero_h = [np.zeros(g.face_shape(a)) for a, _ in g.sides]
    chi1, _, _ = ro.diffusion_solve(prev.copy(), prev, zero_h, M, MAT, SET)
    c0 = fo.fsum_domain(g.interior(prev.chi), g)
    c1 = fo.fsum_domain(g.interior(chi1), g)
    assert abs(c1 - c0) <= 1e-12 * max(abs(c0), 1.0)


def test_boundary_flux_adds_content():
    g = _grid(10)
    prev = ro.initial_state(g, M, MAT)
    h = [np.full(g.face_shape(a), 0.3 if (a, s) == (0, 0) else 0.0) for a, s in g.sides]
    chi1, _, _ = ro.diffusion_solve(prev.copy(), prev, h, M, MAT, SET)
    gain = fo.fsum_domain(g.interior(chi1 - prev.chi), g)
    assert gain == pytest.approx(SET.tau * 0.3 * 1.0, rel=1e-12)


def test_step_caches_constitutive_relations():
    g = _grid(12)
    s0 = _smooth_state(g)
    s1, rep = ro.rothe_step(s0, ro.Loads(), M, MAT, SET)
    I = g.interior
    np.testing.assert_allclose(I(s1.S), I(mm.stress(s1.Ee, s1.alpha, s1.chi, MAT.biot)),
                               rtol=0, atol=1e-14)
    np.testing.assert_allclose(I(s1.mu), I(mm.chemical_potential(s1.Ee, s1.alpha, s1.chi,
                                                                  MAT.biot)), rtol=0, atol=1e-14)
    assert rep.certificate <= 1e-12
    assert s1.t == pytest.approx(SET.tau)


def test_adaptive_halving_and_abort():
    g = _grid(8)
    s0 = ro.initial_state(g, M, MAT)
    stiff = ro.Loads(f=lambda t, grid: np.full((2,) + grid.n, 1e4))
    tight = ro.SolverSettings(tau=0.05, tau_min=0.02, picard_max=4)
    with pytest.raises(ro.NonConvergence):
        ro.step_adaptive(s0, stiff, M, MAT, tight)
    loose = ro.SolverSettings(tau=0.01, tau_min=1e-4, picard_max=60)
    subs = ro.step_adaptive(_smooth_state(g), ro.Loads(), M, MAT, loose)
    assert sum(r.tau for _, r in subs) == pytest.approx(0.01)


@pytest.mark.parametrize("periodic", [False, True])
@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("scheme", ["upwind", "central"])
def test_momentum_matrix_matches_operator(periodic, d, scheme):
    g = fo.Grid((9,) * d, (1.0,) * d, periodic=periodic)
    rng = np.random.default_rng(11)
    va = fo.apply_boundary(rng.standard_normal((d,) + g.shape), fo.WALL, g)
    pred = (rng.uniform(0.5, 1.5, g.shape), rng.uniform(0.2, 1.0, g.shape))
    Mx = ro.momentum_matrix(va, 1.3, 0.01, 5e-3, 0.1, g, scheme, pred)
    x = rng.standard_normal((d,) + g.shape)
    ref = g.interior(ro.momentum_operator(x, va, 1.3, 0.01, 5e-3, 0.1, g, scheme, pred))
    got = Mx @ g.interior(x).reshape(-1)
    np.testing.assert_allclose(got, ref.reshape(-1), rtol=0, atol=1e-12 * np.abs(ref).max())


def test_linear_solver_components_and_coupled():
    from scipy import sparse

    from eulerporo.linsolve import LinearSolveError, solve_components

    rng = np.random.default_rng(12)
    A = sparse.diags([4.0 + rng.random(50), -np.ones(49), -np.ones(49)], [0, 1, -1])
    B = rng.standard_normal((3, 50))
    B[1] = 0.0
    X, its = solve_components(A, B, rtol=1e-12)
    assert np.all(X[1] == 0.0) and its > 0
    np.testing.assert_allclose(A @ X[0], B[0], atol=1e-10)
    big = sparse.block_diag([A, A, A])
    Y, _ = solve_components(big, B, rtol=1e-12)
    np.testing.assert_allclose(Y, X, atol=1e-10)
    with pytest.raises(LinearSolveError):
        solve_components(sparse.csr_matrix((4, 4)), np.ones((1, 4)))
