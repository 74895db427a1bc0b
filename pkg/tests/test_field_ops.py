import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eulerporo import field_ops as fo


def _grid(d, n=16, periodic=False):
    return fo.Grid((n,) * d, (1.0,) * d, periodic=periodic)


def test_grid_validation():
    with pytest.raises(ValueError):
        fo.Grid((3, 8), (1.0, 1.0))
    with pytest.raises(ValueError):
        fo.Grid((8, 8, 8), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        fo.Grid((8,), (0.0,))


def test_neumann_constant_ghosts():
    g = _grid(2, 8)
    f = g.pad(np.full(g.n, 3.5))
    fo.apply_boundary(f, fo.NEUMANN, g)
    np.testing.assert_array_equal(f, 3.5)


def test_free_slip_wall_ghosts():
    g = _grid(2, 8)
    rng = np.random.default_rng(1)
    v = g.pad(np.stack([rng.uniform(1, 2, g.n), np.zeros(g.n)]))
    fo.apply_boundary(v, fo.BcSpec(fo.WALL), g)
    # wall normal (0, 1): tangential x-velocity even, normal y-velocity odd
    np.testing.assert_array_equal(v[0, 1:-1, -1], v[0, 1:-1, -2])
    np.testing.assert_array_equal(v[1, 1:-1, -1], -v[1, 1:-1, -2])


def test_flux_condition_reproduces_linear_profile():
    g = _grid(1, 10)
    a = 0.7
    x = g.padded_centers()[0]
    f = g.pad(a * g.centers()[0])
    fo.apply_boundary(f, fo.BcSpec(fo.FLUX, h=[-a, a]), g)
    np.testing.assert_allclose(f, a * x, rtol=0, atol=1e-15)
    F = fo.face_gradient(f, g)[0]
    # inward flux of -grad f at both walls
    assert abs(-F[0] - (-a)) <= 1e-12
    assert abs(F[-1] - a) <= 1e-12


@pytest.mark.parametrize("d", [1, 2])
def test_constant_and_quadratic(d):
    g = _grid(d, 12)
    c = g.pad(np.full(g.n, 2.0))
    fo.apply_boundary(c, fo.NEUMANN, g)
    np.testing.assert_array_equal(g.interior(fo.grad(c, g)), 0.0)
    np.testing.assert_array_equal(g.interior(fo.laplacian(c, g)), 0.0)
    x = g.padded_centers()[0]
    q = x ** 2
    lap = fo.div_block(fo.grad(q, g), g)
    # two-cell stencil: exact on quadratics away from the ghosts
    inner = (slice(2, -2),) * d
    np.testing.assert_allclose(lap[inner], 2.0, rtol=1e-12)


def test_laplacian_is_div_of_grad():
    g = _grid(2, 10)
    rng = np.random.default_rng(2)
    f = g.pad(rng.standard_normal(g.n))
    fo.apply_boundary(f, fo.NEUMANN, g)
    G = fo.grad(f, g)
    fo.apply_boundary(G, fo.GRADIENT, g)
    np.testing.assert_array_equal(fo.laplacian(f, g), fo.div_block(G, g))


@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2]), st.booleans())
def test_summation_by_parts(seed, d, periodic):
    g = _grid(d, 8, periodic)
    rng = np.random.default_rng(seed)
    u = g.pad(rng.standard_normal((2,) + g.n))
    T = g.pad(rng.standard_normal((2, d) + g.n))
    fo.apply_boundary(u, fo.NEUMANN, g)
    fo.apply_boundary(T, fo.NEUMANN, g)
    divT = fo.div_block(T, g)
    Gu = fo.grad(u, g)
    lhs = fo.integrate_domain(np.sum(divT * u, axis=0), g)
    rhs = fo.integrate_domain(np.sum(T * Gu, axis=(0, 1)), g)
    bnd = fo.sbp_boundary_term(T, u, g)
    if periodic:
        assert bnd == 0.0 or abs(bnd) < 1e-12
    scale = fo.integrate_domain(np.sum(T ** 2, axis=(0, 1)) + np.sum(u ** 2, axis=0), g)
    assert abs(lhs + rhs - bnd) <= 1e-12 * max(scale, 1.0)


def _sin_field(g):
    X = g.padded_centers()
    return np.prod(np.cos(2 * np.pi * X), axis=0)


@pytest.mark.parametrize("d", [1, 2])
def test_central_operator_order(d):
    errs = []
    for n in (16, 32, 64):
        g = _grid(d, n)
        f = _sin_field(g)
        lap = g.interior(fo.laplacian(f, g))
        exact = -4 * np.pi ** 2 * d * g.interior(f)
        errs.append(np.max(np.abs(lap - exact)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.9


def test_upwind_order_and_convective_derivative():
    errs = []
    a, c = 0.8, 0.3
    for n in (16, 32, 64, 128):
        g = _grid(2, n)
        X = g.padded_centers()
        f = np.sin(2 * np.pi * X[0]) + a * X[0]
        v = np.zeros((2,) + g.shape)
        v[0] = c
        r = fo.convective_derivative(f, f, v, 0.1, g)
        exact = c * (2 * np.pi * np.cos(2 * np.pi * X[0]) + a)
        errs.append(np.max(np.abs(g.interior(r - exact))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 0.9


def test_convective_derivative_trivial_cases():
    g = _grid(2, 8)
    rng = np.random.default_rng(0)
    f1, f0 = rng.standard_normal(g.shape), rng.standard_normal(g.shape)
    v = np.zeros((2,) + g.shape)
    np.testing.assert_array_equal(fo.convective_derivative(f1, f0, v, 0.5, g)[g.inner],
                                  ((f1 - f0) / 0.5)[g.inner])
    c = np.full(g.shape, 1.25)
    v = rng.standard_normal((2,) + g.shape)
    np.testing.assert_array_equal(fo.convective_derivative(c, c, v, 0.5, g), 0.0)
    with pytest.raises(ValueError):
        fo.convective_derivative(c, c, v, 0.0, g)
    with pytest.raises(ValueError):
        fo.advect(v, c, g, "lax")


@given(st.integers(0, 2 ** 31))
def test_upwind_dissipates_on_divergence_free_flow(seed):
    g = _grid(2, 24, periodic=True)
    rng = np.random.default_rng(seed)
    X = g.padded_centers()
    v = np.stack([np.sin(2 * np.pi * X[1]), np.sin(2 * np.pi * X[0])]) * rng.uniform(-2, 2)
    f = g.pad(rng.standard_normal(g.n))
    fo.fill_periodic(f, g)
    up = fo.integrate_domain(fo.advect(v, f, g, "upwind") * f, g)
    cen = fo.integrate_domain(fo.advect(v, f, g, "central") * f, g)
    # central is skew on this flow; upwinding only adds nonnegative dissipation
    assert abs(cen) <= 1e-12 * fo.integrate_domain(f ** 2, g) * 100
    assert up >= cen - 1e-12


def test_integrals():
    g = _grid(2, 8)
    assert fo.integrate_domain(np.ones(g.shape), g) == 1.0
    assert fo.integrate_boundary(1.0, g) == 4.0
    errs = []
    for n in (16, 32, 64):
        g1 = _grid(1, n)
        x = g1.centers()[0]
        errs.append(abs(fo.integrate_domain(np.sin(2 * np.pi * x) ** 2, g1) - 0.5))
    assert max(errs) <= 1e-12  # midpoint rule is exact for this trigonometric polynomial
    s = np.random.default_rng(5).standard_normal(g.n)
    assert fo.fsum_domain(s, g) == pytest.approx(fo.integrate_domain(s, g), rel=1e-13)


def test_face_flux_divergence_telescopes():
    g = _grid(2, 9)
    rng = np.random.default_rng(7)
    F = [rng.standard_normal((g.n[0] + 1, g.n[1])), rng.standard_normal((g.n[0], g.n[1] + 1))]
    F[0][[0, -1], :] = 0.0
    F[1][:, [0, -1]] = 0.0
    assert abs(fo.integrate_domain(fo.flux_divergence(F, g), g)) <= 1e-13


@pytest.mark.parametrize("periodic", [False, True])
@pytest.mark.parametrize("n", [(9,), (6, 7)])
@pytest.mark.parametrize("scheme", ["upwind", "central"])
def test_advection_matrix_matches_operator(periodic, n, scheme):
    g = fo.Grid(n, (1.0,) * len(n), periodic=periodic)
    rng = np.random.default_rng(5)
    v = rng.standard_normal((g.d,) + g.shape)
    f = fo.apply_boundary(rng.standard_normal(g.shape), fo.NEUMANN, g)
    A = fo.advection_matrix(v, g, scheme)
    ref = g.interior(fo.advect(v, f, g, scheme)).ravel()
    np.testing.assert_allclose(A @ g.interior(f).ravel(), ref, rtol=0, atol=1e-13)


def test_advection_matrix_odd_parity_matches_wall_ghosts():
    g = fo.Grid((6, 5), (1.0, 1.0))
    rng = np.random.default_rng(6)
    v = rng.standard_normal((2,) + g.shape)
    u = fo.apply_boundary(rng.standard_normal((2,) + g.shape), fo.WALL, g)
    for c, par in enumerate(fo.wall_parity(2)):
        A = fo.advection_matrix(v, g, "upwind", parity=par)
        ref = g.interior(fo.advect(v, u[c:c + 1], g))[0].ravel()
        np.testing.assert_allclose(A @ g.interior(u[c]).ravel(), ref, atol=1e-13)


@pytest.mark.parametrize("periodic", [False, True])
def test_flux_matrix_matches_zero_flux_divergence(periodic):
    g = fo.Grid((7, 6), (1.0, 2.0), periodic=periodic)
    rng = np.random.default_rng(7)
    f = fo.apply_boundary(rng.standard_normal(g.shape), fo.NEUMANN, g)
    mob = fo.apply_boundary(rng.uniform(0.5, 1.5, g.shape), fo.NEUMANN, g)
    Mf = fo.face_average(mob, g)
    F = [Mf[a] * G for a, G in enumerate(fo.face_gradient(f, g))]
    if not periodic:
        for a in range(2):
            idx = [slice(None)] * 2
            for k in (0, -1):
                idx[a] = k
                F[a][tuple(idx)] = 0.0
    B = fo.flux_matrix(Mf, g)
    ref = -g.interior(fo.flux_divergence(F, g)).ravel()
    np.testing.assert_allclose(B @ g.interior(f).ravel(), ref, atol=1e-12)
    assert abs(B - B.T).max() == 0.0
    np.testing.assert_allclose(B @ np.ones(g.ncells), 0.0, atol=1e-12)


@pytest.mark.parametrize("periodic", [False, True])
@pytest.mark.parametrize("n", [(4,), (5, 7), (4, 8)])
def test_probe_matrix_reproduces_symgrad(periodic, n):
    g = fo.Grid(n, (1.0,) * len(n), periodic=periodic)

    def sg(e):
        fo.apply_boundary(e, fo.WALL, g)
        return fo.symgrad(e, g)

    S = fo.probe_matrix(sg, g.d, g)
    u = np.random.default_rng(8).standard_normal((g.d,) + g.shape)
    ref = g.interior(sg(u.copy())).reshape(-1)
    np.testing.assert_allclose(S @ g.interior(u).reshape(-1), ref, atol=1e-13)


def test_probe_matrix_rejects_wide_stencils():
    g = fo.Grid((8,), (1.0,))

    def wide(e):
        out = np.zeros_like(e)
        out[0, 1:-3] = e[0, 3:-1]
        return out

    with pytest.raises(ValueError):
        fo.probe_matrix(wide, 1, g)
