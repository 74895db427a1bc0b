"""One fully implicit Rothe step of the Eulerian poro-elastodynamic system.

The coupled step is solved by an outer Picard iteration around four
implicit sub-solves (momentum, flow rules, strain, diffusion).  Every
sub-solve is written as a correction about the current iterate, so a state
that already satisfies the discrete equations is reproduced exactly.

Discrete boundary conditions:

* velocity: zero normal component, tangential traction balanced by
  ``gamma v_t`` and the load ``g_t`` (enforced on the ghosts of the total
  stress so that the summation-by-parts boundary term equals the
  boundary power ``(g_t - gamma v_t) v_t``);
* ``S``, ``Ep``, ``alpha``, ``chi``: homogeneous Neumann (mirror ghosts);
* ``mu``: prescribed inward flux ``h`` on every boundary face.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from . import field_ops as fo
from . import material as mm
from . import tensor_core as tc
from .linsolve import LinearSolveError, solve_components


class NonConvergence(RuntimeError):
    """The Picard iteration did not converge (or produced non-finite values)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class State:
    """All unknowns at one discrete time, with ghosts filled."""

    grid: fo.Grid
    t: float
    v: np.ndarray
    Ee: np.ndarray
    Ep: np.ndarray
    alpha: np.ndarray
    chi: np.ndarray
    mu: np.ndarray
    S: np.ndarray
    S_str: np.ndarray

    def copy(self) -> "State":
        return State(self.grid, self.t, *(getattr(self, k).copy() for k in FIELDS))

    def fields(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}


FIELDS = ("v", "Ee", "Ep", "alpha", "chi", "mu", "S", "S_str")
PRIMARY = ("v", "Ee", "Ep", "alpha", "chi")


def _zero_load_f(t, grid):
    return np.zeros((grid.d,) + grid.n)


def _zero_side(t, grid):
    return [np.zeros(grid.face_shape(a)) for a, _ in grid.sides]


@dataclass(frozen=True)
class Loads:
    """Loads as callables of ``(t, grid)``.

    ``f`` returns a ``(d, *n)`` interior array; ``g_t`` and ``h`` return one
    face array per boundary side (``Grid.sides`` order).  ``g_t`` is the
    tangential traction along the positive tangent axis; ``h`` the inward
    flux of water content.
    """

    f: Callable = _zero_load_f
    g_t: Callable = _zero_side
    h: Callable = _zero_side


@dataclass(frozen=True)
class SolverSettings:
    tau: float = 5e-3
    picard_tol: float = 1e-8
    picard_max: int = 60
    lin_tol: float = 1e-10
    lin_max: int = 50
    relax: float = 1.0
    tau_min: float = 1e-6
    advection: str = "upwind"
    freeze_mechanics: bool = False

    def __post_init__(self):
        if not (self.tau > 0.0 and self.tau_min > 0.0 and self.tau >= self.tau_min):
            raise ValueError("need tau >= tau_min > 0")
        if not (0.0 < self.picard_tol < 1.0 and 0.0 < self.lin_tol < 1.0):
            raise ValueError("tolerances must lie in (0, 1)")
        if not 0.0 < self.relax <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.advection not in ("upwind", "central"):
            raise ValueError(f"unknown advection scheme {self.advection!r}")


@dataclass
class StepReport:
    tau: float
    picard_iterations: int
    residuals: dict
    certificate: float
    linear_iterations: int = 0
    halvings: int = 0
    history: list = field(default_factory=list)


# ----------------------------------------------------------- assembly

def fill_ghosts(st: State) -> State:
    """Make every ghost layer consistent with its boundary condition."""
    g = st.grid
    fo.apply_boundary(st.v, fo.WALL, g)
    for k in ("Ee", "Ep", "alpha", "chi", "mu", "S"):
        fo.apply_boundary(getattr(st, k), fo.NEUMANN, g)
    return st


def structural_stress(Ep, alpha, Ee, chi, m: mm.Moduli, mat: mm.Material, grid: fo.Grid):
    """Korteweg-type stress ``k_p gEp x gEp + k_a ga x ga - (phi + gradient energies) I``.

    Inputs must carry Neumann ghosts.  Returns ``(d, d, *P)`` (ghosts zero).
    """
    d = grid.d
    gEp = fo.grad(Ep, grid)
    ga = fo.grad(alpha, grid)
    w = tc.frobenius_weights(d)
    out = m.k_p * tc.boxtimes(gEp, gEp, w) + m.k_a * tc.boxtimes(ga, ga)
    phi = mm.free_energy(Ee, alpha, chi, mat.biot)
    iso = phi + 0.5 * m.k_p * tc.matrix_trace(tc.boxtimes(gEp, gEp, w)) \
        + 0.5 * m.k_a * tc.matrix_trace(tc.boxtimes(ga, ga))
    for i in range(d):
        out[i, i] -= iso
    mask = np.zeros(grid.shape)
    mask[grid.inner] = 1.0
    return out * mask


def assemble(st: State, m: mm.Moduli, mat: mm.Material) -> State:
    """Recompute the cached ``S``, ``mu`` and ``S_str`` from the primary fields."""
    g = st.grid
    fill_ghosts(st)
    st.S = mm.stress(st.Ee, st.alpha, st.chi, mat.biot)
    st.mu = mm.chemical_potential(st.Ee, st.alpha, st.chi, mat.biot)
    st.S_str = structural_stress(st.Ep, st.alpha, st.Ee, st.chi, m, mat, g)
    fo.apply_boundary(st.S, fo.NEUMANN, g)
    fo.apply_boundary(st.mu, fo.NEUMANN, g)
    return st


def initial_state(grid: fo.Grid, m: mm.Moduli, mat: mm.Material, v=None, Ee=None, Ep=None,
                  alpha=None, chi=None, ell: int = 1, t: float = 0.0) -> State:
    """Build a consistent state from interior arrays (``None`` means ground state)."""
    d, n = grid.d, tc.nsym(grid.d)

    def lift(x, ncomp, default):
        if x is None:
            out = grid.zeros(*ncomp)
            out[...] = default
            return out
        return grid.pad(np.asarray(x, dtype=float))

    st = State(
        grid, t,
        lift(v, (d,), 0.0), lift(Ee, (n,), 0.0), lift(Ep, (n,), 0.0),
        lift(alpha, (ell,), 1.0), lift(chi, (), mat.biot.chi_eq),
        grid.zeros(), grid.zeros(n), grid.zeros(d, d),
    )
    return assemble(st, m, mat)


def total_stress_ghosts(T: np.ndarray, v: np.ndarray, gamma: float, g_sides, grid: fo.Grid):
    """Fill ghosts of a ``(d, d, *P)`` stress for the Navier-slip wall, in place.

    On faces normal to axis ``a`` the normal row entry ``T[a, a]`` is
    mirrored and each tangential entry ``T[i, a]`` gets the ghost that makes
    its face average equal ``n_a (g_t - gamma v_t)``.
    """
    if grid.periodic:
        return fo.fill_periodic(T, grid)
    d = grid.d
    for a, side in grid.sides:
        k = 2 * a + side
        sgn = 1.0 if side == 1 else -1.0
        idx = [slice(1, -1)] * d
        idx[a] = 0 if side == 0 else -1
        idx = tuple(idx)
        for i in range(d):
            tint = fo.side_trace(T[i, a], grid, a, side)
            if i == a:
                T[(i, a) + idx] = tint
            else:
                gt = 0.0 if g_sides is None else np.asarray(g_sides[k], dtype=float)
                vt = fo.side_trace(v[i], grid, a, side)
                T[(i, a) + idx] = 2.0 * sgn * (gt - gamma * vt) - tint
    return T


def _stress_matrix(Spacked):
    return tc.unpack(Spacked)


def _divergence_of_stress(T_int, v, gamma, g_sides, grid):
    T = T_int.copy()
    total_stress_ghosts(T, v, gamma, g_sides, grid)
    return fo.div_tensor(T, grid)


def _predictor_stress(Ev, bulk, shear):
    """Isotropic stiffness acting on a packed strain, returned as a matrix field."""
    d = tc.dim_of_packed(Ev.shape[0])
    dev, _, tr = tc.dev_sph_tr(Ev)
    return tc.unpack(tc.identity(d, tr.shape) * (bulk * tr) + 2.0 * shear * dev)


def _relaxed_moduli(bulk, shear, rate_P, eta_p, tau, d):
    """Stiffness seen by the velocity where inelastic flow is active (Maxwell relaxation)."""
    active = tc.norm(rate_P) > 0.0
    eb = np.where(active, eta_p / (eta_p + tau * d * bulk), 1.0)
    es = np.where(active, eta_p / (eta_p + 2.0 * tau * shear), 1.0)
    return bulk * eb, shear * es


def _mask(grid):
    m = np.zeros(grid.shape)
    m[grid.inner] = 1.0
    return m


# ----------------------------------------------------------- sub-solves

def momentum_operator(v, v_adv, rho, k_v, tau, gamma, grid, scheme, pred=None):
    """Linear part of the momentum equation applied to ``v`` (ghosts filled here)."""
    v = v.copy()
    fo.apply_boundary(v, fo.WALL, grid)
    Ev = fo.symgrad(v, grid)
    T = k_v * _stress_matrix(Ev)
    if pred is not None:
        T = T + tau * _predictor_stress(Ev, *pred)
    T = T * _mask(grid)
    out = rho / tau * v + rho * fo.advect(v_adv, v, grid, scheme) \
        + 0.5 * rho * fo.div_vec(v_adv, grid) * v \
        - _divergence_of_stress(T, v, gamma, None, grid)
    return out * _mask(grid)


def _momentum_geometry(grid):
    """Sparse wall-ghosted symmetric gradient and stress divergence, built once per grid.

    Returns ``(SG, BT, BV)``: ``SG`` maps velocity to packed strain, ``BT``
    maps a stress matrix field to its divergence with zero wall traction and
    ``BV`` is the velocity part of the slip traction per unit drag.
    """
    return _geometry(grid.n, grid.L, grid.periodic)


@functools.lru_cache(maxsize=8)
def _geometry(n, L, periodic):
    grid = fo.Grid(n, L, periodic)
    d = grid.d
    zero_v = grid.zeros(d)

    def sg(e):
        fo.apply_boundary(e, fo.WALL, grid)
        return fo.symgrad(e, grid)

    def bt(e):
        T = e.reshape((d, d) + grid.shape)
        total_stress_ghosts(T, zero_v, 0.0, None, grid)
        return fo.div_tensor(T, grid)

    def bv(e):
        fo.apply_boundary(e, fo.WALL, grid)
        T = np.zeros((d, d) + grid.shape)
        total_stress_ghosts(T, e, 1.0, None, grid)
        return fo.div_tensor(T, grid)

    return (fo.probe_matrix(sg, d, grid), fo.probe_matrix(bt, d * d, grid),
            fo.probe_matrix(bv, d, grid))


def momentum_matrix(v_adv, rho, k_v, tau, gamma, grid, scheme, pred=None):
    """Sparse form of :func:`momentum_operator` on component-major interior velocities."""
    d = grid.d
    SG, BT, BV = _momentum_geometry(grid)
    ns = tc.nsym(d)
    shape = tuple(grid.n)
    blocks = [[None] * ns for _ in range(d * d)]
    for k in range(ns):
        unit = np.zeros((ns,) + shape)
        unit[k] = 1.0
        T = k_v * _stress_matrix(unit)
        if pred is not None:
            bulk, shear = (grid.interior(np.broadcast_to(q, grid.shape)) for q in pred)
            T = T + tau * _predictor_stress(unit, bulk, shear)
        T = T.reshape((d * d, -1))
        for r in range(d * d):
            blocks[r][k] = sparse.diags(T[r])
    C = sparse.bmat(blocks, format="csr")
    par = fo.wall_parity(d)
    adv = sparse.block_diag([fo.advection_matrix(v_adv, grid, scheme,
                                                 parity=None if grid.periodic else par[c])
                             for c in range(d)], format="csr")
    mass = rho / tau + 0.5 * rho * grid.interior(fo.div_vec(v_adv, grid))
    M = sparse.diags(np.tile(np.ravel(np.broadcast_to(mass, shape)), d)) + rho * adv \
        - BT @ C @ SG - gamma * BV
    return M.tocsr()


def momentum_residual(v, v_prev, v_adv, S_total, f, g_sides, m: mm.Moduli, tau, grid, scheme):
    """``rho mtd v + rho/2 div(v_adv) v - div(S_total + k_v E(v)) - f`` on interior cells.

    ``S_total`` is a ``(d, d, *P)`` matrix field (interior values used).
    Returns the residual and the list of separate term arrays.
    """
    v = v.copy()
    fo.apply_boundary(v, fo.WALL, grid)
    mask = _mask(grid)
    T = (S_total + m.k_v * _stress_matrix(fo.symgrad(v, grid))) * mask
    terms = [
        m.rho * (v - v_prev) / tau * mask,
        m.rho * fo.advect(v_adv, v, grid, scheme),
        0.5 * m.rho * fo.div_vec(v_adv, grid) * v * mask,
        -_divergence_of_stress(T, v, m.gamma, g_sides, grid),
        -grid.pad(f),
    ]
    return sum(terms), terms


def momentum_solve(prev_v, advect_v, S_total_field, loads_f, g_t, m: mm.Moduli, grid, settings,
                   v_guess=None, pred=None, ops=None):
    """Solve the linear momentum equation for the new velocity.

    ``S_total_field`` is the elastic plus structural stress of the current
    iterate (matrix field); ``pred = (bulk, shear)`` is an optional
    isotropic stiffness added implicitly as ``tau C (E(v) - E(v_guess))``,
    which vanishes at convergence.  The solve is a correction driven by the
    exact residual, so the assembled matrix may be a lagged one kept in the
    ``ops`` dictionary without moving the fixed point.  Returns
    ``(v, iterations)``.
    """
    tau = settings.tau
    v0 = prev_v if v_guess is None else v_guess
    v0 = v0.copy()
    fo.apply_boundary(v0, fo.WALL, grid)
    F0, terms = momentum_residual(v0, prev_v, advect_v, S_total_field, loads_f, g_t, m, tau,
                                  grid, settings.advection)
    scale = max(float(np.linalg.norm(grid.interior(t))) for t in terms)

    M = _cached(ops, "momentum", lambda: momentum_matrix(advect_v, m.rho, m.k_v, tau, m.gamma,
                                                         grid, settings.advection, pred))
    dv, its = _sparse_solve(M, -F0, grid, settings.lin_tol, settings.lin_max, scale)
    dv = grid.pad(dv)
    v = v0 + dv * _mask(grid)
    fo.apply_boundary(v, fo.WALL, grid)
    return v, its


def _transport_matrix(v, tau, grid, scheme):
    """Sparse ``1/tau + v.grad`` on interior cells with reflected ghosts."""
    return (sparse.identity(grid.ncells, format="csr") / tau
            + fo.advection_matrix(v, grid, scheme))


def _sparse_solve(A, rhs, grid, rtol, maxiter, scale=0.0):
    """Solve with an interior-assembled matrix for a ghosted right-hand side.

    ``scale`` is the norm of the full equation's right-hand side; the
    correction is resolved to ``rtol`` of it.
    """
    r = grid.interior(rhs)
    x, its = solve_components(A, r.reshape((-1, grid.ncells)), rtol, maxiter, rtol * scale)
    return x.reshape(r.shape), its


def _cached(ops, key, build):
    """Matrix ``ops[key]``, built on first use; ``ops=None`` always builds."""
    if ops is None:
        return build()
    if key not in ops:
        ops[key] = build()
    return ops[key]


def transport_solve(X_iter, X_prev, v, rate, tau, grid, settings, extra=None, ops=None):
    """Implicit transport ``(1/tau + v.grad) X = X_prev/tau + rate (+ extra)``, Neumann ghosts.

    Solved as a correction driven by the exact residual with a matrix that
    may be lagged (see :func:`momentum_solve`).
    """
    mask = _mask(grid)
    rhs_extra = 0.0 if extra is None else extra

    X0 = X_iter.copy()
    fo.apply_boundary(X0, fo.NEUMANN, grid)
    terms = [(X0 - X_prev) / tau * mask, (rate + rhs_extra) * mask,
             fo.advect(v, X0, grid, settings.advection)]
    F0 = terms[0] - terms[1] + terms[2]
    if not np.any(v):
        X = X_prev + tau * (rate + rhs_extra) * mask
        X = np.where(mask > 0, X, X0)
        fo.apply_boundary(X, fo.NEUMANN, grid)
        return X, 0

    A = _cached(ops, "transport", lambda: _transport_matrix(v, tau, grid, settings.advection))
    scale = max(float(np.linalg.norm(t)) for t in terms)
    dX, its = _sparse_solve(A, -F0, grid, settings.lin_tol, settings.lin_max, scale)
    dX = grid.pad(dX)
    X = X0 + dX * mask
    fo.apply_boundary(X, fo.NEUMANN, grid)
    return X, its


def flow_rule_solve(iterate: State, prev: State, m: mm.Moduli, mat: mm.Material, settings,
                    rate_P_guess=None, ops=None):
    """Prox-resolve the flow rules at the iterate, then transport Ep and alpha.

    The inelastic rate sees the stress relief it causes through a stiffness
    shift ``tau c (r - r_guess)`` with ``c`` bounding the elastic tangent;
    the shift vanishes at the Picard fixed point.

    Returns ``(Ep_new, alpha_new, (rate_P, rate_alpha), certificate, iterations)``.
    """
    g = iterate.grid
    tau = settings.tau
    st = math.sqrt(tau)
    mask = _mask(g)
    R_P = (iterate.S + m.k_p * fo.laplacian(iterate.Ep, g)) * mask
    R_a = (m.k_a * fo.laplacian(iterate.alpha, g)
           - mm.dphi_dalpha(iterate.Ee, iterate.alpha, iterate.chi, mat.biot) * mask
           + st * fo.advect(iterate.v, iterate.alpha, g, settings.advection))
    R_a = R_a * mask
    bulk, shear = mm.tangent_moduli(g.interior(iterate.Ee), g.interior(iterate.alpha),
                                    g.interior(iterate.chi), mat.biot)
    c = tau * np.maximum(g.d * bulk, 2.0 * shear)
    drive_P = g.interior(R_P)
    if rate_P_guess is not None:
        drive_P = drive_P + c * g.interior(rate_P_guess)
    rP, ra, cert = mm.prox_rates(g.interior(prev.alpha), g.interior(prev.chi), drive_P,
                                 g.interior(R_a), mat.dissipation, extra_eta_alpha=st,
                                 extra_eta_P=c)
    rate_P, rate_a = g.pad(rP), g.pad(ra)
    Ep, i1 = transport_solve(iterate.Ep, prev.Ep, iterate.v, rate_P, tau, g, settings, ops=ops)
    al, i2 = transport_solve(iterate.alpha, prev.alpha, iterate.v, rate_a, tau, g, settings,
                             ops=ops)
    return Ep, al, (rate_P, rate_a), cert, i1 + i2


def strain_update(iterate: State, prev: State, rate_P, m: mm.Moduli, settings, ops=None):
    """Implicit transport of the elastic strain with source ``E(v) - rate_P + k_e lap S``."""
    g = iterate.grid
    src = fo.symgrad(iterate.v, g) - rate_P
    if m.k_e != 0.0:
        src = src + m.k_e * fo.laplacian(iterate.S, g)
    return transport_solve(iterate.Ee, prev.Ee, iterate.v, src * _mask(g), settings.tau, g,
                           settings, ops=ops)


def _boundary_faces(F_axis, grid, axis, h_sides):
    """Overwrite the two boundary faces of an axis-``axis`` face array with the prescribed flux."""
    k = F_axis.ndim - grid.d + axis
    lo = [slice(None)] * F_axis.ndim
    hi = [slice(None)] * F_axis.ndim
    lo[k] = 0
    hi[k] = grid.n[axis]
    # inward flux h: outward normal is -e_a on the low side
    F_axis[tuple(lo)] = -np.asarray(h_sides[2 * axis], dtype=float)
    F_axis[tuple(hi)] = np.asarray(h_sides[2 * axis + 1], dtype=float)
    return F_axis


def darcy_fluxes(mu, mob, h_sides, grid: fo.Grid):
    """Face fluxes ``M grad mu`` (arithmetic face mobility) with prescribed boundary flux."""
    mu = mu.copy()
    mob = mob.copy()
    fo.apply_boundary(mu, fo.NEUMANN, grid)
    fo.apply_boundary(mob, fo.NEUMANN, grid)
    G = fo.face_gradient(mu, grid)
    Mf = fo.face_average(mob, grid)
    F = [Mf[a] * G[a] for a in range(grid.d)]
    if not grid.periodic:
        for a in range(grid.d):
            _boundary_faces(F[a], grid, a, h_sides)
    return F


def diffusion_solve(iterate: State, prev: State, h_sides, m: mm.Moduli, mat: mm.Material, settings,
                    ops=None):
    """Implicit linear solve for chi with the mobility frozen at the previous step.

    After the linear solve the new content is rebuilt in flux form from the
    solved potential, so the step conserves water content to rounding.  Returns ``(chi, mu, iterations)``.
    """
    g = iterate.grid
    tau = settings.tau
    p = mat.biot
    mask = _mask(g)
    mob = mm.mobility(prev.alpha, prev.chi, mat.mobility) * np.ones(g.shape)
    v = iterate.v
    Ee = iterate.Ee

    def mu_of(chi):
        return mm.chemical_potential(Ee, iterate.alpha, chi, p)

    chi0 = iterate.chi.copy()
    fo.apply_boundary(chi0, fo.NEUMANN, g)
    terms = [((chi0 - prev.chi) / tau) * mask, fo.advect(v, chi0, g, settings.advection),
             -fo.flux_divergence(darcy_fluxes(mu_of(chi0), mob, h_sides, g), g)]
    F0 = sum(terms)

    def build():
        Mf = fo.face_average(fo.apply_boundary(mob.copy(), fo.NEUMANN, g), g)
        return _transport_matrix(v, tau, g, settings.advection) + p.M_b * fo.flux_matrix(Mf, g)

    A = _cached(ops, "diffusion", build)
    scale = max(float(np.linalg.norm(t)) for t in terms)
    dchi, its = _sparse_solve(A, -F0, g, settings.lin_tol, settings.lin_max, scale)
    dchi = g.pad(dchi)
    chi_sol = chi0 + dchi * mask
    fo.apply_boundary(chi_sol, fo.NEUMANN, g)
    flux = fo.flux_divergence(darcy_fluxes(mu_of(chi_sol), mob, h_sides, g), g)
    chi = prev.chi + tau * (flux - fo.advect(v, chi_sol, g, settings.advection))
    chi = np.where(mask > 0, chi, chi_sol)
    fo.apply_boundary(chi, fo.NEUMANN, g)
    mu = mu_of(chi)
    fo.apply_boundary(mu, fo.NEUMANN, g)
    return chi, mu, its


# ----------------------------------------------------------- residuals

def _l2(x, grid):
    return math.sqrt(max(fo.integrate_domain(np.sum(np.asarray(x) ** 2, axis=tuple(
        range(np.ndim(x) - grid.d))) if np.ndim(x) > grid.d else np.asarray(x) ** 2, grid), 0.0))


def _relative(res, terms, grid):
    scale = max([_l2(t, grid) for t in terms] + [1e-30])
    return _l2(res, grid) / scale


def residual_norms(next_: State, prev: State, loads: Loads, m: mm.Moduli, mat: mm.Material,
                   settings: Optional[SolverSettings] = None) -> dict:
    """Relative L2 residuals of every discrete equation, recomputed from the states.

    Each residual is divided by the largest L2 norm among the terms of its
    own equation.  Keys: momentum, strain, flow_P, flow_alpha, diffusion,
    stress, potential.
    """
    g = next_.grid
    settings = settings or SolverSettings()
    scheme = settings.advection
    tau = next_.t - prev.t
    if not tau > 0.0:
        raise ValueError("next state must be later than prev")
    st = next_.copy()
    fill_ghosts(st)
    mask = _mask(g)
    tmid = prev.t + 0.5 * tau
    p = mat.biot
    out = {}

    # constitutive relations, pointwise
    S = mm.stress(st.Ee, st.alpha, st.chi, p)
    mu = mm.chemical_potential(st.Ee, st.alpha, st.chi, p)
    out["stress"] = _relative((st.S - S) * mask, [S * mask, st.S * mask], g)
    out["potential"] = _relative((st.mu - mu) * mask, [mu * mask, st.mu * mask], g)
    fo.apply_boundary(S, fo.NEUMANN, g)
    fo.apply_boundary(mu, fo.NEUMANN, g)

    if settings.freeze_mechanics:
        out["momentum"] = 0.0 if not np.any(st.v) else float("inf")
    else:
        Sstr = structural_stress(st.Ep, st.alpha, st.Ee, st.chi, m, mat, g)
        Stot = (tc.unpack(S) + Sstr) * mask
        r, terms = momentum_residual(st.v, prev.v, st.v, Stot, loads.f(tmid, g),
                                     loads.g_t(tmid, g), m, tau, g, scheme)
        out["momentum"] = _relative(r, terms, g)

    mtd = lambda X, Xp: ((X - Xp) / tau) * mask + fo.advect(st.v, X, g, scheme)
    rate_P = mtd(st.Ep, prev.Ep)
    rate_a = mtd(st.alpha, prev.alpha)

    terms = [mtd(st.Ee, prev.Ee), rate_P, -fo.symgrad(st.v, g) * mask]
    if m.k_e != 0.0:
        terms.append(-m.k_e * fo.laplacian(S, g))
    out["strain"] = _relative(sum(terms), terms, g)

    dp = mat.dissipation
    sy, ay = mm.thresholds(g.interior(prev.alpha), g.interior(prev.chi), dp)
    R_P = g.interior(S + m.k_p * fo.laplacian(st.Ep, g))
    # prox fixed-point form: continuous in the rate, zero iff the inclusion holds
    res = dp.eta_p * (g.interior(rate_P) - mm.shrink(R_P, tc.norm(R_P), sy, dp.eta_p))
    out["flow_P"] = _l2(res, g) / max(_l2(R_P, g), _l2(dp.eta_p * g.interior(rate_P), g), 1e-30)
    vnorm = lambda x: np.sqrt(np.sum(x ** 2, axis=0))
    R_a = g.interior(m.k_a * fo.laplacian(st.alpha, g)
                     - mm.dphi_dalpha(st.Ee, st.alpha, st.chi, p)
                     - (st.alpha - prev.alpha) / math.sqrt(tau))
    res = dp.eta_alpha * (g.interior(rate_a) - mm.shrink(R_a, vnorm(R_a), ay, dp.eta_alpha))
    out["flow_alpha"] = _l2(res, g) / max(_l2(R_a, g), _l2(dp.eta_alpha * g.interior(rate_a), g),
                                          1e-30)

    mob = mm.mobility(prev.alpha, prev.chi, mat.mobility) * np.ones(g.shape)
    flux = fo.flux_divergence(darcy_fluxes(mu, mob, loads.h(tmid, g), g), g)
    terms = [mtd(st.chi, prev.chi), -flux]
    out["diffusion"] = _relative(sum(terms), terms, g)
    return out


def combined_residual(res: dict) -> float:
    return max(res.values())


# ----------------------------------------------------------- the step

def _finite(st: State) -> bool:
    return all(np.all(np.isfinite(getattr(st, k))) for k in FIELDS)


def rothe_step(prev: State, loads: Loads, m: mm.Moduli, mat: mm.Material,
               settings: SolverSettings):
    """Advance ``prev`` by one step of length ``settings.tau``.

    Raises :class:`NonConvergence` when the Picard iteration fails to reach
    ``picard_tol`` within ``picard_max`` sweeps or a non-finite value or an
    inner solver breakdown appears.
    """
    g = prev.grid
    tau = settings.tau
    tmid = prev.t + 0.5 * tau
    f = loads.f(tmid, g)
    gsides = loads.g_t(tmid, g)
    hsides = loads.h(tmid, g)
    om = settings.relax
    it = prev.copy()
    it.t = prev.t + tau
    if settings.freeze_mechanics:
        it.v[...] = 0.0
    assemble(it, m, mat)
    history = []
    rate_P = g.zeros(tc.nsym(g.d))
    # assembled matrices are reused across sweeps; the momentum one is
    # rebuilt whenever the set of flowing cells (and so its stiffness) changes
    ops = {}
    active = None
    lin_total = 0
    cert = 0.0
    for k in range(1, settings.picard_max + 1):
        try:
            if not settings.freeze_mechanics:
                bulk, shear = mm.tangent_moduli(it.Ee, it.alpha, it.chi, mat.biot)
                bulk, shear = _relaxed_moduli(bulk, shear, rate_P, mat.dissipation.eta_p,
                                              tau, g.d)
                now_active = tc.norm(rate_P) > 0.0
                if active is None or not np.array_equal(active, now_active):
                    ops.pop("momentum", None)
                    active = now_active
                Stot = (tc.unpack(it.S) + it.S_str) * _mask(g)
                v_new, i0 = momentum_solve(prev.v, it.v, Stot, f, gsides, m, g, settings,
                                           v_guess=it.v, pred=(bulk, shear), ops=ops)
                it.v = it.v + om * (v_new - it.v)
                lin_total += i0
            Ep, al, (rate_P, _), cert_k, i1 = flow_rule_solve(it, prev, m, mat, settings,
                                                              rate_P, ops=ops)
            cert = max(cert, cert_k)
            Ee, i2 = strain_update(it, prev, rate_P, m, settings, ops=ops)
            it.Ep = it.Ep + om * (Ep - it.Ep)
            it.alpha = it.alpha + om * (al - it.alpha)
            it.Ee = it.Ee + om * (Ee - it.Ee)
            fill_ghosts(it)
            chi, _, i3 = diffusion_solve(it, prev, hsides, m, mat, settings, ops=ops)
            it.chi = it.chi + om * (chi - it.chi)
            lin_total += i1 + i2 + i3
        except LinearSolveError as exc:
            raise NonConvergence(f"inner solve failed at sweep {k}: {exc}") from exc
        assemble(it, m, mat)
        if not _finite(it):
            raise NonConvergence(f"non-finite values at sweep {k}")
        res = residual_norms(it, prev, loads, m, mat, settings)
        r = combined_residual(res)
        history.append(r)
        if r <= settings.picard_tol:
            mm.check_alpha_range(g.interior(it.alpha))
            return it, StepReport(tau, k, res, cert, lin_total, 0, history)
    raise NonConvergence(
        f"Picard did not reach {settings.picard_tol:.1e} in {settings.picard_max} sweeps "
        f"(last {history[-1]:.3e})",
        StepReport(tau, settings.picard_max, res, cert, lin_total, 0, history))


def step_adaptive(prev: State, loads: Loads, m: mm.Moduli, mat: mm.Material,
                  settings: SolverSettings, _depth: int = 0):
    """Advance by ``settings.tau``, halving the step recursively on failure.

    Returns a list of ``(state, report)`` for the accepted sub-steps.  Gives
    up with :class:`NonConvergence` once the step would fall below
    ``tau_min``.
    """
    try:
        nxt, rep = rothe_step(prev, loads, m, mat, settings)
        rep.halvings = _depth
        return [(nxt, rep)]
    except NonConvergence as exc:
        half = settings.tau / 2.0
        if half < settings.tau_min:
            raise NonConvergence(f"{exc} (tau_min {settings.tau_min:g} reached)",
                                 exc.report) from exc
    sub = replace(settings, tau=half)
    first = step_adaptive(prev, loads, m, mat, sub, _depth + 1)
    second = step_adaptive(first[-1][0], loads, m, mat, sub, _depth + 1)
    return first + second
