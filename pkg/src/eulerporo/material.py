"""Biot-damage free energy, threshold-plus-viscous dissipation, mobility.

The stored energy density is

    phi(E, a, chi) = K/2 (tr E)^2 + M_b/2 (beta tr E - chi + chi_eq)^2
                     + G(a) |dev E|^2 / (1 + eps_sat |dev E|^2)
                     + G0 |dev E|^2 + c_h sum_i (1 - a_i)^2

with ``G(a) = G1 a_1^2``; the first internal variable is the damage-like
one that softens the shear response, the rest only carry the healing
potential.  ``K/2 (tr E)^2`` equals ``dK/2 |sph E|^2`` in any dimension.

All functions are pointwise and broadcast over trailing (cell) axes:
``E`` is packed ``(nsym, ...)``, ``alpha`` is ``(l, ...)``, ``chi`` is ``(...)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc


@dataclass(frozen=True)
class BiotDamageParams:
    K: float = 1.0
    M_b: float = 1.0
    beta: float = 1.0
    chi_eq: float = 0.0
    G1: float = 1.0
    eps_sat: float = 1.0
    G0: float = 0.5
    c_h: float = 0.0


@dataclass(frozen=True)
class DissipationParams:
    """Threshold-plus-viscous potential for the inelastic strain and the internal variables.

    Thresholds may depend affinely on the previous internal variable and
    water content: ``sigma_y + sigma_y_alpha * a_1 + sigma_y_chi * chi``
    (clamped at zero), likewise for ``a_y``.
    """

    sigma_y: float = 0.0
    eta_p: float = 1.0
    a_y: float = 0.0
    eta_alpha: float = 1.0
    sigma_y_alpha: float = 0.0
    sigma_y_chi: float = 0.0
    a_y_alpha: float = 0.0
    a_y_chi: float = 0.0


@dataclass(frozen=True)
class MobilityParams:
    m0: float = 1.0
    m1: float = 0.0
    m_min: float = 1e-12


@dataclass(frozen=True)
class Moduli:
    rho: float = 1.0
    k_v: float = 1e-2
    k_p: float = 1e-4
    k_a: float = 1e-4
    k_e: float = 0.0
    gamma: float = 0.1


@dataclass(frozen=True)
class Material:
    """Everything constitutive, bundled for the solver."""

    biot: BiotDamageParams = BiotDamageParams()
    dissipation: DissipationParams = DissipationParams()
    mobility: MobilityParams = MobilityParams()


def _parts(E, p: BiotDamageParams):
    dev, _, tr = tc.dev_sph_tr(E)
    s = tc.ddot(dev, dev)
    return dev, tr, s


def shear_modulus(alpha, p: BiotDamageParams):
    return p.G1 * alpha[0] ** 2


def free_energy(E, alpha, chi, p: BiotDamageParams):
    E = np.asarray(E, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    dev, tr, s = _parts(E, p)
    vol = 0.5 * p.K * tr ** 2 + 0.5 * p.M_b * (p.beta * tr - chi + p.chi_eq) ** 2
    shear = shear_modulus(alpha, p) * s / (1.0 + p.eps_sat * s) + p.G0 * s
    heal = p.c_h * np.sum((1.0 - alpha) ** 2, axis=0)
    return vol + shear + heal


def stress(E, alpha, chi, p: BiotDamageParams):
    """S = d(phi)/dE, packed."""
    E = np.asarray(E, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    d = tc.dim_of_packed(E.shape[0])
    dev, tr, s = _parts(E, p)
    sph_coef = p.K * tr + p.M_b * p.beta * (p.beta * tr - chi + p.chi_eq)
    shear = 2.0 * (shear_modulus(alpha, p) / (1.0 + p.eps_sat * s) ** 2 + p.G0)
    return tc.identity(d, sph_coef.shape) * sph_coef + shear * dev


def dphi_dalpha(E, alpha, chi, p: BiotDamageParams):
    E = np.asarray(E, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    _, _, s = _parts(E, p)
    out = -2.0 * p.c_h * (1.0 - alpha)
    out[0] = out[0] + 2.0 * p.G1 * alpha[0] * s / (1.0 + p.eps_sat * s)
    return out


def chemical_potential(E, alpha, chi, p: BiotDamageParams):
    """mu = d(phi)/d(chi) = M_b (chi - chi_eq - beta tr E)."""
    return p.M_b * (chi - p.chi_eq - p.beta * tc.trace(E))


def hessian_action(E, alpha, chi, p: BiotDamageParams, dE, dchi):
    """Second derivative of phi in the (E, chi) block applied to (dE, dchi)."""
    E = np.asarray(E, dtype=float)
    dE = np.asarray(dE, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    d = tc.dim_of_packed(E.shape[0])
    dev, tr, s = _parts(E, p)
    ddev, _, dtr = tc.dev_sph_tr(dE)
    G = shear_modulus(alpha, p)
    q = 1.0 / (1.0 + p.eps_sat * s) ** 2
    dq = -2.0 * p.eps_sat / (1.0 + p.eps_sat * s) ** 3
    sph = p.K * dtr + p.M_b * p.beta * (p.beta * dtr - dchi)
    dS = (tc.identity(d, np.shape(sph)) * sph
          + 2.0 * (G * q + p.G0) * ddev
          + 4.0 * G * dq * tc.ddot(dev, ddev) * dev)
    dmu = p.M_b * (dchi - p.beta * dtr)
    return dS, dmu


def tangent_moduli(E, alpha, chi, p: BiotDamageParams):
    """Isotropic approximation of the (E)-Hessian: undrained bulk and secant shear.

    Returns ``(bulk, shear)`` so that ``bulk tr(dE) I + 2 shear dev(dE)``
    approximates ``dS``.
    """
    _, _, s = _parts(np.asarray(E, dtype=float), p)
    bulk = (p.K + p.M_b * p.beta ** 2) * np.ones_like(s)
    shear = shear_modulus(np.asarray(alpha, dtype=float), p) / (1.0 + p.eps_sat * s) ** 2 + p.G0
    return bulk, shear


# ---------------------------------------------------------------- convexity

def convexity_guard_constant(eps_sat: float, samples: int = 20001) -> float:
    """Worst loss of convexity of ``s -> s / (1 + eps s)`` composed with ``|dev E|^2``.

    The Hessian of ``h(|e|^2)`` along ``e`` is ``2 (1 - 3 eps s) / (1 + eps s)^3``.
    Returns ``c = max_s max(0, -that/2)`` so that ``G0 > c * G`` keeps the
    shear part uniformly convex.  Found by a scan over ``u = eps * s``.
    """
    if eps_sat <= 0.0:
        return 0.0
    u = np.concatenate([np.linspace(0.0, 10.0, samples), np.geomspace(10.0, 1e6, 2001)])
    curv = 2.0 * (1.0 - 3.0 * u) / (1.0 + u) ** 3
    return float(max(0.0, -0.5 * curv.min()))


def convexity_bound(p: BiotDamageParams, alpha_max: float = 1.05) -> float:
    """Smallest admissible G0 for uniform (E, chi)-convexity with a in [0, alpha_max]."""
    return convexity_guard_constant(p.eps_sat) * p.G1 * alpha_max ** 2


def _orthonormal_basis(d: int) -> np.ndarray:
    """Packed tensors forming an orthonormal basis under the Frobenius product."""
    n = tc.nsym(d)
    w = tc.frobenius_weights(d)
    return np.diag(1.0 / np.sqrt(w)).reshape(n, n)


def ec_hessian(E, alpha, chi, p: BiotDamageParams) -> np.ndarray:
    """Matrix of the (E, chi) Hessian in orthonormal coordinates for one point."""
    E = np.asarray(E, dtype=float)
    d = tc.dim_of_packed(E.shape[0])
    B = _orthonormal_basis(d)
    n = B.shape[0]
    H = np.zeros((n + 1, n + 1))
    dirs = [(B[k], 0.0) for k in range(n)] + [(np.zeros(n), 1.0)]
    for j, (dE, dchi) in enumerate(dirs):
        dS, dmu = hessian_action(E, alpha, chi, p, dE, dchi)
        for i in range(n):
            H[i, j] = tc.ddot(dS, B[i])
        H[n, j] = dmu
    return 0.5 * (H + H.T)


def full_hessian_fd(E, alpha, chi, p: BiotDamageParams, step: float = 1e-6) -> np.ndarray:
    """Hessian of phi in all variables (E, alpha, chi) by central differences of the gradient."""
    E = np.asarray(E, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    d = tc.dim_of_packed(E.shape[0])
    B = _orthonormal_basis(d)
    n, ell = B.shape[0], alpha.shape[0]
    m = n + ell + 1

    def gradient(x):
        Ex = np.einsum("k,kj->j", x[:n], B)
        S = stress(Ex, x[n:n + ell], x[-1], p)
        ga = dphi_dalpha(Ex, x[n:n + ell], x[-1], p)
        mu = chemical_potential(Ex, x[n:n + ell], x[-1], p)
        return np.concatenate([[tc.ddot(S, B[i]) for i in range(n)], ga, [mu]])

    x0 = np.concatenate([[tc.ddot(E, B[i]) for i in range(n)], alpha, [chi]])
    H = np.zeros((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        H[:, j] = (gradient(x0 + e) - gradient(x0 - e)) / (2.0 * step)
    return 0.5 * (H + H.T)


def sample_states(rng, d: int, ell: int, count: int, strain: float = 0.1,
                  chi_eq: float = 0.0, chi_span: float = 0.5):
    """Random (E, alpha, chi) with |E| <= strain, alpha in [0, 1], |chi - chi_eq| <= chi_span."""
    n = tc.nsym(d)
    E = rng.standard_normal((count, n))
    E *= (strain * rng.uniform(0.0, 1.0, count) / np.sqrt(
        np.einsum("ck,k,ck->c", E, tc.frobenius_weights(d), E)))[:, None]
    alpha = rng.uniform(0.0, 1.0, (count, ell))
    chi = chi_eq + rng.uniform(-chi_span, chi_span, count)
    return E, alpha, chi


def min_ec_eigenvalue(p: BiotDamageParams, d: int = 2, ell: int = 1, samples: int = 500,
                      seed: int = 0, strain: float = 0.5):
    """Smallest sampled eigenvalue of the (E, chi) Hessian block."""
    rng = np.random.default_rng(seed)
    E, alpha, chi = sample_states(rng, d, ell, samples, strain, p.chi_eq)
    worst = np.inf
    for k in range(samples):
        lam = np.linalg.eigvalsh(ec_hessian(E[k], alpha[k], chi[k], p))[0]
        worst = min(worst, lam)
    return float(worst)


def semiconvexity_check(p: BiotDamageParams, eps_c: float, d: int = 2, ell: int = 1,
                        samples: int = 300, seed: int = 0, strain: float = 0.1):
    """Is phi + |alpha|^2/(2 eps_c) convex on samples?  Returns (min eigenvalue, worst sample)."""
    rng = np.random.default_rng(seed)
    E, alpha, chi = sample_states(rng, d, ell, samples, strain, p.chi_eq)
    n = tc.nsym(d)
    worst, where = np.inf, None
    for k in range(samples):
        H = full_hessian_fd(E[k], alpha[k], chi[k], p)
        H[n:n + ell, n:n + ell] += np.eye(ell) / eps_c
        lam = np.linalg.eigvalsh(H)[0]
        if lam < worst:
            worst, where = lam, (E[k], alpha[k], chi[k])
    return float(worst), where


# ------------------------------------------------------------ dissipation

def thresholds(alpha_prev, chi_prev, dp: DissipationParams):
    """Activation thresholds frozen at the previous time level."""
    a1 = np.asarray(alpha_prev, dtype=float)[0]
    chi_prev = np.asarray(chi_prev, dtype=float)
    sy = np.maximum(dp.sigma_y + dp.sigma_y_alpha * a1 + dp.sigma_y_chi * chi_prev, 0.0)
    ay = np.maximum(dp.a_y + dp.a_y_alpha * a1 + dp.a_y_chi * chi_prev, 0.0)
    return sy, ay


def _sym_norm(X):
    return tc.norm(X)


def _vec_norm(X):
    return np.sqrt(np.sum(np.asarray(X) ** 2, axis=0))


def shrink(driving, norm, threshold, eta):
    """Minimiser of ``threshold |r| + eta/2 |r|^2 - driving . r``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norm > threshold, 1.0 - threshold / norm, 0.0)
    factor = np.where(np.isfinite(factor), factor, 0.0)
    return factor * driving / eta


def inclusion_residual(driving, rate, threshold, eta, norm):
    """Pointwise distance of ``driving`` from the subdifferential at ``rate``."""
    nr = norm(rate)
    nd = norm(driving)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(nr > 0.0, rate / np.where(nr > 0.0, nr, 1.0), 0.0)
    thr = np.where(np.isfinite(threshold), threshold, 0.0)
    active = norm(driving - eta * rate - thr * unit)
    locked = np.maximum(nd - threshold, 0.0)
    return np.where(nr > 0.0, active, locked)


def prox_rates(alpha_prev, chi_prev, driving_P, driving_alpha, dp: DissipationParams,
               extra_eta_alpha=0.0, extra_eta_P=0.0):
    """Solve the pointwise flow-rule inclusions in closed form.

    Returns ``(rate_P, rate_alpha, certificate)`` where the certificate is
    the largest inclusion residual.  ``extra_eta_alpha`` adds to the
    internal-variable viscosity (used to treat a quadratic term of the
    step implicitly); ``extra_eta_P`` does the same for the inelastic
    strain.  Both may be pointwise arrays.
    """
    driving_P = np.asarray(driving_P, dtype=float)
    driving_alpha = np.asarray(driving_alpha, dtype=float)
    sy, ay = thresholds(alpha_prev, chi_prev, dp)
    eta_a = dp.eta_alpha + extra_eta_alpha
    eta_p = dp.eta_p + extra_eta_P
    rP = shrink(driving_P, _sym_norm(driving_P), sy, eta_p)
    ra = shrink(driving_alpha, _vec_norm(driving_alpha), ay, eta_a)
    cert = max(
        float(np.max(inclusion_residual(driving_P, rP, sy, eta_p, _sym_norm), initial=0.0)),
        float(np.max(inclusion_residual(driving_alpha, ra, ay, eta_a, _vec_norm), initial=0.0)),
    )
    return rP, ra, cert


def zeta(alpha_prev, chi_prev, rate_P, rate_alpha, dp: DissipationParams):
    """Dissipation potential, pointwise."""
    sy, ay = thresholds(alpha_prev, chi_prev, dp)
    nP, na = _sym_norm(rate_P), _vec_norm(rate_alpha)
    return (_thr_times(sy, nP) + 0.5 * dp.eta_p * nP ** 2
            + _thr_times(ay, na) + 0.5 * dp.eta_alpha * na ** 2)


def dissipation_rate_xi(alpha_prev, chi_prev, rate_P, rate_alpha, dp: DissipationParams):
    """Dissipation rate: subgradient of zeta paired with the rate, pointwise."""
    sy, ay = thresholds(alpha_prev, chi_prev, dp)
    nP, na = _sym_norm(rate_P), _vec_norm(rate_alpha)
    return (_thr_times(sy, nP) + dp.eta_p * nP ** 2
            + _thr_times(ay, na) + dp.eta_alpha * na ** 2)


def _thr_times(thr, n):
    # an infinite threshold with zero rate contributes nothing
    safe = np.where(n > 0.0, n, 0.0)
    with np.errstate(invalid="ignore"):
        return np.where(n > 0.0, thr * safe, 0.0)


ALPHA_RANGE = (-0.05, 1.05)


class AlphaRangeWarning(UserWarning):
    """Internal variable left the interval the model keeps it in."""


def check_alpha_range(alpha, bounds=ALPHA_RANGE) -> bool:
    """Warn (and return False) if any internal variable leaves ``bounds``.

    Nothing is clamped: the energy keeps the variables in ``[0, 1]`` on its
    own, so an excursion points at a too-large step or bad data.
    """
    a = np.asarray(alpha, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    if lo < bounds[0] or hi > bounds[1]:
        warnings.warn(f"internal variable range [{lo:.4g}, {hi:.4g}] leaves "
                      f"[{bounds[0]}, {bounds[1]}]", AlphaRangeWarning, stacklevel=2)
        return False
    return True


def mobility(alpha, chi, mp: MobilityParams):
    """Scalar isotropic mobility ``m0 + m1 a_1`` clamped below at ``m_min``."""
    a1 = np.asarray(alpha, dtype=float)[0]
    return np.maximum(mp.m0 + mp.m1 * a1, mp.m_min)
