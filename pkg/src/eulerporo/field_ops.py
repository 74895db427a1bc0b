"""Collocated cell-centred grid with one ghost layer and its discrete operators.

Fields are numpy arrays whose leading axes index components and whose
trailing ``d`` axes index cells *including* the ghost layer, so a 2-D
symmetric-tensor field on an ``n1 x n2`` grid has shape ``(3, n1+2, n2+2)``.
Operators read ghosts and write interior values only; ghosts of their output
are zero until :func:`apply_boundary` fills them.

Central first differences are used throughout.  With ghosts filled by
reflection the pair (``grad``, ``div``) satisfies summation by parts under
the cell-sum inner product, and ``laplacian`` is literally ``div`` of
``grad``, which is what lets the energy audit reproduce the continuous
cancellations.  Scalar diffusion uses the compact two-point flux stencil
(:func:`face_gradient`, :func:`flux_divergence`) so water content is
conserved cell by cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse

from . import tensor_core as tc

NEUMANN = "neumann"
WALL = "wall"
FLUX = "flux"
PERIODIC = "periodic"
GRADIENT = "gradient"
_KINDS = (NEUMANN, WALL, FLUX, PERIODIC, GRADIENT)


@dataclass(frozen=True)
class Grid:
    """Box ``[0, L1] (x [0, L2])`` split into ``n`` cells per axis."""

    n: tuple
    L: tuple
    periodic: bool = False

    def __post_init__(self):
        n = tuple(int(k) for k in np.atleast_1d(self.n))
        L = tuple(float(x) for x in np.atleast_1d(self.L))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "L", L)
        tc.check_dim(len(n))
        if len(L) != len(n):
            raise ValueError("n and L must have the same length")
        if min(n) < 4:
            raise ValueError(f"need at least 4 cells per axis, got {n}")
        if min(L) <= 0.0:
            raise ValueError("box lengths must be positive")

    @cached_property
    def d(self) -> int:
        return len(self.n)

    @cached_property
    def h(self) -> tuple:
        return tuple(L / n for L, n in zip(self.L, self.n))

    @cached_property
    def shape(self) -> tuple:
        """Padded cell shape (with ghosts)."""
        return tuple(k + 2 for k in self.n)

    @cached_property
    def inner(self) -> tuple:
        return (slice(1, -1),) * self.d

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def ncells(self) -> int:
        return int(np.prod(self.n))

    def face_area(self, axis: int) -> float:
        return float(np.prod([h for j, h in enumerate(self.h) if j != axis]))

    @cached_property
    def sides(self):
        """Boundary sides as ``(axis, side)`` with side 0 = low, 1 = high."""
        return [(a, s) for a in range(self.d) for s in (0, 1)]

    def zeros(self, *ncomp) -> np.ndarray:
        return np.zeros(tuple(ncomp) + self.shape)

    def interior(self, f: np.ndarray) -> np.ndarray:
        return f[(Ellipsis,) + self.inner]

    def pad(self, interior: np.ndarray) -> np.ndarray:
        """Embed interior values into a ghosted array (ghosts zero)."""
        interior = np.asarray(interior, dtype=float)
        lead = interior.shape[: interior.ndim - self.d]
        out = np.zeros(lead + self.shape)
        out[(Ellipsis,) + self.inner] = interior
        return out

    def centers(self) -> np.ndarray:
        """Interior cell-centre coordinates, shape ``(d, *n)``."""
        axes = [(np.arange(k) + 0.5) * h for k, h in zip(self.n, self.h)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def padded_centers(self) -> np.ndarray:
        axes = [(np.arange(-1, k + 1) + 0.5) * h for k, h in zip(self.n, self.h)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def face_points(self, axis: int, side: int) -> np.ndarray:
        """Coordinates of the boundary face centres on one side, ``(d, *face)``."""
        axes = [(np.arange(k) + 0.5) * h for k, h in zip(self.n, self.h)]
        axes[axis] = np.array([0.0 if side == 0 else self.L[axis]])
        pts = np.stack(np.meshgrid(*axes, indexing="ij"))
        return np.take(pts, 0, axis=1 + axis)

    def face_shape(self, axis: int) -> tuple:
        return tuple(k for j, k in enumerate(self.n) if j != axis)


@dataclass
class BcSpec:
    """Boundary condition of one field.

    ``wall`` is the Navier-slip wall for velocities (zero normal velocity,
    tangential traction balanced by drag ``gamma`` and load ``g_t``);
    ``flux`` prescribes the inward flux ``h`` of a potential through the
    mobility; ``neumann`` is the homogeneous Neumann condition; ``gradient``
    is the induced condition on the gradient of a Neumann field.
    """

    kind: str
    gamma: float = 0.0
    g_t: object = 0.0
    h: object = 0.0
    mobility: object = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown boundary kind {self.kind!r}")


def _side_index(grid: Grid, lead: int, axis: int, side: int, ghost: bool):
    idx = [slice(None)] * (lead + grid.d)
    if ghost:
        idx[lead + axis] = 0 if side == 0 else -1
    else:
        idx[lead + axis] = 1 if side == 0 else -2
    return tuple(idx)


def side_trace(f: np.ndarray, grid: Grid, axis: int, side: int, ghost=False):
    """Values of the first interior (or ghost) layer on a side, interior part only."""
    lead = f.ndim - grid.d
    g = f[_side_index(grid, lead, axis, side, ghost)]
    inner = tuple(slice(1, -1) for j in range(grid.d) if j != axis)
    return g[(Ellipsis,) + inner]


def _side_data(value, grid: Grid, axis: int, side: int):
    """Boundary data given as scalar or as a per-side list of face arrays."""
    if value is None:
        return 0.0
    if isinstance(value, (list, tuple)):
        return np.asarray(value[2 * axis + side], dtype=float)
    return value


def fill_parity(f: np.ndarray, grid: Grid, parity: np.ndarray) -> np.ndarray:
    """Reflect interior values into ghosts with per-(component, axis) sign.

    ``parity`` has shape ``lead_shape + (d,)`` with entries +1 (even) or -1 (odd).
    """
    lead = f.ndim - grid.d
    parity = np.asarray(parity, dtype=float)
    for axis in range(grid.d):
        sgn = parity[..., axis].reshape(parity.shape[:-1] + (1,) * (grid.d - 1))
        for side in (0, 1):
            gi = _side_index(grid, lead, axis, side, True)
            ii = _side_index(grid, lead, axis, side, False)
            f[gi] = sgn * f[ii]
    return f


def fill_periodic(f: np.ndarray, grid: Grid) -> np.ndarray:
    lead = f.ndim - grid.d
    for axis in range(grid.d):
        for side in (0, 1):
            gi = _side_index(grid, lead, axis, side, True)
            src = [slice(None)] * f.ndim
            src[lead + axis] = -2 if side == 0 else 1
            f[gi] = f[tuple(src)]
    return f


def wall_parity(d: int) -> np.ndarray:
    """Velocity parity: normal component odd, tangential components even."""
    return np.where(np.eye(d, dtype=bool), -1.0, 1.0)


def apply_boundary(f: np.ndarray, spec, grid: Grid) -> np.ndarray:
    """Fill the ghost layer of ``f`` in place according to ``spec``.

    ``spec`` is a :class:`BcSpec` or a bare kind string.  Periodic grids
    always wrap, whatever the declared kind.
    """
    if isinstance(spec, str):
        spec = BcSpec(spec)
    lead = f.ndim - grid.d
    if grid.periodic or spec.kind == PERIODIC:
        return fill_periodic(f, grid)
    if spec.kind == NEUMANN:
        return fill_parity(f, grid, np.ones(f.shape[:lead] + (grid.d,)))
    if spec.kind == WALL:
        if lead != 1 or f.shape[0] != grid.d:
            raise ValueError("wall condition applies to a (d, ...) velocity field")
        return fill_parity(f, grid, wall_parity(grid.d))
    if spec.kind == GRADIENT:
        if lead < 1 or f.shape[lead - 1] != grid.d:
            raise ValueError("gradient condition applies to (..., d, cells) blocks")
        par = np.ones(f.shape[:lead] + (grid.d,))
        par[..., np.arange(grid.d), np.arange(grid.d)] = -1.0
        return fill_parity(f, grid, par)
    if spec.kind == FLUX:
        if lead != 0 and f.shape[:lead] != (1,):
            raise ValueError("flux condition applies to scalar fields")
        fill_parity(f, grid, np.ones(f.shape[:lead] + (grid.d,)))
        for axis, side in grid.sides:
            hval = _side_data(spec.h, grid, axis, side)
            if spec.mobility is None:
                mob = 1.0
            else:
                mob = side_trace(np.asarray(spec.mobility), grid, axis, side)
            idx = [slice(None)] * f.ndim
            for j in range(grid.d):
                idx[lead + j] = slice(1, -1)
            idx[lead + axis] = 0 if side == 0 else -1
            f[tuple(idx)] += grid.h[axis] * hval / mob
        return f
    raise ValueError(f"unsupported boundary kind {spec.kind!r}")


def _shift(f: np.ndarray, grid: Grid, axis: int, k: int) -> np.ndarray:
    """Interior-shaped view of ``f`` shifted by ``k`` cells along ``axis``."""
    lead = f.ndim - grid.d
    idx = [slice(None)] * f.ndim
    for j in range(grid.d):
        n = grid.n[j]
        if j == axis:
            idx[lead + j] = slice(1 + k, 1 + k + n)
        else:
            idx[lead + j] = slice(1, 1 + n)
    return f[tuple(idx)]


def grad(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Central gradient of every component: ``(ncomp, *P) -> (ncomp, d, *P)``."""
    lead = f.shape[: f.ndim - grid.d]
    out = np.zeros(lead + (grid.d,) + grid.shape)
    for a in range(grid.d):
        out[(Ellipsis, a) + grid.inner] = (
            _shift(f, grid, a, 1) - _shift(f, grid, a, -1)) / (2.0 * grid.h[a])
    return out


def div_block(G: np.ndarray, grid: Grid) -> np.ndarray:
    """Central divergence over the derivative axis: ``(..., d, *P) -> (..., *P)``."""
    lead = G.shape[: G.ndim - grid.d - 1]
    out = np.zeros(lead + grid.shape)
    acc = out[(Ellipsis,) + grid.inner]
    for a in range(grid.d):
        Ga = G[(Ellipsis, a) + (slice(None),) * grid.d]
        acc += (_shift(Ga, grid, a, 1) - _shift(Ga, grid, a, -1)) / (2.0 * grid.h[a])
    return out


def div_vec(V: np.ndarray, grid: Grid) -> np.ndarray:
    return div_block(V, grid)


def div_tensor(T: np.ndarray, grid: Grid) -> np.ndarray:
    """Row-wise divergence of a matrix field ``(d, d, *P) -> (d, *P)``."""
    return div_block(T, grid)


def symgrad(v: np.ndarray, grid: Grid) -> np.ndarray:
    """Symmetric velocity gradient E(v), packed."""
    return tc.sym(grad(v, grid))


def laplacian(f: np.ndarray, grid: Grid, kind: str = NEUMANN) -> np.ndarray:
    """``div(grad f)`` with the gradient's ghosts induced by the field's condition."""
    g = grad(f, grid)
    if grid.periodic or kind == PERIODIC:
        fill_periodic(g, grid)
    elif kind == NEUMANN:
        apply_boundary(g, GRADIENT, grid)
    else:
        raise ValueError(f"laplacian needs a neumann or periodic field, got {kind!r}")
    return div_block(g, grid)


def advect(v: np.ndarray, f: np.ndarray, grid: Grid, scheme: str = "upwind") -> np.ndarray:
    """``(v . grad) f`` for every component of ``f``.

    ``upwind`` takes one-sided differences from the side the flow comes
    from; ``central`` uses the central stencil.  Both read ghosts of ``f``.
    """
    if scheme not in ("upwind", "central"):
        raise ValueError(f"unknown advection scheme {scheme!r}")
    lead = f.shape[: f.ndim - grid.d]
    out = np.zeros(lead + grid.shape)
    acc = out[(Ellipsis,) + grid.inner]
    nl = len(lead)
    for a in range(grid.d):
        va = v[(a,) + grid.inner]
        if not va.any():
            continue
        idx = [slice(None)] * f.ndim
        for j in range(grid.d):
            if j != a:
                idx[nl + j] = slice(1, -1)
        # one difference per face, shared by the two one-sided stencils
        D = np.diff(f[tuple(idx)], axis=nl + a) / grid.h[a]
        lo = [slice(None)] * D.ndim
        hi = [slice(None)] * D.ndim
        lo[nl + a] = slice(0, -1)
        hi[nl + a] = slice(1, None)
        back, fwd = D[tuple(lo)], D[tuple(hi)]
        if scheme == "upwind":
            acc += np.where(va > 0.0, va * back, va * fwd)
        else:
            acc += va * 0.5 * (back + fwd)
    return out


def convective_derivative(f_k, f_km1, v_k, tau: float, grid: Grid, scheme: str = "upwind"):
    """Discrete material derivative ``(f_k - f_km1)/tau + (v_k . grad) f_k``."""
    if not tau > 0.0:
        raise ValueError(f"time step must be positive, got {tau}")
    return (f_k - f_km1) / tau + advect(v_k, f_k, grid, scheme)


def _neighbours(grid: Grid, axis: int):
    """Flat interior indices of every cell and of its low and high neighbours.

    Off-grid neighbours map back onto the boundary cell itself (reflection)
    or wrap around on periodic grids.  The last two arrays flag the cells
    whose low or high neighbour is such a reflection.
    """
    idx = np.arange(grid.ncells).reshape(grid.n)
    n = grid.n[axis]
    if grid.periodic:
        lo, hi = np.roll(idx, 1, axis=axis), np.roll(idx, -1, axis=axis)
        lo_ref = hi_ref = np.zeros(grid.ncells, dtype=bool)
    else:
        take_lo = np.clip(np.arange(n) - 1, 0, n - 1)
        take_hi = np.clip(np.arange(n) + 1, 0, n - 1)
        lo, hi = np.take(idx, take_lo, axis=axis), np.take(idx, take_hi, axis=axis)
        pos = np.indices(grid.n)[axis].ravel()
        lo_ref, hi_ref = pos == 0, pos == n - 1
    return idx.ravel(), lo.ravel(), hi.ravel(), lo_ref, hi_ref


def advection_matrix(v: np.ndarray, grid: Grid, scheme: str = "upwind", parity=None):
    """Sparse matrix of ``f -> (v . grad) f`` on interior cells of a scalar field.

    Ghosts are the reflection of the interior with sign ``parity[a]`` across
    faces normal to axis ``a`` (default even) or the periodic wrap, so the
    product with ``f.ravel()`` agrees with :func:`advect` on a field whose
    ghosts were filled the same way.
    """
    if scheme not in ("upwind", "central"):
        raise ValueError(f"unknown advection scheme {scheme!r}")
    parity = np.ones(grid.d) if parity is None else np.asarray(parity, dtype=float)
    rows, cols, vals = [], [], []
    for a in range(grid.d):
        va = np.ravel(v[(a,) + grid.inner]) / grid.h[a]
        if not va.any():
            continue
        me, lo, hi, lo_ref, hi_ref = _neighbours(grid, a)
        s_lo = np.where(lo_ref, parity[a], 1.0)
        s_hi = np.where(hi_ref, parity[a], 1.0)
        if scheme == "upwind":
            wp, wm = np.maximum(va, 0.0), np.minimum(va, 0.0)
            rows += [me, me, me]
            cols += [me, lo, hi]
            vals += [wp - wm, -wp * s_lo, wm * s_hi]
        else:
            rows += [me, me]
            cols += [hi, lo]
            vals += [0.5 * va * s_hi, -0.5 * va * s_lo]
    N = grid.ncells
    if not rows:
        return sparse.csr_matrix((N, N))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N))


def probe_matrix(apply, n_in: int, grid: Grid):
    """Assemble the sparse matrix of a local linear map by colour probing.

    ``apply`` takes a ghosted ``(n_in, *P)`` array with zero ghosts and
    returns a ghosted ``(n_out, *P)`` array; its interior output at a cell
    may depend only on input cells at most one step away per axis (after
    whatever ghost filling ``apply`` does itself).  Returns a CSR matrix on
    component-major flattened interior values.
    """
    N = grid.ncells
    pos = np.indices(grid.n).reshape(grid.d, N)
    ncol = []
    for a in range(grid.d):
        n = grid.n[a]
        m = 3
        if grid.periodic:
            # no two cells within one step of each other (mod n) may share a colour
            while n % m not in (0,) and n % m < 3:
                m += 1
        ncol.append(m)
    colour = pos % np.array(ncol)[:, None]
    nbrs = []
    for off in np.ndindex(*(3,) * grid.d):
        q = pos + (np.array(off) - 1)[:, None]
        for a in range(grid.d):
            q[a] = q[a] % grid.n[a] if grid.periodic else np.clip(q[a], 0, grid.n[a] - 1)
        nbrs.append(np.ravel_multi_index(tuple(q), grid.n))
    nbrs = np.array(nbrs)
    nbr_colour = colour[:, nbrs]
    rows, cols, vals = [], [], []
    for c in np.ndindex(*ncol):
        hit = np.all(nbr_colour == np.array(c)[:, None, None], axis=0)
        owner = np.full(N, -1)
        k_any = hit.any(axis=0)
        owner[k_any] = nbrs[np.argmax(hit, axis=0)[k_any], np.nonzero(k_any)[0]]
        seed = np.all(colour == np.array(c)[:, None], axis=0).astype(float).reshape(grid.n)
        for k in range(n_in):
            e = np.zeros((n_in,) + grid.shape)
            e[(k,) + grid.inner] = seed
            out = grid.interior(apply(e))
            out = out.reshape((-1, N))
            r_c, x = np.nonzero(out)
            if np.any(owner[x] < 0):
                raise ValueError("operator is not local to one cell per axis")
            rows.append(r_c * N + x)
            cols.append(k * N + owner[x])
            vals.append(out[r_c, x])
            n_out = out.shape[0]
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n_out * N, n_in * N))


def flux_matrix(face_coeff: Sequence[np.ndarray], grid: Grid):
    """Sparse matrix of ``f -> -flux_divergence(c * face_gradient f)`` with no boundary flux.

    ``face_coeff`` holds one face array per axis in the :func:`face_gradient`
    layout.  Boundary faces carry no flux except on periodic grids, where
    the last face closes the loop.  The matrix is symmetric and positive
    semidefinite for nonnegative coefficients.
    """
    rows, cols, vals = [], [], []
    idx = np.arange(grid.ncells).reshape(grid.n)
    for a in range(grid.d):
        n = grid.n[a]
        faces = np.arange(1, n + 1) if grid.periodic else np.arange(1, n)
        c = np.ravel(np.take(np.asarray(face_coeff[a]), faces, axis=a)) / grid.h[a] ** 2
        p = np.ravel(np.take(idx, faces - 1, axis=a))
        q = np.ravel(np.take(idx, faces % n, axis=a))
        rows += [p, q, p, q]
        cols += [p, q, q, p]
        vals += [c, c, -c, -c]
    N = grid.ncells
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N))


def face_gradient(f: np.ndarray, grid: Grid) -> list:
    """Two-point differences across every face, one array per axis.

    The array for axis ``a`` has ``n_a + 1`` entries along that axis
    (boundary faces included, read from ghosts) and interior extent along
    the others.
    """
    lead = f.ndim - grid.d
    out = []
    for a in range(grid.d):
        lo = [slice(None)] * f.ndim
        hi = [slice(None)] * f.ndim
        for j in range(grid.d):
            if j == a:
                lo[lead + j] = slice(0, grid.n[j] + 1)
                hi[lead + j] = slice(1, grid.n[j] + 2)
            else:
                lo[lead + j] = hi[lead + j] = slice(1, grid.n[j] + 1)
        out.append((f[tuple(hi)] - f[tuple(lo)]) / grid.h[a])
    return out


def face_average(f: np.ndarray, grid: Grid) -> list:
    """Arithmetic mean of the two cells sharing each face (same layout as face_gradient)."""
    lead = f.ndim - grid.d
    out = []
    for a in range(grid.d):
        lo = [slice(None)] * f.ndim
        hi = [slice(None)] * f.ndim
        for j in range(grid.d):
            if j == a:
                lo[lead + j] = slice(0, grid.n[j] + 1)
                hi[lead + j] = slice(1, grid.n[j] + 2)
            else:
                lo[lead + j] = hi[lead + j] = slice(1, grid.n[j] + 1)
        out.append(0.5 * (f[tuple(hi)] + f[tuple(lo)]))
    return out


def flux_divergence(F: Sequence[np.ndarray], grid: Grid) -> np.ndarray:
    """Cell divergence of face fluxes laid out as in :func:`face_gradient`."""
    lead = F[0].shape[: F[0].ndim - grid.d]
    out = np.zeros(lead + grid.shape)
    acc = out[(Ellipsis,) + grid.inner]
    for a, Fa in enumerate(F):
        k = Fa.ndim - grid.d + a
        hi = np.take(Fa, np.arange(1, grid.n[a] + 1), axis=k)
        lo = np.take(Fa, np.arange(0, grid.n[a]), axis=k)
        acc += (hi - lo) / grid.h[a]
    return out


def interior_faces(F: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Drop the two boundary faces of a face array (non-periodic grids)."""
    k = F.ndim - grid.d + axis
    return np.take(F, np.arange(1, grid.n[axis]), axis=k)


def integrate_domain(s: np.ndarray, grid: Grid) -> float:
    """Midpoint rule: sum over interior cells times the cell volume."""
    s = np.asarray(s, dtype=float)
    if s.shape[-grid.d:] == grid.shape:
        s = grid.interior(s)
    return float(np.sum(s) * grid.cell_volume)


def integrate_boundary(traces, grid: Grid) -> float:
    """Sum of face values times face measure.

    ``traces`` is a list with one entry per side in :attr:`Grid.sides`
    order, or a scalar meaning the same value on every face.
    """
    total = 0.0
    for k, (axis, side) in enumerate(grid.sides):
        if np.isscalar(traces):
            vals = np.full(grid.face_shape(axis), float(traces))
        else:
            vals = np.broadcast_to(np.asarray(traces[k], dtype=float), grid.face_shape(axis))
        total += float(np.sum(vals)) * grid.face_area(axis)
    return total


def fsum_domain(s: np.ndarray, grid: Grid) -> float:
    """Compensated, reverse-order cell sum; independent of :func:`integrate_domain`."""
    s = np.asarray(s, dtype=float)
    if s.shape[-grid.d:] == grid.shape:
        s = grid.interior(s)
    return math.fsum(np.ravel(s)[::-1].tolist()) * grid.cell_volume


def sbp_boundary_term(T: np.ndarray, u: np.ndarray, grid: Grid) -> float:
    """Boundary quadrature making ``<div T, u> + <T, grad u>`` an identity.

    ``T`` has shape ``(..., d, *P)`` (derivative axis second to last lead
    axis) and ``u`` shape ``(..., *P)``; both with ghosts filled.  Each face
    contributes the average of the two cross products of ghost and interior
    values, which is exactly what the central telescoping sum leaves over.
    """
    total = 0.0
    for axis, side in grid.sides:
        Ta = T[(Ellipsis, axis) + (slice(None),) * grid.d]
        tg = side_trace(Ta, grid, axis, side, ghost=True)
        ti = side_trace(Ta, grid, axis, side)
        ug = side_trace(u, grid, axis, side, ghost=True)
        ui = side_trace(u, grid, axis, side)
        sgn = 1.0 if side == 1 else -1.0
        total += sgn * 0.5 * float(np.sum(tg * ui + ti * ug)) * grid.face_area(axis)
    return total
