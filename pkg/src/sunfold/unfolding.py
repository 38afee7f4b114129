"""Stochastic unfolding, folding, recovery operators and two-scale diagnostics.

Two-scale targets V(w, x) are ``TwoScaleFunction`` objects: callables that
map points of shape (npts, d) to values of shape (m, npts, n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import (
    PERIODIC,
    Grid,
    divergence_array,
    gradient_array,
    gradient_matrix,
    quadrature_points,
)
from .probability import (
    ProbabilitySpace,
    RandomField,
    RandomVariable,
    hderiv_array,
    orbit_average_array,
)


class SolverError(RuntimeError):
    """Iterative solver did not reach its tolerance."""


class IdentityError(AssertionError):
    """Two evaluation routes of an exact identity disagree."""


@dataclass(frozen=True)
class TwoScaleFunction:
    """V(w, x) on Omega x R^d."""

    space: ProbabilitySpace
    evaluate: Callable
    components: int = 1

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        v = np.asarray(self.evaluate(x), float)
        if v.ndim == 2:
            v = v[..., None]
        v = np.broadcast_to(v, (self.space.m, x.shape[0], v.shape[-1]))
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite two-scale values")
        return v

    @classmethod
    def deterministic(cls, space, U, components=1):
        def ev(x):
            v = np.asarray(U(x), float)
            v = v.reshape(x.shape[0], -1)
            return np.broadcast_to(v[None], (space.m,) + v.shape)

        return cls(space, ev, components)

    @classmethod
    def separable(cls, phi: RandomVariable, eta: Callable):
        """phi(w) * eta(x) with scalar eta."""

        def ev(x):
            e = np.asarray(eta(x), float).reshape(-1)
            return phi.values[:, None, :] * e[None, :, None]

        return cls(phi.space, ev, phi.components)

    @classmethod
    def zero(cls, space, components=1):
        return cls(space, lambda x: np.zeros((space.m, x.shape[0], components)), components)

    def __add__(self, other):
        return TwoScaleFunction(self.space, lambda x: self(x) + other(x), self.components)


def _coords(grid):
    return grid.coordinates()


def _check_periodic_compat(space: ProbabilitySpace, grid: Grid):
    for i, n in enumerate(grid.shape):
        if not np.array_equal(space.shift_perm(np.eye(space.d, dtype=int)[i] * n), np.arange(space.m)):
            raise ValueError("periodic window is not compatible with the period of the shift action")


def _check(space, grid):
    if space.d != grid.d:
        raise ValueError("incompatible dimensions of grid and probability space")


def unfold_values(space, grid, values, inverse=False):
    """out[w, s] = values[T_{-y_s} w, s] (or T_{+y_s} for the inverse)."""
    _check(space, grid)
    coords = _coords(grid)
    perms = space.site_perms(-coords if not inverse else coords)  # (S, m)
    flat = values.reshape(space.m, grid.size, -1)
    out = np.take_along_axis(flat, perms.T[:, :, None], axis=0)
    return out.reshape(values.shape)


def unfold(u: RandomField) -> RandomField:
    """(T~ u)(w, x) = u(T_{-x/eps} w, x)."""
    return u.with_values(unfold_values(u.space, u.grid, u.values))


def fold_lattice(v: RandomField) -> RandomField:
    """Inverse of ``unfold`` on lattice random fields."""
    return v.with_values(unfold_values(v.space, v.grid, v.values, inverse=True))


def cell_average(V: TwoScaleFunction, grid: Grid, order=2):
    """pi_eps V per sample: array (m, *shape, n)."""
    pts, w = quadrature_points(grid, order)
    S, q, d = pts.shape
    vals = V(pts.reshape(-1, d)).reshape(V.space.m, S, q, -1)
    avg = np.einsum("msqn,q->msn", vals, w)
    return avg.reshape((V.space.m,) + grid.shape + (-1,))


def fold(V, grid: Grid = None, order=2) -> RandomField:
    """F_eps = T~^{-1} o pi_eps for a two-scale function or a lattice field."""
    if isinstance(V, RandomField):
        return fold_lattice(V)
    avg = cell_average(V, grid, order)
    return fold_lattice(RandomField(V.space, grid, avg))


def evaluate_unfolded(u: RandomField, points):
    """T_eps u at continuum points, shape (m, npts, n)."""
    from .lattice import floor_index

    j = floor_index(u.grid, points)
    v = unfold(u).values
    return v[(slice(None),) + tuple(j.T)]


def random_gradient(u: RandomField, periodic=False):
    """Discrete gradient per sample; shape (m, *shape, n, d)."""
    return gradient_array(u.values, u.grid.epsilon, u.grid.d, 1, periodic)


def commutator_check(u: RandomField, periodic=False) -> float:
    """Max-abs residual of T~grad u - grad T~u - D T~u / eps - (D_i grad_i) T~u."""
    space, grid = u.space, u.grid
    _check(space, grid)
    if periodic:
        _check_periodic_compat(space, grid)
    eps, d = grid.epsilon, grid.d
    v = unfold_values(space, grid, u.values)
    lhs = unfold_values(space, grid, random_gradient(u, periodic))
    grad_v = gradient_array(v, eps, d, 1, periodic)
    Dv = hderiv_array(space, v)
    mixed = np.stack(
        [hderiv_array(space, grad_v[..., i])[..., i] for i in range(d)], axis=-1
    )
    res = lhs - grad_v - Dv / eps - mixed
    return float(np.max(np.abs(res))) if res.size else 0.0


def invariant_projection_field(u: RandomField) -> RandomField:
    """P_inv applied sitewise."""
    return u.with_values(orbit_average_array(u.space, u.values))


def pairing_unfolded(u: RandomField, V: TwoScaleFunction, order=2) -> float:
    """<T_eps u, V> in L^2(Omega x R^d) by per-cell quadrature."""
    grid = u.grid
    pts, w = quadrature_points(grid, order)
    S, q, d = pts.shape
    vals = V(pts.reshape(-1, d)).reshape(u.space.m, S, q, -1)
    Tu = unfold(u).flat()
    per = np.einsum("msn,msqn,q->m", Tu, vals, w) * grid.cell_volume
    return float(u.space.weights @ per)


def l2_norm_two_scale(V: TwoScaleFunction, grid: Grid, order=2) -> float:
    pts, w = quadrature_points(grid, order)
    S, q, d = pts.shape
    vals = V(pts.reshape(-1, d)).reshape(V.space.m, S, q, -1)
    per = np.einsum("msqn,q->m", vals**2, w) * grid.cell_volume
    return math.sqrt(float(V.space.weights @ per))


@dataclass(frozen=True)
class TwoScaleReport:
    epsilon: float
    strong_error: float
    weak_residuals: np.ndarray
    solver_iters: int = 0

    @property
    def weak_residual_max(self):
        return float(np.max(self.weak_residuals)) if self.weak_residuals.size else 0.0

    def record(self):
        return {
            "epsilon": self.epsilon,
            "strong_error": self.strong_error,
            "weak_residual_max": self.weak_residual_max,
            "solver_iters": int(self.solver_iters),
        }


def default_test_family(space: ProbabilitySpace, grid: Grid, n_profiles=3):
    """Orbit indicators and scalar potentials for phi; sine profiles for eta."""
    from .probability import scalar_pot_basis

    phis = [(space.orbit_labels == o).astype(float) for o in range(space.n_orbits)]
    if np.all(space.weights > 0):
        b = scalar_pot_basis(space)
        phis += [b[j][:, i] for j in range(b.shape[0]) for i in range(space.d)]
    lo, hi = grid.lower_corner(), grid.upper_corner()
    etas = []
    for k in range(1, n_profiles + 1):
        def eta(x, k=k):
            t = (x - lo) / (hi - lo)
            return np.prod(np.sin(np.pi * k * t), axis=1)

        etas.append(eta)
    return phis, etas


def two_scale_distance(
    u: RandomField,
    V: TwoScaleFunction,
    phis: Sequence[np.ndarray] = None,
    etas: Sequence[Callable] = None,
    order=2,
    solver_iters=0,
) -> TwoScaleReport:
    """Strong distance ||T_eps u - V|| and weak residuals over a test family.

    The target is integrated over the window cells; it is assumed to vanish
    outside the window.
    """
    space, grid = u.space, u.grid
    pts, w = quadrature_points(grid, order)
    S, q, d = pts.shape
    vals = V(pts.reshape(-1, d)).reshape(space.m, S, q, -1)
    Tu = unfold(u).flat()
    diff2 = np.einsum("msqn,q->m", (Tu[:, :, None, :] - vals) ** 2, w) * grid.cell_volume
    strong = math.sqrt(max(float(space.weights @ diff2), 0.0))

    if phis is None or etas is None:
        dp, de = default_test_family(space, grid)
        phis = dp if phis is None else phis
        etas = de if etas is None else etas
    res = []
    coords = grid.coordinates()
    perms = space.site_perms(coords)  # (S, m): T_{y_s} w
    site_pts = grid.points()
    qflat = pts.reshape(-1, d)
    for phi in phis:
        phi = np.asarray(phi, float).reshape(space.m)
        phi_ext = phi[perms.T]  # (m, S)
        for eta in etas:
            e_site = np.asarray(eta(site_pts), float).reshape(S)
            e_q = np.asarray(eta(qflat), float).reshape(S, q)
            lhs = np.einsum("msn,ms,s->mn", u.flat(), phi_ext, e_site) * grid.cell_volume
            rhs = np.einsum("msqn,m,sq,q->mn", vals, phi, e_q, w) * grid.cell_volume
            res.append(np.abs(space.weights @ lhs - space.weights @ rhs))
    weak = np.concatenate(res) if res else np.zeros(0)
    return TwoScaleReport(grid.epsilon, strong, weak, solver_iters)


def transform_energy(V: Callable, v: RandomField, tol=1e-12) -> float:
    """<sum_x V(T_{x/eps} w, v(w, x)) m_eps> checked against the unfolded order.

    ``V(samples, F)`` takes an integer sample array (K,) and values (K, n) and
    returns (K,) densities.
    """
    space, grid = v.space, v.grid
    m, S = space.m, grid.size
    vals = v.flat()
    perms = space.site_perms(grid.coordinates())  # (S, m)
    w_idx = perms.T.reshape(-1)  # T_{y_s} w, row-major over (w, s)
    direct = np.asarray(V(w_idx, vals.reshape(m * S, -1)), float).reshape(m, S)
    unf = unfold_values(space, grid, v.values).reshape(m * S, -1)
    own = np.repeat(np.arange(m), S)
    unfolded = np.asarray(V(own, unf), float).reshape(m, S)
    if not (np.all(np.isfinite(direct)) and np.all(np.isfinite(unfolded))):
        raise ValueError("non-finite integrand values")
    vol = grid.cell_volume
    a = math.fsum((space.weights[:, None] * direct * vol).ravel())
    b = math.fsum((space.weights[:, None] * unfolded * vol).ravel())
    if abs(a - b) > tol * max(1.0, abs(a)):
        raise IdentityError(f"transformation formula mismatch {a!r} vs {b!r}")
    return a


# ---------------------------------------------------------------- recovery


def _cg_solve(A, rhs, tol=1e-10, maxiter=None):
    n = A.shape[0]
    maxiter = maxiter or 10 * n
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    nb = np.linalg.norm(rhs)
    if nb == 0:
        return np.zeros_like(rhs), 0
    x, info = spla.cg(A, rhs, rtol=tol, atol=0.0, maxiter=maxiter, callback=count)
    if info != 0:
        raise SolverError(f"CG stopped after {iters} iterations (info={info}, n={n})")
    return x, iters


def resolvent_matrix(grid: Grid, shift, periodic=False):
    """shift * I + grad^* grad on all window sites."""
    G = gradient_matrix(grid, periodic)
    return (shift * sp.identity(grid.size) + G.T @ G).tocsr()


def _resolvent_solve(grid, shift, rhs, periodic, tol):
    """Solve per (sample, component); rhs shape (m, *shape, n)."""
    A = resolvent_matrix(grid, shift, periodic)
    m, n = rhs.shape[0], rhs.shape[-1]
    flat = rhs.reshape(m, grid.size, n)
    out = np.zeros_like(flat)
    iters = 0
    for w in range(m):
        for c in range(n):
            out[w, :, c], it = _cg_solve(A, flat[w, :, c], tol)
            iters = max(iters, it)
    return out.reshape(rhs.shape), iters


@dataclass(frozen=True)
class RecoveryResult:
    field: RandomField
    solver_iters: int


def recovery_gradient(
    chi: TwoScaleFunction, grid: Grid, gamma=0.0, alpha=None, periodic=False, tol=1e-10
) -> RecoveryResult:
    """Solve eps^-alpha u + grad^* grad u = grad^*(eps^-gamma F_eps chi) per sample.

    ``chi`` carries n*d components (direction index fastest).  Then
    eps^gamma grad u approximates chi while u itself becomes small.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    alpha = gamma + 1.0 if alpha is None else float(alpha)
    if not 2 * gamma < alpha < 2:
        raise ValueError("alpha must satisfy 2*gamma < alpha < 2")
    space, eps, d = chi.space, grid.epsilon, grid.d
    if chi.components % d:
        raise ValueError("chi needs n*d components")
    Fchi = fold(chi, grid).values
    n = chi.components // d
    Fchi = Fchi.reshape((space.m,) + grid.shape + (n, d))
    rhs = eps ** (-gamma) * divergence_array(Fchi, eps, d, 1, periodic)
    u, iters = _resolvent_solve(grid, eps ** (-alpha), rhs, periodic, tol)
    return RecoveryResult(RandomField(space, grid, u), iters)


def recovery_macroscopic(
    U: TwoScaleFunction, grid: Grid, gamma=0.0, alpha=None, periodic=False, tol=1e-10
) -> RecoveryResult:
    """F_eps U for gamma = 0, otherwise the smoothed fold with 0 < alpha < 2 gamma."""
    FU = fold(U, grid).values
    if gamma == 0:
        return RecoveryResult(RandomField(U.space, grid, FU), 0)
    alpha = gamma if alpha is None else float(alpha)
    if not 0 < alpha < 2 * gamma:
        raise ValueError("alpha must satisfy 0 < alpha < 2*gamma")
    eps = grid.epsilon
    u, iters = _resolvent_solve(grid, eps ** (-alpha), eps ** (-alpha) * FU, periodic, tol)
    return RecoveryResult(RandomField(U.space, grid, u), iters)


def cutoff_profile(grid: Grid, lower, upper, delta):
    """Lipschitz cut-off: 0 outside O, 1 at distance >= delta from the boundary."""
    x = grid.points()
    lower = np.atleast_1d(lower)
    upper = np.atleast_1d(upper)
    dist = np.min(np.minimum(x - lower, upper - x), axis=1)
    eta = np.clip(dist / delta, 0.0, 1.0)
    eta = eta * grid.domain_mask.ravel()
    return eta.reshape(grid.shape)


def recovery_pair(
    U: TwoScaleFunction,
    chi: TwoScaleFunction,
    grid: Grid,
    gamma=0.0,
    domain=None,
    delta=None,
    periodic=False,
    tol=1e-10,
) -> RecoveryResult:
    """Joint recovery sequence for (U, chi).

    Whole space: F^gamma U + G^gamma chi.  With ``domain=(lower, upper)`` the
    result is cut off to O; for gamma = 0 only the corrector part is cut off
    (U must vanish near the boundary), for gamma > 0 the whole sum is, with
    delta = eps^(gamma/2).  For gamma = 0 the default delta is eps^(1/2).
    """
    parts = []
    iters = 0
    if U is not None:
        r = recovery_macroscopic(U, grid, gamma, periodic=periodic, tol=tol)
        parts.append(r.field.values)
        iters = max(iters, r.solver_iters)
    if chi is not None:
        r = recovery_gradient(chi, grid, gamma, periodic=periodic, tol=tol)
        g = r.field.values
        iters = max(iters, r.solver_iters)
    else:
        g = None
    space = (U or chi).space
    shape = (space.m,) + grid.shape
    mac = parts[0] if parts else None
    if domain is None:
        total = (0 if mac is None else mac) + (0 if g is None else g)
        return RecoveryResult(RandomField(space, grid, np.broadcast_to(total, shape + (np.shape(total)[-1],))), iters)
    lower, upper = domain
    eps = grid.epsilon
    if delta is None:
        delta = eps ** (gamma / 2) if gamma > 0 else eps ** 0.5
    eta = cutoff_profile(grid, lower, upper, delta)[None, ..., None]
    if gamma == 0:
        total = 0.0
        if mac is not None:
            total = mac * grid.domain_mask[None, ..., None]
        if g is not None:
            total = total + eta * g
    else:
        total = eta * ((0 if mac is None else mac) + (0 if g is None else g))
    return RecoveryResult(RandomField(space, grid, total), iters)


def dirichlet_recovery(U: TwoScaleFunction, chi: TwoScaleFunction, grid: Grid, tol=1e-10) -> RecoveryResult:
    """p = 2 alternative to the cut-off: solve grad^* grad u = grad^*(grad F U + F chi)
    on the domain sites with zero values elsewhere."""
    space, eps, d = (U or chi).space, grid.epsilon, grid.d
    mask = grid.domain_mask
    G = gradient_matrix(grid, False, mask)
    A = (G.T @ G).tocsr()
    target = 0.0
    n = None
    if U is not None:
        FU = fold(U, grid).values
        n = FU.shape[-1]
        target = gradient_array(FU, eps, d, 1, False)
    if chi is not None:
        Fchi = fold(chi, grid).values
        n = Fchi.shape[-1] // d
        target = target + Fchi.reshape((space.m,) + grid.shape + (n, d))
    out = np.zeros((space.m, grid.size, n))
    iters = 0
    tflat = np.broadcast_to(target, (space.m,) + grid.shape + (n, d)).reshape(space.m, grid.size, n, d)
    for w in range(space.m):
        for c in range(n):
            rhs = G.T @ tflat[w, :, c, :].reshape(-1)
            x, it = _cg_solve(A, rhs, tol)
            out[w, mask.ravel(), c] = x
            iters = max(iters, it)
    return RecoveryResult(RandomField(space, grid, out.reshape((space.m,) + grid.shape + (n,))), iters)
