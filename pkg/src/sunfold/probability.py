"""Finite probability spaces with a commuting Z^d shift action.

Samples are indexed 0..m-1.  ``shifts[i]`` is the permutation implementing
T_{e_i}, i.e. ``T_{e_i} w = shifts[i][w]`` and ``phi(T_{e_i} w) = phi[shifts[i]]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .lattice import Grid


def compose(p, q):
    """Permutation of w -> p[q[w]]."""
    return p[q]


def perm_power(p, k):
    k = int(k)
    if k < 0:
        p, k = np.argsort(p), -k
    result = np.arange(p.size)
    base = p.copy()
    while k:
        if k & 1:
            result = base[result]
        base = base[base]
        k >>= 1
    return result


@dataclass(frozen=True, eq=False)
class ProbabilitySpace:
    """Weights P and commuting measure-preserving shift permutations."""

    weights: np.ndarray
    shifts: np.ndarray
    period: tuple = None
    samples: tuple = None

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        s = np.atleast_2d(np.asarray(self.shifts, int))
        if w.ndim != 1 or s.shape[1] != w.size:
            raise ValueError("shifts must have shape (d, m)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        ref = np.arange(w.size)
        for p in s:
            if not np.array_equal(np.sort(p), ref):
                raise ValueError("shift is not a bijection")
            if np.max(np.abs(w[p] - w)) > 1e-14:
                raise ValueError("shift does not preserve the weights")
        for i in range(len(s)):
            for j in range(i):
                if not np.array_equal(s[i][s[j]], s[j][s[i]]):
                    raise ValueError("shifts do not commute")
        w.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "shifts", s)
        if self.samples is None:
            object.__setattr__(self, "samples", tuple(range(w.size)))
        if self.period is not None:
            object.__setattr__(self, "period", tuple(int(n) for n in self.period))

    @property
    def m(self):
        return self.weights.size

    @property
    def d(self):
        return self.shifts.shape[0]

    @cached_property
    def inverse_shifts(self):
        return np.stack([np.argsort(p) for p in self.shifts])

    def shift_perm(self, y):
        """Permutation of T_y."""
        out = np.arange(self.m)
        for i, k in enumerate(np.atleast_1d(y)):
            out = perm_power(self.shifts[i], k)[out]
        return out

    def site_perms(self, coords):
        """Array (S, m) with row s equal to T_{coords[s]}."""
        coords = np.atleast_2d(np.asarray(coords, int))
        S = coords.shape[0]
        result = np.tile(np.arange(self.m), (S, 1))
        for i in range(self.d):
            c = coords[:, i]
            lo, hi = int(c.min()), int(c.max())
            table = np.empty((hi - lo + 1, self.m), int)
            table[0] = perm_power(self.shifts[i], lo)
            for k in range(1, hi - lo + 1):
                table[k] = self.shifts[i][table[k - 1]]
            result = np.take_along_axis(table[c - lo], result, axis=1)
        return result

    @cached_property
    def orbit_labels(self):
        labels = -np.ones(self.m, int)
        nxt = 0
        for start in range(self.m):
            if labels[start] >= 0:
                continue
            stack = [start]
            labels[start] = nxt
            while stack:
                w = stack.pop()
                for p in np.concatenate([self.shifts, self.inverse_shifts]):
                    v = p[w]
                    if labels[v] < 0:
                        labels[v] = nxt
                        stack.append(v)
            nxt += 1
        labels.setflags(write=False)
        return labels

    @property
    def n_orbits(self):
        return int(self.orbit_labels.max()) + 1

    @property
    def ergodic(self):
        mass = np.bincount(self.orbit_labels, weights=self.weights)
        return int(np.sum(mass > 0)) == 1

    def expectation(self, values):
        """Weighted mean over the sample axis (axis 0)."""
        return np.tensordot(self.weights, np.asarray(values, float), axes=(0, 0))

    def to_dict(self):
        return {
            "samples": list(self.samples),
            "weights": [float(x) for x in self.weights],
            "permutations": [[int(x) for x in p] for p in self.shifts],
            "period": None if self.period is None else list(self.period),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(
            np.asarray(data["weights"], float),
            np.asarray(data["permutations"], int),
            None if data.get("period") is None else tuple(data["period"]),
            tuple(data["samples"]),
        )


def make_torus_space(N) -> ProbabilitySpace:
    """Discrete torus Z^d / N Z^d with T_x w = w + x mod N and uniform weights."""
    N = tuple(int(n) for n in np.atleast_1d(N))
    if any(n < 1 for n in N):
        raise ValueError("torus periods must be positive")
    m = int(np.prod(N, dtype=np.int64))
    if m > 10**7:
        raise OverflowError("torus has too many samples")
    coords = np.indices(N).reshape(len(N), -1)
    shifts = []
    for i in range(len(N)):
        c = coords.copy()
        c[i] = (c[i] + 1) % N[i]
        shifts.append(np.ravel_multi_index(tuple(c), N))
    samples = tuple(tuple(int(x) for x in col) for col in coords.T)
    return ProbabilitySpace(np.full(m, 1.0 / m), np.asarray(shifts), N, samples)


def disjoint_union(a: ProbabilitySpace, b: ProbabilitySpace, weight_a=0.5):
    """Non-ergodic space made of two invariant pieces."""
    if a.d != b.d:
        raise ValueError("dimension mismatch")
    w = np.concatenate([weight_a * a.weights, (1 - weight_a) * b.weights])
    shifts = np.concatenate([a.shifts, b.shifts + a.m], axis=1)
    return ProbabilitySpace(w, shifts)


@dataclass(frozen=True, eq=False)
class RandomVariable:
    """Values over (sample, component)."""

    space: ProbabilitySpace
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.space.m:
            raise ValueError("one row per sample required")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite random variable")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def components(self):
        return self.values.shape[1]

    def expectation(self):
        return self.space.expectation(self.values)

    def inner(self, other):
        _check_space(self, other)
        return float(self.space.weights @ np.sum(self.values * other.values, axis=1))

    def norm(self, p=2):
        a = np.abs(self.values)
        if np.isinf(p):
            return float(a[self.space.weights > 0].max())
        return float((self.space.weights @ np.sum(a**p, axis=1)) ** (1.0 / p))


def _check_space(a, b):
    if a.space is not b.space:
        raise ValueError("random variables live on different spaces")


def make_iid_periodization(N, marginal_sampler, seed):
    """One i.i.d. realization on the N-torus, read as a stationary coefficient.

    The coefficient at sample w is the realization at torus site w, so the
    stationary extension phi(T_x w) traverses the periodized field.  This is a
    periodic approximation of the i.i.d. product space.
    """
    space = make_torus_space(N)
    rng = np.random.default_rng(seed)
    vals = np.asarray(marginal_sampler(rng, space.m), float)
    return space, RandomVariable(space, vals)


def hderiv_array(space, a):
    """D along the sample axis; appends a trailing axis of length d."""
    return np.stack([a[p] - a for p in space.shifts], axis=-1)


def hdiv_array(space, g):
    """D*, the adjoint of ``hderiv_array``."""
    out = np.zeros(g.shape[:-1])
    for i, q in enumerate(space.inverse_shifts):
        out += g[..., i][q] - g[..., i]
    return out


def horizontal_derivative(phi: RandomVariable) -> RandomVariable:
    """Component c*d + i holds D_i phi_c."""
    g = hderiv_array(phi.space, phi.values)
    return RandomVariable(phi.space, g.reshape(phi.space.m, -1))


def horizontal_divergence(psi: RandomVariable) -> RandomVariable:
    d = psi.space.d
    if psi.components % d:
        raise ValueError("component count must be a multiple of d")
    g = psi.values.reshape(psi.space.m, -1, d)
    return RandomVariable(psi.space, hdiv_array(psi.space, g))


def orbit_average_array(space, a):
    labels = space.orbit_labels
    w = space.weights
    mass = np.bincount(labels, weights=w)
    flat = a.reshape(a.shape[0], -1)
    sums = np.zeros((space.n_orbits, flat.shape[1]))
    np.add.at(sums, labels, w[:, None] * flat)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(mass[:, None] > 0, sums / np.where(mass > 0, mass, 1)[:, None], 0.0)
    # zero-weight orbits: plain average so the map stays idempotent
    for o in np.flatnonzero(mass == 0):
        means[o] = flat[labels == o].mean(axis=0)
    return means[labels].reshape(a.shape)


def project_invariant(phi: RandomVariable) -> RandomVariable:
    """Conditional expectation onto shift-invariant functions (orbit means)."""
    return RandomVariable(phi.space, orbit_average_array(phi.space, phi.values))


def derivative_matrix(space):
    """Dense matrix of D on scalars: row w*d + i gives phi(T_{e_i} w) - phi(w)."""
    m, d = space.m, space.d
    D = np.zeros((m * d, m))
    for i, p in enumerate(space.shifts):
        rows = np.arange(m) * d + i
        D[rows, p] += 1.0
        D[rows, np.arange(m)] -= 1.0
    return D


def scalar_pot_basis(space, method="svd", tol=1e-10):
    """Orthonormal basis of ran D for scalar fields, shape (r, m, d)."""
    w = space.weights
    if np.any(w <= 0):
        raise ValueError("degenerate weights: every sample needs positive mass")
    m, d = space.m, space.d
    sw = np.repeat(np.sqrt(w), d)
    M = sw[:, None] * derivative_matrix(space)
    if method == "svd":
        U, s, _ = np.linalg.svd(M, full_matrices=False)
        r = int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))
        Q = U[:, :r]
    elif method == "qr":
        Q, R, _ = sla.qr(M, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        r = int(np.sum(diag > tol * max(1.0, diag[0] if diag.size else 0.0)))
        Q = Q[:, :r]
    else:
        raise ValueError(f"unknown method {method!r}")
    basis = (Q / sw[:, None]).T.reshape(r, m, d)
    return basis


def pot_basis(space, components=1, method="svd"):
    """Orthonormal basis of L^2_pot(Omega)^n in the P-weighted inner product.

    Shape (r*n, m, n*d); component c*d + i of a vector holds direction i of
    the c-th field component.
    """
    b = scalar_pot_basis(space, method)
    r, m, d = b.shape
    n = int(components)
    out = np.zeros((r * n, m, n, d))
    for c in range(n):
        out[c * r:(c + 1) * r, :, c, :] = b
    return out.reshape(r * n, m, n * d)


@dataclass(frozen=True, eq=False)
class PotentialField:
    """chi in ran D together with a potential phi such that D phi = chi."""

    chi: RandomVariable
    phi: RandomVariable

    def __post_init__(self):
        g = horizontal_derivative(self.phi)
        res = np.max(np.abs(g.values - self.chi.values)) if g.values.size else 0.0
        if res > 1e-10:
            raise ValueError(f"chi is not D phi (residual {res:.3e})")

    @classmethod
    def from_potential(cls, phi: RandomVariable):
        return cls(horizontal_derivative(phi), phi)

    @classmethod
    def from_field(cls, chi: RandomVariable):
        """Recover a potential by least squares; fails if chi is not in ran D."""
        space = chi.space
        d = space.d
        n = chi.components // d
        D = derivative_matrix(space)
        X = chi.values.reshape(space.m, n, d).transpose(0, 2, 1).reshape(space.m * d, n)
        phi, *_ = np.linalg.lstsq(D, X, rcond=None)
        return cls(chi, RandomVariable(space, phi))


@dataclass(frozen=True, eq=False)
class RandomField:
    """Values over (sample, site, component) on a grid window."""

    space: ProbabilitySpace
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        want = (self.space.m,) + self.grid.shape
        if v.ndim == len(want):
            v = v[..., None]
        if v.shape[:-1] != want:
            raise ValueError(f"random field shape {v.shape} does not match {want}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite random field")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def components(self):
        return self.values.shape[-1]

    def flat(self):
        return self.values.reshape(self.space.m, self.grid.size, self.components)

    def with_values(self, values):
        return RandomField(self.space, self.grid, values)

    def inner(self, other):
        s = np.sum((self.values * other.values).reshape(self.space.m, -1), axis=1)
        return float(self.space.weights @ s * self.grid.cell_volume)

    def norm(self, p=2):
        a = np.abs(self.values).reshape(self.space.m, -1)
        if np.isinf(p):
            return float(a.max())
        return float((self.space.weights @ np.sum(a**p, axis=1) * self.grid.cell_volume) ** (1.0 / p))

    def mean(self):
        return self.space.expectation(self.values)


def stationary_extension(phi: RandomVariable, grid: Grid) -> RandomField:
    """Field (w, x) -> phi(T_{x/eps} w)."""
    if grid.d != phi.space.d:
        raise ValueError("grid and probability space dimensions differ")
    perms = phi.space.site_perms(grid.coordinates())  # (S, m)
    vals = phi.values[perms.T]  # (m, S, n)
    return RandomField(phi.space, grid, vals.reshape((phi.space.m,) + grid.shape + (-1,)))
