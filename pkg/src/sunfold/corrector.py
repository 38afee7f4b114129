"""Cell problems on the probability space and homogenized tensors.

Quadratic densities are V(w, G) = 1/2 A(w) G . G on strain vectors G of
length K.  K = k gives the elastic problem; K = 2k carries an extra internal
variable block that the corrector does not act on.  The homogenized tensor
satisfies V_hom(p) = 1/2 A_hom p . p.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize as so

from .graph import LatticeGraph, potential_strain_matrix
from .probability import (
    PotentialField,
    ProbabilitySpace,
    RandomVariable,
    pot_basis,
)


class CoercivityError(ValueError):
    """Integrand is not uniformly coercive."""


class OptimizerStall(RuntimeError):
    """Descent did not reach the first-order tolerance."""


@dataclass(frozen=True, eq=False)
class QuadraticIntegrand:
    space: ProbabilitySpace
    graph: LatticeGraph
    A: np.ndarray  # (m, K, K)
    coercivity: float = field(init=False)

    def __post_init__(self):
        A = np.asarray(self.A, float)
        if A.ndim == 2:
            A = np.broadcast_to(A, (self.space.m,) + A.shape)
        K = A.shape[-1]
        if A.shape != (self.space.m, K, K) or K not in (self.graph.k, 2 * self.graph.k):
            raise ValueError("A must have shape (m, K, K) with K = k or 2k")
        if np.max(np.abs(A - A.transpose(0, 2, 1))) > 1e-12 * max(1.0, np.abs(A).max()):
            raise ValueError("A must be symmetric")
        A = 0.5 * (A + A.transpose(0, 2, 1))
        c = float(np.min(np.linalg.eigvalsh(A)[:, 0]))
        if c <= 0:
            raise CoercivityError(f"smallest eigenvalue {c:.3e} is not positive")
        A = np.ascontiguousarray(A)
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "coercivity", c)

    @property
    def K(self):
        return self.A.shape[-1]

    def density(self, samples, G):
        return 0.5 * np.einsum("ni,nij,nj->n", G, self.A[samples], G)


@dataclass(frozen=True, eq=False)
class ScalarConvexIntegrand:
    """V(w, G) on strain vectors of length k, with optional gradient."""

    space: ProbabilitySpace
    graph: LatticeGraph
    V: Callable
    grad: Callable = None
    growth: tuple = (1.0, 2.0)

    @property
    def K(self):
        return self.graph.k

    def density(self, samples, G):
        return np.asarray(self.V(samples, G), float)


@dataclass
class CorrectorSolution:
    probe: np.ndarray
    chi: PotentialField
    value: float
    kkt_residual: float
    coords: np.ndarray
    strain: np.ndarray  # full strain p + chi_s per sample, (m, K)


def _probe_vector(integrand, F):
    F = np.asarray(F, float)
    d = integrand.graph.d
    if F.shape == (d, d):
        p = integrand.graph.symmetrize_matrix(F)
        if integrand.K != integrand.graph.k:
            p = np.concatenate([p, np.zeros(integrand.K - integrand.graph.k)])
        return p
    if F.shape == (integrand.K,):
        return F
    raise ValueError("probe must be a d x d matrix or a strain vector of length K")


def _chi_from_coords(space, graph, basis, c):
    d = graph.d
    chi = np.tensordot(c, basis, axes=(0, 0)) if basis.shape[0] else np.zeros((space.m, d * d))
    return PotentialField.from_field(RandomVariable(space, chi))


def _is_constant(A):
    return bool(np.all(A == A[:1]))


def solve_corrector(integrand, F, basis=None, tol=1e-9) -> CorrectorSolution:
    """Minimize <V(w, p + chi_s)> over chi in L^2_pot(Omega)^d.

    Quadratic densities: normal equations on pot-basis coordinates, solved with
    the pseudo-inverse (minimum-norm chi).  Scalar convex densities: BFGS on
    the same coordinates.
    """
    space, graph = integrand.space, integrand.graph
    p = _probe_vector(integrand, F)
    if basis is None:
        basis = pot_basis(space, graph.d)
    L = potential_strain_matrix(space, graph, basis)  # (m, k, r)
    k, r = graph.k, basis.shape[0]
    P = space.weights
    if isinstance(integrand, QuadraticIntegrand):
        A = integrand.A
        Auu = A[:, :k, :k]
        H = np.einsum("m,mkr,mkl,mls->rs", P, L, Auu, L)
        g = np.einsum("m,mkr,mkj,j->r", P, L, A[:, :k, :], p)
        if not r or _is_constant(A):
            # <chi_s> = 0, so by convexity chi = 0 when A does not depend on w
            c = np.zeros(r)
        else:
            c = -np.linalg.pinv(H, rcond=1e-12, hermitian=True) @ g
        kkt = float(np.max(np.abs(H @ c + g))) if r else 0.0
        strain = np.broadcast_to(p, (space.m, p.size)).copy()
        strain[:, :k] += np.einsum("mkr,r->mk", L, c)
        value = float(P @ integrand.density(np.arange(space.m), strain))
    else:
        samples = np.arange(space.m)

        def f(c):
            G = p + np.einsum("mkr,r->mk", L, c)
            return float(P @ integrand.density(samples, G))

        def df(c):
            G = p + np.einsum("mkr,r->mk", L, c)
            if integrand.grad is not None:
                dV = np.asarray(integrand.grad(samples, G), float)
            else:
                h = 1e-6
                dV = np.zeros_like(G)
                for j in range(G.shape[1]):
                    e = np.zeros(G.shape[1])
                    e[j] = h
                    dV[:, j] = (integrand.density(samples, G + e) - integrand.density(samples, G - e)) / (2 * h)
            return np.einsum("m,mk,mkr->r", P, dV, L)

        c = np.zeros(r)
        if r:
            res = so.minimize(f, c, jac=df, method="BFGS", options={"gtol": tol * 0.1, "maxiter": 10000})
            c = res.x
        kkt = float(np.max(np.abs(df(c)))) if r else 0.0
        strain = p + np.einsum("mkr,r->mk", L, c)
        value = f(c)
    if kkt > tol * max(1.0, float(np.abs(p).max())):
        raise OptimizerStall(f"corrector first-order residual {kkt:.3e}")
    chi = _chi_from_coords(space, graph, basis, c)
    return CorrectorSolution(p, chi, value, kkt, c, strain)


def provenance_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class HomogenizedTensor:
    A_hom: np.ndarray
    provenance: dict
    probes: list = field(default_factory=list)

    @property
    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.A_hom)[0])

    def value(self, p):
        p = np.asarray(p, float)
        return 0.5 * float(p @ self.A_hom @ p)

    def to_dict(self):
        return {
            "A_hom": [[float(x) for x in row] for row in self.A_hom],
            "min_eigenvalue": self.min_eigenvalue,
            "provenance": self.provenance,
            "probes": self.probes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def assemble_homogenized_tensor(integrand: QuadraticIntegrand, basis_method="svd") -> HomogenizedTensor:
    """Solve the corrector at the K basis probes and polarize."""
    space, graph = integrand.space, integrand.graph
    basis = pot_basis(space, graph.d, basis_method)
    K = integrand.K
    sols = [solve_corrector(integrand, np.eye(K)[j], basis) for j in range(K)]
    G = np.stack([s.strain for s in sols], axis=0)  # (K, m, K)
    if _is_constant(integrand.A):
        A = integrand.A[0].copy()
    else:
        A = np.einsum("m,imk,mkl,jml->ij", space.weights, G, integrand.A, G)
    asym = float(np.max(np.abs(A - A.T)))
    if asym > 1e-9 * max(1.0, np.abs(A).max()):
        raise ArithmeticError(f"assembled tensor not symmetric ({asym:.3e})")
    A = 0.5 * (A + A.T)
    prov = {
        "space": provenance_hash(space.weights, space.shifts),
        "graph": provenance_hash(np.asarray(graph.generators)),
        "coefficients": provenance_hash(integrand.A),
    }
    probes = [
        {"probe": j, "value": s.value, "kkt_residual": s.kkt_residual} for j, s in enumerate(sols)
    ]
    return HomogenizedTensor(A, prov, probes)


def brute_force_tensor(integrand: QuadraticIntegrand) -> np.ndarray:
    """Dense minimization over all potentials phi in R^{m x d}, no pot basis.

    Edge strains of D phi use the direct formula
    (b/|b|) . (phi(T_b w) - phi(w)) / |b|.
    """
    space, graph = integrand.space, integrand.graph
    m, d, k, K = space.m, graph.d, graph.k, integrand.K
    # linear map phi (m*d) -> chi_s (m, k)
    M = np.zeros((m, k, m * d))
    t = graph.directions()
    lens = graph.lengths()
    for i, b in enumerate(graph.generators):
        Tb = space.shift_perm(b)
        for w in range(m):
            for c in range(d):
                M[w, i, Tb[w] * d + c] += t[i, c] / lens[i]
                M[w, i, w * d + c] -= t[i, c] / lens[i]
    P = space.weights
    A = integrand.A
    H = np.einsum("m,mkr,mkl,mls->rs", P, M, A[:, :k, :k], M)
    Hp = np.linalg.pinv(H, rcond=1e-12, hermitian=True)
    out = np.zeros((K, K))
    strains = []
    for j in range(K):
        p = np.eye(K)[j]
        g = np.einsum("m,mkr,mkj,j->r", P, M, A[:, :k, :], p)
        phi = -Hp @ g
        G = np.broadcast_to(p, (m, K)).copy()
        G[:, :k] += np.einsum("mkr,r->mk", M, phi)
        strains.append(G)
    for i in range(K):
        for j in range(K):
            out[i, j] = np.einsum("m,mk,mkl,ml->", P, strains[i], A, strains[j])
    return 0.5 * (out + out.T)


def corrector_basis(integrand: QuadraticIntegrand):
    """Correctors for the d*d unit matrices E_{cj}; array (d, d, m, d*d)."""
    d = integrand.graph.d
    space = integrand.space
    basis = pot_basis(space, d)
    out = np.zeros((d, d, space.m, d * d))
    for c in range(d):
        for j in range(d):
            F = np.zeros((d, d))
            F[c, j] = 1.0
            out[c, j] = solve_corrector(integrand, F, basis).chi.chi.values
    return out


def birkhoff_average(phi: RandomVariable, radii, shape="cube"):
    """Averages of phi(T_x w) over the cube [0, R)^d (or the ball |x| < R) per sample.

    Returns an array (len(radii), m, n).
    """
    space = phi.space
    d = space.d
    out = []
    for R in radii:
        R = int(R)
        if shape == "cube":
            coords = np.indices((R,) * d).reshape(d, -1).T
        elif shape == "ball":
            box = np.indices((2 * R + 1,) * d).reshape(d, -1).T - R
            coords = box[np.sum(box**2, axis=1) < R * R]
        else:
            raise ValueError(f"unknown averaging shape {shape!r}")
        perms = space.site_perms(coords)  # (S, m)
        out.append(phi.values[perms].mean(axis=0))
    return np.stack(out)
