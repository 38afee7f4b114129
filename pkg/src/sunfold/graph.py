"""Lattice graphs generated by edge vectors, symmetrized gradients and Korn checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .lattice import Grid, LatticeFunction, gradient_array, shift_array
from .probability import ProbabilitySpace, RandomVariable, hderiv_array


def staircase_path(b):
    """Unit steps (point, axis, sign) of the axis-by-axis path from 0 to b."""
    p = np.zeros(len(b), int)
    steps = []
    for axis, comp in enumerate(b):
        s = 1 if comp > 0 else -1
        for _ in range(abs(comp)):
            if s > 0:
                steps.append((tuple(p), axis, 1))
                p[axis] += 1
            else:
                p[axis] -= 1
                steps.append((tuple(p), axis, -1))
    return steps


@dataclass(frozen=True, eq=False)
class LatticeGraph:
    """Edge generators b_1..b_k (containing the unit vectors) and their paths.

    ``paths[i]`` maps an offset y to a real vector B_i(y) such that
    d_i u(x) = sum_y grad u(x - eps y) B_i(y), with the 1/|b_i| scaling folded in.
    """

    generators: tuple
    paths: tuple = field(init=False, repr=False)

    def __post_init__(self):
        gens = tuple(tuple(int(c) for c in b) for b in self.generators)
        if not gens:
            raise ValueError("empty generator set")
        d = len(gens[0])
        if any(len(b) != d for b in gens) or any(not any(b) for b in gens):
            raise ValueError("generators must be nonzero vectors of equal length")
        for i in range(d):
            e = tuple(int(i == j) for j in range(d))
            if e not in gens:
                raise ValueError("generators must contain every unit vector")
        object.__setattr__(self, "generators", gens)
        paths = []
        for b in gens:
            nb = np.linalg.norm(b)
            B = {}
            # a step from q to q + e_j contributes grad_j u(x + eps q) = grad_j u(x - eps y), y = -q
            for q, axis, sign in staircase_path(b):
                y = tuple(-c for c in q)
                B.setdefault(y, np.zeros(d))
                B[y][axis] += sign / nb
            paths.append(B)
        object.__setattr__(self, "paths", tuple(paths))

    @property
    def d(self):
        return len(self.generators[0])

    @property
    def k(self):
        return len(self.generators)

    def lengths(self):
        return np.array([np.linalg.norm(b) for b in self.generators])

    def directions(self):
        return np.array(self.generators, float) / self.lengths()[:, None]

    def symmetrize_matrix(self, F):
        """Deterministic (F_s)_i = (b_i/|b_i|) . F b_i/|b_i| for F of shape (..., d, d)."""
        t = self.directions()
        return np.einsum("id,...de,ie->...i", t, F, t)


def edge_quotient_array(values, eps, b, first_axis=0, periodic=False):
    """(u(x + eps b) - u(x)) / (eps |b|)."""
    return (shift_array(values, b, first_axis, periodic) - values) / (eps * np.linalg.norm(b))


def edge_quotient(u: LatticeFunction, graph: LatticeGraph, i) -> LatticeFunction:
    v = edge_quotient_array(u.values, u.grid.epsilon, graph.generators[i], 0, u.periodic)
    return LatticeFunction(u.grid, v, u.boundary)


def path_quotient_array(values, eps, graph, i, first_axis=0, periodic=False):
    """The same quotient through the path representation sum_y grad u(x - eps y) B_i(y)."""
    d = graph.d
    grad = gradient_array(values, eps, d, first_axis, periodic)
    out = np.zeros(values.shape)
    for y, B in graph.paths[i].items():
        shifted = shift_array(grad, tuple(-c for c in y), first_axis, periodic)
        out += shifted @ B
    return out


def sym_gradient_array(values, eps, graph, first_axis=0, periodic=False):
    """Symmetrized gradient; values (..., spatial, d) -> (..., spatial, k)."""
    t = graph.directions()
    comps = []
    for i, b in enumerate(graph.generators):
        q = edge_quotient_array(values, eps, b, first_axis, periodic)
        comps.append(q @ t[i])
    return np.stack(comps, axis=-1)


def symmetrized_gradient(u: LatticeFunction, graph: LatticeGraph) -> LatticeFunction:
    if u.components != graph.d:
        raise ValueError("symmetrized gradient needs d-vector valued u")
    v = sym_gradient_array(u.values, u.grid.epsilon, graph, 0, u.periodic)
    return LatticeFunction(u.grid, v, u.boundary)


def sym_gradient_matrix(grid: Grid, graph: LatticeGraph, mask=None, periodic=False):
    """Sparse map from vector site values (site, comp) to strains (site, edge)."""
    d, k, n, eps = grid.d, graph.k, grid.size, grid.epsilon
    idx = np.arange(n).reshape(grid.shape)
    t = graph.directions()
    lens = graph.lengths()
    rows, cols, vals = [], [], []
    for i, b in enumerate(graph.generators):
        if periodic:
            nb = idx
            for a, s in enumerate(b):
                nb = np.roll(nb, -s, axis=a)
            valid = np.ones(grid.shape, bool)
        else:
            nb = shift_array(idx + 1, b, 0, False) - 1
            valid = nb >= 0
        r = idx * k + i
        for c in range(d):
            if t[i, c] == 0:
                continue
            coef = t[i, c] / (eps * lens[i])
            rows += [r.ravel(), r[valid]]
            cols += [idx.ravel() * d + c, nb[valid] * d + c]
            vals += [np.full(n, -coef), np.full(int(valid.sum()), coef)]
    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * k, n * d)
    )
    if mask is not None:
        keep = np.repeat(np.asarray(mask).ravel(), d)
        S = S[:, np.flatnonzero(keep)]
    return S


def full_gradient_matrix(grid: Grid, d_out, mask=None, periodic=False):
    """Sparse map from vector site values (site, comp) to (site, comp, direction)."""
    from .lattice import gradient_matrix

    G = gradient_matrix(grid, periodic)  # (n*d, n)
    n, d = grid.size, grid.d
    # reorder rows to (site, comp, direction) and columns to (site, comp)
    blocks = sp.kron(G, sp.identity(d_out), format="csr")  # rows (site, dir, comp), cols (site, comp)
    perm = np.arange(n * d * d_out).reshape(n, d, d_out).transpose(0, 2, 1).ravel()
    M = blocks[perm]
    if mask is not None:
        keep = np.repeat(np.asarray(mask).ravel(), d_out)
        M = M[:, np.flatnonzero(keep)]
    return M


def symmetrize_random(F: np.ndarray, space: ProbabilitySpace, graph: LatticeGraph):
    """(F_s)_i(w) = (b_i/|b_i|) . sum_y F(T_{-y} w) B_i(y) for F of shape (m, d, d).

    Returns an array (m, k).
    """
    F = np.asarray(F, float)
    t = graph.directions()
    out = np.zeros((space.m, graph.k))
    for i in range(graph.k):
        acc = np.zeros((space.m, graph.d))
        for y, B in graph.paths[i].items():
            perm = space.shift_perm(tuple(-c for c in y))
            acc += F[perm] @ B
        out[:, i] = acc @ t[i]
    return out


def symmetrize_random_variable(F: RandomVariable, graph: LatticeGraph) -> RandomVariable:
    d = graph.d
    return RandomVariable(F.space, symmetrize_random(F.values.reshape(-1, d, d), F.space, graph))


def potential_strain_matrix(space: ProbabilitySpace, graph: LatticeGraph, basis):
    """Linear map from pot-basis coordinates to chi_s, shape (m, k, r)."""
    r = basis.shape[0]
    d = graph.d
    cols = [symmetrize_random(basis[j].reshape(space.m, d, d), space, graph) for j in range(r)]
    if not cols:
        return np.zeros((space.m, graph.k, 0))
    return np.stack(cols, axis=-1)


@dataclass
class KornReport:
    constant: float
    windows: list
    constants: list
    min_eigenvalues: list
    passed: bool = True
    note: str = ""

    def to_dict(self):
        return {
            "constant": self.constant,
            "windows": [list(w) for w in self.windows],
            "constants": self.constants,
            "min_eigenvalues": self.min_eigenvalues,
            "passed": self.passed,
            "note": self.note,
        }


def korn_constant(graph: LatticeGraph, n):
    """1/lambda_min of |grad_s u|^2 against |grad u|^2 over u supported on an n^d block."""
    d = graph.d
    grid = Grid.window(1.0, (n + 2 * max(max(abs(c) for c in b) for b in graph.generators),) * d)
    pad = (grid.shape[0] - n) // 2
    mask = np.zeros(grid.shape, bool)
    mask[(slice(pad, pad + n),) * d] = True
    S = sym_gradient_matrix(grid, graph, mask).toarray()
    G = full_gradient_matrix(grid, d, mask).toarray()
    KS = S.T @ S
    KG = G.T @ G
    lam = sla.eigh(KS, KG, eigvals_only=True, subset_by_index=[0, 0])[0]
    if not np.isfinite(lam):
        raise np.linalg.LinAlgError("eigen-solver failure")
    return (np.inf if lam <= 0 else 1.0 / lam), float(lam)


def verify_korn(graph: LatticeGraph, windows=(8, 12, 16), stability=0.10) -> KornReport:
    """Empirical Korn constants on growing windows; passes if they stabilize."""
    consts, lams = [], []
    for n in windows:
        c, lam = korn_constant(graph, int(n))
        consts.append(float(c))
        lams.append(float(lam))
    finite = all(np.isfinite(consts))
    spread = (max(consts) - min(consts)) / max(consts) if finite else np.inf
    passed = bool(finite and spread <= stability)
    note = f"relative spread {spread:.4g} across windows"
    return KornReport(
        float(consts[-1]), [(int(n),) * graph.d for n in windows], consts, lams, passed, note
    )


@dataclass
class StochasticKornReport:
    empty: bool
    constant: float
    worst_ratio: float
    min_eigenvalue: float

    def to_dict(self):
        return dict(self.__dict__)


def verify_stochastic_korn(space: ProbabilitySpace, graph: LatticeGraph, trials=100, seed=0):
    """<|chi|^2> <= C <|chi_s|^2> on ran D, with C from the dense Rayleigh quotient."""
    from .probability import pot_basis

    basis = pot_basis(space, graph.d)
    r = basis.shape[0]
    if r == 0:
        return StochasticKornReport(True, 1.0, 0.0, np.inf)
    L = potential_strain_matrix(space, graph, basis)  # (m, k, r)
    M = np.einsum("m,mkr,mks->rs", space.weights, L, L)
    lam = float(np.linalg.eigvalsh(M)[0])
    C = np.inf if lam <= 0 else 1.0 / lam
    rng = np.random.default_rng(seed)
    d = graph.d
    worst = 0.0
    for _ in range(trials):
        phi = rng.normal(size=(space.m, d))
        chi = hderiv_array(space, phi)  # (m, d, d): component c, direction i
        chi_s = symmetrize_random(chi, space, graph)
        num = space.weights @ np.sum(chi**2, axis=(1, 2))
        den = space.weights @ np.sum(chi_s**2, axis=1)
        if num > 1e-14:
            worst = max(worst, num / den)
    return StochasticKornReport(False, C, float(worst), lam)
