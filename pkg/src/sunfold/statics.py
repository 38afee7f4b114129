"""Static spring-network minimization at scale eps and its homogenized limit."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .corrector import (
    CoercivityError,
    QuadraticIntegrand,
    assemble_homogenized_tensor,
    corrector_basis,
)
from .graph import LatticeGraph, sym_gradient_matrix
from .lattice import Grid, freudenthal_interpolant, gradient_array, quadrature_points
from .probability import RandomField, RandomVariable, stationary_extension
from .unfolding import (
    SolverError,
    TwoScaleFunction,
    dirichlet_recovery,
    fold,
    recovery_pair,
    transform_energy,
    two_scale_distance,
    unfold,
)


@dataclass(frozen=True, eq=False)
class StaticProblem:
    grid: Grid
    graph: LatticeGraph
    integrand: QuadraticIntegrand
    load: RandomField
    box: tuple

    def __post_init__(self):
        if self.integrand.K != self.graph.k:
            raise ValueError("static integrand acts on k edge strains")
        if self.integrand.coercivity <= 0:
            raise CoercivityError("integrand is not coercive")
        mask = self.grid.domain_mask[None, ..., None]
        if np.any(self.load.values * ~mask):
            raise ValueError("load must be supported on the domain sites")

    @property
    def space(self):
        return self.integrand.space

    @classmethod
    def from_continuum(cls, epsilon, box, integrand: QuadraticIntegrand, load: Callable, order=2):
        """Grid for O = box at scale eps, load l_eps = fold(l) restricted to O."""
        lower, upper = box
        grid = Grid.from_box(epsilon, lower, upper, integrand.graph.generators)
        d = grid.d
        l = TwoScaleFunction.deterministic(integrand.space, load, d)
        vals = fold(l, grid, order).values * grid.domain_mask[None, ..., None]
        return cls(grid, integrand.graph, integrand, RandomField(integrand.space, grid, vals), (lower, upper))


def site_coefficients(problem_space, grid, A):
    """A(T_{x/eps} w) at every site: (m, S, K, K)."""
    K = A.shape[-1]
    rv = RandomVariable(problem_space, A.reshape(problem_space.m, -1))
    ext = stationary_extension(rv, grid).values
    return ext.reshape(problem_space.m, grid.size, K, K)


def _stiffness(grid, graph, coef, S):
    """eps^d S^T blockdiag(coef) S for one sample; coef (S_sites, k, k)."""
    blocks = sp.block_diag(list(coef), format="csr")
    return (grid.cell_volume * (S.T @ blocks @ S)).tocsr()


@dataclass
class StaticSolution:
    u: RandomField
    energy: float
    energy_unfolded: float
    residual: float
    iterations: int


def _cg(K, f, x0=None, tol=1e-12):
    n = K.shape[0]
    iters = 0

    def cb(_):
        nonlocal iters
        iters += 1

    if not np.any(f):
        return np.zeros(n), 0
    x, info = spla.cg(K, f, x0=x0, rtol=tol, atol=0.0, maxiter=10 * n + 100, callback=cb)
    if info != 0:
        raise SolverError(f"CG failed (info={info}) after {iters} iterations")
    return x, iters


def strain_field(problem, u_vals):
    """Symmetrized gradient of u: (m, *shape, k)."""
    from .graph import sym_gradient_array

    return sym_gradient_array(u_vals, problem.grid.epsilon, problem.graph, 1, False)


def energy_densities(problem, u_vals):
    space, grid = problem.space, problem.grid
    e = strain_field(problem, u_vals).reshape(space.m, grid.size, -1)
    coef = site_coefficients(space, grid, problem.integrand.A)
    return 0.5 * np.einsum("msi,msij,msj->ms", e, coef, e)


def static_energy(problem, u_vals, with_load=True):
    """Energy evaluated in lattice form and, independently, through the unfolded form."""
    space, grid = problem.space, problem.grid
    vol = grid.cell_volume
    dens = energy_densities(problem, u_vals)
    folded = math.fsum((space.weights[:, None] * dens * vol).ravel())
    e = RandomField(space, grid, strain_field(problem, u_vals))
    unfolded = transform_energy(lambda w, G: problem.integrand.density(w, G), e, tol=1e-10)
    if with_load:
        work = math.fsum(
            (space.weights[:, None] * np.sum((problem.load.values * u_vals).reshape(space.m, grid.size, -1), axis=2) * vol).ravel()
        )
        folded -= work
        unfolded -= work
    return folded, unfolded


def solve_epsilon_problem(problem: StaticProblem, x0=None, tol=1e-12) -> StaticSolution:
    """Per-sample sparse SPD solve of the Euler-Lagrange system on O."""
    space, grid, graph = problem.space, problem.grid, problem.graph
    d = grid.d
    mask = grid.domain_mask
    S = sym_gradient_matrix(grid, graph, mask)
    coef = site_coefficients(space, grid, problem.integrand.A)
    u = np.zeros((space.m, grid.size, d))
    resid, iters = 0.0, 0
    for w in range(space.m):
        K = _stiffness(grid, graph, coef[w], S)
        f = grid.cell_volume * problem.load.values[w].reshape(grid.size, d)[mask.ravel()].ravel()
        start = None if x0 is None else np.asarray(x0)[w].reshape(grid.size, d)[mask.ravel()].ravel()
        x, it = _cg(K, f, start, tol)
        nf = np.linalg.norm(f)
        r = np.linalg.norm(K @ x - f) / nf if nf else 0.0
        if r > 1e-9:
            raise SolverError(f"optimality residual {r:.3e} above 1e-9")
        resid, iters = max(resid, r), max(iters, it)
        u[w, mask.ravel()] = x.reshape(-1, d)
    u = u.reshape((space.m,) + grid.shape + (d,))
    e1, e2 = static_energy(problem, u)
    return StaticSolution(RandomField(space, grid, u), e1, e2, resid, iters)


@dataclass
class HomogenizedSolution:
    grid: Grid
    values: np.ndarray  # (*shape, d)
    energy: float
    A_hom: np.ndarray

    def evaluate(self, x):
        return freudenthal_interpolant(self.values, self.grid, x)

    def gradient(self, x):
        return freudenthal_interpolant(self.values, self.grid, x, with_gradient=True)[1]


def solve_homogenized(A_hom, graph: LatticeGraph, box, h, load: Callable, order=2) -> HomogenizedSolution:
    """Deterministic minimization of int 1/2 A_hom grad_s U . grad_s U - l . U on a grid of spacing h."""
    lower, upper = box
    grid = Grid.from_box(h, lower, upper, graph.generators)
    d = grid.d
    mask = grid.domain_mask
    S = sym_gradient_matrix(grid, graph, mask)
    A_hom = np.asarray(A_hom, float)
    if np.linalg.eigvalsh(A_hom)[0] <= 0:
        raise CoercivityError("A_hom is not positive definite")
    K = (grid.cell_volume * (S.T @ sp.kron(sp.identity(grid.size), A_hom) @ S)).tocsr()
    pts, wq = quadrature_points(grid, order)
    lv = np.asarray(load(pts.reshape(-1, d)), float).reshape(grid.size, len(wq), d)
    lavg = np.einsum("sqd,q->sd", lv, wq)
    f = grid.cell_volume * lavg[mask.ravel()].ravel()
    x, _ = _cg(K, f, tol=1e-13)
    if np.any(f) and np.linalg.norm(K @ x - f) > 1e-9 * np.linalg.norm(f):
        raise SolverError("homogenized solve did not converge")
    U = np.zeros((grid.size, d))
    U[mask.ravel()] = x.reshape(-1, d)
    energy = 0.5 * float(x @ (K @ x)) - float(f @ x)
    return HomogenizedSolution(grid, U.reshape(grid.shape + (d,)), energy, A_hom)


@dataclass
class ConvergenceStudy:
    epsilons: list
    energy: list = field(default_factory=list)
    energy_unfolded: list = field(default_factory=list)
    strong_error_u: list = field(default_factory=list)
    strong_error_grad: list = field(default_factory=list)
    mean_error: list = field(default_factory=list)
    recovery_energy: list = field(default_factory=list)
    dirichlet_recovery_energy: list = field(default_factory=list)
    homogenized_energy: float = float("nan")
    A_hom: list = None
    records: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "energy", "strong_error_u", "strong_error_grad", "mean_error"])
        for row in zip(self.epsilons, self.energy, self.strong_error_u, self.strong_error_grad, self.mean_error):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def manifest(self):
        return {
            "epsilons": self.epsilons,
            "energy": self.energy,
            "energy_unfolded": self.energy_unfolded,
            "recovery_energy": self.recovery_energy,
            "dirichlet_recovery_energy": self.dirichlet_recovery_energy,
            "homogenized_energy": self.homogenized_energy,
            "A_hom": self.A_hom,
            "diagnostics": self.records,
        }


def gradient_target(hom: HomogenizedSolution, chis, space):
    """grad U + chi(grad U) as a two-scale function with d*d components."""
    d = hom.grid.d

    def ev(x):
        gU = hom.gradient(x)  # (npts, d, d)
        chi = np.einsum("pcj,cjmn->mpn", gU, chis)
        return gU.reshape(1, x.shape[0], d * d) + chi

    return TwoScaleFunction(space, ev, d * d)


def corrector_target(hom: HomogenizedSolution, chis, space):
    d = hom.grid.d

    def ev(x):
        gU = hom.gradient(x)
        return np.einsum("pcj,cjmn->mpn", gU, chis)

    return TwoScaleFunction(space, ev, d * d)


def run_convergence_study(
    integrand: QuadraticIntegrand,
    box,
    load: Callable,
    epsilons,
    reference_refinement=1,
    order=2,
) -> ConvergenceStudy:
    """Solve at every eps and compare with the homogenized solution.

    The homogenized problem uses the finest eps divided by
    ``reference_refinement`` as its grid spacing.
    """
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ValueError("empty epsilon list")
    space, graph = integrand.space, integrand.graph
    d = graph.d
    tensor = assemble_homogenized_tensor(integrand)
    h = min(epsilons) / reference_refinement
    hom = solve_homogenized(tensor.A_hom, graph, box, h, load, order)
    chis = corrector_basis(integrand)  # (d, d, m, d*d)
    U = TwoScaleFunction.deterministic(space, hom.evaluate, d)
    grad_target = gradient_target(hom, chis, space)
    chi_fn = corrector_target(hom, chis, space)
    study = ConvergenceStudy(epsilons, homogenized_energy=hom.energy, A_hom=tensor.A_hom.tolist())
    for eps in epsilons:
        prob = StaticProblem.from_continuum(eps, box, integrand, load, order)
        sol = solve_epsilon_problem(prob)
        rep_u = two_scale_distance(sol.u, U, order=order, solver_iters=sol.iterations)
        g = gradient_array(sol.u.values, eps, d, 1, False).reshape(sol.u.values.shape[:-1] + (d * d,))
        rep_g = two_scale_distance(RandomField(space, prob.grid, g), grad_target, order=order)
        mean = sol.u.mean()  # (*shape, d)
        pts, wq = quadrature_points(prob.grid, order)
        Uq = hom.evaluate(pts.reshape(-1, d)).reshape(prob.grid.size, len(wq), d)
        diff = mean.reshape(prob.grid.size, 1, d) - Uq
        mean_err = math.sqrt(float(np.einsum("sqd,q->", diff**2, wq)) * prob.grid.cell_volume)
        rec = recovery_pair(U, chi_fn, prob.grid, 0.0, domain=box).field
        rec_vals = rec.values * prob.grid.domain_mask[None, ..., None]
        e_rec, _ = static_energy(prob, rec_vals)
        drec = dirichlet_recovery(U, chi_fn, prob.grid).field
        e_drec, _ = static_energy(prob, drec.values)
        study.energy.append(sol.energy)
        study.energy_unfolded.append(sol.energy_unfolded)
        study.strong_error_u.append(rep_u.strong_error)
        study.strong_error_grad.append(rep_g.strong_error)
        study.mean_error.append(mean_err)
        study.recovery_energy.append(e_rec)
        study.dirichlet_recovery_energy.append(e_drec)
        study.records.append(rep_u.record())
    return study
