"""Rate-independent elasto-plastic networks by time-incremental minimization.

Every problem here has the form

    E(t, v, z) = 1/2 (v, z) . Q (v, z) - f(t) . v,
    Psi(z - z_prev) = sum_j w_j |z_j - z_prev_j|,

split into independent blocks (one per sample for the eps-problem, a single
block for the limit problems).  Each step alternates an exact solve in v with
a shrinkage step in z (accelerated, with adaptive restart) and finishes with
an active-set polish that makes the first-order conditions exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .corrector import CoercivityError, QuadraticIntegrand, assemble_homogenized_tensor
from .graph import LatticeGraph, sym_gradient_array, sym_gradient_matrix
from .lattice import Grid, freudenthal_interpolant, gradient_array, gradient_matrix, quadrature_points
from .probability import ProbabilitySpace, RandomField, RandomVariable, pot_basis
from .statics import site_coefficients
from .graph import potential_strain_matrix
from .unfolding import TwoScaleFunction, fold, two_scale_distance


class AlternationError(RuntimeError):
    """Incremental step did not reach the KKT tolerance."""


def soft_threshold(x, w):
    return np.sign(x) * np.maximum(np.abs(x) - w, 0.0)


def elastoplastic_block(a, h):
    """Per-edge form 1/2 a (e - z)^2 + 1/2 h z^2 written on (e, z): (..., 2k, 2k)."""
    a = np.atleast_1d(np.asarray(a, float))
    h = np.atleast_1d(np.asarray(h, float))
    k = a.shape[-1]
    A = np.zeros(a.shape[:-1] + (2 * k, 2 * k))
    i = np.arange(k)
    A[..., i, i] = a
    A[..., i, k + i] = -a
    A[..., k + i, i] = -a
    A[..., k + i, k + i] = a + h
    return A


# ------------------------------------------------------------------ engine


@dataclass(eq=False)
class L1QuadraticBlock:
    """One independent block of the incremental problem."""

    Q: sp.csr_matrix
    nv: int
    weights: np.ndarray  # (nz,), may contain inf
    scale: float = 1.0  # residuals are divided by this
    _lu: object = field(default=None, repr=False)

    def __post_init__(self):
        self.Q = sp.csr_matrix(self.Q)
        self.weights = np.asarray(self.weights, float)
        n = self.Q.shape[0]
        if self.weights.size != n - self.nv:
            raise ValueError("weights must cover the z block")
        self.Kvv = self.Q[: self.nv, : self.nv].tocsc()
        self.Kvz = self.Q[: self.nv, self.nv:].tocsr()
        self.Kzv = self.Q[self.nv:, : self.nv].tocsr()
        self.Kzz = self.Q[self.nv:, self.nv:].tocsr()
        self._lu = spla.splu(self.Kvv) if self.nv else None
        nz = self.nz
        if nz:
            if nz <= 2000:
                self.L = float(np.linalg.eigvalsh(self.Kzz.toarray())[-1])
            else:
                self.L = float(spla.eigsh(self.Kzz, k=1, which="LA", return_eigenvectors=False)[0]) * 1.01
        else:
            self.L = 1.0

    @property
    def nz(self):
        return self.Q.shape[0] - self.nv

    def solve_v(self, f, z):
        if not self.nv:
            return np.zeros(0)
        return self._lu.solve(f - self.Kvz @ z)

    def energy(self, v, z, f):
        y = np.concatenate([v, z])
        return 0.5 * float(y @ (self.Q @ y)) - float(f @ v)

    def dissipation(self, dz):
        w = self.weights
        moving = dz != 0
        if np.any(np.isinf(w[moving])):
            return np.inf
        return float(np.sum(w[moving] * np.abs(dz[moving])))

    def kkt(self, v, z, f, z_prev):
        rv = self.Kvv @ v + self.Kvz @ z - f if self.nv else np.zeros(0)
        g = self.Kzv @ v + self.Kzz @ z
        dz = z - z_prev
        w = self.weights
        moving = dz != 0
        rz = np.zeros_like(g)
        rz[moving] = np.abs(g[moving] + w[moving] * np.sign(dz[moving]))
        rz[moving & np.isinf(w)] = np.inf
        stuck = ~moving
        rz[stuck] = np.maximum(np.abs(g[stuck]) - w[stuck], 0.0)
        r = max(np.max(np.abs(rv), initial=0.0), np.max(rz, initial=0.0))
        return r / self.scale

    def _polish(self, z, f, z_prev):
        """Solve the linear system on the current active set exactly."""
        dz = z - z_prev
        moving = np.flatnonzero(dz != 0)
        fixed = np.flatnonzero(dz == 0)
        s = np.sign(dz[moving])
        nv = self.nv
        idx = np.concatenate([np.arange(nv), nv + moving])
        Qa = self.Q[idx][:, idx].tocsc()
        zf = z_prev[fixed]
        rhs = np.concatenate([f, -self.weights[moving] * s])
        rhs -= self.Q[idx][:, nv + fixed] @ zf
        try:
            x = spla.spsolve(Qa, rhs) if idx.size else np.zeros(0)
        except RuntimeError:
            return None
        x = np.atleast_1d(x)
        znew = z_prev.copy()
        znew[moving] = x[nv:]
        if np.any(np.sign(znew[moving] - z_prev[moving]) != s):
            return None
        return x[:nv], znew

    def step(self, f, z_prev, z0=None, tol=1e-9, maxiter=20000):
        """argmin E(v, z) + Psi(z - z_prev); returns (v, z, iterations, kkt)."""
        z_prev = np.asarray(z_prev, float)
        if not self.nz:
            v = self.solve_v(f, z_prev)
            return v, z_prev.copy(), 0, self.kkt(v, z_prev, f, z_prev)
        z = z_prev.copy() if z0 is None else np.asarray(z0, float).copy()
        w = self.weights
        t_step = 1.0 / self.L
        thresh = w * t_step
        y = z.copy()
        theta = 1.0
        v = self.solve_v(f, z)
        best = (np.inf, v, z)
        for it in range(1, maxiter + 1):
            vy = self.solve_v(f, y)
            grad = self.Kzv @ vy + self.Kzz @ y
            z_new = z_prev + soft_threshold(y - t_step * grad - z_prev, thresh)
            if np.dot(y - z_new, z_new - z) > 0:
                # momentum points uphill: restart
                theta, y, z = 1.0, z_new.copy(), z_new
            else:
                theta_new = 0.5 * (1 + math.sqrt(1 + 4 * theta * theta))
                y = z_new + ((theta - 1) / theta_new) * (z_new - z)
                z, theta = z_new, theta_new
            if it % 10 == 0 or it == 1:
                v = self.solve_v(f, z)
                r = self.kkt(v, z, f, z_prev)
                if r < best[0]:
                    best = (r, v, z)
                if r < tol:
                    return v, z, it, r
                pol = self._polish(z, f, z_prev)
                if pol is not None:
                    vp, zp = pol
                    rp = self.kkt(vp, zp, f, z_prev)
                    if rp < tol:
                        return vp, zp, it, rp
        r, v, z = best
        raise AlternationError(f"incremental step stalled at KKT residual {r:.3e}")


# ------------------------------------------------------------------ eps-level spec


@dataclass(frozen=True, eq=False)
class ERISSpec:
    """Elasto-plastic network on O at scale eps.

    ``A`` has shape (m, 2k, 2k) acting on (grad_s u, z); ``yield_stress`` has
    shape (m, k) (inf freezes an edge); ``load(t, x)`` returns (npts, d).
    Gradient plasticity adds <sum G eps^gamma grad z : eps^gamma grad z>.
    """

    space: ProbabilitySpace
    graph: LatticeGraph
    epsilon: float
    box: tuple
    A: np.ndarray
    yield_stress: np.ndarray
    load: Callable
    gamma: float = None
    G: float = 0.0
    order: int = 2

    def __post_init__(self):
        k, m = self.graph.k, self.space.m
        A = np.broadcast_to(np.asarray(self.A, float), (m, 2 * k, 2 * k)).copy()
        QuadraticIntegrand(self.space, self.graph, A)  # symmetry and coercivity
        sy = np.broadcast_to(np.asarray(self.yield_stress, float), (m, k)).copy()
        if np.any(sy < 0):
            raise ValueError("yield stresses must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "yield_stress", sy)
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def grid(self):
        return _grid_for(self)

    def with_epsilon(self, eps):
        return ERISSpec(self.space, self.graph, eps, self.box, self.A, self.yield_stress, self.load, self.gamma, self.G, self.order)


_GRIDS = {}


def _grid_for(spec):
    key = (id(spec.graph), spec.epsilon, tuple(map(tuple, np.atleast_2d(spec.box))))
    if key not in _GRIDS:
        lower, upper = spec.box
        margin = max(max(abs(c) for c in b) for b in spec.graph.generators) + 1
        _GRIDS[key] = Grid.from_box(spec.epsilon, lower, upper, spec.graph.generators, margin)
    return _GRIDS[key]


@dataclass
class ERISState:
    u: RandomField
    z: RandomField


@dataclass
class _Assembly:
    blocks: list
    block_weights: np.ndarray
    load_vector: Callable  # t -> (nv,) common load, or per-block list
    ynorm: sp.csr_matrix  # Gram matrix of the Y-norm for one block
    to_state: Callable
    from_state: Callable
    describe: dict


def assemble_eps(spec: ERISSpec) -> _Assembly:
    space, graph, grid = spec.space, spec.graph, spec.grid
    d, k, vol = grid.d, graph.k, grid.cell_volume
    dom = grid.domain_mask.ravel()
    halo = grid.halo_mask.ravel()
    nsite = grid.size
    S = sym_gradient_matrix(grid, graph, grid.domain_mask)  # rows (site, edge)
    hrows = np.flatnonzero(np.repeat(halo, k))
    Sh = S[hrows]  # strains at halo sites
    nh = int(halo.sum())
    nv = Sh.shape[1]
    coef = site_coefficients(space, grid, spec.A)[:, halo]  # (m, nh, 2k, 2k)
    from .probability import stationary_extension

    # inf (frozen edge) is carried through the extension as -1
    sy = RandomVariable(space, np.where(np.isinf(spec.yield_stress), -1.0, spec.yield_stress))
    sy_site = stationary_extension(sy, grid).values.reshape(space.m, nsite, k)[:, halo]
    sy_site = np.where(sy_site < 0, np.inf, sy_site)
    lens = graph.lengths()
    Gz = None
    if spec.gamma is not None and spec.G:
        Gm = gradient_matrix(grid, False, grid.halo_mask)  # (nsite*d, nh)
        Gz = sp.kron(Gm, sp.identity(k), format="csr")  # rows (site, dir, edge), cols (halo, edge)
        Gfield = RandomVariable(space, np.broadcast_to(np.asarray(spec.G, float), (space.m,)).reshape(-1, 1))
        Gsite = stationary_extension(Gfield, grid).values.reshape(space.m, nsite)
    E = sp.vstack([sp.hstack([Sh, sp.csr_matrix((nh * k, nh * k))]), sp.hstack([sp.csr_matrix((nh * k, nv)), sp.identity(nh * k)])]).tocsr()
    # reorder rows to per-site (strain block, z block)
    perm = np.arange(2 * nh * k).reshape(2, nh, k).transpose(1, 0, 2).ravel()
    E = E[perm]
    blocks = []
    for w in range(space.m):
        Q = vol * (E.T @ sp.block_diag(list(coef[w]), format="csr") @ E)
        if Gz is not None:
            gw = np.repeat(Gsite[w], d * k)
            Q = Q + sp.block_diag([sp.csr_matrix((nv, nv)), 2 * vol * spec.epsilon ** (2 * spec.gamma) * (Gz.T @ sp.diags(gw) @ Gz)])
        weights = vol * (sy_site[w] * lens).ravel()
        blocks.append(L1QuadraticBlock(Q.tocsr(), nv, weights, vol))

    lq = TwoScaleFunction

    def load_vector(t):
        l = lq.deterministic(space, lambda x: spec.load(t, x), d)
        vals = fold(l, grid, spec.order).values[0].reshape(nsite, d)
        return vol * vals[dom].ravel()

    Gu = gradient_matrix(grid, False, grid.domain_mask)
    Gu = sp.kron(Gu, sp.identity(d), format="csr")
    My = vol * sp.block_diag([sp.identity(nv) + Gu.T @ Gu, sp.identity(nh * k)], format="csr")

    def to_state(ys):
        u = np.zeros((space.m, nsite, d))
        z = np.zeros((space.m, nsite, k))
        for w, y in enumerate(ys):
            u[w, dom] = y[:nv].reshape(-1, d)
            z[w, halo] = y[nv:].reshape(-1, k)
        return ERISState(
            RandomField(space, grid, u.reshape((space.m,) + grid.shape + (d,))),
            RandomField(space, grid, z.reshape((space.m,) + grid.shape + (k,))),
        )

    def from_state(state):
        u = state.u.values.reshape(space.m, nsite, d)
        z = state.z.values.reshape(space.m, nsite, k)
        if np.any(u[:, ~dom]) or np.any(z[:, ~halo]):
            raise ValueError("state does not respect the masks of Y_eps")
        return [np.concatenate([u[w, dom].ravel(), z[w, halo].ravel()]) for w in range(space.m)]

    return _Assembly(blocks, space.weights.copy(), load_vector, My, to_state, from_state, {"epsilon": spec.epsilon})


# ------------------------------------------------------------------ trajectory


@dataclass
class Trajectory:
    times: np.ndarray
    states: list  # per time: list of block vectors
    energy: list
    dissipation: list  # increments
    work: list  # increments <l_k - l_{k-1}, u_{k-1}>
    stability: list  # KKT residuals
    iterations: list
    coercivity: float = float("nan")
    load_lipschitz: float = float("nan")
    assembly: object = field(default=None, repr=False)

    @property
    def cumulative_dissipation(self):
        return np.concatenate([[0.0], np.cumsum(self.dissipation)])

    @property
    def cumulative_work(self):
        return np.concatenate([[0.0], np.cumsum(self.work)])

    @property
    def balance_residuals(self):
        E = np.asarray(self.energy)
        return np.abs(E + self.cumulative_dissipation - E[0] + self.cumulative_work)

    @property
    def balance_residual(self):
        return float(self.balance_residuals[-1])

    def state(self, k):
        return self.assembly.to_state(self.states[k])

    def ynorm_distance(self, j, k):
        M = self.assembly.ynorm
        tot = 0.0
        for p, a, b in zip(self.assembly.block_weights, self.states[j], self.states[k]):
            dy = b - a
            tot += p * float(dy @ (M @ dy))
        return math.sqrt(max(tot, 0.0))

    def lipschitz_check(self, factor=1e-6):
        """Largest ratio ||y_k - y_j|| / (Lip(l)/C |t_k - t_j|) over all pairs."""
        bound = self.load_lipschitz / self.coercivity
        worst = 0.0
        n = len(self.times)
        for j in range(n):
            for k in range(j + 1, n):
                dist = self.ynorm_distance(j, k)
                allowed = bound * (self.times[k] - self.times[j]) * (1 + factor) + 1e-12
                worst = max(worst, dist / allowed)
        return worst

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "energy", "cumulative_dissipation", "work", "balance_residual", "stability_residual"])
        for row in zip(
            self.times, self.energy, self.cumulative_dissipation, self.cumulative_work, self.balance_residuals, self.stability
        ):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def _coercivity(asm: _Assembly):
    M = asm.ynorm
    vals = []
    for b in asm.blocks:
        n = b.Q.shape[0]
        if n <= 3000:
            lam = sla.eigh(b.Q.toarray(), M.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0]
        else:
            lam = spla.eigsh(b.Q, k=1, M=M.tocsc(), sigma=0, which="LM", return_eigenvectors=False)[0]
        vals.append(lam)
    c = float(min(vals))
    if c <= 0:
        raise CoercivityError("assembled quadratic form is not coercive on Y")
    return c


def _dual_norm(asm: _Assembly, df):
    M = asm.ynorm.tocsc()
    nv = asm.blocks[0].nv
    pad = np.concatenate([df, np.zeros(M.shape[0] - nv)])
    x = spla.spsolve(M, pad)
    return math.sqrt(max(float(pad @ x), 0.0))


def _evolve(asm: _Assembly, y0: Sequence[np.ndarray], times, tol=1e-9) -> Trajectory:
    times = np.asarray(times, float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    P = asm.block_weights
    f_prev = asm.load_vector(times[0])
    ys = [np.asarray(y, float).copy() for y in y0]
    nv = asm.blocks[0].nv
    # initial state must be stable
    r0 = max(b.kkt(y[:nv], y[nv:], f_prev, y[nv:]) for b, y in zip(asm.blocks, ys))
    if r0 > 1e-8:
        raise ValueError(f"initial state is not stable (residual {r0:.3e}); use initial_state()")

    def total_energy(states, f):
        return math.fsum(p * b.energy(y[:nv], y[nv:], f) for p, b, y in zip(P, asm.blocks, states))

    traj = Trajectory(times, [ys], [total_energy(ys, f_prev)], [], [], [r0], [0], assembly=asm)
    lip = 0.0
    for k in range(1, times.size):
        f = asm.load_vector(times[k])
        lip = max(lip, _dual_norm(asm, f - f_prev) / (times[k] - times[k - 1]))
        new, diss, res, its = [], [], 0.0, 0
        for p, b, y in zip(P, asm.blocks, ys):
            v, z, it, r = b.step(f, y[nv:], tol=tol)
            diss.append(p * b.dissipation(z - y[nv:]))
            new.append(np.concatenate([v, z]))
            res, its = max(res, r), max(its, it)
        work = math.fsum(p * float((f - f_prev) @ y[:nv]) for p, y in zip(P, ys))
        traj.states.append(new)
        traj.energy.append(total_energy(new, f))
        traj.dissipation.append(math.fsum(diss))
        traj.work.append(work)
        traj.stability.append(res)
        traj.iterations.append(its)
        ys, f_prev = new, f
    traj.coercivity = _coercivity(asm)
    traj.load_lipschitz = lip
    return traj


def zero_state(asm: _Assembly):
    return [np.zeros(b.Q.shape[0]) for b in asm.blocks]


def initial_state(spec: ERISSpec, t0=0.0) -> ERISState:
    """Stable initial state: one incremental step from the zero state at t0."""
    asm = assemble_eps(spec)
    f = asm.load_vector(t0)
    out = []
    for b in asm.blocks:
        v, z, _, _ = b.step(f, np.zeros(b.nz))
        out.append(np.concatenate([v, z]))
    return asm.to_state(out)


def evolve(spec: ERISSpec, times, y0=None, tol=1e-9) -> Trajectory:
    """Incremental minimization on a time grid; y0 defaults to the zero state."""
    asm = assemble_eps(spec)
    if y0 is None:
        y0 = zero_state(asm)
    elif isinstance(y0, ERISState):
        y0 = asm.from_state(y0)
    return _evolve(asm, y0, times, tol)


def incremental_step(spec: ERISSpec, t, y_prev: ERISState, tol=1e-9) -> ERISState:
    asm = assemble_eps(spec)
    f = asm.load_vector(t)
    ys = asm.from_state(y_prev)
    out = []
    for b, y in zip(asm.blocks, ys):
        v, z, _, _ = b.step(f, y[b.nv:], tol=tol)
        out.append(np.concatenate([v, z]))
    return asm.to_state(out)


def eps_energy(spec: ERISSpec, t, state: ERISState):
    """E_eps(t, y) computed on the lattice and through the unfolded form."""
    from .unfolding import transform_energy

    space, grid, graph = spec.space, spec.grid, spec.graph
    vol = grid.cell_volume
    e = sym_gradient_array(state.u.values, spec.epsilon, graph, 1, False)
    y = np.concatenate([e, state.z.values], axis=-1)
    integ = QuadraticIntegrand(space, graph, spec.A)
    direct = transform_energy(integ.density, RandomField(space, grid, y), tol=1e-10)
    extra = 0.0
    if spec.gamma is not None and spec.G:
        gz = gradient_array(state.z.values, spec.epsilon, grid.d, 1, False)
        from .probability import stationary_extension

        Gfield = RandomVariable(space, np.broadcast_to(np.asarray(spec.G, float), (space.m,)).reshape(-1, 1))
        gs = stationary_extension(Gfield, grid).values[..., 0]
        dens = gs * np.sum(gz**2, axis=(-1, -2)) * spec.epsilon ** (2 * spec.gamma)
        extra = float(space.weights @ dens.reshape(space.m, -1).sum(axis=1)) * vol
    l = TwoScaleFunction.deterministic(space, lambda x: spec.load(t, x), grid.d)
    lv = fold(l, grid, spec.order).values * grid.domain_mask[None, ..., None]
    work = float(space.weights @ np.sum((lv * state.u.values).reshape(space.m, -1), axis=1)) * vol
    return direct + extra - work


@dataclass
class StabilityReport:
    kkt_residual: float
    max_violation: float
    certificate: np.ndarray = None

    @property
    def stable(self):
        return self.kkt_residual < 1e-8 and self.max_violation <= 1e-8


def stability_check(spec: ERISSpec, t, state: ERISState, probes=20, seed=0) -> StabilityReport:
    """KKT check plus probe directions for E(t, y) <= E(t, y + v) + Psi(v)."""
    asm = assemble_eps(spec)
    f = asm.load_vector(t)
    ys = asm.from_state(state)
    rng = np.random.default_rng(seed)
    kkt, worst, cert = 0.0, 0.0, None
    for w, (b, y) in enumerate(zip(asm.blocks, ys)):
        nv = b.nv
        v, z = y[:nv], y[nv:]
        kkt = max(kkt, b.kkt(v, z, f, z))
        e0 = b.energy(v, z, f)
        dirs = [rng.normal(size=y.size) for _ in range(probes)]
        # one-site plastic probes along the sign of the z-force
        g = b.Kzv @ v + b.Kzz @ z
        for j in np.argsort(-(np.abs(g) - b.weights))[: min(5, b.nz)]:
            dv = np.zeros(y.size)
            dv[nv + j] = -np.sign(g[j]) if g[j] else 1.0
            dirs.append(dv)
        for dv in dirs:
            for s in (1e-3, 1e-2, 1e-1):
                trial = y + s * dv
                gap = b.energy(trial[:nv], trial[nv:], f) + b.dissipation(s * dv[nv:]) - e0
                viol = -gap / b.scale
                if viol > worst:
                    worst, cert = viol, (w, s * dv)
    return StabilityReport(kkt, worst, cert)


# ------------------------------------------------------------------ limit problems


@dataclass(frozen=True, eq=False)
class HomogenizedERISSpec:
    """Limit problem on a reference grid of spacing h.

    mode = "two_scale": unknowns U, chi coefficients and Z(w, x).
    mode = "two_scale_shared_z": same with Z independent of w.
    mode = "deterministic": U, Z with A_hom and averaged dissipation.
    """

    space: ProbabilitySpace
    graph: LatticeGraph
    h: float
    box: tuple
    A: np.ndarray
    yield_stress: np.ndarray
    load: Callable
    mode: str = "two_scale"
    order: int = 2

    @property
    def grid(self):
        lower, upper = self.box
        return Grid.from_box(self.h, lower, upper, self.graph.generators)


def assemble_homogenized(spec: HomogenizedERISSpec) -> _Assembly:
    space, graph = spec.space, spec.graph
    grid = spec.grid
    d, k, vol, m = grid.d, graph.k, grid.cell_volume, space.m
    A = np.broadcast_to(np.asarray(spec.A, float), (m, 2 * k, 2 * k))
    sy = np.broadcast_to(np.asarray(spec.yield_stress, float), (m, k))
    dom = grid.domain_mask.ravel()
    halo = grid.halo_mask.ravel()
    nsite = grid.size
    nh = int(halo.sum())
    S = sym_gradient_matrix(grid, graph, grid.domain_mask)
    Sh = S[np.flatnonzero(np.repeat(halo, k))]  # (nh*k, nU)
    nU = Sh.shape[1]
    lens = graph.lengths()
    P = space.weights

    if spec.mode == "deterministic":
        integ = QuadraticIntegrand(space, graph, A)
        Ahom = assemble_homogenized_tensor(integ).A_hom
        E = sp.bmat([[Sh, None], [None, sp.identity(nh * k)]]).tocsr()
        perm = np.arange(2 * nh * k).reshape(2, nh, k).transpose(1, 0, 2).ravel()
        E = E[perm]
        Q = vol * (E.T @ sp.kron(sp.identity(nh), Ahom) @ E)
        weights = vol * np.tile(P @ sy * lens, nh)
        nv, nZ = nU, nh * k
        r = 0
    else:
        basis = pot_basis(space, d)
        L = potential_strain_matrix(space, graph, basis)  # (m, k, r)
        r = basis.shape[0]
        shared = spec.mode == "two_scale_shared_z"
        if spec.mode not in ("two_scale", "two_scale_shared_z"):
            raise ValueError(f"unknown mode {spec.mode!r}")
        nZ = nh * k if shared else nh * m * k
        nv = nU + nh * r
        blocks_Q = []
        for w in range(m):
            # strain at halo sites for sample w: Sh U + L_w c
            Sw = sp.hstack([Sh, sp.kron(sp.identity(nh), sp.csr_matrix(L[w]))]).tocsr()  # (nh*k, nv)
            if shared:
                Zsel = sp.identity(nh * k, format="csr")
            else:
                Zsel = sp.kron(sp.identity(nh), sp.kron(sp.csr_matrix(np.eye(m)[w:w + 1]), sp.identity(k)), format="csr")
            Ew = sp.bmat([[Sw, sp.csr_matrix((nh * k, nZ))], [sp.csr_matrix((nh * k, nv)), Zsel]]).tocsr()
            perm = np.arange(2 * nh * k).reshape(2, nh, k).transpose(1, 0, 2).ravel()
            Ew = Ew[perm]
            blocks_Q.append(P[w] * (Ew.T @ sp.kron(sp.identity(nh), sp.csr_matrix(A[w])) @ Ew))
        Q = vol * sum(blocks_Q[1:], blocks_Q[0])
        if shared:
            weights = vol * np.tile(P @ sy * lens, nh)
        else:
            weights = vol * np.tile((P[:, None] * sy * lens).ravel(), nh)
    block = L1QuadraticBlock(sp.csr_matrix(Q), nv, weights, vol)

    def load_vector(t):
        pts, wq = quadrature_points(grid, spec.order)
        lv = np.asarray(spec.load(t, pts.reshape(-1, d)), float).reshape(nsite, len(wq), d)
        lavg = np.einsum("sqd,q->sd", lv, wq)
        f = vol * lavg[dom].ravel()
        return np.concatenate([f, np.zeros(nv - nU)])

    Gu = sp.kron(gradient_matrix(grid, False, grid.domain_mask), sp.identity(d), format="csr")
    zw = np.tile(np.repeat(P, k), nh) if spec.mode == "two_scale" else np.ones(nZ)
    parts = [sp.identity(nU) + Gu.T @ Gu]
    if nv > nU:
        parts.append(sp.identity(nv - nU))
    parts.append(sp.diags(zw))
    My = vol * sp.block_diag(parts, format="csr")

    def to_state(ys):
        y = ys[0]
        U = np.zeros((nsite, d))
        U[dom] = y[:nU].reshape(-1, d)
        zz = y[nv:]
        if spec.mode == "two_scale":
            Z = np.zeros((m, nsite, k))
            Z[:, halo] = zz.reshape(nh, m, k).transpose(1, 0, 2)
        else:
            Z = np.zeros((nsite, k))
            Z[halo] = zz.reshape(nh, k)
        c = y[nU:nv].reshape(nh, r) if r else np.zeros((nh, 0))
        return {"U": U.reshape(grid.shape + (d,)), "Z": Z, "chi_coords": c, "grid": grid}

    return _Assembly([block], np.ones(1), load_vector, My, to_state, None, {"h": spec.h, "mode": spec.mode})


def evolve_homogenized(spec: HomogenizedERISSpec, times, tol=1e-9) -> Trajectory:
    asm = assemble_homogenized(spec)
    return _evolve(asm, zero_state(asm), times, tol)


# ------------------------------------------------------------------ study


@dataclass
class EvolutionStudy:
    epsilons: list
    sample_times: list
    error_u: dict = field(default_factory=dict)  # t -> list over eps
    error_z: dict = field(default_factory=dict)
    error_grad: dict = field(default_factory=dict)
    grad_z_norm: dict = field(default_factory=dict)
    balance_residual: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "epsilon", "strong_error_u", "strong_error_grad", "strong_error_z", "scaled_grad_z_norm"])
        for t in self.sample_times:
            for i, e in enumerate(self.epsilons):
                w.writerow(
                    [repr(float(t)), repr(float(e)), repr(float(self.error_u[t][i])), repr(float(self.error_grad[t][i])),
                     repr(float(self.error_z[t][i])), repr(float(self.grad_z_norm[t][i]))]
                )
        return buf.getvalue()


def _piecewise_constant_on(grid, values, x):
    """Cell-wise constant extension of site values (..., nsite, n) to points, zero outside."""
    j = np.floor(x / grid.epsilon + 0.5).astype(int) - np.asarray(grid.origin)
    inside = np.all((j >= 0) & (j < np.asarray(grid.shape)), axis=1)
    flat = np.ravel_multi_index(tuple(np.clip(j, 0, np.asarray(grid.shape) - 1).T), grid.shape)
    out = values[..., flat, :]
    return out * inside[:, None]


def evolution_convergence_study(spec: ERISSpec, epsilons, times, sample_times, reference_refinement=4, tol=1e-9):
    """eps sweep of the evolution against the limit evolution on a reference grid.

    Without gradient plasticity the limit is the two-scale system with Z(w, x);
    with it, the deterministic system with A_hom.  Both start from zero (stable
    for zero initial load), which is its own recovery sequence.  The reference
    grid is ``reference_refinement`` times finer than the smallest eps so that it
    never coincides with an eps-level grid.
    """
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ValueError("empty epsilon list")
    times = np.asarray(times, float)
    space, graph = spec.space, spec.graph
    d, k = graph.d, graph.k
    h = min(epsilons) / reference_refinement
    gradient_plastic = spec.gamma is not None and spec.G
    mode = "two_scale_shared_z" if gradient_plastic else "two_scale"
    hspec = HomogenizedERISSpec(space, graph, h, spec.box, spec.A, spec.yield_stress, spec.load, mode, spec.order)
    href = evolve_homogenized(hspec, times, tol)
    study = EvolutionStudy(epsilons, [float(t) for t in sample_times])
    sample_idx = [int(np.argmin(np.abs(times - t))) for t in sample_times]
    basis = pot_basis(space, d)
    for t in study.sample_times:
        study.error_u[t], study.error_z[t], study.error_grad[t], study.grad_z_norm[t] = [], [], [], []
    for eps in epsilons:
        es = spec.with_epsilon(eps)
        traj = evolve(es, times, tol=tol)
        study.balance_residual.append(traj.balance_residual)
        grid = es.grid
        for t, ki in zip(study.sample_times, sample_idx):
            st = traj.state(ki)
            lim = href.state(ki)
            rg = lim["grid"]
            Uf = TwoScaleFunction.deterministic(space, lambda x, U=lim["U"], rg=rg: freudenthal_interpolant(U, rg, x), d)
            study.error_u[t].append(two_scale_distance(st.u, Uf, order=es.order).strong_error)
            Zv = lim["Z"]
            if mode == "two_scale":
                Zflat = Zv  # (m, nsite, k)
                Zfun = TwoScaleFunction(space, lambda x, Z=Zflat, rg=rg: _piecewise_constant_on(rg, Z, x), k)
            else:
                Zfun = TwoScaleFunction.deterministic(space, lambda x, Z=Zv, rg=rg: _piecewise_constant_on(rg, Z, x), k)
            study.error_z[t].append(two_scale_distance(st.z, Zfun, order=es.order).strong_error)
            # gradient against grad U + chi
            c = lim["chi_coords"]
            chi_site = np.zeros((rg.size, basis.shape[0]))
            chi_site[rg.halo_mask.ravel()] = c if c.size else 0.0

            def grad_target(x, U=lim["U"], rg=rg, chi_site=chi_site):
                gU = freudenthal_interpolant(U, rg, x, with_gradient=True)[1].reshape(1, x.shape[0], d * d)
                if basis.shape[0]:
                    cx = _piecewise_constant_on(rg, chi_site, x)  # (npts, r)
                    return gU + np.einsum("pr,rmn->mpn", cx, basis)
                return np.broadcast_to(gU, (space.m, x.shape[0], d * d))

            gu = gradient_array(st.u.values, eps, d, 1, False).reshape(st.u.values.shape[:-1] + (d * d,))
            study.error_grad[t].append(
                two_scale_distance(RandomField(space, grid, gu), TwoScaleFunction(space, grad_target, d * d), order=es.order).strong_error
            )
            gz = gradient_array(st.z.values, eps, d, 1, False)
            sc = eps ** (spec.gamma if spec.gamma is not None else 0.0)
            study.grad_z_norm[t].append(RandomField(space, grid, sc * gz.reshape(gz.shape[:-2] + (-1,))).norm())
    return study, href
