"""Functions on the scaled lattice eps*Z^d and their finite-difference calculus.

A lattice function lives on a finite window of sites.  Site ``idx`` of the
window sits at the point ``eps * (origin + idx)``.  Values outside the window
are either zero (``zero_extension``) or obtained by wrapping the window
(``periodic``).  Arrays keep the spatial axes first and the component axis
last; random fields prepend a sample axis.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

ZERO = "zero_extension"
PERIODIC = "periodic"
CONVENTIONS = (ZERO, PERIODIC)


def _as_int_tuple(v, d=None):
    t = tuple(int(x) for x in np.atleast_1d(v))
    if d is not None and len(t) == 1 and d > 1:
        t = t * d
    return t


@dataclass(frozen=True, eq=False)
class Grid:
    """Finite window of eps*Z^d with masks for O and its edge halo."""

    epsilon: float
    shape: tuple
    origin: tuple = None
    domain_mask: np.ndarray = None
    halo_mask: np.ndarray = None
    generators: tuple = field(default=None, repr=False)

    def __post_init__(self):
        shape = _as_int_tuple(self.shape)
        object.__setattr__(self, "shape", shape)
        d = len(shape)
        origin = (0,) * d if self.origin is None else _as_int_tuple(self.origin, d)
        object.__setattr__(self, "origin", origin)
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("epsilon must be positive")
        if any(n < 1 for n in shape) or len(origin) != d:
            raise ValueError("bad window extents")
        dom = np.ones(shape, bool) if self.domain_mask is None else np.asarray(self.domain_mask, bool)
        halo = dom.copy() if self.halo_mask is None else np.asarray(self.halo_mask, bool)
        if dom.shape != shape or halo.shape != shape:
            raise ValueError("mask shape does not match window")
        if np.any(dom & ~halo):
            raise ValueError("domain mask must be contained in halo mask")
        dom.setflags(write=False)
        halo.setflags(write=False)
        object.__setattr__(self, "domain_mask", dom)
        object.__setattr__(self, "halo_mask", halo)
        if self.generators is not None:
            gens = tuple(_as_int_tuple(b) for b in self.generators)
            object.__setattr__(self, "generators", gens)
            if not np.array_equal(halo, dilate_by_generators(dom, gens)):
                raise ValueError("halo mask is not the generator dilation of the domain")

    @classmethod
    def window(cls, epsilon, shape, origin=None):
        """Full window: every site belongs to the domain."""
        return cls(float(epsilon), _as_int_tuple(shape), origin)

    @classmethod
    def from_box(cls, epsilon, lower, upper, generators=None, margin=None):
        """Grid for the open box O = (lower, upper) with its halo O^{+eps}.

        The window is padded by ``margin`` sites (default: the longest
        generator component) on each side.
        """
        lower = np.atleast_1d(np.asarray(lower, float))
        upper = np.atleast_1d(np.asarray(upper, float))
        d = lower.size
        if generators is None:
            generators = [tuple(int(i == j) for i in range(d)) for j in range(d)]
        gens = tuple(_as_int_tuple(b) for b in generators)
        if margin is None:
            margin = max(max(abs(c) for c in b) for b in gens)
        tol = 1e-9
        lo = np.floor(lower / epsilon + tol).astype(int) + 1
        hi = np.ceil(upper / epsilon - tol).astype(int) - 1
        if np.any(hi < lo):
            raise ValueError("box contains no lattice site")
        origin = lo - margin
        shape = hi - lo + 1 + 2 * margin
        dom = np.zeros(tuple(shape), bool)
        dom[tuple(slice(margin, margin + hi[a] - lo[a] + 1) for a in range(d))] = True
        halo = dilate_by_generators(dom, gens)
        return cls(float(epsilon), tuple(shape), tuple(origin), dom, halo, gens)

    @property
    def d(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return self.epsilon ** self.d

    def coordinates(self):
        """Integer lattice coordinates x/eps of all sites, shape (size, d)."""
        idx = np.indices(self.shape).reshape(self.d, -1).T
        return idx + np.asarray(self.origin)

    def points(self):
        """Physical site positions, shape (size, d)."""
        return self.epsilon * self.coordinates().astype(float)

    def lower_corner(self):
        return self.epsilon * (np.asarray(self.origin, float) - 0.5)

    def upper_corner(self):
        return self.epsilon * (np.asarray(self.origin, float) + np.asarray(self.shape) - 0.5)

    def describe(self):
        return {
            "epsilon": self.epsilon,
            "shape": list(self.shape),
            "origin": list(self.origin),
        }


def dilate_by_generators(mask, generators):
    """Sites x that are in ``mask`` or have x + b in ``mask`` for some generator b."""
    out = mask.copy()
    for b in generators:
        out |= shift_array(mask, b, 0, periodic=False)
    return out


def _shift_axis(a, s, axis, periodic):
    if s == 0:
        return a
    if periodic:
        return np.roll(a, -s, axis=axis)
    n = a.shape[axis]
    out = np.zeros_like(a)
    if abs(s) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if s > 0:
        dst[axis], src[axis] = slice(0, n - s), slice(s, n)
    else:
        dst[axis], src[axis] = slice(-s, n), slice(0, n + s)
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift_array(a, offset, first_axis=0, periodic=False):
    """Return b with b[idx] = a[idx + offset] on the spatial axes.

    Spatial axes start at ``first_axis``.  Outside the window the value is 0
    unless ``periodic``.
    """
    out = a
    for k, s in enumerate(offset):
        out = _shift_axis(out, int(s), first_axis + k, periodic)
    return out


def unit(d, i, sign=1):
    e = [0] * d
    e[i] = sign
    return tuple(e)


def gradient_array(a, eps, d, first_axis=0, periodic=False):
    """Forward differences; appends a trailing axis of length d."""
    return np.stack(
        [(shift_array(a, unit(d, i), first_axis, periodic) - a) / eps for i in range(d)],
        axis=-1,
    )


def divergence_array(g, eps, d, first_axis=0, periodic=False):
    """Negative divergence, the m_eps-adjoint of ``gradient_array``."""
    out = np.zeros(g.shape[:-1])
    for i in range(d):
        gi = g[..., i]
        out += (shift_array(gi, unit(d, i, -1), first_axis, periodic) - gi) / eps
    return out


@dataclass(frozen=True, eq=False)
class LatticeFunction:
    """Values over (site, component) on a grid window."""

    grid: Grid
    values: np.ndarray
    boundary: str = ZERO

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim == self.grid.d:
            v = v[..., None]
        if v.shape[:-1] != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not fit window {self.grid.shape}")
        if self.boundary not in CONVENTIONS:
            raise ValueError(f"unknown boundary convention {self.boundary!r}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite lattice values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def components(self):
        return self.values.shape[-1]

    @property
    def periodic(self):
        return self.boundary == PERIODIC

    def inner(self, other):
        return float(np.sum(self.values * other.values) * self.grid.cell_volume)

    def norm(self, p=2):
        w = self.grid.cell_volume
        if np.isinf(p):
            return float(np.max(np.abs(self.values)))
        return float((np.sum(np.abs(self.values) ** p) * w) ** (1.0 / p))

    def vanishes_off_domain(self):
        return bool(np.all(self.values[~self.grid.domain_mask] == 0))


def discrete_gradient(u: LatticeFunction) -> LatticeFunction:
    """Forward difference quotients; component c*d + i holds direction i of u_c."""
    g = gradient_array(u.values, u.grid.epsilon, u.grid.d, 0, u.periodic)
    g = g.reshape(u.grid.shape + (-1,))
    return LatticeFunction(u.grid, g, u.boundary)


def discrete_divergence(g: LatticeFunction) -> LatticeFunction:
    d = g.grid.d
    if g.components % d:
        raise ValueError("component count must be a multiple of d")
    arr = g.values.reshape(g.grid.shape + (g.components // d, d))
    out = divergence_array(arr, g.grid.epsilon, d, 0, g.periodic)
    return LatticeFunction(g.grid, out, g.boundary)


def floor_index(grid: Grid, points):
    """Window index of the site whose cell x + eps*Box contains each point."""
    pts = np.atleast_2d(np.asarray(points, float))
    j = np.floor(pts / grid.epsilon + 0.5).astype(int) - np.asarray(grid.origin)
    if np.any(j < 0) or np.any(j >= np.asarray(grid.shape)):
        raise ValueError("query point outside the window")
    return j


def piecewise_constant(u: LatticeFunction, points):
    j = floor_index(u.grid, points)
    return u.values[tuple(j.T)]


def cell_quadrature(d, order=1):
    """Tensor Gauss-Legendre rule on the unit cell Box; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(int(order))
    x, w = x / 2.0, w / 2.0
    grids = np.meshgrid(*([x] * d), indexing="ij")
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


def quadrature_points(grid: Grid, order=1):
    """Points (size, q, d) and weights (q,) covering every cell of the window."""
    nodes, weights = cell_quadrature(grid.d, order)
    pts = grid.points()[:, None, :] + grid.epsilon * nodes[None, :, :]
    return pts, weights


def _evaluate(U, pts):
    flat = pts.reshape(-1, pts.shape[-1])
    val = np.asarray(U(flat), float)
    if val.ndim == 1:
        val = val[:, None]
    if not np.all(np.isfinite(val)):
        raise ValueError("non-finite function values")
    return val.reshape(pts.shape[:-1] + (val.shape[-1],))


def discretize(U: Callable, grid: Grid, order=1, boundary=ZERO) -> LatticeFunction:
    """Cell averages of a continuum function by per-cell quadrature."""
    pts, w = quadrature_points(grid, order)
    vals = np.einsum("sqn,q->sn", _evaluate(U, pts), w)
    vals = vals.reshape(grid.shape + (-1,))
    return LatticeFunction(grid, vals, boundary)


def freudenthal_interpolant(values, grid: Grid, points, with_gradient=False):
    """Piecewise-affine interpolation on the Freudenthal (Kuhn) triangulation.

    ``values`` has shape (*grid.shape, n).  Each unit cube [j, j+1] is split
    into the d! simplices obtained by ordering the fractional coordinates.
    Vertices outside the window count as zero.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    d = grid.d
    y = pts / grid.epsilon - np.asarray(grid.origin)
    base = np.floor(y).astype(int)
    frac = y - base
    order = np.argsort(-frac, axis=1, kind="stable")
    n = values.shape[-1]
    shape = np.asarray(grid.shape)

    def lookup(idx):
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        out = np.zeros((idx.shape[0], n))
        out[inside] = values[tuple(idx[inside].T)]
        return out

    vertex = base.copy()
    prev = lookup(vertex)
    result = prev.copy()
    grad = np.zeros((pts.shape[0], n, d))
    rows = np.arange(pts.shape[0])
    for k in range(d):
        axis = order[:, k]
        vertex[rows, axis] += 1
        cur = lookup(vertex)
        step = cur - prev
        result += frac[rows, axis][:, None] * step
        grad[rows, :, axis] = step / grid.epsilon
        prev = cur
    if with_gradient:
        return result, grad
    return result


def gradient_matrix(grid: Grid, periodic=False, mask=None):
    """Sparse forward-difference matrix from site values to (site, direction) rows.

    Row ``s*d + i`` holds (u(s+e_i) - u(s))/eps.  With ``mask`` only the
    columns of the masked sites are kept (unknowns of an L_0 problem).
    """
    d, n, eps = grid.d, grid.size, grid.epsilon
    idx = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for i in range(d):
        if periodic:
            nb = np.roll(idx, -1, axis=i)
            valid = np.ones(grid.shape, bool)
        else:
            nb = shift_array(idx + 1, unit(d, i), 0, False) - 1
            valid = nb >= 0
        r = idx * d + i
        rows += [r.ravel(), r[valid]]
        cols += [idx.ravel(), nb[valid]]
        vals += [np.full(n, -1.0 / eps), np.full(int(valid.sum()), 1.0 / eps)]
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * d, n)
    )
    if mask is not None:
        G = G[:, np.flatnonzero(np.asarray(mask).ravel())]
    return G


def _header(u: LatticeFunction):
    return {
        "epsilon": repr(u.grid.epsilon),
        "extents": " ".join(map(str, u.grid.shape)),
        "origin": " ".join(map(str, u.grid.origin)),
        "components": str(u.components),
        "convention": u.boundary,
    }


def to_csv(u: LatticeFunction) -> str:
    """Header lines followed by row-major values, one site per row."""
    buf = io.StringIO()
    for k, v in _header(u).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    for row in u.values.reshape(-1, u.components):
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def from_csv(text: str) -> LatticeFunction:
    head, rows = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            k, v = line[1:].strip().split("=", 1)
            head[k] = v
        elif line.strip():
            rows.append([float(x) for x in line.split(",")])
    shape = tuple(int(x) for x in head["extents"].split())
    origin = tuple(int(x) for x in head["origin"].split())
    grid = Grid.window(float(head["epsilon"]), shape, origin)
    vals = np.asarray(rows).reshape(shape + (int(head["components"]),))
    return LatticeFunction(grid, vals, head["convention"])


def to_bytes(u: LatticeFunction) -> bytes:
    """Binary layout: one text header line, then little-endian float64 values."""
    head = ";".join(f"{k}={v}" for k, v in _header(u).items()) + "\n"
    return head.encode() + u.values.astype("<f8").tobytes(order="C")


def from_bytes(data: bytes) -> LatticeFunction:
    line, _, body = data.partition(b"\n")
    head = dict(kv.split("=", 1) for kv in line.decode().split(";"))
    shape = tuple(int(x) for x in head["extents"].split())
    origin = tuple(int(x) for x in head["origin"].split())
    grid = Grid.window(float(head["epsilon"]), shape, origin)
    vals = np.frombuffer(body, "<f8").reshape(shape + (int(head["components"]),))
    return LatticeFunction(grid, vals, head["convention"])


def lattice_points_in(grid: Grid, mask) -> np.ndarray:
    return grid.points()[np.asarray(mask).ravel()]


__all__: Sequence[str] = [
    "Grid",
    "LatticeFunction",
    "ZERO",
    "PERIODIC",
    "discrete_gradient",
    "discrete_divergence",
    "piecewise_constant",
    "discretize",
    "cell_quadrature",
    "quadrature_points",
    "freudenthal_interpolant",
    "gradient_matrix",
    "shift_array",
    "gradient_array",
    "divergence_array",
    "dilate_by_generators",
    "to_csv",
    "from_csv",
    "to_bytes",
    "from_bytes",
]
