"""Chart grids, field containers and finite-difference calculus.

Every field in the package lives on a :class:`ChartGrid`, a uniform
rectangular sampling of a single coordinate chart.  Arrays are stored
node-major: a field with component shape ``c`` on a grid with extents
``(N0, ..., Nd-1)`` is an array of shape ``(N0, ..., Nd-1) + c``.

Two boundary models are supported:

``periodic``
    The chart is a flat torus; stencils wrap around.
``frozen``
    The chart is a box.  Fourth-order central stencils are used wherever
    they fit, second-order one-sided/central stencils on the two outermost
    node layers.  Evolution code keeps a collar of :data:`COLLAR` layers
    fixed at its initial values.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Sequence, Union

import numpy as np

from . import _kernels

DEFAULT_MAX_POINTS = 1 << 22
COLLAR = 3
BOUNDARIES = ("periodic", "frozen")


class GridError(ValueError):
    """Raised for invalid grids or fields that do not match their grid."""


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChartGrid:
    """Uniform grid on one coordinate chart.

    Parameters
    ----------
    extents : sequence of int
        Number of nodes per axis (each at least 8).
    spacing : sequence of float
        Node spacing per axis.
    boundary : {"periodic", "frozen"}
    origin : sequence of float, optional
        Coordinates of node ``(0, ..., 0)``; zeros by default.
    max_points : int
        Memory budget; construction fails when the node count exceeds it.
    """

    extents: tuple
    spacing: tuple
    boundary: str = "periodic"
    origin: tuple = None
    max_points: int = DEFAULT_MAX_POINTS

    def __post_init__(self):
        extents = tuple(int(n) for n in self.extents)
        spacing = tuple(float(h) for h in self.spacing)
        origin = (0.0,) * len(extents) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(extents) not in (2, 3, 4):
            raise GridError(f"dimension must be 2, 3 or 4, got {len(extents)}")
        if len(spacing) != len(extents) or len(origin) != len(extents):
            raise GridError("extents, spacing and origin must have equal length")
        if min(extents) < 8:
            raise GridError(f"every extent must be >= 8, got {extents}")
        if not all(h > 0 and math.isfinite(h) for h in spacing):
            raise GridError(f"spacing must be positive, got {spacing}")
        if self.boundary not in BOUNDARIES:
            raise GridError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        if math.prod(extents) > self.max_points:
            raise GridError(
                f"grid of {math.prod(extents)} points exceeds the memory budget of {self.max_points}"
            )
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def box(cls, dimension, n, lower, upper, boundary="frozen", max_points=DEFAULT_MAX_POINTS):
        """Grid with ``n`` nodes per axis spanning ``[lower, upper]``.

        For periodic grids the upper end is excluded (``h = L/n``); for frozen
        grids both ends are nodes (``h = L/(n-1)``).
        """
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (dimension,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (dimension,))
        ns = np.broadcast_to(np.asarray(n, dtype=int), (dimension,))
        if boundary == "periodic":
            spacing = (upper - lower) / ns
        else:
            spacing = (upper - lower) / (ns - 1)
        return cls(tuple(ns), tuple(spacing), boundary, tuple(lower), max_points)

    @property
    def dimension(self) -> int:
        return len(self.extents)

    @property
    def shape(self) -> tuple:
        return self.extents

    @property
    def npoints(self) -> int:
        return math.prod(self.extents)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def lengths(self) -> tuple:
        """Coordinate length of the chart along each axis."""
        if self.periodic:
            return tuple(n * h for n, h in zip(self.extents, self.spacing))
        return tuple((n - 1) * h for n, h in zip(self.extents, self.spacing))

    def coordinates(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.extents[axis])

    def mesh(self, sparse: bool = True) -> list:
        """Coordinate arrays, broadcastable to the grid shape."""
        return np.meshgrid(*[self.coordinates(a) for a in range(self.dimension)],
                           indexing="ij", sparse=sparse)

    def node_coordinates(self, index) -> np.ndarray:
        return np.array([self.origin[a] + self.spacing[a] * index[a] for a in range(self.dimension)])

    def nearest_node(self, point) -> tuple:
        """Index of the node closest to a coordinate point (must be on the grid)."""
        point = np.asarray(point, dtype=float)
        idx = np.rint((point - np.asarray(self.origin)) / np.asarray(self.spacing)).astype(int)
        if self.periodic:
            idx = idx % np.asarray(self.extents)
        elif np.any(idx < 0) or np.any(idx >= np.asarray(self.extents)):
            raise GridError(f"point {point.tolist()} lies outside the chart")
        return tuple(int(i) for i in idx)

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Per-node weights (without the cell volume); trapezoidal on frozen axes."""
        w = np.ones(self.extents)
        if not self.periodic:
            for axis in range(self.dimension):
                sl = [slice(None)] * self.dimension
                for end in (0, -1):
                    sl[axis] = end
                    w[tuple(sl)] *= 0.5
        w.flags.writeable = False
        return w

    def interior_mask(self, margin: int = COLLAR) -> np.ndarray:
        """Nodes at least ``margin`` layers away from a frozen boundary."""
        mask = np.ones(self.extents, dtype=bool)
        if self.periodic or margin <= 0:
            return mask
        for axis in range(self.dimension):
            sl = [slice(None)] * self.dimension
            sl[axis] = slice(0, margin)
            mask[tuple(sl)] = False
            sl[axis] = slice(self.extents[axis] - margin, None)
            mask[tuple(sl)] = False
        return mask

    def header(self) -> dict:
        return {
            "dimension": self.dimension,
            "extents": list(self.extents),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "boundary": self.boundary,
        }

    def refined(self) -> "ChartGrid":
        """Dyadic refinement sharing every node of this grid."""
        if self.periodic:
            ext = tuple(2 * n for n in self.extents)
        else:
            ext = tuple(2 * n - 1 for n in self.extents)
        return ChartGrid(ext, tuple(h / 2 for h in self.spacing), self.boundary, self.origin,
                         max(self.max_points, math.prod(ext)))


# --------------------------------------------------------------------------
# index bookkeeping for packed storage
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def sym_index(n: int) -> np.ndarray:
    """``idx[i, j]`` = position of the (i, j) entry in lower-triangle packing."""
    rows, cols = np.tril_indices(n)
    idx = np.empty((n, n), dtype=np.intp)
    idx[rows, cols] = np.arange(rows.size)
    idx[cols, rows] = np.arange(rows.size)
    idx.flags.writeable = False
    return idx


def sym_pack(mat: np.ndarray) -> np.ndarray:
    """Pack the lower triangle of ``(..., n, n)`` into ``(..., n(n+1)/2)``."""
    n = mat.shape[-1]
    rows, cols = np.tril_indices(n)
    return np.ascontiguousarray(mat[..., rows, cols])


def sym_unpack(packed: np.ndarray, n: int) -> np.ndarray:
    return packed[..., sym_index(n)]


@lru_cache(maxsize=None)
def bivector_pairs(n: int) -> tuple:
    return tuple(itertools.combinations(range(n), 2))


@lru_cache(maxsize=None)
def bivector_map(n: int) -> np.ndarray:
    """``T[A, i, j]`` = +1 if pair A is (i, j), -1 if it is (j, i), else 0."""
    pairs = bivector_pairs(n)
    t = np.zeros((len(pairs), n, n))
    for a, (i, j) in enumerate(pairs):
        t[a, i, j] = 1.0
        t[a, j, i] = -1.0
    t.flags.writeable = False
    return t


def bivector_inverse_metric(ginv: np.ndarray) -> np.ndarray:
    """Induced inverse metric on 2-forms: ``G^{AC} = g^{ac}g^{bd} - g^{ad}g^{bc}``."""
    n = ginv.shape[-1]
    pairs = bivector_pairs(n)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    gac = ginv[..., a[:, None], a[None, :]]
    gbd = ginv[..., b[:, None], b[None, :]]
    gad = ginv[..., a[:, None], b[None, :]]
    gbc = ginv[..., b[:, None], a[None, :]]
    return gac * gbd - gad * gbc


def bivector_from_full(r: np.ndarray) -> np.ndarray:
    """Project a ``(..., n, n, n, n)`` array onto Riemann-type symmetry, as a bivector matrix."""
    n = r.shape[-1]
    pairs = bivector_pairs(n)
    i = np.array([p[0] for p in pairs])
    j = np.array([p[1] for p in pairs])
    ii, jj = i[:, None], j[:, None]
    kk, ll = i[None, :], j[None, :]
    m = 0.25 * (r[..., ii, jj, kk, ll] - r[..., jj, ii, kk, ll]
                - r[..., ii, jj, ll, kk] + r[..., jj, ii, ll, kk])
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def bivector_to_full(m: np.ndarray) -> np.ndarray:
    n = _dim_from_bivector(m.shape[-1])
    t = bivector_map(n)
    tmp = np.einsum("...AB,Bkl->...Akl", m, t)
    return np.einsum("Aij,...Akl->...ijkl", t, tmp)


def _dim_from_bivector(nb: int) -> int:
    n = int(round((1 + math.sqrt(1 + 8 * nb)) / 2))
    if n * (n - 1) // 2 != nb:
        raise GridError(f"{nb} is not a bivector dimension")
    return n


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One real value per grid node."""

    grid: ChartGrid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.shape != self.grid.shape:
            raise GridError(f"scalar values of shape {values.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("scalar field contains non-finite values")
        object.__setattr__(self, "values", values)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)

    def max(self) -> float:
        return float(np.max(self.values))


Symmetry = Union[None, str, tuple]


def storage_shape(n: int, rank: int, symmetry: Symmetry) -> tuple:
    """Shape of the stored (independent) components of a tensor field."""
    if symmetry == "riemann":
        if rank != 4:
            raise GridError("riemann-type symmetry requires rank 4")
        nb = n * (n - 1) // 2
        return (nb * (nb + 1) // 2,)
    pairs = _normalize_pairs(symmetry, rank)
    shape = []
    slot = 0
    starts = {a for a, _ in pairs}
    while slot < rank:
        if slot in starts:
            shape.append(n * (n + 1) // 2)
            slot += 2
        else:
            shape.append(n)
            slot += 1
    return tuple(shape)


def _normalize_pairs(symmetry, rank) -> tuple:
    if symmetry in (None, "none", ()):
        return ()
    pairs = tuple(tuple(int(x) for x in p) for p in symmetry)
    used = set()
    for a, b in pairs:
        if b != a + 1 or b >= rank:
            raise GridError(f"symmetric pairs must be adjacent slots within rank {rank}: {pairs}")
        if a in used or b in used:
            raise GridError(f"symmetric pairs overlap: {pairs}")
        used.update((a, b))
    return tuple(sorted(pairs))


@dataclass(frozen=True, eq=False)
class TensorField:
    """Rank-k tensor field with valence and symmetry tags.

    ``valence`` holds one character per slot, ``"d"`` for covariant and
    ``"u"`` for contravariant.  ``symmetry`` is ``None``, a tuple of
    adjacent symmetric slot pairs such as ``((1, 2),)``, or ``"riemann"``.
    Only independent components are stored, so declared symmetries hold
    exactly; :meth:`full` expands them.
    """

    grid: ChartGrid
    components: np.ndarray
    valence: tuple
    symmetry: Symmetry = None

    def __post_init__(self):
        valence = tuple(self.valence)
        if any(v not in ("u", "d") for v in valence):
            raise GridError(f"valence entries must be 'u' or 'd', got {valence}")
        sym = self.symmetry
        if sym not in (None, "riemann"):
            sym = _normalize_pairs(sym, len(valence)) or None
        comps = _frozen_array(self.components)
        expected = self.grid.shape + storage_shape(self.grid.dimension, len(valence), sym)
        if comps.shape != expected:
            raise GridError(f"stored components have shape {comps.shape}, expected {expected}")
        if not np.all(np.isfinite(comps)):
            raise GridError("tensor field contains non-finite components")
        object.__setattr__(self, "valence", valence)
        object.__setattr__(self, "symmetry", sym)
        object.__setattr__(self, "components", comps)

    @property
    def rank(self) -> int:
        return len(self.valence)

    @property
    def dimension(self) -> int:
        return self.grid.dimension

    def full(self) -> np.ndarray:
        """All components, shape ``grid.shape + (n,)*rank``."""
        n = self.dimension
        if self.symmetry == "riemann":
            return bivector_to_full(self.bivector())
        if not self.symmetry:
            return np.array(self.components)
        out = self.components
        nd = self.grid.dimension
        idx = sym_index(n)
        # expand packed axes from the right so earlier axis positions stay valid
        positions = []
        axis = nd
        slot = 0
        starts = {a for a, _ in self.symmetry}
        while slot < self.rank:
            if slot in starts:
                positions.append(axis)
                slot += 2
            else:
                slot += 1
            axis += 1
        for pos in reversed(positions):
            out = np.take(out, idx, axis=pos)
        return out

    def bivector(self) -> np.ndarray:
        """Riemann-type tensors as a symmetric ``(nb, nb)`` matrix per node."""
        if self.symmetry != "riemann":
            raise GridError("bivector form is only defined for riemann-type tensors")
        nb = self.dimension * (self.dimension - 1) // 2
        return sym_unpack(self.components, nb)

    @classmethod
    def from_full(cls, grid, array, valence, symmetry=None) -> "TensorField":
        """Build a field from dense components, projecting onto the declared symmetry."""
        array = np.asarray(array, dtype=float)
        rank = len(valence)
        nd = grid.dimension
        if symmetry == "riemann":
            return cls.from_bivector(grid, bivector_from_full(array), valence)
        pairs = _normalize_pairs(symmetry, rank)
        out = array
        for a, b in reversed(pairs):
            ax_a, ax_b = nd + a, nd + b
            out = 0.5 * (out + np.swapaxes(out, ax_a, ax_b))
            rows, cols = np.tril_indices(grid.dimension)
            out = np.moveaxis(out, (ax_a, ax_b), (-2, -1))[..., rows, cols]
            out = np.moveaxis(out, -1, ax_a)
        return cls(grid, out, tuple(valence), pairs or None)

    @classmethod
    def from_bivector(cls, grid, matrix, valence=("d", "d", "d", "d")) -> "TensorField":
        m = np.asarray(matrix, dtype=float)
        m = 0.5 * (m + np.swapaxes(m, -1, -2))
        return cls(grid, sym_pack(m), tuple(valence), "riemann")

    @classmethod
    def zeros(cls, grid, valence, symmetry=None) -> "TensorField":
        shape = grid.shape + storage_shape(grid.dimension, len(valence), symmetry)
        return cls(grid, np.zeros(shape), tuple(valence), symmetry)


@dataclass(frozen=True, eq=False)
class MetricField:
    """Positive-definite symmetric 2-tensor field in lower-triangle storage."""

    grid: ChartGrid
    components: np.ndarray
    validate: bool = True

    def __post_init__(self):
        comps = _frozen_array(self.components)
        n = self.grid.dimension
        expected = self.grid.shape + (n * (n + 1) // 2,)
        if comps.shape != expected:
            raise GridError(f"metric components have shape {comps.shape}, expected {expected}")
        if not np.all(np.isfinite(comps)):
            raise GridError("metric contains non-finite components")
        object.__setattr__(self, "components", comps)
        if self.validate and self.min_eigenvalue <= 0.0:
            raise GridError(f"metric is not positive definite (min eigenvalue {self.min_eigenvalue:.3e})")

    @classmethod
    def from_matrix(cls, grid, matrix, validate=True) -> "MetricField":
        m = np.asarray(matrix, dtype=float)
        return cls(grid, sym_pack(0.5 * (m + np.swapaxes(m, -1, -2))), validate)

    @classmethod
    def flat(cls, grid) -> "MetricField":
        n = grid.dimension
        return cls.from_matrix(grid, np.broadcast_to(np.eye(n), grid.shape + (n, n)))

    @classmethod
    def conformal(cls, grid, factor) -> "MetricField":
        """``factor * delta`` for a positive scalar array ``factor``."""
        n = grid.dimension
        factor = np.broadcast_to(np.asarray(factor, dtype=float), grid.shape)
        return cls.from_matrix(grid, factor[..., None, None] * np.eye(n))

    @property
    def dimension(self) -> int:
        return self.grid.dimension

    @cached_property
    def matrix(self) -> np.ndarray:
        m = sym_unpack(self.components, self.dimension)
        m.flags.writeable = False
        return m

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = np.linalg.inv(self.matrix)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        inv.flags.writeable = False
        return inv

    @cached_property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.matrix)

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        det = self.det
        if np.any(det <= 0):
            raise GridError("metric determinant is not positive")
        return np.sqrt(det)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    @cached_property
    def min_eigenvalue(self) -> float:
        return float(np.min(self.eigenvalues))

    def scaled(self, factor: float) -> "MetricField":
        return MetricField(self.grid, factor * self.components, self.validate)

    def as_tensor(self) -> TensorField:
        return TensorField(self.grid, self.components, ("d", "d"), ((0, 1),))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def diff(a: np.ndarray, axis: int, h: float, order: int = 1, periodic: bool = True,
         out: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference derivative of a node-major array along grid ``axis``.

    Fourth-order central stencils; on non-periodic axes the two outermost
    layers use second-order stencils (one-sided on the boundary node).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if not 0 <= axis < a.ndim:
        raise GridError(f"axis {axis} out of range")
    n = a.shape[axis]
    if not periodic and n < 4:
        raise GridError("frozen stencils need at least 4 nodes")
    a = np.ascontiguousarray(a, dtype=float)
    pre = int(np.prod(a.shape[:axis], dtype=np.int64))
    post = int(np.prod(a.shape[axis + 1:], dtype=np.int64))
    if out is None:
        out = np.empty_like(a)
    _kernels.diff_axis(a.reshape(pre, n, post), float(h), order, bool(periodic),
                       out.reshape(pre, n, post))
    return out


def grid_diff(grid: ChartGrid, a: np.ndarray, axis: int, order: int = 1, out=None) -> np.ndarray:
    return diff(a, axis, grid.spacing[axis], order, grid.periodic, out)


def gradient_array(grid: ChartGrid, a: np.ndarray) -> np.ndarray:
    """All first derivatives; the derivative index is inserted right after the grid axes."""
    nd = grid.dimension
    return np.stack([grid_diff(grid, a, k) for k in range(nd)], axis=nd)


def hessian_array(grid: ChartGrid, a: np.ndarray) -> np.ndarray:
    """Second derivatives ``d_k d_l a`` as a ``(n, n)`` block inserted after the grid axes."""
    nd = grid.dimension
    first = [grid_diff(grid, a, k) for k in range(nd)]
    out = np.empty(grid.shape + (nd, nd) + a.shape[nd:])
    for k in range(nd):
        out[_block(nd, k, k)] = grid_diff(grid, a, k, order=2)
        for l in range(k + 1, nd):
            mixed = grid_diff(grid, first[l], k)
            out[_block(nd, k, l)] = mixed
            out[_block(nd, l, k)] = mixed
    return out


def _block(nd, k, l):
    return (slice(None),) * nd + (k, l)


def partial_derivative(field, axis: int, order: int = 1):
    """Derivative of a scalar or tensor field along one coordinate axis.

    The result has the same kind, valence and symmetry as the input; use
    :func:`gradient` for the field with the extra covariant slot.
    """
    grid = field.grid
    if not 0 <= axis < grid.dimension:
        raise GridError(f"axis {axis} out of range for dimension {grid.dimension}")
    if isinstance(field, ScalarField):
        return ScalarField(grid, grid_diff(grid, field.values, axis, order))
    if isinstance(field, TensorField):
        return TensorField(grid, grid_diff(grid, field.components, axis, order),
                           field.valence, field.symmetry)
    if isinstance(field, MetricField):
        return TensorField(grid, grid_diff(grid, field.components, axis, order), ("d", "d"), ((0, 1),))
    raise TypeError(f"cannot differentiate {type(field).__name__}")


def gradient(field) -> TensorField:
    """Coordinate gradient with the new covariant slot placed first."""
    grid = field.grid
    if isinstance(field, ScalarField):
        return TensorField(grid, gradient_array(grid, field.values), ("d",))
    full = field.full()
    return TensorField(grid, gradient_array(grid, full), ("d",) + tuple(field.valence))


def gradient_norm_squared(grid: ChartGrid, f: np.ndarray, g: MetricField | None = None) -> np.ndarray:
    """``g^ij d_i f d_j f`` (flat coordinates when ``g`` is None)."""
    df = gradient_array(grid, f)
    if g is None:
        return np.sum(df * df, axis=-1)
    return np.einsum("...i,...ij,...j->...", df, g.inverse, df)


def laplace_beltrami(grid: ChartGrid, f: np.ndarray, g: MetricField | None = None) -> np.ndarray:
    """``(1/sqrt g) d_i (sqrt g g^ij d_j f)``; flat Laplacian when ``g`` is None."""
    n = grid.dimension
    if g is None:
        return sum(grid_diff(grid, f, k, order=2) for k in range(n))
    df = gradient_array(grid, f)
    flux = g.sqrt_det[..., None] * np.einsum("...ij,...j->...i", g.inverse, df)
    div = sum(grid_diff(grid, flux[..., k], k) for k in range(n))
    return div / g.sqrt_det


# --------------------------------------------------------------------------
# quadrature and norms
# --------------------------------------------------------------------------


def _volume_density(grid: ChartGrid, weight) -> np.ndarray:
    if weight is None:
        return grid.quadrature_weights
    if weight.grid != grid:
        raise GridError("weight metric lives on a different grid")
    return weight.sqrt_det * grid.quadrature_weights


def integrate_array(grid: ChartGrid, values: np.ndarray, weight: MetricField | None = None) -> float:
    dens = _volume_density(grid, weight)
    prod = np.ascontiguousarray(values * dens).ravel()
    return float(np.sum(prod)) * grid.cell_volume


def integrate(field: ScalarField, weight: MetricField | None = None) -> float:
    """Riemannian integral ``sum f sqrt(det g) w h^n`` (``weight=None``: flat)."""
    return integrate_array(field.grid, field.values, weight)


def lp_norm(field: ScalarField, p: float, weight: MetricField | None = None) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if math.isinf(p):
        return float(np.max(np.abs(field.values)))
    return integrate_array(field.grid, np.abs(field.values) ** p, weight) ** (1.0 / p)


def norm_squared_array(t: TensorField, g: MetricField) -> np.ndarray:
    if t.grid != g.grid:
        raise GridError("tensor and metric live on different grids")
    if t.rank == 0:
        return t.components ** 2
    if t.symmetry == "riemann":
        if t.valence != ("d",) * 4:
            raise GridError("riemann-type norms need an all-covariant tensor")
        m = t.bivector()
        gb = bivector_inverse_metric(g.inverse)
        a = np.matmul(gb, m)
        return 4.0 * np.einsum("...ab,...ba->...", a, a)
    full = t.full()
    raised = full
    nd = t.grid.dimension
    letters = "abcdefgh"[: t.rank]
    for slot, v in enumerate(t.valence):
        lower = g.inverse if v == "d" else g.matrix
        src = letters
        dst = letters[:slot] + "z" + letters[slot + 1:]
        raised = np.einsum(f"...{letters[slot]}z,...{src}->...{dst}", lower, raised)
    axes = tuple(range(nd, nd + t.rank))
    return np.sum(full * raised, axis=axes)


def pointwise_tensor_norm(t: TensorField, g: MetricField) -> ScalarField:
    """``sqrt`` of the full metric contraction of ``t`` with itself."""
    sq = norm_squared_array(t, g)
    return ScalarField(t.grid, np.sqrt(np.maximum(sq, 0.0)))


def as_scalar(grid: ChartGrid, values) -> ScalarField:
    return ScalarField(grid, np.broadcast_to(np.asarray(values, dtype=float), grid.shape))


def check_same_grid(*fields: Sequence) -> ChartGrid:
    grids = {id(f.grid): f.grid for f in fields}
    first = fields[0].grid
    for g in grids.values():
        if g != first:
            raise GridError("fields live on different grids")
    return first
