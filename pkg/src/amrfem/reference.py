"""Reference hypercube machinery: Lagrange bases, Gauss rules and affine maps."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ReferenceElement:
    """Tensor-product Lagrange element Q_q on [-1, 1]^d with equispaced nodes.

    Nodes are numbered lexicographically with the x index running fastest.
    """

    def __init__(self, dim: int, order: int):
        if dim not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {dim}")
        if not 1 <= order <= 4:
            raise ValueError(f"order must be in 1..4, got {order}")
        self.dim = dim
        self.order = order
        self.nodes_1d = np.linspace(-1.0, 1.0, order + 1)

    def __repr__(self):
        return f"ReferenceElement(dim={self.dim}, order={self.order})"

    @property
    def num_nodes(self) -> int:
        return (self.order + 1) ** self.dim

    @cached_property
    def node_multi_index(self) -> np.ndarray:
        """Integer node positions in 0..q per axis, shape (num_nodes, d)."""
        q1 = self.order + 1
        idx = np.arange(self.num_nodes)
        return np.stack([(idx // q1 ** a) % q1 for a in range(self.dim)], axis=1)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.nodes_1d[self.node_multi_index]

    def facet_nodes(self, axis: int, side: int) -> np.ndarray:
        """Local ids of nodes on the facet ``x_axis = -1`` (side 0) or ``+1`` (side 1)."""
        target = self.order if side else 0
        return np.flatnonzero(self.node_multi_index[:, axis] == target)

    # 1D Lagrange polynomials and their derivatives
    def _basis_1d(self, x):
        x = np.asarray(x, dtype=float)[:, None]
        xn = self.nodes_1d
        q1 = self.order + 1
        vals = np.ones((x.shape[0], q1))
        ders = np.zeros((x.shape[0], q1))
        for k in range(q1):
            others = [m for m in range(q1) if m != k]
            denom = np.prod([xn[k] - xn[m] for m in others])
            factors = x - xn[others][None, :]
            vals[:, k] = np.prod(factors, axis=1) / denom
            for skip in range(len(others)):
                ders[:, k] += np.prod(np.delete(factors, skip, axis=1), axis=1) / denom
        return vals, ders

    def values(self, xi) -> np.ndarray:
        """Shape function values at points ``xi`` (n, d) -> (n, num_nodes)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        out = np.ones((xi.shape[0], self.num_nodes))
        mi = self.node_multi_index
        for a in range(self.dim):
            v, _ = self._basis_1d(xi[:, a])
            out *= v[:, mi[:, a]]
        return out

    def gradients(self, xi) -> np.ndarray:
        """Reference gradients at ``xi`` (n, d) -> (n, num_nodes, d)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        mi = self.node_multi_index
        tables = [self._basis_1d(xi[:, a]) for a in range(self.dim)]
        out = np.ones((xi.shape[0], self.num_nodes, self.dim))
        for comp in range(self.dim):
            for a in range(self.dim):
                v, dv = tables[a]
                out[:, :, comp] *= (dv if a == comp else v)[:, mi[:, a]]
        return out


def shape_values(elem: ReferenceElement, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    vals = elem.values(xi.reshape(-1, elem.dim))
    return vals[0] if xi.ndim == 1 else vals


def shape_gradients(elem: ReferenceElement, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    grads = elem.gradients(xi.reshape(-1, elem.dim))
    return grads[0] if xi.ndim == 1 else grads


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray
    weights: np.ndarray

    @property
    def num_points(self) -> int:
        return len(self.weights)


def gauss_quadrature(dim: int, n: int) -> Quadrature:
    """Tensor Gauss-Legendre rule with ``n`` points per axis on [-1, 1]^dim.

    Exact for polynomials of degree <= 2n - 1 in each variable. ``dim = 0``
    yields the single-point rule used on the facets of 1D cells.
    """
    if n < 1:
        raise ValueError("need at least one point per axis")
    if dim == 0:
        return Quadrature(np.zeros((1, 0)), np.ones(1))
    x, w = np.polynomial.legendre.leggauss(n)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    # x fastest, matching the node ordering of ReferenceElement
    pts = np.stack([g.ravel(order="F") for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel(order="F") for g in wgrids], axis=1), axis=1)
    return Quadrature(pts, wts)


@dataclass(frozen=True)
class CellMap:
    """Affine map of [-1, 1]^d onto the brick ``lower + [0, 2 * half]``."""
    lower: np.ndarray
    half: np.ndarray

    @classmethod
    def from_bounds(cls, lower, upper) -> "CellMap":
        lower = np.asarray(lower, dtype=float)
        return cls(lower, (np.asarray(upper, dtype=float) - lower) / 2)

    @property
    def jacobian(self) -> np.ndarray:
        return np.diag(self.half)

    @property
    def det(self) -> float:
        return float(np.prod(self.half))

    def __call__(self, xi) -> np.ndarray:
        return self.lower + self.half * (np.asarray(xi) + 1.0)

    def inverse(self, x) -> np.ndarray:
        return (np.asarray(x) - self.lower) / self.half - 1.0


def map_cell_quadrature(cmap: CellMap, quad: Quadrature):
    """Physical points and weights scaled by |J_K|."""
    return cmap(quad.points), quad.weights * cmap.det


@dataclass(frozen=True)
class FacetGeometry:
    points: np.ndarray          # (n, d) physical points
    weights: np.ndarray         # (n,) w * |J_F|
    normal_plus: np.ndarray     # outward normal of the plus cell
    normal_minus: np.ndarray | None
    xi_plus: np.ndarray         # (n, d) reference coords in the plus cell
    xi_minus: np.ndarray | None
    measure: float              # |F|
    jacobian_measure: float     # |J_F|


def facet_geometry(plus: CellMap, axis: int, side: int, quad: Quadrature,
                   minus: CellMap | None = None) -> FacetGeometry:
    """Integration data on facet (axis, side) of ``plus``.

    The integrated facet is the whole facet of ``plus``; when ``minus`` is a
    coarser neighbour the points are embedded into the matching part of its
    facet through the inverse map.
    """
    d = len(plus.lower)
    tang = [a for a in range(d) if a != axis]
    xi = np.empty((quad.num_points, d))
    xi[:, tang] = quad.points
    xi[:, axis] = 1.0 if side else -1.0
    x = plus(xi)
    jf = float(np.prod(plus.half[tang]))
    normal = np.zeros(d)
    normal[axis] = 1.0 if side else -1.0
    measure = float(np.prod(2 * plus.half[tang]))
    xi_minus = None
    n_minus = None
    if minus is not None:
        xi_minus = minus.inverse(x)
        if (np.any(np.abs(xi_minus[:, axis] - (-1.0 if side else 1.0)) > 1e-9)
                or np.any(np.abs(xi_minus[:, tang]) > 1 + 1e-9)):
            raise ValueError("cells are not adjacent across the requested facet")
        xi_minus[:, axis] = -1.0 if side else 1.0
        n_minus = -normal
    return FacetGeometry(x, quad.weights * jf, normal, n_minus, xi, xi_minus, measure, jf)
