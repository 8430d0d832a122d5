"""Bilinear (Q1) finite element spaces, quadrature and assembly.

Both the macro space on a dyadic partition and the micro space on the unit
cell are tensor-product degree-1 Lagrange spaces on axis-aligned squares.
Hanging nodes of the macro partition are eliminated through a prolongation
``P`` from free DOFs to all mesh nodes; every global matrix is ``P^T A P``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import EDGES, MacroPartition, MicroMesh


class FemError(ValueError):
    pass


def gauss_01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


# local node order: (0,0), (1,0), (1,1), (0,1)
_LOCAL = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def q1_shape(xi, eta):
    """Shape functions and reference gradients at local points.

    Returns ``N`` (npts, 4), ``dN_dxi`` and ``dN_deta`` of the same shape.
    """
    xi = np.asarray(xi, dtype=float)[:, None]
    eta = np.asarray(eta, dtype=float)[:, None]
    ax, ay = _LOCAL[:, 0], _LOCAL[:, 1]
    fx = np.where(ax == 1, xi, 1 - xi)
    fy = np.where(ay == 1, eta, 1 - eta)
    sx = np.where(ax == 1, 1.0, -1.0)
    sy = np.where(ay == 1, 1.0, -1.0)
    return fx * fy, sx * fy, fx * sy


def _tensor_rule(order: int):
    g, w = gauss_01(order)
    xi, eta = np.meshgrid(g, g, indexing="xy")
    ww = np.outer(w, w)
    return xi.ravel(), eta.ravel(), ww.ravel()


def reference_matrices():
    """Q1 mass (unit square) and stiffness matrices from 2x2 Gauss (exact)."""
    xi, eta, w = _tensor_rule(2)
    N, dx, dy = q1_shape(xi, eta)
    mass = np.einsum("q,qa,qb->ab", w, N, N)
    stiff = np.einsum("q,qa,qb->ab", w, dx, dx) + np.einsum("q,qa,qb->ab", w, dy, dy)
    return mass, stiff


def reference_edge_mass():
    g, w = gauss_01(2)
    N = np.column_stack([1 - g, g])
    return np.einsum("q,qa,qb->ab", w, N, N)


@dataclass
class QuadRule:
    """Quadrature points over a mesh with evaluation matrices onto DOFs."""

    points: np.ndarray
    weights: np.ndarray
    elem: np.ndarray
    E: sp.csr_matrix
    Gx: sp.csr_matrix
    Gy: sp.csr_matrix

    def __len__(self):
        return len(self.weights)


class Q1Space:
    """Common machinery of the macro and micro Q1 spaces.

    Subclasses provide ``node_xy`` (all nodes), ``conn`` (elements x 4 into
    all nodes, counter-clockwise from lower left), ``elem_origin``,
    ``elem_h`` and the prolongation ``P`` (all nodes x DOFs).
    """

    node_xy: np.ndarray
    conn: np.ndarray
    elem_origin: np.ndarray
    elem_h: np.ndarray
    P: sp.csr_matrix

    @property
    def n_dofs(self) -> int:
        return self.P.shape[1]

    @property
    def n_elements(self) -> int:
        return len(self.conn)

    @cached_property
    def dof_xy(self) -> np.ndarray:
        return self.node_xy[self.dof_nodes]

    def _assemble(self, ref: np.ndarray, scale: np.ndarray) -> sp.csr_matrix:
        nn = len(self.node_xy)
        rows = np.repeat(self.conn, 4, axis=1).ravel()
        cols = np.tile(self.conn, (1, 4)).ravel()
        data = (scale[:, None] * ref.ravel()[None, :]).ravel()
        A = sp.coo_matrix((data, (rows, cols)), shape=(nn, nn)).tocsr()
        return (self.P.T @ A @ self.P).tocsr()

    @cached_property
    def mass(self) -> sp.csr_matrix:
        m, _ = reference_matrices()
        return self._assemble(m, self.elem_h ** 2)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        _, k = reference_matrices()
        return self._assemble(k, np.ones(self.n_elements))

    def eval_matrices(self, elem: np.ndarray, local: np.ndarray):
        """Sparse value / gradient evaluation of DOF vectors at element-local points."""
        elem = np.asarray(elem)
        N, dxi, deta = q1_shape(local[:, 0], local[:, 1])
        h = self.elem_h[elem][:, None]
        rows = np.repeat(np.arange(len(elem)), 4)
        cols = self.conn[elem].ravel()
        shape = (len(elem), len(self.node_xy))
        out = []
        for vals in (N, dxi / h, deta / h):
            A = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=shape)
            out.append((A @ self.P).tocsr())
        return out

    def locate(self, pts: np.ndarray):
        """Element index and local coordinates of points (subclass-specific)."""
        raise NotImplementedError

    def quadrature(self, order: int = 4, max_h: float | None = None) -> QuadRule:
        """Tensor Gauss rule per element, optionally on dyadic sub-cells.

        With ``max_h`` every element is split into ``2^s x 2^s`` sub-cells so
        that sub-cells have side at most ``max_h``.
        """
        key = (order, max_h)
        cache = self.__dict__.setdefault("_quad_cache", {})
        if key in cache:
            return cache[key]
        xi, eta, w = _tensor_rule(order)
        pts, wts, els, loc = [], [], [], []
        for h in np.unique(self.elem_h):
            ids = np.flatnonzero(self.elem_h == h)
            s = 1
            if max_h is not None and h > max_h:
                s = 1 << int(math.ceil(math.log2(h / max_h) - 1e-12))
            sub = np.arange(s) / s
            ox, oy = np.meshgrid(sub, sub, indexing="xy")
            lx = (ox.ravel()[:, None] + xi[None, :] / s).ravel()
            ly = (oy.ravel()[:, None] + eta[None, :] / s).ravel()
            lw = np.tile(w, s * s) / (s * s)
            nloc = len(lw)
            e = np.repeat(ids, nloc)
            L = np.column_stack([np.tile(lx, len(ids)), np.tile(ly, len(ids))])
            org = self.elem_origin[e]
            pts.append(org + h * L)
            wts.append(np.tile(lw, len(ids)) * h * h)
            els.append(e)
            loc.append(L)
        pts = np.concatenate(pts)
        wts = np.concatenate(wts)
        els = np.concatenate(els)
        loc = np.concatenate(loc)
        order_ = np.lexsort((np.arange(len(els)), els))
        pts, wts, els, loc = pts[order_], wts[order_], els[order_], loc[order_]
        E, Gx, Gy = self.eval_matrices(els, loc)
        rule = QuadRule(pts, wts, els, E, Gx, Gy)
        cache[key] = rule
        return rule

    def load(self, values: np.ndarray, rule: QuadRule, grad: tuple | None = None) -> np.ndarray:
        """``int f phi_k`` (plus ``int grad f . grad phi_k`` if ``grad`` given)."""
        b = rule.E.T @ (rule.weights * values)
        if grad is not None:
            b = b + rule.Gx.T @ (rule.weights * grad[0]) + rule.Gy.T @ (rule.weights * grad[1])
        return b

    def interpolate(self, f) -> np.ndarray:
        """Nodal interpolant of ``f(x1, x2)`` (vectorised)."""
        xy = self.dof_xy
        return np.broadcast_to(np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float), (self.n_dofs,)).copy()


class FeSpaceMacro(Q1Space):
    """Conforming Q1 space on a 1-irregular dyadic partition."""

    def __init__(self, partition: MacroPartition):
        if not partition.is_one_irregular():
            raise FemError("hanging-node constraints need a 1-irregular partition")
        self.partition = partition
        squares = partition.sorted()
        L = partition.max_level
        self.level = L
        ids: dict[tuple[int, int], int] = {}
        conn = np.empty((len(squares), 4), dtype=np.int64)
        for e, q in enumerate(squares):
            x0, x1, y0, y1 = q.int_bounds(L)
            for a, c in enumerate(((x0, y0), (x1, y0), (x1, y1), (x0, y1))):
                conn[e, a] = ids.setdefault(c, len(ids))
        coords = np.array(sorted(ids, key=lambda c: (c[1], c[0])), dtype=np.int64)
        renum = {tuple(c): k for k, c in enumerate(coords)}
        old2new = np.empty(len(ids), dtype=np.int64)
        for c, k in ids.items():
            old2new[k] = renum[c]
        self.conn = old2new[conn]
        self.node_int = coords
        scale = float(1 << L)
        self.node_xy = coords / scale
        self.elem_h = np.array([q.side for q in squares])
        self.elem_origin = np.array([q.origin for q in squares])
        self.squares = squares

        # hanging nodes: edge midpoints of a square that are nodes of the mesh
        parents: dict[int, tuple[int, int]] = {}
        for e, q in enumerate(squares):
            x0, x1, y0, y1 = q.int_bounds(L)
            if x1 - x0 < 2:
                continue
            xm, ym = (x0 + x1) // 2, (y0 + y1) // 2
            for mid, ends in (((xm, y0), ((x0, y0), (x1, y0))), ((x1, ym), ((x1, y0), (x1, y1))),
                              ((xm, y1), ((x0, y1), (x1, y1))), ((x0, ym), ((x0, y0), (x0, y1)))):
                k = renum.get(mid)
                if k is not None:
                    parents[k] = (renum[ends[0]], renum[ends[1]])
        self.hanging = parents
        nn = len(coords)
        is_free = np.ones(nn, dtype=bool)
        is_free[list(parents)] = False
        self.dof_nodes = np.flatnonzero(is_free)
        node2dof = -np.ones(nn, dtype=np.int64)
        node2dof[self.dof_nodes] = np.arange(len(self.dof_nodes))

        def expand(k, wgt, acc, depth=0):
            if depth > 64:
                raise FemError("cyclic hanging-node constraints")
            if node2dof[k] >= 0:
                acc[node2dof[k]] = acc.get(node2dof[k], 0.0) + wgt
            else:
                a, b = parents[k]
                expand(a, 0.5 * wgt, acc, depth + 1)
                expand(b, 0.5 * wgt, acc, depth + 1)

        rows, cols, vals = [], [], []
        for k in range(nn):
            acc: dict[int, float] = {}
            expand(k, 1.0, acc)
            for j, v in acc.items():
                rows.append(k)
                cols.append(j)
                vals.append(v)
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(nn, len(self.dof_nodes)))
        xy = self.dof_xy
        self.boundary = (np.isclose(xy[:, 0], 0) | np.isclose(xy[:, 0], 1)
                         | np.isclose(xy[:, 1], 0) | np.isclose(xy[:, 1], 1))
        self.interior = ~self.boundary

    def locate(self, pts: np.ndarray):
        pts = np.atleast_2d(pts)
        elem = np.empty(len(pts), dtype=np.int64)
        index = {(q.level, q.ix, q.iy): e for e, q in enumerate(self.squares)}
        for i, (x, y) in enumerate(pts):
            for m in range(self.level, -1, -1):
                n = 1 << m
                ix, iy = min(int(x * n), n - 1), min(int(y * n), n - 1)
                e = index.get((m, ix, iy))
                if e is not None:
                    elem[i] = e
                    break
            else:
                raise FemError(f"point {(x, y)} not located")
        local = (pts - self.elem_origin[elem]) / self.elem_h[elem][:, None]
        return elem, local


def build_macro_space(p: MacroPartition) -> FeSpaceMacro:
    return FeSpaceMacro(p)


def prolongation(coarse: FeSpaceMacro, fine: FeSpaceMacro) -> sp.csr_matrix:
    """Coefficients in ``fine`` of every basis function of ``coarse``.

    Requires the fine partition to refine the coarse one; the coarse space is
    then a subspace, so nodal interpolation is exact.
    """
    cs = coarse.partition.squares
    for q in fine.partition.squares:
        r = q
        while r not in cs:
            if r.level == 0:
                raise FemError("partitions are not nested")
            r = r.parent()
    elem, loc = coarse.locate(fine.dof_xy)
    E, _, _ = coarse.eval_matrices(elem, loc)
    E = E.tocsr()
    E.data[np.abs(E.data) < 1e-15] = 0.0
    E.eliminate_zeros()
    return E


class FeSpaceMicro(Q1Space):
    """Q1 space on the uniform micro mesh (no constraints, no Dirichlet DOFs)."""

    def __init__(self, mesh: MicroMesh):
        self.mesh = mesh
        self.node_xy = mesh.nodes()
        self.conn = mesh.elements()
        n = mesh.n
        self.elem_h = np.full(n * n, 1.0 / n)
        self.elem_origin = self.node_xy[self.conn[:, 0]]
        self.dof_nodes = np.arange(mesh.n_nodes)
        self.P = sp.identity(mesh.n_nodes, format="csr")

    def locate(self, pts: np.ndarray):
        pts = np.atleast_2d(pts)
        n = self.mesh.n
        i = np.minimum((pts[:, 0] * n).astype(int), n - 1)
        j = np.minimum((pts[:, 1] * n).astype(int), n - 1)
        elem = j * n + i
        local = (pts - self.elem_origin[elem]) * n
        return elem, local

    def boundary_mass(self, edges=None) -> sp.csr_matrix:
        """``int_E psi_j psi_l dsigma`` over the given edges (default: reactive edges)."""
        edges = self.mesh.gamma_r if edges is None else edges
        seg = self.mesh.boundary_edges(edges)
        ref = reference_edge_mass() * self.mesh.h
        rows = np.repeat(seg, 2, axis=1).ravel()
        cols = np.tile(seg, (1, 2)).ravel()
        data = np.tile(ref.ravel(), len(seg))
        nn = self.mesh.n_nodes
        return sp.coo_matrix((data, (rows, cols)), shape=(nn, nn)).tocsr()

    def boundary_quadrature(self, edges=None, order: int = 4):
        """Points, weights and value-evaluation matrix along boundary edges."""
        edges = self.mesh.gamma_r if edges is None else edges
        seg = self.mesh.boundary_edges(edges)
        g, w = gauss_01(order)
        a = self.node_xy[seg[:, 0]]
        b = self.node_xy[seg[:, 1]]
        pts = (a[:, None, :] + g[None, :, None] * (b - a)[:, None, :]).reshape(-1, 2)
        wts = np.tile(w * self.mesh.h, len(seg))
        rows = np.repeat(np.arange(len(pts)), 2)
        vals = np.column_stack([np.tile(1 - g, len(seg)), np.tile(g, len(seg))]).ravel()
        cols = np.repeat(seg, len(g), axis=0).ravel()
        E = sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), self.n_dofs))
        return pts, wts, E


def build_micro_space(mesh: MicroMesh) -> FeSpaceMicro:
    return FeSpaceMicro(mesh)


@dataclass
class FeSystem:
    """All operators of the semi-discrete two-scale system."""

    macro: FeSpaceMacro
    micro: FeSpaceMicro
    M_Omega: sp.csr_matrix
    K_Omega: sp.csr_matrix
    M_Y: sp.csr_matrix
    K_Y: sp.csr_matrix
    B_Y: sp.csr_matrix
    t_Y: np.ndarray
    s_R: float

    @property
    def N1(self) -> int:
        return self.macro.n_dofs

    @property
    def N2(self) -> int:
        return self.micro.n_dofs


def assemble(macro: FeSpaceMacro, micro: FeSpaceMicro) -> FeSystem:
    B = micro.boundary_mass()
    t = np.asarray(B.sum(axis=1)).ravel()
    return FeSystem(macro, micro, macro.mass, macro.stiffness, micro.mass, micro.stiffness,
                    B, t, float(t.sum()))


def h1_inner_product(space: Q1Space, u: np.ndarray, v: np.ndarray) -> float:
    """``u^T (M + K) v`` in the given space."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (space.n_dofs,) or v.shape != (space.n_dofs,):
        raise FemError(f"expected vectors of length {space.n_dofs}, got {u.shape} and {v.shape}")
    return float(u @ (space.mass @ v) + u @ (space.stiffness @ v))


def interpolate(space: Q1Space, f) -> np.ndarray:
    return space.interpolate(f)


def dump_coo(A: sp.spmatrix) -> str:
    """Coordinate text dump ``i j value`` (full double precision)."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    return "".join(f"{i} {j} {v:.17g}\n" for i, j, v in zip(C.row[order], C.col[order], C.data[order]))


# --- interpolation-trace sampler -------------------------------------------------

@dataclass
class TraceReport:
    rho: float
    samples: int
    c_required: float
    c_space_sup: float
    dominated: bool
    trace: np.ndarray
    grad: np.ndarray
    mass: np.ndarray

    @property
    def per_sample(self) -> np.ndarray:
        return (self.trace - self.rho * self.grad) / self.mass


def trace_terms(space: FeSpaceMicro, f: np.ndarray):
    """``(int_dY f^2, int_Y |grad f|^2, int_Y f^2)`` for coefficient vectors (columns)."""
    Bd = space.boundary_mass(EDGES)
    f = np.atleast_2d(np.asarray(f, dtype=float).T).T
    tr = np.einsum("ij,ij->j", f, Bd @ f)
    gr = np.einsum("ij,ij->j", f, space.stiffness @ f)
    ms = np.einsum("ij,ij->j", f, space.mass @ f)
    return tr, gr, ms


def random_micro_functions(space: FeSpaceMicro, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Random mix of smooth modes, boundary layers and nodal noise (columns)."""
    xy = space.dof_xy
    y1, y2 = xy[:, 0], xy[:, 1]
    out = np.empty((space.n_dofs, samples))
    for s in range(samples):
        f = np.zeros(space.n_dofs)
        c = rng.normal(size=(4, 4))
        for k in range(4):
            for l in range(4):
                f += c[k, l] / (1 + k * k + l * l) * np.cos(k * np.pi * y1) * np.cos(l * np.pi * y2)
        delta = 10 ** rng.uniform(-1.5, 0.5)
        side = rng.integers(4)
        dist = (y2, 1 - y1, 1 - y2, y1)[side]
        f += rng.normal() * np.exp(-dist / delta)
        f += 10 ** rng.uniform(-4, -1) * rng.normal(size=space.n_dofs)
        out[:, s] = f
    return out


def trace_inequality_check(space: FeSpaceMicro, rho: float, samples: int = 500,
                           seed: int = 0) -> TraceReport:
    """Measure the constant needed in ``int_dY f^2 <= rho int |grad f|^2 + c int f^2``.

    ``c_required`` is the largest per-sample ratio; ``c_space_sup`` is the
    supremum over the whole discrete space (top generalized eigenvalue of
    ``(B - rho K, M)``), which must dominate every sample.
    """
    if not rho > 0:
        raise FemError("rho must be positive")
    if samples < 1:
        raise FemError("need at least one sample")
    rng = np.random.default_rng(seed)
    f = random_micro_functions(space, samples, rng)
    tr, gr, ms = trace_terms(space, f)
    c_req = float(np.max((tr - rho * gr) / ms))
    A = (space.boundary_mass(EDGES) - rho * space.stiffness).toarray()
    sup = float(scipy.linalg.eigh(A, space.mass.toarray(), eigvals_only=True,
                                  subset_by_index=[space.n_dofs - 1, space.n_dofs - 1])[0])
    ok = bool(np.isfinite(c_req) and c_req <= sup * (1 + 1e-10) + 1e-12)
    return TraceReport(rho, samples, c_req, sup, ok, tr, gr, ms)
