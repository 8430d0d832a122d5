"""Manufactured solutions, error norms, convergence orders and the continuity experiment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from . import kernels
from .adapt import DEFAULT_MAX_H, elliptic_project
from .fem import FeSpaceMacro, FeSpaceMicro, gauss_01
from .fields import (ONE_S, ONE_T, SeparableField, SpaceFactor, Term, const_space, linear_time)
from .geometry import MacroPartition, MicroMesh
from .solver import ModelParams, ReactionLaw, TwoScaleSolver, Trajectory, trapezoid

PI = math.pi


# --- spatial building blocks -------------------------------------------------------

def sin_sin(p: float = 1.0, q: float = 1.0) -> SpaceFactor:
    a, b = p * PI, q * PI
    return SpaceFactor(lambda x, y: np.sin(a * x) * np.sin(b * y),
                       lambda x, y: (a * np.cos(a * x) * np.sin(b * y), b * np.sin(a * x) * np.cos(b * y)),
                       lambda x, y: -(a * a + b * b) * np.sin(a * x) * np.sin(b * y))


def cos_cos(p: float = 1.0, q: float = 1.0) -> SpaceFactor:
    a, b = p * PI, q * PI
    return SpaceFactor(lambda x, y: np.cos(a * x) * np.cos(b * y),
                       lambda x, y: (-a * np.sin(a * x) * np.cos(b * y), -b * np.cos(a * x) * np.sin(b * y)),
                       lambda x, y: -(a * a + b * b) * np.cos(a * x) * np.cos(b * y))


def tanh_layer(delta: float, x0: float = 0.5) -> SpaceFactor:
    """``tanh((x1 - x0)/delta)``."""
    def f(x, y):
        return np.tanh((x - x0) / delta) + 0.0 * y

    def g(x, y):
        s = 1.0 / np.cosh((x - x0) / delta)
        return s * s / delta + 0.0 * y, 0.0 * x * y

    def lap(x, y):
        z = (x - x0) / delta
        s = 1.0 / np.cosh(z)
        return -2.0 * s * s * np.tanh(z) / (delta * delta) + 0.0 * y

    return SpaceFactor(f, g, lap)


def field_of(*terms) -> SeparableField:
    return SeparableField(tuple(terms))


def _x_field(*pairs) -> SeparableField:
    return field_of(*(Term(c, ONE_T, f, ONE_S) for c, f in pairs))


def _y_field(*pairs) -> SeparableField:
    return field_of(*(Term(c, ONE_T, ONE_S, f) for c, f in pairs))


def _t_field(tf) -> SeparableField:
    return field_of(Term(1.0, tf, ONE_S, ONE_S))


_EDGE_NORMAL = {"top": (1, 1.0), "bottom": (1, -1.0), "right": (0, 1.0), "left": (0, -1.0)}
_EDGE_LINE = {"top": (1, 1.0), "bottom": (1, 0.0), "right": (0, 1.0), "left": (0, 0.0)}


def _edge_points(edge: str, s: np.ndarray):
    axis, val = _EDGE_LINE[edge]
    pts = np.empty((len(s), 2))
    pts[:, axis] = val
    pts[:, 1 - axis] = s
    return pts


def normal_derivative(Y: SpaceFactor, edges) -> SpaceFactor:
    """Outward normal derivative of ``Y`` on the listed edges of the unit cell."""
    edges = tuple(edges)

    def f(y1, y2):
        g1, g2 = Y.gradient(y1, y2)
        out = np.zeros_like(g1)
        for e in edges:
            axis, sgn = _EDGE_NORMAL[e]
            axis_l, val = _EDGE_LINE[e]
            on = np.isclose(y2 if axis_l else y1, val, atol=1e-12)
            out = np.where(on & (out == 0), sgn * (g2 if axis else g1), out)
        return out

    return SpaceFactor(f)


def edge_integral(Y: SpaceFactor, edges, order: int = 16) -> float:
    s, w = gauss_01(order)
    tot = 0.0
    for e in edges:
        p = _edge_points(e, s)
        tot += float(w @ Y(p[:, 0], p[:, 1]))
    return tot


# --- manufactured problems -------------------------------------------------------------

class ProblemError(ValueError):
    pass


@dataclass
class ManufacturedProblem:
    """Exact fields ``U``, ``v``, ``w`` and the model coefficients.

    Forcings are derived from the exact fields: volume loads from the strong
    form, and a boundary load on the reactive edges carrying whatever part
    of the exchange condition the exact ``v`` does not satisfy. The exact
    ``v`` must have zero normal flux on the non-reactive edges and ``w`` on
    all of them (checked by :meth:`flux_mismatch`).
    """

    id: str
    U: SeparableField
    v: SeparableField
    w: SeparableField
    D_U: float = 1.0
    D_v: float = 1.0
    D_w: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0
    T_final: float = 0.5
    reaction: ReactionLaw = field(default_factory=lambda: ReactionLaw("zero"))
    gamma_r: tuple = ("top",)
    layer_distance: object = None

    def with_params(self, **kw) -> "ManufacturedProblem":
        return replace(self, **kw)

    # forcings
    def reaction_field(self) -> SeparableField:
        r = self.reaction
        if r.kind == "zero":
            return SeparableField()
        if r.kind == "linear":
            return (self.v + self.w).scaled(r.k)
        return (self.v * self.w).scaled(r.k)

    def trace_field(self) -> SeparableField:
        """``int_{Gamma_R} v dsigma_y`` as a macro field."""
        return field_of(*(Term(k.coef * edge_integral(k.y, self.gamma_r), k.time, k.x, ONE_S)
                          for k in self.v.terms))

    @property
    def s_R(self) -> float:
        return float(len(self.gamma_r))

    def forcing_U(self) -> SeparableField:
        ga = self.gamma * self.alpha
        return (self.U.time_derivative() + self.U.laplacian_x().scaled(-self.D_U)
                + self.trace_field().scaled(-ga) + self.U.scaled(ga * self.s_R))

    def forcing_v(self) -> SeparableField:
        return self.v.time_derivative() + self.v.laplacian_y().scaled(-self.D_v) + self.reaction_field()

    def forcing_w(self) -> SeparableField:
        return self.w.time_derivative() + self.w.laplacian_y().scaled(-self.D_w) + self.reaction_field()

    def boundary_load_v(self) -> SeparableField:
        """``D_v dn v + alpha (v - U)`` on the reactive edges."""
        Dv, a, edges = self.D_v, self.alpha, self.gamma_r

        def fn(Y):
            dn = normal_derivative(Y, edges)
            return SpaceFactor(lambda y1, y2: Dv * dn(y1, y2) + a * Y(y1, y2))

        return self.v.map_y(fn) + self.U.scaled(-a)

    def params(self) -> ModelParams:
        U, v, w = self.U, self.v, self.w
        return ModelParams(
            D_U=self.D_U, D_v=self.D_v, D_w=self.D_w, alpha=self.alpha, gamma=self.gamma,
            T_final=self.T_final, reaction=self.reaction,
            U_D=lambda t, x1, x2: U.macro(t, x1, x2),
            U_I=lambda x1, x2: U.macro(0.0, x1, x2),
            v_I=lambda x1, x2, y1, y2: v(0.0, x1, x2, y1, y2),
            w_I=lambda x1, x2, y1, y2: w(0.0, x1, x2, y1, y2),
            f_U=self.forcing_U(), f_v=self.forcing_v(), f_w=self.forcing_w(),
            g_v=self.boundary_load_v())

    # audits
    def flux_mismatch(self, samples: int = 33) -> float:
        """Largest normal derivative of ``v`` off the reactive edges or of ``w`` anywhere."""
        s = np.linspace(0.0, 1.0, samples)[1:-1]
        worst = 0.0
        for fld, edges in ((self.v, [e for e in _EDGE_NORMAL if e not in self.gamma_r]),
                           (self.w, list(_EDGE_NORMAL))):
            for e in edges:
                p = _edge_points(e, s)
                for k in fld.terms:
                    dn = normal_derivative(k.y, (e,))(p[:, 0], p[:, 1])
                    worst = max(worst, float(np.max(np.abs(k.coef * dn))))
        return worst

    def bounds(self, samples: int = 9) -> tuple[float, float]:
        """Sampled range of the exact ``v`` and ``w`` over the space-time box."""
        g = np.linspace(0.0, 1.0, samples)
        X1, X2, Y1, Y2 = np.meshgrid(g, g, g, g, indexing="ij")
        lo, hi = np.inf, -np.inf
        for t in np.linspace(0.0, self.T_final, 5):
            for fld in (self.v, self.w):
                vals = fld(t, X1, X2, Y1, Y2)
                lo, hi = min(lo, float(np.min(vals))), max(hi, float(np.max(vals)))
        return lo, hi

    def validate(self):
        if self.flux_mismatch() > 1e-10:
            raise ProblemError(f"problem {self.id!r}: exact micro fields carry normal flux off the reactive edges")
        if self.reaction.kind == "truncated-bilinear":
            lo, hi = self.bounds()
            if lo < 0 or hi > self.reaction.M:
                raise ProblemError(f"problem {self.id!r}: exact v, w leave [0, M], the clamp would be active")
        self.params().validate()


def _micro_pair(kappa: float):
    v = (_t_field(linear_time(1.0, 1.0)) * _x_field((1.0, const_space(1.0)), (0.5, sin_sin()))
         * _y_field((1.0, const_space(1.0)), (kappa, cos_cos(0.0, 1.0))))
    w = (_t_field(linear_time(1.0, 1.0)) * _x_field((1.0, const_space(1.0)), (0.5, cos_cos()))
         * _y_field((1.0, const_space(1.0)), (kappa, cos_cos(1.0, 1.0))))
    return v, w


def make_problem(pid: str, **overrides) -> ManufacturedProblem:
    """Registry: ``constant``, ``separable-smooth`` and ``layer``."""
    if pid == "constant":
        c = overrides.pop("value", 1.5)
        f = _x_field((c, const_space(1.0)))
        prob = ManufacturedProblem("constant", f, f, f)
    elif pid in ("separable-smooth", "layer"):
        kappa = overrides.pop("kappa", 0.5)
        v, w = _micro_pair(kappa)
        if pid == "separable-smooth":
            U = (_t_field(linear_time(1.0, 1.0)) * _x_field((1.0, sin_sin()))) + _x_field((1.0, const_space(1.0)))
            dist = None
        else:
            delta = overrides.pop("delta", 0.02)
            U = _t_field(linear_time(1.0, 1.0)) * _x_field((1.0, const_space(1.0)), (0.5, tanh_layer(delta)))
            dist = lambda x1, x2: np.abs(np.asarray(x1) - 0.5) + 0.0 * np.asarray(x2)  # noqa: E731
        prob = ManufacturedProblem(pid, U, v, w, reaction=ReactionLaw("truncated-bilinear", 0.25, 4.0),
                                   layer_distance=dist)
    else:
        raise ProblemError(f"unknown problem id {pid!r} (known: {', '.join(PROBLEMS)})")
    if overrides:
        prob = prob.with_params(**overrides)
    return prob


PROBLEMS = ("constant", "separable-smooth", "layer")


# --- weak residual audit -------------------------------------------------------------

@dataclass
class WeakResidualReport:
    U: float
    v: float
    w: float

    @property
    def worst(self) -> float:
        return max(self.U, self.v, self.w)


def weak_residual_check(problem: ManufacturedProblem, level: int = 5, micro_n: int = 4,
                        samples: int = 4, seed: int = 0, times=None,
                        max_h: float | None = None) -> WeakResidualReport:
    """Relative weak residuals of the exact fields against random FE test functions.

    Integrals use 4-point tensor Gauss; ``grad`` terms are integrated in weak
    (first-order) form so that Laplacians in the forcing are checked
    independently. Each residual is divided by the sum of the magnitudes of
    its contributions. ``max_h`` splits macro cells into sub-cells for
    fields with thin layers.
    """
    rng = np.random.default_rng(seed)
    mac = FeSpaceMacro(MacroPartition.uniform(level))
    mic = FeSpaceMicro(MicroMesh(micro_n, problem.gamma_r))
    qx, qy = mac.quadrature(4), mic.quadrature(4)
    qU = mac.quadrature(4, max_h)
    bp, bw, bE = mic.boundary_quadrature(None, order=4)
    X, Y = qx.points, qy.points
    XU = qU.points
    fU, fv, fw, gv = (problem.forcing_U(), problem.forcing_v(), problem.forcing_w(),
                      problem.boundary_load_v())
    law = problem.reaction
    times = rng.uniform(0, problem.T_final, samples) if times is None else times
    rU = rv = rw = 0.0
    for t in times:
        phi = rng.standard_normal(mac.n_dofs) * mac.interior
        psi = rng.standard_normal(mic.n_dofs)
        Px = qx.E @ phi
        Sy, Sgx, Sgy = qy.E @ psi, qy.Gx @ psi, qy.Gy @ psi
        Sb = bE @ psi
        wx, wy = qx.weights, qy.weights
        # macro equation (own rule, refined for thin layers)
        PU, PUx, PUy, wU = qU.E @ phi, qU.Gx @ phi, qU.Gy @ phi, qU.weights
        Ut = problem.U.time_derivative().macro(t, XU[:, 0], XU[:, 1])
        g1, g2 = problem.U.macro_grad(t, XU[:, 0], XU[:, 1])
        trace = problem.v.on_grid(t, XU, bp) @ bw
        UU = problem.U.macro(t, XU[:, 0], XU[:, 1])
        parts = [wU @ (Ut * PU), problem.D_U * (wU @ (g1 * PUx + g2 * PUy)),
                 -problem.gamma * problem.alpha * (wU @ ((trace - problem.s_R * UU) * PU)),
                 -(wU @ (fU.macro(t, XU[:, 0], XU[:, 1]) * PU))]
        rU = max(rU, abs(sum(parts)) / max(sum(abs(p) for p in parts), 1.0))
        Uv = problem.U.macro(t, X[:, 0], X[:, 1])
        # micro equations
        V = problem.v.on_grid(t, X, Y)
        W = problem.w.on_grid(t, X, Y)
        eta = law(V, W)
        for fld, D, f, extra, name in ((problem.v, problem.D_v, fv, True, "v"),
                                       (problem.w, problem.D_w, fw, False, "w")):
            ct = fld.time_coeffs(t)
            Xt = fld.x_table(X[:, 0], X[:, 1]) * ct
            vol_t = fld.time_derivative().on_grid(t, X, Y)
            d1 = Xt @ fld.y_table(Y[:, 0], Y[:, 1], 0).T
            d2 = Xt @ fld.y_table(Y[:, 0], Y[:, 1], 1).T
            wP = wx * Px
            parts = [wP @ (vol_t @ (wy * Sy)), wP @ (eta @ (wy * Sy)),
                     D * (wP @ (d1 @ (wy * Sgx) + d2 @ (wy * Sgy))),
                     -(wP @ (f.on_grid(t, X, Y) @ (wy * Sy)))]
            if extra:
                vb = fld.on_grid(t, X, bp)
                parts.append(problem.alpha * (wP @ ((vb - Uv[:, None]) @ (bw * Sb))))
                parts.append(-(wP @ (gv.on_grid(t, X, bp) @ (bw * Sb))))
            r = abs(sum(parts)) / max(sum(abs(p) for p in parts), 1.0)
            if name == "v":
                rv = max(rv, r)
            else:
                rw = max(rw, r)
    return WeakResidualReport(rU, rv, rw)


# --- error norms -------------------------------------------------------------------------

@dataclass
class ErrorNorms:
    times: np.ndarray
    U_l2: float
    U_h1: float
    e1_h1: float
    e2_h1: float
    e2_l2: float
    e1_U0_l2: float
    pythagoras_defect: float
    v_l2: float
    v_grad: float
    w_l2: float
    w_grad: float
    U_l2_t: np.ndarray = field(repr=False, default=None)
    v_X_t: np.ndarray = field(repr=False, default=None)
    w_X_t: np.ndarray = field(repr=False, default=None)

    @property
    def v_X(self) -> float:
        return math.sqrt(self.v_l2 ** 2 + self.v_grad ** 2)

    @property
    def w_X(self) -> float:
        return math.sqrt(self.w_l2 ** 2 + self.w_grad ** 2)

    @property
    def micro_sq(self) -> float:
        return self.v_X ** 2 + self.w_X ** 2


class MicroErrorEvaluator:
    """Errors ``||chi - sum b_ij phi_i psi_j||`` for a separable exact field ``chi``.

    Every factor is split into its nodal interpolant and a remainder,
    ``X_k = I X_k + rx_k`` and ``Y_k = I Y_k + ry_k``. The error becomes
    ``D + sum_k c_k R_k`` with ``D`` a tensor FE function (handled by the
    assembled matrices) and ``R_k = I X_k (x) ry_k + rx_k (x) Y_k``, whose Gram
    matrices are precomputed by quadrature. Every term is of the size of the
    error itself, so there is no cancellation of large quantities and the
    per-time cost is a few sparse-dense products.
    """

    def __init__(self, fld: SeparableField, macro: FeSpaceMacro, micro: FeSpaceMicro,
                 max_h: float | None = None):
        self.fld = fld
        self.macro, self.micro = macro, micro
        K = len(fld.terms)
        qx, qy = macro.quadrature(4, max_h), micro.quadrature(4)
        xx, yy = macro.dof_xy, micro.dof_xy
        X, Y = qx.points, qy.points
        self.IX = np.array([k.x(xx[:, 0], xx[:, 1]) for k in fld.terms]).reshape(K, -1).T
        self.IY = np.array([k.y(yy[:, 0], yy[:, 1]) for k in fld.terms]).reshape(K, -1).T
        M, wx = macro.mass, qx.weights[:, None]
        rx = fld.x_table(X[:, 0], X[:, 1]) - qx.E @ self.IX
        Hx = qx.E.T @ (wx * rx)                      # <phi_i, rx_k>
        Gxx = rx.T @ (wx * rx)                       # <rx_k, rx_l>
        Gix = self.IX.T @ Hx                         # <I X_k, rx_l>
        Gii = self.IX.T @ (M @ self.IX)              # <I X_k, I X_l>
        wy = qy.weights[:, None]
        Yt = fld.y_table(Y[:, 0], Y[:, 1])
        Yt1 = fld.y_table(Y[:, 0], Y[:, 1], 0)
        Yt2 = fld.y_table(Y[:, 0], Y[:, 1], 1)
        ry = Yt - qy.E @ self.IY
        ry1, ry2 = Yt1 - qy.Gx @ self.IY, Yt2 - qy.Gy @ self.IY
        self.Hx, self.MIX = Hx, M @ self.IX
        self.parts = {}
        for name, (yv, ryv, Ey) in {
            "l2": ((Yt,), (ry,), (qy.E,)),
            "grad": ((Yt1, Yt2), (ry1, ry2), (qy.Gx, qy.Gy)),
        }.items():
            HA = sum(E.T @ (wy * r) for E, r in zip(Ey, ryv))          # <psi_j, ry_k>
            LY = sum(E.T @ (wy * v) for E, v in zip(Ey, yv))           # <psi_j, Y_k>
            Grr = sum(r.T @ (wy * r) for r in ryv)                     # <ry_k, ry_l>
            GrY = sum(r.T @ (wy * v) for r, v in zip(ryv, yv))         # <ry_k, Y_l>
            GYY = sum(v.T @ (wy * v) for v in yv)                      # <Y_k, Y_l>
            GR = Gii * Grr + Gix * GrY + Gix.T * GrY.T + Gxx * GYY
            A = micro.mass if name == "l2" else micro.stiffness
            self.parts[name] = (A, HA, LY, GR)

    def at(self, t: float, b: np.ndarray) -> tuple[float, float]:
        """``(||e||^2_{L2(Omega x Y)}, ||grad_y e||^2_{L2(Omega x Y)})`` at one time."""
        N1, N2 = self.macro.n_dofs, self.micro.n_dofs
        c = self.fld.time_coeffs(t)
        D = (self.IX * c) @ self.IY.T - b.reshape(N1, N2)
        MD = self.macro.mass @ D
        out = []
        for name in ("l2", "grad"):
            A, HA, LY, GR = self.parts[name]
            dd = float(np.sum(MD * np.asarray((A @ D.T).T)))
            dr = float(c @ (np.sum(self.MIX * (D @ HA), axis=0) + np.sum(self.Hx * (D @ LY), axis=0)))
            rr = float(c @ GR @ c)
            out.append(max(dd + 2.0 * dr + rr, 0.0))
        return out[0], out[1]


def direct_micro_error_sq(fld: SeparableField, t: float, b: np.ndarray, macro: FeSpaceMacro,
                          micro: FeSpaceMicro) -> float:
    """Brute-force ``L2(Omega x Y)`` error on the full tensor quadrature grid (small meshes)."""
    qx, qy = macro.quadrature(4), micro.quadrature(4)
    Bm = b.reshape(macro.n_dofs, micro.n_dofs)
    F = np.asarray(qy.E @ (qx.E @ Bm).T).T
    Xt = fld.x_table(qx.points[:, 0], qx.points[:, 1]) * fld.time_coeffs(t)
    Yt = fld.y_table(qy.points[:, 0], qy.points[:, 1])
    return kernels.tensor_sq_error(F, Xt, Yt, qx.weights, qy.weights)


def error_norms(traj: Trajectory, problem: ManufacturedProblem, max_h: float | None = DEFAULT_MAX_H,
                micro_max_h: float | None = None) -> ErrorNorms:
    """All error norms of a trajectory against the exact fields.

    Time integrals use the trapezoid rule on the trajectory's grid; space
    integrals use 4-point tensor Gauss (macro norms on sub-cells of side at
    most ``max_h``). ``e1 = R U - U_h`` and ``e2 = U - R U`` with ``R`` the
    ``H1(Omega)`` projection.
    """
    solver = traj.solver
    macro, micro = solver.macro, solver.micro
    times = traj.times
    q = macro.quadrature(4, max_h)
    X = q.points
    proj = elliptic_project(problem.U, macro, times, max_h=max_h)
    M, K = macro.mass, macro.stiffness
    U = problem.U
    l2_t, h1_t, e1_t, e2_t, e2l2_t, pyth = [], [], [], [], [], []
    for st in traj.states:
        t = st.t
        u = U.macro(t, X[:, 0], X[:, 1])
        g1, g2 = U.macro_grad(t, X[:, 0], X[:, 1])
        e = u - q.E @ st.a
        ex, ey = g1 - q.Gx @ st.a, g2 - q.Gy @ st.a
        l2 = q.weights @ (e * e)
        h1 = l2 + q.weights @ (ex * ex + ey * ey)
        r = proj.at(t)
        d = r - st.a
        e1 = d @ (M @ d) + d @ (K @ d)
        f2, f2x, f2y = u - q.E @ r, g1 - q.Gx @ r, g2 - q.Gy @ r
        e2l2 = q.weights @ (f2 * f2)
        e2 = e2l2 + q.weights @ (f2x * f2x + f2y * f2y)
        l2_t.append(l2)
        h1_t.append(h1)
        e1_t.append(e1)
        e2_t.append(e2)
        e2l2_t.append(e2l2)
        pyth.append(abs(h1 - e1 - e2) / h1 if h1 > 0 else abs(e1 + e2))
    d0 = proj.at(times[0]) - traj.states[0].a
    e1_0 = math.sqrt(max(d0 @ (M @ d0), 0.0))
    ev = MicroErrorEvaluator(problem.v, macro, micro, micro_max_h)
    ew = MicroErrorEvaluator(problem.w, macro, micro, micro_max_h)
    vl, vg, wl, wg = [], [], [], []
    for st in traj.states:
        a, b = ev.at(st.t, st.b)
        c, d = ew.at(st.t, st.c)
        vl.append(a)
        vg.append(b)
        wl.append(c)
        wg.append(d)

    def tn(vals):
        return math.sqrt(max(trapezoid(vals, times), 0.0)) if len(times) > 1 else math.sqrt(vals[0])

    vX = np.array(vl) + np.array(vg)
    wX = np.array(wl) + np.array(wg)
    return ErrorNorms(times, tn(l2_t), tn(h1_t), tn(e1_t), tn(e2_t), tn(e2l2_t), e1_0,
                      float(max(pyth)), tn(vl), tn(vg), tn(wl), tn(wg),
                      np.array(l2_t), vX, wX)


# --- projection-error studies ------------------------------------------------------------

def projection_errors(problem: ManufacturedProblem, level: int, n_time: int = 16,
                      max_h: float | None = DEFAULT_MAX_H) -> tuple[float, float]:
    """``(||U - R U||_{L2(S,L2)}, ||U - R U||_{L2(S,H1)})`` on a uniform level."""
    from .adapt import complement_norms
    times = np.linspace(0.0, problem.T_final, n_time + 1)
    space = FeSpaceMacro(MacroPartition.uniform(level))
    return complement_norms(elliptic_project(problem.U, space, times, max_h=max_h))


def fiber_projection_errors(fld: SeparableField, micro: MicroMesh, T: float, macro_level: int = 4,
                            n_time: int = 16) -> tuple[float, float]:
    """Errors of the ``H1(Y)`` projection applied fibrewise to a separable micro field.

    Returns ``(L2(S, L2(Omega x Y)), L2(S, L2(Omega, H1(Y))))`` norms. The
    ``x`` integral uses 4-point Gauss on the uniform macro mesh of
    ``macro_level``.
    """
    ms = FeSpaceMicro(micro)
    qy = ms.quadrature(4)
    Y = qy.points
    L = np.column_stack([ms.load(k.y(Y[:, 0], Y[:, 1]), qy, grad=k.y.gradient(Y[:, 0], Y[:, 1]))
                         for k in fld.terms])
    lu = spla.splu((ms.mass + ms.stiffness).tocsc())
    P = lu.solve(np.ascontiguousarray(L))
    R = fld.y_table(Y[:, 0], Y[:, 1]) - qy.E @ P
    R1 = fld.y_table(Y[:, 0], Y[:, 1], 0) - qy.Gx @ P
    R2 = fld.y_table(Y[:, 0], Y[:, 1], 1) - qy.Gy @ P
    w = qy.weights[:, None]
    GM = R.T @ (w * R)
    GK = R1.T @ (w * R1) + R2.T @ (w * R2)
    qx = FeSpaceMacro(MacroPartition.uniform(macro_level)).quadrature(4)
    Xt = fld.x_table(qx.points[:, 0], qx.points[:, 1])
    GX = Xt.T @ (qx.weights[:, None] * Xt)
    times = np.linspace(0.0, T, n_time + 1)
    from .adapt import _time_gram
    GT = _time_gram(fld, times)
    W = GT * GX
    l2 = float(np.sum(W * GM))
    h1 = l2 + float(np.sum(W * GK))
    return math.sqrt(max(l2, 0.0)), math.sqrt(max(h1, 0.0))


@dataclass
class EocTable:
    h: np.ndarray
    errors: np.ndarray
    slopes: np.ndarray

    def rows(self):
        for i, (h, e) in enumerate(zip(self.h, self.errors)):
            yield h, e, (self.slopes[i - 1] if i else float("nan"))


def eoc(table) -> EocTable:
    """Slopes ``log(e_i / e_{i+1}) / log(h_i / h_{i+1})`` of consecutive levels."""
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise ValueError("need at least two (h, error) pairs")
    h, e = arr[:, 0], arr[:, 1]
    if np.any(np.diff(h) >= 0):
        raise ValueError("mesh sizes must be strictly decreasing")
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("mesh sizes and errors must be positive")
    s = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
    return EocTable(h, e, s)


# --- continuity with respect to macro data -----------------------------------------

@dataclass
class ContinuityReport:
    numerator: float
    denominator: float
    status: str

    @property
    def ratio(self) -> float:
        return self.numerator / self.denominator if self.denominator > 0 else float("nan")


def _micro_run(params: ModelParams, Ubar: SeparableField, partition, micro, dt, linear_solver):
    s = TwoScaleSolver(params, partition, micro, dt=dt, linear_solver=linear_solver,
                       macro_input=lambda t, x1, x2: Ubar.macro(t, x1, x2))
    return s.solve()


def continuity_experiment(Ubar1: SeparableField, Ubar2: SeparableField, params: ModelParams,
                          partition: MacroPartition, micro: MicroMesh, dt: float | None = None,
                          linear_solver: str = "schur", max_h: float | None = DEFAULT_MAX_H
                          ) -> ContinuityReport:
    """Run the micro system twice with frozen macro inputs and compare.

    Returns the ratio of ``||dv||_X^2 + ||dw||_X^2`` to
    ``||Ubar2 - Ubar1||^2_{L2(S,L2)}``.
    """
    t1 = _micro_run(params, Ubar1, partition, micro, dt, linear_solver)
    t2 = _micro_run(params, Ubar2, partition, micro, dt, linear_solver)
    s = t1.solver
    M, MY, KY = s.sys.M_Omega, s.sys.M_Y, s.sys.K_Y
    N1, N2 = s.N1, s.N2
    AY = MY + KY
    num = []
    for a, b in zip(t1.states, t2.states):
        db = (b.b - a.b).reshape(N1, N2)
        dc = (b.c - a.c).reshape(N1, N2)
        num.append(float(np.sum(db * (M @ db @ AY)) + np.sum(dc * (M @ dc @ AY))))
    q = s.macro.quadrature(4, max_h)
    den = []
    diff = Ubar2 + (-Ubar1)
    for st in t1.states:
        d = diff.macro(st.t, q.points[:, 0], q.points[:, 1])
        den.append(float(q.weights @ (d * d)))
    times = t1.times
    N = trapezoid(num, times)
    D = trapezoid(den, times)
    status = "identical inputs" if D <= 1e-300 else "ok"
    return ContinuityReport(N, D, status)


def perturbation(eps: float) -> SeparableField:
    """``eps * sin(pi x1)``, constant in time."""
    sx = SpaceFactor(lambda x, y: np.sin(PI * x) + 0.0 * y,
                     lambda x, y: (PI * np.cos(PI * x) + 0.0 * y, 0.0 * x * y),
                     lambda x, y: -PI * PI * np.sin(PI * x) + 0.0 * y)
    return _x_field((eps, sx))


def continuity_sweep(problem: ManufacturedProblem, eps_list=(1e-1, 1e-2, 1e-3), level: int = 3,
                     micro_n: int = 8, dt: float | None = None, signs=(1.0,)):
    """``[(eps, ratio)]`` for ``Ubar2 = Ubar1 + eps sin(pi x1)`` with ``Ubar1`` the exact ``U``."""
    params = problem.params()
    part = MacroPartition.uniform(level)
    micro = MicroMesh(micro_n, problem.gamma_r)
    out = []
    for sg in signs:
        for eps in eps_list:
            rep = continuity_experiment(problem.U, problem.U + perturbation(sg * eps), params, part, micro, dt)
            out.append((sg * eps, rep.ratio))
    return out


@dataclass
class ScalarExchangeReport:
    numerator: float
    closed_form: float
    continuous: float

    @property
    def error(self) -> float:
        return abs(self.numerator - self.closed_form)


def scalar_exchange_check(delta: float = 0.1, alpha: float = 1.0, T: float = 0.5, n_steps: int = 50,
                          D_v: float = 1e6, micro_n: int = 4, gamma_r=("top",)) -> ScalarExchangeReport:
    """Spatially constant inputs ``0`` and ``delta`` with no reaction.

    With a large micro diffusivity the difference ``v2 - v1`` is constant in
    ``y`` and follows the exchange ODE ``e' = -lambda (e - delta)``,
    ``lambda = alpha |Gamma_R| / |Y|``. The discrete numerator is compared
    with the backward-Euler closed form ``e_n = delta (1 - (1 + lambda dt)^-n)``
    (and, for information, with the exact exponential).
    """
    params = ModelParams(D_U=1.0, D_v=D_v, D_w=1.0, alpha=alpha, gamma=1.0, T_final=T,
                         reaction=ReactionLaw("zero"))
    micro = MicroMesh(micro_n, gamma_r)
    zero = SeparableField()
    const = _x_field((delta, const_space(1.0)))
    rep = continuity_experiment(zero, const, params, MacroPartition.uniform(0), micro, dt=T / n_steps)
    lam = alpha * len(gamma_r)
    dt = T / n_steps
    n = np.arange(n_steps + 1)
    e = delta * (1.0 - (1.0 + lam * dt) ** (-n.astype(float)))
    closed = trapezoid(e ** 2, n * dt)
    # exact exponential, integrated analytically
    k = lam
    cont = delta ** 2 * (T - 2 * (1 - math.exp(-k * T)) / k + (1 - math.exp(-2 * k * T)) / (2 * k))
    return ScalarExchangeReport(rep.numerator, closed, cont)
