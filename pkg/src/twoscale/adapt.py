"""Elliptic projections, the square-wise error indicator and the feedback loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy import stats

from .fem import FeSpaceMacro, QuadRule
from .fields import SeparableField
from .geometry import DyadicSquare, MacroPartition, MicroMesh, refine
from .solver import trapezoid

log = logging.getLogger(__name__)

DEFAULT_MAX_H = 1.0 / 64.0


@dataclass
class EllipticProjection:
    """``H1(Omega)`` projections of a separable field at a list of times.

    ``term_coeffs[k]`` is the projection of the ``k``-th spatial factor, so
    the projection at time ``t`` is ``sum_k c_k(t) term_coeffs[k]``.
    """

    space: FeSpaceMacro
    field: SeparableField
    times: np.ndarray
    term_coeffs: np.ndarray
    rule: QuadRule

    @property
    def coeffs(self) -> np.ndarray:
        """Projection coefficients, one row per time node."""
        C = np.array([self.field.time_coeffs(t) for t in self.times]).reshape(len(self.times), -1)
        return C @ self.term_coeffs

    def at(self, t: float) -> np.ndarray:
        return self.field.time_coeffs(t) @ self.term_coeffs

    def orthogonality_defect(self, t: float) -> float:
        """``max_k |<u - R u, phi_k>_{H1}|`` at time ``t``."""
        c = self.field.time_coeffs(t)
        loads = _term_loads(self.space, self.field, self.rule)
        A = self.space.mass + self.space.stiffness
        return float(np.max(np.abs(loads @ c - A @ self.at(t))))


def _term_loads(space: FeSpaceMacro, fld: SeparableField, rule: QuadRule) -> np.ndarray:
    X = rule.points
    cols = []
    for k in fld.terms:
        g = k.x.gradient(X[:, 0], X[:, 1])
        cols.append(space.load(k.x(X[:, 0], X[:, 1]), rule, grad=g))
    return np.column_stack(cols) if cols else np.zeros((space.n_dofs, 0))


def elliptic_project(u_exact: SeparableField, space: FeSpaceMacro, time_nodes,
                     max_h: float | None = DEFAULT_MAX_H) -> EllipticProjection:
    """Solve ``(M + K) r = <u(t), phi>_{H1}`` for every time node.

    The right-hand side uses 4-point tensor Gauss on sub-cells of side at
    most ``max_h`` and needs the analytic gradient of ``u_exact``.
    """
    times = np.asarray(list(time_nodes), dtype=float)
    rule = space.quadrature(4, max_h)
    L = _term_loads(space, u_exact, rule)
    lu = spla.splu((space.mass + space.stiffness).tocsc())
    R = lu.solve(np.ascontiguousarray(L)) if L.shape[1] else L
    return EllipticProjection(space, u_exact, times, np.asarray(R).T.copy(), rule)


def _complement_tables(proj: EllipticProjection):
    """Per-term values and gradients of ``X_k - R X_k`` at quadrature points."""
    rule, sp_ = proj.rule, proj.space
    X = rule.points
    vals, gx, gy = [], [], []
    for k, r in zip(proj.field.terms, proj.term_coeffs):
        g = k.x.gradient(X[:, 0], X[:, 1])
        vals.append(k.x(X[:, 0], X[:, 1]) - rule.E @ r)
        gx.append(g[0] - rule.Gx @ r)
        gy.append(g[1] - rule.Gy @ r)
    return np.column_stack(vals), np.column_stack(gx), np.column_stack(gy)


def _time_gram(fld: SeparableField, times) -> np.ndarray:
    C = np.array([fld.time_coeffs(t) for t in times])
    if len(times) == 1:
        return np.outer(C[0], C[0])
    G = np.zeros((C.shape[1], C.shape[1]))
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    for wi, c in zip(w, C):
        G += wi * np.outer(c, c)
    return G


def complement_density(proj: EllipticProjection) -> tuple[np.ndarray, np.ndarray]:
    """Time-integrated ``(e2)^2`` and ``|grad e2|^2`` at every quadrature point."""
    G = _time_gram(proj.field, proj.times)
    V, Gx, Gy = _complement_tables(proj)
    l2 = np.einsum("qk,kl,ql->q", V, G, V)
    h1 = np.einsum("qk,kl,ql->q", Gx, G, Gx) + np.einsum("qk,kl,ql->q", Gy, G, Gy)
    return np.maximum(l2, 0.0), np.maximum(h1, 0.0)


@dataclass
class IndicatorReport:
    generation: int
    squares: list
    values: np.ndarray
    beta: float | None = None
    marked: list = field(default_factory=list)
    closure_splits: frozenset = frozenset()
    n_dofs: int = 0

    @property
    def max_value(self) -> float:
        return float(np.max(self.values))

    @property
    def sum_sq(self) -> float:
        return float(np.sum(self.values ** 2))

    def as_dict(self) -> dict:
        return dict(zip(self.squares, self.values))


def error_indicator(u_exact: SeparableField, proj: EllipticProjection,
                    p: MacroPartition | None = None, time_quadrature=None) -> IndicatorReport:
    """Space-time ``H1`` norm of ``u - R u`` restricted to every square.

    ``time_quadrature`` may override the projection's time nodes (composite
    trapezoid on those nodes is used either way).
    """
    if u_exact is not proj.field:
        proj = EllipticProjection(proj.space, u_exact, proj.times, proj.term_coeffs, proj.rule)
    if time_quadrature is not None:
        proj = EllipticProjection(proj.space, proj.field, np.asarray(time_quadrature, float),
                                  proj.term_coeffs, proj.rule)
    space = proj.space
    if p is not None and p.squares != space.partition.squares:
        raise ValueError("projection was computed on a different partition")
    l2, h1 = complement_density(proj)
    w = proj.rule.weights
    per_elem = np.bincount(proj.rule.elem, weights=w * (l2 + h1), minlength=space.n_elements)
    return IndicatorReport(space.partition.generation, list(space.squares), np.sqrt(per_elem),
                           n_dofs=space.n_dofs)


def complement_norms(proj: EllipticProjection) -> tuple[float, float]:
    """``(||e2||_{L2(S,L2)}, ||e2||_{L2(S,H1)})``."""
    l2, h1 = complement_density(proj)
    w = proj.rule.weights
    return float(np.sqrt(w @ l2)), float(np.sqrt(w @ (l2 + h1)))


def mark(values, beta: float) -> np.ndarray:
    """Indices ``i`` with ``values[i] >= beta * max(values)``."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1) (marking rule), got {beta}")
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no indicator values to mark")
    if np.any(~np.isfinite(v)) or np.any(v < 0):
        raise ValueError("indicator values must be finite and nonnegative")
    return np.flatnonzero(v >= beta * v.max())


# --- feedback loop -------------------------------------------------------------

@dataclass
class FeedbackStep:
    iteration: int
    partition: MacroPartition
    report: IndicatorReport
    e2_l2: float
    e2_h1: float
    n_dofs: int
    errors: object = None

    @property
    def n_squares(self) -> int:
        return len(self.partition)

    @property
    def max_nu(self) -> float:
        return self.report.max_value


@dataclass
class FeedbackHistory:
    steps: list = field(default_factory=list)
    surrogate: bool = False
    stopped: str = ""

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def max_nu(self) -> np.ndarray:
        return np.array([s.max_nu for s in self.steps])

    @property
    def e2_norms(self) -> np.ndarray:
        return np.array([s.e2_h1 for s in self.steps])

    @property
    def n_dofs(self) -> np.ndarray:
        return np.array([s.n_dofs for s in self.steps])

    def csv_rows(self):
        for s in self.steps:
            r = s.report
            yield (s.iteration, s.n_squares, s.n_dofs, s.max_nu, r.sum_sq, s.e2_h1,
                   len(r.marked), len(r.closure_splits))


def feedback_loop(problem, beta: float = 0.5, iters: int = 12, initial: MacroPartition | None = None,
                  micro: MicroMesh | None = None, n_time: int = 16, tol: float = 1e-6,
                  max_h: float | None = DEFAULT_MAX_H, solve: bool = True,
                  linear_solver: str = "schur") -> FeedbackHistory:
    """A-priori feedback refinement driven by the exact macro field.

    Each iteration builds the macro space, optionally runs the two-scale
    solver (its errors are stored for the transfer check), projects the exact
    ``U``, evaluates the indicator, marks with threshold ``beta`` and refines.
    The time grid (``n_time`` uniform steps) is shared by all iterations.
    ``iters`` counts refinement steps, so up to ``iters + 1`` partitions are
    evaluated; the last one is marked but not refined.
    """
    from .mms import error_norms
    from .solver import TwoScaleSolver

    if iters < 1:
        raise ValueError("iters must be at least 1")
    mark(np.ones(1), beta)  # range check
    part = initial if initial is not None else MacroPartition.uniform(0)
    micro = micro if micro is not None else MicroMesh(4)
    params = problem.params()
    T = params.T_final
    dt = T / n_time
    times = np.linspace(0.0, T, n_time + 1)
    hist = FeedbackHistory()
    for it in range(iters + 1):
        space = FeSpaceMacro(part)
        errs = None
        if solve:
            s = TwoScaleSolver(params, part, micro, dt=dt, linear_solver=linear_solver)
            traj = s.solve()
            errs = error_norms(traj, problem, max_h=max_h)
        proj = elliptic_project(problem.U, space, times, max_h=max_h)
        rep = error_indicator(problem.U, proj)
        e2_l2, e2_h1 = complement_norms(proj)
        step = FeedbackStep(it, part, rep, e2_l2, e2_h1, space.n_dofs, errs)
        hist.steps.append(step)
        log.info("iter %d: %d squares, %d dofs, max nu %.3e, e2 %.3e", it, len(part),
                 space.n_dofs, rep.max_value, e2_h1)
        if rep.max_value < tol:
            hist.stopped = "tolerance"
            break
        idx = mark(rep.values, beta)
        rep.beta = beta
        rep.marked = [rep.squares[i] for i in idx]
        if it == iters:
            hist.stopped = "iterations"
            break
        new = refine(part, rep.marked)
        rep.closure_splits = frozenset(new.closure_splits)
        part = new
    return hist


def uniform_errors(problem, levels, n_time: int = 16, max_h: float | None = DEFAULT_MAX_H):
    """``(n_dofs, ||e2||_{L2(S,H1)})`` of the projection on uniform partitions."""
    T = problem.params().T_final
    times = np.linspace(0.0, T, n_time + 1)
    out = []
    for m in levels:
        space = FeSpaceMacro(MacroPartition.uniform(m))
        proj = elliptic_project(problem.U, space, times, max_h=max_h)
        out.append((space.n_dofs, complement_norms(proj)[1]))
    return out


def near_layer_fraction(hist: FeedbackHistory, dist_fn, factor: float = 2.0) -> float:
    """Share of squares created by refinement that lie within ``factor*h`` of a layer.

    ``dist_fn(x1, x2)`` is the distance to the layer; ``h`` is the diameter of
    the parent square that was split.
    """
    near = total = 0
    for s in hist.steps[:-1]:
        for q in list(s.report.marked) + list(s.report.closure_splits):
            total += 4
            x0, x1, y0, y1 = q.bounds()
            xs = np.linspace(x0, x1, 5)
            ys = np.linspace(y0, y1, 5)
            X, Y = np.meshgrid(xs, ys)
            if np.min(dist_fn(X, Y)) <= factor * q.diameter:
                near += 4
    return near / total if total else 1.0


# --- micro-from-macro transfer --------------------------------------------------

@dataclass
class TransferReport:
    macro_l2_sq: np.ndarray
    micro_sq: np.ndarray
    floor: float
    slope: float
    ratios: np.ndarray
    spearman: float
    spearman_p: float
    limit_ratios: np.ndarray
    at_floor: np.ndarray

    @property
    def no_growth(self) -> bool:
        r = self.ratios[~self.at_floor]
        return len(r) < 2 or not (self.spearman > 0)


def micromacro_transfer_check(macro_l2_sq, micro_sq, macro_h1=None, eps_U=None, e1_U0=None,
                              floor: float | None = None) -> TransferReport:
    """Ratios ``(micro^2 - floor) / ||e_U||^2`` across a refinement sequence.

    ``micro_sq`` holds ``||e_v||_X^2 + ||e_w||_X^2``. When ``floor`` is not
    given it is the intercept of a least-squares fit
    ``micro^2 = c ||e_U||^2 + floor`` (the micro-mesh contribution).
    """
    E = np.asarray(macro_l2_sq, dtype=float)
    m = np.asarray(micro_sq, dtype=float)
    at_floor = np.sqrt(np.abs(E)) < 1e-14
    ok = ~at_floor
    if floor is None:
        if ok.sum() >= 2:
            A = np.column_stack([E[ok], np.ones(ok.sum())])
            slope, floor = np.linalg.lstsq(A, m[ok], rcond=None)[0]
        else:
            slope, floor = np.nan, 0.0
    else:
        slope = np.nan
    ratios = np.full(len(E), np.nan)
    ratios[ok] = (m[ok] - floor) / E[ok]
    if ok.sum() >= 2:
        rho, pval = stats.spearmanr(np.arange(ok.sum()), ratios[ok])
    else:
        rho, pval = np.nan, np.nan
    lim = np.full(len(E), np.nan)
    if macro_h1 is not None and eps_U is not None and e1_U0 is not None:
        den = np.sqrt(np.asarray(eps_U)) + np.asarray(e1_U0)
        lim = np.where(den > 1e-14, np.asarray(macro_h1) / np.where(den > 0, den, 1), np.nan)
    return TransferReport(E, m, float(floor), float(slope), ratios, float(rho), float(pval), lim,
                          at_floor)


def eps_U(e2_h1: float) -> float:
    """``max{||e2||, ||e2||^2}`` in ``L2(S,H1)``."""
    return max(e2_h1, e2_h1 ** 2)


__all__ = ["EllipticProjection", "elliptic_project", "error_indicator", "IndicatorReport", "mark",
           "FeedbackHistory", "FeedbackStep", "feedback_loop", "uniform_errors", "complement_norms",
           "micromacro_transfer_check", "TransferReport", "near_layer_fraction", "eps_U",
           "DyadicSquare"]
