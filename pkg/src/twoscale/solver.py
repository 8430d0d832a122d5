"""Semi-discrete two-scale Galerkin system and its time integration.

Unknowns are the coefficients ``a`` (macro concentration), ``b`` and ``c``
(micro concentrations, micro-fastest tensor layout). Each step is backward
Euler in the diffusion and exchange terms with the reaction evaluated at the
previous state. After dividing the macro equation by ``gamma`` the coupled
linear system is symmetric positive definite.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import kernels
from .fem import FeSpaceMacro, FeSpaceMicro, FeSystem, assemble
from .fields import SeparableField
from .geometry import MacroPartition, MicroMesh
from .linalg import BlockKronSystem, block_solve, factorize

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class StepGuardError(SolverError):
    pass


@dataclass(frozen=True)
class ReactionLaw:
    """Globally Lipschitz reaction ``eta(v, w)``.

    ``zero``: 0; ``linear``: ``k (v + w)``; ``truncated-bilinear``:
    ``k clamp(v, 0, M) clamp(w, 0, M)``.
    """

    kind: str = "truncated-bilinear"
    k: float = 1.0
    M: float = 1e3

    def __post_init__(self):
        if self.kind not in kernels.REACTION_CODES:
            raise ValueError(f"unknown reaction law {self.kind!r}")

    def __call__(self, v, w):
        if self.kind == "zero":
            return np.zeros(np.broadcast(np.asarray(v), np.asarray(w)).shape)
        if self.kind == "linear":
            return self.k * (np.asarray(v) + np.asarray(w))
        return self.k * np.clip(v, 0.0, self.M) * np.clip(w, 0.0, self.M)

    @property
    def lipschitz(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear":
            return abs(self.k)
        return abs(self.k) * self.M


def _zero_macro(t, x1, x2):
    return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)


def _zero_micro(x1, x2, y1, y2):
    return np.zeros(np.broadcast(*map(np.asarray, (x1, x2, y1, y2))).shape)


@dataclass
class ModelParams:
    """Coefficients and data of the macro-micro reaction-diffusion model.

    ``U_D(t, x1, x2)`` is the Dirichlet value on the macro boundary;
    ``U_I(x1, x2)``, ``v_I(x1, x2, y1, y2)`` and ``w_I`` are initial values.
    Optional forcings are separable fields: ``f_U`` (macro), ``f_v``,
    ``f_w`` (micro volume) and ``g_v`` (micro boundary load on the reactive
    edges, added to the right-hand side of the ``v`` equation).
    """

    D_U: float = 1.0
    D_v: float = 1.0
    D_w: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0
    T_final: float = 0.5
    reaction: ReactionLaw = field(default_factory=ReactionLaw)
    U_D: Callable = _zero_macro
    U_I: Callable = lambda x1, x2: _zero_macro(0.0, x1, x2)
    v_I: Callable = _zero_micro
    w_I: Callable = _zero_micro
    f_U: SeparableField = field(default_factory=SeparableField)
    f_v: SeparableField = field(default_factory=SeparableField)
    f_w: SeparableField = field(default_factory=SeparableField)
    g_v: SeparableField = field(default_factory=SeparableField)

    def validation_errors(self, strict: bool = True) -> list[str]:
        """Violated assumptions; ``strict=False`` admits the decoupled limit ``alpha = 0``."""
        errs = []
        for name in ("D_U", "D_v", "D_w"):
            if not getattr(self, name) > 0:
                errs.append(f"(A3): {name} must be positive")
        if not (self.alpha > 0 if strict else self.alpha >= 0):
            errs.append("alpha must be positive (interface exchange rate)")
        if not self.gamma > 0:
            errs.append("gamma must be positive (upscaling factor)")
        if not self.T_final > 0:
            errs.append("T_final must be positive")
        if not math.isfinite(self.reaction.lipschitz):
            errs.append("(A4): reaction law must be globally Lipschitz")
        return errs

    def validate(self, strict: bool = True):
        errs = self.validation_errors(strict)
        if errs:
            raise ValueError("; ".join(errs))


@dataclass
class TwoScaleState:
    t: float
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def copy(self) -> TwoScaleState:
        return TwoScaleState(self.t, self.a.copy(), self.b.copy(), self.c.copy())


@dataclass
class Trajectory:
    states: list
    diagnostics: list
    solver: "TwoScaleSolver"

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]


def time_grid(T: float, dt: float) -> tuple[int, float]:
    """Number of steps and the step actually used (``T`` is hit exactly)."""
    n = T / dt
    steps = int(round(n)) if abs(n - round(n)) < 1e-9 * max(1.0, n) else int(math.ceil(n))
    steps = max(steps, 1)
    return steps, T / steps


class TwoScaleSolver:
    """Assembles and advances the coupled two-scale system on fixed meshes.

    Parameters
    ----------
    params : ModelParams
    partition : MacroPartition
    micro : MicroMesh
    dt : float, optional
        Requested time step; defaults to the macro mesh size. The step is
        shrunk so that ``T_final`` is an integer number of steps.
    linear_solver : {"schur", "cg"}
        Exact Kronecker-Schur elimination or Jacobi-preconditioned CG on the
        full block operator.
    macro_input : callable, optional
        ``Ubar(t, x1, x2)``. When given the macro equation is dropped and the
        micro system is driven by this field instead of the computed one.
    """

    def __init__(self, params: ModelParams, partition: MacroPartition, micro: MicroMesh,
                 dt: float | None = None, linear_solver: str = "schur", tol: float = 1e-10,
                 macro_input: Callable | None = None, check_dt: bool = True,
                 system: FeSystem | None = None):
        params.validate(strict=False)
        self.params = params
        self.partition = partition
        self.micro_mesh = micro
        if system is None:
            system = assemble(FeSpaceMacro(partition), FeSpaceMicro(micro))
        self.sys = system
        self.macro: FeSpaceMacro = system.macro
        self.micro: FeSpaceMicro = system.micro
        self.linear_solver = linear_solver
        self.tol = tol
        self.macro_input = macro_input
        dt = partition.h if dt is None else dt
        self.n_steps, self.dt = time_grid(params.T_final, dt)
        L = params.reaction.lipschitz
        if check_dt and L > 0 and self.dt > 1.0 / (2.0 * L):
            raise StepGuardError(f"dt={self.dt:.4g} exceeds the reaction guard 1/(2L)={1 / (2 * L):.4g}")

        self.N1, self.N2 = system.N1, system.N2
        bnd = self.macro.boundary if macro_input is None else np.zeros(self.N1, dtype=bool)
        self.bnd = bnd
        self.free = np.flatnonzero(~bnd) if macro_input is None else np.zeros(0, dtype=np.int64)
        self.R = sp.identity(self.N1, format="csr")[self.free] if macro_input is None \
            else sp.csr_matrix((0, self.N1))
        self.MY_K = None

        # quadrature for the reaction term (2x2 Gauss per cell)
        self._rq_x = self.macro.quadrature(2)
        self._rq_y = self.micro.quadrature(2)
        # quadrature for macro loads of analytic fields
        self._lq_x = self.macro.quadrature(4)
        self._lq_y = self.micro.quadrature(4)
        self._prepare_loads()
        self._system = self._step_system(self.dt)
        self._factors = factorize(self._system) if linear_solver == "schur" else None

    # --- operators ------------------------------------------------------------
    def _step_system(self, dt: float) -> BlockKronSystem:
        p, s = self.params, self.sys
        if self.macro_input is None:
            Afull = (s.M_Omega / dt + p.D_U * s.K_Omega) / p.gamma + p.alpha * s.s_R * s.M_Omega
        else:
            Afull = sp.csr_matrix((self.N1, self.N1))
        self._Afull = Afull.tocsr()
        Aaa = (self.R @ Afull @ self.R.T).tocsr()
        Ab = (s.M_Y / dt + p.D_v * s.K_Y + p.alpha * s.B_Y).tocsr()
        Ac = (s.M_Y / dt + p.D_w * s.K_Y).tocsr()
        return BlockKronSystem(Aaa, s.M_Omega, Ab, Ac, s.t_Y, self.R, -p.alpha)

    def _prepare_loads(self):
        p = self.params
        qx, qy = self._lq_x, self._lq_y
        X = qx.points

        def macro_loads(fld):
            return qx.E.T @ (qx.weights[:, None] * fld.x_table(X[:, 0], X[:, 1]))

        def micro_loads(fld):
            Y = qy.points
            return qy.E.T @ (qy.weights[:, None] * fld.y_table(Y[:, 0], Y[:, 1]))

        self._fU = (p.f_U, macro_loads(p.f_U))
        self._fv = (p.f_v, macro_loads(p.f_v), micro_loads(p.f_v))
        self._fw = (p.f_w, macro_loads(p.f_w), micro_loads(p.f_w))
        pts, wts, E = self.micro.boundary_quadrature(None, order=4)
        self._gv = (p.g_v, macro_loads(p.g_v),
                    E.T @ (wts[:, None] * p.g_v.y_table(pts[:, 0], pts[:, 1])))

    def forcing_U(self, t: float) -> np.ndarray:
        fld, lx = self._fU
        return lx @ fld.time_coeffs(t) if fld.terms else np.zeros(self.N1)

    def forcing_micro(self, which: str, t: float) -> np.ndarray:
        """Volume (plus boundary, for ``v``) load vector as an ``(N1, N2)`` array."""
        out = np.zeros((self.N1, self.N2))
        packs = [self._fv, self._gv] if which == "v" else [self._fw]
        for fld, lx, ly in packs:
            if fld.terms:
                out += (lx * fld.time_coeffs(t)) @ ly.T
        return out

    def macro_input_load(self, t: float) -> np.ndarray:
        q = self._lq_x
        return self.macro.load(self.macro_input(t, q.points[:, 0], q.points[:, 1]), q)

    def reaction_load(self, b: np.ndarray, c: np.ndarray) -> np.ndarray:
        """``int eta(v, w) phi_i psi_j`` by 2x2 Gauss on both meshes, ``(N1, N2)``."""
        law = self.params.reaction
        if law.kind == "zero":
            return np.zeros((self.N1, self.N2))
        qx, qy = self._rq_x, self._rq_y
        if law.kind == "linear":
            s = self.sys
            return law.k * (s.M_Omega @ (b + c).reshape(self.N1, self.N2) @ s.M_Y)
        Bm = b.reshape(self.N1, self.N2)
        Cm = c.reshape(self.N1, self.N2)
        out = np.zeros((self.N1, self.N2))
        nq = len(qx)
        chunk = max(1, 4_000_000 // max(len(qy), 1))
        EyT = qy.E.T.tocsr()
        for s0 in range(0, nq, chunk):
            sl = slice(s0, min(nq, s0 + chunk))
            Ex = qx.E[sl]
            V = np.asarray((qy.E @ (Ex @ Bm).T).T)
            W = np.asarray((qy.E @ (Ex @ Cm).T).T)
            H = kernels.weighted_reaction(V, W, law.kind, law.k, law.M, qx.weights[sl], qy.weights)
            out += Ex.T @ np.asarray((EyT @ H.T).T)
        return out

    # --- states ---------------------------------------------------------------
    def initial_state(self) -> TwoScaleState:
        p = self.params
        xy, yy = self.macro.dof_xy, self.micro.dof_xy
        if self.macro_input is None:
            a = self.macro.interpolate(p.U_I)
        else:
            a = self.macro.interpolate(lambda x1, x2: self.macro_input(0.0, x1, x2))
        if self.macro_input is None:
            a[self.bnd] = p.U_D(0.0, xy[self.bnd, 0], xy[self.bnd, 1])
        X1, X2 = xy[:, 0][:, None], xy[:, 1][:, None]
        Y1, Y2 = yy[:, 0][None, :], yy[:, 1][None, :]
        shape = (self.N1, self.N2)
        b = np.broadcast_to(p.v_I(X1, X2, Y1, Y2), shape).astype(float).ravel()
        c = np.broadcast_to(p.w_I(X1, X2, Y1, Y2), shape).astype(float).ravel()
        return TwoScaleState(0.0, a, b, c)

    def dirichlet_values(self, t: float) -> np.ndarray:
        xy = self.macro.dof_xy[self.bnd]
        return np.broadcast_to(self.params.U_D(t, xy[:, 0], xy[:, 1]), (len(xy),)).astype(float)

    def semidiscrete_residual(self, state: TwoScaleState, rate: tuple):
        """Galerkin residuals ``(R_a, R_b, R_c)`` of the semi-discrete system.

        ``rate`` holds the time derivatives of ``(a, b, c)``. ``R_a`` has one
        entry per macro DOF; rows of Dirichlet DOFs carry the discrete
        boundary flux.
        """
        p, s = self.params, self.sys
        da, db, dc = rate
        a, b, c = state.a, state.b, state.c
        if len(a) != self.N1 or len(b) != self.N1 * self.N2 or len(c) != self.N1 * self.N2:
            raise ValueError("state does not match the discrete spaces")
        Bm, Cm = b.reshape(self.N1, self.N2), c.reshape(self.N1, self.N2)
        M, MY = s.M_Omega, s.M_Y
        Ma = M @ a
        MBt = M @ (Bm @ s.t_Y)
        R_a = M @ da + p.D_U * (s.K_Omega @ a) - p.gamma * p.alpha * (MBt - s.s_R * Ma) \
            - self.forcing_U(state.t)
        N = self.reaction_load(b, c)
        MB = M @ Bm
        R_b = (M @ db.reshape(Bm.shape) @ MY + p.D_v * (MB @ s.K_Y)
               + p.alpha * (MB @ s.B_Y - np.outer(Ma, s.t_Y)) + N - self.forcing_micro("v", state.t))
        R_c = (M @ dc.reshape(Cm.shape) @ MY + p.D_w * (M @ Cm @ s.K_Y) + N
               - self.forcing_micro("w", state.t))
        return R_a, np.asarray(R_b).ravel(), np.asarray(R_c).ravel()

    def step(self, state: TwoScaleState, dt: float | None = None) -> tuple[TwoScaleState, dict]:
        """One IMEX backward-Euler step; returns the new state and diagnostics."""
        p, s = self.params, self.sys
        if dt is None or abs(dt - self.dt) <= 1e-14 * self.dt:
            dt, system, factors = self.dt, self._system, self._factors
        else:
            if dt <= 0:
                raise StepGuardError("dt must be positive")
            L = p.reaction.lipschitz
            if L > 0 and dt > 1.0 / (2.0 * L):
                raise StepGuardError(f"dt={dt:.4g} exceeds the reaction guard 1/(2L)")
            system = self._step_system(dt)
            factors = factorize(system) if self.linear_solver == "schur" else None
        t1 = state.t + dt
        N1, N2 = self.N1, self.N2
        M, MY = s.M_Omega, s.M_Y
        Bm = state.b.reshape(N1, N2)
        Cm = state.c.reshape(N1, N2)
        N = self.reaction_load(state.b, state.c)

        rb = M @ Bm @ MY / dt + self.forcing_micro("v", t1) - N
        rc = M @ Cm @ MY / dt + self.forcing_micro("w", t1) - N
        a_new = np.zeros(N1)
        if self.macro_input is None:
            aD = self.dirichlet_values(t1)
            a_new[self.bnd] = aD
            ra_full = (M @ state.a / dt + self.forcing_U(t1)) / p.gamma - self._Afull @ a_new
            ra = ra_full[self.free]
            rb = rb + p.alpha * np.outer(M @ a_new, s.t_Y)
        else:
            ra = np.zeros(0)
            rb = rb + p.alpha * np.outer(self.macro_input_load(t1), s.t_Y)
            xy = self.macro.dof_xy
            a_new[:] = self.macro_input(t1, xy[:, 0], xy[:, 1])
        rhs = np.concatenate([ra, np.asarray(rb).ravel(), np.asarray(rc).ravel()])
        if self.linear_solver == "schur":
            x, info = block_solve(system, rhs, self.tol, method="schur", factors=factors)
        else:
            x, info = block_solve(system, rhs, self.tol, method="cg")
        xa, xb, xc = system.split(x)
        a_new[self.free] = xa
        new = TwoScaleState(t1, a_new, xb.copy(), xc.copy())
        return new, {"t": t1, "residual": info.residual, "cg_iters": info.iterations}

    def solve(self) -> Trajectory:
        """March from the interpolated initial data to ``T_final``."""
        st = self.initial_state()
        states, diags = [st], []
        for _ in range(self.n_steps):
            st, d = self.step(st)
            if not np.all(np.isfinite(st.b)) or not np.all(np.isfinite(st.a)):
                raise SolverError(f"non-finite state at t={st.t}")
            states.append(st)
            diags.append(d)
        return Trajectory(states, diags, self)


def solve(params: ModelParams, partition: MacroPartition, micro: MicroMesh, dt: float | None = None,
          **kw) -> Trajectory:
    return TwoScaleSolver(params, partition, micro, dt, **kw).solve()


# --- discrete time-derivative diagnostic ------------------------------------------

@dataclass
class TimeDerivativeReport:
    dt_norm_sq: float
    grad_energy: float
    lhs: float
    C_I: float
    l2_norm_sq: float
    ratio: float
    sup_grad_energy: float


def trapezoid(values, times) -> float:
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(t)))


def time_derivative_diagnostic(traj: Trajectory) -> TimeDerivativeReport:
    """Discrete counterpart of the time-derivative energy bound.

    ``lhs`` sums the squared ``L2`` norms of the difference quotients of all
    three fields over ``S`` and the ``L2(S)`` gradient energies; it is
    compared with ``C_I + ||U||^2 + ||v||^2 + ||w||^2`` where ``C_I`` is the
    gradient energy of the discrete initial data.
    """
    if len(traj) < 2:
        raise ValueError("need at least two states")
    s = traj.solver.sys
    N1, N2 = s.N1, s.N2
    M, K, MY, KY = s.M_Omega, s.K_Omega, s.M_Y, s.K_Y

    def tensor_q(x, A, B):
        X = x.reshape(N1, N2)
        return float(np.sum(X * (A @ X @ B)))

    def grad_e(st):
        return (st.a @ (K @ st.a) + tensor_q(st.b, M, KY) + tensor_q(st.c, M, KY))

    def l2(st):
        return st.a @ (M @ st.a) + tensor_q(st.b, M, MY) + tensor_q(st.c, M, MY)

    dq = 0.0
    for s0, s1 in zip(traj.states[:-1], traj.states[1:]):
        h = s1.t - s0.t
        da, db, dc = (s1.a - s0.a) / h, (s1.b - s0.b) / h, (s1.c - s0.c) / h
        dq += h * (da @ (M @ da) + tensor_q(db, M, MY) + tensor_q(dc, M, MY))
    t = traj.times
    ge = [grad_e(st) for st in traj.states]
    G = trapezoid(ge, t)
    L2 = trapezoid([l2(st) for st in traj.states], t)
    lhs = dq + G
    C_I = ge[0]
    return TimeDerivativeReport(dq, G, lhs, C_I, L2, lhs / (C_I + L2), max(ge))


@dataclass
class MassBalance:
    """Per-step ``d/dt [int U + gamma int int v]`` and the discrete boundary flux."""

    times: np.ndarray
    storage_rate: np.ndarray
    boundary_flux: np.ndarray

    @property
    def defect(self) -> np.ndarray:
        return np.abs(self.storage_rate - self.boundary_flux)


def mass_balance(traj: Trajectory) -> MassBalance:
    """Discrete conservation bookkeeping along a trajectory.

    The boundary flux is the sum of the macro residual over the Dirichlet
    rows, evaluated with the difference quotient as rate. Without reaction
    and forcing it must equal the rate of change of the total amount.
    """
    solver = traj.solver
    s = solver.sys
    M, MY = s.M_Omega, s.M_Y
    one1, one2 = np.ones(s.N1), np.ones(s.N2)
    g = solver.params.gamma
    rates, flux = [], []
    for s0, s1 in zip(traj.states[:-1], traj.states[1:]):
        h = s1.t - s0.t
        da, db, dc = (s1.a - s0.a) / h, (s1.b - s0.b) / h, (s1.c - s0.c) / h
        dB = db.reshape(s.N1, s.N2)
        rates.append(one1 @ (M @ da) + g * (one1 @ (M @ dB @ (MY @ one2))))
        Ra, _, _ = solver.semidiscrete_residual(s1, (da, db, dc))
        flux.append(float(Ra[solver.bnd].sum()))
    return MassBalance(traj.times[1:], np.array(rates), np.array(flux))
