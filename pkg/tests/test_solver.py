import numpy as np
import pytest

from twoscale.geometry import MacroPartition, MicroMesh
from twoscale.mms import make_problem
from twoscale.solver import (ModelParams, ReactionLaw, StepGuardError, TwoScaleSolver, TwoScaleState,
                             mass_balance, solve, time_derivative_diagnostic, time_grid)


def const_params(c=1.5, **kw):
    return ModelParams(reaction=ReactionLaw("zero"), U_D=lambda t, x, y: c + 0 * x, U_I=lambda x, y: c + 0 * x,
                       v_I=lambda x, y, a, b: c + 0 * a, w_I=lambda x, y, a, b: c + 0 * a, **kw)


def test_time_grid():
    assert time_grid(0.5, 0.1) == (5, pytest.approx(0.1))
    n, dt = time_grid(0.5, 0.3)
    assert n == 2 and dt == 0.25
    assert time_grid(1.0, 5.0) == (1, 1.0)


def test_reaction_laws():
    assert ReactionLaw("zero")(1.0, 2.0) == 0
    assert ReactionLaw("linear", 2.0)(1.0, 2.0) == 6.0
    r = ReactionLaw("truncated-bilinear", 1.0, 2.0)
    assert r(3.0, -1.0) == 0.0 and r(3.0, 1.5) == 3.0
    assert r.lipschitz == 2.0
    with pytest.raises(ValueError):
        ReactionLaw("cubic")


def test_params_validation_messages():
    errs = ModelParams(D_v=-1.0).validation_errors()
    assert any("(A3)" in e and "D_v" in e for e in errs)
    with pytest.raises(ValueError):
        ModelParams(D_U=0.0).validate()
    assert any("(A4)" in e for e in ModelParams(reaction=ReactionLaw("linear", float("inf"))).validation_errors())


def test_step_guard():
    p = ModelParams(reaction=ReactionLaw("truncated-bilinear", 1.0, 10.0))
    with pytest.raises(StepGuardError):
        TwoScaleSolver(p, MacroPartition.uniform(1), MicroMesh(2), dt=0.1)
    s = TwoScaleSolver(p, MacroPartition.uniform(1), MicroMesh(2), dt=0.04)
    with pytest.raises(StepGuardError):
        s.step(s.initial_state(), dt=0.2)


def test_zero_data_zero_trajectory():
    tr = solve(ModelParams(reaction=ReactionLaw("zero")), MacroPartition.uniform(2), MicroMesh(3), dt=0.1)
    assert len(tr) == 6
    for st in tr.states:
        assert not st.a.any() and not st.b.any() and not st.c.any()


@pytest.mark.parametrize("method", ["schur", "cg"])
def test_constant_state_is_steady(method):
    s = TwoScaleSolver(const_params(gamma=2.0, alpha=0.7), MacroPartition.uniform(2), MicroMesh(4), dt=0.05,
                       linear_solver=method, tol=1e-13)
    st = s.initial_state()
    zero = (np.zeros_like(st.a), np.zeros_like(st.b), np.zeros_like(st.c))
    for R in s.semidiscrete_residual(st, zero):
        R = np.asarray(R)
        if len(R) == len(st.a):
            R = R[s.free]
        assert np.max(np.abs(R)) < 1e-13
    new, info = s.step(st)
    for x, y in ((new.a, st.a), (new.b, st.b), (new.c, st.c)):
        assert np.max(np.abs(x - y)) < 1e-10
    assert info["residual"] <= 1e-10


def test_alpha_zero_decouples_macro_from_micro():
    p = make_problem("separable-smooth").params()
    p.alpha = 0.0
    with pytest.raises(ValueError):
        p.validate()
    s = TwoScaleSolver(p, MacroPartition.uniform(2), MicroMesh(3), dt=0.05)
    st = s.initial_state()
    rate = tuple(np.zeros_like(x) for x in (st.a, st.b, st.c))
    Ra1 = s.semidiscrete_residual(st, rate)[0]
    st2 = TwoScaleState(st.t, st.a, st.b + 5.0, st.c)
    assert np.array_equal(s.semidiscrete_residual(st2, rate)[0], Ra1)


def test_decoupled_step_is_backward_euler_heat():
    D, dt = 0.7, 0.1
    p = ModelParams(D_U=D, alpha=0.0, reaction=ReactionLaw("zero"),
                    U_I=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    s = TwoScaleSolver(p, MacroPartition.uniform(1), MicroMesh(1), dt=dt)
    st = s.initial_state()
    new, _ = s.step(st)
    M, K = s.sys.M_Omega.toarray(), s.sys.K_Omega.toarray()
    f = s.free
    a1 = np.zeros_like(st.a)
    a1[f] = np.linalg.solve((M / dt + D * K)[np.ix_(f, f)], (M @ st.a / dt)[f])
    assert np.allclose(new.a, a1, atol=1e-13)
    # 2x2 mesh: one interior DOF, hand value a0 * m / (m + dt D k)
    m, k = M[f[0], f[0]], K[f[0], f[0]]
    assert new.a[f[0]] == pytest.approx(st.a[f[0]] * (m / dt) / (m / dt + D * k), rel=1e-13)


def test_decoupled_block_solve_is_three_independent_solves():
    from twoscale.linalg import KroneckerOperator, block_solve, cg_solve
    p = ModelParams(alpha=0.0, reaction=ReactionLaw("zero"))
    s = TwoScaleSolver(p, MacroPartition.uniform(2), MicroMesh(3), dt=0.1)
    S = s._system
    rhs = np.random.default_rng(5).normal(size=S.shape[0])
    x, _ = block_solve(S, rhs, tol=1e-13, method="schur")
    ra, rb, rc = S.split(rhs)
    parts = [cg_solve(S.Aaa, ra, tol=1e-14)[0], cg_solve(KroneckerOperator(S.Mx, S.Ab).matvec, rb, tol=1e-14)[0],
             cg_solve(KroneckerOperator(S.Mx, S.Ac).matvec, rc, tol=1e-14)[0]]
    assert np.allclose(x, np.concatenate(parts), atol=1e-9)


def test_residual_matches_dense_kronecker_forms():
    p = make_problem("separable-smooth").params()
    p.reaction = ReactionLaw("linear", 0.3)
    s = TwoScaleSolver(p, MacroPartition.uniform(0), MicroMesh(1), dt=0.05)
    S = s.sys
    rng = np.random.default_rng(3)
    b, c = rng.normal(size=(2, S.N1 * S.N2))
    st = TwoScaleState(0.2, rng.normal(size=S.N1), b, c)
    rate = (rng.normal(size=S.N1), rng.normal(size=S.N1 * S.N2), rng.normal(size=S.N1 * S.N2))
    Ra, Rb, Rc = s.semidiscrete_residual(st, rate)
    M, K, MY, KY, BY = (A.toarray() for A in (S.M_Omega, S.K_Omega, S.M_Y, S.K_Y, S.B_Y))
    t = S.t_Y
    fU = s.forcing_U(st.t)
    fv = np.asarray(s.forcing_micro("v", st.t)).ravel()
    fw = np.asarray(s.forcing_micro("w", st.t)).ravel()
    # linear reaction: exact Galerkin term k (M kron M_Y)(b + c)
    N = 0.3 * np.kron(M, MY) @ (st.b + st.c)
    Ra_ref = M @ rate[0] + K @ st.a - (np.kron(M, t[None, :]) @ st.b - S.s_R * M @ st.a) - fU
    Rb_ref = (np.kron(M, MY) @ rate[1] + np.kron(M, KY) @ st.b
              + np.kron(M, BY) @ st.b - np.kron(M @ st.a, t) + N - fv)
    Rc_ref = np.kron(M, MY) @ rate[2] + np.kron(M, KY) @ st.c + N - fw
    assert np.allclose(Ra, Ra_ref, atol=1e-12)
    assert np.allclose(Rb, Rb_ref, atol=1e-12)
    assert np.allclose(Rc, Rc_ref, atol=1e-12)


def test_step_operator_symmetric():
    s = TwoScaleSolver(make_problem("separable-smooth").params(), MacroPartition.uniform(1), MicroMesh(2))
    A = s._system.todense()
    assert np.max(np.abs(A - A.T)) <= 1e-12 * np.max(np.abs(A))
    assert np.min(np.linalg.eigvalsh(A)) > 0


def test_schur_and_cg_agree():
    p = make_problem("separable-smooth").params()
    a = solve(p, MacroPartition.uniform(2), MicroMesh(4), linear_solver="schur").states[-1]
    b = solve(p, MacroPartition.uniform(2), MicroMesh(4), linear_solver="cg", tol=1e-13).states[-1]
    for x, y in ((a.a, b.a), (a.b, b.b), (a.c, b.c)):
        assert np.max(np.abs(x - y)) < 1e-9


def energy(s, st):
    M, MY = s.sys.M_Omega, s.sys.M_Y
    B = st.b.reshape(s.N1, s.N2)
    C = st.c.reshape(s.N1, s.N2)
    return st.a @ M @ st.a + s.params.gamma * np.sum(B * (M @ B @ MY)) + np.sum(C * (M @ C @ MY))


def test_energy_decays_without_sources():
    p = ModelParams(reaction=ReactionLaw("zero"), gamma=2.0, T_final=2.0,
                    U_I=lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
                    v_I=lambda x, y, a, b: 1 + a * b + 0 * x, w_I=lambda x, y, a, b: np.cos(np.pi * a) + 0 * x)
    s = TwoScaleSolver(p, MacroPartition.uniform(2), MicroMesh(4), dt=0.05)
    tr = s.solve()
    E = [energy(s, st) for st in tr.states]
    assert np.all(np.diff(E) <= 1e-14 * E[0])
    assert E[-1] < 0.5 * E[0]


def test_long_run_bounded_with_reaction():
    prob = make_problem("separable-smooth")
    p = prob.params()
    p.T_final = 3.0
    tr = TwoScaleSolver(p, MacroPartition.uniform(2), MicroMesh(4), dt=0.1).solve()
    for st in tr.states:
        assert np.all(np.isfinite(st.b)) and np.max(np.abs(st.b)) < 100


def test_macro_input_mode():
    prob = make_problem("separable-smooth")
    U = prob.U
    s = TwoScaleSolver(prob.params(), MacroPartition.uniform(2), MicroMesh(4),
                       macro_input=lambda t, x, y: U.macro(t, x, y))
    tr = s.solve()
    xy = s.macro.dof_xy
    assert np.allclose(tr.states[-1].a, U.macro(tr.states[-1].t, xy[:, 0], xy[:, 1]))
    assert s.free.size == 0


def test_mass_balance_identity():
    p = ModelParams(reaction=ReactionLaw("zero"), gamma=2.0, alpha=0.5, U_D=lambda t, x, y: 1.0 + 0 * x,
                    U_I=lambda x, y: 1 + np.sin(np.pi * x) * np.sin(np.pi * y),
                    v_I=lambda x, y, a, b: 1 + a * b * x + 0 * y, w_I=lambda x, y, a, b: 0 * x)
    tr = TwoScaleSolver(p, MacroPartition.uniform(3), MicroMesh(4), dt=0.05).solve()
    mb = mass_balance(tr)
    assert np.max(mb.defect) < 1e-8
    assert np.max(np.abs(mb.storage_rate)) > 1e-3


def test_time_derivative_diagnostic_constant_and_smooth():
    tr = TwoScaleSolver(const_params(), MacroPartition.uniform(2), MicroMesh(3), dt=0.1).solve()
    rep = time_derivative_diagnostic(tr)
    assert rep.dt_norm_sq < 1e-20
    tr = TwoScaleSolver(make_problem("separable-smooth").params(), MacroPartition.uniform(2), MicroMesh(3)).solve()
    rep = time_derivative_diagnostic(tr)
    assert rep.lhs > 0 and np.isfinite(rep.ratio)
    with pytest.raises(ValueError):
        time_derivative_diagnostic(type(tr)(tr.states[:1], [], tr.solver))


def test_state_shape_checked():
    s = TwoScaleSolver(const_params(), MacroPartition.uniform(1), MicroMesh(2), dt=0.1)
    st = s.initial_state()
    bad = TwoScaleState(0.0, st.a[:-1], st.b, st.c)
    with pytest.raises(ValueError):
        s.semidiscrete_residual(bad, (st.a, st.b, st.c))
