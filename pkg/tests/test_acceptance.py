"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary)."""
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from twoscale.adapt import feedback_loop, mark, micromacro_transfer_check, uniform_errors
from twoscale.fem import FeSpaceMacro, FeSpaceMicro, prolongation, trace_inequality_check
from twoscale.geometry import MacroPartition, MicroMesh, refine
from twoscale.linalg import KroneckerOperator, kron_apply
from twoscale.mms import (continuity_sweep, eoc, error_norms, fiber_projection_errors, make_problem,
                          projection_errors, scalar_exchange_check)
from twoscale.solver import ModelParams, ReactionLaw, TwoScaleSolver, mass_balance, time_derivative_diagnostic

from conftest import random_refinement

pytestmark = pytest.mark.acceptance


def fmt(xs, spec=".3f"):
    return "[" + ", ".join(format(float(x), spec) for x in xs) + "]"


def h_of(level):
    return math.sqrt(2.0) * 2.0 ** -level


def test_c1_elliptic_projection_rates(acceptance):
    t0 = time.perf_counter()
    prob = make_problem("separable-smooth")
    levels = (3, 4, 5)
    errs = [projection_errors(prob, m, n_time=16) for m in levels]
    s_l2 = eoc([(h_of(m), e[0]) for m, e in zip(levels, errs)]).slopes
    s_h1 = eoc([(h_of(m), e[1]) for m, e in zip(levels, errs)]).slopes
    dt = time.perf_counter() - t0
    ok = bool(np.all(np.abs(s_l2 - 2.0) <= 0.2) and np.all(np.abs(s_h1 - 1.0) <= 0.2) and dt < 120)
    acceptance("C1", ok, f"projection EOC L2(S,L2) {fmt(s_l2)} (2.0+-0.2), L2(S,H1) {fmt(s_h1)} (1.0+-0.2), "
                         f"{dt:.1f}s (<120s)")
    assert ok


def test_c2_micro_projection_rates(acceptance):
    t0 = time.perf_counter()
    prob = make_problem("separable-smooth")
    ns = (4, 8, 16)
    parts, ok = [], True
    for name, fld in (("v", prob.v), ("w", prob.w)):
        errs = [fiber_projection_errors(fld, MicroMesh(n), prob.T_final, macro_level=4, n_time=16) for n in ns]
        sl2 = eoc([(math.sqrt(2) / n, e[0]) for n, e in zip(ns, errs)]).slopes
        sh1 = eoc([(math.sqrt(2) / n, e[1]) for n, e in zip(ns, errs)]).slopes
        ok &= bool(np.all(np.abs(sl2 - 2.0) <= 0.3) and np.all(np.abs(sh1 - 1.0) <= 0.3))
        parts.append(f"{name}: L2 {fmt(sl2)} H1 {fmt(sh1)}")
    dt = time.perf_counter() - t0
    ok &= dt < 300
    acceptance("C2", ok, "micro EOC " + "; ".join(parts) + f" (2.0+-0.3 / 1.0+-0.3), {dt:.1f}s (<300s)")
    assert ok


def transfer_run(prob, levels, micro_n=32):
    E, micro = [], []
    for m in levels:
        tr = TwoScaleSolver(prob.params(), MacroPartition.uniform(m), MicroMesh(micro_n, prob.gamma_r)).solve()
        en = error_norms(tr, prob)
        E.append(en.U_l2 ** 2)
        micro.append(en.micro_sq)
    return micromacro_transfer_check(E, micro)


def test_c3_micro_error_controlled_by_macro_error(acceptance):
    t0 = time.perf_counter()
    levels = (2, 3, 4, 5)
    # linear-in-time exact fields without reaction: the backward Euler step is exact in time, so the
    # micro error is the macro-driven part plus the fixed h_Y^2 contribution only
    prob = make_problem("separable-smooth", reaction=ReactionLaw("zero"))
    rep = transfer_run(prob, levels)
    dt = time.perf_counter() - t0
    finite = bool(np.all(np.isfinite(rep.ratios)))
    micro_noninc = bool(np.all(np.diff(rep.micro_sq) <= 0))
    ok = finite and rep.no_growth and micro_noninc
    acceptance("C3", ok, f"micro n=32, levels {levels}: ||e_U||^2 {fmt(rep.macro_l2_sq, '.3e')}, "
                         f"micro^2 {fmt(rep.micro_sq, '.5e')}, fitted floor {rep.floor:.5e}, "
                         f"ratios {fmt(rep.ratios, '.3g')}, max|ratio| {np.max(np.abs(rep.ratios)):.3g}, "
                         f"Spearman rho {rep.spearman:+.2f} (no growth: rho <= 0), micro error non-increasing={micro_noninc}, "
                         f"{dt:.1f}s")
    assert ok


def test_c3_info_with_reaction(acceptance):
    rep = transfer_run(make_problem("separable-smooth"), (2, 3, 4, 5))
    acceptance.info("C3", f"with default reaction (lagged, O(dt) time error in v, w): ratios {fmt(rep.ratios, '.3g')}, "
                          f"Spearman rho {rep.spearman:+.2f}")


def test_c4_continuity_with_respect_to_data(acceptance):
    prob = make_problem("separable-smooth")
    sweep = continuity_sweep(prob, eps_list=(1e-1, 1e-2, 1e-3), level=3, micro_n=8, signs=(1.0, -1.0))
    r = np.array([x[1] for x in sweep])
    spread = float(r.max() / r.min())
    sc = scalar_exchange_check(delta=0.1, alpha=1.0, T=0.5, n_steps=50)
    ok = bool(np.all(np.isfinite(r)) and spread <= 1.5 and sc.error <= 1e-6)
    acceptance("C4", ok, f"rho_cont {fmt(r, '.6f')} spread {spread:.6f} (<=1.5); scalar exchange |num - closed form| "
                         f"= {sc.error:.2e} (<=1e-6)")
    assert ok


def test_c5_feedback_convergence_on_layer(acceptance):
    t0 = time.perf_counter()
    prob = make_problem("layer")
    hist = feedback_loop(prob, beta=0.5, iters=8, initial=MacroPartition.uniform(0), micro=MicroMesh(4),
                         n_time=16)
    nu, e2, dofs = hist.max_nu, hist.e2_norms, hist.n_dofs
    dec = bool(np.all(np.diff(nu) < 0))
    noninc = bool(np.all(e2[1:] <= e2[:-1] * (1 + 1e-12)))
    levels = range(0, 8)
    uni = uniform_errors(prob, levels, n_time=16)
    pairs = []
    for i, (d, e) in enumerate(zip(dofs, e2)):
        for m, (d2, e_u) in zip(levels, uni):
            # a partition that is itself uniform is not an adaptive/uniform comparison
            same = hist.steps[i].partition.squares == MacroPartition.uniform(m).squares
            if abs(d - d2) <= 0.1 * d2 and not same:
                pairs.append((i, int(d), int(d2), float(e / e_u)))
    final = [p for p in pairs if p[0] == len(hist) - 1]
    dt = time.perf_counter() - t0
    ok = dec and noninc and bool(final) and all(p[3] <= 0.7 for p in final) and dt < 600
    acceptance("C5", ok, f"max nu {fmt(nu, '.4g')} strictly decreasing={dec}; e2 {fmt(e2, '.4g')} non-increasing={noninc}; "
                         f"final partition {dofs[-1]} DOFs vs uniform: ratio "
                         f"{', '.join(f'{p[3]:.3f} ({p[2]} DOFs)' for p in final) or 'none'} (<=0.7); {dt:.1f}s (<600s)")
    for p in pairs:
        acceptance.info("C5", f"iteration {p[0]}: adaptive {p[1]} DOFs vs uniform {p[2]} DOFs, e2 ratio {p[3]:.3f}")
    assert ok


def test_c6_marking_rule(acceptance):
    rng = np.random.default_rng(2024)
    nonempty = invariant = True
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        kind = rng.integers(3)
        v = rng.exponential(size=n) if kind == 0 else (rng.uniform(size=n) ** 4 if kind == 1 else
                                                       rng.integers(0, 4, size=n).astype(float))
        if v.max() == 0:
            v[0] = 1.0
        beta = float(rng.uniform(0.01, 0.99))
        J = mark(v, beta)
        nonempty &= len(J) > 0
        lam = float(10 ** rng.uniform(-6, 6))
        invariant &= np.array_equal(J, mark(v * lam, beta))
    equal = all(len(mark(np.full(n, 0.37), b)) == n for n in (1, 5, 64) for b in (0.1, 0.5, 0.99))
    ok = bool(nonempty and invariant and equal)
    acceptance("C6", ok, f"1000 random vectors: nonempty={nonempty}, scale invariant={invariant}; "
                         f"all-equal marks all={equal}")
    assert ok


def test_c7_conservation_and_steady_state(acceptance):
    c = 1.5
    p = ModelParams(reaction=ReactionLaw("zero"), gamma=2.0, alpha=0.7, T_final=1.0,
                    U_D=lambda t, x, y: c + 0 * x, U_I=lambda x, y: c + 0 * x,
                    v_I=lambda x, y, a, b: c + 0 * a, w_I=lambda x, y, a, b: c + 0 * a)
    s = TwoScaleSolver(p, MacroPartition.uniform(3), MicroMesh(4), dt=0.01, tol=1e-12)
    tr = s.solve()
    worst_step = max(max(np.max(np.abs(b.a - a.a)), np.max(np.abs(b.b - a.b)), np.max(np.abs(b.c - a.c)))
                     for a, b in zip(tr.states[:-1], tr.states[1:]))
    drift = max(np.max(np.abs(st.b - c)) for st in tr.states)
    q = ModelParams(reaction=ReactionLaw("zero"), gamma=2.0, alpha=0.5, U_D=lambda t, x, y: 1.0 + 0 * x,
                    U_I=lambda x, y: 1 + np.sin(np.pi * x) * np.sin(np.pi * y),
                    v_I=lambda x, y, a, b: 1 + a * b * x + 0 * y, w_I=lambda x, y, a, b: 0 * x)
    mb = mass_balance(TwoScaleSolver(q, MacroPartition.uniform(3), MicroMesh(4), dt=0.05).solve())
    ok = bool(len(tr) == 101 and worst_step <= 1e-9 and np.max(mb.defect) <= 1e-8)
    acceptance("C7", ok, f"constant state over 100 steps: max per-step change {worst_step:.2e}, drift {drift:.2e} "
                         f"(<=1e-9); eta=0 mass balance defect max {np.max(mb.defect):.2e} per step (<=1e-8)")
    assert ok


def test_c8_interpolation_trace_sampler(acceptance):
    Y = FeSpaceMicro(MicroMesh(16))
    reps = [trace_inequality_check(Y, rho, samples=500, seed=7) for rho in (0.1, 1.0, 10.0)]
    c = [r.c_required for r in reps]
    ok = bool(all(r.dominated and math.isfinite(r.c_space_sup) for r in reps) and c[0] >= c[1] >= c[2])
    acceptance("C8", ok, f"rho (0.1, 1, 10): required c {fmt(c, '.4f')}, dominating c {fmt([r.c_space_sup for r in reps], '.4f')}, "
                         f"non-increasing={c[0] >= c[1] >= c[2]}")
    assert ok


def test_c9_time_derivative_bound(acceptance):
    prob = make_problem("separable-smooth")
    T = prob.T_final
    lhs = []
    for m in (3, 4, 5):
        tr = TwoScaleSolver(prob.params(), MacroPartition.uniform(m), MicroMesh(8), dt=T / 16).solve()
        lhs.append(time_derivative_diagnostic(tr).lhs)
    dq = []
    for k in range(3):
        tr = TwoScaleSolver(prob.params(), MacroPartition.uniform(3), MicroMesh(8), dt=T / 16 / 2 ** k).solve()
        dq.append(time_derivative_diagnostic(tr).dt_norm_sq)
    f = max(lhs) / min(lhs)
    rel = [abs(dq[i + 1] - dq[i]) / abs(dq[i + 1]) for i in range(2)]
    ok = bool(f <= 2.0 and all(r <= 0.1 for r in rel))
    acceptance("C9", ok, f"lhs at levels 3-5 {fmt(lhs, '.4f')} factor {f:.4f} (<=2); difference-quotient norms "
                         f"{fmt(dq, '.5f')} successive change {fmt(rel, '.4f')} (<=0.1)")
    assert ok


def test_c10_structural_oracles(acceptance):
    rng = np.random.default_rng(10)
    worst_k = 0.0
    for _ in range(100):
        n1, n2 = rng.integers(1, 7, size=2)
        A, B, x = rng.normal(size=(n1, n1)), rng.normal(size=(n2, n2)), rng.normal(size=n1 * n2)
        D = np.kron(A, B)
        worst_k = max(worst_k, np.max(np.abs(kron_apply(KroneckerOperator(sp.csr_matrix(A), B), x) - D @ x)))
    worst_g = 0.0
    for _ in range(3):
        p = random_refinement(rng, steps=2, start=1)
        sq = p.sorted()
        pf = refine(p, [sq[i] for i in rng.choice(len(sq), size=3, replace=False)])
        Vc, Vf = FeSpaceMacro(p), FeSpaceMacro(pf)
        P = prolongation(Vc, Vf)
        for Ac, Af in ((Vc.mass, Vf.mass), (Vc.stiffness, Vf.stiffness)):
            worst_g = max(worst_g, abs(P.T @ Af @ P - Ac).max() / max(1.0, abs(Ac).max()))
    prob = make_problem("separable-smooth")
    pyth = max(error_norms(TwoScaleSolver(prob.params(), part, MicroMesh(4)).solve(), prob).pythagoras_defect
               for part in (MacroPartition.uniform(3), random_refinement(rng, steps=2, start=2)))
    ok = bool(worst_k <= 1e-13 and worst_g <= 1e-12 and pyth <= 1e-10)
    acceptance("C10", ok, f"Kronecker vs dense max err {worst_k:.1e} (<=1e-13, 100 trials); nested Galerkin "
                          f"P^T M P max err {worst_g:.1e} (<=1e-12, 3 refinements); Pythagoras relative defect "
                          f"{pyth:.1e} (<=1e-10)")
    assert ok
