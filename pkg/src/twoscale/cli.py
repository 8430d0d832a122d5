"""Command-line entry points: configuration, run orchestration and file output."""
from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import MacroPartition, MicroMesh, dump_micromesh, dump_partition
from .linalg import ConvergenceError
from .solver import ReactionLaw, SolverError

log = logging.getLogger("twoscale")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4
SUBCOMMANDS = ("solve", "refine-loop", "mms-verify", "continuity-test", "trace-check", "diagnose-dt")
EDGES = ("bottom", "right", "top", "left")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    subcommand: str = "solve"
    problem: str = "separable-smooth"
    D_U: float | None = None
    D_v: float | None = None
    D_w: float | None = None
    alpha: float | None = None
    gamma: float | None = None
    T_final: float | None = None
    reaction: str | None = None
    reaction_k: float | None = None
    reaction_M: float | None = None
    gamma_r: tuple = ("top",)
    level: int = 3
    micro_n: int = 8
    dt: float | None = None
    beta: float = 0.5
    iters: int = 12
    tol: float = 1e-6
    solver_tol: float = 1e-10
    linear_solver: str = "schur"
    n_time: int = 16
    levels: int = 3
    rho: tuple = (0.1, 1.0, 10.0)
    samples: int = 500
    eps: tuple = (1e-1, 1e-2, 1e-3)
    probes: tuple = ((0.5, 0.5),)
    out: str = "twoscale-out"
    seed: int = 0

    def canonical(self, with_out: bool = True) -> str:
        lines = []
        for f in fields(self):
            if f.name == "out" and not with_out:
                continue
            lines.append(f"{f.name} = {_fmt_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical(with_out=False).encode()).hexdigest()[:16]

    def model_overrides(self) -> dict:
        kw = {k: getattr(self, k) for k in ("D_U", "D_v", "D_w", "alpha", "gamma", "T_final")
              if getattr(self, k) is not None}
        if any(x is not None for x in (self.reaction, self.reaction_k, self.reaction_M)):
            kw["reaction"] = self.reaction_law()
        kw["gamma_r"] = tuple(self.gamma_r)
        return kw

    def reaction_law(self, base: ReactionLaw | None = None) -> ReactionLaw:
        base = base or ReactionLaw("truncated-bilinear", 0.25, 4.0)
        return ReactionLaw(self.reaction or base.kind,
                           base.k if self.reaction_k is None else self.reaction_k,
                           base.M if self.reaction_M is None else self.reaction_M)


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) if not isinstance(x, tuple) else ":".join(map(repr, x)) for x in v)
    return str(v)


# key -> (section, parser)
def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _edges(s: str) -> tuple:
    return tuple(x.strip() for x in s.replace(";", ",").split(",") if x.strip())


def _probes(s: str) -> tuple:
    out = []
    for item in s.split(";"):
        if item.strip():
            x, y = (float(v) for v in item.replace(":", ",").split(","))
            out.append((x, y))
    return tuple(out)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "auto", "none", "h") else float(s)


_KEYS = {
    "run": {"subcommand": str, "problem": str, "level": int, "micro_n": int, "dt": _opt_float,
            "beta": float, "iters": int, "tol": float, "solver_tol": float, "linear_solver": str,
            "n_time": int, "levels": int, "out": str, "seed": int, "rho": _floats, "samples": int,
            "eps": _floats, "probes": _probes},
    "model": {"D_U": float, "D_v": float, "D_w": float, "alpha": float, "gamma": float,
              "T_final": float},
    "reaction": {"kind": str, "k": float, "M": float},
    "micro": {"gamma_r": _edges, "n": int},
}
_ALIASES = {("reaction", "kind"): "reaction", ("reaction", "k"): "reaction_k",
            ("reaction", "M"): "reaction_M", ("micro", "n"): "micro_n"}


def validate(cfg: RunConfig) -> list[str]:
    errs = []
    for name in ("D_U", "D_v", "D_w"):
        v = getattr(cfg, name)
        if v is not None and not v > 0:
            errs.append(f"(A3): {name} must be positive")
    if cfg.alpha is not None and not cfg.alpha > 0:
        errs.append("(A3): alpha must be positive")
    if cfg.gamma is not None and not cfg.gamma > 0:
        errs.append("(A3): gamma must be positive")
    if cfg.T_final is not None and not cfg.T_final > 0:
        errs.append("T_final must be positive")
    if not cfg.gamma_r:
        errs.append("(A2): the reactive boundary must contain at least one edge")
    bad = [e for e in cfg.gamma_r if e not in EDGES]
    if bad:
        errs.append(f"(A2): unknown reactive edges {bad} (choose from {', '.join(EDGES)})")
    if cfg.reaction is not None and cfg.reaction not in ("zero", "linear", "truncated-bilinear"):
        errs.append(f"(A4): unknown reaction law {cfg.reaction!r}")
    for name in ("reaction_k", "reaction_M"):
        v = getattr(cfg, name)
        if v is not None and not math.isfinite(v):
            errs.append(f"(A4): {name} must be finite (global Lipschitz bound)")
    if cfg.reaction_M is not None and not cfg.reaction_M > 0:
        errs.append("(A4): reaction cap M must be positive")
    if not 0.0 < cfg.beta < 1.0:
        errs.append(f"marking rule: beta must lie in the open interval (0, 1), got {cfg.beta}")
    if cfg.subcommand not in SUBCOMMANDS:
        errs.append(f"unknown subcommand {cfg.subcommand!r}")
    from .mms import PROBLEMS
    if cfg.problem not in PROBLEMS:
        errs.append(f"unknown problem {cfg.problem!r} (known: {', '.join(PROBLEMS)})")
    if cfg.level < 0 or cfg.level > 12:
        errs.append("level must lie in [0, 12]")
    if cfg.micro_n < 1:
        errs.append("micro_n must be at least 1")
    if cfg.dt is not None and not cfg.dt > 0:
        errs.append("dt must be positive")
    if cfg.iters < 1:
        errs.append("iters must be at least 1")
    if cfg.tol <= 0 or cfg.solver_tol <= 0:
        errs.append("tolerances must be positive")
    if cfg.linear_solver not in ("schur", "cg"):
        errs.append("linear_solver must be 'schur' or 'cg'")
    if any(r <= 0 for r in cfg.rho):
        errs.append("rho values must be positive")
    if cfg.samples < 1:
        errs.append("samples must be at least 1")
    if cfg.levels < 2 and cfg.subcommand in ("mms-verify", "diagnose-dt"):
        errs.append("levels must be at least 2 for convergence tables")
    if cfg.n_time < 1:
        errs.append("n_time must be at least 1")
    return errs


def parse_config(path: str | None = None, overrides: dict | None = None, text: str | None = None) -> RunConfig:
    """Read a ``key = value`` file with sections, apply overrides, validate.

    Raises :class:`ConfigError` listing every problem found.
    """
    values: dict = {}
    errs = []
    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            if text is None:
                with open(path, encoding="utf-8") as fh:
                    text = fh.read()
            if text.strip() and not text.lstrip().startswith("["):
                text = "[run]\n" + text
            cp.read_string(text)
        except (OSError, configparser.Error) as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
        for sec in cp.sections():
            if sec not in _KEYS:
                errs.append(f"unknown section [{sec}]")
                continue
            for key, raw in cp.items(sec):
                conv = _KEYS[sec].get(key)
                if conv is None:
                    errs.append(f"unknown key {key!r} in [{sec}]")
                    continue
                try:
                    values[_ALIASES.get((sec, key), key)] = conv(raw)
                except ValueError:
                    errs.append(f"bad value for {key!r} in [{sec}]: {raw!r}")
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    if errs:
        raise ConfigError(errs)
    cfg = RunConfig(**values)
    errs = validate(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


# --- output helpers -------------------------------------------------------------------

def _num(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


class Writer:
    """One writer per output directory; every file starts with a provenance header."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = f"# twoscale {__version__} config={cfg.digest}\n"

    def csv(self, name: str, columns, rows) -> Path:
        p = self.dir / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.header)
            fh.write(",".join(columns) + "\n")
            for r in rows:
                fh.write(",".join(_num(v) for v in r) + "\n")
        return p

    def text(self, name: str, body: str) -> Path:
        p = self.dir / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.header)
            fh.write(body)
        return p

    def echo_config(self):
        self.text("config.ini", self.cfg.canonical())


def worker_count() -> int:
    try:
        n = int(os.environ.get("TWOSCALE_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, min(n, os.cpu_count() or 1))


def parallel_map(fn, items):
    """Order-preserving map over a process pool capped by ``TWOSCALE_THREADS``."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# --- subcommands ----------------------------------------------------------------------

def _problem(cfg: RunConfig):
    from .mms import make_problem
    p = make_problem(cfg.problem)
    kw = cfg.model_overrides()
    if "reaction" in kw:
        kw["reaction"] = cfg.reaction_law(p.reaction)
    p = p.with_params(**kw)
    p.validate()
    return p


def cmd_solve(cfg: RunConfig, w: Writer) -> int:
    from .mms import error_norms
    from .solver import TwoScaleSolver
    prob = _problem(cfg)
    part = MacroPartition.uniform(cfg.level)
    micro = MicroMesh(cfg.micro_n, cfg.gamma_r)
    s = TwoScaleSolver(prob.params(), part, micro, dt=cfg.dt, linear_solver=cfg.linear_solver,
                       tol=cfg.solver_tol)
    traj = s.solve()
    rows = []
    for st in traj.states:
        for kind, vec in (("a", st.a), ("b", st.b), ("c", st.c)):
            rows.extend((st.t, kind, i, v) for i, v in enumerate(vec))
    w.csv("trajectory.csv", ["t", "dof_kind", "index", "value"], rows)
    w.csv("diagnostics.csv", ["t", "residual", "cg_iters"],
          ((d["t"], d["residual"], d["cg_iters"]) for d in traj.diagnostics))
    last = traj.states[-1]
    xy = s.macro.dof_xy
    w.csv("field_U.csv", ["x", "y", "value"], ((x, y, v) for (x, y), v in zip(xy, last.a)))
    yy = s.micro.dof_xy
    elem, loc = s.macro.locate(np.array(cfg.probes, dtype=float))
    Ex, _, _ = s.macro.eval_matrices(elem, loc)
    for name, vec in (("v", last.b), ("w", last.c)):
        vals = Ex @ vec.reshape(s.N1, s.N2)
        w.csv(f"field_{name}.csv", ["x", "y", "y1", "y2", "value"],
              ((px, py, y1, y2, val) for (px, py), row in zip(cfg.probes, vals)
               for (y1, y2), val in zip(yy, row)))
    en = error_norms(traj, prob)
    w.csv("errors.csv", ["quantity", "value"], [
        ("U_L2L2", en.U_l2), ("U_L2H1", en.U_h1), ("e1_L2H1", en.e1_h1), ("e2_L2H1", en.e2_h1),
        ("v_X", en.v_X), ("w_X", en.w_X), ("pythagoras_defect", en.pythagoras_defect)])
    w.text("partition.txt", dump_partition(part))
    w.text("micromesh.txt", dump_micromesh(micro) + "\n")
    log.info("solve: %d steps, dt=%.6g, ||e_U||_L2H1=%.3e", s.n_steps, s.dt, en.U_h1)
    return EXIT_OK


def cmd_refine_loop(cfg: RunConfig, w: Writer) -> int:
    from .adapt import feedback_loop
    prob = _problem(cfg)
    hist = feedback_loop(prob, beta=cfg.beta, iters=cfg.iters, initial=MacroPartition.uniform(cfg.level),
                         micro=MicroMesh(cfg.micro_n, cfg.gamma_r), n_time=cfg.n_time, tol=cfg.tol,
                         linear_solver=cfg.linear_solver)
    w.csv("history.csv", ["iter", "n_squares", "n_dofs", "max_nu", "sum_nu_sq", "e2_norm", "marked",
                          "closure_splits"], hist.csv_rows())
    w.csv("loop_errors.csv", ["iter", "n_dofs", "U_L2L2", "U_L2H1", "e2_L2H1", "v_X", "w_X"],
          ((s.iteration, s.n_dofs, s.errors.U_l2, s.errors.U_h1, s.e2_h1, s.errors.v_X, s.errors.w_X)
           for s in hist))
    for s in hist:
        w.text(f"partition_gen{s.iteration:03d}.txt", dump_partition(s.partition))
    nu = hist.max_nu
    ok = bool(np.all(np.diff(nu) < 0)) if len(nu) > 1 else True
    log.info("refine-loop: %d partitions, max_nu %s", len(hist), " ".join(f"{x:.3e}" for x in nu))
    if not ok:
        log.error("max_nu is not strictly decreasing")
        return EXIT_ACCEPTANCE
    return EXIT_OK


def _mms_level(args):
    pid, kw, level, micro_n, dt, lin = args
    from .mms import error_norms, make_problem
    from .solver import TwoScaleSolver
    prob = make_problem(pid).with_params(**kw)
    s = TwoScaleSolver(prob.params(), MacroPartition.uniform(level), MicroMesh(micro_n, prob.gamma_r),
                       dt=dt, linear_solver=lin)
    en = error_norms(s.solve(), prob)
    return level, s.dt, en.U_l2, en.U_h1, en.v_X, en.w_X, en.pythagoras_defect


def cmd_mms_verify(cfg: RunConfig, w: Writer) -> int:
    from .mms import eoc, fiber_projection_errors, projection_errors
    prob = _problem(cfg)
    levels = list(range(cfg.level, cfg.level + cfg.levels))
    kw = cfg.model_overrides()
    if "reaction" in kw:
        kw["reaction"] = prob.reaction
    full = parallel_map(_mms_level, [(cfg.problem, kw, m, cfg.micro_n, cfg.dt, cfg.linear_solver)
                                     for m in levels])
    w.csv("solver_errors.csv", ["level", "dt", "U_L2L2", "U_L2H1", "v_X", "w_X", "pythagoras_defect"], full)
    ok = True
    if cfg.problem == "constant":
        worst = max(max(r[2:6]) for r in full)
        ok = worst <= 1e-9
        log.info("mms-verify constant: worst error %.3e", worst)
        return EXIT_OK if ok else EXIT_ACCEPTANCE
    h = [math.sqrt(2) * 2.0 ** -m for m in levels]
    proj = [projection_errors(prob, m, n_time=cfg.n_time) for m in levels]
    tl2, th1 = eoc(list(zip(h, [p[0] for p in proj]))), eoc(list(zip(h, [p[1] for p in proj])))
    w.csv("eoc_macro.csv", ["h", "err_L2L2", "eoc_L2L2", "err_L2H1", "eoc_L2H1"],
          ((a[0], a[1], a[2], b[1], b[2]) for a, b in zip(tl2.rows(), th1.rows())))
    ok &= bool(np.all(np.abs(tl2.slopes - 2) <= 0.2) and np.all(np.abs(th1.slopes - 1) <= 0.2))
    ns = [cfg.micro_n * 2 ** k for k in range(cfg.levels)]
    hy = [math.sqrt(2) / n for n in ns]
    rows = []
    for name, fld in (("v", prob.v), ("w", prob.w)):
        errs = [fiber_projection_errors(fld, MicroMesh(n, prob.gamma_r), prob.T_final, cfg.level, cfg.n_time)
                for n in ns]
        a, b = eoc(list(zip(hy, [e[0] for e in errs]))), eoc(list(zip(hy, [e[1] for e in errs])))
        rows.extend((name, n, x[0], x[1], x[2], y[1], y[2]) for n, x, y in zip(ns, a.rows(), b.rows()))
        ok &= bool(np.all(np.abs(a.slopes - 2) <= 0.3) and np.all(np.abs(b.slopes - 1) <= 0.3))
    w.csv("eoc_micro.csv", ["field", "n", "h_Y", "err_L2", "eoc_L2", "err_H1y", "eoc_H1y"], rows)
    log.info("mms-verify: rates %s", "ok" if ok else "OUT OF RANGE")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_continuity(cfg: RunConfig, w: Writer) -> int:
    from .mms import continuity_experiment, perturbation, scalar_exchange_check
    prob = _problem(cfg)
    params = prob.params()
    part = MacroPartition.uniform(cfg.level)
    micro = MicroMesh(cfg.micro_n, prob.gamma_r)
    rows = []
    for sg in (1.0, -1.0):
        for e in cfg.eps:
            rep = continuity_experiment(prob.U, prob.U + perturbation(sg * e), params, part, micro, cfg.dt)
            rows.append((sg * e, rep.numerator, rep.denominator, rep.ratio))
    w.csv("continuity.csv", ["eps", "numerator", "denominator", "ratio"], rows)
    sc = scalar_exchange_check(gamma_r=prob.gamma_r)
    w.csv("scalar_exchange.csv", ["numerator", "closed_form", "continuous", "abs_error"],
          [(sc.numerator, sc.closed_form, sc.continuous, sc.error)])
    r = np.array([x[3] for x in rows])
    ok = r.max() / r.min() <= 1.5 and sc.error <= 1e-6
    log.info("continuity: ratio spread %.4f, scalar exchange error %.2e", r.max() / r.min(), sc.error)
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_trace(cfg: RunConfig, w: Writer) -> int:
    from .fem import FeSpaceMicro, trace_inequality_check
    space = FeSpaceMicro(MicroMesh(cfg.micro_n, cfg.gamma_r))
    reps = [trace_inequality_check(space, rho, samples=cfg.samples, seed=cfg.seed) for rho in cfg.rho]
    w.csv("trace_check.csv", ["rho", "samples", "c_required", "c_space_sup", "dominated"],
          ((r.rho, r.samples, r.c_required, r.c_space_sup, int(r.dominated)) for r in reps))
    order = np.argsort(cfg.rho)
    c = np.array([reps[i].c_required for i in order])
    ok = all(r.dominated for r in reps) and bool(np.all(np.diff(c) <= 1e-12 * np.abs(c[:-1]).clip(1)))
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_diagnose_dt(cfg: RunConfig, w: Writer) -> int:
    from .solver import TwoScaleSolver, time_derivative_diagnostic
    prob = _problem(cfg)
    levels = list(range(cfg.level, cfg.level + cfg.levels))
    dt = cfg.dt if cfg.dt is not None else prob.T_final / cfg.n_time
    rows = []
    for m in levels:
        tr = TwoScaleSolver(prob.params(), MacroPartition.uniform(m), MicroMesh(cfg.micro_n, prob.gamma_r),
                            dt=dt, linear_solver=cfg.linear_solver).solve()
        r = time_derivative_diagnostic(tr)
        rows.append((m, dt, r.dt_norm_sq, r.grad_energy, r.lhs, r.C_I, r.l2_norm_sq, r.ratio))
    dq = []
    for k in range(3):
        tr = TwoScaleSolver(prob.params(), MacroPartition.uniform(cfg.level),
                            MicroMesh(cfg.micro_n, prob.gamma_r), dt=dt / 2 ** k,
                            linear_solver=cfg.linear_solver).solve()
        dq.append((dt / 2 ** k, time_derivative_diagnostic(tr).dt_norm_sq))
    w.csv("time_derivative.csv", ["level", "dt", "dq_norm_sq", "grad_energy", "lhs", "C_I", "l2_norm_sq",
                                  "ratio"], rows)
    w.csv("time_derivative_dt.csv", ["dt", "dq_norm_sq"], dq)
    lhs = np.array([r[4] for r in rows])
    q = np.array([x[1] for x in dq])
    ok = lhs.max() / lhs.min() <= 2.0 and abs(q[-1] - q[-2]) <= 0.1 * abs(q[-1])
    return EXIT_OK if ok else EXIT_ACCEPTANCE


COMMANDS = {"solve": cmd_solve, "refine-loop": cmd_refine_loop, "mms-verify": cmd_mms_verify,
            "continuity-test": cmd_continuity, "trace-check": cmd_trace, "diagnose-dt": cmd_diagnose_dt}


def run(cfg: RunConfig, given_flags=()) -> int:
    """Execute a validated configuration; returns the process exit code."""
    if cfg.subcommand != "refine-loop" and "beta" in given_flags:
        log.warning("--beta is ignored by %s", cfg.subcommand)
    w = Writer(cfg)
    w.echo_config()
    try:
        return COMMANDS[cfg.subcommand](cfg, w)
    except (SolverError, ConvergenceError) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twoscale", description=__doc__)
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--problem", metavar="ID")
        sp.add_argument("--level", type=int, metavar="M")
        sp.add_argument("--micro-n", dest="micro_n", type=int, metavar="N")
        sp.add_argument("--dt", type=float, metavar="X")
        sp.add_argument("--beta", type=float, metavar="X")
        sp.add_argument("--iters", type=int, metavar="K")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int, metavar="S")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    flags = {k: getattr(args, k) for k in ("problem", "level", "micro_n", "dt", "beta", "iters", "out", "seed")}
    given = {k for k, v in flags.items() if v is not None}
    flags["subcommand"] = args.subcommand
    try:
        cfg = parse_config(args.config, flags)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return run(cfg, given)


if __name__ == "__main__":
    sys.exit(main())
