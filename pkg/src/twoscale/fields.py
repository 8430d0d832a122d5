"""Separable space-time fields ``sum_k T_k(t) X_k(x) Y_k(y)``.

Manufactured solutions and their forcings are kept in this form so that load
vectors split into Kronecker products of small macro and micro loads and
never need quadrature over the full product domain ``Omega x Y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def _zeros_like(x1, x2):
    return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)


@dataclass(frozen=True)
class TimeFactor:
    f: Callable
    df: Callable

    def __mul__(self, other: "TimeFactor") -> "TimeFactor":
        a, b = self, other
        if getattr(a, "_unit", False):
            return b
        if getattr(b, "_unit", False):
            return a
        return TimeFactor(lambda t: a.f(t) * b.f(t), lambda t: a.df(t) * b.f(t) + a.f(t) * b.df(t))


@dataclass(frozen=True)
class SpaceFactor:
    """A function of two coordinates with its gradient and Laplacian."""

    f: Callable
    grad: Callable | None = None
    lap: Callable | None = None

    def __call__(self, x1, x2):
        return np.asarray(self.f(x1, x2), dtype=float) + _zeros_like(x1, x2)

    def gradient(self, x1, x2):
        g1, g2 = self.grad(x1, x2)
        z = _zeros_like(x1, x2)
        return np.asarray(g1, dtype=float) + z, np.asarray(g2, dtype=float) + z

    def laplacian(self, x1, x2):
        return np.asarray(self.lap(x1, x2), dtype=float) + _zeros_like(x1, x2)

    def __mul__(self, other: "SpaceFactor") -> "SpaceFactor":
        a, b = self, other
        if getattr(a, "_unit", False):
            return b
        if getattr(b, "_unit", False):
            return a

        def grad(x1, x2):
            ga, gb = a.gradient(x1, x2), b.gradient(x1, x2)
            fa, fb = a(x1, x2), b(x1, x2)
            return fa * gb[0] + fb * ga[0], fa * gb[1] + fb * ga[1]

        def lap(x1, x2):
            ga, gb = a.gradient(x1, x2), b.gradient(x1, x2)
            return (a(x1, x2) * b.laplacian(x1, x2) + b(x1, x2) * a.laplacian(x1, x2)
                    + 2 * (ga[0] * gb[0] + ga[1] * gb[1]))

        return SpaceFactor(lambda x1, x2: a(x1, x2) * b(x1, x2), grad, lap)


def const_time(c: float = 1.0) -> TimeFactor:
    return TimeFactor(lambda t: c + 0.0 * np.asarray(t), lambda t: 0.0 * np.asarray(t))


def linear_time(c0: float, c1: float) -> TimeFactor:
    return TimeFactor(lambda t: c0 + c1 * np.asarray(t), lambda t: c1 + 0.0 * np.asarray(t))


def const_space(c: float = 1.0) -> SpaceFactor:
    return SpaceFactor(lambda x1, x2: c + _zeros_like(x1, x2),
                       lambda x1, x2: (_zeros_like(x1, x2), _zeros_like(x1, x2)),
                       lambda x1, x2: _zeros_like(x1, x2))


ONE_T = const_time(1.0)
ONE_S = const_space(1.0)
object.__setattr__(ONE_T, "_unit", True)
object.__setattr__(ONE_S, "_unit", True)


@dataclass(frozen=True)
class Term:
    coef: float
    time: TimeFactor
    x: SpaceFactor
    y: SpaceFactor = ONE_S


@dataclass(frozen=True)
class SeparableField:
    """``sum coef_k T_k(t) X_k(x) Y_k(y)``; macro-only fields use ``Y = 1``."""

    terms: tuple = ()

    def __add__(self, other: "SeparableField") -> "SeparableField":
        return SeparableField(self.terms + other.terms)

    def scaled(self, s: float) -> "SeparableField":
        return SeparableField(tuple(Term(s * k.coef, k.time, k.x, k.y) for k in self.terms))

    def __neg__(self):
        return self.scaled(-1.0)

    def __bool__(self):
        return bool(self.terms)

    def time_coeffs(self, t: float) -> np.ndarray:
        return np.array([k.coef * float(k.time.f(t)) for k in self.terms])

    def __mul__(self, other: "SeparableField") -> "SeparableField":
        return SeparableField(tuple(Term(a.coef * b.coef, a.time * b.time, a.x * b.x, a.y * b.y)
                                    for a in self.terms for b in other.terms))

    def laplacian_x(self) -> "SeparableField":
        return SeparableField(tuple(Term(k.coef, k.time, SpaceFactor(k.x.laplacian), k.y)
                                    for k in self.terms))

    def laplacian_y(self) -> "SeparableField":
        return SeparableField(tuple(Term(k.coef, k.time, k.x, SpaceFactor(k.y.laplacian))
                                    for k in self.terms))

    def map_y(self, fn: Callable[[SpaceFactor], SpaceFactor]) -> "SeparableField":
        """Replace every micro factor ``Y_k`` by ``fn(Y_k)``."""
        return SeparableField(tuple(Term(k.coef, k.time, k.x, fn(k.y)) for k in self.terms))

    def time_derivative(self) -> "SeparableField":
        return SeparableField(tuple(Term(k.coef, TimeFactor(k.time.df, lambda t: 0.0 * t), k.x, k.y)
                                    for k in self.terms))

    # --- evaluation ---------------------------------------------------------
    def macro(self, t, x1, x2):
        """Value of a field without micro dependence."""
        out = _zeros_like(x1, x2)
        for k in self.terms:
            out = out + k.coef * k.time.f(t) * k.x(x1, x2)
        return out

    def macro_grad(self, t, x1, x2):
        g1, g2 = _zeros_like(x1, x2), _zeros_like(x1, x2)
        for k in self.terms:
            a, b = k.x.gradient(x1, x2)
            s = k.coef * k.time.f(t)
            g1, g2 = g1 + s * a, g2 + s * b
        return g1, g2

    def __call__(self, t, x1, x2, y1=None, y2=None):
        if y1 is None:
            return self.macro(t, x1, x2)
        out = 0.0
        for k in self.terms:
            out = out + k.coef * k.time.f(t) * k.x(x1, x2) * k.y(y1, y2)
        return out

    def x_table(self, x1, x2) -> np.ndarray:
        """Macro factors at points, shape (npts, nterms)."""
        return np.column_stack([k.x(x1, x2) for k in self.terms]) if self.terms else np.zeros((len(x1), 0))

    def y_table(self, y1, y2, derivative: int | None = None) -> np.ndarray:
        """Micro factors (or one of their partial derivatives) at points."""
        if not self.terms:
            return np.zeros((len(y1), 0))
        if derivative is None:
            return np.column_stack([k.y(y1, y2) for k in self.terms])
        return np.column_stack([k.y.gradient(y1, y2)[derivative] for k in self.terms])

    def on_grid(self, t, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Values on the tensor grid of macro points ``X`` and micro points ``Y``."""
        ct = self.time_coeffs(t)
        return (self.x_table(X[:, 0], X[:, 1]) * ct) @ self.y_table(Y[:, 0], Y[:, 1]).T
