"""Dyadic quadtree partitions of the unit square and the uniform micro-cell mesh.

A macro partition is an immutable set of :class:`DyadicSquare` objects covering
``[0, 1]^2``. Refinement bisects marked squares and then restores
1-irregularity (edge neighbours differ by at most one level) by splitting
coarse neighbours; those extra splits are kept apart as ``closure_splits``.

The micro cell ``Y = [0, 1]^2`` carries a uniform ``n x n`` grid of squares.
Any nonempty subset of its four edges can be tagged as the reactive
interface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

DEFAULT_MAX_DEPTH = 20

EDGES = ("bottom", "right", "top", "left")


class GeometryError(ValueError):
    """Raised for invalid squares, markings or partition queries."""


class DepthLimitError(GeometryError):
    pass


@dataclass(frozen=True, order=True)
class DyadicSquare:
    """The square ``[ix 2^-m, (ix+1) 2^-m] x [iy 2^-m, (iy+1) 2^-m]``."""

    level: int
    ix: int
    iy: int

    def __post_init__(self):
        if self.level < 0:
            raise GeometryError(f"negative level {self.level}")
        n = 1 << self.level
        if not (0 <= self.ix < n and 0 <= self.iy < n):
            raise GeometryError(f"index out of range for level {self.level}: ({self.ix}, {self.iy})")

    @property
    def side(self) -> float:
        return 2.0 ** -self.level

    @property
    def diameter(self) -> float:
        return math.sqrt(2.0) * self.side

    @property
    def area(self) -> float:
        return 4.0 ** -self.level

    @property
    def origin(self) -> tuple[float, float]:
        return self.ix * self.side, self.iy * self.side

    @property
    def center(self) -> tuple[float, float]:
        h = self.side
        return (self.ix + 0.5) * h, (self.iy + 0.5) * h

    def bounds(self) -> tuple[float, float, float, float]:
        """Return ``(x0, x1, y0, y1)``."""
        h = self.side
        return self.ix * h, (self.ix + 1) * h, self.iy * h, (self.iy + 1) * h

    def int_bounds(self, level: int) -> tuple[int, int, int, int]:
        """Integer bounds in units of ``2^-level`` (``level >= self.level``)."""
        s = 1 << (level - self.level)
        return self.ix * s, (self.ix + 1) * s, self.iy * s, (self.iy + 1) * s

    def parent(self) -> DyadicSquare:
        if self.level == 0:
            raise GeometryError("the unit square has no parent")
        return DyadicSquare(self.level - 1, self.ix >> 1, self.iy >> 1)

    def children(self, max_depth: int = DEFAULT_MAX_DEPTH) -> tuple[DyadicSquare, ...]:
        return children(self, max_depth)

    def contains(self, other: DyadicSquare) -> bool:
        """True if ``other`` lies inside this square (or equals it)."""
        if other.level < self.level:
            return False
        k = other.level - self.level
        return (other.ix >> k) == self.ix and (other.iy >> k) == self.iy


def children(q: DyadicSquare, max_depth: int = DEFAULT_MAX_DEPTH) -> tuple[DyadicSquare, ...]:
    """The four squares obtained by bisecting each side of ``q``.

    Ordered (0,0), (1,0), (0,1), (1,1) in the local (dx, dy) offsets.
    """
    if q.level + 1 > max_depth:
        raise DepthLimitError(f"cannot split {q}: depth limit {max_depth} reached")
    m = q.level + 1
    return tuple(DyadicSquare(m, 2 * q.ix + dx, 2 * q.iy + dy) for dy in (0, 1) for dx in (0, 1))


# neighbour direction -> (dx, dy)
_DIRS = {"east": (1, 0), "west": (-1, 0), "north": (0, 1), "south": (0, -1)}


@dataclass(frozen=True)
class MacroPartition:
    """A finite set of non-overlapping dyadic squares covering the unit square."""

    squares: frozenset
    generation: int = 0
    max_depth: int = DEFAULT_MAX_DEPTH
    closure_splits: frozenset = field(default=frozenset(), compare=False)

    @classmethod
    def uniform(cls, level: int, max_depth: int = DEFAULT_MAX_DEPTH) -> MacroPartition:
        n = 1 << level
        sq = frozenset(DyadicSquare(level, i, j) for j in range(n) for i in range(n))
        return cls(sq, 0, max_depth)

    @classmethod
    def from_squares(cls, squares: Iterable[DyadicSquare], generation: int = 0,
                     max_depth: int = DEFAULT_MAX_DEPTH) -> MacroPartition:
        p = cls(frozenset(squares), generation, max_depth)
        p.validate()
        return p

    def __len__(self):
        return len(self.squares)

    def __iter__(self):
        return iter(self.sorted())

    def __contains__(self, q):
        return q in self.squares

    def sorted(self) -> list[DyadicSquare]:
        """Squares in a deterministic order (by level, then iy, then ix)."""
        return sorted(self.squares, key=lambda q: (q.level, q.iy, q.ix))

    @property
    def max_level(self) -> int:
        return max(q.level for q in self.squares)

    @property
    def h(self) -> float:
        return max(q.diameter for q in self.squares)

    def area_units(self) -> int:
        """Total area in units of ``4^-max_level``; equals ``4^max_level`` for a cover."""
        L = self.max_level
        return sum(1 << (2 * (L - q.level)) for q in self.squares)

    def validate(self):
        """Check cover + disjointness exactly using integer bookkeeping."""
        if not self.squares:
            raise GeometryError("empty partition")
        L = self.max_level
        if self.area_units() != 1 << (2 * L):
            raise GeometryError("squares do not cover the unit square exactly")
        # disjoint: no square may contain another
        for q in self.squares:
            k = q
            while k.level > 0:
                k = k.parent()
                if k in self.squares:
                    raise GeometryError(f"{q} overlaps {k}")

    def _leaf_covering(self, level: int, ix: int, iy: int) -> DyadicSquare | None:
        """The partition square containing the level-``level`` cell, if it is not finer."""
        for k in range(level + 1):
            a = DyadicSquare(level - k, ix >> k, iy >> k)
            if a in self.squares:
                return a
        return None

    def _leaves_inside(self, r: DyadicSquare, side: str) -> list[DyadicSquare]:
        """Partition squares inside ``r`` that touch the given side of ``r``."""
        if r in self.squares:
            return [r]
        if r.level >= self.max_depth:
            return []
        out = []
        for c in children(r, self.max_depth + 1):
            dx, dy = c.ix - 2 * r.ix, c.iy - 2 * r.iy
            if ((side == "west" and dx == 0) or (side == "east" and dx == 1)
                    or (side == "south" and dy == 0) or (side == "north" and dy == 1)):
                out.extend(self._leaves_inside(c, side))
        return out

    def neighbors(self, q: DyadicSquare) -> set[DyadicSquare]:
        """All squares sharing an edge segment of positive length with ``q``."""
        if q not in self.squares:
            raise GeometryError(f"{q} is not in the partition")
        n = 1 << q.level
        out = set()
        opposite = {"east": "west", "west": "east", "north": "south", "south": "north"}
        for d, (dx, dy) in _DIRS.items():
            jx, jy = q.ix + dx, q.iy + dy
            if not (0 <= jx < n and 0 <= jy < n):
                continue
            leaf = self._leaf_covering(q.level, jx, jy)
            if leaf is not None:
                out.add(leaf)
            else:
                out.update(self._leaves_inside(DyadicSquare(q.level, jx, jy), opposite[d]))
        return out

    def is_one_irregular(self) -> bool:
        return not self._irregular_pairs()

    def _irregular_pairs(self):
        bad = []
        for q in self.squares:
            for r in self.neighbors(q):
                if q.level - r.level > 1:
                    bad.append((q, r))
        return bad


def refine(p: MacroPartition, marked: Iterable[DyadicSquare]) -> MacroPartition:
    """Split every marked square into its children, then close to 1-irregularity.

    The returned partition records the squares split only for closure in
    ``closure_splits``.
    """
    marked = set(marked)
    if not marked:
        raise GeometryError("refine needs at least one marked square")
    stray = marked - p.squares
    if stray:
        raise GeometryError(f"marked squares not in partition: {sorted(stray)[:3]}")

    squares = set(p.squares)
    for q in marked:
        squares.remove(q)
        squares.update(children(q, p.max_depth))

    closure = set()
    work = set(squares)
    while work:
        tmp = MacroPartition(frozenset(squares), p.generation, p.max_depth)
        to_split = set()
        for q in work:
            if q not in squares:
                continue
            for r in tmp.neighbors(q):
                if q.level - r.level > 1:
                    to_split.add(r)
        if not to_split:
            break
        work = set()
        for r in to_split:
            squares.remove(r)
            kids = children(r, p.max_depth)
            squares.update(kids)
            work.update(kids)
            closure.add(r)
        # the new children may now violate the rule against their own coarser neighbours
    return MacroPartition(frozenset(squares), p.generation + 1, p.max_depth, frozenset(closure))


def dump_partition(p: MacroPartition) -> str:
    lines = [f"dyadic-partition v1 count={len(p)}"]
    lines += [f"{q.level} {q.ix} {q.iy}" for q in p.sorted()]
    return "\n".join(lines) + "\n"


def load_partition(text: str, max_depth: int = DEFAULT_MAX_DEPTH) -> MacroPartition:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["dyadic-partition", "v1"] or not head[2].startswith("count="):
        raise GeometryError(f"bad partition header: {lines[0]!r}")
    count = int(head[2].split("=", 1)[1])
    squares = [DyadicSquare(*map(int, ln.split())) for ln in lines[1:]]
    if len(squares) != count:
        raise GeometryError(f"header says {count} squares, found {len(squares)}")
    return MacroPartition.from_squares(squares, max_depth=max_depth)


@dataclass(frozen=True)
class MicroMesh:
    """Uniform ``n x n`` mesh of ``Y = [0, 1]^2`` with tagged reactive edges.

    Node ``(i, j)`` sits at ``(i/n, j/n)`` and has index ``j*(n+1) + i``.
    """

    n: int
    gamma_r: tuple = ("top",)

    def __post_init__(self):
        if self.n < 1:
            raise GeometryError("micro mesh needs n >= 1")
        g = tuple(self.gamma_r)
        if not g:
            raise GeometryError("(A2): the reactive interface must have positive measure")
        bad = [e for e in g if e not in EDGES]
        if bad:
            raise GeometryError(f"unknown micro edges {bad}; choose from {EDGES}")
        object.__setattr__(self, "gamma_r", tuple(e for e in EDGES if e in g))

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def diameter(self) -> float:
        return math.sqrt(2.0) / self.n

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.n + 1)
        yy, xx = np.meshgrid(t, t, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def elements(self) -> np.ndarray:
        """Connectivity (n^2, 4), counter-clockwise from the lower-left corner."""
        n = self.n
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        i, j = i.ravel(), j.ravel()
        ll = j * (n + 1) + i
        return np.column_stack([ll, ll + 1, ll + n + 2, ll + n + 1])

    def boundary_edges(self, edges: Iterable[str]) -> np.ndarray:
        """Node pairs (k, 2) of the boundary segments lying on the given edges."""
        n = self.n
        out = []
        k = np.arange(n)
        for e in edges:
            if e == "bottom":
                a = k
                b = k + 1
            elif e == "top":
                a = n * (n + 1) + k
                b = a + 1
            elif e == "left":
                a = k * (n + 1)
                b = a + n + 1
            elif e == "right":
                a = k * (n + 1) + n
                b = a + n + 1
            else:
                raise GeometryError(f"unknown edge {e!r}")
            out.append(np.column_stack([a, b]))
        return np.concatenate(out) if out else np.zeros((0, 2), dtype=int)


def dump_micromesh(y: MicroMesh) -> str:
    return f"micromesh v1 n={y.n} gammaR={','.join(y.gamma_r)}\n"


def load_micromesh(text: str) -> MicroMesh:
    parts = text.split()
    if parts[:2] != ["micromesh", "v1"]:
        raise GeometryError(f"bad micro mesh header: {text!r}")
    kv = dict(p.split("=", 1) for p in parts[2:])
    return MicroMesh(int(kv["n"]), tuple(kv["gammaR"].split(",")))


@dataclass(frozen=True)
class MeshSize:
    h_Omega: float
    h_Y: float


def mesh_size(p: MacroPartition, y: MicroMesh) -> MeshSize:
    return MeshSize(p.h, y.diameter)
