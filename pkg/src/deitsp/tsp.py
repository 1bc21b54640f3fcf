"""TSP instances, tours, exact small-instance solver and 2-opt."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, SizeError

FLOAT_EUCLIDEAN = "float_euclidean"
TSPLIB_EUC2D = "tsplib_euc2d_rounded"
METRIC_MODES = (FLOAT_EUCLIDEAN, TSPLIB_EUC2D)

HELD_KARP_MAX_N = 16
# 2-exchanges must shorten the tour by more than this (relative to tour length)
# to be accepted; keeps the search finite under floating-point noise.
IMPROVEMENT_RTOL = 1e-12


def _nint(x):
    # TSPLIB nint(): round half up on non-negative distances
    return np.floor(x + 0.5)


@dataclass(frozen=True, eq=False)
class TspInstance:
    coords: np.ndarray
    metric_mode: str = FLOAT_EUCLIDEAN
    name: Optional[str] = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InputError(f"coords must have shape (N, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise SizeError(f"an instance needs at least 3 nodes, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise InputError("coordinates must be finite")
        if self.metric_mode not in METRIC_MODES:
            raise InputError(f"unknown metric mode {self.metric_mode!r}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def distances(self) -> np.ndarray:
        """Full N x N cost matrix under the instance's metric mode (built on first use)."""
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        if self.metric_mode == TSPLIB_EUC2D:
            dist = _nint(dist)
        dist.setflags(write=False)
        return dist

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, TspInstance):
            return NotImplemented
        return (
            self.metric_mode == other.metric_mode
            and self.name == other.name
            and np.array_equal(self.coords, other.coords)
        )

    def permuted(self, perm: Sequence[int]) -> "TspInstance":
        """Instance whose node k is node perm[k] of this one."""
        return TspInstance(self.coords[np.asarray(perm)], self.metric_mode, self.name)


@dataclass(frozen=True)
class Tour:
    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise InputError("tour must be a permutation of 0..N-1")
        object.__setattr__(self, "order", order)

    def __len__(self):
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def edges(self):
        n = len(self.order)
        return [(self.order[k], self.order[(k + 1) % n]) for k in range(n)]

    def reversed(self) -> "Tour":
        return Tour(self.order[::-1])

    def rotated(self, k: int) -> "Tour":
        k %= len(self.order)
        return Tour(self.order[k:] + self.order[:k])

    def canonical(self) -> tuple:
        """Rotation/reflection-invariant form: starts at 0, smaller neighbour second."""
        k = self.order.index(0)
        rot = self.order[k:] + self.order[:k]
        if len(rot) > 2 and rot[-1] < rot[1]:
            rot = (rot[0],) + rot[1:][::-1]
        return rot


def edge_cost(instance: TspInstance, i: int, j: int) -> float:
    n = instance.n
    if not (0 <= i < n and 0 <= j < n):
        raise InputError(f"node index out of range for N={n}: ({i}, {j})")
    if i == j:
        raise InputError("edge_cost of a self-loop is undefined")
    return float(instance.distances[i, j])


def _check_tour(instance: TspInstance, tour: Tour):
    if len(tour) != instance.n:
        raise InputError(f"tour has {len(tour)} nodes, instance has {instance.n}")


def tour_length(instance: TspInstance, tour: Tour) -> float:
    if not isinstance(tour, Tour):
        tour = Tour(tour)
    _check_tour(instance, tour)
    order = np.asarray(tour.order)
    return float(instance.distances[order, np.roll(order, -1)].sum())


def euclidean_length(instance: TspInstance, tour: Tour) -> float:
    """Unrounded Euclidean length, regardless of the instance's metric mode."""
    order = np.asarray(tour.order)
    seg = instance.coords[order] - instance.coords[np.roll(order, -1)]
    return float(np.sqrt((seg**2).sum(-1)).sum())


def tour_to_edge_matrix(tour: Tour) -> np.ndarray:
    n = len(tour)
    mat = np.zeros((n, n), dtype=np.float64)
    for a, b in tour.edges():
        mat[a, b] = mat[b, a] = 1.0
    return mat


def edge_matrix_is_tour(matrix) -> Optional[Tour]:
    """Recover the Hamiltonian cycle encoded by a symmetric 0/1 matrix, if any."""
    m = np.asarray(matrix)
    n = m.shape[0]
    if m.shape != (n, n) or n < 3:
        return None
    if not np.array_equal(m, m.T) or np.any(np.diag(m) != 0):
        return None
    if not np.all((m == 0) | (m == 1)):
        return None
    if not np.all(m.sum(axis=1) == 2):
        return None
    order = [0]
    prev, cur = -1, 0
    while True:
        nbrs = [int(j) for j in np.flatnonzero(m[cur]) if j != prev]
        nxt = nbrs[0]
        if nxt == 0:
            break
        order.append(nxt)
        prev, cur = cur, nxt
        if len(order) > n:
            return None
    if len(order) != n:
        return None
    return Tour(order)


def held_karp(instance: TspInstance) -> Tour:
    """Exact optimum by bitmask dynamic programming over subsets of nodes 1..N-1."""
    n = instance.n
    if n > HELD_KARP_MAX_N:
        raise SizeError(f"held_karp supports N <= {HELD_KARP_MAX_N}, got {n}")
    if n == 3:
        return Tour((0, 1, 2))
    D = instance.distances
    m = n - 1  # node k+1 <-> bit k
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    for k in range(m):
        dp[1 << k, k] = D[0, k + 1]
    masks = np.arange(full)
    popcount = np.zeros(full, dtype=np.int64)
    for k in range(m):
        popcount += (masks >> k) & 1
    sub = D[1:, 1:]
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            with_j = layer[(layer >> j) & 1 == 1]
            prev = with_j ^ (1 << j)
            cand = dp[prev] + sub[:, j][None, :]
            best = np.argmin(cand, axis=1)
            dp[with_j, j] = cand[np.arange(len(with_j)), best]
            parent[with_j, j] = best
    closing = dp[full - 1] + D[1:, 0]
    last = int(np.argmin(closing))
    order = []
    mask = full - 1
    while last != -1:
        order.append(last + 1)
        nxt = int(parent[mask, last])
        mask ^= 1 << last
        last = nxt
    order.append(0)
    return Tour(order[::-1])


def _two_opt_order(D: np.ndarray, order: np.ndarray) -> np.ndarray:
    n = len(order)
    # valid position pairs (i, j): j >= i + 2, excluding the pair sharing node order[0]
    ii, jj = np.indices((n, n))
    valid = (jj >= ii + 2) & ~((ii == 0) & (jj == n - 1))
    while True:
        a = order
        b = np.roll(order, -1)
        delta = D[a[:, None], a[None, :]] + D[b[:, None], b[None, :]]
        delta -= D[a, b][:, None] + D[a, b][None, :]
        scale = max(float(D[a, b].sum()), 1.0)
        improving = valid & (delta < -IMPROVEMENT_RTOL * scale)
        flat = int(np.argmax(improving))
        if not improving.flat[flat]:
            return order
        i, j = divmod(flat, n)
        order[i + 1 : j + 1] = order[i + 1 : j + 1][::-1].copy()


def two_opt(instance: TspInstance, tour: Tour) -> Tour:
    """First-improvement 2-opt.

    Each scan visits position pairs (i, j) in row-major order and applies the
    first strictly improving exchange; the search stops after a scan with none.
    """
    _check_tour(instance, tour)
    order = np.array(tour.order, dtype=np.int64)
    if instance.n < 4:
        return tour
    return Tour(_two_opt_order(instance.distances, order).tolist())


def improving_two_exchanges(instance: TspInstance, tour: Tour):
    """All (i, j) position pairs whose 2-exchange shortens the tour beyond tolerance."""
    D = instance.distances
    order = np.asarray(tour.order)
    n = len(order)
    scale = max(tour_length(instance, tour), 1.0)
    found = []
    for i in range(n - 2):
        for j in range(i + 2, n if i > 0 else n - 1):
            a, b, c, d = order[i], order[i + 1], order[j], order[(j + 1) % n]
            if D[a, c] + D[b, d] - D[a, b] - D[c, d] < -IMPROVEMENT_RTOL * scale:
                found.append((i, j))
    return found


def nearest_neighbor_tour(instance: TspInstance, start: int = 0) -> Tour:
    D = instance.distances
    n = instance.n
    seen = np.zeros(n, dtype=bool)
    order = [start]
    seen[start] = True
    for _ in range(n - 1):
        row = np.where(seen, np.inf, D[order[-1]])
        nxt = int(np.argmin(row))
        order.append(nxt)
        seen[nxt] = True
    return Tour(order)


def generate_uniform_instance(n: int, seed) -> TspInstance:
    if n < 3:
        raise SizeError(f"an instance needs at least 3 nodes, got {n}")
    rng = np.random.default_rng(seed)
    return TspInstance(rng.uniform(0.0, 1.0, size=(n, 2)))


def gap_percent(length: float, reference: float) -> float:
    return (length - reference) / reference * 100.0


def is_close_length(a: float, b: float, rtol: float = 1e-9) -> bool:
    return math.isclose(a, b, rel_tol=rtol, abs_tol=0.0)
