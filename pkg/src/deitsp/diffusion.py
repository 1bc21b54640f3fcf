"""Binary discrete noise process and inference-time iteration schedules.

Each edge bit flips through the symmetric 2x2 transition
``Q_t = [[1 - b_t, b_t], [b_t, 1 - b_t]]``. Products of such matrices stay
symmetric with closed form ``[[(1+g)/2, (1-g)/2], [(1-g)/2, (1+g)/2]]`` where
``g = prod(1 - 2 b_s)``, which lets ``add_noise`` jump straight to any step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, InputError, SizeError

BETA_START = 1e-4
BETA_END = 0.02

SeedLike = Union[int, np.random.Generator, None, list, tuple]


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def step_matrix(beta: float) -> np.ndarray:
    return np.array([[1.0 - beta, beta], [beta, 1.0 - beta]])


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise SizeError("noise schedule needs at least one step")
        # zero rates are tolerated so tests can build an identity process
        if np.any(betas < 0.0) or np.any(betas >= 0.5):
            raise ConfigError("betas must lie in [0, 0.5)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        cum = np.empty((betas.size + 1, 2, 2))
        cum[0] = np.eye(2)
        for t, b in enumerate(betas, start=1):
            cum[t] = cum[t - 1] @ step_matrix(b)
        cum.setflags(write=False)
        object.__setattr__(self, "cumulative", cum)

    @property
    def T(self) -> int:
        return self.betas.size

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise InputError(f"t must be in [1, {self.T}], got {t}")

    def gamma(self, t: int) -> float:
        """Closed-form retention factor prod_{s<=t} (1 - 2 b_s)."""
        self._check_t(t)
        return float(np.prod(1.0 - 2.0 * self.betas[:t]))

    def flip_probability(self, t: int) -> float:
        self._check_t(t)
        return float(self.cumulative[t][0, 1])


def linear_beta_schedule(T: int) -> NoiseSchedule:
    if T < 2:
        raise SizeError(f"T must be >= 2, got {T}")
    return NoiseSchedule(np.linspace(BETA_START, BETA_END, T))


def cumulative_transition(schedule: NoiseSchedule, t: int) -> np.ndarray:
    schedule._check_t(t)
    return np.array(schedule.cumulative[t])


def closed_form_transition(schedule: NoiseSchedule, t: int) -> np.ndarray:
    g = schedule.gamma(t)
    return np.array([[(1 + g) / 2, (1 - g) / 2], [(1 - g) / 2, (1 + g) / 2]])


def transition_between(schedule: NoiseSchedule, s: int, t: int) -> np.ndarray:
    """Product Q_{s+1} ... Q_t (identity when s == t)."""
    if not 0 <= s <= t <= schedule.T:
        raise InputError(f"need 0 <= s <= t <= {schedule.T}, got s={s}, t={t}")
    out = np.eye(2)
    for b in schedule.betas[s:t]:
        out = out @ step_matrix(b)
    return out


def _off_diagonal_mask(n):
    return ~np.eye(n, dtype=bool)


def _apply_transition(a, Q, rng):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise InputError(f"edge matrix must be (..., N, N), got {a.shape}")
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise InputError("edge entries must be bits or probabilities in [0, 1]")
    # row (1 - p, p) times Q gives P(state 1)
    p_one = (1.0 - a) * Q[0, 1] + a * Q[1, 1]
    out = (rng.random(a.shape) < p_one).astype(np.float64)
    out *= _off_diagonal_mask(a.shape[-1])
    return out


def add_noise(a0, schedule: NoiseSchedule, t: int, seed: SeedLike = None) -> np.ndarray:
    """Sample a_t ~ Cate(row(a0) Q̄_t) independently per ordered off-diagonal entry.

    ``a0`` may hold hard bits or edge probabilities; a probability p is read as
    the row (1 - p, p). A leading batch axis is allowed.
    """
    schedule._check_t(t)
    return _apply_transition(a0, schedule.cumulative[t], as_rng(seed))


def add_noise_between(a_s, schedule: NoiseSchedule, s: int, t: int, seed: SeedLike = None):
    """Continue a sample taken at step s forward to step t."""
    return _apply_transition(a_s, transition_between(schedule, s, t), as_rng(seed))


def sample_uniform_state(n: int, seed: SeedLike = None) -> np.ndarray:
    if n < 3:
        raise SizeError(f"n must be >= 3, got {n}")
    rng = as_rng(seed)
    out = (rng.random((n, n)) < 0.5).astype(np.float64)
    out *= _off_diagonal_mask(n)
    return out


# ------------------------------------------------------ iteration schedules


def _cosine(c):
    return np.cos((1.0 - c) * np.pi / 2.0)


SCHEDULE_KINDS = {
    "linear": (lambda c: c, (0.0, 1.0)),
    "cosine": (_cosine, (0.0, 1.0)),
    "inverse": (lambda c: 1.0 / c, (0.25, 1.5)),
}


@dataclass(frozen=True)
class IterationSchedule:
    kind: str
    interval: tuple
    T: int
    steps: tuple

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if any(not 1 <= s <= self.T - 1 for s in steps):
            raise ConfigError(f"steps must lie in [1, {self.T - 1}]: {steps}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"steps must be strictly decreasing: {steps}")
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def iteration_schedule(
    kind: str,
    M: int,
    T: int,
    l: Optional[float] = None,
    r: Optional[float] = None,
    f: Optional[Callable] = None,
) -> IterationSchedule:
    """Re-noising levels for M denoising iterations (M - 1 values, descending).

    ``c`` samples the midpoints of M - 1 equal cells of [l, r]; f(c) is min-max
    normalised with f's extrema on [l, r] and scaled by T.
    """
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if kind == "custom":
        if f is None:
            raise ConfigError("custom schedules need a function f")
        if l is None or r is None:
            raise ConfigError("custom schedules need an explicit interval")
        func = f
    elif kind in SCHEDULE_KINDS:
        func, (dl, dr) = SCHEDULE_KINDS[kind]
        l = dl if l is None else l
        r = dr if r is None else r
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    l, r = float(l), float(r)
    if not l < r:
        raise ConfigError(f"interval needs l < r, got [{l}, {r}]")

    grid = np.linspace(l, r, 2049)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.asarray(func(grid), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"f is not finite on [{l}, {r}]")
    d = np.diff(vals)
    if not (np.all(d > 0) or np.all(d < 0)):
        raise ConfigError(f"f must be strictly monotone on [{l}, {r}]")

    S = M - 1
    if S == 0:
        return IterationSchedule(kind, (l, r), T, ())
    c = l + (r - l) * (np.arange(1, S + 1) - 0.5) / S
    f_lo, f_hi = sorted((float(func(np.float64(l))), float(func(np.float64(r)))))
    frac = (np.asarray(func(c), dtype=np.float64) - f_lo) / (f_hi - f_lo)
    taus = np.floor(frac * T).astype(np.int64)
    taus = np.clip(taus, 1, T - 1)
    taus = sorted({int(x) for x in taus}, reverse=True)
    if len(taus) != S:
        raise ConfigError(f"{M} iterations collapse to duplicate noise levels at T={T}")
    return IterationSchedule(kind, (l, r), T, tuple(taus))


def median_step(schedule: IterationSchedule) -> float:
    return float(np.median(schedule.steps)) if schedule.steps else math.nan
