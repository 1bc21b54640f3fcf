"""Iterative denoise / re-noise inference, greedy decoding and evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data_io import DatasetRecord, ResultRecord
from .diffusion import (
    IterationSchedule,
    NoiseSchedule,
    add_noise,
    iteration_schedule,
    linear_beta_schedule,
    sample_uniform_state,
)
from .errors import ConfigError, InputError
from .model import ModelParams, forward
from .tsp import (
    Tour,
    TspInstance,
    euclidean_length,
    gap_percent,
    tour_length,
    tour_to_edge_matrix,
    two_opt,
)

TWO_OPT_SCOPES = ("each", "best")

Denoiser = Callable[[TspInstance, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class InferenceConfig:
    iterations: int = 1
    schedule: str = "inverse"
    interval: Optional[Tuple[float, float]] = None
    two_opt: bool = True
    seed: int = 0
    # "each": 2-opt every decoded tour before selection; "best": only the selected one
    two_opt_scope: str = "each"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.two_opt_scope not in TWO_OPT_SCOPES:
            raise ConfigError(f"two_opt_scope must be one of {TWO_OPT_SCOPES}, got {self.two_opt_scope!r}")

    def iteration_schedule(self, T: int) -> IterationSchedule:
        l, r = self.interval if self.interval is not None else (None, None)
        return iteration_schedule(self.schedule, self.iterations, T, l, r)

    @property
    def method_tag(self) -> str:
        tag = f"deitsp-{self.schedule}-G"
        if self.two_opt:
            tag += "-2OPT" if self.two_opt_scope == "each" else "-2OPTBEST"
        return tag


@dataclass
class Solution:
    iteration: int
    heatmap: np.ndarray
    tour: Tour
    length: float


@dataclass
class SolutionSet:
    entries: List[Solution] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def best(self) -> Solution:
        # earliest entry wins ties
        return min(self.entries, key=lambda s: (s.length, s.iteration))

    def prefix_best_lengths(self) -> List[float]:
        out, cur = [], np.inf
        for s in self.entries:
            cur = min(cur, s.length)
            out.append(cur)
        return out


# ---------------------------------------------------------------- decoding


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)


def greedy_decode(heatmap, instance: TspInstance) -> Tour:
    """Insert edges by descending (p_ij + p_ji) / cost, keeping degree <= 2 and no subtours.

    Ties break on (i, j) lexicographic order. Scanning the full edge list always
    completes a Hamiltonian cycle, so the result is a valid tour for any heatmap.
    """
    p = np.asarray(heatmap, dtype=np.float64)
    n = instance.n
    if p.shape != (n, n):
        raise InputError(f"heatmap must be {(n, n)}, got {p.shape}")
    iu, ju = np.triu_indices(n, k=1)
    cost = instance.distances[iu, ju]
    sym = p[iu, ju] + p[ju, iu]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(cost > 0, sym / np.where(cost > 0, cost, 1.0), np.inf)
    score = np.where(np.isnan(score), 0.0, score)
    order = np.lexsort((ju, iu, -score))
    degree = [0] * n
    dsu = _DisjointSet(n)
    adj = [[] for _ in range(n)]
    added = 0
    for e in order:
        i, j = int(iu[e]), int(ju[e])
        if degree[i] == 2 or degree[j] == 2:
            continue
        if dsu.find(i) == dsu.find(j) and added < n - 1:
            continue
        degree[i] += 1
        degree[j] += 1
        adj[i].append(j)
        adj[j].append(i)
        dsu.union(i, j)
        added += 1
        if added == n:
            break
    return _walk(adj, n)


def _walk(adj, n) -> Tour:
    order = [0]
    prev = -1
    cur = 0
    while len(order) < n:
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        order.append(nxt)
        prev, cur = cur, nxt
    return Tour(order)


# --------------------------------------------------------------- inference


def model_denoiser(params: ModelParams) -> Denoiser:
    def denoise(instance, a_t, t):
        return forward(params, instance, a_t, t)

    return denoise


def oracle_denoiser(tour: Tour) -> Denoiser:
    """Returns the ground-truth adjacency whatever the input; a perfect-prediction ceiling."""
    target = tour_to_edge_matrix(tour)

    def denoise(instance, a_t, t):
        return target.copy()

    return denoise


def renoise(heatmap: np.ndarray, noise: NoiseSchedule, t: int, seed) -> np.ndarray:
    """Sample a_t from rows (1 - p, p) of the predicted heatmap pushed through Q̄_t."""
    return add_noise(heatmap, noise, t, seed)


def solve(
    model: Union[ModelParams, Denoiser],
    instance: TspInstance,
    config: InferenceConfig,
    schedule: Optional[IterationSchedule] = None,
    noise: Optional[NoiseSchedule] = None,
) -> Tuple[Tour, SolutionSet]:
    """Alternate one-step denoising with re-noising at the scheduled levels.

    Iteration i draws its random numbers from the stream (seed, i), so a run
    with M iterations repeats the first entries of any longer run. With
    ``two_opt_scope="best"`` the set holds raw decodes and only the returned
    tour is improved.
    """
    if isinstance(model, ModelParams):
        T = model.config.T
        denoise = model_denoiser(model)
    else:
        if noise is None:
            raise ConfigError("a custom denoiser needs an explicit noise schedule")
        T = noise.T
        denoise = model
    noise = noise or linear_beta_schedule(T)
    if noise.T != T:
        raise ConfigError(f"noise schedule has T={noise.T}, model expects T={T}")
    if schedule is None:
        schedule = config.iteration_schedule(T)
    if len(schedule) != config.iterations - 1:
        raise ConfigError(
            f"{config.iterations} iterations need {config.iterations - 1} noise levels, "
            f"schedule has {len(schedule)}"
        )
    n = instance.n
    each = config.two_opt and config.two_opt_scope == "each"
    sols = SolutionSet()
    a_t = sample_uniform_state(n, [config.seed, 0])
    t = T
    for i in range(config.iterations):
        heat = denoise(instance, a_t, t)
        tour = greedy_decode(heat, instance)
        if each:
            tour = two_opt(instance, tour)
        sols.entries.append(Solution(i, heat, tour, tour_length(instance, tour)))
        if i < len(schedule):
            t = schedule.steps[i]
            a_t = renoise(heat, noise, t, [config.seed, i + 1])
    best = sols.best().tour
    if config.two_opt and not each:
        best = two_opt(instance, best)
    return best, sols


@dataclass
class EvalSummary:
    records: List[ResultRecord]
    mean_length: float
    mean_gap: Optional[float]
    total_time: float


def _id_for(k, instance):
    return instance.name if instance.name else str(k)


def evaluate_one(
    model,
    instance: TspInstance,
    reference: Optional[float],
    config: InferenceConfig,
    instance_id: str,
    noise: Optional[NoiseSchedule] = None,
) -> ResultRecord:
    start = time.perf_counter()
    tour, _ = solve(model, instance, config, noise=noise)
    elapsed = time.perf_counter() - start
    length = tour_length(instance, tour)
    return ResultRecord(
        instance_id=instance_id,
        method=config.method_tag,
        iterations=config.iterations,
        tour=tour,
        length=length,
        gap=None if reference is None else gap_percent(length, reference),
        time=elapsed,
        euclidean_length=euclidean_length(instance, tour),
        metric_mode=instance.metric_mode,
    )


def summarize(records: Sequence[ResultRecord]) -> EvalSummary:
    gaps = [r.gap for r in records if r.gap is not None]
    return EvalSummary(
        list(records),
        float(np.mean([r.length for r in records])) if records else float("nan"),
        float(np.mean(gaps)) if gaps else None,
        float(sum(r.time for r in records)),
    )


def evaluate(
    params,
    dataset: Sequence[DatasetRecord],
    config: InferenceConfig,
    oracle: bool = False,
    noise: Optional[NoiseSchedule] = None,
) -> EvalSummary:
    """Solve every record and report Len / Gap / Time against its stored optimum.

    With ``oracle=True`` each instance's heatmap is its own ground truth.
    """
    out = []
    for k, rec in enumerate(dataset):
        model = params
        if oracle:
            model = oracle_denoiser(rec.optimal_tour)
            if noise is None:
                T = params.config.T if isinstance(params, ModelParams) else 1000
                noise = linear_beta_schedule(T)
        ref = rec.optimal_length if rec.optimal_length is not None else None
        out.append(evaluate_one(model, rec.instance, ref, config, _id_for(k, rec.instance), noise))
    return summarize(out)
