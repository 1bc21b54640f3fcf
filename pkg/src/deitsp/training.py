"""Self-consistency training of the denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as tn
from .data_io import DatasetRecord
from .diffusion import NoiseSchedule, add_noise, linear_beta_schedule
from .errors import ConfigError, InputError, TrainingError
from .model import ModelConfig, ModelParams, forward_logits, init_params
from .tensor import AdamState, Tensor, adam_step
from .tsp import tour_to_edge_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    T: int = 1000
    k: int = 20
    lam: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    # stop once the 200-step mean loss has not improved by min_delta for `patience` steps
    patience: int = 200
    min_delta: float = 1e-5
    window: int = 200

    def __post_init__(self):
        if not 1 <= self.k < self.T:
            raise ConfigError(f"need 1 <= k < T, got k={self.k}, T={self.T}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, steps >= 0 and lr > 0 required")


@dataclass
class LossTerms:
    total: Tensor
    ce_tk: float
    ce_t: float
    consistency: float


@dataclass
class TrainState:
    params: ModelParams
    optimizer: AdamState = field(default_factory=AdamState)
    step: int = 0
    curve: List[tuple] = field(default_factory=list)


def _off_diag(n):
    return ~np.eye(n, dtype=bool)


def cross_entropy(a0: np.ndarray, logits: Tensor) -> Tensor:
    """Mean two-class cross-entropy over off-diagonal edges, averaged over the batch."""
    lsm = tn.log_softmax(logits)  # (B, N, N, 2)
    onehot = np.stack([1.0 - a0, a0], axis=-1)
    n = a0.shape[-1]
    mask = _off_diag(n)[None, :, :, None]
    per = tn.mul(lsm, onehot * mask)
    count = a0.shape[0] * n * (n - 1)
    return tn.scale(tn.sum_(per), -1.0 / count)


def consistency_distance(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Per-instance L2 distance between edge-probability maps, averaged over the batch."""
    pa = tn.softmax(logits_a)[..., 1]
    pb = tn.softmax(logits_b)[..., 1]
    B, n = pa.shape[0], pa.shape[-1]
    diff = tn.mul(tn.sub(pa, pb), _off_diag(n)[None].astype(np.float64))
    sq = tn.sum_(tn.square(diff), axis=(1, 2))
    norms = tn.sqrt(sq)
    return tn.scale(tn.sum_(norms), 1.0 / B)


def loss(a0, pred_t: Tensor, pred_tk: Tensor, lam: float) -> LossTerms:
    a0 = np.asarray(a0, dtype=np.float64)
    if a0.ndim == 2:
        a0 = a0[None]
    for p in (pred_t, pred_tk):
        if p.shape != a0.shape + (2,):
            raise InputError(f"logits shape {p.shape} does not match targets {a0.shape}")
        if not np.all(np.isfinite(p.data)):
            raise TrainingError("non-finite logits passed to loss")
    ce_tk = cross_entropy(a0, pred_tk)
    ce_t = cross_entropy(a0, pred_t)
    cons = consistency_distance(pred_tk, pred_t)
    total = tn.add(tn.add(ce_tk, ce_t), tn.scale(cons, lam))
    return LossTerms(total, ce_tk.item(), ce_t.item(), cons.item())


def sample_steps(rng: np.random.Generator, size: int, T: int, k: int):
    t = rng.integers(1, T + 1, size=size)
    return t, np.minimum(t + k, T)


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(count)


def stack_batch(records: Sequence[DatasetRecord]):
    coords = np.stack([r.instance.coords for r in records])
    a0 = np.stack([tour_to_edge_matrix(r.optimal_tour) for r in records])
    return coords, a0


def compute_loss(params: ModelParams, coords, a0, schedule: NoiseSchedule, config: TrainingConfig, rng):
    B = coords.shape[0]
    t, tk = sample_steps(rng, B, config.T, config.k)
    a_t = np.stack([add_noise(a0[b], schedule, int(t[b]), rng) for b in range(B)])
    a_tk = np.stack([add_noise(a0[b], schedule, int(tk[b]), rng) for b in range(B)])
    # both noise levels go through the network as one batch
    logits = forward_logits(
        params,
        np.concatenate([coords, coords]),
        np.concatenate([a_t, a_tk]),
        np.concatenate([t, tk]),
    )
    pred_t = logits[:B]
    pred_tk = logits[B:]
    return loss(a0, pred_t, pred_tk, config.lam), t


def train_step(
    state: TrainState,
    batch: Sequence[DatasetRecord],
    schedule: NoiseSchedule,
    config: TrainingConfig,
    rng: Optional[np.random.Generator] = None,
) -> TrainState:
    if rng is None:
        rng = np.random.default_rng([config.seed, 2, state.step])
    coords, a0 = stack_batch(batch)
    params = state.params.params
    params.zero_grad()
    try:
        terms, t = compute_loss(state.params, coords, a0, schedule, config, rng)
    except TrainingError as exc:
        raise TrainingError(f"step {state.step}: {exc}") from None
    total = terms.total.item()
    if not math.isfinite(total):
        raise TrainingError(f"non-finite loss at step {state.step} (t={t.tolist()})")
    terms.total.backward()
    try:
        adam_step(params, params.grads(), state.optimizer, config.lr, config.beta1, config.beta2, config.eps)
    except TrainingError as exc:
        raise TrainingError(f"step {state.step} (t={t.tolist()}): {exc}") from None
    state.step += 1
    state.curve.append((state.step, terms.ce_tk, terms.ce_t, terms.consistency, total))
    return state


def _batches(dataset, config: TrainingConfig):
    n = len(dataset)
    epoch = 0
    while True:
        order = epoch_order(config.seed, epoch, n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < min(config.batch_size, n):
                break
            yield idx, [dataset[i] for i in idx]
        epoch += 1


class Plateau:
    """Early-stop rule on the moving mean of the total loss."""

    def __init__(self, window: int, patience: int, min_delta: float):
        self.window = window
        self.patience = patience
        self.min_delta = min_delta
        self.recent: List[float] = []
        self.best = math.inf
        self.since_best = 0

    def update(self, value: float) -> bool:
        self.recent.append(value)
        if len(self.recent) > self.window:
            self.recent.pop(0)
        if self.patience <= 0 or len(self.recent) < self.window:
            return False
        avg = sum(self.recent) / len(self.recent)
        if avg < self.best - self.min_delta:
            self.best = avg
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


def train(
    dataset: Sequence[DatasetRecord],
    config: TrainingConfig,
    model_config: Optional[ModelConfig] = None,
    params: Optional[ModelParams] = None,
    callback: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run up to ``config.steps`` updates; returns the final state with its loss curve."""
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    if params is None:
        model_config = model_config or ModelConfig(T=config.T)
        params = init_params(model_config, [config.seed, 0])
    if params.config.T != config.T:
        raise ConfigError(f"model T={params.config.T} but training T={config.T}")
    schedule = linear_beta_schedule(config.T)
    state = TrainState(params)
    plateau = Plateau(config.window, config.patience, config.min_delta)
    batches = _batches(dataset, config)
    for _ in range(config.steps):
        idx, batch = next(batches)
        try:
            train_step(state, batch, schedule, config)
        except TrainingError as exc:
            raise TrainingError(f"{exc}; batch instances {idx.tolist()}") from None
        if callback is not None:
            callback(state)
        if state.step % 100 == 0:
            log.info("step %d total %.5f", state.step, state.curve[-1][-1])
        if plateau.update(state.curve[-1][-1]):
            log.info("loss plateaued at step %d", state.step)
            break
    return state


def format_curve(curve) -> str:
    return "".join(f"{s},{a!r},{b!r},{c!r},{d!r}\n" for s, a, b, c, d in curve)
