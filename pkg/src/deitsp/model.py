"""Dual-modality graph transformer denoiser.

Tensor layout is channel-last and batched:

* node states ``h``: (B, N, d)
* edge states ``x``: (B, N, N, d)
* time state: (B, d)

Each layer computes per-head pair scores from the node stream, mixes them
with the edge stream in both directions, and injects the time embedding into
the edge stream only. No positional encoding is placed on nodes or edges, so
the network is exactly permutation equivariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from functools import lru_cache
from typing import Tuple

import numpy as np

from . import tensor as tn
from .data_io import atomic_write
from .errors import ConfigError, InputError, ParseError, ShapeError
from .tensor import ParameterSet, Tensor
from .tsp import TspInstance

GN_GROUPS = 8


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    dim: int = 64
    heads: int = 4
    T: int = 1000
    ffn_mult: int = 2

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.heads < 1 or self.ffn_mult < 1:
            raise ConfigError(f"model sizes must be positive: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % GN_GROUPS:
            raise ConfigError(f"dim {self.dim} not divisible by {GN_GROUPS} norm groups")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")

    @classmethod
    def full_scale(cls, T: int = 1000) -> "ModelConfig":
        return cls(layers=6, dim=256, heads=8, T=T)


class ModelParams:
    """Config plus the flat, ordered parameter set."""

    def __init__(self, config: ModelConfig, params: ParameterSet):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def layer(self, l: int) -> "LayerView":
        return LayerView(self.params, f"layer{l}.")


class LayerView:
    def __init__(self, params: ParameterSet, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name) -> Tensor:
        return self.params[self.prefix + name]


def _param_shapes(config: ModelConfig):
    d, H = config.dim, config.heads
    f = config.ffn_mult * d
    shapes = [
        ("embed.node.W", (2, d)),
        ("embed.node.b", (d,)),
        ("embed.edge.W", (1, d)),
        ("embed.edge.b", (d,)),
        ("embed.time.W", (d, d)),
        ("embed.time.b", (d,)),
    ]
    for l in range(config.layers):
        p = f"layer{l}."
        shapes += [
            (p + "Q", (d, d)),
            (p + "K", (d, d)),
            (p + "V", (d, d)),
            (p + "We1", (d, H)),
            (p + "We2", (d, H)),
            (p + "Wy1", (H, d)),
            (p + "Wy2", (H, d)),
            (p + "Wt", (d, d)),
            (p + "bt", (d,)),
            (p + "node_norm.g", (d,)),
            (p + "node_norm.b", (d,)),
            (p + "Wh1", (d, f)),
            (p + "bh1", (f,)),
            (p + "Wh2", (f, d)),
            (p + "bh2", (d,)),
            (p + "edge_norm.g", (d,)),
            (p + "edge_norm.b", (d,)),
            (p + "Wx1", (d, f)),
            (p + "bx1", (f,)),
            (p + "Wx2", (f, d)),
            (p + "bx2", (d,)),
        ]
    shapes += [
        ("head.gn.g", (d,)),
        ("head.gn.b", (d,)),
        ("head.conv1.W", (d, d)),
        ("head.conv1.b", (d,)),
        ("head.conv2.W", (2, d)),
        ("head.conv2.b", (2,)),
    ]
    return shapes


def init_params(config: ModelConfig, seed) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm scales."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_params needs a ModelConfig")
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape in _param_shapes(config):
        if len(shape) == 1:
            value = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            # conv weights are (out, in); dense weights are (in, out)
            fan_in = shape[1] if name.startswith("head.conv") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params.add(name, value)
    return ModelParams(config, params)


# --------------------------------------------------------------- embedding


def timestep_encoding(t, dim: int) -> np.ndarray:
    """Sinusoidal encoding of integer steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        enc = np.concatenate([enc, np.zeros((t.size, 1))], axis=-1)
    return enc


@lru_cache(maxsize=8)
def _encoding_table(T: int, dim: int) -> np.ndarray:
    table = timestep_encoding(np.arange(T + 1), dim)
    table.setflags(write=False)
    return table


def _check_steps(t, T):
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1) or np.any(t > T) or np.any(t != np.round(t)):
        raise InputError(f"t must be integers in [1, {T}], got {t.tolist()}")
    return t.astype(np.int64)


def embed_batch(mp: ModelParams, coords, a_t, t):
    cfg = mp.config
    coords = np.asarray(coords, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"coords must be (B, N, 2), got {coords.shape}")
    B, N, _ = coords.shape
    if a_t.shape != (B, N, N):
        raise ShapeError(f"a_t must be {(B, N, N)}, got {a_t.shape}")
    steps = _check_steps(t, cfg.T)
    if steps.size == 1 and B > 1:
        steps = np.repeat(steps, B)
    if steps.shape != (B,):
        raise ShapeError(f"need one step per batch element, got {steps.shape}")
    h = tn.linear(Tensor(coords), mp["embed.node.W"], mp["embed.node.b"])
    x = tn.linear(Tensor(a_t[..., None]), mp["embed.edge.W"], mp["embed.edge.b"])
    pe = tn.embedding_lookup(Tensor(_encoding_table(cfg.T, cfg.dim)), steps)
    t_hat = tn.linear(pe, mp["embed.time.W"], mp["embed.time.b"])
    return h, x, t_hat


def embed_inputs(mp: ModelParams, instance: TspInstance, a_t, t) -> Tuple[Tensor, Tensor, Tensor]:
    """Unbatched embedding: h0 (N, d), x0 (N, N, d), t_hat (d,)."""
    h, x, t_hat = embed_batch(mp, instance.coords[None], np.asarray(a_t)[None], [t])
    return h[0], x[0], t_hat[0]


# ------------------------------------------------------------------- layer


def dml_layer(lp: LayerView, cfg: ModelConfig, h: Tensor, x: Tensor, t_hat: Tensor):
    """One dual-modal layer on batched states; returns (h_next, x_next)."""
    B, N, d = h.shape
    if x.shape != (B, N, N, d) or t_hat.shape != (B, d):
        raise ShapeError(f"inconsistent states h={h.shape} x={x.shape} t={t_hat.shape}")
    H = cfg.heads
    dh = d // H

    def heads(z):
        return tn.transpose(tn.reshape(z, (B, N, H, dh)), (0, 2, 1, 3))  # (B, H, N, dh)

    q = heads(tn.linear(h, lp["Q"]))
    k = heads(tn.linear(h, lp["K"]))
    v = heads(tn.linear(h, lp["V"]))
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    w_hat = tn.transpose(scores, (0, 2, 3, 1))  # (B, N, N, H)

    # node path: edge-aware attention weights, aggregate, norm -> FFN -> residual
    mix = tn.mul(tn.linear(x, lp["We1"]), w_hat)
    mix = tn.add(tn.add(mix, tn.linear(x, lp["We2"])), w_hat)
    attn = tn.softmax(tn.transpose(mix, (0, 3, 1, 2)))  # over j, (B, H, N, N)
    agg = tn.matmul(attn, v)  # (B, H, N, dh)
    h_hat = tn.reshape(tn.transpose(agg, (0, 2, 1, 3)), (B, N, d))
    z = tn.layer_norm(h_hat, lp["node_norm.g"], lp["node_norm.b"])
    z = tn.linear(tn.relu(tn.linear(z, lp["Wh1"], lp["bh1"])), lp["Wh2"], lp["bh2"])
    h_next = tn.add(z, h)

    # edge path: score-aware edge update plus time injection
    x_hat = tn.mul(tn.linear(w_hat, lp["Wy1"]), x)
    x_hat = tn.add(tn.add(x_hat, tn.linear(w_hat, lp["Wy2"])), x)
    t_inj = tn.linear(tn.sigmoid(t_hat), lp["Wt"], lp["bt"])
    x_hat = tn.add(x_hat, tn.reshape(t_inj, (B, 1, 1, d)))
    z = tn.layer_norm(x_hat, lp["edge_norm.g"], lp["edge_norm.b"])
    z = tn.linear(tn.relu(tn.linear(z, lp["Wx1"], lp["bx1"])), lp["Wx2"], lp["bx2"])
    x_next = tn.add(z, x)
    return h_next, x_next


def classify(mp: ModelParams, x: Tensor) -> Tensor:
    """Edge states (B, N, N, d) -> two-class logits (B, N, N, 2)."""
    B, N, _, d = x.shape
    flat = tn.reshape(x, (B, N * N, d))
    z = tn.group_norm(flat, GN_GROUPS, mp["head.gn.g"], mp["head.gn.b"])
    z = tn.sigmoid(tn.pointwise_conv1d(z, mp["head.conv1.W"], mp["head.conv1.b"]))
    z = tn.pointwise_conv1d(z, mp["head.conv2.W"], mp["head.conv2.b"])
    return tn.reshape(z, (B, N, N, 2))


def forward_logits(mp: ModelParams, coords, a_t, t) -> Tensor:
    h, x, t_hat = embed_batch(mp, coords, a_t, t)
    for l in range(mp.config.layers):
        h, x = dml_layer(mp.layer(l), mp.config, h, x, t_hat)
    return classify(mp, x)


def logits_to_heatmap(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e[..., 1] / e.sum(axis=-1)
    n = p.shape[-1]
    p = p * ~np.eye(n, dtype=bool)
    return p


def forward(mp: ModelParams, instance: TspInstance, a_t, t: int) -> np.ndarray:
    """Heatmap (N, N): probability each edge is in the tour, zero diagonal."""
    logits = forward_logits(mp, instance.coords[None], np.asarray(a_t)[None], [t])
    return logits_to_heatmap(logits.data[0])


def forward_batch(mp: ModelParams, coords, a_t, t) -> np.ndarray:
    return logits_to_heatmap(forward_logits(mp, coords, a_t, t).data)


# -------------------------------------------------------------- checkpoint


def save_model(mp: ModelParams, path):
    header = json.dumps(asdict(mp.config), sort_keys=True).encode("utf-8")
    atomic_write(path, tn.encode_checkpoint(mp.params, header))


def load_model(path) -> ModelParams:
    header, params = tn.decode_checkpoint(Path(path).read_bytes())
    try:
        config = ModelConfig(**json.loads(header.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad model config header: {exc}") from None
    expected = _param_shapes(config)
    got = [(k, t.shape) for k, t in params.items()]
    if got != expected:
        raise ParseError("checkpoint parameters do not match its config header")
    return ModelParams(config, params)
