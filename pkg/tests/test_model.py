import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deitsp import tensor as tn
from deitsp.diffusion import sample_uniform_state
from deitsp.errors import ConfigError, InputError, ParseError
from deitsp.model import (
    ModelConfig,
    classify,
    dml_layer,
    embed_inputs,
    forward,
    forward_batch,
    init_params,
    load_model,
    save_model,
    timestep_encoding,
)
from deitsp.tsp import generate_uniform_instance

from _oracles import model_gradient_check

SMALL = ModelConfig(layers=2, dim=16, heads=2, T=100)


@pytest.fixture(scope="module")
def mp():
    return init_params(SMALL, 3)


def _inputs(n, seed):
    return generate_uniform_instance(n, seed), sample_uniform_state(n, [seed, 9])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(dim=12, heads=4)  # 8 norm groups
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)
    assert ModelConfig.full_scale() == ModelConfig(layers=6, dim=256, heads=8)


def test_embedding_shapes(mp):
    inst, a = _inputs(7, 0)
    h, x, t_hat = embed_inputs(mp, inst, a, 5)
    assert h.shape == (7, 16) and x.shape == (7, 7, 16) and t_hat.shape == (16,)


def test_zero_weights_zero_embeddings():
    mp = init_params(SMALL, 0)
    for name in ("node", "edge", "time"):
        for part in ("W", "b"):
            mp[f"embed.{name}.{part}"].data = np.zeros_like(mp[f"embed.{name}.{part}"].data)
    inst, a = _inputs(5, 1)
    for z in embed_inputs(mp, inst, a, 50):
        assert not np.any(z.data)


def test_timestep_encoding_distinct():
    table = timestep_encoding(np.arange(1, 1001), 64)
    # each row differs from its neighbours (and so from all others) by > 1e-6 somewhere
    diffs = np.abs(table[:, None, :] - table[None, :, :]).max(-1)
    np.fill_diagonal(diffs, np.inf)
    assert diffs.min() > 1e-6


def test_step_range_checked(mp):
    inst, a = _inputs(5, 0)
    with pytest.raises(InputError):
        forward(mp, inst, a, 0)
    with pytest.raises(InputError):
        forward(mp, inst, a, SMALL.T + 1)


def test_layer_preserves_shapes(mp):
    inst, a = _inputs(6, 2)
    h, x, t_hat = embed_inputs(mp, inst, a, 10)
    h2, x2 = dml_layer(mp.layer(0), SMALL, h.reshape(1, 6, 16), x.reshape(1, 6, 6, 16), t_hat.reshape(1, 16))
    assert h2.shape == (1, 6, 16) and x2.shape == (1, 6, 6, 16)


def _mha_reference(lp, h, heads):
    """Plain multi-head attention plus the node FFN branch, written without the engine."""
    B, N, d = h.shape
    dh = d // heads
    q = (h @ lp["Q"].data).reshape(B, N, heads, dh)
    k = (h @ lp["K"].data).reshape(B, N, heads, dh)
    v = (h @ lp["V"].data).reshape(B, N, heads, dh)
    s = np.einsum("bihc,bjhc->bhij", q, k) / np.sqrt(dh)
    s = np.exp(s - s.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    agg = np.einsum("bhij,bjhc->bihc", s, v).reshape(B, N, d)
    mu = agg.mean(-1, keepdims=True)
    z = (agg - mu) / np.sqrt(agg.var(-1, keepdims=True) + 1e-5)
    z = z * lp["node_norm.g"].data + lp["node_norm.b"].data
    z = np.maximum(z @ lp["Wh1"].data + lp["bh1"].data, 0) @ lp["Wh2"].data + lp["bh2"].data
    return z + h


def test_zero_mixing_reduces_to_attention():
    mp = init_params(SMALL, 5)
    lp = mp.layer(0)
    lp["We1"].data = np.zeros_like(lp["We1"].data)
    lp["We2"].data = np.zeros_like(lp["We2"].data)
    inst, a = _inputs(6, 4)
    h, x, t_hat = embed_inputs(mp, inst, a, 10)
    h2, _ = dml_layer(lp, SMALL, h.reshape(1, 6, 16), x.reshape(1, 6, 6, 16), t_hat.reshape(1, 16))
    ref = _mha_reference(lp, h.data.reshape(1, 6, 16), SMALL.heads)
    assert np.max(np.abs(h2.data - ref)) < 1e-12


def test_classifier_outputs(mp):
    x = tn.Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 16)))
    logits = classify(mp, x).data
    assert logits.shape == (2, 5, 5, 2) and np.all(np.isfinite(logits))


def test_forward_heatmap_properties(mp):
    inst, a = _inputs(9, 3)
    p = forward(mp, inst, a, 42)
    assert p.shape == (9, 9)
    assert np.all((p >= 0) & (p <= 1)) and np.all(np.diag(p) == 0)
    assert np.array_equal(p, forward(mp, inst, a, 42))


def test_init_not_saturated():
    for seed in range(3):
        mp = init_params(ModelConfig(), seed)
        inst, a = _inputs(10, seed)
        p = forward(mp, inst, a, 500)
        off = p[~np.eye(10, dtype=bool)]
        assert np.all((off > 1e-6) & (off < 1 - 1e-6))


def test_init_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(init_params(SMALL, 8), a)
    save_model(init_params(SMALL, 8), b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_round_trip(tmp_path, mp):
    p = tmp_path / "m.ckpt"
    save_model(mp, p)
    back = load_model(p)
    assert back.config == SMALL
    inst, a = _inputs(6, 1)
    assert np.array_equal(forward(back, inst, a, 7), forward(mp, inst, a, 7))
    save_model(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_config_mismatch(tmp_path, mp):
    # header claims a bigger model than the stored tensors
    header = b'{"dim": 32, "ffn_mult": 2, "heads": 2, "layers": 2, "T": 100}'
    (tmp_path / "bad.ckpt").write_bytes(tn.encode_checkpoint(mp.params, header))
    with pytest.raises(ParseError):
        load_model(tmp_path / "bad.ckpt")


def test_batch_matches_single(mp):
    insts = [_inputs(7, s) for s in range(3)]
    coords = np.stack([i.coords for i, _ in insts])
    a = np.stack([x for _, x in insts])
    batch = forward_batch(mp, coords, a, np.array([3, 50, 99]))
    for k, (inst, at) in enumerate(insts):
        single = forward(mp, inst, at, [3, 50, 99][k])
        assert np.allclose(batch[k], single, rtol=0, atol=1e-14)


@settings(max_examples=10)
@given(st.integers(0, 2**31), st.integers(4, 9))
def test_permutation_equivariance(seed, n):
    mp = init_params(SMALL, 1)
    inst, a = _inputs(n, seed)
    perm = np.random.default_rng(seed).permutation(n)
    p = forward(mp, inst, a, 33)
    q = forward(mp, inst.permuted(perm), a[np.ix_(perm, perm)], 33)
    assert np.allclose(q, p[np.ix_(perm, perm)], rtol=1e-8, atol=1e-14)


def test_gradient_sampled_entries():
    # the full sweep over every entry runs in the acceptance suite
    errors = model_gradient_check(max_entries=3)
    assert max(errors.values()) < 1e-4
