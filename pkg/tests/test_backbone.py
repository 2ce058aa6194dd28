"""Rotary positions, causal attention, and backbone forward checks."""

import numpy as np
import pytest

from arflow import tensor as T
from arflow.backbone import (BackboneConfig, backbone_forward, causal_attention,
                             causal_mask, grid_positions, init_backbone_params,
                             prefix_positions, rope_angles, rope_rotate_np, rope_tables)
from arflow.errors import ConfigError, ShapeError
from arflow.tensor import Tensor


def small_cfg(num_layers=2, width=16, in_dim=2, **kw):
    return BackboneConfig(num_layers=num_layers, width=width, in_dim=in_dim,
                          head_dim=16, **kw)


def test_rope_identity_at_origin(rng):
    cfg = small_cfg()
    q = rng.standard_normal((1, cfg.head_dim))
    tables = rope_tables(cfg, np.zeros((1, 3)))
    out = rope_rotate_np(q, *tables)
    assert np.array_equal(out, q)


def test_rope_alpha_rescale_exact():
    cfg1 = small_cfg(rope_alpha=1.0)
    cfg2 = small_cfg(rope_alpha=2.0)
    pos = grid_positions(3, 4)
    assert np.array_equal(rope_angles(cfg2, pos * np.array([2.0, 2.0, 1.0])),
                          rope_angles(cfg1, pos))


def test_rope_time_axis_never_scaled():
    pos = prefix_positions(5)
    a1 = rope_angles(small_cfg(rope_alpha=1.0), pos)
    a8 = rope_angles(small_cfg(rope_alpha=8.0), pos)
    assert np.array_equal(a1, a8)


def test_rope_is_isometric_per_pair(rng):
    cfg = small_cfg()
    pos = grid_positions(2, 3)
    q = rng.standard_normal((pos.shape[0], cfg.head_dim))
    out = rope_rotate_np(q, *rope_tables(cfg, pos))
    norms_in = np.linalg.norm(q.reshape(pos.shape[0], -1, 2), axis=-1)
    norms_out = np.linalg.norm(out.reshape(pos.shape[0], -1, 2), axis=-1)
    assert np.max(np.abs(norms_in - norms_out)) < 1e-12


def test_odd_rope_slice_rejected():
    with pytest.raises(ConfigError, match="rotary"):
        BackboneConfig(num_layers=1, width=8, in_dim=2, head_dim=8)


def test_width_head_dim_divisibility():
    with pytest.raises(ConfigError, match="divisible"):
        BackboneConfig(num_layers=1, width=24, in_dim=2, head_dim=16)


def test_causal_mask_layout():
    m = causal_mask(4)
    assert np.all(m[np.triu_indices(4, k=1)] == -np.inf)
    assert np.all(m[np.tril_indices(4)] == 0.0)


def test_single_token_attention_is_value_path(rng):
    cfg = small_cfg(num_layers=1)
    params = init_backbone_params(cfg, rng)
    lp = {k.removeprefix("layers.00."): v for k, v in params.items()
          if k.startswith("layers.00.attn")}
    h = Tensor(rng.standard_normal((1, 1, cfg.width)))
    out = causal_attention(cfg, lp, h)
    expect = (h @ lp["attn.wv"]) @ lp["attn.wo"]
    assert np.allclose(out.data, expect.data, atol=1e-12)


def test_attention_probs_lower_triangular(rng):
    cfg = small_cfg(num_layers=1)
    params = init_backbone_params(cfg, rng)
    lp = {k.removeprefix("layers.00."): v for k, v in params.items()
          if k.startswith("layers.00.attn")}
    h = Tensor(rng.standard_normal((1, 5, cfg.width)))
    _, probs = causal_attention(cfg, lp, h, return_probs=True)
    p = probs.data[0]  # [heads, S, S]
    for head in range(p.shape[0]):
        assert np.all(p[head][np.triu_indices(5, k=1)] == 0.0)
        assert np.allclose(p[head].sum(axis=-1), 1.0, atol=1e-12)


def test_causality_by_perturbation(rng):
    cfg = small_cfg()
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(1, 5)
    x = rng.standard_normal((5, cfg.in_dim))
    base = backbone_forward(cfg, params, Tensor(x), pos).data
    bumped = x.copy()
    bumped[3] += 0.5
    out = backbone_forward(cfg, params, Tensor(bumped), pos).data
    assert np.array_equal(out[:3], base[:3])
    assert not np.allclose(out[3:], base[3:])


def test_causality_by_autodiff(rng):
    cfg = small_cfg(num_layers=1)
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(1, 4)
    x = Tensor(rng.standard_normal((4, cfg.in_dim)), requires_grad=True)
    out = backbone_forward(cfg, params, x, pos)
    T.backward(T.sum_(T.narrow(out, 0, 1, 1)))
    assert np.any(x.grad[:2] != 0.0)
    assert np.all(x.grad[2:] == 0.0)


def test_zero_length_prefix_is_bitwise_noop(rng):
    cfg = small_cfg()
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(2, 2)
    x = rng.standard_normal((4, cfg.in_dim))
    a = backbone_forward(cfg, params, Tensor(x), pos).data
    b = backbone_forward(cfg, params, Tensor(x), pos,
                         prefix=Tensor(np.zeros((0, cfg.in_dim)))).data
    assert np.array_equal(a, b)


def test_prefix_reaches_every_position(rng):
    cfg = small_cfg()
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(2, 2)
    x = rng.standard_normal((4, cfg.in_dim))
    pre = rng.standard_normal((2, cfg.in_dim))
    a = backbone_forward(cfg, params, Tensor(x), pos, prefix=Tensor(pre)).data
    b = backbone_forward(cfg, params, Tensor(x), pos, prefix=Tensor(pre + 1.0)).data
    assert a.shape == (4, cfg.width)
    assert np.all(np.any(a != b, axis=-1))


def test_zero_layer_backbone_is_projection_plus_norm(rng):
    cfg = small_cfg(num_layers=0)
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(1, 3)
    x = rng.standard_normal((3, cfg.in_dim))
    out = backbone_forward(cfg, params, Tensor(x), pos).data
    proj = x @ params["in_proj.w"].data
    expect = T.rmsnorm(Tensor(proj), params["final_norm.gain"], cfg.rmsnorm_eps).data
    assert np.array_equal(out, expect)


def test_position_length_mismatch(rng):
    cfg = small_cfg()
    params = init_backbone_params(cfg, rng)
    with pytest.raises(ShapeError, match="positions"):
        backbone_forward(cfg, params, Tensor(rng.standard_normal((4, cfg.in_dim))),
                         grid_positions(1, 3))


def test_batched_matches_unbatched(rng):
    cfg = small_cfg()
    params = init_backbone_params(cfg, rng)
    pos = grid_positions(1, 4)
    xs = rng.standard_normal((3, 4, cfg.in_dim))
    batched = backbone_forward(cfg, params, Tensor(xs), pos).data
    for i in range(3):
        single = backbone_forward(cfg, params, Tensor(xs[i]), pos).data
        assert np.array_equal(batched[i], single)


def test_init_is_deterministic():
    cfg = small_cfg()
    p1 = init_backbone_params(cfg, np.random.default_rng(7))
    p2 = init_backbone_params(cfg, np.random.default_rng(7))
    assert sorted(p1) == sorted(p2)
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)


def test_grid_and_prefix_positions():
    pos = grid_positions(2, 3)
    assert pos.shape == (6, 3)
    assert np.all(pos[:, 2] == 0.0)  # image tokens carry t = 0
    assert np.array_equal(pos[:3, 0], [0, 1, 2])
    assert np.array_equal(pos[:3, 1], [0, 0, 0])
    pre = prefix_positions(3)
    assert np.all(pre[:, :2] == 0.0)
    assert np.array_equal(pre[:, 2], [1, 2, 3])
