"""Flow block and stack checks: exact likelihood, invertibility, orderings."""

import numpy as np
import pytest

from arflow import tensor as T
from arflow.decode import block_inverse, block_inverse_nocache, forward_np
from arflow.errors import ConfigError, NonFiniteError, ShapeError
from arflow.flow import FlowConfig, FlowStack, block_ordering, identity_readout
from arflow.optim import AdamW
from arflow.tensor import Tensor

LOG_TWO_PI = float(np.log(2.0 * np.pi))


def small_cfg(**kw):
    base = dict(num_positions=2, channels=1, layers_per_block=(2, 2), width=16, head_dim=16)
    base.update(kw)
    return FlowConfig(**base)


def constant_readout(stack: FlowStack, mu: float, sigma: float):
    """Force every block to x -> (x - mu) / sigma regardless of input."""
    a = stack.cfg.soft_clip
    c = stack.cfg.channels
    b_mu = a * np.arctanh(mu / a)
    b_sig = float(np.log(np.expm1(sigma - stack.cfg.sigma_floor)))
    for block in stack.blocks:
        block.params["head.w"].data[:] = 0.0
        block.params["head.b"].data[:c] = b_mu
        block.params["head.b"].data[c:] = b_sig
        block.params["sos"].data[:] = 0.0


def train_quick(stack: FlowStack, data: np.ndarray, steps: int, batch=128, lr=3e-3, seed=0):
    opt = AdamW(stack.params(), lr=lr, weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    params = stack.params()
    for _ in range(steps):
        idx = rng.integers(0, data.shape[0], batch)
        loss, _ = stack.nll_loss(Tensor(data[idx]))
        opt.zero_grad()
        T.backward(loss)
        gsq = sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)
        if gsq > 1.0:
            scale = 1.0 / np.sqrt(gsq)
            for p in params.values():
                if p.grad is not None:
                    p.grad *= scale
        opt.step()


def eval_nll(stack: FlowStack, data: np.ndarray) -> float:
    _, _, logp, finite = forward_np(stack, data)
    dims = stack.cfg.num_positions * stack.cfg.channels
    return float(-logp[finite].mean() / dims)


# ---- config and orderings -------------------------------------------------

def test_shallow_blocks_must_not_exceed_deep():
    with pytest.raises(ConfigError, match="deep"):
        small_cfg(layers_per_block=(2, 4))


def test_grid_must_tile_positions():
    with pytest.raises(ConfigError, match="grid"):
        small_cfg(num_positions=4, grid=(2, 3))


def test_block_ordering_alternation():
    cfg = small_cfg(num_positions=4, layers_per_block=(2, 2, 2))
    assert np.array_equal(block_ordering(cfg, 0), [0, 1, 2, 3])
    assert np.array_equal(block_ordering(cfg, 1), [3, 2, 1, 0])
    assert np.array_equal(block_ordering(cfg, 2), [0, 1, 2, 3])

    rev = small_cfg(num_positions=4, layers_per_block=(2, 2, 2), first_ordering_reversed=True)
    assert np.array_equal(block_ordering(rev, 0), [3, 2, 1, 0])
    assert np.array_equal(block_ordering(rev, 1), [0, 1, 2, 3])

    fixed = small_cfg(num_positions=4, layers_per_block=(2, 2, 2), alternate_orderings=False)
    for t in range(3):
        assert np.array_equal(block_ordering(fixed, t), [0, 1, 2, 3])


# ---- per-block Gaussian parameters ----------------------------------------

def test_fresh_head_gives_zero_mu_and_softplus_sigma(rng):
    stack = FlowStack(small_cfg(), seed=0)
    par = stack.blocks[0].af_params(Tensor(rng.standard_normal((2, 2, 1))))
    assert np.array_equal(par.mu.data, np.zeros((2, 2, 1)))
    expect = np.log(2.0) + stack.cfg.sigma_floor
    assert np.max(np.abs(par.sigma.data - expect)) < 1e-12


def test_mu_soft_bound_saturates(rng):
    stack = FlowStack(small_cfg(), seed=0)
    block = stack.blocks[0]
    block.params["head.b"].data[0] = 1e6
    par = block.af_params(Tensor(rng.standard_normal((1, 2, 1))))
    assert np.max(par.mu.data) <= 5.0
    assert np.max(par.mu.data) == pytest.approx(5.0, abs=1e-12)


def test_af_params_causal_in_slot_order(rng):
    stack = FlowStack(small_cfg(num_positions=5), seed=1)
    block = stack.blocks[0]  # natural ordering
    block.params["head.w"].data[:] = 0.3 * rng.standard_normal(block.params["head.w"].shape)
    x = rng.standard_normal((1, 5, 1))
    base = block.af_params(Tensor(x))
    bumped = x.copy()
    bumped[0, 2] += 1.0
    out = block.af_params(Tensor(bumped))
    assert np.array_equal(out.mu.data[0, :3], base.mu.data[0, :3])
    assert np.array_equal(out.sigma.data[0, :3], base.sigma.data[0, :3])
    assert not np.allclose(out.mu.data[0, 3:], base.mu.data[0, 3:])


def test_condition_on_shallow_block_rejected(rng):
    stack = FlowStack(small_cfg(num_classes=2), seed=0)
    cond = stack.embed_labels(np.array([0]))
    with pytest.raises(ConfigError, match="uncondition"):
        stack.blocks[1].af_params(Tensor(rng.standard_normal((1, 2, 1))), cond)


# ---- forward: closed-form cases and the Jacobian oracle --------------------

def test_constant_network_forward():
    stack = FlowStack(small_cfg(layers_per_block=(2,)), seed=0)
    constant_readout(stack, 0.5, 2.0)
    z, logdet, _ = stack.forward(Tensor(np.array([[[1.0], [2.0]]])))
    assert np.allclose(z.data, [[[0.25], [0.75]]], atol=1e-10)
    assert float(logdet.data[0]) == pytest.approx(-2.0 * np.log(2.0), abs=1e-10)


def test_identity_stack_is_identity(rng):
    stack = FlowStack(small_cfg(), seed=0)
    identity_readout(stack)
    x = rng.standard_normal((3, 2, 1))
    z, logdet, _ = stack.forward(Tensor(x))
    assert np.max(np.abs(z.data - x)) < 1e-9
    assert np.max(np.abs(logdet.data)) < 1e-9


def test_identity_stack_nll_is_gaussian_entropy(rng):
    stack = FlowStack(small_cfg(), seed=0)
    identity_readout(stack)
    x = rng.standard_normal((4096, 2, 1))
    _, _, logp, finite = forward_np(stack, x)
    nll = -logp[finite].mean() / 2.0
    assert abs(nll - (0.5 * LOG_TWO_PI + 0.5)) < 0.05


def dense_jacobian(stack: FlowStack, x0: np.ndarray, labels=None):
    """Rows of dz/dx via one backward pass per output coordinate."""
    d, c = stack.cfg.num_positions, stack.cfg.channels
    n = d * c
    x = Tensor(x0.reshape(1, d, c).copy(), requires_grad=True)
    z, logdet, _ = stack.forward(x, labels)
    jac = np.zeros((n, n))
    for i in range(n):
        onehot = np.zeros((1, d, c))
        onehot.reshape(-1)[i] = 1.0
        x.grad = None
        T.backward(T.sum_(T.mul(z, Tensor(onehot))))
        jac[i] = x.grad.reshape(-1)
    return jac, float(logdet.data[0])


@pytest.mark.parametrize("cfg_kw,labels", [
    (dict(num_positions=3, channels=1, layers_per_block=(2, 2)), None),
    (dict(num_positions=2, channels=2, layers_per_block=(2, 2, 2)), None),
    (dict(num_positions=3, channels=2, layers_per_block=(2, 2), num_classes=3), np.array([1])),
])
def test_analytic_logdet_matches_dense_jacobian(cfg_kw, labels, rng):
    stack = FlowStack(small_cfg(**cfg_kw), seed=2)
    # push heads off init so sigma actually varies with the input
    for block in stack.blocks:
        block.params["head.w"].data[:] = 0.3 * rng.standard_normal(block.params["head.w"].shape)
        block.params["head.b"].data[:] = 0.1 * rng.standard_normal(block.params["head.b"].shape)
    x0 = rng.standard_normal((cfg_kw["num_positions"], cfg_kw["channels"]))
    jac, logdet = dense_jacobian(stack, x0, labels)
    _, brute = np.linalg.slogdet(jac)
    assert abs(logdet - brute) < 1e-6


# ---- inversion --------------------------------------------------------------

def test_round_trip_both_directions(rng):
    stack = FlowStack(small_cfg(num_positions=4, layers_per_block=(2, 2, 2)), seed=3)
    for block in stack.blocks:
        block.params["head.w"].data[:] = 0.2 * rng.standard_normal(block.params["head.w"].shape)
    x = rng.standard_normal((8, 4, 1))
    z, _, _ = stack.forward(Tensor(x))
    back = stack.inverse(z.data)
    assert np.max(np.abs(back - x)) < 1e-8

    z0 = rng.standard_normal((8, 4, 1))
    x0 = stack.inverse(z0)
    z1, _, _ = stack.forward(Tensor(x0))
    assert np.max(np.abs(z1.data - z0)) < 1e-8


def test_constant_network_inverse_at_zero():
    stack = FlowStack(small_cfg(layers_per_block=(2,)), seed=0)
    constant_readout(stack, 0.5, 2.0)
    x = stack.inverse(np.zeros((1, 2, 1)))
    assert np.allclose(x, 0.5, atol=1e-10)


def test_cached_inverse_matches_nocache_reference(rng):
    stack = FlowStack(small_cfg(num_positions=5, num_classes=2), seed=4)
    block = stack.blocks[0]
    block.params["head.w"].data[:] = 0.2 * rng.standard_normal(block.params["head.w"].shape)
    z = rng.standard_normal((3, 5, 1))
    prefix = stack.embed_labels(np.array([0, 1, 2])).data
    fast, _ = block_inverse(block, z, prefix_c=prefix)
    slow = block_inverse_nocache(block, z, prefix_c=prefix)
    assert np.array_equal(fast, slow)


def test_sampling_is_deterministic(rng):
    stack = FlowStack(small_cfg(), seed=5)
    a = stack.sample(6, seed=11)
    b = stack.sample(6, seed=11)
    c = stack.sample(6, seed=12)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_identity_stack_samples_standard_normal():
    stack = FlowStack(small_cfg(num_positions=4), seed=0)
    identity_readout(stack)
    n = 4096
    s = stack.sample(n, seed=0).reshape(n, -1)
    assert np.max(np.abs(s.mean(axis=0))) < 4.0 / np.sqrt(n)
    assert np.max(np.abs(s.std(axis=0) - 1.0)) < 0.1


# ---- stack density and conditioning ----------------------------------------

def test_forward_np_matches_tensor_path(rng):
    stack = FlowStack(small_cfg(num_positions=3, layers_per_block=(2, 2), num_classes=2), seed=6)
    x = rng.standard_normal((4, 3, 1))
    labels = np.array([0, 1, 2, 0])
    z_t, logdet_t, _ = stack.forward(Tensor(x), labels)
    logp_t = stack.log_prob(Tensor(x), labels)
    z_n, logdet_n, logp_n, finite = forward_np(stack, x, labels)
    assert finite.all()
    assert np.allclose(z_t.data, z_n, atol=1e-12)
    assert np.allclose(logdet_t.data, logdet_n, atol=1e-12)
    assert np.allclose(logp_t.data, logp_n, atol=1e-12)


def test_nll_penalty_accounting(rng):
    x = rng.standard_normal((4, 2, 1))
    stack = FlowStack(small_cfg(norm_penalty=1e-2), seed=7)
    loss, aux = stack.nll_loss(Tensor(x))
    manual = sum(float(np.mean(l.data**2)) for l in aux["intermediates"])
    assert aux["penalty"] == pytest.approx(manual, rel=1e-12)
    assert float(loss.data) == pytest.approx(aux["nll_nats_per_dim"] + 1e-2 * manual, rel=1e-12)

    single = FlowStack(small_cfg(layers_per_block=(2,), norm_penalty=1e-2), seed=7)
    loss_s, aux_s = single.nll_loss(Tensor(x))
    assert aux_s["penalty"] == 0.0
    assert float(loss_s.data) == pytest.approx(aux_s["nll_nats_per_dim"], rel=1e-12)


def test_bits_per_dim_conversion(rng):
    stack = FlowStack(small_cfg(), seed=0)
    _, aux = stack.nll_loss(Tensor(rng.standard_normal((4, 2, 1))))
    assert aux["bits_per_dim"] == pytest.approx(aux["nll_nats_per_dim"] / np.log(2.0), rel=1e-12)


def test_labels_on_unconditional_stack_rejected(rng):
    stack = FlowStack(small_cfg(), seed=0)
    with pytest.raises(ConfigError, match="unconditional"):
        stack.forward(Tensor(rng.standard_normal((2, 2, 1))), np.array([0, 1]))


def test_label_range_validation():
    stack = FlowStack(small_cfg(num_classes=2), seed=0)
    stack.embed_labels(np.array([0, 1, 2]))  # 2 is the null row
    with pytest.raises(ConfigError, match="label"):
        stack.embed_labels(np.array([3]))


def test_condition_changes_only_the_deep_block(rng):
    stack = FlowStack(small_cfg(layers_per_block=(2, 2, 2), num_classes=2), seed=8)
    deep = stack.blocks[0]
    deep.params["head.w"].data[:] = 0.3 * rng.standard_normal(deep.params["head.w"].shape)
    x = rng.standard_normal((3, 2, 1))
    z0, _, inter0 = stack.forward(Tensor(x), np.array([0, 0, 0]))
    z1, _, inter1 = stack.forward(Tensor(x), np.array([1, 1, 1]))
    # density order runs shallow blocks first: their latents ignore the label
    for a, b in zip(inter0, inter1):
        assert np.array_equal(a.data, b.data)
    assert not np.allclose(z0.data, z1.data)


def test_nonfinite_input_raises(rng):
    stack = FlowStack(small_cfg(), seed=0)
    x = rng.standard_normal((1, 2, 1))
    x[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        stack.forward(Tensor(x))


def test_shape_validation(rng):
    stack = FlowStack(small_cfg(), seed=0)
    with pytest.raises(ShapeError):
        stack.blocks[0].af_params(Tensor(rng.standard_normal((1, 3, 1))))


# ---- fitted targets ----------------------------------------------------------

def test_fitted_diagonal_gaussian_matches_entropy(rng):
    data = (rng.standard_normal((20000, 2)) * np.array([1.0, 2.0]))[:, :, None]
    truth = 0.25 * (np.log(2 * np.pi * np.e) + np.log(2 * np.pi * np.e * 4.0))
    stack = FlowStack(FlowConfig(num_positions=2, channels=1, layers_per_block=(2,),
                                 width=32, head_dim=16), seed=3)
    train_quick(stack, data, steps=200)
    assert abs(eval_nll(stack, data[:4000]) - truth) < 0.05


def test_alternating_orderings_beat_forced_equal(rng):
    # direction-asymmetric target: x2 exogenous Gaussian, x1 a saturating
    # pushforward of x2 plus noise.  x1's marginal is bimodal, so forced
    # natural orderings leave a slot no affine block can fit; the alternated
    # reversed ordering sees x1 | x2, a smooth unimodal conditional
    n = 20000
    x2 = rng.standard_normal(n)
    x1 = 2.0 * np.tanh(2.0 * x2) + 0.15 * rng.standard_normal(n)
    data = np.stack([x1, x2], axis=1)[:, :, None]

    common = dict(num_positions=2, channels=1, layers_per_block=(2, 2), width=32, head_dim=16)
    alt = FlowStack(FlowConfig(**common, alternate_orderings=True), seed=1)
    fixed = FlowStack(FlowConfig(**common, alternate_orderings=False), seed=1)
    train_quick(alt, data, steps=300, lr=1e-3)
    train_quick(fixed, data, steps=300, lr=1e-3)
    nll_alt = eval_nll(alt, data[:4000])
    nll_fixed = eval_nll(fixed, data[:4000])
    assert nll_alt < nll_fixed - 0.3
    assert nll_alt < 0.75
