"""Guided-Gaussian rule checks against a grid-integration oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arflow.errors import ConfigError
from arflow.flow import FlowConfig, FlowStack
from arflow.guidance import (GuidanceSpec, combine, guided_gaussian,
                             legacy_linear_guidance, variance_ratio)

LOG_TWO_PI = float(np.log(2.0 * np.pi))


def _log_normal_pdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * LOG_TWO_PI


def tilt_grid(mu_c, sigma_c, mu_u, sigma_u, omega, points=4001):
    """Numerically normalized p_c^(1+w) p_u^(-w) and its first two moments."""
    spread = abs(mu_c - mu_u) * (1.0 + omega) + 12.0 * sigma_c
    x = np.linspace(mu_c - spread, mu_c + spread, points)
    logt = (1.0 + omega) * _log_normal_pdf(x, mu_c, sigma_c) - omega * _log_normal_pdf(x, mu_u, sigma_u)
    w = np.exp(logt - logt.max())
    z = np.trapezoid(w, x)
    dens = w / z
    mean = np.trapezoid(x * dens, x)
    var = np.trapezoid((x - mean) ** 2 * dens, x)
    return x, dens, mean, float(np.sqrt(var))


def test_worked_example_closed_form():
    mu, sigma = guided_gaussian(1.0, 1.0, 0.0, 2.0, 1.0)
    assert float(mu) == pytest.approx(8.0 / 7.0, abs=1e-12)
    assert float(sigma) == pytest.approx(1.0 / np.sqrt(1.75), abs=1e-12)


def test_worked_example_matches_grid_moments():
    mu, sigma = guided_gaussian(1.0, 1.0, 0.0, 2.0, 1.0)
    _, _, mean, std = tilt_grid(1.0, 1.0, 0.0, 2.0, 1.0)
    assert abs(float(mu) - mean) < 1e-6
    assert abs(float(sigma) - std) < 1e-6


def test_equal_sigmas_reduce_to_standard_rule_exactly():
    mu_c, mu_u, omega = 0.7, -0.3, 3.0
    mu, sigma = guided_gaussian(mu_c, 1.3, mu_u, 1.3, omega)
    assert float(mu) == mu_c + omega * (mu_c - mu_u)
    assert float(sigma) == 1.3


def test_clip_forces_standard_branch():
    # sigma_c > sigma_u: raw s = 4 clips to 1
    mu, sigma = guided_gaussian(1.0, 2.0, 0.0, 1.0, 2.0)
    assert float(mu) == 1.0 + 2.0 * 1.0
    assert float(sigma) == 2.0


def test_omega_zero_is_identity():
    mu, sigma = guided_gaussian(0.4, 0.9, -1.0, 1.7, 0.0)
    assert float(mu) == 0.4
    assert float(sigma) == 0.9
    mu2, sigma2, n = legacy_linear_guidance(0.4, 0.9, -1.0, 1.7, 0.0)
    assert (float(mu2), float(sigma2), n) == (0.4, 0.9, 0)


def test_continuity_at_clip_boundary():
    near, at = 1.0 - 1e-9, 1.0
    mu1, s1 = guided_gaussian(1.0, near, 0.0, 1.0, 2.0)
    mu2, s2 = guided_gaussian(1.0, at, 0.0, 1.0, 2.0)
    assert abs(float(mu1) - float(mu2)) < 1e-6
    assert abs(float(s1) - float(s2)) < 1e-6


def test_continuity_in_omega():
    base = guided_gaussian(1.0, 0.5, -0.5, 1.5, 2.0)
    bump = guided_gaussian(1.0, 0.5, -0.5, 1.5, 2.0 + 1e-9)
    assert abs(float(bump[0]) - float(base[0])) < 1e-6
    assert abs(float(bump[1]) - float(base[1])) < 1e-6


def test_variance_ratio_clips():
    assert variance_ratio(2.0, 1.0) == 1.0
    assert variance_ratio(1.0, 2.0) == 0.25


def test_nonpositive_sigma_rejected():
    with pytest.raises(ConfigError, match="positive"):
        guided_gaussian(0.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(ConfigError, match="positive"):
        guided_gaussian(0.0, 1.0, 0.0, -2.0, 1.0)


def test_negative_omega_rejected():
    with pytest.raises(ConfigError, match="omega"):
        guided_gaussian(0.0, 1.0, 0.0, 1.0, -0.5)
    with pytest.raises(ConfigError, match="omega"):
        GuidanceSpec(omega=-1.0, mode="proposed")


def test_spec_validation_and_block_filter():
    with pytest.raises(ConfigError, match="mode"):
        GuidanceSpec(omega=1.0, mode="extrapolate")
    off = GuidanceSpec()
    assert not off.active and not off.applies_to(0)
    deep_only = GuidanceSpec(omega=1.0, mode="proposed", blocks=(0,))
    assert deep_only.applies_to(0) and not deep_only.applies_to(1)
    everywhere = GuidanceSpec(omega=1.0, mode="proposed")
    assert everywhere.applies_to(3)


def test_legacy_floor_counts():
    # raw extrapolated scale 1 + 2*(1 - 2) = -1 -> floored
    mu, sigma, n = legacy_linear_guidance(1.0, 1.0, 0.0, 2.0, 2.0)
    assert float(mu) == 3.0
    assert float(sigma) == 1e-6
    assert n == 1

    arr = legacy_linear_guidance(np.zeros(4), np.full(4, 1.0),
                                 np.zeros(4), np.array([0.5, 1.0, 2.0, 4.0]), 2.0)
    assert arr[2] == 2  # two entries went nonpositive


def test_legacy_equals_proposed_when_sigmas_match():
    mu_p, sig_p = guided_gaussian(0.8, 1.1, -0.2, 1.1, 4.0)
    mu_l, sig_l, n = legacy_linear_guidance(0.8, 1.1, -0.2, 1.1, 4.0)
    assert float(mu_p) == float(mu_l)
    assert float(sig_p) == float(sig_l)
    assert n == 0


def test_combine_dispatch():
    prop = GuidanceSpec(omega=1.0, mode="proposed")
    mu, sigma, n = combine(prop, 1.0, 1.0, 0.0, 2.0)
    assert n == 0
    leg = GuidanceSpec(omega=2.0, mode="legacy")
    _, _, n2 = combine(leg, 1.0, 1.0, 0.0, 2.0)
    assert n2 == 1
    with pytest.raises(ConfigError, match="inactive"):
        combine(GuidanceSpec(), 1.0, 1.0, 0.0, 2.0)


scalars = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)
log_sigmas = st.floats(min_value=float(np.log(0.1)), max_value=float(np.log(3.0)))
omegas = st.floats(min_value=0.0, max_value=8.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(mu_c=scalars, mu_u=scalars, ls1=log_sigmas, ls2=log_sigmas, omega=omegas)
def test_guided_sigma_never_exceeds_conditional(mu_c, mu_u, ls1, ls2, omega):
    sigma_c, sigma_u = np.exp(ls1), np.exp(ls2)
    _, sigma = guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, omega)
    assert float(sigma) <= sigma_c * (1.0 + 1e-15)


@settings(max_examples=60, deadline=None)
@given(mu_c=scalars, mu_u=scalars, ls1=log_sigmas, ls2=log_sigmas, omega=omegas)
def test_guided_precision_identity(mu_c, mu_u, ls1, ls2, omega):
    # with s <= 1 the guided precision is the tilted combination of precisions
    sigma_c, sigma_u = sorted([np.exp(ls1), np.exp(ls2)])
    _, sigma = guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, omega)
    lhs = 1.0 / float(sigma) ** 2
    rhs = (1.0 + omega) / sigma_c**2 - omega / sigma_u**2
    assert lhs == pytest.approx(rhs, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(mu_c=scalars, mu_u=scalars, ls1=log_sigmas, ls2=log_sigmas, omega=omegas)
def test_tilt_density_identity_pointwise(mu_c, mu_u, ls1, ls2, omega):
    sigma_c, sigma_u = sorted([np.exp(ls1), np.exp(ls2)])
    mu, sigma = guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, omega)
    x, dens, _, _ = tilt_grid(mu_c, sigma_c, mu_u, sigma_u, omega)
    closed = np.exp(_log_normal_pdf(x, float(mu), float(sigma)))
    keep = dens > dens.max() * 1e-30
    rel = np.abs(closed[keep] - dens[keep]) / np.maximum(dens[keep], closed[keep])
    assert float(rel.max()) < 1e-6


# ---- stack-level behavior ----------------------------------------------------

def _toy_conditional_stack(rng):
    stack = FlowStack(FlowConfig(num_positions=3, channels=1, layers_per_block=(2, 2),
                                 width=16, head_dim=16, num_classes=2), seed=9)
    deep = stack.blocks[0]
    deep.params["head.w"].data[:] = 0.3 * rng.standard_normal(deep.params["head.w"].shape)
    stack.class_embed.data[:] = rng.standard_normal(stack.class_embed.shape)
    return stack


def test_omega_zero_sampling_matches_plain_conditional(rng):
    stack = _toy_conditional_stack(rng)
    labels = np.array([0, 1])
    plain = stack.sample(2, labels=labels, seed=4)
    guided = stack.sample(2, labels=labels, seed=4,
                          guidance=GuidanceSpec(omega=0.0, mode="proposed"))
    assert np.array_equal(plain, guided)


def test_inactive_mode_runs_single_decoder(rng):
    stack = _toy_conditional_stack(rng)
    labels = np.array([0, 1])
    d = stack.cfg.num_positions
    _, info_plain = stack.sample(2, labels=labels, seed=4, collect_info=True)
    _, info_guided = stack.sample(2, labels=labels, seed=4, collect_info=True,
                                  guidance=GuidanceSpec(omega=0.0, mode="proposed"))
    # guidance doubles decoder work on the conditioned deep block only
    assert info_plain["decoder_steps"] == [d, d]
    assert info_guided["decoder_steps"] == [2 * d, d]
    assert info_guided["sigma_floor_hits"] == 0


def test_guidance_requires_conditional_stack(rng):
    stack = FlowStack(FlowConfig(num_positions=2, channels=1, layers_per_block=(2,),
                                 width=16, head_dim=16), seed=0)
    with pytest.raises(ConfigError, match="conditional"):
        stack.sample(1, guidance=GuidanceSpec(omega=1.0, mode="proposed"), seed=0)
