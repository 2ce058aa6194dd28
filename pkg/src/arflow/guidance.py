"""Classifier-free guidance rules for Gaussian conditionals.

The proposed rule is the renormalized product p_c^(1+w) * p_u^(-w) of two
Gaussians, which is itself Gaussian whenever the combined precision stays
positive.  Clipping the conditional-to-unconditional variance ratio at 1
guarantees that for every guidance weight w >= 0, and keeps the guided scale
at or below the conditional scale (mode seeking, never mode spreading).

The legacy rule extrapolates mean and scale linearly and needs a floor to
keep the scale positive; floor activations are counted so callers can see
when it failed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("none", "proposed", "legacy")
LEGACY_SIGMA_FLOOR = 1e-6


@dataclass
class GuidanceSpec:
    """Guidance weight, combination rule, and an optional per-block toggle.

    blocks=None guides every conditioned block; otherwise only the listed
    block indices are guided (the rest run a single conditional pass).
    """

    omega: float = 0.0
    mode: str = "none"
    blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"guidance mode must be one of {MODES}, got '{self.mode}'")
        if self.omega < 0:
            raise ConfigError("guidance weight omega must be >= 0")

    @property
    def active(self) -> bool:
        return self.mode != "none"

    def applies_to(self, block_index: int) -> bool:
        if not self.active:
            return False
        return self.blocks is None or block_index in self.blocks


def variance_ratio(sigma_c, sigma_u) -> np.ndarray:
    """Conditional/unconditional variance ratio, clipped into [0, 1]."""
    s = np.square(sigma_c) / np.square(sigma_u)
    return np.clip(s, 0.0, 1.0)


def guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, omega: float):
    """Closed-form guided Gaussian (mu, sigma), elementwise over arrays.

    With s = clip(sigma_c^2 / sigma_u^2, 0, 1):
        mu    = mu_c + (w s / (1 + w - w s)) (mu_c - mu_u)
        sigma = sigma_c / sqrt(1 + w - w s)
    s == 1 reduces to the standard rule mu_c + w (mu_c - mu_u) with
    unchanged sigma; the guided sigma never exceeds sigma_c.
    """
    if omega < 0:
        raise ConfigError("guidance weight omega must be >= 0")
    mu_c = np.asarray(mu_c, dtype=np.float64)
    sigma_c = np.asarray(sigma_c, dtype=np.float64)
    mu_u = np.asarray(mu_u, dtype=np.float64)
    sigma_u = np.asarray(sigma_u, dtype=np.float64)
    if np.any(sigma_c <= 0) or np.any(sigma_u <= 0):
        raise ConfigError("guidance requires strictly positive scales")
    s = variance_ratio(sigma_c, sigma_u)
    denom = 1.0 + omega - omega * s
    # at s == 1 the rule must reduce to the standard extrapolation exactly
    # (not merely to rounding), so that branch is taken literally
    mu = np.where(s == 1.0, mu_c + omega * (mu_c - mu_u),
                  mu_c + (omega * s / denom) * (mu_c - mu_u))
    sigma = np.where(s == 1.0, sigma_c, sigma_c / np.sqrt(denom))
    return mu, sigma


def legacy_linear_guidance(mu_c, sigma_c, mu_u, sigma_u, omega: float,
                           floor: float = LEGACY_SIGMA_FLOOR):
    """Linear extrapolation of mean and scale; returns (mu, sigma, n_floored).

    The extrapolated scale can go nonpositive at large omega; it is floored
    and the number of floored entries reported.
    """
    if omega < 0:
        raise ConfigError("guidance weight omega must be >= 0")
    mu_c = np.asarray(mu_c, dtype=np.float64)
    sigma_c = np.asarray(sigma_c, dtype=np.float64)
    mu_u = np.asarray(mu_u, dtype=np.float64)
    sigma_u = np.asarray(sigma_u, dtype=np.float64)
    mu = mu_c + omega * (mu_c - mu_u)
    sigma = sigma_c + omega * (sigma_c - sigma_u)
    n_floored = int(np.count_nonzero(sigma < floor))
    sigma = np.maximum(sigma, floor)
    return mu, sigma, n_floored


def combine(spec: GuidanceSpec, mu_c, sigma_c, mu_u, sigma_u):
    """Apply the spec's rule to one decode step; returns (mu, sigma, n_floored)."""
    if spec.mode == "proposed":
        mu, sigma = guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, spec.omega)
        return mu, sigma, 0
    if spec.mode == "legacy":
        return legacy_linear_guidance(mu_c, sigma_c, mu_u, sigma_u, spec.omega)
    raise ConfigError(f"combine called with inactive guidance mode '{spec.mode}'")
