"""Noisy-latent toy pipeline: frozen linear encoder, trainable decoder.

The encoder patchifies pixels and applies a fixed, seeded semi-orthogonal
expansion per patch, so its exact left inverse exists by construction and a
checksum can certify it never trains.  Flows are trained on latents with
fresh Gaussian noise per batch; the decoder is a small per-patch MLP
finetuned with plain L2 on those noisy latents.  A single-step score-based
denoiser (latent plus noise-variance times the flow's score) is the
sampling-side alternative the finetuned decoder is measured against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class NoiseSpec:
    """Latent perturbation scale used during training and evaluation."""

    sigma_l: float = 0.3

    def __post_init__(self):
        if self.sigma_l < 0:
            raise ConfigError("sigma_l must be >= 0")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W] -> [B, (H/p)*(W/p), p*p], row-major patch order."""
    if images.ndim != 3:
        raise ShapeError(f"images must be [B, H, W], got {images.shape}")
    b, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    out = images.reshape(b, hp, patch, wp, patch).transpose(0, 1, 3, 2, 4)
    return out.reshape(b, hp * wp, patch * patch)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    b = patches.shape[0]
    hp, wp = grid
    out = patches.reshape(b, hp, wp, patch, patch).transpose(0, 1, 3, 2, 4)
    return out.reshape(b, hp * patch, wp * patch)


class ToyEncoder:
    """Frozen seeded patchifier: p*p pixels -> latent_channels per position.

    The mixing matrix has orthonormal columns, so decode_exact is an exact
    left inverse and clean round trips are lossless.
    """

    def __init__(self, patch: int = 1, latent_channels: int = 4, seed: int = 7):
        p2 = patch * patch
        if latent_channels < p2:
            raise ConfigError(f"latent_channels {latent_channels} < patch pixels {p2}")
        self.patch = patch
        self.latent_channels = latent_channels
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE0C]))
        a = rng.standard_normal((latent_channels, latent_channels))
        q, _ = np.linalg.qr(a)
        self.mix = q[:, :p2].copy()  # [latent_channels, p*p], orthonormal columns

    def encode(self, images: np.ndarray) -> np.ndarray:
        """[B, H, W] -> latents [B, D, latent_channels]."""
        return patchify(np.asarray(images, dtype=np.float64), self.patch) @ self.mix.T

    def decode_exact(self, latents: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        """Exact left inverse of encode for clean latents."""
        return unpatchify(np.asarray(latents, dtype=np.float64) @ self.mix, grid, self.patch)

    def checksum(self) -> float:
        return float(np.sum(self.mix * np.arange(1, self.mix.size + 1).reshape(self.mix.shape)))


def encode_noisy(enc: ToyEncoder, images: np.ndarray, noise: NoiseSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Fresh Gaussian perturbation of the encoded latents."""
    lat = enc.encode(images)
    if noise.sigma_l == 0.0:
        return lat
    return lat + noise.sigma_l * rng.standard_normal(lat.shape)


class ToyDecoder:
    """Trainable per-patch MLP: latent channels -> patch pixels.

    The output layer starts at zero, so the untrained decoder predicts a
    blank image; that is the finetuning baseline.
    """

    def __init__(self, latent_channels: int, patch: int = 1, hidden: int = 32, seed: int = 11):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDEC]))
        p2 = patch * patch
        self.patch = patch
        self.p = {
            "dec.w1": Tensor(0.2 * rng.standard_normal((latent_channels, hidden)), requires_grad=True),
            "dec.b1": Tensor(np.zeros(hidden), requires_grad=True),
            "dec.w2": Tensor(np.zeros((hidden, p2)), requires_grad=True),
            "dec.b2": Tensor(np.zeros(p2), requires_grad=True),
        }

    def params(self) -> dict[str, Tensor]:
        return dict(self.p)

    def __call__(self, latents: Tensor) -> Tensor:
        latents = latents if isinstance(latents, Tensor) else Tensor(latents)
        h = T.gelu(latents @ self.p["dec.w1"] + self.p["dec.b1"])
        return h @ self.p["dec.w2"] + self.p["dec.b2"]

    def decode_images(self, latents: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        with T.no_grad():
            patches = self(Tensor(np.asarray(latents, dtype=np.float64))).data
        return unpatchify(patches, grid, self.patch)


def reconstruction_nll(pred: Tensor, target_patches: np.ndarray, sigma_dec: float) -> Tensor:
    """Mean per-pixel Gaussian negative log likelihood at fixed scale."""
    if sigma_dec <= 0:
        raise ConfigError("sigma_dec must be positive")
    diff = T.sub(pred, Tensor(target_patches))
    quad = T.mul(T.mean(T.mul(diff, diff)), Tensor(0.5 / sigma_dec**2))
    const = 0.5 * float(np.log(2.0 * np.pi * sigma_dec**2))
    return T.add(quad, Tensor(const))


def elbo_objective(stack, decoder: ToyDecoder, enc: ToyEncoder, images: np.ndarray,
                   noisy_latents: np.ndarray, sigma_dec: float, labels=None):
    """Joint objective: flow NLL on noisy latents plus decoder reconstruction.

    The variational posterior is a fixed-width Gaussian around the encoding,
    so its entropy is constant in every trainable parameter and omitted.
    Returns (total, parts) where total == parts['flow'] + parts['recon'] by
    construction; gradients reach the flow and decoder, never the encoder.
    """
    lat = Tensor(noisy_latents)
    flow_loss, aux = stack.nll_loss(lat, labels)
    pred = decoder(lat)
    recon = reconstruction_nll(pred, patchify(np.asarray(images, dtype=np.float64), enc.patch), sigma_dec)
    total = T.add(flow_loss, recon)
    return total, {"flow": flow_loss, "recon": recon, "aux": aux}


def score_denoise(stack, x_tilde: np.ndarray, sigma: float, labels=None) -> np.ndarray:
    """One-step posterior-mean estimate: x_tilde + sigma^2 * d log p / d x.

    Single step only; the flow's score is read through the autodiff graph.
    """
    xt = Tensor(np.asarray(x_tilde, dtype=np.float64), requires_grad=True)
    logp = stack.log_prob(xt, labels)
    T.backward(T.sum_(logp))
    return x_tilde + sigma**2 * xt.grad


def decoder_finetune_step(decoder: ToyDecoder, opt, enc: ToyEncoder, images: np.ndarray,
                          noise: NoiseSpec, rng: np.random.Generator) -> float:
    """One L2 step of the decoder on freshly noised latents; returns the MSE."""
    lat = encode_noisy(enc, images, noise, rng)
    pred = decoder(Tensor(lat))
    diff = T.sub(pred, Tensor(patchify(np.asarray(images, dtype=np.float64), enc.patch)))
    loss = T.mean(T.mul(diff, diff))
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    return float(loss.data)


def pixel_mse(pred_images: np.ndarray, images: np.ndarray) -> float:
    return float(np.mean(np.square(pred_images - images)))
