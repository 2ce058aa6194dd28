"""Synthetic datasets, the AFDS binary format, and mixture density oracles."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DatasetError

AFDS_MAGIC = b"AFDS"
AFDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


@dataclass
class Dataset:
    """n samples of [positions, channels] float32 data plus optional labels."""

    data: np.ndarray
    labels: np.ndarray | None = None
    source: str = "synthetic-2d"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DatasetError(f"data must be [n, D, C], got shape {self.data.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
            if self.labels.shape != (self.data.shape[0],):
                raise DatasetError(
                    f"labels length {self.labels.shape} != sample count {self.data.shape[0]}"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def positions(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def save_dataset(ds: Dataset, path) -> None:
    has_labels = ds.labels is not None
    with open(path, "wb") as f:
        f.write(_HEADER.pack(AFDS_MAGIC, AFDS_VERSION, ds.n, ds.positions,
                             ds.channels, 1 if has_labels else 0))
        f.write(ds.data.astype("<f4").tobytes())
        if has_labels:
            f.write(ds.labels.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}")
    magic, version, n, d, c, has_labels = _HEADER.unpack_from(raw)
    if magic != AFDS_MAGIC:
        raise DatasetError(f"bad magic {magic!r}, expected {AFDS_MAGIC!r}")
    if version != AFDS_VERSION:
        raise DatasetError(f"unsupported version {version}, expected {AFDS_VERSION}")
    expected = _HEADER.size + 4 * n * d * c + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise DatasetError(f"truncated payload: expected {expected} bytes, got {len(raw)}")
    off = _HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=n * d * c, offset=off).reshape(n, d, c)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d * c)
    return Dataset(data=data.copy(), labels=None if labels is None else labels.copy(),
                   source="file")


def _mixture_arrays(modes):
    """Validate a (weight, mean, cov) mode list; returns stacked arrays."""
    if not modes:
        raise ConfigError("mixture needs at least one mode")
    weights = np.array([m[0] for m in modes], dtype=np.float64)
    means = np.array([np.asarray(m[1], dtype=np.float64).reshape(-1) for m in modes])
    dim = means.shape[1]
    if abs(weights.sum() - 1.0) > 1e-9 or (weights <= 0).any():
        raise ConfigError(f"mode weights must be positive and sum to 1, got {weights}")
    chols = np.empty((len(modes), dim, dim))
    for k, m in enumerate(modes):
        cov = np.asarray(m[2], dtype=np.float64)
        if cov.shape != (dim, dim):
            raise ConfigError(f"mode {k} covariance shape {cov.shape}, expected {(dim, dim)}")
        try:
            chols[k] = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError(f"mode {k} covariance is not positive definite") from None
    return weights, means, chols


def canonical_2d_modes():
    """Two-mode target: coordinate 0 ~ N(0,1), coordinate 1 ~ half N(-2,0.01) half N(+2,0.01)."""
    cov = np.diag([1.0, 0.01])
    return [(0.5, [0.0, -2.0], cov), (0.5, [0.0, 2.0], cov)]


def gen_2d_mixture(modes, n: int, seed: int, labeled: bool = False) -> Dataset:
    """Sample a Gaussian mixture; labels (optional) record the component index."""
    weights, means, chols = _mixture_arrays(modes)
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(weights), size=n, p=weights)
    eps = rng.standard_normal((n, means.shape[1]))
    x = means[comp] + np.einsum("nij,nj->ni", chols[comp], eps)
    data = x[:, :, None].astype(np.float32)
    labels = comp.astype(np.uint32) if labeled else None
    return Dataset(data=data, labels=labels, source="synthetic-2d")


def mixture_logpdf(x: np.ndarray, modes) -> np.ndarray:
    """Exact mixture log density at rows of x [N, dim]."""
    weights, means, chols = _mixture_arrays(modes)
    x = np.asarray(x, dtype=np.float64)
    dim = means.shape[1]
    parts = np.empty((len(weights), x.shape[0]))
    for k in range(len(weights)):
        diff = x - means[k]
        z = np.linalg.solve(chols[k], diff.T)
        logdet = np.log(np.diag(chols[k])).sum()
        parts[k] = (np.log(weights[k]) - logdet - 0.5 * dim * np.log(2 * np.pi)
                    - 0.5 * np.square(z).sum(axis=0))
    top = parts.max(axis=0)
    return top + np.log(np.exp(parts - top).sum(axis=0))


def mixture_entropy_nats(modes, nodes: int = 80) -> float:
    """Differential entropy by per-component tensor Gauss-Hermite quadrature.

    H = -sum_k w_k E_{N_k}[log p]; each expectation uses the component's own
    Cholesky factor, so tightly separated modes integrate to near machine
    precision without a global grid.
    """
    weights, means, chols = _mixture_arrays(modes)
    dim = means.shape[1]
    xi, wq = np.polynomial.hermite.hermgauss(nodes)
    grids = np.meshgrid(*([xi] * dim), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)          # [nodes^dim, dim]
    wgrids = np.meshgrid(*([wq] * dim), indexing="ij")
    wprod = np.ones(pts.shape[0])
    for g in wgrids:
        wprod = wprod * g.reshape(-1)
    wprod = wprod / np.pi ** (dim / 2.0)
    h = 0.0
    for k in range(len(weights)):
        x = means[k] + (np.sqrt(2.0) * pts) @ chols[k].T
        h -= weights[k] * float((wprod * mixture_logpdf(x, modes)).sum())
    return h


@lru_cache(maxsize=1)
def canonical_target_nll_per_dim() -> float:
    """Ground-truth expected nll (nats/dim) of the canonical 2D target."""
    return mixture_entropy_nats(canonical_2d_modes()) / 2.0


IMAGE_KINDS = ("bars", "checker", "gaussians-on-grid")


def gen_synthetic_images(kind: str, n: int, seed: int, size: int = 8,
                         classes: int = 2, noise_sigma: float = 0.1) -> Dataset:
    """8x8-style labeled toy images in [-1, 1], flattened row-major to [n, size^2, 1].

    bars: class 0 horizontal stripes, class 1 vertical.  checker: class =
    parity phase.  gaussians-on-grid: class = which grid center holds a bump.
    Labels are exactly balanced; class structure is seed independent.
    """
    if kind not in IMAGE_KINDS:
        raise ConfigError(f"unknown image kind '{kind}', expected one of {IMAGE_KINDS}")
    if classes < 1 or n < 0 or size < 2:
        raise ConfigError("need classes >= 1, n >= 0, size >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.uint32)
    imgs = np.empty((n, size, size))
    amp = 0.8
    if kind == "bars":
        if classes != 2:
            raise ConfigError("bars uses exactly 2 classes (horizontal, vertical)")
        phase = rng.integers(0, 2, size=n)
        stripe = np.where(((np.arange(size)[None, :] + phase[:, None]) % 2) == 0, amp, -amp)
        imgs = np.where(labels[:, None, None] == 0,
                        np.broadcast_to(stripe[:, :, None], (n, size, size)),
                        np.broadcast_to(stripe[:, None, :], (n, size, size))).copy()
    elif kind == "checker":
        if classes != 2:
            raise ConfigError("checker uses exactly 2 classes (parity phases)")
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        board = np.where((yy + xx) % 2 == 0, amp, -amp)
        imgs = np.where(labels[:, None, None] == 0, board, -board).astype(np.float64)
    else:
        side = int(np.ceil(np.sqrt(classes)))
        centers = [((0.5 + (k // side)) * size / side, (0.5 + (k % side)) * size / side)
                   for k in range(classes)]
        yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
        bumps = np.stack([np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.5 ** 2))
                          for cy, cx in centers])
        imgs = 2.0 * amp * bumps[labels] - amp
    imgs = imgs + noise_sigma * rng.standard_normal((n, size, size))
    imgs = np.clip(imgs, -1.0, 1.0)
    data = imgs.reshape(n, size * size, 1).astype(np.float32)
    return Dataset(data=data, labels=labels, source="synthetic-images")


def shuffle_positions(ds: Dataset, seed: int) -> Dataset:
    """Control set: permute positions independently per sample (kills structure)."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(ds.data)
    for i in range(ds.n):
        out[i] = ds.data[i, rng.permutation(ds.positions)]
    return Dataset(data=out, labels=None if ds.labels is None else ds.labels.copy(),
                   source=ds.source)
