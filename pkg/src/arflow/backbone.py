"""Causal transformer backbone: pre-norm blocks, 3-axis rotary positions.

Each token position is an (x, y, t) triple: grid column, grid row, and a
prefix index.  The per-head channel budget splits 3/8 : 3/8 : 2/8 across the
three axes; grid coordinates are divided by a resolution factor alpha before
the rotary angles are formed, the prefix axis never is.  Conditioning tokens
are prepended to the sequence and their outputs dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class BackboneConfig:
    num_layers: int
    width: int
    in_dim: int
    head_dim: int = 64
    mlp_ratio: int = 4
    use_rope: bool = True
    rope_base: float = 10000.0
    rope_alpha: float = 1.0
    rmsnorm_eps: float = 1e-6

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.width <= 0 or self.in_dim <= 0:
            raise ConfigError("width and in_dim must be positive")
        if self.width % self.head_dim != 0:
            raise ConfigError(f"width {self.width} not divisible by head_dim {self.head_dim}")
        if self.rope_alpha <= 0:
            raise ConfigError("rope_alpha must be positive")
        for piece in _rope_slices(self.head_dim):
            if piece % 2 != 0:
                raise ConfigError(
                    f"head_dim {self.head_dim} does not split into even 3/8:3/8:2/8 rotary slices"
                )

    @property
    def num_heads(self) -> int:
        return self.width // self.head_dim


def _rope_slices(head_dim: int) -> tuple[int, int, int]:
    a = 3 * head_dim // 8
    return (a, a, head_dim - 2 * a)


def grid_positions(rows: int, cols: int) -> np.ndarray:
    """Row-major (x, y, t) positions for an image grid; image tokens have t = 0."""
    ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pos = np.zeros((rows * cols, 3), dtype=np.float64)
    pos[:, 0] = xs.ravel()
    pos[:, 1] = ys.ravel()
    return pos


def prefix_positions(n: int) -> np.ndarray:
    """Prefix tokens sit at (0, 0) spatially with t = 1..n."""
    pos = np.zeros((n, 3), dtype=np.float64)
    pos[:, 2] = np.arange(1, n + 1)
    return pos


def rope_tables(cfg: BackboneConfig, positions: np.ndarray):
    """Rotary tables for a position list.

    Returns (cos, sin_signed, partner): arrays [S, head_dim], [S, head_dim],
    and an int index vector pairing each channel with its rotation partner.
    Rotation of a head vector q is then  q * cos + q[partner] * sin_signed.
    """
    angles = rope_angles(cfg, positions)
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    # interleaved pairs (2j, 2j+1): partner swaps within the pair, sign flips
    # the first element so q*cos + q[partner]*sin_signed is a true rotation
    partner = np.arange(cfg.head_dim)
    partner = partner + 1 - 2 * (partner % 2)
    sign = np.where(np.arange(cfg.head_dim) % 2 == 0, -1.0, 1.0)
    return cos, sin * sign, partner


def rope_angles(cfg: BackboneConfig, positions: np.ndarray) -> np.ndarray:
    """Raw per-pair rotary angles [seq, head_dim//2]."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ShapeError(f"positions must be [seq, 3], got {positions.shape}")
    seq = positions.shape[0]
    angles = np.zeros((seq, cfg.head_dim // 2), dtype=np.float64)
    offset = 0
    for axis, slice_len in enumerate(_rope_slices(cfg.head_dim)):
        npairs = slice_len // 2
        coord = positions[:, axis]
        if axis < 2:
            coord = coord / cfg.rope_alpha
        freqs = cfg.rope_base ** (-2.0 * np.arange(npairs) / slice_len)
        angles[:, offset : offset + npairs] = coord[:, None] * freqs[None, :]
        offset += npairs
    return angles


def rope_rotate(q: Tensor, cos: np.ndarray, sin_signed: np.ndarray, partner: np.ndarray) -> Tensor:
    """Apply the rotation tables to [..., seq, head_dim] (seq on axis -2)."""
    swapped = T.gather(q, -1, partner)
    return T.add(T.mul(q, Tensor(cos)), T.mul(swapped, Tensor(sin_signed)))


def rope_rotate_np(q: np.ndarray, cos, sin_signed, partner) -> np.ndarray:
    return q * cos + q[..., partner] * sin_signed


def causal_mask(seq: int) -> np.ndarray:
    """Additive mask, -inf strictly above the diagonal."""
    mask = np.zeros((seq, seq), dtype=np.float64)
    mask[np.triu_indices(seq, k=1)] = -np.inf
    return mask


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter dict; names are stable and sorted-friendly."""
    d, scale = cfg.width, 0.02
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    def gain(name):
        params[name] = Tensor(np.ones(d), requires_grad=True)

    w("in_proj.w", (cfg.in_dim, d))
    for i in range(cfg.num_layers):
        p = f"layers.{i:02d}"
        gain(f"{p}.norm1.gain")
        w(f"{p}.attn.wq", (d, d))
        w(f"{p}.attn.wk", (d, d))
        w(f"{p}.attn.wv", (d, d))
        w(f"{p}.attn.wo", (d, d))
        gain(f"{p}.norm2.gain")
        w(f"{p}.mlp.w1", (d, cfg.mlp_ratio * d))
        w(f"{p}.mlp.w2", (cfg.mlp_ratio * d, d))
    gain("final_norm.gain")
    return params


def _split_heads(x: Tensor, num_heads: int, head_dim: int) -> Tensor:
    b, s, _ = x.shape
    return T.transpose(T.reshape(x, (b, s, num_heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def causal_attention(cfg: BackboneConfig, layer_params: dict[str, Tensor], hidden: Tensor,
                     rope=None, mask: np.ndarray | None = None, return_probs: bool = False):
    """One causal self-attention sublayer on pre-normalized hidden [B, S, d]."""
    b, s, d = hidden.shape
    if mask is None:
        mask = causal_mask(s)
    q = _split_heads(hidden @ layer_params["attn.wq"], cfg.num_heads, cfg.head_dim)
    k = _split_heads(hidden @ layer_params["attn.wk"], cfg.num_heads, cfg.head_dim)
    v = _split_heads(hidden @ layer_params["attn.wv"], cfg.num_heads, cfg.head_dim)
    if rope is not None:
        cos, sin_signed, partner = rope
        q = rope_rotate(q, cos, sin_signed, partner)
        k = rope_rotate(k, cos, sin_signed, partner)
    scores = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), Tensor(1.0 / np.sqrt(cfg.head_dim)))
    probs = T.softmax(scores, mask)
    out = _merge_heads(probs @ v) @ layer_params["attn.wo"]
    if return_probs:
        return out, probs
    return out


def backbone_forward(cfg: BackboneConfig, params: dict[str, Tensor], tokens: Tensor,
                     positions: np.ndarray, prefix: Tensor | None = None) -> Tensor:
    """Run the stack of pre-norm blocks; prefix outputs are dropped.

    tokens: [B, S, in_dim] or [S, in_dim]; positions: [S, 3] for the tokens
    (prefix tokens get (0, 0, 1..P) internally).  Returns hidden [B, S, width]
    (or [S, width] for unbatched input) after the final rmsnorm.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
        if prefix is not None and prefix.ndim == 2:
            prefix = T.reshape(prefix, (1,) + prefix.shape)
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be [B, S, in_dim], got {tokens.shape}")
    if tokens.shape[-1] != cfg.in_dim:
        raise ShapeError(f"token feature dim {tokens.shape[-1]} != in_dim {cfg.in_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (tokens.shape[1], 3):
        raise ShapeError(f"positions shape {positions.shape} != ({tokens.shape[1]}, 3)")

    n_prefix = 0
    if prefix is not None and prefix.shape[1] > 0:
        if prefix.ndim != 3 or prefix.shape[0] != tokens.shape[0] or prefix.shape[2] != cfg.in_dim:
            raise ShapeError(f"prefix shape {prefix.shape} incompatible with tokens {tokens.shape}")
        n_prefix = prefix.shape[1]
        tokens = T.concat([prefix, tokens], axis=1)
        positions = np.concatenate([prefix_positions(n_prefix), positions], axis=0)

    h = tokens @ params["in_proj.w"]
    seq = h.shape[1]
    rope = rope_tables(cfg, positions) if cfg.use_rope else None
    mask = causal_mask(seq)
    for i in range(cfg.num_layers):
        p = f"layers.{i:02d}"
        lp = {"attn.wq": params[f"{p}.attn.wq"], "attn.wk": params[f"{p}.attn.wk"],
              "attn.wv": params[f"{p}.attn.wv"], "attn.wo": params[f"{p}.attn.wo"]}
        normed = T.rmsnorm(h, params[f"{p}.norm1.gain"], cfg.rmsnorm_eps)
        h = T.add(h, causal_attention(cfg, lp, normed, rope, mask))
        normed2 = T.rmsnorm(h, params[f"{p}.norm2.gain"], cfg.rmsnorm_eps)
        mlp = T.gelu(normed2 @ params[f"{p}.mlp.w1"]) @ params[f"{p}.mlp.w2"]
        h = T.add(h, mlp)
    h = T.rmsnorm(h, params["final_norm.gain"], cfg.rmsnorm_eps)
    if n_prefix > 0:
        h = T.narrow(h, 1, n_prefix, seq - n_prefix)
    if squeeze:
        h = T.reshape(h, h.shape[1:])
    return h
