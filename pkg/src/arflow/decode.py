"""Raw-numpy inference paths for the flow stack.

Sequential inversion feeds one token row at a time through per-layer
key/value caches; a cache-free reference rebuilds every prefix from scratch
with the same row-shaped operations, so the two are bitwise comparable.
A batched parallel forward mirrors the autodiff density pass without graph
overhead and without raising on non-finite values (per-sample finite flags
instead), which is what the MH sampler needs to treat blowups as rejections.
"""

from __future__ import annotations

import time

import numpy as np

from .backbone import prefix_positions, rope_tables
from .errors import ConfigError, ShapeError
from .guidance import GuidanceSpec, combine
from .tensor import _GELU_C


def rmsnorm_np(x, gain, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def softplus_np(x):
    return np.logaddexp(0.0, x)


def softmax_np(scores, mask=None):
    if mask is not None:
        scores = scores + mask
    top = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - top)
    return e / e.sum(axis=-1, keepdims=True)


class BlockDecoder:
    """Incremental evaluator for one AF block (inference only).

    Processes one token row per step, maintains K/V caches per layer, and
    exposes the Gaussian head readout.  step_count tracks backbone passes so
    guidance cost (two passes per slot vs one) is observable.
    """

    def __init__(self, block, batch: int):
        self.block = block
        self.cfg = block.backbone_cfg
        self.batch = batch
        cap = block.cfg.num_positions + 8  # room for prefix rows
        h = self.cfg.num_heads
        hd = self.cfg.head_dim
        self.k_cache = [np.zeros((batch, h, cap, hd)) for _ in range(self.cfg.num_layers)]
        self.v_cache = [np.zeros((batch, h, cap, hd)) for _ in range(self.cfg.num_layers)]
        self.t = 0
        self.step_count = 0
        self.w = {name: p.data for name, p in block.params.items()}

    def _advance(self, tok: np.ndarray, position: np.ndarray) -> np.ndarray:
        """Push one token row [B, C] at `position`; returns hidden [B, 1, d]."""
        cfg = self.cfg
        nh, hd = cfg.num_heads, cfg.head_dim
        b = tok.shape[0]
        h = tok[:, None, :] @ self.w["in_proj.w"]
        if cfg.use_rope:
            cos, sin_signed, partner = rope_tables(cfg, np.asarray(position, dtype=np.float64)[None, :])
        scale = 1.0 / np.sqrt(hd)
        for i in range(cfg.num_layers):
            p = f"layers.{i:02d}"
            n1 = rmsnorm_np(h, self.w[f"{p}.norm1.gain"].reshape(-1), cfg.rmsnorm_eps)
            q = (n1 @ self.w[f"{p}.attn.wq"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            k = (n1 @ self.w[f"{p}.attn.wk"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            v = (n1 @ self.w[f"{p}.attn.wv"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            if cfg.use_rope:
                q = q * cos + q[..., partner] * sin_signed
                k = k * cos + k[..., partner] * sin_signed
            self.k_cache[i][:, :, self.t] = k[:, :, 0]
            self.v_cache[i][:, :, self.t] = v[:, :, 0]
            keys = self.k_cache[i][:, :, : self.t + 1]
            vals = self.v_cache[i][:, :, : self.t + 1]
            scores = (q @ keys.transpose(0, 1, 3, 2)) * scale
            probs = softmax_np(scores)
            ctx = (probs @ vals).transpose(0, 2, 1, 3).reshape(b, 1, nh * hd)
            h = h + ctx @ self.w[f"{p}.attn.wo"]
            n2 = rmsnorm_np(h, self.w[f"{p}.norm2.gain"].reshape(-1), cfg.rmsnorm_eps)
            h = h + gelu_np(n2 @ self.w[f"{p}.mlp.w1"]) @ self.w[f"{p}.mlp.w2"]
        self.t += 1
        return h

    def _readout(self, hidden: np.ndarray):
        cfg = self.block.cfg
        f = rmsnorm_np(hidden, self.w["final_norm.gain"].reshape(-1), self.cfg.rmsnorm_eps)
        raw = (f @ self.w["head.w"] + self.w["head.b"])[:, 0, :]
        c = cfg.channels
        a = cfg.soft_clip
        mu = np.tanh(raw[:, :c] * (1.0 / a)) * a
        sigma = softplus_np(raw[:, c:]) + cfg.sigma_floor
        return mu, sigma

    def prime(self, prefix_rows: np.ndarray):
        """Feed conditioning rows [B, P, C]; outputs are discarded."""
        pos = prefix_positions(prefix_rows.shape[1])
        for j in range(prefix_rows.shape[1]):
            self._advance(prefix_rows[:, j], pos[j])

    def step(self, tok: np.ndarray, position: np.ndarray):
        """One autoregressive step: returns (mu, sigma), each [B, C]."""
        self.step_count += 1
        return self._readout(self._advance(tok, position))


def _prefix_rows(stack, block, labels, batch: int, null: bool = False):
    """Embedded conditioning rows for one block, or None."""
    if not block.conditioned:
        return None
    table = stack.class_embed.data
    if null:
        ids = np.full(batch, stack.null_class, dtype=np.int64)
    elif labels is None:
        ids = np.full(batch, stack.null_class, dtype=np.int64)
    else:
        ids = np.asarray(labels, dtype=np.int64)
        if ids.shape != (batch,):
            raise ShapeError(f"labels shape {ids.shape} != ({batch},)")
        if ids.size and (ids.min() < 0 or ids.max() > stack.null_class):
            raise ConfigError(f"label outside [0, {stack.null_class}]")
    return table[ids][:, None, :]


def block_inverse(block, z: np.ndarray, prefix_c=None, prefix_u=None,
                  spec: GuidanceSpec | None = None):
    """Sequential inversion of one block; returns (x, info).

    With guidance active, conditional and unconditional decoders advance in
    lockstep and their Gaussian parameters are combined per slot before the
    latent is consumed.
    """
    b, d, c = z.shape
    zp = z[:, block.ordering]
    dec_c = BlockDecoder(block, b)
    if prefix_c is not None:
        dec_c.prime(prefix_c)
    guided = spec is not None and spec.active
    dec_u = None
    if guided:
        if prefix_u is None:
            raise ConfigError("guidance requested but no unconditional pathway is available")
        dec_u = BlockDecoder(block, b)
        dec_u.prime(prefix_u)
    floor_hits = 0
    xp = np.empty_like(zp)
    tok = np.broadcast_to(block.params["sos"].data, (b, c)).copy()
    for i in range(d):
        pos = block.positions[i]
        mu, sigma = dec_c.step(tok, pos)
        if guided:
            mu_u, sigma_u = dec_u.step(tok, pos)
            mu, sigma, n_floored = combine(spec, mu, sigma, mu_u, sigma_u)
            floor_hits += n_floored
        xp[:, i] = mu + sigma * zp[:, i]
        tok = xp[:, i]
    x = xp[:, block.inverse_ordering]
    info = {
        "decoder_steps": dec_c.step_count + (dec_u.step_count if dec_u else 0),
        "sigma_floor_hits": floor_hits,
    }
    return x, info


def block_inverse_nocache(block, z: np.ndarray, prefix_c=None):
    """O(D^2) cache-free reference: rebuilds every prefix from scratch.

    Runs the same row-shaped operations in the same order as the cached
    decoder, so results are bitwise identical when the cache logic is sound.
    """
    b, d, c = z.shape
    zp = z[:, block.ordering]
    xp = np.empty_like(zp)
    sos = np.broadcast_to(block.params["sos"].data, (b, c)).copy()
    for i in range(d):
        dec = BlockDecoder(block, b)
        if prefix_c is not None:
            dec.prime(prefix_c)
        tok = sos
        for j in range(i):
            dec._advance(tok, block.positions[j])
            tok = xp[:, j]
        mu, sigma = dec.step(tok, block.positions[i])
        xp[:, i] = mu + sigma * zp[:, i]
    return xp[:, block.inverse_ordering]


def stack_inverse(stack, z: np.ndarray, labels=None, guidance: GuidanceSpec | None = None):
    """Invert the whole stack: prior draw -> data, deep block first."""
    if z.ndim == 2:
        z = z[None]
    b = z.shape[0]
    if z.shape[1:] != (stack.cfg.num_positions, stack.cfg.channels):
        raise ShapeError(f"z shape {z.shape} incompatible with stack config")
    if guidance is not None and guidance.active and not stack.cfg.conditional:
        raise ConfigError("guidance requires a conditional stack (no unconditional pathway)")
    if labels is not None and not stack.cfg.conditional:
        raise ConfigError("labels supplied to an unconditional stack")
    x = z
    info = {"block_seconds": [], "decoder_steps": [], "sigma_floor_hits": 0}
    for block in stack.blocks:
        prefix_c = _prefix_rows(stack, block, labels, b)
        spec_here = guidance if (guidance is not None and guidance.applies_to(block.index)
                                 and block.conditioned) else None
        prefix_u = _prefix_rows(stack, block, labels, b, null=True) if spec_here is not None else None
        t0 = time.perf_counter()
        x, binfo = block_inverse(block, x, prefix_c, prefix_u, spec_here)
        info["block_seconds"].append(time.perf_counter() - t0)
        info["decoder_steps"].append(binfo["decoder_steps"])
        info["sigma_floor_hits"] += binfo["sigma_floor_hits"]
    return x, info


def forward_np(stack, x: np.ndarray, labels=None):
    """Batched parallel density pass in raw numpy.

    Returns (z, logdet, logp, finite) where finite flags per-sample numerical
    health instead of raising; non-finite rows carry logp = -inf.
    """
    if x.ndim == 2:
        x = x[None]
    b = x.shape[0]
    with np.errstate(all="ignore"):
        logdet = np.zeros(b)
        cur = np.asarray(x, dtype=np.float64)
        for block in reversed(stack.blocks):
            prefix = _prefix_rows(stack, block, labels, b)
            mu, sigma = _block_params_np(block, cur, prefix)
            xp = cur[:, block.ordering]
            z_slots = (xp - mu) / sigma
            logdet = logdet - np.log(sigma).sum(axis=(1, 2))
            cur = z_slots[:, block.inverse_ordering]
        dims = stack.cfg.num_positions * stack.cfg.channels
        logp = logdet - 0.5 * np.square(cur).sum(axis=(1, 2)) - 0.5 * dims * np.log(2.0 * np.pi)
        finite = np.isfinite(logp) & np.isfinite(cur).all(axis=(1, 2))
        logp = np.where(finite, logp, -np.inf)
    return cur, logdet, logp, finite


def _block_params_np(block, x: np.ndarray, prefix=None):
    """Parallel mirror of AFBlock.af_params on raw arrays; returns (mu, sigma)."""
    cfg = block.backbone_cfg
    fcfg = block.cfg
    b, d, c = x.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    xp = x[:, block.ordering]
    sos = np.broadcast_to(block.params["sos"].data, (b, 1, c))
    tokens = np.concatenate([sos, xp[:, : d - 1]], axis=1)
    positions = block.positions
    n_prefix = 0
    if prefix is not None:
        n_prefix = prefix.shape[1]
        tokens = np.concatenate([prefix, tokens], axis=1)
        positions = np.concatenate([prefix_positions(n_prefix), positions], axis=0)
    w = {name: p.data for name, p in block.params.items()}
    h = tokens @ w["in_proj.w"]
    seq = h.shape[1]
    rope = rope_tables(cfg, positions) if cfg.use_rope else None
    mask = np.zeros((seq, seq))
    mask[np.triu_indices(seq, k=1)] = -np.inf
    scale = 1.0 / np.sqrt(hd)
    for i in range(cfg.num_layers):
        p = f"layers.{i:02d}"
        n1 = rmsnorm_np(h, w[f"{p}.norm1.gain"], cfg.rmsnorm_eps)
        q = (n1 @ w[f"{p}.attn.wq"]).reshape(b, seq, nh, hd).transpose(0, 2, 1, 3)
        k = (n1 @ w[f"{p}.attn.wk"]).reshape(b, seq, nh, hd).transpose(0, 2, 1, 3)
        v = (n1 @ w[f"{p}.attn.wv"]).reshape(b, seq, nh, hd).transpose(0, 2, 1, 3)
        if rope is not None:
            cos, sin_signed, partner = rope
            q = q * cos + q[..., partner] * sin_signed
            k = k * cos + k[..., partner] * sin_signed
        probs = softmax_np((q @ k.transpose(0, 1, 3, 2)) * scale, mask)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, seq, nh * hd)
        h = h + ctx @ w[f"{p}.attn.wo"]
        n2 = rmsnorm_np(h, w[f"{p}.norm2.gain"], cfg.rmsnorm_eps)
        h = h + gelu_np(n2 @ w[f"{p}.mlp.w1"]) @ w[f"{p}.mlp.w2"]
    h = rmsnorm_np(h, w["final_norm.gain"], cfg.rmsnorm_eps)
    if n_prefix:
        h = h[:, n_prefix:]
    raw = h @ w["head.w"] + w["head.b"]
    a = fcfg.soft_clip
    mu = np.tanh(raw[..., :c] * (1.0 / a)) * a
    sigma = softplus_np(raw[..., c:]) + fcfg.sigma_floor
    return mu, sigma
