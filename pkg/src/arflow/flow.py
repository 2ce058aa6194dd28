"""Autoregressive flow blocks and the deep-shallow stack.

Each block predicts per-coordinate Gaussian parameters from a causally
shifted view of its input (position 0 sees a learned start token) and maps
x -> z = (x - mu) / sigma, which makes the log-determinant the negative sum
of log sigma.  Blocks process coordinates in their own ordering; adjacent
blocks reverse it.  blocks[0] is the deep block adjacent to the prior: the
forward (density) pass runs the list in reverse, generation runs it front to
back.  Only the deep block consumes conditioning unless the stack is built
with condition_blocks="all" (the equal-layers baseline).

Safeguards: means are soft-clipped through a scaled tanh, scales come from a
softplus with an additive floor, and training adds a small mean-square
penalty on the latents between blocks (never the final one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, grid_positions, init_backbone_params
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianParams:
    """Per-slot conditional mean and scale, in the owning block's slot order."""

    mu: Tensor
    sigma: Tensor


@dataclass
class FlowConfig:
    num_positions: int
    channels: int
    layers_per_block: tuple[int, ...]
    width: int = 128
    head_dim: int = 64
    grid: tuple[int, int] | None = None
    num_classes: int = 0
    condition_blocks: str = "deep"
    soft_clip: float = 5.0
    sigma_floor: float = 1e-4
    norm_penalty: float = 1e-4
    sos_init: float = 0.0
    use_rope: bool = True
    rope_base: float = 10000.0
    rope_alpha: float = 1.0
    mlp_ratio: int = 4
    rmsnorm_eps: float = 1e-6
    alternate_orderings: bool = True
    first_ordering_reversed: bool = False

    def __post_init__(self):
        self.layers_per_block = tuple(int(l) for l in self.layers_per_block)
        if not self.layers_per_block:
            raise ConfigError("layers_per_block must be non-empty")
        if any(l < 0 for l in self.layers_per_block):
            raise ConfigError("layer counts must be >= 0")
        if self.layers_per_block[0] < max(self.layers_per_block):
            raise ConfigError("deep block (index 0) must be at least as deep as any shallow block")
        if self.num_positions < 1 or self.channels < 1:
            raise ConfigError("num_positions and channels must be >= 1")
        if self.grid is None:
            self.grid = (1, self.num_positions)
        rows, cols = self.grid
        if rows * cols != self.num_positions:
            raise ConfigError(f"grid {self.grid} does not tile {self.num_positions} positions")
        if self.condition_blocks not in ("deep", "all"):
            raise ConfigError("condition_blocks must be 'deep' or 'all'")
        if self.soft_clip <= 0 or self.sigma_floor <= 0:
            raise ConfigError("soft_clip and sigma_floor must be positive")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")

    @property
    def num_blocks(self) -> int:
        return len(self.layers_per_block)

    @property
    def conditional(self) -> bool:
        return self.num_classes > 0


def block_ordering(cfg: FlowConfig, index: int) -> np.ndarray:
    """Coordinate ordering for one block; adjacent blocks are reversed."""
    order = np.arange(cfg.num_positions, dtype=np.int64)
    if not cfg.alternate_orderings:
        return order
    flipped = (index % 2 == 1) ^ cfg.first_ordering_reversed
    return order[::-1].copy() if flipped else order


class AFBlock:
    """One autoregressive flow block: backbone + Gaussian parameter head."""

    def __init__(self, cfg: FlowConfig, index: int, rng: np.random.Generator):
        self.cfg = cfg
        self.index = index
        self.conditioned = cfg.conditional and (cfg.condition_blocks == "all" or index == 0)
        self.ordering = block_ordering(cfg, index)
        self.inverse_ordering = np.argsort(self.ordering)
        self.backbone_cfg = BackboneConfig(
            num_layers=cfg.layers_per_block[index],
            width=cfg.width,
            in_dim=cfg.channels,
            head_dim=cfg.head_dim,
            mlp_ratio=cfg.mlp_ratio,
            use_rope=cfg.use_rope,
            rope_base=cfg.rope_base,
            rope_alpha=cfg.rope_alpha,
            rmsnorm_eps=cfg.rmsnorm_eps,
        )
        self.params = init_backbone_params(self.backbone_cfg, rng)
        # zero-initialized head: mu = 0, sigma = softplus(0) + floor at init
        self.params["head.w"] = Tensor(np.zeros((cfg.width, 2 * cfg.channels)), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(2 * cfg.channels), requires_grad=True)
        self.params["sos"] = Tensor(np.full(cfg.channels, cfg.sos_init), requires_grad=True)
        rows, cols = cfg.grid
        self.positions = grid_positions(rows, cols)[self.ordering]

    def shifted_inputs(self, x_slots: Tensor) -> Tensor:
        """[sos, x_0, ..., x_{D-2}] along the slot axis."""
        b, d, c = x_slots.shape
        sos = T.broadcast_to(T.reshape(self.params["sos"], (1, 1, c)), (b, 1, c))
        if d == 1:
            return sos
        return T.concat([sos, T.narrow(x_slots, 1, 0, d - 1)], axis=1)

    def head_transform(self, hidden: Tensor) -> GaussianParams:
        raw = hidden @ self.params["head.w"] + self.params["head.b"]
        c = self.cfg.channels
        mu_raw = T.narrow(raw, -1, 0, c)
        sig_raw = T.narrow(raw, -1, c, c)
        a = self.cfg.soft_clip
        mu = T.mul(T.tanh(T.mul(mu_raw, Tensor(1.0 / a))), Tensor(a))
        sigma = T.softplus(sig_raw) + Tensor(self.cfg.sigma_floor)
        return GaussianParams(mu=mu, sigma=sigma)

    def af_params(self, x: Tensor, condition: Tensor | None = None) -> GaussianParams:
        """Conditional Gaussian parameters for every slot, causally computed.

        x: [B, D, C] in canonical coordinate order; condition: optional
        [B, P, C] prefix rows (already embedded).  Slot i of the result
        corresponds to coordinate ordering[i].
        """
        if condition is not None and not self.conditioned:
            raise ConfigError(f"condition supplied to unconditioned block {self.index}")
        if x.ndim != 3:
            raise ShapeError(f"x must be [B, D, C], got {x.shape}")
        if x.shape[1] != self.cfg.num_positions or x.shape[2] != self.cfg.channels:
            raise ShapeError(
                f"x shape {x.shape} incompatible with (D={self.cfg.num_positions}, C={self.cfg.channels})"
            )
        x_slots = T.gather(x, 1, self.ordering)
        tokens = self.shifted_inputs(x_slots)
        hidden = backbone_forward(self.backbone_cfg, self.params, tokens, self.positions, prefix=condition)
        return self.head_transform(hidden)

    def forward(self, x: Tensor, condition: Tensor | None = None):
        """x -> (z, logdet) with z back in canonical coordinate order."""
        par = self.af_params(x, condition)
        x_slots = T.gather(x, 1, self.ordering)
        z_slots = T.div(T.sub(x_slots, par.mu), par.sigma)
        logdet = T.neg(T.sum_(T.log(par.sigma), axis=(1, 2)))
        z = T.gather(z_slots, 1, self.inverse_ordering)
        return z, logdet


class FlowStack:
    """Deep-shallow stack of AF blocks with an optional class-embedding table."""

    def __init__(self, cfg: FlowConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAF]))
        self.blocks = [AFBlock(cfg, t, rng) for t in range(cfg.num_blocks)]
        self.class_embed = None
        if cfg.conditional:
            # one row per class plus a trailing null row for unconditional paths
            table = 0.02 * rng.standard_normal((cfg.num_classes + 1, cfg.channels))
            self.class_embed = Tensor(table, requires_grad=True)

    # ---- parameters ----------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for t, block in enumerate(self.blocks):
            for name, p in block.params.items():
                out[f"block{t}.{name}"] = p
        if self.class_embed is not None:
            out["class_embed"] = self.class_embed
        return out

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params().values())

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def embed_labels(self, labels) -> Tensor:
        """Class-id vector -> [B, 1, C] prefix rows (null row = num_classes)."""
        if self.class_embed is None:
            raise ConfigError("stack is unconditional; no class embedding table")
        ids = np.asarray(labels, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError("labels must be a 1-D integer vector")
        if ids.size and (ids.min() < 0 or ids.max() > self.cfg.num_classes):
            raise ConfigError(f"label outside [0, {self.cfg.num_classes}]")
        rows = T.gather(self.class_embed, 0, ids)
        return T.reshape(rows, (ids.size, 1, self.cfg.channels))

    def _block_condition(self, block: AFBlock, labels, batch: int) -> Tensor | None:
        """Prefix rows for one block; a conditional stack with no labels runs
        on the null row so density and generation paths always agree."""
        if not block.conditioned:
            return None
        if labels is None:
            labels = np.full(batch, self.null_class, dtype=np.int64)
        return self.embed_labels(labels)

    # ---- density direction ----------------------------------------------
    def forward(self, x: Tensor, labels=None):
        """Data -> prior: returns (z, total logdet [B], intermediate latents).

        Blocks run data-adjacent first (list order reversed); intermediates
        are the latents between blocks, excluding the final z.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if labels is not None and not self.cfg.conditional:
            raise ConfigError("labels supplied to an unconditional stack")
        logdet = None
        intermediates = []
        cur = x
        for block in reversed(self.blocks):
            z, ld = block.forward(cur, self._block_condition(block, labels, x.shape[0]))
            logdet = ld if logdet is None else T.add(logdet, ld)
            cur = z
            intermediates.append(cur)
        intermediates = intermediates[:-1]
        return cur, logdet, intermediates

    def log_prob(self, x: Tensor, labels=None) -> Tensor:
        """Exact per-sample log density, Gaussian constant included."""
        z, logdet, _ = self.forward(x, labels)
        dims = self.cfg.num_positions * self.cfg.channels
        quad = T.mul(T.sum_(T.mul(z, z), axis=(1, 2)), Tensor(0.5))
        const = Tensor(0.5 * dims * LOG_TWO_PI)
        return T.sub(logdet, T.add(quad, const))

    def nll_loss(self, x: Tensor, labels=None):
        """Training objective: mean NLL in nats per dimension plus the
        between-block latent norm penalty.  aux carries reporting values."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        z, logdet, intermediates = self.forward(x, labels)
        dims = self.cfg.num_positions * self.cfg.channels
        quad = T.mul(T.sum_(T.mul(z, z), axis=(1, 2)), Tensor(0.5))
        nll = T.add(T.sub(quad, logdet), Tensor(0.5 * dims * LOG_TWO_PI))
        nll_per_dim = T.mul(T.mean(nll), Tensor(1.0 / dims))
        loss = nll_per_dim
        penalty = None
        if self.cfg.norm_penalty > 0.0 and intermediates:
            for latent in intermediates:
                term = T.mean(T.mul(latent, latent))
                penalty = term if penalty is None else T.add(penalty, term)
            loss = T.add(loss, T.mul(penalty, Tensor(self.cfg.norm_penalty)))
        aux = {
            "nll_nats_per_dim": float(nll_per_dim.data),
            "bits_per_dim": float(nll_per_dim.data) / float(np.log(2.0)),
            "penalty": float(penalty.data) if penalty is not None else 0.0,
            "z": z,
            "intermediates": intermediates,
        }
        return loss, aux

    # ---- generation direction -------------------------------------------
    def sample(self, n: int, labels=None, guidance=None, seed: int = 0, collect_info: bool = False):
        """Draw z from the standard normal prior and invert the stack."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A])) if isinstance(seed, (int, np.integer)) else seed
        z = rng.standard_normal((n, self.cfg.num_positions, self.cfg.channels))
        return self.inverse(z, labels=labels, guidance=guidance, collect_info=collect_info)

    def inverse(self, z: np.ndarray, labels=None, guidance=None, collect_info: bool = False):
        from .decode import stack_inverse

        x, info = stack_inverse(self, np.asarray(z, dtype=np.float64), labels, guidance)
        if collect_info:
            return x, info
        return x


def identity_readout(stack: FlowStack):
    """Force every block to the exact identity map (test helper).

    Zeroes each head and start token, then biases the scale channel so that
    softplus(b) + floor == 1 exactly.
    """
    c = stack.cfg.channels
    b_sigma = float(np.log(np.expm1(1.0 - stack.cfg.sigma_floor)))
    for block in stack.blocks:
        block.params["head.w"].data[:] = 0.0
        bias = block.params["head.b"].data
        bias[:c] = 0.0
        bias[c:] = b_sigma
        block.params["sos"].data[:] = 0.0
