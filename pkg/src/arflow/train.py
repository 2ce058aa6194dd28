"""Training loop: deterministic batching, cosine schedule, CSV logs, AFCK checkpoints."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .checkpoint import load_checkpoint, round_trip_f32, save_checkpoint
from .config import RunConfig
from .data import Dataset
from .decode import forward_np
from .errors import CheckpointError, ConfigError, NonFiniteError
from .flow import FlowStack
from .latent import (NoiseSpec, ToyDecoder, ToyEncoder, decoder_finetune_step,
                     elbo_objective, encode_noisy)
from .optim import AdamW, cosine_lr

METRICS_COLUMNS = ("step", "nll_nats_per_dim", "bits_per_dim", "lr", "grad_norm")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class TrainResult:
    stack: FlowStack
    encoder: ToyEncoder | None
    decoder: ToyDecoder | None
    steps_done: int
    diverged: bool
    ckpt_path: str
    metrics_path: str


def build_model(cfg: RunConfig):
    """Flow stack plus, for latent configs, the frozen encoder and toy decoder."""
    stack = FlowStack(cfg.flow_config(), seed=cfg.seed)
    enc = dec = None
    if cfg.latent_channels:
        enc = ToyEncoder(patch=cfg.patch, latent_channels=cfg.latent_channels)
        dec = ToyDecoder(cfg.latent_channels, patch=cfg.patch, hidden=cfg.decoder_hidden)
    return stack, enc, dec


def _trainable(stack: FlowStack, dec: ToyDecoder | None, objective: str):
    params = dict(stack.params())
    if dec is not None and objective == "elbo":
        params.update(dec.params())
    return params


def _images_from_rows(rows: np.ndarray, size: int) -> np.ndarray:
    b, d, c = rows.shape
    if c != 1 or d != size * size:
        raise ConfigError(f"image rows [{d},{c}] do not form a {size}x{size} grid")
    return rows.reshape(b, size, size).astype(np.float64)


def _grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.square(p.grad).sum())
    return float(np.sqrt(total))


def _clip_grads(params: dict, norm: float, clip: float):
    if clip > 0.0 and norm > clip:
        scale = clip / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


def _quantize_live_state(params: dict, opt: AdamW):
    """Round live float64 state to float32 so disk and memory agree bitwise."""
    for p in params.values():
        p.data[...] = round_trip_f32(p.data)
    for arr in opt.state_tensors().values():
        arr[...] = round_trip_f32(arr)


def _checkpoint_blob(cfg: RunConfig, step: int, rng: np.random.Generator,
                     finetuned: bool = False) -> dict:
    run = cfg.to_dict()
    run.pop("out_dir")  # a runtime location, not model state
    return {"kind": "train", "run": run, "step": step,
            "rng": rng.bit_generator.state, "finetuned": finetuned}


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def train(cfg: RunConfig, ds: Dataset, resume: str | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run (or continue) a training loop; everything is derived from cfg.seed.

    Per-step draw order is fixed: batch indices, then label dropout (for
    conditional stacks), then latent noise (for latent configs).  Checkpoints
    quantize the live state through float32 at save time, so an interrupted
    and resumed run is bitwise identical to an uninterrupted one.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    timing_path = os.path.join(cfg.out_dir, "timing.csv")
    ckpt_path = os.path.join(cfg.out_dir, "ckpt.afck")

    step0 = 0
    if resume is not None:
        tensors, blob = load_checkpoint(resume)
        if blob.get("kind") != "train":
            raise CheckpointError(f"checkpoint kind {blob.get('kind')!r} is not resumable")
        run = dict(blob["run"])
        # the checkpoint owns model/optimizer state; the caller owns run extent
        run["out_dir"] = cfg.out_dir
        run["total_images"] = cfg.total_images
        cfg = RunConfig.from_dict(run)
        stack, enc, dec = build_model(cfg)
        params = _trainable(stack, dec, cfg.objective)
        opt = AdamW(params, lr=cfg.lr_max, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor '{name}'")
            p.data[...] = tensors[name]
        opt.load_state_tensors(tensors)
        rng = _restore_rng(blob["rng"])
        step0 = int(blob["step"])
        opt.step_count = step0  # bias correction must continue, not restart
        already_finetuned = bool(blob.get("finetuned", False))
    else:
        stack, enc, dec = build_model(cfg)
        params = _trainable(stack, dec, cfg.objective)
        opt = AdamW(params, lr=cfg.lr_max, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x7E]))
        already_finetuned = False

    if ds.n < 1:
        raise ConfigError("cannot train on an empty dataset")
    fc = stack.cfg
    if enc is None and (ds.positions, ds.channels) != (fc.num_positions, fc.channels):
        raise ConfigError(
            f"dataset rows [{ds.positions},{ds.channels}] do not match the "
            f"architecture [{fc.num_positions},{fc.channels}]")
    if enc is not None and (ds.positions, ds.channels) != (cfg.image_size ** 2, 1):
        raise ConfigError(
            f"latent config wants {cfg.image_size}x{cfg.image_size} images, "
            f"dataset rows are [{ds.positions},{ds.channels}]")
    conditional = stack.cfg.conditional
    if conditional and ds.labels is None:
        raise ConfigError("config declares classes but the dataset has no labels")
    noise = NoiseSpec(cfg.sigma_l)

    fresh_metrics = resume is None or not os.path.exists(metrics_path)
    mf = open(metrics_path, "w" if fresh_metrics else "a")
    tf = open(timing_path, "w" if fresh_metrics else "a")
    if fresh_metrics:
        mf.write(",".join(METRICS_COLUMNS) + "\n")
        tf.write("step,wall_ms\n")

    total = cfg.total_steps
    stop_at = total if stop_after is None else min(total, step0 + stop_after)
    diverged = False
    step = step0
    try:
        while step < stop_at:
            step += 1
            t0 = time.perf_counter()
            idx = rng.integers(0, ds.n, size=cfg.batch_size)
            labels = None
            if conditional:
                labels = ds.labels[idx].astype(np.int64)
                if cfg.label_drop > 0.0:
                    drop = rng.uniform(size=cfg.batch_size) < cfg.label_drop
                    labels = np.where(drop, stack.null_class, labels)
            rows = ds.data[idx].astype(np.float64)
            try:
                if enc is None:
                    loss, aux = stack.nll_loss(Tensor(rows), labels)
                else:
                    imgs = _images_from_rows(rows, cfg.image_size)
                    noisy = encode_noisy(enc, imgs, noise, rng)
                    if cfg.objective == "elbo":
                        loss, parts = elbo_objective(stack, dec, enc, imgs, noisy,
                                                     cfg.sigma_dec, labels)
                        aux = parts["aux"]
                    else:
                        loss, aux = stack.nll_loss(Tensor(noisy), labels)
                opt.zero_grad()
                T.backward(loss)
            except NonFiniteError:
                diverged = True
                step -= 1  # the failed step never happened; last checkpoint stands
                break
            gnorm = _grad_norm(params)
            _clip_grads(params, gnorm, cfg.grad_clip)
            lr = cosine_lr(step - 1, total, lr_max=cfg.lr_max, lr_min=cfg.lr_min)
            if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
                lr = cfg.lr_max * step / cfg.warmup_steps
            opt.step(lr=lr)
            wall_ms = (time.perf_counter() - t0) * 1e3
            mf.write(",".join([str(step), _fmt(aux["nll_nats_per_dim"]),
                               _fmt(aux["bits_per_dim"]), _fmt(lr), _fmt(gnorm)]) + "\n")
            tf.write(f"{step},{wall_ms:.3f}\n")
            if step % cfg.checkpoint_every == 0 or step == total:
                _quantize_live_state(params, opt)
                tensors = {n: p.data for n, p in params.items()}
                tensors.update(opt.state_tensors())
                if dec is not None and cfg.objective != "elbo":
                    tensors.update({n: p.data for n, p in dec.params().items()})
                save_checkpoint(ckpt_path, tensors, _checkpoint_blob(cfg, step, rng))
    finally:
        mf.close()
        tf.close()

    completed = step >= total
    if completed and not diverged and dec is not None and cfg.decoder_steps > 0 and not already_finetuned:
        finetune_decoder(cfg, ds, stack, enc, dec)
        for p in dec.params().values():
            p.data[...] = round_trip_f32(p.data)
        tensors = {n: p.data for n, p in params.items()}
        tensors.update(opt.state_tensors())
        tensors.update({n: p.data for n, p in dec.params().items()})
        save_checkpoint(ckpt_path, tensors, _checkpoint_blob(cfg, step, rng, finetuned=True))

    return TrainResult(stack=stack, encoder=enc, decoder=dec, steps_done=step,
                       diverged=diverged, ckpt_path=ckpt_path, metrics_path=metrics_path)


def finetune_decoder(cfg: RunConfig, ds: Dataset, stack: FlowStack,
                     enc: ToyEncoder, dec: ToyDecoder) -> str:
    """Post-training decoder polish on freshly noised latents (plain L2)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xF1]))
    opt = AdamW(dec.params(), lr=cfg.decoder_lr, weight_decay=0.0)
    noise = NoiseSpec(cfg.sigma_l)
    path = os.path.join(cfg.out_dir, "finetune.csv")
    with open(path, "w") as f:
        f.write("step,patch_mse\n")
        for it in range(1, cfg.decoder_steps + 1):
            idx = rng.integers(0, ds.n, size=min(cfg.batch_size, ds.n))
            imgs = _images_from_rows(ds.data[idx].astype(np.float64), cfg.image_size)
            mse = decoder_finetune_step(dec, opt, enc, imgs, noise, rng)
            f.write(f"{it},{_fmt(mse)}\n")
    return path


def load_model(ckpt_path: str):
    """Rebuild a model (stack, encoder, decoder, cfg) from an AFCK checkpoint."""
    tensors, blob = load_checkpoint(ckpt_path)
    if "run" not in blob:
        raise CheckpointError("checkpoint has no run config blob")
    cfg = RunConfig.from_dict(dict(blob["run"]))
    stack, enc, dec = build_model(cfg)
    targets = dict(stack.params())
    if dec is not None:
        targets.update(dec.params())
    for name, p in targets.items():
        if name in tensors:
            p.data[...] = tensors[name]
        elif not name.startswith("dec."):
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
    return stack, enc, dec, cfg


def evaluate_nll(stack: FlowStack, ds: Dataset, seed: int = 0,
                 enc: ToyEncoder | None = None, sigma_l: float = 0.0,
                 image_size: int = 8, use_labels: bool = True,
                 batch: int = 512):
    """Mean NLL in nats/dim over a dataset, fresh noise per sample.

    Uses the batched numpy density pass; non-finite samples are reported
    rather than silently averaged.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xEA]))
    dims = stack.cfg.num_positions * stack.cfg.channels
    total = 0.0
    bad = 0
    n = ds.n
    for lo in range(0, n, batch):
        rows = ds.data[lo:lo + batch].astype(np.float64)
        if enc is not None:
            imgs = _images_from_rows(rows, image_size)
            x = encode_noisy(enc, imgs, NoiseSpec(sigma_l), rng)
        else:
            x = rows
        labels = None
        if stack.cfg.conditional and use_labels and ds.labels is not None:
            labels = ds.labels[lo:lo + batch].astype(np.int64)
        _, _, logp, finite = forward_np(stack, x, labels)
        bad += int((~finite).sum())
        total += float(-logp[finite].sum())
    if n == 0 or bad == n:
        raise ConfigError("no finite samples to average")
    return total / ((n - bad) * dims), bad
