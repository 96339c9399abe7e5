"""Training loop: Adam, step learning-rate decay, value clipping of gradients,
geometric augmentation and per-epoch checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data_io import IMAGENET_MEAN, IMAGENET_STD, RgbdSample, to_tensors
from .metrics import MetricReport, evaluate_maps
from .model import BBSNet, stage_losses, total_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay_every: Optional[int] = 60  # epochs; None disables decay
    decay_factor: float = 10.0
    epochs: int = 150
    batch: int = 10
    clip: float = 0.5
    betas: tuple = (0.9, 0.99)
    weight_decay: float = 0.0
    side: int = 352
    loss_alpha: float = 0.5
    seed: int = 0
    augment: bool = True
    flip: bool = True
    rotate_deg: float = 15.0
    crop_frac: float = 0.1
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    checkpoint_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        for name in ("lr", "epochs", "batch", "clip", "side", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.loss_alpha <= 1:
            raise ValueError(f"train.loss_alpha must lie in [0, 1], got {self.loss_alpha}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class DivergenceError(RuntimeError):
    def __init__(self, message, last_good: Optional[str] = None):
        super().__init__(message)
        self.last_good = last_good


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not cfg.decay_every:
        return cfg.lr
    return cfg.lr / cfg.decay_factor ** (epoch // cfg.decay_every)


def clip_gradients(grads, lo: float = -0.5, hi: float = 0.5):
    """Element-wise clamp of a tensor or an iterable of tensors (in place)."""
    if isinstance(grads, torch.Tensor):
        return grads.clamp_(lo, hi)
    out = []
    for g in grads:
        if g is not None:
            g.clamp_(lo, hi)
        out.append(g)
    return out


def _warp(arr2d, angle, box, side, resample, flip):
    im = Image.fromarray(np.ascontiguousarray(arr2d, dtype=np.float32), mode="F")
    if flip:
        im = im.transpose(Image.FLIP_LEFT_RIGHT)
    if angle:
        im = im.rotate(angle, resample=resample)
    if box is not None:
        im = im.crop(box)
    if im.size != (side[1], side[0]):
        im = im.resize((side[1], side[0]), resample)
    return np.asarray(im, dtype=np.float32)


def apply_transform(sample: RgbdSample, flip: bool, angle: float, box) -> RgbdSample:
    """Apply one geometric transform to rgb, depth (bilinear) and gt (nearest)."""
    h, w = sample.gt.shape[:2]
    size = (h, w)
    rgb = np.stack([_warp(sample.rgb[..., c], angle, box, size, Image.BILINEAR, flip) for c in range(3)], -1)
    depth = _warp(sample.depth[..., 0], angle, box, size, Image.BILINEAR, flip)
    gt = _warp(sample.gt[..., 0], angle, box, size, Image.NEAREST, flip) >= 0.5
    return dataclasses.replace(sample, rgb=np.clip(rgb, 0, 1), depth=np.clip(depth, 0, 1)[..., None],
                               gt=gt.astype(np.float32)[..., None])


def augment(sample: RgbdSample, rng: np.random.Generator, cfg: Optional[TrainConfig] = None) -> RgbdSample:
    """Random flip, rotation and border crop, identical for all three maps."""
    cfg = cfg or TrainConfig()
    h, w = sample.gt.shape[:2]
    flip = bool(cfg.flip and rng.random() < 0.5)
    angle = float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)) if cfg.rotate_deg and rng.random() < 0.5 else 0.0
    box = None
    if cfg.crop_frac and rng.random() < 0.5:
        left, right = (rng.uniform(0, cfg.crop_frac, size=2) * w).astype(int)
        top, bottom = (rng.uniform(0, cfg.crop_frac, size=2) * h).astype(int)
        box = (int(left), int(top), int(w - right), int(h - bottom))
    return apply_transform(sample, flip, angle, box)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, iter, loss_s1, loss_s2, lr)
    checkpoints: list = field(default_factory=list)
    epochs_run: int = 0


def _make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _meta(model, cfg, epoch, iteration):
    mcfg = model.cfg.to_dict()
    tcfg = cfg.to_dict()
    return {"model_config": mcfg, "train_config": tcfg, "config_hash": config_hash(mcfg, tcfg),
            "variant": model.cfg.variant, "loss_alpha": cfg.loss_alpha,
            "epoch": epoch, "iteration": iteration}


def train(model: BBSNet, samples: Sequence[RgbdSample], cfg: TrainConfig,
          out_dir: Optional[str] = None, resume: Optional[str] = None,
          callback=None) -> TrainResult:
    """Train ``model`` in place.

    Data order and augmentation for epoch ``e`` come from a generator seeded
    with ``(cfg.seed, e)``, so a run resumed from the checkpoint of epoch
    ``k`` reproduces the uninterrupted run exactly.
    """
    if len(samples) == 0:
        raise ValueError("training split is empty")
    optimizer = _make_optimizer(model, cfg)
    start_epoch, iteration = 0, 0
    if resume:
        state, opt_state, meta = load_checkpoint(resume)
        model.load_state_dict(state)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        start_epoch, iteration = meta["epoch"] + 1, meta["iteration"]

    result = TrainResult()
    log_fh = writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        new = not (resume and os.path.exists(log_path))
        log_fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(log_fh)
        if new:
            writer.writerow(["epoch", "iter", "loss_s1", "loss_s2", "lr"])
    last_good = resume
    good_state = {k: v.clone() for k, v in model.state_dict().items()}
    n = len(samples)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            model.train()
            for b in range(0, n, cfg.batch):
                idx = order[b:b + cfg.batch]
                if len(idx) < 2 and n > 1:
                    continue  # batch norm needs more than one sample
                batch = [samples[int(i)] for i in idx]
                if cfg.augment:
                    batch = [augment(s, rng, cfg) for s in batch]
                rgb, depth, gt = to_tensors(batch, cfg.mean, cfg.std)
                out = model(rgb, depth)
                loss = total_loss(out, gt, cfg.loss_alpha)
                l1, l2 = stage_losses(out, gt)
                if not torch.isfinite(loss):
                    model.load_state_dict(good_state)
                    raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}, iteration {iteration}",
                                          last_good)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                clip_gradients([p.grad for p in model.parameters()], -cfg.clip, cfg.clip)
                optimizer.step()
                iteration += 1
                row = (epoch, iteration, float(l1.detach()), float(l2.detach()), lr)
                result.history.append(row)
                if writer:
                    writer.writerow(row)
                if callback:
                    callback(model, row)
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                model.load_state_dict(good_state)
                raise DivergenceError(f"non-finite weights after epoch {epoch}, iteration {iteration}", last_good)
            result.epochs_run += 1
            good_state = {k: v.clone() for k, v in model.state_dict().items()}
            if out_dir and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                path = os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt")
                save_checkpoint(path, model, optimizer, _meta(model, cfg, epoch, iteration))
                result.checkpoints.append(path)
                last_good = path
    finally:
        if log_fh:
            log_fh.close()
    return result


@torch.no_grad()
def predict(model: BBSNet, samples: Sequence[RgbdSample], mean=IMAGENET_MEAN, std=IMAGENET_STD,
            batch: int = 16) -> list:
    """Final saliency maps (H x W numpy arrays in [0, 1]) in eval mode."""
    model.eval()
    maps = []
    for b in range(0, len(samples), batch):
        chunk = [samples[i] for i in range(b, min(b + batch, len(samples)))]
        rgb, depth, _ = to_tensors(chunk, mean, std)
        out = model.predict(rgb, depth)
        maps.extend(out[:, 0].double().numpy())
    return maps


def evaluate_model(model: BBSNet, samples: Sequence[RgbdSample], mean=IMAGENET_MEAN, std=IMAGENET_STD,
                   normalize: bool = True, meta: Optional[dict] = None) -> MetricReport:
    maps = predict(model, samples, mean, std)
    return evaluate_maps(((m, samples[i].gt[..., 0]) for i, m in enumerate(maps)),
                         normalize=normalize, meta=meta)


def moving_average(values, k: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < k:
        return values
    return np.convolve(values, np.ones(k) / k, mode="valid")


def is_finite_history(history) -> bool:
    return all(math.isfinite(r[2]) and math.isfinite(r[3]) for r in history)
