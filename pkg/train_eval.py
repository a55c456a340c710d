"""
Desk-scale training and evaluation for Deconver: soft Dice + cross-entropy
loss, AdamW with a warmup/cosine schedule, synthetic ellipse data, random
patches with flip/noise augmentation, sliding-window inference and the
DSC / HD95 metrics.

Logits and masks passed to the losses are batched, (B, C, *spatial). A single
output channel means a binary task (sigmoid); more than one means mutually
exclusive classes (softmax over a one-hot mask).
"""
import csv
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from checkpoint import save_checkpoint
from config import DEFAULT_LR, DEFAULT_WEIGHT_DECAY, MAX_WORKERS, WARMUP_FRACTION
from console import log, progress
from errors import ConfigError, DivergenceError, MaskError, ShapeMismatchError, SpatialExtentError

SOFT_DICE_SMOOTH = 1e-5
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
THRESHOLD = 0.5
HD_PERCENTILE = 95.0
NOISE_SIGMA = 0.05
BLUR_KERNEL = np.array([1.0, 2.0, 1.0]) / 4.0


# --- TYPES ---

def _check_binary(x, what):
    if not bool(((x == 0) | (x == 1)).all()):
        raise MaskError(f"{what} must be binary (0/1)")


@dataclass(frozen=True)
class SegSample:
    image: torch.Tensor  # (C_in, *spatial)
    mask: torch.Tensor   # (C_out, *spatial), values in {0, 1}

    def __post_init__(self):
        if self.image.dim() != self.mask.dim() or self.image.shape[1:] != self.mask.shape[1:]:
            raise ShapeMismatchError(self.image.shape, self.mask.shape, "image vs mask spatial shape")
        _check_binary(self.mask, "mask")

    @property
    def spatial(self):
        return tuple(self.image.shape[1:])


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    patch: Optional[tuple] = None  # None trains on whole samples
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    warmup_fraction: float = WARMUP_FRACTION
    seed: int = 0
    flip: bool = True
    noise: bool = True
    noise_sigma: float = NOISE_SIGMA

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError(f"train.steps and train.batch_size must be >= 1, got {self.steps}, {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0 or self.noise_sigma < 0:
            raise ConfigError("train.lr, train.weight_decay and train.noise_sigma must be >= 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"train.warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.patch is not None:
            self.patch = tuple(int(p) for p in self.patch)

    def check_network(self, net_cfg):
        """Patch extents must survive L-1 halvings."""
        from deconver_net import check_divisible
        if self.patch is not None:
            check_divisible(self.patch, net_cfg)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # (sample, class, dsc, hd95 or None)

    @property
    def mean_dsc(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_hd95(self):
        defined = [r[3] for r in self.rows if r[3] is not None]
        return float(np.mean(defined)) if defined else None

    def per_class(self):
        classes = sorted({r[1] for r in self.rows})
        return {c: float(np.mean([r[2] for r in self.rows if r[1] == c])) for c in classes}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sample", "class", "dsc", "hd95"])
            for sample, cls, dsc, hd in self.rows:
                writer.writerow([sample, cls, repr(dsc), "NA" if hd is None else repr(hd)])


# --- LOSS ---

def probabilities(logits, channel_axis=1):
    if logits.shape[channel_axis] == 1:
        return torch.sigmoid(logits)
    return torch.softmax(logits, dim=channel_axis)


def soft_dice_loss(logits, mask, smooth=SOFT_DICE_SMOOTH):
    """1 - mean over (sample, channel) of (2Σpg + s) / (Σp + Σg + s)."""
    if logits.shape != mask.shape:
        raise ShapeMismatchError(logits.shape, mask.shape, "logits vs mask")
    _check_binary(mask, "mask")
    p = probabilities(logits)
    axes = tuple(range(2, logits.dim()))
    intersection = (p * mask).sum(dim=axes)
    dice = (2 * intersection + smooth) / (p.sum(dim=axes) + mask.sum(dim=axes) + smooth)
    return 1 - dice.mean()


def cross_entropy(logits, mask):
    if logits.shape[1] == 1:
        return F.binary_cross_entropy_with_logits(logits, mask)
    return -(mask * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def soft_dice_ce_loss(logits, mask, smooth=SOFT_DICE_SMOOTH):
    return soft_dice_loss(logits, mask, smooth) + cross_entropy(logits, mask)


# --- OPTIMIZER ---

@torch.no_grad()
def adamw_step(param, grad, state, lr, weight_decay=0.0, betas=BETAS, eps=ADAM_EPS):
    """One in-place AdamW update of `param`; `state` starts empty and is filled on first use."""
    if not state:
        state["step"] = 0
        state["exp_avg"] = torch.zeros_like(param)
        state["exp_avg_sq"] = torch.zeros_like(param)
    beta1, beta2 = betas
    state["step"] += 1
    t = state["step"]
    exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)

    denom = (exp_avg_sq.sqrt() / math.sqrt(1 - beta2 ** t)).add_(eps)
    step_size = lr / (1 - beta1 ** t)
    if weight_decay != 0:
        param.mul_(1 - lr * weight_decay)
    param.addcdiv_(exp_avg, denom, value=-step_size)
    return param


class AdamW(torch.optim.Optimizer):
    def __init__(self, params, lr=DEFAULT_LR, betas=BETAS, eps=ADAM_EPS, weight_decay=DEFAULT_WEIGHT_DECAY):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                adamw_step(p, p.grad, self.state[p], group["lr"], group["weight_decay"],
                           group["betas"], group["eps"])
        return loss


def warmup_steps(total, warmup_fraction=WARMUP_FRACTION):
    if warmup_fraction <= 0:
        return 0
    return min(max(1, round(warmup_fraction * total)), max(total - 1, 0))


def lr_schedule(t, total, base_lr=DEFAULT_LR, warmup_fraction=WARMUP_FRACTION):
    """Linear ramp 0 -> base_lr over the warmup steps, then cosine down to 0 at t = total."""
    w = warmup_steps(total, warmup_fraction)
    if t < w:
        return base_lr * t / w
    if total <= w:
        return base_lr
    return base_lr * 0.5 * (1 + math.cos(math.pi * (t - w) / (total - w)))


# --- SYNTHETIC DATA ---

def _ellipse_sample(spatial, seed, index, dtype):
    rng = np.random.default_rng([seed, index])
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spatial], indexing="ij")
    mask = np.zeros(spatial, dtype=bool)
    for _ in range(rng.integers(1, 4)):
        centre = [rng.uniform(0.2, 0.8) * s for s in spatial]
        axes = [max(1.0, rng.uniform(0.08, 0.22) * s) for s in spatial]
        mask |= sum(((g - c) / a) ** 2 for g, c, a in zip(grid, centre, axes)) <= 1.0

    image = 0.1 + 0.9 * mask.astype(np.float64)
    for axis in range(len(spatial)):
        image = ndimage.convolve1d(image, BLUR_KERNEL, axis=axis, mode="nearest")
    image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, size=spatial), 0.0, None)
    return SegSample(torch.from_numpy(image[None]).to(dtype), torch.from_numpy(mask[None]).to(dtype))


def synth_dataset(n, spatial, seed=0, dtype=None, max_workers=MAX_WORKERS, quiet=True):
    """n ellipse-phantom samples; sample i depends only on (seed, i)."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    spatial = tuple(int(s) for s in spatial)
    dtype = dtype or torch.get_default_dtype()
    samples = [None] * n
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(_ellipse_sample, spatial, seed, i, dtype): i for i in range(n)}
        for future in progress(as_completed(future_to_index), desc="Synthesizing samples", total=n,
                               disable=quiet):
            samples[future_to_index[future]] = future.result()
    return samples


def kfold_split(n, k, seed=0):
    """k disjoint folds covering range(n), each sorted."""
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in fold) for fold in np.array_split(order, k)]


# --- PATCHES AND AUGMENTATION ---

def random_patch(sample, patch, rng):
    if patch is None:
        return sample.image, sample.mask
    if len(patch) != len(sample.spatial) or any(p > s for p, s in zip(patch, sample.spatial)):
        raise SpatialExtentError(f"patch {tuple(patch)} does not fit sample of extent {sample.spatial}")
    origin = [int(rng.integers(0, s - p + 1)) for s, p in zip(sample.spatial, patch)]
    window = (slice(None),) + tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return sample.image[window], sample.mask[window]


def augment(image, mask, rng, flip=True, noise=True, sigma=NOISE_SIGMA):
    if flip:
        axes = [axis + 1 for axis in range(image.dim() - 1) if rng.random() < 0.5]
        if axes:
            image, mask = torch.flip(image, axes), torch.flip(mask, axes)
    if noise and sigma > 0:
        image = image + torch.from_numpy(rng.normal(0.0, sigma, size=tuple(image.shape))).to(image.dtype)
    return image, mask


def sample_batch(dataset, cfg, step, dtype=None):
    """Deterministic batch for (cfg.seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    images, masks = [], []
    for i in rng.integers(0, len(dataset), size=cfg.batch_size):
        image, mask = random_patch(dataset[int(i)], cfg.patch, rng)
        image, mask = augment(image, mask, rng, cfg.flip, cfg.noise, cfg.noise_sigma)
        images.append(image)
        masks.append(mask)
    images, masks = torch.stack(images), torch.stack(masks)
    if dtype is not None:
        images, masks = images.to(dtype), masks.to(dtype)
    return images, masks


# --- TRAINING ---

@dataclass
class TrainResult:
    log: list = field(default_factory=list)  # (step, lr, loss)
    best_loss: float = math.inf
    best_step: int = -1
    final_dice_loss: float = math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.log:
                writer.writerow([step, repr(lr), repr(loss)])


def train(network, dataset, cfg, out_dir=None, quiet=False):
    """
    Optimize `network` in place on random (augmented) patches of `dataset`.

    With out_dir set, writes train_log.csv plus best.dcvw (lowest step loss)
    and final.dcvw. Raises DivergenceError on the first non-finite loss.
    """
    cfg.check_network(network.cfg)
    dtype = next(network.parameters()).dtype
    optimizer = AdamW(network.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult()
    best_state = None

    network.train()
    for step in progress(range(cfg.steps), desc="Training", total=cfg.steps, disable=quiet):
        lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_fraction)
        for group in optimizer.param_groups:
            group["lr"] = lr
        images, masks = sample_batch(dataset, cfg, step, dtype)

        optimizer.zero_grad(set_to_none=True)
        loss = soft_dice_ce_loss(network(images), masks)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        loss.backward()
        optimizer.step()

        result.log.append((step, lr, value))
        if value < result.best_loss:
            result.best_loss, result.best_step = value, step
            best_state = {n: p.detach().clone() for n, p in network.named_parameters()}

    result.final_dice_loss = dataset_dice_loss(network, dataset)
    log("INFO", f"Trained {cfg.steps} steps: best loss {result.best_loss:.4f} at step {result.best_step}, "
                f"final soft-Dice loss {result.final_dice_loss:.4f}")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.to_csv(os.path.join(out_dir, "train_log.csv"))
        save_checkpoint(os.path.join(out_dir, "best.dcvw"), network,
                        meta={"step": result.best_step, "loss": result.best_loss}, state=best_state)
        save_checkpoint(os.path.join(out_dir, "final.dcvw"), network,
                        meta={"step": cfg.steps - 1, "loss": result.log[-1][2]})
    return result


@torch.no_grad()
def dataset_dice_loss(network, dataset):
    """Soft-Dice loss over whole, unaugmented samples."""
    network.eval()
    dtype = next(network.parameters()).dtype
    images = torch.stack([s.image for s in dataset]).to(dtype)
    masks = torch.stack([s.mask for s in dataset]).to(dtype)
    return float(soft_dice_loss(network(images), masks))


# --- INFERENCE ---

def window_offsets(extent, patch):
    """Start offsets at stride patch//2, with a last window clamped to end at the edge."""
    if patch > extent:
        raise SpatialExtentError(f"patch extent {patch} exceeds image extent {extent}")
    stride = max(1, patch // 2)
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] + patch < extent:
        offsets.append(extent - patch)
    return offsets


@torch.no_grad()
def sliding_window_predict(network, image, patch=None):
    """Probability map (C_out, *spatial) from 50%-overlapping windows averaged uniformly."""
    network.eval()
    spatial = tuple(image.shape[1:])
    patch = tuple(patch or spatial)
    if len(patch) != len(spatial):
        raise SpatialExtentError(f"patch {patch} does not match image spatial shape {spatial}")
    dtype = next(network.parameters()).dtype
    image = image.to(dtype)

    probs = torch.zeros((network.cfg.out_channels, *spatial), dtype=dtype)
    counts = torch.zeros(spatial, dtype=dtype)
    for origin in itertools.product(*[window_offsets(s, p) for s, p in zip(spatial, patch)]):
        window = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        logits = network(image[(slice(None),) + window].unsqueeze(0))[0]
        probs[(slice(None),) + window] += probabilities(logits, channel_axis=0)
        counts[window] += 1
    return probs / counts


def binarize(probs, threshold=THRESHOLD):
    if probs.shape[0] == 1:
        return (probs > threshold).to(probs.dtype)
    return F.one_hot(probs.argmax(dim=0), probs.shape[0]).movedim(-1, 0).to(probs.dtype)


# --- METRICS ---

def _as_bool(x, what):
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    _check_binary(x, what)
    return x.astype(bool)


def dice_score(pred, gt):
    p, g = _as_bool(pred, "prediction"), _as_bool(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeMismatchError(p.shape, g.shape, "prediction vs ground truth")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def surface(mask):
    """Foreground voxels with a background face-neighbour; outside the array counts as background."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _check_spacing(spacing, rank):
    if spacing is None:
        return np.ones(rank)
    spacing = np.asarray(spacing, dtype=np.float64).reshape(-1)
    if spacing.size != rank:
        raise ConfigError(f"spacing has {spacing.size} entries, masks have {rank} spatial axes")
    if not np.all(spacing > 0):
        raise ConfigError(f"spacing must be positive, got {spacing.tolist()}")
    return spacing


def hd95(pred, gt, spacing=None):
    """Symmetric 95th-percentile surface distance; None when exactly one mask is empty."""
    p, g = _as_bool(pred, "prediction"), _as_bool(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeMismatchError(p.shape, g.shape, "prediction vs ground truth")
    spacing = _check_spacing(spacing, p.ndim)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return None
    p_pts = np.argwhere(surface(p)) * spacing
    g_pts = np.argwhere(surface(g)) * spacing
    d_pg, _ = cKDTree(g_pts).query(p_pts)
    d_gp, _ = cKDTree(p_pts).query(g_pts)
    return float(max(np.percentile(d_pg, HD_PERCENTILE), np.percentile(d_gp, HD_PERCENTILE)))


def _sample_rows(index, pred, gt, spacing):
    return [(index, c, dice_score(pred[c], gt[c]), hd95(pred[c], gt[c], spacing)) for c in range(pred.shape[0])]


def evaluate(preds, gts, spacing=None, max_workers=MAX_WORKERS, quiet=True):
    """Per-sample, per-class DSC/HD95 over (C, *spatial) binary masks, computed in parallel."""
    if len(preds) != len(gts):
        raise ShapeMismatchError((len(preds),), (len(gts),), "prediction vs ground truth count")
    for pred in preds:
        _check_spacing(spacing, pred.ndim - 1)
    by_index = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(_sample_rows, i, p, g, spacing): i
                           for i, (p, g) in enumerate(zip(preds, gts))}
        for future in progress(as_completed(future_to_index), desc="Evaluating", total=len(preds),
                               disable=quiet):
            by_index[future_to_index[future]] = future.result()
    return MetricsReport([row for i in sorted(by_index) for row in by_index[i]])


def evaluate_network(network, dataset, patch=None, spacing=None, quiet=True):
    preds = [binarize(sliding_window_predict(network, s.image, patch)) for s in dataset]
    return evaluate(preds, [s.mask for s in dataset], spacing, quiet=quiet)
