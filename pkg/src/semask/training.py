"""Losses, optimizer, schedule, augmentation, and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from semask import kernels
from semask import tensor as T
from semask.rng import make_rng
from semask.tensor import NonFiniteError, ShapeError, Tensor

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss or an activation became non-finite during training."""


@dataclass
class TrainConfig:
    # desk-scale defaults; training is from scratch, so the base rate sits
    # well above the published finetuning rate (the "paper" profile keeps 1e-4)
    base_lr: float = 3e-3
    weight_decay: float = 1e-4
    alpha: float = 0.4           # weight of the prior-prediction loss
    total_iters: int = 500
    warmup_iters: int = 50
    batch_size: int = 4
    crop: int = 64
    scales: tuple[float, ...] = DEFAULT_SCALES
    jitter: float = 0.2
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    ignore_label: int = 255
    seed: int = 7
    augment: bool = True

    def __post_init__(self):
        self.scales = tuple(self.scales)
        self.mean = tuple(self.mean)
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError("warmup_iters must satisfy 0 <= warmup < total_iters")
        if self.batch_size < 1 or self.crop < 4:
            raise ValueError("batch_size must be >= 1 and crop >= 4")
        if not self.scales:
            raise ValueError("scales must be non-empty")


# ---------------------------------------------------------------------------
# losses


def pixel_ce_loss(logits: Tensor, gt: np.ndarray, ignore_label: int) -> Tensor:
    """Cross-entropy averaged over the non-ignored pixels of [B, H, W]."""
    if logits.ndim != 4:
        raise ShapeError(f"pixel_ce_loss expects [B, H, W, K] logits, got {logits.shape}")
    gt = np.asarray(gt)
    if gt.shape != logits.shape[:3]:
        raise ShapeError(f"ground truth shape {gt.shape} does not match logits {logits.shape}")
    k = logits.shape[3]
    flat = T.reshape(logits, (-1, k))
    return T.softmax_cross_entropy(flat, gt.ravel(), ignore_label)


def total_loss(main: Tensor, prior: Tensor, gt: np.ndarray, alpha: float,
               ignore_label: int) -> tuple[Tensor, Tensor, Tensor]:
    """(L_T, L1, L2) with L_T = L1 + alpha * L2."""
    l1 = pixel_ce_loss(main, gt, ignore_label)
    l2 = pixel_ce_loss(prior, gt, ignore_label)
    return l1 + alpha * l2, l1, l2


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               step: int, lr: float, weight_decay: float) -> None:
    """One decoupled-decay Adam update, in place on (param, m, v).

    ``step`` is the 1-based update count used for bias correction. Decay is
    applied multiplicatively after the gradient step.
    """
    if grad.shape != param.shape:
        raise ShapeError(f"grad shape {grad.shape} does not match param {param.shape}")
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * (grad * grad)
    m_hat = m / (1.0 - ADAM_BETA1 ** step)
    v_hat = v / (1.0 - ADAM_BETA2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if weight_decay:
        param -= lr * weight_decay * param


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    Decay is skipped for rank <= 1 tensors: biases, norm gains/biases and
    the scalar semantic gates.
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float):
        self.params = params
        self.weight_decay = weight_decay
        self.state = OptimizerState()
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        self.state.step += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if p.ndim > 1 else 0.0
            adamw_step(p.data, p.grad, self.state.m[name], self.state.v[name],
                       self.state.step, lr, wd)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup into a power-0.9 polynomial decay to zero."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        return cfg.base_lr * (iteration + 1) / cfg.warmup_iters
    return cfg.base_lr * (1.0 - iteration / cfg.total_iters) ** 0.9


# ---------------------------------------------------------------------------
# augmentation


def normalize_image(image: np.ndarray, mean) -> np.ndarray:
    return image.astype(np.float32) - np.asarray(mean, dtype=np.float32)


def nearest_resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    iy = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.intp)
    ix = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.intp)
    return mask[iy][:, ix]


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = kernels.bilinear_forward(
        np.ascontiguousarray(image[None].astype(np.float32)), out_h, out_w)
    return out[0]


def augment(image: np.ndarray, mask: np.ndarray, rng, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mean subtraction, random rescale, flip, photometric jitter, crop/pad.

    Draw order from ``rng`` is fixed (scale, flip, contrast, brightness,
    crop offsets) so traces are reproducible.
    """
    img = normalize_image(image, cfg.mean)
    msk = np.asarray(mask)

    if cfg.augment:
        scale = cfg.scales[int(rng.integers(len(cfg.scales)))]
        if scale != 1.0:
            nh = max(1, int(round(img.shape[0] * scale)))
            nw = max(1, int(round(img.shape[1] * scale)))
            img = _resize_image(img, nh, nw)
            msk = nearest_resize_mask(msk, nh, nw)
        if rng.random() < 0.5:
            img = img[:, ::-1].copy()
            msk = msk[:, ::-1].copy()
        contrast = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
        brightness = rng.uniform(-cfg.jitter, cfg.jitter)
        img = img * np.float32(contrast) + np.float32(brightness)

    crop = cfg.crop
    pad_h = max(0, crop - img.shape[0])
    pad_w = max(0, crop - img.shape[1])
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)))
        msk = np.pad(msk, ((0, pad_h), (0, pad_w)), constant_values=cfg.ignore_label)
    if cfg.augment:
        oy = int(rng.integers(img.shape[0] - crop + 1))
        ox = int(rng.integers(img.shape[1] - crop + 1))
    else:
        oy = ox = 0
    return (np.ascontiguousarray(img[oy:oy + crop, ox:ox + crop]),
            np.ascontiguousarray(msk[oy:oy + crop, ox:ox + crop]))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    rows: list[tuple[int, float, float, float, float]]  # (iter, lr, L1, L2, LT)
    rng_state: dict
    optimizer: "AdamW | None" = None


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "L1", "L2", "LT"])
        writer.writerows(rows)


def train_loop(model, dataset, cfg: TrainConfig, log_path=None,
               progress=None) -> TrainResult:
    """Iterate: sample, augment, forward, loss, backward, AdamW update.

    Deterministic given ``cfg.seed``. Raises ``TrainingDiverged`` if any
    forward value or loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    batch_rng = make_rng(cfg.seed, "train", "batch")
    aug_rng = make_rng(cfg.seed, "train", "augment")
    optimizer = AdamW(model.named_parameters(), cfg.weight_decay)
    rows = []
    for it in range(cfg.total_iters):
        idx = batch_rng.integers(0, len(dataset), size=cfg.batch_size)
        images = np.empty((cfg.batch_size, cfg.crop, cfg.crop, 3), np.float32)
        masks = np.empty((cfg.batch_size, cfg.crop, cfg.crop), np.int64)
        for b, i in enumerate(idx):
            img, msk = dataset[int(i)]
            images[b], masks[b] = augment(img, msk, aug_rng, cfg)

        model.zero_grad()
        try:
            out = model.forward(images)
            if out.prior is not None:
                lt, l1, l2 = total_loss(out.main, out.prior, masks, cfg.alpha,
                                        cfg.ignore_label)
            else:
                l1 = pixel_ce_loss(out.main, masks, cfg.ignore_label)
                lt, l2 = l1, None
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        lt_val = lt.item()
        if not math.isfinite(lt_val):
            raise TrainingDiverged(f"iteration {it}: loss = {lt_val}")

        T.backward(lt)
        lr = lr_at(it, cfg)
        optimizer.step(lr)
        row = (it, lr, l1.item(), 0.0 if l2 is None else l2.item(), lt_val)
        rows.append(row)
        if progress is not None:
            progress(row)

    if log_path is not None:
        write_metrics_csv(log_path, rows)
    return TrainResult(rows=rows, rng_state={
        "batch": batch_rng.bit_generator.state,
        "augment": aug_rng.bit_generator.state,
    }, optimizer=optimizer)
