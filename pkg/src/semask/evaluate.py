"""Confusion-matrix metrics, inference protocols, feature similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from semask import kernels
from semask.tensor import no_grad
from semask.training import nearest_resize_mask, normalize_image

DEFAULT_MEAN = (0.5, 0.5, 0.5)


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, ignore_label: int,
                         num_classes: int) -> ConfusionMatrix:
    """Count (gt, pred) pairs over non-ignored pixels."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt sizes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    p, g = pred[valid], gt[valid]
    if ((g < 0) | (g >= num_classes)).any() or ((p < 0) | (p >= num_classes)).any():
        raise ValueError(f"labels outside [0, {num_classes}) in confusion input")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean.

    Classes absent from both prediction and ground truth are excluded from
    the mean; if every class is absent the metric is undefined.
    """
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("mIoU undefined: all classes have empty union")
    ious = np.full(cm.num_classes, np.nan)
    ious[present] = inter[present] / union[present]
    return ious, float(ious[present].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total()
    if total == 0:
        raise ValueError("pixel accuracy undefined on an empty confusion matrix")
    return float(np.diag(cm.counts).sum() / total)


# ---------------------------------------------------------------------------
# inference


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = kernels.bilinear_forward(
        np.ascontiguousarray(image[None].astype(np.float32)), out_h, out_w)
    return out[0]


def _short_edge_size(h: int, w: int, target: int) -> tuple[int, int]:
    if h <= w:
        return target, max(1, int(round(w * target / h)))
    return max(1, int(round(h * target / w))), target


def infer_single(model, image: np.ndarray, train_res: int,
                 mean=DEFAULT_MEAN) -> np.ndarray:
    """Short edge to train_res, forward, logits back to input size, argmax.

    Ties pick the lowest class index. Output extents equal input extents.
    """
    h, w = image.shape[:2]
    x = normalize_image(image, mean)
    resized = min(h, w) != train_res
    if resized:
        x = _resize_image(x, *_short_edge_size(h, w, train_res))
    with no_grad():
        logits = model.forward(x[None]).main.data
    if resized:
        logits = kernels.bilinear_forward(np.ascontiguousarray(logits), h, w)
    return np.argmax(logits[0], axis=-1).astype(np.int64)


def infer_multiscale(model, image: np.ndarray, scales, flip: bool = False,
                     mean=DEFAULT_MEAN) -> np.ndarray:
    """Average softmax probabilities over rescaled (and optionally mirrored)
    versions of the image, then argmax."""
    scales = tuple(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    h, w = image.shape[:2]
    x0 = normalize_image(image, mean)
    if scales == (1.0,) and not flip:
        # degenerate protocol: no resampling and no averaging, so skip the
        # softmax and take the native-resolution argmax directly
        with no_grad():
            logits = model.forward(x0[None]).main.data
        return np.argmax(logits[0], axis=-1).astype(np.int64)
    variants = [x0]
    if flip:
        variants.append(x0[:, ::-1].copy())
    total = None
    for scale in scales:
        nh = max(1, int(round(h * scale)))
        nw = max(1, int(round(w * scale)))
        for vi, var in enumerate(variants):
            x = var if (nh == h and nw == w) else _resize_image(var, nh, nw)
            with no_grad():
                logits = model.forward(x[None]).main.data[0]
            z = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=-1, keepdims=True)
            if (nh, nw) != (h, w):
                probs = kernels.bilinear_forward(
                    np.ascontiguousarray(probs[None]), h, w)[0]
            if vi == 1:
                probs = probs[:, ::-1]
            total = probs if total is None else total + probs
    return np.argmax(total, axis=-1).astype(np.int64)


def evaluate_dataset(model, dataset, train_res: int, ignore_label: int,
                     scales=None, flip: bool = False,
                     mean=DEFAULT_MEAN) -> ConfusionMatrix:
    """Confusion matrix over a whole dataset, single or multi-scale."""
    cm = ConfusionMatrix.empty(dataset.num_classes)
    for i in range(len(dataset)):
        img, gt = dataset[i]
        if scales is None:
            pred = infer_single(model, img, train_res, mean)
        else:
            pred = infer_multiscale(model, img, scales, flip, mean)
        cm = cm + accumulate_confusion(pred, gt, ignore_label, dataset.num_classes)
    return cm


# ---------------------------------------------------------------------------
# feature similarity analysis


def similarity_map(model, image: np.ndarray, stage: int, pixel: tuple[int, int],
                   which: str = "post", mean=DEFAULT_MEAN) -> np.ndarray:
    """Cosine similarity of one stage feature against all positions.

    ``which`` selects the features before ('pre') or after ('post') the
    stage's semantic layer. Returns [H_s, W_s] float32 in [-1, 1].
    """
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"stage must be in 1..4, got {stage}")
    if which not in ("pre", "post"):
        raise ValueError(f"which must be 'pre' or 'post', got {which!r}")
    x = normalize_image(image, mean)
    with no_grad():
        out = model.forward(x[None])
    s = out.stages[stage - 1]
    feats = (s.pre_features if which == "pre" else s.features).data[0]
    h, w = feats.shape[:2]
    py, px = pixel
    if not (0 <= py < h and 0 <= px < w):
        raise ValueError(f"pixel {pixel} outside stage extents {h}x{w}")
    return cosine_map(feats, (py, px))


def cosine_map(feats: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    """Cosine similarity of feats[pixel] against every position.

    Zero-vector pairs count as identical (similarity 1).
    """
    v = feats[pixel[0], pixel[1]].astype(np.float64)
    f = feats.astype(np.float64)
    norms = np.linalg.norm(f, axis=-1)
    vn = np.linalg.norm(v)
    denom = norms * vn
    dots = f @ v
    both_zero = (norms == 0) & (vn == 0)
    sim = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    sim[both_zero] = 1.0
    return np.clip(sim, -1.0, 1.0).astype(np.float32)


def mean_within_class_similarity(feats: np.ndarray, mask: np.ndarray,
                                 num_classes: int, ignore_label: int) -> float:
    """Mean pairwise cosine similarity between same-class positions.

    ``feats`` is [H, W, C]; ``mask`` is resampled to [H, W] if needed.
    Classes with fewer than two pixels contribute nothing.
    """
    h, w = feats.shape[:2]
    if mask.shape != (h, w):
        mask = nearest_resize_mask(mask, h, w)
    f = feats.reshape(-1, feats.shape[-1]).astype(np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.maximum(norms, 1e-12)
    m = mask.ravel()
    sims, weights = [], []
    for c in range(num_classes):
        sel = f[(m == c)]
        n = sel.shape[0]
        if n < 2:
            continue
        s = sel.sum(axis=0)
        pair_sum = (s @ s - n) / 2.0
        pairs = n * (n - 1) / 2.0
        sims.append(pair_sum / pairs)
        weights.append(pairs)
    if not sims:
        raise ValueError("no class has two or more labeled pixels")
    return float(np.average(sims, weights=weights))
