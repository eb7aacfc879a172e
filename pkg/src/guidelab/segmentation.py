"""Per-pixel classifier used both for evaluation and as the guidance scorer.

Four 3x3 conv blocks with interleaved dropout feed a zero-initialized 1x1
head, so an untrained model predicts the uniform distribution everywhere.
Dropout stays active during training and powers the Monte-Carlo committee at
guidance time; plain prediction runs with it off and is deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .scenes import SceneSample

log = logging.getLogger(__name__)


class SegmentationModel:
    """Small conv classifier producing per-pixel class logits."""

    def __init__(self, num_classes: int = 5, width: int = 24,
                 dropout_rate: float = 0.25, seed: int = 0):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.width = width
        self.dropout_rate = dropout_rate

        def he(c_out, c_in, k):
            return ad.Tensor(
                rng.normal(scale=np.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k)),
                requires_grad=True,
            )

        def bias(c):
            return ad.Tensor(np.zeros((c, 1, 1)), requires_grad=True)

        F = width
        self.weights = [he(F, 1, 3), he(F, F, 3), he(F, F, 3), he(F, F, 3)]
        self.biases = [bias(F), bias(F), bias(F), bias(F)]
        # zero head: fresh models answer "don't know" (uniform) everywhere
        self.head_w = ad.Tensor(np.zeros((num_classes, F, 1, 1)), requires_grad=True)
        self.head_b = ad.Tensor(np.zeros((num_classes, 1, 1)), requires_grad=True)

    def parameters(self) -> list[ad.Tensor]:
        return [*self.weights, *self.biases, self.head_w, self.head_b]

    def logits(self, image, dropout_rng: np.random.Generator | None = None) -> ad.Tensor:
        """Class logits (C, h, w); dropout is active iff a generator is given."""
        h = ad.as_tensor(image)
        if h.data.ndim == 2:
            h = ad.reshape(h, (1,) + h.shape)
        for w, b in zip(self.weights, self.biases):
            h = ad.relu(ad.add(ad.conv2d(h, w, padding=1), b))
            if dropout_rng is not None and self.dropout_rate > 0.0:
                h = ad.dropout(h, self.dropout_rate, dropout_rng)
        return ad.add(ad.conv2d(h, self.head_w, padding=0), self.head_b)

    # -- persistence ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        named = {"dropout_rate": np.array(self.dropout_rate)}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"w{i}"] = w.data.copy()
            named[f"b{i}"] = b.data.copy()
        named["head_w"] = self.head_w.data.copy()
        named["head_b"] = self.head_b.data.copy()
        return named

    def load_state(self, named: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i].data = np.array(named[f"w{i}"])
            self.biases[i].data = np.array(named[f"b{i}"])
        self.head_w.data = np.array(named["head_w"])
        self.head_b.data = np.array(named["head_b"])
        self.dropout_rate = float(named["dropout_rate"])

    def save(self, path) -> None:
        checkpoint.save_tensors(path, self.state())

    @classmethod
    def load(cls, path) -> "SegmentationModel":
        named = checkpoint.load_tensors(path)
        num_classes, width = named["head_w"].shape[:2]
        model = cls(num_classes=num_classes, width=width,
                    dropout_rate=float(named["dropout_rate"]))
        model.load_state(named)
        return model


def predict_probs(model: SegmentationModel, image,
                  dropout_rng: np.random.Generator | None = None) -> ad.Tensor:
    """Per-pixel class probabilities, differentiable w.r.t. the image."""
    return ad.softmax(model.logits(image, dropout_rng=dropout_rng), axis=0)


def mc_passes(model: SegmentationModel, image, n: int,
              seed: int | None = None,
              rng: np.random.Generator | None = None) -> list[ad.Tensor]:
    """N stochastic forward passes with independent dropout masks.

    Reproducible given ``seed``; pass ``rng`` instead to draw the masks from
    an existing stream (the guided chain does this).
    """
    if n < 2:
        raise ValueError("a committee needs at least 2 passes")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([0 if seed is None else seed]))
    return [predict_probs(model, image, dropout_rng=rng) for _ in range(n)]


# -- training -------------------------------------------------------------------


def _check_labels(samples: list[SceneSample], num_classes: int, name: str) -> None:
    for i, s in enumerate(samples):
        if s.class_mask.max() >= num_classes:
            raise ValueError(
                f"{name}[{i}] has class id {s.class_mask.max()} >= num_classes={num_classes}"
            )


def train_seg(
    real: list[SceneSample],
    synthetic: list[SceneSample] | None,
    p_aug: float,
    steps: int,
    seed: int,
    num_classes: int = 5,
    width: int = 24,
    dropout_rate: float = 0.25,
    lr: float = 2e-3,
    log_every: int = 500,
) -> SegmentationModel:
    """Per-pixel cross-entropy training with probabilistic synthetic substitution.

    Each draw picks a real index, then uses its synthetic counterpart with
    probability ``p_aug``.  The substitution coin is flipped on every step
    regardless of configuration, so runs with p_aug = 0, or with no synthetic
    data at all, consume identical random streams and produce bit-identical
    models for the same seed.
    """
    if not 0.0 <= p_aug <= 1.0:
        raise ValueError("p_aug must be in [0, 1]")
    if not real:
        raise ValueError("empty training set")
    if synthetic is not None:
        if len(synthetic) != len(real):
            raise ValueError("synthetic data must align 1:1 with real data")
        for i, (r, s) in enumerate(zip(real, synthetic)):
            if not np.array_equal(r.class_mask, s.class_mask):
                raise ValueError(f"synthetic[{i}] class mask differs from its real counterpart")
    _check_labels(real, num_classes, "real")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    model = SegmentationModel(num_classes=num_classes, width=width,
                              dropout_rate=dropout_rate, seed=int(rng.integers(2**31)))
    opt = ad.AdamW(lr=lr, weight_decay=1e-4)
    onehots: dict[int, np.ndarray] = {}
    losses: list[float] = []
    for step in range(steps):
        idx = int(rng.integers(len(real)))
        use_syn = rng.random() < p_aug and synthetic is not None
        sample = synthetic[idx] if use_syn else real[idx]
        oh = onehots.get(idx)
        if oh is None:
            oh = np.eye(num_classes)[sample.class_mask].transpose(2, 0, 1)
            onehots[idx] = oh
        logits = model.logits(sample.image, dropout_rng=rng)
        lp = ad.log_softmax(logits, axis=0)
        loss = ad.neg(ad.tmean(ad.tsum(ad.mul(lp, oh), axis=0)))
        ad.backward(loss)
        opt.step(model.parameters())
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("seg step %d/%d ce %.4f", step + 1, steps,
                     float(np.mean(losses[-log_every:])))
    return model


# -- evaluation -------------------------------------------------------------------


@dataclass
class Metrics:
    miou: float
    macc: float
    per_class_iou: list[float]
    support: list[int]

    def as_dict(self) -> dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "per_class_iou": self.per_class_iou,
            "support": self.support,
        }


def metrics_from_predictions(pairs, num_classes: int) -> Metrics:
    """Pool (prediction, ground truth) mask pairs into IoU/recall metrics.

    Counts aggregate over the whole set; classes with an empty union are
    excluded from the mIoU mean and classes with no ground-truth pixels from
    the mAcc mean.
    """
    C = num_classes
    tp = np.zeros(C)
    fp = np.zeros(C)
    fn = np.zeros(C)
    support = np.zeros(C, dtype=np.int64)
    n = 0
    for pred, gt in pairs:
        n += 1
        for c in range(C):
            gt_c = gt == c
            pr_c = pred == c
            tp[c] += np.sum(gt_c & pr_c)
            fp[c] += np.sum(~gt_c & pr_c)
            fn[c] += np.sum(gt_c & ~pr_c)
            support[c] += np.sum(gt_c)
    if n == 0:
        raise ValueError("empty test set")
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else 0.0
    macc = float(np.nanmean(recall)) if np.any(tp + fn > 0) else 0.0
    per_class = [float(v) if np.isfinite(v) else float("nan") for v in iou]
    return Metrics(miou=miou, macc=macc, per_class_iou=per_class,
                   support=[int(v) for v in support])


def evaluate(model: SegmentationModel, test: list[SceneSample]) -> Metrics:
    """Dataset-aggregated metrics of the model's argmax predictions."""
    if not test:
        raise ValueError("empty test set")
    with ad.no_grad():
        pairs = [
            (np.argmax(model.logits(s.image).data, axis=0), s.class_mask) for s in test
        ]
    return metrics_from_predictions(pairs, model.num_classes)
