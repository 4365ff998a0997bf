"""Frozen-backbone modality classification (T1 / T2 / FLAIR).

A fixed random conv embedder provides features; only a linear softmax head
is trained (Adam, cross-entropy) on rotated/scaled copies of the images.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInput
from .phantom import Modality, split_train_val
from .training import AdamWState, adamw_step

log = logging.getLogger(__name__)

CLASSES = (Modality.T1, Modality.T2, Modality.FLAIR)
N_CLASSES = 3
SOURCES = ("real_low", "real_high", "synthetic")
TRAINING_SETS = (
    "Training with 0.35T Real Data",
    "Training with 3T Real Data",
    "Training with Synthetic Data",
    "Training with 0.35T Real + Synthetic Data",
)


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    source: str = "real_low"

    def __post_init__(self):
        if self.label not in (0, 1, 2):
            raise InvalidInput(f"label must be 0, 1 or 2, got {self.label}")
        if self.source not in SOURCES:
            raise InvalidInput(f"unknown source {self.source!r}")


def label_of(modality) -> int:
    return Modality(modality).label


def label_from_name(name: str) -> int:
    """Label rule for file names: FLAIR -> 2, T2 -> 1, T1 -> 0."""
    if "FLAIR" in name:
        return 2
    if "T2" in name:
        return 1
    if "T1" in name:
        return 0
    raise InvalidInput(f"no modality in name {name!r}")


def labeled(pairs, source: str) -> list[LabeledImage]:
    """``(image, SliceMeta)`` pairs to labeled images; labels come from metadata only."""
    return [LabeledImage(img, meta.modality.label, source) for img, meta in pairs]


# ------------------------------------------------------------ augmentation

def rotate_scale(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the image centre.

    Bilinear resampling, zero fill, output has the input's dimensions.
    """
    if angle_deg == 0 and scale == 1:
        return img.copy()
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # output -> input coordinate map
    matrix = np.array([[c, s], [-s, c]]) / scale
    centre = (np.asarray(img.shape, dtype=np.float64) - 1) / 2.0
    offset = centre - matrix @ centre
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def augment(item: LabeledImage, rng: np.random.Generator, max_angle=15.0, scale_range=(0.9, 1.1)):
    angle = rng.uniform(-max_angle, max_angle)
    scale = rng.uniform(*scale_range)
    return LabeledImage(rotate_scale(item.image, angle, scale), item.label, item.source)


# ---------------------------------------------------------------- the head

@dataclass
class LinearHead:
    """Affine classifier on standardized features.

    ``shift`` and ``scale`` are fixed per-feature statistics (set once from
    the fitting features, never trained); logits are
    ``((f - shift) / scale) @ weight.T + bias``.
    """

    weight: np.ndarray
    bias: np.ndarray
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        dim = self.weight.shape[1]
        if self.shift is None:
            self.shift = np.zeros(dim)
        if self.scale is None:
            self.scale = np.ones(dim)

    @classmethod
    def init(cls, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 0.01, size=(N_CLASSES, dim)), np.zeros(N_CLASSES))

    def standardize(self, features):
        return (np.asarray(features, dtype=np.float64) - self.shift) / self.scale

    def logits(self, features):
        return self.standardize(features) @ self.weight.T + self.bias

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)

    def copy(self):
        return LinearHead(self.weight.copy(), self.bias.copy(), self.shift.copy(), self.scale.copy())


def cross_entropy(head: LinearHead, features, labels):
    """Mean softmax cross-entropy and its gradient ``{"weight", "bias"}``."""
    z = head.logits(features)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d /= n
    return float(loss), {"weight": d.T @ head.standardize(features), "bias": d.sum(axis=0)}


@dataclass
class HeadConfig:
    learning_rate: float = 5e-4
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    val_ratio: float = 0.8


@dataclass
class HeadHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)


def _check_classes(items):
    present = {it.label for it in items}
    for label, mod in enumerate(CLASSES):
        if label not in present:
            raise InvalidInput(f"training set has no {mod.value} examples")


def train_head(extractor, train_set, config: HeadConfig = HeadConfig()):
    """Fit a :class:`LinearHead` on frozen ``extractor`` features.

    ``train_set`` is split ``val_ratio`` : rest into fitting and validation
    parts; validation accuracy is logged once per epoch. Every epoch
    re-augments the fitting images (when enabled) and runs Adam over
    shuffled mini-batches. Returns ``(head, HeadHistory)``.
    """
    train_set = list(train_set)
    _check_classes(train_set)
    rng = np.random.default_rng(config.seed)
    fit, val = split_train_val(train_set, config.val_ratio, config.seed) if len(train_set) > 1 else (train_set, [])
    head = LinearHead.init(extractor.dim, config.seed)
    history = HeadHistory()
    if config.epochs == 0:
        return head, history
    labels = np.array([it.label for it in fit])
    base = extractor.embed(np.stack([it.image for it in fit]))
    head.shift = base.mean(axis=0)
    head.scale = np.maximum(base.std(axis=0), 1e-8)
    val_x = extractor.embed(np.stack([it.image for it in val])) if val else None
    val_y = np.array([it.label for it in val])
    state = AdamWState(weight_decay=0.0)
    params = {"weight": head.weight, "bias": head.bias}
    for epoch in range(config.epochs):
        images = [augment(it, rng).image if config.augment else it.image for it in fit]
        feats = extractor.embed(np.stack(images))
        order = rng.permutation(len(fit))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = cross_entropy(head, feats[idx], labels[idx])
            adamw_step(params, grads, state, config.learning_rate)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        if val_x is not None:
            history.val_accuracy.append(float(np.mean(head.predict(val_x) == val_y)))
    if history.val_accuracy:
        log.info("head: final val accuracy %.3f", history.val_accuracy[-1])
    return head, history


# ------------------------------------------------------------- reporting

@dataclass(frozen=True)
class ClassReport:
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float

    def row(self) -> str:
        return f"{self.accuracy:.4f} {self.precision:.4f} {self.recall:.4f} {self.f1:.4f}"


def _safe_div(num, den, what):
    out = np.zeros_like(num, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all():
        warnings.warn(f"zero denominator in {what}; defined as 0", RuntimeWarning, stacklevel=3)
    return out


def report_from_confusion(confusion) -> ClassReport:
    """Accuracy and macro precision / recall / F1 from a 3x3 count matrix
    (rows true, columns predicted)."""
    cm = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64), "precision")
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64), "recall")
    f1 = _safe_div(2 * precision * recall, precision + recall, "F1")
    total = cm.sum()
    return ClassReport(cm, float(tp.sum() / total) if total else 0.0,
                       float(precision.mean()), float(recall.mean()), float(f1.mean()))


def confusion_matrix(true, pred) -> np.ndarray:
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def evaluate(extractor, head: LinearHead, test_set) -> ClassReport:
    test_set = list(test_set)
    if not test_set:
        raise InvalidInput("empty test set")
    feats = extractor.embed(np.stack([it.image for it in test_set]))
    return report_from_confusion(confusion_matrix([it.label for it in test_set], head.predict(feats)))


# ------------------------------------------------------------ experiment

@dataclass
class ComparisonTable:
    """Per-seed reports for each of the four training sets."""

    rows: list = field(default_factory=list)  # (train_set, seed, ClassReport)

    def reports(self, train_set):
        return [r for name, _, r in self.rows if name == train_set]

    def mean(self, train_set) -> dict:
        reps = self.reports(train_set)
        return {k: float(np.mean([getattr(r, k) for r in reps]))
                for k in ("accuracy", "precision", "recall", "f1")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train_set", "seed", "accuracy", "precision", "recall", "f1"])
            for name, seed, r in self.rows:
                w.writerow([name, seed] + [repr(float(v)) for v in (r.accuracy, r.precision, r.recall, r.f1)])

    def write_confusions(self, path) -> None:
        """3x3 integer CSV blocks, each preceded by a ``# train_set,seed`` line."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for name, seed, r in self.rows:
                fh.write(f"# {name},{seed}\n")
                w.writerows(r.confusion.tolist())

    def render(self) -> str:
        lines = ["Model  Accuracy  Precision  Recall  F1 Score"]
        for name in TRAINING_SETS:
            if self.reports(name):
                m = self.mean(name)
                lines.append(f"{name}  {m['accuracy']:.4f} {m['precision']:.4f} {m['recall']:.4f} {m['f1']:.4f}")
        return "\n".join(lines)


def run_experiment(real_set, alt_set, synthetic_set, test_set, seeds, extractor,
                   config: HeadConfig = HeadConfig()) -> ComparisonTable:
    """Train and test one head per training set and seed.

    The four training sets mirror the real / alternate-domain real /
    synthetic / real + synthetic design.
    """
    sets = dict(zip(TRAINING_SETS, (list(real_set), list(alt_set), list(synthetic_set),
                                    list(real_set) + list(synthetic_set))))
    table = ComparisonTable()
    for seed in seeds:
        for name, items in sets.items():
            cfg = HeadConfig(config.learning_rate, config.epochs, config.batch_size, seed,
                             config.augment, config.val_ratio)
            head, _ = train_head(extractor, items, cfg)
            table.rows.append((name, seed, evaluate(extractor, head, test_set)))
    return table
