"""Synthetic brain-like phantoms and the slice preprocessing rules.

Images are plain 2-D ``numpy`` float arrays with values in ``[0, 1]``
(row-major, ``shape == (height, width)``). Conversion to 8-bit happens only
on export.
"""

from __future__ import annotations

import enum
import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput

MAX_SLICE = 18


class Modality(str, enum.Enum):
    T1 = "T1"
    T2 = "T2"
    FLAIR = "FLAIR"

    @property
    def label(self) -> int:
        """Classification label: T1 -> 0, T2 -> 1, FLAIR -> 2."""
        return _LABELS[self]


_LABELS = {Modality.T1: 0, Modality.T2: 1, Modality.FLAIR: 2}


class FieldStrength(str, enum.Enum):
    LOW = "0.3T"
    HIGH = "3T"


@dataclass(frozen=True)
class SliceMeta:
    field: FieldStrength
    modality: Modality
    slice_index: int
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "field", FieldStrength(self.field))
        object.__setattr__(self, "modality", Modality(self.modality))
        if not 1 <= int(self.slice_index) <= MAX_SLICE:
            raise InvalidInput(f"slice index {self.slice_index} outside 1..{MAX_SLICE}")


# (skull, tissue, csf) intensities
CONTRAST = {
    Modality.T1: (0.2, 0.8, 0.15),
    Modality.T2: (0.2, 0.45, 0.95),
    Modality.FLAIR: (0.2, 0.55, 0.05),
}
DEFAULT_NOISE = {FieldStrength.LOW: 0.08, FieldStrength.HIGH: 0.02}
SKULL_RADIUS, TISSUE_RADIUS, CSF_RADIUS = 0.45, 0.38, 0.12
# x radii are this fraction of the y radii
ASPECT = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    """Everything that determines a phantom slice.

    ``subject_variation`` perturbs gain, centre and radii per ``subject_id``
    (deterministically); 0 gives the canonical geometry.
    """

    meta: SliceMeta
    size: int = 32
    noise_sigma: float | None = None
    seed: int = 0
    subject_variation: float = 0.0

    @property
    def sigma(self) -> float:
        if self.noise_sigma is None:
            return DEFAULT_NOISE[self.meta.field]
        return float(self.noise_sigma)


def slice_scale(slice_index: int) -> float:
    return 0.8 + 0.02 * slice_index


def _subject_rng(subject_id: str) -> np.random.Generator:
    digest = hashlib.sha256(subject_id.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def phantom_regions(spec: PhantomSpec):
    """Boolean masks ``(skull, tissue, csf)`` for the geometry of ``spec``.

    The masks are disjoint; background is everything else.
    """
    n = spec.size
    scale = slice_scale(spec.meta.slice_index)
    cy = cx = (n - 1) / 2.0
    if spec.subject_variation > 0:
        r = _subject_rng(spec.meta.subject_id)
        v = spec.subject_variation
        scale *= 1.0 + 0.5 * v * r.uniform(-1, 1)
        cy += 0.1 * v * n * r.uniform(-1, 1)
        cx += 0.1 * v * n * r.uniform(-1, 1)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    def inside(radius):
        ry = radius * n * scale
        rx = ry * ASPECT
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    head, brain, csf = inside(SKULL_RADIUS), inside(TISSUE_RADIUS), inside(CSF_RADIUS)
    return head & ~brain, brain & ~csf, csf


def subject_gain(spec: PhantomSpec) -> float:
    if spec.subject_variation <= 0:
        return 1.0
    r = _subject_rng(spec.meta.subject_id + "/gain")
    return 1.0 + spec.subject_variation * r.uniform(-1, 1)


def generate_phantom(spec: PhantomSpec, clean: bool = False) -> np.ndarray:
    """Render a phantom slice as a ``(size, size)`` float array in [0, 1].

    Output is a pure function of ``spec``. With ``clean=True`` the additive
    noise is skipped (the same as ``noise_sigma=0``).
    """
    if int(spec.size) < 8:
        raise InvalidInput(f"phantom size must be >= 8, got {spec.size}")
    sigma = spec.sigma
    if not math.isfinite(sigma) or sigma < 0:
        raise InvalidInput(f"noise_sigma must be finite and >= 0, got {sigma}")

    skull, tissue, csf = phantom_regions(spec)
    gain = subject_gain(spec)
    i_skull, i_tissue, i_csf = (gain * c for c in CONTRAST[spec.meta.modality])
    img = np.zeros((spec.size, spec.size))
    img[skull] = i_skull
    img[tissue] = i_tissue
    img[csf] = i_csf
    if not clean and sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def normalize_to_u8(raw) -> np.ndarray:
    """Linearly map ``raw`` onto 0..255 (round half up).

    A constant input has no usable range: the result is all zeros and a
    ``RuntimeWarning`` is emitted instead of raising.
    """
    x = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("cannot normalize non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("degenerate intensity range; emitting zeros", RuntimeWarning, stacklevel=2)
        return np.zeros(x.shape, dtype=np.uint8)
    scaled = 255.0 * (x - lo) / (hi - lo)
    return np.floor(scaled + 0.5).astype(np.uint8)


def center_crop(img: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    h, w = img.shape
    if target_w > w or target_h > h or target_w < 1 or target_h < 1:
        raise InvalidInput(f"cannot crop {w}x{h} to {target_w}x{target_h}")
    y0 = (h - target_h) // 2
    x0 = (w - target_w) // 2
    return img[y0:y0 + target_h, x0:x0 + target_w].copy()


def retain_head_slices(volume, k: int = 10) -> list:
    if k < 1:
        raise InvalidInput("k must be >= 1")
    return list(volume)[:k]


def split_train_val(items, ratio: float = 0.8, seed: int = 0):
    """Deterministically shuffle ``items`` and split off ``round(ratio * n)``
    of them for training. Returns ``(train, val)`` lists."""
    items = list(items)
    if not items:
        raise InvalidInput("cannot split an empty list")
    if not 0.0 < ratio < 1.0:
        raise InvalidInput(f"ratio must lie in (0, 1), got {ratio}")
    n = len(items)
    n_train = int(math.floor(ratio * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:]]
    if not val:
        warnings.warn(f"validation split is empty for n={n}", RuntimeWarning, stacklevel=2)
    return train, val


@dataclass
class PhantomGrid:
    """Convenience enumerator for (field, modality) classes of phantoms."""

    size: int = 32
    subject_variation: float = 0.0
    fields: tuple = (FieldStrength.LOW, FieldStrength.HIGH)
    modalities: tuple = (Modality.T1, Modality.T2, Modality.FLAIR)
    subjects: list = field(default_factory=lambda: [f"subj{i:03d}" for i in range(16)])

    def specs(self, per_class: int, seed: int = 0, fields=None, modalities=None,
              subjects=None):
        """Yield ``per_class`` specs per class, cycling slices 1..18 and
        subjects. Noise seeds are unique per PhantomSpec."""
        subjects = subjects or self.subjects
        k = 0
        for f in fields or self.fields:
            for m in modalities or self.modalities:
                for i in range(per_class):
                    meta = SliceMeta(f, m, i % MAX_SLICE + 1,
                                     subjects[(i // MAX_SLICE) % len(subjects)])
                    yield PhantomSpec(meta, size=self.size, seed=seed * 1_000_003 + k,
                                      subject_variation=self.subject_variation)
                    k += 1
