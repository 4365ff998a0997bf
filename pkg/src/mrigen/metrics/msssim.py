"""Multi-scale structural similarity and the pairwise diversity protocol."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInput

STANDARD_EXPONENTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class MsSsimWeights:
    """Per-scale exponents plus window and stabilizer settings.

    Scale ``j`` contributes ``[c_j s_j]^{exponents[j]}``; the last scale also
    carries the luminance term with the same exponent (alpha_M = beta_M =
    gamma_M, beta_j = gamma_j).
    """

    exponents: tuple = STANDARD_EXPONENTS
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not self.exponents or any(e <= 0 for e in self.exponents):
            raise InvalidInput("exponents must be positive")

    @property
    def scales(self) -> int:
        return len(self.exponents)

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    @classmethod
    def single_scale(cls, window_size=11, window_sigma=1.5):
        return cls((1.0,), window_size, window_sigma)

    @classmethod
    def for_size(cls, size: int):
        """Defaults for square images of side ``size``.

        Five scales with an 11-tap window when they fit; small toy images get
        three scales (exponents renormalized) and a 7-tap window.
        """
        if size >= 11 * 16:
            return cls()
        head = np.asarray(STANDARD_EXPONENTS[:3])
        return cls(tuple(head / head.sum()), window_size=7)

    def min_size(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img, win):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def _maps(x, y, w: MsSsimWeights, win):
    mx, my = _filter(x, win), _filter(y, win)
    vx = np.maximum(_filter(x * x, win) - mx * mx, 0.0)
    vy = np.maximum(_filter(y * y, win) - my * my, 0.0)
    cov = _filter(x * y, win) - mx * my
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    lum = (2 * mx * my + w.c1) / (mx * mx + my * my + w.c1)
    con = (2 * sx * sy + w.c2) / (vx + vy + w.c2)
    struct = (cov + w.c3) / (sx * sy + w.c3)
    return lum, con, struct


def _downsample(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _power(value, exponent):
    # fractional powers of a negative pooled value are undefined; clamp
    if value < 0 and exponent != 1:
        return 0.0
    return value ** exponent


def ms_ssim(x, y, weights: MsSsimWeights | None = None) -> float:
    """MS-SSIM of two equally sized images with values in [0, dynamic_range].

    At every scale the contrast-structure map is averaged over all window
    positions; at the coarsest scale the luminance map is multiplied in
    before averaging. Scales are linked by 2x2 mean filtering and
    decimation. With one scale and unit exponent this is plain SSIM.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise InvalidInput(f"image shapes differ: {x.shape} vs {y.shape}")
    w = weights or MsSsimWeights.for_size(min(x.shape))
    if min(x.shape) < w.min_size():
        feasible = 0
        while min(x.shape) >= w.window_size * 2 ** feasible:
            feasible += 1
        raise InvalidInput(
            f"{x.shape} too small for {w.scales} scales with window {w.window_size}; "
            f"max feasible scales = {feasible}")
    win = gaussian_window(w.window_size, w.window_sigma)
    result = 1.0
    for j, exponent in enumerate(w.exponents):
        lum, con, struct = _maps(x, y, w, win)
        if j == w.scales - 1:
            pooled = float(np.mean(lum * con * struct))
        else:
            pooled = float(np.mean(con * struct))
            x, y = _downsample(x), _downsample(y)
        result *= _power(pooled, exponent)
    return result


@dataclass
class DiversityReport:
    mean: float
    pairs: list
    values: list


def pairwise_diversity(images, n_pairs: int, seed: int = 0,
                       weights: MsSsimWeights | None = None) -> DiversityReport:
    """Mean MS-SSIM over ``n_pairs`` distinct unordered pairs drawn uniformly.

    Lower means more diverse. Asking for more pairs than exist uses all.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise InvalidInput("need at least two images")
    all_pairs = list(itertools.combinations(range(len(images)), 2))
    if n_pairs >= len(all_pairs):
        chosen = all_pairs
    else:
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(all_pairs), size=n_pairs, replace=False))
        chosen = [all_pairs[i] for i in picks]
    values = [ms_ssim(images[i], images[j], weights) for i, j in chosen]
    return DiversityReport(float(np.mean(values)), chosen, values)
