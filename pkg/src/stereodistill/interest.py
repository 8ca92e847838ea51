"""Interest-point maps, detectors, and non-maximum suppression.

Coordinates follow the pixel-index convention: a point at (x, y) sits
exactly on pixel column x, row y; fractional coordinates interpolate
between pixel samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

DEFAULT_NMS_RADIUS = 4
DEFAULT_THRESHOLD = 0.015
DEFAULT_MAX_POINTS = 512


@dataclass
class PointSet:
    """Ordered interest points: coords (k,2) columns (x, y), scores (k,) in [0,1].

    Order is stable: descending score, ties broken by row-major position.
    """

    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.float64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.float64))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.coords) != len(self.scores):
            raise ContractError(
                f"point count mismatch: {len(self.coords)} coords vs {len(self.scores)} scores")

    def __len__(self) -> int:
        return len(self.coords)

    def validate_bounds(self, height: int, width: int) -> None:
        if len(self) == 0:
            return
        x, y = self.coords[:, 0], self.coords[:, 1]
        if (x < 0).any() or (x >= width).any() or (y < 0).any() or (y >= height).any():
            raise ContractError("point coordinates outside image bounds")

    @staticmethod
    def sorted(coords, scores) -> "PointSet":
        """Build a PointSet in canonical order (descending score, row-major ties)."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        order = np.lexsort((coords[:, 0], coords[:, 1], -scores))
        return PointSet(coords[order], scores[order])


@dataclass
class InterestMap:
    """Per-pixel interest probabilities plus binary labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.probs.shape != self.labels.shape or self.probs.ndim != 2:
            raise ContractError(
                f"interest map shapes disagree: {self.probs.shape} vs {self.labels.shape}")

    @classmethod
    def from_probs(cls, probs, threshold: float = DEFAULT_THRESHOLD) -> "InterestMap":
        probs = np.asarray(probs, dtype=np.float32)
        return cls(probs, probs >= threshold)


def interest_map_from_points(points: PointSet, shape, sigma: float = 0.0) -> InterestMap:
    """Oracle detector: probability 1 at each point's pixel, 0 elsewhere.

    `sigma > 0` blurs the map (max-normalized) for robustness experiments;
    labels always mark the exact point pixels.
    """
    height, width = shape
    probs = np.zeros((height, width), dtype=np.float32)
    labels = np.zeros((height, width), dtype=bool)
    for x, y in points.coords:
        ix = int(np.floor(x + 0.5))
        iy = int(np.floor(y + 0.5))
        if 0 <= ix < width and 0 <= iy < height:
            probs[iy, ix] = 1.0
            labels[iy, ix] = True
    if sigma > 0:
        probs = ndimage.gaussian_filter(probs, sigma)
        peak = probs.max()
        if peak > 0:
            probs /= peak
    return InterestMap(probs, labels)


def harris_interest_map(image, window_sigma: float = 1.0, k: float = 0.04,
                        threshold: float = DEFAULT_THRESHOLD) -> InterestMap:
    """Harris corner response, max-normalized to [0,1].

    Fallback detector for images without oracle junction labels. A constant
    image has zero gradients everywhere and yields an all-zero map.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"harris expects a grayscale H×W image, got shape {img.shape}")
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, window_sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, window_sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, window_sigma, mode="nearest")
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    response = det - k * trace * trace
    response = np.clip(response, 0.0, None)
    peak = response.max()
    if peak > 0:
        response = response / peak
    return InterestMap.from_probs(response.astype(np.float32), threshold)


def nms_filter(imap: InterestMap, radius: int = DEFAULT_NMS_RADIUS,
               threshold: float = DEFAULT_THRESHOLD,
               max_points: int = DEFAULT_MAX_POINTS) -> PointSet:
    """Greedy non-maximum suppression over an interest map.

    Candidates (probs >= threshold) are visited in descending score with
    row-major tie-breaking; a candidate within Chebyshev distance <= radius
    of an already kept point is suppressed. Truncates to max_points.
    """
    if radius < 1:
        raise ContractError(f"nms radius must be >= 1, got {radius}")
    probs = imap.probs
    height, width = probs.shape
    ys, xs = np.nonzero(probs >= threshold)
    if len(ys) == 0:
        return PointSet()
    scores = probs[ys, xs].astype(np.float64)
    order = np.lexsort((xs, ys, -scores))
    suppressed = np.zeros_like(probs, dtype=bool)
    kept_xy, kept_scores = [], []
    limit = max_points if max_points is not None and max_points >= 0 else len(order)
    for idx in order:
        y, x = int(ys[idx]), int(xs[idx])
        if suppressed[y, x]:
            continue
        kept_xy.append((float(x), float(y)))
        kept_scores.append(float(scores[idx]))
        if len(kept_xy) >= limit:
            break
        y0, y1 = max(0, y - radius), min(height, y + radius + 1)
        x0, x1 = max(0, x - radius), min(width, x + radius + 1)
        suppressed[y0:y1, x0:x1] = True
    return PointSet(np.asarray(kept_xy, dtype=np.float64).reshape(-1, 2),
                    np.asarray(kept_scores, dtype=np.float64))
