"""Binarization of predicted saliency maps: adaptive threshold and Otsu."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

ADP_EPS = 1 / 255
METHODS = ("adp", "otsu")


@dataclass
class BinarizedMap:
    map: np.ndarray
    method: str
    threshold: float


def adaptive_threshold(s) -> BinarizedMap:
    """Keep pixels at or above twice the map mean (capped just below 1)."""
    s = np.asarray(s, dtype=np.float64)
    t = min(2 * s.mean(), 1 - ADP_EPS)
    return BinarizedMap((s >= t).astype(np.uint8), "adp", float(t))


def quantize(s) -> np.ndarray:
    return np.clip(np.rint(np.asarray(s, dtype=np.float64) * 255), 0, 255).astype(np.int64)


def between_class_variance(hist) -> np.ndarray:
    """w0 * w1 * (mu1 - mu0)^2 for every split ``level <= t`` vs ``level > t``."""
    hist = np.asarray(hist, dtype=np.float64)
    p = hist / hist.sum()
    levels = np.arange(hist.size)
    w0 = np.cumsum(p)
    w1 = 1 - w0
    m0 = np.cumsum(p * levels)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mt * w0 - m0) ** 2 / (w0 * w1)
    var[~np.isfinite(var)] = 0.0
    # w1 == 0 at the top level: no split
    var[w1 <= 0] = 0.0
    return var


def otsu_level(s) -> int:
    q = quantize(s)
    hist = np.bincount(q.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        return -1
    var = between_class_variance(hist)
    # ties (up to rounding) go to the lowest threshold
    return int(np.flatnonzero(var >= var.max() * (1 - 1e-12))[0])


def otsu_threshold(s) -> BinarizedMap:
    q = quantize(s)
    level = otsu_level(s)
    if level < 0:
        logger.warning("constant saliency map; Otsu threshold undefined, returning all-ones")
        return BinarizedMap(np.ones_like(q, dtype=np.uint8), "otsu", 0.0)
    return BinarizedMap((q > level).astype(np.uint8), "otsu", level / 255)


def binarize(s, method: str) -> BinarizedMap:
    if method == "adp":
        return adaptive_threshold(s)
    if method == "otsu":
        return otsu_threshold(s)
    raise ValueError(f"unknown post-processing method {method!r}; choose from {METHODS}")
