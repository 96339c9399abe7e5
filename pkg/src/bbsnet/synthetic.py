"""Seeded procedural RGB-D corpora for desk-scale experiments.

Each scene holds one salient shape and one or two distractors on a textured
background. Object colours come from one distribution, so in the default
style only depth tells the salient object apart: it is the nearest one.
Styles change palette, shape family and depth polarity to create
controlled distribution shift between corpora.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data_io import RgbdSample, normalize_depth

GENERATOR_VERSION = "1"


@dataclass(frozen=True)
class CorpusStyle:
    name: str = "near"
    background: tuple = (0.55, 0.45, 0.35)  # mean background colour
    shapes: tuple = ("circle", "rect")
    near_is_bright: bool = True  # depth polarity
    informative_depth: bool = True
    salient_colour: tuple = None  # fixed colour for the salient object; None = random


STYLES = {
    "near": CorpusStyle(),
    "far": CorpusStyle(name="far", background=(0.25, 0.4, 0.6), shapes=("rect", "diamond"),
                       near_is_bright=False),
    "random_depth": CorpusStyle(name="random_depth", informative_depth=False,
                                salient_colour=(0.9, 0.15, 0.15)),
}


def _shape_mask(kind, yy, xx, cy, cx, r):
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    if kind == "diamond":
        return np.abs(yy - cy) + np.abs(xx - cx) <= r * 1.2
    raise ValueError(f"unknown shape {kind!r}")


def _smooth_noise(rng, side, cells=4):
    coarse = rng.random((cells, cells)).astype(np.float32)
    im = Image.fromarray(coarse, mode="F").resize((side, side), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32)


def _place(rng, side, r, taken, tries=50):
    for _ in range(tries):
        cy, cx = rng.uniform(r, side - r, size=2)
        if all((cy - y) ** 2 + (cx - x) ** 2 >= (r + rr) ** 2 for y, x, rr in taken):
            return cy, cx
    return cy, cx


def make_scene(rng: np.random.Generator, side: int = 64, style: CorpusStyle = STYLES["near"],
               sample_id: str = "s") -> RgbdSample:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) + 0.5
    bg = np.asarray(style.background, dtype=np.float32)
    rgb = bg + 0.15 * (_smooth_noise(rng, side)[..., None] - 0.5)
    rgb = rgb + 0.03 * rng.standard_normal((side, side, 3)).astype(np.float32)

    # background depth: far plane with a gentle ramp
    ramp = (yy / side) if rng.random() < 0.5 else (xx / side)
    depth = 0.1 + 0.2 * ramp

    n_distractors = int(rng.integers(1, 3))
    radii = rng.uniform(0.12, 0.2, size=n_distractors + 1) * side
    taken = []
    objects = []
    for i, r in enumerate(radii):
        cy, cx = _place(rng, side, r, taken)
        taken.append((cy, cx, r))
        objects.append((i == 0, cy, cx, r))

    gt = np.zeros((side, side), dtype=bool)
    # distractors first, the salient object is drawn on top
    for salient, cy, cx, r in sorted(objects, key=lambda o: o[0]):
        kind = style.shapes[int(rng.integers(len(style.shapes)))]
        mask = _shape_mask(kind, yy, xx, cy, cx, r)
        if salient and style.salient_colour is not None:
            colour = np.asarray(style.salient_colour, dtype=np.float32)
        elif style.salient_colour is not None:
            colour = np.asarray((0.15, 0.2, 0.9), dtype=np.float32) * rng.uniform(0.8, 1.0)
        else:
            colour = rng.uniform(0.1, 0.95, size=3).astype(np.float32)
        rgb[mask] = colour + 0.03 * rng.standard_normal((int(mask.sum()), 3)).astype(np.float32)
        if style.informative_depth:
            depth[mask] = rng.uniform(0.7, 0.95) if salient else rng.uniform(0.35, 0.55)
        if salient:
            gt = mask
        else:
            gt &= ~mask
    if not style.informative_depth:
        depth = _smooth_noise(rng, side, cells=6)
    depth = depth + 0.01 * rng.standard_normal((side, side)).astype(np.float32)
    depth = normalize_depth(depth, invert=not style.near_is_bright, sample_id=sample_id)
    return RgbdSample(
        id=sample_id,
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        depth=depth[..., None],
        gt=gt.astype(np.float32)[..., None],
        orig_size=(side, side),
    )


def generate_corpus(n: int, side: int = 64, style="near", seed: int = 0) -> list:
    if isinstance(style, str):
        style = STYLES[style]
    rng = np.random.default_rng([seed, sum(map(ord, style.name))])
    return [make_scene(rng, side, style, f"{style.name}_{seed}_{i:04d}") for i in range(n)]


def write_corpus(samples, root) -> Path:
    """Write samples in the RGB/ depth/ GT/ layout as 8-bit PNGs."""
    root = Path(root)
    for sub in ("RGB", "depth", "GT"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(np.rint(s.rgb * 255).astype(np.uint8), mode="RGB").save(root / "RGB" / f"{s.id}.png")
        Image.fromarray(np.rint(s.depth[..., 0] * 255).astype(np.uint8), mode="L").save(root / "depth" / f"{s.id}.png")
        Image.fromarray((s.gt[..., 0] * 255).astype(np.uint8), mode="L").save(root / "GT" / f"{s.id}.png")
    return root
