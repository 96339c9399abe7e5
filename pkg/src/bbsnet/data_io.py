"""Dataset ingestion, split registry and saliency-map serialization.

A dataset root holds three sibling folders ``RGB/``, ``depth/`` and ``GT/``
whose files are paired by filename stem.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

SUBDIRS = ("RGB", "depth", "GT")
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_SIDE = 352


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class RgbdSample:
    id: str
    rgb: np.ndarray  # H x W x 3, [0, 1]
    depth: np.ndarray  # H x W x 1, [0, 1]
    gt: np.ndarray  # H x W x 1, {0, 1}
    orig_size: Optional[tuple] = None  # (H, W) before resizing

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"{self.id}: rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != (h, w, 1):
            raise ValueError(f"{self.id}: depth must be {h}x{w}x1, got {self.depth.shape}")
        if self.gt.shape != (h, w, 1):
            raise ValueError(f"{self.id}: gt must be {h}x{w}x1, got {self.gt.shape}")
        if not np.isin(self.gt, (0, 1)).all():
            raise ValueError(f"{self.id}: gt is not binary")


@dataclass
class DatasetManifest:
    name: str
    root: str
    entries: list  # (rgb_path, depth_path, gt_path)
    split: str = "test"
    unmatched: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list:
        return [Path(e[0]).stem for e in self.entries]

    def to_json(self, path=None) -> str:
        rows = []
        for rgb, depth, gt in self.entries:
            with Image.open(rgb) as im:
                w, h = im.size
            rows.append({"id": Path(rgb).stem, "rgb": rgb, "depth": depth, "gt": gt, "dims": [h, w]})
        text = json.dumps({"name": self.name, "root": self.root, "split": self.split,
                           "entries": rows}, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class SplitSpec:
    train_components: list  # (dataset_name, count, seed)
    test_components: list  # dataset names


def _index(folder: Path) -> dict:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_dataset(root, name: Optional[str] = None, split: str = "test") -> DatasetManifest:
    root = Path(root)
    missing = [d for d in SUBDIRS if not (root / d).is_dir()]
    if missing:
        raise DatasetError(f"{root}: missing directory {', '.join(missing)} (expected RGB/ depth/ GT/)")
    rgb, depth, gt = (_index(root / d) for d in SUBDIRS)
    stems = sorted(set(rgb) & set(depth) & set(gt))
    unmatched = sorted(str(p) for idx in (rgb, depth, gt) for s, p in idx.items() if s not in stems)
    if not stems:
        raise DatasetError(f"{root}: zero matched triples")
    entries, errors = [], []
    for s in stems:
        triple = (str(rgb[s]), str(depth[s]), str(gt[s]))
        try:
            sizes = set()
            for p in triple:
                with Image.open(p) as im:
                    sizes.add(im.size)
        except OSError as exc:
            errors.append((s, f"undecodable: {exc}"))
            continue
        if len(sizes) > 1:
            errors.append((s, f"shape mismatch {sorted(sizes)}"))
            continue
        entries.append(triple)
    if unmatched:
        logger.warning("%s: %d unmatched files", root, len(unmatched))
    for s, msg in errors:
        logger.warning("%s/%s: %s", root, s, msg)
    if not entries:
        raise DatasetError(f"{root}: zero matched triples")
    return DatasetManifest(name or root.name, str(root), entries, split, unmatched, errors)


def _read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im, dtype=np.float64)
        if im.mode == "F":
            return np.asarray(im, dtype=np.float64)
        return np.asarray(im.convert("L"), dtype=np.float64)


def _resize(arr2d: np.ndarray, side, resample) -> np.ndarray:
    h, w = side if isinstance(side, tuple) else (side, side)
    if arr2d.shape == (h, w):
        return arr2d.astype(np.float32)
    im = Image.fromarray(arr2d.astype(np.float32), mode="F")
    return np.asarray(im.resize((w, h), resample), dtype=np.float32)


def normalize_depth(depth: np.ndarray, invert: bool = False, sample_id: str = "") -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    if hi <= lo:
        logger.warning("%s: constant depth map, using zeros", sample_id or "sample")
        return np.zeros_like(depth, dtype=np.float32)
    d = (depth - lo) / (hi - lo)
    if invert:
        d = 1 - d
    return d.astype(np.float32)


def load_sample(entry, side: Optional[int] = DEFAULT_SIDE, invert_depth: bool = False) -> RgbdSample:
    rgb_path, depth_path, gt_path = entry
    sid = Path(rgb_path).stem
    try:
        with Image.open(rgb_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        depth = _read_gray(depth_path)
        gt = _read_gray(gt_path)
    except OSError as exc:
        raise DatasetError(f"{sid}: undecodable file ({exc})") from exc
    orig = rgb.shape[:2]
    if depth.shape != orig or gt.shape != orig:
        raise DatasetError(f"{sid}: shape mismatch rgb {orig} depth {depth.shape} gt {gt.shape}")
    gt = (gt / 255.0 if gt.max() > 1 else gt) >= 0.5
    if side is not None:
        rgb = np.stack([_resize(rgb[..., c], side, Image.BILINEAR) for c in range(3)], axis=-1)
        depth = _resize(depth, side, Image.BILINEAR)
        gt = _resize(gt.astype(np.float32), side, Image.NEAREST) >= 0.5
    depth = normalize_depth(depth, invert_depth, sid)
    return RgbdSample(
        id=sid,
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        depth=depth[..., None],
        gt=gt.astype(np.float32)[..., None],
        orig_size=tuple(orig),
    )


class ManifestDataset(Sequence):
    """Lazily loaded samples of a manifest (or any list of entries)."""

    def __init__(self, entries, side: Optional[int] = DEFAULT_SIDE, invert_depth: bool = False):
        self.entries = list(entries.entries if isinstance(entries, DatasetManifest) else entries)
        self.side = side
        self.invert_depth = invert_depth

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return load_sample(self.entries[i], self.side, self.invert_depth)


def materialize_split(spec: SplitSpec, pools: Mapping[str, Sequence]):
    """Sample training items per component; the rest of each dataset is its test set.

    ``pools`` maps dataset names to sequences (manifest entries or samples).
    Returns ``(train, test)`` with ``test`` keyed by dataset name.
    """
    train, held_out = [], {}
    for name, count, seed in spec.train_components:
        pool = _pool_items(pools, name)
        if count > len(pool):
            raise DatasetError(f"{name}: requested {count} training samples, dataset has {len(pool)}")
        order = np.random.default_rng(seed).permutation(len(pool))
        chosen = order[:count]
        train.extend(pool[int(i)] for i in chosen)
        taken = set(int(i) for i in chosen) | held_out.get(name, set())
        held_out[name] = taken
    test = {}
    for name in spec.test_components:
        pool = _pool_items(pools, name)
        taken = held_out.get(name, set())
        test[name] = [pool[i] for i in range(len(pool)) if i not in taken]
    return train, test


def _pool_items(pools, name):
    if name not in pools:
        raise DatasetError(f"unknown dataset {name!r}")
    pool = pools[name]
    if isinstance(pool, DatasetManifest):
        return pool.entries
    return pool


def to_tensors(samples: Sequence[RgbdSample], mean=IMAGENET_MEAN, std=IMAGENET_STD,
               dtype=torch.float32):
    """Stack samples into standardized NCHW tensors (rgb, depth, gt)."""
    rgb = np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2)
    depth = np.stack([s.depth for s in samples]).transpose(0, 3, 1, 2)
    gt = np.stack([s.gt for s in samples]).transpose(0, 3, 1, 2)
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    sd = np.asarray(std, dtype=np.float32)[None, :, None, None]
    rgb = (rgb - m) / sd
    return (torch.as_tensor(np.ascontiguousarray(rgb), dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(depth), dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(gt), dtype=dtype))


@dataclass
class SaliencyMap:
    map: np.ndarray  # H x W, [0, 1]
    stage: str = "final"  # initial | final


def resize_map(m: np.ndarray, size) -> np.ndarray:
    return _resize(np.asarray(m, dtype=np.float32), tuple(size), Image.BILINEAR)


def save_saliency(smap, path, size=None):
    """Write a [0, 1] map as an 8-bit grayscale PNG, resized to ``size`` (H, W) first."""
    m = smap.map if isinstance(smap, SaliencyMap) else np.asarray(smap)
    m = np.squeeze(np.asarray(m, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {m.shape}")
    if m.min() < 0 or m.max() > 1:
        raise ValueError(f"saliency values must lie in [0, 1], got [{m.min()}, {m.max()}]")
    if size is not None and tuple(size) != m.shape:
        m = np.clip(resize_map(m, size), 0, 1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.rint(m * 255).astype(np.uint8), mode="L").save(path)


def read_saliency(path, stage: str = "final") -> SaliencyMap:
    return SaliencyMap(_read_gray(path) / 255.0, stage)
