"""Cross-dataset generalization grids, dataset-combination runs and the
depth-utility comparison.

Every row trains one model from the same initialization seed, so cells
differ only through the training data.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig
from .data_io import DatasetError, SplitSpec, _pool_items
from .model import ModelConfig, build_variant
from .trainer import TrainConfig, evaluate_model, train

logger = logging.getLogger(__name__)

METRICS = ("s_alpha", "max_f")


@dataclass
class BenchConfig:
    variant: str = "BBS_RL"
    model: ModelConfig = field(default_factory=lambda: ModelConfig(backbone=BackboneConfig(kind="toy")))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-3, decay_every=None, epochs=60, batch=8, side=64, augment=False))
    init_seed: int = 0
    normalize: bool = True

    def to_dict(self) -> dict:
        return {"variant": self.variant, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "init_seed": self.init_seed, "normalize": self.normalize}


def drop(self_score: float, mean_others: float) -> float:
    """Relative gap between in-distribution and out-of-distribution scores."""
    return (self_score - mean_others) / self_score


def row_name(spec: SplitSpec) -> str:
    return "+".join(name for name, _, _ in spec.train_components)


@dataclass
class GeneralizationGrid:
    rows: list
    cols: list
    cells: dict = field(default_factory=dict)  # (row, col) -> {"s_alpha": .., "max_f": ..}
    failed: dict = field(default_factory=dict)  # row -> error message
    meta: dict = field(default_factory=dict)

    def cell(self, row, col, metric="s_alpha") -> Optional[float]:
        c = self.cells.get((row, col))
        return None if c is None else c[metric]

    def self_score(self, row, metric="s_alpha") -> Optional[float]:
        return self.cell(row, row, metric) if row in self.cols else None

    def mean_others(self, row, metric="s_alpha") -> Optional[float]:
        vals = [self.cell(row, c, metric) for c in self.cols if c != row]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def drop(self, row, metric="s_alpha") -> Optional[float]:
        s, m = self.self_score(row, metric), self.mean_others(row, metric)
        if s is None or m is None or s == 0:
            return None
        return drop(s, m)

    def to_rows(self) -> list:
        out = []
        for r in self.rows:
            rec = {"row": r, "status": "failed" if r in self.failed else "ok"}
            for c in self.cols:
                for m in METRICS:
                    rec[f"{c}.{m}"] = self.cell(r, c, m)
            for m in METRICS:
                rec[f"self.{m}"] = self.self_score(r, m)
                rec[f"mean_others.{m}"] = self.mean_others(r, m)
                rec[f"drop.{m}"] = self.drop(r, m)
            out.append(rec)
        return out

    def to_csv(self, path):
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_json(self, path=None) -> str:
        text = json.dumps({"rows": self.rows, "cols": self.cols, "table": self.to_rows(),
                           "failed": self.failed, "meta": self.meta}, indent=2, default=str)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def fixed_test_sets(specs: Sequence[SplitSpec], pools: Mapping[str, Sequence], cols) -> dict:
    """Held-out part of each column dataset: everything no row trains on."""
    taken = {}
    for spec in specs:
        for name, count, seed in spec.train_components:
            pool = _pool_items(pools, name)
            if count > len(pool):
                raise DatasetError(f"{name}: requested {count} training samples, dataset has {len(pool)}")
            order = np.random.default_rng(seed).permutation(len(pool))
            taken.setdefault(name, set()).update(int(i) for i in order[:count])
    out = {}
    for c in cols:
        pool = _pool_items(pools, c)
        skip = taken.get(c, set())
        out[c] = [pool[i] for i in range(len(pool)) if i not in skip]
    return out


def train_items(spec: SplitSpec, pools: Mapping[str, Sequence]) -> list:
    items = []
    for name, count, seed in spec.train_components:
        pool = _pool_items(pools, name)
        order = np.random.default_rng(seed).permutation(len(pool))
        items.extend(pool[int(i)] for i in order[:count])
    return items


def train_model(items, cfg: BenchConfig, seed_offset: int = 0):
    torch.manual_seed(cfg.init_seed + seed_offset)
    model = build_variant(cfg.variant, cfg.model)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + seed_offset)
    train(model, items, tcfg)
    return model


def _evaluate_rows(specs, pools, cfg, cols, tests, meta) -> GeneralizationGrid:
    grid = GeneralizationGrid(rows=[row_name(s) for s in specs], cols=list(cols), meta=meta)
    for spec, name in zip(specs, grid.rows):
        try:
            model = train_model(train_items(spec, pools), cfg)
            for c in cols:
                rep = evaluate_model(model, tests[c], cfg.train.mean, cfg.train.std, normalize=cfg.normalize)
                grid.cells[(name, c)] = {"s_alpha": rep.s_alpha, "max_f": rep.max_f}
        except Exception as exc:  # a failed row must not sink the grid
            logger.warning("row %s failed: %s", name, exc)
            grid.failed[name] = f"{type(exc).__name__}: {exc}"
    return grid


def run_grid(specs: Sequence[SplitSpec], pools: Mapping[str, Sequence], cfg: Optional[BenchConfig] = None,
             cols: Optional[Sequence[str]] = None, holdout_specs: Sequence[SplitSpec] = ()) -> GeneralizationGrid:
    """Train one model per spec and evaluate it on every column's held-out set.

    Column test sets exclude every sample drawn for training by ``specs``
    and ``holdout_specs``, so all rows are scored on the same images.
    """
    cfg = cfg or BenchConfig()
    if cols is None:
        cols = []
        for spec in specs:
            for name in list(spec.test_components) + [n for n, _, _ in spec.train_components]:
                if name not in cols:
                    cols.append(name)
    tests = fixed_test_sets(list(specs) + list(holdout_specs), pools, cols)
    return _evaluate_rows(specs, pools, cfg, list(cols), tests, {"config": cfg.to_dict()})


def union_spec(names: Sequence[str], counts: Mapping[str, int], seed: int = 0) -> SplitSpec:
    seen = []
    for n in names:
        if n in seen:
            logger.warning("dataset %s listed twice in a combination; using it once", n)
            continue
        seen.append(n)
    return SplitSpec([(n, counts[n], seed) for n in seen], list(seen))


def run_combinations(combos: Sequence[Sequence[str]], pools: Mapping[str, Sequence], counts: Mapping[str, int],
                     cfg: Optional[BenchConfig] = None, cols: Optional[Sequence[str]] = None,
                     seed: int = 0) -> GeneralizationGrid:
    """One row per union of training sets, evaluated on every test set.

    Test sets are the held-out parts of the per-dataset splits, so a
    singleton combination reproduces the matching ``run_grid`` row.
    """
    cfg = cfg or BenchConfig()
    specs = [union_spec(c, counts, seed) for c in combos]
    if cols is None:
        cols = list(dict.fromkeys(n for c in combos for n in c))
    singles = [SplitSpec([(n, counts[n], seed)], [n]) for n in cols]
    return run_grid(specs, pools, cfg, cols, holdout_specs=singles)


def zero_depth(samples) -> list:
    return [dataclasses.replace(s, depth=np.zeros_like(s.depth)) for s in samples]


@dataclass
class DepthUtilityReport:
    seeds: list
    with_depth: list  # MetricReport per seed
    without_depth: list

    def wins(self, metric="s_alpha") -> int:
        return sum(getattr(a, metric) > getattr(b, metric) for a, b in zip(self.with_depth, self.without_depth))

    def summary(self) -> dict:
        return {
            "seeds": self.seeds,
            "with_depth": [r.summary() for r in self.with_depth],
            "without_depth": [r.summary() for r in self.without_depth],
            "wins_s_alpha": self.wins("s_alpha"),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.summary(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def depth_utility(train_set, test_set, cfg: Optional[BenchConfig] = None,
                  seeds: Sequence[int] = (0, 1, 2)) -> DepthUtilityReport:
    """Train with depth present and with depth zeroed, same split and seeds."""
    cfg = cfg or BenchConfig()
    blind_train, blind_test = zero_depth(train_set), zero_depth(test_set)
    with_d, without_d = [], []
    for s in seeds:
        m = train_model(train_set, cfg, s)
        with_d.append(evaluate_model(m, test_set, cfg.train.mean, cfg.train.std, normalize=cfg.normalize))
        m = train_model(blind_train, cfg, s)
        without_d.append(evaluate_model(m, blind_test, cfg.train.mean, cfg.train.std, normalize=cfg.normalize))
    return DepthUtilityReport(list(seeds), with_d, without_d)
