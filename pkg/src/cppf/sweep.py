"""Grid sweeps comparing CPPF against the baseline at every grid point."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, format_value, parse_value
from .data import Dataset
from .trainer import run_experiment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepRow:
    point: dict
    cppf: tuple[float, ...]
    baseline: tuple[float, ...]

    @property
    def cppf_mean(self) -> float:
        return float(np.mean(self.cppf))

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline))

    @property
    def margin(self) -> float:
        return self.cppf_mean - self.baseline_mean


def parse_grid(text: str) -> tuple[str, list]:
    """``key=v1,v2,...`` into a key and its typed values."""
    if "=" not in text:
        raise ConfigError(f"grid must look like key=v1,v2,... (got {text!r})")
    key, raw = (s.strip() for s in text.split("=", 1))
    values = [parse_value(key, v) for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"grid for {key!r} has no values")
    return key, values


def seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return cfg.replace(seed_model=seed, seed_data=seed, seed_split=seed)


_ESR_ONLY = ("esr_lambda", "chosen_proportion", "alpha", "alpha_schedule", "alpha_stages")


def _baseline_key(cfg: TrainConfig) -> TrainConfig:
    """Configs differing only in settings of disabled components train identically."""
    defaults = TrainConfig()
    return cfg.replace(**{k: getattr(defaults, k) for k in _ESR_ONLY}) if not cfg.use_esr else cfg


def sweep(
    cfg: TrainConfig,
    grid: dict[str, list],
    seeds: list[int],
    dataset: Dataset | None = None,
) -> list[SweepRow]:
    """Cartesian product of ``grid``; each point runs CPPF and the baseline for every seed.

    Baseline runs are cached, so parameters that only affect disabled
    components (the ESR margin and center proportion) reuse one baseline run.
    """
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    keys = list(grid)
    cache: dict[TrainConfig, float] = {}
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        try:
            point_cfg = cfg.replace(**point)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cppf, base = [], []
        for s in seeds:
            run_cfg = seeded(point_cfg, s)
            cppf.append(run_experiment(run_cfg, dataset).average_accuracy)
            key = _baseline_key(run_cfg.as_baseline())
            if key not in cache:
                cache[key] = run_experiment(run_cfg.as_baseline(), dataset).average_accuracy
            base.append(cache[key])
        row = SweepRow(point, tuple(cppf), tuple(base))
        log.info("%s  cppf %.4f  baseline %.4f", point, row.cppf_mean, row.baseline_mean)
        rows.append(row)
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    keys = list(rows[0].point) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*keys, "cppf_A_T", "baseline_A_T", "margin", "cppf_per_seed", "baseline_per_seed"])
        for r in rows:
            w.writerow(
                [
                    *(format_value(r.point[k]) for k in keys),
                    repr(r.cppf_mean),
                    repr(r.baseline_mean),
                    repr(r.margin),
                    ";".join(repr(a) for a in r.cppf),
                    ";".join(repr(a) for a in r.baseline),
                ]
            )


def read_sweep_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
