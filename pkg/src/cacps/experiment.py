"""Method comparison on synthetic phantoms: supervised-only vs single vs double CACPS.

Per experiment seed a fresh dataset is drawn (labeled samples only in the
two mildest domains, validation holdouts from the two harshest) and three
predictors are scored on the validation split:

* ``supervised``: the two networks of model 1 trained with beta = 0 on the
  labeled samples alone, seeing the same labeled batches as model 1;
* ``single``: CACPS model 1 (average of its two networks);
* ``double``: ensemble of CACPS models 1 and 2.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import phantom
from . import train as tr

log = logging.getLogger(__name__)

METHODS = ("supervised", "single", "double")


def trend_dataset_config(seed: int, n_per_domain: int = 25, size: int = 64) -> phantom.DatasetConfig:
    return phantom.DatasetConfig(
        n_per_domain=n_per_domain,
        labeled_fraction=[0.2, 0.2, 0.0, 0.0],
        val_fraction=[0.0, 0.0, 0.2, 0.2],
        seed=seed,
        H=size,
        W=size,
    )


def trend_train_config(**overrides) -> tr.TrainConfig:
    """CACPS settings used for the comparison (sized for a single CPU core)."""
    base = dict(
        lr_max=3e-3,
        lr_min=1e-4,
        epochs=12,
        steps_per_epoch=10,
        batch_size=8,
        labeled_batch_size=4,
        beta=1.5,
        beta_rampup_epochs=12.0,
    )
    base.update(overrides)
    return tr.TrainConfig(**base)


def seeds_for(seed: int) -> tr.Seeds:
    return tr.Seeds(data=seed, net1=4 * seed + 1, net2=4 * seed + 2, net3=4 * seed + 3, net4=4 * seed + 4, shuffle=1000 + seed)


def baseline_config(cfg: tr.TrainConfig) -> tr.TrainConfig:
    """Supervised-only twin of ``cfg``: same nets, steps and labeled batches, no unlabeled data."""
    k = cfg.labeled_batch_size or cfg.batch_size
    return replace(cfg, beta=0.0, labeled_only=True, batch_size=max(k, 2), labeled_batch_size=0, models=[1])


@dataclass
class SeedOutcome:
    seed: int
    scores: dict[str, tr.DiceResult]
    seconds: float

    def avg(self, method: str) -> float:
        return self.scores[method].average


@dataclass
class TrendOutcome:
    runs: list[SeedOutcome] = field(default_factory=list)

    def column(self, method: str) -> np.ndarray:
        return np.array([r.avg(method) for r in self.runs])

    def single_beats_baseline(self) -> int:
        return int(np.sum(self.column("single") > self.column("supervised")))

    def double_mean_ge_single_mean(self) -> bool:
        return bool(self.column("double").mean() >= self.column("single").mean())


def run_seed(seed: int, cfg: tr.TrainConfig, workdir, n_per_domain: int = 25, size: int = 64) -> SeedOutcome:
    t0 = time.perf_counter()
    root = Path(workdir) / f"seed{seed}"
    cfg = replace(cfg, seeds=seeds_for(seed), models=[1, 2])
    manifest = phantom.build_dataset(trend_dataset_config(seed, n_per_domain, size), root / "data")
    val = tr.Pool.from_entries(manifest, manifest.select("val"))

    def score(m1, m2=None):
        _, pred = tr.ensemble_predict(m1, m2, val.images)
        return tr.evaluate_dice(list(pred), list(val.masks), val.sample_ids)

    base = tr.train_cacps_model(1, manifest, baseline_config(cfg))
    m1 = tr.train_cacps_model(1, manifest, cfg)
    m2 = tr.train_cacps_model(2, manifest, cfg)
    scores = {
        "supervised": score(base.nets),
        "single": score(m1.nets),
        "double": score(m1.nets, m2.nets),
    }
    out = SeedOutcome(seed, scores, time.perf_counter() - t0)
    log.info("seed %d: %s (%.0fs)", seed, {k: round(v.average, 4) for k, v in scores.items()}, out.seconds)
    return out


def run_trend(seeds, cfg: tr.TrainConfig, workdir, n_per_domain: int = 25, size: int = 64) -> TrendOutcome:
    outcome = TrendOutcome()
    for s in seeds:
        outcome.runs.append(run_seed(s, cfg, workdir, n_per_domain, size))
    return outcome


def write_summary(outcome: TrendOutcome, path) -> None:
    """One row per (seed, method) in the column layout ``report`` consumes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "method", "dice_LV", "dice_MYO", "dice_RV", "dice_avg"])
        for r in outcome.runs:
            for m in METHODS:
                d = r.scores[m]
                w.writerow([r.seed, m, *(repr(d.per_class[c]) for c in tr.CLASS_NAMES), repr(d.average)])
