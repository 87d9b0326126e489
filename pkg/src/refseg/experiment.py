"""Multi-seed experiment runner and ablation sweeps.

A run directory holds ``metrics.csv``, ``summary.csv``, ``config.resolved``,
``run.log`` (JSON lines: losses, pool ids and augmentation records per
step), ``pool_log.csv`` and ``checkpoints/seed-<s>/{best,last}``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, with_overrides
from .estimators import RPGSegmenter
from .matching import blas_threads, worker_count
from .synth import generate_dataset
from .tensor_io import SeededRng

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("seed", "epoch", "split", "class", "iou", "miou")
SUMMARY_COLUMNS = ("method", "n_labeled", "mean_miou", "std_miou")
ABLATION_PARAMS = {"pool-size": "pool.p", "k": "pool.k"}


@dataclass
class ExperimentResult:
    out_dir: str
    method: str
    n_labeled: int
    test_miou: list = field(default_factory=list)
    best_epochs: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_miou))

    @property
    def std(self) -> float:
        return float(np.std(self.test_miou))


def _fmt(x) -> str:
    x = float(x)
    return "nan" if np.isnan(x) else f"{x:.10f}"


def _metric_rows(seed, epoch, split, report):
    rows = [(seed, epoch, split, j, _fmt(v), _fmt(report.miou)) for j, v in enumerate(report.per_class)]
    rows.append((seed, epoch, split, "all", _fmt(report.miou), _fmt(report.miou)))
    return rows


def seed_dataset(cfg: ExperimentConfig, seed: int):
    d = cfg.data
    rng = SeededRng(seed).derive("data")
    return generate_dataset(d.scene_spec(), rng, d.n_labeled, d.n_unlabeled, d.n_val, d.n_test)


def run_experiment(cfg: ExperimentConfig, master_seed: int, out_dir, n_jobs=None) -> ExperimentResult:
    """Train ``cfg.data.n_seeds`` models (seeds ``master_seed + i``) and write the run directory.

    The test split is scored with the parameters from the best validation
    evaluation; the summary reports the mean and population std over seeds.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(cfg.dumps())
    workers = worker_count(n_jobs)
    result = ExperimentResult(out_dir, cfg.method.name, cfg.data.n_labeled)
    metrics = []
    with open(os.path.join(out_dir, "run.log"), "w") as run_log, \
            open(os.path.join(out_dir, "pool_log.csv"), "w", newline="") as pool_fh, \
            blas_threads(workers):
        pool_csv = csv.writer(pool_fh)
        pool_csv.writerow(("seed", "iteration", "epoch", "step", "image_ids"))
        run_log.write(json.dumps({"event": "start", "master_seed": master_seed, "notes": cfg.notes}) + "\n")
        for i in range(cfg.data.n_seeds):
            seed = master_seed + i
            ds = seed_dataset(cfg, seed)
            iteration = [0]

            def callback(ev, seed=seed, iteration=iteration):
                if ev["event"] == "step":
                    rec = ev["record"]
                    pool_csv.writerow((seed, iteration[0], ev["epoch"], ev["step"],
                                       ";".join(map(str, rec["labeled_ids"]))))
                    row = {"event": "step", "seed": seed, "iteration": iteration[0], "epoch": ev["epoch"],
                           "step": ev["step"], "loss": ev["loss"].as_row(), **rec}
                    run_log.write(json.dumps(row, sort_keys=True) + "\n")
                    iteration[0] += 1
                else:
                    rep = ev["report"]
                    metrics.extend(_metric_rows(seed, ev["epoch"], "val", rep))
                    if rep.excluded:
                        run_log.write(json.dumps({"event": "excluded-classes", "seed": seed,
                                                  "epoch": ev["epoch"], "classes": rep.excluded}) + "\n")

            est = RPGSegmenter(**cfg.estimator_params(), random_state=seed,
                               n_jobs=workers, callback=callback)
            est.fit(ds.labeled_images, ds.labeled_labels, ds.unlabeled_images,
                    ds.val_images if len(ds.val_images) else None,
                    ds.val_labels if len(ds.val_images) else None)
            for w in est.pool_warnings_:
                run_log.write(json.dumps({"event": "warning", "seed": seed, "message": w}) + "\n")
            test = est.evaluate(ds.test_images, ds.test_labels)
            metrics.extend(_metric_rows(seed, est.best_epoch_, "test", test))
            result.test_miou.append(test.miou)
            result.best_epochs.append(est.best_epoch_)
            ckpt = os.path.join(out_dir, "checkpoints", f"seed-{seed}")
            est.model_.save(os.path.join(ckpt, "best"))
            est.final_model_.save(os.path.join(ckpt, "last"))
            run_log.write(json.dumps({"event": "test", "seed": seed, "best_epoch": est.best_epoch_,
                                      "miou": test.miou}) + "\n")
            log.info("seed %d: test mIoU %.4f (best epoch %d)", seed, test.miou, est.best_epoch_)

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerows(metrics)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerow((result.method, result.n_labeled, _fmt(result.mean), _fmt(result.std)))
    return result


def parse_values(param: str, text: str) -> list:
    """Split ``"1,2,3"`` (or ``"10%,50%"`` for k) into config values."""
    if param not in ABLATION_PARAMS:
        raise ValueError(f"unknown ablation parameter {param!r}; choose from {sorted(ABLATION_PARAMS)}")
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            raise ValueError(f"empty value in {text!r}")
        if param == "k" and item.endswith("%"):
            values.append(item)
        else:
            try:
                values.append(int(item))
            except ValueError:
                raise ValueError(f"{param} values must be integers, got {item!r}") from None
    return values


def ablate(cfg: ExperimentConfig, param: str, values, master_seed: int, out_dir, n_jobs=None) -> list:
    """Run one experiment per value of ``param``; writes ``ablation.csv`` with one row per setting."""
    if param not in ABLATION_PARAMS:
        raise ValueError(f"unknown ablation parameter {param!r}; choose from {sorted(ABLATION_PARAMS)}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        sub = with_overrides(cfg, {ABLATION_PARAMS[param]: value})
        res = run_experiment(sub, master_seed, os.path.join(out_dir, f"{param}-{value}"), n_jobs=n_jobs)
        rows.append((param, value, res.method, res.n_labeled, res.mean, res.std))
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("param", "value") + SUMMARY_COLUMNS)
        for param_, value, method, n_l, mean, std in rows:
            w.writerow((param_, value, method, n_l, _fmt(mean), _fmt(std)))
    return rows
