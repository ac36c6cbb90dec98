"""AUROC and F1 metrics plus the contamination-sweep experiment harness.

AUC is computed from the Mann-Whitney rank statistic (average ranks for
ties), which equals the trapezoidal area under the ROC curve and handles
tied scores exactly. F1 treats the inlier class as positive; samples are
predicted outlier when their score falls below the threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from . import data as data_mod
from . import scoring, training
from .model import ConfigError


class MetricError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = inlier, 0 = outlier
    sample_ids: list

    @classmethod
    def build(cls, scores, labels, sample_ids=None):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=int)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise MetricError("scores and labels must be parallel 1-D sequences")
        if sample_ids is None:
            sample_ids = [str(i) for i in range(scores.size)]
        return cls(scores=scores, labels=labels, sample_ids=list(sample_ids))


def auc(scored):
    """P(random inlier outscores random outlier), ties counted half."""
    labels = scored.labels
    n_in = int((labels == 1).sum())
    n_out = int((labels == 0).sum())
    if n_in == 0 or n_out == 0:
        raise MetricError("AUC undefined: need both inliers and outliers")
    ranks = rankdata(scored.scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_in * (n_in + 1) / 2.0) / (n_in * n_out))


def f1_at(scored, tau):
    """F1 with inlier positive at threshold tau; returns (f1, counts dict)."""
    pred_inlier = scored.scores >= tau
    actual_inlier = scored.labels == 1
    tp = int((pred_inlier & actual_inlier).sum())
    fp = int((pred_inlier & ~actual_inlier).sum())
    fn = int((~pred_inlier & actual_inlier).sum())
    tn = int((~pred_inlier & ~actual_inlier).sum())
    denom = 2 * tp + fp + fn
    f1 = 2.0 * tp / denom if denom else 0.0
    return f1, {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def roc_points(scored):
    """(fpr, tpr, tau) triples over every distinct threshold, for CSV export."""
    order = np.argsort(-scored.scores, kind="stable")
    labels = scored.labels[order]
    scores = scored.scores[order]
    n_in = max(int((labels == 1).sum()), 1)
    n_out = max(int((labels == 0).sum()), 1)
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for i in range(labels.size):
        tp += labels[i] == 1
        fp += labels[i] == 0
        if i + 1 < labels.size and scores[i + 1] == scores[i]:
            continue
        points.append((fp / n_out, tp / n_in, float(scores[i])))
    return points


@dataclass
class EvalReport:
    dataset: str
    inlier_classes: list
    rho: float
    fold: int
    auc: float
    f1: float
    threshold: float
    threshold_method: str
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int
    config_hash: str

    CSV_FIELDS = (
        "dataset", "inlier_classes", "rho", "fold", "auc", "f1", "threshold",
        "threshold_method", "tp", "fp", "tn", "fn", "seed", "config_hash",
    )

    def csv_row(self):
        d = asdict(self)
        d["inlier_classes"] = "+".join(str(c) for c in self.inlier_classes)
        return [d[k] for k in self.CSV_FIELDS]


def config_hash(config):
    import hashlib

    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:12]


def evaluate_fold(
    params,
    density,
    noise,
    samples,
    mixture,
    calibration_mixture=None,
    dataset="",
    inlier_classes=(),
    fold=0,
    seed=0,
    cfg_hash="",
    contamination=None,
):
    """Score a test mixture, calibrate the threshold, and fill a report.

    The threshold comes from the calibration mixture when given (validation
    protocol); otherwise from the quantile fallback on the test mixture's
    expected contamination.
    """
    def _totals(mix):
        pixels = data_mod.stack_pixels([samples[i] for i in mix.indices])
        return np.array(
            [rec.total for rec in scoring.score_batch(params, density, noise, pixels)]
        )

    test_totals = _totals(mixture)
    if calibration_mixture is not None:
        cal_totals = _totals(calibration_mixture)
        thr = scoring.calibrate_threshold(cal_totals, calibration_mixture.labels)
    else:
        rho = contamination if contamination is not None else mixture.rho
        inlier_totals = test_totals[mixture.labels == 1]
        thr = scoring.ThresholdResult(
            tau=float(np.quantile(inlier_totals, rho)), method="quantile_fallback"
        )

    scored = ScoredSet.build(
        test_totals, mixture.labels, [samples[i].source_id for i in mixture.indices]
    )
    f1, counts = f1_at(scored, thr.tau)
    return EvalReport(
        dataset=dataset,
        inlier_classes=sorted(inlier_classes),
        rho=mixture.rho,
        fold=fold,
        auc=auc(scored),
        f1=f1,
        threshold=thr.tau,
        threshold_method=thr.method,
        seed=seed,
        config_hash=cfg_hash,
        **counts,
    )


def train_fold(samples, train_indices, config, density_mode="per_dim_kde"):
    """Train a model on the given inlier indices and fit the score models."""
    pixels = data_mod.stack_pixels([samples[i] for i in train_indices])
    params, logs = training.train(pixels, config)
    density, noise = scoring.fit(params, pixels, density_mode=density_mode)
    return params, logs, density, noise


def sweep(
    samples,
    dataset,
    inlier_classes,
    rhos,
    config,
    folds=5,
    density_mode="per_dim_kde",
    threshold_mode="f1",
    coil_mode=False,
    progress=None,
):
    """Train one model per (inlier class, fold) and evaluate every rho on it.

    Returns (reports, aggregate) where aggregate maps rho -> mean AUC/F1
    across classes and folds. Per-cell failures are collected and re-raised
    after the loop so partial results survive.
    """
    all_labels = sorted({s.class_label for s in samples})
    reports = []
    failures = []
    for inlier in inlier_classes:
        inlier_set = {inlier} if np.isscalar(inlier) else set(inlier)
        outlier_pool = frozenset(set(all_labels) - inlier_set)
        inlier_indices = np.array(
            [i for i, s in enumerate(samples) if s.class_label in inlier_set]
        )
        for fold in range(folds):
            try:
                fold_seed = config.seed + 1000 * fold
                if coil_mode:
                    # 80/20 train/test, no validation; quantile threshold
                    rng = np.random.default_rng([fold_seed, 3])
                    perm = inlier_indices[rng.permutation(inlier_indices.size)]
                    n_test = max(1, int(round(0.2 * perm.size)))
                    test_idx, train_idx = perm[:n_test], perm[n_test:]
                    val_idx = np.array([], dtype=int)
                else:
                    split = data_mod.make_split(samples, inlier_set, seed=fold_seed)
                    train_idx, val_idx, test_idx = split.train, split.validation, split.test

                cfg = training.TrainConfig.from_dict(
                    {**config.to_dict(), "seed": fold_seed}
                )
                params, _, density, noise = train_fold(
                    samples, train_idx, cfg, density_mode=density_mode
                )
                for rho in rhos:
                    spec = data_mod.ContaminationSpec(
                        rho=rho,
                        outlier_pool=outlier_pool,
                        seed=fold_seed + int(rho * 1000),
                        one_per_category=coil_mode,
                    )
                    mixture = data_mod.make_mixture(samples, test_idx, spec)
                    cal = None
                    if threshold_mode == "f1" and val_idx.size:
                        cal_spec = data_mod.ContaminationSpec(
                            rho=rho,
                            outlier_pool=outlier_pool,
                            seed=fold_seed + int(rho * 1000) + 7,
                            one_per_category=coil_mode,
                        )
                        cal = data_mod.make_mixture(samples, val_idx, cal_spec)
                    report = evaluate_fold(
                        params,
                        density,
                        noise,
                        samples,
                        mixture,
                        calibration_mixture=cal,
                        dataset=dataset,
                        inlier_classes=inlier_set,
                        fold=fold,
                        seed=fold_seed,
                        cfg_hash=config_hash(cfg),
                    )
                    reports.append(report)
                    if progress is not None:
                        progress(report)
            except Exception as exc:  # cell failure: keep going, report at end
                failures.append((inlier, fold, exc))

    aggregate = {}
    for rho in rhos:
        cell = [r for r in reports if abs(r.rho - rho) < 1e-9]
        if cell:
            aggregate[rho] = {
                "auc": float(np.mean([r.auc for r in cell])),
                "f1": float(np.mean([r.f1 for r in cell])),
                "cells": len(cell),
            }
    return reports, aggregate, failures


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EvalReport.CSV_FIELDS)
        for r in reports:
            writer.writerow(r.csv_row())


def write_aggregate(csv_path, json_path, aggregate):
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "auc", "f1", "cells"])
        for rho in sorted(aggregate):
            row = aggregate[rho]
            writer.writerow([rho, row["auc"], row["f1"], row["cells"]])
    with open(json_path, "w") as fh:
        json.dump({str(k): v for k, v in aggregate.items()}, fh, indent=2)


def write_roc_csv(path, scored):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "tau"])
        for fpr, tpr, tau in roc_points(scored):
            writer.writerow([fpr, tpr, tau])
