"""Command-line entry point: train, score, eval, sweep.

A run's exact configuration (flags merged over an optional JSON config file
merged over defaults) is written into its output directory before any work
starts, so every result directory is reproducible from the file it contains.

Exit codes: 0 success, 1 internal failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation, model, scoring, training
from .autodiff import ShapeError
from .data import DataError
from .model import Architecture, CheckpointError, ConfigError
from .scoring import ScoringError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

DATASET_SHAPES = {
    "mnist": (28, 28, 1),
    "fashion": (28, 28, 1),
    "coil100": (32, 32, 3),
}

DEFAULTS = {
    "dataset": "mnist",
    "data_root": None,
    "inlier": [1],
    "rhos": [0.10, 0.20, 0.30, 0.40, 0.50],
    "folds": 5,
    "seed": 0,
    "beta": 10.0,
    "epochs": 80,
    "batch_size": 128,
    "latent_dim": 16,
    "arch": "conv",
    "gen_loss": "nonsat",
    "density": "kde",
    "threshold": "f1",
    "out": "runs",
}


def _add_common_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", choices=sorted(DATASET_SHAPES))
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--inlier", help="comma-separated inlier class labels")
    p.add_argument("--rhos", help="comma-separated outlier percentages (e.g. 10,50)")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--arch", choices=["conv", "mlp"])
    p.add_argument("--gen-loss", dest="gen_loss", choices=["nonsat", "sat"])
    p.add_argument("--density", choices=["kde", "normal"])
    p.add_argument("--threshold", choices=["f1", "quantile"])
    p.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bkaand", description="Adversarial-autoencoder novelty detection toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common_flags(p_train)

    p_score = sub.add_parser("score", help="score samples against a checkpoint")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--images", help="IDX image file to score")
    p_score.add_argument("--labels", help="optional IDX label file matching --images")
    p_score.add_argument("--out", default="scores.csv", help="output CSV path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one contaminated mixture")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--rho", type=float, default=0.10)

    p_sweep = sub.add_parser("sweep", help="full (class x fold x rho) evaluation sweep")
    _add_common_flags(p_sweep)
    return parser


def merge_config(args):
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if isinstance(cfg["inlier"], str):
        cfg["inlier"] = [int(c) for c in cfg["inlier"].split(",")]
    if isinstance(cfg["rhos"], str):
        cfg["rhos"] = [float(r) / 100.0 for r in cfg["rhos"].split(",")]
    return cfg


def _architecture(cfg):
    h, w, c = DATASET_SHAPES[cfg["dataset"]]
    return Architecture(
        input_height=h,
        input_width=w,
        input_channels=c,
        latent_dim=cfg["latent_dim"],
        variant=cfg["arch"],
    )


def _train_config(cfg):
    return training.TrainConfig(
        learning_rate=0.002,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        latent_dim=cfg["latent_dim"],
        beta=cfg["beta"],
        seed=cfg["seed"],
        generator_loss_mode="non_saturating" if cfg["gen_loss"] == "nonsat" else "saturating",
        architecture=_architecture(cfg),
    )


def _out_dir(cfg, kind):
    stamp = datetime.date.today().isoformat()
    out = Path(cfg["out"]) / f"{kind}-{cfg['dataset']}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return out


def cmd_train(args):
    cfg = merge_config(args)
    root = data_mod.resolve_data_root(cfg["data_root"])
    samples = data_mod.load_dataset(cfg["dataset"], root)
    out = _out_dir(cfg, "train")

    split = data_mod.make_split(samples, cfg["inlier"], seed=cfg["seed"])
    train_cfg = _train_config(cfg)
    pixels = data_mod.stack_pixels([samples[i] for i in split.train])
    params, logs = training.train(pixels, train_cfg)
    density_mode = "per_dim_kde" if cfg["density"] == "kde" else "standard_normal"
    density, noise = scoring.fit(params, pixels, density_mode=density_mode)

    training.write_epoch_logs(logs, out / "epochs.csv")
    model.save(
        params,
        out / "model.bkaand",
        train_config=train_cfg.to_dict(),
        density_payload=density.to_payload(),
        noise_payload=noise.to_payload(),
    )
    print(f"checkpoint written to {out / 'model.bkaand'}")
    return EXIT_OK


def _load_scoring_checkpoint(path):
    ckpt = model.load(path)
    if ckpt.density_payload is None or ckpt.noise_payload is None:
        raise ConfigError(f"{path}: checkpoint has no fitted density/noise models")
    density = scoring.LatentDensityModel.from_payload(ckpt.density_payload)
    noise = scoring.NoiseModel.from_payload(ckpt.noise_payload)
    return ckpt, density, noise


def cmd_score(args):
    ckpt, density, noise = _load_scoring_checkpoint(args.checkpoint)
    rows = []
    if args.images:
        if args.labels:
            samples = data_mod.load_idx(args.images, args.labels)
        else:
            samples = data_mod.load_idx(args.images, _synth_labels(args.images))
        for s in samples:
            rec = scoring.score(ckpt.params, density, noise, s.pixels)
            rows.append((s.source_id, s.class_label, rec))
    scoring.write_scores_csv(args.out, rows)
    print(f"{len(rows)} scores written to {args.out}")
    return EXIT_OK


def _synth_labels(images_path):
    # score-only runs: fabricate an all-zero label file alongside, in memory
    import io
    import struct as _struct

    with open(images_path, "rb") as fh:
        header = fh.read(16)
    (_, count, _, _) = _struct.unpack(">IIII", header)
    buf = io.BytesIO()
    buf.write(_struct.pack(">II", data_mod.IDX_LABEL_MAGIC, count))
    buf.write(bytes(count))
    import tempfile

    tmp = tempfile.NamedTemporaryFile(suffix=".idx", delete=False)
    tmp.write(buf.getvalue())
    tmp.close()
    return tmp.name


def cmd_eval(args):
    cfg = merge_config(args)
    root = data_mod.resolve_data_root(cfg["data_root"])
    samples = data_mod.load_dataset(cfg["dataset"], root)
    ckpt, density, noise = _load_scoring_checkpoint(args.checkpoint)
    out = _out_dir(cfg, "eval")

    inlier_set = set(cfg["inlier"])
    outlier_pool = frozenset({s.class_label for s in samples} - inlier_set)
    split = data_mod.make_split(samples, inlier_set, seed=cfg["seed"])
    spec = data_mod.ContaminationSpec(
        rho=args.rho, outlier_pool=outlier_pool, seed=cfg["seed"]
    )
    mixture = data_mod.make_mixture(samples, split.test, spec)
    cal = None
    if cfg["threshold"] == "f1":
        cal_spec = data_mod.ContaminationSpec(
            rho=args.rho, outlier_pool=outlier_pool, seed=cfg["seed"] + 7
        )
        cal = data_mod.make_mixture(samples, split.validation, cal_spec)
    report = evaluation.evaluate_fold(
        ckpt.params,
        density,
        noise,
        samples,
        mixture,
        calibration_mixture=cal,
        dataset=cfg["dataset"],
        inlier_classes=inlier_set,
        seed=cfg["seed"],
    )
    evaluation.write_reports_csv(out / "report.csv", [report])
    print(f"auc={report.auc:.4f} f1={report.f1:.4f} (report in {out})")
    return EXIT_OK


def cmd_sweep(args):
    cfg = merge_config(args)
    root = data_mod.resolve_data_root(cfg["data_root"])
    samples = data_mod.load_dataset(cfg["dataset"], root)
    out = _out_dir(cfg, "sweep")

    reports, aggregate, failures = evaluation.sweep(
        samples,
        dataset=cfg["dataset"],
        inlier_classes=cfg["inlier"],
        rhos=cfg["rhos"],
        config=_train_config(cfg),
        folds=cfg["folds"],
        density_mode="per_dim_kde" if cfg["density"] == "kde" else "standard_normal",
        threshold_mode=cfg["threshold"],
        coil_mode=cfg["dataset"] == "coil100",
        progress=lambda r: print(
            f"class={'+'.join(map(str, r.inlier_classes))} fold={r.fold} "
            f"rho={r.rho:.2f} auc={r.auc:.4f} f1={r.f1:.4f}"
        ),
    )
    evaluation.write_reports_csv(out / "reports.csv", reports)
    evaluation.write_aggregate(out / "aggregate.csv", out / "aggregate.json", aggregate)
    if failures:
        for inlier, fold, exc in failures:
            print(f"cell failed: class={inlier} fold={fold}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"sweep complete; results in {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (
        DataError, ConfigError, ScoringError, ShapeError,
        CheckpointError, FileNotFoundError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - internal failure path
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
