"""Dataset ingestion and experiment plans: splits, folds, contamination mixtures.

MNIST and Fashion-MNIST arrive as IDX files (big-endian header, unsigned-byte
pixels); COIL-100 as a directory of per-object images resized to 32x32 RGB.
All loaders are byte-deterministic. Plans (60/20/20 splits, stratified
5-folds, contaminated mixtures) are driven by explicit seeds and never put
outliers into training data.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "BKAAND_DATA_DIR"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(RuntimeError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # [C, H, W] float32 in [0, 1]
    class_label: int
    source_id: str


def stack_pixels(samples):
    return np.stack([s.pixels for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# IDX format


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated while reading {what}")
    return buf


def load_idx(images_path, labels_path, source_prefix=None):
    """Load an IDX image/label file pair into ImageSamples (pixels / 255)."""
    prefix = source_prefix or Path(images_path).stem
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path, "labels"), dtype=np.uint8)
    if label_count != count:
        raise DataError(
            f"image count {count} ({images_path}) != label count {label_count} ({labels_path})"
        )

    scaled = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return [
        ImageSample(pixels=scaled[i], class_label=int(labels[i]), source_id=f"{prefix}:{i}")
        for i in range(count)
    ]


def write_idx(samples, images_path, labels_path):
    """Write samples back to an IDX pair (grayscale only); supports fixtures."""
    arr = stack_pixels(samples)
    if arr.shape[1] != 1:
        raise DataError("write_idx supports single-channel images only")
    pixels = np.clip(np.rint(arr[:, 0] * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(np.array([s.class_label for s in samples], dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# COIL-100


_COIL_OBJ_RE = re.compile(r"obj(\d+)")


def load_coil(directory, size=32):
    """Load COIL-100 images as 32x32 RGB in [0, 1].

    Accepts either per-object subdirectories (obj1/...) or a flat directory
    of files named objN__angle.png (the distribution convention).
    """
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")

    files_by_object = {}
    subdirs = sorted(d for d in directory.iterdir() if d.is_dir() and _COIL_OBJ_RE.fullmatch(d.name))
    if subdirs:
        for d in subdirs:
            obj = int(_COIL_OBJ_RE.fullmatch(d.name).group(1))
            files_by_object[obj] = sorted(
                f for f in d.iterdir() if f.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg")
            )
    else:
        for f in sorted(directory.iterdir()):
            m = _COIL_OBJ_RE.match(f.name)
            if m and f.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg"):
                files_by_object.setdefault(int(m.group(1)), []).append(f)

    if not files_by_object:
        raise DataError(f"{directory}: no COIL object images found")

    samples = []
    failures = []
    for obj in sorted(files_by_object):
        for f in sorted(files_by_object[obj]):
            try:
                with Image.open(f) as img:
                    img = img.convert("RGB").resize((size, size), Image.BILINEAR)
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except Exception as exc:
                failures.append(f"{f}: {exc}")
                continue
            samples.append(
                ImageSample(
                    pixels=arr.transpose(2, 0, 1).copy(),
                    class_label=obj,
                    source_id=str(f.relative_to(directory)),
                )
            )
    if failures:
        raise DataError("unreadable COIL images:\n" + "\n".join(failures))
    return samples


# ---------------------------------------------------------------------------
# plans


@dataclass
class SplitPlan:
    inlier_classes: frozenset
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def make_split(samples, inlier_classes, seed, fractions=(0.6, 0.2, 0.2)):
    """60/20/20 split over the inlier samples, seeded shuffle then slicing."""
    inlier_classes = frozenset(int(c) for c in inlier_classes)
    idx = np.array([i for i, s in enumerate(samples) if s.class_label in inlier_classes])
    if idx.size == 0:
        raise DataError(f"no samples with inlier classes {sorted(inlier_classes)}")
    if idx.size < 10:
        raise DataError(f"need at least 10 inlier samples, got {idx.size}")
    rng = np.random.default_rng(seed)
    idx = idx[rng.permutation(idx.size)]
    n_train = int(round(fractions[0] * idx.size))
    n_val = int(round(fractions[1] * idx.size))
    return SplitPlan(
        inlier_classes=inlier_classes,
        train=idx[:n_train],
        validation=idx[n_train : n_train + n_val],
        test=idx[n_train + n_val :],
        seed=seed,
    )


SUPPORTED_RHOS = (0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50)


@dataclass
class ContaminationSpec:
    rho: float
    outlier_pool: frozenset  # class labels allowed as outliers
    seed: int
    one_per_category: bool = False  # COIL mode


@dataclass
class Mixture:
    """Labeled evaluation set; label 1 = inlier, 0 = outlier."""

    indices: np.ndarray  # indices into the source sample list
    labels: np.ndarray
    rho: float


def make_mixture(samples, test_inlier_indices, spec):
    """Contaminate the inlier test set so outliers form fraction rho of it."""
    n_in = len(test_inlier_indices)
    n_out = int(round(spec.rho / (1.0 - spec.rho) * n_in))
    pool = [
        i
        for i, s in enumerate(samples)
        if s.class_label in spec.outlier_pool
    ]
    rng = np.random.default_rng(spec.seed)
    if spec.one_per_category:
        by_class = {}
        for i in pool:
            by_class.setdefault(samples[i].class_label, []).append(i)
        if n_out > len(by_class):
            max_rho = len(by_class) / (len(by_class) + n_in)
            raise DataError(
                f"need {n_out} outlier categories but only {len(by_class)} available; "
                f"max achievable rho is {max_rho:.3f}"
            )
        classes = rng.permutation(sorted(by_class))[:n_out]
        chosen = [by_class[c][rng.integers(len(by_class[c]))] for c in classes]
    else:
        if n_out > len(pool):
            max_rho = len(pool) / (len(pool) + n_in)
            raise DataError(
                f"need {n_out} outliers but pool has {len(pool)}; "
                f"max achievable rho is {max_rho:.3f}"
            )
        chosen = list(rng.permutation(pool)[:n_out])

    indices = np.concatenate([np.asarray(test_inlier_indices, dtype=int), np.asarray(chosen, dtype=int)])
    labels = np.concatenate([np.ones(n_in, dtype=int), np.zeros(n_out, dtype=int)])
    order = rng.permutation(indices.size)
    return Mixture(indices=indices[order], labels=labels[order], rho=spec.rho)


@dataclass
class FoldPlan:
    k: int
    test_folds: list  # k arrays of sample indices, stratified per class
    seed: int


def make_folds(samples, k=5, seed=0):
    """Stratified k-fold partition; each fold holds 1/k of every class."""
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_label, []).append(i)
    for label, idx in by_class.items():
        if len(idx) < k:
            raise DataError(f"class {label} has {len(idx)} samples, needs at least {k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for label in sorted(by_class):
        idx = np.asarray(by_class[label])
        idx = idx[rng.permutation(idx.size)]
        for f, part in enumerate(np.array_split(idx, k)):
            folds[f].extend(part.tolist())
    return FoldPlan(k=k, test_folds=[np.array(sorted(f)) for f in folds], seed=seed)


# ---------------------------------------------------------------------------
# dataset lookup


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_data_root(explicit=None):
    root = explicit or os.environ.get(DATA_DIR_ENV)
    if not root:
        raise DataError(
            f"no data root: pass --data-root or set the {DATA_DIR_ENV} environment variable"
        )
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist (check {DATA_DIR_ENV})")
    return root


def load_dataset(name, data_root):
    """Load a named benchmark dataset from <root>/<name>/."""
    root = Path(data_root) / name
    if name in ("mnist", "fashion"):
        samples = []
        for part, (img, lab) in MNIST_FILES.items():
            img_path, lab_path = root / img, root / lab
            if not img_path.exists():
                raise DataError(f"missing {img_path} (check {DATA_DIR_ENV})")
            samples.extend(load_idx(img_path, lab_path, source_prefix=f"{name}-{part}"))
        return samples
    if name == "coil100":
        return load_coil(root)
    raise DataError(f"unknown dataset {name!r}")
