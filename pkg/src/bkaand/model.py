"""The four networks: encoder g, decoder m, and the two discriminators.

Two architecture variants are provided. The conv variant is the default for
image data; the mlp variant exists so tests and tiny synthetic problems run
fast. Discriminator outputs are sigmoid-clamped into [1e-7, 1-1e-7] so the
log-based adversarial losses stay finite.

Checkpoints are a single binary file: magic "BKAAND", little-endian u32
format version, u64 JSON-header length, the JSON header (architecture,
config snapshot, tensor manifest, optional density/noise payloads), then the
raw little-endian float32 tensor blobs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError

CHECKPOINT_MAGIC = b"BKAAND"
CHECKPOINT_VERSION = 1

PROB_EPS = 1e-7
LEAKY_SLOPE = 0.2


class ConfigError(ValueError):
    """Invalid architecture or configuration."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_height: int
    input_width: int
    input_channels: int
    latent_dim: int = 16
    variant: str = "conv"
    mlp_hidden: tuple = (512, 256)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if min(self.input_height, self.input_width, self.input_channels) < 1:
            raise ConfigError("input dimensions must be positive")
        if self.variant not in ("conv", "mlp"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "conv" and (
            self.input_height % 4 or self.input_width % 4
        ):
            raise ConfigError("conv variant requires height and width divisible by 4")

    @property
    def input_dim(self):
        return self.input_channels * self.input_height * self.input_width

    @property
    def input_shape(self):
        return (self.input_channels, self.input_height, self.input_width)

    def to_dict(self):
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "latent_dim": self.latent_dim,
            "variant": self.variant,
            "mlp_hidden": list(self.mlp_hidden),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mlp_hidden"] = tuple(d.get("mlp_hidden", (512, 256)))
        return cls(**d)


@dataclass
class ModelParams:
    encoder_params: list
    decoder_params: list
    disc_z_params: list
    disc_y_params: list
    architecture: Architecture

    def all_params(self):
        return (
            self.encoder_params
            + self.decoder_params
            + self.disc_z_params
            + self.disc_y_params
        )

    def named_tensors(self):
        return {p.name: p.value for p in self.all_params()}


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _xavier_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _affine_pair(rng, name, n_in, n_out, final=False):
    if final:
        w = _xavier_uniform(rng, (n_in, n_out), n_in, n_out)
    else:
        w = _he_normal(rng, (n_in, n_out), n_in)
    b = np.zeros(n_out, dtype=np.float32)
    return [Parameter(w, f"{name}_w"), Parameter(b, f"{name}_b")]


def _conv_pair(rng, name, f, c, k, final=False):
    fan_in = c * k * k
    if final:
        w = _xavier_uniform(rng, (f, c, k, k), fan_in, f * k * k)
    else:
        w = _he_normal(rng, (f, c, k, k), fan_in)
    b = np.zeros(f, dtype=np.float32)
    return [Parameter(w, f"{name}_w"), Parameter(b, f"{name}_b")]


def _tconv_pair(rng, name, cin, cout, k, final=False):
    fan_in = cin * k * k
    if final:
        w = _xavier_uniform(rng, (cin, cout, k, k), fan_in, cout * k * k)
    else:
        w = _he_normal(rng, (cin, cout, k, k), fan_in)
    b = np.zeros(cout, dtype=np.float32)
    return [Parameter(w, f"{name}_w"), Parameter(b, f"{name}_b")]


def init(architecture, seed):
    """Build all four parameter sets deterministically from one seed.

    Layers feeding LeakyReLU use He-normal init, output layers Xavier-uniform,
    biases zero.
    """
    rng = np.random.default_rng(seed)
    arch = architecture
    d = arch.latent_dim
    if arch.variant == "conv":
        h4, w4 = arch.input_height // 4, arch.input_width // 4
        flat = 64 * h4 * w4
        enc = (
            _conv_pair(rng, "enc_conv1", 32, arch.input_channels, 4)
            + _conv_pair(rng, "enc_conv2", 64, 32, 4)
            + _affine_pair(rng, "enc_fc", flat, d, final=True)
        )
        dec = (
            _affine_pair(rng, "dec_fc", d, flat)
            + _tconv_pair(rng, "dec_tconv1", 64, 32, 4)
            + _tconv_pair(rng, "dec_tconv2", 32, arch.input_channels, 4, final=True)
        )
        dy = (
            _conv_pair(rng, "dy_conv1", 32, arch.input_channels, 4)
            + _conv_pair(rng, "dy_conv2", 64, 32, 4)
            + _affine_pair(rng, "dy_fc", flat, 1, final=True)
        )
    else:
        h1, h2 = arch.mlp_hidden
        enc = (
            _affine_pair(rng, "enc_fc1", arch.input_dim, h1)
            + _affine_pair(rng, "enc_fc2", h1, h2)
            + _affine_pair(rng, "enc_fc3", h2, d, final=True)
        )
        dec = (
            _affine_pair(rng, "dec_fc1", d, h2)
            + _affine_pair(rng, "dec_fc2", h2, h1)
            + _affine_pair(rng, "dec_fc3", h1, arch.input_dim, final=True)
        )
        dy = (
            _affine_pair(rng, "dy_fc1", arch.input_dim, h1)
            + _affine_pair(rng, "dy_fc2", h1, h2)
            + _affine_pair(rng, "dy_fc3", h2, 1, final=True)
        )
    dz = (
        _affine_pair(rng, "dz_fc1", d, 128)
        + _affine_pair(rng, "dz_fc2", 128, 64)
        + _affine_pair(rng, "dz_fc3", 64, 1, final=True)
    )
    return ModelParams(
        encoder_params=enc,
        decoder_params=dec,
        disc_z_params=dz,
        disc_y_params=dy,
        architecture=arch,
    )


def _check_batch(arch, batch):
    if batch.value.ndim != 4 or batch.value.shape[1:] != arch.input_shape:
        raise ShapeError(
            f"batch shape {batch.value.shape} does not match architecture "
            f"input (B, {arch.input_channels}, {arch.input_height}, {arch.input_width})"
        )


def _as_var(x):
    return x if isinstance(x, ad.Variable) else ad.Variable(np.asarray(x))


def encode(params, batch):
    """g: image batch [B,C,H,W] -> latent codes [B,d]; no final activation."""
    arch = params.architecture
    x = _as_var(batch)
    _check_batch(arch, x)
    p = params.encoder_params
    if arch.variant == "conv":
        h = ad.leaky_relu(ad.conv2d(x, p[0], p[1], stride=2, padding=1), LEAKY_SLOPE)
        h = ad.leaky_relu(ad.conv2d(h, p[2], p[3], stride=2, padding=1), LEAKY_SLOPE)
        return ad.affine(ad.flatten(h), p[4], p[5])
    h = ad.flatten(x)
    h = ad.leaky_relu(ad.affine(h, p[0], p[1]), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.affine(h, p[2], p[3]), LEAKY_SLOPE)
    return ad.affine(h, p[4], p[5])


def decode(params, z):
    """m: latent codes [B,d] -> images [B,C,H,W], elementwise in (0,1)."""
    arch = params.architecture
    zv = _as_var(z)
    if zv.value.ndim != 2 or zv.value.shape[1] != arch.latent_dim:
        raise ShapeError(
            f"latent shape {zv.value.shape} does not match (B, {arch.latent_dim})"
        )
    p = params.decoder_params
    if arch.variant == "conv":
        h4, w4 = arch.input_height // 4, arch.input_width // 4
        h = ad.leaky_relu(ad.affine(zv, p[0], p[1]), LEAKY_SLOPE)
        h = ad.reshape(h, (zv.value.shape[0], 64, h4, w4))
        h = ad.leaky_relu(
            ad.tconv2d(h, p[2], p[3], stride=2, padding=1), LEAKY_SLOPE
        )
        h = ad.tconv2d(h, p[4], p[5], stride=2, padding=1)
        return ad.sigmoid(h)
    h = ad.leaky_relu(ad.affine(zv, p[0], p[1]), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.affine(h, p[2], p[3]), LEAKY_SLOPE)
    h = ad.sigmoid(ad.affine(h, p[4], p[5]))
    return ad.reshape(h, (zv.value.shape[0],) + arch.input_shape)


def disc_z(params, z):
    """Q_z: latent codes [B,d] -> probability of coming from N(0,1), in (0,1)."""
    arch = params.architecture
    zv = _as_var(z)
    if zv.value.ndim != 2 or zv.value.shape[1] != arch.latent_dim:
        raise ShapeError(
            f"latent shape {zv.value.shape} does not match (B, {arch.latent_dim})"
        )
    p = params.disc_z_params
    h = ad.leaky_relu(ad.affine(zv, p[0], p[1]), LEAKY_SLOPE)
    h = ad.leaky_relu(ad.affine(h, p[2], p[3]), LEAKY_SLOPE)
    return ad.clamp(ad.sigmoid(ad.affine(h, p[4], p[5])), PROB_EPS, 1.0 - PROB_EPS)


def disc_y(params, batch):
    """Q_y: image batch -> probability of being real data, in (0,1)."""
    arch = params.architecture
    x = _as_var(batch)
    _check_batch(arch, x)
    p = params.disc_y_params
    if arch.variant == "conv":
        h = ad.leaky_relu(ad.conv2d(x, p[0], p[1], stride=2, padding=1), LEAKY_SLOPE)
        h = ad.leaky_relu(ad.conv2d(h, p[2], p[3], stride=2, padding=1), LEAKY_SLOPE)
        out = ad.affine(ad.flatten(h), p[4], p[5])
    else:
        h = ad.flatten(x)
        h = ad.leaky_relu(ad.affine(h, p[0], p[1]), LEAKY_SLOPE)
        h = ad.leaky_relu(ad.affine(h, p[2], p[3]), LEAKY_SLOPE)
        out = ad.affine(h, p[4], p[5])
    return ad.clamp(ad.sigmoid(out), PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# checkpoint I/O


def save(params, path, train_config=None, density_payload=None, noise_payload=None):
    """Write a checkpoint; tensor blobs round-trip bit-exactly."""
    tensors = params.named_tensors()
    manifest = []
    offset = 0
    blobs = []
    for name, value in tensors.items():
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "architecture": params.architecture.to_dict(),
        "train_config": train_config,
        "tensors": manifest,
        "density_model": density_payload,
        "noise_model": noise_payload,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


@dataclass
class Checkpoint:
    format_version: int
    params: ModelParams
    train_config: dict | None = None
    density_payload: dict | None = None
    noise_payload: dict | None = None


def load(path):
    """Read a checkpoint written by :func:`save`; validates before building."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{path}: not a BKAAND checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if pos + header_len > len(data):
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + header_len])
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: bad header JSON: {exc}") from exc
    pos += header_len

    arch = Architecture.from_dict(header["architecture"])
    params = init(arch, seed=0)
    expected = params.named_tensors()
    loaded = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointCorruptError(f"{path}: truncated blob for {entry['name']}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        loaded[entry["name"]] = arr
    if set(loaded) != set(expected):
        raise CheckpointShapeError(f"{path}: tensor set does not match architecture")
    for p in params.all_params():
        arr = loaded[p.name]
        if arr.shape != p.value.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {p.name} has shape {arr.shape}, expected {p.value.shape}"
            )
        p.value = arr
        p.zero_grad()
    return Checkpoint(
        format_version=version,
        params=params,
        train_config=header.get("train_config"),
        density_payload=header.get("density_model"),
        noise_payload=header.get("noise_model"),
    )
