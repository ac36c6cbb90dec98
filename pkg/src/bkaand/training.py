"""Alternating minimax training of the four networks.

Per batch, exactly four Adam sub-updates run in order:

  1. Q_y ascends its adversarial loss (real batch vs decoded prior noise),
  2. the decoder m descends its generator loss against Q_y,
  3. Q_z ascends its adversarial loss (fresh prior noise vs encodings),
  4. encoder g and decoder m jointly descend beta * recon + encoder
     generator loss.

Only the named component's parameters are stepped in each sub-update; the
others keep their values because each component has its own optimizer and
gradients are zeroed between sub-updates. Prior noise is drawn fresh for
every use. Any NaN loss aborts immediately, naming the sub-update.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses, model
from .model import Architecture, ConfigError


class TrainingDiverged(RuntimeError):
    """A loss went NaN during a sub-update."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    epochs: int = 80
    batch_size: int = 128
    latent_dim: int = 16
    beta: float = 10.0
    seed: int = 0
    generator_loss_mode: str = "non_saturating"
    architecture: Architecture | None = None

    def __post_init__(self):
        # learning_rate 0 is allowed as a no-op debugging mode
        if self.learning_rate < 0 or self.batch_size <= 0 or self.latent_dim <= 0:
            raise ConfigError("learning_rate must be >= 0; batch_size and latent_dim positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.generator_loss_mode not in ("non_saturating", "saturating"):
            raise ConfigError(f"unknown generator loss mode {self.generator_loss_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["architecture"] = self.architecture.to_dict() if self.architecture else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("architecture"):
            d["architecture"] = Architecture.from_dict(d["architecture"])
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    adv_qz: float
    adv_qy: float
    recon: float
    total: float
    disc_z_accuracy: float
    disc_y_accuracy: float
    wall_time_seconds: float

    CSV_FIELDS = ("epoch", "adv_qz", "adv_qy", "recon", "total", "dz_acc", "dy_acc", "seconds")

    def csv_row(self):
        return [
            self.epoch,
            self.adv_qz,
            self.adv_qy,
            self.recon,
            self.total,
            self.disc_z_accuracy,
            self.disc_y_accuracy,
            self.wall_time_seconds,
        ]


def write_epoch_logs(logs, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochLog.CSV_FIELDS)
        for log in logs:
            writer.writerow(log.csv_row())


class Trainer:
    """Owns the model and the four per-component Adam optimizers."""

    def __init__(self, params, config):
        self.params = params
        self.config = config
        lr = config.learning_rate
        self.opt_dy = ad.Adam(params.disc_y_params, lr)
        self.opt_dz = ad.Adam(params.disc_z_params, lr)
        self.opt_dec = ad.Adam(params.decoder_params, lr)
        self.opt_gen = ad.Adam(params.encoder_params + params.decoder_params, lr)

    def _check(self, loss, stage):
        v = float(loss.value)
        if not np.isfinite(v):
            raise TrainingDiverged(f"non-finite loss in sub-update {stage!r}: {v}")
        return v

    def _draw_prior(self, rng, n):
        d = self.params.architecture.latent_dim
        return ad.Variable(rng.standard_normal((n, d)).astype(np.float32))

    def train_step(self, batch, rng):
        """Run the four sub-updates on one inlier batch; returns the losses."""
        params, cfg = self.params, self.config
        x = batch if isinstance(batch, ad.Variable) else ad.Variable(np.asarray(batch))
        n = x.value.shape[0]

        # 1. image discriminator ascends adv_qy
        zeta = self._draw_prior(rng, n)
        q_real = model.disc_y(params, x)
        q_gen = model.disc_y(params, model.decode(params, zeta))
        adv_qy = losses.adv_loss_qy(q_real, q_gen)
        self._check(adv_qy, "disc_y")
        dy_acc = 0.5 * (
            float((q_real.value > 0.5).mean()) + float((q_gen.value < 0.5).mean())
        )
        ad.backward(ad.scale(adv_qy, -1.0))  # ascend
        self.opt_dy.step()
        self._zero_all()

        # 2. decoder descends its generator loss against Q_y
        zeta = self._draw_prior(rng, n)
        q_gen = model.disc_y(params, model.decode(params, zeta))
        dec_loss = losses.generator_loss(q_gen, cfg.generator_loss_mode)
        self._check(dec_loss, "decoder")
        ad.backward(dec_loss)
        self.opt_dec.step()
        self._zero_all()

        # 3. latent discriminator ascends adv_qz
        zeta = self._draw_prior(rng, n)
        q_prior = model.disc_z(params, zeta)
        q_enc = model.disc_z(params, model.encode(params, x))
        adv_qz = losses.adv_loss_qz(q_prior, q_enc)
        self._check(adv_qz, "disc_z")
        dz_acc = 0.5 * (
            float((q_prior.value > 0.5).mean()) + float((q_enc.value < 0.5).mean())
        )
        ad.backward(ad.scale(adv_qz, -1.0))
        self.opt_dz.step()
        self._zero_all()

        # 4. encoder and decoder jointly descend beta*recon + encoder adv part
        z = model.encode(params, x)
        x_hat = model.decode(params, z)
        recon = losses.recon_loss(x, x_hat)
        enc_loss = losses.generator_loss(model.disc_z(params, z), cfg.generator_loss_mode)
        joint = ad.add(ad.scale(recon, cfg.beta), enc_loss)
        self._check(joint, "encoder_decoder")
        ad.backward(joint)
        self.opt_gen.step()
        self._zero_all()

        bundle = losses.LossBundle.from_parts(
            adv_qz.value, adv_qy.value, recon.value, cfg.beta
        )
        return bundle, dz_acc, dy_acc

    def _zero_all(self):
        for p in self.params.all_params():
            p.zero_grad()


def train(dataset, config, log_callback=None):
    """Train on inlier samples only; returns (ModelParams, [EpochLog]).

    ``dataset`` is an array [N, C, H, W] of float32 pixels in [0, 1]. Batches
    are reshuffled every epoch from the run seed; the last partial batch is
    dropped.
    """
    data = np.ascontiguousarray(np.asarray(dataset, dtype=np.float32))
    if data.ndim != 4 or data.shape[0] == 0:
        raise ConfigError("dataset must be a non-empty [N, C, H, W] array")
    if config.architecture is None:
        raise ConfigError("config.architecture is required")

    params = model.init(config.architecture, seed=config.seed)
    trainer = Trainer(params, config)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])

    n = data.shape[0]
    bsz = min(config.batch_size, n)
    logs = []
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        accs = np.zeros(2)
        steps = 0
        for start in range(0, n - bsz + 1, bsz):
            batch = data[order[start : start + bsz]]
            bundle, dz_acc, dy_acc = trainer.train_step(batch, noise_rng)
            sums += (bundle.adv_qz, bundle.adv_qy, bundle.recon)
            accs += (dz_acc, dy_acc)
            steps += 1
        mean_qz, mean_qy, mean_recon = sums / max(steps, 1)
        log = EpochLog(
            epoch=epoch,
            adv_qz=mean_qz,
            adv_qy=mean_qy,
            recon=mean_recon,
            total=losses.total_loss(mean_qz, mean_qy, mean_recon, config.beta),
            disc_z_accuracy=accs[0] / max(steps, 1),
            disc_y_accuracy=accs[1] / max(steps, 1),
            wall_time_seconds=time.monotonic() - t0,
        )
        logs.append(log)
        if log_callback is not None:
            log_callback(log)
    return params, logs


def validate(params, validation_inliers):
    """Mean reconstruction loss over a held-out inlier set; no mutation."""
    data = np.asarray(validation_inliers, dtype=np.float32)
    x = ad.Variable(data)
    x_hat = model.decode(params, model.encode(params, x))
    return float(losses.recon_loss(x, x_hat).value)
