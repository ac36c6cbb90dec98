"""Adversarial, reconstruction, and combined losses.

All losses are batch means, so the reconstruction weight beta and the
learning rate are independent of batch size. Discriminator outputs arrive
already clamped into (0, 1) by the model, which keeps every log finite.

Each loss has a graph form (returns a Variable, used for training) and the
reported LossBundle holds plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossBundle:
    adv_qz: float
    adv_qy: float
    recon: float
    total: float
    beta: float

    @classmethod
    def from_parts(cls, adv_qz, adv_qy, recon, beta):
        return cls(
            adv_qz=float(adv_qz),
            adv_qy=float(adv_qy),
            recon=float(recon),
            total=float(adv_qz + adv_qy + beta * recon),
            beta=float(beta),
        )


def _var(x):
    return x if isinstance(x, ad.Variable) else ad.Variable(np.asarray(x))


def _mean_log(q):
    return ad.mean(ad.log(_var(q)))


def _mean_log_one_minus(q):
    return ad.mean(ad.log(ad.add_scalar(ad.scale(_var(q), -1.0), 1.0)))


def adv_loss_qz(q_on_prior_samples, q_on_encodings):
    """mean log Q_z(prior draws) + mean log(1 - Q_z(g(x))).

    The latent discriminator is trained to maximize this; the encoder update
    acts on its encoder-dependent part.
    """
    return ad.add(_mean_log(q_on_prior_samples), _mean_log_one_minus(q_on_encodings))


def adv_loss_qy(q_on_real, q_on_generated):
    """mean log Q_y(real) + mean log(1 - Q_y(decoded prior draws))."""
    return ad.add(_mean_log(q_on_real), _mean_log_one_minus(q_on_generated))


def recon_loss(x, x_hat):
    """Mean squared error over all elements (Gaussian likelihood reading)."""
    x, x_hat = _var(x), _var(x_hat)
    if x.value.shape != x_hat.value.shape:
        raise ad.ShapeError(
            f"recon_loss: shapes {x.value.shape} vs {x_hat.value.shape}"
        )
    return ad.mean(ad.square(ad.subtract(x, x_hat)))


def total_loss(adv_qz, adv_qy, recon, beta):
    """adv_qz + adv_qy + beta * recon, as floats."""
    return float(adv_qz) + float(adv_qy) + float(beta) * float(recon)


def generator_loss(q_on_fake, mode="non_saturating"):
    """Generator-side objective against a discriminator output.

    non_saturating: -mean log q (minimized).
    saturating: mean log(1 - q), the literal adversarial form (minimized).
    """
    if mode == "non_saturating":
        return ad.scale(_mean_log(q_on_fake), -1.0)
    if mode == "saturating":
        return _mean_log_one_minus(q_on_fake)
    raise ValueError(f"unknown generator loss mode {mode!r}")


def generator_losses(q_on_encodings, q_on_generated, mode="non_saturating"):
    """(encoder-side, decoder-side) generator losses as Variables."""
    return generator_loss(q_on_encodings, mode), generator_loss(q_on_generated, mode)
