"""Adversarial-autoencoder novelty detection toolkit.

Trains a four-network adversarial autoencoder (encoder, decoder, latent and
image discriminators) on a single inlier class, then scores new samples with
a probabilistic novelty score built from a linearization of the decoder
manifold. Includes the full contamination/cross-validation evaluation
protocol with AUROC and F1 reporting.
"""

__version__ = "0.1.0"
