"""Probabilistic novelty score from a linearized decoder manifold.

For a sample x with code z = g(x), the decoder Jacobian J = dm/dz is taken
at z and thin-SVD'd as J = U S V^T. The sample's density splits into an
on-manifold part (latent density corrected by the local volume expansion
sum_k log s_k) and an off-manifold part (density of the residual norm after
projecting x - m(z) off the tangent space):

    total = log p_Z(z) - sum_k log s_k + log p_noise(||r_perp||)

Higher totals are more inlier-like. Latent density defaults to a
per-dimension Gaussian KDE (Silverman bandwidths, product across
dimensions); a standard-normal mode is available. The residual-norm model
is a 1-D Gaussian KDE with a floored log-likelihood outside its support.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from . import model

SINGULAR_FLOOR = 1e-9
NOISE_LOG_FLOOR_MARGIN = 10.0
MIN_FIT_SAMPLES = 50

LOG_2PI = float(np.log(2.0 * np.pi))


class ScoringError(RuntimeError):
    pass


def _silverman_bandwidth(samples):
    """Rule-of-thumb bandwidth 0.9 * min(std, iqr/1.34) * n^(-1/5)."""
    n = samples.shape[0]
    std = float(samples.std(ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        spread = max(std, 1e-3)
    return max(0.9 * spread * n ** (-0.2), 1e-6)


def _kde_logpdf(points, samples, bandwidth):
    """Gaussian-kernel log density of 1-D points given 1-D samples."""
    points = np.atleast_1d(np.asarray(points, dtype=np.float64))
    d2 = (points[:, None] - samples[None, :]) ** 2
    logk = -0.5 * d2 / bandwidth**2 - 0.5 * LOG_2PI - np.log(bandwidth)
    return logsumexp(logk, axis=1) - np.log(samples.shape[0])


@dataclass
class LatentDensityModel:
    mode: str  # "standard_normal" | "per_dim_kde"
    latent_dim: int
    samples: np.ndarray | None = None  # [n, d] float64
    bandwidths: np.ndarray | None = None  # [d]

    def log_density(self, z):
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.latent_dim:
            raise ScoringError(
                f"latent vector has dim {z.shape[0]}, model expects {self.latent_dim}"
            )
        if self.mode == "standard_normal":
            return float(-0.5 * (self.latent_dim * LOG_2PI + np.dot(z, z)))
        total = 0.0
        for j in range(self.latent_dim):
            total += float(_kde_logpdf(z[j], self.samples[:, j], self.bandwidths[j])[0])
        return total

    def to_payload(self):
        payload = {"mode": self.mode, "latent_dim": self.latent_dim}
        if self.mode == "per_dim_kde":
            payload["samples"] = self.samples.tolist()
            payload["bandwidths"] = self.bandwidths.tolist()
        return payload

    @classmethod
    def from_payload(cls, payload):
        m = cls(mode=payload["mode"], latent_dim=payload["latent_dim"])
        if m.mode == "per_dim_kde":
            m.samples = np.asarray(payload["samples"], dtype=np.float64)
            m.bandwidths = np.asarray(payload["bandwidths"], dtype=np.float64)
        return m


@dataclass
class NoiseModel:
    samples: np.ndarray  # observed residual norms, float64
    bandwidth: float
    support_max: float
    log_floor: float

    @classmethod
    def fit(cls, residual_norms):
        norms = np.asarray(residual_norms, dtype=np.float64)
        bw = _silverman_bandwidth(norms)
        support_max = 2.0 * float(norms.max())
        observed = _kde_logpdf(norms, norms, bw)
        log_floor = float(observed.min()) - NOISE_LOG_FLOOR_MARGIN
        return cls(samples=norms, bandwidth=bw, support_max=support_max, log_floor=log_floor)

    def log_likelihood(self, norm):
        norm = float(norm)
        if norm < 0:
            raise ScoringError("residual norm must be non-negative")
        if norm > self.support_max:
            return self.log_floor
        return float(_kde_logpdf(norm, self.samples, self.bandwidth)[0])

    def to_payload(self):
        return {
            "samples": self.samples.tolist(),
            "bandwidth": self.bandwidth,
            "support_max": self.support_max,
            "log_floor": self.log_floor,
        }

    @classmethod
    def from_payload(cls, payload):
        return cls(
            samples=np.asarray(payload["samples"], dtype=np.float64),
            bandwidth=float(payload["bandwidth"]),
            support_max=float(payload["support_max"]),
            log_floor=float(payload["log_floor"]),
        )


@dataclass
class NoveltyScore:
    log_pz: float
    log_jacobian_volume: float
    log_p_noise: float
    recon_error: float
    total: float
    singular_floor_hit: bool = False
    is_outlier: bool | None = None

    CSV_FIELDS = ("sample_id", "label", "log_pz", "log_jvol", "log_pnoise", "recon", "total", "verdict")


def fit_latent_density(latents, mode="per_dim_kde"):
    latents = np.asarray(latents, dtype=np.float64)
    d = latents.shape[1]
    if mode == "standard_normal":
        return LatentDensityModel(mode=mode, latent_dim=d)
    if mode != "per_dim_kde":
        raise ScoringError(f"unknown latent density mode {mode!r}")
    bw = np.array([_silverman_bandwidth(latents[:, j]) for j in range(d)])
    return LatentDensityModel(mode=mode, latent_dim=d, samples=latents, bandwidths=bw)


def jacobian_of(decode_fn, z, chunk=256):
    """Full Jacobian [D, d] of a decoder function at one latent point.

    ``decode_fn`` maps a Variable [n, d] to a Variable whose first axis is n.
    Rows of the Jacobian are extracted by seeding reverse mode with one-hot
    output gradients over a replicated batch, ``chunk`` rows at a time.
    """
    z = np.asarray(z)
    if z.dtype not in (np.float32, np.float64):
        z = z.astype(np.float32)
    z = z.reshape(1, -1)
    d = z.shape[1]
    out_dim = int(np.prod(decode_fn(ad.Variable(z)).value.shape[1:]))
    rows = []
    for start in range(0, out_dim, chunk):
        n = min(chunk, out_dim - start)
        zvar = ad.Variable(np.repeat(z, n, axis=0), requires_grad=True)
        out = decode_fn(zvar)
        seed = np.zeros((n, out_dim), dtype=out.value.dtype)
        seed[np.arange(n), start + np.arange(n)] = 1.0
        ad.backward(out, seed=seed.reshape(out.value.shape))
        rows.append(zvar.grad.copy())
    return np.concatenate(rows, axis=0).reshape(out_dim, d)


def decoder_jacobian(params, z, chunk=256):
    """Jacobian of the model decoder at z; model parameters are untouched."""
    frozen = []
    for p in params.decoder_params:
        frozen.append((p, p.requires_grad))
        p.requires_grad = False
    try:
        return jacobian_of(lambda zv: model.decode(params, zv), z, chunk=chunk)
    finally:
        for p, flag in frozen:
            p.requires_grad = flag


def fit(params, training_inliers, density_mode="per_dim_kde"):
    """Fit the latent density and residual-noise models on training inliers."""
    data = np.asarray(training_inliers, dtype=np.float32)
    if data.shape[0] < MIN_FIT_SAMPLES:
        raise ScoringError(
            f"need at least {MIN_FIT_SAMPLES} training samples to fit density models, "
            f"got {data.shape[0]}"
        )
    latents = model.encode(params, ad.Variable(data)).value
    decoded = model.decode(params, ad.Variable(latents)).value
    density = fit_latent_density(latents, mode=density_mode)

    norms = np.empty(data.shape[0])
    for i in range(data.shape[0]):
        j = decoder_jacobian(params, latents[i])
        u, _, _ = np.linalg.svd(j.astype(np.float64), full_matrices=False)
        r = (data[i] - decoded[i]).reshape(-1).astype(np.float64)
        r_perp = r - u @ (u.T @ r)
        norms[i] = np.linalg.norm(r_perp)
    noise = NoiseModel.fit(norms)
    return density, noise


def assemble_score(log_pz, singular_values, residual_perp_norm, residual, noise_model):
    """Compose the three log terms into a NoveltyScore record."""
    s = np.asarray(singular_values, dtype=np.float64)
    floor_hit = bool((s < SINGULAR_FLOOR).any())
    log_jvol = float(np.log(np.maximum(s, SINGULAR_FLOOR)).sum())
    log_p_noise = noise_model.log_likelihood(residual_perp_norm)
    r = np.asarray(residual, dtype=np.float64)
    return NoveltyScore(
        log_pz=float(log_pz),
        log_jacobian_volume=log_jvol,
        log_p_noise=float(log_p_noise),
        recon_error=float(np.mean(r * r)),
        total=float(log_pz) - log_jvol + float(log_p_noise),
        singular_floor_hit=floor_hit,
    )


def score_sample(encode_fn, decode_fn, density, noise, x):
    """Score one sample through arbitrary encode/decode callables."""
    xb = np.asarray(x, dtype=np.float32)[None, ...]
    z = encode_fn(ad.Variable(xb)).value[0]
    j = jacobian_of(decode_fn, z)
    u, s, _ = np.linalg.svd(j.astype(np.float64), full_matrices=False)
    x_hat = decode_fn(ad.Variable(z[None, :])).value[0]
    r = (xb[0] - x_hat).reshape(-1).astype(np.float64)
    r_perp = r - u @ (u.T @ r)
    return assemble_score(
        density.log_density(z), s, float(np.linalg.norm(r_perp)), r, noise
    )


def score(params, density, noise, x):
    """Score one sample [C,H,W] against a trained, frozen model."""
    frozen = []
    for p in params.all_params():
        frozen.append((p, p.requires_grad))
        p.requires_grad = False
    try:
        return score_sample(
            lambda xv: model.encode(params, xv),
            lambda zv: model.decode(params, zv),
            density,
            noise,
            x,
        )
    finally:
        for p, flag in frozen:
            p.requires_grad = flag


def score_batch(params, density, noise, batch):
    return [score(params, density, noise, x) for x in np.asarray(batch, dtype=np.float32)]


# ---------------------------------------------------------------------------
# thresholding


@dataclass
class ThresholdResult:
    tau: float
    method: str  # "f1_midpoint" | "quantile_fallback"


def calibrate_threshold(scores, labels, contamination=0.1):
    """Pick the score threshold below which samples are called outliers.

    With both classes present, tau maximizes F1 (inlier positive) over the
    midpoints between adjacent distinct sorted scores. Single-class or
    degenerate input falls back to the inlier ``contamination`` quantile.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ScoringError("scores and labels must be parallel 1-D sequences")
    uniq = np.unique(scores)
    if len(np.unique(labels)) < 2 or uniq.size < 2:
        inliers = scores[labels == 1] if (labels == 1).any() else scores
        tau = float(np.quantile(inliers, contamination))
        return ThresholdResult(tau=tau, method="quantile_fallback")

    candidates = (uniq[:-1] + uniq[1:]) / 2.0
    best_tau, best_f1 = candidates[0], -1.0
    n_inlier = int((labels == 1).sum())
    for tau in candidates:
        pred_inlier = scores >= tau
        tp = int((pred_inlier & (labels == 1)).sum())
        fp = int((pred_inlier & (labels == 0)).sum())
        fn = n_inlier - tp
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f1:
            best_f1, best_tau = f1, float(tau)
    return ThresholdResult(tau=best_tau, method="f1_midpoint")


def apply_threshold(novelty_scores, tau):
    """Set is_outlier on each record: below tau means outlier."""
    for rec in novelty_scores:
        rec.is_outlier = rec.total < tau
    return novelty_scores


# ---------------------------------------------------------------------------
# CSV export


def write_scores_csv(path, rows):
    """rows: iterable of (sample_id, label, NoveltyScore)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NoveltyScore.CSV_FIELDS)
        for sample_id, label, rec in rows:
            verdict = "" if rec.is_outlier is None else ("outlier" if rec.is_outlier else "inlier")
            writer.writerow(
                [
                    sample_id,
                    label,
                    repr(rec.log_pz),
                    repr(rec.log_jacobian_volume),
                    repr(rec.log_p_noise),
                    repr(rec.recon_error),
                    repr(rec.total),
                    verdict,
                ]
            )


def write_latents_csv(path, sample_ids, latents):
    latents = np.asarray(latents)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"z{j}" for j in range(latents.shape[1])])
        for sid, z in zip(sample_ids, latents):
            writer.writerow([sid] + [repr(float(v)) for v in z])
