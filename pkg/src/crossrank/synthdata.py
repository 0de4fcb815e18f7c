"""Synthetic paired gene/image spot data on a grid.

A shared latent field drives both modalities. Spots are split into spatially
contiguous regions (one per mixture component); each spot draws its latent
vector from its region's Gaussian, and the field is then smoothed over the
grid. Expression is a rectified linear read-out of the latent, scaled by a
per-spot library size and thinned by dropout calibrated to a target zero
fraction. Image features are a ``tanh`` read-out plus Gaussian noise whose
scale grows left to right across the grid. Optionally, extra gene-unrelated
noise of scale ``nuisance_sigma`` is added inside a random
``nuisance_dims``-dimensional subspace of image space (think stain or scanner
variation): it swamps raw feature geometry but can be projected away.

Per-spot randomness comes from ``default_rng([seed, stream, spot])`` so the
result does not depend on generation order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ValidationError
from .preprocess import SpotDataset, _fmt, _write_csv, smooth_values, write_dataset

_GLOBAL, _LATENT, _DROPOUT, _IMAGE_NOISE, _NUISANCE = range(5)

DISTORTIONS = ("dropout", "spatial_noise", "gene_shuffle")


@dataclass
class SynthConfig:
    grid_h: int = 20
    grid_w: int = 20
    latent_dim: int = 8
    n_genes: int = 200
    image_dim: int = 64
    target_sparsity: float = 0.8
    spatial_smooth_passes: int = 2
    modality_noise_sigma: float = 0.5
    n_clusters: int = 3
    seed: int = 0
    center_scale: float = 2.0
    cluster_spread: float = 0.5
    sparsity_tolerance: float = 0.02
    nuisance_dims: int = 0
    nuisance_sigma: float = 0.0

    def validate(self) -> "SynthConfig":
        if not 0 <= self.target_sparsity < 1:
            raise ConfigError("target_sparsity must be in [0, 1)")
        if self.grid_h * self.grid_w < 9:
            raise ConfigError("grid must hold at least 9 spots")
        if self.n_clusters < 2:
            raise ConfigError("n_clusters must be >= 2")
        if self.n_clusters > self.grid_h * self.grid_w:
            raise ConfigError("more clusters than spots")
        if min(self.latent_dim, self.n_genes, self.image_dim) < 1:
            raise ConfigError("latent_dim, n_genes and image_dim must be >= 1")
        if self.spatial_smooth_passes < 0 or self.modality_noise_sigma < 0:
            raise ConfigError("smoothing passes and noise sigma must be non-negative")
        if not 0 <= self.nuisance_dims <= self.image_dim or self.nuisance_sigma < 0:
            raise ConfigError("need 0 <= nuisance_dims <= image_dim and nuisance_sigma >= 0")
        return self


def _spot_rngs(seed, stream, n):
    return [np.random.default_rng([seed, stream, i]) for i in range(n)]


def _regions(coords, k, rng):
    # Voronoi cells around k distinct random grid sites
    sites = coords[rng.choice(len(coords), size=k, replace=False)]
    d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def calibrate_dropout(base_zero: np.ndarray, uniforms: np.ndarray, target: float,
                      tol: float = 0.02, iters: int = 60) -> float:
    """Bisect the dropout rate so the realized zero fraction hits ``target``.

    An entry is zero if it already was (``base_zero``) or its uniform draw falls
    below the rate, so the realized fraction is monotone in the rate.
    """
    def realized(rate):
        return float(np.mean(base_zero | (uniforms < rate)))

    lo, hi = 0.0, 1.0
    if realized(lo) > target + tol:
        raise GenerationError(
            f"target sparsity {target} unreachable: read-out is already "
            f"{realized(lo):.3f} zeros before dropout")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if realized(mid) < target:
            lo = mid
        else:
            hi = mid
    rate = hi
    if abs(realized(rate) - target) > tol:
        raise GenerationError(f"could not calibrate dropout to {target} within {tol}")
    return rate


def generate(cfg: SynthConfig) -> tuple[SpotDataset, np.ndarray, np.ndarray]:
    """Returns ``(dataset, true_labels, latent)``."""
    cfg.validate()
    n = cfg.grid_h * cfg.grid_w
    # x runs along the width
    coords = np.array([(x, y) for y in range(cfg.grid_h) for x in range(cfg.grid_w)])
    g = np.random.default_rng([cfg.seed, _GLOBAL])
    labels = _regions(coords, cfg.n_clusters, g)
    centers = cfg.center_scale * g.standard_normal((cfg.n_clusters, cfg.latent_dim))
    w_gene = g.standard_normal((cfg.latent_dim, cfg.n_genes)) / np.sqrt(cfg.latent_dim)
    b_gene = 1.0 + 0.25 * g.standard_normal(cfg.n_genes)
    w_img = g.standard_normal((cfg.latent_dim, cfg.image_dim)) / np.sqrt(cfg.latent_dim)
    b_img = 0.25 * g.standard_normal(cfg.image_dim)
    gene_scale = np.exp(0.5 * g.standard_normal(cfg.n_genes))

    latent = np.stack([
        centers[labels[i]] + cfg.cluster_spread * r.standard_normal(cfg.latent_dim)
        for i, r in enumerate(_spot_rngs(cfg.seed, _LATENT, n))
    ])
    library = np.array([np.exp(0.3 * r.standard_normal()) for r in _spot_rngs(cfg.seed, _LATENT + 10, n)])
    for _ in range(cfg.spatial_smooth_passes):
        latent = smooth_values(latent, coords)

    base = np.maximum(latent @ w_gene + b_gene, 0.0) * gene_scale * library[:, None] * 10.0
    uniforms = np.stack([r.random(cfg.n_genes) for r in _spot_rngs(cfg.seed, _DROPOUT, n)])
    rate = calibrate_dropout(base == 0.0, uniforms, cfg.target_sparsity, cfg.sparsity_tolerance)
    expression = np.where(uniforms < rate, 0.0, base)

    clean = np.tanh(latent @ w_img + b_img)
    noise = np.stack([r.standard_normal(cfg.image_dim) for r in _spot_rngs(cfg.seed, _IMAGE_NOISE, n)])
    sigma = cfg.modality_noise_sigma * (1.0 + coords[:, 0] / cfg.grid_w)
    features = clean + sigma[:, None] * noise
    if cfg.nuisance_dims and cfg.nuisance_sigma:
        q, _ = np.linalg.qr(np.random.default_rng([cfg.seed, _NUISANCE])
                            .standard_normal((cfg.image_dim, cfg.image_dim)))
        basis = q[:, :cfg.nuisance_dims].T
        coef = np.stack([r.standard_normal(cfg.nuisance_dims)
                         for r in _spot_rngs(cfg.seed, _NUISANCE + 10, n)])
        features = features + cfg.nuisance_sigma * coef @ basis

    width = len(str(n - 1))
    ds = SpotDataset(
        spot_ids=[f"s{i:0{width}d}" for i in range(n)],
        coords=coords,
        expression=expression,
        image_features=features,
        gene_ids=[f"g{j:04d}" for j in range(cfg.n_genes)],
        flags={"dropout_rate": rate},
    )
    return ds, labels, latent


def inject_distortion(ds: SpotDataset, kind: str, strength: float, seed=0) -> SpotDataset:
    """Corrupt the expression block; image features and coordinates are kept.

    * ``dropout`` zeroes each entry with probability ``strength``.
    * ``spatial_noise`` adds Gaussian noise scaled by ``strength`` times the mean
      non-zero expression, growing left to right like the image noise, then
      clips at zero.
    * ``gene_shuffle`` permutes a ``strength`` fraction of gene columns among
      themselves, identically for every spot.
    """
    if kind not in DISTORTIONS:
        raise ValidationError(f"unknown distortion {kind!r}; expected one of {DISTORTIONS}")
    if strength < 0:
        raise ValidationError("strength must be >= 0")
    if strength == 0:
        return ds.with_expression(ds.expression.copy())
    rng = np.random.default_rng(seed)
    x = ds.expression
    if kind == "dropout":
        out = np.where(rng.random(x.shape) < min(strength, 1.0), 0.0, x)
    elif kind == "spatial_noise":
        nz = x[x > 0]
        scale = nz.mean() if nz.size else 1.0
        width = max(int(ds.coords[:, 0].max()) + 1, 1)
        sigma = strength * scale * (1.0 + ds.coords[:, 0] / width)
        out = np.maximum(x + sigma[:, None] * rng.standard_normal(x.shape), 0.0)
    else:
        m = x.shape[1]
        cols = np.sort(rng.choice(m, size=int(round(min(strength, 1.0) * m)), replace=False))
        perm = np.arange(m)
        perm[cols] = rng.permutation(cols)
        out = x[:, perm]
    return ds.with_expression(out)


def write_synthetic(directory, ds: SpotDataset, labels, latent, cfg: SynthConfig | None = None):
    """Dataset CSVs plus ``labels.csv`` (spot_id, true_label) and ``latent.csv``."""
    d = Path(directory)
    write_dataset(ds, d)
    _write_csv(d / "labels.csv", ["spot_id", "true_label"],
               ([s, int(l)] for s, l in zip(ds.spot_ids, labels)))
    latent = np.asarray(latent)
    _write_csv(d / "latent.csv", ["spot_id"] + [f"z{j}" for j in range(latent.shape[1])],
               ([s] + [_fmt(v) for v in row] for s, row in zip(ds.spot_ids, latent)))
    return d


def read_labels(path) -> dict[str, int]:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: int(r[1]) for r in rows[1:]}


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
