"""Evaluation metrics: per-gene PCC, MAE, MSE, rank accuracy, gene/image
distance-correlation R^2, K-means and the v-measure.

``MetricsReport.to_json`` writes a flat document with the keys
``pcc, mae, mse, skipped_genes, per_gene_pcc`` (skipped genes appear as
``null`` in ``per_gene_pcc``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .losses import cosine_sim_matrix
from .numcore import l2_normalize_rows


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.ndim != 2 or min(y.shape) < 1:
        raise ShapeError(f"expected a non-empty (spots, genes) matrix, got {y.shape}")
    return y, yhat


def pcc(y, yhat) -> tuple[float, np.ndarray, int]:
    """Pearson correlation per gene over spots, averaged over genes.

    Genes with zero variance in either matrix are skipped (``nan`` in the
    per-gene vector) and counted. Returns ``(overall, per_gene, skipped)``.
    """
    y, yhat = _pair(y, yhat)
    if y.shape[0] < 2:
        raise ValidationError("PCC needs at least 2 spots")
    dy = y - y.mean(axis=0)
    dp = yhat - yhat.mean(axis=0)
    sy = np.sqrt((dy * dy).sum(axis=0))
    sp = np.sqrt((dp * dp).sum(axis=0))
    ok = (sy > 0) & (sp > 0)
    per_gene = np.full(y.shape[1], np.nan)
    per_gene[ok] = (dy[:, ok] * dp[:, ok]).sum(axis=0) / (sy[ok] * sp[ok])
    per_gene = np.clip(per_gene, -1.0, 1.0)
    overall = float(per_gene[ok].mean()) if ok.any() else float("nan")
    return overall, per_gene, int((~ok).sum())


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.abs(y - yhat).mean())


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    d = y - yhat
    return float((d * d).mean())


@dataclass
class MetricsReport:
    pcc: float
    mae: float
    mse: float
    skipped_genes: int
    per_gene_pcc: np.ndarray = field(repr=False)

    @classmethod
    def compute(cls, y, yhat) -> "MetricsReport":
        overall, per_gene, skipped = pcc(y, yhat)
        return cls(overall, mae(y, yhat), mse(y, yhat), skipped, per_gene)

    def to_dict(self) -> dict:
        return {
            "pcc": self.pcc,
            "mae": self.mae,
            "mse": self.mse,
            "skipped_genes": self.skipped_genes,
            "per_gene_pcc": [None if np.isnan(v) else float(v) for v in self.per_gene_pcc],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# --------------------------------------------------------------------------
# cross-modal structure


def _self_cosine(emb) -> np.ndarray:
    # inputs need not be unit rows; all-zero rows stay zero and are rejected downstream
    unit, _ = l2_normalize_rows(np.asarray(emb, dtype=np.float64))
    return cosine_sim_matrix(unit, unit)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def rank_accuracy_trials(gene_emb, img_emb, trials: int = 8, rng_seed=0,
                         max_retries: int = 10) -> np.ndarray:
    """Per-trial records ``(p, q, r, gene_gap, image_gap, correct)``.

    Each trial shuffles the spots and takes the first as anchor and the next two
    as targets. A gene-similarity tie redraws the trial, up to ``max_retries``
    times, after which the trial is skipped (and absent from the output).
    """
    sg = _self_cosine(gene_emb)
    si = _self_cosine(img_emb)
    n = len(sg)
    if n < 3:
        raise ValidationError("rank accuracy needs at least 3 spots")
    if sg.shape != si.shape:
        raise ShapeError("gene and image embeddings must cover the same spots")
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = _rng(rng_seed)
    rows = []
    for _ in range(trials):
        for _ in range(max_retries + 1):
            p, q, r = rng.permutation(n)[:3]
            dg = sg[p, q] - sg[p, r]
            if dg != 0:
                break
        else:
            continue
        di = si[p, q] - si[p, r]
        rows.append((p, q, r, dg, di, float(np.sign(di) == np.sign(dg))))
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def rank_accuracy(gene_emb, img_emb, trials: int = 8, rng_seed=0, max_retries: int = 10) -> float:
    """Fraction of anchor/two-target trials whose gene-similarity order is
    reproduced by image similarity; ``nan`` if every trial was skipped."""
    rec = rank_accuracy_trials(gene_emb, img_emb, trials, rng_seed, max_retries)
    return float(rec[:, 5].mean()) if len(rec) else float("nan")


@dataclass
class DistanceFit:
    r2: float
    slope: float
    intercept: float
    degenerate: bool
    pairs: np.ndarray          # (n_pairs, 2) spot indices
    gene_dist: np.ndarray
    image_dist: np.ndarray


def distance_correlation_fit(gene_emb, img_emb, n_pairs: int = 100, rng_seed=0) -> DistanceFit:
    """OLS fit of image cosine distance on gene cosine distance over random
    spot pairs. Constant distances make the fit degenerate: ``r2 = 0``."""
    sg = _self_cosine(gene_emb)
    si = _self_cosine(img_emb)
    n = len(sg)
    if n < 3:
        raise ValidationError("need at least 3 spots")
    if sg.shape != si.shape:
        raise ShapeError("gene and image embeddings must cover the same spots")
    rng = _rng(rng_seed)
    a = rng.integers(0, n, size=n_pairs)
    b = (a + rng.integers(1, n, size=n_pairs)) % n     # b != a
    x = 1.0 - sg[a, b]
    y = 1.0 - si[a, b]
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    pairs = np.stack([a, b], axis=1)
    if sxx == 0 or syy == 0:
        return DistanceFit(0.0, 0.0, float(y.mean()), True, pairs, x, y)
    slope = (dx * dy).sum() / sxx
    intercept = y.mean() - slope * x.mean()
    resid = y - (intercept + slope * x)
    r2 = 1.0 - (resid * resid).sum() / syy
    return DistanceFit(float(r2), float(slope), float(intercept), False, pairs, x, y)


def distance_correlation_r2(gene_emb, img_emb, n_pairs: int = 100, rng_seed=0) -> float:
    return distance_correlation_fit(gene_emb, img_emb, n_pairs, rng_seed).r2


# --------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_history: list[float]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _plus_plus(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a chosen center
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(x, k: int, seed=0, max_iter: int = 100, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    A cluster that empties is re-seeded at the point farthest from its current
    center. ``inertia_history`` holds the inertia after every iteration of the
    winning restart.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("x must be 2-D")
    n = len(x)
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    rng = _rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        run = _lloyd(x, k, rng, max_iter)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _lloyd(x, k, rng, max_iter) -> KMeansResult:
    n = len(x)
    centers = _plus_plus(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        for c in range(k):
            if not (new == c).any():
                # only steal from clusters that keep at least one member
                sizes = np.bincount(new, minlength=k)
                cost = np.where(sizes[new] > 1, d2[np.arange(n), new], -1.0)
                far = int(cost.argmax())
                new[far] = c
                d2[far, c] = 0.0
        for c in range(k):
            centers[c] = x[new == c].mean(axis=0)
        history.append(float(_sq_dists(x, centers)[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, history)


def kmeans(x, k: int, seed=0, max_iter: int = 100, n_init: int = 10) -> np.ndarray:
    return kmeans_fit(x, k, seed, max_iter, n_init).labels


def _entropy(counts):
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def homogeneity_completeness_v(labels_true, labels_pred) -> tuple[float, float, float]:
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape or labels_true.ndim != 1:
        raise ShapeError("label vectors must be 1-D and of equal length")
    if labels_true.size == 0:
        raise ValidationError("need at least one label")
    _, ti = np.unique(labels_true, return_inverse=True)
    _, pi = np.unique(labels_pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1))
    np.add.at(table, (ti, pi), 1)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    h_c_given_k = float(-(joint * np.log(table[nz] / table.sum(axis=0)[np.nonzero(nz)[1]])).sum())
    h_k_given_c = float(-(joint * np.log(table[nz] / table.sum(axis=1)[np.nonzero(nz)[0]])).sum())
    homogeneity = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    if homogeneity + completeness == 0:
        return homogeneity, completeness, 0.0
    v = 2 * homogeneity * completeness / (homogeneity + completeness)
    return homogeneity, completeness, v


def v_score(labels_true, labels_pred) -> float:
    """Balanced v-measure (harmonic mean of homogeneity and completeness)."""
    return homogeneity_completeness_v(labels_true, labels_pred)[2]
