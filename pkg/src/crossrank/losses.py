"""Training objectives: gene-image InfoNCE, cross-modal ranking consistency
(exhaustive and cyclic-sampled), the fixed-margin ranking baseline, the
teacher/student distillation term and their weighted total.

Embedding blocks are ``(N, D)`` arrays whose rows are expected to be unit
length, so a similarity is a plain dot product. Every loss returns gradients
with respect to the blocks (or similarity matrices) it consumes; chaining back
through row normalization and the encoders is the trainer's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError, NumericError, ValidationError
from .numcore import as_matrix

REDUCTIONS = ("sum", "mean")
MARGIN_MODES = ("gene_gap", "fixed")


@dataclass
class LossConfig:
    tau: float = 0.1
    lambda1: float = 5.0
    lambda2: float = 1.0
    # applies to the contrastive and ranking terms; distillation is always a mean
    reduction: str = "sum"
    margin_mode: str = "gene_gap"
    epsilon: float = 0.1
    # stop ranking-loss gradients from reaching the gene encoder
    detach_gene_sims: bool = False
    # image branch fed to the contrastive term: "student" (strong view) or "teacher"
    contrastive_branch: str = "student"

    def validate(self) -> "LossConfig":
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.margin_mode not in MARGIN_MODES:
            raise ConfigError(f"margin_mode must be one of {MARGIN_MODES}")
        if self.margin_mode == "fixed" and not self.epsilon > 0:
            raise ConfigError("fixed margin mode needs epsilon > 0")
        if self.contrastive_branch not in ("student", "teacher"):
            raise ConfigError("contrastive_branch must be 'student' or 'teacher'")
        return self


# --------------------------------------------------------------------------
# similarities


def cosine_sim_matrix(a, b) -> np.ndarray:
    """Pairwise dot products of unit rows, clamped to [-1, 1]."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"embedding widths differ: {a.shape[1]} vs {b.shape[1]}")
    for name, m in (("a", a), ("b", b)):
        zero = ~np.any(m != 0.0, axis=1)
        if zero.any():
            raise DegenerateEmbeddingError(
                f"{name} has {int(zero.sum())} all-zero row(s), e.g. row {int(np.argmax(zero))}")
    return np.clip(a @ b.T, -1.0, 1.0)


def _clip_mask(a, b):
    raw = a @ b.T
    return (raw >= -1.0) & (raw <= 1.0)


def sim_backward(d_sim, a, b):
    """Chain ``dL/dS`` for ``S = clip(a @ b.T)`` back to ``(dL/da, dL/db)``."""
    d_sim = d_sim * _clip_mask(a, b)
    return d_sim @ b, d_sim.T @ a


def self_sim_backward(d_sim, a):
    """Chain ``dL/dS`` for the self-similarity ``S = clip(a @ a.T)`` back to ``a``."""
    d_sim = d_sim * _clip_mask(a, a)
    return (d_sim + d_sim.T) @ a


# --------------------------------------------------------------------------
# InfoNCE family


def _check_pair(x, y, names):
    x = as_matrix(x, names[0])
    y = as_matrix(y, names[1])
    if x.shape != y.shape:
        raise ValidationError(f"{names[0]} {x.shape} and {names[1]} {y.shape} differ")
    if x.shape[0] < 2:
        raise ValidationError("need at least 2 rows")
    return x, y


def _tau(tau):
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    return tau


def _info_nce_terms(anchor, cand, tau):
    """Per-anchor ``-log softmax`` of the matched pair plus ``dterm/dS``."""
    s = cosine_sim_matrix(anchor, cand)
    logits = s / tau
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=1, keepdims=True)
    terms = (np.log(z) + shift)[:, 0] - np.diagonal(logits)
    prob = e / z
    d_s = (prob - np.eye(len(s), dtype=prob.dtype)) / tau
    return terms, d_s


def gene_image_contrastive(img, gene, cfg: LossConfig):
    """Image-anchored InfoNCE over gene candidates.

    Returns ``(loss, d_img, d_gene)``. ``cfg.reduction == "mean"`` divides by N.
    """
    img, gene = _check_pair(img, gene, ("img", "gene"))
    terms, d_s = _info_nce_terms(img, gene, _tau(cfg.tau))
    n = len(terms)
    if cfg.reduction == "mean":
        loss = terms.sum() / n
        d_s = d_s / n
    else:
        loss = terms.sum()
    d_img, d_gene = sim_backward(d_s, img, gene)
    return loss, d_img, d_gene


def distillation_loss(teacher_weak, student_strong, cfg: LossConfig):
    """Mean InfoNCE between teacher (weak view) anchors and student (strong view)
    candidates. Returns ``(loss, d_student)``; the teacher gets no gradient."""
    teacher_weak, student_strong = _check_pair(
        teacher_weak, student_strong, ("teacher_weak", "student_strong"))
    terms, d_s = _info_nce_terms(teacher_weak, student_strong, _tau(cfg.tau))
    n = len(terms)
    d_s = d_s / n
    _, d_student = sim_backward(d_s, teacher_weak, student_strong)
    return terms.sum() / n, d_student


# --------------------------------------------------------------------------
# ranking consistency


def ranking_residual(sg, si, p: int, q: int, r: int) -> float:
    """Signed gap residual for anchor ``p`` and targets ``q``, ``r``.

    Negative when the image gap agrees with the gene ordering and is at least as
    wide as the gene gap; ``sign(0) = 0`` makes gene ties contribute nothing.
    """
    if len({p, q, r}) != 3:
        raise ValidationError(f"indices must be distinct, got ({p}, {q}, {r})")
    n = len(sg)
    if not all(0 <= k < n for k in (p, q, r)):
        raise ValidationError(f"index out of range for n={n}")
    dg = sg[p][q] - sg[p][r]
    di = si[p][q] - si[p][r]
    return float(np.sign(dg) * (dg - di))


def _exact_sum(values):
    # correctly rounded, so the result does not depend on summation order
    if values.dtype != np.float64:
        return values.sum()
    return math.fsum(values.tolist())


def _check_sims(sg, si, min_n=3):
    sg = as_matrix(sg, "Sg")
    si = as_matrix(si, "Si")
    if sg.shape != si.shape or sg.shape[0] != sg.shape[1]:
        raise ValidationError(f"similarity matrices must be square and equal: {sg.shape}, {si.shape}")
    if sg.shape[0] < min_n:
        raise ValidationError(f"need n >= {min_n}, got {sg.shape[0]}")
    return sg, si


def ranking_loss_full(sg, si, cfg: LossConfig):
    """Hinged ranking residual summed over every ordered triplet.

    Returns ``(loss, d_si)``. The sign factor is held constant, so the gradient
    with respect to ``sg`` is exactly ``-d_si``.
    """
    sg, si = _check_sims(sg, si)
    n = len(sg)
    dg = sg[:, :, None] - sg[:, None, :]
    di = si[:, :, None] - si[:, None, :]
    sgn = np.sign(dg)
    ell = sgn * (dg - di)
    idx = np.arange(n)
    valid = ((idx[:, None, None] != idx[None, :, None])
             & (idx[:, None, None] != idx[None, None, :])
             & (idx[None, :, None] != idx[None, None, :]))
    active = valid & (ell > 0)
    loss = _exact_sum(ell[active])
    w = np.where(active, sgn, 0.0)
    # d ell / d si[p,q] = -sgn ; d ell / d si[p,r] = +sgn
    d_si = -w.sum(axis=2) + w.sum(axis=1)
    if cfg.reduction == "mean":
        denom = n * (n - 1) * (n - 2)
        loss, d_si = loss / denom, d_si / denom
    return loss, d_si


def sample_pairings(n: int, anchor: int, rng_seed) -> np.ndarray:
    """Cyclic ``(q, r)`` pairs for one anchor.

    The non-anchor indices are shuffled and each is paired with its successor,
    the last wrapping to the first: ``n - 1`` pairs, every index in exactly two.
    ``rng_seed`` may be an int, a seed sequence, or a ``numpy`` Generator.
    """
    if n < 3:
        raise ValidationError(f"need n >= 3, got {n}")
    if not 0 <= anchor < n:
        raise ValidationError(f"anchor {anchor} out of range for n={n}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    rest = np.delete(np.arange(n), anchor)
    shuffled = rng.permutation(rest)
    return np.stack([shuffled, np.roll(shuffled, -1)], axis=1)


def sample_all_pairings(n: int, rng_seed) -> np.ndarray:
    """Pairings for every anchor, shape ``(n, n - 1, 2)``, from one generator."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return np.stack([sample_pairings(n, p, rng) for p in range(n)])


def _check_pairings(pairings, n):
    pairings = np.asarray(pairings)
    if pairings.shape != (n, n - 1, 2):
        raise ValidationError(f"pairings shape {pairings.shape} does not match n={n}")
    return pairings


def _sampled_gaps(sg, si, pairings):
    n = len(sg)
    p = np.repeat(np.arange(n), n - 1)
    q = pairings[:, :, 0].reshape(-1)
    r = pairings[:, :, 1].reshape(-1)
    if np.any((q == p) | (r == p) | (q == r)):
        raise ValidationError("pairings must not contain the anchor or repeat an index")
    dg = sg[p, q] - sg[p, r]
    di = si[p, q] - si[p, r]
    return p, q, r, np.sign(dg), dg, di


def _scatter(n, p, q, r, wq, wr, dtype):
    d = np.zeros((n, n), dtype=dtype)
    np.add.at(d, (p, q), wq)
    np.add.at(d, (p, r), wr)
    return d


def ranking_loss_sampled(sg, si, pairings, cfg: LossConfig):
    """Ranking loss over the cyclic pairs of every anchor; ``(loss, d_si)``.

    ``reduction == "mean"`` divides by ``n (n - 1)``, the number of triplets.
    """
    sg, si = _check_sims(sg, si)
    n = len(sg)
    pairings = _check_pairings(pairings, n)
    p, q, r, sgn, dg, di = _sampled_gaps(sg, si, pairings)
    ell = sgn * (dg - di)
    active = ell > 0
    loss = _exact_sum(ell[active])
    w = np.where(active, sgn, 0.0)
    d_si = _scatter(n, p, q, r, -w, w, ell.dtype)
    if cfg.reduction == "mean":
        denom = n * (n - 1)
        loss, d_si = loss / denom, d_si / denom
    return loss, d_si


def classic_margin_loss(sg, si, epsilon, pairings, cfg: LossConfig):
    """Fixed-margin ordinal baseline: ``max{0, eps - sign(dG) * dI}``.

    Uses the same sampled triplets; triplets with tied gene similarity carry no
    ordering and are skipped. Returns ``(loss, d_si)``.
    """
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    sg, si = _check_sims(sg, si)
    n = len(sg)
    pairings = _check_pairings(pairings, n)
    p, q, r, sgn, _, di = _sampled_gaps(sg, si, pairings)
    h = epsilon - sgn * di
    active = (h > 0) & (sgn != 0)
    loss = _exact_sum(h[active])
    w = np.where(active, sgn, 0.0)
    d_si = _scatter(n, p, q, r, -w, w, h.dtype)
    if cfg.reduction == "mean":
        denom = n * (n - 1)
        loss, d_si = loss / denom, d_si / denom
    return loss, d_si


def rank_loss_embeddings(gene, img, pairings, cfg: LossConfig):
    """Sampled ranking loss evaluated on embedding blocks.

    Builds ``Sg`` and ``Si`` as self-similarities, applies the configured margin
    mode and returns ``(loss, d_img, d_gene)``. ``d_gene`` is zero when
    ``cfg.detach_gene_sims`` is set.
    """
    gene, img = _check_pair(gene, img, ("gene", "img"))
    sg = cosine_sim_matrix(gene, gene)
    si = cosine_sim_matrix(img, img)
    if cfg.margin_mode == "fixed":
        loss, d_si = classic_margin_loss(sg, si, cfg.epsilon, pairings, cfg)
        # the fixed margin does not involve gene similarity values
        d_sg = np.zeros_like(d_si)
    else:
        loss, d_si = ranking_loss_sampled(sg, si, pairings, cfg)
        d_sg = -d_si
    d_img = self_sim_backward(d_si, img)
    if cfg.detach_gene_sims:
        d_gene = np.zeros_like(gene)
    else:
        d_gene = self_sim_backward(d_sg, gene)
    return loss, d_img, d_gene


# --------------------------------------------------------------------------


def total_loss(parts: dict, cfg: LossConfig) -> float:
    """``contrastive + lambda1 * rank + lambda2 * distil``."""
    for name in ("contrastive", "rank", "distil"):
        value = parts.get(name, 0.0)
        if not math.isfinite(value):
            raise NumericError(f"loss component '{name}' is not finite ({value})", component=name)
    return (parts.get("contrastive", 0.0)
            + cfg.lambda1 * parts.get("rank", 0.0)
            + cfg.lambda2 * parts.get("distil", 0.0))
