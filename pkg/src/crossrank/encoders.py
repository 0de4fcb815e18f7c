"""Student/teacher image encoders, the gene encoder, feature-space
augmentations and the EMA teacher update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import MlpCache, MlpParams, init_mlp, l2_normalize_rows, mlp_forward

# stream tags for init_mlp so each encoder draws from its own substream
_IMAGE_TAG = 1
_GENE_TAG = 2


@dataclass
class AugmentConfig:
    weak_noise_sigma: float = 0.01
    strong_noise_sigma: float = 0.1
    strong_dropout_rate: float = 0.2

    def validate(self) -> "AugmentConfig":
        if not 0 <= self.weak_noise_sigma <= self.strong_noise_sigma:
            raise ConfigError("need 0 <= weak_noise_sigma <= strong_noise_sigma")
        if not 0 <= self.strong_dropout_rate < 1:
            raise ConfigError("strong_dropout_rate must be in [0, 1)")
        return self


@dataclass
class EncoderState:
    student_image: MlpParams
    teacher_image: MlpParams
    gene: MlpParams
    embed_dim: int

    def copy(self) -> "EncoderState":
        return EncoderState(self.student_image.copy(), self.teacher_image.copy(),
                            self.gene.copy(), self.embed_dim)


@dataclass
class Encoded:
    """Unit-row embeddings plus what the backward pass needs.

    ``cache`` and ``raw`` are ``None`` for the teacher branch, which is never
    differentiated.
    """

    emb: np.ndarray
    raw: np.ndarray | None = None
    cache: MlpCache | None = None


def init_encoders(image_dim: int, gene_dim: int, embed_dim: int = 64,
                  hidden_dim: int = 128, seed: int = 0) -> EncoderState:
    """Fresh encoders; the teacher starts as an exact copy of the student."""
    student = init_mlp([image_dim, hidden_dim, hidden_dim, embed_dim], seed, _IMAGE_TAG)
    gene = init_mlp([gene_dim, hidden_dim, hidden_dim, embed_dim], seed, _GENE_TAG)
    return EncoderState(student, student.copy(), gene, embed_dim)


def _encode(params: MlpParams, x, keep_cache: bool) -> Encoded:
    out, cache = mlp_forward(params, x)
    emb, _ = l2_normalize_rows(out)
    if keep_cache:
        return Encoded(emb, out, cache)
    return Encoded(emb)


def encode_gene(state: EncoderState, expr_block, keep_cache: bool = True) -> Encoded:
    return _encode(state.gene, expr_block, keep_cache)


def encode_image(state: EncoderState, branch: str, feat_block, keep_cache: bool = True) -> Encoded:
    if branch == "student":
        return _encode(state.student_image, feat_block, keep_cache)
    if branch == "teacher":
        return _encode(state.teacher_image, feat_block, keep_cache=False)
    raise ValueError(f"branch must be 'student' or 'teacher', got {branch!r}")


def augment(feat_block, mode: str, cfg: AugmentConfig, rng_seed) -> np.ndarray:
    """Feature-space augmentation.

    ``weak`` adds Gaussian noise with ``weak_noise_sigma``; ``strong`` adds
    noise with ``strong_noise_sigma`` and then zeroes each coordinate
    independently with probability ``strong_dropout_rate``.
    """
    x = np.asarray(feat_block, dtype=np.float64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if mode == "weak":
        sigma, rate = cfg.weak_noise_sigma, 0.0
    elif mode == "strong":
        sigma, rate = cfg.strong_noise_sigma, cfg.strong_dropout_rate
    else:
        raise ValueError(f"mode must be 'weak' or 'strong', got {mode!r}")
    # draw both streams unconditionally so the RNG advance is config-independent
    noise = rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= rate
    out = x + sigma * noise if sigma else x.copy()
    if rate:
        out = np.where(keep, out, 0.0)
    return out


def ema_update(state: EncoderState, momentum: float) -> EncoderState:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter, in place."""
    if not 0 <= momentum < 1:
        raise ConfigError(f"EMA momentum must be in [0, 1), got {momentum}")
    t_arrays = state.teacher_image.arrays()
    s_arrays = state.student_image.arrays()
    if [a.shape for a in t_arrays] != [a.shape for a in s_arrays]:
        raise ShapeError("teacher and student parameter shapes diverged")
    for t, s in zip(t_arrays, s_arrays):
        t *= momentum
        t += (1.0 - momentum) * s
    return state
