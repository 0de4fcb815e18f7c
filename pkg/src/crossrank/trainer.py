"""Training loop: augmentation, the three losses, Adam updates with separate
image/gene learning rates, EMA teacher tracking, held-out rank accuracy,
checkpointing, and the downstream gene-prediction head.

Randomness is derived from ``(seed, purpose, epoch, step)`` rather than carried
as generator state, so a run resumed from a checkpoint replays the same draws
as an uninterrupted one.

Checkpoint file layout (all integers little-endian)::

    15 bytes   magic  b"CROSSRANK-CKPT\\n"
    8 bytes    uint64 header length H
    H bytes    UTF-8 JSON header: format_version, epoch, step, config, rng,
               history, embed_dim, arrays (name, shape, offset, count),
               payload_len, payload_sha256
    8 bytes    uint64 payload length P
    P bytes    payload: every array as float64 '<f8', concatenated in header order
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .encoders import AugmentConfig, EncoderState, augment, ema_update, encode_gene, encode_image, init_encoders
from .errors import CheckpointError, ConfigError, NumericError, ShapeError, UnsupportedVersionError
from .metrics import rank_accuracy
from .numcore import MlpParams, init_mlp, l2_normalize_backward, mlp_backward, mlp_forward
from .preprocess import SpotDataset

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_rank", "no_distil", "contrastive_only")
FORMAT_VERSION = 1
MAGIC = b"CROSSRANK-CKPT\n"
HISTORY_COLUMNS = ("epoch", "loss_total", "loss_contrastive", "loss_rank", "loss_distil", "rank_accuracy")

# purposes mixed into derived seeds
_STEP, _SHUFFLE, _SPLIT, _RANKACC = range(4)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr_image: float = 1e-4
    lr_gene: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_momentum: float = 0.96
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    ablation: str = "full"
    embed_dim: int = 64
    hidden_dim: int = 128
    heldout_fraction: float = 0.1
    rank_trials: int = 1000

    def validate(self) -> "TrainConfig":
        if self.batch_size < 3:
            raise ConfigError("batch_size must be >= 3 (the ranking loss needs triplets)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (self.lr_image > 0 and self.lr_gene > 0):
            raise ConfigError("learning rates must be > 0")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError("ema_momentum must be in [0, 1)")
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must be in (0, 1)")
        self.loss.validate()
        self.augment.validate()
        return self

    def effective_weights(self) -> tuple[float, float]:
        """``(lambda1, lambda2)`` after applying the ablation mask."""
        l1 = self.loss.lambda1 if self.ablation in ("full", "no_distil") else 0.0
        l2 = self.loss.lambda2 if self.ablation in ("full", "no_rank") else 0.0
        return l1, l2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = L.LossConfig(**d.pop("loss", {}))
        aug = AugmentConfig(**d.pop("augment", {}))
        return cls(loss=loss, augment=aug, **d)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, names=None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must have equal length")
    b1, b2 = betas
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient {g.shape} != parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}", component=name)
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    encoders: EncoderState
    adam_image: AdamState
    adam_gene: AdamState
    epoch: int = 0
    step: int = 0

    def copy(self) -> "TrainState":
        return TrainState(self.encoders.copy(), self.adam_image.copy(), self.adam_gene.copy(),
                          self.epoch, self.step)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    initial_rank_accuracy: float = float("nan")

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_dict(self) -> dict:
        return {"rows": self.rows, "initial_rank_accuracy": self.initial_rank_accuracy}

    @classmethod
    def from_dict(cls, d) -> "History":
        return cls([dict(r) for r in d["rows"]], d["initial_rank_accuracy"])

    def write_csv(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])
        os.replace(tmp, path)


def init_train_state(image_dim: int, gene_dim: int, cfg: TrainConfig) -> TrainState:
    enc = init_encoders(image_dim, gene_dim, cfg.embed_dim, cfg.hidden_dim, cfg.seed)
    return TrainState(enc, AdamState.zeros_like(enc.student_image.arrays()),
                      AdamState.zeros_like(enc.gene.arrays()))


def split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(train, heldout)``: the held-out slice is the last ``heldout_fraction``
    of a seeded permutation."""
    perm = np.random.default_rng([cfg.seed, _SPLIT]).permutation(n)
    n_held = max(3, int(round(cfg.heldout_fraction * n)))
    if n - n_held < cfg.batch_size:
        raise ConfigError(f"{n} spots leave fewer than one batch of {cfg.batch_size} after the held-out split")
    return np.sort(perm[: n - n_held]), np.sort(perm[n - n_held:])


def step_rng(cfg: TrainConfig, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _STEP, epoch, step])


# --------------------------------------------------------------------------


def _backprop(params: MlpParams, enc, d_emb) -> list[np.ndarray]:
    d_raw = l2_normalize_backward(enc.raw, enc.emb, d_emb)
    return mlp_backward(params, enc.cache, d_raw).arrays()


def train_step(state: TrainState, expr_block, feat_block, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[TrainState, dict]:
    """One optimisation step on a batch; returns the new state and loss parts.

    Order: weak/strong augmentation, teacher(weak) / student(strong) / gene
    embeddings, the three losses, backprop into the student image and gene
    encoders, one Adam step each, then the EMA teacher update. The input state
    is not modified.
    """
    n = len(expr_block)
    if n < 3:
        raise ConfigError("batch must contain at least 3 spots")
    lcfg = cfg.loss
    lam1, lam2 = cfg.effective_weights()
    weak = augment(feat_block, "weak", cfg.augment, rng)
    strong = augment(feat_block, "strong", cfg.augment, rng)
    pairings = L.sample_all_pairings(n, rng)

    enc = state.encoders
    teacher = encode_image(enc, "teacher", weak)
    student = encode_image(enc, "student", strong)
    gene = encode_gene(enc, expr_block)

    d_student = np.zeros_like(student.emb)
    if lcfg.contrastive_branch == "student":
        contrastive, d_img, d_gene = L.gene_image_contrastive(student.emb, gene.emb, lcfg)
        d_student += d_img
    else:
        contrastive, _, d_gene = L.gene_image_contrastive(teacher.emb, gene.emb, lcfg)
    rank = distil = 0.0
    if lam1:
        rank, d_img, d_g = L.rank_loss_embeddings(gene.emb, student.emb, pairings, lcfg)
        d_student += lam1 * d_img
        d_gene = d_gene + lam1 * d_g
    if lam2:
        distil, d_s = L.distillation_loss(teacher.emb, student.emb, lcfg)
        d_student += lam2 * d_s
    parts = {"contrastive": float(contrastive), "rank": float(rank), "distil": float(distil)}
    total = L.total_loss(parts, lcfg)

    g_img = _backprop(enc.student_image, student, d_student)
    g_gene = _backprop(enc.gene, gene, d_gene)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    new_img, adam_img = adam_step(enc.student_image.arrays(), g_img, state.adam_image,
                                  cfg.lr_image, betas, cfg.adam_eps, _names("image"))
    new_gene, adam_gene = adam_step(enc.gene.arrays(), g_gene, state.adam_gene,
                                    cfg.lr_gene, betas, cfg.adam_eps, _names("gene"))
    new_enc = EncoderState(MlpParams.from_arrays(new_img), enc.teacher_image.copy(),
                           MlpParams.from_arrays(new_gene), enc.embed_dim)
    ema_update(new_enc, cfg.ema_momentum)
    new_state = TrainState(new_enc, adam_img, adam_gene, state.epoch, state.step + 1)
    return new_state, {**parts, "total": total}


def _names(prefix):
    return [f"{prefix}/{kind}{k}" for k in range(3) for kind in ("W", "b")]


def embed_dataset(encoders: EncoderState, ds: SpotDataset, branch: str = "teacher"):
    """``(image_embeddings, gene_embeddings)`` for every spot, no augmentation."""
    img = encode_image(encoders, branch, ds.image_features, keep_cache=False).emb
    gene = encode_gene(encoders, ds.expression, keep_cache=False).emb
    return img, gene


def heldout_rank_accuracy(encoders: EncoderState, ds: SpotDataset, idx, cfg: TrainConfig, epoch: int) -> float:
    """Rank accuracy of teacher image embeddings against gene embeddings on
    the held-out spots."""
    img, gene = embed_dataset(encoders, ds.subset(idx))
    rng = np.random.default_rng([cfg.seed, _RANKACC, epoch])
    return rank_accuracy(gene, img, cfg.rank_trials, rng)


def _check_dataset(ds: SpotDataset, state: TrainState):
    enc = state.encoders
    if ds.image_dim != enc.student_image.in_dim or ds.expression.shape[1] != enc.gene.in_dim:
        raise ShapeError(
            f"dataset has image_dim={ds.image_dim}, genes={ds.expression.shape[1]}; encoders expect "
            f"{enc.student_image.in_dim} and {enc.gene.in_dim}")


def train(ds: SpotDataset, cfg: TrainConfig, resume: "Checkpoint | None" = None,
          until_epoch: int | None = None, on_epoch_end=None) -> tuple[TrainState, History]:
    """Run the epoch loop.

    ``resume`` continues from a checkpoint (its config must match ``cfg``).
    ``until_epoch`` stops early after that many completed epochs, which is how
    interrupted runs are simulated. ``on_epoch_end(state, history)`` is called
    after every epoch, e.g. to write a checkpoint.
    """
    cfg.validate()
    train_idx, held_idx = split_indices(ds.n_spots, cfg)
    if resume is not None:
        if resume.config.to_dict() != cfg.to_dict():
            raise ConfigError("checkpoint was written with a different training config")
        state = resume.state.copy()
        history = History.from_dict(resume.history.to_dict())
    else:
        state = init_train_state(ds.image_dim, ds.expression.shape[1], cfg)
        history = History()
    _check_dataset(ds, state)
    if resume is None and cfg.epochs > 0:
        history.initial_rank_accuracy = heldout_rank_accuracy(state.encoders, ds, held_idx, cfg, 0)
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    lam1, lam2 = cfg.loss.lambda1, cfg.loss.lambda2
    expr = ds.expression
    feats = ds.image_features
    while state.epoch < stop:
        epoch = state.epoch
        order = train_idx[np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(len(train_idx))]
        sums = {"contrastive": 0.0, "rank": 0.0, "distil": 0.0}
        n_steps = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 3:
                continue
            try:
                state, parts = train_step(state, expr[batch], feats[batch], cfg, step_rng(cfg, epoch, b))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}", component=exc.component) from exc
            for k in sums:
                sums[k] += parts[k]
            n_steps += 1
        means = {k: v / n_steps for k, v in sums.items()}
        state.epoch = epoch + 1
        acc = heldout_rank_accuracy(state.encoders, ds, held_idx, cfg, epoch + 1)
        history.rows.append({
            "epoch": epoch + 1,
            "loss_total": means["contrastive"] + lam1 * means["rank"] + lam2 * means["distil"],
            "loss_contrastive": means["contrastive"],
            "loss_rank": means["rank"],
            "loss_distil": means["distil"],
            "rank_accuracy": acc,
        })
        log.info("epoch %d total=%.4f rank_acc=%.3f", epoch + 1, history.rows[-1]["loss_total"], acc)
        if on_epoch_end is not None:
            on_epoch_end(state, history)
    return state, history


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    state: TrainState
    config: TrainConfig
    history: History
    format_version: int = FORMAT_VERSION

    @property
    def epoch(self) -> int:
        return self.state.epoch


def _ckpt_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    enc = state.encoders
    out = []
    for tag, params in (("student_image", enc.student_image), ("teacher_image", enc.teacher_image),
                        ("gene", enc.gene)):
        out += [(f"{tag}/{i}", a) for i, a in enumerate(params.arrays())]
    for tag, adam in (("adam_image", state.adam_image), ("adam_gene", state.adam_gene)):
        out += [(f"{tag}/m/{i}", a) for i, a in enumerate(adam.m)]
        out += [(f"{tag}/v/{i}", a) for i, a in enumerate(adam.v)]
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomic write (temp file then rename) of the layout in the module docstring."""
    arrays = _ckpt_arrays(ckpt.state)
    table, chunks, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": ckpt.format_version,
        "epoch": ckpt.state.epoch,
        "step": ckpt.state.step,
        "adam_image_step": ckpt.state.adam_image.step,
        "adam_gene_step": ckpt.state.adam_gene.step,
        "embed_dim": ckpt.state.encoders.embed_dim,
        "config": ckpt.config.to_dict(),
        "rng": {"scheme": "derived-seed", "seed": ckpt.config.seed},
        "history": ckpt.history.to_dict(),
        "arrays": table,
        "payload_len": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {len(data)} (needed {pos + n})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<Q", take(8))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(version, FORMAT_VERSION)
    (plen,) = struct.unpack("<Q", take(8))
    payload = take(plen)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    if plen != header["payload_len"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        a = np.frombuffer(payload, dtype="<f8", count=entry["count"], offset=entry["offset"])
        arrays[entry["name"]] = a.astype(np.float64).reshape(entry["shape"])

    def mlp(tag):
        return MlpParams.from_arrays([arrays[f"{tag}/{i}"] for i in range(6)])

    def adam(tag, step):
        return AdamState([arrays[f"{tag}/m/{i}"] for i in range(6)],
                         [arrays[f"{tag}/v/{i}"] for i in range(6)], step)

    try:
        enc = EncoderState(mlp("student_image"), mlp("teacher_image"), mlp("gene"), header["embed_dim"])
        state = TrainState(enc, adam("adam_image", header["adam_image_step"]),
                           adam("adam_gene", header["adam_gene_step"]), header["epoch"], header["step"])
        cfg = TrainConfig.from_dict(header["config"])
        history = History.from_dict(header["history"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return Checkpoint(state, cfg, history, version)


# --------------------------------------------------------------------------
# gene-prediction head


@dataclass
class PredictorConfig:
    hidden_dim: int = 128
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class GenePredictor:
    params: MlpParams
    best_epoch: int
    val_mse: float


def _mse_step_grads(params, x, y):
    out, cache = mlp_forward(params, x)
    diff = out - y
    loss = float((diff * diff).mean())
    upstream = 2.0 * diff / diff.size
    return loss, mlp_backward(params, cache, upstream).arrays()


def fit_gene_predictor(features, targets, cfg: PredictorConfig | None = None) -> GenePredictor:
    """Train a fresh 3-layer MLP on mean-squared error.

    A seeded ``val_fraction`` of the rows is held back and the parameters with
    the lowest validation MSE are kept; ``val_fraction=0`` trains on every row
    and keeps the final parameters.
    """
    cfg = cfg or PredictorConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"features {x.shape} and targets {y.shape} must be 2-D with equal rows")
    rng = np.random.default_rng([cfg.seed, 0])
    perm = rng.permutation(len(x))
    n_val = int(round(cfg.val_fraction * len(x)))
    val, fit = perm[:n_val], perm[n_val:]
    params = init_mlp([x.shape[1], cfg.hidden_dim, cfg.hidden_dim, y.shape[1]], cfg.seed, tag=7)
    adam = AdamState.zeros_like(params.arrays())
    best = (params.copy(), 0, math.inf)
    for epoch in range(cfg.epochs):
        order = fit[np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(fit))]
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            _, grads = _mse_step_grads(params, x[b], y[b])
            new, adam = adam_step(params.arrays(), grads, adam, cfg.lr, names=_names("predictor"))
            params = MlpParams.from_arrays(new)
        if n_val:
            pred, _ = mlp_forward(params, x[val])
            val_mse = float(((pred - y[val]) ** 2).mean())
            if val_mse < best[2]:
                best = (params.copy(), epoch + 1, val_mse)
    if not n_val:
        return GenePredictor(params, cfg.epochs, math.nan)
    return GenePredictor(*best)


def predict_genes(predictor: GenePredictor | MlpParams, features) -> np.ndarray:
    params = predictor.params if isinstance(predictor, GenePredictor) else predictor
    return mlp_forward(params, features)[0]
