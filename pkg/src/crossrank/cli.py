"""Command-line entry point.

    crossrank synth       generate a synthetic dataset directory
    crossrank preprocess  L1 -> log -> smooth, optional gene list / top-k
    crossrank train       fit the encoders; writes checkpoint.ckpt and history.csv
    crossrank embed       export per-spot image and gene embeddings
    crossrank eval        genepred | rankacc | r2 | cluster

Every command takes ``--out DIR`` and writes ``manifest.json`` there next to
its outputs. ``--config FILE`` supplies defaults as a flat JSON object or as
``key = value`` lines; explicit flags win over the file, and the file wins over
the ``CROSSRANK_SEED`` environment variable. Exit codes: 0 success, 1 usage or
validation error, 2 numeric failure at run time.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import AugmentConfig
from .errors import CrossRankError, DegenerateEmbeddingError, NumericError, ValidationError
from .losses import LossConfig
from .metrics import (MetricsReport, distance_correlation_fit, homogeneity_completeness_v,
                      kmeans, rank_accuracy_trials)
from .preprocess import (_fmt, _write_csv, filter_gene_list, preprocess, read_dataset,
                         read_gene_list, select_top_expressed, write_dataset)
from .synthdata import SynthConfig, generate, read_labels, write_synthetic
from .trainer import (ABLATIONS, Checkpoint, PredictorConfig, TrainConfig, embed_dataset,
                      fit_gene_predictor, load_checkpoint, predict_genes, save_checkpoint, train)

log = logging.getLogger("crossrank")

SEED_ENV = "CROSSRANK_SEED"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 20x20, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key/value file of defaults")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    root = _Parser(prog="crossrank", description="gene/image cross-modal alignment toolkit")
    root.add_argument("--version", action="version", version=f"crossrank {__version__}")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True)
    leaves = {}

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    d = SynthConfig()
    p.add_argument("--grid", type=_grid, default=(d.grid_h, d.grid_w))
    p.add_argument("--genes", type=int, default=d.n_genes)
    p.add_argument("--sparsity", type=float, default=d.target_sparsity)
    p.add_argument("--clusters", type=int, default=d.n_clusters)
    p.add_argument("--latent-dim", type=int, default=d.latent_dim)
    p.add_argument("--image-dim", type=int, default=d.image_dim)
    p.add_argument("--smooth-passes", type=int, default=d.spatial_smooth_passes)
    p.add_argument("--noise", type=float, default=d.modality_noise_sigma)
    p.add_argument("--cluster-spread", type=float, default=d.cluster_spread)
    p.add_argument("--nuisance-dims", type=int, default=d.nuisance_dims)
    p.add_argument("--nuisance-sigma", type=float, default=d.nuisance_sigma)
    leaves["synth"] = p

    p = sub.add_parser("preprocess", help="L1 -> log -> 8-neighbourhood smoothing")
    _common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--gene-list")
    p.add_argument("--top-k", type=int)
    p.add_argument("--log-scale", type=float, default=1e4)
    leaves["preprocess"] = p

    p = sub.add_parser("train", help="train the encoders")
    _common(p)
    t, lc, ac = TrainConfig(), LossConfig(), AugmentConfig()
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch", type=int, default=t.batch_size)
    p.add_argument("--lr-image", type=float, default=t.lr_image)
    p.add_argument("--lr-gene", type=float, default=t.lr_gene)
    p.add_argument("--lambda1", type=float, default=lc.lambda1)
    p.add_argument("--lambda2", type=float, default=lc.lambda2)
    p.add_argument("--tau", type=float, default=lc.tau)
    p.add_argument("--ema", type=float, default=t.ema_momentum)
    p.add_argument("--ablation", choices=ABLATIONS, default=t.ablation)
    p.add_argument("--reduction", choices=("sum", "mean"), default=lc.reduction)
    p.add_argument("--margin-mode", choices=("gene_gap", "fixed"), default=lc.margin_mode)
    p.add_argument("--epsilon", type=float, default=lc.epsilon)
    p.add_argument("--detach-gene-sims", action="store_true")
    p.add_argument("--contrastive-branch", choices=("student", "teacher"), default=lc.contrastive_branch)
    p.add_argument("--embed-dim", type=int, default=t.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=t.hidden_dim)
    p.add_argument("--weak-sigma", type=float, default=ac.weak_noise_sigma)
    p.add_argument("--strong-sigma", type=float, default=ac.strong_noise_sigma)
    p.add_argument("--strong-dropout", type=float, default=ac.strong_dropout_rate)
    p.add_argument("--heldout-fraction", type=float, default=t.heldout_fraction)
    p.add_argument("--rank-trials", type=int, default=t.rank_trials)
    p.add_argument("--resume", help="checkpoint to continue from")
    leaves["train"] = p

    p = sub.add_parser("embed", help="export embeddings")
    _common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--branch", choices=("teacher", "student"), default="teacher")
    leaves["embed"] = p

    p = sub.add_parser("eval", help="evaluation protocols")
    esub = p.add_subparsers(dest="subcommand", required=True)

    q = esub.add_parser("genepred", help="gene prediction from image embeddings")
    _common(q)
    q.add_argument("--data", nargs="+", required=True, help="processed dataset dir(s), one per sample")
    q.add_argument("--embeddings", nargs="+", help="embeddings.csv per sample")
    q.add_argument("--checkpoint", help="compute embeddings from this checkpoint instead")
    q.add_argument("--predictions", nargs="+", help="score these prediction CSVs; no fitting")
    q.add_argument("--test-fraction", type=float, default=0.2)
    pc = PredictorConfig()
    q.add_argument("--epochs", type=int, default=pc.epochs)
    q.add_argument("--lr", type=float, default=pc.lr)
    q.add_argument("--hidden-dim", type=int, default=pc.hidden_dim)
    leaves["eval genepred"] = q

    q = esub.add_parser("rankacc", help="held-out rank accuracy")
    _common(q)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--trials", type=int, default=8)
    leaves["eval rankacc"] = q

    q = esub.add_parser("r2", help="gene/image distance correlation")
    _common(q)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--pairs", type=int, default=100)
    leaves["eval r2"] = q

    q = esub.add_parser("cluster", help="K-means agreement between modalities")
    _common(q)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--k", type=int, default=3)
    q.add_argument("--labels", help="optional labels.csv with ground-truth clusters")
    leaves["eval cluster"] = q
    return root, leaves


def _leaf_name(ns) -> str:
    return ns.command if ns.command != "eval" else f"eval {ns.subcommand}"


def read_config_file(path) -> dict:
    """JSON object or ``key = value`` lines (``#`` comments). Keys may use
    dashes or underscores."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for i, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{i}: expected key = value")
            k, v = line.split("=", 1)
            data[k.strip()] = v.strip()
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a flat key/value object")
    out = {}
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise UsageError(f"{path}: value for {k!r} must be a scalar")
        out[k.replace("-", "_")] = v
    return out


def _apply_config(leaf: argparse.ArgumentParser, values: dict):
    actions = {a.dest: a for a in leaf._actions}
    defaults = {}
    for key, raw in values.items():
        if key in ("config", "help") or key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            val = _bool(raw)
        elif act.nargs in ("+", "*"):
            val = [str(v) for v in (raw if isinstance(raw, list) else str(raw).split())]
        elif act.type is not None:
            try:
                val = act.type(str(raw)) if not isinstance(raw, bool) else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            val = str(raw)
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {list(act.choices)}")
        defaults[key] = val
    leaf.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    root, leaves = build_parser()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        for leaf in leaves.values():
            if any(a.dest == "seed" for a in leaf._actions):
                leaf.set_defaults(seed=seed)
    ns = root.parse_args(argv)
    if ns.config:
        _apply_config(leaves[_leaf_name(ns)], read_config_file(ns.config))
        ns = root.parse_args(argv)
    ns._leaf = leaves[_leaf_name(ns)]
    return ns


def replay_argv(ns) -> list[str]:
    """A fully explicit argv reproducing ``ns`` without config file or env."""
    out = _leaf_name(ns).split()
    for act in ns._leaf._actions:
        if not act.option_strings or act.dest in ("help", "config"):
            continue
        val = getattr(ns, act.dest, None)
        flag = act.option_strings[-1]
        if isinstance(act, argparse._StoreTrueAction):
            if val:
                out.append(flag)
        elif val is None:
            continue
        elif isinstance(val, (list, tuple)) and act.dest != "grid":
            out += [flag, *map(str, val)]
        elif act.dest == "grid":
            out += [flag, f"{val[0]}x{val[1]}"]
        else:
            out += [flag, repr(val) if isinstance(val, float) else str(val)]
    return out


def _resolved(ns) -> dict:
    skip = {"_leaf", "config", "verbose"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(ns).items() if k not in skip}


def write_manifest(out_dir: Path, ns, inputs: dict, outputs: list, started: float, extra=None):
    doc = {
        "command": _leaf_name(ns),
        "config": _resolved(ns),
        "config_file": ns.config,
        "replay_argv": replay_argv(ns),
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "seed": getattr(ns, "seed", None),
        "tool_version": __version__,
        "wall_time_s": time.time() - started,
    }
    if extra:
        doc.update(extra)
    _write_json(out_dir / "manifest.json", doc)


def _write_json(path: Path, doc):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _out_dir(ns) -> Path:
    d = Path(ns.out)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {d}: {exc}") from None
    if not os.access(d, os.W_OK):
        raise ValidationError(f"output directory {d} is not writable")
    return d


# --------------------------------------------------------------------------
# embeddings file


def write_embeddings(path: Path, spot_ids, img, gene):
    d = img.shape[1]
    header = ["spot_id"] + [f"img_{j}" for j in range(d)] + [f"gene_{j}" for j in range(gene.shape[1])]
    _write_csv(path, header, ([s] + [_fmt(v) for v in a] + [_fmt(v) for v in b]
                              for s, a, b in zip(spot_ids, img, gene)))


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing embeddings file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "spot_id":
        raise ValidationError(f"{path}: expected a header starting with spot_id")
    header = rows[0]
    img_cols = [j for j, h in enumerate(header) if h.startswith("img_")]
    gene_cols = [j for j, h in enumerate(header) if h.startswith("gene_")]
    if not img_cols or not gene_cols:
        raise ValidationError(f"{path}: needs img_* and gene_* columns")
    try:
        block = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(rows) - 1, -1)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    ids = [r[0] for r in rows[1:]]
    return ids, block[:, [j - 1 for j in img_cols]], block[:, [j - 1 for j in gene_cols]]


def _align(ds, ids):
    where = {s: i for i, s in enumerate(ds.spot_ids)}
    missing = [s for s in ids if s not in where]
    if missing:
        raise ValidationError(f"{len(missing)} embedded spot(s) not in dataset, e.g. {missing[0]!r}")
    return ds.subset([where[s] for s in ids])


# --------------------------------------------------------------------------
# commands


def cmd_synth(ns):
    out = _out_dir(ns)
    cfg = SynthConfig(grid_h=ns.grid[0], grid_w=ns.grid[1], latent_dim=ns.latent_dim,
                      n_genes=ns.genes, image_dim=ns.image_dim, target_sparsity=ns.sparsity,
                      spatial_smooth_passes=ns.smooth_passes, modality_noise_sigma=ns.noise,
                      n_clusters=ns.clusters, seed=ns.seed, cluster_spread=ns.cluster_spread,
                      nuisance_dims=ns.nuisance_dims, nuisance_sigma=ns.nuisance_sigma).validate()
    ds, labels, latent = generate(cfg)
    write_synthetic(out, ds, labels, latent, cfg)
    files = ["spots.csv", "expression.csv", "image_features.csv", "labels.csv", "latent.csv"]
    return {}, [out / f for f in files], {"synth_config": asdict(cfg),
                                          "realized_sparsity": float((ds.expression == 0).mean())}


def cmd_preprocess(ns):
    src = read_dataset(ns.data)
    out = _out_dir(ns)
    ds = preprocess(src, ns.log_scale)
    if ns.gene_list:
        ds = filter_gene_list(ds, read_gene_list(ns.gene_list))
    if ns.top_k is not None:
        # rank genes by raw counts, restricted to whatever survived the list filter
        raw = filter_gene_list(src, ds.gene_ids)
        ds = filter_gene_list(ds, select_top_expressed(raw, ns.top_k))
    write_dataset(ds, out, gene_list=ds.gene_ids)
    files = ["spots.csv", "expression.csv", "image_features.csv", "gene_list.txt"]
    inputs = {"data": ns.data, "gene_list": ns.gene_list}
    return inputs, [out / f for f in files], {"n_genes": len(ds.gene_ids),
                                              "zero_spots": ds.flags.get("zero_spots", [])}


def train_config_from_args(ns) -> TrainConfig:
    loss = LossConfig(tau=ns.tau, lambda1=ns.lambda1, lambda2=ns.lambda2, reduction=ns.reduction,
                      margin_mode=ns.margin_mode, epsilon=ns.epsilon,
                      detach_gene_sims=ns.detach_gene_sims, contrastive_branch=ns.contrastive_branch)
    aug = AugmentConfig(ns.weak_sigma, ns.strong_sigma, ns.strong_dropout)
    return TrainConfig(batch_size=ns.batch, epochs=ns.epochs, lr_image=ns.lr_image, lr_gene=ns.lr_gene,
                       ema_momentum=ns.ema, loss=loss, augment=aug, seed=ns.seed,
                       ablation=ns.ablation, embed_dim=ns.embed_dim, hidden_dim=ns.hidden_dim,
                       heldout_fraction=ns.heldout_fraction, rank_trials=ns.rank_trials).validate()


def cmd_train(ns):
    cfg = train_config_from_args(ns)
    ds = read_dataset(ns.data)
    out = _out_dir(ns)
    ckpt_path, hist_path = out / "checkpoint.ckpt", out / "history.csv"
    resume = load_checkpoint(ns.resume) if ns.resume else None

    written = []

    def on_epoch_end(state, history):
        save_checkpoint(ckpt_path, Checkpoint(state, cfg, history))
        history.write_csv(hist_path)
        written.append(state.epoch)

    state, history = train(ds, cfg, resume=resume, on_epoch_end=on_epoch_end)
    if not written:
        # zero epochs, or resumed from an already finished run
        on_epoch_end(state, history)
    extra = {"train_config": cfg.to_dict(), "initial_rank_accuracy": history.initial_rank_accuracy,
             "final_rank_accuracy": history.rows[-1]["rank_accuracy"] if history.rows else None}
    return {"data": ns.data, "resume": ns.resume}, [ckpt_path, hist_path], extra


def cmd_embed(ns):
    ckpt = load_checkpoint(ns.checkpoint)
    ds = read_dataset(ns.data)
    enc = ckpt.state.encoders
    if ds.image_dim != enc.student_image.in_dim or ds.expression.shape[1] != enc.gene.in_dim:
        raise ValidationError(
            f"checkpoint expects image dim {enc.student_image.in_dim} and {enc.gene.in_dim} genes; "
            f"dataset has {ds.image_dim} and {ds.expression.shape[1]}")
    out = _out_dir(ns)
    img, gene = embed_dataset(enc, ds, ns.branch)
    path = out / "embeddings.csv"
    write_embeddings(path, ds.spot_ids, img, gene)
    return {"checkpoint": ns.checkpoint, "data": ns.data}, [path], {"branch": ns.branch}


def _read_predictions(path, ds):
    ids_path = Path(path)
    with open(ids_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "spot_id":
        raise ValidationError(f"{path}: expected a header starting with spot_id")
    genes = rows[0][1:]
    sub = _align(ds, [r[0] for r in rows[1:]])
    sub = filter_gene_list(sub, genes)
    if sub.gene_ids != genes:
        raise ValidationError(f"{path}: gene columns must all exist in the dataset, in dataset order")
    try:
        pred = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return sub.spot_ids, sub.expression, pred.reshape(sub.expression.shape), genes


def cmd_eval_genepred(ns):
    out = _out_dir(ns)
    sources = ns.predictions or ns.embeddings
    if sources is None and ns.checkpoint is None:
        raise UsageError("genepred needs --embeddings, --checkpoint or --predictions")
    if sources is not None and len(sources) != len(ns.data):
        raise UsageError("give one embeddings/predictions file per --data directory")
    if not 0 < ns.test_fraction < 1:
        raise ValidationError("--test-fraction must be in (0, 1)")
    ckpt = load_checkpoint(ns.checkpoint) if ns.checkpoint and not ns.predictions else None
    samples, pred_rows, gene_rows = [], [], []
    for i, data_dir in enumerate(ns.data):
        ds = read_dataset(data_dir)
        name = Path(data_dir).name or f"sample{i}"
        if ns.predictions:
            ids, y, yhat, genes = _read_predictions(ns.predictions[i], ds)
        else:
            if ckpt is not None:
                img, _ = embed_dataset(ckpt.state.encoders, ds)
                sub = ds
            else:
                e_ids, img, _ = read_embeddings(ns.embeddings[i])
                sub = _align(ds, e_ids)
            perm = np.random.default_rng([ns.seed, i]).permutation(sub.n_spots)
            n_test = max(2, int(round(ns.test_fraction * sub.n_spots)))
            test, fit = np.sort(perm[:n_test]), np.sort(perm[n_test:])
            model = fit_gene_predictor(img[fit], sub.expression[fit],
                                       PredictorConfig(hidden_dim=ns.hidden_dim, lr=ns.lr,
                                                       epochs=ns.epochs, seed=ns.seed))
            ids = [sub.spot_ids[j] for j in test]
            y, yhat, genes = sub.expression[test], predict_genes(model, img[test]), sub.gene_ids
        rep = MetricsReport.compute(y, yhat)
        samples.append({"sample": name, **rep.to_dict()})
        for s, a, b in zip(ids, y, yhat):
            pred_rows += [[name, s, g, _fmt(u), _fmt(v)] for g, u, v in zip(genes, a, b)]
        gene_rows += [[name, g, "" if np.isnan(v) else _fmt(v)] for g, v in zip(genes, rep.per_gene_pcc)]
    macro = {k: float(np.mean([s[k] for s in samples])) for k in ("pcc", "mae", "mse")}
    doc = {**macro, "skipped_genes": int(sum(s["skipped_genes"] for s in samples)),
           "per_gene_pcc": samples[0]["per_gene_pcc"] if len(samples) == 1 else None,
           "samples": samples}
    _write_json(out / "metrics.json", doc)
    _write_csv(out / "predictions.csv", ["sample", "spot_id", "gene_id", "observed", "predicted"], pred_rows)
    _write_csv(out / "gene_pcc.csv", ["sample", "gene_id", "pcc"], gene_rows)
    inputs = {"data": ns.data, "embeddings": ns.embeddings, "checkpoint": ns.checkpoint,
              "predictions": ns.predictions}
    return inputs, [out / "metrics.json", out / "predictions.csv", out / "gene_pcc.csv"], None


def cmd_eval_rankacc(ns):
    out = _out_dir(ns)
    ids, img, gene = read_embeddings(ns.embeddings)
    rec = rank_accuracy_trials(gene, img, ns.trials, ns.seed)
    acc = float(rec[:, 5].mean()) if len(rec) else float("nan")
    _write_json(out / "metrics.json", {"rank_accuracy": acc, "trials": ns.trials, "evaluated": len(rec)})
    _write_csv(out / "trials.csv", ["anchor", "target_q", "target_r", "gene_gap", "image_gap", "correct"],
               ([ids[int(p)], ids[int(q)], ids[int(r)], _fmt(dg), _fmt(di), int(c)]
                for p, q, r, dg, di, c in rec))
    return {"embeddings": ns.embeddings}, [out / "metrics.json", out / "trials.csv"], None


def cmd_eval_r2(ns):
    out = _out_dir(ns)
    ids, img, gene = read_embeddings(ns.embeddings)
    if ns.pairs < 2:
        raise ValidationError("--pairs must be >= 2")
    fit = distance_correlation_fit(gene, img, ns.pairs, ns.seed)
    _write_json(out / "metrics.json", {"r2": fit.r2, "slope": fit.slope, "intercept": fit.intercept,
                                       "degenerate": fit.degenerate, "pairs": ns.pairs})
    _write_csv(out / "pairs.csv", ["spot_a", "spot_b", "gene_distance", "image_distance"],
               ([ids[a], ids[b], _fmt(x), _fmt(y)]
                for (a, b), x, y in zip(fit.pairs, fit.gene_dist, fit.image_dist)))
    return {"embeddings": ns.embeddings}, [out / "metrics.json", out / "pairs.csv"], None


def cmd_eval_cluster(ns):
    out = _out_dir(ns)
    ids, img, _ = read_embeddings(ns.embeddings)
    ds = _align(read_dataset(ns.data), ids)
    gene_labels = kmeans(ds.expression, ns.k, seed=ns.seed)
    img_labels = kmeans(img, ns.k, seed=ns.seed)
    h, c, v = homogeneity_completeness_v(gene_labels, img_labels)
    doc = {"k": ns.k, "v_score": v, "homogeneity": h, "completeness": c}
    true = None
    if ns.labels:
        lab = read_labels(ns.labels)
        true = np.array([lab[s] for s in ids])
        doc["v_score_image_vs_true"] = homogeneity_completeness_v(true, img_labels)[2]
        doc["v_score_gene_vs_true"] = homogeneity_completeness_v(true, gene_labels)[2]
    _write_json(out / "metrics.json", doc)
    header = ["spot_id", "x", "y", "gene_cluster", "image_cluster"] + (["true_label"] if ns.labels else [])
    _write_csv(out / "clusters.csv", header,
               ([s, int(x), int(y), int(g), int(m)] + ([int(true[i])] if ns.labels else [])
                for i, (s, (x, y), g, m) in enumerate(zip(ids, ds.coords, gene_labels, img_labels))))
    inputs = {"embeddings": ns.embeddings, "data": ns.data, "labels": ns.labels}
    return inputs, [out / "metrics.json", out / "clusters.csv"], None


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval genepred": cmd_eval_genepred,
    "eval rankacc": cmd_eval_rankacc,
    "eval r2": cmd_eval_r2,
    "eval cluster": cmd_eval_cluster,
}


def run(argv=None) -> int:
    """Parse and execute; returns the process exit code."""
    started = time.time()
    try:
        ns = parse_args(argv)
    except UsageError as exc:
        print(f"crossrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        inputs, outputs, extra = COMMANDS[_leaf_name(ns)](ns)
        write_manifest(Path(ns.out), ns, inputs, outputs, started, extra)
    except (NumericError, DegenerateEmbeddingError, FloatingPointError) as exc:
        print(f"crossrank: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CrossRankError, ValueError, OSError) as exc:
        print(f"crossrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
