"""Spot datasets, their CSV directory format, and the expression
preprocessing pipeline (L1 normalization, log transform, 8-neighbourhood
smoothing) with gene-list filtering and top-k selection.

Directory layout::

    spots.csv           spot_id,x,y
    expression.csv      header = gene ids, one row per spot (same order as spots.csv)
    image_features.csv  header f0..f{d-1}, one row per spot
    gene_list.txt       optional, one gene id per line
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_LOG_SCALE = 1e4

# Chebyshev-distance-1 offsets, self included
_NEIGHBOURHOOD = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


class CsvParseError(ValidationError):
    def __init__(self, path, row, column, message):
        super().__init__(f"{path}: row {row}, column {column}: {message}")
        self.path, self.row, self.column = str(path), row, column


@dataclass
class SpotDataset:
    spot_ids: list[str]
    coords: np.ndarray            # (n, 2) integer grid positions
    expression: np.ndarray        # (n, m) non-negative before log transform
    image_features: np.ndarray    # (n, d)
    gene_ids: list[str]
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spot_ids = [str(s) for s in self.spot_ids]
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        n = len(self.spot_ids)
        if self.expression.shape != (n, len(self.gene_ids)):
            raise ValidationError(
                f"expression shape {self.expression.shape} != ({n}, {len(self.gene_ids)})")
        if self.image_features.ndim != 2 or len(self.image_features) != n:
            raise ValidationError("image_features must have one row per spot")
        if len(self.coords) != n:
            raise ValidationError("coords must have one row per spot")
        if len(set(map(tuple, self.coords.tolist()))) != n:
            raise ValidationError("grid coordinates must be unique per spot")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ValidationError("gene ids must be unique")
        if not (np.isfinite(self.expression).all() and np.isfinite(self.image_features).all()):
            raise ValidationError("dataset contains non-finite values")

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[1]

    def subset(self, idx) -> "SpotDataset":
        idx = np.asarray(idx)
        return SpotDataset([self.spot_ids[i] for i in idx], self.coords[idx],
                           self.expression[idx], self.image_features[idx], list(self.gene_ids))

    def with_expression(self, expression, gene_ids=None, **flags) -> "SpotDataset":
        new = replace(self, expression=expression,
                      gene_ids=list(self.gene_ids if gene_ids is None else gene_ids),
                      flags={**self.flags, **flags})
        return new


def _check_nonnegative(ds: SpotDataset, op: str):
    if (ds.expression < 0).any():
        i, j = np.argwhere(ds.expression < 0)[0]
        raise ValidationError(
            f"{op}: negative expression at spot {ds.spot_ids[i]!r}, gene {ds.gene_ids[j]!r}")


def l1_normalize(ds: SpotDataset) -> SpotDataset:
    """Scale each spot's expression to sum to 1; all-zero spots stay zero and
    are listed under ``flags['zero_spots']``."""
    _check_nonnegative(ds, "l1_normalize")
    totals = ds.expression.sum(axis=1)
    zero = totals == 0
    if zero.any():
        log.warning("%d all-zero spot(s) left unnormalized", int(zero.sum()))
    out = ds.expression / np.where(zero, 1.0, totals)[:, None]
    return ds.with_expression(out, zero_spots=np.flatnonzero(zero).tolist())


def log_transform(ds: SpotDataset, scale: float = DEFAULT_LOG_SCALE) -> SpotDataset:
    """``x -> log(1 + scale * x)``."""
    _check_nonnegative(ds, "log_transform")
    return ds.with_expression(np.log1p(scale * ds.expression))


def neighbor_index(coords) -> list[list[int]]:
    """For each spot, indices of itself and all spots at Chebyshev distance 1."""
    coords = np.asarray(coords)
    where = {(int(x), int(y)): i for i, (x, y) in enumerate(coords)}
    out = []
    for x, y in coords.tolist():
        out.append([where[(x + dx, y + dy)] for dx, dy in _NEIGHBOURHOOD
                    if (x + dx, y + dy) in where])
    return out


def smooth_values(values, coords) -> np.ndarray:
    """Unweighted mean over each spot and its existing grid neighbours."""
    values = np.asarray(values, dtype=np.float64)
    return np.stack([values[nb].mean(axis=0) for nb in neighbor_index(coords)])


def neighborhood_smooth(ds: SpotDataset) -> SpotDataset:
    return ds.with_expression(smooth_values(ds.expression, ds.coords))


def preprocess(ds: SpotDataset, scale: float = DEFAULT_LOG_SCALE) -> SpotDataset:
    """The fixed three-step pipeline: L1 -> log -> smooth."""
    return neighborhood_smooth(log_transform(l1_normalize(ds), scale))


def filter_gene_list(ds: SpotDataset, genes: Iterable[str]) -> SpotDataset:
    """Restrict the gene axis to genes also in ``genes``, keeping dataset order."""
    wanted = set(genes)
    keep = [j for j, g in enumerate(ds.gene_ids) if g in wanted]
    if not keep:
        raise ValidationError("gene list does not intersect the dataset's genes")
    return ds.with_expression(ds.expression[:, keep], [ds.gene_ids[j] for j in keep])


def select_top_expressed(ds: SpotDataset, k: int) -> list[str]:
    """The ``k`` genes with the largest total expression; ties by gene id."""
    m = len(ds.gene_ids)
    if not 1 <= k <= m:
        raise ValidationError(f"k must be in [1, {m}], got {k}")
    totals = ds.expression.sum(axis=0)
    order = sorted(range(m), key=lambda j: (-totals[j], ds.gene_ids[j]))
    return [ds.gene_ids[j] for j in order[:k]]


# --------------------------------------------------------------------------
# CSV directory format


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise ValidationError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvParseError(path, 1, 1, "empty file")
    return rows[0], rows[1:]


def _float_block(path, header, rows, first_col=0) -> np.ndarray:
    width = len(header) - first_col
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise CsvParseError(path, i + 2, len(row) + 1,
                                f"expected {len(header)} fields, got {len(row)}")
        for j in range(width):
            try:
                out[i, j] = float(row[first_col + j])
            except ValueError:
                raise CsvParseError(path, i + 2, first_col + j + 1,
                                    f"not a number: {row[first_col + j]!r}") from None
    return out


def read_gene_list(path) -> list[str]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if not ids:
        raise ValidationError(f"{path}: gene list is empty")
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: gene list has duplicate ids")
    return ids


def write_gene_list(path, ids: Sequence[str]):
    Path(path).write_text("".join(f"{g}\n" for g in ids), encoding="utf-8")


def read_dataset(directory) -> SpotDataset:
    d = Path(directory)
    spots_path = d / "spots.csv"
    header, rows = _read_csv(spots_path)
    if [h.strip() for h in header] != ["spot_id", "x", "y"]:
        raise CsvParseError(spots_path, 1, 1, f"expected header spot_id,x,y, got {header}")
    ids, coords = [], []
    for i, row in enumerate(rows):
        if len(row) != 3:
            raise CsvParseError(spots_path, i + 2, len(row) + 1, "expected 3 fields")
        ids.append(row[0])
        for j in (1, 2):
            try:
                coords.append(int(row[j]))
            except ValueError:
                raise CsvParseError(spots_path, i + 2, j + 1,
                                    f"not an integer: {row[j]!r}") from None
    expr_path = d / "expression.csv"
    genes, erows = _read_csv(expr_path)
    expression = _float_block(expr_path, genes, erows)
    img_path = d / "image_features.csv"
    iheader, irows = _read_csv(img_path)
    feats = _float_block(img_path, iheader, irows)
    for path, block in ((expr_path, expression), (img_path, feats)):
        if len(block) != len(ids):
            raise CsvParseError(path, len(block) + 2, 1,
                                f"{len(block)} rows but spots.csv has {len(ids)}")
    return SpotDataset(ids, np.array(coords).reshape(-1, 2), expression, feats, genes)


def write_dataset(ds: SpotDataset, directory, gene_list: Sequence[str] | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "spots.csv", ["spot_id", "x", "y"],
               ([s, int(x), int(y)] for s, (x, y) in zip(ds.spot_ids, ds.coords)))
    _write_csv(d / "expression.csv", ds.gene_ids,
               ([_fmt(v) for v in row] for row in ds.expression))
    _write_csv(d / "image_features.csv", [f"f{j}" for j in range(ds.image_dim)],
               ([_fmt(v) for v in row] for row in ds.image_features))
    if gene_list is not None:
        write_gene_list(d / "gene_list.txt", gene_list)
