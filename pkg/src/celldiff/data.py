"""Synthetic perturbation data, preprocessing, batch sampling and TSV storage.

Synthetic cells are generated so that one observed condition (context,
perturbation) corresponds to several distinct cell distributions: every
replicate draws its own latent shift of the condition mean.
"""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONTROL = "control"
META_COLUMNS = ("cell_id", "context", "perturbation", "dose", "replicate", "split")
SPLITS = ("train", "valid", "test")
TARGET_SUM = 1e4


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Expression matrix (float32, N x G) with per-cell metadata columns."""

    X: np.ndarray
    genes: list
    meta: dict

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        for col in META_COLUMNS:
            if col not in self.meta:
                raise DataFormatError(f"missing metadata column {col!r}")
        for col, values in self.meta.items():
            if len(values) != self.X.shape[0]:
                raise DataFormatError(f"metadata column {col!r} has {len(values)} rows, matrix has {self.X.shape[0]}")
        if self.X.ndim != 2 or self.X.shape[1] != len(self.genes):
            raise DataFormatError("matrix columns must match the gene list")

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_genes(self) -> int:
        return self.X.shape[1]

    @property
    def contexts(self) -> list:
        return sorted(set(self.meta["context"]))

    @property
    def perturbations(self) -> list:
        """Perturbation vocabulary with the control label first."""
        names = sorted(set(self.meta["perturbation"]) - {CONTROL})
        return [CONTROL] + names

    def mask(self, context=None, perturbation=None, split=None, dose=None) -> np.ndarray:
        m = np.ones(self.n_cells, dtype=bool)
        for col, want in (("context", context), ("perturbation", perturbation), ("split", split), ("dose", dose)):
            if want is None:
                continue
            vals = np.asarray(self.meta[col])
            m &= np.isin(vals, list(want)) if isinstance(want, (list, tuple, set)) else vals == want
        return m

    def conditions(self, split=None, include_control=False) -> list:
        """Sorted (context, perturbation) pairs present in ``split``."""
        m = self.mask(split=split)
        pairs = set(zip(np.asarray(self.meta["context"])[m], np.asarray(self.meta["perturbation"])[m]))
        if not include_control:
            pairs = {p for p in pairs if p[1] != CONTROL}
        return sorted(pairs)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], list(self.genes), {k: np.asarray(v)[mask] for k, v in self.meta.items()})

    def select_genes(self, idx) -> "Dataset":
        return Dataset(self.X[:, idx], [self.genes[i] for i in idx], dict(self.meta))


@dataclass
class SynthConfig:
    n_genes: int = 64
    n_contexts: int = 8
    n_perturbations: int = 20
    n_replicates: int = 2
    cells_per_replicate: int = 50
    control_replicates: int = 3
    control_cells_per_replicate: int = 60
    base_low: float = 0.1
    base_high: float = 0.6
    context_scale: float = 0.15
    effect_rank: int = 3
    effect_scale: float = 0.25
    latent_scale: float = 0.04
    cell_noise: float = 0.1
    zero_inflation: float = 0.2
    n_doses: int = 1
    heldout_contexts: int = 4
    holdout_frac: float = 0.3
    valid_frac: float = 0.1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.zero_inflation < 1.0:
            raise ValueError("zero_inflation must lie in [0, 1)")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ValueError("holdout_frac must lie in (0, 1)")


def _split_counts(cfg: SynthConfig) -> tuple:
    n_test = int(np.ceil(cfg.holdout_frac * cfg.n_perturbations))
    n_valid = int(np.ceil(cfg.valid_frac * cfg.n_perturbations)) if cfg.valid_frac > 0 else 0
    if n_test + n_valid >= cfg.n_perturbations:
        raise ValueError(
            f"infeasible split: {n_test} test + {n_valid} valid holdouts leave no training perturbations "
            f"out of {cfg.n_perturbations}"
        )
    if not 1 <= cfg.heldout_contexts <= cfg.n_contexts:
        raise ValueError("heldout_contexts must be between 1 and n_contexts")
    return n_test, n_valid


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Simulate a perturbation screen with replicate-level latent variability.

    Condition mean = context base + low-rank perturbation effect (scaled by
    dose level); each replicate adds a latent shift ``z ~ N(0, latent_scale^2 I)``;
    cells are ``relu(mean + noise)`` followed by independent zero-masking.
    In the last ``heldout_contexts`` contexts a ``holdout_frac`` share of the
    perturbations is held out for test and ``valid_frac`` for validation.
    """
    n_test, n_valid = _split_counts(cfg)
    rng = np.random.default_rng(cfg.seed)
    G = cfg.n_genes
    base = rng.uniform(cfg.base_low, cfg.base_high, size=G)
    ctx_means = base + cfg.context_scale * rng.standard_normal((cfg.n_contexts, G))
    loadings = rng.standard_normal((cfg.n_perturbations, cfg.effect_rank))
    programs = rng.standard_normal((cfg.effect_rank, G)) / np.sqrt(cfg.effect_rank)
    effects = cfg.effect_scale * loadings @ programs

    ctx_names = [f"ctx{c:02d}" for c in range(cfg.n_contexts)]
    pert_names = [f"pert{p:02d}" for p in range(cfg.n_perturbations)]
    split_of = {}
    for c in range(cfg.n_contexts - cfg.heldout_contexts, cfg.n_contexts):
        order = rng.permutation(cfg.n_perturbations)
        for p in order[:n_test]:
            split_of[(c, p)] = "test"
        for p in order[n_test:n_test + n_valid]:
            split_of[(c, p)] = "valid"

    blocks, meta = [], {k: [] for k in META_COLUMNS}

    def emit(c, pert_name, mean, dose, n_rep, n_cells, split):
        for r in range(n_rep):
            shifted = mean + cfg.latent_scale * rng.standard_normal(G)
            cells = np.maximum(shifted + cfg.cell_noise * rng.standard_normal((n_cells, G)), 0.0)
            cells[rng.random(cells.shape) < cfg.zero_inflation] = 0.0
            blocks.append(cells)
            start = len(meta["cell_id"])
            meta["cell_id"].extend(f"c{start + i:06d}" for i in range(n_cells))
            meta["context"].extend([ctx_names[c]] * n_cells)
            meta["perturbation"].extend([pert_name] * n_cells)
            meta["dose"].extend([dose] * n_cells)
            meta["replicate"].extend([r] * n_cells)
            meta["split"].extend([split] * n_cells)

    for c in range(cfg.n_contexts):
        emit(c, CONTROL, ctx_means[c], 0, cfg.control_replicates, cfg.control_cells_per_replicate, "train")
        for p in range(cfg.n_perturbations):
            dose = p % cfg.n_doses
            level = (dose + 1) / cfg.n_doses
            emit(c, pert_names[p], ctx_means[c] + level * effects[p], dose, cfg.n_replicates,
                 cfg.cells_per_replicate, split_of.get((c, p), "train"))

    X = np.concatenate(blocks).astype(np.float32)
    meta = {k: np.asarray(v) for k, v in meta.items()}
    meta["dose"] = meta["dose"].astype(np.int64)
    meta["replicate"] = meta["replicate"].astype(np.int64)
    return Dataset(X, [f"g{g:03d}" for g in range(G)], meta)


def preprocess(counts) -> np.ndarray:
    """Library-size normalise to 1e4 per cell, ``log1p``, then divide by 10."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("raw counts must be nonnegative")
    totals = counts.sum(axis=1, keepdims=True)
    scale = np.divide(TARGET_SUM, totals, out=np.zeros_like(totals), where=totals > 0)
    return np.log1p(counts * scale) / 10.0


def select_hvg(matrix, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-variance genes (ties: lower index first)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    G = matrix.shape[1]
    if k > G:
        raise ValueError(f"cannot select {k} genes out of {G}")
    var = matrix.var(axis=0)
    order = np.lexsort((np.arange(G), -var))
    return order[:k]


def sample_batch(dataset: Dataset, m: int, rng, **filters) -> np.ndarray:
    """Draw ``m`` cells matching ``filters``; with replacement only if fewer are available."""
    idx = np.flatnonzero(dataset.mask(**filters))
    if idx.size == 0:
        raise ValueError(f"no cells match {filters}")
    return dataset.X[sample_rows(idx, m, rng)].astype(np.float64)


def sample_rows(idx: np.ndarray, m: int, rng) -> np.ndarray:
    return rng.choice(idx, size=m, replace=idx.size < m)


def downsample(dataset: Dataset, frac: float, seed: int = 0, split: str = "train", min_cells: int = 2) -> Dataset:
    """Keep a ``frac`` share of the cells in ``split`` (per condition, at least ``min_cells``).

    Cells of other splits are untouched, so validation and test stay comparable.
    """
    if not 0.0 < frac <= 1.0:
        raise ValueError("downsampling fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = ~dataset.mask(split=split)
    ctx = np.asarray(dataset.meta["context"])
    pert = np.asarray(dataset.meta["perturbation"])
    for c, p in dataset.conditions(split=split, include_control=True):
        rows = np.flatnonzero(dataset.mask(split=split) & (ctx == c) & (pert == p))
        n = min(rows.size, max(min_cells, int(round(frac * rows.size))))
        keep[rng.choice(rows, size=n, replace=False)] = True
    return dataset.subset(keep)


# --------------------------------------------------------------------------
# storage


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def dataset_paths(prefix) -> tuple:
    prefix = str(prefix)
    gz = ".gz" if prefix.endswith(".gz") else ""
    prefix = prefix[:-3] if gz else prefix
    return Path(f"{prefix}.matrix.tsv{gz}"), Path(f"{prefix}.meta.tsv{gz}")


def save_dataset(dataset: Dataset, prefix) -> tuple:
    """Write ``<prefix>.matrix.tsv`` and ``<prefix>.meta.tsv`` (append ``.gz`` to compress)."""
    if dataset.n_cells == 0:
        raise DataFormatError("refusing to save an empty dataset")
    mpath, tpath = dataset_paths(prefix)
    with _open(mpath, "w") as fh:
        fh.write("\t".join(dataset.genes) + "\n")
        np.savetxt(fh, dataset.X, fmt="%.9g", delimiter="\t")
    cols = list(META_COLUMNS) + [c for c in dataset.meta if c not in META_COLUMNS]
    with _open(tpath, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in zip(*(dataset.meta[c] for c in cols)):
            fh.write("\t".join(str(v) for v in row) + "\n")
    return mpath, tpath


def load_dataset(prefix) -> Dataset:
    mpath, tpath = dataset_paths(prefix)
    with _open(mpath, "r") as fh:
        header = fh.readline().rstrip("\n")
        if not header:
            raise DataFormatError(f"{mpath}:1: missing gene header")
        genes = header.split("\t")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(genes):
                raise DataFormatError(f"{mpath}:{lineno}: expected {len(genes)} values, found {len(parts)}")
            try:
                rows.append(np.array(parts, dtype=np.float32))
            except ValueError as exc:
                raise DataFormatError(f"{mpath}:{lineno}: {exc}") from exc
    X = np.vstack(rows) if rows else np.zeros((0, len(genes)), np.float32)
    with _open(tpath, "r") as fh:
        cols = fh.readline().rstrip("\n").split("\t")
        missing = [c for c in META_COLUMNS if c not in cols]
        if missing:
            raise DataFormatError(f"{tpath}:1: malformed header, missing {missing}")
        records = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(cols):
                raise DataFormatError(f"{tpath}:{lineno}: expected {len(cols)} fields, found {len(parts)}")
            records.append(parts)
    if len(records) != X.shape[0]:
        raise DataFormatError(
            f"row-count mismatch: {mpath} has {X.shape[0]} cells, {tpath} has {len(records)} rows "
            f"(expected {len(records)}, found {X.shape[0]})"
        )
    meta = {}
    for j, c in enumerate(cols):
        vals = [r[j] for r in records]
        meta[c] = np.array(vals, dtype=np.int64) if c in ("dose", "replicate") else np.array(vals)
    return Dataset(X, genes, meta)
