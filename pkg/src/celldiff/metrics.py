"""Perturbation-prediction metrics: expression accuracy and DE-pattern agreement.

Conventions
-----------
* A perturbation delta is ``mean(perturbed) - mean(control)`` with the same
  control cells for truth and prediction.
* DE calls use a per-gene Wilcoxon rank-sum test and Benjamini-Hochberg
  adjustment; a gene is significant when ``p_adj < 0.05``.
* Per-perturbation values that are undefined (zero variance, empty DE set,
  single-class labels) are NaN, excluded from means and counted as skipped.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

LOGFC_EPS = 1e-8
ALPHA = 0.05
EXACT_MAX_N = 10

DISTANCES = ("l1", "l2", "cosine")
PER_PERT_METRICS = (
    "R2", "PDS_L1", "PDS_L2", "PDS_cos", "PDCorr", "MAE", "MSE",
    "DEOver", "DEPrec", "DirAgr", "LFCSpear", "AUROC", "AUPRC",
)
LOWER_IS_BETTER = ("MAE", "MSE")


# --------------------------------------------------------------------------
# expression accuracy


def pseudobulk_delta(pert, ctrl) -> np.ndarray:
    pert = np.atleast_2d(np.asarray(pert, dtype=np.float64))
    ctrl = np.atleast_2d(np.asarray(ctrl, dtype=np.float64))
    if pert.shape[0] == 0 or ctrl.shape[0] == 0:
        raise ValueError("pseudobulk of an empty cell set")
    if pert.shape[1] != ctrl.shape[1]:
        raise ValueError("perturbed and control cells have different gene counts")
    return pert.mean(axis=0) - ctrl.mean(axis=0)


def _distance(a: np.ndarray, B: np.ndarray, kind: str) -> np.ndarray:
    if kind == "l1":
        return np.abs(B - a).sum(axis=1)
    if kind == "l2":
        return np.sqrt(((B - a) ** 2).sum(axis=1))
    if kind == "cosine":
        na = np.linalg.norm(a)
        nb = np.linalg.norm(B, axis=1)
        denom = na * nb
        sim = np.divide(B @ a, denom, out=np.zeros(len(B)), where=denom > 0)
        return 1.0 - sim
    raise ValueError(f"unknown distance {kind!r}; choose from {DISTANCES}")


def _matched(pred: dict, true: dict) -> list:
    if set(pred) != set(true):
        raise ValueError(f"perturbation ids differ: {sorted(set(pred) ^ set(true))}")
    return sorted(pred)


def pds_ranks(pred: dict, true: dict, distance: str = "l1") -> dict:
    """Per-perturbation count of other truths strictly closer than the own truth."""
    ids = _matched(pred, true)
    if len(ids) < 2:
        raise ValueError("PDS needs at least two perturbations")
    T = np.array([true[i] for i in ids], dtype=np.float64)
    ranks = {}
    for j, lam in enumerate(ids):
        d = _distance(np.asarray(pred[lam], dtype=np.float64), T, distance)
        others = np.delete(d, j)
        ranks[lam] = int(np.sum(others < d[j]))
    return ranks


def pds(pred: dict, true: dict, distance: str = "l1") -> float:
    """``1 - mean_lambda(r_lambda) / M`` over matched perturbation deltas."""
    ranks = pds_ranks(pred, true, distance)
    M = len(ranks)
    return 1.0 - sum(ranks.values()) / M**2


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        return math.nan
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return math.nan
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def spearman(a, b) -> float:
    """Spearman correlation with average ranks for ties; NaN if either side is constant."""
    return pearson(stats.rankdata(a), stats.rankdata(b))


def r2_score(true_profile, pred_profile) -> float:
    y = np.asarray(true_profile, dtype=np.float64)
    yhat = np.asarray(pred_profile, dtype=np.float64)
    ss_tot = ((y - y.mean()) ** 2).sum()
    if ss_tot == 0:
        return math.nan
    return float(1.0 - ((y - yhat) ** 2).sum() / ss_tot)


def _mean_skip(values) -> tuple:
    arr = np.array([v for v in values], dtype=np.float64)
    ok = ~np.isnan(arr)
    return (float(arr[ok].mean()) if ok.any() else math.nan), int((~ok).sum())


def pdcorr(pred: dict, true: dict) -> tuple:
    """Mean Pearson of matched deltas and the number of undefined perturbations."""
    return _mean_skip(pearson(pred[i], true[i]) for i in _matched(pred, true))


def mae(pred: dict, true: dict) -> float:
    """Mean over perturbations of the L1 norm of the delta error."""
    return float(np.mean([np.abs(np.asarray(pred[i]) - true[i]).sum() for i in _matched(pred, true)]))


def mse(pred: dict, true: dict) -> float:
    """Mean over perturbations of the squared L2 norm of the delta error."""
    return float(np.mean([((np.asarray(pred[i]) - true[i]) ** 2).sum() for i in _matched(pred, true)]))


# --------------------------------------------------------------------------
# differential expression


def _exact_two_sided(pooled_ranks: np.ndarray, n1: int, r1_obs: float) -> float:
    n = len(pooled_ranks)
    expected = n1 * (n + 1) / 2.0
    dev_obs = abs(r1_obs - expected)
    hits = total = 0
    for combo in itertools.combinations(range(n), n1):
        total += 1
        if abs(pooled_ranks[list(combo)].sum() - expected) >= dev_obs - 1e-9:
            hits += 1
    return hits / total


def wilcoxon_rank_sum(x, y, exact: bool | None = None) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact permutation enumeration when ``len(x) + len(y) <= 10`` (or
    ``exact=True``); otherwise the normal approximation with tie and
    continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 1 or y.size < 1:
        raise ValueError("both samples need at least one value")
    n1, n2 = x.size, y.size
    ranks = stats.rankdata(np.concatenate([x, y]))
    r1 = ranks[:n1].sum()
    if exact is None:
        exact = n1 + n2 <= EXACT_MAX_N
    if exact:
        return _exact_two_sided(ranks, n1, r1)
    return float(_normal_p(np.array([r1]), n1, n2, _tie_term(ranks[:, None]))[0])


def _tie_term(ranks: np.ndarray) -> np.ndarray:
    """Sum of (t^3 - t) over tie groups, per column of a rank matrix."""
    out = np.zeros(ranks.shape[1])
    srt = np.sort(ranks, axis=0)
    for j in range(ranks.shape[1]):
        _, counts = np.unique(srt[:, j], return_counts=True)
        out[j] = float(((counts.astype(np.float64) ** 3) - counts).sum())
    return out


def _normal_p(r1: np.ndarray, n1: int, n2: int, ties: np.ndarray) -> np.ndarray:
    n = n1 + n2
    u = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    p = np.ones_like(u)
    ok = var > 0
    z = (np.abs(u[ok] - mu) - 0.5) / np.sqrt(var[ok])
    z = np.maximum(z, 0.0)
    p[ok] = np.minimum(2.0 * special.ndtr(-z), 1.0)
    return p


def wilcoxon_genes(pert, ctrl) -> np.ndarray:
    """Per-gene two-sided rank-sum p-values for cells-by-genes matrices."""
    pert = np.asarray(pert, dtype=np.float64)
    ctrl = np.asarray(ctrl, dtype=np.float64)
    n1, n2 = pert.shape[0], ctrl.shape[0]
    if n1 + n2 <= EXACT_MAX_N:
        return np.array([wilcoxon_rank_sum(pert[:, g], ctrl[:, g]) for g in range(pert.shape[1])])
    ranks = stats.rankdata(np.vstack([pert, ctrl]), axis=0)
    return _normal_p(ranks[:n1].sum(axis=0), n1, n2, _tie_term(ranks))


def bh_adjust(p) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in the input order."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if n == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * n / np.arange(1, n + 1)
    q = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(n)
    out[order] = np.minimum(q, 1.0)
    return out


@dataclass
class DEResult:
    pvals: np.ndarray
    padj: np.ndarray
    logfc: np.ndarray
    significant: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        """``-log10(p_adj)``, floored at the smallest positive double."""
        return -np.log10(np.maximum(self.padj, np.finfo(float).tiny))

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())


def de_analysis(pert, ctrl, alpha: float = ALPHA) -> DEResult:
    pert = np.atleast_2d(np.asarray(pert, dtype=np.float64))
    ctrl = np.atleast_2d(np.asarray(ctrl, dtype=np.float64))
    p = wilcoxon_genes(pert, ctrl)
    padj = bh_adjust(p)
    logfc = np.log2((pert.mean(axis=0) + LOGFC_EPS) / (ctrl.mean(axis=0) + LOGFC_EPS))
    return DEResult(pvals=p, padj=padj, logfc=logfc, significant=padj < alpha)


def _top_k(de: DEResult, k: int) -> set:
    idx = np.flatnonzero(de.significant)
    order = idx[np.lexsort((idx, -np.abs(de.logfc[idx])))]
    return set(order[:k].tolist())


def de_overlap_precision(true: DEResult, pred: DEResult) -> tuple:
    """(DEOver, DEPrec) for one perturbation; NaN where the normalising k is 0.

    DEOver uses ``k = |truth DE set|`` on both sides; DEPrec uses
    ``k = |predicted DE set|``. Each side's top-k is ranked by ``|logFC|``
    among its significant genes.
    """
    k_true, k_pred = true.n_significant, pred.n_significant
    over = prec = math.nan
    if k_true > 0:
        over = len(_top_k(true, k_true) & _top_k(pred, k_true)) / k_true
    if k_pred > 0:
        top_pred = _top_k(pred, k_pred)
        prec = len(_top_k(true, k_pred) & top_pred) / len(top_pred)
    return over, prec


def dir_agreement(true: DEResult, pred: DEResult) -> float:
    shared = np.flatnonzero(true.significant & pred.significant)
    if shared.size == 0:
        return math.nan
    return float(np.mean(np.sign(true.logfc[shared]) == np.sign(pred.logfc[shared])))


def lfc_spearman(true: DEResult, pred: DEResult) -> float:
    idx = np.flatnonzero(true.significant)
    if idx.size < 2:
        return math.nan
    return spearman(true.logfc[idx], pred.logfc[idx])


def auroc(labels, scores) -> float:
    """Rank-statistic AUROC; tied scores count one half."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    P, N = labels.sum(), (~labels).sum()
    if P == 0 or N == 0:
        return math.nan
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - P * (P + 1) / 2.0) / (P * N))


def auprc(labels, scores) -> float:
    """Average precision: step-interpolated area under the precision-recall curve."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    P = labels.sum()
    if P == 0 or P == labels.size:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / P
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auroc_auprc(labels, scores) -> tuple:
    return auroc(labels, scores), auprc(labels, scores)


def effect_size_corr(true_counts, pred_counts) -> float:
    """Spearman over perturbations of DE-gene counts; NaN when undefined."""
    if len(true_counts) < 2:
        raise ValueError("effect-size correlation needs at least two perturbations")
    return spearman(true_counts, pred_counts)


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    """Per-perturbation and aggregate metric values for one prediction source."""

    method: str
    per_perturbation: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    es: float = math.nan
    de_counts: dict = field(default_factory=dict)
    score_vectors: dict = field(default_factory=dict)

    def value(self, metric: str) -> float:
        return self.aggregate.get(metric, math.nan)

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        return {
            "method": self.method,
            "aggregate": {k: clean(v) for k, v in self.aggregate.items()},
            "ES": clean(self.es),
            "skipped": {"conditions": self.missing, "per_metric": self.skipped},
            "de_counts": self.de_counts,
            "per_perturbation": {
                k: {m: clean(v) for m, v in vals.items()} for k, vals in self.per_perturbation.items()
            },
        }

    def save(self, prefix) -> tuple:
        """Write ``<prefix>.json`` and ``<prefix>.tsv``."""
        prefix = str(prefix)
        jpath, tpath = Path(prefix + ".json"), Path(prefix + ".tsv")
        jpath.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(tpath, "w") as fh:
            fh.write("\t".join(("perturbation",) + PER_PERT_METRICS) + "\n")
            for k in sorted(self.per_perturbation):
                vals = self.per_perturbation[k]
                fh.write("\t".join([k] + [_fmt(vals.get(m, math.nan)) for m in PER_PERT_METRICS]) + "\n")
        return jpath, tpath

    @classmethod
    def load(cls, path) -> "MetricReport":
        data = json.loads(Path(path).read_text())

        def f(v):
            return math.nan if v is None else v

        return cls(
            method=data["method"],
            per_perturbation={k: {m: f(v) for m, v in d.items()} for k, d in data["per_perturbation"].items()},
            aggregate={k: f(v) for k, v in data["aggregate"].items()},
            skipped=data.get("skipped", {}).get("per_metric", {}),
            missing=data.get("skipped", {}).get("conditions", []),
            es=f(data.get("ES")),
            de_counts=data.get("de_counts", {}),
        )


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.9g}"


def condition_key(cond) -> str:
    return "|".join(str(c) for c in cond) if isinstance(cond, tuple) else str(cond)


def evaluate(
    truth: dict,
    pred: dict,
    ctrl: dict,
    method: str = "model",
    n_ctrl_match: bool = True,
    seed: int = 0,
) -> MetricReport:
    """Score predicted cells against ground-truth cells.

    ``truth``, ``pred`` and ``ctrl`` map a perturbation key to cell matrices;
    ``ctrl[key]`` holds the control cells for that key's context. Keys absent
    from ``pred`` are reported as missing. When ``n_ctrl_match`` is set the
    control cells are subsampled (fixed seed) to the perturbed cell count so
    truth and prediction share exactly the same controls.
    """
    rng = np.random.default_rng(seed)
    keys = sorted(k for k in truth if k in pred)
    missing = sorted(k for k in truth if k not in pred)
    report = MetricReport(method=method, missing=[condition_key(k) for k in missing])
    if not keys:
        return report
    d_true, d_pred, per = {}, {}, {}
    for k in keys:
        t_cells = np.asarray(truth[k], dtype=np.float64)
        c_cells = np.asarray(ctrl[k], dtype=np.float64)
        p_cells = np.asarray(pred[k], dtype=np.float64)
        if n_ctrl_match and c_cells.shape[0] != t_cells.shape[0]:
            c_cells = c_cells[rng.choice(c_cells.shape[0], size=t_cells.shape[0], replace=c_cells.shape[0] < t_cells.shape[0])]
        d_true[k] = pseudobulk_delta(t_cells, c_cells)
        d_pred[k] = pseudobulk_delta(p_cells, c_cells)
        de_t, de_p = de_analysis(t_cells, c_cells), de_analysis(p_cells, c_cells)
        over, prec = de_overlap_precision(de_t, de_p)
        au_roc, au_prc = auroc_auprc(de_t.significant, de_p.scores)
        per[k] = {
            "R2": r2_score(t_cells.mean(axis=0), p_cells.mean(axis=0)),
            "PDCorr": pearson(d_pred[k], d_true[k]),
            "MAE": float(np.abs(d_pred[k] - d_true[k]).sum()),
            "MSE": float(((d_pred[k] - d_true[k]) ** 2).sum()),
            "DEOver": over,
            "DEPrec": prec,
            "DirAgr": dir_agreement(de_t, de_p),
            "LFCSpear": lfc_spearman(de_t, de_p),
            "AUROC": au_roc,
            "AUPRC": au_prc,
        }
        report.de_counts[condition_key(k)] = [de_t.n_significant, de_p.n_significant]
        report.score_vectors[condition_key(k)] = (de_t.scores, de_p.scores)
    M = len(keys)
    if M >= 2:
        for dist, name in zip(DISTANCES, ("PDS_L1", "PDS_L2", "PDS_cos")):
            ranks = pds_ranks(d_pred, d_true, dist)
            for k in keys:
                per[k][name] = 1.0 - ranks[k] / M
        counts = [report.de_counts[condition_key(k)] for k in keys]
        report.es = effect_size_corr([c[0] for c in counts], [c[1] for c in counts])
    for metric in PER_PERT_METRICS:
        vals = [per[k].get(metric, math.nan) for k in keys]
        report.aggregate[metric], report.skipped[metric] = _mean_skip(vals)
    report.per_perturbation = {condition_key(k): per[k] for k in keys}
    return report


def win_rate(a: MetricReport, b: MetricReport, metric: str) -> tuple:
    """``(rate, wins, compared)``: share of perturbations where ``a`` is at least as good as ``b``."""
    shared = sorted(set(a.per_perturbation) & set(b.per_perturbation))
    wins = n = 0
    for k in shared:
        va, vb = a.per_perturbation[k].get(metric, math.nan), b.per_perturbation[k].get(metric, math.nan)
        if va is None or vb is None or math.isnan(va) or math.isnan(vb):
            continue
        n += 1
        wins += (va <= vb) if metric in LOWER_IS_BETTER else (va >= vb)
    return (wins / n if n else math.nan), wins, n
