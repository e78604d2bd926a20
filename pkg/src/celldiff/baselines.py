"""Non-generative reference predictors: group means and a ridge linear model."""

from __future__ import annotations

import logging

import numpy as np

from .data import CONTROL, Dataset

log = logging.getLogger(__name__)

MEAN_LEVELS = ("perturbation", "cell-type", "batch", "overall")


class MeanBaseline:
    """Predict every cell of a target condition as a training-set group mean.

    Levels: ``perturbation`` (same perturbation, any context), ``cell-type``
    (all perturbed cells of the context), ``batch`` (perturbed cells sharing
    the replicate/batch id) and ``overall``. Groups unseen in training fall
    back to the overall perturbed-cell mean.
    """

    def __init__(self, train: Dataset, level: str = "perturbation"):
        if level not in MEAN_LEVELS:
            raise ValueError(f"unknown level {level!r}; valid options: {', '.join(MEAN_LEVELS)}")
        self.level = level
        pert = train.subset(train.mask(split="train") & (np.asarray(train.meta["perturbation"]) != CONTROL))
        X = pert.X.astype(np.float64)
        self.overall = X.mean(axis=0)
        col = {"perturbation": "perturbation", "cell-type": "context", "batch": _batch_column(pert)}.get(level)
        self.means = {}
        if col is not None:
            keys = np.asarray(pert.meta[col])
            for key in np.unique(keys):
                self.means[key] = X[keys == key].mean(axis=0)
        self._col = col

    def group_mean(self, context, perturbation, batch=None) -> np.ndarray:
        key = {"perturbation": perturbation, "cell-type": context, "batch": batch}.get(self.level)
        return self.means.get(key, self.overall) if key is not None else self.overall

    def predict(self, conditions, n_cells: int | dict, batches: dict | None = None) -> dict:
        """Map each (context, perturbation) to ``n_cells`` identical predicted rows."""
        out = {}
        for cond in conditions:
            n = n_cells[cond] if isinstance(n_cells, dict) else n_cells
            if self.level == "batch" and batches is not None and cond in batches:
                rows = [self.group_mean(*cond, batch=b) for b in batches[cond]]
                out[cond] = np.array(rows[:n])
            else:
                out[cond] = np.tile(self.group_mean(*cond), (n, 1))
        return out


def _batch_column(ds: Dataset) -> str:
    return "batch" if "batch" in ds.meta else "replicate"


def _pseudobulk_table(ds: Dataset):
    ctx = np.asarray(ds.meta["context"])
    pert = np.asarray(ds.meta["perturbation"])
    conds, means = [], []
    for key in sorted(set(zip(ctx, pert))):
        m = (ctx == key[0]) & (pert == key[1])
        conds.append(key)
        means.append(ds.X[m].astype(np.float64).mean(axis=0))
    return conds, np.array(means)


class LinearBaseline:
    """Ridge regression from condition features to the perturbed pseudobulk.

    Features are ``[context one-hot, perturbation one-hot, control pseudobulk]``
    with an unpenalised intercept; the fit is the closed-form ridge solution.
    """

    def __init__(self, data: Dataset, ridge: float = 1e-6, ridge_floor: float = 1e-10):
        if ridge < ridge_floor:
            log.warning("ridge %.3g below floor %.3g; using the floor", ridge, ridge_floor)
            ridge = ridge_floor
        self.ridge = ridge
        self.contexts = data.contexts
        self.perturbations = data.perturbations
        ctrl = data.subset(data.mask(perturbation=CONTROL))
        self.ctrl_means = {c: ctrl.X[np.asarray(ctrl.meta["context"]) == c].astype(np.float64).mean(axis=0)
                           for c in sorted(set(ctrl.meta["context"]))}
        train = data.subset(data.mask(split="train") & (np.asarray(data.meta["perturbation"]) != CONTROL))
        conds, Y = _pseudobulk_table(train)
        Xf = np.array([self.features(c) for c in conds])
        self.x_mean = Xf.mean(axis=0)
        self.y_mean = Y.mean(axis=0)
        Xc, Yc = Xf - self.x_mean, Y - self.y_mean
        A = Xc.T @ Xc + ridge * np.eye(Xc.shape[1])
        self.coef = np.linalg.solve(A, Xc.T @ Yc)

    def features(self, cond) -> np.ndarray:
        c, p = cond
        fc = np.zeros(len(self.contexts))
        fp = np.zeros(len(self.perturbations))
        if c in self.contexts:
            fc[self.contexts.index(c)] = 1.0
        if p in self.perturbations:
            fp[self.perturbations.index(p)] = 1.0
        return np.concatenate([fc, fp, self.ctrl_means[c]])

    def predict_pseudobulk(self, cond) -> np.ndarray:
        return self.y_mean + (self.features(cond) - self.x_mean) @ self.coef

    def predict(self, conditions, n_cells: int | dict) -> dict:
        out = {}
        for cond in conditions:
            n = n_cells[cond] if isinstance(n_cells, dict) else n_cells
            out[cond] = np.tile(np.maximum(self.predict_pseudobulk(cond), 0.0), (n, 1))
        return out
