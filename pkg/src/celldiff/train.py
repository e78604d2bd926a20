"""Training loop for the conditional cell-batch diffusion model.

Objective per stacked batch item: ``ED(B0, B_theta) + lambda_mse * mean_j |x_j - x_j^theta|^2``,
averaged over the items of a step. AdamW with a warmup + cosine schedule,
global-norm clipping and a parameter EMA that evaluation always reads.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion as dfn
from .data import CONTROL, Dataset, sample_rows
from .kernels import energy_distance
from .metrics import MetricReport, evaluate
from .model import (
    ConditionBatch,
    Denoiser,
    ModelConfig,
    init_params,
    denoise,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)

log = logging.getLogger(__name__)

IO_LAYERS = ("in_pert.W", "in_pert.b", "in_ctrl.W", "in_ctrl.b", "out.W", "out.b")


@dataclass
class TrainConfig:
    lambda_mse: float = 1.0
    lambda_ed: float = 1.0
    p_drop: float = 0.1
    p_sc: float = 0.5
    lr: float = 2e-3
    warmup: int = 200
    steps: int = 2000
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    ema_decay: float = 0.99
    ema_interval: int = 10
    eval_interval: int = 200
    conditions_per_step: int = 8
    batch_cells: int = 32
    mode: str = "perturbation"
    select_metric: str = "PDCorr"
    seed: int = 0

    def __post_init__(self):
        for name in ("p_drop", "p_sc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.mode not in ("perturbation", "marginal-pretrain"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr``, cosine decay to ``0.1 * cfg.lr`` at ``cfg.steps``, then flat."""
    peak = cfg.lr
    if cfg.warmup > 0 and step < cfg.warmup:
        return peak * step / cfg.warmup
    if step >= cfg.steps:
        return 0.1 * peak
    span = max(cfg.steps - cfg.warmup, 1)
    frac = (step - cfg.warmup) / span
    return peak * (0.55 + 0.45 * math.cos(math.pi * frac))


def optimizer_step(params: dict, grads: dict, opt: OptimizerState, lr: float,
                   betas=(0.9, 0.98), weight_decay: float = 1e-2, eps: float = 1e-8) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for k, p in params.items():
        g = grads[k]
        m = opt.m[k]
        v = opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def ema_update(params: dict, shadow: dict, decay: float, step: int, interval: int) -> dict:
    if interval > 0 and step % interval == 0:
        for k, p in params.items():
            shadow[k] *= decay
            shadow[k] += (1.0 - decay) * p
    return shadow


def total_loss(B0, B_theta, lambda_mse: float = 1.0, lambda_ed: float = 1.0):
    """Return ``(total, energy_distance, mse)``.

    Tensors of shape (B, m, G) give per-item components and a scalar total
    averaged over items; numpy (m, G) inputs give floats. ``lambda_ed = 0``
    drops the distributional term (MSE-only ablation).
    """
    if isinstance(B_theta, ad.Tensor):
        rec = B_theta.record
        B0 = B0 if isinstance(B0, ad.Tensor) else rec.constant(B0)
        ed = energy_distance(B0, B_theta)
        diff = B0 - B_theta
        mse = (diff * diff).sum(axis=-1).mean(axis=-1)
        if lambda_ed and lambda_mse:
            total = (ed * lambda_ed + mse * lambda_mse).mean()
        elif lambda_mse:
            total = (mse * lambda_mse).mean()
        else:
            total = (ed * lambda_ed).mean()
        return total, ed, mse
    B0 = np.asarray(B0, dtype=np.float64)
    B_theta = np.asarray(B_theta, dtype=np.float64)
    ed = energy_distance(B0, B_theta)
    mse = float(((B0 - B_theta) ** 2).sum(axis=-1).mean())
    return lambda_ed * ed + lambda_mse * mse, ed, mse


def select_checkpoint(history: list, metric: str = "PDCorr") -> int:
    """Step with the best validation ``metric`` (earliest on ties; lower-is-better for MAE/MSE)."""
    if not history:
        raise ValueError("no evaluations to select from")
    lower = metric in ("MAE", "MSE")
    best_step, best = None, None
    for step, report in history:
        v = report.value(metric) if isinstance(report, MetricReport) else report[metric]
        if v is None or math.isnan(v):
            continue
        if best is None or (v < best if lower else v > best):
            best_step, best = step, v
    return best_step if best_step is not None else history[0][0]


def loss_and_grads(params: dict, model_cfg: ModelConfig, x0, ctrl, cond: ConditionBatch, t, eps,
                   schedule: dfn.NoiseSchedule, lambda_mse: float = 1.0, use_sc: bool = False,
                   lambda_ed: float = 1.0):
    """Forward and backward pass for fixed noise draws.

    Returns ``(loss, ed, mse, grads)`` where ``ed`` and ``mse`` are per-item
    arrays. When ``use_sc`` is set, a first pass with an empty
    self-conditioning slot runs on the same record and its output enters the
    second pass through ``stop_gradient``.
    """
    rec = ad.Record(check_finite=False)
    P = {k: rec.input(v) for k, v in params.items()}
    xt = rec.constant(dfn.q_sample(x0, t, eps, schedule))
    xc = rec.constant(ctrl)
    sc = None
    if model_cfg.self_condition:
        if use_sc:
            sc = ad.stop_gradient(denoise(P, model_cfg, xt, None, xc, t, cond))
        else:
            sc = rec.constant(np.zeros_like(x0))
    pred = denoise(P, model_cfg, xt, sc, xc, t, cond)
    loss, ed, mse = total_loss(x0, pred, lambda_mse, lambda_ed)
    rec.mark_output(loss)
    names = list(params)
    grads = dict(zip(names, rec.backward(loss, wrt=[P[k] for k in names])))
    return float(loss.value), ed.value, mse.value, grads


def train_step(params: dict, opt: OptimizerState, batch, rng, cfg: TrainConfig, model_cfg: ModelConfig,
               schedule: dfn.NoiseSchedule) -> dict:
    """One AdamW update on ``batch = (x0, ctrl, cond)``; params and opt change in place.

    Draws, in order: per-item timesteps, Gaussian noise, the metadata-dropout
    mask and the self-conditioning coin. Returns the logged scalars.
    """
    x0, ctrl, cond = batch
    x0 = np.asarray(x0, dtype=np.float64)
    ctrl = np.asarray(ctrl, dtype=np.float64)
    if x0.shape != ctrl.shape or x0.ndim != 3:
        raise ValueError(f"target and control batches must share a (B, m, G) shape: {x0.shape} vs {ctrl.shape}")
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(B) < cfg.p_drop
    cond = replace(cond, null_context=np.asarray(cond.null_context) | drop,
                   null_perturbation=np.asarray(cond.null_perturbation) | drop)
    use_sc = bool(model_cfg.self_condition and rng.random() < cfg.p_sc)
    loss, ed, mse, grads = loss_and_grads(params, model_cfg, x0, ctrl, cond, t, eps, schedule, cfg.lambda_mse, use_sc,
                                           cfg.lambda_ed)
    if not math.isfinite(loss):
        raise ad.NonFiniteError(f"non-finite loss at step {opt.step + 1}: {loss}")
    norm = clip_grads(grads, cfg.clip_norm)
    lr = lr_at(opt.step + 1, cfg)
    optimizer_step(params, grads, opt, lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
    return {"step": opt.step, "lr": lr, "loss": loss, "ed": float(ed.mean()), "mse": float(mse.mean()),
            "grad_norm": norm}


def pretrain_step(params: dict, opt: OptimizerState, batch, rng, cfg: TrainConfig, model_cfg: ModelConfig,
                  schedule: dfn.NoiseSchedule) -> dict:
    """Marginal-pretraining update on ``batch = (x0, cond)``.

    The control stream is all zeros and the perturbation/dose slot always
    carries the null embedding, so only the context conditions the model.
    """
    x0, cond = batch
    x0 = np.asarray(x0, dtype=np.float64)
    cond = replace(cond, null_perturbation=np.ones(len(cond), bool))
    return train_step(params, opt, (x0, np.zeros_like(x0), cond), rng, cfg, model_cfg, schedule)


@dataclass
class Vocab:
    contexts: list
    perturbations: list
    n_doses: int = 1

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Vocab":
        return cls(ds.contexts, ds.perturbations, int(np.max(ds.meta["dose"])) + 1)

    def condition(self, context, perturbation, dose=0):
        return self.contexts.index(context), self.perturbations.index(perturbation), int(dose)

    def model_config(self, n_genes: int, **kw) -> ModelConfig:
        return ModelConfig(n_genes=n_genes, n_contexts=len(self.contexts),
                           n_perturbations=len(self.perturbations), n_doses=self.n_doses, **kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(**json.loads(Path(path).read_text()))


class ConditionIndex:
    """Row indices per training condition and control rows per context."""

    def __init__(self, ds: Dataset, vocab: Vocab, split="train", marginal: bool = False):
        ctx = np.asarray(ds.meta["context"])
        pert = np.asarray(ds.meta["perturbation"])
        dose = np.asarray(ds.meta["dose"])
        in_split = ds.mask(split=split)
        ctrl_rows = {c: np.flatnonzero((ctx == c) & (pert == CONTROL)) for c in vocab.contexts}
        self.ctrl_rows = ctrl_rows = {c: r for c, r in ctrl_rows.items() if r.size}
        self.items = []
        if marginal:
            for c in vocab.contexts:
                rows = np.flatnonzero(in_split & (ctx == c))
                if rows.size:
                    self.items.append(((c, None, 0), rows))
        else:
            for c, p in sorted(set(zip(ctx[in_split], pert[in_split]))):
                if p == CONTROL or c not in ctrl_rows:
                    continue
                rows = np.flatnonzero(in_split & (ctx == c) & (pert == p))
                self.items.append(((c, p, int(dose[rows[0]])), rows))
        if not self.items:
            raise ValueError(f"no usable conditions in split {split!r}")


class Trainer:
    """Owns parameters, optimizer state, EMA shadow and the data index."""

    def __init__(self, dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                 vocab: Vocab | None = None, params: dict | None = None,
                 schedule: dfn.NoiseSchedule | None = None):
        self.ds = dataset
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.vocab = vocab or Vocab.from_dataset(dataset)
        self.schedule = schedule or dfn.make_linear_schedule()
        self.params = params if params is not None else init_params(model_cfg, cfg.seed)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        self.opt = OptimizerState.zeros_like(self.params)
        self.ema = {k: v.copy() for k, v in self.params.items()}
        self.rng = np.random.default_rng(cfg.seed)
        self.X = dataset.X
        self.index = ConditionIndex(dataset, self.vocab, marginal=cfg.mode == "marginal-pretrain")
        self.step = 0
        self.log_rows = []

    # -- batches ----------------------------------------------------------
    def sample_training_batch(self, rng, index: "ConditionIndex | None" = None):
        cfg, m = self.cfg, self.cfg.batch_cells
        index = index or self.index
        picks = rng.integers(len(index.items), size=cfg.conditions_per_step)
        x0, ctrl, ids = [], [], []
        for i in picks:
            (c, p, dose), rows = index.items[i]
            x0.append(self.X[sample_rows(rows, m, rng)])
            if cfg.mode == "marginal-pretrain":
                ctrl.append(np.zeros((m, self.X.shape[1])))
                ids.append((self.vocab.contexts.index(c), 0, 0))
            else:
                ctrl.append(self.X[sample_rows(index.ctrl_rows[c], m, rng)])
                ids.append(self.vocab.condition(c, p, dose))
        ids = np.array(ids)
        cond = ConditionBatch(ids[:, 0], ids[:, 1], ids[:, 2], np.zeros(len(ids), int),
                              np.zeros(len(ids), bool), np.full(len(ids), cfg.mode == "marginal-pretrain"))
        return np.array(x0, dtype=np.float64), np.array(ctrl, dtype=np.float64), cond

    # -- one update -------------------------------------------------------
    def train_step(self) -> dict:
        x0, ctrl, cond = self.sample_training_batch(self.rng)
        if self.cfg.mode == "marginal-pretrain":
            row = pretrain_step(self.params, self.opt, (x0, cond), self.rng, self.cfg, self.model_cfg, self.schedule)
        else:
            row = train_step(self.params, self.opt, (x0, ctrl, cond), self.rng, self.cfg, self.model_cfg,
                             self.schedule)
        self.step = self.opt.step
        ema_update(self.params, self.ema, self.cfg.ema_decay, self.step, self.cfg.ema_interval)
        self.log_rows.append(row)
        return row

    # -- evaluation -------------------------------------------------------
    def validation_loss(self, split="valid", n_batches: int = 4, seed: int = 1234, params=None) -> float:
        """Total loss on fixed (t, noise, cells) draws, no dropout or self-conditioning."""
        rng = np.random.default_rng(seed)
        try:
            index = ConditionIndex(self.ds, self.vocab, split=split, marginal=self.cfg.mode == "marginal-pretrain")
        except ValueError:
            index = self.index
        P0 = self.ema if params is None else params
        vals = []
        for _ in range(n_batches):
            x0, ctrl, cond = self.sample_training_batch(rng, index)
            t = rng.integers(1, self.schedule.T + 1, size=x0.shape[0])
            eps = rng.standard_normal(x0.shape)
            rec = ad.Record(check_finite=False)
            P = {k: rec.constant(v) for k, v in P0.items()}
            xt = rec.constant(dfn.q_sample(x0, t, eps, self.schedule))
            sc = rec.constant(np.zeros_like(x0)) if self.model_cfg.self_condition else None
            pred = denoise(P, self.model_cfg, xt, sc, rec.constant(ctrl), t, cond)
            vals.append(float(total_loss(x0, pred, self.cfg.lambda_mse, self.cfg.lambda_ed)[0].value))
        return float(np.mean(vals))

    def evaluate_split(self, split="valid", sampler: dfn.SamplerConfig | None = None,
                       params=None, seed: int = 0, zero_shot: bool = False) -> MetricReport:
        conds = self.ds.conditions(split=split)
        truth, ctrl = truth_and_controls(self.ds, conds)
        n_cells = {c: truth[c].shape[0] for c in conds}
        pred = generate(self.ema if params is None else params, self.model_cfg, self.vocab, self.ds, conds, n_cells,
                        sampler or dfn.SamplerConfig(steps=25), self.schedule, seed=seed, zero_shot=zero_shot)
        return evaluate(truth, pred, ctrl, method="model", seed=seed)

    def fit(self, steps: int | None = None, eval_split: str | None = "valid",
            sampler: dfn.SamplerConfig | None = None, on_eval=None, eval_at_start: bool = False) -> list:
        """Train for ``steps`` updates, evaluating every ``eval_interval``; returns [(step, report)]."""
        steps = self.cfg.steps if steps is None else steps
        history = []
        best = None
        has_eval = eval_split is not None and self.cfg.mode == "perturbation" and bool(self.ds.conditions(split=eval_split))
        for i in range(-1 if eval_at_start else 0, steps):
            if i >= 0:
                self.train_step()
            if has_eval and (i < 0 or (self.cfg.eval_interval and self.step % self.cfg.eval_interval == 0)):
                report = self.evaluate_split(eval_split, sampler)
                history.append((self.step, report))
                if select_checkpoint(history, self.cfg.select_metric) == self.step:
                    best = {k: v.copy() for k, v in self.ema.items()}
                if on_eval:
                    on_eval(self.step, report)
        self.best_params = best if best is not None else {k: v.copy() for k, v in self.ema.items()}
        return history

    def write_log(self, path) -> None:
        cols = ("step", "lr", "loss", "ed", "mse", "grad_norm")
        with open(path, "a") as fh:
            if fh.tell() == 0:
                fh.write("\t".join(cols) + "\n")
            for row in self.log_rows:
                fh.write("\t".join(f"{row[c]:.9g}" if c != "step" else str(row[c]) for c in cols) + "\n")
        self.log_rows = []


def truth_and_controls(ds: Dataset, conds) -> tuple:
    ctx = np.asarray(ds.meta["context"])
    pert = np.asarray(ds.meta["perturbation"])
    truth, ctrl = {}, {}
    for c, p in conds:
        truth[(c, p)] = ds.X[(ctx == c) & (pert == p)].astype(np.float64)
        ctrl[(c, p)] = ds.X[(ctx == c) & (pert == CONTROL)].astype(np.float64)
    return truth, ctrl


def generate(params: dict, model_cfg: ModelConfig, vocab: Vocab, ds: Dataset, conds, n_cells,
             sampler: dfn.SamplerConfig, schedule: dfn.NoiseSchedule, seed: int = 0,
             zero_shot: bool = False, batch_cells: int = 32) -> dict:
    """Sample predicted cells for each (context, perturbation).

    All conditions are stacked into one reverse chain per repetition; each
    repetition draws a fresh control batch of ``batch_cells`` cells.
    """
    conds = list(conds)
    if not conds:
        return {}
    n_cells = n_cells if isinstance(n_cells, dict) else {c: n_cells for c in conds}
    reps = int(math.ceil(max(n_cells.values()) / batch_cells))
    rng = np.random.default_rng(seed)
    ctx = np.asarray(ds.meta["context"])
    pert = np.asarray(ds.meta["perturbation"])
    dose = np.asarray(ds.meta["dose"])
    ctrl_rows = {c: np.flatnonzero((ctx == c) & (pert == CONTROL)) for c in {c for c, _ in conds}}
    ids = []
    for c, p in conds:
        rows = np.flatnonzero((ctx == c) & (pert == p))
        ids.append(vocab.condition(c, p, dose[rows[0]] if rows.size else 0))
    ids = np.array(ids)
    B = len(conds)
    cond = ConditionBatch(ids[:, 0], ids[:, 1], ids[:, 2], np.zeros(B, int),
                          np.zeros(B, bool), np.full(B, zero_shot))
    model = Denoiser(params, model_cfg)
    chunks = {c: [] for c in conds}
    for r in range(reps):
        ctrl = np.array([ds.X[sample_rows(ctrl_rows[c], batch_cells, rng)] for c, _ in conds], dtype=np.float64)
        out = dfn.sample(model, cond, ctrl, replace(sampler, seed=sampler.seed + 1000 * seed + r), schedule)
        for i, c in enumerate(conds):
            chunks[c].append(out[i])
    return {c: np.concatenate(chunks[c])[: n_cells[c]] for c in conds}


def load_for_finetune(path, model_cfg: ModelConfig, strategy: str = "keep", seed: int = 0) -> dict:
    """Load pretrained weights; ``strategy="reinit"`` re-initialises input/output projections."""
    params, ckpt_cfg = load_checkpoint(path)
    check_compatible(ckpt_cfg, model_cfg)
    if strategy == "reinit":
        fresh = init_params(model_cfg, seed)
        for k in IO_LAYERS:
            params[k] = fresh[k]
    elif strategy != "keep":
        raise ValueError(f"unknown transfer strategy {strategy!r} (keep | reinit)")
    return params


def check_compatible(a: ModelConfig, b: ModelConfig) -> None:
    diffs = [f"{k}: checkpoint {x} vs requested {y}"
             for k, x, y in zip(("n_genes", "width", "depth", "heads", "mlp_ratio", "self_condition",
                                 "n_contexts", "n_perturbations", "n_doses", "n_batches"), a.header(), b.header())
             if x != y]
    if diffs:
        raise ValueError("incompatible checkpoint: " + "; ".join(diffs))


__all__ = [
    "TrainConfig", "OptimizerState", "Trainer", "Vocab", "lr_at", "optimizer_step", "clip_grads",
    "ema_update", "total_loss", "train_step", "pretrain_step", "loss_and_grads", "select_checkpoint", "generate", "load_for_finetune", "save_checkpoint",
    "param_shapes",
]
