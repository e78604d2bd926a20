"""Command-line entry point: ``celldiff {synth,train,sample,eval,baseline,report}``.

Every subcommand accepts ``--seed``, ``--config``, ``--out``, ``--force`` and
``--threads``. A config file holds ``key = value`` lines whose keys are flag
names (dashes or underscores); values are parsed as JSON when possible and
taken as strings otherwise. Flags given on the command line win.

Exit codes: 0 success, 2 rejected precondition, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion as dfn
from .autodiff import NonFiniteError
from .baselines import MEAN_LEVELS, LinearBaseline, MeanBaseline
from .data import (
    CONTROL,
    DataFormatError,
    Dataset,
    SynthConfig,
    dataset_paths,
    downsample,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .metrics import PER_PERT_METRICS, MetricReport, evaluate, win_rate
from .model import load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    Trainer,
    Vocab,
    generate,
    load_for_finetune,
    select_checkpoint,
    truth_and_controls,
)

log = logging.getLogger("celldiff")

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3
AGGREGATE_COLUMNS = ("PDS_L1", "PDS_L2", "PDS_cos") + tuple(m for m in PER_PERT_METRICS if not m.startswith("PDS"))


class PreconditionError(Exception):
    """A user-facing precondition was not met (exit code 2)."""


@dataclass
class RunConfig:
    """Merged view of every knob a command may read."""

    seed: int = 0
    out: Path = Path(".")
    force: bool = False
    threads: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: dfn.SamplerConfig = field(default_factory=dfn.SamplerConfig)
    model: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        """Collect the flags a subcommand defines; sections it lacks keep their defaults."""
        a = vars(args)
        rc = cls(seed=args.seed, out=args.out, force=args.force, threads=args.threads)
        try:
            if "n_genes" in a:
                rc.synth = SynthConfig(
                    n_genes=args.n_genes, n_contexts=args.n_contexts, n_perturbations=args.n_perturbations,
                    n_doses=args.n_doses, heldout_contexts=args.heldout_contexts,
                    holdout_frac=args.holdout_frac, valid_frac=args.valid_frac,
                    latent_scale=args.latent_scale, effect_scale=args.effect_scale,
                    cell_noise=args.cell_noise, zero_inflation=args.zero_inflation, seed=args.seed,
                )
            if "lambda_mse" in a:
                rc.train = TrainConfig(
                    lambda_mse=args.lambda_mse, lambda_ed=args.lambda_ed, p_drop=args.p_drop, p_sc=args.p_sc,
                    lr=args.lr, warmup=args.warmup, steps=args.steps, eval_interval=args.eval_interval,
                    ema_decay=args.ema_decay, ema_interval=args.ema_interval,
                    mode="marginal-pretrain" if args.mode == "pretrain" else "perturbation",
                    conditions_per_step=args.conditions_per_step, batch_cells=args.batch_cells,
                    select_metric=args.select_metric, seed=args.seed,
                )
            if "sample_steps" in a:
                rc.sampler = dfn.SamplerConfig(steps=args.sample_steps, eta=args.eta, guidance=args.guidance,
                                               self_condition=not args.no_self_condition, seed=args.seed)
        except ValueError as exc:
            raise PreconditionError(str(exc)) from exc
        if "width" in a:
            rc.model = dict(width=args.width, depth=args.depth, heads=args.heads, mlp_ratio=args.mlp_ratio,
                            self_condition=not args.no_self_condition)
        return rc


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--config", type=Path, help="key = value config file; flags override it")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    g.add_argument("--force", action="store_true", help="overwrite existing outputs")
    g.add_argument("--threads", type=int, help="limit BLAS threads")
    g.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mlp-ratio", type=int, default=4)
    p.add_argument("--no-self-condition", action="store_true", help="disable the self-conditioning channel")


def _sampler_flags(p, steps=50):
    p.add_argument("--sample-steps", type=int, default=steps, help="DDIM steps K")
    p.add_argument("--eta", type=float, default=0.0, help="0 = deterministic DDIM, 1 = DDPM-like")
    p.add_argument("--guidance", type=float, default=0.0, help="classifier-free guidance weight w")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celldiff", description="Conditional cell-batch diffusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="simulate a perturbation dataset")
    _common(p)
    p.add_argument("--name", default="synthetic", help="file prefix inside --out")
    p.add_argument("--n-genes", type=int, default=64)
    p.add_argument("--n-contexts", type=int, default=8)
    p.add_argument("--n-perturbations", type=int, default=20)
    p.add_argument("--n-doses", type=int, default=1)
    p.add_argument("--heldout-contexts", type=int, default=4)
    p.add_argument("--holdout-frac", type=float, default=0.3)
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.add_argument("--latent-scale", type=float, default=0.04)
    p.add_argument("--effect-scale", type=float, default=0.25)
    p.add_argument("--cell-noise", type=float, default=0.1)
    p.add_argument("--zero-inflation", type=float, default=0.2)
    p.add_argument("--downsample", type=float, default=1.0, help="fraction of training cells kept")
    p.add_argument("--gzip", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a denoiser (scratch, pretrain or finetune)")
    _common(p)
    p.add_argument("--data", required=True, help="dataset prefix")
    p.add_argument("--mode", choices=("scratch", "pretrain", "finetune"), default="scratch")
    p.add_argument("--from", dest="from_ckpt", type=Path, help="checkpoint to finetune from")
    p.add_argument("--strategy", choices=("keep", "reinit"), default="keep",
                   help="finetune transfer: keep all weights or re-initialise input/output projections")
    p.add_argument("--name", default="model")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--eval-interval", type=int, default=200)
    p.add_argument("--conditions-per-step", type=int, default=8)
    p.add_argument("--batch-cells", type=int, default=32)
    p.add_argument("--lambda-mse", type=float, default=1.0)
    p.add_argument("--lambda-ed", type=float, default=1.0)
    p.add_argument("--p-drop", type=float, default=0.1)
    p.add_argument("--p-sc", type=float, default=0.5)
    p.add_argument("--ema-decay", type=float, default=0.99)
    p.add_argument("--ema-interval", type=int, default=10)
    p.add_argument("--select-metric", default="PDCorr")
    _model_flags(p)
    _sampler_flags(p, steps=25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate predicted cells from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, help="dataset prefix supplying control cells")
    p.add_argument("--split", default="test")
    p.add_argument("--conditions", help="comma-separated context|perturbation ids (default: every split condition)")
    p.add_argument("--n-cells", type=int, help="cells per condition (default: ground-truth count)")
    p.add_argument("--zero-shot", action="store_true", help="mask the perturbation token")
    p.add_argument("--name", default="predicted")
    p.add_argument("--no-self-condition", action="store_true")
    _sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--data", required=True, help="ground-truth dataset prefix")
    p.add_argument("--pred", required=True, nargs="+", help="prediction dataset prefixes")
    p.add_argument("--names", nargs="+", help="method names (default: prediction file stems)")
    p.add_argument("--split", default="test")
    p.add_argument("--bins", type=int, default=20, help="histogram bins for -log10 adjusted p-values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="emit mean or linear baseline predictions")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("mean", "linear"), default="mean")
    p.add_argument("--level", default="overall", help=f"mean level: {', '.join(MEAN_LEVELS)}")
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--split", default="test")
    p.add_argument("--name", help="output prefix (default: <kind>_<level>)")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="summarise metric reports and win rates")
    _common(p)
    p.add_argument("reports", nargs="+", type=Path, help="report .json files")
    p.add_argument("--name", default="summary")
    p.set_defaults(func=cmd_report)
    return parser


def read_config(path: Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if not path.is_file():
        raise PreconditionError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PreconditionError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value.strip("\"'")
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise PreconditionError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# helpers


def _check_writable(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise PreconditionError("refusing to overwrite existing files (use --force): " + ", ".join(existing))


def _load(prefix) -> Dataset:
    mpath, tpath = dataset_paths(prefix)
    for p in (mpath, tpath):
        if not p.is_file():
            raise PreconditionError(f"dataset file not found: {p}")
    return load_dataset(prefix)


def _predictions_dataset(pred: dict, genes, meta_of: dict, tag_of: dict) -> Dataset:
    X, meta = [], {k: [] for k in ("cell_id", "context", "perturbation", "dose", "replicate", "split",
                                   "predicted", "conditioned_on")}
    for (c, p), cells in pred.items():
        n = cells.shape[0]
        start = len(meta["cell_id"])
        X.append(cells)
        meta["cell_id"].extend(f"p{start + i:06d}" for i in range(n))
        meta["context"].extend([c] * n)
        meta["perturbation"].extend([p] * n)
        meta["dose"].extend([meta_of.get((c, p), (0, "test"))[0]] * n)
        meta["replicate"].extend([0] * n)
        meta["split"].extend([meta_of.get((c, p), (0, "test"))[1]] * n)
        meta["predicted"].extend([1] * n)
        meta["conditioned_on"].extend([tag_of[(c, p)]] * n)
    meta = {k: np.asarray(v) for k, v in meta.items()}
    return Dataset(np.concatenate(X).astype(np.float32), list(genes), meta)


def _condition_meta(ds: Dataset) -> dict:
    ctx, pert = np.asarray(ds.meta["context"]), np.asarray(ds.meta["perturbation"])
    dose, split = np.asarray(ds.meta["dose"]), np.asarray(ds.meta["split"])
    out = {}
    for i in range(ds.n_cells):
        out.setdefault((ctx[i], pert[i]), (int(dose[i]), split[i]))
    return out


def _vocab_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".vocab.json")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = RunConfig.from_args(args).synth
    try:
        ds = generate_synthetic(cfg)
        if args.downsample < 1.0:
            ds = downsample(ds, args.downsample, seed=args.seed)
    except ValueError as exc:
        raise PreconditionError(str(exc)) from exc
    prefix = args.out / (args.name + (".gz" if args.gzip else ""))
    _check_writable(dataset_paths(prefix), args.force)
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, prefix)
    print(split_summary(ds))
    return EXIT_OK


def split_summary(ds: Dataset) -> str:
    """Cells, perturbations, contexts and batches per split as a TSV block."""
    lines = ["split\tcells\tperturbations\tcontexts\tbatches"]
    split = np.asarray(ds.meta["split"])
    pert = np.asarray(ds.meta["perturbation"])
    ctx = np.asarray(ds.meta["context"])
    batch = np.asarray(ds.meta["batch"] if "batch" in ds.meta else ds.meta["replicate"])
    for name in sorted(set(split)):
        m = split == name
        n_pert = len(set(pert[m]) - {CONTROL})
        n_batch = len(set(zip(ctx[m], pert[m], batch[m])))
        lines.append(f"{name}\t{int(m.sum())}\t{n_pert}\t{len(set(ctx[m]))}\t{n_batch}")
    lines.append(f"total\t{ds.n_cells}\t{len(set(pert) - {CONTROL})}\t{len(set(ctx))}\t"
                 f"{len(set(zip(ctx, pert, batch)))}")
    return "\n".join(lines)


def cmd_train(args) -> int:
    ds = _load(args.data)
    ckpt = args.out / f"{args.name}.ckpt"
    _check_writable([ckpt, args.out / f"{args.name}.train.tsv"], args.force)
    rc = RunConfig.from_args(args)
    cfg = rc.train

    vocab = Vocab.from_dataset(ds)
    params = None
    if args.mode == "finetune":
        if args.from_ckpt is None:
            raise PreconditionError("--mode finetune requires --from <checkpoint>")
        if not args.from_ckpt.is_file():
            raise PreconditionError(f"checkpoint not found: {args.from_ckpt}")
        if _vocab_path(args.from_ckpt).is_file():
            vocab = Vocab.load(_vocab_path(args.from_ckpt))
            unseen = sorted((set(ds.contexts) - set(vocab.contexts)) | (set(ds.perturbations) - set(vocab.perturbations)))
            if unseen:
                raise PreconditionError("dataset labels missing from the checkpoint vocabulary: " + ", ".join(unseen))
    try:
        model_cfg = vocab.model_config(ds.n_genes, **rc.model)
    except ValueError as exc:
        raise PreconditionError(str(exc)) from exc
    if args.mode == "finetune":
        try:
            params = load_for_finetune(args.from_ckpt, model_cfg, args.strategy, seed=args.seed)
        except ValueError as exc:
            raise PreconditionError(str(exc)) from exc

    args.out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(ds, model_cfg, cfg, vocab=vocab, params=params)
    log_path = args.out / f"{args.name}.train.tsv"
    log_path.unlink(missing_ok=True)
    report_dir = args.out / f"{args.name}.valid"
    loss0 = trainer.validation_loss()
    print(f"step 0 validation loss {loss0:.6g}")
    sampler = rc.sampler

    def on_eval(step, report):
        report_dir.mkdir(exist_ok=True)
        report.save(report_dir / f"step{step:07d}")
        trainer.write_log(log_path)
        print(f"step {step} validation " + " ".join(f"{m}={report.value(m):.4g}" for m in ("PDCorr", "PDS_L1", "MAE")))

    history = trainer.fit(sampler=sampler, on_eval=on_eval)
    trainer.write_log(log_path)
    if history:
        best = select_checkpoint(history, cfg.select_metric)
        print(f"selected step {best} by validation {cfg.select_metric}")
    save_checkpoint(ckpt, trainer.best_params, model_cfg)
    vocab.save(_vocab_path(ckpt))
    if args.steps:
        print(f"step {trainer.step} validation loss {trainer.validation_loss(params=trainer.best_params):.6g}")
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if not args.checkpoint.is_file():
        raise PreconditionError(f"checkpoint not found: {args.checkpoint}")
    ds = _load(args.data)
    prefix = args.out / args.name
    _check_writable(dataset_paths(prefix), args.force)
    params, model_cfg = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(_vocab_path(args.checkpoint)) if _vocab_path(args.checkpoint).is_file() else Vocab.from_dataset(ds)
    if model_cfg.n_genes != ds.n_genes:
        raise PreconditionError(f"checkpoint expects {model_cfg.n_genes} genes, dataset has {ds.n_genes}")

    available = ds.conditions(split=args.split)
    if args.conditions:
        requested = [tuple(c.split("|", 1)) for c in args.conditions.split(",") if c]
    else:
        requested = available
    ctrl_contexts = set(np.asarray(ds.meta["context"])[ds.mask(perturbation=CONTROL)])
    conds, skipped = [], []
    for c in requested:
        ok = (len(c) == 2 and c[0] in vocab.contexts and c[0] in ctrl_contexts
              and (args.zero_shot or c[1] in vocab.perturbations))
        (conds if ok else skipped).append(c)
    for c in skipped:
        log.warning("skipping unknown condition %s", "|".join(c))
    if not conds:
        raise PreconditionError("no known conditions to sample: " + ", ".join("|".join(c) for c in skipped))

    truth_n = {c: int(ds.mask(context=c[0], perturbation=c[1]).sum()) for c in conds}
    n_cells = {c: args.n_cells or truth_n[c] or 100 for c in conds}
    # zero-shot perturbations may be outside the vocabulary; their id is masked anyway
    known = [c if c[1] in vocab.perturbations else (c[0], CONTROL) for c in conds]
    pred = generate(params, model_cfg, vocab, ds, known, {k: n_cells[c] for k, c in zip(known, conds)},
                    RunConfig.from_args(args).sampler, dfn.make_linear_schedule(), seed=args.seed, zero_shot=args.zero_shot)
    pred = {c: pred[k] for k, c in zip(known, conds)}
    tags = {c: f"{c[0]}|{'null' if args.zero_shot else c[1]}" for c in conds}
    out = _predictions_dataset(pred, ds.genes, _condition_meta(ds), tags)
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset(out, prefix)
    print(f"wrote {sum(v.shape[0] for v in pred.values())} cells for {len(conds)} conditions to {prefix}"
          + (f" ({len(skipped)} skipped)" if skipped else ""))
    return EXIT_OK


def _pred_dict(ds: Dataset) -> dict:
    ctx, pert = np.asarray(ds.meta["context"]), np.asarray(ds.meta["perturbation"])
    out = {}
    for key in sorted(set(zip(ctx, pert))):
        out[key] = ds.X[(ctx == key[0]) & (pert == key[1])].astype(np.float64)
    return out


def cmd_eval(args) -> int:
    truth_ds = _load(args.data)
    names = args.names or [Path(p).name for p in args.pred]
    if len(names) != len(args.pred):
        raise PreconditionError("--names must match the number of --pred files")
    conds = truth_ds.conditions(split=args.split)
    if not conds:
        raise PreconditionError(f"no conditions in split {args.split!r}")
    truth, ctrl = truth_and_controls(truth_ds, conds)
    preds = {}
    for name, prefix in zip(names, args.pred):
        pds = _load(prefix)
        if pds.genes != truth_ds.genes:
            missing = [g for g in truth_ds.genes if g not in pds.genes]
            extra = [g for g in pds.genes if g not in truth_ds.genes]
            detail = f"missing {missing}; unexpected {extra}" if missing or extra else "same genes in a different order"
            raise PreconditionError(f"gene vocabulary mismatch in {prefix}: {detail}")
        preds[name] = _pred_dict(pds)
    paths = [args.out / f"{n}.{ext}" for n in names for ext in ("json", "tsv")]
    paths += [args.out / f for f in ("radar.csv", "scatter.csv", "pvalue_hist.csv")]
    _check_writable(paths, args.force)
    args.out.mkdir(parents=True, exist_ok=True)

    reports = {}
    for name in names:
        rep = evaluate(truth, preds[name], ctrl, method=name, seed=args.seed)
        rep.save(args.out / name)
        reports[name] = rep
        if rep.missing:
            log.warning("%s: %d conditions without predictions", name, len(rep.missing))
        print(f"{name}: " + " ".join(f"{m}={rep.value(m):.4g}" for m in ("PDS_L1", "PDCorr", "MAE", "DEOver", "AUROC")))
    write_radar(args.out / "radar.csv", reports)
    write_scatter(args.out / "scatter.csv", reports)
    write_histograms(args.out / "pvalue_hist.csv", reports, args.bins)
    return EXIT_OK


def write_radar(path: Path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method",) + AGGREGATE_COLUMNS + ("ES",))
        for name in sorted(reports):
            r = reports[name]
            w.writerow([name] + [_num(r.value(m)) for m in AGGREGATE_COLUMNS] + [_num(r.es)])


def write_scatter(path: Path, reports: dict) -> None:
    """Long table: one row per (perturbation, metric) with a column per method."""
    names = sorted(reports)
    keys = sorted(set().union(*(r.per_perturbation for r in reports.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["perturbation", "metric"] + names)
        for k in keys:
            for m in PER_PERT_METRICS:
                w.writerow([k, m] + [_num(reports[n].per_perturbation.get(k, {}).get(m, math.nan)) for n in names])


def write_histograms(path: Path, reports: dict, bins: int) -> None:
    """Counts of -log10 adjusted p-values (truth vs prediction) over all genes and perturbations."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "bin_low", "bin_high", "truth_count", "predicted_count"])
        for name in sorted(reports):
            vecs = reports[name].score_vectors
            if not vecs:
                continue
            t = np.concatenate([v[0] for v in vecs.values()])
            p = np.concatenate([v[1] for v in vecs.values()])
            hi = max(float(np.max(t)), float(np.max(p)), 1e-12)
            edges = np.linspace(0.0, hi, bins + 1)
            ct, _ = np.histogram(t, edges)
            cp, _ = np.histogram(p, edges)
            for i in range(bins):
                w.writerow([name, f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(ct[i]), int(cp[i])])


def _num(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"


def cmd_baseline(args) -> int:
    ds = _load(args.data)
    if args.kind == "mean" and args.level not in MEAN_LEVELS:
        raise PreconditionError(f"unknown level {args.level!r}; valid options: {', '.join(MEAN_LEVELS)}")
    name = args.name or (f"mean_{args.level}" if args.kind == "mean" else "linear")
    prefix = args.out / name
    _check_writable(dataset_paths(prefix), args.force)
    conds = ds.conditions(split=args.split)
    if not conds:
        raise PreconditionError(f"no conditions in split {args.split!r}")
    n_cells = {c: int(ds.mask(context=c[0], perturbation=c[1]).sum()) for c in conds}
    if args.kind == "mean":
        pred = MeanBaseline(ds, args.level).predict(conds, n_cells)
    else:
        pred = LinearBaseline(ds, ridge=args.ridge).predict(conds, n_cells)
    tags = {c: f"{c[0]}|{c[1]}" for c in conds}
    args.out.mkdir(parents=True, exist_ok=True)
    save_dataset(_predictions_dataset(pred, ds.genes, _condition_meta(ds), tags), prefix)
    print(f"wrote {name} predictions for {len(conds)} conditions")
    return EXIT_OK


def cmd_report(args) -> int:
    for p in args.reports:
        if not p.is_file():
            raise PreconditionError(f"report not found: {p}")
    reports = [MetricReport.load(p) for p in args.reports]
    md, csv_path, win_path = (args.out / f"{args.name}.{ext}" for ext in ("md", "csv", "winrates.csv"))
    _check_writable([md, csv_path, win_path], args.force)
    args.out.mkdir(parents=True, exist_ok=True)
    text, rows, wins = render_report(reports)
    md.write_text(text)
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    with open(win_path, "w", newline="") as fh:
        csv.writer(fh).writerows(wins)
    print(text, end="")
    return EXIT_OK


def render_report(reports: list) -> tuple:
    """Markdown text, aggregate CSV rows and win-rate CSV rows for a set of reports."""
    reports = sorted(reports, key=lambda r: r.method)
    shared = set.intersection(*(set(r.per_perturbation) for r in reports))
    union = set.union(*(set(r.per_perturbation) for r in reports))
    header = ["method"] + list(AGGREGATE_COLUMNS) + ["ES"]
    rows = [header] + [[r.method] + [_num(r.value(m)) for m in AGGREGATE_COLUMNS] + [_num(r.es)] for r in reports]
    lines = ["# Metric summary", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in rows[1:]]
    if shared != union:
        lines += ["", f"Perturbation sets differ across reports; win rates use the {len(shared)} shared "
                      f"perturbations out of {len(union)}."]
    wins = [["method_a", "method_b", "metric", "wins", "compared", "win_rate"]]
    if len(reports) > 1:
        lines += ["", "## Win rates (A vs B: share of perturbations where A is at least as good)", ""]
        lines += ["| A | B | metric | win rate |", "|---|---|---|---|"]
    for a in reports:
        for b in reports:
            if a is b and len(reports) > 1:
                continue
            for m in PER_PERT_METRICS:
                rate, n_wins, n = win_rate(_restrict(a, shared), _restrict(b, shared), m)
                wins.append([a.method, b.method, m, n_wins, n, _num(rate)])
                if len(reports) > 1:
                    lines.append(f"| {a.method} | {b.method} | {m} | {_num(rate)} |")
    return "\n".join(lines) + "\n", rows, wins


def _restrict(r: MetricReport, keys: set) -> MetricReport:
    return MetricReport(r.method, {k: v for k, v in r.per_perturbation.items() if k in keys})


# --------------------------------------------------------------------------


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        with _thread_limit(args.threads):
            return args.func(args)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
