"""Marginal pretraining followed by finetuning on a downsampled screen.

Pretraining sees every training cell but only its context label. The
finetuned model and a model trained from scratch then learn from 5% of the
training cells; their validation PDCorr is printed side by side.

Run: python demos/04_pretrain_finetune.py [pretrain_steps] [steps]
"""

import sys

from celldiff.data import SynthConfig, downsample, generate_synthetic
from celldiff.diffusion import SamplerConfig
from celldiff.train import TrainConfig, Trainer, Vocab

pre_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600
full = generate_synthetic(SynthConfig())
small = downsample(full, 0.05, seed=0)
print(f"training cells: full {full.mask(split='train').sum()}, downsampled {small.mask(split='train').sum()}")

vocab = Vocab.from_dataset(full)
cfg = vocab.model_config(full.n_genes)
pre = Trainer(full, cfg, TrainConfig(steps=pre_steps, mode="marginal-pretrain"), vocab=vocab)
pre.fit()

sampler = SamplerConfig(steps=25)
runs = {}
for name, params in (("scratch", None), ("finetune", {k: v.copy() for k, v in pre.ema.items()})):
    t = Trainer(small, cfg, TrainConfig(steps=steps, eval_interval=max(steps // 6, 1)), vocab=vocab, params=params)
    runs[name] = t.fit(sampler=sampler, eval_at_start=True)

print(f"{'step':>6s} {'scratch':>9s} {'finetune':>9s}")
for (s, a), (_, b) in zip(runs["scratch"], runs["finetune"]):
    print(f"{s:6d} {a.value('PDCorr'):9.3f} {b.value('PDCorr'):9.3f}")
