"""The forward noising process and the deterministic sampler.

With an x0-predictor that already knows the clean batch, DDIM walks back
to that batch exactly for any number of steps. A toy predictor that only
knows the control cells shows how the sampler, guidance and
self-conditioning interact.

Run: python demos/02_diffusion_sampling.py
"""

import numpy as np

from celldiff import diffusion as dfn

S = dfn.make_linear_schedule()
rng = np.random.default_rng(0)

# %% how much signal survives at a few timesteps
for t in (1, 100, 500, 900, 1000):
    print(f"t={t:4d}  sqrt(abar)={np.sqrt(S.abar(t)):.4f}  noise std={np.sqrt(1 - S.abar(t)):.4f}")

B0 = rng.random((8, 5))
eps = rng.standard_normal(B0.shape)
Bt = dfn.q_sample(B0, 700, eps, S)
print("noise recovered from (B_t, B0):", np.allclose(dfn.eps_from_x0(Bt, B0, 700, S), eps))


# %% a predictor that returns the right answer reconstructs it for any step count
def oracle(B_t, B_sc, B_ctrl, t, cond, null=False):
    return B0


for K in (1, 5, 50):
    out = dfn.sample(oracle, None, np.zeros_like(B0), dfn.SamplerConfig(steps=K), S)
    print(f"K={K:3d}: max reconstruction error {np.max(np.abs(out - B0)):.1e}")


# %% a toy conditional predictor: the conditional branch adds a fixed shift to the controls
shift = np.linspace(0.0, 0.4, 5)
ctrl = rng.random((8, 5)) * 0.5


def toy(B_t, B_sc, B_ctrl, t, cond, null=False):
    return B_ctrl if null else B_ctrl + shift


for w in (0.0, 1.0, 2.0):
    out = dfn.sample(toy, None, ctrl, dfn.SamplerConfig(steps=20, guidance=w, seed=1), S)
    print(f"guidance w={w}: mean shift per gene {np.round((out - ctrl).mean(0), 3)}")
