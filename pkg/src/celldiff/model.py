"""MM-DiT x0-predictor over batches of cells.

Each cell is a token. The noised perturbed batch and the matched control
batch form two token streams that share one multi-head attention per block
(the streams are concatenated along the feature axis, so attention mixes
cells, never the two streams' positions). Timestep and covariates form a
conditioning vector ``s`` that drives AdaLN-Zero modulation in every block.
Only the perturbed stream reaches the output head, which ends in a ReLU.

Parameters live in a flat ``dict[str, np.ndarray]``; :func:`param_shapes`
defines the canonical order used by checkpoints.

Checkpoint layout (all little-endian)::

    8 bytes   magic b"CDIFFCKP"
    int64     format version (1)
    int64     number of header fields that follow (11)
    int64 x11 n_genes, width, depth, heads, mlp_ratio, self_condition,
              n_contexts, n_perturbations, n_doses, n_batches, n_floats
    float64 x n_floats  parameters concatenated in param_shapes() order,
                        each flattened row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Record, Tensor

MAGIC = b"CDIFFCKP"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_genes: int = 64
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    self_condition: bool = True
    n_contexts: int = 1
    n_perturbations: int = 1
    n_doses: int = 1
    n_batches: int = 0

    def __post_init__(self):
        if self.width % 2 or self.width % self.heads:
            raise ValueError("width must be even and divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if min(self.n_genes, self.n_contexts, self.n_perturbations, self.n_doses) < 1:
            raise ValueError("vocabulary sizes and gene count must be positive")

    def header(self) -> list:
        return [int(getattr(self, f.name)) for f in fields(self)]


@dataclass(frozen=True)
class Condition:
    """Conditioning ids for one batch. ``null`` masks all metadata for CFG."""

    context: int
    perturbation: int
    dose: int = 0
    batch: int = 0
    null: bool = False


@dataclass
class ConditionBatch:
    """Per-item ids for a stack of conditions (one per leading batch item)."""

    context: np.ndarray
    perturbation: np.ndarray
    dose: np.ndarray
    batch: np.ndarray
    null_context: np.ndarray
    null_perturbation: np.ndarray

    @classmethod
    def stack(cls, conds, null=False) -> "ConditionBatch":
        if isinstance(conds, Condition):
            conds = [conds]
        n = np.array([c.null or null for c in conds])
        return cls(
            context=np.array([c.context for c in conds]),
            perturbation=np.array([c.perturbation for c in conds]),
            dose=np.array([c.dose for c in conds]),
            batch=np.array([c.batch for c in conds]),
            null_context=n,
            null_perturbation=n.copy(),
        )

    def __len__(self):
        return len(self.context)


def param_shapes(cfg: ModelConfig) -> list:
    d, G = cfg.width, cfg.n_genes
    h = cfg.mlp_ratio * d
    g_in = 2 * G if cfg.self_condition else G
    n_cov = 3 if cfg.n_batches else 2
    shapes = [
        ("in_pert.W", (g_in, d)), ("in_pert.b", (d,)),
        ("in_ctrl.W", (G, d)), ("in_ctrl.b", (d,)),
        ("gene_embedding", (d,)),
        ("time.W1", (d, d)), ("time.b1", (d,)), ("time.W2", (d, d)), ("time.b2", (d,)),
        ("cov.context", (cfg.n_contexts + 1, d)),
        ("cov.perturbation", (cfg.n_perturbations + 1, d)),
        ("cov.dose", (cfg.n_doses + 1, d)),
    ]
    if cfg.n_batches:
        shapes.append(("cov.batch", (cfg.n_batches + 1, d)))
    shapes += [
        ("cov.W", (n_cov * d, d)), ("cov.b", (d,)),
        ("cond.W1", (2 * d, d)), ("cond.b1", (d,)), ("cond.W2", (d, d)), ("cond.b2", (d,)),
    ]
    for i in range(cfg.depth):
        p = f"block{i}."
        for stream in ("pert", "ctrl"):
            shapes += [
                (p + f"mod_{stream}.W", (d, 6 * d)), (p + f"mod_{stream}.b", (6 * d,)),
                (p + f"mlp_{stream}.W1", (d, h)), (p + f"mlp_{stream}.b1", (h,)),
                (p + f"mlp_{stream}.W2", (h, d)), (p + f"mlp_{stream}.b2", (d,)),
            ]
        shapes += [
            (p + "attn.Wqkv", (2 * d, 6 * d)), (p + "attn.bqkv", (6 * d,)),
            (p + "attn.Wo", (2 * d, 2 * d)), (p + "attn.bo", (2 * d,)),
        ]
    shapes += [
        ("final_mod.W", (d, 2 * d)), ("final_mod.b", (2 * d,)),
        ("out.W", (d, G)), ("out.b", (G,)),
    ]
    return shapes


ZERO_INIT_SUFFIXES = ("mod_pert.W", "mod_ctrl.W", "final_mod.W", "out.W")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameters: scaled-normal weights, zero biases, zero modulation and output heads."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(ZERO_INIT_SUFFIXES) or len(shape) == 1 and name != "gene_embedding":
            params[name] = np.zeros(shape)
        elif name.startswith("cov.") and name != "cov.W":
            params[name] = rng.standard_normal(shape)
        elif name == "gene_embedding":
            params[name] = 0.02 * rng.standard_normal(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return params


def sinusoidal_code(t, d: int) -> np.ndarray:
    """``[sin(t w_i), cos(t w_i)]`` with ``w_i = 10000^(-i/(d/2))``; shape ``t.shape + (d,)``."""
    t = np.asarray(t, dtype=np.float64)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _linear(x: Tensor, P: dict, prefix: str) -> Tensor:
    return x @ P[prefix + ".W"] + P[prefix + ".b"]


def embed_timestep(P: dict, t, d: int) -> Tensor:
    """Sinusoidal code followed by a two-layer MLP; returns (B, d)."""
    rec = P["time.W1"].record
    code = rec.constant(sinusoidal_code(np.atleast_1d(t), d))
    return ad.relu(code @ P["time.W1"] + P["time.b1"]) @ P["time.W2"] + P["time.b2"]


def _one_hot(ids: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((len(ids), size))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def encode_covariates(P: dict, cfg: ModelConfig, cond: ConditionBatch, e_t: Tensor) -> Tensor:
    """Conditioning vector ``s = MLP([e_t, e_y])``.

    Context, perturbation(+dose) and batch are looked up in separate tables,
    concatenated and projected to ``e_y``. Null-masked items use the last row
    of every table. The dose embedding is summed into the perturbation slot.
    """
    rec = e_t.record
    checks = [
        ("context", cond.context, cfg.n_contexts),
        ("perturbation", cond.perturbation, cfg.n_perturbations),
        ("dose", cond.dose, cfg.n_doses),
    ]
    if cfg.n_batches:
        checks.append(("batch", cond.batch, cfg.n_batches))
    for name, ids, size in checks:
        if np.any(ids < 0) or np.any(ids >= size):
            raise ValueError(f"{name} id out of vocabulary (size {size}): {ids}")

    def lookup(ids, table, size, null):
        ids = np.where(null, size, ids)
        return rec.constant(_one_hot(ids, size + 1)) @ P[table]

    e_c = lookup(cond.context, "cov.context", cfg.n_contexts, cond.null_context)
    e_p = lookup(cond.perturbation, "cov.perturbation", cfg.n_perturbations, cond.null_perturbation)
    e_p = e_p + lookup(cond.dose, "cov.dose", cfg.n_doses, cond.null_perturbation)
    parts = [e_c, e_p]
    if cfg.n_batches:
        parts.append(lookup(cond.batch, "cov.batch", cfg.n_batches, cond.null_context))
    e_y = _linear(ad.concat(parts), P, "cov")
    h = ad.relu(ad.concat([e_t, e_y]) @ P["cond.W1"] + P["cond.b1"])
    return h @ P["cond.W2"] + P["cond.b2"]


def _modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.layer_norm(h) * (scale + 1.0) + shift


def _attention(u: Tensor, P: dict, prefix: str, heads: int) -> Tensor:
    *lead, m, w = u.shape
    dh = w // heads
    q, k, v = ad.split(u @ P[prefix + "Wqkv"] + P[prefix + "bqkv"], [w, w, w])

    def heads_first(x):
        nb = len(lead)
        return x.reshape(*lead, m, heads, dh).transpose(*range(nb), nb + 1, nb, nb + 2)

    q, k, v = heads_first(q), heads_first(k), heads_first(v)
    nb = len(lead)
    kt = k.transpose(*range(nb + 1), nb + 2, nb + 1)
    attn = ad.softmax((q @ kt) * (1.0 / np.sqrt(dh)))
    o = (attn @ v).transpose(*range(nb), nb + 1, nb, nb + 2).reshape(*lead, m, w)
    return o @ P[prefix + "Wo"] + P[prefix + "bo"]


def mmdit_block(P: dict, cfg: ModelConfig, i: int, h_pert: Tensor, h_ctrl: Tensor, s_act: Tensor):
    """One joint-attention block. ``s_act`` is the activated conditioning vector (B, d)."""
    if h_pert.shape != h_ctrl.shape:
        raise ValueError(f"stream shapes differ: {h_pert.shape} vs {h_ctrl.shape}")
    d = cfg.width
    p = f"block{i}."
    B = s_act.shape[0]

    def mods(stream):
        m = s_act @ P[p + f"mod_{stream}.W"] + P[p + f"mod_{stream}.b"]
        return [x.reshape(B, 1, d) for x in ad.split(m, [d] * 6)]

    sa_p, ca_p, ga_p, sm_p, cm_p, gm_p = mods("pert")
    sa_c, ca_c, ga_c, sm_c, cm_c, gm_c = mods("ctrl")
    u = ad.concat([_modulate(h_pert, sa_p, ca_p), _modulate(h_ctrl, sa_c, ca_c)])
    dp, dc = ad.split(_attention(u, P, p + "attn.", cfg.heads), [d, d])
    h_pert = h_pert + ga_p * dp
    h_ctrl = h_ctrl + ga_c * dc

    def mlp(h, stream, shift, scale):
        x = _modulate(h, shift, scale)
        x = ad.relu(x @ P[p + f"mlp_{stream}.W1"] + P[p + f"mlp_{stream}.b1"])
        return x @ P[p + f"mlp_{stream}.W2"] + P[p + f"mlp_{stream}.b2"]

    h_pert = h_pert + gm_p * mlp(h_pert, "pert", sm_p, cm_p)
    h_ctrl = h_ctrl + gm_c * mlp(h_ctrl, "ctrl", sm_c, cm_c)
    return h_pert, h_ctrl


def denoise(
    P: dict,
    cfg: ModelConfig,
    x_t: Tensor,
    x_sc: Tensor | None,
    x_ctrl: Tensor,
    t,
    cond: ConditionBatch,
) -> Tensor:
    """Predict clean cells from a noised batch; all batches are (B, m, G)."""
    if x_t.shape != x_ctrl.shape or x_t.shape[-1] != cfg.n_genes or len(x_t.shape) != 3:
        raise ValueError(f"expected matching (B, m, {cfg.n_genes}) batches, got {x_t.shape}, {x_ctrl.shape}")
    B = x_t.shape[0]
    if len(cond) != B:
        raise ValueError(f"{len(cond)} conditions for {B} batches")
    d = cfg.width
    rec = x_t.record
    t = np.broadcast_to(np.asarray(t), (B,))
    if cfg.self_condition:
        if x_sc is None:
            x_sc = rec.constant(np.zeros(x_t.shape))
        if x_sc.shape != x_t.shape:
            raise ValueError("self-conditioning batch must match the noised batch")
        x_in = ad.concat([x_t, x_sc])
    else:
        x_in = x_t
    gene = P["gene_embedding"]
    h_pert = _linear(x_in, P, "in_pert") + x_t.sum(axis=-1, keepdims=True) * gene
    h_ctrl = _linear(x_ctrl, P, "in_ctrl") + x_ctrl.sum(axis=-1, keepdims=True) * gene
    e_t = embed_timestep(P, t, d)
    s_act = ad.relu(encode_covariates(P, cfg, cond, e_t))
    for i in range(cfg.depth):
        h_pert, h_ctrl = mmdit_block(P, cfg, i, h_pert, h_ctrl, s_act)
    shift, scale = ad.split(_linear(s_act, P, "final_mod"), [d, d])
    h = _modulate(h_pert, shift.reshape(B, 1, d), scale.reshape(B, 1, d))
    return ad.relu(_linear(h, P, "out"))


class Denoiser:
    """Inference wrapper: numpy in, numpy out, no gradients kept."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, B_t, B_sc, B_ctrl, t, cond, null: bool = False) -> np.ndarray:
        B_t = np.asarray(B_t, dtype=np.float64)
        squeeze = B_t.ndim == 2
        if squeeze:
            B_t, B_sc, B_ctrl = B_t[None], np.asarray(B_sc)[None], np.asarray(B_ctrl)[None]
        if not isinstance(cond, ConditionBatch):
            cond = ConditionBatch.stack(cond)
        if null:
            cond = ConditionBatch(
                cond.context, cond.perturbation, cond.dose, cond.batch,
                np.ones(len(cond), bool), np.ones(len(cond), bool),
            )
        rec = Record(check_finite=False)
        P = {k: rec.constant(v) for k, v in self.params.items()}
        out = denoise(
            P, self.cfg, rec.constant(B_t),
            rec.constant(B_sc) if self.cfg.self_condition else None,
            rec.constant(B_ctrl), t, cond,
        ).value
        return out[0] if squeeze else out


def flatten_params(params: dict, cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n, _ in param_shapes(cfg)])


def unflatten_params(flat: np.ndarray, cfg: ModelConfig) -> dict:
    out, pos = {}, 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != flat.size:
        raise ValueError(f"parameter vector has {flat.size} values, config needs {pos}")
    return out


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    flat = flatten_params(params, cfg)
    header = cfg.header() + [flat.size]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qq", FORMAT_VERSION, len(header)))
        fh.write(struct.pack(f"<{len(header)}q", *header))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Return ``(params, config)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<qq", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = struct.unpack_from(f"<{n}q", data, 24)
    names = [f.name for f in fields(ModelConfig)]
    kw = dict(zip(names, header[:-1]))
    kw["self_condition"] = bool(kw["self_condition"])
    cfg = ModelConfig(**kw)
    n_floats = header[-1]
    start = 24 + 8 * n
    if len(data) - start != 8 * n_floats:
        raise ValueError(f"{path}: expected {n_floats} parameters, found {(len(data) - start) // 8}")
    flat = np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64)
    return unflatten_params(flat, cfg), cfg
