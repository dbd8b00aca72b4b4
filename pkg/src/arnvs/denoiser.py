"""Noise-prediction network with explicit forward and backward passes.

Architecture: patch-token transformer. Each block applies spatial attention
within a frame followed by an MLP; the deeper blocks additionally run
frame-wise attention across frames with pose-encoded queries/keys and
frame-level causal gathering. Per-frame noise-level embeddings are added to
every token of a frame. Gradients are hand-written (no autograd) and verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attention import FlopCounter, KVCacheLayer
from .cape import key_matrix, query_matrix
from .geometry import Pose

LN_EPS = 1e-5


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 2
    width: int = 128
    depth: int = 6
    heads: int = 4
    head_dim: int = 32
    framewise_attention_at: tuple = (3, 4, 5)
    noise_embed_dim: int = 64
    num_timesteps: int = 64
    zero_init_frame_attention: bool = True
    cape_enabled: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise DenoiserError("image_size must be divisible by patch_size")
        if self.width != self.heads * self.head_dim:
            raise DenoiserError("width must equal heads * head_dim")
        if self.cape_enabled and self.head_dim % 4 != 0:
            raise DenoiserError("head_dim must be divisible by 4 with pose encoding")
        if self.noise_embed_dim % 2 != 0:
            raise DenoiserError("noise_embed_dim must be even")
        bad = [i for i in self.framewise_attention_at if not 0 <= i < self.depth]
        if bad:
            raise DenoiserError(f"framewise_attention_at indices out of range: {bad}")
        object.__setattr__(self, "framewise_attention_at", tuple(sorted(self.framewise_attention_at)))

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "framewise_attention_at": list(self.framewise_attention_at),
            "noise_embed_dim": self.noise_embed_dim,
            "num_timesteps": self.num_timesteps,
            "zero_init_frame_attention": self.zero_init_frame_attention,
            "cape_enabled": self.cape_enabled,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_json(data: dict) -> "DenoiserConfig":
        data = dict(data)
        data["framewise_attention_at"] = tuple(data["framewise_attention_at"])
        return DenoiserConfig(**data)


@dataclass
class NoisyFrameBatch:
    """A batch of frame sequences: noisy images with poses and timesteps.

    images: (B, F, H, W, C) in roughly [-1, 1]; poses: nested [B][F] Pose;
    timesteps: (B, F) ints in [0, T); eps: matching true-noise targets for the
    loss; loss_mask: (B, F), 1 where a frame contributes to the loss (the
    non-causal baseline zeroes its clean conditioning frames).
    """

    images: np.ndarray
    poses: list
    timesteps: np.ndarray
    eps: np.ndarray | None = None
    loss_mask: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.images.ndim != 5:
            raise DenoiserError("images must be (B, F, H, W, C)")
        b, f = self.images.shape[:2]
        if self.timesteps.shape != (b, f):
            raise DenoiserError("timesteps must be (B, F)")
        if len(self.poses) != b or any(len(row) != f for row in self.poses):
            raise DenoiserError("poses must be nested [B][F]")
        if self.eps is not None and np.asarray(self.eps).shape != self.images.shape:
            raise DenoiserError("eps must match images shape")
        if self.loss_mask is None:
            self.loss_mask = np.ones((b, f))
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.float64)
        if self.loss_mask.shape != (b, f):
            raise DenoiserError("loss_mask must be (B, F)")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Fixed sin/cos table row(s) for integer timestep(s) t."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# tanh-form gelu: much faster than the erf form on CPU and standard practice
_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def _gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    return xhat * g + b, (xhat, istd)

def _layernorm_bwd(dout, g, tape):
    xhat, istd = tape
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = istd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _linear_fwd(x, w, b):
    return x @ w + b

def _linear_bwd(x, w, dout):
    dx = dout @ w.T
    xf = x.reshape(-1, x.shape[-1])
    df = dout.reshape(-1, dout.shape[-1])
    return dx, xf.T @ df, df.sum(axis=0)


def _attention_fwd(q, k, v, scale, counter: FlopCounter | None = None):
    """(Bh, Nq, D) x (Bh, Nk, D) -> out, probs via the selected kernel."""
    out, probs = kernels.attention_forward(
        np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v), scale
    )
    if counter is not None:
        counter.total += 4 * q.shape[0] * q.shape[1] * k.shape[1] * q.shape[2]
    return out, probs

def _attention_bwd(q, k, v, probs, scale, dout):
    dv = probs.transpose(0, 2, 1) @ dout
    dp = dout @ v.transpose(0, 2, 1)
    ds = probs * (dp - (dp * probs).sum(axis=2, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.transpose(0, 2, 1) @ q)
    return dq, dk, dv


def _blockwise_fwd(x, mats):
    """Apply per-sequence-element 4x4 matrices to 4-blocks of the last axis.

    x: (B, F, h, S, D) with D % 4 == 0; mats: (B, F, 4, 4).
    """
    b, f, h, s, d = x.shape
    blocks = x.reshape(b * f, h * s * (d // 4), 4)
    m = mats.reshape(b * f, 4, 4).astype(x.dtype, copy=False)
    return (blocks @ m.transpose(0, 2, 1)).reshape(x.shape)

def _blockwise_bwd(dout, mats):
    b, f, h, s, d = dout.shape
    blocks = dout.reshape(b * f, h * s * (d // 4), 4)
    m = mats.reshape(b * f, 4, 4).astype(dout.dtype, copy=False)
    return (blocks @ m).reshape(dout.shape)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., S, patch*patch*C), row-major patch order."""
    *lead, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, image_size: int, channels: int) -> np.ndarray:
    *lead, s, pd = tokens.shape
    g = image_size // patch
    x = tokens.reshape(*lead, g, g, patch, patch, channels)
    x = np.moveaxis(x, -3, -4)  # (..., g, patch, g, patch, c)
    return x.reshape(*lead, image_size, image_size, channels)


def _split_heads(x, heads):
    b, f, s, w = x.shape
    return np.ascontiguousarray(x.reshape(b, f, s, heads, w // heads).transpose(0, 1, 3, 2, 4))

def _merge_heads(x):
    b, f, h, s, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4)).reshape(b, f, s, h * d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> dict:
    """Fresh parameter dict keyed by block and role."""
    dt = config.np_dtype
    w = config.width

    def dense(n_in, n_out, std=0.02):
        return (rng.normal(scale=std, size=(n_in, n_out))).astype(dt)

    params = {
        "patch_embed.w": dense(config.patch_dim, w),
        "patch_embed.b": np.zeros(w, dtype=dt),
        "pos_embed": rng.normal(scale=0.02, size=(config.tokens_per_frame, w)).astype(dt),
        "noise_mlp.w1": dense(config.noise_embed_dim, w),
        "noise_mlp.b1": np.zeros(w, dtype=dt),
        "noise_mlp.w2": dense(w, w),
        "noise_mlp.b2": np.zeros(w, dtype=dt),
        "head.ln.g": np.ones(w, dtype=dt),
        "head.ln.b": np.zeros(w, dtype=dt),
        "head.w": np.zeros((w, config.patch_dim), dtype=dt),
        "head.b": np.zeros(config.patch_dim, dtype=dt),
    }
    for i in range(config.depth):
        groups = ["attn"] + (["frame"] if i in config.framewise_attention_at else [])
        for grp in groups:
            p = f"block{i}.{grp}"
            params[f"{p}.ln.g"] = np.ones(w, dtype=dt)
            params[f"{p}.ln.b"] = np.zeros(w, dtype=dt)
            for name in ("wq", "wk", "wv"):
                params[f"{p}.{name}"] = dense(w, w)
            if grp == "frame" and config.zero_init_frame_attention:
                params[f"{p}.wo"] = np.zeros((w, w), dtype=dt)
            else:
                params[f"{p}.wo"] = dense(w, w)
            for name in ("bq", "bk", "bv", "bo"):
                params[f"{p}.{name}"] = np.zeros(w, dtype=dt)
        p = f"block{i}.mlp"
        params[f"{p}.ln.g"] = np.ones(w, dtype=dt)
        params[f"{p}.ln.b"] = np.zeros(w, dtype=dt)
        params[f"{p}.w1"] = dense(w, 4 * w)
        params[f"{p}.b1"] = np.zeros(4 * w, dtype=dt)
        params[f"{p}.w2"] = dense(4 * w, w)
        params[f"{p}.b2"] = np.zeros(w, dtype=dt)
    return params


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def embed_noise_level(params: dict, t, config: DenoiserConfig) -> np.ndarray:
    """Sinusoidal base followed by the learned two-layer map; (..., width)."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= config.num_timesteps):
        raise DenoiserError(f"timestep out of range [0, {config.num_timesteps})")
    base = sinusoidal_embedding(t_arr, config.noise_embed_dim).astype(config.np_dtype)
    h = _linear_fwd(base, params["noise_mlp.w1"], params["noise_mlp.b1"])
    return _linear_fwd(_gelu(h), params["noise_mlp.w2"], params["noise_mlp.b2"])


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def forward(
    params: dict,
    batch: NoisyFrameBatch,
    config: DenoiserConfig,
    caches: dict[int, KVCacheLayer] | None = None,
    causal: bool = True,
    tape: dict | None = None,
    counter: FlopCounter | None = None,
    collect_kv: bool = False,
):
    """Predict per-frame noise; (B, F, H, W, C) matching batch.images.

    caches maps framewise block index -> KVCacheLayer whose entries precede
    all in-batch frames (requires B == 1). With tape given, intermediates are
    recorded for backward(). collect_kv additionally returns this batch's
    post-encoding keys/values per framewise layer (used to commit frames).
    """
    dt = config.np_dtype
    x_img = batch.images.astype(dt, copy=False)
    b, f = x_img.shape[:2]
    if x_img.shape[2] != config.image_size or x_img.shape[4] != config.channels:
        raise DenoiserError("batch images do not match config image size/channels")
    if caches and b != 1:
        raise DenoiserError("cached forward supports batch size 1 only")

    scale = 1.0 / math.sqrt(config.head_dim)
    patches = patchify(x_img, config.patch_size)
    x = _linear_fwd(patches, params["patch_embed.w"], params["patch_embed.b"])

    sin_base = sinusoidal_embedding(batch.timesteps, config.noise_embed_dim).astype(dt)
    nh = _linear_fwd(sin_base, params["noise_mlp.w1"], params["noise_mlp.b1"])
    ng = _gelu(nh)
    nemb = _linear_fwd(ng, params["noise_mlp.w2"], params["noise_mlp.b2"])
    x = x + params["pos_embed"][None, None] + nemb[:, :, None, :]

    if config.cape_enabled:
        kmats = np.stack([np.stack([key_matrix(p) for p in row]) for row in batch.poses])
        qmats = np.stack([np.stack([query_matrix(p) for p in row]) for row in batch.poses])
    else:
        kmats = qmats = None

    if tape is not None:
        tape.update(patches=patches, sin_base=sin_base, nh=nh, ng=ng, kmats=kmats, qmats=qmats, blocks=[])

    kv_out = {} if collect_kv else None

    for i in range(config.depth):
        blk = {} if tape is not None else None

        # spatial attention within each frame
        p = f"block{i}.attn"
        h, ln_tape = _layernorm_fwd(x, params[f"{p}.ln.g"], params[f"{p}.ln.b"])
        q = _split_heads(_linear_fwd(h, params[f"{p}.wq"], params[f"{p}.bq"]), config.heads)
        k = _split_heads(_linear_fwd(h, params[f"{p}.wk"], params[f"{p}.bk"]), config.heads)
        v = _split_heads(_linear_fwd(h, params[f"{p}.wv"], params[f"{p}.bv"]), config.heads)
        bh = b * f * config.heads
        s_tok = config.tokens_per_frame
        qf = q.reshape(bh, s_tok, config.head_dim)
        kf = k.reshape(bh, s_tok, config.head_dim)
        vf = v.reshape(bh, s_tok, config.head_dim)
        att, probs = _attention_fwd(qf, kf, vf, scale)
        att = _merge_heads(att.reshape(b, f, config.heads, s_tok, config.head_dim))
        proj = _linear_fwd(att, params[f"{p}.wo"], params[f"{p}.bo"])
        if blk is not None:
            blk["attn"] = dict(x_in=x, h=h, ln=ln_tape, q=qf, k=kf, v=vf, probs=probs, att=att)
        x = x + proj

        # frame-wise attention across frames
        if i in config.framewise_attention_at:
            p = f"block{i}.frame"
            h, ln_tape = _layernorm_fwd(x, params[f"{p}.ln.g"], params[f"{p}.ln.b"])
            q = _split_heads(_linear_fwd(h, params[f"{p}.wq"], params[f"{p}.bq"]), config.heads)
            k = _split_heads(_linear_fwd(h, params[f"{p}.wk"], params[f"{p}.bk"]), config.heads)
            v = _split_heads(_linear_fwd(h, params[f"{p}.wv"], params[f"{p}.bv"]), config.heads)
            if config.cape_enabled:
                q_enc = _blockwise_fwd(q, qmats)
                k_enc = _blockwise_fwd(k, kmats)
            else:
                q_enc, k_enc = q, k
            if collect_kv:
                # Per-frame (keys, values) of batch element 0, keys post-encoding.
                kv_out[i] = [
                    (np.ascontiguousarray(k_enc[0, j]), np.ascontiguousarray(v[0, j]))
                    for j in range(f)
                ]

            cache = caches.get(i) if caches else None
            n_cached = len(cache.entries) if cache is not None else 0
            if cache is not None and n_cached:
                ck = np.concatenate([e.keys for e in cache.entries], axis=1)[None].astype(dt, copy=False)
                cv = np.concatenate([e.values for e in cache.entries], axis=1)[None].astype(dt, copy=False)
            else:
                ck = cv = None

            outs = []
            frame_tapes = []
            for fi in range(f):
                last = fi + 1 if causal else f
                k_parts = [k_enc[:, :last].transpose(0, 2, 1, 3, 4).reshape(b, config.heads, last * s_tok, config.head_dim)]
                v_parts = [v[:, :last].transpose(0, 2, 1, 3, 4).reshape(b, config.heads, last * s_tok, config.head_dim)]
                if ck is not None:
                    k_parts.insert(0, ck)
                    v_parts.insert(0, cv)
                k_all = np.concatenate(k_parts, axis=2).reshape(b * config.heads, -1, config.head_dim)
                v_all = np.concatenate(v_parts, axis=2).reshape(b * config.heads, -1, config.head_dim)
                q_fi = q_enc[:, fi].reshape(b * config.heads, s_tok, config.head_dim)
                out_fi, probs_fi = _attention_fwd(q_fi, k_all, v_all, scale, counter)
                outs.append(out_fi.reshape(b, config.heads, s_tok, config.head_dim))
                if blk is not None:
                    frame_tapes.append(dict(q=q_fi, k=k_all, v=v_all, probs=probs_fi, last=last))
            att = _merge_heads(np.stack(outs, axis=1))
            proj = _linear_fwd(att, params[f"{p}.wo"], params[f"{p}.bo"])
            if blk is not None:
                blk["frame"] = dict(
                    x_in=x, h=h, ln=ln_tape, q=q, k=k, v=v, q_enc=q_enc, k_enc=k_enc,
                    frames=frame_tapes, att=att, n_cached_tokens=(n_cached * s_tok),
                )
            x = x + proj

        # MLP
        p = f"block{i}.mlp"
        h, ln_tape = _layernorm_fwd(x, params[f"{p}.ln.g"], params[f"{p}.ln.b"])
        u = _linear_fwd(h, params[f"{p}.w1"], params[f"{p}.b1"])
        g = _gelu(u)
        proj = _linear_fwd(g, params[f"{p}.w2"], params[f"{p}.b2"])
        if blk is not None:
            blk["mlp"] = dict(x_in=x, h=h, ln=ln_tape, u=u, g=g)
            tape["blocks"].append(blk)
        x = x + proj

    h, ln_tape = _layernorm_fwd(x, params["head.ln.g"], params["head.ln.b"])
    tokens = _linear_fwd(h, params["head.w"], params["head.b"])
    if tape is not None:
        tape.update(head_x=x, head_h=h, head_ln=ln_tape)
    eps_hat = unpatchify(tokens, config.patch_size, config.image_size, config.channels)
    if collect_kv:
        return eps_hat, kv_out
    return eps_hat

# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(params: dict, tape: dict, dout: np.ndarray, config: DenoiserConfig, causal: bool = True) -> dict:
    """Parameter gradients for a taped forward pass; dout matches eps_hat."""
    grads = zero_grads(params)
    b, f = dout.shape[:2]
    s_tok = config.tokens_per_frame
    heads, hd = config.heads, config.head_dim
    scale = 1.0 / math.sqrt(hd)

    d_tokens = patchify(dout.astype(config.np_dtype, copy=False), config.patch_size)
    dh, grads["head.w"], grads["head.b"] = _linear_bwd(tape["head_h"], params["head.w"], d_tokens)
    dx, grads["head.ln.g"], grads["head.ln.b"] = _layernorm_bwd(dh, params["head.ln.g"], tape["head_ln"])

    for i in range(config.depth - 1, -1, -1):
        blk = tape["blocks"][i]

        # MLP
        p = f"block{i}.mlp"
        t = blk["mlp"]
        dg, grads[f"{p}.w2"], grads[f"{p}.b2"] = _linear_bwd(t["g"], params[f"{p}.w2"], dx)
        du = dg * _gelu_grad(t["u"])
        dh, grads[f"{p}.w1"], grads[f"{p}.b1"] = _linear_bwd(t["h"], params[f"{p}.w1"], du)
        dln, grads[f"{p}.ln.g"], grads[f"{p}.ln.b"] = _layernorm_bwd(dh, params[f"{p}.ln.g"], t["ln"])
        dx = dx + dln

        # frame-wise attention
        if i in config.framewise_attention_at:
            p = f"block{i}.frame"
            t = blk["frame"]
            datt, grads[f"{p}.wo"], grads[f"{p}.bo"] = _linear_bwd(t["att"], params[f"{p}.wo"], dx)
            datt = datt.reshape(b, f, s_tok, heads, hd).transpose(0, 1, 3, 2, 4)
            dq_enc = np.zeros_like(t["q_enc"])
            dk_enc = np.zeros_like(t["k_enc"])
            dv = np.zeros_like(t["v"])
            n_skip = t["n_cached_tokens"]
            for fi in range(f - 1, -1, -1):
                ft = t["frames"][fi]
                dout_fi = np.ascontiguousarray(datt[:, fi].reshape(b * heads, s_tok, hd))
                dq_fi, dk_all, dv_all = _attention_bwd(ft["q"], ft["k"], ft["v"], ft["probs"], scale, dout_fi)
                dq_enc[:, fi] += dq_fi.reshape(b, heads, s_tok, hd)
                last = ft["last"]
                dk_live = dk_all[:, n_skip:].reshape(b, heads, last, s_tok, hd).transpose(0, 2, 1, 3, 4)
                dv_live = dv_all[:, n_skip:].reshape(b, heads, last, s_tok, hd).transpose(0, 2, 1, 3, 4)
                dk_enc[:, :last] += dk_live
                dv[:, :last] += dv_live
            if config.cape_enabled:
                dq = _blockwise_bwd(dq_enc, tape["qmats"])
                dk = _blockwise_bwd(dk_enc, tape["kmats"])
            else:
                dq, dk = dq_enc, dk_enc
            dh = np.zeros_like(t["h"])
            for name, darr, src in (("wq", dq, "bq"), ("wk", dk, "bk"), ("wv", dv, "bv")):
                dmerged = _merge_heads(darr)
                dpart, grads[f"{p}.{name}"], grads[f"{p}.{src}"] = _linear_bwd(
                    t["h"], params[f"{p}.{name}"], dmerged
                )
                dh += dpart
            dln, grads[f"{p}.ln.g"], grads[f"{p}.ln.b"] = _layernorm_bwd(dh, params[f"{p}.ln.g"], t["ln"])
            dx = dx + dln

        # spatial attention
        p = f"block{i}.attn"
        t = blk["attn"]
        datt, grads[f"{p}.wo"], grads[f"{p}.bo"] = _linear_bwd(t["att"], params[f"{p}.wo"], dx)
        datt = np.ascontiguousarray(
            datt.reshape(b, f, s_tok, heads, hd).transpose(0, 1, 3, 2, 4)
        ).reshape(b * f * heads, s_tok, hd)
        dqf, dkf, dvf = _attention_bwd(t["q"], t["k"], t["v"], t["probs"], scale, datt)
        dh = np.zeros_like(t["h"])
        for name, darr, bias in (("wq", dqf, "bq"), ("wk", dkf, "bk"), ("wv", dvf, "bv")):
            dmerged = _merge_heads(darr.reshape(b, f, heads, s_tok, hd))
            dpart, grads[f"{p}.{name}"], grads[f"{p}.{bias}"] = _linear_bwd(
                t["h"], params[f"{p}.{name}"], dmerged
            )
            dh += dpart
        dln, grads[f"{p}.ln.g"], grads[f"{p}.ln.b"] = _layernorm_bwd(dh, params[f"{p}.ln.g"], t["ln"])
        dx = dx + dln

    # embeddings and patch projection
    grads["pos_embed"] = dx.sum(axis=(0, 1))
    dnemb = dx.sum(axis=2)
    dng, grads["noise_mlp.w2"], grads["noise_mlp.b2"] = _linear_bwd(tape["ng"], params["noise_mlp.w2"], dnemb)
    dnh = dng * _gelu_grad(tape["nh"])
    _, grads["noise_mlp.w1"], grads["noise_mlp.b1"] = _linear_bwd(tape["sin_base"], params["noise_mlp.w1"], dnh)
    _, grads["patch_embed.w"], grads["patch_embed.b"] = _linear_bwd(tape["patches"], params["patch_embed.w"], dx)
    return grads


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def per_frame_loss_terms(
    params: dict, batch: NoisyFrameBatch, config: DenoiserConfig, causal: bool = True
) -> np.ndarray:
    """(B, F) mean squared noise-prediction error per frame (mask ignored)."""
    if batch.eps is None:
        raise DenoiserError("batch.eps is required for the loss")
    eps_hat = forward(params, batch, config, causal=causal)
    err = eps_hat - batch.eps.astype(eps_hat.dtype, copy=False)
    return (err * err).mean(axis=(2, 3, 4))


def loss_causal(params: dict, batch: NoisyFrameBatch, config: DenoiserConfig, causal: bool = True) -> float:
    """Masked mean over frames of the per-frame pixel-mean squared error."""
    terms = per_frame_loss_terms(params, batch, config, causal=causal)
    mask = batch.loss_mask
    return float((terms * mask).sum() / mask.sum())


def loss_and_grads(
    params: dict, batch: NoisyFrameBatch, config: DenoiserConfig, causal: bool = True
):
    """(loss, grads) with gradients from the hand-written backward pass."""
    if batch.eps is None:
        raise DenoiserError("batch.eps is required for the loss")
    tape = {}
    eps_hat = forward(params, batch, config, causal=causal, tape=tape)
    eps = batch.eps.astype(eps_hat.dtype, copy=False)
    err = eps_hat - eps
    mask = batch.loss_mask
    terms = (err * err).mean(axis=(2, 3, 4))
    loss = float((terms * mask).sum() / mask.sum())
    n_pix = err[0, 0].size
    dout = (2.0 / (n_pix * mask.sum())) * err * mask[:, :, None, None, None].astype(err.dtype)
    grads = backward(params, tape, dout, config, causal=causal)
    return loss, grads
