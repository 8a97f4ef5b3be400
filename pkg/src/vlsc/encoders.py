"""Transformer encoders: vision (frame-token grid), text, and two-stream
fusion.

All blocks are pre-norm residual. The vision encoder keeps a fixed
(M, N+1, D) token grid per sample, frame [CLS] at index 0 of each frame;
masked patches are substituted with a learned mask embedding before the
positional sums so geometry never changes. The fusion encoder runs
modality self-attention then symmetric cross-attention per layer and
retains the text-to-vision attention weights of every layer for
visualization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .synthdata import PAD_ID
from .tensor import ParamRegistry, Tensor, trunc_normal

VARIANTS = ("FrameCLS", "MeanPooling", "GlobalCLS")

NEG_INF = -1e30  # additive mask value; true -inf breaks finite-difference probes


@dataclass
class ModelConfig:
    embed_dim: int = 32
    heads: int = 4
    layers_v: int = 2
    layers_t: int = 2
    layers_f: int = 2
    patch_size: int = 4
    canvas: int = 16
    channels: int = 3
    max_frames: int = 4
    k_max: int = 16
    vocab_size: int = 64
    variant: str = "FrameCLS"
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.canvas % self.patch_size != 0:
            raise ConfigError("patch_size must divide the canvas side")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown vision variant: {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def grid_side(self) -> int:
        return self.canvas // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2


# parameter helpers; every site registers under a unique dotted name


def linear_params(reg: ParamRegistry, rng, name: str, d_in: int, d_out: int):
    reg.register(f"{name}.w", trunc_normal((d_in, d_out), rng))
    reg.register(f"{name}.b", np.zeros(d_out))


def linear(reg, name: str, x: Tensor) -> Tensor:
    return x @ reg[f"{name}.w"] + reg[f"{name}.b"]


def ln_params(reg: ParamRegistry, name: str, d: int):
    reg.register(f"{name}.g", np.ones(d))
    reg.register(f"{name}.b", np.zeros(d))


def ln(reg, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, reg[f"{name}.g"], reg[f"{name}.b"])


def attention_params(reg, rng, name: str, d: int):
    for proj in ("q", "k", "v", "o"):
        linear_params(reg, rng, f"{name}.{proj}", d, d)


def ffn_params(reg, rng, name: str, d: int):
    linear_params(reg, rng, f"{name}.1", d, 4 * d)
    linear_params(reg, rng, f"{name}.2", 4 * d, d)


def ffn(reg, name: str, x: Tensor) -> Tensor:
    return linear(reg, f"{name}.2", T.gelu(linear(reg, f"{name}.1", x)))


def split_heads(x: Tensor, h: int) -> Tensor:
    *lead, length, d = x.shape
    y = x.reshape(*lead, length, h, d // h)
    perm = list(range(len(y.shape)))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return y.transpose(tuple(perm))


def merge_heads(x: Tensor) -> Tensor:
    perm = list(range(len(x.shape)))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    y = x.transpose(tuple(perm))
    *lead, length, h, dh = y.shape
    return y.reshape(*lead, length, h * dh)


def attention(reg, name: str, q_in: Tensor, kv_in: Tensor, heads: int,
              mask=None, return_weights: bool = False):
    """Multi-head attention; q_in (..., Q, D), kv_in (..., K, D)."""
    q = split_heads(linear(reg, f"{name}.q", q_in), heads)
    k = split_heads(linear(reg, f"{name}.k", kv_in), heads)
    v = split_heads(linear(reg, f"{name}.v", kv_in), heads)
    if return_weights:
        out, w = T.scaled_dot_attention(q, k, v, mask=mask,
                                        return_weights=True)
    else:
        out = T.scaled_dot_attention(q, k, v, mask=mask)
        w = None
    out = linear(reg, f"{name}.o", merge_heads(out))
    return (out, w) if return_weights else out


def _drop(x: Tensor, p: float, train: bool, rng) -> Tensor:
    if train and p > 0.0:
        if rng is None:
            raise ConfigError("training forward needs an rng for dropout")
        return T.dropout(x, p, rng)
    return x


def text_additive_mask(ids: np.ndarray) -> np.ndarray:
    """(B, 1, 1, K) additive attention mask blocking [PAD] key slots."""
    ids = np.asarray(ids)
    return np.where(ids != PAD_ID, 0.0, NEG_INF)[:, None, None, :]


@dataclass
class VisionOut:
    grid: Tensor            # (B, M, N+1, D) after the final norm
    flat: Tensor            # (B, n_vis, D) fusion input (global appended last)
    enc_global: Tensor      # (B, D)
    token_frames: np.ndarray   # (n_vis,) frame index, -1 for the global token
    token_patches: np.ndarray  # (n_vis,) patch index, -1 for [CLS]/global


class VisionEncoder:
    """VisualBlock stack over the per-frame token grid."""

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig):
        self.reg = reg
        self.cfg = cfg

    def build(self, rng) -> None:
        reg, cfg = self.reg, self.cfg
        d = cfg.embed_dim
        patch_dim = cfg.channels * cfg.patch_size ** 2
        linear_params(reg, rng, "vision.patch_proj", patch_dim, d)
        reg.register("vision.cls", trunc_normal((d,), rng))
        reg.register("vision.mask_emb", trunc_normal((d,), rng))
        reg.register("vision.pos_spatial",
                     trunc_normal((cfg.n_patches + 1, d), rng))
        reg.register("vision.pos_temporal",
                     trunc_normal((cfg.max_frames, d), rng))
        if cfg.variant == "GlobalCLS":
            reg.register("vision.global_cls", trunc_normal((d,), rng))
        for l in range(cfg.layers_v):
            p = f"vision.l{l}"
            ln_params(reg, f"{p}.ln1", d)
            if cfg.variant == "FrameCLS":
                attention_params(reg, rng, f"{p}.temporal", d)
            if cfg.variant == "GlobalCLS":
                attention_params(reg, rng, f"{p}.global", d)
            attention_params(reg, rng, f"{p}.spatial", d)
            ln_params(reg, f"{p}.ln2", d)
            ffn_params(reg, rng, f"{p}.ffn", d)
        ln_params(reg, "vision.ln_f", d)

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        b, m, c, h, w = frames.shape
        if c != cfg.channels or h != cfg.canvas or w != cfg.canvas:
            raise ShapeError(
                f"frames (C,H,W)=({c},{h},{w}) do not match the config "
                f"({cfg.channels},{cfg.canvas},{cfg.canvas})")
        p = cfg.patch_size
        gs = cfg.grid_side
        x = frames.reshape(b, m, c, gs, p, gs, p)
        x = x.transpose(0, 1, 3, 5, 2, 4, 6)
        return x.reshape(b, m, gs * gs, c * p * p)

    def embed(self, frames: np.ndarray, visual_mask=None) -> Tensor:
        """Token grid before any block: patch projection, mask-embedding
        substitution, per-frame [CLS], then the temporal+spatial
        positional sums."""
        reg, cfg = self.reg, self.cfg
        b, m = frames.shape[0], frames.shape[1]
        if m > cfg.max_frames:
            raise ShapeError(f"M={m} exceeds max_frames={cfg.max_frames}")
        d = cfg.embed_dim
        n = cfg.n_patches

        v = Tensor(self._patchify(frames)) @ reg["vision.patch_proj.w"] \
            + reg["vision.patch_proj.b"]
        if visual_mask is not None and np.any(visual_mask):
            mf = np.asarray(visual_mask, dtype=np.float64)[..., None]
            if mf.shape[:3] != (b, m, n):
                raise ShapeError("visual_mask must be (B, M, N)")
            v = v * Tensor(1.0 - mf) + reg["vision.mask_emb"] * Tensor(mf)

        cls = reg["vision.cls"].reshape(1, 1, 1, d) \
            + Tensor(np.zeros((b, m, 1, d)))
        g = T.concat([cls, v], axis=2)
        return g + reg["vision.pos_temporal"][:m].reshape(1, m, 1, d) \
                 + reg["vision.pos_spatial"].reshape(1, 1, n + 1, d)

    def __call__(self, frames: np.ndarray, visual_mask=None,
                 train: bool = False, rng=None) -> VisionOut:
        reg, cfg = self.reg, self.cfg
        b, m = frames.shape[0], frames.shape[1]
        d = cfg.embed_dim
        n = cfg.n_patches
        g = self.embed(frames, visual_mask=visual_mask)

        glob = None
        if cfg.variant == "GlobalCLS":
            glob = reg["vision.global_cls"].reshape(1, d) \
                + Tensor(np.zeros((b, d)))

        for l in range(cfg.layers_v):
            g, glob = self._block(g, glob, l, train, rng)

        grid = ln(reg, "vision.ln_f", g)
        flat = grid.reshape(b, m * (n + 1), d)
        token_frames = np.repeat(np.arange(m), n + 1)
        token_patches = np.tile(np.concatenate(([-1], np.arange(n))), m)
        if cfg.variant == "GlobalCLS":
            glob_out = ln(reg, "vision.ln_f", glob)
            flat = T.concat([flat, glob_out.reshape(b, 1, d)], axis=1)
            token_frames = np.concatenate([token_frames, [-1]])
            token_patches = np.concatenate([token_patches, [-1]])
            enc_global = glob_out
        else:
            enc_global = grid[:, :, 0, :].mean(axis=1)
        return VisionOut(grid=grid, flat=flat, enc_global=enc_global,
                         token_frames=token_frames,
                         token_patches=token_patches)

    def _block(self, g: Tensor, glob, l: int, train: bool, rng):
        reg, cfg = self.reg, self.cfg
        b, m, np1, d = g.shape
        h = cfg.heads
        p = f"vision.l{l}"
        x = ln(reg, f"{p}.ln1", g)

        if cfg.variant == "FrameCLS":
            # temporal: the M frame-[CLS] query over every token of every
            # frame; spatial: patch queries within their own frame. Both
            # read the same block input.
            q_cls = x[:, :, 0, :]
            all_tok = x.reshape(b, m * np1, d)
            t_out = attention(reg, f"{p}.temporal", q_cls, all_tok, h)
            s_out = attention(reg, f"{p}.spatial", x[:, :, 1:, :], x, h)
            cls_new = g[:, :, 0, :] + _drop(t_out, cfg.dropout, train, rng)
            patch_new = g[:, :, 1:, :] + _drop(s_out, cfg.dropout, train, rng)
            g = T.concat([cls_new.reshape(b, m, 1, d), patch_new], axis=2)
        else:
            # MeanPooling / GlobalCLS: frames never exchange information
            # through the grid; each frame is self-attended in isolation
            s_out = attention(reg, f"{p}.spatial", x, x, h)
            g = g + _drop(s_out, cfg.dropout, train, rng)

        if cfg.variant == "GlobalCLS":
            xg = ln(reg, f"{p}.ln1", glob).reshape(b, 1, d)
            keys = T.concat([xg, x.reshape(b, m * np1, d)], axis=1)
            g_out = attention(reg, f"{p}.global", xg, keys, h)
            glob = glob + _drop(g_out.reshape(b, d), cfg.dropout, train, rng)
            fg = ffn(reg, f"{p}.ffn", ln(reg, f"{p}.ln2", glob))
            glob = glob + _drop(fg, cfg.dropout, train, rng)

        f = ffn(reg, f"{p}.ffn", ln(reg, f"{p}.ln2", g))
        g = g + _drop(f, cfg.dropout, train, rng)
        return g, glob


@dataclass
class TextOut:
    tokens: Tensor          # (B, K, D)
    enc_global: Tensor      # (B, D), the [CLS] slot
    additive_mask: np.ndarray  # (B, 1, 1, K)


class TextEncoder:
    def __init__(self, reg: ParamRegistry, cfg: ModelConfig):
        self.reg = reg
        self.cfg = cfg

    def build(self, rng) -> None:
        reg, cfg = self.reg, self.cfg
        d = cfg.embed_dim
        reg.register("text.tok_emb", trunc_normal((cfg.vocab_size, d), rng))
        reg.register("text.pos_emb", trunc_normal((cfg.k_max, d), rng))
        for l in range(cfg.layers_t):
            p = f"text.l{l}"
            ln_params(reg, f"{p}.ln1", d)
            attention_params(reg, rng, f"{p}.attn", d)
            ln_params(reg, f"{p}.ln2", d)
            ffn_params(reg, rng, f"{p}.ffn", d)
        ln_params(reg, "text.ln_f", d)

    def __call__(self, ids: np.ndarray, train: bool = False,
                 rng=None) -> TextOut:
        reg, cfg = self.reg, self.cfg
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError("caption batch must be (B, K)")
        b, k = ids.shape
        if k > cfg.k_max:
            raise ShapeError(f"caption length {k} exceeds k_max={cfg.k_max}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise InputError("token id outside the vocabulary")
        if np.any((ids != PAD_ID).sum(axis=1) == 0):
            raise InputError("all-pad caption in batch")
        d = cfg.embed_dim
        h = cfg.heads

        g = T.embedding(reg["text.tok_emb"], ids) \
            + reg["text.pos_emb"][:k].reshape(1, k, d)
        mask = text_additive_mask(ids)
        for l in range(cfg.layers_t):
            p = f"text.l{l}"
            x = ln(reg, f"{p}.ln1", g)
            a = attention(reg, f"{p}.attn", x, x, h, mask=mask)
            g = g + _drop(a, cfg.dropout, train, rng)
            f = ffn(reg, f"{p}.ffn", ln(reg, f"{p}.ln2", g))
            g = g + _drop(f, cfg.dropout, train, rng)
        out = ln(reg, "text.ln_f", g)
        return TextOut(tokens=out, enc_global=out[:, 0, :],
                       additive_mask=mask)


@dataclass
class FusionOut:
    vision_tokens: Tensor   # (B, n_vis, D)
    text_tokens: Tensor     # (B, K, D)
    # text-query -> vision-key attention weights, one (B, h, K, n_vis)
    # tensor per layer, rows summing to 1
    cross_attention: list = field(default_factory=list)


class FusionEncoder:
    """Two streams per layer: modality self-attention, then symmetric
    cross-attention (vision queries text and text queries vision, both
    reading the post-self-attention state of the other stream), then FFN.
    """

    def __init__(self, reg: ParamRegistry, cfg: ModelConfig):
        self.reg = reg
        self.cfg = cfg

    def build(self, rng) -> None:
        reg, cfg = self.reg, self.cfg
        d = cfg.embed_dim
        for l in range(cfg.layers_f):
            for s in ("v", "t"):
                p = f"fusion.l{l}.{s}"
                ln_params(reg, f"{p}.ln1", d)
                attention_params(reg, rng, f"{p}.self", d)
                ln_params(reg, f"{p}.ln2", d)
                ln_params(reg, f"{p}.lnkv", d)
                attention_params(reg, rng, f"{p}.cross", d)
                ln_params(reg, f"{p}.ln3", d)
                ffn_params(reg, rng, f"{p}.ffn", d)
        ln_params(reg, "fusion.v_ln_f", d)
        ln_params(reg, "fusion.t_ln_f", d)

    def __call__(self, gv: Tensor, gt: Tensor, text_mask: np.ndarray,
                 train: bool = False, rng=None) -> FusionOut:
        reg, cfg = self.reg, self.cfg
        h = cfg.heads
        dp = cfg.dropout
        weights = []
        for l in range(cfg.layers_f):
            pv, pt = f"fusion.l{l}.v", f"fusion.l{l}.t"
            xv = ln(reg, f"{pv}.ln1", gv)
            gv1 = gv + _drop(attention(reg, f"{pv}.self", xv, xv, h),
                             dp, train, rng)
            xt = ln(reg, f"{pt}.ln1", gt)
            gt1 = gt + _drop(attention(reg, f"{pt}.self", xt, xt, h,
                                       mask=text_mask), dp, train, rng)

            qv = ln(reg, f"{pv}.ln2", gv1)
            kvt = ln(reg, f"{pv}.lnkv", gt1)
            cv = attention(reg, f"{pv}.cross", qv, kvt, h, mask=text_mask)
            qt = ln(reg, f"{pt}.ln2", gt1)
            kvv = ln(reg, f"{pt}.lnkv", gv1)
            ct, w = attention(reg, f"{pt}.cross", qt, kvv, h,
                              return_weights=True)
            gv2 = gv1 + _drop(cv, dp, train, rng)
            gt2 = gt1 + _drop(ct, dp, train, rng)
            weights.append(w)

            gv = gv2 + _drop(ffn(reg, f"{pv}.ffn", ln(reg, f"{pv}.ln3", gv2)),
                             dp, train, rng)
            gt = gt2 + _drop(ffn(reg, f"{pt}.ffn", ln(reg, f"{pt}.ln3", gt2)),
                             dp, train, rng)
        return FusionOut(vision_tokens=ln(reg, "fusion.v_ln_f", gv),
                         text_tokens=ln(reg, "fusion.t_ln_f", gt),
                         cross_attention=weights)
