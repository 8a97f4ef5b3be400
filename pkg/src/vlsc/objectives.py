"""Pre-training objectives.

Four losses over one shared model: contrastive alignment of the
uni-modal encoder globals, binary match classification and masked-token
prediction on the fused streams, and semantic completion, which runs two
extra full passes (masked image with complete text, complete image with
masked text) and pulls each recovered global toward its detached
complete counterpart with the other samples in the batch as negatives.
The total is the plain unweighted sum of whatever is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import masking as mk
from . import tensor as T
from .errors import ConfigError, InputError
from .model import PretrainModel
from .tensor import Tensor

SCL_TAU = 0.03


@dataclass
class ObjectiveConfig:
    cl: bool = True
    vtm: bool = True
    mlm: bool = True
    scl: bool = True
    image_mask_ratio: float = mk.IMAGE_MASK_RATIO
    text_mask_ratio: float = mk.TEXT_MASK_RATIO
    scl_tau: float = SCL_TAU
    mvsc: bool = True
    mlsc: bool = True

    def any_enabled(self) -> bool:
        return self.cl or self.vtm or self.mlm or self.scl


@dataclass
class GlobalPair:
    """SCL globals; the complete-pass features carry no gradient."""
    i_re: Tensor
    i_co: Tensor    # detached
    t_re: Tensor
    t_co: Tensor    # detached
    # pre-detach handles, kept for the gradient-isolation audit
    i_co_pre_detach: Tensor = None
    t_co_pre_detach: Tensor = None


@dataclass
class LossReport:
    # None marks a component that was disabled or skipped, which a log
    # must not conflate with a loss that happens to be zero
    cl: float | None = None
    vtm: float | None = None
    mlm: float | None = None
    scl: float | None = None
    total: float | None = None
    enabled: dict = field(default_factory=dict)
    mlm_skipped: bool = False


def info_nce(a: Tensor, b: Tensor, tau) -> Tensor:
    """-(1/B) sum_i log softmax_i of s(a_i, b_.)/tau at the diagonal."""
    if isinstance(tau, float) and tau <= 0:
        raise ConfigError("tau must be positive")
    n = a.shape[0]
    sims = T.cosine_similarity_matrix(a, b) / tau
    return T.cross_entropy(sims, np.arange(n))


def contrastive_loss(model: PretrainModel, v_enc_global: Tensor,
                     t_enc_global: Tensor) -> Tensor:
    """Both InfoNCE directions on projected encoder globals, learnable
    temperature clamped to its trust region."""
    v_proj, t_proj = model.project_globals(v_enc_global, t_enc_global)
    tau = model.cl_temperature()
    return info_nce(v_proj, t_proj, tau) + info_nce(t_proj, v_proj, tau)


def vtm_negative_indices(n: int, rng) -> np.ndarray:
    """One uniformly random other-index per sample, never the sample
    itself."""
    if n < 2:
        raise ConfigError("match loss needs batch size >= 2 for negatives")
    return (np.arange(n) + rng.integers(1, n, size=n)) % n


def vtm_loss(model: PretrainModel, fwd, frames_m: int, rng,
             train: bool = False) -> Tensor:
    """Binary matched/mismatched classification on fused globals.

    Positives come from the already-computed clean pass; negatives pair
    each caption with a randomly replaced vision stream and are fused
    separately (the encoded streams are reused, not recomputed).
    """
    n = fwd.v_flat.shape[0]
    neg = vtm_negative_indices(n, rng)
    _, v_neg_global, t_neg_global = model.fuse_pair(
        fwd.v_flat[neg], fwd.t_tokens, fwd.text_mask, frames_m,
        train=train, rng=rng)
    pos_logits = model.vtm_logits(fwd.v_global, fwd.t_global)
    neg_logits = model.vtm_logits(v_neg_global, t_neg_global)
    logits = T.concat([pos_logits, neg_logits], axis=0)
    labels = np.concatenate([np.ones(n, dtype=np.int64),
                             np.zeros(n, dtype=np.int64)])
    return T.cross_entropy(logits, labels)


def mlm_loss(model: PretrainModel, frames: np.ndarray, captions: np.ndarray,
             rng, train: bool = False):
    """Vocabulary cross-entropy at the planned masked positions of a
    masked-caption forward pass. Returns (loss, n_predicted)."""
    n = captions.shape[0]
    masked = np.empty_like(captions)
    rows, cols, labels = [], [], []
    for i in range(n):
        plan = mk.plan_mlm_mask(captions[i], rng,
                                vocab_size=model.config.vocab_size)
        masked[i] = mk.apply_text_plan(captions[i], plan)
        for pos in sorted(plan.text_actions):
            rows.append(i)
            cols.append(pos)
            labels.append(plan.original_ids[pos])
    if not rows:
        return None, 0
    out = model.forward(frames, masked, train=train, rng=rng)
    picked = out.fusion.text_tokens[np.asarray(rows), np.asarray(cols)]
    logits = model.mlm_logits(picked)
    return T.cross_entropy(logits, np.asarray(labels)), len(rows)


def scl_loss(model: PretrainModel, frames: np.ndarray, captions: np.ndarray,
             image_ratio: float, text_ratio: float, rng,
             tau: float = SCL_TAU, mvsc: bool = True, mlsc: bool = True,
             train: bool = False, strict: bool = False,
             frozen_targets=None):
    """Semantic completion: exactly two forward passes.

    Pass 1 masks the image and keeps the text complete; pass 2 keeps the
    image complete and masks the text. Each recovered global is matched
    against the *detached* complete global from the other pass, with the
    rest of the batch as negatives. Returns (loss, GlobalPair).

    frozen_targets, if given as (i_co_array, t_co_array), replaces the
    detached complete globals with fixed constants. Finite-difference
    verification needs this: a stop-gradient loss is only differentiable
    against probes that hold the targets still, which is also exactly
    the function a training step descends.
    """
    if not (mvsc or mlsc):
        raise ConfigError("semantic completion needs at least one side on")
    if strict and (image_ratio == 0.0 or text_ratio == 0.0):
        raise ConfigError("degenerate mask ratio 0 in strict mode")
    n, m = frames.shape[0], frames.shape[1]
    n_patches = model.config.n_patches

    visual_mask = np.zeros((n, m, n_patches), dtype=bool)
    for i in range(n):
        for f, p in mk.plan_image_mask(m, n_patches, image_ratio, rng):
            visual_mask[i, f, p] = True
    masked_caps = np.empty_like(captions)
    for i in range(n):
        plan = mk.plan_scl_text_mask(captions[i], text_ratio, rng)
        masked_caps[i] = mk.apply_text_plan(captions[i], plan)

    pass1 = model.forward(frames, captions, visual_mask=visual_mask,
                          train=train, rng=rng)
    pass2 = model.forward(frames, masked_caps, train=train, rng=rng)

    if frozen_targets is None:
        i_co = pass2.v_global.detach()
        t_co = pass1.t_global.detach()
    else:
        i_co = Tensor(np.asarray(frozen_targets[0], dtype=np.float64))
        t_co = Tensor(np.asarray(frozen_targets[1], dtype=np.float64))
    pair = GlobalPair(i_re=pass1.v_global, i_co=i_co,
                      t_re=pass2.t_global, t_co=t_co,
                      i_co_pre_detach=pass2.v_global,
                      t_co_pre_detach=pass1.t_global)
    loss = None
    if mvsc:
        loss = info_nce(pair.i_re, pair.i_co, tau)
    if mlsc:
        nce_l = info_nce(pair.t_re, pair.t_co, tau)
        loss = nce_l if loss is None else loss + nce_l
    return loss, pair


def total_loss(model: PretrainModel, frames: np.ndarray,
               captions: np.ndarray, cfg: ObjectiveConfig, rngs: dict,
               train: bool = False):
    """Unweighted sum of the enabled objectives.

    rngs holds one independent generator per component ("clean", "vtm",
    "mlm", "scl") so that toggling any objective never shifts another's
    draws. Returns (LossReport, total Tensor)."""
    if not cfg.any_enabled():
        raise ConfigError("no objective enabled")
    report = LossReport(enabled={"cl": cfg.cl, "vtm": cfg.vtm,
                                 "mlm": cfg.mlm, "scl": cfg.scl})
    total = None

    def add(x: Tensor):
        nonlocal total
        total = x if total is None else total + x

    if cfg.cl or cfg.vtm:
        clean = model.forward(frames, captions, train=train,
                              rng=rngs.get("clean"))
        if cfg.cl:
            cl = contrastive_loss(model, clean.v_enc_global,
                                  clean.t_enc_global)
            report.cl = cl.item()
            add(cl)
        if cfg.vtm:
            vtm = vtm_loss(model, clean, frames.shape[1], rngs["vtm"],
                           train=train)
            report.vtm = vtm.item()
            add(vtm)
    if cfg.mlm:
        mlm, n_pred = mlm_loss(model, frames, captions, rngs["mlm"],
                               train=train)
        if mlm is None:
            report.mlm_skipped = True
        else:
            report.mlm = mlm.item()
            add(mlm)
    if cfg.scl:
        scl, _ = scl_loss(model, frames, captions, cfg.image_mask_ratio,
                          cfg.text_mask_ratio, rngs["scl"],
                          tau=cfg.scl_tau, mvsc=cfg.mvsc, mlsc=cfg.mlsc,
                          train=train)
        report.scl = scl.item()
        add(scl)
    if total is None:
        raise ConfigError("every enabled objective was skipped")
    report.total = total.item()
    return report, total
