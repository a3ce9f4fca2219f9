"""Pretraining objective and loop.

The objective masks the target modality harder than the rest, weights its
reconstruction loss higher, and (via the model config) gives it a deeper
decoder; `uniform` mode collapses all three asymmetries to recover the
equal-treatment baseline. Reconstruction error is measured on masked
patches only, so the masking schedule directly shapes the objective.

Everything is deterministic given (dataset, config, seed): mask draws come
from one serialized Generator, per-epoch shuffles are derived from a
counter-based seed, and gradients accumulate in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (MaskPlan, ModelConfig, ModelParams, forward_pretrain_batch,
                    patchify, sample_mask)
from .modalities import MODALITIES, ModalityKind, MultimodalSample, normalize

__all__ = [
    "FipConfig",
    "TrainState",
    "TrainLog",
    "TrainResult",
    "masked_mse",
    "fip_loss",
    "make_mask_plan",
    "lr_schedule",
    "adamw_step",
    "resolve_decoder_layers",
    "target_patches",
    "pretrain",
    "pretrain_step",
]


@dataclass
class FipConfig:
    """Knobs of the target-modality bias.

    mode="fip" applies the asymmetric ratios/weights; mode="uniform" masks
    every modality at p_mask and weights every loss term 1.0.
    """

    target_modality: ModalityKind = ModalityKind.CONSTELLATION
    p_target: float = 0.80
    p_other: float = 0.60
    w_target: float = 1.0
    w_other: float = 0.5
    p_mask: float = 0.75
    mode: str = "fip"

    def __post_init__(self):
        if self.mode not in ("fip", "uniform"):
            raise ValueError(f"mode must be 'fip' or 'uniform', got '{self.mode}'")
        for name in ("p_target", "p_other", "p_mask"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.mode == "fip":
            if not self.p_target > self.p_other:
                raise ValueError("fip mode requires p_target > p_other")
            # w_other = 0 is allowed for gradient-flow ablations; the default
            # asymmetric configuration keeps it strictly positive
            if not self.w_target > self.w_other >= 0.0:
                raise ValueError("fip mode requires w_target > w_other >= 0")

    def ratio(self, m: ModalityKind) -> float:
        if self.mode == "uniform":
            return self.p_mask
        return self.p_target if m is self.target_modality else self.p_other

    def weight(self, m: ModalityKind) -> float:
        if self.mode == "uniform":
            return 1.0
        return self.w_target if m is self.target_modality else self.w_other

    def to_json_dict(self) -> dict:
        return {
            "target_modality": self.target_modality.value,
            "p_target": self.p_target,
            "p_other": self.p_other,
            "w_target": self.w_target,
            "w_other": self.w_other,
            "p_mask": self.p_mask,
            "mode": self.mode,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FipConfig":
        d = dict(d)
        if "target_modality" in d:
            d["target_modality"] = ModalityKind.from_name(d["target_modality"])
        return cls(**d)


def resolve_decoder_layers(model_cfg: ModelConfig, fip_cfg: FipConfig,
                           target_depth: int = None, other_depth: int = None) -> ModelConfig:
    """Rewrite decoder depths to match the mode.

    uniform mode flattens every decoder to the non-target depth; fip mode
    restores the target/other split. Depth values default to what the
    incoming config implies.
    """
    layers = dict(model_cfg.decoder_layers)
    tgt = fip_cfg.target_modality
    others = [d for m, d in layers.items() if m is not tgt]
    if other_depth is None:
        other_depth = min(others) if others else layers.get(tgt, 1)
    if target_depth is None:
        target_depth = layers.get(tgt, other_depth)
    new_layers = {}
    for m in layers:
        if fip_cfg.mode == "uniform":
            new_layers[m] = other_depth
        else:
            new_layers[m] = target_depth if m is tgt else other_depth
    return replace(model_cfg, decoder_layers=new_layers)


def make_mask_plan(cfg: FipConfig, model: ModelConfig, rng: np.random.Generator) -> MaskPlan:
    """Independent per-modality masks at the mode's ratios, exact counts."""
    masks, ratios = {}, {}
    for m in MODALITIES:
        r = cfg.ratio(m)
        masks[m] = sample_mask(model.n_patches, r, rng)
        ratios[m] = r
    return MaskPlan(masks=masks, ratios=ratios)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray):
    """MSE over masked patch rows only, averaged over patches and pixels.

    Returns (loss tensor, flag) where flag is True when the mask is empty
    and the loss contributed a logged zero instead of an error.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if len(idx) == 0:
        return ad.tensor(0.0, dtype=pred.dtype), True
    t = ad.tensor(target[idx], dtype=pred.dtype)
    return ad.mse(ad.gather_rows(pred, idx), t), False


def fip_loss(losses: dict, cfg: FipConfig) -> Tensor:
    """Weighted total: w_target * L_target + sum of w_other * L_other.

    uniform mode returns the plain unweighted sum. Zero-weight terms are
    left out of the graph entirely, so their parameters receive no
    gradient.
    """
    if cfg.target_modality not in losses:
        raise ValueError(f"loss map missing target modality {cfg.target_modality.value}")
    total = None
    for m, loss in losses.items():
        w = cfg.weight(m)
        if w == 0.0:
            continue
        term = loss if w == 1.0 else ad.scale(loss, w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total


@dataclass
class TrainState:
    """Optimizer accumulators plus everything needed for bit-exact resume.

    First/second moments live in flat buffers laid out by `names`; the
    slice for parameter i starts at offsets[i]. The trainable set is fixed
    at construction, which is also how fine-tuning freezes parameters.
    """

    step: int = 0
    base_lr: float = 1e-3
    warmup_steps: int = 1
    total_steps: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list = field(default_factory=list)
    offsets: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    mask_rng: Optional[np.random.Generator] = None

    @classmethod
    def new(cls, params: ModelParams, base_lr: float, total_steps: int, seed: int,
            weight_decay: float = 0.05, warmup_frac: float = 0.1, names=None) -> "TrainState":
        if names is None:
            names = params.names()
        sizes = [params[n].data.size for n in names]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(offsets[-1])
        warmup = max(1, int(round(warmup_frac * total_steps)))
        return cls(
            step=0, base_lr=base_lr, warmup_steps=warmup, total_steps=total_steps,
            weight_decay=weight_decay, names=list(names), offsets=offsets,
            m=np.zeros(total, dtype=params.dtype), v=np.zeros(total, dtype=params.dtype),
            mask_rng=np.random.default_rng(seed),
        )


def lr_schedule(step: int, state: TrainState) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if step < state.warmup_steps:
        return state.base_lr * step / state.warmup_steps
    span = max(1, state.total_steps - state.warmup_steps)
    progress = min(1.0, (step - state.warmup_steps) / span)
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: ModelParams, state: TrainState, lr: float = None) -> float:
    """Decoupled-weight-decay adaptive-moment update of state.names.

    Missing gradients count as zero. A non-finite gradient aborts before
    any parameter is touched, naming the offender. Returns the learning
    rate used; increments state.step.
    """
    if lr is None:
        lr = lr_schedule(state.step, state)
    g = np.concatenate([
        params[n].grad.ravel() if params[n].grad is not None
        else np.zeros(params[n].data.size, dtype=params[n].data.dtype)
        for n in state.names])
    if not np.all(np.isfinite(g)):
        for i, n in enumerate(state.names):
            sl = g[state.offsets[i]:state.offsets[i + 1]]
            if not np.all(np.isfinite(sl)):
                raise FloatingPointError(f"non-finite gradient for parameter '{n}' at step {state.step}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    upd = (lr / bc1) * state.m / (np.sqrt(state.v / bc2) + state.eps)
    decay = 1.0 - lr * state.weight_decay
    off = state.offsets
    for i, n in enumerate(state.names):
        p = params[n]
        if state.weight_decay != 0.0:
            p.data *= decay
        p.data -= upd[off[i]:off[i + 1]].reshape(p.data.shape)
    state.step += 1
    return lr


@dataclass
class TrainLog:
    """Per-step records: step, lr, weighted total, per-modality losses."""

    steps: list = field(default_factory=list)

    def append(self, step: int, lr: float, total: float, per_modality: dict):
        self.steps.append({
            "step": step, "lr": lr, "total": total,
            "losses": {m.value: v for m, v in per_modality.items()},
        })

    def to_csv(self, path, modalities=None):
        mods = modalities or [m.value for m in MODALITIES]
        with open(path, "w") as f:
            f.write("step,lr,total," + ",".join(f"loss_{m}" for m in mods) + "\n")
            for rec in self.steps:
                vals = ",".join(repr(rec["losses"].get(m, 0.0)) for m in mods)
                f.write(f"{rec['step']},{rec['lr']!r},{rec['total']!r},{vals}\n")


@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    log: TrainLog
    aborted: bool = False


def target_patches(sample: MultimodalSample, m: ModalityKind, cfg: ModelConfig, stats) -> np.ndarray:
    img = sample.targets[m]
    if stats is not None:
        img = normalize(img, stats[m])
    return patchify(img, cfg.patch_size)


def pretrain_step(samples, params: ModelParams, fip_cfg: FipConfig, state: TrainState,
                  stats=None, lr: float = None):
    """One optimizer step over a batch: fresh per-sample masks, mean loss.

    Runs the batched forward; because every sample in a batch has the same
    exact masked count per modality, the batched masked MSE equals the
    mean of the per-sample masked MSEs, so the optimized objective is the
    batch mean of per-sample weighted totals. Returns
    (lr, total, per-modality losses), the last two as logged float64.
    """
    cfg = params.config
    params.zero_grad()
    plans = [make_mask_plan(fip_cfg, cfg, state.mask_rng) for _ in samples]
    preds, _vis, masked_idx = forward_pretrain_batch(samples, plans, params, stats)
    losses = {}
    per_mod = {}
    for m, pred in preds.items():
        if masked_idx[m].shape[1] == 0:
            losses[m] = ad.tensor(0.0, dtype=params.dtype)
            per_mod[m] = 0.0
            continue
        tgt = np.stack([target_patches(s, m, cfg, stats) for s in samples])
        tgt = np.take_along_axis(tgt, masked_idx[m][:, :, None], axis=1)
        loss_m = ad.mse(ad.gather_tokens(pred, masked_idx[m]), ad.tensor(tgt, dtype=params.dtype))
        losses[m] = loss_m
        per_mod[m] = float(loss_m.data)
    total = fip_loss(losses, fip_cfg)
    if not math.isfinite(float(total.data)):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    ad.backward(total)
    used_lr = adamw_step(params, state, lr=lr)
    logged_total = float(sum(fip_cfg.weight(m) * v for m, v in per_mod.items()))
    return used_lr, logged_total, per_mod


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch, recomputable for resume."""
    return np.random.default_rng((seed, epoch)).permutation(n)


def pretrain(dataset, params: ModelParams, fip_cfg: FipConfig, epochs: int,
             batch_size: int, seed: int, base_lr: float = 1e-3, weight_decay: float = 0.05,
             stats=None, state: TrainState = None, start_step: int = 0,
             log: TrainLog = None, on_checkpoint=None, checkpoint_every: int = 0) -> TrainResult:
    """Run the pretraining loop over a list of MultimodalSample.

    Resume by passing the deserialized `state` (with its rng), the prior
    `log`, and `start_step`; the trajectory is bit-identical to an
    uninterrupted run. A non-finite loss aborts, retaining the last good
    parameters (the optimizer step is never applied on the failing batch).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = steps_per_epoch * epochs
    if state is None:
        state = TrainState.new(params, base_lr, total_steps, seed, weight_decay)
    elif state.total_steps != total_steps:
        raise ValueError(f"resume mismatch: checkpoint ran {state.total_steps} total steps, "
                         f"requested schedule has {total_steps}")
    if log is None:
        log = TrainLog()
    step = start_step
    while step < total_steps:
        epoch = step // steps_per_epoch
        perm = _epoch_perm(seed, epoch, n)
        pos = (step % steps_per_epoch) * batch_size
        batch = [dataset[i] for i in perm[pos:pos + batch_size]]
        try:
            lr, total, per_mod = pretrain_step(batch, params, fip_cfg, state, stats)
        except FloatingPointError:
            return TrainResult(params, state, log, aborted=True)
        log.append(step, lr, total, per_mod)
        step += 1
        if on_checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, params, state, log)
    return TrainResult(params, state, log)
