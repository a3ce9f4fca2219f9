"""One JSON run-config document and its strict validation.

The document merges the model architecture, the pretraining-bias knobs,
training hyperparameters, and render settings. Unknown keys anywhere are
rejected (typo protection), and every command writes the fully resolved
config next to its outputs, including the mode-resolved per-modality
masking ratios, loss weights, and decoder depths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .modalities import MODALITIES, RenderConfig
from .model import ModelConfig
from .training import FipConfig, resolve_decoder_layers

__all__ = ["TrainHyper", "RunConfig", "load_run_config", "default_run_config", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class TrainHyper:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    finetune_epochs: int = 30
    finetune_lr: float = 2e-3
    head_only: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fip: FipConfig = field(default_factory=FipConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0

    def resolve(self) -> "RunConfig":
        """Apply the mode to the decoder depths; render size follows the model."""
        model = resolve_decoder_layers(self.model, self.fip)
        render = RenderConfig(image_size=model.image_size, n_symbols=self.render.n_symbols,
                              samples_per_symbol=self.render.samples_per_symbol,
                              rolloff=self.render.rolloff, span_symbols=self.render.span_symbols)
        return RunConfig(model=model, fip=self.fip, train=self.train, render=render,
                         seed=self.seed)

    def to_json_dict(self, **extra) -> dict:
        doc = {
            "model": self.model.to_json_dict(),
            "fip": self.fip.to_json_dict(),
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "base_lr": self.train.base_lr,
                "weight_decay": self.train.weight_decay,
                "warmup_frac": self.train.warmup_frac,
                "finetune_epochs": self.train.finetune_epochs,
                "finetune_lr": self.train.finetune_lr,
                "head_only": self.train.head_only,
            },
            "render": {
                "n_symbols": self.render.n_symbols,
                "samples_per_symbol": self.render.samples_per_symbol,
                "rolloff": self.render.rolloff,
                "span_symbols": self.render.span_symbols,
            },
            "seed": self.seed,
            "resolved": {
                "ratios": {m.value: self.fip.ratio(m) for m in MODALITIES},
                "weights": {m.value: self.fip.weight(m) for m in MODALITIES},
                "decoder_layers": {m.value: d for m, d in self.model.decoder_layers.items()},
            },
        }
        doc.update(extra)
        return doc

    def write(self, path, **extra) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(**extra), f, indent=2, sort_keys=True)
            f.write("\n")


_MODEL_KEYS = {"image_size", "patch_size", "d_model", "n_heads", "mlp_ratio",
               "encoder_layers", "decoder_layers", "decoder_width", "n_modalities", "n_classes"}
_FIP_KEYS = {"target_modality", "p_target", "p_other", "w_target", "w_other", "p_mask", "mode"}
_TRAIN_KEYS = {"epochs", "batch_size", "base_lr", "weight_decay", "warmup_frac",
               "finetune_epochs", "finetune_lr", "head_only"}
_RENDER_KEYS = {"n_symbols", "samples_per_symbol", "rolloff", "span_symbols"}
_TOP_KEYS = {"model", "fip", "train", "render", "seed", "resolved"}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {unknown} "
                          f"(valid: {sorted(allowed)})")


def default_run_config() -> RunConfig:
    return RunConfig()


def load_run_config(path=None, doc: dict = None) -> RunConfig:
    """Parse a config document; any unknown key is fatal.

    A 'resolved' section is tolerated on input (round-tripping a written
    config) but ignored: resolution is recomputed.
    """
    if doc is None:
        doc = {} if path is None else json.load(open(path))
    _check_keys("top-level", doc, _TOP_KEYS)
    model_doc = doc.get("model", {})
    fip_doc = doc.get("fip", {})
    train_doc = doc.get("train", {})
    render_doc = doc.get("render", {})
    _check_keys("model", model_doc, _MODEL_KEYS)
    _check_keys("fip", fip_doc, _FIP_KEYS)
    _check_keys("train", train_doc, _TRAIN_KEYS)
    _check_keys("render", render_doc, _RENDER_KEYS)
    base_model = ModelConfig().to_json_dict()
    base_model.update(model_doc)
    base_fip = FipConfig().to_json_dict()
    base_fip.update(fip_doc)
    try:
        model = ModelConfig.from_json_dict(base_model)
        fip = FipConfig.from_json_dict(base_fip)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    train = TrainHyper(**train_doc)
    render = RenderConfig(image_size=model.image_size, **render_doc)
    return RunConfig(model=model, fip=fip, train=train, render=render,
                     seed=int(doc.get("seed", 0)))
