"""Classification head on the pretrained encoder, plus SNR-sweep evaluation.

Fine-tuning feeds the target modality alone (no masking, no other
modalities, no decoders): tokens are mean-pooled after the shared encoder
and mapped to 10 logits. Evaluation aggregates accuracy per SNR grid point
into a report with a full confusion matrix; features can be exported for
external embedding visualization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .modalities import ModalityKind, normalize
from .model import ModelParams, encode_single, encode_single_batch
from .training import TrainState, adamw_step

__all__ = [
    "EvalReport",
    "init_head",
    "pool_and_classify",
    "classify_batch",
    "pooled_features",
    "finetune",
    "evaluate_by_snr",
    "evaluate_on_samples",
    "export_features",
    "FinetuneResult",
]

HEAD_W = "head.w"
HEAD_B = "head.b"


def init_head(params: ModelParams, rng: np.random.Generator) -> None:
    """Attach a d_model -> n_classes linear head to the parameter set."""
    cfg = params.config
    params.tensors[HEAD_W] = ad.tensor(rng.normal(0.0, 0.02, size=(cfg.d_model, cfg.n_classes)),
                                       requires_grad=True, dtype=params.dtype)
    params.tensors[HEAD_B] = ad.tensor(np.zeros(cfg.n_classes), requires_grad=True,
                                       dtype=params.dtype)


def pool_and_classify(image: np.ndarray, params: ModelParams,
                      modality: ModalityKind = ModalityKind.CONSTELLATION) -> Tensor:
    """Logits for one image: encode unmasked, mean-pool tokens, linear head."""
    cfg = params.config
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected image shape (3, {cfg.image_size}, {cfg.image_size}), got {image.shape}")
    latent = encode_single(image, modality, params)
    pooled = ad.reshape(ad.mean(latent, axis=0), (1, cfg.d_model))
    return ad.reshape(ad.linear(pooled, params[HEAD_W], params[HEAD_B]), (cfg.n_classes,))


def classify_batch(images: np.ndarray, params: ModelParams,
                   modality: ModalityKind = ModalityKind.CONSTELLATION) -> Tensor:
    """Logits [batch, n_classes] for a stacked [batch, 3, H, H] array."""
    latent = encode_single_batch(images, modality, params)
    pooled = ad.mean(latent, axis=1)
    return ad.linear(pooled, params[HEAD_W], params[HEAD_B])


def pooled_features(images: np.ndarray, params: ModelParams,
                    modality: ModalityKind = ModalityKind.CONSTELLATION) -> np.ndarray:
    """Mean-pooled encoder features [batch, d_model], no head applied."""
    return encode_single_batch(images, modality, params).data.mean(axis=1)


def _trainable_names(params: ModelParams, head_only: bool, modality: ModalityKind) -> list:
    """Classification-path parameters: embeddings + encoder + head.

    Decoders are never included; head_only freezes everything but the head.
    """
    if head_only:
        return [HEAD_W, HEAD_B]
    names = []
    for n in params.names():
        if n.startswith(f"patch_embed.{modality.value}") or n == f"modality_embed.{modality.value}":
            names.append(n)
        elif n.startswith("encoder.") or n in (HEAD_W, HEAD_B):
            names.append(n)
    return names


@dataclass
class FinetuneResult:
    params: ModelParams
    state: TrainState
    history: list = field(default_factory=list)
    aborted: bool = False


def _input_images(samples, modality: ModalityKind, stats) -> np.ndarray:
    imgs = np.stack([s.inputs[modality] for s in samples])
    if stats is not None:
        imgs = np.stack([normalize(img, stats[modality]) for img in imgs])
    return imgs


def finetune(params: ModelParams, dataset, epochs: int, base_lr: float, seed: int,
             batch_size: int = 16, head_only: bool = False, weight_decay: float = 0.05,
             stats=None, modality: ModalityKind = ModalityKind.CONSTELLATION) -> FinetuneResult:
    """Cross-entropy fine-tuning on labeled samples of one modality.

    Full mode trains the encoder, the modality's embeddings, and the head;
    head_only freezes the trunk. Decoders are untouched in both modes.
    Deterministic given the seed.
    """
    if any(s.label is None for s in dataset):
        raise ValueError("fine-tuning requires a labeled dataset")
    if HEAD_W not in params:
        init_head(params, np.random.default_rng(seed))
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = steps_per_epoch * epochs
    names = _trainable_names(params, head_only, modality)
    state = TrainState.new(params, base_lr, total_steps, seed, weight_decay, names=names)
    shuffle_rng = np.random.default_rng((seed, 1))
    history = []
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss, epoch_hits, seen = 0.0, 0, 0
        for b0 in range(0, n, batch_size):
            batch = [dataset[i] for i in perm[b0:b0 + batch_size]]
            labels = np.array([s.label for s in batch], dtype=np.int64)
            imgs = _input_images(batch, modality, stats)
            params.zero_grad()
            logits = classify_batch(imgs, params, modality)
            loss = ad.cross_entropy_with_logits(logits, labels)
            if not math.isfinite(float(loss.data)):
                return FinetuneResult(params, state, history, aborted=True)
            ad.backward(loss)
            try:
                adamw_step(params, state)
            except FloatingPointError:
                return FinetuneResult(params, state, history, aborted=True)
            epoch_loss += float(loss.data) * len(batch)
            epoch_hits += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(batch)
        history.append({"epoch": epoch, "loss": epoch_loss / seen, "accuracy": epoch_hits / seen})
    return FinetuneResult(params, state, history)


@dataclass
class EvalReport:
    """Accuracy per SNR point plus the pooled confusion matrix."""

    per_snr: dict
    n_per_snr: dict
    confusion: np.ndarray
    n_classes: int

    @property
    def overall_accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("snr_db,accuracy,n\n")
            for snr in sorted(self.per_snr):
                f.write(f"{snr!r},{self.per_snr[snr]!r},{self.n_per_snr[snr]}\n")

    def confusion_to_csv(self, path, class_names):
        with open(path, "w") as f:
            f.write("true\\pred," + ",".join(class_names) + "\n")
            for i, name in enumerate(class_names):
                f.write(name + "," + ",".join(str(int(v)) for v in self.confusion[i]) + "\n")


def evaluate_on_samples(classify_fn, samples, n_classes: int, batch_size: int = 64) -> EvalReport:
    """Group labeled samples by their snr_db and aggregate accuracy/confusion.

    `classify_fn(image_stack) -> predicted labels` is injectable so the
    harness itself can be checked with an oracle classifier.
    """
    by_snr = {}
    for s in samples:
        if s.label is None:
            raise ValueError("evaluation requires labeled samples")
        by_snr.setdefault(s.snr_db, []).append(s)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    per_snr, n_per_snr = {}, {}
    for snr, group in sorted(by_snr.items()):
        hits = 0
        for b0 in range(0, len(group), batch_size):
            chunk = group[b0:b0 + batch_size]
            preds = classify_fn(chunk)
            for s, p in zip(chunk, preds):
                confusion[s.label, int(p)] += 1
                hits += int(p == s.label)
        per_snr[snr] = hits / len(group)
        n_per_snr[snr] = len(group)
    return EvalReport(per_snr=per_snr, n_per_snr=n_per_snr, confusion=confusion,
                      n_classes=n_classes)


def model_classifier(params: ModelParams, stats=None,
                     modality: ModalityKind = ModalityKind.CONSTELLATION):
    """classify_fn over MultimodalSample chunks backed by the fine-tuned model."""

    def classify(chunk):
        imgs = _input_images(chunk, modality, stats)
        return classify_batch(imgs, params, modality).data.argmax(axis=1)

    return classify


def evaluate_by_snr(params: ModelParams, sampler, snr_grid, n_per_point: int, seed: int,
                    stats=None, classify_fn=None) -> EvalReport:
    """Generate n fresh labeled samples per grid point and evaluate.

    `sampler(snr_db, rng) -> MultimodalSample` supplies the data (fresh
    generation by default in the CLI; a fixed dataset can be evaluated
    directly with evaluate_on_samples).
    """
    snr_grid = list(snr_grid)
    if not snr_grid:
        raise ValueError("empty SNR grid")
    cfg = params.config
    if classify_fn is None:
        classify_fn = model_classifier(params, stats)
    samples = []
    for i, snr in enumerate(snr_grid):
        rng = np.random.default_rng((seed, i))
        for _ in range(n_per_point):
            samples.append(sampler(float(snr), rng))
    return evaluate_on_samples(classify_fn, samples, cfg.n_classes)


def export_features(params: ModelParams, dataset, path, stats=None,
                    modality: ModalityKind = ModalityKind.CONSTELLATION,
                    batch_size: int = 64) -> None:
    """CSV of mean-pooled encoder features: id, label, snr_db, f0..f{d-1}."""
    d = params.config.d_model
    with open(path, "w") as f:
        f.write("sample_id,label,snr_db," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for b0 in range(0, len(dataset), batch_size):
            chunk = dataset[b0:b0 + batch_size]
            feats = pooled_features(_input_images(chunk, modality, stats), params, modality)
            for j, s in enumerate(chunk):
                label = "" if s.label is None else str(s.label)
                row = ",".join(repr(float(v)) for v in feats[j])
                f.write(f"{b0 + j},{label},{s.snr_db!r},{row}\n")
