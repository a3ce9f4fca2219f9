"""Multimodal masked autoencoder on the autodiff substrate.

Per-modality linear patch embeddings feed one shared pre-LN Transformer
encoder over the concatenated visible tokens of all modalities; each
modality owns a decoder whose depth is configured independently, so the
target modality can be given extra reconstruction capacity. Positional
embeddings are fixed 2-D sinusoids recomputed from config (encoder width
for tokens, decoder width for each decoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .modalities import MODALITIES, ModalityKind, MultimodalSample, normalize

__all__ = [
    "ModelConfig",
    "ModelParams",
    "param_specs",
    "expected_param_shapes",
    "MaskPlan",
    "sincos_pos_embed_2d",
    "patchify",
    "unpatchify",
    "sample_mask",
    "embed_modality",
    "encode_visible",
    "decode_modality",
    "forward_pretrain",
    "encode_single",
    "embed_modality_batch",
    "forward_pretrain_batch",
    "encode_single_batch",
    "DESK_CONFIG",
    "FULL_CONFIG",
]


@dataclass
class ModelConfig:
    """Architecture knobs; decoder_layers maps each decoded modality to its depth."""

    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    mlp_ratio: float = 4.0
    encoder_layers: int = 4
    decoder_layers: dict = field(default_factory=lambda: {
        ModalityKind.CONSTELLATION: 4,
        ModalityKind.SCALOGRAM: 2,
        ModalityKind.RAW: 2,
        ModalityKind.NOISE: 2,
    })
    decoder_width: int = 48
    n_modalities: int = 4
    n_classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4 != 0 or self.decoder_width % 4 != 0:
            raise ValueError("d_model and decoder_width must be divisible by 4 (sincos grid)")
        if self.n_modalities != len(MODALITIES):
            raise ValueError(f"n_modalities must be {len(MODALITIES)}")
        for m, depth in self.decoder_layers.items():
            if depth < 1:
                raise ValueError(f"decoder depth for {m.value} must be >= 1")
        if self.decoder_width % self.head_dim != 0:
            raise ValueError(f"decoder_width {self.decoder_width} not divisible by the "
                             f"head dimension {self.head_dim} (= d_model / n_heads)")
        # canonical modality order keeps parameter layout and loss summation
        # order identical however the config was produced
        self.decoder_layers = {m: self.decoder_layers[m] for m in MODALITIES
                               if m in self.decoder_layers}

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def decoder_heads(self) -> int:
        """Decoder head count keeps the per-head dimension equal to the encoder's."""
        return self.decoder_width // self.head_dim

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def to_json_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": {m.value: d for m, d in self.decoder_layers.items()},
            "decoder_width": self.decoder_width,
            "n_modalities": self.n_modalities,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "decoder_layers" in d:
            d["decoder_layers"] = {ModalityKind.from_name(k): int(v)
                                   for k, v in d["decoder_layers"].items()}
        return cls(**d)


DESK_CONFIG = ModelConfig()
FULL_CONFIG = ModelConfig(
    image_size=224, patch_size=16, d_model=768, n_heads=12, mlp_ratio=4.0,
    encoder_layers=12,
    decoder_layers={ModalityKind.CONSTELLATION: 8, ModalityKind.SCALOGRAM: 4,
                    ModalityKind.RAW: 4, ModalityKind.NOISE: 4},
    decoder_width=512,
)


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine positional table for a grid x grid patch layout."""
    if dim % 4 != 0:
        raise ValueError("embedding dim must be divisible by 4")
    half = dim // 2

    def axis_embed(pos):
        omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2))
        args = np.outer(pos, omega)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rows = np.repeat(np.arange(grid), grid)
    cols = np.tile(np.arange(grid), grid)
    return np.concatenate([axis_embed(rows), axis_embed(cols)], axis=1)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a [3, H, H] image into [(H/P)^2, 3P^2] non-overlapping patches.

    Patches are row-major over the grid; within a patch, values flatten
    channel-first, then row, then column.
    """
    c, h, w = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    g_h, g_w = h // p, w // p
    x = image.reshape(c, g_h, p, g_w, p)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(g_h * g_w, c * p * p))


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int) -> np.ndarray:
    """Inverse of patchify; returns [3, H, H]."""
    p = patch_size
    g = image_size // p
    x = patches.reshape(g, g, 3, p, p)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(3, image_size, image_size))


@dataclass
class MaskPlan:
    """Per-modality boolean patch masks with exact masked counts."""

    masks: dict
    ratios: dict

    @property
    def masked_count(self) -> dict:
        return {m: int(v.sum()) for m, v in self.masks.items()}

    def visible_idx(self, m: ModalityKind) -> np.ndarray:
        return np.nonzero(~self.masks[m])[0]

    def masked_idx(self, m: ModalityKind) -> np.ndarray:
        return np.nonzero(self.masks[m])[0]


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly round(ratio * n_patches) positions set.

    Positions are a uniformly random subset of that exact size (round half
    up).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    k = int(np.floor(ratio * n_patches + 0.5))
    mask = np.zeros(n_patches, dtype=bool)
    if k > 0:
        mask[rng.choice(n_patches, size=k, replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# parameters


def param_specs(config: ModelConfig):
    """Ordered (name, shape, init kind) for every learnable tensor.

    The classification head is not listed; it is attached at fine-tuning
    time as head.w / head.b.
    """
    specs = []

    def block(prefix, dim, mlp_ratio):
        # no key-projection bias: softmax logits are invariant to it (it
        # shifts every logit in a row equally), so it would be a dead
        # parameter with a structurally zero gradient
        hidden = int(dim * mlp_ratio)
        specs.extend([
            (f"{prefix}.ln1.g", (dim,), "ones"),
            (f"{prefix}.ln1.b", (dim,), "zeros"),
            (f"{prefix}.attn.wq", (dim, dim), "normal"),
            (f"{prefix}.attn.bq", (dim,), "zeros"),
            (f"{prefix}.attn.wk", (dim, dim), "normal"),
            (f"{prefix}.attn.wv", (dim, dim), "normal"),
            (f"{prefix}.attn.bv", (dim,), "zeros"),
            (f"{prefix}.attn.wo", (dim, dim), "normal"),
            (f"{prefix}.attn.bo", (dim,), "zeros"),
            (f"{prefix}.ln2.g", (dim,), "ones"),
            (f"{prefix}.ln2.b", (dim,), "zeros"),
            (f"{prefix}.mlp.w1", (dim, hidden), "normal"),
            (f"{prefix}.mlp.b1", (hidden,), "zeros"),
            (f"{prefix}.mlp.w2", (hidden, dim), "normal"),
            (f"{prefix}.mlp.b2", (dim,), "zeros"),
        ])

    for m in MODALITIES:
        specs.append((f"patch_embed.{m.value}.w", (config.patch_dim, config.d_model), "normal"))
        specs.append((f"patch_embed.{m.value}.b", (config.d_model,), "zeros"))
        specs.append((f"modality_embed.{m.value}", (config.d_model,), "normal"))
    for i in range(config.encoder_layers):
        block(f"encoder.{i}", config.d_model, config.mlp_ratio)
    for m, depth in config.decoder_layers.items():
        specs.append((f"decoder.{m.value}.mask_token", (config.decoder_width,), "normal"))
        specs.append((f"decoder.{m.value}.proj.w", (config.d_model, config.decoder_width), "normal"))
        specs.append((f"decoder.{m.value}.proj.b", (config.decoder_width,), "zeros"))
        for i in range(depth):
            block(f"decoder.{m.value}.{i}", config.decoder_width, config.mlp_ratio)
        specs.append((f"decoder.{m.value}.head.w", (config.decoder_width, config.patch_dim), "normal"))
        specs.append((f"decoder.{m.value}.head.b", (config.patch_dim,), "zeros"))
    return specs


def expected_param_shapes(config: ModelConfig, with_head: bool = False) -> dict:
    """name -> shape map for checkpoint validation."""
    shapes = {name: shape for name, shape, _ in param_specs(config)}
    if with_head:
        shapes["head.w"] = (config.d_model, config.n_classes)
        shapes["head.b"] = (config.n_classes,)
    return shapes


class ModelParams:
    """Named learnable tensors in a deterministic order.

    The encoder block stack is a single shared instance; only the patch
    embeddings, modality embeddings, and decoders scale with the number of
    modalities.
    """

    def __init__(self, tensors: dict, config: ModelConfig, dtype=np.float32):
        self.tensors = tensors
        self.config = config
        self.dtype = dtype
        self._pos_cache = {}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "ModelParams":
        """Initialize weights N(0, 0.02), zero biases, unit norm gains."""
        t = {}
        for name, shape, kind in param_specs(config):
            if kind == "normal":
                t[name] = ad.tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=dtype)
            elif kind == "zeros":
                t[name] = ad.tensor(np.zeros(shape), requires_grad=True, dtype=dtype)
            else:
                t[name] = ad.tensor(np.ones(shape), requires_grad=True, dtype=dtype)
        return cls(t, config, dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def param_count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self.tensors.items() if n.startswith(prefix))

    def pos_embed(self, dim: int) -> Tensor:
        """Cached fixed sinusoidal table at the given width (constant, no grad)."""
        if dim not in self._pos_cache:
            grid = self.config.image_size // self.config.patch_size
            self._pos_cache[dim] = ad.tensor(sincos_pos_embed_2d(dim, grid), dtype=self.dtype)
        return self._pos_cache[dim]


def _run_block(x: Tensor, p: ModelParams, prefix: str, dim: int, n_heads: int) -> Tensor:
    """One pre-LN Transformer block: x + attn(ln(x)); x + mlp(ln(x))."""
    n = x.shape[0]
    dk = dim // n_heads
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])

    def heads(t):
        return ad.transpose(ad.reshape(t, (n, n_heads, dk)), (1, 0, 2))

    q = heads(ad.linear(h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"]))
    k = heads(ad.matmul(h, p[f"{prefix}.attn.wk"]))
    v = heads(ad.linear(h, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"]))
    att = ad.reshape(ad.transpose(ad.attention(q, k, v), (1, 0, 2)), (n, dim))
    att = ad.linear(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    x = ad.add(x, att)
    h2 = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h2 = ad.gelu(ad.linear(h2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
    h2 = ad.linear(h2, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return ad.add(x, h2)


def embed_modality(image: np.ndarray, m: ModalityKind, params: ModelParams) -> Tensor:
    """Patchify and embed one modality: patch_embed(patch) + pos + modality."""
    cfg = params.config
    patches = ad.tensor(patchify(image, cfg.patch_size), dtype=params.dtype)
    tok = ad.linear(patches, params[f"patch_embed.{m.value}.w"],
                    params[f"patch_embed.{m.value}.b"])
    tok = ad.add(tok, params.pos_embed(cfg.d_model))
    return ad.add(tok, params[f"modality_embed.{m.value}"])


def encode_visible(tokens: dict, plan: MaskPlan, params: ModelParams):
    """Drop masked tokens, concatenate modalities in fixed order, run the encoder.

    Returns (latent, index_map) where index_map[i] = (modality, patch index)
    of latent row i.
    """
    cfg = params.config
    parts = []
    index_map = []
    for m in MODALITIES:
        if m not in tokens:
            continue
        vis = plan.visible_idx(m)
        if len(vis) == 0:
            continue
        parts.append(ad.gather_rows(tokens[m], vis))
        index_map.extend((m, int(i)) for i in vis)
    if not parts:
        raise ValueError("no visible tokens: all modalities fully masked")
    x = ad.concat_rows(parts)
    for i in range(cfg.encoder_layers):
        x = _run_block(x, params, f"encoder.{i}", cfg.d_model, cfg.n_heads)
    return x, index_map


def decode_modality(latent: Tensor, index_map, plan: MaskPlan, m: ModalityKind,
                    params: ModelParams) -> Tensor:
    """Reconstruct all patches of modality m from the shared latent.

    Projected visible latents sit at their patch positions, the modality's
    mask token fills masked positions, the decoder positional table is
    added everywhere, and the modality's block stack plus output head
    produce per-patch pixel predictions.
    """
    cfg = params.config
    if m not in cfg.decoder_layers:
        raise ValueError(f"no decoder configured for modality {m.value}")
    rows = np.array([i for i, (mm, _) in enumerate(index_map) if mm is m], dtype=np.int64)
    if len(rows) == 0 and len(plan.visible_idx(m)) > 0:
        raise ValueError(f"modality {m.value} absent from the index map")
    positions = np.array([p for mm, p in index_map if mm is m], dtype=np.int64)
    n_patches = cfg.n_patches
    proj = ad.linear(latent, params[f"decoder.{m.value}.proj.w"],
                     params[f"decoder.{m.value}.proj.b"])
    masked = plan.masked_idx(m)
    pieces = []
    if len(rows) > 0:
        pieces.append(ad.scatter_rows(ad.gather_rows(proj, rows), positions, n_patches))
    if len(masked) > 0:
        fill = ad.tile_rows(params[f"decoder.{m.value}.mask_token"], len(masked))
        pieces.append(ad.scatter_rows(fill, masked, n_patches))
    x = pieces[0] if len(pieces) == 1 else ad.add(pieces[0], pieces[1])
    x = ad.add(x, params.pos_embed(cfg.decoder_width))
    for i in range(cfg.decoder_layers[m]):
        x = _run_block(x, params, f"decoder.{m.value}.{i}", cfg.decoder_width, cfg.decoder_heads)
    return ad.linear(x, params[f"decoder.{m.value}.head.w"],
                     params[f"decoder.{m.value}.head.b"])


def forward_pretrain(sample: MultimodalSample, plan: MaskPlan, params: ModelParams,
                     stats: dict = None) -> dict:
    """Embed -> encode visible -> decode every configured modality.

    `stats` optionally maps modality -> ChannelStats applied to the input
    images before embedding. Returns modality -> predicted patches.
    """
    cfg = params.config
    tokens = {}
    for m in MODALITIES:
        img = sample.inputs[m]
        if stats is not None:
            img = normalize(img, stats[m])
        tokens[m] = embed_modality(img, m, params)
    latent, index_map = encode_visible(tokens, plan, params)
    return {m: decode_modality(latent, index_map, plan, m, params)
            for m in cfg.decoder_layers}


def encode_single(image: np.ndarray, m: ModalityKind, params: ModelParams) -> Tensor:
    """Run the shared encoder over one unmasked modality's tokens."""
    cfg = params.config
    x = embed_modality(image, m, params)
    for i in range(cfg.encoder_layers):
        x = _run_block(x, params, f"encoder.{i}", cfg.d_model, cfg.n_heads)
    return x


# ---------------------------------------------------------------------------
# batched path
#
# Same architecture over [batch, tokens, d] stacks. Exact masking gives
# every sample in a batch identical visible/masked counts per modality, so
# per-sample index arrays stack into rectangular [batch, k] tensors. The
# training loop uses this path; the per-sample functions above remain the
# reference implementation and the two are pinned together by tests.


def _run_block_batch(x: Tensor, p: ModelParams, prefix: str, dim: int, n_heads: int) -> Tensor:
    b, n, _ = x.shape
    dk = dim // n_heads
    h = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, n_heads, dk)), (0, 2, 1, 3))

    q = heads(ad.linear(h, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"]))
    k = heads(ad.matmul(h, p[f"{prefix}.attn.wk"]))
    v = heads(ad.linear(h, p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"]))
    att = ad.reshape(ad.transpose(ad.attention(q, k, v), (0, 2, 1, 3)), (b, n, dim))
    att = ad.linear(att, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])
    x = ad.add(x, att)
    h2 = ad.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h2 = ad.gelu(ad.linear(h2, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
    h2 = ad.linear(h2, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
    return ad.add(x, h2)


def embed_modality_batch(images: np.ndarray, m: ModalityKind, params: ModelParams) -> Tensor:
    """Embed a stacked [batch, 3, H, H] array of one modality."""
    cfg = params.config
    patches = np.stack([patchify(img, cfg.patch_size) for img in images])
    tok = ad.linear(ad.tensor(patches, dtype=params.dtype),
                    params[f"patch_embed.{m.value}.w"], params[f"patch_embed.{m.value}.b"])
    tok = ad.add(tok, params.pos_embed(cfg.d_model))
    return ad.add(tok, params[f"modality_embed.{m.value}"])


def forward_pretrain_batch(samples, plans, params: ModelParams, stats: dict = None):
    """Batched embed -> encode -> decode over samples with equal mask counts.

    Returns (preds, vis_idx, masked_idx) where preds maps modality to
    [batch, n_patches, patch_dim] predictions and the index dicts hold the
    stacked per-sample [batch, k] position arrays.
    """
    cfg = params.config
    b = len(samples)
    vis_idx, masked_idx = {}, {}
    for m in MODALITIES:
        vis = [p.visible_idx(m) for p in plans]
        msk = [p.masked_idx(m) for p in plans]
        if len({len(v) for v in vis}) != 1:
            raise ValueError(f"unequal visible counts across batch for {m.value}")
        vis_idx[m] = np.stack(vis)
        masked_idx[m] = np.stack(msk)

    parts = []
    layout = {}
    off = 0
    for m in MODALITIES:
        imgs = np.stack([s.inputs[m] for s in samples])
        if stats is not None:
            imgs = np.stack([normalize(img, stats[m]) for img in imgs])
        tok = embed_modality_batch(imgs, m, params)
        k = vis_idx[m].shape[1]
        if k == 0:
            continue
        parts.append(ad.gather_tokens(tok, vis_idx[m]))
        layout[m] = (off, off + k)
        off += k
    if not parts:
        raise ValueError("no visible tokens: all modalities fully masked")
    x = ad.concat_tokens(parts) if len(parts) > 1 else parts[0]
    for i in range(cfg.encoder_layers):
        x = _run_block_batch(x, params, f"encoder.{i}", cfg.d_model, cfg.n_heads)

    preds = {}
    for m in cfg.decoder_layers:
        proj = ad.linear(x, params[f"decoder.{m.value}.proj.w"], params[f"decoder.{m.value}.proj.b"])
        pieces = []
        if m in layout:
            lo, hi = layout[m]
            pieces.append(ad.scatter_tokens(ad.slice_tokens(proj, lo, hi), vis_idx[m], cfg.n_patches))
        n_masked = masked_idx[m].shape[1]
        if n_masked > 0:
            fill = ad.fill_tokens(params[f"decoder.{m.value}.mask_token"], b, n_masked)
            pieces.append(ad.scatter_tokens(fill, masked_idx[m], cfg.n_patches))
        h = pieces[0] if len(pieces) == 1 else ad.add(pieces[0], pieces[1])
        h = ad.add(h, params.pos_embed(cfg.decoder_width))
        for i in range(cfg.decoder_layers[m]):
            h = _run_block_batch(h, params, f"decoder.{m.value}.{i}", cfg.decoder_width, cfg.decoder_heads)
        preds[m] = ad.linear(h, params[f"decoder.{m.value}.head.w"], params[f"decoder.{m.value}.head.b"])
    return preds, vis_idx, masked_idx


def encode_single_batch(images: np.ndarray, m: ModalityKind, params: ModelParams) -> Tensor:
    """Shared encoder over a [batch, 3, H, H] stack of one unmasked modality."""
    cfg = params.config
    x = embed_modality_batch(images, m, params)
    for i in range(cfg.encoder_layers):
        x = _run_block_batch(x, params, f"encoder.{i}", cfg.d_model, cfg.n_heads)
    return x
