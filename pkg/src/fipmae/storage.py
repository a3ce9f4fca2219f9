"""Bit-exact on-disk formats for tensors, datasets, and checkpoints.

Tensor blob layout (all little-endian):

    bytes 0..3    magic "FIPT"
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..11   dtype code, u32: 0 = float32, 1 = float64
    bytes 12..15  ndim, u32 (0..6)
    bytes 16..39  six u32 dims, unused dims written as 1
    bytes 40..    row-major payload

Manifests are JSON with sorted keys so a save -> load -> save round trip
is byte-identical. Directory writers emit the manifest last, making it the
commit point; readers never depend on file naming beyond the manifest's
own references.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import autodiff as ad
from .modalities import MODALITIES, ChannelStats, ModalityKind, MultimodalSample
from .model import ModelConfig, ModelParams, expected_param_shapes
from .sigsim import ModulationScheme
from .training import FipConfig, TrainState

__all__ = [
    "StorageError",
    "write_tensor",
    "read_tensor",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "compute_dataset_stats",
]

MAGIC = b"FIPT"
FORMAT_VERSION = 1
HEADER_LEN = 40
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MAX_DIMS = 6

SCHEMA_VERSION = 1


class StorageError(ValueError):
    """Format violation; the message names the failing field and byte offset."""


def write_tensor(path, array: np.ndarray) -> None:
    """Write a float32/float64 array as one blob."""
    array = np.asarray(array)
    if array.ndim > 0 and not array.flags["C_CONTIGUOUS"]:
        array = np.ascontiguousarray(array)
    if array.dtype not in _CODE_FOR:
        raise StorageError(f"unsupported dtype {array.dtype}; use float32 or float64")
    if array.ndim > MAX_DIMS:
        raise StorageError(f"ndim {array.ndim} exceeds the format maximum {MAX_DIMS}")
    dims = list(array.shape) + [1] * (MAX_DIMS - array.ndim)
    header = struct.pack("<4sIII6I", MAGIC, FORMAT_VERSION, _CODE_FOR[array.dtype],
                         array.ndim, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read one blob back, validating every header field."""
    with open(path, "rb") as f:
        header = f.read(HEADER_LEN)
        if len(header) < HEADER_LEN:
            raise StorageError(f"truncated header at byte offset {len(header)} (field 'header', "
                               f"expected {HEADER_LEN} bytes)")
        magic, version, dtype_code, ndim, *dims = struct.unpack("<4sIII6I", header)
        if magic != MAGIC:
            raise StorageError(f"bad magic {magic!r} at byte offset 0 (field 'magic')")
        if version != FORMAT_VERSION:
            raise StorageError(f"unknown version {version} at byte offset 4 (field 'version')")
        if dtype_code not in _DTYPE_CODES:
            raise StorageError(f"unknown dtype code {dtype_code} at byte offset 8 (field 'dtype')")
        if ndim > MAX_DIMS:
            raise StorageError(f"ndim {ndim} out of range at byte offset 12 (field 'ndim')")
        if any(d != 1 for d in dims[ndim:]):
            raise StorageError(f"unused dims not 1 at byte offset 16 (field 'dims')")
        shape = tuple(dims[:ndim])
        dtype = _DTYPE_CODES[dtype_code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = f.read(count * dtype.itemsize + 1)
        if len(payload) < count * dtype.itemsize:
            raise StorageError(f"truncated payload at byte offset {HEADER_LEN + len(payload)} "
                               f"(field 'payload', expected {count * dtype.itemsize} bytes)")
        if len(payload) > count * dtype.itemsize:
            raise StorageError(f"trailing bytes at byte offset {HEADER_LEN + count * dtype.itemsize} "
                               f"(field 'payload')")
    arr = np.frombuffer(payload[:count * dtype.itemsize], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# datasets
#
# One blob per sample holding a [7, 3, H, H] stack: the four inputs in
# modality order, then the clean targets for the first three modalities.
# The noise target equals the noise input and is restored on load, which
# preserves that invariant bit-exactly.

_N_PLANES = 7


def compute_dataset_stats(samples) -> dict:
    """Per-modality, per-channel mean/std over the input images."""
    stats = {}
    for m in MODALITIES:
        stack = np.stack([s.inputs[m] for s in samples]).astype(np.float64)
        mean = stack.mean(axis=(0, 2, 3))
        std = stack.std(axis=(0, 2, 3))
        stats[m] = ChannelStats(mean=mean, std=std)
    return stats


def save_dataset(directory, samples, class_names=None, stats=None, seeds=None) -> None:
    """Write samples plus a manifest; the manifest is the commit point."""
    os.makedirs(directory, exist_ok=True)
    blob_dir = os.path.join(directory, "samples")
    os.makedirs(blob_dir, exist_ok=True)
    if stats is None:
        stats = compute_dataset_stats(samples)
    if class_names is None:
        class_names = [s.label for s in ModulationScheme]
    records = []
    shape = next(iter(samples[0].inputs.values())).shape
    for i, s in enumerate(samples):
        planes = np.stack([s.inputs[m] for m in MODALITIES]
                          + [s.targets[m] for m in MODALITIES if m is not ModalityKind.NOISE])
        fname = f"{i:06d}.fipt"
        write_tensor(os.path.join(blob_dir, fname), planes.astype(np.float32))
        records.append({
            "file": f"samples/{fname}",
            "label": s.label,
            "snr_db": s.snr_db,
            "seed": None if seeds is None else seeds[i],
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_samples": len(samples),
        "modalities": [m.value for m in MODALITIES],
        "image_size": shape[1],
        "class_names": list(class_names),
        "normalization": {
            m.value: {
                "mean": [float(v) for v in stats[m].mean],
                "std": [float(v) for v in stats[m].std],
                "zero_std": [bool(v) for v in stats[m].zero_std],
            } for m in MODALITIES
        },
        "samples": records,
    }
    _write_json(os.path.join(directory, "manifest.json"), manifest)


def load_dataset(directory):
    """Read a dataset directory back into (samples, stats, manifest)."""
    manifest = _read_json(os.path.join(directory, "manifest.json"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise StorageError(f"unknown dataset schema_version {manifest.get('schema_version')}")
    if manifest["n_samples"] != len(manifest["samples"]):
        raise StorageError(f"manifest n_samples {manifest['n_samples']} != "
                           f"{len(manifest['samples'])} sample records")
    stats = {}
    for m in MODALITIES:
        rec = manifest["normalization"][m.value]
        stats[m] = ChannelStats(mean=rec["mean"], std=rec["std"], zero_std=rec["zero_std"])
    non_noise = [m for m in MODALITIES if m is not ModalityKind.NOISE]
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        try:
            planes = read_tensor(os.path.join(directory, rec["file"]))
        except (OSError, StorageError) as e:
            raise StorageError(f"sample {i} ({rec['file']}): {e}") from e
        if planes.shape[0] != _N_PLANES:
            raise StorageError(f"sample {i} ({rec['file']}): expected {_N_PLANES} planes, "
                               f"got {planes.shape[0]}")
        inputs = {m: planes[j] for j, m in enumerate(MODALITIES)}
        targets = {m: planes[len(MODALITIES) + j] for j, m in enumerate(non_noise)}
        targets[ModalityKind.NOISE] = inputs[ModalityKind.NOISE]
        samples.append(MultimodalSample(inputs=inputs, targets=targets,
                                        label=rec["label"], snr_db=rec["snr_db"]))
    return samples, stats, manifest


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"])}


def _rng_state_from_json(d: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng


def save_checkpoint(directory, params: ModelParams, model_cfg: ModelConfig,
                    fip_cfg: FipConfig, state: TrainState = None, stats=None) -> None:
    """One blob per parameter plus a JSON manifest (written last).

    Optimizer moments and the mask rng state ride along so that resuming
    reproduces the uninterrupted trajectory bit-exactly; the normalization
    stats the model was trained with travel in the manifest.
    """
    os.makedirs(directory, exist_ok=True)
    pdir = os.path.join(directory, "params")
    os.makedirs(pdir, exist_ok=True)
    plist = []
    for name, t in params.items():
        fname = f"{name}.fipt"
        write_tensor(os.path.join(pdir, fname), t.data)
        plist.append({"name": name, "file": f"params/{fname}",
                      "shape": list(t.data.shape),
                      "dtype": "f64" if t.data.dtype == np.float64 else "f32"})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "model_config": model_cfg.to_json_dict(),
        "fip_config": fip_cfg.to_json_dict(),
        "parameters": plist,
        "train_state": None,
        "normalization": None if stats is None else {
            m.value: {
                "mean": [float(v) for v in stats[m].mean],
                "std": [float(v) for v in stats[m].std],
                "zero_std": [bool(v) for v in stats[m].zero_std],
            } for m in MODALITIES
        },
    }
    if state is not None:
        write_tensor(os.path.join(directory, "opt_m.fipt"), state.m)
        write_tensor(os.path.join(directory, "opt_v.fipt"), state.v)
        manifest["train_state"] = {
            "step": state.step,
            "base_lr": state.base_lr,
            "warmup_steps": state.warmup_steps,
            "total_steps": state.total_steps,
            "weight_decay": state.weight_decay,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "names": state.names,
            "rng": None if state.mask_rng is None else _rng_state_to_json(state.mask_rng),
        }
    _write_json(os.path.join(directory, "checkpoint.json"), manifest)


def load_checkpoint(directory, dtype=np.float32):
    """Rebuild (params, model_cfg, fip_cfg, state, stats) from a checkpoint.

    Every blob's shape is validated against both the manifest and the
    shapes the model config implies; mismatches name the parameter.
    """
    manifest = _read_json(os.path.join(directory, "checkpoint.json"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise StorageError(f"unknown checkpoint schema_version {manifest.get('schema_version')}")
    model_cfg = ModelConfig.from_json_dict(manifest["model_config"])
    fip_cfg = FipConfig.from_json_dict(manifest["fip_config"])
    names_present = {rec["name"] for rec in manifest["parameters"]}
    expected = expected_param_shapes(model_cfg, with_head="head.w" in names_present)
    tensors = {}
    for rec in manifest["parameters"]:
        name = rec["name"]
        arr = read_tensor(os.path.join(directory, rec["file"]))
        if list(arr.shape) != list(rec["shape"]):
            raise StorageError(f"parameter '{name}': blob shape {list(arr.shape)} != "
                               f"manifest shape {rec['shape']}")
        if name not in expected:
            raise StorageError(f"parameter '{name}' not part of the configured model")
        if tuple(arr.shape) != tuple(expected[name]):
            raise StorageError(f"parameter '{name}': shape {list(arr.shape)} != "
                               f"config-implied {list(expected[name])}")
        tensors[name] = ad.Tensor(arr.astype(dtype), requires_grad=True)
    missing = [n for n in expected if n not in tensors and not n.startswith("head.")]
    if missing:
        raise StorageError(f"checkpoint missing parameters: {missing[:3]}")
    params = ModelParams(tensors, model_cfg, dtype)
    state = None
    ts = manifest.get("train_state")
    if ts is not None:
        m = read_tensor(os.path.join(directory, "opt_m.fipt")).astype(dtype)
        v = read_tensor(os.path.join(directory, "opt_v.fipt")).astype(dtype)
        sizes = [int(np.prod(expected[n], dtype=np.int64)) for n in ts["names"]]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if m.size != offsets[-1] or v.size != offsets[-1]:
            raise StorageError(f"optimizer state size {m.size} != expected {offsets[-1]}")
        state = TrainState(
            step=ts["step"], base_lr=ts["base_lr"], warmup_steps=ts["warmup_steps"],
            total_steps=ts["total_steps"], weight_decay=ts["weight_decay"],
            beta1=ts["beta1"], beta2=ts["beta2"], eps=ts["eps"],
            names=list(ts["names"]), offsets=offsets, m=m, v=v,
            mask_rng=None if ts["rng"] is None else _rng_state_from_json(ts["rng"]),
        )
    stats = None
    if manifest.get("normalization") is not None:
        stats = {}
        for m in MODALITIES:
            rec = manifest["normalization"][m.value]
            stats[m] = ChannelStats(mean=rec["mean"], std=rec["std"], zero_std=rec["zero_std"])
    return params, model_cfg, fip_cfg, state, stats
