"""Render I/Q signals into the four image modalities and assemble samples.

Each sample carries four 3xHxH images on the input side (rendered from the
noisy signal, except the Noise modality which renders the noise
realization) and four on the target side (rendered from the clean signal;
the Noise target is the noise render itself). Renderers are deterministic
functions of their input signal.

Render conventions (constellation window, wavelet parameters, trace
window) are module defaults; they are chosen so that unit-power signals
plus -10 dB noise rarely clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .sigsim import IqSignal, ModulationScheme, add_awgn, synthesize

__all__ = [
    "ModalityKind",
    "MODALITIES",
    "RenderConfig",
    "MultimodalSample",
    "ChannelStats",
    "render_constellation",
    "render_scalogram",
    "render_raw",
    "render_noise",
    "build_sample",
    "normalize",
    "denormalize",
]


class ModalityKind(Enum):
    CONSTELLATION = "constellation"
    SCALOGRAM = "scalogram"
    RAW = "raw"
    NOISE = "noise"

    @property
    def index(self) -> int:
        return list(ModalityKind).index(self)

    @classmethod
    def from_name(cls, name: str) -> "ModalityKind":
        for m in cls:
            if m.value == name:
                return m
        raise ValueError(f"unknown modality '{name}'")


MODALITIES = tuple(ModalityKind)

# Constellation/raw amplitude window half-width.
_WINDOW = 3.0
# Morlet center frequency (cycles per sample at scale 1).
_MORLET_FC = 1.0


@dataclass
class RenderConfig:
    """Knobs of the signal-to-image pipeline."""

    image_size: int = 32
    n_symbols: int = 1024
    samples_per_symbol: int = 4
    rolloff: float = 0.35
    span_symbols: int = 8


@dataclass
class ChannelStats:
    """Per-channel normalization statistics for one modality."""

    mean: np.ndarray
    std: np.ndarray
    zero_std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(3)
        std = np.asarray(self.std, dtype=np.float32).reshape(3)
        zero = std == 0.0
        self.std = np.where(zero, np.float32(1.0), std)
        if self.zero_std is None:
            self.zero_std = zero
        else:
            self.zero_std = np.asarray(self.zero_std, dtype=bool).reshape(3)


@dataclass
class MultimodalSample:
    """One pretraining/fine-tuning record: per-modality inputs and targets."""

    inputs: dict
    targets: dict
    label: Optional[int]
    snr_db: float

    def __post_init__(self):
        if set(self.inputs) != set(self.targets):
            raise ValueError("inputs and targets must cover the same modalities")
        shapes = {img.shape for img in self.inputs.values()} | {img.shape for img in self.targets.values()}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent image shapes: {shapes}")


def _hist_bin(values: np.ndarray, size: int) -> np.ndarray:
    """Map amplitudes in [-w, w] to bin indices, clipping outliers to edges."""
    idx = np.floor((values + _WINDOW) / (2.0 * _WINDOW) * size).astype(np.int64)
    return np.clip(idx, 0, size - 1)


def render_constellation(iq: IqSignal, size: int) -> np.ndarray:
    """Log-intensity 2-D histogram of (I, Q) pairs over [-3, 3]^2.

    Rows run top-down in Q (row 0 is Q = +3); intensities are log(1+count)
    max-normalized to [0, 1] and replicated to 3 channels.
    """
    if len(iq.samples) == 0:
        raise ValueError("empty signal")
    col = _hist_bin(iq.samples.real, size)
    row = _hist_bin(-iq.samples.imag, size)
    counts = np.zeros((size, size), dtype=np.float64)
    np.add.at(counts, (row, col), 1.0)
    img = np.log1p(counts)
    m = img.max()
    if m > 0:
        img = img / m
    return np.broadcast_to(img.astype(np.float32), (3, size, size)).copy()


def _morlet_cwt_mag(samples: np.ndarray, n_scales: int) -> np.ndarray:
    """|CWT| of a complex signal on log-spaced scales, via FFT convolution."""
    n = len(samples)
    scales = np.logspace(0.0, np.log10(n / 8.0), n_scales)
    omega = 2.0 * np.pi * np.fft.fftfreq(n)
    x_hat = np.fft.fft(samples)
    w0 = 2.0 * np.pi * _MORLET_FC
    out = np.empty((n_scales, n), dtype=np.float64)
    for i, s in enumerate(scales):
        kernel = np.exp(-0.5 * (s * omega - w0) ** 2) * np.sqrt(s)
        out[i] = np.abs(np.fft.ifft(x_hat * kernel))
    return out


def scalogram_scales(n_samples: int, n_scales: int) -> np.ndarray:
    """The scale grid used by render_scalogram (row i <-> scales[i])."""
    return np.logspace(0.0, np.log10(n_samples / 8.0), n_scales)


def render_scalogram(iq: IqSignal, size: int) -> np.ndarray:
    """Complex-Morlet wavelet magnitude over size scales x size time columns."""
    n = len(iq.samples)
    if n < size:
        raise ValueError(f"signal length {n} shorter than image size {size}")
    mag = _morlet_cwt_mag(iq.samples, size)
    cols = np.linspace(0, n - 1, size).round().astype(np.int64)
    img = mag[:, cols]
    m = img.max()
    if m > 0:
        img = img / m
    return np.broadcast_to(img.astype(np.float32), (3, size, size)).copy()


def render_raw(iq: IqSignal, size: int) -> np.ndarray:
    """Dot-rasterized I(t)/Q(t) traces over the first size^2 samples.

    Channel 0 carries I, channel 1 carries Q, channel 2 their average;
    amplitude window [-3, 3] with row 0 at +3. Trace pixels are 1.0 on a
    0.0 background.
    """
    n_used = min(len(iq.samples), size * size)
    vals = iq.samples[:n_used]
    cols = np.floor(np.arange(n_used) * size / n_used).astype(np.int64)
    img = np.zeros((3, size, size), dtype=np.float32)
    for ch, comp in ((0, vals.real), (1, vals.imag)):
        rows = _hist_bin(-comp, size)
        img[ch, rows, cols] = 1.0
    img[2] = 0.5 * (img[0] + img[1])
    return img


def render_noise(noise: IqSignal, size: int) -> np.ndarray:
    """Noise realization rendered with the constellation histogram."""
    return render_constellation(noise, size)


_RENDERERS = {
    ModalityKind.CONSTELLATION: render_constellation,
    ModalityKind.SCALOGRAM: render_scalogram,
    ModalityKind.RAW: render_raw,
}


def build_sample(scheme: ModulationScheme, snr_db: float, rng: np.random.Generator,
                 cfg: RenderConfig) -> MultimodalSample:
    """Synthesize one labeled multimodal record end to end.

    Inputs render the noisy signal (Noise modality renders the noise
    realization); targets render the clean signal, and the Noise target is
    the noise render itself, bit-identically.
    """
    clean = synthesize(scheme, cfg.n_symbols, cfg.samples_per_symbol, rng,
                       cfg.rolloff, cfg.span_symbols)
    ch = add_awgn(clean, snr_db, rng)
    size = cfg.image_size
    noise_img = render_noise(ch.noise, size)
    inputs = {m: f(ch.noisy, size) for m, f in _RENDERERS.items()}
    inputs[ModalityKind.NOISE] = noise_img
    targets = {m: f(ch.clean, size) for m, f in _RENDERERS.items()}
    targets[ModalityKind.NOISE] = noise_img
    return MultimodalSample(inputs=inputs, targets=targets, label=scheme.index,
                            snr_db=float(snr_db))


def normalize(image: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """(x - mean) / std per channel; zero-std channels use std 1.0."""
    return ((image - stats.mean[:, None, None]) / stats.std[:, None, None]).astype(np.float32)


def denormalize(image: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (image * stats.std[:, None, None] + stats.mean[:, None, None]).astype(np.float32)
