"""Synthetic modulated I/Q baseband signals and an AWGN channel.

Ten modulation schemes feed a 10-class classification head. Linear schemes
draw symbols uniformly from unit-average-energy constellations and are
pulse-shaped with a root-raised-cosine filter; the frequency schemes
(GFSK, CPFSK) synthesize a continuous-phase waveform directly at sample
rate. The channel adds circularly-symmetric complex Gaussian noise scaled
against the measured clean power and keeps the noise realization as its
own signal.

All functions are pure given an explicit numpy Generator, so samples may
be produced in parallel with independent seed streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "ModulationScheme",
    "IqSignal",
    "ChannelOutput",
    "constellation_alphabet",
    "generate_symbols",
    "rrc_taps",
    "pulse_shape",
    "synthesize",
    "add_awgn",
    "measure_snr",
]


class ModulationScheme(Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "8PSK"
    OQPSK = "OQPSK"
    PAM4 = "PAM4"
    QAM16 = "16QAM"
    QAM32 = "32QAM"
    QAM64 = "64QAM"
    GFSK = "GFSK"
    CPFSK = "CPFSK"

    @property
    def label(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return list(ModulationScheme).index(self)

    @property
    def is_linear(self) -> bool:
        return self not in (ModulationScheme.GFSK, ModulationScheme.CPFSK)

    @classmethod
    def from_label(cls, label: str) -> "ModulationScheme":
        for m in cls:
            if m.value == label:
                return m
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown modulation scheme '{label}' (valid: {valid})")


def _qam_grid(levels) -> np.ndarray:
    pts = np.array([complex(i, q) for i in levels for q in levels])
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def _cross32() -> np.ndarray:
    levels = (-5, -3, -1, 1, 3, 5)
    pts = [complex(i, q) for i in levels for q in levels if not (abs(i) == 5 and abs(q) == 5)]
    pts = np.array(pts)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


_ALPHABETS = {
    ModulationScheme.BPSK: np.array([1.0 + 0.0j, -1.0 + 0.0j]),
    ModulationScheme.QPSK: np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2),
    ModulationScheme.PSK8: np.exp(2j * np.pi * np.arange(8) / 8),
    ModulationScheme.OQPSK: np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2),
    ModulationScheme.PAM4: np.array([-3, -1, 1, 3], dtype=complex) / np.sqrt(5),
    ModulationScheme.QAM16: _qam_grid((-3, -1, 1, 3)),
    ModulationScheme.QAM32: _cross32(),
    ModulationScheme.QAM64: _qam_grid((-7, -5, -3, -1, 1, 3, 5, 7)),
}


def constellation_alphabet(scheme: ModulationScheme) -> np.ndarray:
    """Unit-average-energy alphabet of a linear scheme."""
    if not scheme.is_linear:
        raise ValueError(f"{scheme.label} has no finite constellation alphabet")
    return _ALPHABETS[scheme].copy()


@dataclass
class IqSignal:
    """Complex baseband sample sequence with its framing metadata."""

    samples: np.ndarray
    samples_per_symbol: int
    n_symbols: int
    scheme: ModulationScheme

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples_per_symbol < 1 or self.n_symbols < 1:
            raise ValueError("samples_per_symbol and n_symbols must be positive")
        if len(self.samples) != self.n_symbols * self.samples_per_symbol:
            raise ValueError(
                f"sample count {len(self.samples)} != n_symbols {self.n_symbols} "
                f"x samples_per_symbol {self.samples_per_symbol}")
        if not np.all(np.isfinite(self.samples.view(np.float64))):
            raise ValueError("non-finite samples")

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))


@dataclass
class ChannelOutput:
    """Clean signal, noise realization, and their exact sum."""

    noisy: IqSignal
    noise: IqSignal
    clean: IqSignal
    snr_db: float


# CPFSK modulation index and GFSK bandwidth-time product; fixed waveform
# conventions, not classification hyperparameters.
_CPFSK_H = 0.5
_GFSK_BT = 0.3


def _fsk_symbol_phase(scheme: ModulationScheme, n_symbols: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-magnitude phase trajectory at symbol instants for GFSK/CPFSK."""
    bits = rng.integers(0, 2, size=n_symbols) * 2 - 1
    freqs = bits.astype(np.float64)
    if scheme is ModulationScheme.GFSK:
        freqs = _gaussian_smooth(freqs, _GFSK_BT, sps=1)
    phase = np.pi * _CPFSK_H * np.cumsum(freqs)
    return np.exp(1j * phase)


def _gaussian_smooth(x: np.ndarray, bt: float, sps: int) -> np.ndarray:
    """Convolve with the Gaussian frequency pulse of bandwidth-time product bt."""
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt) * sps
    half = int(np.ceil(4 * sigma))
    t = np.arange(-half, half + 1)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return np.convolve(x, g, mode="same")


def generate_symbols(scheme: ModulationScheme, n_symbols: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n_symbols complex symbols for the scheme.

    Linear schemes sample uniformly from the unit-average-energy alphabet;
    GFSK/CPFSK return the continuous-phase trajectory at symbol instants.
    """
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    if scheme.is_linear:
        alphabet = _ALPHABETS[scheme]
        return alphabet[rng.integers(0, len(alphabet), size=n_symbols)]
    return _fsk_symbol_phase(scheme, n_symbols, rng)


def rrc_taps(samples_per_symbol: int, rolloff: float, span_symbols: int) -> np.ndarray:
    """Unit-energy root-raised-cosine filter taps.

    Time axis in symbol units, span_symbols wide, sampled at
    samples_per_symbol; the t=0 and t=+-1/(4 rolloff) singularities use
    their analytic limits.
    """
    if not 0.0 <= rolloff <= 1.0:
        raise ValueError(f"rolloff must be in [0, 1], got {rolloff}")
    n = span_symbols * samples_per_symbol
    t = np.arange(-n // 2, n // 2 + 1) / samples_per_symbol
    taps = np.empty_like(t)
    b = rolloff
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            taps[i] = 1.0 - b + 4 * b / np.pi
        elif b > 0 and abs(abs(ti) - 1.0 / (4 * b)) < 1e-9:
            taps[i] = (b / np.sqrt(2)) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                          + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            den = np.pi * ti * (1 - (4 * b * ti) ** 2)
            taps[i] = num / den
    return taps / np.sqrt(np.sum(taps ** 2))


def pulse_shape(symbols: np.ndarray, samples_per_symbol: int, rolloff: float = 0.35,
                span_symbols: int = 8, scheme: ModulationScheme = ModulationScheme.QPSK) -> IqSignal:
    """Upsample and root-raised-cosine filter a symbol sequence.

    Output is trimmed to n_symbols * samples_per_symbol samples and rescaled
    to unit average power (skipped for all-zero input).
    """
    if samples_per_symbol < 2:
        raise ValueError("samples_per_symbol must be >= 2")
    symbols = np.asarray(symbols, dtype=np.complex128)
    n_symbols = len(symbols)
    taps = rrc_taps(samples_per_symbol, rolloff, span_symbols)
    up = np.zeros(n_symbols * samples_per_symbol, dtype=np.complex128)
    up[::samples_per_symbol] = symbols
    full = np.convolve(up, taps)
    delay = (len(taps) - 1) // 2
    out = full[delay:delay + n_symbols * samples_per_symbol]
    p = np.mean(np.abs(out) ** 2)
    if p > 0:
        out = out / np.sqrt(p)
    return IqSignal(out, samples_per_symbol, n_symbols, scheme)


def _fsk_waveform(scheme: ModulationScheme, n_symbols: int, samples_per_symbol: int,
                  rng: np.random.Generator) -> IqSignal:
    """Continuous-phase waveform for GFSK/CPFSK at full sample rate."""
    bits = rng.integers(0, 2, size=n_symbols) * 2 - 1
    freqs = np.repeat(bits.astype(np.float64), samples_per_symbol)
    if scheme is ModulationScheme.GFSK:
        freqs = _gaussian_smooth(freqs, _GFSK_BT, sps=samples_per_symbol)
    phase = np.pi * _CPFSK_H * np.cumsum(freqs) / samples_per_symbol
    return IqSignal(np.exp(1j * phase), samples_per_symbol, n_symbols, scheme)


def synthesize(scheme: ModulationScheme, n_symbols: int, samples_per_symbol: int,
               rng: np.random.Generator, rolloff: float = 0.35, span_symbols: int = 8) -> IqSignal:
    """Full clean-waveform synthesis for any scheme.

    Linear schemes: symbols -> RRC pulse shaping (OQPSK staggers the
    quadrature rail by half a symbol). Frequency schemes: continuous-phase
    synthesis at sample rate. Unit average power in all cases.
    """
    if not scheme.is_linear:
        return _fsk_waveform(scheme, n_symbols, samples_per_symbol, rng)
    symbols = generate_symbols(scheme, n_symbols, rng)
    sig = pulse_shape(symbols, samples_per_symbol, rolloff, span_symbols, scheme)
    if scheme is ModulationScheme.OQPSK:
        shifted = np.roll(sig.samples.imag, samples_per_symbol // 2)
        sig = IqSignal(sig.samples.real + 1j * shifted, samples_per_symbol, n_symbols, scheme)
    return sig


def add_awgn(clean: IqSignal, snr_db: float, rng: np.random.Generator) -> ChannelOutput:
    """Add complex white Gaussian noise at the requested SNR.

    Per-sample noise variance is P_clean / 10^(snr_db/10) with P_clean the
    measured average power, so shaping transients cannot bias the channel.
    noisy = clean + noise holds exactly by construction.
    """
    p_clean = clean.power()
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    sigma2 = p_clean / (10.0 ** (snr_db / 10.0))
    std = np.sqrt(sigma2 / 2.0)
    n = len(clean.samples)
    noise = std * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    noisy = clean.samples + noise
    mk = lambda samples: IqSignal(samples, clean.samples_per_symbol, clean.n_symbols, clean.scheme)
    return ChannelOutput(noisy=mk(noisy), noise=mk(noise), clean=mk(clean.samples.copy()),
                         snr_db=float(snr_db))


def measure_snr(clean: IqSignal, noise: IqSignal) -> float:
    """10 log10 of the ratio of mean |.|^2 powers."""
    if len(clean.samples) != len(noise.samples):
        raise ValueError(f"length mismatch: {len(clean.samples)} vs {len(noise.samples)}")
    p_noise = noise.power()
    if p_noise <= 0:
        raise ValueError("noise has zero power")
    return float(10.0 * np.log10(clean.power() / p_noise))
