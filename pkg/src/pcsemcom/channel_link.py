"""Physical-layer simulation: power normalisation, learned channel codec,
real/complex symbol mapping, AWGN and the lossless side-channel budget."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import Linear, Module, Tensor, power, relu, tsum


def power_normalize(x, axes=(-2, -1)):
    """Scale each frame so that its complex-paired symbols have unit mean power.

    A frame of ``n`` real entries forms ``n / 2`` complex symbols, so the
    applied scale is ``sqrt(n / (2 * sum(x**2)))``.  ``axes`` selects the
    frame; leading axes are independent frames.  Returns ``(normalized,
    scale)``; Tensors stay differentiable through the scale.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("power_normalize: non-finite input")
    axes = tuple(a % data.ndim for a in axes)
    n = int(np.prod([data.shape[a] for a in axes]))
    sumsq = np.sum(data * data, axis=axes, keepdims=True)
    if np.any(sumsq == 0):
        raise ValueError("power_normalize: all-zero frame has no defined power")
    scale = np.sqrt(n / (2.0 * sumsq))
    if isinstance(x, Tensor):
        ss = tsum(x * x, axis=axes, keepdims=True)
        return x * power(ss * (2.0 / n), -0.5), scale
    return data * scale, scale


def mean_symbol_power(symbols: np.ndarray) -> float:
    return float(np.mean(np.abs(symbols) ** 2))


def to_complex(m) -> np.ndarray:
    """Pair adjacent real columns: ``(2k, 2k+1) -> re + 1j*im``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] % 2:
        raise ValueError(f"to_complex needs an even inner dimension, got {m.shape[-1]}")
    return m[..., 0::2] + 1j * m[..., 1::2]


def from_complex(c) -> np.ndarray:
    c = np.asarray(c)
    out = np.empty(c.shape[:-1] + (2 * c.shape[-1],))
    out[..., 0::2] = c.real
    out[..., 1::2] = c.imag
    return out


def noise_variance(snr_db: float) -> float:
    """Per-complex-symbol noise power for unit signal power."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def awgn(frame, snr_db: float, rng=None) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise at ``snr_db`` (unit signal power)."""
    frame = np.asarray(frame)
    if not np.all(np.isfinite(frame)):
        raise ValueError("awgn: non-finite input")
    sigma2 = noise_variance(snr_db)
    if sigma2 == 0.0:
        return frame.astype(np.complex128, copy=True)
    rng = np.random.default_rng(rng)
    std = math.sqrt(sigma2 / 2.0)
    re = rng.standard_normal(frame.shape)
    im = rng.standard_normal(frame.shape)
    return frame + std * (re + 1j * im)


@dataclass
class ChannelFrame:
    clean: np.ndarray   # (S, d) complex
    noisy: np.ndarray   # (S, d) complex
    sigma2: float


def transmit(frame, snr_db: float, rng=None) -> ChannelFrame:
    clean = np.asarray(frame, dtype=np.complex128)
    return ChannelFrame(clean, awgn(clean, snr_db, rng), noise_variance(snr_db))


def real_channel_noise(shape: tuple[int, ...], snr_db: float, rng) -> np.ndarray:
    """Noise for a real ``(..., n)`` frame read as ``n / 2`` complex symbols.

    Matches :func:`awgn` on the complex view of the frame; an odd trailing
    entry takes the real part of one extra symbol.
    """
    if noise_variance(snr_db) == 0.0:
        return np.zeros(shape)
    width = shape[-1]
    zeros = np.zeros(shape[:-1] + ((width + 1) // 2,), dtype=np.complex128)
    return from_complex(awgn(zeros, snr_db, rng))[..., :width]


class ChannelEncoder(Module):
    """Two row-wise FC layers ``d -> 2d -> 2d`` with a ReLU between."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, 2 * d, rng)
        self.fc2 = Linear(2 * d, 2 * d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class ChannelDecoder(Module):
    """Two row-wise FC layers ``2d -> 2d -> d`` with a ReLU between."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * d, 2 * d, rng)
        self.fc2 = Linear(2 * d, d, rng)

    def __call__(self, m: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(m)))


def channel_encode(x, encoder: ChannelEncoder) -> Tensor:
    return encoder(x if isinstance(x, Tensor) else Tensor(x))


def channel_decode(m, decoder: ChannelDecoder) -> Tensor:
    return decoder(m if isinstance(m, Tensor) else Tensor(m))


# lossless side channel -----------------------------------------------------

def capacity(snr_db: float) -> float:
    """AWGN Shannon capacity in bits per channel use."""
    if math.isinf(snr_db) and snr_db < 0:
        return 0.0
    return math.log2(1.0 + 10.0 ** (snr_db / 10.0))


def _ceil_count(x: float) -> int:
    # products like 2*64/(1*1.0) must not round up through float noise
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return int(math.ceil(x))


@dataclass
class LinkBudget:
    snr_db: float
    success_prob: float
    bit_use: int
    symbol_use: int
    capacity: float
    code_rate: float = 0.5
    modulation: str = "BPSK"


def lossless_budget(bit_use: int, snr_db: float, p: float = 0.9) -> LinkBudget:
    """Worst-case channel uses to deliver ``bit_use`` bits losslessly.

    Retransmissions are geometric with success probability ``p``; each
    attempt costs ``2 * bits / capacity`` symbols (rate-1/2 code).
    """
    if bit_use < 0:
        raise ValueError("bit_use must be non-negative")
    if not 0.0 < p <= 1.0:
        raise ValueError("success probability must lie in (0, 1]")
    cap = capacity(snr_db)
    if cap <= 0.0:
        raise ValueError(f"channel capacity is zero at {snr_db} dB")
    symbols = _ceil_count((1.0 / p) * (2.0 * bit_use / cap)) if bit_use else 0
    return LinkBudget(snr_db, p, int(bit_use), symbols, cap)


@dataclass
class RateReport:
    n_points: int
    lossless_bits: int
    lossless_symbols: int
    analog_symbols: int
    total_symbols: int
    symbols_per_point: float
    analog_bits: int
    total_bits: int
    bits_per_point: float


def rate_report(S: int, d: int, D_prime: int, N: int, snr_db: float, p: float = 0.9,
                bits_per_param: int = 16) -> RateReport:
    """Transmission volume of one cloud.

    Centroids ``(S, 3)`` and the global vector ``(D',)`` go over the lossless
    link at ``bits_per_param`` bits each; the ``S * d`` local features are
    sent as ``S * d`` complex channel uses, and counted at ``bits_per_param``
    bits per feature for the bits-per-point figure.
    """
    if min(S, d, N) < 1 or D_prime < 0:
        raise ValueError("rate_report needs positive S, d, N and D' >= 0")
    lossless_bits = (S * 3 + D_prime) * bits_per_param
    lossless_symbols = lossless_budget(lossless_bits, snr_db, p).symbol_use
    analog_symbols = S * d
    analog_bits = S * d * bits_per_param
    total_symbols = lossless_symbols + analog_symbols
    total_bits = lossless_bits + analog_bits
    return RateReport(N, lossless_bits, lossless_symbols, analog_symbols, total_symbols,
                      total_symbols / N, analog_bits, total_bits, total_bits / N)
