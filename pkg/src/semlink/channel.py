"""Wireless channel layer: power-normalized symbol mapping, AWGN and
block-Rayleigh fading with perfect-CSI zero-forcing equalization.

SNR is Es/N0 per complex symbol after unit-power normalization.  One fading
coefficient is drawn per block (an utterance is one block).  Draws are
deterministic given (seed, block_index); the base noise realization does not
depend on the SNR, so sweeping SNR reuses common random numbers and the
received signal degrades monotonically in noise scale.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from semlink import autodiff as ad
from semlink.autodiff import Tensor

DEEP_FADE_FLOOR = 1e-12


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "awgn"            # awgn | rayleigh
    snr_db: float = 12.0          # math.inf means noiseless
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ChannelError(f"unknown channel kind '{self.kind}'")
        if math.isnan(self.snr_db):
            raise ChannelError("snr_db must not be NaN")


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of the channel: fading coefficient, per-complex-dim noise
    variance, the SNR used, and the injected noise (kept for replay tests)."""

    h: complex
    noise_variance: float
    snr_db: float
    noise: np.ndarray


def to_symbols(features: np.ndarray) -> tuple[np.ndarray, float]:
    """Pack a real feature matrix into unit-average-power complex symbols.

    Consecutive values pair into (real, imag).  Returns (symbols, scale) with
    scale chosen so mean per-symbol power is exactly 1; the scale inverts the
    mapping on the receive side.
    """
    flat = np.asarray(features, dtype=np.float64).reshape(-1)
    if flat.size % 2:
        raise ChannelError(f"feature count must be even to pair into symbols, got {flat.size}")
    raw = flat[0::2] + 1j * flat[1::2]
    power = float(np.mean(np.abs(raw) ** 2))
    if power <= 0.0:
        raise ChannelError("all-zero feature block cannot be power-normalized")
    scale = math.sqrt(power)
    return raw / scale, scale


def from_symbols(symbols: np.ndarray, scale: float, shape: tuple[int, ...]) -> np.ndarray:
    """Invert to_symbols given the recorded scale and original shape."""
    sym = np.asarray(symbols) * scale
    flat = np.empty(2 * sym.size, dtype=np.float64)
    flat[0::2] = sym.real
    flat[1::2] = sym.imag
    return flat.reshape(shape)


def stable_tag(label: str) -> int:
    """Process-independent 32-bit tag for seed derivation (str hash is not)."""
    return zlib.crc32(label.encode("utf-8"))


def _rng(cfg: ChannelConfig, block_index: int, label: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((cfg.seed, int(block_index), stable_tag(label)))
    )


def noise_variance_for(snr_db: float) -> float:
    return 0.0 if math.isinf(snr_db) else 10.0 ** (-snr_db / 10.0)


def apply_channel(x: np.ndarray, cfg: ChannelConfig, block_index: int = 0,
                  ) -> tuple[np.ndarray, ChannelRealization]:
    """y = h * x + n with circularly-symmetric complex Gaussian n.

    x must be unit average power.  For AWGN h = 1; for Rayleigh one h per
    block with E|h|^2 = 1.
    """
    x = np.asarray(x, dtype=np.complex128)
    if cfg.kind == "rayleigh":
        hg = _rng(cfg, block_index, "fading")
        re, im = hg.standard_normal(2)
        h = complex(re, im) / math.sqrt(2.0)
    else:
        h = 1.0 + 0.0j
    var = noise_variance_for(cfg.snr_db)
    ng = _rng(cfg, block_index, "noise")
    base = ng.standard_normal(x.size) + 1j * ng.standard_normal(x.size)
    noise = math.sqrt(var / 2.0) * base if var > 0.0 else np.zeros(x.size, dtype=np.complex128)
    y = h * x + noise
    return y, ChannelRealization(h=h, noise_variance=var, snr_db=cfg.snr_db, noise=noise)


def equalize(y: np.ndarray, realization: ChannelRealization) -> np.ndarray:
    """Perfect-CSI zero forcing: y / h.  Identity for AWGN."""
    h = realization.h
    if abs(h) < DEEP_FADE_FLOOR:
        raise ChannelError(f"deep fade: |h| = {abs(h):.3e} below guard threshold")
    if h == 1.0 + 0.0j:
        return np.asarray(y, dtype=np.complex128)
    return np.asarray(y, dtype=np.complex128) / h


def transmit_features(features: np.ndarray, cfg: ChannelConfig, block_index: int = 0,
                      ) -> tuple[np.ndarray, ChannelRealization]:
    """Full symbol round trip: pack, channel, equalize, unpack."""
    sym, scale = to_symbols(features)
    y, real = apply_channel(sym, cfg, block_index)
    eq = equalize(y, real)
    return from_symbols(eq, scale, np.asarray(features).shape), real


def transmit_tensor(x: Tensor, cfg: ChannelConfig, block_index: int = 0,
                    ) -> tuple[Tensor, ChannelRealization]:
    """Straight-through channel for training.

    The numeric output equals the production receive path bit-for-bit; on the
    tape the op is x plus a constant offset with h and n held fixed, so the
    identity backward is the exact gradient of the affine channel map.
    """
    received, real = transmit_features(x.data, cfg, block_index)
    return ad.straight_through(x, received), real
