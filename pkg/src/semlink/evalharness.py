"""Metrics, the conventional digital baseline, and the SNR-sweep runner.

Metrics are computed on content tokens (reserved ids stripped).  The digital
baseline transmits the speech itself: 8-bit uniform quantization, Hamming(7,4)
coding, Gray-mapped 16-QAM over the same channel draws as the semantic
systems, then the stage-1 translator runs on the reconstructed frames at the
receiver.

Sweep points share channel randomness: the per-utterance fading draw and the
base noise realization depend only on (master seed, channel kind, utterance
index), so systems and SNR points are compared on identical channels and the
received signal degrades monotonically as SNR drops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from semlink import models as md
from semlink import pipeline as pl
from semlink.channel import ChannelConfig, apply_channel, equalize, stable_tag
from semlink.data import Corpus
from semlink.models import ModelBundle
from semlink.tokens import strip_specials

ALL_SYSTEMS = ("ross_full", "generator_only", "deepsc_s2t_clean_encoder", "baseline_digital")


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def token_accuracy(ref: list[int], hyp: list[int]) -> float:
    """Exact-match rate over aligned positions; length mismatch costs errors."""
    n = max(len(ref), len(hyp))
    if n == 0:
        return 1.0
    hits = sum(1 for a, b in zip(ref, hyp) if a == b)
    return hits / n


_EMB_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def token_embeddings(vocab_size: int, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Fixed random unit-norm embedding per token id."""
    key = (vocab_size, dim, seed)
    if key not in _EMB_CACHE:
        rng = np.random.default_rng(np.random.SeedSequence((seed, stable_tag("sts-embed"))))
        table = rng.normal(size=(vocab_size, dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        _EMB_CACHE[key] = table
    return _EMB_CACHE[key]


def sts_proxy(ref: list[int], hyp: list[int], vocab_size: int, dim: int = 64,
              seed: int = 0, report: dict | None = None) -> float:
    """Cosine of mean token embeddings, mapped from [-1, 1] to [0, 1]."""
    if len(hyp) == 0:
        if report is not None:
            report["empty_hypothesis"] = report.get("empty_hypothesis", 0) + 1
        return 0.0
    table = token_embeddings(vocab_size, dim, seed)
    a = table[np.asarray(ref, dtype=np.int64)].mean(axis=0)
    b = table[np.asarray(hyp, dtype=np.int64)].mean(axis=0)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.5
    cos = float(np.dot(a, b) / denom)
    return 0.5 * (cos + 1.0)


def ngram_score(ref: list[int], hyp: list[int], n_max: int = 4,
                report: dict | None = None) -> float:
    """Geometric mean of clipped n-gram precisions times a brevity penalty."""
    if n_max < 1:
        raise EvalError("n_max must be >= 1")
    if len(hyp) == 0:
        if report is not None:
            report["empty_hypothesis"] = report.get("empty_hypothesis", 0) + 1
        return 0.0
    log_sum = 0.0
    for n in range(1, n_max + 1):
        hyp_grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        if not hyp_grams:
            if report is not None:
                report["short_hypothesis"] = report.get("short_hypothesis", 0) + 1
            return 0.0
        ref_counts: dict[tuple, int] = {}
        for g in ref_grams:
            ref_counts[g] = ref_counts.get(g, 0) + 1
        clipped = 0
        for g in set(hyp_grams):
            clipped += min(hyp_grams.count(g), ref_counts.get(g, 0))
        if clipped == 0:
            if report is not None:
                report["zero_precision"] = report.get("zero_precision", 0) + 1
            return 0.0
        log_sum += math.log(clipped / len(hyp_grams))
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / n_max)


# ---------------------------------------------------------------------------
# digital baseline: quantizer + Hamming(7,4) + Gray 16-QAM
# ---------------------------------------------------------------------------

_HAMMING_G = np.array([  # systematic generator, data bits first
    [1, 0, 0, 0, 1, 1, 0],
    [0, 1, 0, 0, 1, 0, 1],
    [0, 0, 1, 0, 0, 1, 1],
    [0, 0, 0, 1, 1, 1, 1],
], dtype=np.uint8)
_HAMMING_H = np.array([
    [1, 1, 0, 1, 1, 0, 0],
    [1, 0, 1, 1, 0, 1, 0],
    [0, 1, 1, 1, 0, 0, 1],
], dtype=np.uint8)

# syndrome value (as integer) -> flipped bit position
_SYNDROME_TO_BIT = {}
for _pos in range(7):
    _e = np.zeros(7, dtype=np.uint8)
    _e[_pos] = 1
    _SYNDROME_TO_BIT[int((_HAMMING_H @ _e % 2) @ [4, 2, 1])] = _pos

_GRAY_LEVELS = {(0, 0): -3.0, (0, 1): -1.0, (1, 1): 1.0, (1, 0): 3.0}
_QAM_SCALE = 1.0 / math.sqrt(10.0)  # unit average power for the 16-point grid


def quantize_frames(frames: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-value 8-bit uniform quantization over the utterance min/max."""
    frames = np.asarray(frames, dtype=np.float64)
    vmin, vmax = float(frames.min()), float(frames.max())
    if vmax == vmin:
        return np.zeros(frames.shape, dtype=np.uint8), vmin, vmax
    q = np.rint((frames - vmin) / (vmax - vmin) * 255.0).astype(np.uint8)
    return q, vmin, vmax


def dequantize_frames(q: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    if vmax == vmin:
        return np.full(q.shape, vmin, dtype=np.float64)
    return vmin + q.astype(np.float64) / 255.0 * (vmax - vmin)


def bytes_to_bits(q: np.ndarray) -> np.ndarray:
    return np.unpackbits(q.reshape(-1))


def bits_to_bytes(bits: np.ndarray, shape) -> np.ndarray:
    return np.packbits(bits).reshape(shape)


def hamming_encode(bits: np.ndarray) -> np.ndarray:
    """(n*4,) data bits -> (n*7,) codeword bits."""
    if len(bits) % 4:
        raise EvalError("Hamming(7,4) encodes 4-bit blocks")
    blocks = bits.reshape(-1, 4)
    return (blocks @ _HAMMING_G % 2).astype(np.uint8).reshape(-1)


def hamming_decode(bits: np.ndarray) -> np.ndarray:
    """(n*7,) received bits -> (n*4,) data bits, single error corrected."""
    if len(bits) % 7:
        raise EvalError("Hamming(7,4) decodes 7-bit blocks")
    blocks = np.array(bits, dtype=np.uint8).reshape(-1, 7)
    syndromes = (blocks @ _HAMMING_H.T % 2) @ np.array([4, 2, 1])
    for val, pos in _SYNDROME_TO_BIT.items():
        hit = syndromes == val
        blocks[hit, pos] ^= 1
    return blocks[:, :4].reshape(-1)


def qam16_modulate(bits: np.ndarray) -> np.ndarray:
    """Gray-mapped 16-QAM, unit average power; 4 bits per symbol (I then Q)."""
    if len(bits) % 4:
        raise EvalError("16-QAM maps 4-bit groups")
    b = np.asarray(bits, dtype=np.uint8).reshape(-1, 4)
    i_lv = np.array([_GRAY_LEVELS[(int(x), int(y))] for x, y in b[:, :2]])
    q_lv = np.array([_GRAY_LEVELS[(int(x), int(y))] for x, y in b[:, 2:]])
    return (i_lv + 1j * q_lv) * _QAM_SCALE


_QAM_POINTS = np.array([(_GRAY_LEVELS[(a, b)] + 1j * _GRAY_LEVELS[(c, d)]) * _QAM_SCALE
                        for a in (0, 1) for b in (0, 1) for c in (0, 1) for d in (0, 1)])
_QAM_BITS = np.array([(a, b, c, d)
                      for a in (0, 1) for b in (0, 1) for c in (0, 1) for d in (0, 1)],
                     dtype=np.uint8)


def qam16_demodulate(symbols: np.ndarray) -> np.ndarray:
    """Minimum-distance hard demodulation back to bit groups."""
    d2 = np.abs(np.asarray(symbols).reshape(-1, 1) - _QAM_POINTS[None, :]) ** 2
    return _QAM_BITS[d2.argmin(axis=1)].reshape(-1)


def baseline_digital(bundle: ModelBundle, frames: np.ndarray, ch: ChannelConfig,
                     block_index: int = 0) -> list[int]:
    """Conventional chain: quantize speech, protect with Hamming(7,4), send as
    16-QAM, reconstruct frames, then translate with the stage-1 nets."""
    q, vmin, vmax = quantize_frames(frames)
    bits = hamming_encode(bytes_to_bits(q))
    pad = (-len(bits)) % 4
    padded = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    tx = qam16_modulate(padded)
    y, real = apply_channel(tx, ch, block_index=block_index)
    rx_bits = qam16_demodulate(equalize(y, real))
    decoded = hamming_decode(rx_bits[:len(bits)] if pad == 0 else rx_bits[:-pad])
    q_hat = bits_to_bytes(decoded, q.shape)
    frames_hat = dequantize_frames(q_hat, vmin, vmax)
    return pl.infer(bundle, frames_hat, ch, block_index=block_index,
                    system="deepsc_s2t_clean_encoder")


# ---------------------------------------------------------------------------
# SNR sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    snrs_db: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0)
    channels: tuple[str, ...] = ("awgn", "rayleigh")
    systems: tuple[str, ...] = ALL_SYSTEMS
    n_utterances: int = 200
    seed: int = 0
    embedding_seed: int = 0
    embedding_dim: int = 64

    def __post_init__(self):
        if not self.snrs_db or not self.systems or not self.channels:
            raise EvalError("sweep needs at least one SNR, system, and channel")
        for s in self.systems:
            if s not in ALL_SYSTEMS:
                raise EvalError(f"unknown system '{s}' (valid: {', '.join(ALL_SYSTEMS)})")


@dataclass
class MetricReport:
    system: str
    channel: str
    snr_db: float
    token_acc: float
    ngram: float
    sts: float
    n: int
    seed: int
    flags: dict = field(default_factory=dict)


def channel_seed_for(master_seed: int, kind: str) -> int:
    """Documented counter scheme: one channel seed per (master, kind); the
    utterance index is the block index, so every system and SNR point sees
    the same fading and base-noise draws."""
    ss = np.random.SeedSequence((master_seed, stable_tag("sweep-channel"), stable_tag(kind)))
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def evaluate_system(bundle: ModelBundle, corpus: Corpus, system: str, channel_kind: str,
                    snr_db: float, sweep: SweepConfig) -> MetricReport:
    """Run one (system, channel, SNR) point over the test slice."""
    seed = channel_seed_for(sweep.seed, channel_kind)
    ch = ChannelConfig(kind=channel_kind, snr_db=snr_db, seed=seed)
    n = min(sweep.n_utterances, len(corpus))
    accs, ngrams, stss = [], [], []
    flags: dict = {}
    for i in range(n):
        u = corpus.utterances[i]
        ref = strip_specials(u.target_tokens)
        try:
            if system == "baseline_digital":
                hyp_raw = baseline_digital(bundle, u.frames, ch, block_index=i)
            else:
                hyp_raw = pl.infer(bundle, u.frames, ch, block_index=i, system=system)
        except Exception as e:  # flagged, sweep continues
            flags["inference_failures"] = flags.get("inference_failures", 0) + 1
            flags.setdefault("first_failure", repr(e))
            continue
        hyp = strip_specials(hyp_raw)
        accs.append(token_accuracy(ref, hyp))
        ngrams.append(ngram_score(ref, hyp, report=flags))
        stss.append(sts_proxy(ref, hyp, bundle.cfg.vocab_tgt, dim=sweep.embedding_dim,
                              seed=sweep.embedding_seed, report=flags))
    if not accs:
        return MetricReport(system, channel_kind, snr_db, math.nan, math.nan, math.nan,
                            0, seed, flags)
    return MetricReport(system, channel_kind, snr_db, float(np.mean(accs)),
                        float(np.mean(ngrams)), float(np.mean(stss)), len(accs), seed, flags)


def snr_sweep(bundle: ModelBundle, corpus: Corpus, sweep: SweepConfig) -> list[MetricReport]:
    """All (system, channel, SNR) points, sorted like the CSV."""
    reports = []
    for system in sorted(sweep.systems):
        for kind in sorted(sweep.channels):
            for snr in sorted(sweep.snrs_db):
                reports.append(evaluate_system(bundle, corpus, system, kind, snr, sweep))
    return reports


def write_report_csv(path, reports: list[MetricReport]) -> None:
    rows = sorted(reports, key=lambda r: (r.system, r.channel, r.snr_db))
    with open(path, "w", encoding="ascii") as f:
        f.write("system,channel,snr_db,token_acc,ngram,sts_proxy,n,seed\n")
        for r in rows:
            f.write(f"{r.system},{r.channel},{r.snr_db:.6f},{r.token_acc:.6f},"
                    f"{r.ngram:.6f},{r.sts:.6f},{r.n},{r.seed}\n")
