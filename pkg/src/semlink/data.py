"""Synthetic paired-utterance corpus and the corruption model.

Each content token has a fixed random acoustic prototype; an utterance's
frames are its tokens' prototypes repeated ``frames_per_token`` times plus
Gaussian noise.  The translation rule is a seeded token bijection followed by
a fixed swap of adjacent slots, so an exact inverse oracle exists.  Corruption
overwrites contiguous frame spans with either loud noise bursts or frames
lifted from another utterance; ground-truth masks are kept for evaluation
only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from semlink.channel import stable_tag
from semlink.tokens import BOS_ID, EOS_ID, N_RESERVED, PAD_ID, Vocabulary

SEPARABILITY_LIMIT = 0.3   # sigma_frame must stay below this fraction of the
                           # minimum prototype distance


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    vocab_src: int = 27            # 24 content tokens + PAD/BOS/EOS
    vocab_tgt: int = 27
    frames_per_token: int = 4
    frame_dim: int = 16
    frame_noise: float = 0.3
    rule_seed: int = 7
    min_tokens: int = 4
    max_tokens: int = 12
    max_target_len: int = 16       # BOS ... EOS padded to this length
    size: int = 2000
    seed: int = 0

    def __post_init__(self):
        Vocabulary(self.vocab_src)
        Vocabulary(self.vocab_tgt)
        if self.frames_per_token < 1:
            raise DataError("frames_per_token must be >= 1")
        if self.frame_noise < 0:
            raise DataError("frame_noise must be >= 0")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise DataError("invalid token length range")
        if self.max_tokens + 2 > self.max_target_len:
            raise DataError(f"max_tokens {self.max_tokens} + BOS/EOS exceeds "
                            f"max_target_len {self.max_target_len}")


@dataclass
class Utterance:
    uid: int
    source_tokens: np.ndarray          # content ids, length n
    target_tokens: np.ndarray          # BOS ... EOS padded to max_target_len
    frames: np.ndarray                 # (n * frames_per_token, frame_dim)
    mask: np.ndarray | None = None     # per-frame corruption flags, None if clean

    @property
    def is_clean(self) -> bool:
        return self.mask is None


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "interference"         # noise-burst | interference
    rho: float = 0.25                  # corrupted fraction of frames
    spans: int = 2
    burst_scale: float = 3.0           # burst sigma as a multiple of frame RMS
    interference_gain: float = 3.0     # donor amplitude multiple (impairment mixing ratio)

    def __post_init__(self):
        if self.kind not in ("noise-burst", "interference"):
            raise DataError(f"unknown corruption kind '{self.kind}'")
        if not 0.0 <= self.rho <= 1.0:
            raise DataError("rho must lie in [0, 1]")
        if self.rho == 0.0 and self.spans > 0:
            raise DataError("rho=0 with spans>0 corrupts nothing")


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: list[Utterance]
    prototypes: np.ndarray             # (n_content_src, frame_dim)

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class TranslationRule:
    """Token bijection plus a fixed swap of adjacent slots."""

    mapping: np.ndarray                # content index -> target content index

    def apply(self, source_content: np.ndarray) -> np.ndarray:
        mapped = self.mapping[source_content - N_RESERVED] + N_RESERVED
        return _swap_adjacent(mapped)

    def invert(self, target_content: np.ndarray) -> np.ndarray:
        inverse = np.argsort(self.mapping)
        unswapped = _swap_adjacent(np.asarray(target_content))
        return inverse[unswapped - N_RESERVED] + N_RESERVED


def _swap_adjacent(tokens: np.ndarray) -> np.ndarray:
    out = np.asarray(tokens).copy()
    n = len(out) - len(out) % 2
    out[0:n:2], out[1:n:2] = tokens[1:n:2], tokens[0:n:2]
    return out


def translation_rule(spec: CorpusSpec) -> TranslationRule:
    if spec.vocab_src != spec.vocab_tgt:
        raise DataError("token-wise bijection requires equal content vocabularies")
    rng = np.random.default_rng(np.random.SeedSequence((spec.rule_seed, stable_tag("rule"))))
    return TranslationRule(mapping=rng.permutation(spec.vocab_src - N_RESERVED))


def prototypes_for(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, stable_tag("prototypes"))))
    return rng.normal(size=(spec.vocab_src - N_RESERVED, spec.frame_dim))


def _pad_target(content: np.ndarray, max_len: int) -> np.ndarray:
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[0] = BOS_ID
    out[1:1 + len(content)] = content
    out[1 + len(content)] = EOS_ID
    return out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build the corpus deterministically from spec.seed and verify that
    clean frames are nearest-prototype classifiable."""
    protos = prototypes_for(spec)
    dists = np.linalg.norm(protos[:, None, :] - protos[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    d_min = float(dists.min())
    if spec.frame_noise > SEPARABILITY_LIMIT * d_min:
        raise DataError(f"frame_noise {spec.frame_noise} exceeds {SEPARABILITY_LIMIT} of the "
                        f"minimum prototype distance {d_min:.3f}")
    rule = translation_rule(spec)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, stable_tag("utterances"))))
    r = spec.frames_per_token
    utterances = []
    for uid in range(spec.size):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        src = rng.integers(N_RESERVED, spec.vocab_src, size=n)
        clean = np.repeat(protos[src - N_RESERVED], r, axis=0)
        frames = clean + spec.frame_noise * rng.normal(size=clean.shape)
        utterances.append(Utterance(
            uid=uid,
            source_tokens=src,
            target_tokens=_pad_target(rule.apply(src), spec.max_target_len),
            frames=frames,
        ))
    corpus = Corpus(spec=spec, utterances=utterances, prototypes=protos)
    acc = nearest_prototype_accuracy(corpus)
    if acc < 1.0:
        raise DataError(f"clean corpus is not linearly separable: nearest-prototype "
                        f"accuracy {acc:.4f} < 1")
    return corpus


def nearest_prototype_accuracy(corpus: Corpus) -> float:
    """Fraction of clean frames whose nearest prototype is their own token."""
    r = corpus.spec.frames_per_token
    frames = np.concatenate([u.frames for u in corpus.utterances], axis=0)
    labels = np.concatenate([np.repeat(u.source_tokens - N_RESERVED, r)
                             for u in corpus.utterances])
    d = ((frames[:, None, :] - corpus.prototypes[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == labels))


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def _place_spans(n_frames: int, total: int, spans: int, rng: np.random.Generator,
                 ) -> list[tuple[int, int]]:
    """Non-overlapping contiguous spans covering `total` frames."""
    base, rem = divmod(total, spans)
    lengths = [base + (1 if k < rem else 0) for k in range(spans)]
    free = n_frames - total
    gaps = rng.multinomial(free, np.full(spans + 1, 1.0 / (spans + 1)))
    out = []
    pos = 0
    for k in range(spans):
        pos += gaps[k]
        out.append((pos, pos + lengths[k]))
        pos += lengths[k]
    return out


def corrupt(u: Utterance, cspec: CorruptionSpec, rng: np.random.Generator,
            donor: Utterance | None = None) -> Utterance:
    """Overwrite span frames per the corruption kind; targets stay the clean
    translation and the ground-truth mask records the touched frames."""
    if not u.is_clean:
        raise DataError(f"utterance {u.uid} is already corrupted")
    n_frames = len(u.frames)
    total = int(round(cspec.rho * n_frames))
    frames = u.frames.copy()
    mask = np.zeros(n_frames, dtype=np.uint8)
    if total == 0 or cspec.spans == 0:
        return replace(u, frames=frames, mask=mask)
    spans = min(cspec.spans, total)
    rms = float(np.sqrt(np.mean(u.frames ** 2)))
    for a, b in _place_spans(n_frames, total, spans, rng):
        if cspec.kind == "noise-burst":
            frames[a:b] = rng.normal(0.0, cspec.burst_scale * rms, size=(b - a, u.frames.shape[1]))
        else:
            if donor is None:
                raise DataError("interference corruption needs a donor utterance")
            offset = int(rng.integers(0, len(donor.frames)))
            idx = (offset + np.arange(b - a)) % len(donor.frames)
            frames[a:b] = cspec.interference_gain * donor.frames[idx]
        mask[a:b] = 1
    return replace(u, frames=frames, mask=mask)


def corrupt_corpus(corpus: Corpus, cspec: CorruptionSpec, seed: int) -> Corpus:
    """Corrupted sibling corpus: same ids and targets, corrupted frames."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, stable_tag("corruption"))))
    n = len(corpus.utterances)
    out = []
    for i, u in enumerate(corpus.utterances):
        donor = corpus.utterances[(i + int(rng.integers(1, max(n, 2)))) % n] if n > 1 else u
        out.append(corrupt(u, cspec, rng, donor=donor))
    return Corpus(spec=corpus.spec, utterances=out, prototypes=corpus.prototypes)


def frame_mask_to_probe_truth(mask: np.ndarray, frames_per_token: int, max_len: int,
                              ) -> np.ndarray:
    """Per-token-slot truth: slot l is 1 iff any frame in its window is
    corrupted; slots beyond the source length are 0."""
    mask = np.asarray(mask)
    if len(mask) % frames_per_token:
        raise DataError(f"mask length {len(mask)} not divisible by r={frames_per_token}")
    slots = len(mask) // frames_per_token
    if slots > max_len:
        raise DataError(f"{slots} token slots exceed max length {max_len}")
    out = np.zeros(max_len, dtype=np.uint8)
    out[:slots] = mask.reshape(slots, frames_per_token).any(axis=1)
    return out


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

_SPEC_FIELDS = ("vocab_src", "vocab_tgt", "frames_per_token", "frame_dim", "frame_noise",
                "rule_seed", "min_tokens", "max_tokens", "max_target_len", "size", "seed")


def _spec_to_header(spec: CorpusSpec) -> str:
    return ",".join(f"{k}={getattr(spec, k)!r}" for k in _SPEC_FIELDS)


def _spec_from_header(text: str) -> CorpusSpec:
    kwargs = {}
    for item in text.split(","):
        k, _, v = item.partition("=")
        if k not in _SPEC_FIELDS:
            raise DataError(f"unknown corpus spec field '{k}'")
        kwargs[k] = float(v) if k == "frame_noise" else int(v)
    return CorpusSpec(**kwargs)


def save_corpus(path, corpus: Corpus) -> None:
    """Line-delimited records under a header carrying the spec and count."""
    with open(path, "w", encoding="ascii") as f:
        f.write(f"#semlink-corpus v1 n={len(corpus.utterances)} {_spec_to_header(corpus.spec)}\n")
        for u in corpus.utterances:
            frames_hex = u.frames.astype("<f8").tobytes().hex()
            mask_str = "-" if u.mask is None else "".join(str(int(b)) for b in u.mask)
            f.write("|".join([
                str(u.uid),
                " ".join(str(t) for t in u.source_tokens),
                " ".join(str(t) for t in u.target_tokens),
                frames_hex,
                mask_str,
            ]) + "\n")


def load_corpus(path) -> Corpus:
    with open(path, encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("#semlink-corpus v1 "):
        raise DataError(f"{path}: not a corpus file")
    header = lines[0][len("#semlink-corpus v1 "):]
    count_part, _, spec_part = header.partition(" ")
    if not count_part.startswith("n="):
        raise DataError(f"{path}: malformed header")
    declared = int(count_part[2:])
    spec = _spec_from_header(spec_part)
    utterances = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("|")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: malformed record ({len(parts)} fields)")
        try:
            uid = int(parts[0])
            src = np.array([int(t) for t in parts[1].split()], dtype=np.int64)
            tgt = np.array([int(t) for t in parts[2].split()], dtype=np.int64)
            raw = bytes.fromhex(parts[3])
            frames = np.frombuffer(raw, dtype="<f8").reshape(-1, spec.frame_dim).astype(np.float64)
            mask = None if parts[4] == "-" else np.array([int(c) for c in parts[4]], dtype=np.uint8)
        except (ValueError, IndexError) as e:
            raise DataError(f"{path}:{lineno}: malformed record: {e}") from None
        utterances.append(Utterance(uid=uid, source_tokens=src, target_tokens=tgt,
                                    frames=frames, mask=mask))
    if len(utterances) != declared:
        raise DataError(f"{path}: header declares {declared} records, found {len(utterances)}")
    return Corpus(spec=spec, utterances=utterances, prototypes=prototypes_for(spec))
