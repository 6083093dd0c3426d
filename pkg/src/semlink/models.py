"""The seven networks of the semantic link, composed from nn blocks.

Transmitter side: the deep semantic encoder (conv extractor + transformer
converter) turns speech frames into a fixed-length target-language feature
matrix F; a dense channel encoder maps F to symbol rows X.  Receiver side: a
dense channel decoder recovers feature rows and a transformer decoder emits
token distributions.  For corrupted speech the compensator network (the
LSGAN generator) mirrors the encoder and exposes its conv-stack intermediate,
from which a small dense probe scores per-slot agreement with the clean
path; the receiver-side probe-aided compensator then recalibrates exactly
the probed rows.

Frames are zero-padded to frames_per_token * max_len before the strided
extractor, so every valid input maps to max_len positions and the probe,
feature rows, and target tokens share one index space.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from semlink import autodiff as ad
from semlink import nn
from semlink.autodiff import Tensor
from semlink.channel import stable_tag
from semlink.nn import LayerSpec, ParamStore
from semlink.tokens import BOS_ID, EOS_ID, Vocabulary

NETWORK_NAMES = ("encoder", "codec_enc", "codec_dec", "decoder",
                 "generator", "discriminator", "probe", "compensator")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticPipelineConfig:
    frame_dim: int = 16
    model_width: int = 64
    heads: int = 4
    ff_width: int = 128
    feature_width: int = 32       # width of the deep semantic feature rows F
    kernel: int = 5               # 1-D conv kernel size
    extractor_depth: int = 2
    converter_depth: int = 2      # transformer modules in the converter
    converter_conv_depth: int = 1
    decoder_depth: int = 2
    codec_hidden: int = 64        # channel encoder/decoder hidden units
    symbol_width: int = 32        # width of the symbol rows X
    vocab_src: int = 27
    vocab_tgt: int = 27
    max_len: int = 16             # target positions; the probe length equals this
    frames_per_token: int = 4     # extractor total downsampling factor
    disc_depth: int = 2
    disc_channels: int = 8
    comp_depth: int = 3
    comp_channels: int = 8
    probe_hidden: int = 32

    def __post_init__(self):
        Vocabulary(self.vocab_tgt)
        Vocabulary(self.vocab_src)
        for name in ("extractor_depth", "converter_depth", "converter_conv_depth",
                     "decoder_depth", "disc_depth", "comp_depth"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if (self.max_len * self.symbol_width) % 2:
            raise ModelError("max_len * symbol_width must be even to pair into symbols")
        if self.model_width % self.heads:
            raise ModelError("heads must divide model_width")
        self.extractor_strides()

    def extractor_strides(self) -> list[int]:
        """Stride-2 stages realizing the frames_per_token downsampling."""
        r = self.frames_per_token
        strides = []
        while r > 1:
            if r % 2:
                raise ModelError("frames_per_token must be a power of two")
            strides.append(2)
            r //= 2
        if len(strides) > self.extractor_depth:
            raise ModelError(f"extractor_depth {self.extractor_depth} too shallow for "
                             f"frames_per_token {self.frames_per_token}")
        return strides + [1] * (self.extractor_depth - len(strides))

    @property
    def max_frames(self) -> int:
        return self.frames_per_token * self.max_len


def paper_preset() -> SemanticPipelineConfig:
    """Layer counts and widths at the published scale; kept for documentation
    and config completeness, not for desk-scale training."""
    return SemanticPipelineConfig(
        frame_dim=80, model_width=128, heads=8, ff_width=512, feature_width=128,
        extractor_depth=7, converter_depth=12, converter_conv_depth=3,
        decoder_depth=8, codec_hidden=1024, symbol_width=128,
        disc_depth=5, disc_channels=64, comp_depth=5, comp_channels=64,
        probe_hidden=1024,
    )


# ---------------------------------------------------------------------------
# layer specs per network
# ---------------------------------------------------------------------------


def _conv1d_stack(prefix: str, strides: list[int], w_in: int, w_mid: int, w_out: int,
                  kernel: int) -> list[LayerSpec]:
    depth = len(strides)
    specs = []
    for i in range(depth):
        specs.append(LayerSpec(
            name=f"{prefix}{i}", kind="conv1d",
            width_in=w_in if i == 0 else w_mid,
            width_out=w_out if i == depth - 1 else w_mid,
            kernel=kernel, stride=strides[i], activation="gelu", norm=True,
        ))
    return specs


def _transformer_stack(prefix: str, depth: int, width: int, heads: int, ff: int,
                       memory_width: int = 0) -> list[LayerSpec]:
    kind = "decoder_block" if memory_width else "transformer"
    return [LayerSpec(name=f"{prefix}{i}", kind=kind, width_in=width, width_out=width,
                      heads=heads, ff_width=ff, memory_width=memory_width)
            for i in range(depth)]


def _disc_shape_after_convs(cfg: SemanticPipelineConfig) -> tuple[int, int, int]:
    h, w, ch = cfg.max_len, cfg.feature_width, 1
    for i in range(cfg.disc_depth):
        h, w = -(-h // 2), -(-w // 2)
        ch = cfg.disc_channels * (2 ** i)
    return ch, h, w


@lru_cache(maxsize=None)
def network_specs(cfg: SemanticPipelineConfig, which: str) -> list[LayerSpec]:
    w, fw = cfg.model_width, cfg.feature_width
    if which == "encoder":
        return (_conv1d_stack("ext", cfg.extractor_strides(), cfg.frame_dim, w, w, cfg.kernel)
                + _transformer_stack("conv_t", cfg.converter_depth, w, cfg.heads, cfg.ff_width)
                + _conv1d_stack("conv_c", [1] * cfg.converter_conv_depth, w, w, fw, cfg.kernel))
    if which == "codec_enc":
        return [LayerSpec(name="d0", kind="dense", width_in=fw, width_out=cfg.codec_hidden,
                          activation="relu"),
                LayerSpec(name="d1", kind="dense", width_in=cfg.codec_hidden,
                          width_out=cfg.symbol_width)]
    if which == "codec_dec":
        return [LayerSpec(name="d0", kind="dense", width_in=cfg.symbol_width,
                          width_out=cfg.codec_hidden, activation="relu"),
                LayerSpec(name="d1", kind="dense", width_in=cfg.codec_hidden, width_out=fw)]
    if which == "decoder":
        return ([LayerSpec(name="embed", kind="embedding", width_in=cfg.vocab_tgt, width_out=w)]
                + _transformer_stack("blk", cfg.decoder_depth, w, cfg.heads, cfg.ff_width,
                                     memory_width=fw)
                + [LayerSpec(name="final", kind="layernorm", width_in=w, width_out=w),
                   # small-logit init keeps the untrained output near uniform
                   LayerSpec(name="out", kind="dense", width_in=w, width_out=cfg.vocab_tgt,
                             init_scale=0.1)])
    if which == "generator":
        return (_conv1d_stack("ext", cfg.extractor_strides(), cfg.frame_dim, w, w, cfg.kernel)
                + [LayerSpec(name="lat0", kind="dense", width_in=w, width_out=w, activation="relu"),
                   LayerSpec(name="lat1", kind="dense", width_in=w, width_out=w)]
                + _transformer_stack("conv_t", cfg.converter_depth, w, cfg.heads, cfg.ff_width)
                + _conv1d_stack("conv_c", [1] * cfg.converter_conv_depth, w, w, fw, cfg.kernel))
    if which == "discriminator":
        specs = []
        ch = 1
        for i in range(cfg.disc_depth):
            out_ch = cfg.disc_channels * (2 ** i)
            specs.append(LayerSpec(name=f"c{i}", kind="conv2d", width_in=ch, width_out=out_ch,
                                   kernel=3, stride=2, activation="gelu", norm=True))
            ch = out_ch
        ch, h, wid = _disc_shape_after_convs(cfg)
        specs.append(LayerSpec(name="head", kind="dense", width_in=ch * h * wid, width_out=1))
        return specs
    if which == "probe":
        return [LayerSpec(name="d0", kind="dense", width_in=w, width_out=cfg.probe_hidden,
                          activation="gelu"),
                LayerSpec(name="d1", kind="dense", width_in=cfg.probe_hidden,
                          width_out=cfg.probe_hidden, activation="gelu"),
                LayerSpec(name="d2", kind="dense", width_in=cfg.probe_hidden, width_out=1)]
    if which == "compensator":
        specs = []
        ch = 2
        for i in range(cfg.comp_depth):
            last = i == cfg.comp_depth - 1
            specs.append(LayerSpec(name=f"c{i}", kind="conv2d", width_in=ch,
                                   width_out=1 if last else cfg.comp_channels,
                                   kernel=3, stride=1,
                                   activation="identity" if last else "gelu", norm=not last))
            ch = cfg.comp_channels
        return specs
    raise ModelError(f"unknown network '{which}' (valid: {', '.join(NETWORK_NAMES)})")


def init_network(cfg: SemanticPipelineConfig, which: str, seed: int) -> ParamStore:
    return nn.init_params(network_specs(cfg, which),
                          int(np.random.SeedSequence((seed, stable_tag(which))).generate_state(1)[0]))


@dataclass
class ModelBundle:
    """Configuration plus one parameter store per network."""

    cfg: SemanticPipelineConfig
    nets: dict[str, ParamStore]

    @classmethod
    def initialize(cls, cfg: SemanticPipelineConfig, seed: int) -> "ModelBundle":
        return cls(cfg=cfg, nets={name: init_network(cfg, name, seed) for name in NETWORK_NAMES})

    def state_arrays(self, names=None) -> dict[str, np.ndarray]:
        out = {}
        for net in names or NETWORK_NAMES:
            for pname, arr in self.nets[net].state_arrays().items():
                out[f"{net}/{pname}"] = arr
        return out

    def load_state(self, arrays: dict[str, np.ndarray], names=None) -> None:
        for net in names or NETWORK_NAMES:
            sub = {k[len(net) + 1:]: v for k, v in arrays.items() if k.startswith(f"{net}/")}
            if not sub:
                raise ModelError(f"checkpoint holds no tensors for network '{net}'")
            self.nets[net].load_state(sub)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _specs_by_name(cfg: SemanticPipelineConfig, which: str) -> dict[str, LayerSpec]:
    return {s.name: s for s in network_specs(cfg, which)}


def _pad_frames(cfg: SemanticPipelineConfig, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cfg.frame_dim:
        raise ModelError(f"frames must be (n, {cfg.frame_dim}), got {frames.shape}")
    n = len(frames)
    if n < cfg.frames_per_token:
        raise ModelError(f"need at least {cfg.frames_per_token} frames to survive "
                         f"the extractor striding, got {n}")
    if n > cfg.max_frames:
        raise ModelError(f"{n} frames exceed the {cfg.max_frames}-frame capacity")
    return np.pad(frames, ((0, cfg.max_frames - n), (0, 0)))


def _conv_transformer_trunk(cfg, store, specs, x: Tensor, prefix_t: str) -> Tensor:
    x = ad.add(x, Tensor(nn.positional_encoding(cfg.max_len, cfg.model_width)))
    for i in range(cfg.converter_depth):
        x = nn.transformer_block_forward(specs[f"{prefix_t}{i}"], store, x)
    for i in range(cfg.converter_conv_depth):
        x = nn.conv1d_module_forward(specs[f"conv_c{i}"], store, x)
    return x


def encoder_extract(cfg: SemanticPipelineConfig, store: ParamStore, frames) -> Tensor:
    """Extractor conv stack only: (n, frame_dim) -> (max_len, model_width)."""
    specs = _specs_by_name(cfg, "encoder")
    x = Tensor(_pad_frames(cfg, frames)) if not isinstance(frames, Tensor) else frames
    for i in range(cfg.extractor_depth):
        x = nn.conv1d_module_forward(specs[f"ext{i}"], store, x)
    return x


def deep_semantic_encode(cfg: SemanticPipelineConfig, store: ParamStore, frames) -> Tensor:
    """Eq-style deep semantic encoder: frames -> F of shape (max_len, feature_width)."""
    specs = _specs_by_name(cfg, "encoder")
    x = encoder_extract(cfg, store, frames)
    return _conv_transformer_trunk(cfg, store, specs, x, "conv_t")


def channel_encode(cfg: SemanticPipelineConfig, store: ParamStore, f: Tensor) -> Tensor:
    specs = _specs_by_name(cfg, "codec_enc")
    return nn.dense_forward(specs["d1"], store, nn.dense_forward(specs["d0"], store, f))


def channel_decode(cfg: SemanticPipelineConfig, store: ParamStore, y: Tensor) -> Tensor:
    specs = _specs_by_name(cfg, "codec_dec")
    return nn.dense_forward(specs["d1"], store, nn.dense_forward(specs["d0"], store, y))


def _decoder_trunk(cfg, store, specs, tokens: np.ndarray, memory: Tensor) -> Tensor:
    n = len(tokens)
    x = ad.gather(store["embed/table"], tokens)
    x = ad.add(x, Tensor(nn.positional_encoding(cfg.max_len, cfg.model_width)[:n]))
    mask = nn.causal_mask(n)
    for i in range(cfg.decoder_depth):
        x = nn.decoder_block_forward(specs[f"blk{i}"], store, x, memory, mask)
    x = ad.layernorm(x, store["final/ln_g"], store["final/ln_b"])
    logits = nn.dense_forward(specs["out"], store, x)
    return ad.softmax(logits, axis=-1)


def decode_teacher(cfg: SemanticPipelineConfig, store: ParamStore, f_hat: Tensor,
                   target_tokens) -> Tensor:
    """Teacher-forced distributions: row l predicts target_tokens[l]."""
    targets = np.asarray(target_tokens, dtype=np.int64)
    if targets[0] != BOS_ID:
        raise ModelError("teacher tokens must be BOS-prefixed")
    if len(targets) > cfg.max_len:
        raise ModelError(f"teacher length {len(targets)} exceeds max_len {cfg.max_len}")
    specs = _specs_by_name(cfg, "decoder")
    return _decoder_trunk(cfg, store, specs, targets[:-1], f_hat)


def greedy_decode(cfg: SemanticPipelineConfig, store: ParamStore, f_hat: Tensor) -> list[int]:
    """Autoregressive argmax decoding until EOS or max_len tokens."""
    specs = _specs_by_name(cfg, "decoder")
    tokens = [BOS_ID]
    out: list[int] = []
    for _ in range(cfg.max_len - 1):
        dist = _decoder_trunk(cfg, store, specs, np.array(tokens), f_hat)
        nxt = int(np.argmax(dist.data[-1]))
        out.append(nxt)
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
    return out


def generator_extract(cfg: SemanticPipelineConfig, store: ParamStore, frames) -> Tensor:
    """Compensator conv stack only; the clean-input pass of this stack is the
    reference intermediate representation for probe training."""
    specs = _specs_by_name(cfg, "generator")
    x = Tensor(_pad_frames(cfg, frames)) if not isinstance(frames, Tensor) else frames
    for i in range(cfg.extractor_depth):
        x = nn.conv1d_module_forward(specs[f"ext{i}"], store, x)
    return x


def generator_forward(cfg: SemanticPipelineConfig, store: ParamStore, frames,
                      ) -> tuple[Tensor, Tensor]:
    """Compensator network: corrupted frames -> (F~, intermediate I~)."""
    specs = _specs_by_name(cfg, "generator")
    intermediate = generator_extract(cfg, store, frames)
    x = intermediate
    x = nn.dense_forward(specs["lat1"], store, nn.dense_forward(specs["lat0"], store, x))
    f_tilde = _conv_transformer_trunk(cfg, store, specs, x, "conv_t")
    return f_tilde, intermediate


def discriminate(cfg: SemanticPipelineConfig, store: ParamStore, f: Tensor) -> Tensor:
    """Realness score in (0, 1) for a feature matrix."""
    if f.shape != (cfg.max_len, cfg.feature_width):
        raise ModelError(f"discriminator input {f.shape} != "
                         f"({cfg.max_len}, {cfg.feature_width})")
    specs = _specs_by_name(cfg, "discriminator")
    x = f
    for i in range(cfg.disc_depth):
        x = nn.conv2d_module_forward(specs[f"c{i}"], store, x)
    flat = ad.reshape(x, (1, x.size))
    score = nn.dense_forward(specs["head"], store, flat)
    return ad.reshape(ad.sigmoid(score), ())


def probe_forward(cfg: SemanticPipelineConfig, store: ParamStore, intermediate: Tensor) -> Tensor:
    """Per-position agreement score c in (0,1)^max_len from the intermediate."""
    specs = _specs_by_name(cfg, "probe")
    x = intermediate
    for name in ("d0", "d1", "d2"):
        x = nn.dense_forward(specs[name], store, x)
    return ad.reshape(ad.sigmoid(x), (cfg.max_len,))


def binarize(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where value >= threshold (a value exactly at threshold maps to 1)."""
    return (np.asarray(values) >= threshold).astype(np.uint8)


def impairment_probe(c: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Transmitted probe C: marks positions whose agreement score fails the
    threshold, i.e. the positions flagged as semantically impaired."""
    return 1 - binarize(c, threshold)


def probe_compensate(cfg: SemanticPipelineConfig, store: ParamStore, f_hat_tilde: Tensor,
                     probe: np.ndarray) -> Tensor:
    """Recalibrate rows where probe==1; rows with probe==0 pass through
    bit-exactly (structural row select, not a learned identity)."""
    probe = np.asarray(probe)
    if probe.shape != (cfg.max_len,):
        raise ModelError(f"probe length {probe.shape} != ({cfg.max_len},)")
    if f_hat_tilde.shape != (cfg.max_len, cfg.feature_width):
        raise ModelError(f"compensator input {f_hat_tilde.shape} != "
                         f"({cfg.max_len}, {cfg.feature_width})")
    specs = _specs_by_name(cfg, "compensator")
    probe_plane = np.broadcast_to(probe.astype(np.float64)[:, None],
                                  (cfg.max_len, cfg.feature_width))
    x = ad.concat([ad.reshape(f_hat_tilde, (1, cfg.max_len, cfg.feature_width)),
                   ad.reshape(Tensor(probe_plane.copy()), (1, cfg.max_len, cfg.feature_width))],
                  axis=0)
    for i in range(cfg.comp_depth):
        x = nn.conv2d_module_forward(specs[f"c{i}"], store, x)
    delta = ad.reshape(x, (cfg.max_len, cfg.feature_width))
    recalibrated = ad.add(f_hat_tilde, delta)
    rows = np.broadcast_to((probe != 0)[:, None], (cfg.max_len, cfg.feature_width))
    return ad.where(rows, recalibrated, f_hat_tilde)
