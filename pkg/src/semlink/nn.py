"""Reusable layers on top of the tape engine: dense, conv modules, pre-norm
transformer encoder/decoder blocks, embeddings, sinusoidal positions, Adam,
and the binary checkpoint container.

Parameter tensors live in a :class:`ParamStore` keyed by slash-separated
paths; construction order is fixed by the spec list, which makes
initialization deterministic given the seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from semlink import autodiff as ad
from semlink.autodiff import Tensor

CHECKPOINT_MAGIC = b"SMLKCKPT"
CHECKPOINT_VERSION = 1

# Conv modules normalize with a larger epsilon: zero-padded frame tails reach
# them as (near-)constant rows whose variance sits at the epsilon scale, and a
# tiny epsilon would put a curvature cliff there (and a 1/sqrt(eps) gradient
# amplifier on padded positions).
CONV_LN_EPS = 1e-3

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": ad.relu,
    "gelu": ad.gelu,
    "sigmoid": ad.sigmoid,
}


class NNError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Hyperparameters of one named layer."""

    name: str
    kind: str                 # dense | conv1d | conv2d | transformer | decoder_block | embedding | layernorm
    width_in: int = 0
    width_out: int = 0
    heads: int = 1
    activation: str = "identity"
    kernel: int = 3
    stride: int = 1
    norm: bool = False        # layernorm after the activation (conv modules)
    ff_width: int = 0         # transformer feed-forward width
    memory_width: int = 0     # decoder cross-attention source width
    init_scale: float = 1.0   # multiplier on the init limit (small for logit heads)

    def __post_init__(self):
        if self.width_in <= 0 or self.width_out <= 0:
            raise NNError(f"layer '{self.name}': widths must be positive")
        if self.kind in ("transformer", "decoder_block") and self.width_out % self.heads != 0:
            raise NNError(f"layer '{self.name}': heads ({self.heads}) must divide width ({self.width_out})")
        if self.activation not in ACTIVATIONS:
            raise NNError(f"layer '{self.name}': unknown activation '{self.activation}'")


class ParamStore:
    """Ordered, named map of trainable tensors."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise NNError(f"duplicate parameter name '{name}'")
        t = Tensor(array, trainable=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise NNError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.trainable = flag
            if not flag:
                t.grad = None

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise NNError(f"checkpoint missing parameter '{name}'")
            if arrays[name].shape != t.data.shape:
                raise NNError(f"checkpoint shape mismatch for '{name}': "
                              f"{arrays[name].shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(arrays[name], dtype=np.float64)
            t.grad = None


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _init_layer(store: ParamStore, spec: LayerSpec, rng: np.random.Generator) -> None:
    p = spec.name
    if spec.kind == "dense":
        store.create(f"{p}/w", spec.init_scale * xavier_uniform(
            rng, spec.width_in, spec.width_out, (spec.width_in, spec.width_out)))
        store.create(f"{p}/b", np.zeros(spec.width_out))
    elif spec.kind == "embedding":
        store.create(f"{p}/table", xavier_uniform(rng, spec.width_in, spec.width_out,
                                                  (spec.width_in, spec.width_out)))
    elif spec.kind == "layernorm":
        store.create(f"{p}/ln_g", np.ones(spec.width_out))
        store.create(f"{p}/ln_b", np.zeros(spec.width_out))
    elif spec.kind == "conv1d":
        fan_in = spec.kernel * spec.width_in
        store.create(f"{p}/w", he_uniform(rng, fan_in, (spec.kernel, spec.width_in, spec.width_out)))
        store.create(f"{p}/b", np.zeros(spec.width_out))
        if spec.norm:
            store.create(f"{p}/ln_g", np.ones(spec.width_out))
            store.create(f"{p}/ln_b", np.zeros(spec.width_out))
    elif spec.kind == "conv2d":
        fan_in = spec.kernel * spec.kernel * spec.width_in
        store.create(f"{p}/w", he_uniform(rng, fan_in,
                                          (spec.kernel, spec.kernel, spec.width_in, spec.width_out)))
        store.create(f"{p}/b", np.zeros(spec.width_out))
        if spec.norm:
            store.create(f"{p}/ln_g", np.ones(spec.width_out))
            store.create(f"{p}/ln_b", np.zeros(spec.width_out))
    elif spec.kind in ("transformer", "decoder_block"):
        d = spec.width_out
        for ln in ("ln1", "ln2") + (("ln3",) if spec.kind == "decoder_block" else ()):
            store.create(f"{p}/{ln}_g", np.ones(d))
            store.create(f"{p}/{ln}_b", np.zeros(d))
        # No key bias: the row softmax cancels a constant shift of the keys
        # exactly, so the parameter would be pure redundancy with an
        # identically-zero gradient.
        for proj in ("q", "v", "o"):
            store.create(f"{p}/attn_{proj}_w", xavier_uniform(rng, d, d, (d, d)))
            store.create(f"{p}/attn_{proj}_b", np.zeros(d))
        store.create(f"{p}/attn_k_w", xavier_uniform(rng, d, d, (d, d)))
        if spec.kind == "decoder_block":
            m = spec.memory_width or d
            store.create(f"{p}/cross_q_w", xavier_uniform(rng, d, d, (d, d)))
            store.create(f"{p}/cross_q_b", np.zeros(d))
            store.create(f"{p}/cross_k_w", xavier_uniform(rng, m, d, (m, d)))
            store.create(f"{p}/cross_v_w", xavier_uniform(rng, m, d, (m, d)))
            store.create(f"{p}/cross_v_b", np.zeros(d))
            store.create(f"{p}/cross_o_w", xavier_uniform(rng, d, d, (d, d)))
            store.create(f"{p}/cross_o_b", np.zeros(d))
        ff = spec.ff_width or 4 * d
        store.create(f"{p}/ff1_w", xavier_uniform(rng, d, ff, (d, ff)))
        store.create(f"{p}/ff1_b", np.zeros(ff))
        store.create(f"{p}/ff2_w", xavier_uniform(rng, ff, d, (ff, d)))
        store.create(f"{p}/ff2_b", np.zeros(d))
    else:
        raise NNError(f"layer '{p}': unknown kind '{spec.kind}'")


def init_params(specs: list[LayerSpec], seed: int) -> ParamStore:
    """Create all parameters for `specs`, deterministically from `seed`."""
    store = ParamStore(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for spec in specs:
        _init_layer(store, spec, rng)
    return store


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _bias_add(x: Tensor, b: Tensor) -> Tensor:
    return ad.add(x, ad.expand(b, x.shape))


def dense_forward(spec: LayerSpec, store: ParamStore, x: Tensor) -> Tensor:
    """y = act(x W + b); x rows of width spec.width_in."""
    if x.shape[-1] != spec.width_in:
        raise NNError(f"layer '{spec.name}': input width {x.shape[-1]} != {spec.width_in}")
    y = _bias_add(ad.matmul(x, store[f"{spec.name}/w"]), store[f"{spec.name}/b"])
    return ACTIVATIONS[spec.activation](y)


def conv1d_module_forward(spec: LayerSpec, store: ParamStore, x: Tensor) -> Tensor:
    """Conv module: conv1d -> bias -> activation -> optional layernorm."""
    if x.shape[-1] != spec.width_in:
        raise NNError(f"layer '{spec.name}': input channels {x.shape[-1]} != {spec.width_in}")
    y = _bias_add(ad.conv1d(x, store[f"{spec.name}/w"], stride=spec.stride), store[f"{spec.name}/b"])
    y = ACTIVATIONS[spec.activation](y)
    if spec.norm:
        y = ad.layernorm(y, store[f"{spec.name}/ln_g"], store[f"{spec.name}/ln_b"],
                         eps=CONV_LN_EPS)
    return y


def conv2d_module_forward(spec: LayerSpec, store: ParamStore, x: Tensor) -> Tensor:
    """Conv module on (Cin, H, W) maps; bias and layernorm act on channels."""
    y = ad.conv2d(x, store[f"{spec.name}/w"], stride=spec.stride)
    # move channels last for bias/norm, then back
    y = ad.transpose(y, (1, 2, 0))
    y = _bias_add(y, store[f"{spec.name}/b"])
    y = ACTIVATIONS[spec.activation](y)
    if spec.norm:
        y = ad.layernorm(y, store[f"{spec.name}/ln_g"], store[f"{spec.name}/ln_b"],
                         eps=CONV_LN_EPS)
    return ad.transpose(y, (2, 0, 1))


def _project(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return _bias_add(ad.matmul(x, store[f"{name}_w"]), store[f"{name}_b"])


def multi_head_attention(store: ParamStore, prefix: str, query: Tensor, keyval: Tensor,
                         heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Projections live under `{prefix}_q/k/v/o`; mask is additive (Lq, Lk)."""
    d = store[f"{prefix}_q_w"].shape[1]
    dh = d // heads
    q = _project(store, f"{prefix}_q", query)
    k = ad.matmul(keyval, store[f"{prefix}_k_w"])
    v = _project(store, f"{prefix}_v", keyval)
    if mask is not None and mask.shape != (q.shape[0], k.shape[0]):
        raise NNError(f"attention mask shape {mask.shape} does not match "
                      f"({q.shape[0]}, {k.shape[0]})")
    scale = Tensor(1.0 / math.sqrt(dh))
    head_outs = []
    for h in range(heads):
        qh = ad.slice_axis(q, 1, h * dh, (h + 1) * dh)
        kh = ad.slice_axis(k, 1, h * dh, (h + 1) * dh)
        vh = ad.slice_axis(v, 1, h * dh, (h + 1) * dh)
        scores = ad.mul(scale, ad.matmul(qh, ad.transpose(kh)))
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        head_outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    merged = head_outs[0] if heads == 1 else ad.concat(head_outs, axis=1)
    return _project(store, f"{prefix}_o", merged)


def transformer_block_forward(spec: LayerSpec, store: ParamStore, x: Tensor,
                              mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm block: LN -> self-attention -> residual -> LN -> FF -> residual."""
    p = spec.name
    h = ad.layernorm(x, store[f"{p}/ln1_g"], store[f"{p}/ln1_b"])
    x = ad.add(x, multi_head_attention(store, f"{p}/attn", h, h, spec.heads, mask))
    h = ad.layernorm(x, store[f"{p}/ln2_g"], store[f"{p}/ln2_b"])
    ff = _project(store, f"{p}/ff2", ad.gelu(_project(store, f"{p}/ff1", h)))
    return ad.add(x, ff)


def decoder_block_forward(spec: LayerSpec, store: ParamStore, x: Tensor, memory: Tensor,
                          self_mask: np.ndarray | None = None) -> Tensor:
    """Masked self-attention, cross-attention over memory, feed-forward."""
    p = spec.name
    m = spec.memory_width or spec.width_out
    if memory.shape[-1] != m:
        raise NNError(f"layer '{p}': memory width {memory.shape[-1]} != {m}")
    h = ad.layernorm(x, store[f"{p}/ln1_g"], store[f"{p}/ln1_b"])
    x = ad.add(x, multi_head_attention(store, f"{p}/attn", h, h, spec.heads, self_mask))
    h = ad.layernorm(x, store[f"{p}/ln2_g"], store[f"{p}/ln2_b"])
    x = ad.add(x, multi_head_attention(store, f"{p}/cross", h, memory, spec.heads))
    h = ad.layernorm(x, store[f"{p}/ln3_g"], store[f"{p}/ln3_b"])
    ff = _project(store, f"{p}/ff2", ad.gelu(_project(store, f"{p}/ff1", h)))
    return ad.add(x, ff)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: row i may attend to positions <= i."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = ad.MASK_FILL
    return m


_POSENC_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal position table (n, d); d must be even."""
    if d % 2:
        raise NNError("positional encoding width must be even")
    key = (n, d)
    if key not in _POSENC_CACHE:
        pos = np.arange(n)[:, None]
        i = np.arange(d // 2)[None, :]
        angle = pos / np.power(10000.0, 2.0 * i / d)
        pe = np.zeros((n, d))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _POSENC_CACHE[key] = pe
    return _POSENC_CACHE[key]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam over a ParamStore."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, store: ParamStore) -> None:
    """Apply one update to every parameter in the store; clears grads."""
    for name, p in store.items():
        if p.grad is None:
            raise NNError(f"adam_step: parameter '{name}' has no gradient")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for name, p in store.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


def adam_state_arrays(state: AdamState, prefix: str = "adam") -> dict[str, np.ndarray]:
    out = {f"{prefix}/t": np.array(float(state.step_count))}
    for name, arr in state.m.items():
        out[f"{prefix}/m/{name}"] = arr.copy()
    for name, arr in state.v.items():
        out[f"{prefix}/v/{name}"] = arr.copy()
    return out


def adam_state_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "adam",
                           **hyper) -> AdamState:
    state = AdamState(**hyper)
    state.step_count = int(arrays[f"{prefix}/t"])
    for name, arr in arrays.items():
        if name.startswith(f"{prefix}/m/"):
            state.m[name[len(prefix) + 3:]] = arr.copy()
        elif name.startswith(f"{prefix}/v/"):
            state.v[name[len(prefix) + 3:]] = arr.copy()
    return state


def jitter_params(stores: list[ParamStore], rng: np.random.Generator,
                  scale: float = 0.05) -> None:
    """Move parameters off structured init values before gradient checking.

    Fresh init is a degenerate point: zero biases and zero padding put relu
    inputs exactly at the kink, where subgradients and finite differences
    legitimately disagree.  Checks are specified at random points.
    """
    for store in stores:
        for _, p in store.items():
            p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)


def grad_check_params(loss_fn, stores: list[ParamStore], eps: float = 1e-5,
                      tol: float = 1e-4, max_coords: int = 100,
                      rng: np.random.Generator | None = None) -> ad.GradCheckReport:
    """Central-difference check of d(loss)/d(params) over sampled coordinates.

    loss_fn re-evaluates the scalar loss from the stores' current data; it
    must be deterministic.  Tape gradients are compared against finite
    differences on up to max_coords coordinates sampled across all stores.
    """
    for store in stores:
        store.zero_grads()
    with ad.Tape() as tape:
        tape.backward(loss_fn())
    params = [t for store in stores for _, t in store.items()]
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1) for t in params
    ])
    for store in stores:
        store.zero_grads()

    sizes = [t.size for t in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    gen = rng if rng is not None else np.random.default_rng(0)
    coords = gen.choice(total, size=min(max_coords, total), replace=False)

    max_err, worst = 0.0, None
    failures: list[str] = []
    for c in coords:
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        t = params[k]
        flat = t.data.reshape(-1)
        j = int(c - offsets[k])
        old = flat[j]
        try:
            flat[j] = old + eps
            f_plus = float(loss_fn().data)
            flat[j] = old - eps
            f_minus = float(loss_fn().data)
        except ad.NonFiniteError:
            failures.append(f"non-finite value probing coordinate {int(c)}")
            continue
        finally:
            flat[j] = old
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = analytic[c]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        if rel > max_err:
            max_err, worst = rel, (int(c),)
    passed = not failures and max_err <= tol
    return ad.GradCheckReport(passed, max_err, worst, len(coords), failures)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write the checkpoint container: magic, version, per-tensor records
    (name length, name, rank, extents, raw little-endian float64)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.asarray(arr, dtype=np.float64)
            if not data.flags.c_contiguous:
                data = data.copy(order="C")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise NNError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise NNError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise NNError(f"{path}: trailing bytes after last tensor record")
    return out
