"""Training protocol and inference paths.

Stage 1 trains the clean-speech translator end to end through the channel
(label-smoothed CE).  Stage 2 freezes it and trains the compensator network
against the encoder's features with the least-squares GAN pair.  Stage 3
freezes both and trains the probe (on intermediate-representation agreement)
and the receiver-side probe-aided compensator (CE restricted to probed
positions, through the frozen decoder).

Every step is a pure function of (seed, stage, step): batch choice, the
per-step SNR draw, and channel noise are all derived statelessly, so resumed
and repeated runs are bit-identical.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from semlink import autodiff as ad
from semlink import losses as ls
from semlink import models as md
from semlink import nn
from semlink.autodiff import Tensor
from semlink.channel import ChannelConfig, stable_tag, transmit_features, transmit_tensor
from semlink.data import Corpus, Utterance
from semlink.models import ModelBundle

STAGE_NETS = {
    1: ("encoder", "codec_enc", "codec_dec", "decoder"),
    2: ("generator", "discriminator"),
    3: ("probe", "compensator"),
}

SYSTEMS = ("ross_full", "generator_only", "deepsc_s2t_clean_encoder")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lr_disc: float = 2e-4
    snr_lo: float = 0.0
    snr_hi: float = 12.0
    channel_kind: str = "awgn"
    seed: int = 0
    k_gen: int = 1                  # generator updates per discriminator update
    eval_every: int = 100           # cadence of guards and validation probes
    collapse_patience: int = 5      # mode-collapse guard, in eval periods
    collapse_threshold: float = 0.5 # MSE must dip below this eventually
    # Training uses the conventional smoothing mass: the literal kappa/(E-1)
    # weighting floors the loss at p(true)=0.5, capping the achievable
    # decrease regardless of model quality.
    loss_cfg: ls.LossConfig = field(
        default_factory=lambda: ls.LossConfig(smoothing_mass_rule="standard"))

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise PipelineError("stage must be 1, 2, or 3")
        if self.snr_hi < self.snr_lo:
            raise PipelineError("empty train-SNR range")
        if self.k_gen < 1:
            raise PipelineError("k_gen must be >= 1")


@dataclass
class TrainReport:
    stage: int
    curve: list[tuple[int, int, str, float]]    # step, stage, loss_name, value
    final_loss: float
    halted: bool = False
    halt_reason: str = ""
    diagnostics: dict = field(default_factory=dict)


def _step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stage, step, stable_tag("step"))))


def _batch(corpus: Corpus, cfg: TrainConfig, step: int) -> list[int]:
    rng = _step_rng(cfg.seed, cfg.stage, step)
    return list(rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False))


def _step_snr(cfg: TrainConfig, step: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, cfg.stage, step, stable_tag("snr"))))
    return float(rng.uniform(cfg.snr_lo, cfg.snr_hi))


def _mean_loss(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(Tensor(1.0 / len(parts)), total)


def _row_norms(arr: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(arr * arr, axis=1) + 1e-12)


# ---------------------------------------------------------------------------
# stage 1: end-to-end translator on clean speech
# ---------------------------------------------------------------------------


def stage1_batch_loss(bundle: ModelBundle, corpus: Corpus, cfg: TrainConfig, step: int,
                      ) -> Tensor:
    nets = bundle.nets
    snr = _step_snr(cfg, step)
    ch = ChannelConfig(kind=cfg.channel_kind, snr_db=snr, seed=cfg.seed)
    parts = []
    for slot, idx in enumerate(_batch(corpus, cfg, step)):
        u = corpus.utterances[idx]
        f = md.deep_semantic_encode(bundle.cfg, nets["encoder"], u.frames)
        x = md.channel_encode(bundle.cfg, nets["codec_enc"], f)
        y, _ = transmit_tensor(x, ch, block_index=step * cfg.batch_size + slot)
        f_hat = md.channel_decode(bundle.cfg, nets["codec_dec"], y)
        dist = md.decode_teacher(bundle.cfg, nets["decoder"], f_hat, u.target_tokens)
        parts.append(ls.lsr_ce(dist, u.target_tokens[1:], cfg.loss_cfg))
    return _mean_loss(parts)


def train_stage1(bundle: ModelBundle, corpus: Corpus, cfg: TrainConfig,
                 adam_states: dict[str, nn.AdamState] | None = None,
                 start_step: int = 0) -> TrainReport:
    """End-to-end training of (encoder, codec, decoder) over the channel."""
    cfg = replace(cfg, stage=1)
    nets = STAGE_NETS[1]
    for name in md.NETWORK_NAMES:
        bundle.nets[name].set_trainable(name in nets)
    states = adam_states if adam_states is not None else {
        n: nn.AdamState(lr=cfg.lr) for n in nets
    }
    curve = []
    last_good = bundle.state_arrays(nets)
    final = float("nan")
    for step in range(start_step, start_step + cfg.steps):
        try:
            with ad.Tape() as tape:
                loss = stage1_batch_loss(bundle, corpus, cfg, step)
                tape.backward(loss)
        except ad.NonFiniteError as e:
            bundle.load_state(last_good, nets)
            return TrainReport(1, curve, final, halted=True,
                               halt_reason=f"non-finite loss at step {step}: {e}",
                               diagnostics={"adam_states": states})
        final = loss.item()
        curve.append((step, 1, "lsr_ce", final))
        for n in nets:
            nn.adam_step(states[n], bundle.nets[n])
        if (step + 1) % cfg.eval_every == 0:
            last_good = bundle.state_arrays(nets)
    return TrainReport(1, curve, final, diagnostics={"adam_states": states})


# ---------------------------------------------------------------------------
# stage 2: LSGAN compensator against frozen encoder features
# ---------------------------------------------------------------------------


def _paired(clean: Corpus, corrupted: Corpus, idx: int) -> tuple[Utterance, Utterance]:
    u, v = clean.utterances[idx], corrupted.utterances[idx]
    if u.uid != v.uid:
        raise PipelineError(f"clean/corrupted corpora disagree at index {idx}")
    return u, v


def generator_feature_mse(bundle: ModelBundle, clean: Corpus, corrupted: Corpus,
                          indices) -> float:
    """Validation MSE between encoder features and compensated features."""
    total = 0.0
    for idx in indices:
        u, v = _paired(clean, corrupted, idx)
        f = md.deep_semantic_encode(bundle.cfg, bundle.nets["encoder"], u.frames)
        f_tilde, _ = md.generator_forward(bundle.cfg, bundle.nets["generator"], v.frames)
        total += float(np.mean((f.data - f_tilde.data) ** 2))
    return total / len(list(indices))


def train_stage2(bundle: ModelBundle, clean: Corpus, corrupted: Corpus, cfg: TrainConfig,
                 ) -> TrainReport:
    """Alternating least-squares GAN updates; the stage-1 nets stay frozen."""
    cfg = replace(cfg, stage=2)
    for name in md.NETWORK_NAMES:
        bundle.nets[name].set_trainable(False)
    gen_store, disc_store = bundle.nets["generator"], bundle.nets["discriminator"]
    states = {"generator": nn.AdamState(lr=cfg.lr), "discriminator": nn.AdamState(lr=cfg.lr_disc)}
    curve = []
    val_idx = range(min(32, len(clean)))
    best_mse = float("inf")
    stagnant = 0
    d_real_mean = d_fake_mean = 0.5
    final = float("nan")
    for step in range(cfg.steps):
        batch = _batch(clean, cfg, step)
        reals, fakes = [], []
        for idx in batch:
            u, v = _paired(clean, corrupted, idx)
            f = md.deep_semantic_encode(bundle.cfg, bundle.nets["encoder"], u.frames)
            f_tilde, _ = md.generator_forward(bundle.cfg, gen_store, v.frames)
            reals.append(f.data.copy())
            fakes.append(f_tilde.data.copy())

        # discriminator update on Eq-style LS objective
        disc_store.set_trainable(True)
        d_reals, d_fakes = [], []
        try:
            with ad.Tape() as tape:
                parts = []
                for fr, fk in zip(reals, fakes):
                    d_real = md.discriminate(bundle.cfg, disc_store, Tensor(fr))
                    d_fake = md.discriminate(bundle.cfg, disc_store, Tensor(fk))
                    d_reals.append(d_real.item())
                    d_fakes.append(d_fake.item())
                    parts.append(ls.disc_loss(d_real, d_fake))
                loss_d = _mean_loss(parts)
                tape.backward(loss_d)
        except ad.NonFiniteError as e:
            return TrainReport(2, curve, final, halted=True,
                               halt_reason=f"non-finite discriminator loss at step {step}: {e}")
        nn.adam_step(states["discriminator"], disc_store)
        disc_store.set_trainable(False)

        # k_gen generator updates; discriminator gradients flow through only
        gen_store.set_trainable(True)
        for _ in range(cfg.k_gen):
            try:
                with ad.Tape() as tape:
                    parts = []
                    for (idx, fr) in zip(batch, reals):
                        _, v = _paired(clean, corrupted, idx)
                        f_tilde, _ = md.generator_forward(bundle.cfg, gen_store, v.frames)
                        d_fake = md.discriminate(bundle.cfg, disc_store, f_tilde)
                        parts.append(ls.gen_loss(Tensor(fr), f_tilde, d_fake, cfg.loss_cfg))
                    loss_g = _mean_loss(parts)
                    tape.backward(loss_g)
            except ad.NonFiniteError as e:
                return TrainReport(2, curve, final, halted=True,
                                   halt_reason=f"non-finite generator loss at step {step}: {e}")
            nn.adam_step(states["generator"], gen_store)
        gen_store.set_trainable(False)

        final = loss_g.item()
        d_real_mean = float(np.mean(d_reals))
        d_fake_mean = float(np.mean(d_fakes))
        curve.append((step, 2, "disc", loss_d.item()))
        curve.append((step, 2, "gen", final))
        curve.append((step, 2, "d_real", d_real_mean))
        curve.append((step, 2, "d_fake", d_fake_mean))

        if (step + 1) % cfg.eval_every == 0:
            mse = generator_feature_mse(bundle, clean, corrupted, val_idx)
            curve.append((step, 2, "val_mse", mse))
            if mse < best_mse - 1e-6:
                best_mse = mse
                stagnant = 0
            else:
                stagnant += 1
            if stagnant >= cfg.collapse_patience and best_mse > cfg.collapse_threshold:
                return TrainReport(2, curve, final, halted=True,
                                   halt_reason=f"mode collapse: val MSE stuck at {best_mse:.4f}",
                                   diagnostics={"val_mse": best_mse})
    return TrainReport(2, curve, final,
                       diagnostics={"val_mse": best_mse,
                                    "d_real": d_real_mean, "d_fake": d_fake_mean,
                                    "adam_states": states})


# ---------------------------------------------------------------------------
# stage 3: probe network and probe-aided compensator
# ---------------------------------------------------------------------------


def train_stage3(bundle: ModelBundle, clean: Corpus, corrupted: Corpus, cfg: TrainConfig,
                 ) -> TrainReport:
    """Probe regression plus probed-position CE through the frozen decoder."""
    cfg = replace(cfg, stage=3)
    for name in md.NETWORK_NAMES:
        bundle.nets[name].set_trainable(False)
    probe_store, comp_store = bundle.nets["probe"], bundle.nets["compensator"]
    states = {"probe": nn.AdamState(lr=cfg.lr), "compensator": nn.AdamState(lr=cfg.lr)}
    curve = []
    all_zero_streak = 0
    degenerate_warned = False
    final = float("nan")
    steps_per_epoch = max(1, len(clean) // max(cfg.batch_size, 1))
    for step in range(cfg.steps):
        batch = _batch(clean, cfg, step)
        snr = _step_snr(cfg, step)
        ch = ChannelConfig(kind=cfg.channel_kind, snr_db=snr, seed=cfg.seed)

        items = []
        for slot, idx in enumerate(batch):
            u, v = _paired(clean, corrupted, idx)
            i_clean = _row_norms(md.generator_extract(bundle.cfg, bundle.nets["generator"],
                                                      u.frames).data)
            f_tilde, inter = md.generator_forward(bundle.cfg, bundle.nets["generator"], v.frames)
            i_comp = _row_norms(inter.data)
            x = md.channel_encode(bundle.cfg, bundle.nets["codec_enc"], f_tilde)
            y, _ = transmit_features(x.data, ch, block_index=step * cfg.batch_size + slot)
            f_hat_tilde = md.channel_decode(bundle.cfg, bundle.nets["codec_dec"], Tensor(y))
            items.append((u, i_clean, i_comp, inter.data, f_hat_tilde.data))

        # probe update on the agreement regression
        probe_store.set_trainable(True)
        probes = []
        try:
            with ad.Tape() as tape:
                parts = []
                for (u, i_clean, i_comp, inter, _) in items:
                    c = md.probe_forward(bundle.cfg, probe_store, Tensor(inter))
                    probes.append(md.impairment_probe(c.data))
                    parts.append(ls.probe_net_loss(Tensor(i_clean), Tensor(i_comp), c))
                loss_pn = _mean_loss(parts)
                tape.backward(loss_pn)
        except ad.NonFiniteError as e:
            return TrainReport(3, curve, final, halted=True,
                               halt_reason=f"non-finite probe loss at step {step}: {e}")
        nn.adam_step(states["probe"], probe_store)
        probe_store.set_trainable(False)
        curve.append((step, 3, "probe_net", loss_pn.item()))

        # compensator update on probed positions through the frozen decoder
        if all(not p.any() for p in probes):
            all_zero_streak += 1
            if all_zero_streak >= steps_per_epoch and not degenerate_warned:
                warnings.warn("probe degenerate: all-zero impairment probe across a full epoch")
                degenerate_warned = True
                curve.append((step, 3, "probe_degenerate", 1.0))
            continue
        all_zero_streak = 0
        comp_store.set_trainable(True)
        try:
            with ad.Tape() as tape:
                parts = []
                for (u, _, _, _, f_hat_tilde), probe in zip(items, probes):
                    if not probe.any():
                        continue
                    f_hat = md.probe_compensate(bundle.cfg, comp_store, Tensor(f_hat_tilde), probe)
                    dist = md.decode_teacher(bundle.cfg, bundle.nets["decoder"], f_hat,
                                             u.target_tokens)
                    parts.append(ls.probe_comp_loss(dist, u.target_tokens[1:],
                                                    probe[:dist.shape[0]]))
                loss_pc = _mean_loss(parts)
                tape.backward(loss_pc)
        except ad.NonFiniteError as e:
            return TrainReport(3, curve, final, halted=True,
                               halt_reason=f"non-finite compensator loss at step {step}: {e}")
        nn.adam_step(states["compensator"], comp_store)
        comp_store.set_trainable(False)
        final = loss_pc.item()
        curve.append((step, 3, "probe_comp", final))
    return TrainReport(3, curve, final,
                       diagnostics={"degenerate": degenerate_warned, "adam_states": states})


# ---------------------------------------------------------------------------
# inference (the corrupted-speech test path and its ablations)
# ---------------------------------------------------------------------------


def infer(bundle: ModelBundle, frames: np.ndarray, ch: ChannelConfig, block_index: int = 0,
          system: str = "ross_full", probe_override: np.ndarray | None = None) -> list[int]:
    """Transmit one utterance and greedy-decode target tokens.

    ross_full: compensator network + probe-aided recalibration (the probe is
    delivered error-free).  generator_only: same transmitter without the
    receiver-side compensation.  deepsc_s2t_clean_encoder: the stage-1
    translator applied as-is.
    """
    if system not in SYSTEMS:
        raise PipelineError(f"unknown system '{system}' (valid: {', '.join(SYSTEMS)})")
    cfg, nets = bundle.cfg, bundle.nets
    if system == "deepsc_s2t_clean_encoder":
        feats = md.deep_semantic_encode(cfg, nets["encoder"], frames)
        probe = None
    else:
        feats, inter = md.generator_forward(cfg, nets["generator"], frames)
        if system == "ross_full":
            if probe_override is not None:
                probe = np.asarray(probe_override)
            else:
                c = md.probe_forward(cfg, nets["probe"], inter)
                probe = md.impairment_probe(c.data)
        else:
            probe = None
    x = md.channel_encode(cfg, nets["codec_enc"], feats)
    y, _ = transmit_features(x.data, ch, block_index=block_index)
    f_hat = md.channel_decode(cfg, nets["codec_dec"], Tensor(y))
    if probe is not None and probe.any():
        f_hat = md.probe_compensate(cfg, nets["compensator"], f_hat, probe)
    return md.greedy_decode(cfg, nets["decoder"], f_hat)


# ---------------------------------------------------------------------------
# checkpoints and loss curves
# ---------------------------------------------------------------------------


def save_stage_checkpoint(path, bundle: ModelBundle, stage: int,
                          adam_states: dict[str, nn.AdamState] | None = None,
                          step: int = 0) -> None:
    arrays = bundle.state_arrays(STAGE_NETS[stage])
    arrays["meta/stage"] = np.array(float(stage))
    arrays["meta/step"] = np.array(float(step))
    if adam_states:
        for net, state in adam_states.items():
            arrays.update(nn.adam_state_arrays(state, prefix=f"adamstate/{net}"))
    nn.save_tensors(path, arrays)


def load_stage_checkpoint(path, bundle: ModelBundle, stage: int,
                          ) -> tuple[dict[str, nn.AdamState], int]:
    arrays = nn.load_tensors(path)
    if int(arrays.get("meta/stage", np.array(-1.0))) != stage:
        raise PipelineError(f"{path} is not a stage-{stage} checkpoint")
    bundle.load_state(arrays, STAGE_NETS[stage])
    states = {}
    for net in STAGE_NETS[stage]:
        if f"adamstate/{net}/t" in arrays:
            states[net] = nn.adam_state_from_arrays(arrays, prefix=f"adamstate/{net}")
    return states, int(arrays["meta/step"])


def write_loss_csv(path, curve: list[tuple[int, int, str, float]]) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("step,stage,loss_name,value\n")
        for step, stage, name, value in curve:
            f.write(f"{step},{stage},{name},{value:.10e}\n")
