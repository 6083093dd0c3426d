import math

import numpy as np
import pytest

from semlink import data as dt
from semlink import models as md
from semlink import nn
from semlink import pipeline as pl
from semlink.channel import ChannelConfig

TINY = md.SemanticPipelineConfig(
    frame_dim=6, model_width=16, heads=2, ff_width=32, feature_width=8,
    extractor_depth=2, converter_depth=1, converter_conv_depth=1, decoder_depth=1,
    codec_hidden=16, symbol_width=8, vocab_src=11, vocab_tgt=11, max_len=8,
    frames_per_token=4, disc_depth=2, disc_channels=4, comp_depth=2, comp_channels=4,
    probe_hidden=8, kernel=3,
)

CSPEC = dt.CorpusSpec(vocab_src=11, vocab_tgt=11, frame_dim=6, max_target_len=8,
                      min_tokens=2, max_tokens=5, size=24, seed=3, frame_noise=0.05)


@pytest.fixture(scope="module")
def corpora():
    clean = dt.generate_corpus(CSPEC)
    corrupted = dt.corrupt_corpus(clean, dt.CorruptionSpec(kind="noise-burst"), seed=8)
    return clean, corrupted


def fresh_bundle():
    return md.ModelBundle.initialize(TINY, seed=77)


def short_cfg(**kw):
    base = dict(stage=1, steps=6, batch_size=4, seed=5, eval_every=3)
    base.update(kw)
    return pl.TrainConfig(**base)


class TestStage1:
    def test_untrained_loss_near_log_vocab(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        rep = pl.train_stage1(bundle, clean, short_cfg(steps=1))
        first = rep.curve[0][3]
        bound = math.log(TINY.vocab_tgt)
        assert first <= 2 * bound and first >= 0.5 * bound

    def test_loss_decreases_over_short_run(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        rep = pl.train_stage1(bundle, clean, short_cfg(steps=40))
        head = np.mean([v for _, _, _, v in rep.curve[:5]])
        tail = np.mean([v for _, _, _, v in rep.curve[-5:]])
        assert tail < head

    def test_determinism_bit_exact(self, corpora):
        clean, _ = corpora
        a, b = fresh_bundle(), fresh_bundle()
        ra = pl.train_stage1(a, clean, short_cfg())
        rb = pl.train_stage1(b, clean, short_cfg())
        assert ra.curve == rb.curve
        sa, sb = a.state_arrays(pl.STAGE_NETS[1]), b.state_arrays(pl.STAGE_NETS[1])
        for name in sa:
            assert sa[name].tobytes() == sb[name].tobytes()

    def test_resume_reproduces_next_step_loss(self, corpora, tmp_path):
        clean, _ = corpora
        full = fresh_bundle()
        rep_full = pl.train_stage1(full, clean, short_cfg(steps=6))

        half = fresh_bundle()
        rep_half = pl.train_stage1(half, clean, short_cfg(steps=3))
        ckpt = tmp_path / "s1.ckpt"
        pl.save_stage_checkpoint(ckpt, half, stage=1,
                                 adam_states=rep_half.diagnostics["adam_states"], step=3)

        resumed = fresh_bundle()
        states, step = pl.load_stage_checkpoint(ckpt, resumed, stage=1)
        rep_rest = pl.train_stage1(resumed, clean, short_cfg(steps=3),
                                   adam_states=states, start_step=step)
        assert rep_half.curve + rep_rest.curve == rep_full.curve

    def test_divergence_guard_restores_last_good(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        before = bundle.state_arrays(pl.STAGE_NETS[1])
        bundle.nets["encoder"]["ext0/w"].data[0, 0, 0] = 1e200
        poisoned = bundle.state_arrays(pl.STAGE_NETS[1])
        rep = pl.train_stage1(bundle, clean, short_cfg(steps=3))
        assert rep.halted and "non-finite" in rep.halt_reason
        after = bundle.state_arrays(pl.STAGE_NETS[1])
        for name in after:  # restored to the last good snapshot (the poisoned start)
            assert after[name].tobytes() == poisoned[name].tobytes()


class TestStage2:
    def test_freeze_contract_and_smoke(self, corpora):
        clean, corrupted = corpora
        bundle = fresh_bundle()
        pl.train_stage1(bundle, clean, short_cfg(steps=2))
        frozen_before = bundle.state_arrays(pl.STAGE_NETS[1])
        rep = pl.train_stage2(bundle, clean, corrupted, short_cfg(stage=2, steps=4))
        frozen_after = bundle.state_arrays(pl.STAGE_NETS[1])
        for name in frozen_before:
            assert frozen_before[name].tobytes() == frozen_after[name].tobytes()
        assert not rep.halted
        names = {row[2] for row in rep.curve}
        assert {"disc", "gen", "d_real", "d_fake"} <= names

    def test_gan_losses_move(self, corpora):
        clean, corrupted = corpora
        bundle = fresh_bundle()
        rep = pl.train_stage2(bundle, clean, corrupted, short_cfg(stage=2, steps=12))
        gen_losses = [v for _, _, n, v in rep.curve if n == "gen"]
        assert gen_losses[-1] < gen_losses[0]

    def test_determinism(self, corpora):
        clean, corrupted = corpora
        a, b = fresh_bundle(), fresh_bundle()
        ra = pl.train_stage2(a, clean, corrupted, short_cfg(stage=2, steps=3))
        rb = pl.train_stage2(b, clean, corrupted, short_cfg(stage=2, steps=3))
        assert ra.curve == rb.curve


class TestStage3:
    def test_freeze_contract_and_smoke(self, corpora):
        clean, corrupted = corpora
        bundle = fresh_bundle()
        frozen_before = bundle.state_arrays(pl.STAGE_NETS[1] + pl.STAGE_NETS[2])
        rep = pl.train_stage3(bundle, clean, corrupted, short_cfg(stage=3, steps=4))
        frozen_after = bundle.state_arrays(pl.STAGE_NETS[1] + pl.STAGE_NETS[2])
        for name in frozen_before:
            assert frozen_before[name].tobytes() == frozen_after[name].tobytes()
        assert not rep.halted
        assert any(n == "probe_net" for _, _, n, _ in rep.curve)

    def test_determinism(self, corpora):
        clean, corrupted = corpora
        a, b = fresh_bundle(), fresh_bundle()
        ra = pl.train_stage3(a, clean, corrupted, short_cfg(stage=3, steps=3))
        rb = pl.train_stage3(b, clean, corrupted, short_cfg(stage=3, steps=3))
        assert ra.curve == rb.curve


class TestInfer:
    def test_deterministic(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        ch = ChannelConfig(kind="rayleigh", snr_db=6.0, seed=4)
        u = clean.utterances[0]
        a = pl.infer(bundle, u.frames, ch, block_index=0, system="ross_full")
        b = pl.infer(bundle, u.frames, ch, block_index=0, system="ross_full")
        assert a == b

    def test_zero_probe_equals_generator_only(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        ch = ChannelConfig(kind="awgn", snr_db=9.0, seed=4)
        u = clean.utterances[1]
        via_override = pl.infer(bundle, u.frames, ch, block_index=1, system="ross_full",
                                probe_override=np.zeros(TINY.max_len))
        gen_only = pl.infer(bundle, u.frames, ch, block_index=1, system="generator_only")
        assert via_override == gen_only

    def test_unknown_system_rejected(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        with pytest.raises(pl.PipelineError, match="unknown system"):
            pl.infer(bundle, clean.utterances[0].frames,
                     ChannelConfig(kind="awgn", snr_db=9.0, seed=1), system="nope")

    def test_clean_encoder_path_matches_manual_chain(self, corpora):
        clean, _ = corpora
        bundle = fresh_bundle()
        ch = ChannelConfig(kind="awgn", snr_db=math.inf, seed=4)
        u = clean.utterances[2]
        got = pl.infer(bundle, u.frames, ch, block_index=2, system="deepsc_s2t_clean_encoder")
        from semlink.autodiff import Tensor
        from semlink.channel import transmit_features
        f = md.deep_semantic_encode(TINY, bundle.nets["encoder"], u.frames)
        x = md.channel_encode(TINY, bundle.nets["codec_enc"], f)
        y, _ = transmit_features(x.data, ch, block_index=2)
        f_hat = md.channel_decode(TINY, bundle.nets["codec_dec"], Tensor(y))
        assert got == md.greedy_decode(TINY, bundle.nets["decoder"], f_hat)


class TestCheckpointHelpers:
    def test_wrong_stage_rejected(self, corpora, tmp_path):
        bundle = fresh_bundle()
        pl.save_stage_checkpoint(tmp_path / "c.ckpt", bundle, stage=2)
        with pytest.raises(pl.PipelineError, match="stage-1"):
            pl.load_stage_checkpoint(tmp_path / "c.ckpt", bundle, stage=1)

    def test_loss_csv_format(self, tmp_path):
        pl.write_loss_csv(tmp_path / "l.csv", [(0, 1, "lsr_ce", 3.25), (1, 1, "lsr_ce", 3.0)])
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "step,stage,loss_name,value"
        assert lines[1].startswith("0,1,lsr_ce,3.25")
