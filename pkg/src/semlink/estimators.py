"""Scikit-learn-style front door: fit a translator on a corpus, predict
token sequences from speech frames, and compose with sklearn tooling
(get_params/set_params/clone work as usual).

``SemanticLinkTranslator`` trains the clean-speech system end to end;
``RobustSemanticLinkTranslator`` continues with the adversarial compensator
and probe stages so corrupted speech can be translated too.  Both operate on
``semlink.data`` corpora or raw frame matrices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from semlink import data as dt
from semlink import evalharness as ev
from semlink import models as md
from semlink import pipeline as pl
from semlink.channel import ChannelConfig
from semlink.tokens import strip_specials


def check_frame_matrix(x, frame_dim: int | None = None) -> np.ndarray:
    """Validate one utterance's frames: 2-D, finite, float-castable."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"frames must be a non-empty 2-D matrix, got shape {arr.shape}")
    if frame_dim is not None and arr.shape[1] != frame_dim:
        raise ValueError(f"frames must have {frame_dim} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain non-finite values")
    return arr


def as_utterances(X) -> list[dt.Utterance]:
    """Accept a Corpus or a sequence of Utterances."""
    if isinstance(X, dt.Corpus):
        return X.utterances
    utts = list(X)
    if not all(isinstance(u, dt.Utterance) for u in utts):
        raise ValueError("expected a Corpus or a sequence of Utterance objects")
    return utts


class SemanticLinkTranslator(BaseEstimator):
    """Clean-speech semantic translator with an sklearn-compatible surface.

    fit(X) trains the encoder/codec/decoder end to end over the simulated
    channel on a corpus; predict(X) greedy-decodes target tokens for frames,
    utterances, or a corpus.  Prediction runs at ``eval_snr_db`` over
    ``eval_channel`` with deterministic block seeding.
    """

    _fit_stages = (1,)

    def __init__(self, model_width=64, heads=4, ff_width=128, feature_width=32,
                 symbol_width=32, steps=2000, batch_size=16, lr=1e-3,
                 snr_lo=0.0, snr_hi=12.0, channel_kind="awgn",
                 eval_snr_db=12.0, eval_channel="awgn", seed=0):
        self.model_width = model_width
        self.heads = heads
        self.ff_width = ff_width
        self.feature_width = feature_width
        self.symbol_width = symbol_width
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.snr_lo = snr_lo
        self.snr_hi = snr_hi
        self.channel_kind = channel_kind
        self.eval_snr_db = eval_snr_db
        self.eval_channel = eval_channel
        self.seed = seed

    def _model_config(self, corpus_spec: dt.CorpusSpec) -> md.SemanticPipelineConfig:
        return md.SemanticPipelineConfig(
            frame_dim=corpus_spec.frame_dim, model_width=self.model_width,
            heads=self.heads, ff_width=self.ff_width, feature_width=self.feature_width,
            symbol_width=self.symbol_width, vocab_src=corpus_spec.vocab_src,
            vocab_tgt=corpus_spec.vocab_tgt, max_len=corpus_spec.max_target_len,
            frames_per_token=corpus_spec.frames_per_token)

    def _train_config(self, stage: int) -> pl.TrainConfig:
        return pl.TrainConfig(stage=stage, steps=self.steps, batch_size=self.batch_size,
                              lr=self.lr, snr_lo=self.snr_lo, snr_hi=self.snr_hi,
                              channel_kind=self.channel_kind, seed=self.seed)

    def _system(self) -> str:
        return "deepsc_s2t_clean_encoder"

    def fit(self, X, y=None):
        if not isinstance(X, dt.Corpus):
            raise ValueError("fit expects a semlink.data.Corpus")
        self.bundle_ = md.ModelBundle.initialize(self._model_config(X.spec), seed=self.seed)
        self.reports_ = [pl.train_stage1(self.bundle_, X, self._train_config(1))]
        self.corpus_spec_ = X.spec
        return self

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise NotFittedError("call fit before predict/score")

    def _frames_of(self, item) -> np.ndarray:
        frames = item.frames if isinstance(item, dt.Utterance) else item
        return check_frame_matrix(frames, self.corpus_spec_.frame_dim)

    def predict(self, X) -> list[list[int]]:
        """Token sequences (reserved ids stripped), one per input utterance."""
        self._check_fitted()
        items = X.utterances if isinstance(X, dt.Corpus) else list(X)
        ch = ChannelConfig(kind=self.eval_channel, snr_db=self.eval_snr_db, seed=self.seed)
        out = []
        for i, item in enumerate(items):
            tokens = pl.infer(self.bundle_, self._frames_of(item), ch, block_index=i,
                              system=self._system())
            out.append(strip_specials(tokens))
        return out

    def score(self, X, y=None) -> float:
        """Mean token accuracy against the utterances' own targets."""
        self._check_fitted()
        utts = as_utterances(X)
        hyps = self.predict(utts)
        accs = [ev.token_accuracy(strip_specials(u.target_tokens), hyp)
                for u, hyp in zip(utts, hyps)]
        return float(np.mean(accs))


class RobustSemanticLinkTranslator(SemanticLinkTranslator):
    """Full robust link: adds the adversarial compensator and the probe-aided
    recalibration stages, trained on a corrupted sibling corpus derived from
    the corruption parameters below."""

    def __init__(self, model_width=64, heads=4, ff_width=128, feature_width=32,
                 symbol_width=32, steps=2000, batch_size=16, lr=1e-3,
                 snr_lo=0.0, snr_hi=12.0, channel_kind="awgn",
                 eval_snr_db=12.0, eval_channel="awgn", seed=0,
                 corruption_kind="interference", corruption_rho=0.25,
                 corruption_spans=2, interference_gain=3.0, burst_scale=3.0,
                 gan_steps=1000, probe_steps=600, lr_disc=2e-4):
        super().__init__(model_width=model_width, heads=heads, ff_width=ff_width,
                         feature_width=feature_width, symbol_width=symbol_width,
                         steps=steps, batch_size=batch_size, lr=lr, snr_lo=snr_lo,
                         snr_hi=snr_hi, channel_kind=channel_kind,
                         eval_snr_db=eval_snr_db, eval_channel=eval_channel, seed=seed)
        self.corruption_kind = corruption_kind
        self.corruption_rho = corruption_rho
        self.corruption_spans = corruption_spans
        self.interference_gain = interference_gain
        self.burst_scale = burst_scale
        self.gan_steps = gan_steps
        self.probe_steps = probe_steps
        self.lr_disc = lr_disc

    def _system(self) -> str:
        return "ross_full"

    def fit(self, X, y=None):
        super().fit(X)
        cspec = dt.CorruptionSpec(kind=self.corruption_kind, rho=self.corruption_rho,
                                  spans=self.corruption_spans,
                                  burst_scale=self.burst_scale,
                                  interference_gain=self.interference_gain)
        corrupted = dt.corrupt_corpus(X, cspec, seed=self.seed)
        cfg2 = pl.TrainConfig(stage=2, steps=self.gan_steps, batch_size=self.batch_size,
                              lr=self.lr, lr_disc=self.lr_disc, seed=self.seed)
        cfg3 = pl.TrainConfig(stage=3, steps=self.probe_steps, batch_size=self.batch_size,
                              lr=self.lr, snr_lo=self.snr_lo, snr_hi=self.snr_hi,
                              channel_kind=self.channel_kind, seed=self.seed)
        self.reports_.append(pl.train_stage2(self.bundle_, X, corrupted, cfg2))
        self.reports_.append(pl.train_stage3(self.bundle_, X, corrupted, cfg3))
        return self
