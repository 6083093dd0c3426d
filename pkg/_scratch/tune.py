import sys, time
import numpy as np
from semlink import data as dt, models as md, pipeline as pl, nn
from semlink.channel import ChannelConfig
from semlink.tokens import strip_specials

tag, lr, steps, width, ff, batch = sys.argv[1], float(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4]), int(sys.argv[5]), int(sys.argv[6])
spec = dt.CorpusSpec(size=2200, seed=11)
corpus = dt.generate_corpus(spec)
train = dt.Corpus(spec, corpus.utterances[:2000], corpus.prototypes)
test = dt.Corpus(spec, corpus.utterances[2000:2200], corpus.prototypes)
mcfg = md.SemanticPipelineConfig(model_width=width, ff_width=ff)
bundle = md.ModelBundle.initialize(mcfg, seed=5)
cfg = pl.TrainConfig(stage=1, steps=steps, batch_size=batch, seed=3, lr=lr)
t0 = time.time()
rep = pl.train_stage1(bundle, train, cfg)
dur = time.time() - t0
vals = [v for _, _, _, v in rep.curve]
ch = ChannelConfig(kind="awgn", snr_db=12.0, seed=77)
correct = total = 0
for i, u in enumerate(test.utterances):
    hyp = strip_specials(pl.infer(bundle, u.frames, ch, block_index=i, system="deepsc_s2t_clean_encoder"))
    ref = strip_specials(u.target_tokens)
    correct += sum(1 for a, b in zip(ref, hyp) if a == b)
    total += max(len(ref), len(hyp))
print(f"{tag}: {dur:.0f}s loss {vals[0]:.3f}->{vals[-1]:.3f} (min {min(vals):.3f}) acc {correct/total:.4f}")
