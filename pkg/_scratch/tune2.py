import sys, time
import numpy as np
from semlink import data as dt, models as md, pipeline as pl, nn
from semlink.channel import ChannelConfig
from semlink.tokens import strip_specials

tag, steps, width, ff, symw, fnoise, maxtok = (
    sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4]),
    int(sys.argv[5]), float(sys.argv[6]), int(sys.argv[7]))
spec = dt.CorpusSpec(size=2200, seed=11, frame_noise=fnoise, max_tokens=maxtok)
corpus = dt.generate_corpus(spec)
train = dt.Corpus(spec, corpus.utterances[:2000], corpus.prototypes)
test = dt.Corpus(spec, corpus.utterances[2000:2200], corpus.prototypes)
mcfg = md.SemanticPipelineConfig(model_width=width, ff_width=ff, symbol_width=symw)
bundle = md.ModelBundle.initialize(mcfg, seed=5)
cfg = pl.TrainConfig(stage=1, steps=steps, batch_size=16, seed=3, lr=1e-3)
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
tail = np.mean(vals[-100:])
print(f"{tag}: {dur:.0f}s ({dur/steps*1000:.0f}ms/step) loss {vals[0]:.3f}->{tail:.3f} (min {min(vals):.3f}) acc {correct/total:.4f}")
