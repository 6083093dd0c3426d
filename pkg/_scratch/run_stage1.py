import time
import numpy as np
from semlink import data as dt, models as md, pipeline as pl, nn
from semlink.channel import ChannelConfig
from semlink.tokens import strip_specials

t_all = time.time()
spec = dt.CorpusSpec(size=2200, seed=11)
corpus = dt.generate_corpus(spec)
train = dt.Corpus(spec, corpus.utterances[:2000], corpus.prototypes)
test = dt.Corpus(spec, corpus.utterances[2000:2200], corpus.prototypes)

bundle = md.ModelBundle.initialize(md.SemanticPipelineConfig(), seed=5)
cfg = pl.TrainConfig(stage=1, steps=2600, batch_size=16, seed=3)
t0 = time.time()
rep = pl.train_stage1(bundle, corpus=train, cfg=cfg)
t1 = time.time()
vals = [v for _, _, _, v in rep.curve]
print(f"train: {t1-t0:.0f}s, loss {vals[0]:.3f} -> {vals[-1]:.3f}, min {min(vals):.4f}")

# token accuracy on clean test at 12 dB AWGN
ch = ChannelConfig(kind="awgn", snr_db=12.0, seed=77)
correct = total = 0
exact = 0
t0 = time.time()
for i, u in enumerate(test.utterances):
    hyp = pl.infer(bundle, u.frames, ch, block_index=i, system="deepsc_s2t_clean_encoder")
    ref = strip_specials(u.target_tokens)
    hyp_c = strip_specials(hyp)
    n = max(len(ref), len(hyp_c))
    correct += sum(1 for a, b in zip(ref, hyp_c) if a == b)
    total += n
    exact += ref == hyp_c
t1 = time.time()
print(f"eval: {t1-t0:.0f}s, token acc {correct/total:.4f}, exact {exact/len(test.utterances):.3f}")
print(f"total {time.time()-t_all:.0f}s")
np.save("_scratch/stage1_loss.npy", np.array(vals))
nn.save_tensors("_scratch/stage1.ckpt", bundle.state_arrays(pl.STAGE_NETS[1]))
