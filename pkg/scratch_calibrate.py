"""Scratch calibration for the memorization acceptance run (not shipped)."""
import os
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
import time
import numpy as np
import spindle as sp
from spindle.rng import stream


def make_char_corpus(num_sentences=100, char_len=24, seed=0):
    words = ["the", "cat", "dog", "sun", "sky", "red", "bird", "tree",
             "runs", "sees", "big", "old", "wet", "hat", "cup", "map"]
    rng = np.random.default_rng(seed)
    sents = set()
    while len(sents) < num_sentences:
        ws = []
        while True:
            ws.append(words[rng.integers(len(words))])
            s = " ".join(ws)
            if len(s) == char_len:
                sents.add(s)
                break
            if len(s) > char_len:
                break
    return sorted(sents)


def main():
    sents = make_char_corpus()
    with open("/tmp/corpus_cal.txt", "w") as f:
        f.write("\n".join(sents) + "\n")
    vocab = sp.build_vocab("/tmp/corpus_cal.txt", 100, "char")
    st = sp.surprisal_table("/tmp/corpus_cal.txt", vocab, 1.0)
    seqs = [sp.tokenize(s, vocab) for s in sents]
    print("vocab:", len(vocab), "len:", len(seqs[0]), flush=True)

    cfg = sp.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=4,
                            d_model=128, num_heads=4, n_max=64, num_steps=64, dropout=0.1)
    params = sp.init_params(cfg, 0).astype(np.float32)
    sp_params = sp.ScheduleParams(num_steps=64, lam=0.3)
    tc = sp.TrainConfig(learning_rate=1e-3, warmup_steps=100, batch_size=32,
                        total_steps=3000, seed=0)

    def val(p, step):
        e = sp.elbo_eval(p, seqs, sp_params, st, t_samples_per_example=2, seed=123)
        print(f"step {step}: elbo/token {e:.4f} elapsed {time.time()-t0:.0f}s", flush=True)
        return e

    t0 = time.time()
    res = sp.run_training(params, vocab, st, seqs, sp_params, tc,
                          log_every=500, val_fn=val, val_every=250)
    params = res.params

    scfg = sp.SampleConfig(length=len(seqs[0]), num_reverse_iterations=64, top_k=3,
                           temperature=1.0, seed=9)
    out = sp.generate_batch(params, sp_params, scfg, st, 200, stream(9, "gen"))
    train_set = set(sents)
    texts = [sp.detokenize(row, vocab) for row in out.sequences]
    hits = sum(t in train_set for t in texts)
    print("verbatim:", hits, "/ 200", flush=True)
    print("sample:", texts[:5], flush=True)
    # also try fewer iterations
    for iters, k in [(16, 3), (32, 5), (64, 1)]:
        scfg2 = sp.SampleConfig(length=len(seqs[0]), num_reverse_iterations=iters, top_k=k, seed=11)
        o2 = sp.generate_batch(params, sp_params, scfg2, st, 200, stream(11, "g", iters, k))
        t2 = [sp.detokenize(r, vocab) for r in o2.sequences]
        print(f"iters={iters} k={k}: verbatim {sum(t in train_set for t in t2)}/200", flush=True)


main()
