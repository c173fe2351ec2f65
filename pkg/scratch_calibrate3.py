"""Variant g calibration: 3-slot corpus over 8 words, verbatim probes (not shipped)."""
import os
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
import sys
import time
import numpy as np
import spindle as sp
from spindle.rng import stream

WORDS = ["lake", "bird", "tree", "wind", "moss", "fern", "rock", "reed"]


def make_corpus(num=100, slots=3, seed=0):
    rng = np.random.default_rng(seed)
    sents = set()
    while len(sents) < num:
        sents.add(" ".join(WORDS[rng.integers(len(WORDS))] for _ in range(slots)))
    return sorted(sents)


def verbatim_rate(params, spar, st_, vocab, n, train_set, num=200, k=2, temp=0.8, iters=64):
    scfg = sp.SampleConfig(length=n, num_reverse_iterations=iters, top_k=k, temperature=temp, seed=11)
    o = sp.generate_batch(params, spar, scfg, st_, num, stream(11, "g", k, temp, iters))
    texts = [sp.detokenize(r, vocab) for r in o.sequences]
    return sum(t in train_set for t in texts), len(set(texts))


def main(dropout, steps, lr):
    sents = make_corpus()
    path = "/tmp/corpus_v3.txt"
    with open(path, "w") as f:
        f.write("\n".join(sents) + "\n")
    vocab = sp.build_vocab(path, 100, "char")
    st_ = sp.surprisal_table(path, vocab, 1.0)
    seqs = [sp.tokenize(s, vocab) for s in sents]
    n = len(seqs[0])
    train_set = set(sents)
    print(f"vocab {len(vocab)} len {n} dropout {dropout} lr {lr} steps {steps}", flush=True)

    cfg = sp.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=4,
                            d_model=128, num_heads=4, n_max=64, num_steps=64, dropout=dropout)
    params = sp.init_params(cfg, 0).astype(np.float32)
    spar = sp.ScheduleParams(num_steps=64, lam=0.3)
    tc = sp.TrainConfig(learning_rate=lr, warmup_steps=100, batch_size=32,
                        total_steps=steps, seed=0)

    t0 = time.time()
    def val(p, step):
        e = sp.elbo_eval(p, seqs, spar, st_, t_samples_per_example=2, seed=123)
        hits, uniq = verbatim_rate(p, spar, st_, vocab, n, train_set, num=100)
        print(f"step {step}: elbo {e:.4f} verbatim {hits}/100 uniq {uniq} ({time.time()-t0:.0f}s)", flush=True)
        return e

    res = sp.run_training(params, vocab, st_, seqs, spar, tc, log_every=2000,
                          val_fn=val, val_every=500)
    params = res.params
    for iters, k, temp in [(64, 1, 1.0), (64, 2, 0.8), (64, 3, 1.0), (32, 2, 0.8), (16, 3, 0.8)]:
        hits, uniq = verbatim_rate(params, spar, st_, vocab, n, train_set, 200, k, temp, iters)
        print(f"iters={iters} k={k} T={temp}: verbatim {hits}/200 uniq {uniq}", flush=True)


main(dropout=float(sys.argv[1]), steps=int(sys.argv[2]), lr=float(sys.argv[3]))
