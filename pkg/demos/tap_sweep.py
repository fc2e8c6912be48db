"""Train one small model per (tap layer, seed) and print the layer summary.

Layer 0 is the no-tap baseline.  This is a scaled-down version of the
acceptance-suite trend experiment; expect noisy numbers at this size.

Run: python demos/tap_sweep.py
"""

import logging

from multiunit.corpus import SynthSpec, synthesize
from multiunit.model import ModelConfig
from multiunit.training import TrainConfig, format_sweep, make_examples, run_sweep
from multiunit.units import Tokenizer, train_bpe

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = synthesize(SynthSpec(seed=0, num_train=300, num_dev=50, num_test=50))
bpe = train_bpe([u.transcript for u in corpus.splits["train"]], 80)
toks = {"wordpiece": Tokenizer.for_wordpiece(bpe), "phoneme": Tokenizer.for_phoneme(corpus.lexicon)}
sets = {split: make_examples([(u.utt_id, u.features, u.transcript) for u in utts], toks)
        for split, utts in corpus.splits.items()}

base = ModelConfig(num_layers=4, primary_vocab_size=len(toks["wordpiece"].vocab))
rows = run_sweep(base, TrainConfig(steps=200), sets["train"], sets["dev"], sets["test"], toks["wordpiece"],
                 "phoneme", len(toks["phoneme"].vocab), layers=[0, 2, 4], seeds=[1, 2], beam=8, nbest=4)
report, summary = format_sweep(rows)
print(report)
print(summary)
