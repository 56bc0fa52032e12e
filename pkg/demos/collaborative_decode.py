"""Greedy, collaborative, takeover and local decoding side by side on one prompt.

The local mode uses a readout distilled from teacher preferences, so it needs no
teacher at inference time. A KL-budgeted trigger rarely fires on greedy loops (the
student and teacher agree that " the" is likely), so this demo intervenes at every
step to make the difference between modes visible.
"""

import numpy as np

from seldecode.distill import collect_preferences, filter_by_margin, train_selector
from seldecode.engine import DecodeConfig, decode, decompose_errors
from seldecode.lm import build_vocab, bundled_corpus, corpus_prompts, train_tabular
from seldecode.selection import ReadoutHead
from seldecode.trigger import TriggerConfig

text = bundled_corpus().decode("utf-8")
vocab = build_vocab(text, "char", 16)
tokens = vocab.encode(text)
student = train_tabular(tokens, vocab, 2, 0.5, name="student")
teacher = train_tabular(tokens, vocab, 4, 0.5, name="teacher")

trigger = TriggerConfig("always")

print("distilling the readout...")
prompts = corpus_prompts(tokens, 600, 16, np.random.default_rng(3))
records = collect_preferences(student, teacher, prompts, TriggerConfig("oracle_kl", 0.1), 16, 50, seed=3)
readout, rep = train_selector(filter_by_margin(records, 0.08), ReadoutHead.zeros(vocab.n_text, 16))
print(f"  {len(records)} records, best validation Agree@1 {rep.best_val_agree:.3f} (1/K = {rep.random_rate:.3f})")

prompt = tokens[2000:2040]
print("\nprompt:", repr(vocab.decode(prompt)))
for mode in ("greedy", "collaborative", "takeover", "local"):
    traj = decode(student, prompt, DecodeConfig(mode, 8, trigger, max_len=120), teacher=teacher, readout=readout)
    d = decompose_errors(traj.traces)
    print(f"\n[{mode}] triggered {d.n_triggered}, mismatches {d.cumulative} = hit {d.sum_hit} + sel {d.sum_sel}")
    print(repr(vocab.decode(traj.generated)))
