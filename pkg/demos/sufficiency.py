"""How often is the teacher's next token already in the student's top-K?

Bigram student, 4-gram teacher, both trained on the bundled corpus. We look only at
the steps where the two disagree most (top 1% KL) and print the Hit@K curve.
"""

import numpy as np

from seldecode.lm import build_vocab, bundled_corpus, masked_softmax, train_tabular
from seldecode.metrics import hit_at_k, reference_rank
from seldecode.trigger import calibrate_threshold, calibration_states, calibration_stream, kl_stream

text = bundled_corpus().decode("utf-8")
vocab = build_vocab(text, "char", 16)
tokens = vocab.encode(text)
student = train_tabular(tokens, vocab, 2, 0.5, name="student")
teacher = train_tabular(tokens, vocab, 4, 0.5, name="teacher")

# threshold from one stream, measured on another
thr = calibrate_threshold(calibration_stream(student, teacher, tokens, 20_000, seed=1), 0.01)
states = calibration_states(student, tokens, 10_000, seed=2)
kls = kl_stream(student, teacher, states)
print(f"KL threshold {thr:.3f}, fires on {np.mean(kls > thr):.2%} of held-out steps")

ranks = [
    reference_rank(masked_softmax(student.next_logits(s)), int(np.argmax(teacher.next_probs(s))))
    for s, k in zip(states, kls)
    if k > thr
]
for K in (1, 2, 4, 8, 16):
    print(f"Hit@{K:<2d} {hit_at_k(ranks, K):.3f}")
