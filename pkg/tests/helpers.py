import numpy as np

from seldecode.distill import PreferenceRecord, target_index, teacher_margin


def synthetic_records(n, n_text=10, K=4, seed=0, order_seed=0):
    """Noiseless records: the target is whichever candidate ranks highest in a fixed token order."""
    pref = np.random.default_rng(order_seed).permutation(n_text).astype(float)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prefix = tuple(int(t) for t in rng.integers(0, n_text, size=4))
        cands = tuple(int(t) for t in rng.choice(n_text, size=K, replace=False))
        w = np.exp(pref[list(cands)])
        tp = tuple(float(x) for x in w / w.sum())
        out.append(PreferenceRecord(prefix, cands, tuple([-1.0] * K), tp, target_index(cands, tp), 1.0, teacher_margin(tp)))
    return out
