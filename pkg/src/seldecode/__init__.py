"""Selection-based collaborative decoding with tabular n-gram models."""

from .distill import LossConfig, PreferenceRecord, collect_preferences, filter_by_margin, total_loss, train_selector
from .engine import DecodeConfig, Trajectory, decode, decompose_errors, majority_vote
from .lm import DecodingState, TabularLM, Vocab, build_vocab, bundled_corpus, train_tabular
from .metrics import agree_at_1, entropy, hit_at_k, rank_cdf, rank_correlations
from .selection import CandidateSet, ReadoutHead, ScoreVector, local_scores, propose_candidates, select, teacher_scores
from .trigger import TriggerConfig, TriggerHead, calibrate_threshold, kl_divergence, train_trigger_head

__version__ = "0.1.0"
