"""Entity-aware n-best reranking toolkit for voice queries.

Trains a neural reranker on artificially corrupted n-best lists (no
transcribed data needed) with features from a music knowledge-base, and
evaluates it against n-gram / LSTM language-model baselines by word error
rate.
"""

__version__ = "0.1.0"
