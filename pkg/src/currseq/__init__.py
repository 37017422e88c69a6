"""Sentence-length curriculum training for next-utterance prediction.

Desk-scale, fully seeded: corpus segmentation into length pairs, a small
LSTM encoder-decoder with hand-written gradients, segmented grid-search
training with weight inheritance, and fresh/mix/cross baselines.
"""

__version__ = "0.1.0"
