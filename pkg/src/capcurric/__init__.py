"""Curriculum-learning harness for desk-scale image captioning experiments.

Pairs of (image feature, caption) are scored by cross-modal difficulty,
trained easy-to-hard with Baby Step bucketing, and evaluated with BLEU-4,
CIDEr and a paired bootstrap significance test.
"""

__version__ = "0.1.0"

BOS, EOS, UNK = 0, 1, 2
RESERVED_TOKENS = ("<bos>", "<eos>", "<unk>")


class HarnessError(ValueError):
    """Raised for invalid user input: malformed files, violated invariants, bad configs."""
