"""Answer-conditioned visual question generation with multi-level attention.

Library + CLI for training and running a generator that, given per-region
image features and an answer phrase, produces a matching natural-language
question.  Training runs on a tape-based reverse-mode autodiff core that is
verified end to end against central finite differences.
"""

__version__ = "0.1.0"
