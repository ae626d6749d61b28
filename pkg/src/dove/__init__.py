"""DOVE: a dynamic-length visual tokenizer toolkit.

Encodes images into a variable number of continuous tokens by learning
when to emit an end-of-sequence marker, with query-conditioned and
Gaussian-latent variants, plus training, analysis, and CLI front ends.
"""

__version__ = "0.1.0"
