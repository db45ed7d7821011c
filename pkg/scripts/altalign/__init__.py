"""
AltAlign - Align a multilingual student text encoder with a frozen text-image space.

Stage 1 distills a frozen teacher text encoder into a trainable student over
parallel text pairs. Stage 2 tunes the student contrastively against frozen
image embeddings. The package also carries the evaluation harness and the
data-mixture ablation runner.
"""

__version__ = "0.1.0"
