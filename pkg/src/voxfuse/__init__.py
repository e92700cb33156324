"""Toy continuous-space audio/text fusion: a frozen acoustic encoder-decoder
bridged into a small decoder-only LM through masked cross-attention."""

from .alignment import (AlignMask, AlignVector, build_mask, estimated_alignment,
                        proportional_alignment, streaming_prefix)
from .metrics import levenshtein, wer
from .cca import rcca
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "AlignMask", "AlignVector", "build_mask", "estimated_alignment",
    "proportional_alignment", "streaming_prefix", "levenshtein", "wer",
    "rcca", "Tensor", "grad_check", "no_grad",
]
