"""Proportional monotone text-to-audio alignment and additive attention masks.

A text position t may consume audio states 0..s_t. Training-time alignment
uses the known text length (teacher forcing); at decode time the text length
is unknown, so the alignment is estimated from the audio-state count (one
audio state per emitted token, clamped at the last state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import MASK_NEG


@dataclass(frozen=True)
class AlignVector:
    """Monotone map from text positions to last-allowed audio index."""

    s: tuple
    T: int
    S: int

    def __post_init__(self):
        if len(self.s) != self.T:
            raise ValueError(f"alignment has {len(self.s)} entries for T={self.T}")
        prev = -1
        for t, st in enumerate(self.s):
            if not 0 <= st < self.S:
                raise ValueError(f"s[{t}]={st} outside [0, {self.S - 1}]")
            if st < prev:
                raise ValueError(f"alignment not monotone at t={t}: {st} < {prev}")
            prev = st


@dataclass(frozen=True)
class AlignMask:
    """T x S additive mask; 0 on open positions, -1e9 (stand-in for -inf) elsewhere."""

    mode: str
    additive: np.ndarray

    @property
    def shape(self):
        return self.additive.shape


def proportional_alignment(T: int, S: int) -> AlignVector:
    """s_t = floor(S * t / T) in exact integer arithmetic."""
    if T < 1 or S < 1:
        raise ValueError(f"proportional_alignment: need T >= 1 and S >= 1, got T={T}, S={S}")
    return AlignVector(s=tuple((S * t) // T for t in range(T)), T=T, S=S)


def estimated_alignment(T: int, S: int) -> AlignVector:
    """Decode-time alignment with the text length estimated as S: s_t = min(t, S-1).

    Coincides with proportional_alignment whenever T == S, which is the
    teacher-forced training distribution.
    """
    if T < 1 or S < 1:
        raise ValueError(f"estimated_alignment: need T >= 1 and S >= 1, got T={T}, S={S}")
    return AlignVector(s=tuple(min(t, S - 1) for t in range(T)), T=T, S=S)


def build_mask(align: AlignVector, mode: str) -> AlignMask:
    """Additive mask from an alignment; mode 'full' opens every position."""
    if mode not in ("causal", "full"):
        raise ValueError(f"build_mask: unknown mode {mode!r}")
    m = np.zeros((align.T, align.S), dtype=np.float32)
    if mode == "causal":
        cols = np.arange(align.S)
        for t, st in enumerate(align.s):
            m[t, cols > st] = MASK_NEG
    return AlignMask(mode=mode, additive=m)


def streaming_prefix(align: AlignVector, t: int) -> int:
    """Last audio index the decoder may consume when emitting token t."""
    if not 0 <= t < align.T:
        raise IndexError(f"streaming_prefix: t={t} outside [0, {align.T - 1}]")
    return align.s[t]


def render_mask(mask: AlignMask) -> str:
    """Rows of '0' (open) and '-' (masked), for inspection and golden files."""
    rows = []
    for row in mask.additive:
        rows.append("".join("0" if v == 0 else "-" for v in row))
    return "\n".join(rows)
