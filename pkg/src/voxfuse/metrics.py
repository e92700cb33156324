"""Edit-distance error rate between reference and hypothesis token sequences."""

from __future__ import annotations


def levenshtein(ref, hyp) -> int:
    """Substitutions + insertions + deletions, two-row DP."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Levenshtein(ref, hyp) / len(ref)."""
    ref = list(ref)
    if len(ref) == 0:
        raise ValueError("wer: reference must be non-empty")
    return levenshtein(ref, hyp) / len(ref)


def corpus_wer(pairs) -> float:
    """Pooled WER over (ref, hyp) pairs: total edits / total reference length."""
    edits = total = 0
    for ref, hyp in pairs:
        ref = list(ref)
        if len(ref) == 0:
            raise ValueError("corpus_wer: empty reference")
        edits += levenshtein(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("corpus_wer: no pairs")
    return edits / total
