"""Greedy decoding: incremental (cached-state) streaming decode plus a
recompute-everything oracle that runs the full forward pass with the causal
mask at every step. Both must emit identical token sequences.

Eval-time adapter weights are merged (W + (alpha/r) A B) once up front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .data import BOS, EOS, FRAMES_PER_TOKEN
from .models import FusedModel, LanguageModel

_LN_EPS = 1e-5


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * g + b


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _BlockWeights:
    def __init__(self, blk):
        self.ln1_g, self.ln1_b = blk.ln1_g.data, blk.ln1_b.data
        self.wq, self.wk = blk.wq.effective(), blk.wk.effective()
        self.wv, self.wo = blk.wv.effective(), blk.wo.effective()
        self.ln2_g, self.ln2_b = blk.ln2_g.data, blk.ln2_b.data
        self.w1, self.b1 = blk.w1.effective(), blk.b1.data
        self.w2, self.b2 = blk.w2.effective(), blk.b2.data


class IncrementalLM:
    """Step-wise LM forward with per-block key/value caches.

    With fusion enabled, the audio keys/values are projected once and each
    step attends to the audio prefix allowed at that position (causal) or
    to everything (full).
    """

    def __init__(self, lm: LanguageModel, fusion=None, injection=None,
                 audio: np.ndarray | None = None, mode: str = "none"):
        self.d = lm.d
        self.scale = 1.0 / math.sqrt(lm.d)
        self.tok_emb = lm.tok_emb.data
        self.pos_emb = lm.pos.data
        self.blocks = [_BlockWeights(b) for b in lm.blocks]
        self.ln_g, self.ln_b = lm.ln_g.data, lm.ln_b.data
        self.head = lm.head.data
        self.kcache = [[] for _ in self.blocks]
        self.vcache = [[] for _ in self.blocks]
        self.mode = mode
        self.injection = injection
        if mode != "none":
            if fusion is None or audio is None or injection is None:
                raise ValueError("fused decoding requires fusion, audio and injection")
            self.fq = fusion.q.effective()
            self.audio_k = audio @ fusion.k.effective()
            self.audio_v = audio @ fusion.v.effective()
            self.S = audio.shape[0]

    def step(self, token: int, pos: int) -> np.ndarray:
        """Feed one token at position pos; returns next-token logits."""
        x = (self.tok_emb[token] + self.pos_emb[pos]).astype(np.float32)
        for i, blk in enumerate(self.blocks):
            h = _ln(x, blk.ln1_g, blk.ln1_b)
            q = h @ blk.wq
            self.kcache[i].append(h @ blk.wk)
            self.vcache[i].append(h @ blk.wv)
            K = np.stack(self.kcache[i])
            V = np.stack(self.vcache[i])
            p = _softmax((K @ q) * self.scale)
            x = x + (p @ V) @ blk.wo
            h = _ln(x, blk.ln2_g, blk.ln2_b)
            x = x + np.maximum(h @ blk.w1 + blk.b1, 0.0) @ blk.w2 + blk.b2
            if self.mode != "none" and i + 1 == self.injection:
                s_t = self.S - 1 if self.mode == "full" else min(pos, self.S - 1)
                q_f = x @ self.fq
                pf = _softmax((self.audio_k[:s_t + 1] @ q_f) * self.scale)
                x = x + pf @ self.audio_v[:s_t + 1]
        return _ln(x, self.ln_g, self.ln_b) @ self.head


@dataclass
class DecodeResult:
    tokens: list
    truncated: bool
    audio_len: int  # audio hidden states consumed (0 for text-only decode)


def _greedy(stepper, max_len: int) -> DecodeResult:
    tokens = []
    logits = stepper.step(BOS, 0)
    audio_len = getattr(stepper, "S", 0) if stepper.mode != "none" else 0
    while True:
        nxt = int(np.argmax(logits))
        if nxt == EOS:
            return DecodeResult(tokens, False, audio_len)
        tokens.append(nxt)
        if len(tokens) >= max_len:
            return DecodeResult(tokens, True, audio_len)
        logits = stepper.step(nxt, len(tokens))


def decode(model: FusedModel, frames: np.ndarray, mode: str) -> DecodeResult:
    """Greedy transcription of a frame matrix.

    Modes: streaming (incremental, causal audio access), offline (full audio
    access), offline-causal (full forward under the causal mask each step;
    the streaming oracle), none (text-only LM, no audio).
    """
    max_len = max(1, (2 * frames.shape[0]) // FRAMES_PER_TOKEN)
    if mode == "none":
        stepper = IncrementalLM(model.lm)
        return _greedy(stepper, max_len)
    _, audio, _ = model.acoustic.greedy_decode(frames)
    if mode in ("streaming", "offline"):
        stepper = IncrementalLM(model.lm, model.fusion, model.injection, audio,
                                mode="causal" if mode == "streaming" else "full")
        return _greedy(stepper, max_len)
    if mode == "offline-causal":
        return _oracle_causal(model, audio, max_len)
    raise ValueError(f"unknown decode mode {mode!r}")


def _oracle_causal(model: FusedModel, audio: np.ndarray, max_len: int) -> DecodeResult:
    S = audio.shape[0]
    tokens = []
    with tz.no_grad():
        while True:
            in_tokens = [BOS] + tokens
            mask = model.decode_mask(len(in_tokens), S)
            logits = model.lm_forward(in_tokens, audio=audio, mode="causal", mask=mask)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                return DecodeResult(tokens, False, S)
            tokens.append(nxt)
            if len(tokens) >= max_len:
                return DecodeResult(tokens, True, S)
