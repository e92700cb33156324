"""Toy acoustic encoder-decoder, toy decoder-only LM, and the residual
cross-modal attention layer that bridges them at a configurable depth.

The acoustic model is a frozen stand-in for a large speech model: after
pretraining, its parameters never receive gradient, and its decoder's
last hidden layer is what the LM attends to. Fusion is single-head:
    h <- h + softmax((hQ)(aK)^T / sqrt(d) + M) (aV)
with optional low-rank adapters (W + (alpha/r) A B, B zero-initialized)
on any projection.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as tz
from .alignment import AlignMask, build_mask, estimated_alignment, proportional_alignment
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS, EOS, FRAMES_PER_TOKEN, N_TOKENS
from .tensor import MASK_NEG, Tensor

D_MODEL = 64        # LM width d
D_AUDIO = 48        # acoustic width d_a
LM_LAYERS = 6
LM_HIDDEN = 128
AC_BLOCKS = 2       # encoder blocks == decoder blocks
AC_HIDDEN = 96
MAX_FRAMES = 160
MAX_TOKENS = 64


class AdapterError(ValueError):
    pass


@lru_cache(maxsize=None)
def _causal_self_mask(T: int) -> np.ndarray:
    m = np.zeros((T, T), dtype=np.float32)
    m[np.triu_indices(T, k=1)] = MASK_NEG
    return m


@lru_cache(maxsize=None)
def _open_mask(T: int, S: int) -> np.ndarray:
    return np.zeros((T, S), dtype=np.float32)


class LoraLinear:
    """Projection with an optional low-rank adapter on the base weight."""

    def __init__(self, rng, d_in, d_out):
        self.d_in = d_in
        self.d_out = d_out
        self.w = tz.parameter(rng, (d_in, d_out))
        self.a = None
        self.b = None
        self.alpha = 0.0
        self.r = 0
        self.drop = 0.0

    def add_adapter(self, rng, r, alpha, drop):
        if r < 1 or r > self.d_in or r > self.d_out:
            raise AdapterError(
                f"adapter rank {r} invalid for {self.d_in}x{self.d_out} weight")
        self.a = tz.parameter(rng, (self.d_in, r))
        self.b = Tensor(np.zeros((r, self.d_out)), trainable=True)
        self.alpha = float(alpha)
        self.r = r
        self.drop = float(drop)

    def __call__(self, x: Tensor, train_rng=None) -> Tensor:
        y = tz.matmul(x, self.w)
        if self.a is not None:
            xa = tz.dropout(x, self.drop, train_rng) if train_rng is not None else x
            delta = tz.matmul(tz.matmul(xa, self.a), self.b)
            y = tz.add(y, tz.scale(delta, self.alpha / self.r))
        return y

    def effective(self) -> np.ndarray:
        """Merged eval-time weight W + (alpha/r) A B."""
        w = self.w.data
        if self.a is not None:
            w = w + (self.alpha / self.r) * (self.a.data @ self.b.data)
        return w.astype(np.float32)

    def params(self, prefix):
        out = [(f"{prefix}.w", self.w)]
        if self.a is not None:
            out += [(f"{prefix}.lora_a", self.a), (f"{prefix}.lora_b", self.b)]
        return out


def _ln_params(d):
    return Tensor(np.ones(d), trainable=True), Tensor(np.zeros(d), trainable=True)


def _attend(q_in, kv_in, wq, wk, wv, mask, train_rng):
    q = wq(q_in, train_rng)
    k = wk(kv_in, train_rng)
    v = wv(kv_in, train_rng)
    scores = tz.scale(tz.matmul(q, tz.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    probs = tz.masked_softmax(scores, mask)
    return tz.matmul(probs, v)


class Block:
    """Pre-LN transformer block: self-attention (+ optional cross-attention
    to a memory of different width) and a two-layer MLP."""

    def __init__(self, rng, d, hidden, cross_dim=None):
        self.d = d
        self.ln1_g, self.ln1_b = _ln_params(d)
        self.wq = LoraLinear(rng, d, d)
        self.wk = LoraLinear(rng, d, d)
        self.wv = LoraLinear(rng, d, d)
        self.wo = LoraLinear(rng, d, d)
        self.cross = cross_dim is not None
        if self.cross:
            self.lnc_g, self.lnc_b = _ln_params(d)
            self.cq = LoraLinear(rng, d, d)
            self.ck = LoraLinear(rng, cross_dim, d)
            self.cv = LoraLinear(rng, cross_dim, d)
            self.co = LoraLinear(rng, d, d)
        self.ln2_g, self.ln2_b = _ln_params(d)
        self.w1 = LoraLinear(rng, d, hidden)
        self.b1 = Tensor(np.zeros(hidden), trainable=True)
        self.w2 = LoraLinear(rng, hidden, d)
        self.b2 = Tensor(np.zeros(d), trainable=True)

    def forward(self, x, self_mask, memory=None, mem_mask=None, train_rng=None):
        h = tz.layer_norm(x, self.ln1_g, self.ln1_b)
        x = tz.add(x, self.wo(_attend(h, h, self.wq, self.wk, self.wv,
                                      self_mask, train_rng), train_rng))
        if self.cross:
            h = tz.layer_norm(x, self.lnc_g, self.lnc_b)
            x = tz.add(x, self.co(_attend(h, memory, self.cq, self.ck, self.cv,
                                          mem_mask, train_rng), train_rng))
        h = tz.layer_norm(x, self.ln2_g, self.ln2_b)
        h = tz.relu(tz.add(self.w1(h, train_rng), self.b1))
        x = tz.add(x, tz.add(self.w2(h, train_rng), self.b2))
        return x

    def params(self, prefix):
        out = [(f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b)]
        for name in ("wq", "wk", "wv", "wo"):
            out += getattr(self, name).params(f"{prefix}.{name}")
        if self.cross:
            out += [(f"{prefix}.lnc_g", self.lnc_g), (f"{prefix}.lnc_b", self.lnc_b)]
            for name in ("cq", "ck", "cv", "co"):
                out += getattr(self, name).params(f"{prefix}.{name}")
        out += [(f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b)]
        out += self.w1.params(f"{prefix}.w1")
        out += [(f"{prefix}.b1", self.b1)]
        out += self.w2.params(f"{prefix}.w2")
        out += [(f"{prefix}.b2", self.b2)]
        return out


class AcousticModel:
    """Tiny encoder-decoder over frame matrices; the frozen speech backbone."""

    def __init__(self, seed=0, d_in=8, d_a=D_AUDIO, hidden=AC_HIDDEN,
                 n_blocks=AC_BLOCKS, vocab=N_TOKENS):
        rng = np.random.default_rng(seed)
        self.d_in = d_in
        self.d_a = d_a
        self.vocab = vocab
        self.w_in = tz.parameter(rng, (d_in, d_a))
        self.b_in = Tensor(np.zeros(d_a), trainable=True)
        self.enc_pos = Tensor(0.02 * rng.standard_normal((MAX_FRAMES, d_a)), trainable=True)
        self.enc_blocks = [Block(rng, d_a, hidden) for _ in range(n_blocks)]
        self.enc_lng, self.enc_lnb = _ln_params(d_a)
        self.tok_emb = Tensor(0.5 * rng.standard_normal((vocab, d_a)) / math.sqrt(d_a),
                              trainable=True)
        self.dec_pos = Tensor(0.02 * rng.standard_normal((MAX_TOKENS, d_a)), trainable=True)
        self.dec_blocks = [Block(rng, d_a, hidden, cross_dim=d_a) for _ in range(n_blocks)]
        self.dec_lng, self.dec_lnb = _ln_params(d_a)
        self.head = tz.parameter(rng, (d_a, vocab))

    def encode(self, frames: np.ndarray) -> Tensor:
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"acoustic encode: need a non-empty SxD frame matrix, "
                             f"got shape {frames.shape}")
        S = frames.shape[0]
        if S > MAX_FRAMES:
            raise ValueError(f"frame count {S} exceeds MAX_FRAMES={MAX_FRAMES}")
        x = tz.add(tz.matmul(Tensor(frames), self.w_in), self.b_in)
        x = tz.add(x, _rows(self.enc_pos, S))
        mask = _open_mask(S, S)
        for blk in self.enc_blocks:
            x = blk.forward(x, mask)
        return tz.layer_norm(x, self.enc_lng, self.enc_lnb)

    def decode_states(self, memory: Tensor, in_tokens):
        """Hidden states (post final norm) and logits for decoder inputs."""
        Tn = len(in_tokens)
        x = tz.add(tz.embedding_lookup(self.tok_emb, in_tokens), _rows(self.dec_pos, Tn))
        self_mask = _causal_self_mask(Tn)
        mem_mask = _open_mask(Tn, memory.shape[0])
        for blk in self.dec_blocks:
            x = blk.forward(x, self_mask, memory=memory, mem_mask=mem_mask)
        hidden = tz.layer_norm(x, self.dec_lng, self.dec_lnb)
        logits = tz.matmul(hidden, self.head)
        return hidden, logits

    def forward(self, frames, teacher_tokens):
        """(logits, AudioHidden) under teacher forcing; inputs get a BOS."""
        memory = self.encode(frames)
        hidden, logits = self.decode_states(memory, [BOS] + list(teacher_tokens))
        return logits, hidden

    def greedy_decode(self, frames, max_len=None):
        """(tokens, AudioHidden ndarray, truncated) by greedy argmax."""
        if max_len is None:
            max_len = max(1, (2 * frames.shape[0]) // FRAMES_PER_TOKEN)
        with tz.no_grad():
            memory = self.encode(frames)
            tokens = []
            truncated = False
            while True:
                hidden, logits = self.decode_states(memory, [BOS] + tokens)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == EOS:
                    return tokens, hidden.data, truncated
                tokens.append(nxt)
                if len(tokens) >= max_len:
                    truncated = True
                    hidden, _ = self.decode_states(memory, [BOS] + tokens)
                    return tokens, hidden.data, truncated

    def params(self):
        out = [("w_in", self.w_in), ("b_in", self.b_in), ("enc_pos", self.enc_pos)]
        for i, blk in enumerate(self.enc_blocks):
            out += blk.params(f"enc.{i}")
        out += [("enc_ln_g", self.enc_lng), ("enc_ln_b", self.enc_lnb),
                ("tok_emb", self.tok_emb), ("dec_pos", self.dec_pos)]
        for i, blk in enumerate(self.dec_blocks):
            out += blk.params(f"dec.{i}")
        out += [("dec_ln_g", self.dec_lng), ("dec_ln_b", self.dec_lnb),
                ("head", self.head)]
        return out

    def freeze(self):
        for _, p in self.params():
            p.trainable = False
            p.requires_grad = False
            p.grad = None


def _rows(table: Tensor, n: int) -> Tensor:
    """First n rows of an embedding-style table, gradient-aware."""
    return tz.embedding_lookup(table, np.arange(n))


class FusionLayer:
    """Single-head residual cross-modal attention (text queries, audio keys/values)."""

    def __init__(self, seed=0, d=D_MODEL, d_a=D_AUDIO):
        rng = np.random.default_rng(seed)
        self.d = d
        self.d_a = d_a
        self.q = LoraLinear(rng, d, d)
        self.k = LoraLinear(rng, d_a, d)
        self.v = LoraLinear(rng, d_a, d)

    def fuse(self, h: Tensor, a: Tensor, mask: AlignMask, train_rng=None) -> Tensor:
        if h.shape[-1] != self.d or a.shape[-1] != self.d_a:
            raise tz.ShapeError(
                f"fuse: widths ({h.shape[-1]}, {a.shape[-1]}) != ({self.d}, {self.d_a})")
        if mask.shape != (h.shape[0], a.shape[0]):
            raise tz.ShapeError(
                f"fuse: mask {mask.shape} != ({h.shape[0]}, {a.shape[0]})")
        q = self.q(h, train_rng)
        k = self.k(a, train_rng)
        v = self.v(a, train_rng)
        scores = tz.scale(tz.matmul(q, tz.transpose(k)), 1.0 / math.sqrt(self.d))
        probs = tz.masked_softmax(scores, mask.additive)
        return tz.add(h, tz.matmul(probs, v))

    def params(self):
        return self.q.params("q") + self.k.params("k") + self.v.params("v")


def cross_modal_fuse(h, a, layer: FusionLayer, mask: AlignMask):
    """Functional wrapper around FusionLayer.fuse for graph-free callers."""
    ht = h if isinstance(h, Tensor) else Tensor(h)
    at = a if isinstance(a, Tensor) else Tensor(a)
    return layer.fuse(ht, at, mask)


class LanguageModel:
    """Decoder-only LM; fusion (when given) is applied to the hidden state
    after block `injection` (1-based) and fed to the next block."""

    def __init__(self, seed=0, d=D_MODEL, hidden=LM_HIDDEN, n_layers=LM_LAYERS,
                 vocab=N_TOKENS):
        rng = np.random.default_rng(seed)
        self.d = d
        self.n_layers = n_layers
        self.vocab = vocab
        self.tok_emb = Tensor(0.5 * rng.standard_normal((vocab, d)) / math.sqrt(d),
                              trainable=True)
        self.pos = Tensor(0.02 * rng.standard_normal((MAX_TOKENS, d)), trainable=True)
        self.blocks = [Block(rng, d, hidden) for _ in range(n_layers)]
        self.ln_g, self.ln_b = _ln_params(d)
        self.head = tz.parameter(rng, (d, vocab))

    def forward(self, in_tokens, audio=None, fusion=None, injection=None,
                mask: AlignMask | None = None, collect_hidden=False, train_rng=None):
        """Next-token logits; self-attention is causal in every mode.

        `audio`+`fusion`+`mask` enable cross-modal fusion after block
        `injection`. With collect_hidden=True also returns the per-block
        hidden states as float32 arrays.
        """
        if len(in_tokens) == 0:
            raise ValueError("lm forward: token sequence must be non-empty")
        fusing = fusion is not None
        if fusing and (audio is None or mask is None or injection is None):
            raise ValueError("lm forward: fusion requires audio, mask and injection")
        if not fusing and audio is not None:
            raise ValueError("lm forward: audio given without a fusion layer")
        Tn = len(in_tokens)
        x = tz.add(tz.embedding_lookup(self.tok_emb, in_tokens), _rows(self.pos, Tn))
        self_mask = _causal_self_mask(Tn)
        hiddens = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk.forward(x, self_mask, train_rng=train_rng)
            if fusing and i == injection:
                a = audio if isinstance(audio, Tensor) else Tensor(audio)
                x = fusion.fuse(x, a, mask, train_rng)
            if collect_hidden:
                hiddens.append(x.data.copy())
        x = tz.layer_norm(x, self.ln_g, self.ln_b)
        logits = tz.matmul(x, self.head)
        return (logits, hiddens) if collect_hidden else logits

    def params(self):
        out = [("tok_emb", self.tok_emb), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            out += blk.params(f"block.{i}")
        out += [("ln_g", self.ln_g), ("ln_b", self.ln_b), ("head", self.head)]
        return out


class FusedModel:
    """Frozen acoustic model + LM + fusion layer with its injection config."""

    def __init__(self, acoustic: AcousticModel, lm: LanguageModel,
                 fusion: FusionLayer, injection: int, mode: str):
        if not 1 <= injection <= lm.n_layers:
            raise ValueError(f"injection {injection} outside [1, {lm.n_layers}]")
        if mode not in ("causal", "full"):
            raise ValueError(f"fusion mode must be causal or full, got {mode!r}")
        self.acoustic = acoustic
        self.lm = lm
        self.fusion = fusion
        self.injection = injection
        self.mode = mode

    def teacher_mask(self, T: int, S: int) -> AlignMask:
        return build_mask(proportional_alignment(T, S), self.mode)

    def decode_mask(self, T: int, S: int) -> AlignMask:
        return build_mask(estimated_alignment(T, S), self.mode)

    def lm_forward(self, in_tokens, audio=None, mode="none", mask=None,
                   collect_hidden=False, train_rng=None):
        """Spec-level forward: mode none disables fusion entirely."""
        if mode == "none":
            if audio is not None:
                raise ValueError("mode=none does not take audio")
            return self.lm.forward(in_tokens, collect_hidden=collect_hidden,
                                   train_rng=train_rng)
        if mode not in ("causal", "full"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        if audio is None:
            raise ValueError(f"mode={mode} requires audio hidden states")
        a = audio if isinstance(audio, Tensor) else Tensor(audio)
        if mask is None:
            Tn, S = len(in_tokens), a.shape[0]
            align = (proportional_alignment(Tn, S) if Tn == S
                     else estimated_alignment(Tn, S))
            mask = build_mask(align, mode)
        return self.lm.forward(in_tokens, audio=a, fusion=self.fusion,
                               injection=self.injection, mask=mask,
                               collect_hidden=collect_hidden, train_rng=train_rng)

    def named_params(self):
        out = {}
        for name, p in self.acoustic.params():
            out[f"acoustic.{name}"] = p
        for name, p in self.lm.params():
            out[f"lm.{name}"] = p
        for name, p in self.fusion.params():
            out[f"fusion.{name}"] = p
        return out


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

def freeze_lm_base(lm):
    """Freeze every LM parameter except the low-rank adapter factors."""
    for name, p in lm.params():
        if not name.endswith((".lora_a", ".lora_b")):
            p.trainable = False
            p.requires_grad = False
            p.grad = None


def apply_adapters(model, r, alpha, dropout, seed=0):
    """Attach low-rank adapters and return a trainable-parameter report.

    Targets the self-attention projections of LanguageModel blocks and the
    Q/K/V of a FusionLayer; a FusedModel gets LM-block adapters (the fusion
    projections are already fully trainable there).
    """
    if r < 1:
        raise AdapterError(f"adapter rank must be >= 1, got {r}")
    rng = np.random.default_rng(seed)
    if isinstance(model, FusedModel):
        apply_adapters(model.lm, r, alpha, dropout, seed=seed)
        return {"r": r, "alpha": alpha, "dropout": dropout,
                **param_report(model.named_params())}
    if isinstance(model, LanguageModel):
        for blk in model.blocks:
            for proj in (blk.wq, blk.wk, blk.wv, blk.wo):
                proj.add_adapter(rng, r, alpha, dropout)
    elif isinstance(model, FusionLayer):
        for proj in (model.q, model.k, model.v):
            proj.add_adapter(rng, r, alpha, dropout)
    else:
        raise AdapterError(f"no adapter targets on {type(model).__name__}")
    return {"r": r, "alpha": alpha, "dropout": dropout,
            **param_report(dict(model.params()))}


def param_report(named: dict) -> dict:
    """Trainable / total parameter accounting, split by top-level prefix."""
    total = trainable = 0
    by_prefix = {}
    for name, p in named.items():
        n = int(p.data.size)
        prefix = name.split(".", 1)[0]
        slot = by_prefix.setdefault(prefix, {"trainable": 0, "total": 0})
        slot["total"] += n
        total += n
        if p.trainable:
            slot["trainable"] += n
            trainable += n
    return {"trainable": trainable, "total": total,
            "fraction": trainable / total if total else 0.0,
            "by_prefix": by_prefix}


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------

def save_model(path, named: dict, meta: dict | None = None):
    save_checkpoint(path, {k: v.data for k, v in named.items()}, meta)


def _load_into(named: dict, saved: dict, prefix=""):
    for name, p in named.items():
        key = prefix + name
        if key not in saved:
            raise KeyError(f"checkpoint missing tensor {key!r}")
        arr = saved[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"tensor {key!r}: checkpoint shape {arr.shape} "
                             f"!= model shape {p.data.shape}")
        p.data = arr.astype(np.float32)


def save_acoustic(path, model: AcousticModel, meta=None):
    named = {f"acoustic.{n}": p for n, p in model.params()}
    save_model(path, named, {"kind": 1, **(meta or {})})


def load_acoustic(path) -> AcousticModel:
    saved, _ = load_checkpoint(path)
    model = AcousticModel()
    _load_into(dict(model.params()), saved, prefix="acoustic.")
    model.freeze()
    return model


def save_lm(path, model: LanguageModel, meta=None):
    named = {f"lm.{n}": p for n, p in model.params()}
    save_model(path, named, {"kind": 2, **(meta or {})})


def load_lm(path, adapters=None) -> LanguageModel:
    saved, meta = load_checkpoint(path)
    model = LanguageModel()
    if adapters or _has_adapters(saved, "lm."):
        r = adapters["r"] if adapters else _infer_rank(saved, "lm.")
        alpha = adapters["alpha"] if adapters else meta.get("alpha", 2 * r)
        drop = adapters["dropout"] if adapters else meta.get("dropout", 0.0)
        apply_adapters(model, r, alpha, drop)
    _load_into(dict(model.params()), saved, prefix="lm.")
    return model


def _has_adapters(saved: dict, prefix: str) -> bool:
    return any(k.startswith(prefix) and k.endswith(".lora_a") for k in saved)


def _infer_rank(saved: dict, prefix: str) -> int:
    for k, v in saved.items():
        if k.startswith(prefix) and k.endswith(".lora_a"):
            return int(v.shape[1])
    raise KeyError("no adapter tensors found")


def save_fused(path, model: FusedModel, meta=None):
    m = {"kind": 3, "injection": model.injection,
         "mode": 1 if model.mode == "causal" else 2, **(meta or {})}
    save_model(path, model.named_params(), m)


def load_fused(path) -> FusedModel:
    saved, meta = load_checkpoint(path)
    acoustic = AcousticModel()
    lm = LanguageModel()
    fusion = FusionLayer()
    if _has_adapters(saved, "lm."):
        r = _infer_rank(saved, "lm.")
        apply_adapters(lm, r, meta.get("alpha", 2 * r), meta.get("dropout", 0.0))
    if _has_adapters(saved, "fusion."):
        r = _infer_rank(saved, "fusion.")
        apply_adapters(fusion, r, meta.get("alpha", 2 * r), meta.get("dropout", 0.0))
    model = FusedModel(acoustic, lm, fusion,
                       injection=int(meta["injection"]),
                       mode="causal" if int(meta["mode"]) == 1 else "full")
    _load_into(model.named_params(), saved)
    acoustic.freeze()
    freeze_lm_base(lm)
    return model
