"""Three-stage training pipeline and the evaluation / analysis entry points.

Stages: pretrain the acoustic encoder-decoder, pretrain the text-only LM,
then fine-tune fusion (fusion projections + LM adapters) against the frozen
acoustic model. Everything is seeded and single-threaded, so repeat runs
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tz
from .cca import rcca
from .data import BOS, EOS, Manifest
from .decoding import decode
from .metrics import corpus_wer
from .models import (AcousticModel, FusedModel, FusionLayer, LanguageModel,
                     apply_adapters, freeze_lm_base, param_report)
from .tensor import Adam


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str                 # acoustic | lm | fusion
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    lr_decay: float = 1.0      # per-epoch multiplicative decay
    seed: int = 0
    injection: int = 3
    fusion_mode: str = "causal"
    adapter_r: int = 8
    adapter_alpha: float = 16.0
    adapter_dropout: float = 0.1
    extras: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return asdict(self)


def _load_pairs(manifest: Manifest):
    pairs = []
    for sample in manifest.samples():
        pairs.append((sample.tokens, sample.frames))
    return pairs


def _check_finite(loss, cfg, epoch, step):
    if not np.isfinite(loss):
        raise TrainingError(
            f"NaN/inf loss at stage={cfg.stage} epoch={epoch} step={step}")


def _run_epochs(cfg, pairs, loss_fn, trainable, rng):
    """Shared batch loop: per-sample graphs, gradient averaging, Adam."""
    opt = Adam(trainable, lr=cfg.lr)
    epoch_losses = []
    order = np.arange(len(pairs))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay ** epoch
        rng.shuffle(order)
        total = 0.0
        count = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for j in idx:
                loss = loss_fn(pairs[j])
                _check_finite(float(loss.data), cfg, epoch, start)
                total += float(loss.data)
                count += 1
                tz.scale(loss, 1.0 / len(idx)).backward()
            opt.step()
        epoch_losses.append(total / count)
    return epoch_losses


def train_acoustic(cfg: TrainConfig, manifest: Manifest):
    """Pretrain the acoustic model with teacher forcing; returns (model, report)."""
    model = AcousticModel(seed=cfg.seed)
    pairs = _load_pairs(manifest)
    rng = np.random.default_rng(cfg.seed)

    def loss_fn(pair):
        tokens, frames = pair
        logits, _ = model.forward(frames, tokens)
        return tz.cross_entropy(logits, list(tokens) + [EOS])

    trainable = [p for _, p in model.params()]
    losses = _run_epochs(cfg, pairs, loss_fn, trainable, rng)
    report = {"config": cfg.echo(), "epoch_losses": losses,
              "params": param_report({f"acoustic.{n}": p for n, p in model.params()})}
    return model, report


def train_lm(cfg: TrainConfig, manifest: Manifest):
    """Pretrain the text-only LM on the transcripts; returns (model, report)."""
    model = LanguageModel(seed=cfg.seed)
    pairs = _load_pairs(manifest)
    rng = np.random.default_rng(cfg.seed)

    def loss_fn(pair):
        tokens, _ = pair
        logits = model.forward([BOS] + list(tokens))
        return tz.cross_entropy(logits, list(tokens) + [EOS])

    trainable = [p for _, p in model.params()]
    losses = _run_epochs(cfg, pairs, loss_fn, trainable, rng)
    report = {"config": cfg.echo(), "epoch_losses": losses,
              "params": param_report({f"lm.{n}": p for n, p in model.params()})}
    return model, report


def teacher_audio_hidden(acoustic: AcousticModel, tokens, frames) -> np.ndarray:
    """Frozen acoustic decoder states under teacher forcing (constant per sample)."""
    with tz.no_grad():
        _, hidden = acoustic.forward(frames, tokens)
    return hidden.data


def train_fusion(cfg: TrainConfig, manifest: Manifest, acoustic: AcousticModel,
                 lm: LanguageModel):
    """Fine-tune fusion projections + LM adapters against the frozen acoustic
    model; returns (FusedModel, report)."""
    acoustic.freeze()
    apply_adapters(lm, cfg.adapter_r, cfg.adapter_alpha, cfg.adapter_dropout,
                   seed=cfg.seed + 1)
    freeze_lm_base(lm)
    fusion = FusionLayer(seed=cfg.seed + 2)
    fused = FusedModel(acoustic, lm, fusion, injection=cfg.injection,
                       mode=cfg.fusion_mode)

    pairs = _load_pairs(manifest)
    cache = [teacher_audio_hidden(acoustic, tokens, frames)
             for tokens, frames in pairs]
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 3)

    def loss_fn(pair_with_audio):
        (tokens, _), audio = pair_with_audio
        in_tokens = [BOS] + list(tokens)
        mask = fused.teacher_mask(len(in_tokens), audio.shape[0])
        logits = fused.lm_forward(in_tokens, audio=audio, mode=cfg.fusion_mode,
                                  mask=mask, train_rng=drop_rng)
        return tz.cross_entropy(logits, list(tokens) + [EOS])

    named = fused.named_params()
    trainable = [p for p in named.values() if p.trainable]
    losses = _run_epochs(cfg, list(zip(pairs, cache)), loss_fn, trainable, rng)
    report = {"config": cfg.echo(), "epoch_losses": losses,
              "params": param_report(named)}
    return fused, report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def lm_heldout_loss(lm: LanguageModel, manifest: Manifest,
                    include_eos: bool = False) -> float:
    """Mean held-out cross-entropy per position.

    By default only transcript-symbol positions count (the EOS position
    tracks the length prior, not the uniform 16-symbol source).
    """
    total = 0.0
    count = 0
    with tz.no_grad():
        for sample in manifest.samples():
            tokens = sample.tokens
            logits = lm.forward([BOS] + tokens).data.astype(np.float64)
            targets = tokens + [EOS]
            z = logits - logits.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=-1))
            nll = lse - z[np.arange(len(targets)), targets]
            if not include_eos:
                nll = nll[:-1]
            total += float(nll.sum())
            count += nll.size
    return total / count


def acoustic_token_error(acoustic: AcousticModel, manifest: Manifest,
                         limit=None) -> float:
    pairs = []
    for i, sample in enumerate(manifest.samples()):
        if limit is not None and i >= limit:
            break
        hyp, _, _ = acoustic.greedy_decode(sample.frames)
        pairs.append((sample.tokens, hyp))
    return corpus_wer(pairs)


def evaluate_wer(model: FusedModel, manifest: Manifest, mode: str, limit=None):
    """(pooled WER, list of (id, ref_text, hyp_tokens, truncated))."""
    rows = []
    pairs = []
    for i, sample in enumerate(manifest.samples()):
        if limit is not None and i >= limit:
            break
        result = decode(model, sample.frames, mode)
        rows.append((sample.id, sample.text, result.tokens, result.truncated))
        pairs.append((sample.tokens, result.tokens))
    return corpus_wer(pairs), rows


# ---------------------------------------------------------------------------
# rCCA alignment analysis
# ---------------------------------------------------------------------------

def alignment_report(fused: FusedModel, manifest: Manifest, use_fusion: bool,
                     components: int = 16, lam: float = 1e-4,
                     min_samples: int = 500, limit=None) -> dict:
    """Per-LM-layer mean canonical correlation between mean-pooled LM hidden
    states and mean-pooled acoustic decoder states over the corpus."""
    lm_views = [[] for _ in range(fused.lm.n_layers)]
    audio_view = []
    n = 0
    with tz.no_grad():
        for i, sample in enumerate(manifest.samples()):
            if limit is not None and i >= limit:
                break
            tokens = sample.tokens
            audio = teacher_audio_hidden(fused.acoustic, tokens, sample.frames)
            in_tokens = [BOS] + tokens
            if use_fusion:
                mask = fused.teacher_mask(len(in_tokens), audio.shape[0])
                _, hiddens = fused.lm_forward(in_tokens, audio=audio,
                                              mode=fused.mode, mask=mask,
                                              collect_hidden=True)
            else:
                _, hiddens = fused.lm_forward(in_tokens, mode="none",
                                              collect_hidden=True)
            for layer, h in enumerate(hiddens):
                lm_views[layer].append(h.mean(axis=0))
            audio_view.append(audio.mean(axis=0))
            n += 1
    if n < min_samples:
        raise ValueError(f"alignment_report: need >= {min_samples} samples, got {n}")
    Y = np.stack(audio_view)
    layers = []
    for layer in range(fused.lm.n_layers):
        X = np.stack(lm_views[layer])
        corrs = rcca(X, Y, components=components, lam=lam)
        layers.append({"layer": layer + 1, "mean_corr": float(corrs.mean())})
    return {"layers": layers, "components": components, "lambda": lam, "n": n,
            "fused": use_fusion, "injection": fused.injection, "mode": fused.mode}
