"""Synthetic paired frames/text corpus and the character tokenizer.

Transcripts are uniform-random strings over a 16-symbol alphabet, so a
text-only model can never beat the unigram entropy; the frames carry the
transcript through an injective per-symbol prototype table plus Gaussian
noise, which is what makes audio fusion measurably useful.

On disk: manifest.jsonl (one record per sample) next to frames/<id>.f32
holding raw little-endian float32 rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ALPHABET = "abcdefghijklmnop"
VOCAB = len(ALPHABET)          # 16 transcript symbols
BOS = VOCAB                    # 16
EOS = VOCAB + 1                # 17
N_TOKENS = VOCAB + 2

FRAME_DIM = 8                  # raw frame width, lifted to d_a by the encoder
FRAMES_PER_TOKEN = 4           # nominal span length k; jitter is -1/0/+1
MIN_LEN = 4
MAX_LEN = 24

_CHAR_TO_ID = {c: i for i, c in enumerate(ALPHABET)}

# Shared "acoustic world": one prototype per symbol, independent of corpus seed.
_PROTO_SEED = 0x5EED
PROTOTYPES = np.random.default_rng(_PROTO_SEED).standard_normal(
    (VOCAB, FRAME_DIM)).astype(np.float32)


class TokenizeError(ValueError):
    pass


def tokenize(text: str):
    """Map a transcript string to symbol ids (no BOS/EOS)."""
    ids = []
    for i, ch in enumerate(text):
        if ch not in _CHAR_TO_ID:
            raise TokenizeError(f"symbol {ch!r} at offset {i} is not in the alphabet")
        ids.append(_CHAR_TO_ID[ch])
    return ids


def detokenize(ids) -> str:
    out = []
    for i, t in enumerate(ids):
        if not 0 <= t < VOCAB:
            raise TokenizeError(f"token id {t} at offset {i} outside the alphabet")
        out.append(ALPHABET[t])
    return "".join(out)


@dataclass
class CorpusSample:
    id: str
    text: str
    frames: np.ndarray  # S x FRAME_DIM float32

    @property
    def tokens(self):
        return tokenize(self.text)


@dataclass
class Manifest:
    root: Path
    records: list

    def __len__(self):
        return len(self.records)

    def load(self, i: int) -> CorpusSample:
        rec = self.records[i]
        path = self.root / rec["frames"]
        raw = np.fromfile(path, dtype="<f4")
        expect = rec["S"] * rec["d_in"]
        if raw.size != expect:
            raise IOError(
                f"frames file {path} holds {raw.size} floats, manifest says {expect}")
        return CorpusSample(id=rec["id"], text=rec["text"],
                            frames=raw.reshape(rec["S"], rec["d_in"]))

    def samples(self):
        for i in range(len(self.records)):
            yield self.load(i)


def synth_frames(tokens, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Frames for a token sequence: per-token prototype span + Gaussian noise."""
    spans = []
    for t in tokens:
        span = FRAMES_PER_TOKEN + int(rng.integers(-1, 2))
        spans.append(np.repeat(PROTOTYPES[t][None, :], span, axis=0))
    frames = np.concatenate(spans, axis=0)
    if sigma > 0:
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)


def generate_corpus(n: int, seed: int, sigma: float, out_dir) -> Manifest:
    """Write manifest.jsonl + frames/ under out_dir; reproducible from seed."""
    if n < 1:
        raise ValueError(f"generate_corpus: n must be >= 1, got {n}")
    if sigma < 0:
        raise ValueError(f"generate_corpus: sigma must be >= 0, got {sigma}")
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i in range(n):
            length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
            tokens = rng.integers(0, VOCAB, size=length)
            text = detokenize(tokens.tolist())
            frames = synth_frames(tokens.tolist(), sigma, rng)
            sid = f"u{i:05d}"
            rel = f"frames/{sid}.f32"
            frames.astype("<f4").tofile(out_dir / rel)
            rec = {"id": sid, "frames": rel, "S": int(frames.shape[0]),
                   "d_in": FRAME_DIM, "text": text}
            fh.write(json.dumps(rec) + "\n")
            records.append(rec)
    return Manifest(root=out_dir, records=records)


def load_manifest(path) -> Manifest:
    path = Path(path)
    manifest_file = path / "manifest.jsonl" if path.is_dir() else path
    records = []
    with open(manifest_file, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    root = manifest_file.parent
    for rec in records:
        f = root / rec["frames"]
        if not f.exists():
            raise IOError(f"manifest references missing frames file {f}")
        size = f.stat().st_size
        if size != rec["S"] * rec["d_in"] * 4:
            raise IOError(
                f"frames file {f} is {size} bytes, expected {rec['S'] * rec['d_in'] * 4}")
    return Manifest(root=root, records=records)


def oracle_decode(frames: np.ndarray):
    """Nearest-prototype decoder: classify each frame, collapse runs, and
    infer repeat counts from run length.

    Spans are FRAMES_PER_TOKEN +/- 1 frames, so a run of length L covers
    ceil(L / (FRAMES_PER_TOKEN + 1)) .. floor(L / (FRAMES_PER_TOKEN - 1))
    tokens; the smallest feasible count is the MAP choice (each extra
    token costs a 1/|alphabet| repetition)."""
    d2 = ((frames[:, None, :] - PROTOTYPES[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    tokens = []
    i = 0
    while i < len(labels):
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        run = j - i
        count = max(1, -(-run // (FRAMES_PER_TOKEN + 1)))
        tokens.extend([int(labels[i])] * count)
        i = j
    return tokens
