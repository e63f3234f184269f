"""Synthetic labelled feature corpus, mismatch channel, MTR perturbation and I/O.

Utterances are sequences of tokens; every token is a fixed run of 2-4 senones
and every senone occupies a random 3-8 frame segment whose frames are drawn
around the senone's mean vector.  The mismatch channel degrades frames in
feature space (temporal smoothing, quantisation, gain, additive noise) and
never touches labels.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .functional import context_index

FRAMES_PER_HOUR = 360_000


@dataclass
class FeatureUtterance:
    utt_id: str
    frames: np.ndarray          # (F, T) float32
    senone_labels: np.ndarray   # (T,) int
    tokens: list

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def replace(self, frames=None, senone_labels=None) -> "FeatureUtterance":
        return FeatureUtterance(
            self.utt_id,
            self.frames if frames is None else np.asarray(frames, dtype=np.float32),
            self.senone_labels if senone_labels is None else np.asarray(senone_labels),
            list(self.tokens),
        )


@dataclass
class CorpusManifest:
    seed: int = 0
    n_utterances: int = 200
    feature_dim: int = 16
    n_senones: int = 48
    vocab_size: int = 12
    emit_sigma: float = 1.6
    mean_scale: float = 1.0
    tokens_per_utt: tuple = (4, 9)
    segment_frames: tuple = (3, 8)
    frames_per_hour: int = FRAMES_PER_HOUR
    id_prefix: str = "utt"

    def validate(self) -> None:
        if self.vocab_size < 2 or self.n_senones < self.vocab_size:
            raise ValueError("need C >= V >= 2")
        if self.n_senones < 2 * self.vocab_size:
            raise ValueError("every token needs at least two distinct senones: C >= 2V")
        if self.feature_dim < 1 or self.n_utterances < 0 or self.emit_sigma < 0:
            raise ValueError("invalid manifest parameters")
        lo, hi = self.tokens_per_utt
        if not 1 <= lo <= hi:
            raise ValueError("tokens_per_utt must satisfy 1 <= lo <= hi")
        lo, hi = self.segment_frames
        if not 1 <= lo <= hi:
            raise ValueError("segment_frames must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens_per_utt"] = list(self.tokens_per_utt)
        d["segment_frames"] = list(self.segment_frames)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        d = dict(d)
        for key in ("tokens_per_utt", "segment_frames"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Lexicon:
    """Token -> senone-sequence map and per-senone emission means."""

    token_senones: list
    means: np.ndarray   # (C, F)

    def senone_to_token(self, n_senones: int) -> np.ndarray:
        table = np.full(n_senones, -1, dtype=np.int64)
        for tok, seq in enumerate(self.token_senones):
            table[list(seq)] = tok
        return table


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _stable_id(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def build_lexicon(manifest: CorpusManifest) -> Lexicon:
    manifest.validate()
    rng = _rng(manifest.seed, 1)
    c, v = manifest.n_senones, manifest.vocab_size
    lengths = rng.integers(2, 5, size=v)
    while lengths.sum() > c:
        lengths[np.argmax(lengths)] -= 1
    order = rng.permutation(c)
    token_senones, start = [], 0
    for n in lengths:
        token_senones.append([int(s) for s in order[start:start + n]])
        start += n
    means = rng.standard_normal((c, manifest.feature_dim)) * manifest.mean_scale
    return Lexicon(token_senones, means.astype(np.float32))


def synth_utterance(manifest: CorpusManifest, lexicon: Lexicon, index: int) -> FeatureUtterance:
    rng = _rng(manifest.seed, 2, index)
    n_tok = int(rng.integers(manifest.tokens_per_utt[0], manifest.tokens_per_utt[1] + 1))
    tokens: list = []
    while len(tokens) < n_tok:
        tok = int(rng.integers(manifest.vocab_size))
        if not tokens or tok != tokens[-1]:
            tokens.append(tok)
    labels = []
    lo, hi = manifest.segment_frames
    for tok in tokens:
        for s in lexicon.token_senones[tok]:
            labels.extend([s] * int(rng.integers(lo, hi + 1)))
    labels = np.asarray(labels, dtype=np.int64)
    noise = rng.standard_normal((manifest.feature_dim, labels.size))
    frames = lexicon.means[labels].T.astype(np.float64) + manifest.emit_sigma * noise
    return FeatureUtterance(f"{manifest.id_prefix}{index:05d}", frames.astype(np.float32),
                            labels, tokens)


def synth_corpus(manifest: CorpusManifest) -> list[FeatureUtterance]:
    lexicon = build_lexicon(manifest)
    return [synth_utterance(manifest, lexicon, i) for i in range(manifest.n_utterances)]


# ---------------------------------------------------------------------------
# mismatch channel
# ---------------------------------------------------------------------------

@dataclass
class CorruptionSpec:
    smoothing_window: int = 3
    quant_levels: int | None = 4
    quant_range: float = 3.0
    noise_sigma: float = 1.0
    gain_range: tuple = (1.0, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        d = dict(d)
        if "gain_range" in d:
            d["gain_range"] = tuple(d["gain_range"])
        return cls(**d)

    @classmethod
    def identity(cls) -> "CorruptionSpec":
        return cls(smoothing_window=1, quant_levels=None, noise_sigma=0.0, gain_range=(1.0, 1.0))


def moving_average(frames: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average along time with edge replication."""
    if window < 1:
        raise ValueError("smoothing window must be >= 1")
    if window == 1:
        return frames.copy()
    left = (window - 1) // 2
    padded = np.pad(frames, ((0, 0), (left, window - 1 - left)), mode="edge")
    csum = np.cumsum(np.pad(padded, ((0, 0), (1, 0))), axis=1, dtype=np.float64)
    return (csum[:, window:] - csum[:, :-window]) / window


def quantize(frames: np.ndarray, levels: int | None, value_range: float) -> np.ndarray:
    """Uniform mid-tread quantiser with ``levels`` steps over [-range, range]."""
    if levels is None:
        return frames
    if levels < 2:
        raise ValueError("quantisation needs at least 2 levels")
    step = 2.0 * value_range / (levels - 1)
    clipped = np.clip(frames, -value_range, value_range)
    return np.round((clipped + value_range) / step) * step - value_range


def corrupt(utt: FeatureUtterance, spec: CorruptionSpec, seed: int) -> FeatureUtterance:
    rng = _rng(seed, 3, _stable_id(utt.utt_id))
    gain = rng.uniform(*spec.gain_range) if spec.gain_range[0] != spec.gain_range[1] \
        else spec.gain_range[0]
    x = moving_average(utt.frames.astype(np.float64), spec.smoothing_window)
    x = gain * quantize(x, spec.quant_levels, spec.quant_range)
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return utt.replace(frames=x)


def corrupt_corpus(corpus, spec: CorruptionSpec, seed: int) -> list[FeatureUtterance]:
    return [corrupt(u, spec, seed) for u in corpus]


# ---------------------------------------------------------------------------
# multi-style training perturbations
# ---------------------------------------------------------------------------

@dataclass
class PerturbSpec:
    speed_factors: tuple = (0.9, 1.1)
    volume_factors: tuple = (0.8, 1.2)

    def to_dict(self) -> dict:
        return {"speed_factors": list(self.speed_factors),
                "volume_factors": list(self.volume_factors)}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbSpec":
        return cls(tuple(d["speed_factors"]), tuple(d["volume_factors"]))


def resample_speed(utt: FeatureUtterance, factor: float) -> FeatureUtterance:
    """Linear time resampling to round(T / factor) frames; labels by nearest index."""
    if factor <= 0:
        raise ValueError("speed factor must be positive")
    t = utt.n_frames
    n = int(round(t / factor))
    if n < 2:
        raise ValueError(f"speed factor {factor} leaves {n} frames")
    if n == t:
        return utt.replace(frames=utt.frames.copy(), senone_labels=utt.senone_labels.copy())
    pos = np.arange(n) * (t - 1) / (n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = pos - lo
    frames = utt.frames[:, lo] * (1 - frac) + utt.frames[:, hi] * frac
    labels = utt.senone_labels[np.rint(pos).astype(int)]
    return utt.replace(frames=frames, senone_labels=labels)


def mtr_perturb(utt: FeatureUtterance, spec: PerturbSpec, which: str, index: int) -> FeatureUtterance:
    """Apply speed and/or volume perturbation; the factor alternates with ``index`` parity."""
    if which not in ("speed", "volume", "both"):
        raise ValueError(f"unknown perturbation {which!r}")
    out = utt
    if which in ("speed", "both"):
        out = resample_speed(out, spec.speed_factors[index % 2])
    if which in ("volume", "both"):
        factor = spec.volume_factors[index % 2]
        if factor <= 0:
            raise ValueError("volume factor must be positive")
        out = out.replace(frames=out.frames * np.float32(factor))
    suffix = {"speed": "s", "volume": "v", "both": "sv"}[which]
    return FeatureUtterance(f"{utt.utt_id}-{suffix}", out.frames, out.senone_labels, list(utt.tokens))


def mtr_corpus(corpus, spec: PerturbSpec, which: str) -> list[FeatureUtterance]:
    return [mtr_perturb(u, spec, which, i) for i, u in enumerate(corpus)]


# ---------------------------------------------------------------------------
# windowing and partitions
# ---------------------------------------------------------------------------

def context_window(frames: np.ndarray, radius: int = 5) -> np.ndarray:
    """(F, T) -> ((2r+1)F, T); column t stacks frames t-r..t+r, edges replicated."""
    f, t = frames.shape
    if t < 1:
        raise ValueError("need at least one frame")
    idx = context_index(t, radius)                 # (T, 2r+1)
    return frames[:, idx].transpose(2, 0, 1).reshape((2 * radius + 1) * f, t)


def chunk(utt: FeatureUtterance, window: int, hop: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed-length (F, W) windows with aligned labels; a trailing partial window is dropped."""
    if window < 1 or hop < 1:
        raise ValueError("window and hop must be positive")
    out = []
    for start in range(0, utt.n_frames - window + 1, hop):
        out.append((utt.frames[:, start:start + window], utt.senone_labels[start:start + window]))
    return out


def chunk_corpus(corpus, window: int, hop: int) -> tuple[np.ndarray, np.ndarray]:
    frames, labels = [], []
    for utt in corpus:
        for x, y in chunk(utt, window, hop):
            frames.append(x)
            labels.append(y)
    if not frames:
        raise ValueError(f"no utterance is at least {window} frames long")
    return np.stack(frames).astype(np.float32), np.stack(labels)


def partition_by_hours(corpus, hours: list, frames_per_hour: int = FRAMES_PER_HOUR,
                       seed: int = 0) -> list[list[FeatureUtterance]]:
    """Nested subsets: prefixes of one seeded shuffle covering each frame budget."""
    order = _rng(seed, 4).permutation(len(corpus))
    shuffled = [corpus[i] for i in order]
    cum = np.cumsum([u.n_frames for u in shuffled])
    total = int(cum[-1]) if len(cum) else 0
    parts = []
    for h in hours:
        budget = h * frames_per_hour
        if budget > total:
            raise ValueError(f"{h} hours ({budget:.0f} frames) exceeds corpus size ({total} frames)")
        n = int(np.searchsorted(cum, budget, side="left")) + 1
        parts.append(shuffled[:n])
    return parts


def n_frames(corpus) -> int:
    return int(sum(u.n_frames for u in corpus))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<H")
_DIMS = struct.Struct("<IIII")


def encode_record(utt: FeatureUtterance, n_senones: int) -> bytes:
    uid = utt.utt_id.encode("utf-8")
    f, t = utt.frames.shape
    parts = [
        _HEADER.pack(len(uid)), uid,
        _DIMS.pack(f, t, n_senones, len(utt.tokens)),
        np.ascontiguousarray(utt.frames, dtype="<f4").tobytes(),
        np.asarray(utt.senone_labels, dtype="<u2").tobytes(),
        np.asarray(utt.tokens, dtype="<u2").tobytes(),
    ]
    return b"".join(parts)


def decode_records(blob: bytes) -> list[FeatureUtterance]:
    out, pos = [], 0
    while pos < len(blob):
        (n,) = _HEADER.unpack_from(blob, pos)
        pos += _HEADER.size
        uid = blob[pos:pos + n].decode("utf-8")
        pos += n
        f, t, _, n_tok = _DIMS.unpack_from(blob, pos)
        pos += _DIMS.size
        frames = np.frombuffer(blob, dtype="<f4", count=f * t, offset=pos).reshape(f, t)
        pos += 4 * f * t
        labels = np.frombuffer(blob, dtype="<u2", count=t, offset=pos).astype(np.int64)
        pos += 2 * t
        tokens = np.frombuffer(blob, dtype="<u2", count=n_tok, offset=pos).astype(int).tolist()
        pos += 2 * n_tok
        out.append(FeatureUtterance(uid, frames.astype(np.float32), labels, tokens))
    return out


def write_corpus(path, corpus, n_senones: int) -> None:
    Path(path).write_bytes(b"".join(encode_record(u, n_senones) for u in corpus))


def read_corpus(path) -> list[FeatureUtterance]:
    return decode_records(Path(path).read_bytes())


def write_manifest(path, manifest: CorpusManifest, extra: dict | None = None) -> None:
    lexicon = build_lexicon(manifest)
    doc = {"manifest": manifest.to_dict(), "token_senones": lexicon.token_senones}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[CorpusManifest, dict]:
    doc = json.loads(Path(path).read_text())
    return CorpusManifest.from_dict(doc["manifest"]), doc


def utterance_csv(columns: dict[str, np.ndarray]) -> str:
    """CSV with one row per frame; each (F, T) block contributes F columns."""
    names, blocks = [], []
    for label, frames in columns.items():
        names += [f"{label}_{i}" for i in range(frames.shape[0])]
        blocks.append(frames)
    data = np.concatenate(blocks, axis=0).T
    lines = [",".join(names)]
    lines += [",".join(repr(float(v)) for v in row) for row in data]
    return "\n".join(lines) + "\n"
