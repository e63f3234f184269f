"""Generators, discriminators and the MLP acoustic model.

All convolutional networks treat the feature dimension as channels and
convolve along time, so a (F, T) utterance maps to a (F, T) output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .autodiff import Tensor, no_grad, reshape, take
from .nn import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dropout,
    Linear,
    Module,
    SNLinear,
)

LEAKY_SLOPE = 0.2
IDENTITY_JITTER = 0.01
ED_ENCODER_KERNELS = (7, 7, 5, 5, 3)
ED_DECODER_KERNELS = (4, 5, 6, 6, 6)
ED_MULTIPLE = 2 ** len(ED_ENCODER_KERNELS)


@dataclass
class GeneratorSpec:
    kind: str = "fully-convolutional"
    feature_dim: int = 16
    channels: list = field(default_factory=list)
    init: str = "random"        # or "identity" (fully-convolutional only)

    def resolved_channels(self) -> list:
        if self.channels:
            return list(self.channels)
        f = self.feature_dim
        if self.kind == "fully-convolutional":
            return [2 * f] * 4
        return [2 * f, 2 * f, 4 * f, 4 * f, 4 * f]


@dataclass
class DiscriminatorSpec:
    kind: str = "compact"
    feature_dim: int = 16
    window: int = 32
    channels: list = field(default_factory=list)
    dropout: float | None = None

    def resolved_channels(self) -> list:
        if self.channels:
            return list(self.channels)
        f = self.feature_dim
        if self.kind == "compact":
            return [2 * f, 2 * f, 4 * f, 4 * f]
        return [2 * f, 2 * f, 2 * f, 2 * f, 4 * f, 4 * f, 4 * f, 4 * f]

    def resolved_dropout(self) -> float:
        if self.dropout is not None:
            return self.dropout
        return 0.25 if self.kind == "compact" else 0.3


@dataclass
class AcousticModelSpec:
    feature_dim: int = 16
    n_senones: int = 48
    hidden_layers: int = 5
    hidden_units: int = 128
    context_radius: int = 5
    dropout: float = 0.15

    @classmethod
    def paper_scale(cls, feature_dim: int, n_senones: int) -> "AcousticModelSpec":
        return cls(feature_dim=feature_dim, n_senones=n_senones, hidden_units=1024)

    @property
    def input_dim(self) -> int:
        return (2 * self.context_radius + 1) * self.feature_dim


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

class FCGenerator(Module):
    """Five same-length convolutions (kernel 5), leaky ReLU on the first four."""

    def __init__(self, spec: GeneratorSpec, seed: int = 0):
        super().__init__()
        if spec.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        rng = np.random.default_rng(seed)
        widths = [spec.feature_dim] + spec.resolved_channels() + [spec.feature_dim]
        if len(widths) != 6:
            raise ValueError("fully-convolutional generator needs 4 hidden widths")
        self.spec = spec
        self.layers = [Conv1d(widths[i], widths[i + 1], 5, padding=2, rng=rng) for i in range(5)]
        if spec.init == "identity":
            self._identity_init(IDENTITY_JITTER)
        elif spec.init != "random":
            raise ValueError(f"unknown generator init {spec.init!r}")

    def _identity_init(self, jitter: float) -> None:
        """Start as the identity map plus a small copy of the random init.

        Each hidden layer carries x as the pair (lrelu(x), lrelu(-x)); since
        lrelu(x) - lrelu(-x) = (1 + slope) x, the next layer can rebuild x
        exactly, so the first 2F channels of every hidden layer hold the signal.
        """
        f = self.spec.feature_dim
        if min(self.spec.resolved_channels()) < 2 * f:
            raise ValueError("identity init needs every hidden width >= 2 * feature_dim")
        eye = np.eye(f)
        split = np.concatenate([eye, -eye])                              # (2F, F)
        merge = np.concatenate([eye, -eye], axis=1) / (1 + LEAKY_SLOPE)   # (F, 2F)
        centre = 2
        blocks = [split] + [split @ merge] * 3 + [merge]
        for layer, block in zip(self.layers, blocks):
            w = layer.weight.data * np.float32(jitter)
            w[:block.shape[0], :block.shape[1], centre] += block.astype(np.float32)
            layer.weight.data = w
            layer.bias.data = layer.bias.data * np.float32(jitter)

    def forward(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < 4:
                h = F.leaky_relu(h, LEAKY_SLOPE)
        return h


def reflect_index(t: int, before: int, after: int) -> np.ndarray:
    """Indices of a reflect-padded axis; bounces repeatedly when the padding exceeds T-1."""
    pos = np.arange(-before, t + after)
    if t == 1:
        return np.zeros_like(pos)
    period = 2 * (t - 1)
    pos = np.mod(pos, period)
    return np.where(pos < t, pos, period - pos)


class EDGenerator(Module):
    """U-Net style encoder-decoder with channel-concatenating skip connections.

    Encoder: five stride-2 convolutions (kernels 7, 7, 5, 5, 3), ReLU.
    Decoder: five stride-2 transposed convolutions (kernels 4, 5, 6, 6, 6).
    Each transposed-conv output is centre-cropped to the length of the matching
    encoder output and concatenated with it before the next decoder layer.
    Inputs are reflect-padded to a multiple of 32 frames and cropped back.
    """

    def __init__(self, spec: GeneratorSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        enc = spec.resolved_channels()
        if len(enc) != 5:
            raise ValueError("encoder-decoder generator needs 5 encoder widths")
        if spec.init != "random":
            raise ValueError("the encoder-decoder generator supports only random init")
        f = spec.feature_dim
        self.spec = spec
        ins = [f] + enc[:-1]
        self.encoder = [Conv1d(ins[i], enc[i], k, stride=2, padding=k // 2, rng=rng)
                        for i, k in enumerate(ED_ENCODER_KERNELS)]
        outs = [enc[3], enc[2], enc[1], enc[0], f]
        dec_in = [enc[4]] + [outs[i - 1] + enc[4 - i] for i in range(1, 5)]
        self.decoder = [ConvTranspose1d(dec_in[i], outs[i], k, stride=2, rng=rng)
                        for i, k in enumerate(ED_DECODER_KERNELS)]

    def decoder_input_channels(self) -> list:
        return [layer.weight.shape[0] for layer in self.decoder]

    def encoder_lengths(self, t: int) -> list:
        lengths = []
        for layer in self.encoder:
            k = layer.weight.shape[2]
            t = (t + 2 * layer.padding - k) // layer.stride + 1
            lengths.append(t)
        return lengths

    def forward(self, x):
        x, squeeze = F._batched(x if isinstance(x, Tensor) else Tensor(x))
        t = x.shape[-1]
        padded = -(-t // ED_MULTIPLE) * ED_MULTIPLE
        before = (padded - t) // 2
        if padded != t:
            x = take(x, reflect_index(t, before, padded - t - before))
        skips = []
        h = x
        for layer in self.encoder:
            h = F.relu(layer(h))
            skips.append(h)
        targets = [s.shape[-1] for s in skips[:-1]][::-1] + [padded]
        for i, layer in enumerate(self.decoder):
            h = layer(h)
            h = _center(h, targets[i])
            if i < 4:
                h = F.relu(h)
                h = F.concat([h, skips[3 - i]], axis=1)
        if padded != t:
            h = F.crop(h, -1, before, before + t)
        return reshape(h, h.shape[1:]) if squeeze else h


def _center(x: Tensor, length: int) -> Tensor:
    if x.shape[-1] < length:
        raise RuntimeError(f"decoder output {x.shape[-1]} shorter than skip length {length}")
    start = (x.shape[-1] - length) // 2
    return F.crop(x, -1, start, start + length)


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

class _ConvDiscriminator(Module):
    def __init__(self, spec: DiscriminatorSpec, kernels, pool_after, n_dropout, seed):
        super().__init__()
        rng = np.random.default_rng(seed)
        widths = [spec.feature_dim] + spec.resolved_channels()
        if len(widths) - 1 != len(kernels):
            raise ValueError(f"{spec.kind} discriminator needs {len(kernels)} channel widths")
        self.spec = spec
        self.convs = [Conv1d(widths[i], widths[i + 1], k, padding=k // 2, rng=rng)
                      for i, k in enumerate(kernels)]
        p = spec.resolved_dropout()
        self.drops = [Dropout(p, np.random.default_rng(seed + 7919 + i)) for i in range(n_dropout)]
        self.pool_after = tuple(pool_after)
        length = spec.window
        for i in range(len(kernels)):
            if i in self.pool_after:
                if length < 2:
                    raise ValueError(f"window {spec.window} too small for the pooling pyramid")
                length //= 2
        self.pooled_length = length
        self.head = SNLinear(widths[-1] * length, 1, rng=rng)

    def features(self, x):
        h = x
        for i, conv in enumerate(self.convs):
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            if i < len(self.drops):
                h = self.drops[i](h)
            if i in self.pool_after:
                h = F.maxpool1d(h, 2)
        return h

    def forward(self, x):
        x, _ = F._batched(x if isinstance(x, Tensor) else Tensor(x))
        if x.shape[-1] != self.spec.window:
            raise ValueError(f"discriminator expects windows of {self.spec.window} frames, got {x.shape[-1]}")
        h = self.features(x)
        h = reshape(h, (h.shape[0], -1))
        return reshape(F.sigmoid(self.head(h)), (h.shape[0],))


class LargeDiscriminator(_ConvDiscriminator):
    """Eight convolutions (kernel 41 then 13), max-pool after every second layer."""

    def __init__(self, spec: DiscriminatorSpec, seed: int = 0):
        if spec.window < 16:
            raise ValueError("large discriminator needs windows of at least 16 frames")
        super().__init__(spec, (41,) + (13,) * 7, (1, 3, 5, 7), 2, seed)


class CompactDiscriminator(_ConvDiscriminator):
    """Four kernel-5 convolutions, each followed by max-pooling."""

    def __init__(self, spec: DiscriminatorSpec, seed: int = 0):
        if spec.window < 16:
            raise ValueError("compact discriminator needs windows of at least 16 frames")
        super().__init__(spec, (5, 5, 5, 5), (0, 1, 2, 3), 3, seed)


# ---------------------------------------------------------------------------
# acoustic model
# ---------------------------------------------------------------------------

class AcousticModel(Module):
    """MLP over an 11-frame context splice: Linear -> BatchNorm -> ReLU -> Dropout."""

    def __init__(self, spec: AcousticModelSpec, seed: int = 0):
        super().__init__()
        if spec.n_senones < 2:
            raise ValueError("need at least two senones")
        rng = np.random.default_rng(seed)
        self.spec = spec
        dims = [spec.input_dim] + [spec.hidden_units] * spec.hidden_layers
        self.hidden = [Linear(dims[i], dims[i + 1], rng) for i in range(spec.hidden_layers)]
        self.norms = [BatchNorm1d(spec.hidden_units) for _ in range(spec.hidden_layers)]
        self.drops = [Dropout(spec.dropout, np.random.default_rng(seed + 104729 + i))
                      for i in range(spec.hidden_layers)]
        self.out = Linear(dims[-1], spec.n_senones, rng)

    def forward(self, rows):
        h = rows
        for lin, bn, drop in zip(self.hidden, self.norms, self.drops):
            h = drop(F.relu(bn(lin(h))))
        return F.log_softmax(self.out(h), axis=-1)

    def frame_log_probs(self, frames) -> Tensor:
        """(F, T) or (B, F, T) frames -> (B*T, C) log-probabilities."""
        return self.forward(F.context_splice(frames, self.spec.context_radius))


# ---------------------------------------------------------------------------
# builders and descriptors
# ---------------------------------------------------------------------------

def build_fc_generator(spec: GeneratorSpec, seed: int = 0) -> FCGenerator:
    return FCGenerator(spec, seed)


def build_ed_generator(spec: GeneratorSpec, seed: int = 0) -> EDGenerator:
    return EDGenerator(spec, seed)


def build_large_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> LargeDiscriminator:
    return LargeDiscriminator(spec, seed)


def build_compact_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> CompactDiscriminator:
    return CompactDiscriminator(spec, seed)


def build_acoustic_model(spec: AcousticModelSpec, seed: int = 0) -> AcousticModel:
    return AcousticModel(spec, seed)


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Module:
    if spec.kind == "fully-convolutional":
        return FCGenerator(spec, seed)
    if spec.kind == "encoder-decoder":
        return EDGenerator(spec, seed)
    raise ValueError(f"unknown generator kind {spec.kind!r}")


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Module:
    if spec.kind == "compact":
        return CompactDiscriminator(spec, seed)
    if spec.kind == "large":
        return LargeDiscriminator(spec, seed)
    raise ValueError(f"unknown discriminator kind {spec.kind!r}")


_ROLES = {
    "generator": (GeneratorSpec, build_generator),
    "discriminator": (DiscriminatorSpec, build_discriminator),
    "acoustic_model": (AcousticModelSpec, build_acoustic_model),
}


def describe(net: Module) -> dict:
    """Architecture descriptor: role plus the spec fields."""
    spec = net.spec
    role = {GeneratorSpec: "generator", DiscriminatorSpec: "discriminator",
            AcousticModelSpec: "acoustic_model"}[type(spec)]
    return {"role": role, **asdict(spec)}


def build_from_descriptor(desc: dict, seed: int = 0) -> Module:
    desc = dict(desc)
    spec_cls, builder = _ROLES[desc.pop("role")]
    return builder(spec_cls(**desc), seed)


def enhance(generator: Module | None, frames: np.ndarray) -> np.ndarray:
    """Run the generator on one (F, T) utterance in eval mode; None means identity."""
    frames = np.asarray(frames, dtype=np.float32)
    if generator is None:
        return frames
    was_training = generator.training
    generator.eval()
    try:
        with no_grad():
            return generator(Tensor(frames)).data
    finally:
        generator.train(was_training)
