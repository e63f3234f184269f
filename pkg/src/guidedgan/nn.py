"""Layers, spectral normalisation, optimizers, LR schedule and early stopping."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .autodiff import DTYPE, Tensor, matmul, power, reshape, transpose, tsum


class Module:
    """Container of parameters (Tensors with ``requires_grad``), buffers and sub-modules."""

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif value.node_id is not None or value.requires_grad:
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=DTYPE)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True)


def state_hash(module: Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = parameter(_uniform(rng, (c_out, c_in, kernel), bound))
        self.bias = parameter(_uniform(rng, (c_out,), bound))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(c_out * kernel)
        self.weight = parameter(_uniform(rng, (c_in, c_out, kernel), bound))
        self.bias = parameter(_uniform(rng, (c_out,), bound))
        self.stride = stride

    def forward(self, x):
        return F.conv1d_transposed(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(n_in)
        self.weight = parameter(_uniform(rng, (n_out, n_in), bound))
        self.bias = parameter(_uniform(rng, (n_out,), bound))

    def forward(self, x):
        return F.affine(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = parameter(np.ones(n))
        self.shift = parameter(np.zeros(n))
        self._buffers["running_mean"] = np.zeros(n, dtype=DTYPE)
        self._buffers["running_var"] = np.ones(n, dtype=DTYPE)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return F.batchnorm1d(x, self.gain, self.shift, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._rng = rng

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self._rng)


# ---------------------------------------------------------------------------
# spectral normalisation
# ---------------------------------------------------------------------------

@dataclass
class SpectralNormState:
    u: np.ndarray
    n_iter: int = 1
    eps: float = 1e-12
    sigma: float = float("nan")

    @classmethod
    def random(cls, n_out: int, rng: np.random.Generator, n_iter: int = 1) -> "SpectralNormState":
        u = rng.standard_normal(n_out)
        return cls(u=u / np.linalg.norm(u), n_iter=n_iter)


def spectral_normalize(weight: Tensor, state: SpectralNormState, n_iter: int | None = None,
                       update: bool = True) -> Tensor:
    """Return ``weight / sigma`` with sigma from power iteration on the (out, rest) view.

    ``u`` is carried across calls in ``state`` and enters as a constant; the
    iteration itself is recorded, so the backward pass is the exact derivative
    of the normalised weight for that starting ``u``.
    """
    steps = state.n_iter if n_iter is None else n_iter
    if steps < 1:
        raise ValueError("spectral normalisation needs at least one power iteration")
    w = reshape(weight, (weight.shape[0], -1))
    wt = transpose(w)
    u = Tensor(state.u.reshape(-1, 1))
    tiny = state.eps ** 2
    for _ in range(steps):
        wv = matmul(wt, u)
        v = wv * power(tsum(wv * wv) + tiny, -0.5)
        wu = matmul(w, v)
        u = wu * power(tsum(wu * wu) + tiny, -0.5)
    sigma = tsum(u * matmul(w, v))
    if update:
        state.u = u.data.reshape(-1).astype(np.float64)
        state.sigma = float(sigma.data)
    return weight * power(sigma, -1.0)


class SNLinear(Linear):
    """Linear layer whose weight is spectrally normalised on every forward pass.

    The power iteration advances only in training mode.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 n_iter: int = 1):
        rng = rng or np.random.default_rng(0)
        super().__init__(n_in, n_out, rng)
        self.sn = SpectralNormState.random(n_out, rng, n_iter)
        self._buffers["sn_u"] = self.sn.u.astype(DTYPE)

    def forward(self, x):
        self.sn.u = self._buffers["sn_u"]
        w = spectral_normalize(self.weight, self.sn, update=self.training)
        self._buffers["sn_u"][...] = self.sn.u
        return F.affine(x, w, self.bias)


# ---------------------------------------------------------------------------
# optimizers and schedules
# ---------------------------------------------------------------------------

def _check_finite(grads: Sequence[np.ndarray]) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; optimizer step aborted")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    _check_finite(grads)
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"sgd_step: parameter {p.shape} vs gradient {g.shape}")
        p -= np.asarray(lr * g, dtype=p.dtype)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """In-place Adam update with bias correction."""
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]


class SGD(Optimizer):
    def step(self) -> None:
        sgd_step([p.data for p in self.params], self._grads(), self.lr)


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step([p.data for p in self.params], self._grads(), self.state, self.lr)


@dataclass
class PlateauScheduler:
    """Halve the learning rate when the relative dev improvement drops below a threshold."""

    lr: float
    factor: float = 0.5
    threshold: float = 0.001
    best: float | None = None

    def update(self, metric: float) -> float:
        if metric < 0:
            raise ValueError("plateau metric must be non-negative")
        if self.best is None:
            self.best = metric
            return self.lr
        improvement = (self.best - metric) / self.best if self.best > 0 else 0.0
        if improvement < self.threshold:
            self.lr *= self.factor
        self.best = min(self.best, metric)
        return self.lr


def plateau_update(sched: PlateauScheduler, metric: float) -> float:
    return sched.update(metric)


@dataclass
class EarlyStopper:
    patience: int = 10
    best_metric: float = float("inf")
    best_ref: object = None
    bad_epochs: int = 0

    def update(self, metric: float, ref=None) -> str:
        if metric < self.best_metric:
            self.best_metric, self.best_ref, self.bad_epochs = metric, ref, 0
        else:
            self.bad_epochs += 1
        return "stop" if self.bad_epochs >= self.patience else "continue"


def early_stop_update(stopper: EarlyStopper, metric: float, ref=None) -> str:
    return stopper.update(metric, ref)
