"""Adversarial losses with acoustic-model guidance and the WGAN gradient penalty."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, _wrap, grad, log, mul, sqrt, tsum
from .functional import nll_loss

FAMILIES = ("SN-GAN", "NS-GAN", "WGAN-GP")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    family: str = "SN-GAN"
    guidance_weight: float = 1.0      # lambda
    gp_weight: float = 10.0           # lambda_gp, WGAN-GP only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LossConfigError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        if self.guidance_weight < 0:
            raise LossConfigError("guidance weight must be >= 0")
        if self.gp_weight < 0:
            raise LossConfigError("gradient-penalty weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_open_unit(d: Tensor, name: str) -> None:
    if np.any(d.data <= 0) or np.any(d.data >= 1):
        raise ValueError(f"{name} must lie strictly inside (0, 1) for the NS-GAN loss")


def adversarial_generator_term(cfg: LossConfig, d_fake) -> Tensor:
    d_fake = _wrap(d_fake)
    if cfg.family == "NS-GAN":
        if np.any(d_fake.data <= 0):
            raise ValueError("NS-GAN generator loss needs d_fake > 0")
        return -log(d_fake).mean()
    return -d_fake.mean()


def generator_loss(cfg: LossConfig, d_fake, am_log_probs=None, labels=None) -> Tensor:
    """Adversarial term plus ``lambda`` times the frozen acoustic model's NLL.

    SN-GAN and WGAN-GP: ``-mean(D(x_hat)) + lambda * NLL``.
    NS-GAN: ``-mean(log D(x_hat)) + lambda * NLL``.
    The NLL averages over every frame of the batch.
    """
    adv = adversarial_generator_term(cfg, d_fake)
    if cfg.guidance_weight == 0 or am_log_probs is None:
        return adv
    return adv + mul(nll_loss(am_log_probs, labels), cfg.guidance_weight)


def discriminator_loss(cfg: LossConfig, d_real, d_fake) -> Tensor:
    d_real, d_fake = _wrap(d_real), _wrap(d_fake)
    if cfg.family == "NS-GAN":
        _check_open_unit(d_real, "d_real")
        _check_open_unit(d_fake, "d_fake")
        return -log(d_real).mean() - log(1.0 - d_fake).mean()
    return -d_real.mean() + d_fake.mean()


def gradient_penalty(discriminator, x_clean: np.ndarray, x_fake: np.ndarray,
                     rng: np.random.Generator) -> Tensor:
    """``mean((||grad_x D(x_interp)||_2 - 1)^2)`` with one uniform alpha per sample.

    The input-gradient is recorded on the graph, so the result is differentiable
    with respect to the discriminator's parameters.
    """
    x_clean = np.asarray(getattr(x_clean, "data", x_clean), dtype=np.float32)
    x_fake = np.asarray(getattr(x_fake, "data", x_fake), dtype=np.float32)
    if x_clean.shape != x_fake.shape:
        raise ValueError(f"shape mismatch {x_clean.shape} vs {x_fake.shape}")
    alpha = rng.uniform(size=(x_clean.shape[0],) + (1,) * (x_clean.ndim - 1))
    interp = Tensor(alpha * x_clean + (1.0 - alpha) * x_fake, requires_grad=True)
    d = discriminator(interp)
    (g,) = grad(tsum(d), [interp], create_graph=True)
    axes = tuple(range(1, g.ndim))
    norms = sqrt(tsum(g * g, axis=axes) + 1e-12)
    return ((norms - 1.0) * (norms - 1.0)).mean()


def total_discriminator_loss(cfg: LossConfig, d_real, d_fake, penalty=None) -> Tensor:
    base = discriminator_loss(cfg, d_real, d_fake)
    if cfg.family != "WGAN-GP":
        if penalty is not None:
            raise LossConfigError(f"gradient penalty supplied for {cfg.family}")
        return base
    if penalty is None or cfg.gp_weight == 0:
        return base
    return base + mul(penalty, cfg.gp_weight)
