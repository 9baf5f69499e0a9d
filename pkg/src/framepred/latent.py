"""Stochastic latent machinery: factorized categorical posterior/prior heads,
straight-through sampling, and KL divergence with gradient balancing.

The latent is a set of G independent categorical variables with C classes
each. Sampling uses inverse-CDF draws on per-group uniforms so results are
reproducible across platforms from a named generator stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .videodata import ConfigurationError


@dataclass
class FactorizedCategorical:
    """Logits [..., G, C] for G independent categorical groups."""

    logits: torch.Tensor

    @property
    def groups(self) -> int:
        return self.logits.shape[-2]

    @property
    def classes(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=-1)

    def log_probs(self) -> torch.Tensor:
        return F.log_softmax(self.logits, dim=-1)

    def entropy(self) -> torch.Tensor:
        """Summed over groups."""
        lp = self.log_probs()
        return -(lp.exp() * lp).sum(dim=(-1, -2))


def kl_categorical(q: FactorizedCategorical, p: FactorizedCategorical,
                   per_group: bool = False) -> torch.Tensor:
    """Plain KL(q || p), summed over groups (and classes)."""
    if q.logits.shape != p.logits.shape:
        raise ConfigurationError("posterior/prior logit shape mismatch")
    lq, lp = q.log_probs(), p.log_probs()
    kl = (lq.exp() * (lq - lp)).sum(dim=-1)
    return kl if per_group else kl.sum(dim=-1)


def kl_balanced(q: FactorizedCategorical, p: FactorizedCategorical,
                alpha: float = 0.8) -> torch.Tensor:
    """KL(q || p) whose value is the plain KL but whose gradient is split:
    a fraction ``alpha`` trains the prior toward a frozen posterior and the
    rest trains the posterior toward a frozen prior."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigurationError(f"alpha {alpha} outside [0, 1]")
    q_sg = FactorizedCategorical(q.logits.detach())
    p_sg = FactorizedCategorical(p.logits.detach())
    return (alpha * kl_categorical(q_sg, p)
            + (1.0 - alpha) * kl_categorical(q, p_sg))


def sample_straight_through(dist: FactorizedCategorical,
                            generator: torch.Generator) -> torch.Tensor:
    """One-hot sample [..., G, C]; forward value is the categorical draw,
    backward behaves as if the output were the softmax probabilities."""
    probs = dist.probs()
    shape = probs.shape[:-1] + (1,)
    u = torch.rand(shape, generator=generator, device=probs.device,
                   dtype=probs.dtype)
    cdf = probs.detach().cumsum(dim=-1)
    idx = (u > cdf).sum(dim=-1, keepdim=True).clamp_max(probs.shape[-1] - 1)
    one_hot = torch.zeros_like(probs)
    one_hot.scatter_(-1, idx, 1.0)
    # Parenthesized so the forward value is exactly the one-hot; the
    # difference is identically zero but carries the probs gradient.
    return one_hot + (probs - probs.detach())


def expected_value(dist: FactorizedCategorical) -> torch.Tensor:
    """Differentiable surrogate used by gradient checks: the softmax
    probabilities in place of a discrete draw."""
    return dist.probs()


class CategoricalHeads(nn.Module):
    """Two small 2-layer MLPs: the posterior consumes both frames' CLS
    vectors concatenated, the prior consumes only the current frame's CLS.
    The prior's final layer is zero-initialized so it starts uniform; the
    posterior keeps a random init so its output is pair-dependent from the
    start (a uniform-for-every-pair posterior emits pure-noise samples and
    the decoder learns to ignore the latent before it becomes useful)."""

    def __init__(self, input_dim: int, groups: int = 32, classes: int = 32,
                 hidden_dim: int | None = None):
        super().__init__()
        self.groups = groups
        self.classes = classes
        h = hidden_dim or input_dim
        out = groups * classes
        self.posterior_mlp = nn.Sequential(
            nn.Linear(2 * input_dim, h), nn.GELU(), nn.Linear(h, out)
        )
        self.prior_mlp = nn.Sequential(
            nn.Linear(input_dim, h), nn.GELU(), nn.Linear(h, out)
        )
        nn.init.zeros_(self.prior_mlp[-1].weight)
        nn.init.zeros_(self.prior_mlp[-1].bias)

    @property
    def flat_dim(self) -> int:
        return self.groups * self.classes

    def posterior(self, cls_t: torch.Tensor, cls_tk: torch.Tensor
                  ) -> FactorizedCategorical:
        if cls_t.shape != cls_tk.shape:
            raise ConfigurationError("CLS vector shape mismatch")
        x = torch.cat([cls_t, cls_tk], dim=-1)
        logits = self.posterior_mlp(x)
        return FactorizedCategorical(
            logits.reshape(*logits.shape[:-1], self.groups, self.classes)
        )

    def prior(self, cls_t: torch.Tensor) -> FactorizedCategorical:
        logits = self.prior_mlp(cls_t)
        return FactorizedCategorical(
            logits.reshape(*logits.shape[:-1], self.groups, self.classes)
        )


# ---------------------------------------------------------------------------
# Diagonal-Gaussian ablation variant
# ---------------------------------------------------------------------------

@dataclass
class DiagonalGaussian:
    mean: torch.Tensor
    log_std: torch.Tensor

    def rsample(self, generator: torch.Generator) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator,
                          device=self.mean.device, dtype=self.mean.dtype)
        return self.mean + eps * self.log_std.exp()

    def entropy(self) -> torch.Tensor:
        import math
        return (self.log_std + 0.5 * math.log(2 * math.pi * math.e)).sum(dim=-1)


def kl_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL between diagonal Gaussians, summed over dims."""
    var_q = (2 * q.log_std).exp()
    var_p = (2 * p.log_std).exp()
    kl = (p.log_std - q.log_std
          + (var_q + (q.mean - p.mean) ** 2) / (2 * var_p) - 0.5)
    return kl.sum(dim=-1)


def kl_gaussian_balanced(q: DiagonalGaussian, p: DiagonalGaussian,
                         alpha: float = 0.8) -> torch.Tensor:
    q_sg = DiagonalGaussian(q.mean.detach(), q.log_std.detach())
    p_sg = DiagonalGaussian(p.mean.detach(), p.log_std.detach())
    return alpha * kl_gaussian(q_sg, p) + (1.0 - alpha) * kl_gaussian(q, p_sg)


class GaussianHeads(nn.Module):
    """Ablation heads emitting (mean, log-std) of a diagonal Gaussian with
    the same flat latent dimensionality as the categorical default."""

    LOG_STD_RANGE = (-5.0, 2.0)

    def __init__(self, input_dim: int, latent_dim: int,
                 hidden_dim: int | None = None):
        super().__init__()
        self.latent_dim = latent_dim
        h = hidden_dim or input_dim
        self.posterior_mlp = nn.Sequential(
            nn.Linear(2 * input_dim, h), nn.GELU(), nn.Linear(h, 2 * latent_dim)
        )
        self.prior_mlp = nn.Sequential(
            nn.Linear(input_dim, h), nn.GELU(), nn.Linear(h, 2 * latent_dim)
        )
        nn.init.zeros_(self.prior_mlp[-1].weight)
        nn.init.zeros_(self.prior_mlp[-1].bias)

    @property
    def flat_dim(self) -> int:
        return self.latent_dim

    def _split(self, out: torch.Tensor) -> DiagonalGaussian:
        mean, log_std = out.chunk(2, dim=-1)
        lo, hi = self.LOG_STD_RANGE
        return DiagonalGaussian(mean, log_std.clamp(lo, hi))

    def posterior(self, cls_t: torch.Tensor, cls_tk: torch.Tensor) -> DiagonalGaussian:
        if cls_t.shape != cls_tk.shape:
            raise ConfigurationError("CLS vector shape mismatch")
        return self._split(self.posterior_mlp(torch.cat([cls_t, cls_tk], dim=-1)))

    def prior(self, cls_t: torch.Tensor) -> DiagonalGaussian:
        return self._split(self.prior_mlp(cls_t))
