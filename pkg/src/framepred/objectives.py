"""Training objective: stochastic frame-prediction reconstruction loss,
balanced KL with scale ``kl_scale``, and a masked-autoencoding loss on masked
patches only, combined into a single total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import latent as lat
from .model import StochasticFramePredictor
from .videodata import ConfigurationError, FramePair, normalize_patches, patchify
from .vit import MaskPlan


class UndefinedLossError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    kl_scale: float = 0.01
    kl_alpha: float = 0.8
    mask_ratio: float = 0.75
    future_aug: str = "noise"      # none | noise | mask (input-side augmentation)
    future_mask_ratio: float = 0.75
    latent_forward: str = "sample"  # sample | expected (smooth surrogate)
    # "balanced" splits the KL gradient between posterior and prior via
    # detached copies, so autograd deliberately differs from the derivative
    # of the forward value; "plain" keeps them equal (for gradient checks).
    kl_gradient: str = "balanced"   # balanced | plain

    def __post_init__(self):
        if self.future_aug not in ("none", "noise", "mask"):
            raise ConfigurationError(f"unknown future_aug {self.future_aug!r}")
        if self.latent_forward not in ("sample", "expected"):
            raise ConfigurationError(
                f"unknown latent_forward {self.latent_forward!r}"
            )
        if self.kl_gradient not in ("balanced", "plain"):
            raise ConfigurationError(
                f"unknown kl_gradient {self.kl_gradient!r}"
            )


@dataclass
class PairBatch:
    current: torch.Tensor           # [B, C, H, W]
    future_clean: torch.Tensor      # [B, C, H, W]
    future_perturbed: torch.Tensor  # [B, C, H, W]


def collate_pairs(pairs: list[FramePair], dtype: torch.dtype = torch.float32
                  ) -> PairBatch:
    def stack(attr):
        return torch.from_numpy(
            np.stack([getattr(p, attr) for p in pairs])
        ).to(dtype)

    return PairBatch(current=stack("current"),
                     future_clean=stack("future_clean"),
                     future_perturbed=stack("future_perturbed"))


@dataclass
class LossBreakdown:
    prediction: torch.Tensor
    kl: torch.Tensor
    mae: torch.Tensor
    total: torch.Tensor
    diagnostics: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        out = {"prediction": float(self.prediction.detach()),
               "kl": float(self.kl.detach()),
               "mae": float(self.mae.detach()),
               "total": float(self.total.detach())}
        for k, v in self.diagnostics.items():
            out[k] = v.tolist() if isinstance(v, (torch.Tensor, np.ndarray)) else v
        return out


def frame_prediction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all patch elements."""
    if pred.shape != target.shape:
        raise ConfigurationError(
            f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}"
        )
    return ((pred - target) ** 2).mean()


def mae_loss(pred: torch.Tensor, target: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Per-patch MSE averaged over masked patches only."""
    if pred.shape != target.shape:
        raise ConfigurationError("prediction/target shape mismatch")
    mask = plan.mask.to(pred.device)
    if mask.shape != pred.shape[:-1]:
        raise ConfigurationError("mask plan inconsistent with prediction shape")
    if int(mask.sum()) == 0:
        raise UndefinedLossError("mae_loss undefined with an empty mask")
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    m = mask.to(per_patch.dtype)
    return (per_patch * m).sum() / m.sum()


def normalized_patch_target(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    return normalize_patches(patchify(frames, patch_size)).patches


def total_loss(model: StochasticFramePredictor, batch: PairBatch,
               cfg: ObjectiveConfig, mask_generator: torch.Generator,
               latent_generator: torch.Generator) -> LossBreakdown:
    """Single training objective evaluation.

    Dataflow: encode the current frame and the (perturbed) future frame;
    posterior from both CLS vectors, prior from the current CLS alone; sample
    the latent from the posterior with straight-through gradients; decode the
    future from the current-frame tokens plus the latent; the auxiliary MAE
    branch masks the clean future frame and decodes from the restored tokens.
    """
    mcfg = model.cfg
    p = mcfg.encoder.patch_size
    h1 = model.encoder(batch.current)
    target = normalized_patch_target(batch.future_clean, p).detach()

    diagnostics: dict = {}
    zero = torch.zeros((), dtype=h1.dtype, device=h1.device)

    if mcfg.deterministic:
        pred = model.decoder.forward_deterministic(h1)
        kl = zero
    else:
        if cfg.future_aug == "mask":
            h2, _ = model.encoder.forward_masked(
                batch.future_clean, cfg.future_mask_ratio, mask_generator
            )
        else:
            # "noise" perturbation is already baked into future_perturbed;
            # "none" keeps it equal to future_clean.
            h2 = model.encoder(batch.future_perturbed)
        cls1, cls2 = h1[:, 0], h2[:, 0]
        post = model.heads.posterior(cls1, cls2)
        prior = model.heads.prior(cls1)
        if mcfg.latent_kind == "categorical":
            if cfg.latent_forward == "expected":
                z = lat.expected_value(post)
            else:
                z = lat.sample_straight_through(post, latent_generator)
            z_flat = z.reshape(z.shape[0], -1)
            if cfg.kl_gradient == "plain":
                kl = lat.kl_categorical(post, prior).mean()
            else:
                kl = lat.kl_balanced(post, prior, cfg.kl_alpha).mean()
            diagnostics["posterior_entropy"] = float(post.entropy().mean().detach())
            diagnostics["prior_entropy"] = float(prior.entropy().mean().detach())
            diagnostics["per_group_kl"] = (
                lat.kl_categorical(post, prior, per_group=True)
                .mean(dim=0).detach().tolist()
            )
        else:
            z_flat = post.rsample(latent_generator)
            if cfg.kl_gradient == "plain":
                kl = lat.kl_gaussian(post, prior).mean()
            else:
                kl = lat.kl_gaussian_balanced(post, prior, cfg.kl_alpha).mean()
            diagnostics["posterior_entropy"] = float(post.entropy().mean().detach())
            diagnostics["prior_entropy"] = float(prior.entropy().mean().detach())
        pred = model.decoder.forward_prediction(h1, z_flat)

    prediction = frame_prediction_loss(pred, target)

    if mcfg.use_mae:
        visible, plan = model.encoder.forward_masked(
            batch.future_clean, cfg.mask_ratio, mask_generator
        )
        mae_pred = model.mae_route_decoder.forward_mae(visible, plan)
        mae = mae_loss(mae_pred, target, plan)
    else:
        mae = zero

    total = prediction + cfg.kl_scale * kl + mae
    return LossBreakdown(prediction=prediction, kl=kl, mae=mae, total=total,
                         diagnostics=diagnostics)


def total_loss_seeded(model: StochasticFramePredictor, batch: PairBatch,
                      cfg: ObjectiveConfig, seed: int) -> LossBreakdown:
    """Evaluate the objective with all internal randomness fixed by ``seed``.
    Repeated calls with identical parameters give identical values; used by
    gradient checks."""
    mask_gen = torch.Generator().manual_seed(seed)
    latent_gen = torch.Generator().manual_seed(seed + 1)
    return total_loss(model, batch, cfg, mask_gen, latent_gen)
