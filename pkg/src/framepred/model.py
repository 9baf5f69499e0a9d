"""Full model assembly: shared encoder, posterior/prior heads, and the
shared decoder, with the ablation variants wired in as config flags."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import latent as lat
from .videodata import ConfigurationError
from .vit import DecoderConfig, Encoder, EncoderConfig, SharedDecoder, init_weights


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    latent_groups: int = 32
    latent_classes: int = 32
    latent_kind: str = "categorical"   # categorical | gaussian
    deterministic: bool = False        # skip the latent path entirely
    use_mae: bool = True
    separate_decoder: bool = False     # independent trunk for the MAE route

    def __post_init__(self):
        if self.latent_kind not in ("categorical", "gaussian"):
            raise ConfigurationError(f"unknown latent kind {self.latent_kind!r}")


class StochasticFramePredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        d = cfg.encoder.embed_dim
        flat = cfg.latent_groups * cfg.latent_classes
        if cfg.deterministic:
            self.heads = None
        elif cfg.latent_kind == "categorical":
            self.heads = lat.CategoricalHeads(d, cfg.latent_groups,
                                              cfg.latent_classes)
        else:
            self.heads = lat.GaussianHeads(d, flat)
        self.decoder = SharedDecoder(cfg.encoder, cfg.decoder, flat,
                                     cfg.latent_groups)
        if cfg.separate_decoder and cfg.use_mae:
            self.mae_decoder = SharedDecoder(cfg.encoder, cfg.decoder, flat,
                                             cfg.latent_groups)
        else:
            self.mae_decoder = None

    @property
    def mae_route_decoder(self) -> SharedDecoder:
        return self.mae_decoder if self.mae_decoder is not None else self.decoder

    def initialize(self, generator: torch.Generator) -> None:
        init_weights(self, generator)
        # Zero-init only the prior head's final layer (uniform prior at the
        # start). The posterior keeps its random init: a posterior that is
        # uniform for every pair emits pure-noise samples, and the decoder
        # learns to suppress the latent before the posterior can become
        # informative. A randomly-initialized posterior is pair-dependent
        # from step 0, which keeps the latent pathway trainable.
        if self.heads is not None:
            nn.init.zeros_(self.heads.prior_mlp[-1].weight)
            nn.init.zeros_(self.heads.prior_mlp[-1].bias)


def build_model(cfg: ModelConfig, init_seed: int | None = None,
                dtype: torch.dtype = torch.float32) -> StochasticFramePredictor:
    model = StochasticFramePredictor(cfg)
    if init_seed is not None:
        gen = torch.Generator().manual_seed(init_seed)
        model.initialize(gen)
    if dtype is not torch.float32:
        model = model.to(dtype)
    return model
