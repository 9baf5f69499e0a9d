"""Transformer backbone: patch-embedding encoder, random masking, and the
shared cross/self-attention decoder driven by [MASK]-token queries.

The decoder serves two routes with one trunk: future-frame prediction (keys
and values are the current-frame tokens plus a latent token) and masked
autoencoding (keys and values are the restored masked-frame tokens). Each
route has its own input projection when ``distinct_projections`` is on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .videodata import ConfigurationError, PatchGrid, patchify


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        g = self.image_size // self.patch_size
        return g * g


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 3
    mlp_ratio: float = 4.0
    block_order: str = "self_cross"        # self_cross | cross_self
    distinct_projections: bool = True
    latent_tokens: str = "single"          # single | per_group
    latent_conditioning: str = "query"     # query | kv_token

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("decoder dim must be divisible by num_heads")
        if self.block_order not in ("self_cross", "cross_self"):
            raise ConfigurationError(f"unknown block_order {self.block_order!r}")
        if self.latent_tokens not in ("single", "per_group"):
            raise ConfigurationError(f"unknown latent_tokens {self.latent_tokens!r}")
        if self.latent_conditioning not in ("query", "kv_token"):
            raise ConfigurationError(
                f"unknown latent_conditioning {self.latent_conditioning!r}")


# ---------------------------------------------------------------------------
# Fixed 2D sin-cos positional embeddings
# ---------------------------------------------------------------------------

def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    assert dim % 2 == 0
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    out = np.einsum("p,d->pd", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """[rows*cols, dim] fixed embedding, row-major."""
    assert dim % 4 == 0
    rows, cols = grid
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb_r = sincos_1d(dim // 2, rr.reshape(-1))
    emb_c = sincos_1d(dim // 2, cc.reshape(-1))
    return np.concatenate([emb_r, emb_c], axis=1)


# ---------------------------------------------------------------------------
# Transformer pieces
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = kv.shape[1]
        q = self.q(query).reshape(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(kv).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(kv).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        x = x + self.mlp(self.norm2(x))
        return x


class DecoderBlock(nn.Module):
    """Pre-norm block with self-attention over queries and cross-attention
    from queries to the KV set, in configurable order, then an MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, block_order: str):
        super().__init__()
        self.block_order = block_order
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        def do_self(x):
            y = self.norm_self(x)
            return x + self.self_attn(y, y)

        def do_cross(x):
            # Pre-norm on both streams: without KV normalization the latent
            # token (whose embedding is much smaller than patch tokens with
            # their positional offsets) is drowned out of the attention.
            return x + self.cross_attn(self.norm_cross(x), self.norm_kv(kv))

        if self.block_order == "self_cross":
            x = do_cross(do_self(x))
        else:
            x = do_self(do_cross(x))
        return x + self.mlp(self.norm_mlp(x))


# ---------------------------------------------------------------------------
# Random masking
# ---------------------------------------------------------------------------

@dataclass
class MaskPlan:
    visible_indices: torch.Tensor   # [B, N_vis] patch indices (0-based, no CLS)
    masked_indices: torch.Tensor    # [B, N_mask]
    ids_restore: torch.Tensor       # [B, N] inverse of the shuffle permutation
    mask: torch.Tensor              # [B, N] bool, True at masked positions
    ratio: float


def make_mask_plan(num_patches: int, ratio: float, generator: torch.Generator,
                   batch: int = 1) -> MaskPlan:
    """Uniformly random masking of round(ratio*N) patches; CLS is never part
    of the plan (indices are patch positions only)."""
    if not (0.0 <= ratio < 1.0):
        raise ConfigurationError(f"mask ratio {ratio} outside [0, 1)")
    n_mask = int(round(ratio * num_patches))
    noise = torch.rand(batch, num_patches, generator=generator)
    shuffle = torch.argsort(noise, dim=1)
    ids_restore = torch.argsort(shuffle, dim=1)
    visible = shuffle[:, : num_patches - n_mask]
    masked = shuffle[:, num_patches - n_mask:]
    mask = torch.zeros(batch, num_patches, dtype=torch.bool)
    mask.scatter_(1, masked, True)
    return MaskPlan(visible_indices=visible, masked_indices=masked,
                    ids_restore=ids_restore, mask=mask, ratio=ratio)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class Encoder(nn.Module):
    """ViT encoder over non-overlapping patches with a prepended [CLS] token
    and fixed 2D sin-cos positional embeddings. Frames are processed
    independently of each other."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p, c, d = cfg.patch_size, cfg.in_chans, cfg.embed_dim
        self.patch_embed = nn.Linear(p * p * c, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        pos = sincos_2d(d, cfg.grid)
        pos = np.concatenate([np.zeros((1, d)), pos], axis=0)  # CLS gets zeros
        self.register_buffer("pos_embed", torch.from_numpy(pos).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)

    def _embed(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ConfigurationError(
                f"frame resolution {tuple(frames.shape[-2:])} does not match "
                f"encoder image_size {self.cfg.image_size}"
            )
        grid = patchify(frames, self.cfg.patch_size)
        x = self.patch_embed(grid.patches)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        return x + self.pos_embed[1:].to(x.dtype)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B, 1+N, D] tokens, CLS at index 0."""
        x = self._embed(frames)
        cls = (self.cls_token + self.pos_embed[:1]).to(x.dtype)
        x = torch.cat([cls.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward_masked(self, frames: torch.Tensor, ratio: float,
                       generator: torch.Generator) -> tuple[torch.Tensor, MaskPlan]:
        """Encode only the visible patches. Returns [B, 1+N_vis, D] and the plan."""
        x = self._embed(frames)
        plan = make_mask_plan(self.cfg.num_patches, ratio, generator,
                              batch=x.shape[0])
        idx = plan.visible_indices.to(x.device)
        x = torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        cls = (self.cls_token + self.pos_embed[:1]).to(x.dtype)
        x = torch.cat([cls.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x), plan


# ---------------------------------------------------------------------------
# Shared decoder
# ---------------------------------------------------------------------------

class SharedDecoder(nn.Module):
    """One trunk of decoder blocks; [MASK]-token queries (one per patch
    position, with fixed 2D sin-cos positions) cross-attend to a
    route-dependent KV set and self-attend to each other."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: DecoderConfig,
                 latent_flat_dim: int, latent_groups: int):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        d = cfg.embed_dim
        self.proj_pred = nn.Linear(enc_cfg.embed_dim, d)
        if cfg.distinct_projections:
            self.proj_mae = nn.Linear(enc_cfg.embed_dim, d)
        else:
            self.proj_mae = self.proj_pred
        if cfg.latent_tokens == "single":
            self.latent_proj = nn.Linear(latent_flat_dim, d)
            n_latent = 1
        else:
            assert latent_flat_dim % latent_groups == 0
            self.latent_proj = nn.Linear(latent_flat_dim // latent_groups, d)
            n_latent = latent_groups
        self.latent_groups = latent_groups
        self.latent_pos = nn.Parameter(torch.zeros(1, n_latent, d))
        self.mask_query = nn.Parameter(torch.zeros(1, 1, d))
        self.kv_mask_token = nn.Parameter(torch.zeros(1, 1, d))
        pos = sincos_2d(d, enc_cfg.grid)
        pos = np.concatenate([np.zeros((1, d)), pos], axis=0)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(
            DecoderBlock(d, cfg.num_heads, cfg.mlp_ratio, cfg.block_order)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        out_dim = enc_cfg.patch_size ** 2 * enc_cfg.in_chans
        self.head = nn.Linear(d, out_dim)

    def _queries(self, batch: int, dtype: torch.dtype) -> torch.Tensor:
        q = self.mask_query + self.pos_embed[1:].unsqueeze(0)
        return q.expand(batch, -1, -1).to(dtype)

    def forward_with_kv(self, kv: torch.Tensor) -> torch.Tensor:
        """Run queries against an already-assembled KV set. [B,S,d] -> [B,N,out]."""
        x = self._queries(kv.shape[0], kv.dtype)
        for blk in self.blocks:
            x = blk(x, kv)
        return self.head(self.norm(x))

    def _latent_embed(self, z_flat: torch.Tensor) -> torch.Tensor:
        if self.cfg.latent_tokens == "single":
            zt = self.latent_proj(z_flat).unsqueeze(1)
        else:
            z = z_flat.reshape(z_flat.shape[0], self.latent_groups, -1)
            zt = self.latent_proj(z)
        return zt + self.latent_pos.to(zt.dtype)

    def prediction_kv(self, h: torch.Tensor, z_flat: torch.Tensor) -> torch.Tensor:
        """KV = projected current-frame tokens (positions travel with them),
        plus the projected latent token(s) in "kv_token" conditioning."""
        kv = self.proj_pred(h) + self.pos_embed.unsqueeze(0).to(h.dtype)
        if self.cfg.latent_conditioning == "kv_token":
            kv = torch.cat([kv, self._latent_embed(z_flat)], dim=1)
        return kv

    def forward_prediction(self, h: torch.Tensor, z_flat: torch.Tensor) -> torch.Tensor:
        kv = self.prediction_kv(h, z_flat)
        if self.cfg.latent_conditioning == "query":
            # Add the latent embedding to every mask query. A lone latent KV
            # token competes with all patch tokens for attention weight and
            # can be suppressed entirely; an additive query bias keeps the
            # latent on the gradient path for every predicted patch.
            bias = self._latent_embed(z_flat).mean(dim=1, keepdim=True)
            x = self._queries(kv.shape[0], kv.dtype) + bias.to(kv.dtype)
            for blk in self.blocks:
                x = blk(x, kv)
            return self.head(self.norm(x))
        return self.forward_with_kv(kv)

    def forward_deterministic(self, h: torch.Tensor) -> torch.Tensor:
        """Ablation route: KV is the current-frame tokens alone."""
        kv = self.proj_pred(h) + self.pos_embed.unsqueeze(0).to(h.dtype)
        return self.forward_with_kv(kv)

    def mae_kv(self, visible_tokens: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Restore the full token order: projected visible tokens at their
        original positions, a learned placeholder elsewhere, CLS kept."""
        b = visible_tokens.shape[0]
        n = self.enc_cfg.num_patches
        if visible_tokens.shape[1] != 1 + plan.visible_indices.shape[1]:
            raise ConfigurationError("visible token count inconsistent with plan")
        proj = self.proj_mae(visible_tokens)
        cls, vis = proj[:, :1], proj[:, 1:]
        filler = self.kv_mask_token.expand(
            b, n - vis.shape[1], -1
        ).to(vis.dtype)
        shuffled = torch.cat([vis, filler], dim=1)
        idx = plan.ids_restore.to(vis.device)
        restored = torch.gather(
            shuffled, 1, idx.unsqueeze(-1).expand(-1, -1, vis.shape[-1])
        )
        restored = restored + self.pos_embed[1:].unsqueeze(0).to(vis.dtype)
        cls = cls + self.pos_embed[:1].unsqueeze(0).to(vis.dtype)
        return torch.cat([cls, restored], dim=1)

    def forward_mae(self, visible_tokens: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        return self.forward_with_kv(self.mae_kv(visible_tokens, plan))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Truncated-normal (std 0.02) linear weights, zero biases; token and
    positional parameters also truncated-normal."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, generator=generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for name, p in module.named_parameters():
        if any(tag in name for tag in
               ("cls_token", "mask_query", "kv_mask_token", "latent_pos")):
            nn.init.trunc_normal_(p, std=0.02, generator=generator)
