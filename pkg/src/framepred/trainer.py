"""Optimization loop: warmup+cosine schedule, repeated-sampling batches,
named rng streams, JSON-lines metrics, checkpointing, and the ablation
matrix runner."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import videodata as vd
from .checkpoint import (load_training_state, restore_optimizer,
                         save_training_state)
from .model import ModelConfig, StochasticFramePredictor, build_model
from .objectives import (LossBreakdown, ObjectiveConfig, PairBatch,
                         collate_pairs, normalized_patch_target, total_loss)
from .videodata import (AugmentParams, ConfigurationError, FramePair,
                        GeneratorSpec, SamplingError, VideoDataset)
from .vit import DecoderConfig, EncoderConfig

from . import latent as lat


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    # schedule / optimizer
    seed: int = 0
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 32
    repeated_sampling: int = 2
    lr_peak: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    # objective
    kl_scale: float = 0.01
    kl_alpha: float = 0.8
    mask_ratio: float = 0.75
    noise_sigma: float = 0.5
    future_aug: str = "noise"
    future_mask_ratio: float = 0.75
    # data sampling / augmentation
    gap_min: int = 4
    gap_max: int = 48
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5
    same_aug: bool = True
    # model geometry
    image_size: int = 64
    patch_size: int = 8
    enc_dim: int = 128
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    # latent
    latent_groups: int = 32
    latent_classes: int = 32
    latent_kind: str = "categorical"
    # Steps trained with the expected (softmax) latent before switching to
    # straight-through samples. From a cold start the sampled latent is pure
    # noise, the decoder is penalized for reading it and learns to ignore it
    # before the posterior becomes informative; a soft start keeps the
    # latent pathway differentiable until it carries signal.
    latent_soft_steps: int = 0
    deterministic: bool = False
    use_mae: bool = True
    separate_decoder: bool = False
    distinct_projections: bool = True
    latent_tokens: str = "single"
    latent_conditioning: str = "query"
    block_order: str = "self_cross"
    # bookkeeping
    checkpoint_every: int = 0       # 0 = final checkpoint only

    def validate(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError("warmup_steps must be <= total_steps")
        if self.batch_size % self.repeated_sampling:
            raise ConfigurationError(
                "batch_size must be divisible by repeated_sampling"
            )
        self.model_config()  # triggers geometry checks

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(
                image_size=self.image_size, patch_size=self.patch_size,
                embed_dim=self.enc_dim, depth=self.enc_depth,
                num_heads=self.enc_heads, mlp_ratio=self.mlp_ratio,
            ),
            decoder=DecoderConfig(
                embed_dim=self.dec_dim, depth=self.dec_depth,
                num_heads=self.dec_heads, mlp_ratio=self.mlp_ratio,
                block_order=self.block_order,
                distinct_projections=self.distinct_projections,
                latent_tokens=self.latent_tokens,
                latent_conditioning=self.latent_conditioning,
            ),
            latent_groups=self.latent_groups,
            latent_classes=self.latent_classes,
            latent_kind=self.latent_kind,
            deterministic=self.deterministic,
            use_mae=self.use_mae,
            separate_decoder=self.separate_decoder,
        )

    def objective_config(self, latent_forward: str = "sample") -> ObjectiveConfig:
        return ObjectiveConfig(
            kl_scale=self.kl_scale, kl_alpha=self.kl_alpha,
            mask_ratio=self.mask_ratio, future_aug=self.future_aug,
            future_mask_ratio=self.future_mask_ratio,
            latent_forward=latent_forward,
        )

    def augment_params(self) -> AugmentParams:
        sigma = self.noise_sigma if self.future_aug == "noise" else 0.0
        return AugmentParams(
            crop_scale=(self.crop_scale_min, self.crop_scale_max),
            hflip_prob=self.hflip_prob, noise_sigma=sigma,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def replace(self, **kwargs) -> "TrainConfig":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg


# Desk preset: small enough to train on a CPU in minutes while keeping every
# mechanism active. The paper-scale preset keeps the published recipe (steps
# stand in for the original epoch schedule).
DESK_PRESET = TrainConfig()
PAPER_PRESET = TrainConfig(
    image_size=224, patch_size=16, enc_dim=384, enc_depth=12, enc_heads=6,
    dec_dim=512, dec_depth=8, dec_heads=16, batch_size=1536,
    total_steps=400_000, warmup_steps=40_000, gap_min=4, gap_max=48,
)
PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def config_schema() -> dict:
    props = {}
    for f in dataclasses.fields(TrainConfig):
        props[f.name] = {"type": _JSON_TYPES[f.type if isinstance(f.type, type)
                                             else {"int": int, "float": float,
                                                   "bool": bool, "str": str}[f.type]]}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "framepred training configuration",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }


def load_config(path: str, overrides: dict | None = None,
                preset: str | None = None) -> TrainConfig:
    base = PRESETS[preset].to_dict() if preset else DESK_PRESET.to_dict()
    if path:
        with open(path) as f:
            user = json.load(f)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(user) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        base.update(user)
    for key, val in (overrides or {}).items():
        if key not in base:
            raise ConfigurationError(f"unknown override key {key!r}")
        base[key] = _coerce(type(base[key]), val)
    return TrainConfig.from_dict(base)


def _coerce(typ, val):
    if isinstance(val, typ):
        return val
    if typ is bool:
        if str(val).lower() in ("true", "1"):
            return True
        if str(val).lower() in ("false", "0"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {val!r}")
    return typ(val)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

def lr_at(step: int, config: TrainConfig) -> float:
    """Linear ramp 0 -> lr_peak over the warmup steps, then half-cosine decay
    from lr_peak down to 0 at the final step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w, total = config.warmup_steps, config.total_steps
    if w > 0 and step < w:
        return config.lr_peak * step / w
    if total <= w:
        return config.lr_peak
    frac = min(1.0, (step - w) / (total - w))
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------

def _augment_unshared(current, future, gap, params, rng, min_crop):
    """Same-aug ablation: independent geometry for the two frames."""
    seed_cur = int(rng.integers(0, 2 ** 63 - 1))
    seed_fut = int(rng.integers(0, 2 ** 63 - 1))
    rec_cur = vd.draw_augment_record(current.shape[1:], params, seed_cur,
                                     min_size=min_crop)
    rec_fut = vd.draw_augment_record(future.shape[1:], params, seed_fut,
                                     min_size=min_crop)
    cur = vd.apply_geometry(rec_cur, current)
    fut = vd.apply_geometry(rec_fut, future)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed_fut, 1]))
    if params.noise_sigma > 0:
        fut_pert = (fut + noise_rng.normal(0, params.noise_sigma, fut.shape)
                    ).astype(np.float32)
    else:
        fut_pert = fut.copy()
    return FramePair(current=cur.astype(np.float32),
                     future_clean=fut.astype(np.float32),
                     future_perturbed=fut_pert, gap=gap, aug_record=rec_fut)


def build_batch(dataset: VideoDataset, config: TrainConfig,
                rng: np.random.Generator) -> list[FramePair]:
    """Each selected clip contributes ``repeated_sampling`` independent
    (t, k, augmentation) draws."""
    n_clips = config.batch_size // config.repeated_sampling
    if len(dataset) < n_clips:
        raise SamplingError(
            f"dataset of {len(dataset)} clips cannot supply {n_clips} distinct clips"
        )
    clip_ids = rng.choice(len(dataset), size=n_clips, replace=False)
    params = config.augment_params()
    pairs: list[FramePair] = []
    for cid in clip_ids:
        clip = dataset.clips[int(cid)]
        frames = vd.normalize_frames(clip.frames, dataset.pixel_mean,
                                     dataset.pixel_std)
        for _ in range(config.repeated_sampling):
            t, k = vd.sample_frame_pair(frames.shape[0],
                                        (config.gap_min, config.gap_max), rng)
            if config.same_aug:
                pair = vd.augment_pair(frames[t], frames[t + k], k, params, rng,
                                       min_crop=config.patch_size)
            else:
                pair = _augment_unshared(frames[t], frames[t + k], k, params,
                                         rng, config.patch_size)
            pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# Weight decay audit
# ---------------------------------------------------------------------------

_NO_DECAY_TAGS = ("cls_token", "mask_query", "kv_mask_token", "latent_pos")


def weight_decay_exempt(name: str, param: torch.nn.Parameter) -> bool:
    """Biases, normalization gains, and token/positional embeddings are
    exempt from decoupled weight decay."""
    if name.endswith(".bias") or param.dim() <= 1:
        return True
    return any(tag in name for tag in _NO_DECAY_TAGS)


def make_optimizer(model: torch.nn.Module, config: TrainConfig
                   ) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if weight_decay_exempt(name, p) else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=config.lr_peak, betas=(config.beta1, config.beta2),
    )


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class NonFiniteLossError(RuntimeError):
    pass


def _stream_seeds(seed: int) -> dict[str, int]:
    ss = np.random.SeedSequence(seed)
    names = ("init", "mask", "latent", "data")
    states = ss.generate_state(len(names), dtype=np.uint64)
    return {n: int(s) for n, s in zip(names, states)}


class Trainer:
    """Owns a model, optimizer, and the named rng streams. The data, masking,
    latent, and init streams are seeded independently so changing one leaves
    the others' draws unchanged."""

    def __init__(self, config: TrainConfig, dataset: VideoDataset,
                 out_dir: str | None = None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        seeds = _stream_seeds(config.seed)
        self.init_gen = torch.Generator().manual_seed(seeds["init"])
        self.mask_gen = torch.Generator().manual_seed(seeds["mask"])
        self.latent_gen = torch.Generator().manual_seed(seeds["latent"])
        self.data_rng = np.random.default_rng(seeds["data"])
        self.model = StochasticFramePredictor(config.model_config())
        self.model.initialize(self.init_gen)
        self.optimizer = make_optimizer(self.model, config)
        self.objective = config.objective_config()
        self.objective_soft = config.objective_config(latent_forward="expected")
        self.step = 0
        self._metrics_fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            if any(os.scandir(out_dir)):
                raise ConfigurationError(
                    f"output directory {out_dir!r} is not empty"
                )
            self.metrics_path = os.path.join(out_dir, "metrics.jsonl")
            self._write_manifest("running")
        else:
            self.metrics_path = None

    # -- manifest ----------------------------------------------------------

    def _manifest(self, status: str, note: str | None = None) -> dict:
        m = {
            "status": status,
            "config": self.config.to_dict(),
            "format": "framepred-run-v1",
            "stream_seeds": _stream_seeds(self.config.seed),
            "metrics_file": "metrics.jsonl",
            "checkpoints": sorted(
                f for f in os.listdir(self.out_dir) if f.endswith(".ckpt")
            ) if self.out_dir else [],
            "step": self.step,
        }
        if note:
            m["note"] = note
        return m

    def _write_manifest(self, status: str, note: str | None = None) -> None:
        if self.out_dir is None:
            return
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as f:
            json.dump(self._manifest(status, note), f, indent=2, sort_keys=True)
            f.write("\n")

    # -- stepping ----------------------------------------------------------

    def train_step(self) -> dict:
        cfg = self.config
        lr = lr_at(self.step, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        pairs = build_batch(self.dataset, cfg, self.data_rng)
        batch = collate_pairs(pairs)
        objective = (self.objective_soft
                     if self.step < cfg.latent_soft_steps else self.objective)
        breakdown = total_loss(self.model, batch, objective,
                               self.mask_gen, self.latent_gen)
        if not torch.isfinite(breakdown.total):
            record = breakdown.scalars()
            record["step"] = self.step
            self._write_manifest("failed", note=json.dumps(record))
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {record}")
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        record = {"step": self.step,
                  "prediction": float(breakdown.prediction.detach()),
                  "kl": float(breakdown.kl.detach()),
                  "mae": float(breakdown.mae.detach()),
                  "total": float(breakdown.total.detach()),
                  "lr": lr, "seed": cfg.seed}
        self._log(record)
        self.step += 1
        return record

    def _log(self, record: dict) -> None:
        if self.metrics_path is None:
            return
        if self._metrics_fh is None:
            self._metrics_fh = open(self.metrics_path, "a")
        self._metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._metrics_fh.flush()

    def run(self, num_steps: int | None = None) -> dict:
        target = self.config.total_steps if num_steps is None else (
            self.step + num_steps
        )
        every = self.config.checkpoint_every
        while self.step < target:
            self.train_step()
            if self.out_dir and every and self.step % every == 0 \
                    and self.step < target:
                self.save_checkpoint(
                    os.path.join(self.out_dir, f"step_{self.step:07d}.ckpt")
                )
        if self.out_dir:
            self.save_checkpoint(os.path.join(self.out_dir, "final.ckpt"))
            self._write_manifest("done")
        return self._manifest("done")

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        save_training_state(
            path, self.model, self.optimizer, self.step,
            {"init": self.init_gen, "mask": self.mask_gen,
             "latent": self.latent_gen},
            self.data_rng.bit_generator.state,
            self.config.to_dict(),
        )

    @classmethod
    def resume(cls, path: str, dataset: VideoDataset,
               out_dir: str | None = None) -> "Trainer":
        state = load_training_state(path)
        config = TrainConfig.from_dict(state["extra"]["config"])
        trainer = cls(config, dataset, out_dir=None)
        trainer.out_dir = None
        trainer.model.load_state_dict(state["model_state"])
        restore_optimizer(trainer.optimizer, state["optim_state"],
                          state["extra"]["optimizer_meta"])
        for name, gen in (("init", trainer.init_gen), ("mask", trainer.mask_gen),
                          ("latent", trainer.latent_gen)):
            gen.set_state(state["rng_state"][name])
        trainer.data_rng.bit_generator.state = state["extra"]["numpy_rng_state"]
        trainer.step = state["extra"]["step"]
        if out_dir is not None:
            trainer.out_dir = out_dir
            os.makedirs(out_dir, exist_ok=True)
            trainer.metrics_path = os.path.join(out_dir, "metrics.jsonl")
        return trainer


def train(config: TrainConfig, dataset: VideoDataset, out_dir: str) -> dict:
    """Run a full training job into ``out_dir``; returns the run manifest."""
    trainer = Trainer(config, dataset, out_dir=out_dir)
    return trainer.run()


# ---------------------------------------------------------------------------
# Reconstruction evaluation (posterior vs prior vs deterministic)
# ---------------------------------------------------------------------------

@torch.no_grad()
def reconstruction_mse(model: StochasticFramePredictor, batch: PairBatch,
                       source: str, seed: int = 0,
                       target_frames: torch.Tensor | None = None) -> float:
    """Mean reconstruction MSE on normalized patches. ``source`` selects the
    latent used for decoding: "posterior", "prior", or "deterministic".
    ``target_frames`` overrides the regression target (used to score against
    counterfactual futures)."""
    p = model.cfg.encoder.patch_size
    gen = torch.Generator().manual_seed(seed)
    h1 = model.encoder(batch.current)
    tgt_frames = batch.future_clean if target_frames is None else target_frames
    target = normalized_patch_target(tgt_frames, p)
    if source == "deterministic" or model.cfg.deterministic:
        pred = model.decoder.forward_deterministic(h1)
    else:
        h2 = model.encoder(batch.future_perturbed)
        if source == "posterior":
            dist = model.heads.posterior(h1[:, 0], h2[:, 0])
        elif source == "prior":
            dist = model.heads.prior(h1[:, 0])
        else:
            raise ConfigurationError(f"unknown latent source {source!r}")
        if model.cfg.latent_kind == "categorical":
            z = lat.sample_straight_through(dist, gen)
            z_flat = z.reshape(z.shape[0], -1)
        else:
            z_flat = dist.rsample(gen)
        pred = model.decoder.forward_prediction(h1, z_flat)
    return float(((pred - target) ** 2).mean())


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

def run_ablation_matrix(base_config: TrainConfig, axes: dict[str, list],
                        dataset: VideoDataset, out_root: str,
                        eval_fn=None) -> list[dict]:
    """One training run per cell of the Cartesian product of ``axes``.
    Writes ``report.csv`` with final losses (mean over the last 50 steps),
    reconstruction MSEs from posterior and prior samples, and any extra
    columns returned by ``eval_fn(model, dataset)``."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in axes:
        if key not in known:
            raise ConfigurationError(f"unknown ablation axis {key!r}")
    cells: list[dict] = [{}]
    for key, values in axes.items():
        cells = [dict(c, **{key: v}) for c in cells for v in values]

    os.makedirs(out_root, exist_ok=True)
    rows = []
    for i, overrides in enumerate(cells):
        name = "base" if not overrides else "_".join(
            f"{k}-{v}" for k, v in overrides.items()
        )
        run_dir = os.path.join(out_root, f"cell_{i:02d}_{name}")
        config = base_config.replace(**overrides)
        trainer = Trainer(config, dataset, out_dir=run_dir)
        trainer.run()
        tail = _metrics_tail(os.path.join(run_dir, "metrics.jsonl"), 50)
        row = {"cell": name, "run_dir": run_dir, **overrides}
        for key in ("prediction", "kl", "mae", "total"):
            row[f"final_{key}"] = float(np.mean([m[key] for m in tail]))
        eval_rng = np.random.default_rng(base_config.seed + 1)
        pairs = build_batch(dataset, config.replace(batch_size=32,
                                                    repeated_sampling=1),
                            eval_rng)
        batch = collate_pairs(pairs)
        if config.deterministic:
            mse = reconstruction_mse(trainer.model, batch, "deterministic")
            row["posterior_mse"] = mse
            row["prior_mse"] = mse
        else:
            row["posterior_mse"] = reconstruction_mse(trainer.model, batch,
                                                      "posterior")
            row["prior_mse"] = reconstruction_mse(trainer.model, batch, "prior")
        if eval_fn is not None:
            row.update(eval_fn(trainer.model, dataset))
        rows.append(row)

    import csv

    fieldnames = sorted({k for r in rows for k in r})
    with open(os.path.join(out_root, "report.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _metrics_tail(path: str, n: int) -> list[dict]:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    return lines[-n:]
