"""Synthetic stochastic videos with ground-truth labels, frame-pair sampling,
paired augmentation, and patch-grid conversion.

Three generator families:

* ``drift``  -- sprites move with a constant velocity; the future is
  deterministic given the first frame.
* ``branch`` -- sprites sit still until ``branch_frame``, then each sprite
  picks one of ``branch_fanout`` directions uniformly at random; the future is
  genuinely multimodal.
* ``static`` -- no motion at all.

Everything here is a pure function of (spec, seed), so datasets regenerate
bit-identically and workers can be sharded by clip index.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class AugmentationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    family: str = "branch"          # drift | branch | static
    num_clips: int = 512
    num_frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3
    num_sprites: int = 2
    sprite_size: int = 12
    speed: float = 2.0              # pixels per frame
    branch_frame: int = 4           # first frame at which branch motion starts
    branch_fanout: int = 2
    # Enumerate every joint branch mode of each base clip instead of sampling
    # one: clips then come in groups sharing identical pre-branch frames but
    # diverging afterwards, so no predictor of the future from the past can
    # beat mode averaging -- the residual is irreducibly stochastic even for
    # a model that memorizes the training set.
    branch_exhaustive: bool = False
    patch_size: int = 8             # only used for divisibility validation

    def validate(self) -> None:
        if self.family not in ("drift", "branch", "static"):
            raise ConfigurationError(f"unknown generator family {self.family!r}")
        if self.num_sprites < 1:
            raise ConfigurationError("num_sprites must be >= 1")
        if self.num_frames < 2:
            raise ConfigurationError("num_frames must be >= 2")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigurationError(
                f"resolution {self.height}x{self.width} not divisible by "
                f"patch size {self.patch_size}"
            )
        if self.family == "branch":
            if not (0 < self.branch_frame < self.num_frames):
                raise ConfigurationError("branch_frame must lie inside the clip")
            if self.branch_fanout < 2:
                raise ConfigurationError("branch_fanout must be >= 2")
            if self.branch_exhaustive:
                modes = self.branch_fanout ** self.num_sprites
                if self.num_clips % modes:
                    raise ConfigurationError(
                        f"num_clips {self.num_clips} not divisible by the "
                        f"{modes} branch modes per base clip"
                    )
        elif self.branch_exhaustive:
            raise ConfigurationError(
                "branch_exhaustive requires the branch family"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown GeneratorSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoClip:
    frames: np.ndarray      # [T, C, H, W] float32 in [0, 1]
    labels: np.ndarray      # [T, H, W] uint8, 0 = background
    meta: dict


@dataclass
class VideoDataset:
    clips: list[VideoClip]
    spec: GeneratorSpec
    seed: int
    pixel_mean: np.ndarray  # [C]
    pixel_std: np.ndarray   # [C]

    def __len__(self) -> int:
        return len(self.clips)


def _clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _sprite_params(spec: GeneratorSpec, rng: np.random.Generator) -> list[dict]:
    sprites = []
    for i in range(spec.num_sprites):
        color = 0.35 + 0.65 * rng.random(spec.channels)
        pos = np.array(
            [rng.uniform(0, spec.height), rng.uniform(0, spec.width)]
        )
        angle = rng.uniform(0.0, 2.0 * math.pi)
        sprites.append(
            {"color": color, "pos": pos, "angle": angle, "size": spec.sprite_size}
        )
    return sprites


def _branch_angles(base_angle: float, fanout: int) -> np.ndarray:
    return base_angle + 2.0 * math.pi * np.arange(fanout) / fanout


def _render(spec: GeneratorSpec, sprites: list[dict], positions: np.ndarray,
            background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Render one frame; positions is [num_sprites, 2] (row, col) centers."""
    frame = np.empty((spec.channels, spec.height, spec.width), dtype=np.float32)
    frame[:] = background[:, None, None]
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for sid, (sprite, pos) in enumerate(zip(sprites, positions), start=1):
        half = sprite["size"] / 2.0
        r0 = int(round(pos[0] - half))
        c0 = int(round(pos[1] - half))
        rows = (np.arange(r0, r0 + sprite["size"]) % spec.height)
        cols = (np.arange(c0, c0 + sprite["size"]) % spec.width)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        frame[:, rr, cc] = sprite["color"][:, None, None].astype(np.float32)
        labels[rr, cc] = sid
    return frame, labels


def generate_clip(spec: GeneratorSpec, seed: int, index: int,
                  branch_overrides: list[int] | None = None) -> VideoClip:
    """Generate one clip. ``branch_overrides`` forces the per-sprite branch
    choices (used to render counterfactual futures of a branch clip)."""
    spec.validate()
    rng = _clip_rng(seed, index)
    sprites = _sprite_params(spec, rng)
    background = (0.05 + 0.1 * rng.random(spec.channels)).astype(np.float32)

    if spec.family == "branch":
        choices = [int(rng.integers(spec.branch_fanout)) for _ in sprites]
    else:
        choices = [0 for _ in sprites]
    if branch_overrides is not None:
        if len(branch_overrides) != len(sprites):
            raise ConfigurationError("branch_overrides length mismatch")
        choices = [int(c) for c in branch_overrides]

    velocities = []
    for sprite, choice in zip(sprites, choices):
        if spec.family == "static":
            v = np.zeros(2)
        elif spec.family == "drift":
            v = spec.speed * np.array(
                [math.sin(sprite["angle"]), math.cos(sprite["angle"])]
            )
        else:  # branch: stationary before branch_frame, then chosen direction
            a = _branch_angles(sprite["angle"], spec.branch_fanout)[choice]
            v = spec.speed * np.array([math.sin(a), math.cos(a)])
        velocities.append(v)

    frames = np.empty(
        (spec.num_frames, spec.channels, spec.height, spec.width), dtype=np.float32
    )
    labels = np.empty((spec.num_frames, spec.height, spec.width), dtype=np.uint8)
    for t in range(spec.num_frames):
        positions = []
        for sprite, v in zip(sprites, velocities):
            if spec.family == "branch":
                steps = max(0, t - spec.branch_frame + 1)
            else:
                steps = t
            positions.append(sprite["pos"] + steps * v)
        frames[t], labels[t] = _render(spec, sprites, np.array(positions), background)

    meta = {"spec_id": spec.family, "seed": seed, "index": index,
            "branch_choices": choices}
    return VideoClip(frames=frames, labels=labels, meta=meta)


def clip_branch_modes(spec: GeneratorSpec, seed: int, index: int) -> list[VideoClip]:
    """All counterfactual renderings of a branch clip (one per joint branch
    choice). Only practical for small fanout ** num_sprites."""
    if spec.family != "branch":
        raise ConfigurationError("branch modes only defined for the branch family")
    n_modes = spec.branch_fanout ** spec.num_sprites
    modes = []
    for m in range(n_modes):
        choices = []
        x = m
        for _ in range(spec.num_sprites):
            choices.append(x % spec.branch_fanout)
            x //= spec.branch_fanout
        modes.append(generate_clip(spec, seed, index, branch_overrides=choices))
    return modes


def generate_synthetic_dataset(spec: GeneratorSpec, seed: int) -> VideoDataset:
    spec.validate()
    if spec.family == "branch" and spec.branch_exhaustive:
        modes = spec.branch_fanout ** spec.num_sprites
        clips = []
        for base in range(spec.num_clips // modes):
            for m, clip in enumerate(clip_branch_modes(spec, seed, base)):
                clip.meta["mode"] = m
                clips.append(clip)
    else:
        clips = [generate_clip(spec, seed, i) for i in range(spec.num_clips)]
    stacked = np.stack([c.frames for c in clips])          # [B, T, C, H, W]
    pixel_mean = stacked.mean(axis=(0, 1, 3, 4))
    pixel_std = np.maximum(stacked.std(axis=(0, 1, 3, 4)), 1e-6)
    return VideoDataset(clips=clips, spec=spec, seed=seed,
                        pixel_mean=pixel_mean.astype(np.float64),
                        pixel_std=pixel_std.astype(np.float64))


# ---------------------------------------------------------------------------
# Disk format: JSON manifest + raw little-endian tensors
# ---------------------------------------------------------------------------

def save_dataset(dataset: VideoDataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    clip_entries = []
    for i, clip in enumerate(dataset.clips):
        fname = f"clip_{i:05d}.frames.f32le"
        lname = f"clip_{i:05d}.labels.u8"
        clip.frames.astype("<f4").tofile(os.path.join(out_dir, fname))
        clip.labels.astype(np.uint8).tofile(os.path.join(out_dir, lname))
        clip_entries.append({
            "index": i,
            "frames_file": fname,
            "labels_file": lname,
            "branch_choices": clip.meta["branch_choices"],
        })
    spec = dataset.spec
    manifest = {
        "format": "framepred-dataset-v1",
        "spec": spec.to_dict(),
        "seed": dataset.seed,
        "frames_shape": [spec.num_frames, spec.channels, spec.height, spec.width],
        "labels_shape": [spec.num_frames, spec.height, spec.width],
        "frames_dtype": "<f4",
        "labels_dtype": "u1",
        "layout": "row-major C order, frames [T,C,H,W] float32 LE, labels [T,H,W] uint8",
        "pixel_mean": dataset.pixel_mean.tolist(),
        "pixel_std": dataset.pixel_std.tolist(),
        "clips": clip_entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(in_dir: str) -> VideoDataset:
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    spec = GeneratorSpec.from_dict(manifest["spec"])
    fshape = tuple(manifest["frames_shape"])
    lshape = tuple(manifest["labels_shape"])
    clips = []
    for entry in manifest["clips"]:
        frames = np.fromfile(
            os.path.join(in_dir, entry["frames_file"]), dtype="<f4"
        ).reshape(fshape).astype(np.float32)
        labels = np.fromfile(
            os.path.join(in_dir, entry["labels_file"]), dtype=np.uint8
        ).reshape(lshape)
        clips.append(VideoClip(
            frames=frames, labels=labels,
            meta={"spec_id": spec.family, "seed": manifest["seed"],
                  "index": entry["index"],
                  "branch_choices": entry["branch_choices"]},
        ))
    return VideoDataset(
        clips=clips, spec=spec, seed=manifest["seed"],
        pixel_mean=np.array(manifest["pixel_mean"], dtype=np.float64),
        pixel_std=np.array(manifest["pixel_std"], dtype=np.float64),
    )


def normalize_frames(frames: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Channel-normalize [.., C, H, W] pixels with dataset statistics."""
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (frames.astype(np.float32) - m) / s


# ---------------------------------------------------------------------------
# Frame-pair sampling
# ---------------------------------------------------------------------------

def sample_frame_pair(clip_len: int, gap_range: tuple[int, int],
                      rng: np.random.Generator) -> tuple[int, int]:
    """Uniform start index t, uniform gap k within the valid range."""
    k_min, k_max = gap_range
    if k_min < 1 or k_max < k_min:
        raise SamplingError(f"invalid gap range {gap_range}")
    if clip_len < k_min + 1:
        raise SamplingError(
            f"clip of length {clip_len} too short for minimum gap {k_min}"
        )
    k_hi = min(k_max, clip_len - 1)
    k = int(rng.integers(k_min, k_hi + 1))
    t = int(rng.integers(0, clip_len - k))
    return t, k


# ---------------------------------------------------------------------------
# Paired augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    hflip_prob: float = 0.5
    noise_sigma: float = 0.5

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise AugmentationError(f"invalid crop scale range {self.crop_scale}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise AugmentationError("hflip_prob must be a probability")
        if self.noise_sigma < 0.0:
            raise AugmentationError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class AugmentRecord:
    top: int
    left: int
    crop_h: int
    crop_w: int
    flip: bool
    sigma: float
    seed: int


@dataclass
class FramePair:
    current: np.ndarray           # [C, H, W]
    future_clean: np.ndarray      # [C, H, W]
    future_perturbed: np.ndarray  # [C, H, W]
    gap: int
    aug_record: AugmentRecord


def _resize_bilinear(frame: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(frame)).unsqueeze(0)
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    return out.squeeze(0).numpy()


def _resize_nearest_labels(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(labels)).float()[None, None]
    out = F.interpolate(t, size=out_hw, mode="nearest")
    return out[0, 0].numpy().astype(labels.dtype)


def apply_geometry(record: AugmentRecord, frame: np.ndarray) -> np.ndarray:
    """Replay the recorded crop+flip on a raw frame (bilinear resize back)."""
    crop = frame[:, record.top:record.top + record.crop_h,
                 record.left:record.left + record.crop_w]
    if crop.shape[1:] == frame.shape[1:]:
        out = crop.astype(np.float32, copy=True)
    else:
        out = _resize_bilinear(crop, (frame.shape[1], frame.shape[2]))
    if record.flip:
        out = out[:, :, ::-1].copy()
    return out


def apply_geometry_to_labels(record: AugmentRecord, labels: np.ndarray) -> np.ndarray:
    crop = labels[record.top:record.top + record.crop_h,
                  record.left:record.left + record.crop_w]
    out = _resize_nearest_labels(crop, labels.shape)
    if record.flip:
        out = out[:, ::-1].copy()
    return out


def draw_augment_record(shape_hw: tuple[int, int], params: AugmentParams,
                        seed: int, min_size: int = 1) -> AugmentRecord:
    params.validate()
    h, w = shape_hw
    rng = np.random.default_rng(seed)
    scale = rng.uniform(params.crop_scale[0], params.crop_scale[1])
    # Square-aspect area crop, resized back to the canonical resolution.
    crop_h = min(int(round(h * math.sqrt(scale))), h)
    crop_w = min(int(round(w * math.sqrt(scale))), w)
    if crop_h < min_size or crop_w < min_size:
        raise AugmentationError(
            f"degenerate crop rectangle {crop_h}x{crop_w} (minimum {min_size})"
        )
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    flip = bool(rng.random() < params.hflip_prob)
    return AugmentRecord(top=top, left=left, crop_h=crop_h, crop_w=crop_w,
                         flip=flip, sigma=params.noise_sigma, seed=seed)


def augment_pair(current: np.ndarray, future: np.ndarray, gap: int,
                 params: AugmentParams, rng: np.random.Generator,
                 min_crop: int | None = None) -> FramePair:
    """One crop rect and one flip decision, applied identically to both frames;
    Gaussian noise added to the future frame only. Fully replayable from the
    recorded seed."""
    if current.shape != future.shape:
        raise AugmentationError("current/future shape mismatch")
    seed = int(rng.integers(0, 2 ** 63 - 1))
    record = draw_augment_record(
        current.shape[1:], params, seed, min_size=min_crop or 1
    )
    cur = apply_geometry(record, current)
    fut = apply_geometry(record, future)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if record.sigma > 0:
        noise = noise_rng.normal(0.0, record.sigma, size=fut.shape)
        fut_pert = (fut + noise).astype(np.float32)
    else:
        fut_pert = fut.copy()
    return FramePair(current=cur.astype(np.float32),
                     future_clean=fut.astype(np.float32),
                     future_perturbed=fut_pert,
                     gap=gap, aug_record=record)


def replay_augment(record: AugmentRecord, current: np.ndarray,
                   future: np.ndarray, gap: int) -> FramePair:
    cur = apply_geometry(record, current)
    fut = apply_geometry(record, future)
    noise_rng = np.random.default_rng(np.random.SeedSequence([record.seed, 1]))
    if record.sigma > 0:
        noise = noise_rng.normal(0.0, record.sigma, size=fut.shape)
        fut_pert = (fut + noise).astype(np.float32)
    else:
        fut_pert = fut.copy()
    return FramePair(current=cur.astype(np.float32),
                     future_clean=fut.astype(np.float32),
                     future_perturbed=fut_pert, gap=gap, aug_record=record)


# ---------------------------------------------------------------------------
# Patch grids
# ---------------------------------------------------------------------------

@dataclass
class PatchGrid:
    patches: torch.Tensor                  # [N, P*P*C] (or [B, N, P*P*C])
    grid: tuple[int, int]
    patch_size: int
    channels: int
    normalization: dict | None = None      # {"mean": ..., "std": ...} per patch


def patchify(frame: torch.Tensor, patch_size: int) -> PatchGrid:
    """Frame [C, H, W] or [B, C, H, W] -> row-major non-overlapping patches."""
    squeeze = frame.dim() == 3
    if squeeze:
        frame = frame.unsqueeze(0)
    b, c, h, w = frame.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"frame {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = frame.reshape(b, c, rows, p, cols, p)
    x = x.permute(0, 2, 4, 3, 5, 1).reshape(b, rows * cols, p * p * c)
    if squeeze:
        x = x.squeeze(0)
    return PatchGrid(patches=x, grid=(rows, cols), patch_size=p, channels=c)


def unpatchify(grid: PatchGrid) -> torch.Tensor:
    x = grid.patches
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    b, n, d = x.shape
    rows, cols = grid.grid
    p, c = grid.patch_size, grid.channels
    if n != rows * cols or d != p * p * c:
        raise ConfigurationError("patch grid shape inconsistent")
    x = x.reshape(b, rows, cols, p, p, c)
    x = x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, rows * p, cols * p)
    return x.squeeze(0) if squeeze else x


def normalize_patches(grid: PatchGrid, eps: float = 1e-6) -> PatchGrid:
    """Standardize each patch row to mean 0 / unit std (std clamped below)."""
    x = grid.patches
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, keepdim=True, unbiased=False).clamp_min(eps)
    return PatchGrid(patches=(x - mean) / std, grid=grid.grid,
                     patch_size=grid.patch_size, channels=grid.channels,
                     normalization={"mean": mean, "std": std})
