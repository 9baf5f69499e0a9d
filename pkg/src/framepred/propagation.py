"""Video label propagation: k-NN attention over encoder patch features with a
temporal context queue and a spatial radius restriction, scored by region
Jaccard.

The per-frame affinity/top-k/vote step is the hot loop; a compiled extension
(``framepred._prop_kernel``) is used when available and a vectorized NumPy
implementation otherwise. ``FRAMEPRED_FORCE_PY=1`` forces the fallback.
``benchmarks/bench_propagation.py`` compares the two."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .videodata import ConfigurationError
from .vit import Encoder

try:
    from ._prop_kernel import propagate_frame as _propagate_frame_ext
except ImportError:  # extension not built; fallback below
    _propagate_frame_ext = None

HAVE_EXTENSION = _propagate_frame_ext is not None


def using_extension() -> bool:
    return HAVE_EXTENSION and os.environ.get("FRAMEPRED_FORCE_PY") != "1"


@dataclass(frozen=True)
class PropagationConfig:
    topk: int = 7
    radius: int = 4          # Chebyshev radius in patch units
    queue_len: int = 8
    temperature: float = 0.07

    def __post_init__(self):
        if self.topk < 1:
            raise ConfigurationError("topk must be >= 1")
        if self.radius < 0:
            raise ConfigurationError("radius must be >= 0")
        if self.queue_len < 1:
            raise ConfigurationError("queue_len must be >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")


# Paper-scale DAVIS setting; desk default is the dataclass default.
DAVIS_PRESET = PropagationConfig(topk=7, radius=30, queue_len=30,
                                 temperature=0.07)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

@torch.no_grad()
def extract_features(frames: torch.Tensor, encoder: Encoder) -> np.ndarray:
    """[T, C, H, W] -> [T, N, D] final-layer patch tokens, L2-normalized per
    token; the CLS token is dropped."""
    tokens = encoder(frames)[:, 1:]
    tokens = torch.nn.functional.normalize(tokens, dim=-1)
    return tokens.float().numpy()


# ---------------------------------------------------------------------------
# Label fields
# ---------------------------------------------------------------------------

def labels_to_field(mask: np.ndarray, patch_size: int, num_objects: int
                    ) -> np.ndarray:
    """Pixel label mask [H, W] -> per-patch soft distribution [N, K+1]
    (fraction of the patch's pixels carrying each id)."""
    h, w = mask.shape
    p = patch_size
    rows, cols = h // p, w // p
    patches = mask.reshape(rows, p, cols, p).transpose(0, 2, 1, 3)
    patches = patches.reshape(rows * cols, p * p)
    field = np.zeros((rows * cols, num_objects + 1), dtype=np.float32)
    for k in range(num_objects + 1):
        field[:, k] = (patches == k).mean(axis=1)
    return field


def field_to_labels(field: np.ndarray, grid: tuple[int, int],
                    patch_size: int) -> np.ndarray:
    """Hard per-pixel labels via per-patch argmax, upsampled to pixels."""
    rows, cols = grid
    hard = field.argmax(axis=-1).reshape(rows, cols).astype(np.uint8)
    return np.kron(hard, np.ones((patch_size, patch_size), dtype=np.uint8))


# ---------------------------------------------------------------------------
# Per-frame kernel (NumPy fallback)
# ---------------------------------------------------------------------------

def _radius_mask(rows: int, cols: int, radius: int) -> np.ndarray:
    """[N, N] boolean allowance: target patch i may attend to source patch j
    iff their grid coordinates are within the Chebyshev radius."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r = rr.reshape(-1)
    c = cc.reshape(-1)
    return (np.abs(r[:, None] - r[None, :]) <= radius) & \
           (np.abs(c[:, None] - c[None, :]) <= radius)


def _propagate_frame_py(target_feats: np.ndarray, source_feats: np.ndarray,
                        source_labels: np.ndarray, rows: int, cols: int,
                        radius: int, topk: int, temperature: float
                        ) -> np.ndarray:
    n, d = target_feats.shape
    s = source_feats.shape[0]
    flat_feats = source_feats.reshape(s * n, d)
    flat_labels = source_labels.reshape(s * n, -1)
    aff = (target_feats @ flat_feats.T).astype(np.float64) / temperature
    allowed = np.tile(_radius_mask(rows, cols, radius), (1, s))
    # Row-wise fallback to the nearest source patch if a row has no allowed
    # source (unreachable for radius >= 0 on a shared grid).
    empty = ~allowed.any(axis=1)
    if empty.any():
        nearest = aff.argmax(axis=1)
        allowed[empty, nearest[empty]] = True
    masked = np.where(allowed, aff, -np.inf)
    k = min(topk, masked.shape[1])
    top_idx = np.argpartition(-masked, kth=k - 1, axis=1)[:, :k]
    top_val = np.take_along_axis(masked, top_idx, axis=1)
    # Rows with fewer than k allowed sources carry -inf entries, which get
    # exactly zero weight after the softmax (the row max is always finite).
    w = np.exp(top_val - top_val.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("nk,nkc->nc", w, flat_labels[top_idx]).astype(np.float32)
    return out


def propagate_frame(target_feats: np.ndarray, source_feats: np.ndarray,
                    source_labels: np.ndarray, grid: tuple[int, int],
                    cfg: PropagationConfig, force_py: bool = False
                    ) -> np.ndarray:
    rows, cols = grid
    if force_py or not using_extension():
        return _propagate_frame_py(
            target_feats, source_feats, source_labels, rows, cols,
            cfg.radius, cfg.topk, cfg.temperature,
        )
    # The dense dot products go through BLAS here; the compiled kernel only
    # runs the radius-windowed top-k and the vote.
    s, n, d = source_feats.shape
    aff = target_feats.astype(np.float32) @ \
        source_feats.reshape(s * n, d).astype(np.float32).T
    aff /= np.float32(cfg.temperature)
    return _propagate_frame_ext(
        np.ascontiguousarray(aff, dtype=np.float32),
        np.ascontiguousarray(source_labels, dtype=np.float32),
        rows, cols, cfg.radius, cfg.topk,
    )


# ---------------------------------------------------------------------------
# Sequence propagation
# ---------------------------------------------------------------------------

def propagate(features: np.ndarray, first_labels: np.ndarray,
              grid: tuple[int, int], cfg: PropagationConfig,
              force_py: bool = False) -> np.ndarray:
    """features [T, N, D]; first_labels [N, K+1] ground truth for frame 0.
    Returns predicted soft labels [T, N, K+1]. The source set for frame t is
    frame 0's ground truth plus the last ``queue_len`` predicted frames."""
    t_total, n, _ = features.shape
    if first_labels.shape[0] != n:
        raise ConfigurationError("first-frame labels inconsistent with features")
    preds = np.empty((t_total,) + first_labels.shape, dtype=np.float32)
    preds[0] = first_labels
    queue: list[int] = []
    for t in range(1, t_total):
        src_ids = [0] + queue[-cfg.queue_len:]
        src_feats = features[src_ids]
        src_labels = preds[src_ids]
        out = propagate_frame(features[t], src_feats, src_labels, grid, cfg,
                              force_py=force_py)
        # Re-normalize to guard against float drift; rows already sum to ~1.
        out = out / out.sum(axis=-1, keepdims=True)
        preds[t] = out
        queue.append(t)
    return preds


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def region_jaccard(pred_masks: np.ndarray, true_masks: np.ndarray,
                   include_first: bool = False) -> tuple[dict[int, float], float]:
    """Per-object IoU averaged over frames, then mean over objects. Frames
    where an object is absent from both prediction and truth are excluded
    from that object's average. Frame 0 carries the given annotation and is
    excluded unless ``include_first``."""
    if pred_masks.shape != true_masks.shape:
        raise ConfigurationError("mask shape mismatch")
    t0 = 0 if include_first else 1
    object_ids = sorted(int(k) for k in np.unique(true_masks) if k != 0)
    per_object: dict[int, float] = {}
    for oid in object_ids:
        scores = []
        for t in range(t0, pred_masks.shape[0]):
            p = pred_masks[t] == oid
            g = true_masks[t] == oid
            union = np.logical_or(p, g).sum()
            if union == 0:
                continue
            scores.append(np.logical_and(p, g).sum() / union)
        if scores:
            per_object[oid] = float(np.mean(scores))
    mean = float(np.mean(list(per_object.values()))) if per_object else 0.0
    return per_object, mean


# ---------------------------------------------------------------------------
# End-to-end evaluation over a dataset
# ---------------------------------------------------------------------------

def evaluate_propagation(encoder: Encoder, dataset, cfg: PropagationConfig,
                         max_clips: int | None = None,
                         force_py: bool = False) -> list[dict]:
    """Per-clip region-Jaccard rows {video_id, object_id, jaccard} plus one
    aggregate row per clip (object_id -1)."""
    from .videodata import normalize_frames

    patch = encoder.cfg.patch_size
    grid = encoder.cfg.grid
    rows_out = []
    clips = dataset.clips[:max_clips] if max_clips else dataset.clips
    for ci, clip in enumerate(clips):
        frames = normalize_frames(clip.frames, dataset.pixel_mean,
                                  dataset.pixel_std)
        feats = extract_features(torch.from_numpy(frames), encoder)
        num_objects = int(clip.labels.max())
        first = labels_to_field(clip.labels[0], patch, num_objects)
        preds = propagate(feats, first, grid, cfg, force_py=force_py)
        pred_masks = np.stack(
            [field_to_labels(preds[t], grid, patch)
             for t in range(preds.shape[0])]
        )
        per_object, mean = region_jaccard(pred_masks, clip.labels)
        for oid, score in per_object.items():
            rows_out.append({"video_id": ci, "object_id": oid, "jaccard": score})
        rows_out.append({"video_id": ci, "object_id": -1, "jaccard": mean})
    return rows_out


def mean_jaccard(rows: list[dict]) -> float:
    vals = [r["jaccard"] for r in rows if r["object_id"] == -1]
    return float(np.mean(vals)) if vals else 0.0
