"""Donor-mask reposing, donor pools, patch-masking baseline and conditioning dropout."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .raster import TextureMap

log = logging.getLogger(__name__)


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


@dataclass
class DonorConfig:
    iou_lo: float = 0.4
    iou_hi: float = 0.8
    pool_size: int = 10


@dataclass
class DonorPool:
    source_id: str
    donors: list = field(default_factory=list)  # [(donor_id, iou)]

    @property
    def empty(self):
        return not self.donors

    @property
    def ids(self):
        return [d for d, _ in self.donors]

    def to_json(self):
        return {"source_id": self.source_id, "donors": [{"id": d, "iou": float(v)} for d, v in self.donors]}

    @classmethod
    def from_json(cls, data):
        return cls(data["source_id"], [(d["id"], float(d["iou"])) for d in data["donors"]])


def build_donor_pool(
    source,
    candidates,
    iou_lo=0.4,
    iou_hi=0.8,
    pool_size=10,
    rng=None,
    source_id="source",
    candidate_ids=None,
):
    """Sample up to `pool_size` candidates whose IoU with `source` lies in [iou_lo, iou_hi].

    Bounds are inclusive.  An empty pool is returned (and logged) when nothing qualifies.
    """
    if not 0.0 <= iou_lo <= iou_hi <= 1.0:
        raise ConfigError(f"invalid IoU bounds [{iou_lo}, {iou_hi}]")
    rng = rng if rng is not None else np.random.default_rng()
    if candidate_ids is None:
        candidate_ids = [str(i) for i in range(len(candidates))]
    scores = [iou(source, c) for c in candidates]
    qualifying = [i for i, s in enumerate(scores) if iou_lo <= s <= iou_hi]
    if not qualifying:
        log.warning("donor pool for %s is empty (%d candidates)", source_id, len(candidates))
        return DonorPool(source_id)
    take = min(pool_size, len(qualifying))
    picked = rng.choice(len(qualifying), size=take, replace=False)
    return DonorPool(source_id, [(candidate_ids[qualifying[i]], scores[qualifying[i]]) for i in picked])


def apply_donor(texture, donor_mask):
    donor_mask = np.asarray(donor_mask, dtype=bool)
    if donor_mask.shape != texture.shape:
        raise InputError(f"donor mask {donor_mask.shape} does not match texture {texture.shape}")
    mask = texture.mask & donor_mask
    return TextureMap(np.where(mask[..., None], texture.pixels, 0.0), mask)


def random_patch_mask(texture, rng, max_patches=6, patch_size=64, n_patches=None, return_patches=False):
    """Zero out k non-overlapping square patches, k ~ U{1..max_patches} unless `n_patches` is given."""
    h, w = texture.shape
    if patch_size > min(h, w):
        raise InputError(f"patch size {patch_size} exceeds texture {h}x{w}")
    k = n_patches if n_patches is not None else (int(rng.integers(1, max_patches + 1)) if max_patches > 0 else 0)
    patches = []
    for _ in range(k):
        for _attempt in range(100):
            r = int(rng.integers(0, h - patch_size + 1))
            c = int(rng.integers(0, w - patch_size + 1))
            if all(
                r + patch_size <= pr or pr + patch_size <= r or c + patch_size <= pc or pc + patch_size <= c
                for pr, pc in patches
            ):
                patches.append((r, c))
                break
    mask = texture.mask.copy()
    for r, c in patches:
        mask[r : r + patch_size, c : c + patch_size] = False
    out = TextureMap(np.where(mask[..., None], texture.pixels, 0.0), mask)
    return (out, patches) if return_patches else out


class DropoutDecision(str, enum.Enum):
    DROP_ALL = "drop_all"
    DROP_TEXTURE = "drop_texture"
    DROP_FACE = "drop_face"
    DROP_POSE = "drop_pose"
    KEEP_ALL = "keep_all"


DROPOUT_ORDER = (
    DropoutDecision.DROP_ALL,
    DropoutDecision.DROP_TEXTURE,
    DropoutDecision.DROP_FACE,
    DropoutDecision.DROP_POSE,
    DropoutDecision.KEEP_ALL,
)


def sample_dropout(rng, p_all=0.05, p_tex=0.3, p_face=0.3, p_pose=0.1):
    """One uniform draw partitioned into five mutually exclusive branches."""
    probs = np.array([p_all, p_tex, p_face, p_pose], dtype=float)
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ConfigError(f"dropout probabilities must be nonnegative, got {probs.tolist()}")
    if probs.sum() > 1.0 + 1e-12:
        raise ConfigError(f"dropout probabilities sum to {probs.sum()} > 1")
    u = rng.random()
    edges = np.cumsum(probs)
    return DROPOUT_ORDER[int(np.searchsorted(edges, u, side="right"))]
