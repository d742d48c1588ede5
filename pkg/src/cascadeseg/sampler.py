"""Patch planning, extraction and class-balanced acceptance.

Training patches tile each volume on a fixed stride grid; a patch is kept
outright when it carries enough foreground, otherwise it survives a
roulette draw with a small acceptance probability. Each standard patch
has an expanded companion centered on it whose edge is the standard edge
scaled by the plan factor and rounded up so every pooling level divides
it. Out-of-volume voxels read as zero, which is the background class for
label volumes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .nn import downsample_labels_nearest, one_hot

EXPAND_FACTORS = (1.0, 1.25, 1.5, 1.75)


def round_up_multiple(value: int, base: int) -> int:
    return int(-(-value // base) * base)


def expanded_edge(patch_edge: int, factor: float, levels: int) -> int:
    """round(factor * edge), then up to a multiple of 2^(levels-1)."""
    raw = int(round(factor * patch_edge))
    return round_up_multiple(raw, 2 ** (levels - 1))


@dataclass(frozen=True)
class PatchPlan:
    patch_edge: int = 32
    expand_factor: float = 1.0
    stride: int = 16
    fg_threshold: float = 0.01
    bg_accept_prob: float = 0.3
    seed: int = 0
    levels: int = 4

    def validate(self):
        if self.patch_edge <= 0 or self.stride <= 0:
            raise ValueError("PatchPlan: patch_edge and stride must be positive")
        if not any(abs(self.expand_factor - f) < 1e-9 for f in EXPAND_FACTORS):
            raise ValueError(
                f"PatchPlan: expand_factor must be one of {EXPAND_FACTORS}, "
                f"got {self.expand_factor}")
        scale = 2 ** (self.levels - 1)
        if self.patch_edge % scale:
            raise ValueError(
                f"PatchPlan: patch_edge {self.patch_edge} not divisible by {scale}")
        if (self.expanded_edge - self.patch_edge) % 2:
            raise ValueError(
                f"PatchPlan: expanded edge {self.expanded_edge} minus patch edge "
                f"{self.patch_edge} must be even for centering")
        if not 0 <= self.bg_accept_prob <= 1:
            raise ValueError("PatchPlan: bg_accept_prob outside [0, 1]")

    @property
    def expanded_edge(self) -> int:
        return expanded_edge(self.patch_edge, self.expand_factor, self.levels)


@dataclass(frozen=True)
class PatchRecord:
    volume_id: str
    origin: tuple
    image: np.ndarray        # [P,P,P] float
    labels: np.ndarray       # [P,P,P] int64
    image_exp: np.ndarray    # [E,E,E] float
    labels_exp: np.ndarray   # [E,E,E] int64


def tile_positions(extent: int, patch_edge: int, stride: int) -> list[int]:
    """Origins 0, stride, ... up to ceil((extent-edge)/stride)*stride.

    The final origin may overrun; extraction pads with zeros. A volume no
    larger than the patch yields the single origin 0.
    """
    if extent <= patch_edge:
        return [0]
    last = round_up_multiple(extent - patch_edge, stride)
    return list(range(0, last + 1, stride))


def patch_positions(dims, patch_edge: int, stride: int) -> list[tuple]:
    """All origin triples in z-major (slowest axis first) order."""
    axes = [tile_positions(int(d), patch_edge, stride) for d in dims]
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def extract_patch(volume: np.ndarray, origin, size: int, pad_value=0) -> np.ndarray:
    """Copy a cubic window, padding out-of-volume voxels with pad_value."""
    out = np.full((size, size, size), pad_value, dtype=volume.dtype)
    src, dst = [], []
    for ax in range(3):
        o = int(origin[ax])
        lo, hi = max(o, 0), min(o + size, volume.shape[ax])
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def expanded_origin(origin, patch_edge: int, exp_edge: int) -> tuple:
    off = (exp_edge - patch_edge) // 2
    return tuple(int(o) - off for o in origin)


def extract_pair(image: np.ndarray, labels: np.ndarray, origin,
                 plan: PatchPlan) -> PatchRecord:
    """Standard patch plus its centered expanded companion."""
    p, e = plan.patch_edge, plan.expanded_edge
    eo = expanded_origin(origin, p, e)
    return PatchRecord(
        volume_id="",
        origin=tuple(int(o) for o in origin),
        image=extract_patch(image, origin, p),
        labels=extract_patch(labels, origin, p).astype(np.int64),
        image_exp=extract_patch(image, eo, e),
        labels_exp=extract_patch(labels, eo, e).astype(np.int64),
    )


def foreground_fraction(label_patch: np.ndarray) -> float:
    return float(np.count_nonzero(label_patch)) / label_patch.size


def accept_patch(label_patch: np.ndarray, plan: PatchPlan, rng) -> bool:
    """Keep foreground-bearing patches; background survives a roulette draw."""
    if foreground_fraction(label_patch) >= plan.fg_threshold:
        return True
    return bool(rng.random() < plan.bg_accept_prob)


def volume_rng(plan: PatchPlan, volume_id: str) -> np.random.Generator:
    """Independent, reproducible stream per (plan seed, volume id)."""
    return np.random.default_rng(
        np.random.SeedSequence([plan.seed, zlib.crc32(volume_id.encode())]))


def sample_volume(image: np.ndarray, labels: np.ndarray, plan: PatchPlan,
                  volume_id: str, augment_rng=None) -> list[PatchRecord]:
    """Deterministic accepted-patch list for one volume.

    Grid order is z-major; the acceptance stream is keyed by plan seed and
    volume id, so volumes can be sampled concurrently. When augment_rng is
    given each accepted pair is augmented before packing.
    """
    plan.validate()
    if image.shape != labels.shape:
        raise ValueError(f"sample_volume: image {image.shape} vs labels {labels.shape}")
    rng = volume_rng(plan, volume_id)
    out = []
    for origin in patch_positions(image.shape, plan.patch_edge, plan.stride):
        lab = extract_patch(labels, origin, plan.patch_edge)
        if not accept_patch(lab, plan, rng):
            continue
        rec = replace(extract_pair(image, labels, origin, plan), volume_id=volume_id)
        if augment_rng is not None:
            rec = augment_record(rec, augment_rng)
        out.append(rec)
    return out


def supervision_targets(record: PatchRecord, num_classes: int, dtype=np.float64):
    """(standard one-hot [K,P,P,P], half-res expanded one-hot [K,E/2,...])."""
    std = one_hot(record.labels, num_classes, dtype=dtype)
    lab2 = downsample_labels_nearest(record.labels_exp, 2)
    return std, one_hot(lab2, num_classes, dtype=dtype)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def apply_augment(image: np.ndarray, labels: np.ndarray, quarter_turns: int,
                  scale: float):
    """Rotate by 90-degree multiples about the z axis, then rescale about
    the volume center (trilinear for the image, nearest for labels).
    The identity draw returns bitwise-equal copies."""
    k = int(quarter_turns) % 4
    img = np.rot90(image, k, axes=(1, 2)).copy() if k else image.copy()
    lab = np.rot90(labels, k, axes=(1, 2)).copy() if k else labels.copy()
    if scale == 1.0:
        return img, lab
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in img.shape],
                         indexing="ij")
    centers = [(n - 1) / 2.0 for n in img.shape]
    sample = [(c - ctr) / scale + ctr for c, ctr in zip(coords, centers)]
    img = ndimage.map_coordinates(img, sample, order=1, mode="constant", cval=0.0)
    lab = ndimage.map_coordinates(lab, sample, order=0, mode="constant", cval=0)
    return img.astype(image.dtype), lab.astype(labels.dtype)


def augment_record(record: PatchRecord, rng) -> PatchRecord:
    """One draw per record: rotation multiple and isotropic scale in [0.9, 1.1].

    The standard and expanded patches share a center, so applying the same
    transform to each about its own center keeps them geometrically aligned.
    """
    k = int(rng.integers(0, 4))
    scale = float(rng.uniform(0.9, 1.1))
    img, lab = apply_augment(record.image, record.labels, k, scale)
    img_e, lab_e = apply_augment(record.image_exp, record.labels_exp, k, scale)
    return replace(record, image=img, labels=lab, image_exp=img_e, labels_exp=lab_e)
