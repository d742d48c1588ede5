"""Volume file format, synthetic phantoms, and dataset splits.

Volumes live on disk as a raw little-endian blob next to a JSON sidecar
describing dims, element type, and voxel spacing.  The blob holds the
array in zyx row-major order; probability volumes add a leading channel
axis.  Keeping the format this dumb makes outputs hashable and easy to
load from any language.

Phantoms are tube-in-noise volumes with a deliberately imbalanced class
mix: one thick curved tube (class 1) and one thin tube (class 2) well
under a fifth of its size, so loss weighting and the foreground-biased
sampler have something real to push against.
"""

import json
import os
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_TAG_FOR = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}


def _sidecar_path(path: str) -> str:
    return path + ".json"


def write_volume(path: str, array: np.ndarray, spacing_um=(1.0, 1.0, 1.0)):
    """Write a 3-d volume or 4-d channel-leading stack as blob + sidecar."""
    arr = np.asarray(array)
    if arr.ndim not in (3, 4):
        raise ValueError(f"write_volume: expected 3-d or 4-d array, got {arr.ndim}-d")
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise ValueError(f"write_volume: unsupported dtype {arr.dtype}, use float32 or uint8")
    meta = {
        "dims": list(arr.shape),
        "dtype": tag,
        "spacing_um": [float(s) for s in spacing_um],
        "order": "zyx-row-major",
        "endianness": "little",
    }
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_volume(path: str):
    """Read blob + sidecar, returning (array, meta dict)."""
    side = _sidecar_path(path)
    if not os.path.exists(side):
        raise ValueError(f"read_volume: missing sidecar {side}")
    with open(side) as f:
        meta = json.load(f)
    tag = meta.get("dtype")
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"read_volume: unknown dtype tag {tag!r} in {side}")
    dims = tuple(int(d) for d in meta["dims"])
    dt = _DTYPE_TAGS[tag]
    want = int(np.prod(dims)) * dt.itemsize
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != want:
        raise ValueError(
            f"read_volume: {path} holds {len(raw)} bytes, expected {want} "
            f"for dims {list(dims)} of {tag}")
    arr = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    return arr, meta


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    spacing_um: Tuple[float, float, float] = (4.0, 4.0, 4.0)
    large_radius: float = 6.0
    thin_radius: float = 1.6
    noise_sigma: float = 0.05


def _tube_mask(dims, centers_yx, radius):
    """Voxels within radius of a curve given as per-step (z, y, x) points."""
    mask = np.zeros(dims, dtype=bool)
    zs = np.clip(np.round(centers_yx[:, 0]).astype(int), 0, dims[0] - 1)
    ys = np.clip(np.round(centers_yx[:, 1]).astype(int), 0, dims[1] - 1)
    xs = np.clip(np.round(centers_yx[:, 2]).astype(int), 0, dims[2] - 1)
    mask[zs, ys, xs] = True
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= radius


def phantom_generate(spec: PhantomSpec):
    """Build one phantom volume: (image float32, labels uint8).

    Class 1 is a thick tube curving through the volume, class 2 a thin
    straight tube off to one side.  The image is class-dependent
    intensity plus noise and a gentle axial brightness ramp.  Raises if
    the thin class is not rare (under 0.2 of class-1 voxels).
    """
    d, h, w = spec.dims
    if min(d, h, w) < 16:
        raise ValueError(f"phantom_generate: dims {spec.dims} too small, need >= 16")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11]))

    t = np.arange(0, d - 1 + 1e-9, 0.25)
    amp = min(h, w) * rng.uniform(0.12, 0.18)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yc = h * 0.5 + amp * np.sin(2.0 * np.pi * t / d + phase)
    xc = w * 0.5 + amp * np.cos(1.5 * np.pi * t / d + phase)
    large = _tube_mask(spec.dims, np.stack([t, yc, xc], axis=1), spec.large_radius)

    # thin tube runs near one face, sloping so patches cannot memorize a column
    y2 = h * 0.18 + (t / max(d - 1, 1)) * h * 0.1
    x2 = w * 0.75 + amp * 0.2 * np.sin(2.0 * np.pi * t / d)
    thin = _tube_mask(spec.dims, np.stack([t, y2, x2], axis=1), spec.thin_radius)
    thin &= ~large

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[large] = 1
    labels[thin] = 2

    n1 = int(large.sum())
    n2 = int(thin.sum())
    if n1 == 0 or n2 == 0:
        raise ValueError("phantom_generate: a tube class came out empty")
    if n2 >= 0.2 * n1:
        raise ValueError(
            f"phantom_generate: thin class has {n2} voxels vs {n1}, not rare enough")

    levels = np.array([0.15, 0.55, 0.85], dtype=np.float64)
    image = levels[labels]
    image += np.linspace(0.0, 0.1, d)[:, None, None]
    image += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def crop_to_extents(image: np.ndarray, labels: np.ndarray, margin: int = 4):
    """Crop both arrays to the labeled bounding box plus a margin."""
    if image.shape != labels.shape:
        raise ValueError(
            f"crop_to_extents: image {image.shape} vs labels {labels.shape}")
    fg = np.argwhere(labels > 0)
    if fg.size == 0:
        raise ValueError("crop_to_extents: no labeled voxels")
    lo = np.maximum(fg.min(axis=0) - margin, 0)
    hi = np.minimum(fg.max(axis=0) + 1 + margin, labels.shape)
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    return image[sl].copy(), labels[sl].copy()


def downsample_volume(image: np.ndarray, labels: np.ndarray):
    """Halve resolution: trilinear for the image, nearest for labels."""
    img = ndimage.zoom(np.asarray(image, dtype=np.float32), 0.5, order=1)
    lab = ndimage.zoom(labels, 0.5, order=0)
    if img.shape != lab.shape:
        raise ValueError(
            f"downsample_volume: shapes diverged, {img.shape} vs {lab.shape}")
    return img, lab.astype(labels.dtype)


def split_volumes(volume_ids: Sequence[str], seed: int = 0):
    """Deterministic 70/10/20 split into (train, val, test) id lists.

    The shuffle depends only on the seed and the sorted id list, so the
    same corpus always splits the same way; every id lands in exactly
    one part and val/test are non-empty whenever at least 3 ids exist.
    """
    ids = sorted(volume_ids)
    n = len(ids)
    if n < 1:
        raise ValueError("split_volumes: no volume ids")
    if len(set(ids)) != n:
        raise ValueError("split_volumes: duplicate volume ids")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n)
    shuffled = [ids[i] for i in order]
    if n < 3:
        return shuffled, [], []
    n_val = max(1, int(round(0.1 * n)))
    n_test = max(1, int(round(0.2 * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"split_volumes: {n} volumes cannot fill a 70/10/20 split")
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])
