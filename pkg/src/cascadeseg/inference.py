"""Sliding-window inference with center-weighted patch fusion.

Full volumes rarely fit through the network in one shot, so prediction
runs on overlapping patches laid out on the training tiling grid.  Each
patch contributes class probabilities weighted by a fusion mask that
trusts the patch center twice as much as its border, which suppresses
the halo artifacts convolution padding leaves near patch edges.

Patches are visited in one fixed z-major order and accumulated in
float64, so fused output is reproducible bit for bit across runs.
"""

import numpy as np

from .sampler import extract_patch, patch_positions


def softmax_probs(logits):
    """Channel softmax of a [K, d, h, w] logits array, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def fusion_mask(patch_edge: int) -> np.ndarray:
    """Weight cube for patch fusion: ones, with the centered half-edge
    cube raised to 2.  Requires the edge divisible by 4 so the center
    cube sits on integer bounds."""
    if patch_edge % 4 != 0:
        raise ValueError(f"fusion_mask: patch edge {patch_edge} not divisible by 4")
    w = np.ones((patch_edge,) * 3, dtype=np.float64)
    lo = patch_edge // 4
    hi = lo + patch_edge // 2
    w[lo:hi, lo:hi, lo:hi] = 2.0
    return w


def fuse_predict(predict, volume, patch_edge: int, stride: int, num_classes: int):
    """Predict a full volume by fusing overlapping patch predictions.

    predict maps (patch [P,P,P] float array, origin (z,y,x)) to logits
    [K,P,P,P]; the origin lets callers crop side inputs to the same
    window.  Patches beyond the volume edge read as zeros and the padded
    region is dropped before normalization.

    Returns (probs [K,D,H,W] float64, labels [D,H,W] int64).  Ties in
    the argmax go to the lowest class index.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"fuse_predict: expected 3-d volume, got shape {vol.shape}")
    if any(e <= 0 for e in vol.shape):
        raise ValueError(f"fuse_predict: empty volume with shape {vol.shape}")
    if num_classes < 2:
        raise ValueError(f"fuse_predict: need at least 2 classes, got {num_classes}")

    origins = patch_positions(vol.shape, patch_edge, stride)
    pad_shape = tuple(max(o[i] for o in origins) + patch_edge for i in range(3))
    num = np.zeros((num_classes,) + pad_shape, dtype=np.float64)
    den = np.zeros(pad_shape, dtype=np.float64)
    w = fusion_mask(patch_edge)

    for origin in origins:
        patch = extract_patch(vol, origin, patch_edge)
        logits = np.asarray(predict(patch, origin))
        if logits.shape != (num_classes, patch_edge, patch_edge, patch_edge):
            raise ValueError(
                f"fuse_predict: predict returned shape {logits.shape}, expected "
                f"{(num_classes, patch_edge, patch_edge, patch_edge)}")
        probs = softmax_probs(logits)
        z, y, x = origin
        sl = (slice(z, z + patch_edge), slice(y, y + patch_edge),
              slice(x, x + patch_edge))
        num[(slice(None),) + sl] += w * probs
        den[sl] += w

    d, h, ww = vol.shape
    num = num[:, :d, :h, :ww]
    den = den[:d, :h, :ww]
    probs = num / den
    labels = np.argmax(probs, axis=0).astype(np.int64)
    return probs, labels


def dice_metric(pred_labels, true_labels, num_classes: int) -> np.ndarray:
    """Per-class hard Dice overlap of two label volumes.

    A class absent from both volumes scores 1.0: nothing to find and
    nothing found is a perfect outcome, and it keeps per-class means
    stable on sparse validation crops.
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(
            f"dice_metric: shape mismatch {pred.shape} vs {true.shape}")
    out = np.empty(num_classes, dtype=np.float64)
    for k in range(num_classes):
        p = pred == k
        t = true == k
        total = int(p.sum()) + int(t.sum())
        if total == 0:
            out[k] = 1.0
        else:
            out[k] = 2.0 * int((p & t).sum()) / total
    return out
