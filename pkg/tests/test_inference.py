"""Sliding-window fusion against a per-voxel oracle, and the Dice metric."""

import numpy as np
import pytest

from cascadeseg.inference import (dice_metric, fuse_predict, fusion_mask,
                                  softmax_probs)
from cascadeseg.sampler import extract_patch, patch_positions


def test_fusion_mask_structure():
    w = fusion_mask(16)
    assert w.shape == (16, 16, 16)
    assert set(np.unique(w)) == {1.0, 2.0}
    assert int((w == 2.0).sum()) == 8 ** 3
    assert np.all(w[4:12, 4:12, 4:12] == 2.0)
    assert w[0, 0, 0] == 1.0 and w[3, 8, 8] == 1.0
    with pytest.raises(ValueError):
        fusion_mask(18)


def _ramp_predict(num_classes, patch_edge):
    """Deterministic pure predictor: logits depend on patch and origin."""
    grid = np.linspace(-1.0, 1.0, patch_edge ** 3).reshape((patch_edge,) * 3)

    def predict(patch, origin):
        base = patch.astype(np.float64)
        return np.stack([base * (k + 1) * 0.3 + grid * 0.1 * k
                         + 0.01 * sum(origin) for k in range(num_classes)])

    return predict


def brute_force_fuse(predict, volume, patch_edge, stride, num_classes):
    """Per-voxel accumulation over patches in the same fixed order."""
    origins = patch_positions(volume.shape, patch_edge, stride)
    w = fusion_mask(patch_edge)
    patch_probs = {}
    for o in origins:
        patch = extract_patch(volume, o, patch_edge)
        patch_probs[o] = softmax_probs(predict(patch, o))

    d, h, ww = volume.shape
    probs = np.zeros((num_classes, d, h, ww), dtype=np.float64)
    for z in range(d):
        for y in range(h):
            for x in range(ww):
                num = np.zeros(num_classes, dtype=np.float64)
                den = 0.0
                for o in origins:
                    lz, ly, lx = z - o[0], y - o[1], x - o[2]
                    if 0 <= lz < patch_edge and 0 <= ly < patch_edge \
                            and 0 <= lx < patch_edge:
                        num += w[lz, ly, lx] * patch_probs[o][:, lz, ly, lx]
                        den += w[lz, ly, lx]
                probs[:, z, y, x] = num / den
    labels = np.argmax(probs, axis=0).astype(np.int64)
    return probs, labels


def test_fuse_predict_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    volume = rng.standard_normal((20, 16, 24))
    predict = _ramp_predict(3, 8)
    probs, labels = fuse_predict(predict, volume, 8, 4, 3)
    oracle_probs, oracle_labels = brute_force_fuse(predict, volume, 8, 4, 3)
    assert np.array_equal(probs, oracle_probs)
    assert np.array_equal(labels, oracle_labels)


def test_fused_channel_sums():
    rng = np.random.default_rng(1)
    volume = rng.standard_normal((17, 9, 13))  # awkward, padding everywhere
    probs, _ = fuse_predict(_ramp_predict(4, 8), volume, 8, 4, 4)
    assert probs.shape == (4, 17, 9, 13)
    assert np.all(np.abs(probs.sum(axis=0) - 1.0) <= 1e-9)


def test_fuse_predict_argmax_tie_lowest_class():
    def constant(patch, origin):
        return np.zeros((3,) + patch.shape)

    volume = np.zeros((8, 8, 8))
    _, labels = fuse_predict(constant, volume, 8, 4, 3)
    assert np.all(labels == 0)


def test_fuse_predict_validation():
    predict = _ramp_predict(3, 8)
    with pytest.raises(ValueError):
        fuse_predict(predict, np.zeros((4, 4)), 8, 4, 3)
    with pytest.raises(ValueError):
        fuse_predict(predict, np.zeros((0, 4, 4)), 8, 4, 3)
    with pytest.raises(ValueError):
        fuse_predict(predict, np.zeros((8, 8, 8)), 8, 4, 1)

    def wrong_shape(patch, origin):
        return np.zeros((3, 4, 4, 4))

    with pytest.raises(ValueError):
        fuse_predict(wrong_shape, np.zeros((8, 8, 8)), 8, 4, 3)


def test_dice_metric():
    a = np.array([[[0, 1], [1, 2]]])
    assert np.allclose(dice_metric(a, a, 3), [1.0, 1.0, 1.0])

    b = np.array([[[0, 1], [1, 0]]])
    d = dice_metric(a, b, 4)
    # class 2: present in a only -> 0; class 3 absent from both -> 1
    assert d[2] == 0.0
    assert d[3] == 1.0
    assert d[1] == pytest.approx(2 * 2 / (2 + 2))

    with pytest.raises(ValueError):
        dice_metric(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 2)
