"""Shared test utilities: finite-difference harnesses and tiny configs."""

import hashlib

import numpy as np

from cascadeseg.tensor import Tensor, backward
from cascadeseg.unet import UNet, UNetConfig, dual_patch_config, guided_config

FD_H = 1e-5
FD_TOL = 1e-4


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def fd_check(fn, arrays, rng, coords_per_input: int = 4, h: float = FD_H,
             tol: float = FD_TOL):
    """Central-difference check of fn against its reverse-mode gradients.

    fn maps a list of Tensors (matching arrays) to a scalar Tensor and
    must be re-callable.  A random subset of coordinates per input is
    probed.  Arrays must be float64.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = fn(leaves)
    assert loss.data.shape == (), f"fd_check: loss shape {loss.data.shape}"
    backward(loss)

    for li, base in enumerate(arrays):
        grad = leaves[li].grad
        if grad is None:
            grad = np.zeros_like(base)
        n = base.size
        idxs = rng.choice(n, size=min(coords_per_input, n), replace=False)
        for idx in idxs:
            others = [a.copy() for a in arrays]
            others[li] = base.copy()
            others[li].flat[idx] += h
            fp = float(fn([Tensor(a) for a in others]).data)
            others[li] = base.copy()
            others[li].flat[idx] -= h
            fm = float(fn([Tensor(a) for a in others]).data)
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad.flat[idx])
            err = rel_err(analytic, numeric)
            assert err <= tol, (
                f"fd mismatch input {li} coord {idx}: "
                f"analytic {analytic:.10g} numeric {numeric:.10g} err {err:.3g}")


def fd_check_net(loss_fn, net: UNet, rng, n_coords: int = 10, h: float = FD_H,
                 tol: float = FD_TOL, param_filter=None):
    """Central-difference check of network parameter gradients.

    loss_fn() runs a fresh forward pass off the net's current weights
    and returns a scalar Tensor.  n_coords random (parameter, index)
    pairs are probed by perturbing weights in place.  param_filter
    restricts the probed parameters by name; gated architectures need
    that because their level-1 gradients are defined against a
    different loss than the rest of the network.
    """
    params = [p for p in net.parameters()
              if param_filter is None or param_filter(p.name)]
    net.zero_grads()
    loss = loss_fn()
    backward(loss)
    grads = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for p in params}

    flat = [(p, i) for p in params for i in range(p.data.size)]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    for pick in picks:
        p, idx = flat[pick]
        orig = float(p.data.flat[idx])
        p.data.flat[idx] = orig + h
        fp = float(loss_fn().data)
        p.data.flat[idx] = orig - h
        fm = float(loss_fn().data)
        p.data.flat[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(grads[p.name].flat[idx])
        err = rel_err(analytic, numeric)
        assert err <= tol, (
            f"fd mismatch {p.name}[{idx}]: analytic {analytic:.10g} "
            f"numeric {numeric:.10g} err {err:.3g}")


def tiny_config(levels: int = 3, num_classes: int = 3) -> UNetConfig:
    enc = (2, 3, 4, 5)[:levels]
    dec = (2, 3, 4)[:levels - 1]
    return UNetConfig(levels=levels, encoder_channels=enc,
                      decoder_channels=dec, num_classes=num_classes)


def tiny_dual(seed: int = 0, dtype=np.float64) -> UNet:
    return UNet(dual_patch_config(tiny_config()), seed=seed, dtype=dtype)


def tiny_guided(seed: int = 0, dtype=np.float64) -> UNet:
    return UNet(guided_config(tiny_config()), seed=seed, dtype=dtype)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
