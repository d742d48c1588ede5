"""Patch-based training loops.

One trainer covers the three network variants: the plain U-net, the
dual-patch net with its gated wide-context branch, and the guided net
that takes a coarse segmentation pyramid as side input.  Each training
example is a single patch (batch of one), which keeps peak memory at
the patch budget the memory ledger models.

An epoch is a reshuffled pass over the accepted patch list; the list
itself is sampled once up front so acceptance decisions, augmentation,
and therefore the whole run are reproducible from the plan seed.
"""

import csv
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad
from .losses import class_weights, combined_loss
from .inference import dice_metric, fuse_predict
from .sampler import PatchPlan, sample_volume, supervision_targets
from .unet import UNet


@dataclass
class AdamConfig:
    lr: float = 9e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction over an ordered parameter list."""

    def __init__(self, params, config: Optional[AdamConfig] = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        cfg = self.config
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"adam: parameter {p.name} has no gradient")
            g = p.grad
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            arr = p.data
            arr -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


class StopMonitor:
    """Early stopping on a higher-is-better metric.

    Signals a stop once the count of epochs since the last improvement
    exceeds the patience."""

    def __init__(self, patience: int = 30):
        if patience < 0:
            raise ValueError(f"patience must be >= 0, got {patience}")
        self.patience = patience
        self.best = -math.inf
        self.since_improvement = 0

    def update(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement > self.patience


@dataclass
class TrainConfig:
    epochs: int = 60
    patience: int = 30
    adam: AdamConfig = field(default_factory=AdamConfig)
    num_classes: int = 3
    seed: int = 0
    out_dir: Optional[str] = None
    val_stride: Optional[int] = None  # defaults to half the patch edge


@dataclass
class TrainResult:
    history: list
    best_metric: float
    best_epoch: int
    checkpoint_dir: Optional[str]


def count_class_voxels(label_volumes: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Voxel count per class over whole volumes, for loss weighting.

    Counted once on the full training corpus rather than per patch, so
    the weighting reflects the real imbalance and not the sampler's
    foreground bias."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for lab in label_volumes:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    if np.any(counts == 0):
        missing = [int(k) for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"count_class_voxels: classes {missing} absent from corpus")
    return counts


def _patch_tensor(image: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(image, dtype=dtype)[None, None])


def train_step_plain(net: UNet, record, weights: np.ndarray, adam: Adam) -> float:
    """One gradient step of the plain U-net on a sampled patch."""
    net.zero_grads()
    x = _patch_tensor(record.image, net.dtype)
    logits = net.forward(x)
    loss = combined_loss(logits, record.labels[None], weights)
    backward(loss)
    adam.step()
    return float(loss.data)


def train_step_dual(net: UNet, record, weights: np.ndarray, adam: Adam):
    """One gradient step of the dual-patch net.

    Both branch losses are summed into a single backward pass; the wide
    branch's first level runs detached, so its loss never reaches the
    level-1 parameters.  Returns (standard loss, wide-branch loss)."""
    net.zero_grads()
    x_std = _patch_tensor(record.image, net.dtype)
    x_exp = _patch_tensor(record.image_exp, net.dtype)
    out_std, out_exp = net.forward_dual(x_std, x_exp)
    exp_half = record.labels_exp[::2, ::2, ::2]
    loss_std = combined_loss(out_std, record.labels[None], weights)
    loss_exp = combined_loss(out_exp, np.ascontiguousarray(exp_half)[None], weights)
    total = loss_std + loss_exp
    backward(total)
    adam.step()
    return float(loss_std.data), float(loss_exp.data)


def train_step_guided(net: UNet, record, guidance, weights: np.ndarray, adam: Adam) -> float:
    """One gradient step of the guided net; guidance is the one-hot
    pyramid cropped to the record's window."""
    net.zero_grads()
    x = _patch_tensor(record.image, net.dtype)
    gtens = [Tensor(np.ascontiguousarray(g, dtype=net.dtype)[None]) for g in guidance]
    logits = net.forward_with_guidance(x, gtens)
    loss = combined_loss(logits, record.labels[None], weights)
    backward(loss)
    adam.step()
    return float(loss.data)


def _infer_kind(net: UNet) -> str:
    if net.config.guidance_classes > 0:
        return "guided"
    if net.config.aux_head_levels:
        return "dual"
    return "unet"


def _validate(net: UNet, val_set, plan: PatchPlan, tcfg: TrainConfig,
              guidance_provider) -> np.ndarray:
    """Mean per-class Dice over the validation volumes via sliding
    fusion.  Runs in eval mode with gradients off."""
    stride = tcfg.val_stride or plan.patch_edge // 2
    k = tcfg.num_classes
    per_volume = []
    net.eval()
    with no_grad():
        for vid, image, labels in val_set:
            if guidance_provider is None:
                def predict(patch, origin):
                    out = net.forward(_patch_tensor(patch, net.dtype))
                    return out.data[0]
            else:
                def predict(patch, origin, _vid=vid):
                    pyr = guidance_provider(_vid, origin, plan.patch_edge)
                    gt = [Tensor(np.ascontiguousarray(g, dtype=net.dtype)[None])
                          for g in pyr]
                    out = net.forward_with_guidance(_patch_tensor(patch, net.dtype), gt)
                    return out.data[0]
            _, pred = fuse_predict(predict, image, plan.patch_edge, stride, k)
            per_volume.append(dice_metric(pred, labels, k))
    net.train()
    return np.mean(per_volume, axis=0)


def _write_history(path: str, history, num_classes: int):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "train_loss"] + [f"val_dice_c{k}" for k in range(num_classes)])
        for row in history:
            wr.writerow(row)


def train_network(net: UNet, train_set, val_set, plan: PatchPlan,
                  tcfg: TrainConfig,
                  guidance_provider: Optional[Callable] = None) -> TrainResult:
    """Train a network variant on (volume_id, image, labels) triples.

    The variant is read off the network config.  Guided nets need a
    guidance_provider(volume_id, origin, edge) returning the one-hot
    pyramid for that window; it is used for training patches and for
    validation windows alike.

    Writes history.csv and a best/ checkpoint under tcfg.out_dir when
    set.  The checkpoint tracks the best validation foreground Dice.
    """
    kind = _infer_kind(net)
    if kind == "guided" and guidance_provider is None:
        raise ValueError("train_network: guided net needs a guidance_provider")

    records = []
    for vid, image, labels in train_set:
        aug = np.random.default_rng(
            np.random.SeedSequence([plan.seed, 1, zlib.crc32(vid.encode())]))
        records.extend(sample_volume(image, labels, plan, vid, augment_rng=aug))
    if not records:
        raise ValueError("train_network: sampler accepted no patches")

    counts = count_class_voxels([lab for _, _, lab in train_set], tcfg.num_classes)
    weights = class_weights(counts)
    guidance_cache = {}
    if kind == "guided":
        for rec in records:
            key = (rec.volume_id, rec.origin)
            guidance_cache[key] = guidance_provider(rec.volume_id, rec.origin,
                                                    plan.patch_edge)

    adam = Adam(net.parameters(), tcfg.adam)
    monitor = StopMonitor(tcfg.patience)
    history = []
    best_metric = -math.inf
    best_epoch = -1
    ckpt_dir = os.path.join(tcfg.out_dir, "best") if tcfg.out_dir else None
    if tcfg.out_dir:
        os.makedirs(tcfg.out_dir, exist_ok=True)

    net.train()
    for epoch in range(tcfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([tcfg.seed, epoch])).permutation(len(records))
        losses = []
        for idx in order:
            rec = records[idx]
            if kind == "unet":
                losses.append(train_step_plain(net, rec, weights, adam))
            elif kind == "dual":
                ls, le = train_step_dual(net, rec, weights, adam)
                losses.append(ls + le)
            else:
                g = guidance_cache[(rec.volume_id, rec.origin)]
                losses.append(train_step_guided(net, rec, g, weights, adam))

        if val_set:
            val_dice = _validate(net, val_set, plan, tcfg, guidance_provider)
        else:
            val_dice = np.full(tcfg.num_classes, np.nan)
        metric = float(np.mean(val_dice[1:])) if val_set else math.nan
        history.append([epoch, float(np.mean(losses))] + [float(v) for v in val_dice])
        if tcfg.out_dir:
            _write_history(os.path.join(tcfg.out_dir, "history.csv"), history,
                           tcfg.num_classes)

        improved = val_set and metric > best_metric
        if improved or not val_set:
            best_metric = metric
            best_epoch = epoch
            if ckpt_dir:
                net.save(ckpt_dir)
        if val_set and monitor.update(metric):
            break

    return TrainResult(history=history, best_metric=best_metric,
                       best_epoch=best_epoch, checkpoint_dir=ckpt_dir)
