"""3D U-net builder with three forward modes.

One parameter set serves three call paths:

* forward(x): plain encoder/decoder U-net, logits at full resolution.
* forward_dual(std, exp): the standard patch runs the full net; the
  expanded companion patch reruns the encoder with level 1 under no_grad
  (its parameters receive no gradient from that pass), skips decoder
  level 1 entirely, and emits logits from an auxiliary head at decoder
  level 2 (half resolution).
* forward_with_guidance(x, pyramid): decoder-guided variant; a one-hot
  prediction pyramid is concatenated at the start of every decoder level.
  The encoder never sees the guidance.

Blocks are conv(3x3x3) + batchnorm + relu, twice per level. Weights use
fan-in uniform init, biases start at zero, norm scales at one.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .nn import (BatchNormState, Parameter, batchnorm3d, conv3d, maxpool3d,
                 relu, upsample_nearest3d)
from .tensor import ShapeError, Tensor, concat, no_grad


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    encoder_channels: tuple = (8, 16, 32, 64)
    decoder_channels: tuple = (8, 8, 16)
    in_channels: int = 1
    num_classes: int = 3
    aux_head_levels: tuple = ()
    guidance_classes: int = 0       # >0 enables decoder guidance concatenation

    def validate(self):
        if self.levels < 2:
            raise ValueError(f"UNetConfig: need at least 2 levels, got {self.levels}")
        if len(self.encoder_channels) != self.levels:
            raise ValueError(
                f"UNetConfig: {self.levels} levels need {self.levels} encoder channel "
                f"counts, got {self.encoder_channels}")
        if len(self.decoder_channels) != self.levels - 1:
            raise ValueError(
                f"UNetConfig: {self.levels} levels need {self.levels - 1} decoder channel "
                f"counts, got {self.decoder_channels}")
        if any(c <= 0 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("UNetConfig: channel counts must be positive")
        if self.in_channels <= 0 or self.num_classes < 2:
            raise ValueError("UNetConfig: need in_channels >= 1 and num_classes >= 2")
        for l in self.aux_head_levels:
            if not 2 <= l <= self.levels - 1:
                raise ValueError(f"UNetConfig: aux head level {l} outside [2, {self.levels - 1}]")
        if self.guidance_classes not in (0, self.num_classes):
            raise ValueError(
                f"UNetConfig: guidance_classes must be 0 or num_classes, got {self.guidance_classes}")

    # channel arithmetic used by both the builder and the memory ledger

    def encoder_in_channels(self, level: int) -> int:
        return self.in_channels if level == 1 else self.encoder_channels[level - 2]

    def upsample_channels(self, level: int) -> int:
        """Channels arriving at decoder level `level` from below."""
        if level == self.levels - 1:
            return self.encoder_channels[self.levels - 1]
        return self.decoder_channels[level]

    def decoder_in_channels(self, level: int) -> int:
        c = self.upsample_channels(level) + self.encoder_channels[level - 1]
        return c + self.guidance_classes


DESK_CONFIG = UNetConfig()
FULL_SCALE_CONFIG = UNetConfig(
    levels=5,
    encoder_channels=(16, 32, 64, 128, 128),
    decoder_channels=(16, 16, 32, 64),
)


def dual_patch_config(base: UNetConfig) -> UNetConfig:
    """Variant of `base` with the half-resolution auxiliary head attached."""
    return UNetConfig(**{**asdict(base), "aux_head_levels": (2,)})


def guided_config(base: UNetConfig) -> UNetConfig:
    """Variant of `base` expecting a one-hot guidance pyramid in the decoder."""
    return UNetConfig(**{**asdict(base), "guidance_classes": base.num_classes})


def param_level(name: str) -> int:
    """Resolution level a parameter belongs to, parsed from its name."""
    part = name.split(".")[1]
    if not part.startswith("l"):
        raise ValueError(f"param_level: cannot parse {name!r}")
    return int(part[1:])


_DTYPE_TAGS = {"f32": np.float32, "f64": np.float64}


class UNet:
    """Parameter container plus the three forward passes."""

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.training = True
        self.params: dict[str, Parameter] = {}
        self.norms: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)

        L = config.levels
        for l in range(1, L + 1):
            cin = config.encoder_in_channels(l)
            cout = config.encoder_channels[l - 1]
            self._add_block(f"enc.l{l}", cin, cout, rng)
        for l in range(L - 1, 0, -1):
            cin = config.decoder_in_channels(l)
            cout = config.decoder_channels[l - 1]
            self._add_block(f"dec.l{l}", cin, cout, rng)
        self._add_conv("head.l1", config.decoder_channels[0], config.num_classes, rng)
        for l in sorted(config.aux_head_levels):
            self._add_conv(f"head.l{l}", config.decoder_channels[l - 1], config.num_classes, rng)

    # ---- construction helpers ----

    def _add_conv(self, prefix: str, cin: int, cout: int, rng):
        fan_in = cin * 27
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3, 3)).astype(self.dtype)
        self.params[f"{prefix}.weight"] = Parameter(f"{prefix}.weight", w)
        self.params[f"{prefix}.bias"] = Parameter(
            f"{prefix}.bias", np.zeros(cout, dtype=self.dtype))

    def _add_block(self, prefix: str, cin: int, cout: int, rng):
        for i in (0, 1):
            self._add_conv(f"{prefix}.conv{i}", cin if i == 0 else cout, cout, rng)
            norm = BatchNormState(f"{prefix}.norm{i}", cout, dtype=self.dtype)
            self.norms[f"{prefix}.norm{i}"] = norm
            self.params[norm.scale.name] = norm.scale
            self.params[norm.shift.name] = norm.shift

    # ---- bookkeeping ----

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grads(self):
        for p in self.parameters():
            p.value.grad = np.zeros_like(p.value.data)

    # ---- forward passes ----

    def _check_input(self, x: Tensor, who: str):
        if x.data.ndim != 5:
            raise ShapeError(f"{who}: input must be [N,C,D,H,W], got {x.data.shape}")
        if x.data.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"{who}: expected {self.config.in_channels} input channels, got {x.data.shape[1]}")
        dims = x.data.shape[2:]
        for l in range(1, self.config.levels):
            scale = 2 ** (l - 1)
            for axis, d in zip("DHW", dims):
                if (d // scale) % 2:
                    raise ShapeError(
                        f"{who}: spatial dim {axis}={d} not poolable at level {l} "
                        f"(needs divisibility by {2 ** l})")

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        for i in (0, 1):
            x = conv3d(x, self.params[f"{prefix}.conv{i}.weight"].value,
                       self.params[f"{prefix}.conv{i}.bias"].value)
            x = batchnorm3d(x, self.norms[f"{prefix}.norm{i}"], self.training)
            x = relu(x)
        return x

    def _head(self, x: Tensor, level: int) -> Tensor:
        return conv3d(x, self.params[f"head.l{level}.weight"].value,
                      self.params[f"head.l{level}.bias"].value)

    def _encode(self, x: Tensor):
        L = self.config.levels
        skips = {}
        h = x
        for l in range(1, L + 1):
            h = self._block(h, f"enc.l{l}")
            if l < L:
                skips[l] = h
                h = maxpool3d(h)
        return h, skips

    def _decode_level(self, below: Tensor, skip: Tensor, level: int,
                      guidance: Tensor | None = None) -> Tensor:
        up = upsample_nearest3d(below)
        parts = [up, skip] if guidance is None else [up, skip, guidance]
        h = concat(parts, axis=1)
        return self._block(h, f"dec.l{level}")

    def forward(self, x: Tensor) -> Tensor:
        """Full U-net; logits at input resolution."""
        if self.config.guidance_classes:
            raise RuntimeError("forward: this network expects a guidance pyramid, "
                               "use forward_with_guidance")
        self._check_input(x, "forward")
        h, skips = self._encode(x)
        for l in range(self.config.levels - 1, 0, -1):
            h = self._decode_level(h, skips[l], l)
        return self._head(h, 1)

    def forward_dual(self, std: Tensor, exp: Tensor):
        """Standard patch through the full net plus a gated expanded pass.

        The expanded pass computes level-1 encoder features without
        gradient tracking, pools, continues normally, stops decoding at
        level 2 and returns half-resolution logits from the auxiliary
        head there. Level-1 parameters see gradients only from `std`.
        """
        if 2 not in self.config.aux_head_levels:
            raise RuntimeError("forward_dual: config lacks the level-2 auxiliary head")
        logits_std = self.forward(std)

        self._check_input(exp, "forward_dual(expanded)")
        L = self.config.levels
        with no_grad():
            f1 = self._block(exp, "enc.l1")
            h = maxpool3d(f1)
        skips = {}
        for l in range(2, L + 1):
            h = self._block(h, f"enc.l{l}")
            if l < L:
                skips[l] = h
                h = maxpool3d(h)
        for l in range(L - 1, 1, -1):
            h = self._decode_level(h, skips[l], l)
        return logits_std, self._head(h, 2)

    def forward_with_guidance(self, x: Tensor, guidance) -> Tensor:
        """Decoder-guided forward; guidance[l-1] joins decoder level l.

        guidance entries are [N, K, D/2^(l-1), ...] arrays (or tensors);
        they are treated as constants and never reach the encoder.
        """
        if not self.config.guidance_classes:
            raise RuntimeError("forward_with_guidance: config has guidance disabled")
        self._check_input(x, "forward_with_guidance")
        L, K = self.config.levels, self.config.num_classes
        if len(guidance) != L - 1:
            raise ShapeError(
                f"forward_with_guidance: need {L - 1} pyramid levels, got {len(guidance)}")
        gts = []
        for l in range(1, L):
            g = guidance[l - 1]
            gt = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=self.dtype))
            scale = 2 ** (l - 1)
            want = (x.data.shape[0], K) + tuple(d // scale for d in x.data.shape[2:])
            if gt.data.shape != want:
                raise ShapeError(
                    f"forward_with_guidance: level {l} guidance shape {gt.data.shape}, "
                    f"expected {want}")
            gts.append(gt)
        h, skips = self._encode(x)
        for l in range(L - 1, 0, -1):
            h = self._decode_level(h, skips[l], l, guidance=gts[l - 1])
        return self._head(h, 1)

    # ---- checkpointing ----

    def _buffer_items(self):
        for name, st in self.norms.items():
            yield f"{name}.running_mean", st.running_mean
            yield f"{name}.running_var", st.running_var

    def save(self, directory: str):
        """Write manifest.json plus one raw little-endian blob per array."""
        os.makedirs(directory, exist_ok=True)
        dtag = "f32" if self.dtype == np.float32 else "f64"
        wire = "<f4" if dtag == "f32" else "<f8"
        entries = []
        for kind, items in (("param", ((p.name, p.data) for p in self.parameters())),
                            ("buffer", self._buffer_items())):
            for name, arr in items:
                fname = f"{name}.bin"
                with open(os.path.join(directory, fname), "wb") as f:
                    f.write(np.ascontiguousarray(arr, dtype=wire).tobytes())
                entries.append({"kind": kind, "name": name, "shape": list(arr.shape),
                                "dtype": dtag, "file": fname})
        manifest = {
            "format": "cascadeseg-checkpoint",
            "version": 1,
            "dtype": dtag,
            "config": _config_to_json(self.config),
            "norm_state": {n: {"initialized": st.initialized, "momentum": st.momentum,
                               "eps": st.eps} for n, st in self.norms.items()},
            "entries": entries,
        }
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "UNet":
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        if manifest.get("format") != "cascadeseg-checkpoint":
            raise ValueError(f"load: {directory} is not a checkpoint directory")
        dtype = _DTYPE_TAGS[manifest["dtype"]]
        wire = "<f4" if manifest["dtype"] == "f32" else "<f8"
        net = cls(_config_from_json(manifest["config"]), seed=0, dtype=dtype)
        for e in manifest["entries"]:
            with open(os.path.join(directory, e["file"]), "rb") as f:
                raw = f.read()
            want = int(np.prod(e["shape"])) * np.dtype(wire).itemsize if e["shape"] else np.dtype(wire).itemsize
            if len(raw) != want:
                raise ValueError(
                    f"load: blob {e['file']} has {len(raw)} bytes, expected {want}")
            arr = np.frombuffer(raw, dtype=wire).reshape(e["shape"]).astype(dtype)
            if e["kind"] == "param":
                p = net.params[e["name"]]
                if list(p.data.shape) != e["shape"]:
                    raise ValueError(f"load: shape mismatch for {e['name']}")
                p.value.data = arr.copy()
            else:
                norm_name, field_name = e["name"].rsplit(".", 1)
                setattr(net.norms[norm_name], field_name, arr.copy())
        for name, meta in manifest["norm_state"].items():
            st = net.norms[name]
            st.initialized = bool(meta["initialized"])
            st.momentum = float(meta["momentum"])
            st.eps = float(meta["eps"])
        return net

    def digest(self) -> str:
        """Stable content hash over config, parameters and buffers."""
        h = hashlib.sha256()
        h.update(json.dumps(_config_to_json(self.config), sort_keys=True).encode())
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for name, arr in self._buffer_items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _config_to_json(cfg: UNetConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _config_from_json(d: dict) -> UNetConfig:
    kw = dict(d)
    for k in ("encoder_channels", "decoder_channels", "aux_head_levels"):
        kw[k] = tuple(kw[k])
    return UNetConfig(**kw)
