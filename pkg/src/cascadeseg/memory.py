"""Analytic model of training-time memory for any network configuration.

The ledger enumerates, per pass and resolution level, every tensor the
training step keeps alive: the forward activations the backward sweep
will consume, a same-size gradient map for each tensor that tracks
gradients, parameter values, their gradients, and Adam moments. It
mirrors the builder's passes one to one (same op inventory: conv, norm,
relu per block, pools, upsamples, concats, heads), so an allocation-log
census of a real forward agrees with the standard-pass prediction.

Modeling choices, kept deliberately explicit:

* Gradient maps: every graph-tracked tensor costs act bytes + equal grad
  bytes. Gating level 1 of the expanded pass zeroes exactly that level's
  gradient bytes and nothing else.
* Expanded pass: decoder truncated at level 2 with the auxiliary head
  there; the level-1 pooled features stay retained (the level-2 conv
  backward reads them) but carry no gradient map when gated.
* An expansion factor of 1.0 means the expanded patch and the standard
  patch coincide, so no separate expanded pass is modeled or run.
* Checkpointing drops per-level interiors and keeps boundary tensors
  (inputs, pooled features, skip/decoder outputs, heads); backward
  re-materializes one level at a time, so the peak adds the largest
  single level's interior activation bytes (gated levels never rerun).
* Parameters, gradients, and Adam moments are 32-bit regardless of the
  activation element size (mixed precision keeps master copies).
* Loss-side tensors (one-hot targets, loss temporaries) are short-lived
  and out of model, as are allocator slack and conv im2col workspace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .sampler import EXPAND_FACTORS, expanded_edge
from .unet import UNetConfig, _config_from_json, _config_to_json

_STATE_BYTES = 4  # parameters / moments stay 32-bit

_BLOCK_KINDS = ("conv0", "norm0", "relu0", "conv1", "norm1", "relu1")


@dataclass(frozen=True)
class LedgerConfig:
    network: UNetConfig
    patch_edge: int
    batch: int = 1
    expand_factor: float = 1.0
    bytes_per_element: int = 4
    checkpointing: bool = False
    gate_level1: bool = True
    truncate_expanded_decoder: bool = True
    include_state: bool = True

    @property
    def expanded_edge(self) -> int:
        return expanded_edge(self.patch_edge, self.expand_factor, self.network.levels)

    @property
    def has_expanded_pass(self) -> bool:
        return self.expanded_edge > self.patch_edge

    def validate(self):
        self.network.validate()
        if self.batch < 1:
            raise ValueError("LedgerConfig: batch must be >= 1")
        if self.bytes_per_element not in (2, 4, 8):
            raise ValueError("LedgerConfig: bytes_per_element must be 2, 4, or 8")
        if not any(abs(self.expand_factor - f) < 1e-9 for f in EXPAND_FACTORS):
            raise ValueError(
                f"LedgerConfig: expand_factor must be one of {EXPAND_FACTORS}")
        scale = 2 ** (self.network.levels - 1)
        for name, edge in (("patch_edge", self.patch_edge),
                           ("expanded_edge", self.expanded_edge)):
            if edge <= 0 or edge % scale:
                raise ValueError(
                    f"LedgerConfig: {name} {edge} not divisible by {scale}")


@dataclass(frozen=True)
class LedgerEntry:
    pass_name: str  # "standard" | "expanded" | "recompute" | "state"
    level: int
    kind: str
    numel: int
    act_bytes: int
    grad_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.act_bytes + self.grad_bytes


@dataclass(frozen=True)
class MemoryReport:
    config: LedgerConfig
    entries: tuple

    @property
    def activation_bytes(self) -> int:
        return sum(e.act_bytes for e in self.entries if e.pass_name in ("standard", "expanded"))

    @property
    def gradient_bytes(self) -> int:
        return sum(e.grad_bytes for e in self.entries if e.pass_name in ("standard", "expanded"))

    @property
    def state_bytes(self) -> int:
        return sum(e.total_bytes for e in self.entries if e.pass_name == "state")

    @property
    def recompute_bytes(self) -> int:
        return sum(e.total_bytes for e in self.entries if e.pass_name == "recompute")

    @property
    def grand_total(self) -> int:
        return sum(e.total_bytes for e in self.entries)

    def per_level(self) -> dict:
        """(pass_name, level) -> [act_bytes, grad_bytes] over network passes."""
        table: dict = {}
        for e in self.entries:
            if e.pass_name not in ("standard", "expanded"):
                continue
            slot = table.setdefault((e.pass_name, e.level), [0, 0])
            slot[0] += e.act_bytes
            slot[1] += e.grad_bytes
        return {k: tuple(v) for k, v in table.items()}

    def to_json(self) -> dict:
        return {
            "config": config_to_json(self.config),
            "entries": [{"pass": e.pass_name, "level": e.level, "kind": e.kind,
                         "numel": e.numel, "act_bytes": e.act_bytes,
                         "grad_bytes": e.grad_bytes} for e in self.entries],
            "totals": {
                "activation_bytes": self.activation_bytes,
                "gradient_bytes": self.gradient_bytes,
                "state_bytes": self.state_bytes,
                "recompute_bytes": self.recompute_bytes,
                "grand_total": self.grand_total,
            },
        }

    def render_text(self) -> str:
        rows = [("pass", "level", "kind", "numel", "act_bytes", "grad_bytes")]
        for e in self.entries:
            rows.append((e.pass_name, str(e.level), e.kind, str(e.numel),
                         str(e.act_bytes), str(e.grad_bytes)))
        widths = [max(len(r[i]) for r in rows) for i in range(6)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(f"activation bytes : {self.activation_bytes}")
        lines.append(f"gradient bytes   : {self.gradient_bytes}")
        lines.append(f"recompute bytes  : {self.recompute_bytes}")
        lines.append(f"state bytes      : {self.state_bytes}")
        lines.append(f"grand total      : {self.grand_total}")
        return "\n".join(lines)


def param_count_for_config(net: UNetConfig) -> int:
    """Closed-form trainable parameter count (convs + norm affine pairs)."""
    def conv(cin, cout):
        return 27 * cin * cout + cout

    def block(cin, cout):
        return conv(cin, cout) + conv(cout, cout) + 4 * cout

    total = 0
    for l in range(1, net.levels + 1):
        total += block(net.encoder_in_channels(l), net.encoder_channels[l - 1])
    for l in range(1, net.levels):
        total += block(net.decoder_in_channels(l), net.decoder_channels[l - 1])
    total += conv(net.decoder_channels[0], net.num_classes)
    for l in net.aux_head_levels:
        total += conv(net.decoder_channels[l - 1], net.num_classes)
    return total


def norm_stat_count_for_config(net: UNetConfig) -> int:
    """Running mean+var elements over every norm layer."""
    total = 0
    for l in range(1, net.levels + 1):
        total += 4 * net.encoder_channels[l - 1]
    for l in range(1, net.levels):
        total += 4 * net.decoder_channels[l - 1]
    return total


def _pass_entries(cfg: LedgerConfig, edge: int, pass_name: str, gated_levels: frozenset,
                  decode_to: int, head_level: int) -> list[LedgerEntry]:
    net, b, n = cfg.network, cfg.bytes_per_element, cfg.batch
    L = net.levels

    def vox(level):
        return n * (edge // 2 ** (level - 1)) ** 3

    entries = []

    def add(kind, level, channels, vox_level, grads, retained):
        numel = channels * vox(vox_level)
        entries.append((LedgerEntry(
            pass_name=pass_name, level=level, kind=kind, numel=numel,
            act_bytes=numel * b, grad_bytes=numel * b if grads else 0), retained))

    add("input", 0, net.in_channels, 1, grads=False, retained=True)
    for l in range(1, L + 1):
        g = l not in gated_levels
        c = net.encoder_channels[l - 1]
        skip_used = (l == L) or (l >= decode_to)
        for kind in _BLOCK_KINDS:
            add(f"enc.{kind}", l, c, l, grads=g,
                retained=(kind == "relu1" and skip_used))
        if l < L:
            add("pool", l, c, l + 1, grads=g, retained=True)
    for l in range(L - 1, decode_to - 1, -1):
        c = net.decoder_channels[l - 1]
        add("dec.upsample", l, net.upsample_channels(l), l, grads=True, retained=False)
        if net.guidance_classes:
            add("guidance", l, net.guidance_classes, l, grads=False, retained=True)
        add("dec.concat", l, net.decoder_in_channels(l), l, grads=True, retained=False)
        for kind in _BLOCK_KINDS:
            add(f"dec.{kind}", l, c, l, grads=True, retained=(kind == "relu1"))
    add("head", head_level, net.num_classes, head_level, grads=True, retained=True)
    return entries


def _passes(cfg: LedgerConfig) -> list[LedgerEntry]:
    """Tagged entries for every modeled pass: (entry, retained_under_ckpt)."""
    out = _pass_entries(cfg, cfg.patch_edge, "standard", frozenset(), 1, 1)
    if cfg.has_expanded_pass:
        gated = frozenset({1}) if cfg.gate_level1 else frozenset()
        decode_to = 2 if cfg.truncate_expanded_decoder else 1
        out += _pass_entries(cfg, cfg.expanded_edge, "expanded", gated,
                             decode_to, decode_to)
    return out


def estimate(cfg: LedgerConfig) -> MemoryReport:
    """Memory report under the configured flags; see module docstring."""
    cfg.validate()
    tagged = _passes(cfg)
    entries: list[LedgerEntry] = []
    if cfg.checkpointing:
        entries.extend(e for e, retained in tagged if retained)
        # largest single level's interior activations, re-materialized
        # during backward; gated levels are never recomputed
        best, best_key = 0, None
        interiors: dict = {}
        for e, retained in tagged:
            if retained or e.grad_bytes == 0:
                continue
            key = (e.pass_name, e.level)
            interiors[key] = interiors.get(key, 0) + e.act_bytes
        for key, bytes_ in interiors.items():
            if bytes_ > best:
                best, best_key = bytes_, key
        if best_key is not None:
            entries.append(LedgerEntry(
                pass_name="recompute", level=best_key[1],
                kind=f"recompute.{best_key[0]}", numel=0,
                act_bytes=best, grad_bytes=0))
    else:
        entries.extend(e for e, _ in tagged)

    if cfg.include_state:
        nparams = param_count_for_config(cfg.network)
        nstats = norm_stat_count_for_config(cfg.network)
        entries.append(LedgerEntry("state", 0, "params", nparams,
                                   nparams * _STATE_BYTES, nparams * _STATE_BYTES))
        entries.append(LedgerEntry("state", 0, "adam.moments", 2 * nparams,
                                   2 * nparams * _STATE_BYTES, 0))
        entries.append(LedgerEntry("state", 0, "norm.stats", nstats,
                                   nstats * _STATE_BYTES, 0))
    return MemoryReport(config=cfg, entries=tuple(entries))


@dataclass(frozen=True)
class Comparison:
    ratio: float
    total_a: int
    total_b: int
    level_deltas: dict  # (pass, level) -> bytes_a - bytes_b

    def render_text(self) -> str:
        lines = [f"total A: {self.total_a}",
                 f"total B: {self.total_b}",
                 f"ratio A/B: {self.ratio:.4f}",
                 "",
                 "per-level delta (A - B, bytes):"]
        for (pass_name, level), delta in sorted(self.level_deltas.items()):
            lines.append(f"  {pass_name:9s} level {level}: {delta:+d}")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "ratio": self.ratio,
            "total_a": self.total_a,
            "total_b": self.total_b,
            "level_deltas": {f"{p}/l{lvl}": int(d)
                             for (p, lvl), d in sorted(self.level_deltas.items())},
        }


def compare(report_a: MemoryReport, report_b: MemoryReport) -> Comparison:
    if report_b.grand_total == 0:
        raise ZeroDivisionError("compare: report B has zero grand total")
    pa, pb = report_a.per_level(), report_b.per_level()
    deltas = {}
    for key in sorted(set(pa) | set(pb)):
        a = sum(pa.get(key, (0, 0)))
        b = sum(pb.get(key, (0, 0)))
        deltas[key] = a - b
    return Comparison(
        ratio=report_a.grand_total / report_b.grand_total,
        total_a=report_a.grand_total,
        total_b=report_b.grand_total,
        level_deltas=deltas,
    )


# ---------------------------------------------------------------------------
# JSON config plumbing for the CLI
# ---------------------------------------------------------------------------


def config_to_json(cfg: LedgerConfig) -> dict:
    d = {
        "network": _config_to_json(cfg.network),
        "patch_edge": cfg.patch_edge,
        "batch": cfg.batch,
        "expand_factor": cfg.expand_factor,
        "bytes_per_element": cfg.bytes_per_element,
        "checkpointing": cfg.checkpointing,
        "gate_level1": cfg.gate_level1,
        "truncate_expanded_decoder": cfg.truncate_expanded_decoder,
        "include_state": cfg.include_state,
    }
    return d


def config_from_json(d: dict) -> LedgerConfig:
    kw = dict(d)
    kw["network"] = _config_from_json(kw["network"])
    return LedgerConfig(**kw)


def load_config(path: str) -> LedgerConfig:
    with open(path) as f:
        return config_from_json(json.load(f))
