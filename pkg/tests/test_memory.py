"""Analytic training-memory ledger: closed forms, ratio bands, census."""

import numpy as np
import pytest

from cascadeseg.memory import (LedgerConfig, compare, config_from_json,
                               config_to_json, estimate,
                               norm_stat_count_for_config,
                               param_count_for_config)
from cascadeseg.tensor import AllocationLog, Tensor, byte_census
from cascadeseg.unet import (FULL_SCALE_CONFIG, UNet, UNetConfig,
                             dual_patch_config)

TINY = UNetConfig(levels=2, encoder_channels=(2, 3), decoder_channels=(2,),
                  in_channels=1, num_classes=2)

FULL_DUAL = dual_patch_config(FULL_SCALE_CONFIG)


def _full_cfg(net, patch_edge, k, checkpointing=True, gate=True):
    return LedgerConfig(network=net, patch_edge=patch_edge, batch=4,
                        expand_factor=k, bytes_per_element=2,
                        checkpointing=checkpointing, gate_level1=gate)


def test_tiny_closed_form():
    cfg = LedgerConfig(network=TINY, patch_edge=4, batch=1, expand_factor=1.0,
                       bytes_per_element=4)
    rep = estimate(cfg)
    # hand-summed: input 256; six level-1 block tensors at 512; pool 64;
    # six level-2 tensors at 96; upsample 768; concat 1280; six decoder
    # tensors at 512; head 512
    assert rep.activation_bytes == 9600
    assert rep.gradient_bytes == 9344  # everything except the input
    assert rep.recompute_bytes == 0
    # state: 1097 params (4B each for value and grad), Adam twin moments,
    # 28 running stats
    assert param_count_for_config(TINY) == 1097
    assert norm_stat_count_for_config(TINY) == 28
    assert rep.state_bytes == 8 * 1097 + 8 * 1097 + 4 * 28
    assert rep.grand_total == 36608


def test_param_counts_full_scale():
    assert param_count_for_config(FULL_SCALE_CONFIG) == 2513763
    assert param_count_for_config(FULL_DUAL) == 2515062


def test_network_param_count_agrees_with_ledger():
    net = UNet(TINY, seed=0)
    assert net.param_count() == param_count_for_config(TINY)
    small3 = dual_patch_config(UNetConfig(
        levels=3, encoder_channels=(2, 3, 4), decoder_channels=(2, 2),
        in_channels=1, num_classes=2))
    dual = UNet(small3, seed=0)
    assert dual.param_count() == param_count_for_config(small3)


def test_full_scale_ratio_bands():
    u160 = estimate(_full_cfg(FULL_SCALE_CONFIG, 160, 1.0)).grand_total
    m1 = estimate(_full_cfg(FULL_DUAL, 160, 1.0)).grand_total
    m15 = estimate(_full_cfg(FULL_DUAL, 160, 1.5)).grand_total
    m175 = estimate(_full_cfg(FULL_DUAL, 160, 1.75)).grand_total
    u240 = estimate(_full_cfg(FULL_SCALE_CONFIG, 240, 1.0)).grand_total

    assert 0.95 <= m1 / u160 <= 1.05
    assert 0.99 <= m15 / m1 <= 1.49
    assert 1.18 <= m175 / m1 <= 1.68
    assert m15 / u240 <= 0.55

    # frozen regression values for this exact configuration
    assert m1 / u160 == pytest.approx(1.000002104767657, rel=1e-9)
    assert m15 / m1 == pytest.approx(1.2337891273985118, rel=1e-9)
    assert m175 / m1 == pytest.approx(1.526581258950368, rel=1e-9)
    assert m15 / u240 == pytest.approx(0.3666189353212676, rel=1e-9)


def test_gating_halves_level1_expanded_bytes_exactly():
    # with checkpointing off, act == grad per entry, so zeroing level-1
    # expanded gradients must remove exactly half those bytes
    gated = estimate(_full_cfg(FULL_DUAL, 160, 1.5, checkpointing=False,
                                gate=True))
    ungated = estimate(_full_cfg(FULL_DUAL, 160, 1.5, checkpointing=False,
                                  gate=False))

    def level1_exp(rep):
        act = sum(e.act_bytes for e in rep.entries
                  if e.pass_name == "expanded" and e.level == 1)
        grad = sum(e.grad_bytes for e in rep.entries
                   if e.pass_name == "expanded" and e.level == 1)
        return act, grad

    act_g, grad_g = level1_exp(gated)
    act_u, grad_u = level1_exp(ungated)
    assert grad_g == 0
    assert act_g == act_u
    assert act_g + grad_g == (act_u + grad_u) // 2
    assert (act_u + grad_u) % 2 == 0

    # the delta shows up one-for-one in the grand total
    delta = ungated.grand_total - gated.grand_total
    assert delta == grad_u


def test_expanded_pass_absent_at_k1():
    rep = estimate(_full_cfg(FULL_DUAL, 160, 1.0))
    assert all(e.pass_name != "expanded" for e in rep.entries)


def test_monotonicity():
    def total(**kw):
        base = dict(network=FULL_DUAL, patch_edge=160, batch=4,
                    expand_factor=1.5, bytes_per_element=2, checkpointing=True)
        base.update(kw)
        return estimate(LedgerConfig(**base)).grand_total

    assert total(patch_edge=160) < total(patch_edge=192)
    assert total(batch=4) < total(batch=8)
    assert total(bytes_per_element=2) < total(bytes_per_element=4)
    assert total(expand_factor=1.0) < total(expand_factor=1.25) \
        < total(expand_factor=1.5) < total(expand_factor=1.75)
    assert total(checkpointing=True) < total(checkpointing=False)


def test_census_matches_ledger_standard_pass():
    net = UNet(TINY, seed=1)  # float32, matching bytes_per_element 4
    net.train()
    rng = np.random.default_rng(1)
    with AllocationLog() as log:
        x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)).astype(np.float32))
        net.forward(x)
    census = byte_census(log)
    cfg = LedgerConfig(network=TINY, patch_edge=4, batch=1, expand_factor=1.0,
                       bytes_per_element=4)
    rep = estimate(cfg)
    std_act = sum(e.act_bytes for e in rep.entries if e.pass_name == "standard")
    std_grad = sum(e.grad_bytes for e in rep.entries if e.pass_name == "standard")
    assert census.act_bytes == std_act
    assert census.grad_bytes == std_grad


def test_census_matches_ledger_dual_pass():
    dual_cfg = dual_patch_config(UNetConfig(
        levels=3, encoder_channels=(2, 3, 4), decoder_channels=(2, 2),
        in_channels=1, num_classes=2))
    net = UNet(dual_cfg, seed=2)
    net.train()
    rng = np.random.default_rng(2)
    with AllocationLog() as log:
        std = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
        exp = Tensor(rng.standard_normal((1, 1, 12, 12, 12)).astype(np.float32))
        net.forward_dual(std, exp)
    census = byte_census(log)
    cfg = LedgerConfig(network=dual_cfg, patch_edge=8, batch=1,
                       expand_factor=1.5, bytes_per_element=4)
    rep = estimate(cfg)
    model_act = sum(e.act_bytes for e in rep.entries
                    if e.pass_name in ("standard", "expanded"))
    model_grad = sum(e.grad_bytes for e in rep.entries
                     if e.pass_name in ("standard", "expanded"))
    assert census.act_bytes == model_act
    assert census.grad_bytes == model_grad


def test_checkpointing_reduces_but_keeps_state():
    on = estimate(_full_cfg(FULL_DUAL, 160, 1.5, checkpointing=True))
    off = estimate(_full_cfg(FULL_DUAL, 160, 1.5, checkpointing=False))
    assert on.grand_total < off.grand_total
    assert on.state_bytes == off.state_bytes
    assert on.recompute_bytes > 0 and off.recompute_bytes == 0


def test_compare_and_render():
    a = estimate(_full_cfg(FULL_DUAL, 160, 1.5))
    b = estimate(_full_cfg(FULL_DUAL, 160, 1.0))
    comp = compare(a, b)
    assert comp.ratio == pytest.approx(a.grand_total / b.grand_total)
    text = comp.render_text()
    assert "ratio A/B" in text
    assert "per-level delta" in text
    j = comp.to_json()
    assert j["total_a"] == a.grand_total

    report_text = a.render_text()
    assert "standard" in report_text and "expanded" in report_text
    assert str(a.grand_total) in report_text


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        LedgerConfig(network=TINY, patch_edge=5, batch=1).validate()
    with pytest.raises(ValueError):
        LedgerConfig(network=TINY, patch_edge=4, batch=1,
                     bytes_per_element=3).validate()
    with pytest.raises(ValueError):
        LedgerConfig(network=TINY, patch_edge=4, batch=0).validate()
    with pytest.raises(ValueError):
        LedgerConfig(network=TINY, patch_edge=4, batch=1,
                     expand_factor=3.0).validate()

    cfg = _full_cfg(FULL_DUAL, 160, 1.5)
    back = config_from_json(config_to_json(cfg))
    assert back == cfg
