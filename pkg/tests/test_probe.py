from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa.probe import (AttnRecord, EmptyRegion, NonIntegerScale, ProbeFilter, RegionMask, attention_region,
                       localization_score, mask_iou, read_dump, token_heatmaps, upsample_map, write_dump)


def _rec(h=8, w=8, n=5, seed=0, group="up", step=0, block="up0"):
    logits = np.random.default_rng(seed).standard_normal((h * w, n))
    p = np.exp(logits)
    return AttnRecord(block, group, step, 999 - step, h, w, p / p.sum(axis=1, keepdims=True))


def test_upsample_identity():
    r = _rec()
    assert np.array_equal(upsample_map(r, 8, 8), r.map.reshape(8, 8, 5))


def test_upsample_tiles():
    r = _rec()
    up = upsample_map(r, 32, 32)
    grid = r.map.reshape(8, 8, 5)
    for y in range(32):
        for x in range(32):
            assert np.array_equal(up[y, x], grid[y // 4, x // 4])
    assert np.all(np.abs(up.sum(axis=2) - 1.0) <= 1e-6)


def test_upsample_non_integer():
    with pytest.raises(NonIntegerScale):
        upsample_map(_rec(), 30, 32)


def test_localization_all_mass_inside():
    m = np.zeros((4, 4, 3))
    m[1, 1, 0] = 1.0
    m[:, :, 1] = 1.0 / 16
    region = np.zeros((4, 4), bool)
    region[1, 1] = True
    assert localization_score(m, [0], region) == 1.0


def test_localization_uniform_quarter():
    m = np.full((8, 8, 2), 0.5)
    region = np.zeros((8, 8), bool)
    region[:4, :4] = True
    assert localization_score(m, [0, 1], RegionMask(0, region)) == pytest.approx(0.25, abs=1e-15)


def test_localization_empty_region():
    with pytest.raises(EmptyRegion):
        localization_score(np.ones((2, 2, 1)), [0], np.zeros((2, 2), bool))


def test_localization_averages_maps():
    a = np.zeros((2, 2, 1))
    a[0, 0] = 1
    b = np.zeros((2, 2, 1))
    b[1, 1] = 1
    region = np.array([[True, False], [False, False]])
    assert localization_score([a, b], [0], region) == 0.5


@given(st.integers(0, 1000), st.integers(1, 4))
def test_localization_invariant_under_upsampling(seed, scale):
    r = _rec(h=4, w=4, n=4, seed=seed)
    rng = np.random.default_rng(seed)
    native = rng.random((4, 4)) < 0.4
    native[0, 0] = True
    up_region = np.repeat(np.repeat(native, scale, 0), scale, 1)
    tokens = [int(rng.integers(4))]
    a = localization_score(upsample_map(r, 4, 4), tokens, native)
    b = localization_score(upsample_map(r, 4 * scale, 4 * scale), tokens, up_region)
    assert abs(a - b) <= 1e-9


def test_attention_region_one_hot_pixel():
    m = np.zeros((32 * 32, 2))
    m[:, 1] = 1.0
    m[5 * 32 + 7] = [1.0, 0.0]
    region = attention_region([AttnRecord("up1", "up", 0, 999, 32, 32, m)], [0], theta=0.5)
    assert region.mask.sum() == 1 and region.mask[5, 7] and not region.fallback
    assert region.source == "attention_derived"


def test_attention_region_uniform_fallback():
    m = np.full((64, 2), 0.5)
    region = attention_region([AttnRecord("up0", "up", 3, 500, 8, 8, m)], [0], theta=0.5)
    assert region.fallback and region.mask.sum() == int(np.ceil(0.1 * 1024))


def test_attention_region_uses_only_up_records():
    with pytest.raises(ValueError):
        attention_region([_rec(group="mid", block="mid")], [0])


def test_attention_region_late_steps_only():
    early = np.zeros((64, 1))
    early[0] = 1.0
    late = np.zeros((64, 1))
    late[63] = 1.0
    recs = [AttnRecord("up0", "up", 0, 999, 8, 8, early), AttnRecord("up0", "up", 10, 0, 8, 8, late)]
    region = attention_region(recs, [0])
    assert region.mask[31, 31] and not region.mask[0, 0]


def test_mask_iou():
    a = np.array([[1, 1], [0, 0]], bool)
    b = np.array([[1, 0], [1, 0]], bool)
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0


def test_dump_roundtrip(tmp_path):
    recs = [_rec(seed=1), _rec(h=16, w=16, n=9, seed=2, group="down", step=4, block="down1")]
    write_dump(tmp_path / "a.lpaa", recs)
    back = read_dump(tmp_path / "a.lpaa")
    assert len(back) == 2
    for a, b in zip(recs, back):
        assert (a.block_id, a.group, a.step, a.t_train, a.h, a.w) == (b.block_id, b.group, b.step, b.t_train, b.h, b.w)
        assert np.array_equal(a.map, b.map)


def test_dump_truncated(tmp_path):
    write_dump(tmp_path / "a.lpaa", [_rec()])
    data = (tmp_path / "a.lpaa").read_bytes()
    (tmp_path / "b.lpaa").write_bytes(data[:-3])
    with pytest.raises(ValueError):
        read_dump(tmp_path / "b.lpaa")


def test_probe_filter():
    f = ProbeFilter.parse("mid, up")
    assert f.wants("mid", 3) and f.wants("up", 0) and not f.wants("down", 0)
    assert ProbeFilter.parse("") is None
    with pytest.raises(ValueError):
        ProbeFilter.parse("side")


def test_token_heatmaps_scaled():
    maps = token_heatmaps(_rec(), 16, 16)
    assert len(maps) == 5
    for m in maps:
        assert m.shape == (16, 16) and m.max() == 1.0 and m.min() >= 0.0


def test_recorded_maps_are_masked_and_normalized(random_model):
    from lpa.router import build_plan
    from lpa.diffusion import SamplerConfig, make_schedule, sample
    from lpa.prompt_parser import parse, tokenize

    split = parse(tokenize("A cat on a flying car in vaporwave style"), "dependency_chunks")
    plan = build_plan("lpa_full", "0-1000", tau=3, sampler_steps=3)
    res = sample(random_model, make_schedule(), split, plan, SamplerConfig(3, 7.5, 1, 0),
                 probe=ProbeFilter.parse("down,mid"))
    assert {r.group for r in res.records[0]} == {"down", "mid"}
    for r in res.records[0]:
        assert np.all(np.abs(r.map.sum(axis=1) - 1.0) <= 1e-6)
        masked = [j for j in range(9) if j not in (split.obj if r.group == "down" else split.style)]
        assert np.all(r.map[:, masked] == 0.0)
