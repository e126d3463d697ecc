from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa.prompt_parser import parse, tokenize
from lpa.router import (GROUPS, LPA_PRESETS, InjectionWindow, InvalidTau, InvalidWindow, Preset, Selector,
                        build_plan, describe_plan, select_tokens, t_train_map)

T_MAP = t_train_map(50)
WORKED = parse(tokenize("A cat on a flying car in vaporwave style"), "dependency_chunks")
NO_STYLE = parse(tokenize("a cat next to a bus stop"), "dependency_chunks")


def step_with_t(t):
    return T_MAP.index(t)


def test_t_map_values():
    assert T_MAP[:3] == (999, 979, 958) and T_MAP[-2:] == (20, 0)


def test_early_style_late_mid_in_window_is_style():
    plan = build_plan("lpa_early_style_late", "300-650")
    i = next(i for i, t in enumerate(T_MAP) if abs(t - 500) <= 10)
    assert plan.selector("mid", i) is Selector.STYLE
    assert plan.selector("up", i) is Selector.STYLE


def test_early_style_late_early_down_is_obj():
    plan = build_plan("lpa_early_style_late", "300-650")
    i = next(i for i, t in enumerate(T_MAP) if abs(t - 980) <= 2)
    assert plan.selector("down", i) is Selector.OBJ


@pytest.mark.parametrize("preset", LPA_PRESETS)
def test_outside_window_past_object_phase_is_full(preset):
    plan = build_plan(preset, "300-650", tau=35)
    for i, t in enumerate(T_MAP):
        if i >= 35 and not 300 <= t < 650:
            assert all(plan.selector(g, i) is Selector.FULL for g in GROUPS)


def test_baseline_all_full():
    plan = build_plan("baseline", "200-700", tau=10)
    assert set(plan.resolved.values()) == {Selector.FULL}


def test_late_only_and_mid_only_semantics():
    late = build_plan("lpa_late_only", "300-650")
    mid = build_plan("lpa_mid_only", "400-600")
    for i, t in enumerate(T_MAP):
        assert late.selector("down", i) is Selector.FULL
        for g in ("mid", "up"):
            assert late.selector(g, i) is (Selector.STYLE if 300 <= t < 650 else Selector.FULL)
        assert mid.selector("mid", i) is (Selector.STYLE if 400 <= t < 600 else Selector.FULL)
        assert mid.selector("down", i) is Selector.FULL and mid.selector("up", i) is Selector.FULL


def test_lpa_full_semantics():
    plan = build_plan("lpa_full", "200-700")
    for i, t in enumerate(T_MAP):
        inside = 200 <= t < 700
        assert plan.selector("down", i) is (Selector.OBJ if inside else Selector.FULL)
        assert plan.selector("up", i) is (Selector.STYLE if inside else Selector.FULL)


def test_obj_phase_window_variant():
    plan = build_plan("lpa_early_style_late", "300-650", obj_phase="window")
    for i, t in enumerate(T_MAP):
        assert plan.selector("down", i) is (Selector.OBJ if t >= 300 else Selector.FULL)


@pytest.mark.parametrize("preset", list(Preset))
@pytest.mark.parametrize("window", ["0-0", "200-700", "0-1000"])
def test_plan_totality(preset, window):
    plan = build_plan(preset, window, tau=20, sampler_steps=30)
    assert set(plan.resolved) == {(g, i) for g in GROUPS for i in range(30)}
    assert all(isinstance(s, Selector) for s in plan.resolved.values())


@pytest.mark.parametrize("preset", list(Preset))
def test_style_only_inside_window(preset):
    plan = build_plan(preset, "300-650")
    for (g, i), sel in plan.resolved.items():
        if sel is Selector.STYLE:
            assert 300 <= plan.t_map[i] < 650


@given(st.sampled_from(list(Preset)), st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000),
       st.integers(0, 1000), st.integers(1, 60))
def test_window_monotonicity(preset, a, b, c, d, steps):
    lo, hi = sorted((a, b))
    wlo, whi = min(lo, c), max(hi, d)
    tau = steps // 2
    narrow = build_plan(preset, InjectionWindow(lo, hi), tau=tau, sampler_steps=steps)
    wide = build_plan(preset, InjectionWindow(wlo, whi), tau=tau, sampler_steps=steps)
    style = lambda p: {k for k, s in p.resolved.items() if s is Selector.STYLE}  # noqa: E731
    assert style(narrow) <= style(wide)


@pytest.mark.parametrize("text", ["300-200", "-1-5", "0-1001", "abc", "3"])
def test_invalid_window(text):
    with pytest.raises(InvalidWindow):
        InjectionWindow.parse(text)


def test_window_format_and_half_open():
    w = InjectionWindow.parse("300-650")
    assert str(w) == "300-650" and w.label == "300_650"
    assert w.contains(300) and w.contains(649) and not w.contains(650)
    assert not InjectionWindow(0, 0).contains(0)


@pytest.mark.parametrize("tau", [-1, 51, 2.5])
def test_invalid_tau(tau):
    with pytest.raises(InvalidTau):
        build_plan("lpa_early_style_late", tau=tau, sampler_steps=50)


def test_select_tokens_examples():
    full = build_plan("baseline")
    mask, fb = select_tokens(full, "down", 0, WORKED)
    assert mask.tolist() == [True] * 9 and not fb
    late = build_plan("lpa_late_only", "300-650")
    i = step_with_t(500) if 500 in T_MAP else next(i for i, t in enumerate(T_MAP) if 300 <= t < 650)
    mask, fb = select_tokens(late, "mid", i, WORKED)
    assert np.flatnonzero(mask).tolist() == [7] and not fb
    mask, fb = select_tokens(late, "mid", i, NO_STYLE)
    assert mask.all() and fb
    full_plan = build_plan("lpa_full", "300-650")
    mask, _ = select_tokens(full_plan, "down", i, WORKED)
    assert np.flatnonzero(mask).tolist() == [1, 4, 5]


@given(st.sampled_from(list(Preset)), st.integers(0, 49), st.sampled_from(GROUPS), st.booleans())
def test_masks_never_empty(preset, step, group, styled):
    plan = build_plan(preset, "0-1000")
    mask, _ = select_tokens(plan, group, step, WORKED if styled else NO_STYLE)
    assert mask.any()


def test_describe_plan():
    assert describe_plan(build_plan("baseline")).splitlines()[-1] == "all groups, all steps: Full"
    late = describe_plan(build_plan("lpa_late_only", "300-650"))
    steps = [i for i, t in enumerate(T_MAP) if 300 <= t < 650]
    lo, hi = steps[0], steps[-1]
    for g in ("mid", "up"):
        assert f"{g:<5} steps {lo:>3}-{hi:<3} (t {T_MAP[lo]}..{T_MAP[hi]}): Style" in late
    assert "down" not in late
    mid = describe_plan(build_plan("lpa_mid_only", "400-600"))
    style_rows = [r for r in mid.splitlines() if r.endswith("Style")]
    assert style_rows and all(r.startswith("mid") for r in style_rows)


def test_plan_labels():
    assert build_plan("baseline").label == "baseline"
    assert build_plan("lpa_late_only", "300-650").label == "lpa_late_only_300_650"
