from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa import evaluator as ev
from lpa import synthbench as sb
from lpa.probe import RegionMask


def _fixed_embed(vectors):
    """EmbedFn returning a scripted vector per call: first the reference, then one per region."""
    it = iter(vectors)
    return ev.EmbedFn("scripted", len(vectors[0]), lambda image, mask=None: next(it))


def _regions(n):
    return [RegionMask(k, np.ones((4, 4), bool)) for k in range(n)]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_style_loss_extremes(n):
    ref = np.array([1.0, 0.0])
    img = np.zeros((3, 4, 4))
    assert ev.style_loss(img, _regions(n), img, _fixed_embed([ref] + [ref] * n)) == 0.0
    assert ev.style_loss(img, _regions(n), img, _fixed_embed([ref] + [np.array([0.0, 1.0])] * n)) == n
    assert ev.style_loss(img, _regions(n), img, _fixed_embed([ref] + [-ref] * n)) == 2 * n
    assert ev.style_consistency(img, _regions(n), img, _fixed_embed([ref] + [ref] * n)) == 1.0
    assert ev.style_consistency(img, _regions(n), img, _fixed_embed([ref] + [np.array([0.0, 1.0])] * n)) == 0.5


def test_style_loss_empty_regions():
    with pytest.raises(ev.EmptyRegions):
        ev.style_loss(np.zeros((3, 4, 4)), [], np.zeros((3, 4, 4)))
    with pytest.raises(ev.EmptyRegions):
        ev.style_consistency(np.zeros((3, 4, 4)), [], np.zeros((3, 4, 4)))


@given(st.integers(0, 10_000), st.integers(1, 3), st.sampled_from(["palette_stats", "patch_moments"]))
def test_consistency_loss_identity(seed, n, embed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1, 1, (3, 32, 32))
    ref = rng.uniform(-1, 1, (3, 32, 32))
    regions = [RegionMask(k, rng.random((32, 32)) < 0.3) for k in range(n)]
    for r in regions:
        r.mask[0, 0] = True
    loss = ev.style_loss(img, regions, ref, embed)
    cons = ev.style_consistency(img, regions, ref, embed)
    assert 0.0 <= cons <= 1.0 and 0.0 <= loss <= 2 * n
    assert abs(cons - (1.0 - loss / (2 * n))) <= 1e-12


def test_style_swatch_tiling_scores_perfectly():
    swatch = ev.style_reference("ukiyoe")
    tiled = np.tile(swatch, (1, 2, 2))
    region = [RegionMask(0, np.ones((32, 32), bool))]
    assert ev.style_loss(tiled, region, swatch) == pytest.approx(0.0, abs=1e-12)


def test_palette_stats_separates_styles():
    swatches = {s.id: ev.palette_stats(ev.style_reference(s.id)) for s in sb.STYLES}
    for a in swatches:
        for b in swatches:
            if a != b:
                assert ev.cosine(swatches[a], swatches[b]) < 0.999


def test_embeddings_unit_norm_and_dims():
    img = np.random.default_rng(0).uniform(-1, 1, (3, 32, 32))
    mask = np.zeros((32, 32), bool)
    mask[4:20, 6:12] = True
    for name, dim in (("palette_stats", 33), ("patch_moments", 144)):
        f = ev.embed_fn(name)
        for m in (None, mask):
            v = f(img, m)
            assert v.shape == (dim,) and f.dim == dim
            assert abs(np.linalg.norm(v) - 1.0) < 1e-12
            assert np.array_equal(v, f(img, m))
    with pytest.raises(ev.EmptyRegions):
        ev.palette_stats(img, np.zeros((32, 32), bool))
    with pytest.raises(ValueError):
        ev.embed_fn("clip")


def test_rerank_examples():
    assert ev.rerank([0.5, 0.2, 0.9, 0.4]) == 1
    assert ev.rerank([0.3, 0.3]) == 0
    with pytest.raises(ev.EmptyList):
        ev.rerank([])


@given(st.lists(st.integers(0, 5).map(lambda k: k / 4), min_size=1, max_size=8))
def test_rerank_brute_force(losses):
    i = ev.rerank(losses)
    assert all(losses[i] <= x for x in losses)
    assert i == min(j for j, x in enumerate(losses) if x == min(losses))


def test_diversity_examples():
    rng = np.random.default_rng(1)
    a, b, c = (rng.uniform(-1, 1, (3, 32, 32)) for _ in range(3))
    assert ev.diversity([a, a, a]) == 0.0
    pm = ev.patch_moments
    assert ev.diversity([a, b]) == pytest.approx(1.0 - ev.cosine(pm(a), pm(b)), abs=1e-15)
    assert ev.diversity([a, b, c]) == ev.diversity([c, a, b]) == ev.diversity([b, c, a])
    with pytest.raises(ev.TooFewSamples):
        ev.diversity([a])


def _two_entity_spec():
    return sb.SceneSpec((sb.Entity("cat", "circle", (1, 0), "large"), sb.Entity("car", "square", (1, 2), "small")),
                        "next_to", "cyberpunk", "animal_urban", "medium")


def test_prompt_alignment_ground_truth():
    for k, (_, spec) in enumerate(sb.gen_prompt_suite(50, seed=0)):
        img, _ = sb.render(spec, 0, k)
        assert ev.prompt_alignment(img, spec) == 1.0
        assert ev.all_entities_found(img, spec)


def test_prompt_alignment_erased_object():
    spec = _two_entity_spec()
    img, regions = sb.render(spec, 0, 0)
    bg = sb.background(spec.style_def) * 2.0 - 1.0
    erased = np.where(regions[1].mask[None], bg, img)
    score = ev.prompt_alignment(erased, spec)
    assert score <= 0.5 + 1 / 3
    assert score == pytest.approx(2 / 3)
    assert not ev.all_entities_found(erased, spec)


def test_prompt_alignment_noise_calibration():
    spec = _two_entity_spec()
    scores = [ev.prompt_alignment(np.random.default_rng(s).uniform(-1, 1, (3, 32, 32)), spec) for s in range(100)]
    assert np.mean(scores) <= 0.1


def test_relations():
    above = sb.Detection("circle", (0, 1), "noir", "small", 1.0, None)
    below = sb.Detection("square", (2, 1), "noir", "small", 1.0, None)
    right = sb.Detection("square", (0, 2), "noir", "small", 1.0, None)
    assert ev._relation_ok("on", above, below) and not ev._relation_ok("on", below, above)
    assert ev._relation_ok("next_to", above, right) and not ev._relation_ok("next_to", above, below)
    assert ev._relation_ok("and", below, above)


def test_wrong_relation_loses_hit():
    spec = sb.SceneSpec((sb.Entity("cat", "circle", (0, 1)), sb.Entity("car", "square", (1, 1))),
                        "on", "noir", "animal_urban", "medium")
    swapped = sb.SceneSpec((sb.Entity("cat", "circle", (1, 1)), sb.Entity("car", "square", (0, 1))),
                           "on", "noir", "animal_urban", "medium")
    img, _ = sb.render(swapped, 0, 0)
    assert ev.prompt_alignment(img, spec) == pytest.approx(2 / 3)


def test_no_style_alignment_is_hit_fraction():
    spec = sb.SceneSpec(_two_entity_spec().entities, "next_to", "cyberpunk", "animal_urban", "medium", "no_style")
    img, _ = sb.render(spec, 0, 0)
    assert ev.prompt_alignment(img, spec) == 1.0


def test_detector_regions_and_fallbacks():
    spec = _two_entity_spec()
    img, regions = sb.render(spec, 0, 0)
    got = ev.detector_regions(img, spec)
    assert [r.fallback for r in got] == [False, False]
    for a, b in zip(got, regions):
        assert ev.cosine(a.mask.ravel().astype(float), b.mask.ravel().astype(float)) > 0.9
    bg = np.broadcast_to(sb.background(spec.style_def) * 2.0 - 1.0, img.shape).copy()
    blank = ev.detector_regions(bg, spec)
    assert all(r.fallback and r.mask.all() for r in blank)


def _record(pid="p000", preset="baseline", window="-", parser="spacy", x=0.5):
    return ev.MetricsRecord(pid, "multi_human", "low", preset, parser, window, x, x, x, 1 - x, 0)


def test_metrics_record_finite():
    with pytest.raises(ValueError):
        _record(x=math.nan)
    assert _record(x=1 / 3).row()[6] == "0.333333"


def test_metrics_csv_round_trip(tmp_path):
    recs = [_record("p002", "lpa_late_only", "300-650"), _record("p001", "lpa_late_only", "300-650"),
            _record("p009"), _record("p003", "lpa_late_only", "200-700")]
    path = tmp_path / "m.csv"
    ev.write_metrics_csv(path, recs)
    lines = path.read_text().splitlines()
    assert lines[0] == ("prompt_id,category,complexity,preset,parser,window,clip_prompt,clip_style,diversity,"
                        "l_style,chosen_sample")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["p009", "p003", "p001", "p002"]
    assert sorted(ev.read_metrics_csv(path), key=lambda r: r.prompt_id) == sorted(recs, key=lambda r: r.prompt_id)
