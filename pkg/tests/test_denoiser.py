from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpa import tensor as tc
from lpa.denoiser import (BLOCK_GROUPS, GROUP_OF_BLOCK, ArchConfig, Denoiser, EmptyMask, UnknownTokenId,
                          load_checkpoint, save_checkpoint)
from lpa.tensor import Tensor

from conftest import numeric_grad

IDS = [3, 10, 20, 4, 30, 40, 7, 50, 13]


def test_embed_text_shape_and_determinism(random_model):
    a = random_model.embed_text(IDS)
    b = random_model.embed_text(IDS)
    assert a.matrix.shape == (1, 9, 32)
    assert a.mask.all()
    assert np.array_equal(a.matrix.data, b.matrix.data)


def test_embed_text_permutation_changes_two_rows(random_model):
    ids = list(IDS)
    ids[1], ids[4] = ids[4], ids[1]
    a = random_model.embed_text(IDS).matrix.data[0]
    b = random_model.embed_text(ids).matrix.data[0]
    changed = [i for i in range(9) if not np.array_equal(a[i], b[i])]
    assert changed == [1, 4]
    # the token component moved with the token; position components stayed put
    pos = random_model.params["text.pos"].data
    assert np.allclose(b[1] - pos[1], a[4] - pos[4], atol=1e-15)


def test_embed_text_unknown_id(random_model):
    with pytest.raises(UnknownTokenId):
        random_model.embed_text([3, random_model.config.vocab_size])
    with pytest.raises(UnknownTokenId):
        random_model.embed_text([-1])


def _features(seed=0, b=2, h=4, w=4, c=32):
    return Tensor(np.random.default_rng(seed).standard_normal((b, h, w, c)))


def test_cross_attention_single_token_one_hot(random_model):
    text = random_model.embed_padded([IDS, IDS])
    mask = np.zeros_like(text.mask)
    mask[:, 5] = True
    _, amap = random_model.cross_attention("down0", _features(), text.with_mask(mask), return_map=True)
    assert np.all(amap[:, :, 5] == 1.0)
    assert np.all(np.delete(amap, 5, axis=2) == 0.0)


def test_cross_attention_full_mask_equals_unmasked(random_model):
    text = random_model.embed_text(np.array([IDS, IDS]))
    masked, _ = random_model.cross_attention("mid", _features(c=64), text)
    # mask=None path through the raw softmax
    p = random_model.params
    x = _features(c=64)
    hn = tc.group_norm(x, p["mid.attn.gn.g"], p["mid.attn.gn.b"], 8)
    q = tc.linear(tc.reshape(hn, (2, 16, 64)), p["mid.attn.q.w"])
    k = tc.linear(text.matrix, p["mid.attn.k.w"])
    v = tc.linear(text.matrix, p["mid.attn.v.w"])
    s = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1 / math.sqrt(32))
    o = tc.linear(tc.matmul(tc.softmax_rows(s), v), p["mid.attn.o.w"], p["mid.attn.o.b"])
    ref = x.data + o.data.reshape(2, 4, 4, 64)
    assert np.array_equal(masked.data, ref)


@given(st.integers(0, 10_000))
def test_cross_attention_matches_row_deletion_oracle(seed):
    model = Denoiser(seed=3)
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, model.config.vocab_size, size=9)
    keep = rng.random(9) < 0.5
    keep[rng.integers(9)] = True
    full = model.embed_text(ids)
    x = _features(seed, b=1)
    routed, _ = model.cross_attention("up1", x, full.with_mask(keep[None]))
    # oracle: physically delete the masked rows from the embedding before K/V
    short = type(full)(ids[keep][None], Tensor(full.matrix.data[:, keep]), np.ones((1, keep.sum()), bool))
    deleted, _ = model.cross_attention("up1", x, short)
    assert np.max(np.abs(routed.data - deleted.data)) < 1e-10


def test_cross_attention_zeroing_rows_is_not_masking(random_model):
    text = random_model.embed_text(np.array([IDS]))
    keep = np.array([True, True, False, True, False, False, True, True, False])
    masked, _ = random_model.cross_attention("down1", _features(b=1, c=64), text.with_mask(keep[None]))
    zeroed = type(text)(text.ids, Tensor(text.matrix.data * keep[None, :, None]), text.mask)
    other, _ = random_model.cross_attention("down1", _features(b=1, c=64), zeroed)
    assert not np.allclose(masked.data, other.data)


def test_cross_attention_empty_mask(random_model):
    text = random_model.embed_text(np.array([IDS]))
    with pytest.raises(EmptyMask):
        random_model.cross_attention("down0", _features(b=1), text.with_mask(np.zeros((1, 9), bool)))


def test_forward_shape_and_groups(random_model):
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    text = random_model.embed_padded([IDS, IDS])
    out, maps = random_model.forward(x, np.array([10, 900]), {"down": text, "mid": text, "up": text},
                                     probe=lambda b: True)
    assert out.shape == (2, 3, 32, 32)
    assert set(maps) == set(GROUP_OF_BLOCK)
    assert {g for g in BLOCK_GROUPS} == {"down", "mid", "up"}
    assert sorted(b for bs in BLOCK_GROUPS.values() for b in bs) == sorted(GROUP_OF_BLOCK)
    assert maps["down0"].shape == (2, 1024, 24) and maps["mid"].shape == (2, 64, 24)


def test_each_group_consumes_its_own_text(random_model):
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32))
    text = random_model.embed_padded([IDS])
    only_first = np.zeros_like(text.mask)
    only_first[:, 1] = True
    base = {"down": text, "mid": text, "up": text}
    ref, ref_maps = random_model.forward(x, [500], base, probe=lambda b: True)
    for g in ("down", "mid", "up"):
        routed = dict(base, **{g: text.with_mask(only_first)})
        out, maps = random_model.forward(x, [500], routed, probe=lambda b: True)
        assert not np.array_equal(out.data, ref.data)
        for block in BLOCK_GROUPS[g]:
            assert np.all(maps[block][0, :, 1] == 1.0)
        first = BLOCK_GROUPS[g][0]
        # blocks that run before the rerouted group are untouched
        earlier = {"down": [], "mid": ["down0", "down1"], "up": ["down0", "down1", "mid"]}[g]
        for block in earlier:
            assert np.array_equal(maps[block], ref_maps[block]), (g, block, first)


def test_routing_noop_bit_identical(random_model):
    x = np.random.default_rng(1).standard_normal((2, 3, 32, 32))
    text = random_model.embed_padded([IDS, IDS[:4]])
    routed = random_model(x, [5, 600], {"down": text, "mid": text, "up": text})
    plain = random_model.unrouted_forward(x, [5, 600], text)
    assert np.array_equal(routed.data, plain.data)


def test_forward_deterministic(random_model):
    x = np.random.default_rng(2).standard_normal((1, 3, 32, 32))
    text = random_model.embed_padded([IDS])
    a = random_model.unrouted_forward(x, [300], text).data
    b = random_model.unrouted_forward(x, [300], text).data
    assert np.array_equal(a, b)


def test_end_to_end_gradient_random_parameter_subset():
    model = Denoiser(seed=11)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 32, 32))
    target = rng.standard_normal((2, 3, 32, 32))
    t = np.array([100, 700])
    ids = [IDS, IDS[:5]]

    def loss_value():
        with tc.no_grad():
            return float(tc.mse(model.unrouted_forward(x, t, model.embed_padded(ids)), Tensor(target)).data)

    loss = tc.mse(model.unrouted_forward(x, t, model.embed_padded(ids)), Tensor(target))
    loss.backward()
    names = sorted(model.params)
    picks = rng.choice(len(names), size=8, replace=False)
    for k in picks:
        p = model.params[names[k]]
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        i = int(np.argmax(np.abs(gflat))) if rng.random() < 0.5 else int(rng.integers(flat.size))
        num = numeric_grad(loss_value, flat, i)
        denom = max(abs(gflat[i]), abs(num), 1e-7)
        assert abs(gflat[i] - num) / denom < 1e-3, names[k]


def test_checkpoint_roundtrip_bit_exact(tmp_path, random_model):
    path = tmp_path / "m.lpaw"
    save_checkpoint(path, random_model)
    loaded = load_checkpoint(path)
    assert loaded.config == random_model.config
    assert sorted(loaded.params) == sorted(random_model.params)
    for k, p in random_model.params.items():
        assert np.array_equal(loaded.params[k].data, p.data)
    assert path.read_bytes()[:4] == b"LPAW"
    save_checkpoint(tmp_path / "again.lpaw", loaded)
    assert (tmp_path / "again.lpaw").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.lpaw"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_untrained_detection():
    m = Denoiser(seed=0)
    assert not m.is_untrained()
    for p in m.params.values():
        p.data[...] = 0.0
    assert m.is_untrained()


def test_architecture_widths():
    layout = ArchConfig().block_layout()
    assert layout["down0"][1:] == (32, 32) and layout["down1"][1:] == (64, 16)
    assert layout["mid"][1:] == (64, 8)
    assert layout["up0"] == (128, 64, 16) and layout["up1"] == (96, 32, 32)
