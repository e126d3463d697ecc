"""Tiny text-conditioned U-Net epsilon-predictor.

Five blocks, each a residual conv block followed by one single-head
cross-attention layer::

    down0 (32ch, 32x32) -> down1 (64ch, 16x16) -> mid (64ch, 8x8)
      -> up0 (64ch, 16x16, skip from down1) -> up1 (32ch, 32x32, skip from down0)

Every cross-attention layer takes the text embedding routed to its block
group, so the Down/Mid/Up groups can be conditioned on different token
subsets. Masked tokens get -inf logits; shapes never change with routing.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .probe import AttnRecord
from .tensor import Tensor

GROUP_OF_BLOCK = {"down0": "down", "down1": "down", "mid": "mid", "up0": "up", "up1": "up"}
BLOCK_GROUPS = {"down": ("down0", "down1"), "mid": ("mid",), "up": ("up0", "up1")}

_CKPT_MAGIC = b"LPAW"
_CKPT_VERSION = 1


class UnknownTokenId(IndexError):
    pass


class EmptyMask(ValueError):
    pass


class UntrainedWeights(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    image_size: int = 32
    widths: tuple[int, int] = (32, 64)
    mid_width: int = 64
    d_txt: int = 32
    d_k: int = 32
    vocab_size: int = 111
    max_tokens: int = 24
    groups: int = 8
    t_freq_dim: int = 32
    t_emb_dim: int = 64

    def block_layout(self) -> dict[str, tuple[int, int, int]]:
        """block id -> (input channels, output channels, spatial size)."""
        w0, w1 = self.widths
        s = self.image_size
        return {
            "down0": (w0, w0, s),
            "down1": (w1, w1, s // 2),
            "mid": (w1, self.mid_width, s // 4),
            "up0": (self.mid_width + w1, w1, s // 2),
            "up1": (w1 + w0, w0, s),
        }


@dataclass
class TextEmbedding:
    """Token embeddings for a batch of prompts plus the per-token conditioning mask."""

    ids: np.ndarray  # (B, L) int
    matrix: Tensor  # (B, L, d_txt)
    mask: np.ndarray  # (B, L) bool

    def with_mask(self, mask: np.ndarray) -> TextEmbedding:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.mask.shape:
            raise ValueError(f"mask shape {mask.shape} != {self.mask.shape}")
        return replace(self, mask=mask)


def _normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))


def init_params(config: ArchConfig, seed: int = 0) -> dict[str, Tensor]:
    from .rng import stream

    rng = stream(seed, "init")
    p: dict[str, np.ndarray] = {}
    d, dk, te = config.d_txt, config.d_k, config.t_emb_dim
    p["text.tok"] = rng.standard_normal((config.vocab_size, d)) * 0.5
    p["text.pos"] = rng.standard_normal((config.max_tokens, d)) * 0.1
    p["time.w1"] = _normal(rng, (config.t_freq_dim, te), config.t_freq_dim)
    p["time.b1"] = np.zeros(te)
    p["time.w2"] = _normal(rng, (te, te), te)
    p["time.b2"] = np.zeros(te)
    w0, w1 = config.widths
    p["conv_in.w"] = _normal(rng, (3, 3, config.in_channels, w0), 9 * config.in_channels)
    p["conv_in.b"] = np.zeros(w0)
    for block, (cin, cout, _) in config.block_layout().items():
        pre = f"{block}.res"
        p[f"{pre}.gn1.g"], p[f"{pre}.gn1.b"] = np.ones(cin), np.zeros(cin)
        p[f"{pre}.conv1.w"] = _normal(rng, (3, 3, cin, cout), 9 * cin, math.sqrt(2.0))
        p[f"{pre}.conv1.b"] = np.zeros(cout)
        p[f"{pre}.temb.w"] = _normal(rng, (te, cout), te)
        p[f"{pre}.temb.b"] = np.zeros(cout)
        p[f"{pre}.gn2.g"], p[f"{pre}.gn2.b"] = np.ones(cout), np.zeros(cout)
        p[f"{pre}.conv2.w"] = _normal(rng, (3, 3, cout, cout), 9 * cout, 0.5)
        p[f"{pre}.conv2.b"] = np.zeros(cout)
        if cin != cout:
            p[f"{pre}.skip.w"] = _normal(rng, (cin, cout), cin)
            p[f"{pre}.skip.b"] = np.zeros(cout)
        pre = f"{block}.attn"
        p[f"{pre}.gn.g"], p[f"{pre}.gn.b"] = np.ones(cout), np.zeros(cout)
        p[f"{pre}.q.w"] = _normal(rng, (cout, dk), cout)
        p[f"{pre}.k.w"] = _normal(rng, (d, dk), d)
        p[f"{pre}.v.w"] = _normal(rng, (d, dk), d)
        p[f"{pre}.o.w"] = _normal(rng, (dk, cout), dk, 0.5)
        p[f"{pre}.o.b"] = np.zeros(cout)
    p["down0.downsample.w"] = _normal(rng, (3, 3, w0, w1), 9 * w0)
    p["down0.downsample.b"] = np.zeros(w1)
    p["down1.downsample.w"] = _normal(rng, (3, 3, w1, w1), 9 * w1)
    p["down1.downsample.b"] = np.zeros(w1)
    p["out.gn.g"], p["out.gn.b"] = np.ones(w0), np.zeros(w0)
    p["out.conv.w"] = _normal(rng, (3, 3, w0, config.in_channels), 9 * w0, 0.1)
    p["out.conv.b"] = np.zeros(config.in_channels)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser:
    def __init__(self, config: ArchConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config or ArchConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        self.calls = 0

    # -- text ---------------------------------------------------------------------

    def embed_text(self, token_ids) -> TextEmbedding:
        """Embed one prompt (list of ids) or a (B, L) id array; rows depend only on id and position."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] > self.config.max_tokens:
            raise ValueError(f"prompt longer than {self.config.max_tokens} tokens")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise UnknownTokenId("token id outside the vocabulary")
        tok = tc.embedding(self.params["text.tok"], ids)
        pos = tc.reshape(tc.embedding(self.params["text.pos"], np.arange(ids.shape[1])),
                         (1, ids.shape[1], self.config.d_txt))
        return TextEmbedding(ids, tc.add(tok, pos), np.ones(ids.shape, dtype=bool))

    def padded_ids(self, prompts: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Pad id lists to max_tokens; returns (ids, valid-token mask)."""
        L = self.config.max_tokens
        ids = np.zeros((len(prompts), L), dtype=np.int64)
        valid = np.zeros((len(prompts), L), dtype=bool)
        for i, seq in enumerate(prompts):
            if len(seq) > L:
                raise ValueError(f"prompt longer than {L} tokens")
            ids[i, :len(seq)] = seq
            valid[i, :len(seq)] = True
        return ids, valid

    def embed_padded(self, prompts: list[list[int]]) -> TextEmbedding:
        ids, valid = self.padded_ids(prompts)
        return self.embed_text(ids).with_mask(valid)

    # -- layers -------------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def time_embedding(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_features(t, self.config.t_freq_dim))
        h = tc.silu(tc.linear(feats, self._p("time.w1"), self._p("time.b1")))
        return tc.linear(h, self._p("time.w2"), self._p("time.b2"))

    def res_block(self, block: str, x: Tensor, temb_act: Tensor) -> Tensor:
        pre = f"{block}.res"
        g = self.config.groups
        h = tc.silu(tc.group_norm(x, self._p(f"{pre}.gn1.g"), self._p(f"{pre}.gn1.b"), g))
        h = tc.conv2d(h, self._p(f"{pre}.conv1.w"), self._p(f"{pre}.conv1.b"))
        tproj = tc.linear(temb_act, self._p(f"{pre}.temb.w"), self._p(f"{pre}.temb.b"))
        h = tc.add(h, tc.reshape(tproj, (tproj.shape[0], 1, 1, tproj.shape[1])))
        h = tc.silu(tc.group_norm(h, self._p(f"{pre}.gn2.g"), self._p(f"{pre}.gn2.b"), g))
        h = tc.conv2d(h, self._p(f"{pre}.conv2.w"), self._p(f"{pre}.conv2.b"))
        skip = x
        if f"{pre}.skip.w" in self.params:
            skip = tc.linear(x, self._p(f"{pre}.skip.w"), self._p(f"{pre}.skip.b"))
        return tc.add(skip, h)

    def cross_attention(self, block: str, x: Tensor, text: TextEmbedding,
                        return_map: bool = False) -> tuple[Tensor, np.ndarray | None]:
        """Residual single-head cross-attention; x is (B, H, W, C) channels-last."""
        if not text.mask.any(axis=-1).all():
            raise EmptyMask(f"{block}: every token masked for some prompt")
        pre = f"{block}.attn"
        b, h, w, c = x.shape
        hn = tc.group_norm(x, self._p(f"{pre}.gn.g"), self._p(f"{pre}.gn.b"), self.config.groups)
        q = tc.linear(tc.reshape(hn, (b, h * w, c)), self._p(f"{pre}.q.w"))
        k = tc.linear(text.matrix, self._p(f"{pre}.k.w"))
        v = tc.linear(text.matrix, self._p(f"{pre}.v.w"))
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.config.d_k))
        attn = tc.softmax_rows(scores, text.mask[:, None, :])
        out = tc.linear(tc.matmul(attn, v), self._p(f"{pre}.o.w"), self._p(f"{pre}.o.b"))
        y = tc.add(x, tc.reshape(out, (b, h, w, c)))
        return y, (attn.data if return_map else None)

    # -- full network -------------------------------------------------------------

    def forward(self, x_t, t, routed_text: dict[str, TextEmbedding], probe=None) -> tuple[Tensor, dict]:
        """eps prediction for (B, C, H, W) input; ``routed_text`` maps "down"/"mid"/"up" to embeddings.

        ``probe`` is an optional callable ``(block_id) -> bool``; maps of the
        blocks it accepts are returned as {block_id: (B, h*w, L) array}.
        """
        missing = {"down", "mid", "up"} - set(routed_text)
        if missing:
            raise ValueError(f"no routed text for groups {sorted(missing)}")
        self.calls += 1
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise tc.ShapeMismatch(f"expected (B, {self.config.in_channels}, H, W), got {x.shape}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        maps: dict[str, np.ndarray] = {}
        temb = tc.silu(self.time_embedding(t))

        def block(name: str, h: Tensor) -> Tensor:
            h = self.res_block(name, h, temb)
            want = probe is not None and probe(name)
            h, amap = self.cross_attention(name, h, routed_text[GROUP_OF_BLOCK[name]], want)
            if want:
                maps[name] = amap
            return h

        h = tc.transpose(x, (0, 2, 3, 1))
        h = tc.conv2d(h, self._p("conv_in.w"), self._p("conv_in.b"))
        skip0 = block("down0", h)
        h = tc.conv2d(skip0, self._p("down0.downsample.w"), self._p("down0.downsample.b"), stride=2)
        skip1 = block("down1", h)
        h = tc.conv2d(skip1, self._p("down1.downsample.w"), self._p("down1.downsample.b"), stride=2)
        h = block("mid", h)
        h = block("up0", tc.concat([tc.upsample2x(h), skip1], axis=-1))
        h = block("up1", tc.concat([tc.upsample2x(h), skip0], axis=-1))
        h = tc.silu(tc.group_norm(h, self._p("out.gn.g"), self._p("out.gn.b"), self.config.groups))
        h = tc.conv2d(h, self._p("out.conv.w"), self._p("out.conv.b"))
        return tc.transpose(h, (0, 3, 1, 2)), maps

    def __call__(self, x_t, t, routed_text, probe=None) -> Tensor:
        return self.forward(x_t, t, routed_text, probe)[0]

    def unrouted_forward(self, x_t, t, text: TextEmbedding) -> Tensor:
        return self.forward(x_t, t, {"down": text, "mid": text, "up": text})[0]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def is_untrained(self) -> bool:
        return all(not p.data.any() for p in self.params.values())


def unet_forward(model: Denoiser, x_t, t, routed_text: dict[str, TextEmbedding]) -> Tensor:
    return model(x_t, t, routed_text)


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Denoiser) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    chunks = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION), struct.pack("<I", len(cfg)), cfg,
              struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> Denoiser:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    raw_cfg = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    raw_cfg["widths"] = tuple(raw_cfg["widths"])
    config = ArchConfig(**raw_cfg)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
        params[name] = Tensor(arr, requires_grad=True)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return Denoiser(config, params)
