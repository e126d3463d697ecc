"""Cross-attention recording, localization statistics and attention dumps."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

GROUPS = ("down", "mid", "up")
_DUMP_MAGIC = b"LPAA"
_DUMP_VERSION = 1


class NonIntegerScale(ValueError):
    pass


class EmptyRegion(ValueError):
    pass


@dataclass
class AttnRecord:
    block_id: str
    group: str
    step: int
    t_train: int
    h: int
    w: int
    map: np.ndarray  # (h*w, |T|), rows are softmax distributions over tokens


@dataclass
class RegionMask:
    entity: int
    mask: np.ndarray = field(repr=False)
    source: str = "oracle"  # or "attention_derived"
    fallback: bool = False


@dataclass(frozen=True)
class ProbeFilter:
    """Which (group, step) pairs a sampling run records; None means all."""

    groups: frozenset[str] | None = None
    steps: frozenset[int] | None = None

    @classmethod
    def parse(cls, text: str | None) -> ProbeFilter | None:
        if not text:
            return None
        groups = frozenset(g.strip().lower() for g in text.split(",") if g.strip())
        bad = groups - set(GROUPS)
        if bad:
            raise ValueError(f"unknown block groups in probe filter: {sorted(bad)}")
        return cls(groups=groups)

    def wants(self, group: str, step: int) -> bool:
        return (self.groups is None or group in self.groups) and (self.steps is None or step in self.steps)


def upsample_map(rec: AttnRecord, H: int, W: int) -> np.ndarray:
    """Nearest-neighbour upsample to (H, W, |T|)."""
    if H % rec.h or W % rec.w:
        raise NonIntegerScale(f"cannot upsample {rec.h}x{rec.w} to {H}x{W}")
    grid = rec.map.reshape(rec.h, rec.w, -1)
    return np.repeat(np.repeat(grid, H // rec.h, axis=0), W // rec.w, axis=1)


def localization_score(maps: np.ndarray | Sequence[np.ndarray], token_indices: Iterable[int],
                       region: RegionMask | np.ndarray) -> float:
    """Share of the given tokens' attention mass that falls inside ``region``.

    ``maps`` is one (H, W, |T|) map or a sequence of them; with several maps
    the per-map scores are averaged.
    """
    mask = region.mask if isinstance(region, RegionMask) else np.asarray(region, dtype=bool)
    if not mask.any():
        raise EmptyRegion("region mask is empty")
    tokens = sorted(set(token_indices))
    stack = [maps] if isinstance(maps, np.ndarray) and maps.ndim == 3 else list(maps)
    scores = []
    for m in stack:
        mass = m[:, :, tokens].sum(axis=2)
        total = mass.sum()
        scores.append(mass[mask].sum() / total if total > 0 else 0.0)
    return float(np.mean(scores))


def attention_region(records: Sequence[AttnRecord], token_indices: Iterable[int], theta: float = 0.5,
                     H: int = 32, W: int = 32, entity: int = 0, late_fraction: float = 0.5) -> RegionMask:
    """Threshold the min-max normalised late Up-block attention of an entity's tokens.

    Falls back to the top 10% of pixels (flagged) when thresholding would give
    an empty mask or the map has no contrast.
    """
    ups = [r for r in records if r.group == "up"]
    if not ups:
        raise ValueError("attention_region needs at least one Up-block record")
    last = max(r.step for r in ups)
    first = min(r.step for r in ups)
    cutoff = last - (last - first) * late_fraction
    late = [r for r in ups if r.step >= cutoff]
    tokens = sorted(set(token_indices))
    acc = np.zeros((H, W))
    for r in late:
        acc += upsample_map(r, H, W)[:, :, tokens].sum(axis=2)
    acc /= len(late)
    lo, hi = acc.min(), acc.max()
    mask = None
    if hi - lo > 1e-12:
        mask = (acc - lo) / (hi - lo) >= theta
    if mask is not None and mask.any():
        return RegionMask(entity, mask, "attention_derived")
    k = max(1, int(np.ceil(0.1 * H * W)))
    order = np.argsort(-acc.reshape(-1), kind="stable")[:k]
    top = np.zeros(H * W, dtype=bool)
    top[order] = True
    return RegionMask(entity, top.reshape(H, W), "attention_derived", fallback=True)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# --- binary dumps ------------------------------------------------------------------


def write_dump(path: str | Path, records: Sequence[AttnRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC + struct.pack("<II", _DUMP_VERSION, len(records)))
        for r in records:
            name = r.block_id.encode("utf-8")
            n_tok = r.map.shape[1]
            fh.write(struct.pack("<H", len(name)) + name)
            fh.write(struct.pack("<BIIIII", GROUPS.index(r.group), r.step, r.t_train, r.h, r.w, n_tok))
            fh.write(np.ascontiguousarray(r.map, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated attention dump")
    return data


def read_dump(path: str | Path) -> list[AttnRecord]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _DUMP_MAGIC:
            raise ValueError(f"{path} is not an attention dump")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != _DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        records = []
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            block_id = _read_exact(fh, n).decode("utf-8")
            g, step, t_train, h, w, n_tok = struct.unpack("<BIIIII", _read_exact(fh, 21))
            values = np.frombuffer(_read_exact(fh, 8 * h * w * n_tok), dtype="<f8")
            records.append(AttnRecord(block_id, GROUPS[g], step, t_train, h, w,
                                      values.reshape(h * w, n_tok).astype(np.float64)))
    return records


def token_heatmaps(rec: AttnRecord, H: int = 32, W: int = 32) -> list[np.ndarray]:
    """Per-token (H, W) maps scaled to [0, 1] by their own maximum."""
    up = upsample_map(rec, H, W)
    out = []
    for j in range(up.shape[2]):
        m = up[:, :, j]
        peak = m.max()
        out.append(m / peak if peak > 0 else m)
    return out
