"""Metric suite with hand-built proxy embeddings.

* ``palette_stats``: 3x3x3 RGB histogram + per-channel mean/std (33 dims) of
  the selected pixels, unit-normalised. Styles differ by palette and texture,
  so this separates them by construction.
* ``patch_moments``: per 8x8 patch and channel, mean / variance / gradient
  energy (144 dims for 32x32), unit-normalised; used for diversity.

``clip_prompt`` is the oracle-detector alignment score and ``clip_style`` the
style-consistency score; the column names keep the conventional metric names.
"""
from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import synthbench as sb
from .probe import RegionMask


class EmptyRegions(ValueError):
    pass


class EmptyList(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def palette_stats(image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    x = np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    px = x.reshape(3, -1) if mask is None else x[:, np.asarray(mask, dtype=bool)]
    if px.shape[1] == 0:
        raise EmptyRegions("palette_stats over an empty pixel set")
    bins = np.minimum((px * 3).astype(np.int64), 2)
    idx = bins[0] * 9 + bins[1] * 3 + bins[2]
    hist = np.bincount(idx, minlength=27) / px.shape[1]
    return _unit(np.concatenate([hist, px.mean(axis=1), px.std(axis=1)]))


def patch_moments(image: np.ndarray, mask: np.ndarray | None = None, patch: int = 8) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if mask is not None:
        x = x * np.asarray(mask, dtype=np.float64)[None]
    c, h, w = x.shape
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[:, :, :-1] = np.diff(x, axis=2)
    gy[:, :-1, :] = np.diff(x, axis=1)
    energy = gx ** 2 + gy ** 2

    def pool(a, fn):
        return fn(a.reshape(c, h // patch, patch, w // patch, patch), axis=(2, 4))

    feats = [pool(x, np.mean), pool(x, np.var), pool(energy, np.mean)]
    return _unit(np.stack(feats, axis=-1).reshape(-1))


@dataclass(frozen=True)
class EmbedFn:
    name: str
    dim: int
    fn: Callable[..., np.ndarray]

    def __call__(self, image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        return self.fn(image, mask)


EMBEDDINGS = {"palette_stats": EmbedFn("palette_stats", 33, palette_stats),
              "patch_moments": EmbedFn("patch_moments", 144, patch_moments)}


def embed_fn(name: str | EmbedFn) -> EmbedFn:
    if isinstance(name, EmbedFn):
        return name
    try:
        return EMBEDDINGS[name]
    except KeyError:
        raise ValueError(f"unknown embedding {name!r}; choose from {sorted(EMBEDDINGS)}") from None


def style_reference(style: str) -> np.ndarray:
    return sb.style_swatch(style)


def _region_cosines(image, regions: Sequence[RegionMask], style_ref, f: EmbedFn) -> list[float]:
    if not regions:
        raise EmptyRegions("need at least one region")
    f = embed_fn(f)
    ref = f(style_ref)
    return [cosine(f(image, r.mask), ref) for r in regions]


def style_loss(image, regions: Sequence[RegionMask], style_ref, f: EmbedFn | str = "palette_stats") -> float:
    """Sum over regions of 1 - cos(f(region), f(style reference)); in [0, 2N]."""
    return float(sum(1.0 - c for c in _region_cosines(image, regions, style_ref, f)))


def style_consistency(image, regions: Sequence[RegionMask], style_ref,
                      f: EmbedFn | str = "palette_stats") -> float:
    """Mean over regions of (1 + cos) / 2; in [0, 1]."""
    cos = _region_cosines(image, regions, style_ref, f)
    return float(sum((1.0 + c) / 2.0 for c in cos) / len(cos))


def rerank(losses: Sequence[float]) -> int:
    """Index of the lowest loss, ties to the lowest index."""
    if len(losses) == 0:
        raise EmptyList("no losses to rank")
    best = 0
    for i in range(1, len(losses)):
        if losses[i] < losses[best]:
            best = i
    return best


def diversity(samples: Sequence[np.ndarray], f: EmbedFn | str = "patch_moments") -> float:
    """Mean pairwise 1 - cos over all unordered sample pairs."""
    if len(samples) < 2:
        raise TooFewSamples("diversity needs at least two samples")
    f = embed_fn(f)
    embs = [f(s) for s in samples]
    dists = [1.0 - cosine(a, b) for a, b in itertools.combinations(embs, 2)]
    return float(math.fsum(dists) / len(dists))


# --- detector-based alignment --------------------------------------------------------


def _relation_ok(relation: str, prev: sb.Detection | None, cur: sb.Detection) -> bool:
    if prev is None or relation == "and":
        return True
    dr = cur.cell[0] - prev.cell[0]
    dc = cur.cell[1] - prev.cell[1]
    if relation == "on":
        return dr > 0  # the previous entity sits strictly above this one
    return abs(dr) < abs(dc)  # next_to: horizontal neighbours


def match_entities(spec: sb.SceneSpec, detections: Sequence[sb.Detection]):
    """Assign detections to ground-truth entities maximising the number of hits.

    An entity is hit by a detection of its shape whose position relative to the
    previous entity's detection fits the scene relation ("on": strictly above,
    "next to": more horizontal than vertical offset). Exhaustive over injective
    assignments (<= 3 entities, <= 9 detections); the first maximal assignment
    in enumeration order wins. Returns (per-entity detection or None, hits).
    """
    n = len(spec.entities)
    options = [None, *range(len(detections))]
    best, best_hits = (None,) * n, 0
    for combo in itertools.product(options, repeat=n):
        used = [c for c in combo if c is not None]
        if len(used) != len(set(used)):
            continue
        hits = 0
        ok = True
        for k, (ent, c) in enumerate(zip(spec.entities, combo)):
            if c is None:
                continue
            det = detections[c]
            prev = detections[combo[k - 1]] if k and combo[k - 1] is not None else None
            if det.shape != ent.shape or not _relation_ok(spec.relation, prev, det):
                ok = False
                break
            hits += 1
        if ok and hits > best_hits:
            best, best_hits = combo, hits
    return [detections[i] if i is not None else None for i in best], best_hits


def prompt_alignment(image: np.ndarray, spec: sb.SceneSpec,
                     detections: Sequence[sb.Detection] | None = None) -> float:
    """(entity hits + style bit) / (n + 1); style-free prompts score hits / n."""
    dets = sb.oracle_detect(image) if detections is None else list(detections)
    matched, hits = match_entities(spec, dets)
    n = len(spec.entities)
    if spec.variant == "no_style":
        return hits / n
    pool = [d for d in matched if d is not None] or dets
    style_bit = 0
    if pool:
        counts = Counter(d.palette for d in pool)
        top = max(counts.values())
        majority = sorted(p for p, c in counts.items() if c == top)[0]
        style_bit = int(majority == spec.style)
    return (hits + style_bit) / (n + 1)


def all_entities_found(image: np.ndarray, spec: sb.SceneSpec) -> bool:
    """Every entity detected with its shape (positions and palette are not checked)."""
    dets = sb.oracle_detect(image)
    shapes = Counter(d.shape for d in dets)
    need = Counter(e.shape for e in spec.entities)
    return all(shapes[s] >= c for s, c in need.items())


def detector_regions(image: np.ndarray, spec: sb.SceneSpec,
                     detections: Sequence[sb.Detection] | None = None) -> list[RegionMask]:
    """One region per ground-truth entity from its matched detection's stencil.

    Unmatched entities fall back to the foreground not claimed by any
    detection, then to the whole image; fallbacks are flagged.
    """
    dets = sb.oracle_detect(image) if detections is None else list(detections)
    matched, _ = match_entities(spec, dets)
    claimed = np.zeros((sb.SIZE, sb.SIZE), dtype=bool)
    for d in dets:
        claimed |= d.mask
    spare = sb.foreground(image) & ~claimed
    regions = []
    for k, det in enumerate(matched):
        if det is not None:
            regions.append(RegionMask(k, det.mask.copy(), "oracle"))
        elif spare.any():
            regions.append(RegionMask(k, spare.copy(), "oracle", fallback=True))
        else:
            regions.append(RegionMask(k, np.ones((sb.SIZE, sb.SIZE), dtype=bool), "oracle", fallback=True))
    return regions


# --- records -------------------------------------------------------------------------


CSV_HEADER = ("prompt_id", "category", "complexity", "preset", "parser", "window", "clip_prompt",
              "clip_style", "diversity", "l_style", "chosen_sample")


@dataclass(frozen=True)
class MetricsRecord:
    prompt_id: str
    category: str
    complexity: str
    preset: str
    parser: str
    window: str
    clip_prompt: float
    clip_style: float
    diversity: float
    l_style: float
    chosen_sample: int

    def __post_init__(self):
        for name in ("clip_prompt", "clip_style", "diversity", "l_style"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")

    def row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        return out


def write_metrics_csv(path, records: Sequence[MetricsRecord]) -> None:
    """Header plus rows sorted by (preset, window, parser, prompt_id)."""
    rows = sorted(records, key=lambda r: (r.preset, r.window, r.parser, r.prompt_id))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.row())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = dict(r)
        for k in ("clip_prompt", "clip_style", "diversity", "l_style"):
            d[k] = float(d[k])
        d["chosen_sample"] = int(d["chosen_sample"])
        out.append(MetricsRecord(**d))
    return out
