"""Synthetic stand-in for the style-rich prompt benchmark.

Scenes are 1-3 shapes on a 3x3 grid of a 32x32 canvas, filled with a style's
palette and texture over the style's background. Nouns alias onto the four
shapes so every prompt category is renderable, and the renderer hands back an
exact mask per entity. ``oracle_detect`` inverts the renderer by template
matching and is what the evaluator uses in place of a pretrained
image-text model.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .prompt_parser import CATEGORIES, COMPLEXITIES, Prompt
from .probe import RegionMask

SIZE = 32
SHAPES = ("circle", "square", "triangle", "star")
CELL_CENTERS = (7.0, 16.0, 25.0)
RADIUS = {"small": 4.0, "large": 5.0}
JITTERS = (-1.0, -0.5, 0.0, 0.5, 1.0)
RELATIONS = ("and", "on", "next_to")
TEXTURES = ("flat", "stripes", "checker", "noise")
TEXTURE_RANK = {"flat": 0, "stripes": 1, "checker": 1, "noise": 2}
DETECT_THRESHOLD = 0.7
FG_THRESHOLD = 0.25

SIZE_ADJECTIVES = {"big": "large", "large": "large", "giant": "large",
                   "small": "small", "tiny": "small", "little": "small"}
FLAVOR_ADJECTIVES = ("flying", "sleeping", "happy", "old", "young", "wooden", "shiny", "ancient", "angry")

# noun phrase -> shape, grouped by the role the noun plays in prompt categories
ENTITY_GROUPS: dict[str, dict[str, str]] = {
    "object": {"car": "square", "spaceship": "triangle", "balloon": "circle", "clock": "circle",
               "chair": "square", "lamp": "triangle", "guitar": "star", "kite": "star",
               "box": "square", "umbrella": "triangle"},
    "scene": {"waterfall": "square", "temple": "triangle", "castle": "square", "tower": "square",
              "mountain": "triangle", "bridge": "square", "lighthouse": "triangle",
              "fountain": "circle", "windmill": "star", "pyramid": "triangle"},
    "human": {n: "triangle" for n in ("samurai", "monk", "knight", "dancer", "wizard", "pilot",
                                      "chef", "farmer", "sailor", "queen")},
    "animal": {n: "circle" for n in ("tiger", "lion", "cat", "dog", "owl", "fox", "rabbit",
                                     "bear", "shark", "horse")},
    "urban": {n: "square" for n in ("bus stop", "streetlight", "skyscraper", "taxi", "bench",
                                    "subway", "billboard", "mailbox", "hydrant", "kiosk")},
    "abstract": {n: "star" for n in ("time", "memory", "dream", "hope", "chaos", "silence",
                                     "freedom", "love", "fear", "infinity")},
}
NOUN_SHAPE = {noun: shape for group in ENTITY_GROUPS.values() for noun, shape in group.items()}

# which noun group fills each entity slot, per category
CATEGORY_SLOTS = {
    "multi_object_style": ("object", "object", "object"),
    "scene_object_style": ("scene", "object", "object"),
    "multi_human": ("human", "human", "human"),
    "animal_urban": ("animal", "urban", "animal"),
    "abstract_style": ("abstract", "abstract", "abstract"),
}


class OverlapUnresolvable(RuntimeError):
    pass


def _hex(code: str) -> tuple[float, float, float]:
    return tuple(int(code[i:i + 2], 16) / 255.0 for i in (0, 2, 4))


@dataclass(frozen=True)
class StyleDef:
    id: str
    palette: tuple[tuple[float, float, float], ...]  # fill, secondary fill, background; RGB in [0, 1]
    texture: str
    background: str = "solid"  # or "gradient": background darkens 20% top to bottom

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self.id.split("_"))

    @property
    def phrase(self) -> str:
        return " ".join(self.words)


def _style(sid, fill, fill2, bg, texture, background="solid"):
    return StyleDef(sid, (_hex(fill), _hex(fill2), _hex(bg)), texture, background)


STYLES: tuple[StyleDef, ...] = (
    _style("vaporwave", "ff71ce", "01cdfe", "2d1b4e", "stripes", "gradient"),
    _style("cyberpunk", "fcee0a", "00f0ff", "0a0a1a", "checker"),
    _style("watercolor", "3d85c6", "6aa84f", "f5f0e6", "noise", "gradient"),
    _style("ukiyoe", "c0392b", "1f3a93", "f3e5c0", "flat"),
    _style("noir", "f0f0f0", "909090", "101010", "stripes"),
    _style("cubist", "d35400", "2c3e50", "e8d5b7", "checker"),
    _style("graffiti", "39ff14", "ff3131", "3a3a3a", "noise"),
    _style("pastel", "ffb3ba", "bae1ff", "6b5b95", "flat", "gradient"),
    _style("retro", "e07a5f", "f2cc8f", "3d405b", "stripes"),
    _style("gothic", "8b0000", "4b0082", "c0c0c0", "checker"),
    _style("steampunk", "b87333", "ffd700", "2b1d0e", "noise"),
    _style("impressionist", "f4d03f", "5dade2", "1e8449", "flat"),
    _style("baroque", "daa520", "800020", "fff8dc", "stripes", "gradient"),
    _style("minimalist", "000000", "555555", "ffffff", "checker"),
    _style("psychedelic", "ff00ff", "00ff00", "ff8c00", "noise"),
    _style("oceanic", "00ced1", "f0fff0", "001f3f", "flat", "gradient"),
    _style("neon", "ff073a", "7df9ff", "000000", "stripes"),
    _style("sepia", "5b3a1a", "a0522d", "f4ecd8", "checker"),
    _style("pop_art", "ff0000", "ffff00", "0000ff", "noise"),
    _style("pixel_art", "00a800", "fcfcfc", "5c94fc", "flat"),
)
STYLE_BY_ID = {s.id: s for s in STYLES}


@dataclass(frozen=True)
class Entity:
    noun: str
    shape: str
    cell: tuple[int, int]  # (row, col) on the 3x3 grid
    size: str = "small"
    adjective: str | None = None

    @property
    def phrase(self) -> str:
        return f"{self.adjective} {self.noun}" if self.adjective else self.noun


@dataclass(frozen=True)
class SceneSpec:
    entities: tuple[Entity, ...]
    relation: str
    style: str
    category: str
    complexity: str
    variant: str | None = None  # None, "genre_modifier", "no_marker" or "no_style"

    def __post_init__(self):
        if not 1 <= len(self.entities) <= 3:
            raise ValueError("a scene holds 1-3 entities")
        cells = [e.cell for e in self.entities]
        if len(set(cells)) != len(cells):
            raise ValueError("entities must occupy distinct cells")
        if self.style not in STYLE_BY_ID:
            raise ValueError(f"unknown style {self.style!r}")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")

    @property
    def style_def(self) -> StyleDef:
        return STYLE_BY_ID[self.style]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entities"] = [dict(asdict(e), cell=list(e.cell)) for e in self.entities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        ents = tuple(Entity(e["noun"], e["shape"], tuple(e["cell"]), e["size"], e.get("adjective"))
                     for e in d["entities"])
        return cls(ents, d["relation"], d["style"], d["category"], d["complexity"], d.get("variant"))


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def prompt_text(spec: SceneSpec) -> str:
    rel = {"and": "and", "on": "on", "next_to": "next to"}[spec.relation]
    style = spec.style_def
    parts = []
    for k, ent in enumerate(spec.entities):
        words = ent.phrase
        if k == 0 and spec.variant == "genre_modifier":
            words = f"{style.phrase} {words}"
        art = _article(words)
        if k == 0:
            parts.append(f"{art.capitalize()} {words}")
        else:
            parts.append(f"{rel} {art} {words}")
    text = " ".join(parts)
    if spec.variant == "no_style":
        return text
    if spec.variant == "no_marker":
        return f"{text} in {style.phrase}"
    return f"{text} in {style.phrase} style"


def complexity_of(n_entities: int, texture: str) -> str:
    return COMPLEXITIES[min(n_entities - 1 + TEXTURE_RANK[texture], len(COMPLEXITIES) - 1)]


def _place(relation: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    if relation == "on":
        col = int(rng.integers(3))
        top = int(rng.integers(0, 4 - n))
        return [(top + k, col) for k in range(n)]
    if relation == "next_to":
        row = int(rng.integers(3))
        left = int(rng.integers(0, 4 - n))
        return [(row, left + k) for k in range(n)]
    cells = [(r, c) for r in range(3) for c in range(3)]
    pick = rng.choice(len(cells), size=n, replace=False)
    return [cells[int(i)] for i in pick]


def sample_spec(category: str, rng: np.random.Generator, *, with_style: bool = True,
                variant_rate: float = 0.2, n_entities: int | None = None) -> SceneSpec:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if n_entities is None:
        if category == "abstract_style":
            n_entities = int(rng.choice([1, 2, 3], p=[0.3, 0.4, 0.3]))
        else:
            n_entities = int(rng.choice([2, 3], p=[0.6, 0.4]))
    relation = RELATIONS[int(rng.integers(len(RELATIONS)))]
    cells = _place(relation, n_entities, rng)
    used: set[str] = set()
    entities: list[Entity] = []
    for k in range(n_entities):
        group = ENTITY_GROUPS[CATEGORY_SLOTS[category][k]]
        nouns = sorted(n for n in group if n not in used)
        noun = nouns[int(rng.integers(len(nouns)))]
        used.add(noun)
        roll = rng.random()
        if roll < 0.4:
            adjective = None
        elif roll < 0.7:
            adjective = sorted(SIZE_ADJECTIVES)[int(rng.integers(len(SIZE_ADJECTIVES)))]
        else:
            adjective = FLAVOR_ADJECTIVES[int(rng.integers(len(FLAVOR_ADJECTIVES)))]
        size = SIZE_ADJECTIVES.get(adjective) or ("large" if rng.random() < 0.5 else "small")
        # two large shapes in neighbouring cells cannot be kept apart by jitter
        if size == "large" and any(
            e.size == "large" and max(abs(e.cell[0] - cells[k][0]), abs(e.cell[1] - cells[k][1])) == 1
            for e in entities
        ):
            size = "small"
            if adjective in SIZE_ADJECTIVES:
                adjective = "small"
        entities.append(Entity(noun, NOUN_SHAPE[noun], cells[k], size, adjective))
    style = STYLES[int(rng.integers(len(STYLES)))]
    variant = None
    if not with_style:
        variant = "no_style"
    elif rng.random() < variant_rate:
        variant = ("genre_modifier", "no_marker")[int(rng.integers(2))]
    return SceneSpec(tuple(entities), relation, style.id, category,
                     complexity_of(n_entities, style.texture), variant)


def gen_prompt_suite(n: int = 50, seed: int = 0, *, with_style: bool = True) -> list[tuple[Prompt, SceneSpec]]:
    """Round-robin over the five categories; prompt k draws from its own stream."""
    if n < 5:
        raise ValueError("a suite needs at least one prompt per category")
    suite = []
    component = "suite" if with_style else "suite_nostyle"
    for k in range(n):
        category = CATEGORIES[k % len(CATEGORIES)]
        spec = sample_spec(category, rngmod.stream(seed, component, k), with_style=with_style)
        suite.append((Prompt(prompt_text(spec), spec.category, spec.complexity), spec))
    return suite


def gen_training_specs(n: int = 5000, seed: int = 0, no_style_rate: float = 0.1) -> list[SceneSpec]:
    """Training corpus specs; a share of prompts omit the style so style-free prompts stay in-distribution."""
    specs = []
    for k in range(n):
        r = rngmod.stream(seed, "train_scene", k)
        category = CATEGORIES[int(r.integers(len(CATEGORIES)))]
        with_style = r.random() >= no_style_rate
        specs.append(sample_spec(category, r, with_style=with_style))
    return specs


# --- rendering -------------------------------------------------------------------

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE] + 0.5


def _polygon_mask(cy: float, cx: float, verts: np.ndarray) -> np.ndarray:
    py, px = _YY - cy, _XX - cx
    inside = np.zeros((SIZE, SIZE), dtype=bool)
    vy, vx = verts[:, 0], verts[:, 1]
    for i in range(len(verts)):
        y0, x0, y1, x1 = vy[i], vx[i], vy[i - 1], vx[i - 1]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def shape_mask(shape: str, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = _YY - cy, _XX - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.85 * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= (dy + r) / 1.8)
    if shape == "star":
        ang = -np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.15 * r, 0.5 * r)
        verts = np.stack([rad * np.sin(ang), rad * np.cos(ang)], axis=1)
        return _polygon_mask(cy, cx, verts)
    raise ValueError(f"unknown shape {shape!r}")


@lru_cache(maxsize=None)
def _stencil(shape: str, size: str, row: int, col: int, jy: float, jx: float) -> np.ndarray:
    m = shape_mask(shape, CELL_CENTERS[row] + jy, CELL_CENTERS[col] + jx, RADIUS[size])
    m.setflags(write=False)
    return m


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def background(style: StyleDef) -> np.ndarray:
    """(3, H, W) background in [0, 1]."""
    bg = np.asarray(style.palette[2])[:, None, None] * np.ones((3, SIZE, SIZE))
    if style.background == "gradient":
        bg = bg * np.linspace(1.0, 0.8, SIZE)[None, :, None]
    return bg


def texture_fill(style: StyleDef, rng: np.random.Generator, shape=(SIZE, SIZE)) -> np.ndarray:
    """(3, H, W) fill pattern in [0, 1] using the style's two fill colours."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    if style.texture == "flat":
        pick = np.zeros((h, w), dtype=bool)
    elif style.texture == "stripes":
        pick = (yy // 2) % 2 == 1
    elif style.texture == "checker":
        pick = (yy // 2 + xx // 2) % 2 == 1
    else:
        pick = rng.random((h, w)) < 0.5
    c0, c1 = (np.asarray(c)[:, None, None] for c in style.palette[:2])
    return np.where(pick[None], c1, c0)


def style_swatch(style: StyleDef | str, size: int = 16) -> np.ndarray:
    """Reference swatch of a style's object fill, (3, size, size) in [-1, 1]."""
    style = STYLE_BY_ID[style] if isinstance(style, str) else style
    fill = texture_fill(style, rngmod.stream(0, "swatch", STYLES.index(style)), (size, size))
    return fill * 2.0 - 1.0


def gen_scene(spec: SceneSpec, rng: np.random.Generator, max_retries: int = 100):
    """Render ``spec``; returns ((3, 32, 32) image in [-1, 1], one RegionMask per entity)."""
    style = spec.style_def
    masks = None
    for _ in range(max_retries):
        masks = []
        for ent in spec.entities:
            jy, jx = (JITTERS[int(i)] for i in rng.integers(len(JITTERS), size=2))
            masks.append(_stencil(ent.shape, ent.size, ent.cell[0], ent.cell[1], jy, jx))
        ok = not any(_touches_border(m) for m in masks)
        ok = ok and not any((a & b).any() for a, b in itertools.combinations(masks, 2))
        if ok:
            break
    else:
        raise OverlapUnresolvable(f"could not place {len(spec.entities)} entities without overlap")
    img = background(style)
    fill = texture_fill(style, rng)
    for m in masks:
        img = np.where(m[None], fill, img)
    regions = [RegionMask(k, m.copy(), "oracle") for k, m in enumerate(masks)]
    return img * 2.0 - 1.0, regions


def render(spec: SceneSpec, seed: int, index: int, component: str = "render"):
    return gen_scene(spec, rngmod.stream(seed, component, index))


# --- oracle detector -------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    shape: str
    cell: tuple[int, int]
    palette: str
    size: str
    score: float
    mask: np.ndarray = field(repr=False, compare=False)


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    padded = np.pad(mask, radius)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + SIZE, dx:dx + SIZE]
    return out


class _StencilBank:
    def __init__(self):
        keys, stencils, windows = [], [], []
        for shape, size in itertools.product(SHAPES, RADIUS):
            for row, col in itertools.product(range(3), range(3)):
                for jy, jx in itertools.product(JITTERS, JITTERS):
                    m = _stencil(shape, size, row, col, jy, jx)
                    keys.append((shape, size, row, col))
                    stencils.append(m.reshape(-1))
                    windows.append(_dilate(m, 2).reshape(-1))
        self.keys = keys
        self.stencils = np.array(stencils, dtype=np.float64)
        self.windows = np.array(windows, dtype=np.float64)
        self.cell_of = np.array([k[2] * 3 + k[3] for k in keys])


@lru_cache(maxsize=1)
def _bank() -> _StencilBank:
    return _StencilBank()


def estimate_background(img01: np.ndarray) -> np.ndarray:
    """Per-row background colour (3, H, 1) from a linear fit over the border pixels."""
    ys = np.concatenate([np.full(SIZE, 0.5), np.full(SIZE, SIZE - 0.5), _YY[:, 0], _YY[:, 0]])
    vals = np.concatenate([img01[:, 0, :], img01[:, -1, :], img01[:, :, 0], img01[:, :, -1]], axis=1)
    design = np.stack([np.ones_like(ys), ys], axis=1)
    coef, *_ = np.linalg.lstsq(design, vals.T, rcond=None)  # (2, 3)
    rows = coef[0][:, None] + coef[1][:, None] * _YY[:, 0][None, :]
    return rows[:, :, None]


def foreground(image: np.ndarray) -> np.ndarray:
    img01 = (np.asarray(image) + 1.0) / 2.0
    dist = np.sqrt(((img01 - estimate_background(img01)) ** 2).sum(axis=0))
    return dist > FG_THRESHOLD


def nearest_palette(image: np.ndarray, mask: np.ndarray) -> str:
    img01 = (np.asarray(image) + 1.0) / 2.0
    px = img01[:, mask].T  # (n, 3)
    bg = estimate_background(img01).mean(axis=(1, 2))
    best, best_cost = STYLES[0].id, np.inf
    for style in STYLES:
        c0, c1, c2 = (np.asarray(c) for c in style.palette)
        d = np.minimum(np.linalg.norm(px - c0, axis=1), np.linalg.norm(px - c1, axis=1))
        cost = d.mean() + 0.5 * np.linalg.norm(bg - c2)
        if cost < best_cost:
            best, best_cost = style.id, cost
    return best


def oracle_detect(image: np.ndarray, threshold: float = DETECT_THRESHOLD) -> list[Detection]:
    """Template-match shape stencils at the grid cells, best match first.

    The match score is the IoU between a stencil and the foreground inside the
    stencil's 2-pixel neighbourhood. Pixels of accepted detections are
    excluded from later matches, so a large neighbour never dilutes the score
    of a smaller shape next to it. At most one detection per cell.
    """
    fg = foreground(image).reshape(-1)
    bank = _bank()
    valid = np.ones_like(fg)
    open_cells = np.ones(len(bank.keys), dtype=bool)
    found = []
    while open_cells.any():
        fgv = (fg & valid).astype(np.float64)
        inter = bank.stencils @ fgv
        area = bank.stencils @ valid.astype(np.float64)
        fg_win = bank.windows @ fgv
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(area > 0, inter / (area + fg_win - inter), 0.0)
        iou[~open_cells] = -1.0
        best = int(np.argmax(iou))
        if iou[best] < threshold:
            break
        shape, size, row, col = bank.keys[best]
        mask = bank.stencils[best].reshape(SIZE, SIZE) > 0
        found.append(Detection(shape, (row, col), nearest_palette(image, mask), size,
                               float(iou[best]), mask))
        valid &= ~mask.reshape(-1)
        open_cells &= bank.cell_of != row * 3 + col
    found.sort(key=lambda d: d.cell)
    return found


# --- manifests ---------------------------------------------------------------------


def manifest_line(item_id: str, prompt: str, spec: SceneSpec, image: str | None = None,
                  masks: Sequence[str] = ()) -> str:
    rec = {"id": item_id, "prompt": prompt, **spec.to_dict()}
    if image is not None:
        rec["image"] = image
        rec["masks"] = list(masks)
    return json.dumps(rec, sort_keys=True)


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
