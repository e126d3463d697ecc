"""Command implementations behind the CLI: data generation, training, sampling, ablations, benchmarks."""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import imageio
from . import synthbench as sb
from .config import ConfigError, RunConfig
from .denoiser import Denoiser, UntrainedWeights, load_checkpoint, save_checkpoint
from .diffusion import (SampleResult, SamplerConfig, Trainer, TrajectoryCache, encode_prompt,
                        make_schedule, sample, train_loop)
from .evaluator import (MetricsRecord, detector_regions, diversity, prompt_alignment, rerank,
                        style_consistency, style_loss, style_reference, write_metrics_csv)
from .probe import (GROUPS, ProbeFilter, RegionMask, attention_region, mask_iou, read_dump,
                    token_heatmaps, write_dump)
from .prompt_parser import TokenSplit, parse, parser_kind, tokenize
from .router import InjectionWindow, Preset, RoutingPlan, describe_plan


def _log(msg: str) -> None:
    print(msg, flush=True)


# --- gen-data --------------------------------------------------------------------


def _write_split(root: Path, name: str, items: list[tuple[str, sb.SceneSpec]], seed: int,
                 component: str) -> int:
    d = root / name
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    lines = []
    for k, (text, spec) in enumerate(items):
        image, regions = sb.render(spec, seed, k, component)
        img_rel = f"images/{k:05d}.ppm"
        imageio.write_ppm(d / img_rel, image)
        mask_rels = []
        for r in regions:
            rel = f"masks/{k:05d}_e{r.entity}.pgm"
            imageio.write_pgm(d / rel, r.mask)
            mask_rels.append(rel)
        lines.append(sb.manifest_line(f"{name}-{k:05d}", text, spec, img_rel, mask_rels))
    (d / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(items)


def gen_data(cfg: RunConfig, out: Path) -> dict[str, int]:
    seed = cfg.getint("run", "seed")
    out.mkdir(parents=True, exist_ok=True)
    train = [(sb.prompt_text(s), s) for s in sb.gen_training_specs(cfg.getint("data", "n_train"), seed)]
    suite = [(p.text, s) for p, s in sb.gen_prompt_suite(cfg.getint("data", "n_prompts"), seed)]
    counts = {"train": _write_split(out, "train", train, seed, "render_train"),
              "suite": _write_split(out, "suite", suite, seed, "render_suite")}
    n_free = cfg.getint("data", "n_nostyle")
    if n_free:
        free = [(p.text, s) for p, s in sb.gen_prompt_suite(n_free, seed, with_style=False)]
        counts["suite_nostyle"] = _write_split(out, "suite_nostyle", free, seed, "render_suite_nostyle")
    cfg.set("paths", "data", str(out))
    cfg.write(out / "run_config.ini")
    for k, v in counts.items():
        _log(f"{k}: {v} scenes")
    return counts


# --- train -----------------------------------------------------------------------


def load_training_data(data_dir: Path, n_scenes: int = 0) -> list[tuple[np.ndarray, list[int]]]:
    manifest = data_dir / "train" / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no training manifest at {manifest}; run gen-data first")
    rows = sb.read_manifest(manifest)
    if n_scenes > 0:
        rows = rows[:n_scenes]
    return [(imageio.read_ppm(data_dir / "train" / r["image"]), encode_prompt(r["prompt"])) for r in rows]


def train(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    data = load_training_data(Path(cfg.get("paths", "data")), cfg.getint("train", "n_scenes"))
    seed = cfg.getint("run", "seed")
    model = Denoiser(seed=seed)
    trainer = Trainer(model, make_schedule(), lr=cfg.getfloat("train", "lr"),
                      betas=(cfg.getfloat("train", "beta1"), cfg.getfloat("train", "beta2")),
                      grad_clip=cfg.getfloat("train", "grad_clip") or None,
                      null_prob=cfg.getfloat("train", "null_prob"))
    steps = cfg.getint("train", "steps")
    ckpt = out / "checkpoint.lpaw"
    cfg.set("paths", "checkpoint", str(ckpt))
    cfg.write(out / "run_config.ini")
    loss_path = out / "loss.csv"
    t0 = time.time()
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("step,loss\n")

        def on_log(step: int, loss: float) -> None:
            fh.write(f"{step},{loss:.6f}\n")
            fh.flush()
            _log(f"step {step}/{steps} loss {loss:.6f} ({time.time() - t0:.0f}s)")

        train_loop(trainer, data, steps, cfg.getint("train", "batch_size"), seed,
                   cfg.getint("train", "log_every"), on_log)
    save_checkpoint(ckpt, model)
    _log(f"wrote {ckpt} after {time.time() - t0:.0f}s")
    return ckpt


# --- shared evaluation -----------------------------------------------------------


@dataclass(frozen=True)
class SuiteItem:
    prompt_id: str
    key: int  # stream key for the prompt's initial noise
    text: str
    spec: sb.SceneSpec


def load_suite(cfg: RunConfig, which: str | None = None) -> list[SuiteItem]:
    """Evaluation prompts from the dataset manifest, or generated from the seed if absent."""
    which = which or cfg.get("eval", "suite")
    if which not in ("style", "nostyle"):
        raise ConfigError(f"[eval] suite must be 'style' or 'nostyle', got {which!r}")
    name = "suite" if which == "style" else "suite_nostyle"
    manifest = Path(cfg.get("paths", "data")) / name / "manifest.jsonl"
    if manifest.exists():
        items = [SuiteItem(r["id"], k, r["prompt"], sb.SceneSpec.from_dict(r))
                 for k, r in enumerate(sb.read_manifest(manifest))]
    else:
        n = cfg.getint("data", "n_prompts") if which == "style" else cfg.getint("data", "n_nostyle")
        pairs = sb.gen_prompt_suite(n, cfg.getint("run", "seed"), with_style=which == "style")
        items = [SuiteItem(f"{name}-{k:05d}", k, p.text, s) for k, (p, s) in enumerate(pairs)]
    limit = cfg.getint("eval", "n_prompts")
    return items[:limit] if limit > 0 else items


def entity_tokens(split: TokenSplit, spec: sb.SceneSpec) -> list[list[int]]:
    """Token indices naming each entity: the object chunk holding its noun (or the noun itself)."""
    words = [t.surface for t in split.all]
    out, cursor = [], 0
    for ent in spec.entities:
        noun = ent.noun.split()
        idx = None
        for i in range(cursor, len(words) - len(noun) + 1):
            if words[i:i + len(noun)] == noun:
                idx = list(range(i, i + len(noun)))
                cursor = i + len(noun)
                break
        if idx is None:
            out.append([])
            continue
        chunk = sorted({j for c in split.obj_chunks if set(c) & set(idx) for j in c})
        out.append(chunk or idx)
    return out


@dataclass
class PromptOutcome:
    record: MetricsRecord
    result: SampleResult
    regions: list[list[RegionMask]]
    losses: list[float]


def evaluate_prompt(model: Denoiser, schedule, item: SuiteItem, parser, plan: RoutingPlan,
                    scfg: SamplerConfig, embed: str = "palette_stats", region_source: str = "oracle",
                    probe: ProbeFilter | None = None, cache: TrajectoryCache | None = None,
                    theta: float = 0.5) -> PromptOutcome:
    split = parse(tokenize(item.text), parser)
    if region_source == "attention":
        groups = set(probe.groups) if probe and probe.groups is not None else set(GROUPS)
        probe = ProbeFilter(frozenset(groups | {"up"}))
    elif region_source != "oracle":
        raise ConfigError(f"[eval] regions must be 'oracle' or 'attention', got {region_source!r}")
    res = sample(model, schedule, split, plan, scfg, item.key, probe, cache=cache)
    ref = style_reference(item.spec.style)
    ent_tokens = entity_tokens(split, item.spec)
    regions, losses = [], []
    for s, img in enumerate(res.images):
        if region_source == "oracle":
            regs = detector_regions(img, item.spec)
        else:
            regs = [attention_region(res.records[s], toks or sorted(split.obj), theta, entity=k)
                    for k, toks in enumerate(ent_tokens)]
        regions.append(regs)
        losses.append(style_loss(img, regs, ref, embed))
    chosen = rerank(losses)
    img = res.images[chosen]
    rec = MetricsRecord(
        item.prompt_id, item.spec.category, item.spec.complexity,
        plan.preset.value, parser_kind(parser).value,
        "-" if plan.preset is Preset.BASELINE else str(plan.window),
        prompt_alignment(img, item.spec),
        style_consistency(img, regions[chosen], ref, embed),
        diversity(list(res.images)) if len(res.images) > 1 else 0.0,
        losses[chosen], chosen)
    return PromptOutcome(rec, res, regions, losses)


def _require_checkpoint(cfg: RunConfig) -> Denoiser:
    path = Path(cfg.get("paths", "checkpoint"))
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run train first or pass --checkpoint")
    model = load_checkpoint(path)
    if model.is_untrained():
        raise UntrainedWeights(f"{path} holds all-zero weights")
    return model


def _means(records: list[MetricsRecord]) -> dict[str, float]:
    keys = ("clip_prompt", "clip_style", "diversity", "l_style")
    return {k: math.fsum(getattr(r, k) for r in records) / len(records) for k in keys}


# --- generate --------------------------------------------------------------------


def generate(cfg: RunConfig, out: Path, prompt_ids: list[str] | None = None) -> list[MetricsRecord]:
    out.mkdir(parents=True, exist_ok=True)
    model = _require_checkpoint(cfg)
    scfg = cfg.sampler()
    plan = cfg.plan()
    parser = cfg.parser()
    probe = ProbeFilter.parse(cfg.get("probe", "groups"))
    theta = cfg.getfloat("probe", "theta")
    items = load_suite(cfg)
    if prompt_ids:
        wanted = set(prompt_ids)
        items = [it for it in items if it.prompt_id in wanted]
        missing = wanted - {it.prompt_id for it in items}
        if missing:
            raise ConfigError(f"unknown prompt ids: {sorted(missing)}")
    cfg.write(out / "run_config.ini")
    (out / "plan.txt").write_text(describe_plan(plan) + "\n", encoding="utf-8")
    (out / "images").mkdir(exist_ok=True)
    if probe:
        (out / "attn").mkdir(exist_ok=True)
    schedule = make_schedule()
    records, iou_rows, fallback_rows = [], [], []
    for item in items:
        oc = evaluate_prompt(model, schedule, item, parser, plan, scfg, cfg.get("eval", "embed"),
                             cfg.get("eval", "regions"), probe, theta=theta)
        records.append(oc.record)
        for s, img in enumerate(oc.result.images):
            imageio.write_ppm(out / "images" / f"{item.prompt_id}_s{s}.ppm", img)
            if probe:
                write_dump(out / "attn" / f"{item.prompt_id}_s{s}.lpaa", oc.result.records[s])
        for g, step, sel in oc.result.fallbacks:
            fallback_rows.append(f"{item.prompt_id},{g},{step},{sel}")
        if probe and any(r.group == "up" for r in oc.result.records[0]):
            split = parse(tokenize(item.text), parser)
            toks = entity_tokens(split, item.spec)
            for s, img in enumerate(oc.result.images):
                oracle = detector_regions(img, item.spec)
                for k, tk in enumerate(toks):
                    reg = attention_region(oc.result.records[s], tk or sorted(split.obj), theta, entity=k)
                    iou_rows.append(f"{item.prompt_id},{s},{k},{mask_iou(reg.mask, oracle[k].mask):.6f},"
                                    f"{int(reg.fallback)}")
        _log(f"{item.prompt_id}: chosen sample {oc.record.chosen_sample}, "
             f"clip_prompt {oc.record.clip_prompt:.4f}, clip_style {oc.record.clip_style:.4f}")
    write_metrics_csv(out / "metrics.csv", records)
    if fallback_rows:
        (out / "fallbacks.csv").write_text("prompt_id,group,step,selector\n" + "\n".join(fallback_rows) + "\n",
                                           encoding="utf-8")
    if iou_rows:
        (out / "attn_iou.csv").write_text("prompt_id,sample,entity,iou,fallback\n" + "\n".join(iou_rows) + "\n",
                                          encoding="utf-8")
    return records


# --- ablate ----------------------------------------------------------------------

SUMMARY_HEADER = ("preset", "window", "parser", "clip_prompt", "clip_style", "diversity", "l_style", "n")
REFERENCE_BEST = ("lpa_late_only", "300-650")


@dataclass(frozen=True)
class AblationGrid:
    presets: tuple[str, ...]
    parsers: tuple[str, ...]
    windows: tuple[str, ...]
    seeds: tuple[int, ...]

    @classmethod
    def from_config(cls, cfg: RunConfig) -> AblationGrid:
        grid = cls(tuple(Preset(p).value for p in cfg.getlist("ablate", "presets")),
                   tuple(parser_kind(p).value for p in cfg.getlist("ablate", "parsers")),
                   tuple(str(InjectionWindow.parse(w)) for w in cfg.getlist("ablate", "windows")),
                   tuple(int(s) for s in cfg.getlist("ablate", "seeds")))
        if not all((grid.presets, grid.parsers, grid.windows, grid.seeds)):
            raise ConfigError("every ablation axis needs at least one value")
        cap = cfg.getint("ablate", "max_cells")
        if grid.n_cells > cap:
            raise ConfigError(f"grid has {grid.n_cells} cells, above max_cells={cap}")
        return grid

    @property
    def n_cells(self) -> int:
        return len(self.presets) * len(self.parsers) * len(self.windows) * len(self.seeds)

    def cells(self):
        return itertools.product(self.presets, self.windows, self.parsers)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def ablate(cfg: RunConfig, out: Path) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    grid = AblationGrid.from_config(cfg)
    model = _require_checkpoint(cfg)
    items = load_suite(cfg)
    schedule = make_schedule()
    embed = cfg.get("eval", "embed")
    regions = cfg.get("eval", "regions")
    cfg.write(out / "run_config.ini")
    by_cell: dict[tuple, list[MetricsRecord]] = {}
    per_seed: dict[int, list[MetricsRecord]] = {s: [] for s in grid.seeds}
    baseline: dict[int, list[MetricsRecord]] = {s: [] for s in grid.seeds}
    cache = TrajectoryCache()
    t0 = time.time()
    for seed in grid.seeds:
        scfg = replace(cfg.sampler(), seed=seed)
        for item in items:
            cache.clear()
            base_plan = cfg.plan("baseline")
            oc = evaluate_prompt(model, schedule, item, grid.parsers[0], base_plan, scfg, embed, regions,
                                 cache=cache)
            baseline[seed].append(oc.record)
            _write_chosen(out / "images" / f"seed{seed}" / "baseline", item, oc)
            for preset, window, parser in grid.cells():
                plan = cfg.plan(preset, window)
                oc = evaluate_prompt(model, schedule, item, parser, plan, scfg, embed, regions, cache=cache)
                by_cell.setdefault((preset, window, parser), []).append(oc.record)
                per_seed[seed].append(oc.record)
                _write_chosen(out / "images" / f"seed{seed}" / f"{plan.label}_{parser}", item, oc)
            _log(f"seed {seed} {item.prompt_id} done ({time.time() - t0:.0f}s)")
    cache.clear()
    for seed in grid.seeds:
        write_metrics_csv(out / f"per_prompt_seed{seed}.csv", per_seed[seed] + baseline[seed])
    rows = []
    for preset, window, parser in grid.cells():
        m = _means(by_cell[(preset, window, parser)])
        rows.append({"preset": preset, "window": window, "parser": parser, **m,
                     "n": len(by_cell[(preset, window, parser)])})
    _write_rows(out / "summary.csv", SUMMARY_HEADER, rows)
    base_all = [r for s in grid.seeds for r in baseline[s]]
    bm = _means(base_all)
    _write_rows(out / "baseline.csv", SUMMARY_HEADER,
                [{"preset": "baseline", "window": "-", "parser": "-", **bm, "n": len(base_all)}])
    best = max(rows, key=lambda r: (r["clip_style"], r["clip_prompt"]))
    _log(f"baseline: clip_prompt {bm['clip_prompt']:.4f} clip_style {bm['clip_style']:.4f} "
         f"diversity {bm['diversity']:.4f}")
    _log(f"argmax cell: {best['preset']} {best['window']} {best['parser']} "
         f"(clip_style {best['clip_style']:.4f}, clip_prompt {best['clip_prompt']:.4f})")
    ranked = sorted(rows, key=lambda r: (-r["clip_style"], -r["clip_prompt"]))
    ref = [i for i, r in enumerate(ranked) if (r["preset"], r["window"]) == REFERENCE_BEST]
    if ref:
        _log(f"reference best cell ({REFERENCE_BEST[0]}, {REFERENCE_BEST[1]}) ranks "
             f"{ref[0] + 1}/{len(ranked)} by clip_style")
    return rows


def _write_chosen(d: Path, item: SuiteItem, oc: PromptOutcome) -> None:
    d.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(d / f"{item.prompt_id}.ppm", oc.result.images[oc.record.chosen_sample])


def _write_rows(path: Path, header, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) if isinstance(r[h], float) else r[h] for h in header])


# --- bench -----------------------------------------------------------------------


def bench(cfg: RunConfig, out: Path) -> list[dict]:
    """Baseline vs the configured LPA plan over the suite; Table-1-shaped rows plus a delta row."""
    out.mkdir(parents=True, exist_ok=True)
    model = _require_checkpoint(cfg)
    items = load_suite(cfg)
    style_free = cfg.get("eval", "suite") == "nostyle"
    scfg = cfg.sampler()
    parser = cfg.parser()
    schedule = make_schedule()
    embed, regions = cfg.get("eval", "embed"), cfg.get("eval", "regions")
    lpa_plan = cfg.plan()
    if lpa_plan.preset is Preset.BASELINE:
        raise ConfigError("bench compares baseline with an LPA preset; set --preset")
    cfg.write(out / "run_config.ini")
    cache = TrajectoryCache()
    recs: dict[str, list[MetricsRecord]] = {"baseline": [], lpa_plan.label: []}
    n_fallback = 0
    identical = 0
    for item in items:
        cache.clear()
        ob = evaluate_prompt(model, schedule, item, parser, cfg.plan("baseline"), scfg, embed, regions, cache=cache)
        ol = evaluate_prompt(model, schedule, item, parser, lpa_plan, scfg, embed, regions, cache=cache)
        recs["baseline"].append(ob.record)
        recs[lpa_plan.label].append(ol.record)
        n_fallback += bool(ol.result.fallbacks)
        identical += bool(np.array_equal(ob.result.images, ol.result.images))
    cache.clear()
    write_metrics_csv(out / "per_prompt.csv", [r for v in recs.values() for r in v])
    cols = ("clip_prompt",) if style_free else ("clip_prompt", "clip_style", "diversity")
    rows = []
    for method, rs in recs.items():
        m = _means(rs)
        rows.append({"method": method, **{c: m[c] for c in cols}})
    rows.append({"method": "delta", **{c: rows[1][c] - rows[0][c] for c in cols}})
    _write_rows(out / "bench.csv", ("method",) + cols, rows)
    for r in rows:
        _log(" ".join([f"{r['method']:<28}"] + [f"{c} {r[c]:+.4f}" if r["method"] == "delta" else
                                                 f"{c} {r[c]:.4f}" for c in cols]))
    _log(f"{n_fallback}/{len(items)} prompts used the empty-subset fallback; "
         f"{identical}/{len(items)} prompts gave images identical to baseline")
    return rows


# --- probe-export ----------------------------------------------------------------


def probe_export(dumps: list[Path], out: Path, groups: ProbeFilter | None = None,
                 steps: str = "last") -> int:
    """Per-token grayscale heatmaps (PGM) for records in attention dumps."""
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for p in dumps:
        files.extend(sorted(p.glob("*.lpaa")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError("no attention dumps found")
    n = 0
    for f in files:
        records = read_dump(f)
        if groups is not None:
            records = [r for r in records if r.group in groups.groups]
        if not records:
            continue
        if steps == "last":
            last = max(r.step for r in records)
            records = [r for r in records if r.step == last]
        elif steps != "all":
            wanted = {int(s) for s in steps.split(",")}
            records = [r for r in records if r.step in wanted]
        for r in records:
            for j, hm in enumerate(token_heatmaps(r)):
                imageio.write_pgm(out / f"{f.stem}_{r.block_id}_step{r.step:03d}_tok{j:02d}.pgm", hm)
                n += 1
    _log(f"wrote {n} heatmaps to {out}")
    return n
