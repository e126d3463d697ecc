"""``lpa`` command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import SMOKE, ConfigError, RunConfig
from .probe import ProbeFilter
from .router import InvalidTau, InvalidWindow


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", help="run config file (key = value lines under [section] headers)")
    p.add_argument("--seed", type=int, help="root seed [run] seed")
    if out_default is not None:
        p.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory from gen-data [paths] data")
    p.add_argument("--checkpoint", help="checkpoint file [paths] checkpoint")
    p.add_argument("--steps", type=int, help="sampler steps (default 50)")
    p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale (default 7.5)")
    p.add_argument("--samples", type=int, help="samples per prompt (default 4)")
    p.add_argument("--sample-seed", type=int, help="sampler seed [sampler] seed")
    p.add_argument("--tau", type=int, help="object-phase threshold in sampler steps (default 35)")
    p.add_argument("--obj-phase", choices=("tau", "window"), help="bound of the Down-block object phase")
    p.add_argument("--parser", help="dependency_chunks|pos_tags|naive_split (aliases spacy, pos, naive)")
    p.add_argument("--n-prompts", type=int, help="evaluate only the first N suite prompts")
    p.add_argument("--no-style-suite", action="store_true", help="use the style-free prompt suite")
    p.add_argument("--embed", choices=("palette_stats", "patch_moments"), help="style embedding")
    p.add_argument("--regions", choices=("oracle", "attention"), help="region source for style metrics")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lpa", description="Local prompt adaptation on a toy text-conditioned diffusion model.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the training corpus and evaluation suites")
    _common(p, "data")
    p.add_argument("--n-train", type=int, help="training scenes (default 5000)")
    p.add_argument("--n-prompts", type=int, help="evaluation prompts, round-robin over categories (default 50)")
    p.add_argument("--n-nostyle", type=int, help="style-free evaluation prompts (default 20)")

    p = sub.add_parser("train", help="train the denoiser and write a checkpoint")
    _common(p, "run")
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--steps", type=int, help="optimizer steps (default 20000)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 4)")
    p.add_argument("--n-scenes", type=int, help="use only the first N training scenes (0 = all)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--smoke", action="store_true", help="smoke profile: 500 steps on 200 scenes")

    p = sub.add_parser("generate", help="sample suite prompts, re-rank, write images and metrics")
    _common(p, "samples")
    _sampling(p)
    p.add_argument("--preset", help="baseline|lpa_late_only|lpa_mid_only|lpa_early_style_late|lpa_full")
    p.add_argument("--window", help="injection window LO-HI in training timesteps, half-open")
    p.add_argument("--probe", help="record attention for these block groups, e.g. mid,up")
    p.add_argument("--theta", type=float, help="attention-region threshold (default 0.5)")
    p.add_argument("--prompt-ids", help="comma-separated suite prompt ids to generate")

    p = sub.add_parser("ablate", help="run the preset x window x parser grid")
    _common(p, "ablation")
    _sampling(p)
    p.add_argument("--presets", help="comma-separated presets")
    p.add_argument("--parsers", help="comma-separated parser kinds")
    p.add_argument("--windows", help="comma-separated windows, e.g. 200-700,300-650")
    p.add_argument("--seeds", help="comma-separated sampler seeds")
    p.add_argument("--max-cells", type=int, help="refuse grids with more cells (default 64)")

    p = sub.add_parser("bench", help="baseline vs one LPA configuration over the suite")
    _common(p, "bench")
    _sampling(p)
    p.add_argument("--preset", help="LPA preset (default lpa_late_only)")
    p.add_argument("--window", help="injection window (default 300-650)")

    p = sub.add_parser("probe-export", help="write per-token heatmaps from attention dumps")
    p.add_argument("dumps", nargs="+", help="attention dump files or directories of them")
    p.add_argument("--out", default="heatmaps", help="output directory")
    p.add_argument("--groups", help="only these block groups, e.g. up")
    p.add_argument("--steps", default="last", help="'last', 'all' or comma-separated sampler steps")
    return ap


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, object]]:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "run": {"seed": g("seed")},
        "paths": {"data": g("data"), "checkpoint": g("checkpoint")},
        "sampler": {"cfg_scale": g("cfg_scale"), "samples": g("samples"), "seed": g("sample_seed")},
        "plan": {"preset": g("preset"), "window": g("window"), "tau": g("tau"), "obj_phase": g("obj_phase")},
        "parser": {"kind": g("parser")},
        "probe": {"groups": g("probe"), "theta": g("theta")},
        "eval": {"embed": g("embed"), "regions": g("regions"), "n_prompts": g("n_prompts"),
                 "suite": "nostyle" if g("no_style_suite") else None},
        "ablate": {"presets": g("presets"), "parsers": g("parsers"), "windows": g("windows"),
                   "seeds": g("seeds"), "max_cells": g("max_cells")},
    }
    if args.command == "gen-data":
        ov["data"] = {"n_train": g("n_train"), "n_prompts": g("n_prompts"), "n_nostyle": g("n_nostyle")}
        ov["eval"]["n_prompts"] = None
    elif args.command == "train":
        ov["train"] = {"steps": g("steps"), "batch_size": g("batch_size"), "n_scenes": g("n_scenes"),
                       "lr": g("lr")}
    else:
        ov["sampler"]["steps"] = g("steps")
    return ov


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "probe-export":
            try:
                groups = ProbeFilter.parse(args.groups)
            except ValueError as e:
                raise UsageError(str(e)) from None
            harness.probe_export([Path(p) for p in args.dumps], Path(args.out), groups, args.steps)
            return 0
        cfg = RunConfig.load(args.config)
        if args.command == "train" and args.smoke:
            cfg.update(SMOKE)
        if args.command == "bench" and cfg.get("plan", "preset") == "baseline" and args.preset is None:
            cfg.set("plan", "preset", "lpa_late_only")
        cfg.update(_overrides(args))
        cfg.validate()
        out = Path(args.out)
        if args.command == "gen-data":
            harness.gen_data(cfg, out)
        elif args.command == "train":
            harness.train(cfg, out)
        elif args.command == "generate":
            ids = [s.strip() for s in args.prompt_ids.split(",")] if args.prompt_ids else None
            harness.generate(cfg, out, ids)
        elif args.command == "ablate":
            harness.ablate(cfg, out)
        elif args.command == "bench":
            harness.bench(cfg, out)
    except (ConfigError, InvalidWindow, InvalidTau, UsageError) as e:
        print(f"lpa: usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures: I/O, untrained weights, non-finite loss, ...
        print(f"lpa: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
