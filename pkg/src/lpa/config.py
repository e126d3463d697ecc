"""Run configuration: ``key = value`` lines under ``[section]`` headers.

Every command resolves a full config (defaults < config file < command-line
flags) and writes the resolved result as ``run_config.ini`` next to its
outputs; re-running from that file reproduces the outputs.
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path

from .diffusion import SamplerConfig
from .prompt_parser import parser_kind
from .router import InjectionWindow, Preset, RoutingPlan, build_plan

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "paths": {"data": "data", "checkpoint": "checkpoint.lpaw"},
    "data": {"n_train": "5000", "n_prompts": "50", "n_nostyle": "20"},
    "train": {"steps": "20000", "batch_size": "4", "n_scenes": "0", "lr": "0.001", "beta1": "0.9",
              "beta2": "0.999", "grad_clip": "1.0", "null_prob": "0.1", "log_every": "100"},
    "sampler": {"steps": "50", "cfg_scale": "7.5", "samples": "4", "seed": "0", "clip_x0": "true"},
    "plan": {"preset": "baseline", "window": "300-650", "tau": "35", "obj_phase": "tau"},
    "parser": {"kind": "dependency_chunks"},
    "probe": {"groups": "", "theta": "0.5"},
    "eval": {"embed": "palette_stats", "regions": "oracle", "suite": "style", "n_prompts": "0"},
    "ablate": {"presets": "lpa_late_only,lpa_mid_only,lpa_early_style_late,lpa_full",
               "parsers": "dependency_chunks,pos_tags,naive_split",
               "windows": "200-700,300-650,400-600", "seeds": "0", "max_cells": "64"},
}

SMOKE = {"train": {"steps": "500", "n_scenes": "200"}}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self):
        self._cp = configparser.ConfigParser(interpolation=None)
        self._cp.read_dict(DEFAULTS)

    @classmethod
    def load(cls, path: str | Path | None = None) -> RunConfig:
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            if not parser.read(path):
                raise ConfigError(f"cannot read config file {path}")
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self._cp.set(section, key, str(value))

    def update(self, values: dict[str, dict[str, object]]) -> None:
        for section, items in values.items():
            for key, value in items.items():
                if value is not None:
                    self.set(section, key, value)

    def get(self, section: str, key: str) -> str:
        return self._cp.get(section, key)

    def getint(self, section: str, key: str) -> int:
        try:
            return self._cp.getint(section, key)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None

    def getfloat(self, section: str, key: str) -> float:
        try:
            return self._cp.getfloat(section, key)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None

    def getboolean(self, section: str, key: str) -> bool:
        try:
            return self._cp.getboolean(section, key)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None

    def getlist(self, section: str, key: str) -> list[str]:
        return [p.strip() for p in self.get(section, key).split(",") if p.strip()]

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.getint("sampler", "steps"), self.getfloat("sampler", "cfg_scale"),
                             self.getint("sampler", "samples"), self.getint("sampler", "seed"),
                             self.getboolean("sampler", "clip_x0"))

    def plan(self, preset: str | None = None, window: str | None = None) -> RoutingPlan:
        return build_plan(Preset(preset or self.get("plan", "preset")),
                          InjectionWindow.parse(window or self.get("plan", "window")),
                          self.getint("plan", "tau"), self.getint("sampler", "steps"),
                          obj_phase=self.get("plan", "obj_phase"))

    def parser(self):
        return parser_kind(self.get("parser", "kind"))

    def validate(self) -> None:
        """Resolve every typed value once; any bad value becomes a ConfigError."""
        from .probe import ProbeFilter

        try:
            self.sampler()
            self.plan()
            self.parser()
            ProbeFilter.parse(self.get("probe", "groups"))
            for p in self.getlist("ablate", "presets"):
                Preset(p)
            for p in self.getlist("ablate", "parsers"):
                parser_kind(p)
            for w in self.getlist("ablate", "windows"):
                InjectionWindow.parse(w)
            for s in self.getlist("ablate", "seeds"):
                int(s)
            for section, keys in (("run", ("seed",)), ("data", ("n_train", "n_prompts", "n_nostyle")),
                                  ("train", ("steps", "batch_size", "n_scenes", "log_every")),
                                  ("eval", ("n_prompts",)), ("ablate", ("max_cells",))):
                for key in keys:
                    self.getint(section, key)
            for key in ("lr", "beta1", "beta2", "grad_clip", "null_prob"):
                self.getfloat("train", key)
            self.getfloat("probe", "theta")
            for key, allowed in (("suite", ("style", "nostyle")), ("regions", ("oracle", "attention")),
                                 ("embed", ("palette_stats", "patch_moments"))):
                if self.get("eval", key) not in allowed:
                    raise ConfigError(f"[eval] {key} must be one of {allowed}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def dumps(self) -> str:
        out = io.StringIO()
        for section in DEFAULTS:
            out.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                out.write(f"{key} = {self._cp.get(section, key)}\n")
            out.write("\n")
        return out.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")
