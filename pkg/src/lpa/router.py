"""Piecewise token routing: which token subset conditions which block group at which step.

Windows are in training-timestep units and half-open, ``[lo, hi)``; ``tau``
is in sampler-step units. A plan is resolved once for a given sampler step
count and then only read.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .prompt_parser import TokenSplit

GROUPS = ("down", "mid", "up")
T_TRAIN = 1000


class InvalidWindow(ValueError):
    pass


class InvalidTau(ValueError):
    pass


class Selector(str, Enum):
    OBJ = "Obj"
    STYLE = "Style"
    FULL = "Full"


class Preset(str, Enum):
    BASELINE = "baseline"
    LATE_ONLY = "lpa_late_only"
    MID_ONLY = "lpa_mid_only"
    EARLY_STYLE_LATE = "lpa_early_style_late"
    FULL = "lpa_full"


LPA_PRESETS = (Preset.LATE_ONLY, Preset.MID_ONLY, Preset.EARLY_STYLE_LATE, Preset.FULL)
OBJ_PHASES = ("tau", "window")


@dataclass(frozen=True)
class InjectionWindow:
    lo: int
    hi: int

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi <= T_TRAIN):
            raise InvalidWindow(f"window {self.lo}-{self.hi} outside 0 <= lo <= hi <= {T_TRAIN}")

    @classmethod
    def parse(cls, text: str) -> InjectionWindow:
        try:
            lo, hi = (int(p) for p in text.strip().split("-"))
        except ValueError:
            raise InvalidWindow(f"window must look like LO-HI, got {text!r}") from None
        return cls(lo, hi)

    def contains(self, t: int) -> bool:
        return self.lo <= t < self.hi

    def __str__(self) -> str:
        return f"{self.lo}-{self.hi}"

    @property
    def label(self) -> str:
        return f"{self.lo}_{self.hi}"


DEFAULT_WINDOW = InjectionWindow(300, 650)
ABLATION_WINDOWS = (InjectionWindow(200, 700), InjectionWindow(300, 650), InjectionWindow(400, 600))


def t_train_map(steps: int, t_train: int = T_TRAIN) -> tuple[int, ...]:
    """Sampler step i -> round((t_train-1) * (1 - i/(steps-1))), in exact integer arithmetic."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > t_train:
        raise ValueError(f"at most {t_train} sampler steps")
    if steps == 1:
        return (t_train - 1,)
    d = steps - 1
    return tuple((2 * (t_train - 1) * (d - i) + d) // (2 * d) for i in range(steps))


@dataclass(frozen=True)
class RoutingPlan:
    preset: Preset
    window: InjectionWindow
    tau: int
    steps: int
    t_map: tuple[int, ...]
    obj_phase: str = "tau"
    resolved: dict = field(default_factory=dict, compare=False, hash=False)

    def selector(self, group: str, step: int) -> Selector:
        return self.resolved[(group, step)]

    @property
    def label(self) -> str:
        if self.preset is Preset.BASELINE:
            return "baseline"
        return f"{self.preset.value}_{self.window.label}"


def _resolve(preset: Preset, window: InjectionWindow, tau: int, t_map, obj_phase: str,
             group: str, step: int) -> Selector:
    t = t_map[step]
    inside = window.contains(t)
    if preset is Preset.BASELINE:
        return Selector.FULL
    if preset is Preset.LATE_ONLY:
        return Selector.STYLE if group in ("mid", "up") and inside else Selector.FULL
    if preset is Preset.MID_ONLY:
        return Selector.STYLE if group == "mid" and inside else Selector.FULL
    if preset is Preset.FULL:
        if not inside:
            return Selector.FULL
        return Selector.OBJ if group == "down" else Selector.STYLE
    # early_style_late
    if group == "down":
        early = step < tau if obj_phase == "tau" else t >= window.lo
        return Selector.OBJ if early else Selector.FULL
    return Selector.STYLE if inside else Selector.FULL


def build_plan(preset: Preset | str = Preset.BASELINE, window: InjectionWindow | str = DEFAULT_WINDOW,
               tau: int = 35, sampler_steps: int = 50, t_map: tuple[int, ...] | None = None,
               obj_phase: str = "tau") -> RoutingPlan:
    preset = Preset(preset)
    if isinstance(window, str):
        window = InjectionWindow.parse(window)
    if not isinstance(tau, (int, np.integer)) or not 0 <= tau <= sampler_steps:
        raise InvalidTau(f"tau={tau} outside [0, {sampler_steps}]")
    if obj_phase not in OBJ_PHASES:
        raise ValueError(f"obj_phase must be one of {OBJ_PHASES}")
    t_map = tuple(t_map) if t_map is not None else t_train_map(sampler_steps)
    if len(t_map) != sampler_steps:
        raise ValueError("t_map length must equal sampler_steps")
    resolved = {(g, i): _resolve(preset, window, int(tau), t_map, obj_phase, g, i)
                for g in GROUPS for i in range(sampler_steps)}
    return RoutingPlan(preset, window, int(tau), sampler_steps, t_map, obj_phase, resolved)


def select_tokens(plan: RoutingPlan, group: str, step: int, split: TokenSplit) -> tuple[np.ndarray, bool]:
    """Boolean mask over the prompt tokens and whether the empty-subset fallback fired."""
    n = len(split.all)
    sel = plan.selector(group, step)
    if sel is Selector.FULL:
        return np.ones(n, dtype=bool), False
    chosen = split.obj if sel is Selector.OBJ else split.style
    if not chosen:
        return np.ones(n, dtype=bool), True
    mask = np.zeros(n, dtype=bool)
    mask[sorted(chosen)] = True
    return mask, False


def describe_plan(plan: RoutingPlan) -> str:
    """One row per (group, contiguous step range) with a non-Full selector."""
    rows = []
    for g in GROUPS:
        i = 0
        while i < plan.steps:
            sel = plan.selector(g, i)
            j = i
            while j + 1 < plan.steps and plan.selector(g, j + 1) is sel:
                j += 1
            if sel is not Selector.FULL:
                rows.append(f"{g:<5} steps {i:>3}-{j:<3} (t {plan.t_map[i]}..{plan.t_map[j]}): {sel.value}")
            i = j + 1
    header = f"plan {plan.label} (tau={plan.tau}, obj_phase={plan.obj_phase}, steps={plan.steps})"
    if not rows:
        return f"{header}\nall groups, all steps: Full"
    return "\n".join([header, *rows, "everything else: Full"])
