"""Noise schedule, epsilon-MSE training and the seeded DDIM sampler with classifier-free guidance."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as tc
from .denoiser import GROUP_OF_BLOCK, Denoiser, UntrainedWeights
from .probe import AttnRecord, ProbeFilter
from .prompt_parser import Lexicon, TokenSplit, default_lexicon, tokenize
from .router import GROUPS, RoutingPlan, build_plan, select_tokens, t_train_map
from .tensor import Tensor


class InvalidRange(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class InvalidPlan(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)


def make_schedule(T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if not (0 < beta_start <= beta_end < 1) or T_train < 1:
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T_train, beta, alpha, np.cumprod(alpha))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is a scalar or one index per batch row."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T_train):
        raise IndexOutOfRange(f"t outside [0, {schedule.T_train})")
    ab = schedule.alpha_bar[t_arr]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def encode_prompt(text: str, lexicon: Lexicon | None = None) -> list[int]:
    lexicon = lexicon or default_lexicon()
    return lexicon.token_ids(tokenize(text, lexicon))


# --- training --------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Trainer:
    """One optimizer update per ``train_step``; training always conditions on the full prompt."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule | None = None, lr: float = 1e-3,
                 betas=(0.9, 0.999), grad_clip: float | None = 1.0, null_prob: float = 0.1,
                 lexicon: Lexicon | None = None):
        self.model = model
        self.schedule = schedule or make_schedule()
        self.opt = Adam(model.params, lr, betas)
        self.grad_clip = grad_clip
        self.null_prob = null_prob
        self.null_id = (lexicon or default_lexicon()).null_id

    def loss(self, images: np.ndarray, ids: list[list[int]], t: np.ndarray, eps: np.ndarray) -> Tensor:
        x_t = q_sample(self.schedule, images, t, eps)
        text = self.model.embed_padded(ids)
        eps_hat = self.model.unrouted_forward(x_t, t, text)
        return tc.mse(eps_hat, Tensor(eps))

    def draw(self, batch, rng: np.random.Generator):
        if not batch:
            raise ValueError("empty batch")
        images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in batch])
        b = len(batch)
        t = rng.integers(0, self.schedule.T_train, size=b)
        eps = rng.standard_normal(images.shape)
        drop = rng.random(b) < self.null_prob
        ids = [[self.null_id] if d else list(seq) for d, (_, seq) in zip(drop, batch)]
        return images, ids, t, eps

    def train_step(self, batch, rng: np.random.Generator) -> float:
        images, ids, t, eps = self.draw(batch, rng)
        for p in self.model.params.values():
            p.grad = None
        loss = self.loss(images, ids, t, eps)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss is {value} at optimizer step {self.opt.t}")
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.model.params.items()}
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if not math.isfinite(norm):
                raise NonFiniteLoss(f"gradient norm is {norm} at optimizer step {self.opt.t}")
            if norm > self.grad_clip:
                s = self.grad_clip / norm
                grads = {k: g * s for k, g in grads.items()}
        self.opt.step(grads)
        return value


# --- sampling --------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 7.5
    samples_per_prompt: int = 4
    seed: int = 0
    clip_x0: bool = True  # clamp each step's x0 estimate to the data range [-1, 1]

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.samples_per_prompt < 1:
            raise ValueError("samples_per_prompt must be >= 1")


@dataclass
class SampleResult:
    images: np.ndarray  # (S, 3, H, W), clamped to [-1, 1]
    records: list[list[AttnRecord]]  # per sample
    fallbacks: list[tuple[str, int, str]]  # (group, step, selector) where an empty subset fell back to Full
    t_map: tuple[int, ...]
    evaluations: int  # denoiser invocations; each evaluates both guidance branches in one batch


def initial_noise(cfg: SamplerConfig, prompt_key: int, shape=(3, 32, 32)) -> np.ndarray:
    return np.stack([rngmod.stream(cfg.seed, "sample", prompt_key, s).standard_normal(shape)
                     for s in range(cfg.samples_per_prompt)])


class TrajectoryCache:
    """Sampler latents after each step, keyed by the run identity and the conditioning masks so far.

    Runs that share routing for their first k steps (e.g. ablation cells whose
    windows open late) resume from the cached latent instead of recomputing;
    since every step is deterministic the result is bit-identical.
    """

    def __init__(self):
        self.states: dict[tuple, np.ndarray] = {}

    def clear(self) -> None:
        self.states.clear()


def _step_masks(plan: RoutingPlan | None, split: TokenSplit, steps: int, S: int, L: int, n_tok: int):
    full = np.zeros((S, L), dtype=bool)
    full[:, :n_tok] = True
    masks, fallbacks = [], []
    for i in range(steps):
        per_group = {}
        for g in GROUPS:
            cond = full
            if plan is not None:
                m, fell_back = select_tokens(plan, g, i, split)
                if fell_back:
                    fallbacks.append((g, i, plan.selector(g, i).value))
                cond = np.zeros((S, L), dtype=bool)
                cond[:, :n_tok] = m
            per_group[g] = cond
        masks.append(per_group)
    return masks, fallbacks


def sample(model: Denoiser, schedule: NoiseSchedule, split: TokenSplit, plan: RoutingPlan | None,
           cfg: SamplerConfig, prompt_key: int = 0, probe: ProbeFilter | bool | None = None,
           lexicon: Lexicon | None = None, cache: TrajectoryCache | None = None) -> SampleResult:
    """Deterministic DDIM (eta = 0) with CFG; ``plan=None`` is the routing-disabled code path."""
    if model.is_untrained():
        raise UntrainedWeights("all denoiser weights are zero")
    lexicon = lexicon or default_lexicon()
    t_map = t_train_map(cfg.steps, schedule.T_train)
    if plan is not None and (plan.steps != cfg.steps or tuple(plan.t_map) != t_map):
        raise InvalidPlan(f"plan resolved for {plan.steps} steps, sampler runs {cfg.steps}")
    if probe is True:
        probe = ProbeFilter()
    S = cfg.samples_per_prompt
    ids = lexicon.token_ids(split.all)
    n_tok = len(ids)
    text = model.embed_padded([ids] * S + [[lexicon.null_id]] * S)
    L = text.mask.shape[1]
    uncond_mask = text.mask[S:]
    masks, fallbacks = _step_masks(plan, split, cfg.steps, S, L, n_tok)

    # prefix keys: one per step, chaining the conditioning masks of all steps so far
    keys = []
    if cache is not None and not probe:
        digest = hashlib.sha256(repr((id(model), cfg, prompt_key, ids, schedule.T_train)).encode())
        for per_group in masks:
            for g in GROUPS:
                digest.update(np.packbits(per_group[g]).tobytes())
            keys.append(digest.hexdigest())
    start = 0
    x = None
    for i in range(len(keys) - 1, -1, -1):
        if keys[i] in cache.states:
            x, start = cache.states[keys[i]].copy(), i + 1
            break
    if x is None:
        x = initial_noise(cfg, prompt_key, (model.config.in_channels, model.config.image_size,
                                            model.config.image_size))
    records: list[list[AttnRecord]] = [[] for _ in range(S)]
    calls0 = model.calls
    with tc.no_grad():
        for i in range(start, len(t_map)):
            t = t_map[i]
            routed = {g: text.with_mask(np.concatenate([masks[i][g], uncond_mask])) for g in GROUPS}
            want = None
            if probe:
                want = lambda block, i=i: probe.wants(GROUP_OF_BLOCK[block], i)
            out, maps = model.forward(np.concatenate([x, x]), np.full(2 * S, t), routed, want)
            eps_c, eps_u = out.data[:S], out.data[S:]
            eps = eps_u + cfg.cfg_scale * (eps_c - eps_u)
            for block, amap in maps.items():
                side = int(math.isqrt(amap.shape[1]))
                for s in range(S):
                    records[s].append(AttnRecord(block, GROUP_OF_BLOCK[block], i, int(t), side, side,
                                                 amap[s, :, :n_tok].copy()))
            ab = schedule.alpha_bar[t]
            x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            if cfg.clip_x0:
                # at high t the division by sqrt(ab) amplifies small eps errors by up to ~160x;
                # clamp x0 and re-derive eps so the DDIM update stays consistent
                x0 = np.clip(x0, -1.0, 1.0)
                eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
            if i == len(t_map) - 1:
                x = x0
            else:
                ab_prev = schedule.alpha_bar[t_map[i + 1]]
                x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
            if keys:
                cache.states[keys[i]] = x.copy()
    return SampleResult(np.clip(x, -1.0, 1.0), records, fallbacks, t_map, model.calls - calls0)


def sample_prompt(model: Denoiser, text: str, plan: RoutingPlan | str | None = "baseline",
                  cfg: SamplerConfig | None = None, parser="dependency_chunks", prompt_key: int = 0,
                  schedule: NoiseSchedule | None = None, probe=None) -> SampleResult:
    """Convenience wrapper: parse ``text`` and sample with a named or resolved plan."""
    from .prompt_parser import parse

    cfg = cfg or SamplerConfig()
    split = parse(tokenize(text), parser)
    if isinstance(plan, str):
        plan = build_plan(plan, sampler_steps=cfg.steps)
    return sample(model, schedule or make_schedule(), split, plan, cfg, prompt_key, probe)


def train_loop(trainer: Trainer, data: list[tuple[np.ndarray, list[int]]], steps: int, batch_size: int,
               seed: int = 0, log_every: int = 100, on_log=None) -> list[tuple[int, float]]:
    """Run ``steps`` updates on minibatches drawn with replacement; returns (step, window-mean loss) rows."""
    if not data:
        raise ValueError("no training data")
    rng = rngmod.stream(seed, "train")
    log: list[tuple[int, float]] = []
    window: list[float] = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(data), size=batch_size)
        window.append(trainer.train_step([data[int(i)] for i in idx], rng))
        if step % log_every == 0 or step == steps:
            row = (step, float(np.mean(window)))
            log.append(row)
            window = []
            if on_log is not None:
                on_log(*row)
    return log
