"""Guided reverse-process samplers.

All samplers consume a prediction callable in velocity space and walk a
uniformly spaced time grid from 1 to 0, guiding, converting to a data
estimate, clipping, and stepping. A paired predictor returns (conditional,
unconditional) outputs for classifier-free guidance; distilled students
return a single output with guidance baked in.

Every sampler is a pure function of (predictor, config, seed): identical
seeds give identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    COSINE,
    NoiseSchedule,
    PredictionSpace,
    posterior,
    schedule_at,
    transition,
)
from .tensor import Tensor, TensorError

PairPredictor = Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]]
SinglePredictor = Callable[[np.ndarray, float], np.ndarray]


class SamplerKind(Enum):
    ANCESTRAL = "ancestral"
    DDIM = "ddim"
    DISTILLED = "distilled"


@dataclass(frozen=True)
class GuidanceSchedule:
    """Constant guidance weight, or high/low oscillation after a constant lead-in."""

    kind: str
    w: float = 0.0
    w_high: float = 0.0
    w_low: float = 0.0
    initial_constant_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "oscillate"):
            raise TensorError(f"unknown guidance kind {self.kind!r}")
        if min(self.w, self.w_high, self.w_low) < 0:
            raise TensorError("guidance weights must be >= 0")
        if self.initial_constant_steps < 0:
            raise TensorError("initial_constant_steps must be >= 0")

    @staticmethod
    def constant(w: float) -> "GuidanceSchedule":
        return GuidanceSchedule(kind="constant", w=w)

    @staticmethod
    def oscillate(w_high: float, w_low: float, initial_constant_steps: int) -> "GuidanceSchedule":
        return GuidanceSchedule(
            kind="oscillate", w_high=w_high, w_low=w_low,
            initial_constant_steps=initial_constant_steps,
        )


@dataclass(frozen=True)
class ClipMode:
    """How data estimates are projected back to the pixel range.

    `static` clamps to [-1, 1]. `dynamic` clamps to a per-sample percentile
    of |x| (floored at 1) and rescales by it. `none` leaves estimates alone;
    the closed-form sampler oracles rely on it.
    """

    kind: str
    percentile: float = 99.5

    def __post_init__(self):
        if self.kind not in ("none", "static", "dynamic"):
            raise TensorError(f"unknown clip mode {self.kind!r}")
        if self.kind == "dynamic" and not 50.0 < self.percentile <= 100.0:
            raise TensorError(f"dynamic percentile must lie in (50, 100], got {self.percentile}")

    @staticmethod
    def none() -> "ClipMode":
        return ClipMode(kind="none")

    @staticmethod
    def static() -> "ClipMode":
        return ClipMode(kind="static")

    @staticmethod
    def dynamic(percentile: float = 99.5) -> "ClipMode":
        return ClipMode(kind="dynamic", percentile=percentile)


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind
    steps: int
    gamma: float = 0.1
    guidance: GuidanceSchedule = field(default_factory=lambda: GuidanceSchedule.constant(0.0))
    clip: ClipMode = field(default_factory=ClipMode.static)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise TensorError(f"sampler needs steps >= 1, got {self.steps}")
        if not 0.0 <= self.gamma <= 1.0:
            raise TensorError(f"gamma must lie in [0, 1], got {self.gamma}")


def guidance_weight_at(sched: GuidanceSchedule, step_index: int, total_steps: int) -> float:
    """Guidance weight for one sampling step."""
    if not 0 <= step_index < total_steps:
        raise TensorError(f"step index {step_index} outside [0, {total_steps})")
    if sched.kind == "constant":
        return sched.w
    if step_index < sched.initial_constant_steps:
        return sched.w_high
    offset = step_index - sched.initial_constant_steps
    return sched.w_high if offset % 2 == 0 else sched.w_low


def guided_prediction(pred_c, pred_u, w: float, space: PredictionSpace):
    """Classifier-free combination (1+w)*conditional - w*unconditional.

    The map is linear, so it commutes with every prediction-space conversion;
    `space` documents which space the operands live in.
    """
    if not isinstance(space, PredictionSpace):
        raise TensorError(f"space must be a PredictionSpace, got {space!r}")
    ca = pred_c.data if isinstance(pred_c, Tensor) else np.asarray(pred_c)
    ua = pred_u.data if isinstance(pred_u, Tensor) else np.asarray(pred_u)
    if ca.shape != ua.shape:
        raise TensorError(f"guided_prediction shape mismatch: {ca.shape} vs {ua.shape}")
    out = (1.0 + w) * ca.astype(np.float64) - w * ua.astype(np.float64)
    if isinstance(pred_c, Tensor):
        return Tensor(out.astype(np.float32), _trusted=True)
    return out


def clip_xhat(x_hat, mode: ClipMode):
    """Project a data estimate back to the valid pixel range.

    5-D inputs are treated as batches with per-element dynamic thresholds;
    anything else is one sample.
    """
    arr = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    if mode.kind == "none":
        out = arr.copy()
    elif mode.kind == "static":
        out = np.clip(arr, -1.0, 1.0)
    else:
        out = np.empty_like(arr)
        if arr.ndim == 5:
            for b in range(arr.shape[0]):
                s = max(1.0, float(np.percentile(np.abs(arr[b]), mode.percentile)))
                out[b] = np.clip(arr[b], -s, s) / s
        else:
            s = max(1.0, float(np.percentile(np.abs(arr), mode.percentile)))
            out = np.clip(arr, -s, s) / s
    if isinstance(x_hat, Tensor):
        return Tensor(out.astype(np.float32), _trusted=True)
    return out


def _to_x(z, v, alpha, sigma):
    return alpha * z - sigma * v


def _check_state(z: np.ndarray, step: int):
    if not np.all(np.isfinite(z)):
        raise TensorError(f"sampler state became non-finite at step {step}")


def _guided_xhat(predict: PairPredictor, z, t, step, total, cfg, sched):
    alpha, sigma, lam = schedule_at(sched, t)
    w = guidance_weight_at(cfg.guidance, step, total)
    v_c, v_u = predict(z, lam)
    v = (1.0 + w) * v_c - w * v_u
    x_hat = clip_xhat(_to_x(z, v, alpha, sigma), cfg.clip)
    return x_hat, alpha, sigma


def ancestral_sample(
    predict: PairPredictor,
    shape: Sequence[int],
    cfg: SamplerConfig,
    sched: NoiseSchedule = COSINE,
    trace: list | None = None,
) -> Tensor:
    """Stochastic reverse sampler with per-step variance interpolation.

    Per step: z_s = posterior_mean(z_t, x_hat) + sqrt(var_post^(1-gamma) *
    var_trans^gamma) * noise. The final step returns the clipped data
    estimate without adding noise.
    """
    if cfg.kind != SamplerKind.ANCESTRAL:
        raise TensorError("config kind must be ANCESTRAL")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps
    times = np.linspace(1.0, 0.0, n + 1)
    z = rng.standard_normal(tuple(shape))
    x_hat = None
    for i in range(n):
        t, s = float(times[i]), float(times[i + 1])
        x_hat, _, _ = _guided_xhat(predict, z, t, i, n, cfg, sched)
        if i == n - 1:
            break
        mean, post_var = posterior(sched, z, x_hat, s, t)
        _, trans_var = transition(sched, s, t)
        var = post_var ** (1.0 - cfg.gamma) * trans_var**cfg.gamma
        z = mean + math.sqrt(var) * rng.standard_normal(z.shape)
        _check_state(z, i)
        if trace is not None:
            trace.append({"step": i, "t": t, "s": s, "post_var": post_var,
                          "trans_var": trans_var, "var": var})
    return Tensor(np.asarray(x_hat, dtype=np.float32), _trusted=True)


def ddim_sample(
    predict: PairPredictor,
    shape: Sequence[int],
    cfg: SamplerConfig,
    sched: NoiseSchedule = COSINE,
) -> Tensor:
    """Deterministic probability-flow integrator: z_s = alpha_s x_hat + sigma_s eps_hat."""
    if cfg.kind != SamplerKind.DDIM:
        raise TensorError("config kind must be DDIM")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps
    times = np.linspace(1.0, 0.0, n + 1)
    z = rng.standard_normal(tuple(shape))
    x_hat = None
    for i in range(n):
        t, s = float(times[i]), float(times[i + 1])
        x_hat, alpha_t, sigma_t = _guided_xhat(predict, z, t, i, n, cfg, sched)
        if i == n - 1:
            break
        eps_hat = (z - alpha_t * x_hat) / sigma_t
        a_s, s_s, _ = schedule_at(sched, s)
        z = a_s * x_hat + s_s * eps_hat
        _check_state(z, i)
    return Tensor(np.asarray(x_hat, dtype=np.float32), _trusted=True)


def distilled_sample(
    predict: SinglePredictor,
    shape: Sequence[int],
    steps: int,
    seed: int,
    sched: NoiseSchedule = COSINE,
    clip: ClipMode | None = None,
    trace: list | None = None,
) -> Tensor:
    """Stochastic sampler for distilled students.

    Each iteration applies one deterministic DDIM update spanning two grid
    intervals, then renoises forward by one interval through the transition
    kernel, so an N-step grid costs N-1 single model evaluations. The final
    iteration reaches t=0 and skips the renoise.
    """
    if steps < 2 or steps % 2:
        raise TensorError(f"distilled sampler needs an even step count >= 2, got {steps}")
    clip = clip or ClipMode.none()
    rng = np.random.default_rng(seed)
    dt = 1.0 / steps
    z = rng.standard_normal(tuple(shape))
    i = steps
    while True:
        t = i * dt
        alpha, sigma, lam = schedule_at(sched, t)
        v = predict(z, lam)
        x_hat = clip_xhat(_to_x(z, v, alpha, sigma), clip)
        u = (i - 2) * dt
        if i <= 2:
            if trace is not None:
                trace.append({"t": t, "u": 0.0, "s": None, "evals": 1})
            return Tensor(np.asarray(x_hat, dtype=np.float32), _trusted=True)
        eps_hat = (z - alpha * x_hat) / sigma
        a_u, s_u, _ = schedule_at(sched, u)
        z = a_u * x_hat + s_u * eps_hat
        s = (i - 1) * dt
        ratio, var = transition(sched, u, s)
        z = ratio * z + math.sqrt(var) * rng.standard_normal(z.shape)
        _check_state(z, i)
        if trace is not None:
            trace.append({"t": t, "u": u, "s": s, "evals": 1, "noise_var": var})
        i -= 1
