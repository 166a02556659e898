"""Continuous-time Gaussian diffusion math.

The forward process is variance preserving: q(z_t | x) = N(alpha_t x,
sigma_t^2 I) with alpha_t^2 + sigma_t^2 = 1 and log-SNR
lambda_t = log(alpha_t^2 / sigma_t^2) strictly decreasing in t. The cosine
schedule is alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2); endpoints are
clamped in log-SNR so noise/data never fully vanish, which keeps every
prediction-space conversion well defined.

All functions are pure and closed form. They accept scalars or numpy arrays
for times, and Tensors or arrays for payloads; a Tensor payload yields Tensor
results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .tensor import Tensor, TensorError


class PredictionSpace(Enum):
    """What the denoiser output means: data, noise, or velocity."""

    X = "x"
    EPS = "eps"
    V = "v"


class SchedulePoint(NamedTuple):
    alpha: float | np.ndarray
    sigma: float | np.ndarray
    log_snr: float | np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule with a log-SNR clamp at the endpoints."""

    kind: str = "cosine"
    lambda_clamp: tuple[float, float] = (-20.0, 20.0)

    def __post_init__(self):
        if self.kind != "cosine":
            raise TensorError(f"unsupported schedule kind {self.kind!r}")
        lo, hi = self.lambda_clamp
        if not lo < hi:
            raise TensorError(f"lambda clamp must be an increasing pair, got {self.lambda_clamp}")


COSINE = NoiseSchedule()


def schedule_at(sched: NoiseSchedule, t) -> SchedulePoint:
    """(alpha, sigma, log_snr) at time t in [0, 1].

    Where the raw log-SNR exceeds the clamp, alpha and sigma are recomputed
    from the clamped value so the variance-preserving identity still holds.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise TensorError(f"schedule time must lie in [0, 1], got {t}")
    alpha = np.cos(t_arr * (math.pi / 2.0))
    sigma = np.sin(t_arr * (math.pi / 2.0))
    with np.errstate(divide="ignore"):
        tan = np.tan(t_arr * (math.pi / 2.0))
        log_snr = np.where(tan == 0.0, np.inf, -2.0 * np.log(np.where(tan == 0.0, 1.0, tan)))
    lo, hi = sched.lambda_clamp
    clamped = np.clip(log_snr, lo, hi)
    hit = clamped != log_snr
    if np.any(hit):
        # alpha^2 = sigmoid(lambda), sigma^2 = sigmoid(-lambda)
        alpha = np.where(hit, np.sqrt(_sigmoid(clamped)), alpha)
        sigma = np.where(hit, np.sqrt(_sigmoid(-clamped)), sigma)
        log_snr = clamped
    if t_arr.ndim == 0:
        return SchedulePoint(float(alpha), float(sigma), float(log_snr))
    return SchedulePoint(alpha, sigma, log_snr)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def t_from_log_snr(sched: NoiseSchedule, log_snr: float) -> float:
    """Invert the clamped cosine schedule: t = (2/pi) * arctan(exp(-lambda/2))."""
    lo, hi = sched.lambda_clamp
    if not lo <= log_snr <= hi:
        raise TensorError(f"log-SNR {log_snr} outside clamp range [{lo}, {hi}]")
    return float(2.0 / math.pi * math.atan(math.exp(-0.5 * log_snr)))


def _payload(x):
    if isinstance(x, Tensor):
        return x.data.astype(np.float64), True
    return np.asarray(x, dtype=np.float64), False


def _result(arr: np.ndarray, as_tensor: bool):
    if as_tensor:
        return Tensor(arr.astype(np.float32), _trusted=True)
    return arr


def q_sample(sched: NoiseSchedule, x, t, eps):
    """Draw z_t = alpha_t * x + sigma_t * eps for given noise eps."""
    xa, is_tensor = _payload(x)
    ea, _ = _payload(eps)
    if xa.shape != ea.shape:
        raise TensorError(f"q_sample shape mismatch: {xa.shape} vs {ea.shape}")
    alpha, sigma, _ = schedule_at(sched, t)
    return _result(np.asarray(alpha) * xa + np.asarray(sigma) * ea, is_tensor)


def transition(sched: NoiseSchedule, s: float, t: float) -> tuple[float, float]:
    """Forward transition q(z_t | z_s): scale ratio and variance, s < t."""
    if not s < t:
        raise TensorError(f"transition requires s < t, got s={s}, t={t}")
    a_s, _, l_s = schedule_at(sched, s)
    a_t, s_t, l_t = schedule_at(sched, t)
    ratio = a_t / a_s
    var = (1.0 - math.exp(l_t - l_s)) * s_t * s_t
    return float(ratio), float(var)


def posterior(sched: NoiseSchedule, z_t, x_hat, s: float, t: float):
    """Reverse-direction q(z_s | z_t, x): mean tensor and scalar variance.

    mean = e^(lt-ls) (alpha_s/alpha_t) z_t + (1 - e^(lt-ls)) alpha_s x_hat
    var  = (1 - e^(lt-ls)) sigma_s^2
    """
    if not s < t:
        raise TensorError(f"posterior requires s < t, got s={s}, t={t}")
    za, is_tensor = _payload(z_t)
    xa, _ = _payload(x_hat)
    if za.shape != xa.shape:
        raise TensorError(f"posterior shape mismatch: {za.shape} vs {xa.shape}")
    a_s, s_s, l_s = schedule_at(sched, s)
    a_t, _, l_t = schedule_at(sched, t)
    decay = math.exp(l_t - l_s)
    mean = decay * (a_s / a_t) * za + (1.0 - decay) * a_s * xa
    var = (1.0 - decay) * s_s * s_s
    return _result(mean, is_tensor), float(var)


_CONVERSIONS = {
    (PredictionSpace.X, PredictionSpace.EPS): lambda z, p, a, s: (z - a * p) / s,
    (PredictionSpace.X, PredictionSpace.V): lambda z, p, a, s: (a * z - p) / s,
    (PredictionSpace.EPS, PredictionSpace.X): lambda z, p, a, s: (z - s * p) / a,
    (PredictionSpace.EPS, PredictionSpace.V): lambda z, p, a, s: (p - s * z) / a,
    (PredictionSpace.V, PredictionSpace.X): lambda z, p, a, s: a * z - s * p,
    (PredictionSpace.V, PredictionSpace.EPS): lambda z, p, a, s: s * z + a * p,
}

_NEEDS_SIGMA = {
    (PredictionSpace.X, PredictionSpace.EPS),
    (PredictionSpace.X, PredictionSpace.V),
}
_NEEDS_ALPHA = {
    (PredictionSpace.EPS, PredictionSpace.X),
    (PredictionSpace.EPS, PredictionSpace.V),
}


def convert_prediction(
    sched: NoiseSchedule,
    z_t,
    t,
    pred,
    from_space: PredictionSpace,
    to_space: PredictionSpace,
):
    """Convert a prediction between x / eps / v at fixed (z_t, t).

    Uses x = alpha z - sigma v, eps = sigma z + alpha v, and
    eps = (z - alpha x) / sigma; any conversion path composes consistently.
    """
    za, is_tensor = _payload(z_t)
    pa, _ = _payload(pred)
    if za.shape != pa.shape:
        raise TensorError(f"convert_prediction shape mismatch: {za.shape} vs {pa.shape}")
    if from_space == to_space:
        return _result(pa, is_tensor)
    alpha, sigma, _ = schedule_at(sched, t)
    key = (from_space, to_space)
    if key in _NEEDS_SIGMA and np.any(np.asarray(sigma) == 0.0):
        raise TensorError("conversion divides by sigma=0 at t=0; use a clamped schedule")
    if key in _NEEDS_ALPHA and np.any(np.asarray(alpha) == 0.0):
        raise TensorError("conversion divides by alpha=0 at t=1; use a clamped schedule")
    out = _CONVERSIONS[key](za, pa, np.asarray(alpha), np.asarray(sigma))
    return _result(out, is_tensor)


def snr_to_alpha_sigma(snr: float) -> tuple[float, float, float]:
    """Variance-preserving (alpha, sigma, log_snr) for a given SNR = alpha/sigma."""
    if not snr > 0.0:
        raise TensorError(f"snr must be positive, got {snr}")
    denom = math.sqrt(1.0 + snr * snr)
    return snr / denom, 1.0 / denom, 2.0 * math.log(snr)
