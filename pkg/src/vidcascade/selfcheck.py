"""Fast invariant suite behind `vidcascade check`.

Spot-checks the schedule identities, prediction-space conversions, guidance
and clipping rules, resize kernels, and a gradient sample. Runs in seconds;
it is a smoke screen for broken installs, not a replacement for the tests.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion import (
    COSINE,
    PredictionSpace,
    convert_prediction,
    posterior,
    schedule_at,
    snr_to_alpha_sigma,
    t_from_log_snr,
    transition,
)
from .graph import GraphBuilder, finite_diff_check
from .sampling import ClipMode, GuidanceSchedule, clip_xhat, guidance_weight_at, guided_prediction
from .tensor import Tensor, bilinear_resize, temporal_upsample, tensor


def _check_schedule_vp() -> bool:
    t = np.linspace(0, 1, 257)
    a, s, _ = schedule_at(COSINE, t)
    return bool(np.all(np.abs(a * a + s * s - 1.0) < 1e-6))


def _check_log_snr_monotone() -> bool:
    lam = schedule_at(COSINE, np.linspace(0, 1, 1000)).log_snr
    return bool(np.all(np.diff(lam) < 0))


def _check_schedule_round_trip() -> bool:
    for t in np.linspace(0.01, 0.99, 17):
        lam = schedule_at(COSINE, float(t)).log_snr
        if abs(t_from_log_snr(COSINE, lam) - t) > 1e-6:
            return False
    return True


def _check_conversions() -> bool:
    rng = np.random.default_rng(0)
    for t in (0.15, 0.5, 0.85):
        x = tensor(rng.uniform(-1, 1, 32))
        z = tensor(rng.standard_normal(32))
        eps = convert_prediction(COSINE, z, t, x, PredictionSpace.X, PredictionSpace.EPS)
        v = convert_prediction(COSINE, z, t, eps, PredictionSpace.EPS, PredictionSpace.V)
        back = convert_prediction(COSINE, z, t, v, PredictionSpace.V, PredictionSpace.X)
        if float(np.abs(back.data - x.data).max()) > 1e-5:
            return False
    return True


def _check_posterior_degenerate() -> bool:
    z = tensor([0.7])
    mean, var = posterior(COSINE, z, tensor([0.2]), 0.5 - 1e-9, 0.5)
    return abs(mean.data[0] - 0.7) < 1e-6 and abs(var) < 1e-8


def _check_transition() -> bool:
    ratio, var = transition(COSINE, 0.25, 0.75)
    return abs(ratio - 0.414213562) < 1e-8 and abs(var - 0.828427125) < 1e-8


def _check_snr() -> bool:
    a, s, lam = snr_to_alpha_sigma(3.0)
    return (abs(a - 0.948683298) < 1e-8 and abs(s - 0.316227766) < 1e-8
            and abs(lam - 2.19722458) < 1e-7)


def _check_guidance() -> bool:
    osc = GuidanceSchedule.oscillate(15.0, 1.0, 4)
    weights = [guidance_weight_at(osc, i, 8) for i in range(8)]
    if weights != [15.0, 15.0, 15.0, 15.0, 15.0, 1.0, 15.0, 1.0]:
        return False
    out = guided_prediction(tensor(0.8), tensor(0.2), 2.0, PredictionSpace.X)
    return abs(out.item() - 2.0) < 1e-6


def _check_clipping() -> bool:
    dyn = clip_xhat(tensor([0.5, -1.5, 2.0]), ClipMode.dynamic(100.0))
    stat = clip_xhat(tensor([0.5, 1.5, 2.0]), ClipMode.static())
    return (np.allclose(dyn.data, [0.25, -0.75, 1.0])
            and np.allclose(stat.data, [0.5, 1.0, 1.0]))


def _check_resize() -> bool:
    img = tensor(np.array([[[0.0], [1.0]], [[2.0], [3.0]]]))
    down = bilinear_resize(img, (1, 1), antialias=True)
    if abs(down.data[0, 0, 0] - 1.5) > 1e-6:
        return False
    vid = tensor(np.arange(2 * 2 * 2 * 1, dtype=np.float32).reshape(2, 2, 2, 1))
    up = temporal_upsample(vid, 2, "repeat")
    return bool(np.array_equal(up.data[::2], vid.data))


def _check_gradients() -> bool:
    rng = np.random.default_rng(1)
    b = GraphBuilder()
    b.input("x", (1, 2, 4, 4, 2))
    b.param("w", (3, 3, 2, 2))
    b.op("pad_edge", "p", "x", pads=((2, (1, 1)), (3, (1, 1))))
    b.op("conv_spatial", "c", "p", "w")
    b.op("silu", "a", "c")
    b.op("mul", "sq", "a", "a")
    b.op("sum", "loss", "sq")
    g = b.build(outputs=("loss",))
    err = finite_diff_check(
        g,
        {"x": Tensor(rng.standard_normal((1, 2, 4, 4, 2)).astype(np.float32), _trusted=True)},
        {"w": Tensor((rng.standard_normal((3, 3, 2, 2)) * 0.4).astype(np.float32), _trusted=True)},
        eps=1e-4,
    )
    return err < 1e-3


def run_checks() -> list[tuple[str, bool]]:
    checks = [
        ("schedule variance preserving", _check_schedule_vp),
        ("log-SNR strictly decreasing", _check_log_snr_monotone),
        ("schedule inverse round-trip", _check_schedule_round_trip),
        ("prediction-space conversions", _check_conversions),
        ("posterior degenerate limit", _check_posterior_degenerate),
        ("transition closed form", _check_transition),
        ("snr to alpha/sigma", _check_snr),
        ("guidance weights and combination", _check_guidance),
        ("clipping rules", _check_clipping),
        ("resize and temporal upsample", _check_resize),
        ("gradient spot check", _check_gradients),
    ]
    results = []
    for name, fn in checks:
        try:
            ok = bool(fn())
        except Exception:
            ok = False
        results.append((name, ok))
    return results
