"""Two-stage progressive distillation of guided samplers.

Stage one trains a student to output the classifier-free-guided combination
of a frozen teacher's conditional and unconditional predictions, baking the
guidance weight into a single model that is evaluated once per sampling
step. Stage two repeatedly halves the step budget: the current student runs
two consecutive DDIM steps on its grid, and the child is regressed so that
one DDIM step of twice the size lands on the same point. Regression targets
are expressed in velocity space.

The machinery is generic over a small problem interface so the same loops
distill real video stages and closed-form scalar teachers alike; see
`StageDistillProblem` for the cascade-facing implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import StageSpec
from .dataset import DatasetManifest
from .denoiser import Denoiser, FrameMask, denoise, drop_text, training_graph
from .denoiser import _network_inputs
from .diffusion import COSINE, schedule_at
from .graph import eval_and_grad
from .tensor import Tensor, TensorError
from .training import StageData, TrainState, train_step

__all__ = [
    "DistillConfig",
    "Student",
    "StageDistillProblem",
    "distill_guidance",
    "halve_steps",
    "distill_to_steps",
    "ddim_step",
    "landing_v_target",
]


@dataclass(frozen=True)
class DistillConfig:
    guidance_w: float
    start_steps: int
    target_steps: int = 8
    steps_per_iter: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    grad_clip_norm: float = 1.0
    lr_decay: bool = True   # linear anneal to zero within each iteration

    def __post_init__(self):
        for n, label in ((self.start_steps, "start_steps"), (self.target_steps, "target_steps")):
            if n < 1 or n & (n - 1):
                raise TensorError(f"{label} must be a power of two, got {n}")
        if self.target_steps > self.start_steps:
            raise TensorError("target_steps cannot exceed start_steps")
        if self.guidance_w < 0:
            raise TensorError("guidance weight must be >= 0")


@dataclass
class Student:
    """A distilled denoiser with its baked guidance weight and step budget.

    Evaluated once per sampler step; there is no conditional/unconditional
    pair anymore.
    """

    denoiser: Denoiser
    guidance_w: float
    steps: int

    def predict_v(self, z: Tensor, log_snr, cond, mask) -> Tensor:
        return denoise(self.denoiser, z, log_snr, cond, mask)


def ddim_step(z, v, t: float, s: float, sched=COSINE):
    """One deterministic update from t to s given a velocity prediction."""
    a_t, s_t, _ = schedule_at(sched, t)
    a_s, s_s, _ = schedule_at(sched, s)
    x_hat = a_t * z - s_t * v
    eps_hat = s_t * z + a_t * v
    return a_s * x_hat + s_s * eps_hat


def landing_v_target(z_t, z_landing, t: float, s: float, sched=COSINE):
    """Velocity at (z_t, t) whose single DDIM step to s lands on z_landing."""
    a_t, s_t, _ = schedule_at(sched, t)
    a_s, s_s, _ = schedule_at(sched, s)
    denom = a_s * s_t - s_s * a_t
    if abs(denom) < 1e-12:
        raise TensorError(f"degenerate landing interval t={t}, s={s}")
    x_tilde = (z_landing * s_t - s_s * z_t) / denom
    return (a_t * z_t - x_tilde) / s_t


# ---------------------------------------------------------------------------
# Stage-flavored distillation problem
# ---------------------------------------------------------------------------

class StageDistillProblem:
    """Distillation batches and losses for one cascade stage.

    Contexts are training-style batches (data clip targets plus
    conditioning); the teacher is a frozen denoiser pair, and students share
    its architecture.
    """

    def __init__(self, teacher: Denoiser, stage: StageSpec, manifest: DatasetManifest,
                 clips: list[Tensor]):
        self.teacher = teacher
        self.cfg = teacher.config
        self.stage = stage
        self.data = StageData(stage, manifest, clips)

    def init_params(self) -> dict[str, Tensor]:
        return dict(self.teacher.params)

    def draw_context(self, batch_size: int, rng: np.random.Generator):
        batch, cond, mask = self.data.video_batch(batch_size, rng)
        return {"x": batch.data, "cond": cond,
                "uncond": drop_text(cond, self.cfg.embed_dim, self.cfg.max_tokens),
                "mask": mask}

    def sample_z(self, ctx, rng: np.random.Generator, times=None):
        x = ctx["x"]
        b = x.shape[0]
        t = rng.uniform(0.0, 1.0, size=b) if times is None else rng.choice(times, size=b)
        eps = rng.standard_normal(x.shape).astype(np.float32)
        alpha, sigma, _ = schedule_at(COSINE, t)
        z = (alpha.astype(np.float32).reshape(b, 1, 1, 1, 1) * x
             + sigma.astype(np.float32).reshape(b, 1, 1, 1, 1) * eps)
        return z, t

    def teacher_pair(self, ctx, z, t):
        lam = schedule_at(COSINE, t).log_snr
        zt = Tensor(z.astype(np.float32), _trusted=True)
        v_c = denoise(self.teacher, zt, lam, ctx["cond"], ctx["mask"])
        v_u = denoise(self.teacher, zt, lam, ctx["uncond"], ctx["mask"])
        return v_c.data, v_u.data

    def predict(self, params, ctx, z, t):
        live = Denoiser(config=self.cfg, params=params)
        lam = schedule_at(COSINE, t).log_snr
        return denoise(live, Tensor(z.astype(np.float32), _trusted=True), lam,
                       ctx["cond"], ctx["mask"]).data

    def loss_and_grads(self, params, ctx, z, t, target):
        b, f, h, w, _ = z.shape
        lam = schedule_at(COSINE, t).log_snr
        graph = training_graph(self.cfg, b, f, h, w)
        inputs = _network_inputs(self.cfg, z, lam, ctx["cond"], ctx["mask"])
        inputs["target"] = target.astype(np.float32)
        valid = ctx["mask"].valid.astype(np.float64)
        inputs["loss_weight"] = (
            valid / (valid.sum() * h * w * z.shape[4])
        ).astype(np.float32).reshape(b, f, 1, 1, 1)
        out, grads = eval_and_grad(graph, inputs, params)
        return float(out["loss"].item()), grads

    @staticmethod
    def slice_context(ctx, rows):
        return {
            "x": ctx["x"][rows],
            "cond": _slice_bundle(ctx["cond"], rows),
            "uncond": _slice_bundle(ctx["uncond"], rows),
            "mask": FrameMask(ctx["mask"].valid[rows], ctx["mask"].independent[rows]),
        }


# ---------------------------------------------------------------------------
# Distillation loops
# ---------------------------------------------------------------------------

def distill_guidance(problem, w: float, cfg: DistillConfig,
                     init_params: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Stage one: regress a single student onto the guided teacher output."""
    if w < 0:
        raise TensorError("guidance weight must be >= 0")
    params = dict(init_params) if init_params is not None else problem.init_params()
    state = TrainState.fresh(params, cfg.seed)

    def objective(p, rng):
        ctx = problem.draw_context(cfg.batch_size, rng)
        z, t = problem.sample_z(ctx, rng)
        v_c, v_u = problem.teacher_pair(ctx, z, t)
        target = (1.0 + w) * v_c - w * v_u
        return problem.loss_and_grads(p, ctx, z, t, target)

    for i in range(cfg.steps_per_iter):
        train_step(state, objective, _lr_at(cfg, i), cfg.grad_clip_norm)
    return state.params


def _lr_at(cfg: DistillConfig, i: int) -> float:
    if not cfg.lr_decay:
        return cfg.lr
    return cfg.lr * (1.0 - i / cfg.steps_per_iter)


def halve_steps(problem, parent_params: dict[str, Tensor], parent_steps: int,
                cfg: DistillConfig) -> tuple[dict[str, Tensor], int]:
    """Stage two, one iteration: teach one child step to equal two parent steps."""
    if parent_steps % 2:
        raise TensorError(f"cannot halve an odd step budget {parent_steps}")
    child_steps = parent_steps // 2
    macro_times = np.arange(1, child_steps + 1) * (2.0 / parent_steps)
    dt = 1.0 / parent_steps
    state = TrainState.fresh(dict(parent_params), cfg.seed + parent_steps)

    slicer = getattr(problem, "slice_context", lambda ctx, rows: ctx)

    def objective(p, rng):
        ctx = problem.draw_context(cfg.batch_size, rng)
        z, t = problem.sample_z(ctx, rng, times=macro_times)
        # Two parent DDIM steps along the fine grid per element.
        target = np.empty_like(z)
        for tv in np.unique(t):
            rows = t == tv
            zr = z[rows]
            mid, end = float(tv) - dt, float(tv) - 2.0 * dt
            ctx_rows = slicer(ctx, rows)
            v1 = problem.predict(parent_params, ctx_rows, zr, np.full(rows.sum(), tv))
            z_mid = ddim_step(zr, v1, float(tv), mid)
            v2 = problem.predict(parent_params, ctx_rows, z_mid, np.full(rows.sum(), mid))
            z_end = ddim_step(z_mid, v2, mid, end)
            target[rows] = landing_v_target(zr, z_end, float(tv), end)
        return problem.loss_and_grads(p, ctx, z, t, target)

    for i in range(cfg.steps_per_iter):
        train_step(state, objective, _lr_at(cfg, i), cfg.grad_clip_norm)
    return state.params, child_steps


def _slice_bundle(bundle, rows):
    from .denoiser import ConditioningBundle

    aug = bundle.aug_log_snr
    if isinstance(aug, np.ndarray):
        aug = aug[rows]
    return ConditioningBundle(
        token_embeddings=Tensor(bundle.token_embeddings.data[rows], _trusted=True),
        pooled=Tensor(bundle.pooled.data[rows], _trusted=True),
        text_mask=bundle.text_mask[rows],
        cond_video=None if bundle.cond_video is None
        else Tensor(bundle.cond_video.data[rows], _trusted=True),
        aug_log_snr=aug,
    )


def distill_to_steps(problem, cfg: DistillConfig, fidelity=None):
    """Full chain: bake guidance, then halve until the target step budget.

    `fidelity`, when given, is called as fidelity(params, steps) after every
    iteration and its result is collected into the returned report.
    """
    report = []
    params = distill_guidance(problem, cfg.guidance_w, cfg)
    steps = cfg.start_steps
    if fidelity is not None:
        report.append({"phase": "guidance", "steps": steps, "metric": fidelity(params, steps)})
    while steps > cfg.target_steps:
        params, steps = halve_steps(problem, params, steps, cfg)
        if fidelity is not None:
            report.append({"phase": "halve", "steps": steps, "metric": fidelity(params, steps)})
    return params, steps, report


def distill_stage(teacher: Denoiser, stage: StageSpec, manifest: DatasetManifest,
                  clips: list[Tensor], cfg: DistillConfig, fidelity=None):
    """Distill one cascade stage into a few-step student."""
    problem = StageDistillProblem(teacher, stage, manifest, clips)
    params, steps, report = distill_to_steps(problem, cfg, fidelity=fidelity)
    student = Student(
        denoiser=Denoiser(config=teacher.config, params=params),
        guidance_w=cfg.guidance_w,
        steps=steps,
    )
    return student, report
