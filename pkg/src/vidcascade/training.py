"""Stage training: diffusion loss, optimizer, joint image-video batches.

The loss is the squared error between the network output and the target in
the configured prediction space (velocity by default; noise prediction is
kept available for the parameterization comparison), averaged over valid
frames only. One generator drives all randomness per training run; its state
is checkpointed, so a resumed run replays the exact batch/noise sequence and
reproduces subsequent losses bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cascade import StageSpec, derive_stage_example, prepare_condition, stage_seed
from .dataset import DatasetManifest
from .denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    FrameMask,
    StageKind,
    bundle_from_texts,
    denoise,
    drop_text,
    pack_image_batch,
    training_graph,
    _network_inputs,
)
from .diffusion import COSINE, PredictionSpace, convert_prediction, schedule_at, snr_to_alpha_sigma
from .graph import GraphError, eval_and_grad
from .sampling import SamplerConfig, SamplerKind, ddim_sample
from .tensor import Tensor, TensorError
from .textenc import embed_text, null_embedding

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 8
    steps: int = 1000
    image_batch_fraction: float = 0.0
    cond_dropout_prob: float = 0.1
    grad_clip_norm: float = 1.0
    eval_every: int = 200
    seed: int = 0
    pred_space: PredictionSpace = PredictionSpace.V
    eval_sampler_steps: int = 32
    eval_batch: int = 4

    def __post_init__(self):
        if min(self.lr, self.grad_clip_norm) < 0 or min(self.batch_size, self.steps, self.eval_every) < 1:
            raise TensorError("train config fields must be positive")
        if not 0.0 <= self.cond_dropout_prob <= 0.5:
            raise TensorError(f"cond_dropout_prob must lie in [0, 0.5], got {self.cond_dropout_prob}")
        if not 0.0 <= self.image_batch_fraction <= 1.0:
            raise TensorError("image_batch_fraction must lie in [0, 1]")
        if self.pred_space == PredictionSpace.X:
            raise TensorError("training targets are velocity or noise prediction")


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    image_batches: int = 0

    @staticmethod
    def fresh(params: dict[str, Tensor], seed: int) -> "TrainState":
        return TrainState(
            params=dict(params),
            adam_m={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
            adam_v={k: np.zeros(p.shape, dtype=np.float32) for k, p in params.items()},
            step=0,
            rng=np.random.default_rng(seed),
        )


def adam_update(
    state: TrainState, grads: dict[str, Tensor], lr: float, grad_clip_norm: float
) -> None:
    """One in-place Adam step with global gradient-norm clipping."""
    sq = 0.0
    for g in grads.values():
        sq += float((g.data.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    scale = np.float32(grad_clip_norm / norm) if (grad_clip_norm > 0 and norm > grad_clip_norm) else np.float32(1.0)

    state.step += 1
    t = state.step
    bias1 = np.float32(1.0 - ADAM_BETA1**t)
    bias2 = np.float32(1.0 - ADAM_BETA2**t)
    for name, g in grads.items():
        gv = g.data * scale
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= np.float32(ADAM_BETA1)
        m += np.float32(1.0 - ADAM_BETA1) * gv
        v *= np.float32(ADAM_BETA2)
        v += np.float32(1.0 - ADAM_BETA2) * gv * gv
        step_vec = np.float32(lr) * (m / bias1) / (np.sqrt(v / bias2) + np.float32(ADAM_EPS))
        state.params[name] = Tensor(state.params[name].data - step_vec, _trusted=True)


def train_step(
    state: TrainState,
    loss_and_grads: Callable[[dict[str, Tensor], np.random.Generator], tuple[float, dict[str, Tensor]]],
    lr: float,
    grad_clip_norm: float = 1.0,
) -> float:
    """Draw one batch through the supplied objective and apply Adam.

    Deterministic given the state's generator; raises on divergence.
    """
    loss, grads = loss_and_grads(state.params, state.rng)
    if not math.isfinite(loss):
        raise GraphError(f"training diverged at step {state.step}: loss={loss}")
    adam_update(state, grads, lr, grad_clip_norm)
    return loss


# ---------------------------------------------------------------------------
# Diffusion loss
# ---------------------------------------------------------------------------

def _loss_weights(mask: FrameMask, shape) -> np.ndarray:
    b, f, h, w, c = shape
    valid = mask.valid.astype(np.float64)
    count = valid.sum() * h * w * c
    if count == 0:
        raise TensorError("loss needs at least one valid frame")
    return (valid / count).astype(np.float32).reshape(b, f, 1, 1, 1)


def _apply_dropout(cond: ConditioningBundle, drop: np.ndarray, cfg: DenoiserConfig) -> ConditioningBundle:
    if not drop.any():
        return cond
    null = null_embedding(cfg.embed_dim, cfg.max_tokens)
    tokens = cond.token_embeddings.data.copy()
    pooled = cond.pooled.data.copy()
    text_mask = cond.text_mask.copy()
    tokens[drop] = null.tokens.data
    pooled[drop] = null.pooled.data
    text_mask[drop] = False
    return ConditioningBundle(
        token_embeddings=Tensor(tokens, _trusted=True),
        pooled=Tensor(pooled, _trusted=True),
        text_mask=text_mask,
        cond_video=cond.cond_video,
        aug_log_snr=cond.aug_log_snr,
    )


def diffusion_loss(
    d: Denoiser,
    batch: Tensor,
    cond: ConditioningBundle,
    mask: FrameMask,
    rng: np.random.Generator,
    pred_space: PredictionSpace = PredictionSpace.V,
    cond_dropout_prob: float = 0.0,
    params: dict[str, Tensor] | None = None,
    predict_override: Callable | None = None,
) -> tuple[float, dict[str, Tensor]]:
    """Masked denoising loss and parameter gradients for one batch.

    Draws t ~ U(0,1) and unit noise per element, forms z_t, and regresses the
    network output onto the target in `pred_space` over valid frames.

    `predict_override(z, log_snr, target)` replaces the network when probing
    the loss itself (no gradients are produced then).
    """
    x = batch.data
    if x.ndim != 5:
        raise TensorError(f"training batch must be 5-D, got shape {batch.shape}")
    b, f, h, w, c = x.shape
    cfg = d.config
    t = rng.uniform(0.0, 1.0, size=b)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    if cond_dropout_prob > 0.0:
        drop = rng.uniform(0.0, 1.0, size=b) < cond_dropout_prob
        cond = _apply_dropout(cond, drop, cfg)

    alpha, sigma, log_snr = schedule_at(COSINE, t)
    a = alpha.astype(np.float32).reshape(b, 1, 1, 1, 1)
    s = sigma.astype(np.float32).reshape(b, 1, 1, 1, 1)
    z = a * x + s * eps
    if pred_space == PredictionSpace.V:
        target = a * eps - s * x
    elif pred_space == PredictionSpace.EPS:
        target = eps
    else:
        raise TensorError("loss target must be velocity or noise prediction")

    weights = _loss_weights(mask, x.shape)
    if predict_override is not None:
        pred = np.asarray(predict_override(z, log_snr, target), dtype=np.float32)
        loss = float((((pred - target) ** 2).astype(np.float64) * weights).sum())
        return loss, {}
    graph = training_graph(cfg, b, f, h, w)
    inputs = _network_inputs(cfg, z, log_snr, cond, mask)
    inputs["target"] = target
    inputs["loss_weight"] = weights
    out, grads = eval_and_grad(graph, inputs, params if params is not None else d.params)
    return float(out["loss"].item()), grads


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] payloads, capped at 99."""
    if a.shape != b.shape:
        raise TensorError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2).mean())
    if mse <= 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(4.0 / mse))


# ---------------------------------------------------------------------------
# Stage training loop
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    step: int
    loss: float
    psnr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "loss": self.loss, "psnr": self.psnr,
             "wall_time": self.wall_time},
            sort_keys=True,
        )


class StageData:
    """Deterministic batch assembly from a rendered corpus for one stage."""

    def __init__(self, stage: StageSpec, manifest: DatasetManifest, clips: list[Tensor]):
        self.stage = stage
        self.clips = clips
        self.prompts = [rec.prompt for rec in manifest.clips]
        dcfg = stage.denoiser
        self.texts = [embed_text(p, dcfg.embed_dim, dcfg.max_tokens) for p in self.prompts]

    def video_batch(self, batch_size: int, rng: np.random.Generator, train: bool = True):
        idx = rng.integers(0, len(self.clips), size=batch_size)
        conds, targets, texts = [], [], []
        for i in idx:
            cond, target = derive_stage_example(self.clips[i], self.stage, rng, train=train)
            conds.append(cond)
            targets.append(target)
            texts.append(self.texts[i])
        batch = Tensor(np.stack([t.data for t in targets]), _trusted=True)
        mask = FrameMask.video(batch_size, batch.shape[1])
        if self.stage.kind == StageKind.BASE:
            return batch, bundle_from_texts(texts), mask
        raw_cond = np.stack([c.data for c in conds])
        snrs = np.array([self.stage.aug.draw_train_snr(rng) for _ in range(batch_size)])
        pairs = [snr_to_alpha_sigma(s) for s in snrs]
        al = np.array([p[0] for p in pairs], dtype=np.float32).reshape(-1, 1, 1, 1, 1)
        sg = np.array([p[1] for p in pairs], dtype=np.float32).reshape(-1, 1, 1, 1, 1)
        lam = np.array([p[2] for p in pairs])
        noised = al * raw_cond + sg * rng.standard_normal(raw_cond.shape).astype(np.float32)
        cond_video = prepare_condition(Tensor(noised.astype(np.float32), _trusted=True), self.stage)
        bundle = bundle_from_texts(texts, cond_video=cond_video, aug_log_snr=lam)
        return batch, bundle, mask

    def image_batch(self, n_images: int, rng: np.random.Generator):
        """Stills from one clip packed as independent single-frame videos."""
        i = int(rng.integers(0, len(self.clips)))
        clip = self.clips[i]
        frames = rng.integers(0, clip.shape[0], size=n_images)
        from .tensor import bilinear_resize

        stills = [
            bilinear_resize(
                Tensor(clip.data[f], _trusted=True), (self.stage.out_h, self.stage.out_w)
            )
            for f in frames
        ]
        batch, mask = pack_image_batch(stills, self.stage.out_frames)
        texts = [self.texts[i]] * batch.shape[0]
        return batch, bundle_from_texts(texts), mask


def _eval_psnr(
    d: Denoiser, stage: StageSpec, data: StageData, cfg: TrainConfig, step: int,
    pred_space: PredictionSpace,
) -> float:
    rng = np.random.default_rng(stage_seed(cfg.seed, 50_000 + step))
    batch, cond, mask = data.video_batch(cfg.eval_batch, rng, train=False)
    if stage.kind == StageKind.BASE:
        # Denoising fidelity proxy: reconstruct x from a mid-noise corruption.
        t = 0.5
        eps = rng.standard_normal(batch.shape).astype(np.float32)
        alpha, sigma, lam = schedule_at(COSINE, t)
        z = Tensor(np.float32(alpha) * batch.data + np.float32(sigma) * eps, _trusted=True)
        pred = denoise(d, z, lam, cond, mask)
        x_hat = convert_prediction(COSINE, z, t, pred, pred_space, PredictionSpace.X)
        return psnr(Tensor(np.clip(x_hat.data, -1, 1), _trusted=True), batch)
    uncond = drop_text(cond, d.config.embed_dim, d.config.max_tokens)
    w = stage.sampler.guidance.w if stage.sampler.guidance.kind == "constant" else stage.sampler.guidance.w_low

    def pair(z, lam):
        vc = denoise(d, Tensor(z.astype(np.float32), _trusted=True), lam, cond, mask).data
        vu = denoise(d, Tensor(z.astype(np.float32), _trusted=True), lam, uncond, mask).data
        if pred_space == PredictionSpace.EPS:
            a_, s_, _ = schedule_at(COSINE, _t_of_lam(lam))
            vc = (vc - np.float32(s_) * z) / np.float32(a_)
            vu = (vu - np.float32(s_) * z) / np.float32(a_)
        return vc, vu

    scfg = SamplerConfig(
        kind=SamplerKind.DDIM, steps=cfg.eval_sampler_steps,
        guidance=dataclasses.replace(stage.sampler.guidance) if stage.sampler.guidance.kind == "constant"
        else stage.sampler.guidance,
        clip=stage.sampler.clip, seed=stage_seed(cfg.seed, 60_000 + step),
    )
    out = ddim_sample(pair, batch.shape, scfg)
    return psnr(out, batch)


def _t_of_lam(lam: float) -> float:
    from .diffusion import t_from_log_snr

    return t_from_log_snr(COSINE, max(min(lam, 20.0), -20.0))


def train_stage(
    stage: StageSpec,
    manifest: DatasetManifest,
    clips: list[Tensor],
    cfg: TrainConfig,
    log_path: Path | str | None = None,
    state: TrainState | None = None,
    init_seed: int | None = None,
) -> tuple[TrainState, list[EvalRecord]]:
    """Train one cascade stage on a rendered corpus.

    The base stage optionally interleaves packed-image batches at
    `image_batch_fraction`; super-resolution stages always train on videos.
    Emits one eval record every `eval_every` steps (and at the final step)
    to the line-delimited log. Pass a checkpointed state to resume: the
    replayed steps reproduce the original losses exactly.
    """
    if stage.kind != StageKind.BASE and cfg.image_batch_fraction > 0:
        raise TensorError("image batches apply to the base stage only")
    if state is None:
        seed = cfg.seed if init_seed is None else init_seed
        state = TrainState.fresh(_fresh_params(stage.denoiser, seed), cfg.seed)
    data = StageData(stage, manifest, clips)
    records: list[EvalRecord] = []
    log_file = Path(log_path).open("a") if log_path is not None else None
    start = time.perf_counter()
    recent: list[float] = []

    def objective(params, rng):
        use_images = (
            cfg.image_batch_fraction > 0.0
            and rng.uniform() < cfg.image_batch_fraction
        )
        if use_images:
            batch, cond, mask = data.image_batch(cfg.batch_size, rng)
            state.image_batches += 1
        else:
            batch, cond, mask = data.video_batch(cfg.batch_size, rng)
        live = Denoiser(config=stage.denoiser, params=params)
        return diffusion_loss(
            live, batch, cond, mask, rng,
            pred_space=cfg.pred_space,
            cond_dropout_prob=cfg.cond_dropout_prob,
        )

    while state.step < cfg.steps:
        loss = train_step(state, objective, cfg.lr, cfg.grad_clip_norm)
        recent.append(loss)
        if state.step % cfg.eval_every == 0 or state.step == cfg.steps:
            live = Denoiser(config=stage.denoiser, params=state.params)
            record = EvalRecord(
                step=state.step,
                loss=float(np.mean(recent)),
                psnr=_eval_psnr(live, stage, data, cfg, state.step, cfg.pred_space),
                wall_time=time.perf_counter() - start,
            )
            recent.clear()
            records.append(record)
            if log_file is not None:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
    if log_file is not None:
        log_file.close()
    return state, records


def _fresh_params(dcfg: DenoiserConfig, seed: int) -> dict[str, Tensor]:
    from .denoiser import build_denoiser

    return build_denoiser(dcfg, seed).params
