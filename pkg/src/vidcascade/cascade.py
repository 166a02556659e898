"""Pipeline assembly: stage chaining, conditioning augmentation, generation.

A pipeline is an ordered list of stages: one base stage that samples from
noise given text, followed by super-resolution stages that each condition on
the previous stage's output. The conditioning input is noised at a known SNR
(augmentation), upsampled to the stage's output geometry, and concatenated
channelwise inside the denoiser; the augmentation log-SNR rides along so the
model knows how corrupted its conditioning is. Augmentation happens before
upsampling.

Oscillating guidance is only allowed on the first three diffusion stages,
and the highest-resolution stage must be fully convolutional; both are
enforced when the pipeline spec is constructed.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    FrameMask,
    StageKind,
    bundle_from_texts,
    denoise,
    drop_text,
)
from .diffusion import snr_to_alpha_sigma
from .sampling import (
    SamplerConfig,
    SamplerKind,
    ancestral_sample,
    ddim_sample,
    distilled_sample,
)
from .tensor import Tensor, TensorError, bilinear_resize, temporal_upsample
from .textenc import embed_text


@dataclass(frozen=True)
class AugmentationPolicy:
    """Conditioning-noise policy: train-time SNR range and sampling-time SNR.

    Training draws the SNR log-uniformly from the range; sampling uses the
    fixed value (a light corruption such as 3 or 5).
    """

    train_snr_range: tuple[float, float] = (0.5, 20.0)
    sample_snr: float = 3.0

    def __post_init__(self):
        lo, hi = self.train_snr_range
        if not 0 < lo <= hi:
            raise TensorError(f"train SNR range must satisfy 0 < lo <= hi, got {self.train_snr_range}")
        if self.sample_snr <= 0:
            raise TensorError(f"sample SNR must be positive, got {self.sample_snr}")

    def draw_train_snr(self, rng: np.random.Generator) -> float:
        lo, hi = self.train_snr_range
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


@dataclass(frozen=True)
class StageSpec:
    name: str
    kind: StageKind
    in_frames: int
    in_h: int
    in_w: int
    out_frames: int
    out_h: int
    out_w: int
    denoiser: DenoiserConfig
    sampler: SamplerConfig
    aug: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    cond_mode: str = "repeat"   # temporal fill for TSR conditioning
    crop: int | None = None     # SSR training crop size, optional

    def __post_init__(self):
        if self.kind == StageKind.BASE:
            if (self.in_frames, self.in_h, self.in_w) != (self.out_frames, self.out_h, self.out_w):
                raise TensorError(f"stage {self.name}: base stage has no input stage")
        elif self.kind == StageKind.SSR:
            if self.in_frames != self.out_frames:
                raise TensorError(f"stage {self.name}: spatial stages must keep the frame count")
            if self.out_h % self.in_h or self.out_w % self.in_w:
                raise TensorError(f"stage {self.name}: output dims must be integer multiples of input")
            if (self.out_h, self.out_w) == (self.in_h, self.in_w):
                raise TensorError(f"stage {self.name}: spatial stage must change resolution")
        else:  # TSR
            if (self.in_h, self.in_w) != (self.out_h, self.out_w):
                raise TensorError(f"stage {self.name}: temporal stages must keep spatial dims")
            if self.out_frames % self.in_frames or self.out_frames == self.in_frames:
                raise TensorError(f"stage {self.name}: frame count must grow by an integer factor")
        if self.denoiser.stage_kind != self.kind:
            raise TensorError(f"stage {self.name}: denoiser kind {self.denoiser.stage_kind} != {self.kind}")
        if (self.denoiser.frames, self.denoiser.height, self.denoiser.width) != (
            self.out_frames, self.out_h, self.out_w,
        ):
            raise TensorError(
                f"stage {self.name}: denoiser dims {self.denoiser.frames}x"
                f"{self.denoiser.height}x{self.denoiser.width} != stage output"
            )
        if self.cond_mode not in ("repeat", "blank"):
            raise TensorError(f"stage {self.name}: unknown cond_mode {self.cond_mode!r}")
        if self.crop is not None and (self.crop < 4 or self.crop > min(self.out_h, self.out_w)):
            raise TensorError(f"stage {self.name}: crop {self.crop} out of range")


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if not self.stages:
            raise TensorError("pipeline needs at least one stage")
        if self.stages[0].kind != StageKind.BASE:
            raise TensorError("first pipeline stage must be the base stage")
        if any(s.kind == StageKind.BASE for s in self.stages[1:]):
            raise TensorError("only the first stage may be a base stage")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if (cur.in_frames, cur.in_h, cur.in_w) != (prev.out_frames, prev.out_h, prev.out_w):
                raise TensorError(
                    f"stage {cur.name}: input {cur.in_frames}x{cur.in_h}x{cur.in_w} does not "
                    f"chain from {prev.name} output {prev.out_frames}x{prev.out_h}x{prev.out_w}"
                )
        for idx, stage in enumerate(self.stages):
            if stage.sampler.guidance.kind == "oscillate" and idx > 2:
                raise TensorError(
                    f"stage {stage.name}: oscillating guidance is limited to the base "
                    "stage and the first two super-resolution stages"
                )
        max_pixels = max(s.out_h * s.out_w for s in self.stages)
        if len(self.stages) > 1:
            for stage in self.stages:
                if stage.out_h * stage.out_w == max_pixels and stage.kind != StageKind.BASE:
                    if any(stage.denoiser.spatial_attention):
                        raise TensorError(
                            f"stage {stage.name}: the highest-resolution stage must be "
                            "fully convolutional (no spatial attention)"
                        )

    @property
    def final_shape(self) -> tuple[int, int, int]:
        last = self.stages[-1]
        return (last.out_frames, last.out_h, last.out_w)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def prepare_condition(prev: Tensor, stage: StageSpec, mode: str | None = None) -> Tensor:
    """Upsample a previous-stage video to the stage's output geometry."""
    if stage.kind == StageKind.BASE:
        raise TensorError("base stage takes no conditioning input")
    mode = mode or stage.cond_mode
    shape = prev.shape
    frames, h, w = shape[-4], shape[-3], shape[-2]
    if stage.kind == StageKind.SSR:
        if stage.out_h % h or stage.out_w % w:
            raise TensorError(f"conditioning dims {h}x{w} do not divide {stage.out_h}x{stage.out_w}")
        return bilinear_resize(prev, (stage.out_h, stage.out_w), antialias=True)
    if stage.out_frames % frames:
        raise TensorError(f"conditioning frames {frames} do not divide {stage.out_frames}")
    return temporal_upsample(prev, stage.out_frames // frames, mode)


def augment_condition(video: Tensor, snr: float, noise_seed: int) -> tuple[Tensor, float]:
    """Gaussian-noise the conditioning video at a known SNR.

    Returns the corrupted video and the log-SNR that must be passed to the
    denoiser alongside it.
    """
    alpha, sigma, log_snr = snr_to_alpha_sigma(snr)
    rng = np.random.default_rng(noise_seed)
    noised = alpha * video.data + sigma * rng.standard_normal(video.shape).astype(np.float32)
    return Tensor(noised.astype(np.float32), _trusted=True), log_snr


# ---------------------------------------------------------------------------
# Training example derivation
# ---------------------------------------------------------------------------

def _frame_skip_indices(raw_frames: int, want: int, rng, train: bool) -> np.ndarray:
    if raw_frames % want:
        raise TensorError(f"cannot skip {raw_frames} frames down to {want}")
    stride = raw_frames // want
    offset = int(rng.integers(0, stride)) if (train and stride > 1) else 0
    return np.arange(want) * stride + offset


def derive_stage_example(
    raw: Tensor, stage: StageSpec, rng: np.random.Generator, train: bool = True
) -> tuple[Tensor | None, Tensor]:
    """Resize a max-resolution clip into (conditioning input, target) for a stage.

    Targets come from uniform frame skipping plus antialiased spatial
    resizing; the conditioning input repeats the process at the stage's input
    geometry on frames aligned with the target. Training mode randomizes the
    skip offset (and the spatial crop for SSR stages configured with one);
    evaluation is deterministic with offset 0.
    """
    rf, rh, rw, _ = raw.shape
    if rf < stage.out_frames or rh < stage.out_h or rw < stage.out_w:
        raise TensorError(
            f"raw clip {rf}x{rh}x{rw} smaller than stage output "
            f"{stage.out_frames}x{stage.out_h}x{stage.out_w}"
        )
    idx = _frame_skip_indices(rf, stage.out_frames, rng, train)
    frames = Tensor(raw.data[idx], _trusted=True)
    target = bilinear_resize(frames, (stage.out_h, stage.out_w), antialias=True)
    if stage.kind == StageKind.BASE:
        return None, target

    if stage.kind == StageKind.SSR:
        cond_frames = frames
    else:
        ratio = stage.out_frames // stage.in_frames
        cond_frames = Tensor(frames.data[::ratio], _trusted=True)
    cond = bilinear_resize(cond_frames, (stage.in_h, stage.in_w), antialias=True)

    if stage.kind == StageKind.SSR and stage.crop is not None and train:
        ratio = stage.out_h // stage.in_h
        crop = stage.crop
        cy = int(rng.integers(0, (stage.out_h - crop) // ratio + 1)) * ratio
        cx = int(rng.integers(0, (stage.out_w - crop) // ratio + 1)) * ratio
        target = Tensor(target.data[:, cy:cy + crop, cx:cx + crop], _trusted=True)
        cond = Tensor(
            cond.data[:, cy // ratio:(cy + crop) // ratio, cx // ratio:(cx + crop) // ratio],
            _trusted=True,
        )
    return cond, target


# ---------------------------------------------------------------------------
# End-to-end generation
# ---------------------------------------------------------------------------

def stage_seed(run_seed: int, stage_index: int) -> int:
    """Per-stage sampler seed derived from the run seed."""
    return int(np.random.SeedSequence([run_seed, stage_index]).generate_state(1)[0])


def _predict_fn(model, cond, mask):
    """v-prediction closure for one stage model; Denoisers and probe objects alike."""
    custom = getattr(model, "predict_v", None)
    if custom is not None:
        return lambda z, lam: custom(Tensor(z.astype(np.float32), _trusted=True), lam, cond, mask).data
    return lambda z, lam: denoise(model, Tensor(z.astype(np.float32), _trusted=True), lam, cond, mask).data


def _sample_stage(model, stage: StageSpec, cond: ConditioningBundle, batch: int, seed: int) -> Tensor:
    cfg = dataclasses.replace(stage.sampler, seed=seed)
    shape = (batch, stage.out_frames, stage.out_h, stage.out_w, 3)
    mask = FrameMask.video(batch, stage.out_frames)
    if cfg.kind == SamplerKind.DISTILLED:
        single = _predict_fn(model, cond, mask)
        return distilled_sample(single, shape, cfg.steps, seed, clip=cfg.clip)
    dcfg = model.config if hasattr(model, "config") else model.denoiser.config
    uncond = drop_text(cond, dcfg.embed_dim, dcfg.max_tokens)
    fc = _predict_fn(model, cond, mask)
    fu = _predict_fn(model, uncond, mask)

    def pair(z, lam):
        return fc(z, lam), fu(z, lam)

    if cfg.kind == SamplerKind.ANCESTRAL:
        return ancestral_sample(pair, shape, cfg)
    return ddim_sample(pair, shape, cfg)


def run_pipeline(
    pipe: PipelineSpec,
    models: dict[str, object],
    prompt: str | Sequence[str],
    seed: int,
) -> tuple[Tensor, list[Tensor]]:
    """Generate video(s) for a prompt through every cascade stage.

    Returns the final stage output plus every intermediate. A single prompt
    yields 4-D videos; a list of prompts yields batched 5-D tensors.
    """
    single = isinstance(prompt, str)
    prompts = [prompt] if single else list(prompt)
    batch = len(prompts)
    missing = [s.name for s in pipe.stages if s.name not in models]
    if missing:
        raise TensorError(f"missing stage checkpoints: {missing}")

    per_stage: list[Tensor] = []
    prev: Tensor | None = None
    for idx, stage in enumerate(pipe.stages):
        model = models[stage.name]
        dcfg = model.config if hasattr(model, "config") else model.denoiser.config
        texts = [embed_text(p, dcfg.embed_dim, dcfg.max_tokens) for p in prompts]
        if stage.kind == StageKind.BASE:
            cond = bundle_from_texts(texts)
        else:
            noised, aug_log_snr = augment_condition(
                prev, stage.aug.sample_snr, stage_seed(seed, 1000 + idx)
            )
            cond_video = prepare_condition(noised, stage)
            cond = bundle_from_texts(texts, cond_video=cond_video, aug_log_snr=aug_log_snr)
        out = _sample_stage(model, stage, cond, batch, stage_seed(seed, idx))
        per_stage.append(out)
        prev = out
    if single:
        per_stage = [Tensor(t.data[0], _trusted=True) for t in per_stage]
    return per_stage[-1], per_stage
