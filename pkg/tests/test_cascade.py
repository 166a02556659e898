"""Stage chaining, conditioning preparation/augmentation, pipeline validation."""

from __future__ import annotations

import math

import numpy as np
import pytest

from vidcascade.cascade import (
    AugmentationPolicy,
    PipelineSpec,
    StageSpec,
    augment_condition,
    derive_stage_example,
    prepare_condition,
    run_pipeline,
    stage_seed,
)
from vidcascade.denoiser import DenoiserConfig, StageKind, TemporalMixer, build_denoiser
from vidcascade.diffusion import COSINE, convert_prediction, PredictionSpace, schedule_at
from vidcascade.sampling import ClipMode, GuidanceSchedule, SamplerConfig, SamplerKind, ancestral_sample
from vidcascade.tensor import Tensor, TensorError, bilinear_resize, tensor
from vidcascade.textenc import embed_text


def _dcfg(kind: StageKind, frames, h, w, attention=False) -> DenoiserConfig:
    mixer = TemporalMixer.ATTENTION if kind == StageKind.BASE else TemporalMixer.CONV
    return DenoiserConfig(
        stage_kind=kind, frames=frames, height=h, width=w,
        channels=(8,), spatial_attention=(attention,), temporal_mixer=(mixer,),
        cond_channels=0 if kind == StageKind.BASE else 3,
        embed_dim=8, max_tokens=4, cond_dim=8,
    )


def _sampler(**kw) -> SamplerConfig:
    kwargs = dict(kind=SamplerKind.ANCESTRAL, steps=4, gamma=0.1,
                  guidance=GuidanceSchedule.constant(1.0), clip=ClipMode.static(), seed=0)
    kwargs.update(kw)
    return SamplerConfig(**kwargs)


def base_stage(frames=4, h=8, w=8, **kw):
    return StageSpec(
        name=kw.pop("name", "base"), kind=StageKind.BASE,
        in_frames=frames, in_h=h, in_w=w, out_frames=frames, out_h=h, out_w=w,
        denoiser=_dcfg(StageKind.BASE, frames, h, w, attention=True),
        sampler=kw.pop("sampler", _sampler()), **kw,
    )


def ssr_stage(frames=4, h_in=8, w_in=8, h_out=16, w_out=16, **kw):
    return StageSpec(
        name=kw.pop("name", "ssr"), kind=StageKind.SSR,
        in_frames=frames, in_h=h_in, in_w=w_in,
        out_frames=frames, out_h=h_out, out_w=w_out,
        denoiser=kw.pop("denoiser", _dcfg(StageKind.SSR, frames, h_out, w_out)),
        sampler=kw.pop("sampler", _sampler()), **kw,
    )


def tsr_stage(f_in=4, f_out=8, h=8, w=8, **kw):
    return StageSpec(
        name=kw.pop("name", "tsr"), kind=StageKind.TSR,
        in_frames=f_in, in_h=h, in_w=w, out_frames=f_out, out_h=h, out_w=w,
        denoiser=kw.pop("denoiser", _dcfg(StageKind.TSR, f_out, h, w)),
        sampler=kw.pop("sampler", _sampler()), **kw,
    )


# ---------------------------------------------------------------------------
# Stage/pipeline validation
# ---------------------------------------------------------------------------

def test_ssr_must_change_spatial_only():
    with pytest.raises(TensorError):
        StageSpec(name="bad", kind=StageKind.SSR,
                  in_frames=4, in_h=8, in_w=8, out_frames=8, out_h=16, out_w=16,
                  denoiser=_dcfg(StageKind.SSR, 8, 16, 16), sampler=_sampler())


def test_tsr_must_change_frames_only():
    with pytest.raises(TensorError):
        StageSpec(name="bad", kind=StageKind.TSR,
                  in_frames=4, in_h=8, in_w=8, out_frames=8, out_h=16, out_w=16,
                  denoiser=_dcfg(StageKind.TSR, 8, 16, 16), sampler=_sampler())


def test_non_integer_ratio_rejected():
    with pytest.raises(TensorError):
        ssr_stage(h_in=8, w_in=8, h_out=12, w_out=12,
                  denoiser=_dcfg(StageKind.SSR, 4, 12, 12))


def test_pipeline_requires_base_first():
    with pytest.raises(TensorError):
        PipelineSpec(stages=(ssr_stage(),))


def test_pipeline_rejects_second_base():
    with pytest.raises(TensorError):
        PipelineSpec(stages=(base_stage(), base_stage(name="base2")))


def test_pipeline_dimension_chaining_enforced():
    with pytest.raises(TensorError):
        PipelineSpec(stages=(base_stage(h=8, w=8), ssr_stage(h_in=16, w_in=16, h_out=32, w_out=32,
                     denoiser=_dcfg(StageKind.SSR, 4, 32, 32))))


def test_pipeline_dimension_chaining_composes():
    pipe = PipelineSpec(stages=(base_stage(), tsr_stage(), ssr_stage(
        frames=8, denoiser=_dcfg(StageKind.SSR, 8, 16, 16))))
    assert pipe.final_shape == (8, 16, 16)


def test_oscillating_guidance_rejected_past_first_three_stages():
    osc = _sampler(guidance=GuidanceSchedule.oscillate(15.0, 1.0, 1))
    stages = (
        base_stage(),
        tsr_stage(),
        ssr_stage(frames=8, denoiser=_dcfg(StageKind.SSR, 8, 16, 16)),
        tsr_stage(name="tsr2", f_in=8, f_out=16, h=16, w=16,
                  denoiser=_dcfg(StageKind.TSR, 16, 16, 16), sampler=osc),
    )
    with pytest.raises(TensorError, match="oscillating"):
        PipelineSpec(stages=stages)
    # The same schedule on the first three stages is fine.
    PipelineSpec(stages=(
        base_stage(sampler=osc),
        tsr_stage(sampler=osc),
        ssr_stage(frames=8, denoiser=_dcfg(StageKind.SSR, 8, 16, 16), sampler=osc),
    ))


def test_highest_resolution_stage_must_be_fully_convolutional():
    spec = _dcfg(StageKind.SSR, 4, 16, 16, attention=True)
    with pytest.raises(TensorError, match="fully convolutional"):
        PipelineSpec(stages=(base_stage(), ssr_stage(denoiser=spec)))


# ---------------------------------------------------------------------------
# prepare_condition / augment_condition
# ---------------------------------------------------------------------------

def test_prepare_condition_ssr_constant_video():
    vid = Tensor(np.full((4, 8, 8, 3), 0.4, dtype=np.float32), _trusted=True)
    out = prepare_condition(vid, ssr_stage())
    assert out.shape == (4, 16, 16, 3)
    assert np.allclose(out.data, 0.4, atol=1e-6)


def test_prepare_condition_tsr_repeat():
    rng = np.random.default_rng(0)
    vid = Tensor(rng.uniform(-1, 1, (4, 8, 8, 3)).astype(np.float32), _trusted=True)
    out = prepare_condition(vid, tsr_stage(), mode="repeat")
    assert out.shape == (8, 8, 8, 3)
    for i in range(4):
        assert np.array_equal(out.data[2 * i], vid.data[i])
        assert np.array_equal(out.data[2 * i + 1], vid.data[i])


def test_prepare_condition_base_errors():
    vid = Tensor(np.zeros((4, 8, 8, 3), dtype=np.float32), _trusted=True)
    with pytest.raises(TensorError):
        prepare_condition(vid, base_stage())


def test_prepare_condition_rejects_non_divisible():
    vid = Tensor(np.zeros((3, 8, 8, 3), dtype=np.float32), _trusted=True)
    with pytest.raises(TensorError):
        prepare_condition(vid, tsr_stage())


def test_augment_high_snr_is_nearly_identity():
    rng = np.random.default_rng(1)
    vid = Tensor(rng.uniform(-1, 1, (2, 4, 4, 3)).astype(np.float32), _trusted=True)
    out, lam = augment_condition(vid, 1e6, noise_seed=0)
    assert np.abs(out.data - vid.data).max() < 1e-4
    assert lam == pytest.approx(2 * math.log(1e6))


def test_augment_snr3_noise_level_monte_carlo():
    zero = Tensor(np.zeros((100, 100, 1, 1), dtype=np.float32), _trusted=True)
    out, lam = augment_condition(zero, 3.0, noise_seed=5)
    sigma = math.sqrt(1 / 10)
    n = out.size
    se_var = sigma**2 * math.sqrt(2 / (n - 1))
    assert abs(float(out.data.var()) - sigma**2) < 3 * se_var
    assert lam == pytest.approx(2 * math.log(3.0))


def test_augment_rejects_nonpositive_snr():
    vid = Tensor(np.zeros((1, 4, 4, 3), dtype=np.float32), _trusted=True)
    with pytest.raises(TensorError):
        augment_condition(vid, 0.0, 0)


# ---------------------------------------------------------------------------
# derive_stage_example
# ---------------------------------------------------------------------------

def _raw_clip(frames=16, h=16, w=16, seed=3):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (frames, h, w, 3)).astype(np.float32), _trusted=True)


def test_derive_identity_when_dims_match():
    raw = _raw_clip(frames=4, h=8, w=8)
    rng = np.random.default_rng(0)
    _, target = derive_stage_example(raw, base_stage(), rng, train=False)
    assert np.array_equal(target.data, raw.data)


def test_derive_frame_skip_eval_offset_zero():
    raw = _raw_clip(frames=16, h=8, w=8)
    rng = np.random.default_rng(0)
    _, target = derive_stage_example(raw, base_stage(frames=4), rng, train=False)
    assert np.array_equal(target.data, raw.data[[0, 4, 8, 12]])


def test_derive_ssr_cond_is_downscaled_target_frames():
    raw = _raw_clip(frames=4, h=16, w=16)
    rng = np.random.default_rng(0)
    cond, target = derive_stage_example(raw, ssr_stage(), rng, train=False)
    assert cond.shape == (4, 8, 8, 3)
    assert target.shape == (4, 16, 16, 3)
    expect = bilinear_resize(Tensor(raw.data, _trusted=True), (8, 8))
    assert np.array_equal(cond.data, expect.data)


def test_derive_tsr_cond_frames_align_with_target():
    raw = _raw_clip(frames=8, h=8, w=8)
    rng = np.random.default_rng(0)
    cond, target = derive_stage_example(raw, tsr_stage(), rng, train=False)
    assert cond.shape == (4, 8, 8, 3)
    assert target.shape == (8, 8, 8, 3)
    assert np.array_equal(cond.data, target.data[::2])


def test_derive_crop_mode_shapes():
    stage = ssr_stage(crop=8)
    raw = _raw_clip(frames=4, h=16, w=16)
    rng = np.random.default_rng(0)
    cond, target = derive_stage_example(raw, stage, rng, train=True)
    assert target.shape == (4, 8, 8, 3)
    assert cond.shape == (4, 4, 4, 3)


def test_derive_rejects_small_raw():
    raw = _raw_clip(frames=2, h=8, w=8)
    rng = np.random.default_rng(0)
    with pytest.raises(TensorError):
        derive_stage_example(raw, base_stage(), rng)


# ---------------------------------------------------------------------------
# run_pipeline
# ---------------------------------------------------------------------------

def test_single_stage_pipeline_equals_direct_base_sample():
    stage = base_stage(sampler=_sampler(steps=6, seed=0))
    pipe = PipelineSpec(stages=(stage,))
    model = build_denoiser(stage.denoiser, 0)
    final, per_stage = run_pipeline(pipe, {"base": model}, "a red square moving right on black", seed=9)
    assert len(per_stage) == 1

    from vidcascade.cascade import _predict_fn
    from vidcascade.denoiser import FrameMask, bundle_from_texts
    import dataclasses

    cond = bundle_from_texts([embed_text("a red square moving right on black", 8, 4)])
    uncond_cond = cond
    from vidcascade.denoiser import drop_text
    mask = FrameMask.video(1, 4)
    fc = _predict_fn(model, cond, mask)
    fu = _predict_fn(model, drop_text(cond, 8, 4), mask)
    cfg = dataclasses.replace(stage.sampler, seed=stage_seed(9, 0))
    direct = ancestral_sample(lambda z, lam: (fc(z, lam), fu(z, lam)),
                              (1, 4, 8, 8, 3), cfg)
    assert np.array_equal(final.data, direct.data[0])


def test_pipeline_returns_all_intermediates_and_missing_checkpoint_errors():
    stages = (base_stage(), tsr_stage())
    pipe = PipelineSpec(stages=stages)
    models = {"base": build_denoiser(stages[0].denoiser, 0)}
    with pytest.raises(TensorError, match="tsr"):
        run_pipeline(pipe, models, "a blue circle growing on white", seed=0)
    models["tsr"] = build_denoiser(stages[1].denoiser, 1)
    final, per_stage = run_pipeline(pipe, models, "a blue circle growing on white", seed=0)
    assert len(per_stage) == 2
    assert per_stage[0].shape == (4, 8, 8, 3)
    assert final.shape == (8, 8, 8, 3)
    assert float(np.abs(final.data).max()) <= 1.0


def test_conditioning_purity_with_identity_probe():
    # With effectively noiseless augmentation and a probe "denoiser" whose
    # data estimate is exactly the conditioning video, the stage output is
    # the bilinear upsampling of the previous stage.
    class IdentityOnCondition:
        config = _dcfg(StageKind.SSR, 4, 16, 16)

        def predict_v(self, z, lam, cond, mask):
            t = _t_from(lam)
            return convert_prediction(COSINE, z, t, cond.cond_video,
                                      PredictionSpace.X, PredictionSpace.V)

    def _t_from(lam):
        from vidcascade.diffusion import t_from_log_snr
        return t_from_log_snr(COSINE, float(np.clip(lam, -20, 20)))

    stage = ssr_stage(
        sampler=_sampler(kind=SamplerKind.DDIM, steps=8,
                         guidance=GuidanceSchedule.constant(0.0), clip=ClipMode.none()),
        aug=AugmentationPolicy(train_snr_range=(0.5, 20.0), sample_snr=1e8),
    )
    pipe_stage_base = base_stage(sampler=_sampler(steps=2, seed=0))
    pipe = PipelineSpec(stages=(pipe_stage_base, stage))
    models = {"base": build_denoiser(pipe_stage_base.denoiser, 0), "ssr": IdentityOnCondition()}
    final, per_stage = run_pipeline(pipe, models, "a red square moving right on black", seed=4)
    up = bilinear_resize(per_stage[0], (16, 16))
    assert np.abs(final.data - up.data).max() < 1e-3


def test_pipeline_batched_prompts():
    stage = base_stage(sampler=_sampler(steps=2))
    pipe = PipelineSpec(stages=(stage,))
    model = build_denoiser(stage.denoiser, 0)
    prompts = ["a red square moving right on black", "a blue circle growing on white"]
    final, per_stage = run_pipeline(pipe, model and {"base": model}, prompts, seed=1)
    assert final.shape == (2, 4, 8, 8, 3)
    assert per_stage[0].shape == (2, 4, 8, 8, 3)
