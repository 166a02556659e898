"""Run configuration: one JSON document describing dataset, stages, pipeline,
training, sampling, and distillation.

Unknown keys are rejected everywhere so typos fail loudly. Defaults live in
the tables below; anything not listed there is required. Stage entries may
carry a `train` sub-section that overrides the global one for that stage.

Sections and defaults:

dataset:  n=144, frames=8, size=16, seed=7, dir="data"
stages.<name>:
    kind                required, one of base|ssr|tsr
    in, out             required [frames, height, width] (in == out for base)
    channels            default [16, 32]
    spatial_attention   default: all true for base, all false otherwise
    embed_dim=16, max_tokens=8, cond_dim=32, groups=4, heads=2
    cond_mode="repeat", crop=null
    aug: train_snr_range=[0.5, 20.0], sample_snr=3.0
    sampler: kind="ancestral", steps=64, gamma=0.1, seed=0,
             guidance: kind="constant", w=4.0 (oscillate takes w_high, w_low,
             initial_constant_steps), clip: kind="static" (dynamic takes
             percentile=99.5)
    train: optional per-stage override of the train section
pipeline: stages = required list of stage names
train:    lr=0.002, batch_size=8, steps=1000, image_batch_fraction=0.0,
          cond_dropout_prob=0.1, grad_clip_norm=1.0, eval_every=200, seed=0,
          pred_space="v", eval_sampler_steps=32, eval_batch=4
sample:   seed=0, checkpoint_dir="checkpoints"
distill:  guidance_w=4.0, start_steps=64, target_steps=8, steps_per_iter=300,
          lr=0.001, batch_size=8, seed=0
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .cascade import AugmentationPolicy, PipelineSpec, StageSpec
from .denoiser import DenoiserConfig, StageKind, TemporalMixer
from .diffusion import PredictionSpace
from .distill import DistillConfig
from .sampling import ClipMode, GuidanceSchedule, SamplerConfig, SamplerKind
from .tensor import TensorError
from .training import TrainConfig


class ConfigError(TensorError):
    """Malformed run configuration."""


def _take(doc: dict, where: str, allowed: dict):
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = dict(allowed)
    out.update(doc)
    missing = [k for k, v in out.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")
    return out


_REQUIRED = object()


@dataclass(frozen=True)
class DatasetSection:
    n: int
    frames: int
    size: int
    seed: int
    dir: str


@dataclass(frozen=True)
class SampleSection:
    seed: int
    checkpoint_dir: str


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection
    stages: dict[str, StageSpec]
    pipeline: PipelineSpec
    train: TrainConfig
    stage_train: dict[str, TrainConfig]
    sample: SampleSection
    distill: DistillConfig


def _guidance(doc: dict, where: str) -> GuidanceSchedule:
    kind = doc.get("kind", "constant")
    if kind == "constant":
        d = _take(doc, where, {"kind": "constant", "w": 4.0})
        return GuidanceSchedule.constant(float(d["w"]))
    if kind == "oscillate":
        d = _take(doc, where, {"kind": "oscillate", "w_high": _REQUIRED,
                               "w_low": _REQUIRED, "initial_constant_steps": _REQUIRED})
        return GuidanceSchedule.oscillate(
            float(d["w_high"]), float(d["w_low"]), int(d["initial_constant_steps"])
        )
    raise ConfigError(f"{where}: unknown guidance kind {kind!r}")


def _clip(doc: dict, where: str) -> ClipMode:
    kind = doc.get("kind", "static")
    if kind == "dynamic":
        d = _take(doc, where, {"kind": "dynamic", "percentile": 99.5})
        return ClipMode.dynamic(float(d["percentile"]))
    _take(doc, where, {"kind": kind})
    if kind == "static":
        return ClipMode.static()
    if kind == "none":
        return ClipMode.none()
    raise ConfigError(f"{where}: unknown clip kind {kind!r}")


def _sampler(doc: dict, where: str) -> SamplerConfig:
    d = _take(doc, where, {
        "kind": "ancestral", "steps": 64, "gamma": 0.1, "seed": 0,
        "guidance": {}, "clip": {},
    })
    try:
        kind = SamplerKind(d["kind"])
    except ValueError as exc:
        raise ConfigError(f"{where}: unknown sampler kind {d['kind']!r}") from exc
    return SamplerConfig(
        kind=kind, steps=int(d["steps"]), gamma=float(d["gamma"]),
        guidance=_guidance(d["guidance"], f"{where}.guidance"),
        clip=_clip(d["clip"], f"{where}.clip"),
        seed=int(d["seed"]),
    )


def _train(doc: dict, where: str, base: TrainConfig | None = None) -> TrainConfig:
    defaults = {
        "lr": 0.002, "batch_size": 8, "steps": 1000, "image_batch_fraction": 0.0,
        "cond_dropout_prob": 0.1, "grad_clip_norm": 1.0, "eval_every": 200,
        "seed": 0, "pred_space": "v", "eval_sampler_steps": 32, "eval_batch": 4,
    }
    if base is not None:
        defaults.update({
            "lr": base.lr, "batch_size": base.batch_size, "steps": base.steps,
            "image_batch_fraction": base.image_batch_fraction,
            "cond_dropout_prob": base.cond_dropout_prob,
            "grad_clip_norm": base.grad_clip_norm, "eval_every": base.eval_every,
            "seed": base.seed, "pred_space": base.pred_space.value,
            "eval_sampler_steps": base.eval_sampler_steps, "eval_batch": base.eval_batch,
        })
    d = _take(doc, where, defaults)
    try:
        space = PredictionSpace(d["pred_space"])
    except ValueError as exc:
        raise ConfigError(f"{where}: unknown pred_space {d['pred_space']!r}") from exc
    return TrainConfig(
        lr=float(d["lr"]), batch_size=int(d["batch_size"]), steps=int(d["steps"]),
        image_batch_fraction=float(d["image_batch_fraction"]),
        cond_dropout_prob=float(d["cond_dropout_prob"]),
        grad_clip_norm=float(d["grad_clip_norm"]), eval_every=int(d["eval_every"]),
        seed=int(d["seed"]), pred_space=space,
        eval_sampler_steps=int(d["eval_sampler_steps"]), eval_batch=int(d["eval_batch"]),
    )


def _stage(name: str, doc: dict) -> tuple[StageSpec, dict | None]:
    where = f"stages.{name}"
    d = _take(doc, where, {
        "kind": _REQUIRED, "in": _REQUIRED, "out": _REQUIRED,
        "channels": [16, 32], "spatial_attention": None,
        "embed_dim": 16, "max_tokens": 8, "cond_dim": 32, "groups": 4, "heads": 2,
        "cond_mode": "repeat", "crop": None, "aug": {}, "sampler": {}, "train": None,
    })
    try:
        kind = StageKind(d["kind"])
    except ValueError as exc:
        raise ConfigError(f"{where}: unknown stage kind {d['kind']!r}") from exc
    fin, hin, win = (int(x) for x in d["in"])
    fout, hout, wout = (int(x) for x in d["out"])
    channels = tuple(int(c) for c in d["channels"])
    sa = d["spatial_attention"]
    if sa is None:
        sa = [kind == StageKind.BASE] * len(channels)
    mixer = TemporalMixer.ATTENTION if kind == StageKind.BASE else TemporalMixer.CONV
    dcfg = DenoiserConfig(
        stage_kind=kind, frames=fout, height=hout, width=wout,
        channels=channels, spatial_attention=tuple(bool(x) for x in sa),
        temporal_mixer=(mixer,) * len(channels),
        cond_channels=0 if kind == StageKind.BASE else 3,
        embed_dim=int(d["embed_dim"]), max_tokens=int(d["max_tokens"]),
        cond_dim=int(d["cond_dim"]), groups=int(d["groups"]), heads=int(d["heads"]),
    )
    aug_d = _take(d["aug"], f"{where}.aug", {"train_snr_range": [0.5, 20.0], "sample_snr": 3.0})
    spec = StageSpec(
        name=name, kind=kind,
        in_frames=fin, in_h=hin, in_w=win,
        out_frames=fout, out_h=hout, out_w=wout,
        denoiser=dcfg, sampler=_sampler(d["sampler"], f"{where}.sampler"),
        aug=AugmentationPolicy(
            train_snr_range=(float(aug_d["train_snr_range"][0]), float(aug_d["train_snr_range"][1])),
            sample_snr=float(aug_d["sample_snr"]),
        ),
        cond_mode=d["cond_mode"], crop=None if d["crop"] is None else int(d["crop"]),
    )
    return spec, d["train"]


def parse_run_config(doc: dict) -> RunConfig:
    top = _take(doc, "config", {
        "dataset": {}, "stages": _REQUIRED, "pipeline": _REQUIRED,
        "train": {}, "sample": {}, "distill": {},
    })
    ds = _take(top["dataset"], "dataset",
               {"n": 144, "frames": 8, "size": 16, "seed": 7, "dir": "data"})
    dataset = DatasetSection(n=int(ds["n"]), frames=int(ds["frames"]), size=int(ds["size"]),
                             seed=int(ds["seed"]), dir=str(ds["dir"]))
    train = _train(top["train"], "train")
    stages: dict[str, StageSpec] = {}
    stage_train: dict[str, TrainConfig] = {}
    for name, sdoc in top["stages"].items():
        spec, train_over = _stage(name, sdoc)
        stages[name] = spec
        stage_train[name] = _train(train_over or {}, f"stages.{name}.train", base=train)
    pl = _take(top["pipeline"], "pipeline", {"stages": _REQUIRED})
    try:
        pipeline = PipelineSpec(stages=tuple(stages[n] for n in pl["stages"]))
    except KeyError as exc:
        raise ConfigError(f"pipeline references undefined stage {exc.args[0]!r}") from exc
    sm = _take(top["sample"], "sample", {"seed": 0, "checkpoint_dir": "checkpoints"})
    di = _take(top["distill"], "distill", {
        "guidance_w": 4.0, "start_steps": 64, "target_steps": 8,
        "steps_per_iter": 300, "lr": 0.001, "batch_size": 8, "seed": 0,
    })
    return RunConfig(
        dataset=dataset, stages=stages, pipeline=pipeline, train=train,
        stage_train=stage_train,
        sample=SampleSection(seed=int(sm["seed"]), checkpoint_dir=str(sm["checkpoint_dir"])),
        distill=DistillConfig(
            guidance_w=float(di["guidance_w"]), start_steps=int(di["start_steps"]),
            target_steps=int(di["target_steps"]), steps_per_iter=int(di["steps_per_iter"]),
            lr=float(di["lr"]), batch_size=int(di["batch_size"]), seed=int(di["seed"]),
        ),
    )


def load_run_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(doc)
