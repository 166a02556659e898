"""Command-line front end.

Subcommands: gen-data (render a corpus), train (one stage), sample (run the
pipeline on a prompt), distill (compress a trained stage to few steps), and
check (fast invariant suite). Every command is deterministic given its flags
and the seeds in the config; all randomness flows from named seeds. Frames
export as binary PPM (P6).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .cascade import run_pipeline
from .config import ConfigError, load_run_config
from .dataset import gen_dataset, load_dataset
from .denoiser import Denoiser
from .distill import DistillConfig, Student, distill_stage
from .sampling import SamplerConfig, SamplerKind
from .tensor import Tensor, TensorError
from .training import train_stage


def write_ppm(path: Path | str, frame: np.ndarray) -> None:
    """One video frame ([-1,1] floats, H x W x 3) as a binary P6 file."""
    h, w, _ = frame.shape
    pixels = np.clip((frame + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _cmd_gen_data(args) -> int:
    manifest = gen_dataset(args.n, args.frames, args.size, args.size, args.seed, args.out)
    print(f"wrote {manifest.count} clips ({manifest.frames}x{manifest.height}"
          f"x{manifest.width}) to {args.out}")
    return 0


def _load_stage_model(run, name: str, ckpt_dir: Path):
    stage = run.stages[name]
    path = ckpt_dir / f"{name}.ivck"
    if not path.exists():
        raise TensorError(f"missing checkpoint for stage {name!r}: {path}")
    params, meta = ckpt.load_model(path, stage.denoiser)
    model = Denoiser(config=stage.denoiser, params=params)
    distilled = meta.get("distilled")
    if distilled:
        return Student(denoiser=model, guidance_w=distilled["w"], steps=distilled["steps"])
    return model


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.stage not in run.stages:
        raise ConfigError(f"stage {args.stage!r} not in config "
                          f"(have {sorted(run.stages)})")
    stage = run.stages[args.stage]
    cfg = run.stage_train[args.stage]
    manifest, clips = load_dataset(run.dataset.dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state, _ = ckpt.load_train_state(args.resume, stage.denoiser)
        print(f"resuming {args.stage} from step {state.step}")
    log_path = out / f"{args.stage}.evals.jsonl"
    state, records = train_stage(stage, manifest, clips, cfg,
                                 log_path=log_path, state=state)
    ckpt.save_train_state(out / f"{args.stage}.state.ivck", state, stage.denoiser)
    ckpt.save_model(out / f"{args.stage}.ivck", state.params, stage.denoiser,
                    step=state.step)
    last = records[-1] if records else None
    print(f"trained {args.stage} to step {state.step}"
          + (f" (loss {last.loss:.4f}, psnr {last.psnr:.2f} dB)" if last else ""))
    return 0


def _cmd_sample(args) -> int:
    run = load_run_config(args.config)
    ckpt_dir = Path(args.checkpoints or run.sample.checkpoint_dir)
    models = {s.name: _load_stage_model(run, s.name, ckpt_dir) for s in run.pipeline.stages}
    pipe = run.pipeline
    for stage in pipe.stages:
        model = models[stage.name]
        if isinstance(model, Student) and stage.sampler.kind != SamplerKind.DISTILLED:
            # A distilled checkpoint samples with the distilled sampler at its
            # own step budget regardless of the configured teacher sampler.
            new_sampler = dataclasses.replace(
                stage.sampler, kind=SamplerKind.DISTILLED, steps=model.steps)
            pipe = dataclasses.replace(pipe, stages=tuple(
                dataclasses.replace(s, sampler=new_sampler) if s.name == stage.name else s
                for s in pipe.stages))
    seed = run.sample.seed if args.seed is None else args.seed
    final, per_stage = run_pipeline(pipe, models, args.prompt, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset import save_clip

    save_clip(out / "final.ivc", final)
    for f in range(final.shape[0]):
        write_ppm(out / f"frame_{f:03d}.ppm", final.data[f])
    if args.stage_dumps:
        for stage, video in zip(pipe.stages, per_stage):
            save_clip(out / f"stage_{stage.name}.ivc", video)
    print(f"sampled {final.shape[0]} frames at {final.shape[1]}x{final.shape[2]} "
          f"into {out}")
    return 0


def _cmd_distill(args) -> int:
    run = load_run_config(args.config)
    if args.stage not in run.stages:
        raise ConfigError(f"stage {args.stage!r} not in config")
    stage = run.stages[args.stage]
    dcfg = run.distill
    if args.target_steps is not None:
        dcfg = dataclasses.replace(dcfg, target_steps=args.target_steps)
    ckpt_dir = Path(args.checkpoints or run.sample.checkpoint_dir)
    params, _ = ckpt.load_model(ckpt_dir / f"{args.stage}.ivck", stage.denoiser)
    teacher = Denoiser(config=stage.denoiser, params=params)
    manifest, clips = load_dataset(run.dataset.dir)

    from .training import psnr as psnr_fn
    from .cascade import run_pipeline as _  # noqa: F401

    def fidelity(student_params, steps):
        # Teacher-vs-student reconstruction proxy on eval batches.
        from .distill import StageDistillProblem

        problem = StageDistillProblem(teacher, stage, manifest, clips)
        rng = np.random.default_rng(1234)
        ctx = problem.draw_context(4, rng)
        z, t = problem.sample_z(ctx, rng)
        v_teacher, _ = problem.teacher_pair(ctx, z, t)
        v_student = problem.predict(student_params, ctx, z, t)
        return psnr_fn(Tensor(np.clip(v_student, -1, 1), _trusted=True),
                       Tensor(np.clip(v_teacher, -1, 1), _trusted=True))

    student, report = distill_stage(teacher, stage, manifest, clips, dcfg,
                                    fidelity=fidelity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_model(out / f"{args.stage}.ivck", student.denoiser.params, stage.denoiser,
                    distilled={"w": student.guidance_w, "steps": student.steps})
    halvings = sum(1 for r in report if r["phase"] == "halve")
    print(f"distilled {args.stage}: {dcfg.start_steps} -> {student.steps} steps "
          f"({halvings} halvings)")
    for rec in report:
        print(f"  {rec['phase']:<9} steps={rec['steps']:<4} "
              f"fidelity={rec['metric']:.2f} dB")
    return 0


def _cmd_check(args) -> int:
    from .selfcheck import run_checks

    results = run_checks()
    width = max(len(name) for name, _ in results)
    failed = 0
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vidcascade",
        description="Desk-scale cascaded text-to-video diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic video corpus")
    p.add_argument("--n", type=int, required=True, help="number of clips")
    p.add_argument("--frames", type=int, default=8, help="frames per clip")
    p.add_argument("--size", type=int, default=16, help="square clip resolution")
    p.add_argument("--seed", type=int, default=7, help="corpus seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one cascade stage")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--stage", required=True, help="stage name from the config")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sample", help="generate a video from a prompt")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config sample seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoints", help="override config checkpoint directory")
    p.add_argument("--stage-dumps", action="store_true",
                   help="also write each intermediate stage output")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("distill", help="progressively distill a trained stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True)
    p.add_argument("--target-steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints", help="teacher checkpoint directory")
    p.set_defaults(fn=_cmd_distill)

    p = sub.add_parser("check", help="run the fast invariant suite")
    p.set_defaults(fn=_cmd_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (TensorError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run `vidcascade {args.command} --help` for usage", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
