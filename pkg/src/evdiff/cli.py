"""Command-line pipeline: gen-data, train, sample, align, evaluate.

Every command accepts --config/--seed/--out, prints the resolved
effective configuration before doing work, exits 0 on success and
nonzero with a machine-readable JSON error on stderr otherwise.  The
E_MOTION_LOG environment variable selects the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import align as align_mod
from .config import RunConfig, load_config
from .data import (
    copy_last_frame_baseline,
    evaluate_future_predictions,
    generate_dataset,
    load_streams,
    make_eval_clip,
)
from .diffusion import (
    Adam,
    WeightAverage,
    accumulate_training_grads,
    make_schedule,
    sample_training_windows,
)
from .errors import DataError, EvdiffError, ValidationError
from .metrics import RandomFeatureEmbedder
from .net import ArchDescriptor, ConvDenoiser, load_checkpoint, save_checkpoint
from .pngio import voxel_frame_to_rgb, write_png
from .rng import SeededRandomSource
from .sampler import SamplerConfig, default_switch_step, sample
from .voxel import read_vox1, write_vox1, VoxelSequence

log = logging.getLogger("evdiff")


def _setup_logging() -> None:
    level = os.environ.get("E_MOTION_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(Path(args.config).read_text())
    else:
        cfg = RunConfig()
        cfg.validate()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.sampler.seed = args.seed
        cfg.align.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    print(cfg.to_json())
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    train_names = generate_dataset(
        cfg.suite, out / "scenes", cfg.repr.interval_us, workers=args.workers, which="train"
    )
    eval_names = generate_dataset(
        cfg.suite, out / "eval_scenes", cfg.repr.interval_us, workers=args.workers, which="eval"
    )
    log.info("wrote %d train and %d eval scenes under %s", len(train_names), len(eval_names), out)
    return 0


def _build_model(cfg: RunConfig) -> tuple[ConvDenoiser, object]:
    schedule = make_schedule(
        cfg.schedule.steps, cfg.schedule.sigma_min, cfg.schedule.sigma_max, cfg.schedule.sigma_data
    )
    desc = ArchDescriptor(
        frames=cfg.arch.frames,
        prompt_frames=cfg.arch.prompt_frames,
        bins=cfg.repr.bins,
        hidden=cfg.arch.hidden,
        kernel=cfg.arch.kernel,
        per_frame=cfg.arch.per_frame,
        init_seed=cfg.arch.init_seed,
    )
    return ConvDenoiser(desc, schedule.sigma_data), schedule


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = load_streams(args.data or out / "scenes")
    model, schedule = _build_model(cfg)
    optimizer = Adam(lr=cfg.train.lr)
    rng = SeededRandomSource(cfg.train.seed)
    log_path = out / "train_log.jsonl"
    accum = max(1, cfg.train.accumulation)
    decay_span = (1.0 - cfg.train.lr_final_fraction) / cfg.train.iterations
    averager = (
        WeightAverage(model.param_vector(), cfg.train.ema_decay)
        if cfg.train.ema_decay > 0
        else None
    )
    with open(log_path, "w") as fh:
        for step in range(cfg.train.iterations):
            optimizer.lr = cfg.train.lr * (1.0 - decay_span * step)
            model.zero_grads()
            losses = []
            for micro in range(accum):
                prompt, target = sample_training_windows(
                    streams,
                    cfg.repr.bins,
                    cfg.arch.frames,
                    cfg.arch.prompt_frames,
                    rng,
                    step * accum + micro,
                    cfg.train.batch,
                    vary_prompt_count=cfg.train.vary_prompt_count,
                )
                losses.append(
                    accumulate_training_grads(
                        model, prompt, target, schedule, rng,
                        step * accum + micro, grad_scale=1.0 / accum,
                    )
                )
            optimizer.step(model.params, model.grads, model.trainable)
            if averager is not None:
                averager.update(model.param_vector())
            loss = float(np.mean(losses))
            if step % cfg.train.log_every == 0 or step == cfg.train.iterations - 1:
                fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
                fh.flush()
                log.info("step %d loss %.6f", step, loss)
    if averager is not None:
        model.load_vector(averager.vector)  # averaged weights are what ships
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, model, schedule, cfg.train.iterations, cfg.train.seed)
    log.info("checkpoint written to %s", ckpt_path)
    return 0


def _cmd_sample(args) -> int:
    model, schedule, _, _ = load_checkpoint(args.ckpt)
    prompt_seq = read_vox1(args.prompt)
    s = args.prompt_frames if args.prompt_frames is not None else prompt_seq.frames
    if s > prompt_seq.frames:
        raise DataError(f"prompt file has {prompt_seq.frames} frames, need {s}")
    total = args.total_frames or model.desc.frames
    if total != model.desc.frames:
        raise ValidationError(
            "total-frames", f"checkpoint denoises {model.desc.frames}-frame clips"
        )
    if args.unguided:
        switch = schedule.steps + 1
    elif args.switch_step is not None:
        switch = args.switch_step
    else:
        switch = default_switch_step(schedule.steps)
    cfg = SamplerConfig(
        total_frames=total,
        prompt_frames=s,
        switch_step=switch,
        seed=args.seed or 0,
        renoise=args.renoise,
    )
    values = sample(prompt_seq.values[:s], model, schedule, cfg)
    out_path = Path(args.out or "sample.vox1")
    write_vox1(VoxelSequence(values, 0, prompt_seq.window_us, None), out_path)
    log.info("sample written to %s", out_path)
    if args.render:
        render_dir = Path(args.render)
        render_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(values):
            write_png(render_dir / f"frame_{i:03d}.png", voxel_frame_to_rgb(frame))
        log.info("rendered %d frames to %s", len(values), render_dir)
    return 0


def _cmd_align(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, schedule, train_step, seed = load_checkpoint(args.ckpt)
    streams = load_streams(args.data or out / "scenes")
    a = cfg.align
    acfg = align_mod.AlignConfig(
        pool_size=a.pool_size,
        workers=args.workers,
        iters_per_refresh=a.iters_per_refresh,
        refreshes=a.refreshes,
        batch=a.batch,
        samples_per_prompt=a.samples_per_prompt,
        kappa=a.kappa,
        kl_weight=a.kl_weight,
        beta=a.beta,
        distance_weight=a.distance_weight,
        kl_ceiling=a.kl_ceiling,
        seed=a.seed,
        deterministic=args.deterministic,
        timeout_s=a.timeout_s,
    )
    embedder = RandomFeatureEmbedder(bins=cfg.repr.bins)
    # Fixed ground-truth anchor set for the distance term of the reward.
    reference_clips = []
    for stream in streams[: min(16, len(streams))]:
        clip = make_eval_clip(stream, cfg.repr, cfg.arch.frames, cfg.arch.prompt_frames)
        reference_clips.append(clip.clean_clip)

    def make_trajectory(ref_model, stamp, worker, index):
        # M consecutive indices share one prompt, forming paired samples.
        prompt_id = index // max(1, a.samples_per_prompt)
        mix = (stamp * 1_000_003 + worker * 7919 + prompt_id) & 0xFFFFFFFF
        gen = SeededRandomSource(a.seed, 12345).generator(mix)
        stream = streams[int(gen.integers(0, len(streams)))]
        clip = make_eval_clip(stream, cfg.repr, cfg.arch.frames, cfg.arch.prompt_frames)
        gen = SeededRandomSource(a.seed, 54321).generator(
            (mix << 8) ^ (index % max(1, a.samples_per_prompt))
        )
        scfg = SamplerConfig(
            total_frames=cfg.arch.frames,
            prompt_frames=cfg.arch.prompt_frames,
            switch_step=default_switch_step(schedule.steps),
            seed=int(gen.integers(0, 2**31)),
            renoise=True,
            record=True,
        )
        _, traj = sample(clip.prompt, ref_model, schedule, scfg)
        traj.stamp = stamp
        traj.reward = align_mod.reward(
            traj.output, clip.clean_clip, reference_clips, embedder,
            distance_weight=a.distance_weight, mse_weight=a.mse_weight,
        )
        return traj

    ref_model = model.copy()
    optimizer = Adam(lr=a.lr)
    with open(out / "align_log.jsonl", "w") as fh:
        align_mod.run_alignment(model, ref_model, make_trajectory, optimizer, acfg, log_fh=fh)
    save_checkpoint(out / "model_aligned.ckpt", model, schedule, train_step, seed)
    log.info("aligned checkpoint written to %s", out / "model_aligned.ckpt")
    return 0


def _cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    names = sorted(p.name for p in pred_dir.glob("*.vox1"))
    if not names:
        raise DataError(f"no .vox1 files under {pred_dir}")
    preds, truths = [], []
    for name in names:
        truth_path = truth_dir / name
        if not truth_path.exists():
            raise DataError(f"missing ground truth for {name}")
        preds.append(read_vox1(pred_dir / name).values)
        truths.append(read_vox1(truth_path).values)
    bins = preds[0].shape[1]
    report = evaluate_future_predictions(preds, truths, bins=bins, workers=args.workers)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
        log.info("report written to %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdiff",
        description="Event-sequence diffusion for future-motion forecasting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory or file")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("gen-data", help="generate the scene suite dataset")
    common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="pretrain the denoiser")
    common(p)
    p.add_argument("--data", help="dataset directory (default <out>/scenes)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="run the guided sampler")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help="VOX1 prompt file")
    p.add_argument("--prompt-frames", type=int, default=None)
    p.add_argument("--total-frames", type=int, default=None)
    p.add_argument("--switch-step", type=int, default=None)
    p.add_argument("--renoise", action="store_true")
    p.add_argument("--unguided", action="store_true")
    p.add_argument("--render", help="directory for rendered PNG frames")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("align", help="reward-align a pretrained checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default <out>/scenes)")
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True, help="directory of predicted .vox1 files")
    p.add_argument("--truth", required=True, help="directory of ground-truth .vox1 files")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvdiffError as exc:
        sys.stderr.write(json.dumps(exc.payload()) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
