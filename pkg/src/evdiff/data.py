"""Dataset generation, loading, and the prediction evaluation pipeline."""

from __future__ import annotations

import json
import multiprocessing
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ReprConfig, RunConfig, SuiteConfig
from .errors import DataError, ValidationError
from .events import EventStream, read_evt1, write_evt1
from .metrics import (
    MetricReport,
    RandomFeatureEmbedder,
    feature_video_distance,
    mask_from_sequence,
    miou_aiou,
    mse,
    ssim,
)
from .sampler import SamplerConfig, sample
from .sim import emit_events, moving_square_suite, object_mask_times, write_masks
from .voxel import to_unit_images, windowize


def _scene_filenames(index: int) -> tuple[str, str, str]:
    stem = f"scene_{index:04d}"
    return f"{stem}.json", f"{stem}.evt1", f"{stem}.masks.npz"


def _generate_one(args) -> str:
    spec_json, out_dir, index, threshold, dt_us, interval_us = args
    from .sim import SceneSpec  # re-import for worker processes

    spec = SceneSpec.from_json(spec_json)
    name_json, name_evt, name_masks = _scene_filenames(index)
    out = Path(out_dir)
    (out / name_json).write_text(spec_json)
    stream = emit_events(spec, threshold=threshold, dt_us=dt_us)
    write_evt1(stream, out / name_evt)
    n_windows = spec.duration_us // interval_us
    mid_times = (np.arange(n_windows, dtype=np.int64) * interval_us) + interval_us // 2
    write_masks(spec, mid_times, out / name_masks)
    return name_evt


def generate_dataset(
    suite: SuiteConfig,
    out_dir: str | os.PathLike,
    interval_us: int = 20_000,
    workers: int = 1,
    which: str = "train",
) -> list[str]:
    """Write EVT1 + scene JSON + ground-truth masks for every suite scene."""
    if suite.name != "moving-square":
        raise ValidationError("suite.name", f"unknown suite '{suite.name}'")
    count = suite.count if which == "train" else suite.eval_count
    seed = suite.seed if which == "train" else suite.eval_seed
    scenes = moving_square_suite(
        count, seed, width=suite.width, height=suite.height, duration_us=suite.duration_us
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [
        (scene.to_json(), str(out), i, suite.threshold, suite.dt_us, interval_us)
        for i, scene in enumerate(scenes)
    ]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            names = pool.map(_generate_one, tasks)
    else:
        names = [_generate_one(t) for t in tasks]
    manifest = {
        "suite": suite.name,
        "which": which,
        "count": count,
        "seed": seed,
        "interval_us": interval_us,
        "scenes": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return names


def load_streams(dataset_dir: str | os.PathLike) -> list[EventStream]:
    path = Path(dataset_dir)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    return [read_evt1(path / name) for name in manifest["scenes"]]


def load_mask_files(dataset_dir: str | os.PathLike) -> list[Path]:
    path = Path(dataset_dir)
    manifest = json.loads((path / "manifest.json").read_text())
    return [path / name.replace(".evt1", ".masks.npz") for name in manifest["scenes"]]


@dataclass
class EvalClip:
    """One held-out scene prepared for next-window prediction."""

    prompt: np.ndarray  # (s, B, H, W) normalized prompt frames
    clean_clip: np.ndarray  # (F, B, H, W) full clip on the prompt's scale
    future_truth: np.ndarray  # (F - s, B, H, W) frames the model must predict


def make_eval_clip(
    stream: EventStream,
    repr_cfg: ReprConfig,
    total_frames: int,
    prompt_frames: int,
) -> EvalClip:
    """Leading clip of the stream, scaled by the prompt frames' peak."""
    seq = windowize(
        stream, repr_cfg.interval_us, repr_cfg.bins, t_start=0, n_frames=total_frames
    )
    values = seq.values
    peak = float(np.max(np.abs(values[:prompt_frames])))
    if peak > 0:
        values = values / np.float32(peak)
    return EvalClip(
        prompt=values[:prompt_frames].copy(),
        clean_clip=values,
        future_truth=values[prompt_frames:].copy(),
    )


def copy_last_frame_baseline(prompt: np.ndarray, n_future: int) -> np.ndarray:
    """Repeat the last prompt frame: the no-motion reference predictor."""
    return np.repeat(prompt[-1][None], n_future, axis=0)


def sparse_decode(values: np.ndarray, floor: float = 0.1) -> np.ndarray:
    """Zero out sub-threshold amplitudes of a predicted event field.

    Event voxels are exactly zero wherever no events occurred, so
    amplitudes below ``floor`` times the field's own peak are treated as
    sampler noise, matching the activity-mask threshold convention.
    """
    if floor <= 0:
        return values
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return values
    out = values.copy()
    out[np.abs(out) < floor * peak] = 0.0
    return out


def predict_future(
    model,
    schedule,
    prompt: np.ndarray,
    total_frames: int,
    switch_step: int,
    seed: int,
    renoise: bool = False,
    n_average: int = 1,
    decode_floor: float = 0.1,
) -> np.ndarray:
    """Point prediction of the full clip from the given prompt frames.

    Averages ``n_average`` chains (posterior-mean estimate) and applies
    the sparse event decode; callers slice off the frames they score.
    ``n_average=1, decode_floor=0`` gives the raw single-chain sample.
    """
    outs = []
    for k in range(n_average):
        cfg = SamplerConfig(
            total_frames=total_frames,
            prompt_frames=prompt.shape[0],
            switch_step=switch_step,
            seed=seed + 77_777 * k,
            renoise=renoise,
        )
        outs.append(sample(prompt, model, schedule, cfg))
    mean = np.mean(outs, axis=0, dtype=np.float64).astype(np.float32)
    return sparse_decode(mean, decode_floor)


def mask_times_for_future(
    interval_us: int, prompt_frames: int, n_future: int
) -> np.ndarray:
    """Window midpoints of the predicted frames."""
    idx = np.arange(prompt_frames, prompt_frames + n_future, dtype=np.int64)
    return idx * interval_us + interval_us // 2


def evaluate_future_predictions(
    predictions: list[np.ndarray],
    truths: list[np.ndarray],
    gt_masks: list[np.ndarray] | None = None,
    bins: int = 3,
    workers: int = 1,
) -> MetricReport:
    """Aggregate MSE / SSIM / feature distance / IoU over held-out scenes.

    MSE and SSIM run on [0, 1] images of the predicted frames; the
    feature distance compares the generated and true clip sets; IoU uses
    thresholded activity masks against the provided ground truth (or
    thresholded truth clips when simulator masks are absent).  Scenes
    are independent, so they may fan out over worker threads.
    """
    if len(predictions) != len(truths) or not predictions:
        raise DataError("predictions and truths must pair up and be nonempty")

    def score_one(i: int):
        pred, truth = predictions[i], truths[i]
        img_p = to_unit_images(pred)
        img_t = to_unit_images(truth)
        pred_masks = mask_from_sequence(pred)
        truth_masks = gt_masks[i] if gt_masks is not None else mask_from_sequence(truth)
        pairs = list(zip(pred_masks, truth_masks))
        return {"index": i, "mse": mse(img_p, img_t), "ssim": ssim(img_p, img_t)}, pairs

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score_one, range(len(predictions))))
    else:
        scored = [score_one(i) for i in range(len(predictions))]
    per_sequence = [rec for rec, _ in scored]
    mask_pairs = [pair for _, pairs in scored for pair in pairs]
    embedder = RandomFeatureEmbedder(bins=bins)
    fvd = feature_video_distance(predictions, truths, embedder)
    miou, aiou = miou_aiou(mask_pairs)
    return MetricReport(
        mse=float(np.mean([r["mse"] for r in per_sequence])),
        ssim=float(np.mean([r["ssim"] for r in per_sequence])),
        feature_video_distance=fvd,
        miou=miou,
        aiou=aiou,
        per_sequence=per_sequence,
    )
