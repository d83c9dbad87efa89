"""Reward alignment of the stochastic reverse chain.

The recorded chain is treated as a Markov policy whose per-step density
is a Gaussian centered on the denoiser's clean estimate, following the
step-noise scale of the ancestral sampler.  Completed samples are
scored, rewards are standardized per update batch (plus a standard
deviation bonus that counters the pull toward static, low-activity
output), and the policy gradient maximizes the clipped importance-
weighted reward under a KL leash to the frozen reference policy.

Trajectory generation and optimization follow a producer/consumer
contract: any number of producers fill a stamped pool under the frozen
reference weights; the single optimizer consumer draws batches, and a
reference refresh atomically invalidates the pool by bumping its stamp.
"""

from __future__ import annotations

import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    NumericalError,
    ParameterError,
    PoolTimeoutError,
    StalenessError,
)
from .metrics import RandomFeatureEmbedder, feature_video_distance, ssim
from .rng import STREAM_ALIGN, SeededRandomSource
from .sampler import Trajectory
from .voxel import to_unit_images

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def step_log_density(x_next: np.ndarray, mu: np.ndarray, sigma_step: float) -> float:
    """Log density of x_next under N(mu, sigma_step^2 I), summed over elements."""
    if sigma_step <= 0:
        raise ParameterError("sigma_step must be positive")
    diff = (np.asarray(x_next, dtype=np.float64) - np.asarray(mu, dtype=np.float64)).ravel()
    n = diff.size
    return float(-0.5 * np.dot(diff, diff) / (sigma_step**2) - n * (math.log(sigma_step) + LOG_SQRT_2PI))


def _current_means(model, traj: Trajectory, steps: np.ndarray) -> list:
    """Denoiser outputs under the current policy at the stored latents.

    Evaluated one step at a time, exactly like the recording sampler did:
    BLAS rounding depends on batch shape, and the ratio-identity and
    zero-KL guarantees at theta == theta' need bit-equal recomputation.
    """
    return [
        model.predict_clean(traj.latents[i], float(traj.sigma_t[i]), traj.prompt)
        for i in steps
    ]


def importance_term(
    traj: Trajectory, model, kappa: float = 0.2, pool_stamp: int | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Per-trajectory ratio of current to reference policy density.

    Per-step density ratios are clipped to [1 - kappa, 1 + kappa] before
    being multiplied together.  Returns (ratio, clipped per-step ratios,
    boolean mask of steps inside the clip region).
    """
    if pool_stamp is not None and traj.stamp != pool_stamp:
        raise StalenessError(
            f"trajectory stamped {traj.stamp}, pool expects {pool_stamp}"
        )
    scored = traj.scored_steps
    mu_cur = _current_means(model, traj, scored)
    log_diff = np.empty(len(scored))
    for k, i in enumerate(scored):
        lp_cur = step_log_density(traj.next_latents[i], mu_cur[k], traj.sigma_step[i])
        lp_ref = step_log_density(traj.next_latents[i], traj.ref_means[i], traj.sigma_step[i])
        log_diff[k] = lp_cur - lp_ref
    raw = np.exp(np.minimum(log_diff, 50.0))
    clipped = np.clip(raw, 1.0 - kappa, 1.0 + kappa)
    active = (raw > 1.0 - kappa) & (raw < 1.0 + kappa)
    return float(np.prod(clipped)), clipped, active


def kl_regularizer(traj: Trajectory, model) -> float:
    """Sum over scored steps of |mu - mu_ref|^2 / (2 sigma_step^2):
    the closed-form divergence between the equal-variance step Gaussians."""
    scored = traj.scored_steps
    mu_cur = _current_means(model, traj, scored)
    total = 0.0
    for k, i in enumerate(scored):
        d = (mu_cur[k].astype(np.float64) - traj.ref_means[i].astype(np.float64)).ravel()
        total += float(np.dot(d, d)) / (2.0 * traj.sigma_step[i] ** 2)
    return total


@dataclass
class RewardRecord:
    ssim_term: float
    distance_term: float  # negated feature distance: larger is better
    raw: float
    sample_std: float
    standardized: float = 0.0
    adjusted: float = 0.0


def reward(
    sample_values: np.ndarray,
    target_values: np.ndarray,
    batch_references: list,
    embedder: RandomFeatureEmbedder,
    distance_weight: float = 2.0,
    mse_weight: float = 0.0,
) -> RewardRecord:
    """Score one generated clip against its ground-truth continuation.

    raw = SSIM(sample, target) + weight * (-D_feat(sample, references)),
    optionally minus a weighted pixel MSE term (the mixed-metric reward;
    off by default, it measurably underperforms the perceptual pair).
    The feature distance enters negated so that larger raw is better.
    """
    if sample_values.shape != target_values.shape:
        raise DataError(
            f"sample shape {sample_values.shape} != target {target_values.shape}"
        )
    img_s = to_unit_images(sample_values)
    img_t = to_unit_images(target_values)
    ssim_term = ssim(img_s, img_t)
    dist = feature_video_distance([sample_values], batch_references, embedder)
    raw = ssim_term + distance_weight * (-dist)
    if mse_weight != 0.0:
        raw -= mse_weight * float(np.mean((img_s - img_t) ** 2))
    return RewardRecord(
        ssim_term=ssim_term,
        distance_term=-dist,
        raw=raw,
        sample_std=float(np.std(sample_values)),
    )


def normalize_rewards(records: list[RewardRecord], beta: float = 30.0) -> list[RewardRecord]:
    """Batch-standardize raw scores, then add the activity bonus
    beta * (std(x) - std_min).  Degenerate batches standardize to zero."""
    if len(records) < 2:
        for r in records:
            r.standardized = 0.0
    else:
        raws = np.array([r.raw for r in records], dtype=np.float64)
        spread = float(raws.std())  # population
        if spread == 0.0:
            for r in records:
                r.standardized = 0.0
        else:
            mean = float(raws.mean())
            for r in records:
                r.standardized = (r.raw - mean) / spread
            scores = np.array([r.standardized for r in records])
            if abs(scores.mean()) >= 1e-9 or abs(scores.var() - 1.0) >= 1e-9:
                raise NumericalError(
                    f"reward standardization drifted: mean {scores.mean():.3g}, "
                    f"var {scores.var():.6g}"
                )
    std_min = min(r.sample_std for r in records)
    for r in records:
        r.adjusted = r.standardized + beta * (r.sample_std - std_min)
    return records


@dataclass
class AlignConfig:
    pool_size: int = 64
    workers: int = 1
    iters_per_refresh: int = 100  # optimizer steps between reference refreshes
    refreshes: int = 10
    batch: int = 64
    samples_per_prompt: int = 2  # M paired samples per prompt
    kappa: float = 0.2
    kl_weight: float = 0.1
    beta: float = 30.0
    distance_weight: float = 2.0
    kl_ceiling: float = 1e6
    seed: int = 0
    deterministic: bool = True
    timeout_s: float = 60.0

    def validate(self) -> None:
        if self.batch > self.pool_size:
            raise ParameterError("batch cannot exceed pool_size")
        if self.workers < 1 or self.pool_size < 2:
            raise ParameterError("need at least one worker and a pool of two")
        if not 0 < self.kappa < 1:
            raise ParameterError("kappa must lie in (0, 1)")


class TrajectoryPool:
    """Bounded, stamped trajectory store.

    Producers push trajectories generated under the reference policy of
    the current stamp; pushes with a stale stamp are dropped.  The
    consumer samples batches without removing items (the pool is reused
    across the iterations of one refresh period).  ``invalidate``
    atomically clears the pool and bumps the stamp.
    """

    def __init__(self, capacity: int, timeout_s: float = 60.0):
        self.capacity = capacity
        self.timeout_s = timeout_s
        self._items: deque = deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        self.stamp = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def put(self, traj: Trajectory, block: bool = True) -> bool:
        with self._lock:
            if traj.stamp != self.stamp:
                return False  # stale producer output, dropped
            deadline = time.monotonic() + self.timeout_s
            while len(self._items) >= self.capacity:
                if not block:
                    return False
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._not_full.wait(timeout=remaining):
                    return False
                if traj.stamp != self.stamp:
                    return False
            self._items.append(traj)
            self._not_empty.notify_all()
            return True

    def draw(self, n: int, gen: np.random.Generator) -> list[Trajectory]:
        with self._lock:
            deadline = time.monotonic() + self.timeout_s
            while len(self._items) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._not_empty.wait(timeout=remaining):
                    raise PoolTimeoutError(
                        f"pool has {len(self._items)}/{n} trajectories after "
                        f"{self.timeout_s:.0f}s"
                    )
            idx = gen.choice(len(self._items), size=n, replace=False)
            return [self._items[i] for i in idx]

    def invalidate(self) -> int:
        """Clear everything and advance the stamp; returns the new stamp."""
        with self._lock:
            self._items.clear()
            self.stamp += 1
            self._not_full.notify_all()
            return self.stamp


def _policy_gradient_update(
    batch: list[Trajectory], model, ref_model, optimizer, cfg: AlignConfig
) -> dict:
    """One optimizer step on a drawn batch; returns step metrics."""
    n = len(batch)
    records = normalize_rewards([t.reward for t in batch], beta=cfg.beta)
    ratios = np.empty(n)
    kls = np.empty(n)
    actives = []
    for b, traj in enumerate(batch):
        r, _, active = importance_term(traj, model, cfg.kappa)
        ratios[b] = r
        kls[b] = kl_regularizer(traj, model)
        actives.append(active)
    kl_mean = float(kls.mean())

    model.zero_grads()
    for b, traj in enumerate(batch):
        scored = traj.scored_steps
        score = records[b].adjusted
        for k, i in enumerate(scored):
            x = traj.latents[i][None]
            sigma = float(traj.sigma_t[i])
            prompt = traj.prompt[None]
            mu = model.predict_clean(x, sigma, prompt)[0]
            var = traj.sigma_step[i] ** 2
            upstream = np.zeros_like(mu, dtype=np.float64)
            if actives[b][k]:
                upstream -= (score * ratios[b] / n) * (
                    traj.next_latents[i].astype(np.float64) - mu.astype(np.float64)
                ) / var
            upstream += (cfg.kl_weight / n) * (
                mu.astype(np.float64) - traj.ref_means[i].astype(np.float64)
            ) / var
            model.backward(upstream[None].astype(mu.dtype))
    optimizer.step(model.params, model.grads, model.trainable)

    return {
        "mean_raw_reward": float(np.mean([r.raw for r in records])),
        "mean_standardized": float(np.mean([r.standardized for r in records])),
        "mean_adjusted": float(np.mean([r.adjusted for r in records])),
        "kl": kl_mean,
        "ratio_mean": float(ratios.mean()),
        "ratio_min": float(ratios.min()),
        "ratio_max": float(ratios.max()),
    }


def align_epoch(
    pool: TrajectoryPool, model, ref_model, optimizer, cfg: AlignConfig, epoch: int
) -> dict:
    """Inner optimization loop for one refresh period.

    Draws ``iters_per_refresh`` batches from the pool, steps the
    optimizer on each, then copies the current weights into the
    reference and invalidates the pool so producers regenerate.
    """
    gen = SeededRandomSource(cfg.seed, STREAM_ALIGN).generator(1_000_000 + epoch)
    last = {}
    for _ in range(cfg.iters_per_refresh):
        batch = pool.draw(cfg.batch, gen)
        for traj in batch:
            if traj.stamp != pool.stamp:
                raise StalenessError("stale trajectory survived pool invalidation")
        last = _policy_gradient_update(batch, model, ref_model, optimizer, cfg)
    ref_model.load_vector(model.param_vector())
    pool.invalidate()
    last["epoch"] = epoch
    return last


def run_alignment(
    model,
    ref_model,
    make_trajectory,
    optimizer,
    cfg: AlignConfig,
    log_fh=None,
) -> list[dict]:
    """Full producer/consumer alignment run.

    ``make_trajectory(ref_model, stamp, worker, index)`` must return a
    Trajectory generated under ``ref_model`` with its reward's raw terms
    filled in and ``stamp`` set.  In deterministic mode, producers run
    round-robin in this thread; otherwise ``cfg.workers`` threads keep
    the pool full while the consumer optimizes.
    """
    import json as _json

    cfg.validate()
    pool = TrajectoryPool(cfg.pool_size, timeout_s=cfg.timeout_s)
    history = []

    def fill_deterministic():
        for index in range(pool.capacity - len(pool)):
            worker = index % cfg.workers
            traj = make_trajectory(ref_model, pool.stamp, worker, index)
            pool.put(traj, block=False)

    stop = threading.Event()

    def producer_loop(worker: int):
        index = worker
        while not stop.is_set():
            stamp = pool.stamp
            traj = make_trajectory(ref_model, stamp, worker, index)
            index += cfg.workers
            if not pool.put(traj, block=False):
                time.sleep(0.001)

    threads = []
    if not cfg.deterministic:
        threads = [
            threading.Thread(target=producer_loop, args=(w,), daemon=True)
            for w in range(cfg.workers)
        ]
        for th in threads:
            th.start()

    try:
        for epoch in range(cfg.refreshes):
            if cfg.deterministic:
                fill_deterministic()
            metrics = align_epoch(pool, model, ref_model, optimizer, cfg, epoch)
            history.append(metrics)
            if log_fh is not None:
                log_fh.write(_json.dumps(metrics, sort_keys=True) + "\n")
                log_fh.flush()
            if metrics["kl"] > cfg.kl_ceiling:
                raise DataError(
                    f"KL {metrics['kl']:.3g} exceeded the ceiling {cfg.kl_ceiling:.3g}"
                )
    finally:
        stop.set()
        for th in threads:
            th.join(timeout=5.0)
    return history
