"""Variance-exploding noise schedule, reverse step, loss, and training.

The forward process adds Gaussian noise of scale sigma_t to the data
without rescaling it; a denoiser estimates the clean signal and the
discrete reverse update walks the noised state toward that estimate:

    x_{t-1} = x_t - (x_t - mu(x_t, t)) / sigma_t * (sigma_t - sigma_{t-1})

The per-level loss weight is (sigma_t^2 + sigma_data^2) / (sigma_t + sigma_data)^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError, ParameterError
from .rng import (
    STREAM_TRAIN_NOISE,
    STREAM_TRAIN_T,
    STREAM_TRAIN_WINDOW,
    SeededRandomSource,
)

# Desk-scale defaults; the sigma range covers voxel values in [-1, 1],
# sigma_data tracks the measured scale of max-normalized event clips.
DEFAULT_STEPS = 50
DEFAULT_SIGMA_MIN = 0.02
DEFAULT_SIGMA_MAX = 10.0
DEFAULT_SIGMA_DATA = 0.05

# Window lengths (us) the training batches draw from, so the model sees
# the same motion at several temporal magnifications.
AUGMENT_WINDOWS_US = (10_000, 20_000, 40_000)


@dataclass
class NoiseSchedule:
    """Monotone noise levels sigma_0 = 0 < sigma_1 < ... < sigma_T."""

    sigmas: np.ndarray  # (T+1,) float64, sigmas[0] == 0
    sigma_data: float
    sigma_min: float
    sigma_max: float

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def sigma(self, t) -> np.ndarray:
        return self.sigmas[t]


def make_schedule(
    steps: int = DEFAULT_STEPS,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    sigma_max: float = DEFAULT_SIGMA_MAX,
    sigma_data: float = DEFAULT_SIGMA_DATA,
) -> NoiseSchedule:
    """Geometric levels sigma_i = sigma_min * (sigma_max/sigma_min)^(i/T),
    i = 1..T, with sigma_0 = 0 appended as the terminal clean level."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ParameterError("need 0 < sigma_min < sigma_max")
    if sigma_data <= 0:
        raise ParameterError("sigma_data must be positive")
    i = np.arange(1, steps + 1, dtype=np.float64)
    levels = sigma_min * (sigma_max / sigma_min) ** (i / steps)
    sigmas = np.concatenate(([0.0], levels))
    return NoiseSchedule(sigmas, sigma_data, sigma_min, sigma_max)


def perturb(x0: np.ndarray, sigma: float, rng: SeededRandomSource, index: int = 0) -> np.ndarray:
    """x0 + sigma * eps with eps drawn i.i.d. standard normal."""
    if sigma < 0:
        raise ParameterError("sigma must be nonnegative")
    if sigma == 0:
        return x0.copy()
    eps = rng.normal(x0.shape, index=index, dtype=x0.dtype)
    return x0 + x0.dtype.type(sigma) * eps


def reverse_step(x_t: np.ndarray, mu: np.ndarray, sigma_t: float, sigma_prev: float) -> np.ndarray:
    """One discrete reverse update from level sigma_t to sigma_prev."""
    if sigma_t <= 0:
        raise ParameterError("sigma_t must be positive")
    if sigma_prev >= sigma_t:
        raise ParameterError("sigma_prev must be below sigma_t")
    dt = x_t.dtype.type
    return x_t - (x_t - mu) * (dt(sigma_t) - dt(sigma_prev)) / dt(sigma_t)


def loss_weight(sigma_t, sigma_data: float):
    """Weighting of the clean-estimate loss at noise level sigma_t."""
    if np.any(np.asarray(sigma_data) <= 0):
        raise ParameterError("sigma_data must be positive")
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    return (sigma_t**2 + sigma_data**2) / (sigma_t + sigma_data) ** 2


class WeightAverage:
    """Exponential moving average of a parameter vector.

    Sampling from averaged weights removes most of the optimizer's
    step-to-step noise, which otherwise survives into the generated
    frames as background ripple.
    """

    def __init__(self, initial: np.ndarray, decay: float = 0.999):
        self.decay = decay
        self.vector = initial.astype(np.float64).copy()

    def update(self, params: np.ndarray) -> None:
        self.vector *= self.decay
        self.vector += (1.0 - self.decay) * params.astype(np.float64)


class Adam:
    """First/second-moment adaptive optimizer over a parameter list.

    Moments are stored per tensor; layers flagged non-trainable are
    skipped entirely, so frozen gradients are never applied.
    """

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], trainable: list[bool]) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if not trainable[i]:
                continue
            m, v = self._m[i], self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p -= step.astype(p.dtype)


@dataclass
class TrainingLogRecord:
    step: int
    loss: float
    sigma_mean: float


def accumulate_training_grads(
    model,
    prompt: np.ndarray,  # (N, s, B, H, W)
    target: np.ndarray,  # (N, F, B, H, W)
    schedule: NoiseSchedule,
    rng: SeededRandomSource,
    step_index: int,
    grad_scale: float = 1.0,
) -> float:
    """Forward/backward for one micro-batch; gradients add into the model.

    Per sample: draw a level t uniformly from {1..T}, perturb the target
    to that level, and regress the denoiser output against the clean
    target under the level-dependent weight.  Returns the scalar loss.
    """
    if prompt.shape[0] != target.shape[0] or prompt.shape[0] == 0:
        raise DataError("prompt/target batch sizes must match and be nonempty")
    if prompt.shape[-2:] != target.shape[-2:]:
        raise DataError("prompt and target must be spatially aligned")
    n = target.shape[0]
    t_rng = rng.spawn(STREAM_TRAIN_T)
    noise_rng = rng.spawn(STREAM_TRAIN_NOISE)
    t_idx = t_rng.integers(1, schedule.steps + 1, (n,), index=step_index)
    sigma = schedule.sigmas[t_idx]
    eps = noise_rng.normal(target.shape, index=step_index, dtype=target.dtype)
    x_t = target + sigma[:, None, None, None, None].astype(target.dtype) * eps

    mu = model.predict_clean(x_t, sigma, prompt)
    err = target - mu
    weights = loss_weight(sigma, schedule.sigma_data)
    per_elem = target[0].size
    per_sample = (err.astype(np.float64) ** 2).reshape(n, -1).mean(axis=1)
    loss = float(np.mean(weights * per_sample))
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at step {step_index}: sigma range "
            f"[{sigma.min():.3g}, {sigma.max():.3g}]"
        )

    # d(loss)/d(mu) for loss = mean_n( w_n * mean_elem((target - mu)^2) )
    grad = (
        (-2.0 * grad_scale / (n * per_elem))
        * weights[:, None, None, None, None]
        * err.astype(np.float64)
    )
    model.backward(grad.astype(target.dtype))
    return loss


def training_step(
    model,
    prompt: np.ndarray,
    target: np.ndarray,
    schedule: NoiseSchedule,
    rng: SeededRandomSource,
    optimizer: Adam,
    step_index: int,
) -> float:
    """One full training update: zero grads, one micro-batch, one step."""
    model.zero_grads()
    loss = accumulate_training_grads(model, prompt, target, schedule, rng, step_index)
    optimizer.step(model.params, model.grads, model.trainable)
    return loss


def sample_training_windows(
    streams: list,
    bins: int,
    total_frames: int,
    prompt_frames: int,
    rng: SeededRandomSource,
    step_index: int,
    batch: int,
    windows_us: tuple[int, ...] = AUGMENT_WINDOWS_US,
    vary_prompt_count: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a (prompt, target) batch with time-range augmentation.

    Each sample picks a stream, a window length from ``windows_us`` and
    a start offset, voxelizes ``total_frames`` consecutive windows, and
    scales the whole clip by the prompt frames' peak so the conditioning
    seen at test time has the same magnitude statistics.  Optionally
    zeroes a random suffix of the prompt slots so the model stays usable
    with fewer test-time prompt frames.
    """
    from .voxel import windowize  # local import to keep module load light

    gen = rng.spawn(STREAM_TRAIN_WINDOW).generator(step_index)
    height, width = streams[0].height, streams[0].width
    prompt = np.zeros((batch, prompt_frames, bins, height, width), dtype=np.float32)
    target = np.zeros((batch, total_frames, bins, height, width), dtype=np.float32)
    for b in range(batch):
        stream = streams[int(gen.integers(0, len(streams)))]
        window_us = int(windows_us[int(gen.integers(0, len(windows_us)))])
        span = total_frames * window_us
        if span > stream.duration_us:
            raise DataError("stream too short for the requested clip span")
        t_start = int(gen.integers(0, stream.duration_us - span + 1))
        seq = windowize(stream, window_us, bins, t_start=t_start, n_frames=total_frames)
        values = seq.values
        peak = float(np.max(np.abs(values[:prompt_frames])))
        if peak > 0:
            values = values / np.float32(peak)
        target[b] = values
        if vary_prompt_count and prompt_frames > 1 and gen.random() >= 0.5:
            # Half the batches keep the full prompt; the rest drop a
            # random suffix so shorter test-time prompts stay usable.
            k = int(gen.integers(1, prompt_frames))
        else:
            k = prompt_frames
        prompt[b, :k] = values[:k]
    return prompt, target
