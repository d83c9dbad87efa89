"""Reverse-chain sampling with multi-prompt replacement guidance.

For the early (high-noise) steps t >= tau, the leading ``s`` frames of
the working latent are replaced by a noised copy of the clean prompt
before each reverse update, so the chain inherits the prompt's motion
while the remaining frames are still free.  After the switch-over the
chain denoises conventionally.  The prompt noising reuses one fixed
per-chain draw, which keeps the injected frames temporally coherent.

An optional stochastic variant adds ancestral noise after every update;
that variant defines per-step Gaussian densities and is what the
alignment stage records trajectories from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, reverse_step
from .errors import ParameterError
from .rng import (
    STREAM_SAMPLER_PM,
    STREAM_SAMPLER_RC,
    STREAM_SAMPLER_STEP,
    SeededRandomSource,
)


@dataclass
class SamplerConfig:
    total_frames: int  # F: frames the chain generates
    prompt_frames: int  # s: leading frames replaced during guidance
    switch_step: int  # tau: replacement happens while t >= tau
    seed: int = 0
    renoise: bool = False  # stochastic ancestral chain instead of the ODE
    record: bool = False  # keep the per-step tape for policy-gradient replay

    def validate(self, steps: int) -> None:
        if self.total_frames < 1:
            raise ParameterError("total_frames must be >= 1")
        if not 0 <= self.prompt_frames <= self.total_frames:
            raise ParameterError("prompt_frames must lie in [0, total_frames]")
        if not 1 <= self.switch_step <= steps + 1:
            raise ParameterError("switch_step must lie in [1, steps + 1]")


def default_switch_step(steps: int) -> int:
    """Replacement covers the high-noise 70% of the chain by default."""
    return int(np.ceil(0.3 * steps))


@dataclass
class Trajectory:
    """Recorded reverse chain for one sample.

    ``sigma_step[i] > 0`` marks steps with a Gaussian transition density
    (the final step to sigma_0 = 0 is deterministic and never scored).
    """

    latents: list  # x_t seen by the denoiser, per step (after replacement)
    ref_means: list  # denoiser output mu at each latent, under the recording policy
    next_latents: list  # sampled x_{t-1} per step
    sigma_t: np.ndarray
    sigma_prev: np.ndarray
    sigma_step: np.ndarray
    output: np.ndarray  # x_O, the terminal sample
    prompt: np.ndarray  # conditioning passed to the denoiser (padded slots)
    replaced: np.ndarray  # bool per step: replacement applied before the update
    stamp: int = 0  # reference-policy version that generated this trajectory
    reward: object = None

    @property
    def scored_steps(self) -> np.ndarray:
        return np.nonzero(self.sigma_step > 0)[0]


def replace(x_pm: np.ndarray, x_rc: np.ndarray, prompt_frames: int) -> np.ndarray:
    """First ``prompt_frames`` frames from x_pm, the rest from x_rc."""
    if prompt_frames > x_rc.shape[0]:
        raise ParameterError("prompt_frames exceeds the latent frame count")
    if prompt_frames == 0:
        return x_rc.copy()
    out = x_rc.copy()
    out[:prompt_frames] = x_pm[:prompt_frames]
    return out


def step_noise_scale(sigma_t: float, sigma_prev: float) -> float:
    """Ancestral per-step noise scale for the variance-exploding chain."""
    if sigma_prev <= 0:
        return 0.0
    return sigma_prev * np.sqrt(sigma_t**2 - sigma_prev**2) / sigma_t


def pad_prompt(prompt: np.ndarray, slots: int) -> np.ndarray:
    """Zero-pad the conditioning to the network's prompt slot count."""
    given = prompt.shape[0]
    if given > slots:
        raise ParameterError(f"{given} prompt frames given, model takes at most {slots}")
    if given == slots:
        return prompt
    shape = (slots - given,) + prompt.shape[1:]
    return np.concatenate([prompt, np.zeros(shape, dtype=prompt.dtype)], axis=0)


def sample(
    prompt: np.ndarray,  # (s, B, H, W) clean, normalized prompt frames
    model,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
):
    """Run one reverse chain; returns the F-frame output.

    With ``cfg.record`` the full tape is returned as ``(output, Trajectory)``.
    Deterministic in (prompt, model, schedule, cfg): all noise comes from
    counter-based streams keyed by cfg.seed, and the unguided chain
    (switch_step = steps + 1) never touches the prompt stream, so it is
    byte-identical to a chain that has no guidance machinery at all.
    """
    steps = schedule.steps
    cfg.validate(steps)
    s = cfg.prompt_frames
    if prompt.ndim != 4:
        raise ParameterError("prompt must be (frames, bins, H, W), frames may be 0")
    if prompt.shape[0] < s:
        raise ParameterError(f"prompt has {prompt.shape[0]} frames, config wants {s}")
    frame_shape = (cfg.total_frames,) + tuple(prompt.shape[1:])
    dtype = np.float32

    rc_rng = SeededRandomSource(cfg.seed, STREAM_SAMPLER_RC)
    x_rc = (schedule.sigmas[steps] * rc_rng.normal(frame_shape, dtype=np.float64)).astype(dtype)

    cond = pad_prompt(prompt.astype(dtype), model.desc.prompt_frames)

    guided = cfg.switch_step <= steps
    if guided and s > 0:
        pm_rng = SeededRandomSource(cfg.seed, STREAM_SAMPLER_PM)
        eps_pm = pm_rng.normal((s,) + tuple(prompt.shape[1:]), dtype=np.float64).astype(dtype)
        x_pm = (np.float32(schedule.sigmas[steps]) * eps_pm).astype(dtype)
    else:
        eps_pm = x_pm = None

    step_rng = SeededRandomSource(cfg.seed, STREAM_SAMPLER_STEP)
    tape = Trajectory(
        [], [], [], np.zeros(steps), np.zeros(steps), np.zeros(steps),
        output=None, prompt=cond, replaced=np.zeros(steps, dtype=bool),
    ) if cfg.record else None

    for t in range(steps, 0, -1):
        sigma_t = float(schedule.sigmas[t])
        sigma_prev = float(schedule.sigmas[t - 1])
        use_replace = t >= cfg.switch_step and x_pm is not None
        x_in = replace(x_pm, x_rc, s) if use_replace else x_rc
        mu = model.predict_clean(x_in, sigma_t, cond)
        mean = reverse_step(x_in, mu, sigma_t, sigma_prev)
        noise_scale = step_noise_scale(sigma_t, sigma_prev) if cfg.renoise else 0.0
        if noise_scale > 0:
            eta = step_rng.normal(frame_shape, index=t, dtype=np.float64).astype(dtype)
            x_next = mean + np.float32(noise_scale) * eta
        else:
            x_next = mean
        if tape is not None:
            i = steps - t
            tape.latents.append(x_in)
            tape.ref_means.append(mu)
            tape.next_latents.append(x_next)
            tape.sigma_t[i] = sigma_t
            tape.sigma_prev[i] = sigma_prev
            tape.sigma_step[i] = noise_scale
            tape.replaced[i] = use_replace
        if use_replace:
            # Noised prompt for the next iteration, one level hot by design.
            x_pm = prompt.astype(dtype) + np.float32(sigma_t) * eps_pm
        x_rc = x_next

    if tape is not None:
        tape.output = x_rc
        return x_rc, tape
    return x_rc
