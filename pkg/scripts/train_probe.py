"""Development probe for the training-efficacy acceptance settings.

Runs the full pipeline the acceptance suite will use and prints the
numbers it will assert on. Saves the checkpoint for inspection.
"""

import sys
import time

import numpy as np

from evdiff.data import copy_last_frame_baseline, make_eval_clip
from evdiff.config import ReprConfig
from evdiff.diffusion import Adam, make_schedule, sample_training_windows, training_step
from evdiff.metrics import mse, ssim
from evdiff.net import ArchDescriptor, ConvDenoiser, save_checkpoint
from evdiff.rng import SeededRandomSource
from evdiff.sampler import SamplerConfig, default_switch_step, sample
from evdiff.sim import emit_events, moving_square_suite
from evdiff.voxel import to_unit_images

N_TRAIN = 200
N_EVAL = 50
STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 5000

t0 = time.perf_counter()
train_streams = [emit_events(s) for s in moving_square_suite(N_TRAIN, seed=1000)]
eval_streams = [emit_events(s) for s in moving_square_suite(N_EVAL, seed=2000)]
print(f"data: {time.perf_counter()-t0:.0f}s", flush=True)

sched = make_schedule()
desc = ArchDescriptor(frames=8, prompt_frames=4, bins=3, hidden=32, kernel=3, init_seed=0)
model = ConvDenoiser(desc, sched.sigma_data)
untrained = model.copy()
opt = Adam(lr=3e-4)
rng = SeededRandomSource(0)

t0 = time.perf_counter()
for step in range(STEPS):
    prompt, target = sample_training_windows(train_streams, 3, 8, 4, rng, step, 4)
    loss = training_step(model, prompt, target, sched, rng, opt, step)
    if step % 250 == 0:
        print(f"step {step}: loss {loss:.5f} ({time.perf_counter()-t0:.0f}s)", flush=True)
print(f"train: {time.perf_counter()-t0:.0f}s", flush=True)
save_checkpoint("/tmp/probe_model.ckpt", model, sched, STEPS, 0)

repr_cfg = ReprConfig()
tau = default_switch_step(sched.steps)


def evaluate(m, s_prompt, label):
    mses, ssims = [], []
    for i, stream in enumerate(eval_streams):
        clip = make_eval_clip(stream, repr_cfg, 8, 4)
        prompt = clip.prompt[:s_prompt]
        cfg = SamplerConfig(total_frames=8, prompt_frames=s_prompt, switch_step=tau,
                            seed=3_000_000 + i)
        out = sample(prompt, m, sched, cfg)
        pred = to_unit_images(out[4:])
        truth = to_unit_images(clip.clean_clip[4:])
        mses.append(mse(pred, truth))
        ssims.append(ssim(pred, truth))
    print(f"{label}: mse {np.mean(mses):.6f} ssim {np.mean(ssims):.4f}", flush=True)
    return float(np.mean(mses)), float(np.mean(ssims))


t0 = time.perf_counter()
mse_tr, ssim_tr = evaluate(model, 4, "trained s=4")
mse_un, ssim_un = evaluate(untrained, 4, "untrained s=4")
_, ssim_s1 = evaluate(model, 1, "trained s=1")

base_mses, base_ssims = [], []
for stream in eval_streams:
    clip = make_eval_clip(stream, repr_cfg, 8, 4)
    base = copy_last_frame_baseline(clip.prompt, 4)
    base_mses.append(mse(to_unit_images(base), to_unit_images(clip.clean_clip[4:])))
    base_ssims.append(ssim(to_unit_images(base), to_unit_images(clip.clean_clip[4:])))
print(f"copy-last: mse {np.mean(base_mses):.6f} ssim {np.mean(base_ssims):.4f}", flush=True)
print(f"eval: {time.perf_counter()-t0:.0f}s", flush=True)

print("criterion 6a (mse <= 0.2x untrained):", mse_tr <= 0.2 * mse_un, f"ratio {mse_tr/mse_un:.3f}")
print("criterion 6b (ssim > copy-last):", ssim_tr > np.mean(base_ssims))
print("criterion 7 (s=4 >= s=1):", ssim_tr >= ssim_s1, f"{ssim_tr:.4f} vs {ssim_s1:.4f}")
