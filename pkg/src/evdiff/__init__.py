"""Event-sequence diffusion for future-motion forecasting, desk scale.

Pipeline: simulate event-camera scenes, voxelize the streams, train a
small denoiser under a variance-exploding objective, sample futures with
multi-prompt replacement guidance, and align the sampler with rewards
via clipped importance-weighted policy gradients.
"""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, loss_weight, make_schedule, perturb, reverse_step
from .events import EventStream, read_evt1, write_evt1
from .net import ArchDescriptor, ConvDenoiser, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, Trajectory, replace, sample
from .sim import SceneObject, SceneSpec, emit_events, object_mask, render_scene
from .voxel import VoxelFrame, VoxelSequence, normalize_sequence, voxelize, windowize

__all__ = [
    "ArchDescriptor",
    "ConvDenoiser",
    "EventStream",
    "NoiseSchedule",
    "SamplerConfig",
    "SceneObject",
    "SceneSpec",
    "Trajectory",
    "VoxelFrame",
    "VoxelSequence",
    "emit_events",
    "load_checkpoint",
    "loss_weight",
    "make_schedule",
    "normalize_sequence",
    "object_mask",
    "perturb",
    "read_evt1",
    "render_scene",
    "replace",
    "reverse_step",
    "sample",
    "save_checkpoint",
    "voxelize",
    "windowize",
    "write_evt1",
]
