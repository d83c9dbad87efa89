"""Trainable denoiser: a small periodic-padding conv net with
hand-written reverse-mode gradients.

The network predicts the clean voxel clip from a noised one.  The noise
level enters only through scalar preconditioning:

    mu(x, sigma) = c_skip(sigma) * x + c_out(sigma) * net(c_in(sigma) * x, prompt)

with c_skip = sd^2/(sigma^2+sd^2), c_out = sigma*sd/sqrt(sigma^2+sd^2),
c_in = 1/sqrt(sigma^2+sd^2), sd the data scale.  The prompt frames are
channel-concatenated with the (scaled) noised input.  Convolutions use
im2col over wrap padding, so the whole net is translation equivariant
on the torus and every layer reduces to one matmul, which keeps the
manual backward pass short enough to audit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError, StateError
from .rng import STREAM_INIT, SeededRandomSource


@dataclass
class ArchDescriptor:
    """Everything that determines the parameter layout."""

    frames: int  # F: clip length the net denoises
    prompt_frames: int  # s: conditioning slots (zero-padded when fewer given)
    bins: int = 3
    hidden: int = 32
    kernel: int = 3  # 1 or 3
    per_frame: bool = False  # diagnostic: denoise each frame independently
    init_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "prompt_frames": self.prompt_frames,
            "bins": self.bins,
            "hidden": self.hidden,
            "kernel": self.kernel,
            "per_frame": self.per_frame,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchDescriptor":
        return cls(**doc)

    @property
    def in_channels(self) -> int:
        data_ch = self.bins if self.per_frame else self.frames * self.bins
        return data_ch + self.prompt_frames * self.bins

    @property
    def out_channels(self) -> int:
        return self.bins if self.per_frame else self.frames * self.bins


def _layer_shapes(desc: ArchDescriptor) -> list[tuple[int, int]]:
    k2 = desc.kernel * desc.kernel
    c_in, c_h, c_out = desc.in_channels, desc.hidden, desc.out_channels
    return [(k2 * c_in, c_h), (k2 * c_h, c_h), (k2 * c_h, c_h), (k2 * c_h, c_out)]


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C) with wrap padding; k in {1, 3}."""
    if kernel == 1:
        n, h, w, c = x.shape
        return x.reshape(n * h * w, c)
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="wrap")
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    i = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, i, :] = xp[:, dy : dy + h, dx : dx + w, :]
            i += 1
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, n: int, h: int, w: int, c: int, kernel: int) -> np.ndarray:
    """Adjoint of _im2col: fold patch gradients back, wrapping the halo."""
    if kernel == 1:
        return dcols.reshape(n, h, w, c)
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    i = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, i, :]
            i += 1
    # Wrap-padding adjoint: halo rows/cols act on the opposite edge.
    dxp[:, -2, :, :] += dxp[:, 0, :, :]
    dxp[:, 1, :, :] += dxp[:, -1, :, :]
    dxp[:, :, -2, :] += dxp[:, :, 0, :]
    dxp[:, :, 1, :] += dxp[:, :, -1, :]
    return dxp[:, 1 : h + 1, 1 : w + 1, :]


def preconditioning(sigma, sigma_data: float, dtype=np.float64):
    """(c_skip, c_out, c_in) for the given noise level(s)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    denom = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / denom
    c_out = sigma * sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    cast = lambda a: a.astype(dtype)
    return cast(c_skip), cast(c_out), cast(c_in)


class ConvDenoiser:
    """Four conv layers with tanh nonlinearities and two residual skips.

    Layout: y0 = tanh(conv0(in)); y1 = y0 + tanh(conv1(y0));
    y2 = y1 + tanh(conv2(y1)); out = conv3(y2).
    """

    N_LAYERS = 4

    def __init__(self, desc: ArchDescriptor, sigma_data: float, dtype=np.float32):
        self.desc = desc
        self.sigma_data = float(sigma_data)
        self.dtype = np.dtype(dtype)
        shapes = _layer_shapes(desc)
        rng = SeededRandomSource(desc.init_seed, STREAM_INIT)
        self.params: list[np.ndarray] = []
        for li, (fan_in, fan_out) in enumerate(shapes):
            gen = rng.generator(li)
            bound = 1.0 / np.sqrt(fan_in)
            w = (gen.random((fan_in, fan_out)) * 2.0 - 1.0) * bound
            self.params.append(w.astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))
        self.grads = [np.zeros_like(p) for p in self.params]
        self.trainable_layers = [True] * self.N_LAYERS
        self._cache = None

    # ---- parameter bookkeeping -------------------------------------

    @property
    def trainable(self) -> list[bool]:
        """Per-tensor trainability, expanded from per-layer flags."""
        out = []
        for flag in self.trainable_layers:
            out.extend([flag, flag])
        return out

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grads(self) -> None:
        for g in self.grads:
            g[...] = 0

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def load_vector(self, vec: np.ndarray) -> None:
        if vec.size != self.param_count:
            raise DataError(f"expected {self.param_count} parameters, got {vec.size}")
        off = 0
        for p in self.params:
            p[...] = vec[off : off + p.size].reshape(p.shape).astype(self.dtype)
            off += p.size

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])

    def copy(self, dtype=None) -> "ConvDenoiser":
        other = ConvDenoiser(self.desc, self.sigma_data, dtype or self.dtype)
        for p_dst, p_src in zip(other.params, self.params):
            p_dst[...] = p_src.astype(other.dtype)
        other.trainable_layers = list(self.trainable_layers)
        return other

    def freeze(self, layer_indices) -> None:
        for i in layer_indices:
            self.trainable_layers[i] = False

    # ---- forward / backward ----------------------------------------

    def _assemble(self, x_t: np.ndarray, sigma, prompt: np.ndarray):
        """Shape checks, preconditioning, and NHWC input assembly."""
        desc = self.desc
        squeeze = x_t.ndim == 4
        if squeeze:
            x_t = x_t[None]
            prompt = prompt[None]
        if x_t.ndim != 5 or prompt.ndim != 5:
            raise DataError("expected (N, F, B, H, W) inputs")
        n, f, b, h, w = x_t.shape
        if f != desc.frames or b != desc.bins:
            raise DataError(
                f"x_t has {f} frames x {b} bins, net expects {desc.frames} x {desc.bins}"
            )
        if prompt.shape != (n, desc.prompt_frames, desc.bins, h, w):
            raise DataError(
                f"prompt shape {prompt.shape} does not match "
                f"(N, {desc.prompt_frames}, {desc.bins}, {h}, {w})"
            )
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if sigma.size == 1:
            sigma = np.full(n, sigma[0])
        if sigma.shape != (n,):
            raise DataError("sigma must be scalar or one level per sample")
        if np.any(sigma <= 0):
            raise ParameterError("sigma levels must be positive")
        c_skip, c_out, c_in = preconditioning(sigma, self.sigma_data, self.dtype)

        x32 = x_t.astype(self.dtype, copy=False)
        p32 = prompt.astype(self.dtype, copy=False)
        scaled = x32 * c_in[:, None, None, None, None]
        if desc.per_frame:
            # Each frame becomes its own sample; the prompt rides along.
            data = scaled.reshape(n * f, 1, b, h, w)
            cond = np.repeat(p32, f, axis=0)
            stacked = np.concatenate([data.reshape(n * f, b, h, w),
                                      cond.reshape(n * f, -1, h, w)], axis=1)
        else:
            stacked = np.concatenate(
                [scaled.reshape(n, f * b, h, w), p32.reshape(n, -1, h, w)], axis=1
            )
        net_in = np.ascontiguousarray(np.moveaxis(stacked, 1, -1))  # NHWC
        return x32, c_skip, c_out, net_in, (n, f, b, h, w), squeeze

    def _conv(self, x: np.ndarray, layer: int):
        w, bias = self.params[2 * layer], self.params[2 * layer + 1]
        n, h, wd, _ = x.shape
        cols = _im2col(x, self.desc.kernel)
        y = cols @ w
        y += bias
        return y.reshape(n, h, wd, w.shape[1]), cols

    def forward(self, net_in: np.ndarray) -> np.ndarray:
        """Core net on assembled NHWC input; stores the workspace."""
        z0, cols0 = self._conv(net_in, 0)
        a0 = np.tanh(z0)
        z1, cols1 = self._conv(a0, 1)
        a1 = np.tanh(z1)
        h1 = a0 + a1
        z2, cols2 = self._conv(h1, 2)
        a2 = np.tanh(z2)
        h2 = h1 + a2
        out, cols3 = self._conv(h2, 3)
        self._cache = (net_in.shape, cols0, a0, cols1, a1, cols2, a2, cols3)
        return out

    def predict_clean(self, x_t: np.ndarray, sigma, prompt: np.ndarray) -> np.ndarray:
        x32, c_skip, c_out, net_in, dims, squeeze = self._assemble(x_t, sigma, prompt)
        n, f, b, h, w = dims
        out = self.forward(net_in)
        # per_frame mode folds N*F samples of B channels back into clips.
        raw = np.moveaxis(out, -1, 1).reshape(n, f, b, h, w)
        self._last = (c_out, dims)
        mu = c_skip[:, None, None, None, None] * x32 + c_out[:, None, None, None, None] * raw
        return mu[0] if squeeze else mu

    def backward(self, dmu: np.ndarray) -> None:
        """Accumulate parameter gradients for the last predict_clean call.

        Inputs are treated as constants: gradients flow only into the
        layer weights, which is all training and alignment need.
        """
        if self._cache is None:
            raise StateError("backward called without a forward pass")
        c_out, (n, f, b, h, w) = self._last
        if dmu.ndim == 4:
            dmu = dmu[None]
        if dmu.shape != (n, f, b, h, w):
            raise DataError(f"upstream gradient shape {dmu.shape} != {(n, f, b, h, w)}")
        draw = dmu.astype(self.dtype, copy=False) * c_out[:, None, None, None, None]
        if self.desc.per_frame:
            dout = np.ascontiguousarray(
                np.moveaxis(draw.reshape(n * f, b, h, w), 1, -1)
            )
            rows_n = n * f
        else:
            dout = np.ascontiguousarray(np.moveaxis(draw.reshape(n, f * b, h, w), 1, -1))
            rows_n = n
        in_shape, cols0, a0, cols1, a1, cols2, a2, cols3 = self._cache
        k = self.desc.kernel

        def conv_back(layer, cols, dy, need_dx, c_prev):
            dy2 = dy.reshape(-1, dy.shape[-1])
            self.grads[2 * layer] += cols.T @ dy2
            self.grads[2 * layer + 1] += dy2.sum(axis=0)
            if not need_dx:
                return None
            dcols = dy2 @ self.params[2 * layer].T
            return _col2im(dcols, rows_n, h, w, c_prev, k)

        hidden = self.desc.hidden
        dh2 = conv_back(3, cols3, dout, True, hidden)
        da2 = dh2 * (1.0 - a2 * a2)
        dh1 = dh2 + conv_back(2, cols2, da2, True, hidden)
        da1 = dh1 * (1.0 - a1 * a1)
        da0 = dh1 + conv_back(1, cols1, da1, True, hidden)
        dz0 = da0 * (1.0 - a0 * a0)
        conv_back(0, cols0, dz0, False, in_shape[-1])
        self._cache = None


# ---- CKPT1 checkpoint container -------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<4sHHQIfffQQI")
# magic, version, reserved, param_count, steps, sigma_min, sigma_max,
# sigma_data, train_step, seed, descriptor_length


def save_checkpoint(path: str | os.PathLike, model: ConvDenoiser, schedule, train_step: int, seed: int) -> None:
    desc_bytes = json.dumps(model.desc.to_dict(), sort_keys=True).encode()
    header = CKPT_HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        0,
        model.param_count,
        schedule.steps,
        schedule.sigma_min,
        schedule.sigma_max,
        schedule.sigma_data,
        train_step,
        seed,
        len(desc_bytes),
    )
    payload = header + desc_bytes + model.param_vector().astype("<f4").tobytes()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_checkpoint(path: str | os.PathLike):
    """Returns (model, schedule, train_step, seed)."""
    from .diffusion import make_schedule

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < CKPT_HEADER.size + 8:
        raise FormatError("CKPT1 file shorter than header", offset=len(raw))
    payload, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise FormatError("CKPT1 checksum mismatch", offset=len(payload))
    (
        magic,
        version,
        _reserved,
        param_count,
        steps,
        sigma_min,
        sigma_max,
        sigma_data,
        train_step,
        seed,
        desc_len,
    ) = CKPT_HEADER.unpack_from(payload, 0)
    if magic != CKPT_MAGIC:
        raise FormatError("bad CKPT1 magic", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported CKPT1 version {version}", offset=4)
    off = CKPT_HEADER.size
    try:
        desc = ArchDescriptor.from_dict(json.loads(payload[off : off + desc_len].decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad architecture descriptor: {exc}", offset=off) from exc
    off += desc_len
    vec = np.frombuffer(payload, dtype="<f4", offset=off)
    if vec.size != param_count:
        raise FormatError(
            f"parameter payload holds {vec.size} values, header says {param_count}",
            offset=off,
        )
    schedule = make_schedule(steps, float(sigma_min), float(sigma_max), float(sigma_data))
    model = ConvDenoiser(desc, schedule.sigma_data)
    if model.param_count != param_count:
        raise FormatError(
            f"descriptor implies {model.param_count} parameters, file has {param_count}",
            offset=off,
        )
    model.load_vector(vec)
    return model, schedule, train_step, seed
