"""Evaluation metrics: MSE, windowed SSIM, a fixed-random-feature video
distance, and mask IoU against simulator ground truth.

The video distance embeds every sequence with a frozen, seed-0 random
conv feature map and measures the Fréchet distance between Gaussian
fits of the two embedding sets; it keeps the statistical machinery of
the usual pretrained-feature video distance while staying dependency
free and exactly reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError
from .net import _im2col
from .rng import STREAM_FEATURES, SeededRandomSource

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MASK_THRESHOLD = 0.1  # fraction of the sequence-wide peak magnitude
FRECHET_RIDGE = 1e-6


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable windowed mean over the trailing two axes, valid region only."""
    out = ndimage.correlate1d(img, kernel, axis=-2, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=-1, mode="constant")
    r = len(kernel) // 2
    return out[..., r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean windowed SSIM over all frames/channels; inputs in [0, 1]."""
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise DataError(f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo < -1e-9 or hi > data_range + 1e-9:
        raise DataError("ssim inputs must lie in [0, data_range]")
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _window_mean(a, kernel)
    mu_b = _window_mean(b, kernel)
    var_a = _window_mean(a * a, kernel) - mu_a * mu_a
    var_b = _window_mean(b * b, kernel) - mu_b * mu_b
    cov = _window_mean(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


class RandomFeatureEmbedder:
    """Frozen two-layer random conv embedding of a voxel clip.

    Per-frame features are spatially pooled channel responses; the clip
    embedding concatenates their temporal mean with the mean absolute
    frame-to-frame difference, so both appearance and motion move the
    statistic.  Weights derive from one fixed seed and never train.
    """

    def __init__(self, bins: int, seed: int = 0, channels: tuple[int, int] = (12, 24)):
        self.bins = bins
        self.channels = channels
        rng = SeededRandomSource(seed, STREAM_FEATURES)
        c1, c2 = channels
        self.w1 = self._init(rng, 0, 9 * bins, c1)
        self.w2 = self._init(rng, 1, 9 * c1, c2)

    @staticmethod
    def _init(rng: SeededRandomSource, index: int, fan_in: int, fan_out: int) -> np.ndarray:
        gen = rng.generator(index)
        return (gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float64)

    @property
    def dim(self) -> int:
        return 2 * self.channels[1]

    def _frame_features(self, frames: np.ndarray) -> np.ndarray:
        """(F, B, H, W) -> (F, c2) pooled responses."""
        f, b, h, w = frames.shape
        x = np.moveaxis(frames.astype(np.float64), 1, -1)  # FHWB
        cols = _im2col(x, 3)
        y = np.tanh(cols @ self.w1).reshape(f, h, w, -1)
        y = y[:, : h - h % 2, : w - w % 2]
        y = y.reshape(f, h // 2, 2, w // 2, 2, -1).mean(axis=(2, 4))
        cols = _im2col(np.ascontiguousarray(y), 3)
        z = np.tanh(cols @ self.w2).reshape(f, h // 2, w // 2, -1)
        return z.mean(axis=(1, 2))

    def embed(self, values: np.ndarray) -> np.ndarray:
        if values.ndim != 4 or values.shape[1] != self.bins:
            raise DataError(f"expected (F, {self.bins}, H, W) clip, got {values.shape}")
        feats = self._frame_features(values)
        if len(feats) > 1:
            motion = np.abs(np.diff(feats, axis=0)).mean(axis=0)
        else:
            motion = np.zeros_like(feats[0])
        return np.concatenate([feats.mean(axis=0), motion])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(m1, c1, m2, c2) -> float:
    """Fréchet distance between N(m1, c1) and N(m2, c2)."""
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    m2 = np.atleast_1d(np.asarray(m2, dtype=np.float64))
    c1 = np.atleast_2d(np.asarray(c1, dtype=np.float64))
    c2 = np.atleast_2d(np.asarray(c2, dtype=np.float64))
    diff = m1 - m2
    root1 = _psd_sqrt(c1)
    inner = root1 @ c2 @ root1
    inner = (inner + inner.T) / 2.0
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * cross)


def _embedding_stats(embeddings: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    mean = embeddings.mean(axis=0)
    centered = embeddings - mean
    cov = centered.T @ centered / embeddings.shape[0]  # population covariance
    cov = cov + ridge * np.eye(cov.shape[0])
    return mean, cov


def feature_video_distance(
    set_a: list, set_b: list, embedder: RandomFeatureEmbedder, ridge: float = FRECHET_RIDGE
) -> float:
    """Fréchet distance between the embedding Gaussians of two clip sets."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ParameterError("both sequence sets must be nonempty")
    emb_a = np.stack([embedder.embed(np.asarray(v)) for v in set_a])
    emb_b = np.stack([embedder.embed(np.asarray(v)) for v in set_b])
    m1, c1 = _embedding_stats(emb_a, ridge)
    m2, c2 = _embedding_stats(emb_b, ridge)
    return frechet_gaussian(m1, c1, m2, c2)


def mask_from_sequence(values: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Activity masks (F, H, W): any bin above threshold * peak, then a
    3x3 morphological closing to seal single-pixel gaps."""
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return np.zeros((values.shape[0],) + values.shape[2:], dtype=bool)
    raw = np.any(np.abs(values) >= threshold * peak, axis=1)
    structure = np.ones((3, 3), dtype=bool)
    return np.stack([ndimage.binary_closing(m, structure=structure) for m in raw])


def iou_pair(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise DataError(f"mask shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou_aiou(pairs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """Mean per-frame IoU and the IoU of counts aggregated over frames."""
    if not pairs:
        raise ParameterError("need at least one mask pair")
    ious = [iou_pair(p, g) for p, g in pairs]
    inter = sum(int(np.logical_and(p, g).sum()) for p, g in pairs)
    union = sum(int(np.logical_or(p, g).sum()) for p, g in pairs)
    aiou = 1.0 if union == 0 else inter / union
    return float(np.mean(ious)), float(aiou)


@dataclass
class MetricReport:
    mse: float
    ssim: float
    feature_video_distance: float
    miou: float
    aiou: float
    per_sequence: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "mse": self.mse,
            "ssim": self.ssim,
            "feature_video_distance": self.feature_video_distance,
            "miou": self.miou,
            "aiou": self.aiou,
            "per_sequence": self.per_sequence,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def table(self) -> str:
        header = f"{'FVD*':>10} {'MSE':>10} {'SSIM':>8} {'mIoU':>8} {'aIoU':>8}"
        row = (
            f"{self.feature_video_distance:>10.4f} {self.mse:>10.6f} "
            f"{self.ssim:>8.4f} {self.miou:>8.3f} {self.aiou:>8.3f}"
        )
        return header + "\n" + row
