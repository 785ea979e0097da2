"""Three-channel Hounsfield-unit coding and per-channel normalization.

Channel layout of a coded image (uint8, shape (3, H, W)):

* ch0 -- emphysema window, HU in [-1024, -900]
* ch1 -- calcification / bone window, HU in (0, 300], saturating above 300
* ch2 -- fat / soft-tissue window, HU in (-900, 0]

Each pixel is owned by exactly one window; the other two channels are zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HU_MIN = -1024
HU_MAX = 3071
EMPHYSEMA_TOP = -900
FAT_TOP = 0
CALCIUM_TOP = 300

# (low exclusive, high inclusive, owning channel); ch0 also owns HU_MIN itself
WINDOWS = {
    0: (HU_MIN, EMPHYSEMA_TOP),
    2: (EMPHYSEMA_TOP, FAT_TOP),
    1: (FAT_TOP, CALCIUM_TOP),
}


def _scale_round(numer, denom):
    """round(255 * numer / denom) half away from zero, for non-negative ints."""
    return (2 * 255 * numer + denom) // (2 * denom)


def _check_slice(hu):
    hu = np.asarray(hu)
    if hu.ndim != 2:
        raise ValueError(f"expected a 2-D HU slice, got shape {hu.shape}")
    if hu.size == 0:
        raise ValueError("empty HU slice")
    return np.clip(hu.astype(np.int64), HU_MIN, HU_MAX)


def encode_slice(hu) -> np.ndarray:
    """Map a 2-D HU slice to a (3, H, W) uint8 coded image."""
    h = _check_slice(hu)
    out = np.zeros((3,) + h.shape, dtype=np.uint8)
    emph = h <= EMPHYSEMA_TOP
    fat = (h > EMPHYSEMA_TOP) & (h <= FAT_TOP)
    calc = h > FAT_TOP
    out[0][emph] = _scale_round(h[emph] - HU_MIN, EMPHYSEMA_TOP - HU_MIN)
    out[2][fat] = _scale_round(h[fat] - EMPHYSEMA_TOP, FAT_TOP - EMPHYSEMA_TOP)
    out[1][calc] = _scale_round(np.minimum(h[calc], CALCIUM_TOP), CALCIUM_TOP)
    return out


def encode_grayscale(hu) -> np.ndarray:
    """Single-channel baseline: clamp to [-1024, 3071] and scale linearly to bytes."""
    h = _check_slice(hu)
    return _scale_round(h - HU_MIN, HU_MAX - HU_MIN).astype(np.uint8)[None]


def owning_channel(hu: int) -> int:
    hu = int(np.clip(hu, HU_MIN, HU_MAX))
    if hu <= EMPHYSEMA_TOP:
        return 0
    return 2 if hu <= FAT_TOP else 1


def decode_value(channel: int, value: int) -> int:
    """Integer HU at the centre of the quantization bin that encodes to ``value``.

    Only meaningful for bytes the channel can actually produce; the nearest
    reachable bin is used otherwise.
    """
    lo, hi = WINDOWS[channel]
    first = lo if channel == 0 else lo + 1
    top = hi
    span = np.arange(first, top + 1)
    codes = encode_slice(span[None, :])[channel, 0]
    hits = span[codes == value]
    if hits.size == 0:
        hits = span[np.abs(codes.astype(int) - value) == np.min(np.abs(codes.astype(int) - value))]
    return int(hits[(hits.size - 1) // 2])


@dataclass
class ChannelStats:
    """Per-channel mean / population std of a training set of coded images."""

    mean: list
    std: list
    gray_mean: float | None = None
    gray_std: float | None = None
    count: int = field(default=0, compare=False)

    def to_dict(self):
        return {"mean": list(map(float, self.mean)), "std": list(map(float, self.std)),
                "gray_mean": self.gray_mean, "gray_std": self.gray_std, "count": self.count}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=list(d["mean"]), std=list(d["std"]), gray_mean=d.get("gray_mean"),
                   gray_std=d.get("gray_std"), count=d.get("count", 0))


def _moments(images):
    total = None
    sq = None
    n = 0
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"expected (C, H, W) images, got shape {a.shape}")
        s = a.sum(axis=(1, 2))
        q = (a * a).sum(axis=(1, 2))
        total = s if total is None else total + s
        sq = q if sq is None else sq + q
        n += a.shape[1] * a.shape[2]
    if n == 0:
        raise ValueError("cannot compute statistics of an empty image set")
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return mean, np.sqrt(var), n


def compute_channel_stats(images, gray_images=None) -> ChannelStats:
    """Mean and population std per channel over every pixel of every image."""
    images = list(images)
    mean, std, n = _moments(images)
    for k, s in enumerate(std):
        if not s > 0:
            raise ValueError(f"channel {k} is constant across the image set (std = 0)")
    stats = ChannelStats(mean=mean.tolist(), std=std.tolist(), count=n)
    if gray_images is not None:
        gm, gs, _ = _moments(list(gray_images))
        if not gs[0] > 0:
            raise ValueError("grayscale channel is constant across the image set (std = 0)")
        stats.gray_mean, stats.gray_std = float(gm[0]), float(gs[0])
    return stats


def normalize(image, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    """(image - mean[c]) / std[c] per channel; works on (3, H, W) or (N, 3, H, W)."""
    a = np.asarray(image, dtype=np.float64)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("invalid channel statistics: non-positive std")
    shape = (-1, 1, 1) if a.ndim == 3 else (1, -1, 1, 1)
    return ((a - mean.reshape(shape)) / std.reshape(shape)).astype(dtype)


def normalize_gray(image, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    if stats.gray_mean is None or not stats.gray_std:
        raise ValueError("statistics carry no grayscale pair")
    return ((np.asarray(image, dtype=np.float64) - stats.gray_mean) / stats.gray_std).astype(dtype)


def to_rgb(coded) -> np.ndarray:
    """(H, W, 3) RGB view: R = emphysema, G = calcification, B = fat."""
    coded = np.asarray(coded)
    return np.ascontiguousarray(np.stack([coded[0], coded[1], coded[2]], axis=-1))


def save_png(coded, path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    coded = np.asarray(coded)
    if coded.shape[0] == 1:
        Image.fromarray(coded[0], mode="L").save(path)
    else:
        Image.fromarray(to_rgb(coded), mode="RGB").save(path)
