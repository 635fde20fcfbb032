"""Bouncing-sprite videos, the LMVPVID1 container and minibatch iteration."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"LMVPVID1"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<8s7I")

SPRITES = ("square", "cross", "blob")


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class DataConfig:
    N: int = 256
    T: int = 12
    H: int = 32
    W: int = 32
    C: int = 1
    T0: int = 6
    n_objects: int = 2
    sprite: str = "square"
    sprite_size: int = 8
    speed_min: int = 1
    speed_max: int = 2
    seed: int = 0

    def validate(self) -> None:
        bad = []
        if self.N < 0:
            bad.append("N")
        if self.T < 2 or self.H < 1 or self.W < 1:
            bad.append("T/H/W")
        if not 0 < self.T0 < self.T:
            bad.append("T0 (need 0 < T0 < T)")
        if self.C not in (1, 3):
            bad.append("C (must be 1 or 3)")
        if self.n_objects < 1:
            bad.append("n_objects")
        if self.sprite not in SPRITES:
            bad.append(f"sprite (one of {', '.join(SPRITES)})")
        if not 1 <= self.sprite_size < min(self.H, self.W):
            bad.append("sprite_size (need 1 <= size < min(H, W))")
        if self.speed_min < 0 or self.speed_max < self.speed_min:
            bad.append("speed_min/speed_max")
        if bad:
            raise ConfigError("invalid data config: " + "; ".join(bad))


@dataclass
class VideoSet:
    videos: np.ndarray  # (N, T, H, W, C) float32 in [0, 1]
    config: DataConfig | None = field(default=None)

    def __len__(self):
        return self.videos.shape[0]


def sprite_bitmap(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), np.float32)
    if kind == "cross":
        bmp = np.zeros((size, size), np.float32)
        lo, hi = size // 3, size - size // 3
        bmp[lo:hi, :] = 1
        bmp[:, lo:hi] = 1
        return bmp
    if kind == "blob":
        yy, xx = np.mgrid[:size, :size]
        c = (size - 1) / 2
        return (((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2) ** 2).astype(np.float32)
    raise ConfigError(f"unknown sprite kind {kind!r}")


def bounce_step(pos: int, vel: int, limit: int) -> tuple[int, int]:
    """Advance one axis by one frame inside ``[0, limit]``, reflecting at the walls."""
    new = pos + vel
    if new < 0:
        new, vel = -new, -vel
    elif new > limit:
        new, vel = 2 * limit - new, -vel
    return min(max(new, 0), limit), vel


def trajectory(pos, vel, limits, T) -> list[tuple[int, int]]:
    """Integer top-left positions over T frames for one object."""
    (y, x), (vy, vx) = pos, vel
    out = [(y, x)]
    for _ in range(T - 1):
        y, vy = bounce_step(y, vy, limits[0])
        x, vx = bounce_step(x, vx, limits[1])
        out.append((y, x))
    return out


def render(positions, bitmap, H, W, C) -> np.ndarray:
    """Rasterize sprites at integer positions; overlaps take the pixelwise max."""
    frame = np.zeros((H, W), np.float32)
    s = bitmap.shape[0]
    for y, x in positions:
        np.maximum(frame[y:y + s, x:x + s], bitmap, out=frame[y:y + s, x:x + s])
    return np.repeat(frame[:, :, None], C, axis=2)


def generate_bouncing(config: DataConfig, stream: int = 0) -> VideoSet:
    """Deterministic bouncing-sprite videos.

    Video ``i`` draws from its own generator seeded by ``(seed, stream, i)``,
    so videos are independent of generation order.  ``stream`` separates
    train and test sets built from one seed.
    """
    config.validate()
    c = config
    bmp = sprite_bitmap(c.sprite, c.sprite_size)
    limits = (c.H - c.sprite_size, c.W - c.sprite_size)
    out = np.zeros((c.N, c.T, c.H, c.W, c.C), np.float32)
    for i in range(c.N):
        rng = np.random.default_rng([c.seed, stream, i])
        tracks = []
        for _ in range(c.n_objects):
            pos = (int(rng.integers(0, limits[0] + 1)), int(rng.integers(0, limits[1] + 1)))
            speeds = rng.integers(c.speed_min, c.speed_max + 1, size=2)
            signs = rng.choice([-1, 1], size=2)
            vel = (int(speeds[0] * signs[0]), int(speeds[1] * signs[1]))
            tracks.append(trajectory(pos, vel, limits, c.T))
        for t in range(c.T):
            out[i, t] = render([tr[t] for tr in tracks], bmp, c.H, c.W, c.C)
    return VideoSet(out, config)


def write_videoset(path, vs: VideoSet) -> None:
    arr = np.ascontiguousarray(vs.videos, dtype="<f4")
    if arr.ndim != 5:
        raise FormatError(f"video tensor must be 5-d (N,T,H,W,C), got shape {arr.shape}")
    header = HEADER.pack(MAGIC, VERSION, *arr.shape, DTYPE_F32)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f"cannot write video set to {path}: {e.strerror or e}") from e


def read_videoset(path) -> VideoSet:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read video set {path}: {e.strerror or e}") from e
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an LMVPVID1 file", 0)
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header", len(raw))
    _, version, N, T, H, W, C, dtype = HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}", 32)
    n_bytes = N * T * H * W * C * 4
    if len(raw) - HEADER.size < n_bytes:
        raise FormatError(f"{path}: payload truncated, header declares {n_bytes} bytes "
                          f"but only {len(raw) - HEADER.size} follow", len(raw))
    if len(raw) - HEADER.size > n_bytes:
        raise FormatError(f"{path}: {len(raw) - HEADER.size - n_bytes} trailing bytes", HEADER.size + n_bytes)
    arr = np.frombuffer(raw, dtype="<f4", count=N * T * H * W * C, offset=HEADER.size)
    return VideoSet(arr.reshape(N, T, H, W, C).astype(np.float32))


def batch_order(n: int, batch_size: int, shuffle_seed) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > n:
        log.warning("batch_size %d exceeds set size %d; emitting a single batch", batch_size, n)
        batch_size = max(n, 1)
    perm = np.random.default_rng(shuffle_seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(vs: VideoSet, batch_size: int, shuffle_seed):
    """Yield ``(indices, videos)`` batches in a seed-determined order; the last batch may be short."""
    for idx in batch_order(len(vs), batch_size, shuffle_seed):
        yield idx, vs.videos[idx]


