"""Video clips: container type, raw clip file format and seeded synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

CLIP_MAGIC = b"INRQCLIP\x00\x00\x00\x00"
CLIP_VERSION = 1
MOTIFS = ("blobs", "gradient", "checker-drift")


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VideoClip:
    """T x 3 x H x W unsigned 8-bit frames, planar RGB."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            raise ValueError(f"clip samples must be uint8, got {arr.dtype}")
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"clip must be T x 3 x H x W, got {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError(f"clip needs at least 2 frames, got {arr.shape[0]}")
        if arr.shape[2] < 1 or arr.shape[3] < 1:
            raise ValueError("clip height and width must be positive")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self):
        return self.frames, self.height, self.width

    def as_float(self) -> np.ndarray:
        """Frames scaled to [0, 1] as float64."""
        return self.data.astype(np.float64) / 255.0

    def to_bytes(self) -> bytes:
        t, h, w = self.dims
        return (
            CLIP_MAGIC[:12]
            + struct.pack("<I", CLIP_VERSION)
            + struct.pack("<III", t, h, w)
            + self.data.tobytes(order="C")
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VideoClip":
        if len(raw) < 28:
            raise ClipFormatError("clip file truncated (header)")
        if raw[:12] != CLIP_MAGIC[:12]:
            raise ClipFormatError("not a clip file (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 12)
        if version != CLIP_VERSION:
            raise ClipFormatError(f"unsupported clip version {version}")
        t, h, w = struct.unpack_from("<III", raw, 16)
        n = t * 3 * h * w
        if len(raw) - 28 != n:
            raise ClipFormatError(f"clip payload has {len(raw) - 28} bytes, expected {n}")
        data = np.frombuffer(raw, dtype=np.uint8, offset=28).reshape(t, 3, h, w).copy()
        return cls(data)


def save_clip(clip: VideoClip, path: Union[str, Path]) -> None:
    Path(path).write_bytes(clip.to_bytes())


def load_clip(path: Union[str, Path]) -> VideoClip:
    return VideoClip.from_bytes(Path(path).read_bytes())


def constant_clip(frames: int, height: int, width: int, rgb=(0.25, 0.5, 0.75)) -> VideoClip:
    vals = np.round(np.asarray(rgb, dtype=np.float64) * 255.0).astype(np.uint8)
    data = np.broadcast_to(vals[None, :, None, None], (frames, 3, height, width))
    return VideoClip(np.array(data))


def synthetic_clip(seed: int, frames: int, height: int, width: int, motif: str = "blobs") -> VideoClip:
    """Deterministic synthetic clip with per-frame motion."""
    if frames < 2:
        raise ValueError("T must be >= 2")
    if height < 1 or width < 1:
        raise ValueError("H and W must be positive")
    if motif not in MOTIFS:
        raise ValueError(f"unknown motif {motif!r}; choose from {', '.join(MOTIFS)}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    out = np.zeros((frames, 3, height, width))
    if motif == "blobs":
        n_blobs = 3
        pos = rng.uniform(0.2, 0.8, size=(n_blobs, 2)) * [height, width]
        vel = rng.uniform(-1.0, 1.0, size=(n_blobs, 2)) * [height, width] / (2.0 * frames)
        radius = rng.uniform(0.12, 0.25, size=n_blobs) * min(height, width)
        color = rng.uniform(0.15, 1.0, size=(n_blobs, 3))
        background = rng.uniform(0.05, 0.3, size=3)
        for t in range(frames):
            img = np.broadcast_to(background[:, None, None], (3, height, width)).copy()
            for k in range(n_blobs):
                cy, cx = pos[k] + vel[k] * t
                r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius[k] ** 2
                alpha = np.exp(-r2)
                img = img * (1 - alpha) + color[k][:, None, None] * alpha
            out[t] = img
    elif motif == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        for t in range(frames):
            phase = t / frames
            u = (np.cos(angle) * yy / height + np.sin(angle) * xx / width + phase) % 1.0
            out[t] = c0[:, None, None] * (1 - u) + c1[:, None, None] * u
    else:
        cell = max(2, min(height, width) // 4)
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
        for t in range(frames):
            shift = t
            board = (((yy.astype(int) + shift) // cell + (xx.astype(int) + 2 * shift) // cell) % 2).astype(float)
            out[t] = c0[:, None, None] * (1 - board) + c1[:, None, None] * board
    return VideoClip(np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8))
