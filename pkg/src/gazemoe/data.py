"""Procedural gaze dataset.

Each sample is a 32x32 RGB cartoon face: a textured background, a skin
ellipse and two eyes whose pupils are displaced according to the gaze
direction. Illumination (tint + directional falloff), background texture and
global brightness are nuisance factors the model must learn to ignore.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from gazemoe.errors import ContractError, IntegrityError

YAW_RANGE = (-math.pi / 2, math.pi / 2)
PITCH_RANGE = (-math.pi / 3, math.pi / 3)
BRIGHTNESS_RANGE = (0.2, 1.0)
NUM_ILLUM = 4
NUM_BG = 4
DEFAULT_SIZE = 32

_ILLUM_TINT = np.array([
    [1.00, 1.00, 1.00],
    [1.00, 0.82, 0.62],
    [0.70, 0.85, 1.00],
    [0.85, 1.00, 0.75],
])
_BG_TINT = np.array([
    [0.55, 0.60, 0.70],
    [0.70, 0.55, 0.45],
    [0.45, 0.65, 0.45],
    [0.60, 0.50, 0.65],
])
_SKIN = np.array([0.88, 0.68, 0.55])
_SCLERA = np.array([0.96, 0.96, 0.94])
_PUPIL = np.array([0.10, 0.07, 0.06])


@dataclass(frozen=True)
class Latents:
    yaw: float
    pitch: float
    illum_id: int
    bg_id: int
    brightness: float

    def validate(self) -> None:
        checks = [
            ("yaw", YAW_RANGE[0] <= self.yaw <= YAW_RANGE[1]),
            ("pitch", PITCH_RANGE[0] <= self.pitch <= PITCH_RANGE[1]),
            ("illum_id", 0 <= int(self.illum_id) < NUM_ILLUM and float(self.illum_id).is_integer()),
            ("bg_id", 0 <= int(self.bg_id) < NUM_BG and float(self.bg_id).is_integer()),
            ("brightness", BRIGHTNESS_RANGE[0] <= self.brightness <= BRIGHTNESS_RANGE[1]),
        ]
        bad = [name for name, ok in checks if not ok]
        if bad:
            raise ValueError(f"latents out of range: {', '.join(bad)} in {self}")


@dataclass
class GazeSample:
    latents: Latents
    image: np.ndarray  # (H, W, 3), values in [0, 1]
    gaze: np.ndarray  # (3,), unit norm


def gaze_from_angles(yaw, pitch) -> np.ndarray:
    """Unit gaze vector (x right, y up, z towards the camera axis)."""
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1)


def angles_from_gaze(gaze) -> Tuple[np.ndarray, np.ndarray]:
    gaze = np.asarray(gaze, dtype=np.float64)
    yaw = np.arctan2(gaze[..., 0], gaze[..., 2])
    pitch = np.arcsin(np.clip(gaze[..., 1], -1.0, 1.0))
    return yaw, pitch


def _soft_mask(dist: np.ndarray, sharpness: float = 3.0) -> np.ndarray:
    # dist < 0 inside the shape; smooth edge keeps pupil motion continuous in pixel space
    return 1.0 / (1.0 + np.exp(sharpness * dist))


def _background(bg_id: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if bg_id == 0:
        pattern = 0.5 + 0.35 * np.sin(2 * np.pi * xx / 6.0)
    elif bg_id == 1:
        pattern = 0.5 + 0.35 * np.sin(2 * np.pi * yy / 5.0)
    elif bg_id == 2:
        pattern = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 0.25, 0.8)
    else:
        pattern = 0.15 + 0.7 * (xx + yy) / (xx.max() + yy.max())
    return pattern[..., None] * _BG_TINT[bg_id]


def _light_map(illum_id: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    size = xx.max()
    if illum_id == 0:
        falloff = np.ones_like(xx, dtype=np.float64)
    elif illum_id == 1:
        falloff = 1.0 - 0.45 * xx / size
    elif illum_id == 2:
        falloff = 0.55 + 0.45 * xx / size
    else:
        falloff = 1.0 - 0.45 * yy / size
    return falloff[..., None] * _ILLUM_TINT[illum_id]


def render(latents: Latents, size: int = DEFAULT_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 32.0
    img = _background(int(latents.bg_id), yy, xx)

    face = _soft_mask(np.sqrt(((xx - 16 * s) / (12.5 * s)) ** 2 + ((yy - 17 * s) / (13.5 * s)) ** 2) - 1.0, 8.0)
    img = img * (1 - face[..., None]) + face[..., None] * _SKIN

    gx, gy, _ = gaze_from_angles(latents.yaw, latents.pitch)
    for cx in (9.5 * s, 22.5 * s):
        cy = 13.5 * s
        sclera = _soft_mask((np.sqrt(((xx - cx) / (4.6 * s)) ** 2 + ((yy - cy) / (3.0 * s)) ** 2) - 1.0) * 3.0 * s)
        px = cx + 2.9 * s * gx
        py = cy - 2.0 * s * gy
        pupil = _soft_mask(np.sqrt((xx - px) ** 2 + (yy - py) ** 2) - 1.7 * s) * sclera
        img = img * (1 - sclera[..., None]) + sclera[..., None] * _SCLERA
        img = img * (1 - pupil[..., None]) + pupil[..., None] * _PUPIL

    img = img * _light_map(int(latents.illum_id), yy, xx) * latents.brightness
    return np.clip(img, 0.0, 1.0)


def generate_sample(latents: Latents, size: int = DEFAULT_SIZE) -> GazeSample:
    latents.validate()
    return GazeSample(latents=latents, image=render(latents, size), gaze=gaze_from_angles(latents.yaw, latents.pitch))


def sample_latents(rng: np.random.Generator, n: int) -> List[Latents]:
    yaw = rng.uniform(*YAW_RANGE, size=n)
    pitch = rng.uniform(*PITCH_RANGE, size=n)
    illum = rng.integers(0, NUM_ILLUM, size=n)
    bg = rng.integers(0, NUM_BG, size=n)
    bright = rng.uniform(*BRIGHTNESS_RANGE, size=n)
    return [Latents(float(yaw[i]), float(pitch[i]), int(illum[i]), int(bg[i]), float(bright[i])) for i in range(n)]


@dataclass
class GazeSplit:
    """Array-of-structs view of a list of samples, plus their dataset indices."""

    indices: np.ndarray  # (n,) position in the generated sequence
    latents: np.ndarray  # (n, 5): yaw, pitch, illum_id, bg_id, brightness
    images: np.ndarray  # (n, H, W, 3) float32
    gaze: np.ndarray  # (n, 3) float32

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_samples(cls, indices, samples: List[GazeSample]) -> "GazeSplit":
        size = samples[0].image.shape[0] if samples else DEFAULT_SIZE
        lat = np.array([[s.latents.yaw, s.latents.pitch, s.latents.illum_id, s.latents.bg_id, s.latents.brightness]
                        for s in samples], dtype=np.float64).reshape(-1, 5)
        images = np.stack([s.image for s in samples]).astype(np.float32) if samples else np.zeros((0, size, size, 3), np.float32)
        gaze = np.stack([s.gaze for s in samples]).astype(np.float32) if samples else np.zeros((0, 3), np.float32)
        return cls(np.asarray(indices, dtype=np.int64), lat, images, gaze)

    def samples(self) -> Iterator[GazeSample]:
        for i in range(len(self)):
            y, p, il, bg, b = self.latents[i]
            yield GazeSample(Latents(float(y), float(p), int(il), int(bg), float(b)), self.images[i], self.gaze[i])


def split_sizes(n: int) -> Tuple[int, int, int]:
    """8:1:1 train/val/test partition sizes."""
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def make_dataset(n: int, seed: int, size: int = DEFAULT_SIZE) -> Tuple[GazeSplit, GazeSplit, GazeSplit]:
    if n < 10:
        raise ContractError(f"make_dataset needs n >= 10, got {n}")
    rng = np.random.default_rng(seed)
    latents = sample_latents(rng, n)
    samples = [generate_sample(lat, size) for lat in latents]
    order = rng.permutation(n)
    n_train, n_val, _ = split_sizes(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(GazeSplit.from_samples(idx, [samples[i] for i in idx]) for idx in parts)  # type: ignore[return-value]


# -- binary export --------------------------------------------------------------
#
# Layout (all little-endian):
#   magic   4 bytes  b"GZDS"
#   version u32      1
#   counts  3 x u32  n_train, n_val, n_test
#   height  u32, width u32
#   per sample, train then val then test:
#       u32 source index
#       5 x f32 latents (yaw, pitch, illum_id, bg_id, brightness)
#       H*W*3 x f32 image, row-major (row, column, channel)
#       3 x f32 gaze

DATASET_MAGIC = b"GZDS"
DATASET_VERSION = 1


def save_dataset(path: Union[str, Path], splits: Tuple[GazeSplit, GazeSplit, GazeSplit]) -> None:
    height, width = splits[0].images.shape[1:3]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I3I2I", DATASET_VERSION, *(len(s) for s in splits), height, width))
        for split in splits:
            for i in range(len(split)):
                fh.write(struct.pack("<I", int(split.indices[i])))
                fh.write(split.latents[i].astype("<f4").tobytes())
                fh.write(split.images[i].astype("<f4").tobytes())
                fh.write(split.gaze[i].astype("<f4").tobytes())


def load_dataset(path: Union[str, Path]) -> Tuple[GazeSplit, GazeSplit, GazeSplit]:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise IntegrityError(f"{path}: not a gaze dataset file")
    version, n_tr, n_va, n_te, height, width = struct.unpack_from("<I3I2I", raw, 4)
    if version != DATASET_VERSION:
        raise IntegrityError(f"{path}: unsupported dataset version {version}")
    pixels = height * width * 3
    record = np.dtype([("index", "<u4"), ("latents", "<f4", 5), ("image", "<f4", pixels), ("gaze", "<f4", 3)])
    offset = 4 + struct.calcsize("<I3I2I")
    total = n_tr + n_va + n_te
    if len(raw) != offset + total * record.itemsize:
        raise IntegrityError(f"{path}: truncated or padded dataset file")
    rec = np.frombuffer(raw, dtype=record, count=total, offset=offset)
    out = []
    start = 0
    for count in (n_tr, n_va, n_te):
        part = rec[start:start + count]
        out.append(GazeSplit(
            indices=part["index"].astype(np.int64),
            latents=part["latents"].astype(np.float64),
            images=part["image"].reshape(count, height, width, 3).astype(np.float32),
            gaze=part["gaze"].astype(np.float32),
        ))
        start += count
    return tuple(out)  # type: ignore[return-value]
