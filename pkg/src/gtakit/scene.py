"""Rotation-only synthetic scenes: a textured sphere seen from its center.

Cameras sit at the origin and only rotate. A rotation ``R`` is an extrinsic
(world to camera), so a camera-frame ray ``v`` points along ``R^T v`` in the
world. Camera axes: +x right, +y down, +z forward.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from . import groups

MAGIC = b"GTAS"
VERSION = 1
N_CONTEXT = 8


@dataclass(frozen=True)
class Intrinsics:
    sensor_w: float = 1.0
    sensor_h: float = 1.0
    focal: float = 4.0
    H: int = 32
    W: int = 32

    def __post_init__(self):
        if min(self.sensor_w, self.sensor_h, self.focal) <= 0 or min(self.H, self.W) <= 0:
            raise ValueError("intrinsics must be positive")


@dataclass(frozen=True, eq=False)
class Texture:
    """Equirectangular RGB image; rows run from latitude -pi/2 (up, -y) to +pi/2."""

    grid: np.ndarray
    seed: int


@dataclass(eq=False)
class SceneSample:
    context_images: np.ndarray     # (8, H, W, 3)
    context_rotations: np.ndarray  # (8, 3, 3)
    target_rotation: np.ndarray    # (3, 3)
    target_image: np.ndarray       # (H, W, 3)


# ---------------------------------------------------------------- texture

def _upsample_periodic(coarse: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear upsampling, periodic in columns and clamped in rows."""
    h, w = coarse.shape[:2]
    ys = (np.arange(H) + 0.5) / H * h - 0.5
    xs = (np.arange(W) + 0.5) / W * w - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0w, x1w = x0 % w, (x0 + 1) % w
    top = coarse[y0c][:, x0w] * (1 - fx) + coarse[y0c][:, x1w] * fx
    bot = coarse[y1c][:, x0w] * (1 - fx) + coarse[y1c][:, x1w] * fx
    return top * (1 - fy) + bot * fy


def make_texture(seed: int = 0, height: int = 256, width: int = 512, octaves: int = 6,
                 n_lines: int = 12) -> Texture:
    """Seeded multi-octave value noise overlaid with colored grid lines."""
    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, 3))
    amp, total = 1.0, 0.0
    for k in range(octaves):
        h, w = 2 * 2 ** k + 1, 4 * 2 ** k
        img += amp * _upsample_periodic(rng.uniform(size=(h, w, 3)), height, width)
        total += amp
        amp *= 0.6
    img /= total
    lo, hi = img.min(axis=(0, 1)), img.max(axis=(0, 1))
    img = (img - lo) / (hi - lo)
    # meridians and parallels at random positions, each with its own color
    lon_lines = rng.uniform(0, width, size=n_lines)
    lat_lines = rng.uniform(0.1 * height, 0.9 * height, size=n_lines // 2)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    for c in lon_lines:
        d = np.abs((cols - c + width / 2) % width - width / 2)
        mask = np.clip(1.5 - d, 0, 1)[None, :, None]
        img = img * (1 - mask) + rng.uniform(size=3) * mask
    for r in lat_lines:
        mask = np.clip(1.5 - np.abs(rows - r), 0, 1)[:, None, None]
        img = img * (1 - mask) + rng.uniform(size=3) * mask
    return Texture(np.clip(img, 0.0, 1.0).astype(np.float64), seed)


def longitude_autocorrelation(tex: Texture, shift_fraction: float = 0.25) -> float:
    """Pearson correlation between the texture and its longitude-shifted copy."""
    g = tex.grid
    s = np.roll(g, int(round(shift_fraction * g.shape[1])), axis=1)
    a, b = g - g.mean(), s - s.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


# ---------------------------------------------------------------- rendering

def camera_rays(K: Intrinsics) -> np.ndarray:
    """Unit camera-frame ray directions, shape ``(H, W, 3)``."""
    u = ((np.arange(K.W) + 0.5) / K.W - 0.5) * K.sensor_w
    v = ((np.arange(K.H) + 0.5) / K.H - 0.5) * K.sensor_h
    x, y = np.meshgrid(u, v)
    d = np.stack([x, y, np.full_like(x, K.focal)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def sample_texture(tex: Texture, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of world directions ``(..., 3)``; wraps in longitude."""
    g = tex.grid
    Ht, Wt = g.shape[:2]
    lon = np.arctan2(dirs[..., 0], dirs[..., 2])
    lat = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    col = (lon / (2 * np.pi) + 0.5) * Wt - 0.5
    row = (lat / np.pi + 0.5) * Ht - 0.5
    c0 = np.floor(col).astype(int)
    r0 = np.floor(row).astype(int)
    fc = (col - c0)[..., None]
    fr = (row - r0)[..., None]
    c0w, c1w = c0 % Wt, (c0 + 1) % Wt
    r0c, r1c = np.clip(r0, 0, Ht - 1), np.clip(r0 + 1, 0, Ht - 1)
    top = g[r0c, c0w] * (1 - fc) + g[r0c, c1w] * fc
    bot = g[r1c, c0w] * (1 - fc) + g[r1c, c1w] * fc
    return top * (1 - fr) + bot * fr


def render_view(tex: Texture, r, K: Intrinsics = Intrinsics()) -> np.ndarray:
    """Image ``(H, W, 3)`` seen by a camera with extrinsic rotation ``r``.

    ``r`` may also be a stack ``(N, 3, 3)``, giving ``(N, H, W, 3)``.
    """
    R = r.r if isinstance(r, groups.So3Rotation) else np.asarray(r, dtype=np.float64)
    rays = camera_rays(K)
    # world direction = R^T v, i.e. row-vector v @ R
    world = np.einsum("hwi,...ij->...hwj", rays, R)
    return sample_texture(tex, world)


# ---------------------------------------------------------------- scenes

def scene_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(index)]))


def sample_scene_rotations(rng: np.random.Generator) -> np.ndarray:
    """Nine rotations (8 context + target) re-expressed so the first is identity."""
    R = groups.sample_rotations(rng, N_CONTEXT + 1)
    ref_inv = R[0].T
    rel = R @ ref_inv
    rel[0] = np.eye(3)
    return rel


def make_scene(seed, texture: Optional[Texture] = None, K: Intrinsics = Intrinsics()) -> SceneSample:
    """One scene; ``seed`` is an int or a ``(base_seed, index)`` pair."""
    rng = scene_rng(*seed) if isinstance(seed, tuple) else np.random.default_rng(seed)
    tex = make_texture(0) if texture is None else texture
    R = sample_scene_rotations(rng)
    imgs = render_view(tex, R, K)
    return SceneSample(imgs[:N_CONTEXT], R[:N_CONTEXT], R[N_CONTEXT], imgs[N_CONTEXT])


def iter_scenes(base_seed: int, n_scenes: int, texture: Optional[Texture] = None,
                K: Intrinsics = Intrinsics()) -> Iterator[SceneSample]:
    tex = make_texture(0) if texture is None else texture
    for i in range(n_scenes):
        yield make_scene((base_seed, i), tex, K)


# ---------------------------------------------------------------- container

@dataclass(eq=False)
class Dataset:
    rotations: np.ndarray  # (N, V, 3, 3) float32, last view is the target
    images: np.ndarray     # (N, V, H, W, 3) float32

    def __len__(self) -> int:
        return self.rotations.shape[0]

    @property
    def context_rotations(self) -> np.ndarray:
        return self.rotations[:, :-1]

    @property
    def target_rotations(self) -> np.ndarray:
        return self.rotations[:, -1]

    @property
    def context_images(self) -> np.ndarray:
        return self.images[:, :-1]

    @property
    def target_images(self) -> np.ndarray:
        return self.images[:, -1]

    def subset(self, n: int) -> Dataset:
        return Dataset(self.rotations[:n], self.images[:n])


def write_dataset(path, scenes: Iterable[SceneSample], n_scenes: int) -> str:
    """Write the little-endian container and return its sha256 hex digest."""
    path = Path(path)
    h = hashlib.sha256()
    written = 0
    with open(path, "wb") as fh:
        def put(b):
            fh.write(b)
            h.update(b)

        put(MAGIC + struct.pack("<II", VERSION, n_scenes))
        for sc in scenes:
            rots = np.concatenate([sc.context_rotations, sc.target_rotation[None]])
            imgs = np.concatenate([sc.context_images, sc.target_image[None]])
            n_views, H, W = imgs.shape[:3]
            put(struct.pack("<III", n_views, H, W))
            for v in range(n_views):
                put(rots[v].astype("<f4").tobytes())
                put(imgs[v].astype("<f4").tobytes())
            written += 1
    if written != n_scenes:
        raise ValueError(f"expected {n_scenes} scenes, got {written}")
    return h.hexdigest()


class DatasetFormatError(ValueError):
    pass


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: not a GTAS container")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    off = 12
    rots, imgs = [], []
    for i in range(n):
        if off + 12 > len(buf):
            raise DatasetFormatError(f"{path}: truncated before scene {i}")
        n_views, H, W = struct.unpack_from("<III", buf, off)
        off += 12
        per_view = 9 + H * W * 3
        if off + 4 * n_views * per_view > len(buf):
            raise DatasetFormatError(f"{path}: scene {i} is truncated")
        block = np.frombuffer(buf, dtype="<f4", count=n_views * per_view, offset=off)
        block = block.reshape(n_views, per_view)
        rots.append(block[:, :9].reshape(n_views, 3, 3))
        imgs.append(block[:, 9:].reshape(n_views, H, W, 3))
        off += 4 * n_views * per_view
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes")
    if not n:
        return Dataset(np.zeros((0, N_CONTEXT + 1, 3, 3), np.float32),
                       np.zeros((0, N_CONTEXT + 1, 32, 32, 3), np.float32))
    return Dataset(np.stack(rots).astype(np.float32), np.stack(imgs).astype(np.float32))


def generate_dataset(path, base_seed: int, n_scenes: int, texture_seed: int = 0,
                     K: Intrinsics = Intrinsics()) -> str:
    tex = make_texture(texture_seed)
    return write_dataset(path, iter_scenes(base_seed, n_scenes, tex, K), n_scenes)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
