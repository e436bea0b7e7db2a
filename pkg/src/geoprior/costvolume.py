"""Variance cost volume: construction, 3D convolution, trilinear queries, IO.

Voxel data is stored voxel-major as ``(Dx, Dy, Dz, C)`` float32, which is
also the on-disk precision.  Grid metadata is rounded to float32 on
construction so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .binio import FormatError, atomic_write, read_exact, read_f32_array, read_u32, write_u32
from .camera import Camera, project
from .features import sample_feature

VOLUME_MAGIC = b"GDVOL1"
DEFAULT_DIMS = (150, 150, 150)


class VolumeError(ValueError):
    pass


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass
class GridSpec:
    dims: tuple[int, int, int] = DEFAULT_DIMS
    origin: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    spacing: float = 2.0 / (DEFAULT_DIMS[0] - 1)

    @classmethod
    def from_bounds(cls, lo: float, hi: float, dims=DEFAULT_DIMS) -> "GridSpec":
        """Cube ``[lo, hi]^3`` with voxel centers on both faces."""
        dims = tuple(int(d) for d in dims)
        if len(set(dims)) != 1:
            raise VolumeError("from_bounds builds cubic grids; pass equal dims")
        return cls(dims, (lo, lo, lo), (hi - lo) / (dims[0] - 1))

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise VolumeError(f"grid dims must be >= 2 per axis, got {self.dims}")
        self.origin = tuple(_f32(o) for o in self.origin)
        self.spacing = _f32(self.spacing)
        if not self.spacing > 0:
            raise VolumeError("spacing must be positive")

    def centers(self) -> np.ndarray:
        """(Dx*Dy*Dz, 3) voxel centers in C order."""
        axes = [self.origin[a] + self.spacing * np.arange(self.dims[a]) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([c.reshape(-1) for c in g], axis=-1)


@dataclass
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray  # (Dx, Dy, Dz, C) float32
    validity: np.ndarray  # (Dx, Dy, Dz) uint16

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.validity = np.ascontiguousarray(self.validity, dtype=np.uint16)
        if self.data.ndim != 4 or self.data.shape[:3] != self.spec.dims:
            raise VolumeError(f"data shape {self.data.shape} does not match dims {self.spec.dims}")
        if self.validity.shape != self.spec.dims:
            raise VolumeError("validity shape does not match dims")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("voxel data must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self):
        return self.spec.dims

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.spec.origin)

    @property
    def spacing(self) -> float:
        return self.spec.spacing

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin
        return lo, lo + self.spacing * (np.array(self.dims) - 1)

    def valid_fraction(self) -> float:
        return float(np.count_nonzero(self.validity)) / self.validity.size

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.spec, self.data.copy(), self.validity.copy())

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.dims + (channels,), np.float32), np.zeros(spec.dims, np.uint16))


# --- aggregation ---------------------------------------------------------


def aggregate_variance(
    maps: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    spec: GridSpec,
    chunk: int = 1 << 16,
) -> VoxelGrid:
    """Per-channel population variance of the features each voxel projects to.

    Views whose projection is invalid are skipped.  Voxels seen by fewer than
    two views store a zero vector.  Per voxel the contributing values are
    summed in sorted order, so the result is bit-identical under any
    permutation of the views.  Values are shifted by their minimum before
    the two-pass variance.
    """
    n = len(maps)
    if n != len(cameras):
        raise VolumeError(f"{n} feature maps but {len(cameras)} cameras")
    if n < 2:
        raise VolumeError(f"variance aggregation needs >= 2 views, got {n}")
    channels = {np.shape(m)[2] for m in maps}
    if len(channels) != 1:
        raise VolumeError(f"feature maps disagree on channel count: {sorted(channels)}")
    C = channels.pop()
    for m, cam in zip(maps, cameras):
        if np.shape(m)[:2] != (cam.height, cam.width):
            raise VolumeError("feature map size does not match its camera")

    centers = spec.centers()
    total = centers.shape[0]
    data = np.zeros((total, C))
    count = np.zeros(total, dtype=np.int64)
    for start in range(0, total, chunk):
        pts = centers[start : start + chunk]
        vals = np.empty((n, pts.shape[0], C))
        ok = np.empty((n, pts.shape[0]), dtype=bool)
        for i, (fmap, cam) in enumerate(zip(maps, cameras)):
            uv, _, valid = project(cam, pts)
            vals[i], ok[i] = sample_feature(fmap, uv)
            ok[i] &= valid
        data[start : start + pts.shape[0]], count[start : start + pts.shape[0]] = _sorted_variance(vals, ok)
    validity = np.minimum(count, np.iinfo(np.uint16).max)
    return VoxelGrid(spec, data.reshape(spec.dims + (C,)), validity.reshape(spec.dims))


def _sorted_variance(vals: np.ndarray, ok: np.ndarray):
    n = vals.shape[0]
    cnt = ok.sum(axis=0)
    # invalid entries sort to the back, then get masked out
    s = np.sort(np.where(ok[..., None], vals, np.inf), axis=0)
    live = (np.arange(n)[:, None] < cnt[None, :])[..., None]
    # shift by the smallest value: equal samples then give exactly zero
    s = np.where(live, s - np.where(live[0], s[0], 0.0), 0.0)
    total = np.zeros(vals.shape[1:])
    for k in range(n):
        total = total + s[k]
    denom = np.maximum(cnt, 1).astype(np.float64)[:, None]
    mean = total / denom
    sq = np.zeros(vals.shape[1:])
    for k in range(n):
        d = s[k] - mean
        sq = sq + np.where(live[k], d * d, 0.0)
    var = sq / denom
    var = np.where((cnt >= 2)[:, None], var, 0.0)
    return var, cnt


# --- 3D convolution ------------------------------------------------------


@dataclass
class Conv3DLayer:
    weight: np.ndarray  # (Cout, Cin, 3, 3, 3)
    bias: np.ndarray  # (Cout,)
    relu: bool = False

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 5 or self.weight.shape[2:] != (3, 3, 3):
            raise VolumeError(f"conv3d weight must be (Cout, Cin, 3, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise VolumeError("conv3d bias length must equal Cout")


@dataclass
class Conv3DStack:
    layers: list[Conv3DLayer] = field(default_factory=list)

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i].weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise VolumeError(f"layer {i} input channels do not chain from layer {i - 1}")

    @property
    def in_channels(self) -> int | None:
        return self.layers[0].weight.shape[1] if self.layers else None

    @classmethod
    def identity(cls, channels: int) -> "Conv3DStack":
        w = np.zeros((channels, channels, 3, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1, 1] = 1.0
        return cls([Conv3DLayer(w, np.zeros(channels))])

    def tensors(self) -> list[np.ndarray]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    @classmethod
    def from_tensors(cls, tensors, relu_flags: Sequence[bool]) -> "Conv3DStack":
        if len(tensors) != 2 * len(relu_flags):
            raise VolumeError("tensor count does not match layer flags")
        return cls([Conv3DLayer(tensors[2 * i], tensors[2 * i + 1], bool(r)) for i, r in enumerate(relu_flags)])


def conv3d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3x3 cross-correlation, stride 1, zero padding.  x: (Dx, Dy, Dz, Cin)."""
    Dx, Dy, Dz, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((Dx, Dy, Dz, weight.shape[0]))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                w = weight[:, :, a, b, c]
                if not w.any():
                    continue
                out += xp[a : a + Dx, b : b + Dy, c : c + Dz, :] @ w.T
    return out + bias


def apply_conv3d(raw: VoxelGrid, f3d: Conv3DStack) -> VoxelGrid:
    if not f3d.layers:
        return raw.copy()
    if f3d.in_channels != raw.channels:
        raise VolumeError(f"stack expects {f3d.in_channels} channels, volume has {raw.channels}")
    mask = (raw.validity > 0)[..., None]
    x = raw.data.astype(np.float64)
    for layer in f3d.layers:
        x = conv3d_same(x, layer.weight, layer.bias)
        if layer.relu:
            x = np.maximum(x, 0.0)
        x = np.where(mask, x, 0.0)
    return VoxelGrid(raw.spec, x, raw.validity.copy())


# --- trilinear queries ---------------------------------------------------


def trilinear_corners(points, origin, spacing: float, dims):
    """Corner indices and weights for trilinear lookup.

    Returns ``(idx (N, 8, 3), weights (N, 8), inside (N,))``; works on numpy
    arrays or torch tensors.  Points outside the voxel-center extent get
    zero weights.
    """
    is_t = torch.is_tensor(points)
    lib = torch if is_t else np
    if is_t:
        origin = torch.as_tensor(np.asarray(origin), dtype=points.dtype)
        hi = torch.as_tensor(np.asarray(dims) - 1, dtype=points.dtype)
    else:
        points = np.asarray(points, dtype=np.float64)
        origin = np.asarray(origin, dtype=np.float64)
        hi = np.asarray(dims, dtype=np.float64) - 1
    g = (points - origin) / spacing
    inside = ((g >= 0) & (g <= hi)).all(-1) if is_t else np.all((g >= 0) & (g <= hi), axis=-1)
    gd = g.detach() if is_t else g
    i0 = lib.floor(gd)
    i0 = lib.minimum(lib.maximum(i0, lib.zeros_like(i0)), hi - 1)
    f = g - i0
    i0 = i0.long() if is_t else i0.astype(np.int64)
    idx, wts = [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                off = (cx, cy, cz)
                w = 1.0
                for a in range(3):
                    w = w * (f[..., a] if off[a] else 1.0 - f[..., a])
                idx.append(i0 + (torch.tensor(off) if is_t else np.array(off)))
                wts.append(w)
    idx = lib.stack(idx, -2) if is_t else np.stack(idx, -2)
    wts = lib.stack(wts, -1) if is_t else np.stack(wts, -1)
    wts = wts * inside[..., None]
    return idx, wts, inside


def interpolate(data, origin, spacing, points):
    """Trilinear interpolation of ``data`` (Dx, Dy, Dz, C) at points (N, 3).

    Differentiable w.r.t. both ``data`` and ``points`` when given tensors.
    """
    dims = tuple(data.shape[:3])
    idx, w, _ = trilinear_corners(points, origin, spacing, dims)
    vals = data[idx[..., 0], idx[..., 1], idx[..., 2]]  # (N, 8, C)
    return (w[..., None] * vals).sum(-2)


def query_volume(grid: VoxelGrid, x) -> np.ndarray:
    """Trilinear feature at x (3,) or (N, 3); zero outside the grid."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = interpolate(grid.data.astype(np.float64), grid.origin, grid.spacing, x.reshape(-1, 3))
    return out[0] if single else out


def query_weights(grid: VoxelGrid, x):
    """dV(x)/d(voxel data): the 8 corner indices and their trilinear weights."""
    idx, w, _ = trilinear_corners(np.asarray(x, dtype=np.float64).reshape(1, 3), grid.origin, grid.spacing, grid.dims)
    return idx[0], w[0]


# --- GDVOL1 --------------------------------------------------------------


def write_volume(f, grid: VoxelGrid) -> None:
    f.write(VOLUME_MAGIC)
    for d in grid.dims:
        write_u32(f, d)
    write_u32(f, grid.channels)
    f.write(struct.pack("<f", grid.spacing))
    f.write(struct.pack("<3f", *grid.spec.origin))
    f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(grid.validity, dtype="<u2").tobytes())


def read_volume(f) -> VoxelGrid:
    magic = read_exact(f, len(VOLUME_MAGIC))
    if magic != VOLUME_MAGIC:
        raise FormatError(f"bad volume magic {magic!r}")
    dims = tuple(read_u32(f) for _ in range(3))
    channels = read_u32(f)
    (spacing,) = struct.unpack("<f", read_exact(f, 4))
    origin = struct.unpack("<3f", read_exact(f, 12))
    nvox = dims[0] * dims[1] * dims[2]
    data = read_f32_array(f, nvox * channels).reshape(dims + (channels,))
    validity = np.frombuffer(read_exact(f, 2 * nvox), dtype="<u2").reshape(dims)
    try:
        spec = GridSpec(dims, origin, spacing)
        return VoxelGrid(spec, data, validity)
    except VolumeError as e:
        raise FormatError(f"invalid volume header: {e}") from e


def save_volume(grid: VoxelGrid, path) -> None:
    with atomic_write(path) as f:
        write_volume(f, grid)


def load_volume(path) -> VoxelGrid:
    with open(path, "rb") as f:
        grid = read_volume(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after volume payload")
    return grid
