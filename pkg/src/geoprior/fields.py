"""Neural field decoders over the cost volume.

Everything here is torch float64.  A :class:`FieldSet` bundles the learnable
cost volume, the frozen geometry decoder, the hash-grid texture encoding and
its color decoder, and answers SDF / color queries at world points.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .binio import FormatError, atomic_write, read_exact, read_f32_array, read_u32, read_weights, write_u32, write_weights
from .costvolume import VoxelGrid, interpolate, read_volume, write_volume

DTYPE = torch.float64
FIELD_MAGIC = b"GDFLD1"
HASH_PRIMES = (1, 2654435761, 805459861)


class FieldShapeError(ValueError):
    pass


# --- positional encoding -------------------------------------------------


@dataclass(frozen=True)
class PositionalEncoding:
    levels: int = 6
    include_input: bool = True

    @property
    def dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.levels)


def positional_encode(x, enc: PositionalEncoding):
    """sin/cos(2^k pi x) per axis and level, grouped by axis."""
    is_t = torch.is_tensor(x)
    xt = x if is_t else torch.as_tensor(np.asarray(x, dtype=np.float64))
    single = xt.ndim == 1
    xt = xt.reshape(-1, 3)
    parts = [xt] if enc.include_input else []
    if enc.levels:
        freqs = (2.0 ** torch.arange(enc.levels, dtype=xt.dtype)) * math.pi
        ang = xt[:, :, None] * freqs  # (N, 3, L)
        trig = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (N, 3, L, 2)
        parts.append(trig.reshape(xt.shape[0], -1))
    out = torch.cat(parts, dim=-1) if parts else xt[:, :0]
    if single:
        out = out[0]
    return out if is_t else out.numpy()


# --- MLP -----------------------------------------------------------------


class MLP(nn.Module):
    """Fully connected stack; hidden layers share one activation."""

    def __init__(
        self,
        widths: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str | None = None,
        softplus_beta: float = 100.0,
    ):
        super().__init__()
        if len(widths) < 2:
            raise FieldShapeError("an MLP needs at least input and output widths")
        if hidden_activation not in ("relu", "softplus"):
            raise FieldShapeError(f"unknown activation {hidden_activation!r}")
        if output_activation not in (None, "sigmoid"):
            raise FieldShapeError(f"unknown output activation {output_activation!r}")
        self.widths = [int(w) for w in widths]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.softplus_beta = float(softplus_beta)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(self.widths[:-1], self.widths[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise FieldShapeError(f"MLP expects {self.widths[0]} inputs, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                if self.hidden_activation == "softplus":
                    x = nn.functional.softplus(x, beta=self.softplus_beta)
                else:
                    x = torch.relu(x)
        if self.output_activation == "sigmoid":
            x = torch.sigmoid(x)
        return x

    def config(self) -> dict:
        return {
            "widths": self.widths,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "softplus_beta": self.softplus_beta,
        }

    def tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight.detach().numpy().copy(), layer.bias.detach().numpy().copy()]
        return out

    def load_tensors(self, tensors: Sequence[np.ndarray]) -> None:
        if len(tensors) != 2 * len(self.layers):
            raise FieldShapeError(f"expected {2 * len(self.layers)} tensors, got {len(tensors)}")
        with torch.no_grad():
            for i, layer in enumerate(self.layers):
                w, b = np.asarray(tensors[2 * i]), np.asarray(tensors[2 * i + 1])
                if w.shape != tuple(layer.weight.shape) or b.shape != tuple(layer.bias.shape):
                    raise FieldShapeError(
                        f"layer {i}: got {w.shape}/{b.shape}, expected "
                        f"{tuple(layer.weight.shape)}/{tuple(layer.bias.shape)}"
                    )
                layer.weight.copy_(torch.as_tensor(w, dtype=DTYPE))
                layer.bias.copy_(torch.as_tensor(b, dtype=DTYPE))


def geometric_init(mlp: MLP, radius: float, volume_cols: slice, volume_std: float, gen: torch.Generator):
    """Start the geometry decoder near the SDF of a sphere of ``radius``.

    Only the raw xyz inputs (first three columns) feed the sphere shape; the
    cost-volume columns get small random weights so the volume still steers
    the field.
    """
    with torch.no_grad():
        n = len(mlp.layers)
        for i, layer in enumerate(mlp.layers):
            out_dim, in_dim = layer.weight.shape
            if i == n - 1:
                w = math.sqrt(math.pi) / math.sqrt(in_dim) + 1e-4 * torch.randn(out_dim, in_dim, generator=gen, dtype=DTYPE)
                layer.weight.copy_(w)
                layer.bias.fill_(-radius)
            else:
                std = math.sqrt(2.0) / math.sqrt(out_dim)
                w = std * torch.randn(out_dim, in_dim, generator=gen, dtype=DTYPE)
                if i == 0:
                    w[:, 3:] = 0.0
                    w[:, volume_cols] = volume_std * torch.randn(out_dim, volume_cols.stop - volume_cols.start, generator=gen, dtype=DTYPE)
                layer.weight.copy_(w)
                layer.bias.zero_()


# --- hash encoding -------------------------------------------------------


def hash_corner(coords: torch.Tensor, table_size: int) -> torch.Tensor:
    """Spatial hash of integer grid coordinates (..., 3) into [0, table_size)."""
    h = coords[..., 0] * HASH_PRIMES[0]
    h = h ^ (coords[..., 1] * HASH_PRIMES[1])
    h = h ^ (coords[..., 2] * HASH_PRIMES[2])
    return h % table_size


class HashEncoding(nn.Module):
    def __init__(
        self,
        levels: int = 8,
        table_size: int = 2**14,
        features_per_level: int = 2,
        base_resolution: int = 16,
        growth_factor: float = 1.5,
        init_scale: float = 1e-4,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if table_size <= 0 or table_size & (table_size - 1):
            raise FieldShapeError(f"table size must be a power of two, got {table_size}")
        if not growth_factor > 1:
            raise FieldShapeError("growth factor must exceed 1")
        self.levels = int(levels)
        self.table_size = int(table_size)
        self.features_per_level = int(features_per_level)
        self.base_resolution = int(base_resolution)
        self.growth_factor = float(np.float32(growth_factor))
        t = (torch.rand(self.levels, self.table_size, self.features_per_level, generator=generator, dtype=DTYPE) * 2 - 1) * init_scale
        self.tables = nn.Parameter(t)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth_factor**level))

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        x01 = x01.clamp(0.0, 1.0)
        feats = []
        for level in range(self.levels):
            res = self.resolution(level)
            g = x01 * res
            i0 = torch.floor(g.detach()).clamp(max=res - 1)
            f = g - i0
            i0 = i0.long()
            acc = 0.0
            for cx in (0, 1):
                for cy in (0, 1):
                    for cz in (0, 1):
                        off = torch.tensor((cx, cy, cz))
                        w = (f[:, 0] if cx else 1 - f[:, 0]) * (f[:, 1] if cy else 1 - f[:, 1]) * (f[:, 2] if cz else 1 - f[:, 2])
                        idx = hash_corner(i0 + off, self.table_size)
                        acc = acc + w[:, None] * self.tables[level][idx]
            feats.append(acc)
        return torch.cat(feats, dim=-1)

    def config(self) -> dict:
        return {
            "levels": self.levels,
            "table_size": self.table_size,
            "features_per_level": self.features_per_level,
            "base_resolution": self.base_resolution,
            "growth_factor": self.growth_factor,
        }


# --- multi-view texture prior (stage-1 decoder) ----------------------------


class MultiViewTextureDecoder(nn.Module):
    """Blends per-view sampled colors with softmax weights.

    The blending MLP scores each view from (view feature, V(x), view-direction
    delta).  The output is a convex combination of the view colors.
    """

    def __init__(self, feature_channels: int, volume_channels: int, hidden: int = 16, generator=None):
        super().__init__()
        widths = [feature_channels + volume_channels + 3, hidden, 1] if hidden else [feature_channels + volume_channels + 3, 1]
        self.mlp = MLP(widths, "relu")
        if generator is not None:
            with torch.no_grad():
                for layer in self.mlp.layers:
                    layer.weight.normal_(0, 0.1, generator=generator)
                    layer.bias.zero_()

    def logits(self, volume_feature, view_features, deltas):
        vf = volume_feature[..., None, :].expand(*view_features.shape[:-1], volume_feature.shape[-1])
        return self.mlp(torch.cat([view_features, vf, deltas], dim=-1))[..., 0]

    def forward(self, volume_feature, view_features, view_colors, deltas):
        return blend_colors(self.logits(volume_feature, view_features, deltas), view_colors)


def blend_colors(logits: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Softmax over views (dim -1 of logits) applied to colors (..., V, 3)."""
    w = torch.softmax(logits, dim=-1)
    return (w[..., None] * colors).sum(-2).clamp(0.0, 1.0)


# --- field set -----------------------------------------------------------


class FieldSet(nn.Module):
    """Learnable cost volume + frozen geometry decoder + hash texture field."""

    def __init__(
        self,
        volume: VoxelGrid,
        geometry: MLP,
        hash_encoding: HashEncoding,
        texture: MLP,
        encoding: PositionalEncoding = PositionalEncoding(),
        mv_texture: MultiViewTextureDecoder | None = None,
    ):
        super().__init__()
        if geometry.widths[0] != encoding.dim + volume.channels or geometry.widths[-1] != 1:
            raise FieldShapeError(
                f"geometry decoder takes {geometry.widths[0]} -> {geometry.widths[-1]}, needs "
                f"{encoding.dim + volume.channels} -> 1"
            )
        if texture.widths[0] != hash_encoding.out_dim + 3 or texture.widths[-1] != 3:
            raise FieldShapeError(
                f"texture decoder takes {texture.widths[0]} -> {texture.widths[-1]}, needs "
                f"{hash_encoding.out_dim + 3} -> 3"
            )
        self.spec = volume.spec
        self.volume = nn.Parameter(torch.as_tensor(volume.data.astype(np.float64)))
        self.register_buffer("validity", torch.as_tensor(volume.validity.astype(np.int32)))
        self.encoding = encoding
        self.geometry = geometry
        self.geometry.requires_grad_(False)
        self.hash = hash_encoding
        self.texture = texture
        self.mv_texture = mv_texture

    # -- construction
    @classmethod
    def build(
        cls,
        volume: VoxelGrid,
        seed: int = 0,
        pe_levels: int = 6,
        geometry_hidden: Sequence[int] = (64, 64),
        texture_hidden: int = 32,
        hash_config: dict | None = None,
        init_radius: float = 0.5,
    ) -> "FieldSet":
        gen = torch.Generator().manual_seed(seed)
        enc = PositionalEncoding(pe_levels, True)
        geo = MLP([enc.dim + volume.channels, *geometry_hidden, 1], "softplus")
        geometric_init(geo, init_radius, slice(enc.dim, enc.dim + volume.channels), 0.1, gen)
        h = HashEncoding(**(hash_config or {}), generator=gen)
        tex = MLP([h.out_dim + 3, texture_hidden, 3], "relu", "sigmoid")
        with torch.no_grad():
            for layer in tex.layers:
                layer.weight.normal_(0.0, 1.0 / math.sqrt(layer.weight.shape[1]), generator=gen)
                layer.bias.zero_()
        return cls(volume, geo, h, tex, enc)

    # -- geometry helpers
    @property
    def origin(self) -> np.ndarray:
        return np.array(self.spec.origin)

    @property
    def spacing(self) -> float:
        return self.spec.spacing

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin
        return lo, lo + self.spacing * (np.array(self.spec.dims) - 1)

    def to_unit(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds()
        lo_t = torch.as_tensor(lo, dtype=x.dtype)
        return ((x - lo_t) / torch.as_tensor(hi - lo, dtype=x.dtype)).clamp(0.0, 1.0)

    # -- queries
    def volume_feature(self, x: torch.Tensor) -> torch.Tensor:
        return interpolate(self.volume, self.origin, self.spacing, x)

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.cat([positional_encode(x, self.encoding), self.volume_feature(x)], dim=-1)
        return self.geometry(h)[..., 0]

    def sdf_and_gradient(self, x: torch.Tensor, create_graph: bool = False):
        """SDF and its spatial gradient, via autograd through the field."""
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            s = self.sdf(xg)
            (g,) = torch.autograd.grad(s.sum(), xg, create_graph=create_graph)
        return s, g

    def color(self, x: torch.Tensor) -> torch.Tensor:
        return self.texture(torch.cat([self.hash(self.to_unit(x)), x], dim=-1))

    # -- parameter blocks
    def parameter_blocks(self) -> dict[str, list[nn.Parameter]]:
        return {
            "volume": [self.volume],
            "hash": [self.hash.tables],
            "texture": list(self.texture.parameters()),
        }

    def geometry_checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.geometry.tensors():
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()

    def to_voxel_grid(self) -> VoxelGrid:
        return VoxelGrid(self.spec, self.volume.detach().numpy(), self.validity.numpy())

    def config(self) -> dict:
        return {
            "encoding": asdict(self.encoding),
            "geometry": self.geometry.config(),
            "texture": self.texture.config(),
            "hash": self.hash.config(),
            "mv_texture": None if self.mv_texture is None else self.mv_texture.mlp.config(),
        }


def _as_points(x) -> tuple[torch.Tensor, bool]:
    t = x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    single = t.ndim == 1
    return t.reshape(-1, 3).to(DTYPE), single


def decode_sdf(fieldset: FieldSet, x):
    pts, single = _as_points(x)
    s = fieldset.sdf(pts)
    return s[0] if single else s


def hash_encode(x, hash_encoding: HashEncoding):
    pts, single = _as_points(x)
    out = hash_encoding(pts)
    return out[0] if single else out


def decode_color(fieldset: FieldSet, x):
    pts, single = _as_points(x)
    c = fieldset.color(pts)
    return c[0] if single else c


def decode_color_mv(decoder: MultiViewTextureDecoder, volume_feature, view_features, view_colors, deltas):
    """Stage-1 view-blended color.  Shapes: (Cv,), (V, Cf), (V, 3), (V, 3)
    or with a leading batch dimension."""
    vf = torch.as_tensor(view_features, dtype=DTYPE)
    vc = torch.as_tensor(view_colors, dtype=DTYPE)
    dd = torch.as_tensor(deltas, dtype=DTYPE)
    if not (vf.shape[-2] == vc.shape[-2] == dd.shape[-2]) or vf.shape[-2] < 1:
        raise FieldShapeError("per-view features, colors and deltas must have matching view counts >= 1")
    return decoder(torch.as_tensor(volume_feature, dtype=DTYPE), vf, vc, dd)


# --- GDFLD1 checkpoint ---------------------------------------------------


def save_fieldset(fieldset: FieldSet, path) -> None:
    with atomic_write(path) as f:
        write_fieldset(f, fieldset)


def write_fieldset(f, fs: FieldSet) -> None:
    f.write(FIELD_MAGIC)
    header = json.dumps(fs.config(), sort_keys=True).encode()
    write_u32(f, len(header))
    f.write(header)
    write_volume(f, fs.to_voxel_grid())
    write_weights(f, fs.geometry.tensors())
    write_weights(f, fs.texture.tensors())
    h = fs.hash
    for v in (h.levels, h.table_size, h.features_per_level, h.base_resolution):
        write_u32(f, v)
    f.write(struct.pack("<f", h.growth_factor))
    f.write(np.ascontiguousarray(h.tables.detach().numpy(), dtype="<f4").tobytes())
    if fs.mv_texture is not None:
        write_weights(f, fs.mv_texture.mlp.tensors())


def load_fieldset(path) -> FieldSet:
    with open(path, "rb") as f:
        fs = read_fieldset(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after field checkpoint")
    return fs


def read_fieldset(f) -> FieldSet:
    magic = read_exact(f, len(FIELD_MAGIC))
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad field checkpoint magic {magic!r}")
    cfg = json.loads(read_exact(f, read_u32(f)))
    volume = read_volume(f)
    geo = MLP(**cfg["geometry"])
    geo.load_tensors(read_weights(f))
    tex = MLP(**cfg["texture"])
    tex.load_tensors(read_weights(f))
    L, T, F, nmin = (read_u32(f) for _ in range(4))
    (b,) = struct.unpack("<f", read_exact(f, 4))
    h = HashEncoding(L, T, F, nmin, b)
    with torch.no_grad():
        h.tables.copy_(torch.as_tensor(read_f32_array(f, L * T * F).reshape(L, T, F).astype(np.float64)))
    mv = None
    if cfg.get("mv_texture"):
        w = cfg["mv_texture"]["widths"]
        hidden = w[1] if len(w) == 3 else 0
        mv = MultiViewTextureDecoder(w[0] - volume.channels - 3, volume.channels, hidden)
        mv.mlp.load_tensors(read_weights(f))
    return FieldSet(volume, geo, h, tex, PositionalEncoding(**cfg["encoding"]), mv)


def fieldset_bytes(fs: FieldSet) -> bytes:
    buf = io.BytesIO()
    write_fieldset(buf, fs)
    return buf.getvalue()
