"""View-set ingestion, 2D feature extraction and bilinear feature sampling.

Images and feature maps are plain ``(H, W, C)`` float64 arrays.  Images hold
RGB in [0, 1]; feature maps hold arbitrary finite reals.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .binio import load_weights, save_weights
from .camera import Camera, SourceView, dump_cameras_json, load_cameras_json


class ViewSetError(ValueError):
    pass


class WeightShapeError(ValueError):
    pass


LUMA = np.array([0.299, 0.587, 0.114])
_VIEW_RE = re.compile(r"^view_(\d{3})\.png$")


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return np.clip(img, 0.0, 1.0)


def read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise ViewSetError(f"{path}: unreadable image ({e})") from e
    return arr.astype(np.float64) / 255.0


def write_png(path, image) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


@dataclass
class ViewSet:
    images: list[np.ndarray]
    cameras: list[Camera]
    views: list[SourceView] = field(default_factory=list)


def load_view_set(directory) -> ViewSet:
    directory = Path(directory)
    cam_path = directory / "cameras.json"
    if not cam_path.exists():
        raise ViewSetError(f"{directory}: missing cameras.json")
    pngs = sorted(p for p in directory.iterdir() if _VIEW_RE.match(p.name))
    views = load_cameras_json(cam_path)
    if len(pngs) != len(views):
        raise ViewSetError(
            f"{directory}: {len(pngs)} view images but {len(views)} camera entries"
        )
    if len(pngs) < 2:
        raise ViewSetError(f"{directory}: need at least 2 views, found {len(pngs)}")
    images = [read_png(p) for p in pngs]
    for p, img, v in zip(pngs, images, views):
        if img.shape[:2] != (v.camera.height, v.camera.width):
            raise ViewSetError(
                f"{p}: image is {img.shape[1]}x{img.shape[0]}, camera says "
                f"{v.camera.width}x{v.camera.height}"
            )
    return ViewSet(images, [v.camera for v in views], views)


def write_view_set(directory, images: Sequence[np.ndarray], views: Sequence[SourceView]) -> None:
    if len(images) != len(views):
        raise ViewSetError("images and views must be index-aligned")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_png(directory / f"view_{i:03d}.png", img)
    dump_cameras_json(views, directory / "cameras.json")


class ExtractorKind(str, enum.Enum):
    IDENTITY = "IDENTITY"
    GRADIENT_AUG = "GRADIENT_AUG"
    CONV_STACK = "CONV_STACK"


@dataclass(frozen=True)
class ConvLayerPlan:
    in_channels: int
    out_channels: int
    relu: bool = True


@dataclass
class FeatureExtractor:
    kind: ExtractorKind = ExtractorKind.GRADIENT_AUG
    plan: tuple[ConvLayerPlan, ...] = ()
    # per layer: (weight (Cout, Cin, 3, 3), bias (Cout,))
    weights: list[tuple[np.ndarray, np.ndarray]] | None = None

    def __post_init__(self):
        self.kind = ExtractorKind(self.kind)
        if self.kind is ExtractorKind.CONV_STACK:
            self._check_weights()

    def _check_weights(self):
        if self.weights is None or len(self.weights) != len(self.plan):
            raise WeightShapeError(
                f"layer plan has {len(self.plan)} layers, weights provide "
                f"{0 if self.weights is None else len(self.weights)}"
            )
        prev = 3
        for i, (layer, (w, b)) in enumerate(zip(self.plan, self.weights)):
            if layer.in_channels != prev:
                raise WeightShapeError(f"layer {i}: expects {layer.in_channels} inputs, chain gives {prev}")
            want = (layer.out_channels, layer.in_channels, 3, 3)
            if np.shape(w) != want or np.shape(b) != (layer.out_channels,):
                raise WeightShapeError(
                    f"layer {i}: weight {np.shape(w)} / bias {np.shape(b)}, expected {want} / ({layer.out_channels},)"
                )
            prev = layer.out_channels

    @property
    def out_channels(self) -> int:
        if self.kind is ExtractorKind.IDENTITY:
            return 3
        if self.kind is ExtractorKind.GRADIENT_AUG:
            return 5
        return self.plan[-1].out_channels if self.plan else 3

    @classmethod
    def from_weight_file(cls, path, plan: Sequence[ConvLayerPlan]) -> "FeatureExtractor":
        tensors = load_weights(path)
        if len(tensors) != 2 * len(plan):
            raise WeightShapeError(f"{path}: {len(tensors)} tensors for {len(plan)} layers")
        pairs = [
            (tensors[2 * i].astype(np.float64), tensors[2 * i + 1].astype(np.float64))
            for i in range(len(plan))
        ]
        return cls(ExtractorKind.CONV_STACK, tuple(plan), pairs)

    def save_weights(self, path) -> None:
        flat = [t for pair in (self.weights or []) for t in pair]
        save_weights(path, flat)


def conv2d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero padding.  x: (H, W, Cin)."""
    H, W, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((H, W, weight.shape[0]))
    for dy in range(3):
        for dx in range(3):
            out += xp[dy : dy + H, dx : dx + W, :] @ weight[:, :, dy, dx].T
    return out + bias


def extract_features(image: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if extractor.kind is ExtractorKind.IDENTITY:
        return img.copy()
    if extractor.kind is ExtractorKind.GRADIENT_AUG:
        luma = img @ LUMA
        gy, gx = _central_gradient(luma)
        return np.concatenate([img, gx[..., None], gy[..., None]], axis=-1)
    out = img
    for layer, (w, b) in zip(extractor.plan, extractor.weights):
        out = conv2d_same(out, w, b)
        if layer.relu:
            out = np.maximum(out, 0.0)
    return out


def _central_gradient(a: np.ndarray):
    # central differences inside, one-sided at the border
    if min(a.shape) < 2:
        return np.zeros_like(a), np.zeros_like(a)
    gy, gx = np.gradient(a)
    return gy, gx


def _lerp(a, b, t):
    # anchored on the nearer end: exact at t=0, t=1 and when a == b
    return np.where(t < 0.5, a + t * (b - a), b - (1.0 - t) * (b - a))


def sample_feature(fmap: np.ndarray, uv):
    """Bilinear lookup with pixel centers at integer coordinates.

    ``uv`` is (2,) or (N, 2).  Returns ``(values, valid)``; queries outside
    ``[0, W-1] x [0, H-1]`` give a zero vector with ``valid=False``.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    H, W, C = fmap.shape
    q = np.asarray(uv, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 2)
    u, v = q[:, 0], q[:, 1]
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(vc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    top = _lerp(fmap[y0, x0], fmap[y0, x1], fx)
    bot = _lerp(fmap[y1, x0], fmap[y1, x1], fx)
    out = _lerp(top, bot, fy)
    out = np.where(valid[:, None], out, 0.0)
    if single:
        return out[0], bool(valid[0])
    return out, valid
