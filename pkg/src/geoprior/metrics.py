"""Evaluation harness: Frechet distance, retrieval scores, circular renders.

Embedding models sit behind :class:`EmbeddingProvider`.  The toy providers
are fixed random feature maps that make the harness runnable offline; real
image/text/point-cloud encoders plug in as external processes.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import struct
import subprocess
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .camera import Intrinsics, SphericalPose, look_at_pose
from .fields import FieldSet
from .mesh.raster import color_image, render_normal_map
from .mesh.tets import TriMesh, canonical_face_order, sample_surface_points
from .refine.providers import ProviderError, read_frame, write_frame
from .render import RenderConfig, render_image

EMBED_MAGIC = b"GDEM"
UNI3D_POINTS = 10_000
EVAL_VIEWS = 120


class MetricError(ValueError):
    pass


class EmbeddingKind(str, enum.Enum):
    TOY_DETERMINISTIC = "TOY_DETERMINISTIC"
    EXTERNAL = "EXTERNAL"


class Modality(str, enum.Enum):
    IMAGE = "IMAGE"
    TEXT = "TEXT"
    POINTCLOUD = "POINTCLOUD"


_MODALITY_CODE = {Modality.IMAGE: 0, Modality.TEXT: 1, Modality.POINTCLOUD: 2}


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; an all-zero row maps to the first basis vector."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    out = x / np.where(n > 0, n, 1.0)
    zero = n[..., 0] == 0
    if np.any(zero):
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out


class EmbeddingProvider:
    kind: EmbeddingKind
    modality: Modality
    dimension: int

    def embed_one(self, item) -> np.ndarray:
        raise NotImplementedError

    def embed(self, items: Sequence) -> np.ndarray:
        """(N, D) unit-norm embeddings."""
        if len(items) == 0:
            return np.zeros((0, self.dimension))
        return normalize_rows(np.stack([np.asarray(self.embed_one(x), dtype=np.float64) for x in items]))


class ToyEmbedding(EmbeddingProvider):
    """Deterministic random-feature encoder.

    IMAGE: fixed Gaussian projection of the flattened pixels.
    POINTCLOUD: mean of random Fourier features, so point order is irrelevant.
    TEXT: Gaussian vector seeded by the SHA-256 of the string.
    ``encoder`` replaces the built-in map with any item -> vector function.
    """

    kind = EmbeddingKind.TOY_DETERMINISTIC

    def __init__(self, modality: Modality, dimension: int = 64, seed: int = 0, encoder: Callable | None = None):
        if dimension < 1:
            raise MetricError("embedding dimension must be >= 1")
        self.modality = Modality(modality)
        self.dimension = int(dimension)
        self.seed = int(seed)
        self.encoder = encoder
        self._proj: dict[int, np.ndarray] = {}

    def _projection(self, n: int) -> np.ndarray:
        if n not in self._proj:
            rng = np.random.default_rng([self.seed, n])
            self._proj[n] = rng.standard_normal((self.dimension, n)) / np.sqrt(n)
        return self._proj[n]

    def embed_one(self, item) -> np.ndarray:
        if self.encoder is not None:
            return np.asarray(self.encoder(item), dtype=np.float64)
        if self.modality is Modality.TEXT:
            digest = hashlib.sha256(str(item).encode("utf-8")).digest()
            rng = np.random.default_rng([self.seed, *np.frombuffer(digest, dtype="<u4")])
            return rng.standard_normal(self.dimension)
        x = np.asarray(item, dtype=np.float64)
        if self.modality is Modality.POINTCLOUD:
            rng = np.random.default_rng([self.seed, 3])
            w = rng.standard_normal((self.dimension, 3)) * 2.0
            b = rng.uniform(0.0, 2.0 * np.pi, self.dimension)
            return np.cos(x.reshape(-1, 3) @ w.T + b).mean(axis=0)
        flat = x.reshape(-1)
        return self._projection(flat.size) @ (flat - 0.5)


def encode_embed_request(modality: Modality, item) -> bytes:
    code = _MODALITY_CODE[Modality(modality)]
    if Modality(modality) is Modality.TEXT:
        body = str(item).encode("utf-8")
        return EMBED_MAGIC + struct.pack("<II", code, 0) + body
    x = np.ascontiguousarray(item, dtype="<f4")
    head = struct.pack("<II", code, x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return EMBED_MAGIC + head + x.tobytes()


def decode_embed_request(payload: bytes):
    if payload[:4] != EMBED_MAGIC:
        raise ProviderError(f"bad embedding request magic {payload[:4]!r}")
    code, ndim = struct.unpack("<II", payload[4:12])
    modality = {v: k for k, v in _MODALITY_CODE.items()}[code]
    if modality is Modality.TEXT:
        return modality, payload[12:].decode("utf-8")
    shape = struct.unpack(f"<{ndim}I", payload[12 : 12 + 4 * ndim])
    data = np.frombuffer(payload[12 + 4 * ndim :], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ProviderError("embedding request payload does not match its shape")
    return modality, data.reshape(shape)


class ExternalEmbedding(EmbeddingProvider):
    """Encoder in another process, one length-prefixed frame per item.

    The response is ``dimension`` little-endian float32 values.
    """

    kind = EmbeddingKind.EXTERNAL

    def __init__(self, modality: Modality, dimension: int, command=None, reader=None, writer=None):
        self.modality = Modality(modality)
        self.dimension = int(dimension)
        self._proc = None
        if command is not None:
            self._proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            reader, writer = self._proc.stdout, self._proc.stdin
        if reader is None or writer is None:
            raise ProviderError("external embedding needs a command or a reader/writer pair")
        self._r, self._w = reader, writer

    def embed_one(self, item) -> np.ndarray:
        write_frame(self._w, encode_embed_request(self.modality, item))
        payload = read_frame(self._r)
        if payload is None or len(payload) != 4 * self.dimension:
            raise ProviderError(f"expected {self.dimension} float32 values from the encoder")
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None


def serve_embeddings(provider: EmbeddingProvider, reader, writer) -> int:
    """Answer framed embedding requests with ``provider`` until EOF."""
    n = 0
    while (payload := read_frame(reader)) is not None:
        modality, item = decode_embed_request(payload)
        if modality is not provider.modality:
            raise ProviderError(f"provider serves {provider.modality.value}, got {modality.value}")
        vec = provider.embed([item])[0]
        write_frame(writer, np.ascontiguousarray(vec, dtype="<f4").tobytes())
        n += 1
    return n


# --- distribution distance ---------------------------------------------------


@dataclass
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(self.mean.size, self.mean.size)


def fit_gaussian(embeddings) -> GaussianFit:
    """Sample mean and unbiased covariance, symmetrized."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise MetricError("fit_gaussian needs at least 2 samples")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (x.shape[0] - 1)
    return GaussianFit(mu, 0.5 * (cov + cov.T))


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    sa = psd_sqrt(a.covariance)
    inner = sa @ b.covariance @ sa
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_cross)
    return max(val, 0.0)


# --- retrieval ----------------------------------------------------------------


def r_score(items, captions, correct) -> float:
    """Fraction of items whose most similar caption is the correct one.

    Ties go to the lowest caption index.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.float64))
    captions = np.atleast_2d(np.asarray(captions, dtype=np.float64))
    correct = np.broadcast_to(np.asarray(correct, dtype=np.int64), (len(items),))
    if len(items) == 0 or len(captions) == 0:
        raise MetricError("r_score needs at least one item and one caption")
    if np.any(correct < 0) or np.any(correct >= len(captions)):
        raise MetricError("correct caption index out of range")
    sims = items @ captions.T
    return float(np.mean(np.argmax(sims, axis=1) == correct))


def uni3d_score(
    mesh: TriMesh,
    captions: Sequence[str],
    point_provider: EmbeddingProvider,
    text_provider: EmbeddingProvider,
    correct: int,
    n_points: int = UNI3D_POINTS,
    seed: int = 0,
) -> float:
    """Retrieval score of a mesh's surface point cloud against captions.

    Faces are put in canonical order before sampling, so the score does not
    depend on how the mesh lists its faces.
    """
    if point_provider.modality is not Modality.POINTCLOUD or text_provider.modality is not Modality.TEXT:
        raise MetricError("uni3d_score needs a POINTCLOUD and a TEXT provider")
    if mesh.is_empty:
        raise MetricError("uni3d_score on an empty mesh")
    pts, _, _ = sample_surface_points(canonical_face_order(mesh), n_points, seed)
    emb = point_provider.embed([pts])
    return r_score(emb, text_provider.embed(list(captions)), correct)


# --- circular evaluation renders ------------------------------------------------


@dataclass
class EvalFrame:
    azimuth: float
    pose: SphericalPose
    image: np.ndarray  # (H, W, 3) in [0, 1]


def circle_azimuths(count: int, offset: float = 0.0) -> list[float]:
    if count < 1:
        raise MetricError("eval circle needs count >= 1")
    return [float((offset + i * 360.0 / count) % 360.0) for i in range(count)]


def eval_circle(
    subject,
    count: int = EVAL_VIEWS,
    elevation: float = 15.0,
    radius: float = 2.5,
    resolution: int = 64,
    azimuth_offset: float = 0.0,
    render_config: RenderConfig | None = None,
    focal_ratio: float = 1.25,
) -> list[EvalFrame]:
    """Renders at ``count`` equally spaced azimuths around the subject.

    A :class:`FieldSet` is volume rendered; a :class:`TriMesh` is shaded with
    its vertex colors, or drawn as a normal map when it has none.
    """
    intr = Intrinsics(focal_ratio * resolution, resolution, resolution)
    frames = []
    for az in circle_azimuths(count, azimuth_offset):
        pose = SphericalPose(az, elevation, radius)
        cam = look_at_pose(pose, intrinsics=intr)
        if isinstance(subject, FieldSet):
            with torch.no_grad():
                img = render_image(subject, cam, render_config or RenderConfig(), with_normals=False).color.numpy()
        elif isinstance(subject, TriMesh):
            if subject.colors is not None:
                with torch.no_grad():
                    img = color_image(subject, cam).numpy()
            else:
                img = render_normal_map(subject, cam)
        else:
            raise MetricError(f"cannot render {type(subject).__name__}")
        frames.append(EvalFrame(az, pose, img))
    return frames


# --- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    fid: float | None
    r_score: float
    uni3d_score: float | None
    per_view_scores: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["view", "score"])
            for i, s in enumerate(self.per_view_scores):
                w.writerow([i, repr(s)])
            w.writerow(["fid", "" if self.fid is None else repr(self.fid)])
            w.writerow(["r_score", repr(self.r_score)])
            w.writerow(["uni3d_score", "" if self.uni3d_score is None else repr(self.uni3d_score)])


def evaluate(
    frames: Sequence[EvalFrame],
    captions: Sequence[str],
    correct: int,
    image_provider: EmbeddingProvider,
    text_provider: EmbeddingProvider,
    reference_images: Sequence[np.ndarray] | None = None,
    mesh: TriMesh | None = None,
    point_provider: EmbeddingProvider | None = None,
) -> EvalReport:
    """Scores for a set of circular renders.

    Per-view score is the cosine similarity between the view embedding and
    the correct caption.  The Frechet distance needs at least two reference
    images and is ``None`` otherwise; the 3D score needs a mesh.
    """
    views = image_provider.embed([f.image for f in frames])
    caps = text_provider.embed(list(captions))
    if not 0 <= correct < len(caps):
        raise MetricError("correct caption index out of range")
    per_view = [float(x) for x in views @ caps[correct]]
    fid = None
    if reference_images is not None and len(reference_images) >= 2 and len(frames) >= 2:
        refs = image_provider.embed(list(reference_images))
        fid = frechet_distance(fit_gaussian(views), fit_gaussian(refs))
    u3d = None
    if mesh is not None and point_provider is not None and not mesh.is_empty:
        u3d = uni3d_score(mesh, captions, point_provider, text_provider, correct)
    return EvalReport(fid, r_score(views, caps, correct), u3d, per_view)
