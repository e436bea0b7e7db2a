"""Ray-triangle rasterization of meshes: visibility, normal maps, colors.

Visibility is solved once per frame without gradients.  Image values are
then rebuilt in torch from the visible faces, so pixel normals and colors
are differentiable in vertex positions (interior pixels only; silhouettes
move discontinuously and receive no gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..camera import Camera, project
from ..fields import DTYPE
from ..render import generate_rays
from .tets import TriMesh

NORMAL_BACKGROUND = 128.0 / 255.0
_DET_EPS = 1e-12
_MAX_PAIRS = 1 << 21


@dataclass
class Rasterization:
    face_id: np.ndarray  # (H, W), -1 where no face is hit
    depth: np.ndarray  # (H, W) ray parameter t, inf on background
    bary: np.ndarray  # (H, W, 3) barycentric weights of the hit
    origins: np.ndarray  # (H*W, 3)
    dirs: np.ndarray  # (H*W, 3)

    @property
    def hit(self) -> np.ndarray:
        return self.face_id >= 0


def ray_triangle(origins, dirs, v0, v1, v2):
    """Moller-Trumbore test for paired rays and triangles.

    Solves o + t d = (1-u-v) v0 + u v1 + v v2.  Returns ``(t, u, v, ok)``
    where ``ok`` requires u, v >= 0, u + v <= 1 and t > 0.
    """
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, p)
    good = np.abs(det) > _DET_EPS
    inv = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
    s = origins - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", dirs, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok = good & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return t, u, v, ok


def _candidate_boxes(vertices, faces, camera: Camera):
    """Pixel bounding box per face; faces reaching behind the camera get the full frame."""
    W, H = camera.width, camera.height
    uv, depth, _ = project(camera, vertices)
    fuv, fdepth = uv[faces], depth[faces]
    in_front = np.all(fdepth > 1e-9, axis=1)
    lo = np.floor(fuv.min(axis=1)) - 1
    hi = np.ceil(fuv.max(axis=1)) + 1
    lo = np.where(in_front[:, None], lo, 0)
    hi = np.where(in_front[:, None], hi, [W - 1, H - 1])
    lo = np.clip(lo, 0, [W - 1, H - 1]).astype(np.int64)
    hi = np.clip(hi, -1, [W - 1, H - 1]).astype(np.int64)
    return lo, hi


def rasterize(vertices, faces, camera: Camera) -> Rasterization:
    """Nearest hit per pixel ray; ties in depth go to the lowest face index."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    W, H = camera.width, camera.height
    origins, dirs = generate_rays(camera)
    face_id = np.full(H * W, -1, np.int64)
    depth = np.full(H * W, np.inf)
    bary = np.zeros((H * W, 3))
    if len(faces):
        lo, hi = _candidate_boxes(vertices, faces, camera)
        span = np.maximum(hi - lo + 1, 0)
        counts = span[:, 0] * span[:, 1]
        hits = []
        start = 0
        while start < len(faces):
            # grow the face chunk until the candidate pair budget is reached
            csum = np.cumsum(counts[start:])
            stop = start + max(int(np.searchsorted(csum, _MAX_PAIRS, side="right")), 1)
            hits.append(_chunk_hits(vertices, faces, origins, dirs, lo, span, counts, start, stop, W))
            start = stop
        pix = np.concatenate([h[0] for h in hits])
        fid = np.concatenate([h[1] for h in hits])
        t = np.concatenate([h[2] for h in hits])
        u = np.concatenate([h[3] for h in hits])
        v = np.concatenate([h[4] for h in hits])
        if len(pix):
            order = np.lexsort((fid, t, pix))
            pix, fid, t, u, v = pix[order], fid[order], t[order], u[order], v[order]
            first = np.ones(len(pix), bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, fid, t, u, v = pix[first], fid[first], t[first], u[first], v[first]
            face_id[pix] = fid
            depth[pix] = t
            bary[pix] = np.stack([1.0 - u - v, u, v], axis=1)
    return Rasterization(face_id.reshape(H, W), depth.reshape(H, W), bary.reshape(H, W, 3), origins, dirs)


def _chunk_hits(vertices, faces, origins, dirs, lo, span, counts, start, stop, W):
    c = counts[start:stop]
    total = int(c.sum())
    if total == 0:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty.astype(np.int64), empty, empty, empty
    fid = np.repeat(np.arange(start, stop), c)
    local = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
    w = span[fid, 0]
    px = lo[fid, 0] + local % w
    py = lo[fid, 1] + local // w
    pix = py * W + px
    tri = vertices[faces[fid]]
    t, u, v, ok = ray_triangle(origins[pix], dirs[pix], tri[:, 0], tri[:, 1], tri[:, 2])
    return pix[ok], fid[ok], t[ok], u[ok], v[ok]


def view_normals(normals: torch.Tensor, camera: Camera) -> torch.Tensor:
    """World normals to the view frame: x right, y up, z toward the camera."""
    R = torch.as_tensor(camera.rotation, dtype=normals.dtype)
    n_cam = normals @ R.T
    return n_cam * torch.tensor([1.0, -1.0, -1.0], dtype=normals.dtype)


def face_normals_torch(vertices: torch.Tensor, faces) -> torch.Tensor:
    f = torch.as_tensor(np.asarray(faces, dtype=np.int64))
    v0, v1, v2 = vertices[f[:, 0]], vertices[f[:, 1]], vertices[f[:, 2]]
    n = torch.linalg.cross(v1 - v0, v2 - v0)
    return n / torch.clamp(n.norm(dim=-1, keepdim=True), min=1e-300)


def normal_map_image(vertices: torch.Tensor, faces, raster: Rasterization, camera: Camera) -> torch.Tensor:
    """Normal map (H, W, 3) in [0, 1]: (n + 1) / 2 on hits, 128/255 elsewhere.

    Differentiable with respect to ``vertices`` through each visible face's
    geometric normal.
    """
    H, W = raster.face_id.shape
    out = torch.full((H * W, 3), NORMAL_BACKGROUND, dtype=DTYPE)
    hit = raster.face_id.reshape(-1) >= 0
    if hit.any():
        idx = torch.as_tensor(np.nonzero(hit)[0])
        fid = raster.face_id.reshape(-1)[hit]
        n = view_normals(face_normals_torch(vertices, np.asarray(faces)[fid]), camera)
        out = out.index_put((idx,), 0.5 * (n + 1.0))
    return out.reshape(H, W, 3)


def hit_points(vertices: torch.Tensor, faces, raster: Rasterization) -> tuple[np.ndarray, torch.Tensor]:
    """(pixel indices, barycentric surface points) for every hit pixel."""
    hit = raster.face_id.reshape(-1) >= 0
    idx = np.nonzero(hit)[0]
    tri = torch.as_tensor(np.asarray(faces)[raster.face_id.reshape(-1)[hit]])
    b = torch.as_tensor(raster.bary.reshape(-1, 3)[hit], dtype=vertices.dtype)
    pts = (b[..., None] * vertices[tri]).sum(1)
    return idx, pts


def color_image(mesh: TriMesh, camera: Camera, shader=None, background=(1.0, 1.0, 1.0), raster=None) -> torch.Tensor:
    """Color render of a mesh.

    ``shader`` maps (P, 3) world points to (P, 3) colors, e.g. a field's
    texture decoder; without one, per-vertex colors are interpolated.
    """
    raster = raster if raster is not None else rasterize(mesh.vertices, mesh.faces, camera)
    H, W = raster.face_id.shape
    out = torch.as_tensor(background, dtype=DTYPE).expand(H * W, 3).clone()
    verts = torch.as_tensor(mesh.vertices, dtype=DTYPE)
    idx, pts = hit_points(verts, mesh.faces, raster)
    if len(idx):
        if shader is not None:
            col = shader(pts)
        elif mesh.colors is not None:
            colors = torch.as_tensor(mesh.colors, dtype=DTYPE)
            idx2, col = hit_points(colors, mesh.faces, raster)
        else:
            col = torch.full((len(idx), 3), 0.7, dtype=DTYPE)
        out = out.index_put((torch.as_tensor(idx),), col)
    return out.reshape(H, W, 3)


def render_normal_map(mesh: TriMesh, camera: Camera, resolution: int | None = None) -> np.ndarray:
    """Normal map of ``mesh`` as an (H, W, 3) float image in [0, 1]."""
    if resolution is not None and resolution != camera.width:
        camera = camera.resized(resolution, round(resolution * camera.height / camera.width))
    raster = rasterize(mesh.vertices, mesh.faces, camera)
    with torch.no_grad():
        img = normal_map_image(torch.as_tensor(mesh.vertices, dtype=DTYPE), mesh.faces, raster, camera)
    return img.numpy()
