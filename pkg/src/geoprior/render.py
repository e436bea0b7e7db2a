"""SDF volume renderer: rays, samples, logistic-CDF opacities, compositing.

For M samples along a ray the renderer produces M-1 interval weights
(NeuS discrete form).  Interval j takes its color and SDF gradient from
sample j and its depth from the interval midpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera
from .fields import DTYPE, FieldSet

EPS = 1e-6
RESOLUTION_PRESETS = (512, 1024)


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    sharpness: float = 50.0
    near: float = 0.5
    far: float = 4.5
    resolution: int | None = None
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stratified: bool = False
    seed: int = 0
    chunk: int = 4096
    learn_sharpness: bool = False

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    normal: torch.Tensor | None  # (H, W, 3)
    opacity: torch.Tensor  # (H, W)

    def numpy(self) -> dict[str, np.ndarray]:
        out = {"color": self.color, "depth": self.depth, "opacity": self.opacity}
        if self.normal is not None:
            out["normal"] = self.normal
        return {k: v.detach().numpy() for k, v in out.items()}


def generate_rays(camera: Camera, config: RenderConfig | None = None):
    """One ray per pixel center, row-major.  Returns (origins, dirs), each (H*W, 3)."""
    jj, ii = np.meshgrid(np.arange(camera.width, dtype=np.float64), np.arange(camera.height, dtype=np.float64))
    cx, cy = camera.principal_point
    d_cam = np.stack(
        [(jj - cx) / camera.focal, (ii - cy) / camera.focal, np.ones_like(jj)], axis=-1
    ).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ camera.rotation  # R^T d per row
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def sample_points(near: float, far: float, n: int, stratified: bool = False, rng=None, batch: int | None = None):
    """Depths along a ray.  Uniform: linspace(near, far, n) inclusive.

    Stratified: ``n`` equal strata on [near, far], one jittered sample in each
    (strata are half-open, so depths are strictly increasing).  Returns
    ``(t, deltas)`` with deltas the n-1 interval lengths.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    shape = (n,) if batch is None else (batch, n)
    if not stratified:
        t = np.broadcast_to(np.linspace(near, far, n), shape).copy()
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        edges = np.linspace(near, far, n + 1)
        u = rng.random(shape)
        t = edges[:-1] + u * (edges[1:] - edges[:-1])
    return t, np.diff(t, axis=-1)


def logistic_cdf(s: torch.Tensor, sharpness) -> torch.Tensor:
    return torch.sigmoid(s * sharpness)


def neus_weights(sdf: torch.Tensor, sharpness) -> torch.Tensor:
    """Interval weights (..., M-1) from SDF samples (..., M).

    alpha_j = max((Phi(s_j) - Phi(s_j+1)) / max(Phi(s_j), 1e-6), 0),
    w_j = alpha_j * prod_{k<j} (1 - alpha_k).
    """
    sdf = torch.as_tensor(sdf, dtype=DTYPE)
    cdf = logistic_cdf(sdf, sharpness)
    prev, nxt = cdf[..., :-1], cdf[..., 1:]
    alpha = ((prev - nxt) / torch.clamp(prev, min=EPS)).clamp(min=0.0, max=1.0)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1
    )
    return alpha * trans


def composite(weights, colors, depths, gradients=None, background=(1.0, 1.0, 1.0)) -> dict:
    """Alpha-composite interval quantities.  weights (..., K), colors (..., K, 3),
    depths (..., K), gradients (..., K, 3) or None."""
    w = torch.as_tensor(weights, dtype=DTYPE)
    c = torch.as_tensor(colors, dtype=DTYPE)
    t = torch.as_tensor(depths, dtype=DTYPE)
    bg = torch.as_tensor(background, dtype=DTYPE)
    acc = w.sum(-1)
    out = {
        "color": (w[..., None] * c).sum(-2) + (1.0 - acc)[..., None] * bg,
        "depth": (w * t).sum(-1) / torch.clamp(acc, min=EPS),
        "opacity": acc,
    }
    if gradients is not None:
        g = torch.as_tensor(gradients, dtype=DTYPE)
        n = (w[..., None] * g).sum(-2)
        out["normal"] = n / torch.clamp(n.norm(dim=-1, keepdim=True), min=1e-12)
    return out


def render_rays(
    fieldset: FieldSet,
    origins,
    dirs,
    config: RenderConfig,
    with_normals: bool = True,
    rng=None,
    sharpness: torch.Tensor | float | None = None,
) -> dict:
    """Render a batch of rays; differentiable w.r.t. field parameters."""
    o = torch.as_tensor(origins, dtype=DTYPE)
    d = torch.as_tensor(dirs, dtype=DTYPE)
    n_rays, M = o.shape[0], config.samples_per_ray
    t_np, _ = sample_points(config.near, config.far, M, config.stratified, rng, batch=n_rays)
    t = torch.as_tensor(t_np, dtype=DTYPE)
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    grad_needed = torch.is_grad_enabled()
    if with_normals:
        sdf, grad = fieldset.sdf_and_gradient(pts, create_graph=grad_needed)
        if not grad_needed:
            sdf, grad = sdf.detach(), grad.detach()
        grad = grad.reshape(n_rays, M, 3)[:, :-1]
    else:
        sdf, grad = fieldset.sdf(pts), None
    sdf = sdf.reshape(n_rays, M)
    k = config.sharpness if sharpness is None else sharpness
    w = neus_weights(sdf, k)
    # color only where the interval can contribute
    col = fieldset.color(pts.reshape(n_rays, M, 3)[:, :-1].reshape(-1, 3)).reshape(n_rays, M - 1, 3)
    mid = 0.5 * (t[:, :-1] + t[:, 1:])
    return composite(w, col, mid, grad, config.background) | {"weights": w}


def render_image(
    fieldset: FieldSet,
    camera: Camera,
    config: RenderConfig,
    with_normals: bool = True,
    sharpness=None,
) -> RenderOutput:
    """Full-frame render.  Gradients flow to the field when grad mode is on."""
    if config.resolution is not None and config.resolution != camera.width:
        camera = camera.resized(config.resolution, round(config.resolution * camera.height / camera.width))
    origins, dirs = generate_rays(camera, config)
    rng = np.random.default_rng(config.seed) if config.stratified else None
    parts = {"color": [], "depth": [], "opacity": [], "normal": []}
    for s in range(0, origins.shape[0], config.chunk):
        out = render_rays(fieldset, origins[s : s + config.chunk], dirs[s : s + config.chunk], config, with_normals, rng, sharpness)
        for key in parts:
            if key in out:
                parts[key].append(out[key])
    H, W = camera.height, camera.width
    return RenderOutput(
        color=torch.cat(parts["color"]).reshape(H, W, 3),
        depth=torch.cat(parts["depth"]).reshape(H, W),
        normal=torch.cat(parts["normal"]).reshape(H, W, 3) if with_normals else None,
        opacity=torch.cat(parts["opacity"]).reshape(H, W),
    )


def rgb_loss(image, rendered) -> torch.Tensor:
    """Euclidean norm of the difference over all pixels and channels."""
    a = torch.as_tensor(image, dtype=DTYPE)
    b = torch.as_tensor(rendered, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b)


def render_normal_png(normal: np.ndarray) -> np.ndarray:
    """Map unit normals [-1, 1] to [0, 1] for PNG output."""
    return np.clip((np.asarray(normal) + 1.0) * 0.5, 0.0, 1.0)


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom-up."""
    d = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"Pf\n{d.shape[1]} {d.shape[0]}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dt).reshape(h, w)
    return data[::-1].astype(np.float32)
