"""Pinhole cameras, projection and viewpoint sampling.

World frame is right-handed with +y up; azimuth 0 looks from +z toward the
origin and azimuth 90 sits on +x.  Camera frames follow the OpenCV layout
(x right, y down, z forward), so camera-frame z is the depth.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class CameraError(ValueError):
    pass


class SamplingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    focal: float = 80.0
    width: int = 64
    height: int = 64
    principal_point: tuple[float, float] | None = None

    def principal(self) -> tuple[float, float]:
        if self.principal_point is not None:
            return (float(self.principal_point[0]), float(self.principal_point[1]))
        # pixel centers sit on integer coordinates, so the optical axis passes
        # through pixel (W/2, H/2)
        return (self.width / 2.0, self.height / 2.0)


@dataclass
class Camera:
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray  # world -> camera
    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.focal = float(self.focal)
        self.width = int(self.width)
        self.height = int(self.height)
        if not self.focal > 0:
            raise CameraError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"image size must be >= 1, got {self.width}x{self.height}")
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise CameraError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def projection_matrix(self) -> np.ndarray:
        K = np.array(
            [
                [self.focal, 0.0, self.principal_point[0]],
                [0.0, self.focal, self.principal_point[1]],
                [0.0, 0.0, 1.0],
            ]
        )
        return K @ np.hstack([self.rotation, self.translation[:, None]])

    def resized(self, width: int, height: int | None = None) -> "Camera":
        """Same pose, intrinsics rescaled to a new image size."""
        height = width if height is None else height
        sx = width / self.width
        sy = height / self.height
        if not math.isclose(sx, sy):
            raise CameraError("non-uniform resize would change the aspect ratio")
        return Camera(
            self.rotation,
            self.translation,
            self.focal * sx,
            self.principal_point * np.array([sx, sy]),
            width,
            height,
        )


@dataclass(frozen=True)
class SphericalPose:
    azimuth: float
    elevation: float
    radius: float

    def __post_init__(self):
        if not 0.0 <= self.azimuth < 360.0:
            raise CameraError(f"azimuth {self.azimuth} outside [0, 360)")
        if not -90.0 < self.elevation < 90.0:
            raise CameraError(f"elevation {self.elevation} outside (-90, 90)")
        if not self.radius > 0:
            raise CameraError(f"radius must be positive, got {self.radius}")

    @classmethod
    def wrapped(cls, azimuth: float, elevation: float, radius: float) -> "SphericalPose":
        az = azimuth % 360.0
        if az == 360.0:  # -1e-17 % 360 rounds up
            az = 0.0
        return cls(az, elevation, radius)


def spherical_to_cartesian(azimuth_deg, elevation_deg, radius) -> np.ndarray:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return radius * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )


def look_at_pose(
    pose: SphericalPose,
    target: Sequence[float] = (0.0, 0.0, 0.0),
    intrinsics: Intrinsics = Intrinsics(),
) -> Camera:
    if abs(pose.elevation) >= 90.0:
        raise CameraError("elevation of +-90 degrees leaves the up vector degenerate")
    target = np.asarray(target, dtype=np.float64)
    eye = target + spherical_to_cartesian(pose.azimuth, pose.elevation, pose.radius)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise CameraError("view direction parallel to world up")
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(
        rotation=R,
        translation=-R @ eye,
        focal=intrinsics.focal,
        principal_point=intrinsics.principal(),
        width=intrinsics.width,
        height=intrinsics.height,
    )


def project(camera: Camera, points):
    """Pinhole projection of one point (3,) or a batch (N, 3).

    Returns ``(uv, depth, valid)``.  ``valid`` requires positive depth and a
    uv inside ``[0, W-1] x [0, H-1]`` (the bilinear-sampleable region).
    Written with explicit elementwise arithmetic so scalar and batched calls
    agree bit for bit.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    R, T = camera.rotation, camera.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + T[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + T[1]
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + T[2]
    front = zc > 0
    safe = np.where(front, zc, 1.0)
    u = camera.focal * (xc / safe) + camera.principal_point[0]
    v = camera.focal * (yc / safe) + camera.principal_point[1]
    valid = front & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    uv = np.stack([u, v], axis=-1)
    if single:
        return uv[0], float(zc[0]), bool(valid[0])
    return uv, zc, valid


class SamplingMode(str, enum.Enum):
    SD_FRONT = "SD_FRONT"
    MVDREAM_FOUR = "MVDREAM_FOUR"


class ViewRole(str, enum.Enum):
    REFERENCE = "REFERENCE"
    SOURCE = "SOURCE"
    BACK = "BACK"


_MODE_LIMITS = {
    SamplingMode.SD_FRONT: (180.0, 30.0),
    SamplingMode.MVDREAM_FOUR: (45.0, 30.0),
}
MVDREAM_ELEVATION = 15.0
MVDREAM_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)


@dataclass
class SamplingStrategy:
    mode: SamplingMode = SamplingMode.SD_FRONT
    count: int = 8
    rng_seed: int = 0
    azimuth_limit: float | None = None
    elevation_limit: float | None = None
    radius: float = 2.5
    reference_elevation: float = 0.0
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def __post_init__(self):
        self.mode = SamplingMode(self.mode)
        default_az, default_el = _MODE_LIMITS[self.mode]
        if self.azimuth_limit is None:
            self.azimuth_limit = default_az
        if self.elevation_limit is None:
            self.elevation_limit = default_el
        if self.count < 2:
            raise SamplingConfigError(f"need at least 2 source views, got {self.count}")
        if self.azimuth_limit <= 0 or self.elevation_limit <= 0:
            raise SamplingConfigError("angle limits must be positive")


@dataclass
class SourceView:
    camera: Camera
    role: ViewRole
    pose: SphericalPose


def _open_uniform(rng: np.random.Generator, limit: float) -> float:
    # strict bounds: |value| < limit
    while True:
        v = rng.uniform(-limit, limit)
        if abs(v) < limit:
            return float(v)


def _relative(rng, base_az, base_el, strategy) -> tuple[float, float]:
    while True:
        az = base_az + _open_uniform(rng, strategy.azimuth_limit)
        el = base_el + _open_uniform(rng, strategy.elevation_limit)
        if -90.0 < el < 90.0:
            return az, el


def sample_source_poses(strategy: SamplingStrategy) -> list[SourceView]:
    """Source viewpoints for the cost volume, reference views first."""
    rng = np.random.default_rng(strategy.rng_seed)
    r = strategy.radius
    specs: list[tuple[float, float, ViewRole]] = []
    if strategy.mode is SamplingMode.SD_FRONT:
        # front reference + mandatory back view
        el0 = strategy.reference_elevation
        specs.append((0.0, el0, ViewRole.REFERENCE))
        for _ in range(strategy.count - 2):
            az, el = _relative(rng, 0.0, el0, strategy)
            specs.append((az, el, ViewRole.SOURCE))
        specs.append((180.0, el0, ViewRole.BACK))
    else:
        if strategy.count < len(MVDREAM_AZIMUTHS):
            raise SamplingConfigError(
                f"MVDREAM_FOUR needs count >= 4 for its reference views, got {strategy.count}"
            )
        for az in MVDREAM_AZIMUTHS:
            role = ViewRole.BACK if az == 180.0 else ViewRole.REFERENCE
            specs.append((az, MVDREAM_ELEVATION, role))
        anchors = (0.0, 90.0, 270.0)  # front, left, right
        for i in range(strategy.count - len(MVDREAM_AZIMUTHS)):
            az, el = _relative(rng, anchors[i % 3], MVDREAM_ELEVATION, strategy)
            specs.append((az, el, ViewRole.SOURCE))
    out = []
    for az, el, role in specs:
        pose = SphericalPose.wrapped(az, el, r)
        out.append(SourceView(look_at_pose(pose, intrinsics=strategy.intrinsics), role, pose))
    return out


@dataclass
class PoseDistribution:
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    radius_range: tuple[float, float] = (2.5, 2.5)
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        for name, (lo, hi) in (
            ("azimuth", self.azimuth_range),
            ("elevation", self.elevation_range),
            ("radius", self.radius_range),
        ):
            if lo > hi:
                raise SamplingConfigError(f"empty {name} range ({lo}, {hi})")
        az_lo, az_hi = self.azimuth_range
        if az_lo < 0 or az_hi > 360:
            raise SamplingConfigError("azimuth range must lie within [0, 360]")
        el_lo, el_hi = self.elevation_range
        if el_lo <= -90 or el_hi >= 90:
            raise SamplingConfigError("elevation range must lie within (-90, 90)")
        if self.radius_range[0] <= 0:
            raise SamplingConfigError("radius range must be positive")


def sample_refine_pose(dist: PoseDistribution, rng) -> tuple[Camera, SphericalPose]:
    """Uniform pose inside ``dist``.  ``rng`` is a seed or a numpy Generator."""
    dist.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    def draw(lo, hi):
        return float(lo) if lo == hi else float(rng.uniform(lo, hi))

    pose = SphericalPose.wrapped(
        draw(*dist.azimuth_range), draw(*dist.elevation_range), draw(*dist.radius_range)
    )
    return look_at_pose(pose, dist.target, dist.intrinsics), pose


# --- cameras.json --------------------------------------------------------


def views_to_records(views: Sequence[SourceView]) -> list[dict]:
    return [
        {
            "azimuth_deg": v.pose.azimuth,
            "elevation_deg": v.pose.elevation,
            "radius": v.pose.radius,
            "focal_px": v.camera.focal,
            "width": v.camera.width,
            "height": v.camera.height,
            "role": v.role.value,
        }
        for v in views
    ]


def dump_cameras_json(views: Sequence[SourceView], path) -> None:
    # json emits floats with repr(), which round-trips exactly
    text = json.dumps(views_to_records(views), indent=2) + "\n"
    Path(path).write_text(text)


def load_cameras_json(path, target=(0.0, 0.0, 0.0)) -> list[SourceView]:
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON array of camera records")
    views = []
    required = ("azimuth_deg", "elevation_deg", "radius", "focal_px", "width", "height", "role")
    for i, rec in enumerate(records):
        missing = [k for k in required if k not in rec]
        if missing:
            raise ValueError(f"{path}: entry {i} missing {missing}")
        pose = SphericalPose(float(rec["azimuth_deg"]), float(rec["elevation_deg"]), float(rec["radius"]))
        intr = Intrinsics(float(rec["focal_px"]), int(rec["width"]), int(rec["height"]))
        views.append(SourceView(look_at_pose(pose, target, intr), ViewRole(rec["role"]), pose))
    return views
