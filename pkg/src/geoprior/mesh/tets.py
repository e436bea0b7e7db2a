"""Deformable tetrahedral grid and marching-tetrahedra extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

# cube faces as cyclic corner offsets
_CUBE_FACES = (
    ((0, 0, 0), (0, 1, 0), (0, 1, 1), (0, 0, 1)),
    ((1, 0, 0), (1, 0, 1), (1, 1, 1), (1, 1, 0)),
    ((0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)),
    ((0, 1, 0), (1, 1, 0), (1, 1, 1), (0, 1, 1)),
    ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)),
    ((0, 0, 1), (0, 1, 1), (1, 1, 1), (1, 0, 1)),
)


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3), CCW seen from outside
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("per-vertex colors must match the vertex count")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def vertex_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # area weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        return vn / np.maximum(np.linalg.norm(vn, axis=-1, keepdims=True), 1e-300)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


@dataclass
class TetGrid:
    vertices: np.ndarray  # (V, 3) rest positions
    tets: np.ndarray  # (T, 4), positively oriented
    sdf: np.ndarray  # (V,)
    deformation: np.ndarray  # (V, 3)
    max_offset: np.ndarray = field(default=None)  # (V,) half the shortest incident edge

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.sdf = np.asarray(self.sdf, dtype=np.float64)
        self.deformation = np.asarray(self.deformation, dtype=np.float64)
        if self.tets.min() < 0 or self.tets.max() >= len(self.vertices):
            raise MeshError("tet index out of range")
        if self.max_offset is None:
            self.max_offset = 0.5 * shortest_incident_edge(self.vertices, self.tets)
        self.deformation = clamp_deformation(self.deformation, self.max_offset)

    def deformed(self) -> np.ndarray:
        return self.vertices + self.deformation

    def copy(self) -> "TetGrid":
        return TetGrid(self.vertices.copy(), self.tets.copy(), self.sdf.copy(), self.deformation.copy(), self.max_offset.copy())


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = vertices[tets]
    return np.einsum("ij,ij->i", v[:, 1] - v[:, 0], np.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0])) / 6.0


def shortest_incident_edge(vertices, tets) -> np.ndarray:
    best = np.full(len(vertices), np.inf)
    for a in range(4):
        for b in range(a + 1, 4):
            length = np.linalg.norm(vertices[tets[:, a]] - vertices[tets[:, b]], axis=-1)
            np.minimum.at(best, tets[:, a], length)
            np.minimum.at(best, tets[:, b], length)
    best[~np.isfinite(best)] = 0.0
    return best


def clamp_deformation(deformation, max_offset):
    """Radially shrink offsets longer than their vertex bound (numpy or torch)."""
    if torch.is_tensor(deformation):
        bound = torch.as_tensor(max_offset, dtype=deformation.dtype)
        n = deformation.norm(dim=-1)
        scale = torch.where(n > bound, bound / torch.clamp(n, min=1e-300), torch.ones_like(n))
        return deformation * scale[:, None]
    n = np.linalg.norm(deformation, axis=-1)
    scale = np.where(n > max_offset, max_offset / np.maximum(n, 1e-300), 1.0)
    return deformation * scale[:, None]


def lattice_vertex_count(resolution: int) -> int:
    return (resolution + 1) ** 3 + resolution**3


def init_tetgrid(resolution: int, bounds=(-1.0, 1.0), fieldset=None) -> TetGrid:
    """Cube-plus-center lattice: each cell is split into 12 tets.

    Vertices are the (r+1)^3 cell corners and r^3 cell centers.  Every cube
    face is cut along the diagonal joining its two even-parity corners, so
    neighbouring cells agree and the tetrahedralization is conforming.
    """
    r = int(resolution)
    if r < 2:
        raise MeshError("tet grid resolution must be >= 2")
    lo, hi = float(bounds[0]), float(bounds[1])
    h = (hi - lo) / r
    ax = lo + h * np.arange(r + 1)
    corners = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    cax = lo + h * (np.arange(r) + 0.5)
    centers = np.stack(np.meshgrid(cax, cax, cax, indexing="ij"), -1).reshape(-1, 3)
    vertices = np.concatenate([corners, centers])

    i, j, k = (a.reshape(-1) for a in np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij"))
    center_id = (r + 1) ** 3 + (i * r + j) * r + k

    def corner_id(off):
        return ((i + off[0]) * (r + 1) + (j + off[1])) * (r + 1) + (k + off[2])

    tets = []
    for face in _CUBE_FACES:
        ids = [corner_id(q) for q in face]
        even = ((i + j + k + sum(face[0])) % 2) == 0
        # split along the even-parity diagonal (q0-q2 if q0 is even, else q1-q3)
        t1 = np.where(even[:, None], np.stack([ids[0], ids[1], ids[2]], 1), np.stack([ids[1], ids[2], ids[3]], 1))
        t2 = np.where(even[:, None], np.stack([ids[0], ids[2], ids[3]], 1), np.stack([ids[1], ids[3], ids[0]], 1))
        for tri in (t1, t2):
            tets.append(np.concatenate([center_id[:, None], tri], axis=1))
    tets = np.concatenate(tets)
    vol = signed_volumes(vertices, tets)
    flip = vol < 0
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    grid = TetGrid(vertices, tets, np.ones(len(vertices)), np.zeros_like(vertices))
    if fieldset is not None:
        grid.sdf = sample_fieldset_sdf(fieldset, grid.deformed())
    return grid


def sample_fieldset_sdf(fieldset, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(points), chunk):
            out.append(fieldset.sdf(torch.as_tensor(points[s : s + chunk])).numpy())
    return np.concatenate(out) if out else np.zeros(0)


# --- marching tetrahedra -------------------------------------------------


@dataclass
class SurfaceTopology:
    edges: np.ndarray  # (V', 2) grid-vertex pairs, one per output vertex
    faces: np.ndarray  # (F, 3) indices into edges


def edge_crossings(positions, sdf, edges):
    """Zero crossing on each edge: p_a + s_a / (s_a - s_b) (p_b - p_a).

    Works on numpy arrays or torch tensors (differentiable in both inputs).
    """
    a, b = edges[:, 0], edges[:, 1]
    sa, sb = sdf[a], sdf[b]
    denom = sa - sb
    if torch.is_tensor(denom):
        t = torch.where(denom == 0, torch.full_like(sa, 0.5), sa / torch.where(denom == 0, torch.ones_like(denom), denom))
    else:
        safe = np.where(denom == 0, 1.0, denom)
        t = np.where(denom == 0, 0.5, sa / safe)
    return positions[a] + t[:, None] * (positions[b] - positions[a])


def surface_topology(positions: np.ndarray, sdf: np.ndarray, tets: np.ndarray) -> SurfaceTopology:
    """Triangles of the zero level set, welded by grid edge.

    Inside means the sign bit is set, so -0.0 is inside and +0.0 outside;
    negating the SDF therefore mirrors the classification exactly.  A tet
    whose SDF is +0.0 everywhere yields no surface.
    """
    inside = np.signbit(sdf)
    codes = inside[tets]
    n_in = codes.sum(1)
    tri_edges, tri_tet = [], []

    # one or three inside: a single triangle around the lone vertex
    for lone_inside, count in ((True, 1), (False, 3)):
        sel = np.nonzero(n_in == count)[0]
        if len(sel) == 0:
            continue
        c = codes[sel] == lone_inside
        lone = np.argmax(c, axis=1)
        others = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])[lone]
        tv = tets[sel]
        lv = tv[np.arange(len(sel)), lone]
        ov = np.take_along_axis(tv, others, 1)
        tri_edges.append(np.stack([np.stack([lv, ov[:, m]], 1) for m in range(3)], 1))
        tri_tet.append(sel)

    # two inside: a quad, split along a diagonal fixed by edge keys
    sel = np.nonzero(n_in == 2)[0]
    if len(sel):
        tv = tets[sel]
        order = np.argsort(~codes[sel], axis=1, kind="stable")  # inside first
        s = np.take_along_axis(tv, order, 1)
        a, b, c, d = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
        quad = np.stack([np.stack(p, 1) for p in ((a, c), (a, d), (b, d), (b, c))], 1)  # cyclic
        keys = _edge_keys(quad, len(positions))
        first = np.argmin(keys, axis=1)
        rot = (first[:, None] + np.arange(4)) % 4
        q = np.take_along_axis(quad, rot[..., None], 1)
        tri_edges.append(q[:, [0, 1, 2]])
        tri_edges.append(q[:, [0, 2, 3]])
        tri_tet += [sel, sel]

    if not tri_edges:
        return SurfaceTopology(np.zeros((0, 2), np.int64), np.zeros((0, 3), np.int64))
    tri_edges = np.concatenate(tri_edges)  # (F, 3, 2)
    tri_tet = np.concatenate(tri_tet)
    keys = _edge_keys(tri_edges, len(positions))
    # canonical vertex order inside each triangle, independent of SDF signs
    keys = np.sort(keys, axis=1)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], tri_tet))
    keys, tri_tet = keys[order], tri_tet[order]
    uniq, inv = np.unique(keys.reshape(-1), return_inverse=True)
    faces = inv.reshape(-1, 3)
    V = len(positions)
    edges = np.stack([uniq // V, uniq % V], 1)

    # weld coincident crossings (zero-valued grid vertices) keeping first occurrence
    pts = edge_crossings(positions, sdf, edges)
    _, first_idx, remap = np.unique(pts, axis=0, return_index=True, return_inverse=True)
    if len(first_idx) != len(pts):
        keep = np.sort(first_idx)
        rank = np.empty(len(pts), np.int64)
        rank[keep] = np.arange(len(keep))
        faces = rank[first_idx[remap.reshape(-1)]][faces]
        edges = edges[keep]
        pts = pts[keep]

    # orient: normal points from the inside vertices toward the outside ones
    tv = tets[tri_tet]
    w_in = inside[tv]
    p = positions[tv]
    c_in = (p * w_in[..., None]).sum(1) / w_in.sum(1, keepdims=True)
    c_out = (p * ~w_in[..., None]).sum(1) / (~w_in).sum(1, keepdims=True)
    ref = c_out - c_in
    v = pts[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", n, ref) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    area2 = np.linalg.norm(n, axis=-1)
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct & (0.5 * area2 > 1e-12)]
    return SurfaceTopology(edges, faces)


def _edge_keys(pairs: np.ndarray, n_vertices: int) -> np.ndarray:
    lo = np.minimum(pairs[..., 0], pairs[..., 1])
    hi = np.maximum(pairs[..., 0], pairs[..., 1])
    return lo * n_vertices + hi


def marching_tetrahedra(grid: TetGrid) -> TriMesh:
    pos = grid.deformed()
    topo = surface_topology(pos, grid.sdf, grid.tets)
    verts = edge_crossings(pos, grid.sdf, topo.edges) if len(topo.edges) else np.zeros((0, 3))
    return TriMesh(verts, topo.faces)


def canonical_face_order(mesh: TriMesh) -> TriMesh:
    """Faces sorted by their vertex coordinates (rotation of each face fixed
    so its smallest-index vertex comes first)."""
    if mesh.is_empty:
        return mesh
    f = mesh.faces
    r = np.argmin(f, axis=1)
    f = np.take_along_axis(f, (r[:, None] + np.arange(3)) % 3, 1)
    key = mesh.vertices[f].reshape(len(f), -1)
    order = np.lexsort(key.T[::-1])
    return TriMesh(mesh.vertices, f[order], mesh.colors)


def sample_surface_points(mesh: TriMesh, n: int = 10_000, seed: int = 0):
    """Area-weighted uniform surface samples: ``(points, normals, face_ids)``."""
    if mesh.is_empty:
        raise MeshError("cannot sample points on an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fid = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    v = mesh.vertices[mesh.faces[fid]]
    pts = np.einsum("nk,nkd->nd", bary, v)
    return pts, mesh.face_normals()[fid], fid
