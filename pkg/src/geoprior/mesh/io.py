"""Mesh files: Wavefront OBJ (read/write) and binary little-endian PLY."""

from __future__ import annotations

import numpy as np

from .tets import MeshError, TriMesh


def _fmt(x: float) -> str:
    return repr(float(x))


def obj_text(mesh: TriMesh) -> str:
    """OBJ with ``v``, ``vn`` (area-weighted vertex normals) and ``f v//vn``."""
    lines = []
    normals = mesh.vertex_normals() if len(mesh.vertices) else np.zeros((0, 3))
    for v in mesh.vertices:
        lines.append("v " + " ".join(_fmt(c) for c in v))
    for n in normals:
        lines.append("vn " + " ".join(_fmt(c) for c in n))
    for f in mesh.faces + 1:
        lines.append("f " + " ".join(f"{i}//{i}" for i in f))
    return "\n".join(lines) + "\n"


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(obj_text(mesh))


def read_obj(path) -> TriMesh:
    """Read vertices and faces; polygons are fan-triangulated.

    Negative (relative) indices are supported; texture and normal
    references are ignored.
    """
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def ply_bytes(mesh: TriMesh) -> bytes:
    has_color = mesh.colors is not None
    head = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    out = [("\n".join(head) + "\n").encode("ascii")]
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vdt += [("r", "u1"), ("g", "u1"), ("b", "u1")]
    vrec = np.zeros(len(mesh.vertices), dtype=vdt)
    for k, name in enumerate("xyz"):
        vrec[name] = mesh.vertices[:, k]
    if has_color:
        rgb = np.rint(np.clip(mesh.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
        for k, name in enumerate("rgb"):
            vrec[name] = rgb[:, k]
    out.append(vrec.tobytes())
    frec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    frec["n"] = 3
    frec["i"] = mesh.faces
    out.append(frec.tobytes())
    return b"".join(out)


def write_ply(path, mesh: TriMesh) -> None:
    with open(path, "wb") as f:
        f.write(ply_bytes(mesh))


def read_ply(path) -> TriMesh:
    """Read the binary PLY layout produced by :func:`write_ply`."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshError(f"{path}: only binary little-endian PLY is supported")
    n_v = n_f = 0
    has_color = False
    for line in header:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            n_v = int(p[2])
        elif p[:2] == ["element", "face"]:
            n_f = int(p[2])
        elif p[:2] == ["property", "uchar"] and p[2] == "red":
            has_color = True
    body = data[end + len(b"end_header\n") :]
    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + ([("r", "u1"), ("g", "u1"), ("b", "u1")] if has_color else [])
    vdt = np.dtype(vdt)
    fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
    if len(body) != n_v * vdt.itemsize + n_f * fdt.itemsize:
        raise MeshError(f"{path}: body size does not match header (triangles only)")
    v = np.frombuffer(body, dtype=vdt, count=n_v)
    fr = np.frombuffer(body, dtype=fdt, count=n_f, offset=n_v * vdt.itemsize)
    if n_f and np.any(fr["n"] != 3):
        raise MeshError(f"{path}: non-triangular face")
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = np.stack([v["r"], v["g"], v["b"]], axis=1) / 255.0 if has_color else None
    return TriMesh(verts, fr["i"].astype(np.int64), colors)


def read_mesh(path) -> TriMesh:
    with open(path, "rb") as f:
        head = f.read(4)
    return read_ply(path) if head == b"ply\n" else read_obj(path)

