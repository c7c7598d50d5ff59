"""Marching-cubes surface extraction for binary vertebra masks.

The full 256-case triangle table is generated at import time instead of
being transcribed: for every cube configuration the face contours are
built with one fixed disambiguation rule (diagonal corner pairs on a
face are always separated), chained into closed loops, and fanned into
triangles. Because the face rule depends only on the four shared corner
values, neighbouring cubes always agree on their common face, so the
extracted surface of any binary mask is closed and 2-manifold by
construction. Vertices sit at grid-edge midpoints (the input is binary)
and are welded via their grid-edge identity, which is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, TooSmallError
from .volume_io import BinaryMask

# corner id = cx + 2*cy + 4*cz
_CORNERS = np.array([(i & 1, (i >> 1) & 1, (i >> 2) & 1) for i in range(8)])

# cube edges as (corner_a, corner_b, axis); base corner has bit `axis` clear
_EDGES = []
for _a in range(8):
    for _axis in range(3):
        if not _a & (1 << _axis):
            _EDGES.append((_a, _a | (1 << _axis), _axis))
_EDGE_ID = {(a, b): i for i, (a, b, _) in enumerate(_EDGES)}
# per edge: (base corner coords, axis) for global edge keys and midpoints
EDGE_BASE = np.array([(*_CORNERS[a], axis) for a, _b, axis in _EDGES])


def _face_corners():
    """Corners of the 6 cube faces in CCW order viewed from outside."""
    faces = []
    for axis in range(3):
        for side in (0, 1):
            b, c = (axis + 1) % 3, (axis + 2) % 3
            if side == 0:
                b, c = c, b  # flip so the cyclic order stays CCW from outside
            quad = []
            for cb, cc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                coord = [0, 0, 0]
                coord[axis] = side
                coord[b] = cb
                coord[c] = cc
                quad.append(coord[0] + 2 * coord[1] + 4 * coord[2])
            faces.append(quad)
    return faces


_FACES = _face_corners()


def _face_segments(quad, inside):
    """Directed contour segments of one face, solid kept on the left.

    Returns (start_edge, end_edge) pairs of cube-edge ids. Diagonal
    corner pairs are separated (each inside corner capped on its own),
    the same resolution both adjacent cubes derive from the shared face.
    """
    bits = [inside[q] for q in quad]
    if sum(bits) in (0, 4):
        return []
    runs = []
    for start in range(4):
        if bits[start] and not bits[start - 1]:
            end = start
            while bits[(end + 1) % 4]:
                end = (end + 1) % 4
            runs.append((start, end))
    segments = []
    for first, last in runs:
        leave = tuple(sorted((quad[last], quad[(last + 1) % 4])))
        enter = tuple(sorted((quad[(first - 1) % 4], quad[first])))
        segments.append((_EDGE_ID[leave], _EDGE_ID[enter]))
    return segments


def _triangulate_case(case):
    inside = [(case >> i) & 1 for i in range(8)]
    segments = []
    for quad in _FACES:
        segments.extend(_face_segments(quad, inside))
    if not segments:
        return []
    outgoing = {}
    for start, end in segments:
        assert start not in outgoing, "inconsistent face orientation"
        outgoing[start] = end
    triangles = []
    visited = set()
    for start in sorted(outgoing):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        nxt = outgoing[start]
        while nxt != start:
            loop.append(nxt)
            visited.add(nxt)
            nxt = outgoing[nxt]
        assert len(loop) >= 3
        for i in range(1, len(loop) - 1):
            triangles.append((loop[0], loop[i], loop[i + 1]))
    return triangles


def _build_tables():
    tables = [_triangulate_case(case) for case in range(256)]
    # fix global winding so triangle normals point out of the solid,
    # calibrated on the single-inside-corner case
    mids = 0.5 * (_CORNERS[[e[0] for e in _EDGES]] + _CORNERS[[e[1] for e in _EDGES]])
    tri = tables[1][0]
    a, b, c = (mids[e] for e in tri)
    normal = np.cross(b - a, c - a)
    if np.dot(normal, (a + b + c) / 3.0) < 0:
        tables = [[(t[0], t[2], t[1]) for t in tris] for tris in tables]
    counts = np.array([len(t) for t in tables], dtype=np.int64)
    offsets = np.zeros(257, dtype=np.int64)
    offsets[1:] = np.cumsum(counts)
    flat = np.array(
        [t for tris in tables for t in tris], dtype=np.int64
    ).reshape(-1, 3)
    return counts, offsets, flat


_TRI_COUNT, _TRI_OFFSET, _TRI_FLAT = _build_tables()

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class TriangleMesh:
    """Triangle surface in patient-frame mm with outward winding."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray
    provenance: dict = field(default_factory=dict)

    def edge_incidence(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_closed_manifold(self) -> bool:
        return all(n == 2 for n in self.edge_incidence().values())

    def euler_characteristic(self) -> int:
        v = len(self.vertices)
        e = len(self.edge_incidence())
        f = len(self.triangles)
        return v - e + f

    def enclosed_volume(self) -> float:
        """Signed volume via the divergence theorem; positive if outward."""
        p = self.vertices[self.triangles]
        return float(
            np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0
        )

    def surface_area(self) -> float:
        p = self.vertices[self.triangles]
        return float(
            0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()
        )


@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(self.points) != len(self.normals):
            raise ValueError("points and normals must have equal length")

    def __len__(self):
        return len(self.points)


def marching_cubes(
    mask: BinaryMask,
    min_component_voxels: int = 100,
    smooth: bool = False,
) -> TriangleMesh:
    """Extract the 0.5 iso-surface of a binary mask as a closed mesh.

    The largest 6-connected component is kept (with a warning when more
    than one exists). `smooth` applies one majority-vote pass of a 3x3x3
    box filter to the mask before extraction, recorded in provenance.
    """
    grid = np.asarray(mask.mask, dtype=bool)
    if not grid.any():
        raise EmptyInputError("mask has no foreground voxels")
    if smooth:
        grid = ndimage.uniform_filter(grid.astype(np.float32), size=3) > 0.5
        if not grid.any():
            raise EmptyInputError("mask empty after smoothing")
    labeled, n_comp = ndimage.label(grid, structure=_SIX_CONNECTED)
    if n_comp > 1:
        sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, range(1, n_comp + 1))
        keep = 1 + int(np.argmax(sizes))
        warnings.warn(
            f"mask has {n_comp} 6-connected components; keeping the largest "
            f"({int(sizes[keep - 1])} voxels)",
            stacklevel=2,
        )
        grid = labeled == keep
    count = int(grid.sum())
    if count < min_component_voxels:
        raise TooSmallError(
            f"component has {count} voxels, below minimum {min_component_voxels}"
        )

    padded = np.zeros(tuple(s + 2 for s in grid.shape), dtype=np.int8)
    padded[1:-1, 1:-1, 1:-1] = grid
    case = (
        padded[:-1, :-1, :-1]
        | padded[1:, :-1, :-1] << 1
        | padded[:-1, 1:, :-1] << 2
        | padded[1:, 1:, :-1] << 3
        | padded[:-1, :-1, 1:] << 4
        | padded[1:, :-1, 1:] << 5
        | padded[:-1, 1:, 1:] << 6
        | padded[1:, 1:, 1:] << 7
    )
    ci, cj, ck = np.nonzero((case > 0) & (case < 255))
    cases = case[ci, cj, ck].astype(np.int64)

    counts = _TRI_COUNT[cases]
    cell_of_tri = np.repeat(np.arange(len(ci)), counts)
    # per-triangle slot within its cell, then row into the flat table
    slot = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = _TRI_OFFSET[cases[cell_of_tri]] + slot
    tri_edges = _TRI_FLAT[rows]  # (n_tris, 3) cube-edge ids

    base = EDGE_BASE[tri_edges]  # (n_tris, 3, 4): base corner offset + axis
    si = ci[cell_of_tri][:, None] + base[:, :, 0]
    sj = cj[cell_of_tri][:, None] + base[:, :, 1]
    sk = ck[cell_of_tri][:, None] + base[:, :, 2]
    ny, nz = padded.shape[1], padded.shape[2]
    keys = ((si * ny + sj) * nz + sk) * 3 + base[:, :, 3]

    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
    triangles = inverse.reshape(-1, 3).astype(np.int64)

    axis = unique_keys % 3
    rest = unique_keys // 3
    vk = rest % nz
    vj = (rest // nz) % ny
    vi = rest // (nz * ny)
    pos = np.stack([vi, vj, vk], axis=1).astype(float)
    pos[np.arange(len(pos)), axis] += 0.5
    pos -= 1.0  # undo padding
    mm = pos * np.asarray(mask.spacing)
    vertices = mm @ np.asarray(mask.direction).T + np.asarray(mask.origin)

    normals = _area_weighted_normals(vertices, triangles)
    provenance = {"smoothed": bool(smooth), "label": mask.label, "components": n_comp}
    return TriangleMesh(vertices, triangles, normals, provenance)


def _area_weighted_normals(vertices, triangles):
    p = vertices[triangles]
    face = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # |face| = 2*area
    out = np.zeros_like(vertices)
    for corner in range(3):
        np.add.at(out, triangles[:, corner], face)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        out = np.where(norms > 0, out / norms, out)
    return out


def to_point_cloud(mesh: TriangleMesh) -> OrientedPointCloud:
    """One point per mesh vertex carrying its normal; no resampling."""
    return OrientedPointCloud(mesh.vertices.copy(), mesh.vertex_normals.copy())


def export_ply(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, n in zip(mesh.vertices, mesh.vertex_normals):
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
