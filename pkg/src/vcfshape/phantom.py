"""Synthetic vertebral-body phantoms with closed-form height fields.

Bodies are elliptic cylinders so every downstream measurement has an
analytic oracle. Deformations mimic the three classic compression
morphologies: wedge (anterior height loss), biconcave (central dip),
and crush (uniform loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ResolutionError, ValidationError
from .volume_io import LabelVolume

DEFORMATION_KINDS = ("none", "wedge", "biconcave", "crush")


@dataclass(frozen=True)
class Deformation:
    kind: str = "none"
    fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in DEFORMATION_KINDS:
            raise ValidationError(f"unknown deformation kind {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError(f"fraction {self.fraction} outside (0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    base_height: float = 25.0
    radii: tuple[float, float] = (15.0, 18.0)  # (anteroposterior, lateral) mm
    deformation: Deformation = Deformation()
    spacing: float = 1.0
    label: int = 1
    count_in_scan: int = 2
    noise_voxels: float = 0.0  # uniform surface jitter amplitude, voxels

    def __post_init__(self):
        if self.base_height <= 0 or self.spacing <= 0 or min(self.radii) <= 0:
            raise ValidationError("base_height, radii and spacing must be positive")
        if self.label <= 0:
            raise ValidationError("label must be positive")
        if self.count_in_scan < 2:
            raise ValidationError("count_in_scan must be >= 2 (reference needed)")
        if not 0.0 <= self.noise_voxels <= 0.5:
            raise ValidationError("noise_voxels must be in [0, 0.5]")
        if min(self.radii) / self.spacing < 6:
            raise ResolutionError(
                f"spacing {self.spacing} too coarse for radius {min(self.radii)}"
            )


class HeightField:
    """Continuous height h(u, v) in mm of one body over its axial footprint.

    u is the left-right axis (lateral radius), v runs posterior to
    anterior (anteroposterior radius); both are centred on the body axis.
    """

    def __init__(self, base_height, radius_ap, radius_lat, kind="none", fraction=1.0):
        self.base_height = float(base_height)
        self.radius_ap = float(radius_ap)
        self.radius_lat = float(radius_lat)
        self.kind = kind
        self.fraction = float(fraction)

    def inside(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return (u / self.radius_lat) ** 2 + (v / self.radius_ap) ** 2 <= 1.0

    def factor(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        f = self.fraction
        if self.kind == "none":
            return np.ones(np.broadcast(u, v).shape)
        if self.kind == "wedge":
            # linear from 1 at the posterior rim to `fraction` at the anterior rim
            t = (v + self.radius_ap) / (2.0 * self.radius_ap)
            return 1.0 + (f - 1.0) * t
        if self.kind == "biconcave":
            rho2 = (u / self.radius_lat) ** 2 + (v / self.radius_ap) ** 2
            return f + (1.0 - f) * np.clip(rho2, 0.0, 1.0)
        if self.kind == "crush":
            return np.full(np.broadcast(u, v).shape, f)
        raise ValidationError(f"unknown deformation kind {self.kind!r}")

    def height(self, u, v):
        """Height in mm; NaN outside the elliptical footprint."""
        h = self.base_height * self.factor(u, v)
        return np.where(self.inside(u, v), h, np.nan)


def generate_phantom(spec: PhantomSpec, seed: int = 0):
    """Voxelize a deformed body plus undeformed reference bodies above it.

    Returns (LabelVolume, HeightField) where the field describes the
    deformed body (label spec.label); references get consecutive labels.
    """
    r_ap, r_lat = spec.radii
    deformed = HeightField(
        spec.base_height, r_ap, r_lat, spec.deformation.kind, spec.deformation.fraction
    )
    bodies = [(spec.label, deformed)]
    for extra in range(1, spec.count_in_scan):
        bodies.append(
            (spec.label + extra, HeightField(spec.base_height, r_ap, r_lat))
        )
    vol = voxelize_bodies(bodies, spec.spacing, noise_voxels=spec.noise_voxels, seed=seed)
    return vol, deformed


def voxelize_bodies(
    bodies: list[tuple[int, HeightField]],
    spacing: float,
    margin_voxels: int = 4,
    gap_voxels: int = 4,
    noise_voxels: float = 0.0,
    seed: int = 0,
) -> LabelVolume:
    """Stack bodies along the superior axis and rasterize voxel centres.

    The first body's inferior endplate sits at patient z = 0; the axial
    footprint is centred on (x, y) = (0, 0). Direction is identity (RAS).
    """
    if not bodies:
        raise ValidationError("no bodies to voxelize")
    s = float(spacing)
    r_lat_max = max(b.radius_lat for _, b in bodies)
    r_ap_max = max(b.radius_ap for _, b in bodies)
    nx = math.ceil(2 * r_lat_max / s) + 2 * margin_voxels
    ny = math.ceil(2 * r_ap_max / s) + 2 * margin_voxels
    gap_mm = gap_voxels * s
    z_bases = []
    z = 0.0
    for _, field in bodies:
        z_bases.append(z)
        z += field.base_height + gap_mm
    total_height = z - gap_mm
    nz = math.ceil(total_height / s) + 2 * margin_voxels

    xc = (np.arange(nx) + 0.5 - nx / 2.0) * s
    yc = (np.arange(ny) + 0.5 - ny / 2.0) * s
    zc = (np.arange(nz) + 0.5 - margin_voxels) * s

    rng = np.random.default_rng(seed)
    labels = np.zeros((nx, ny, nz), dtype=np.uint16)
    X = xc[:, None]
    Y = yc[None, :]
    for (label, field), z0 in zip(bodies, z_bases):
        rho = np.sqrt((X / field.radius_lat) ** 2 + (Y / field.radius_ap) ** 2)
        hmap = field.base_height * field.factor(X, Y)
        zloc = zc[None, None, :] - z0
        if noise_voxels > 0:
            top_jitter = rng.uniform(-noise_voxels * s, noise_voxels * s, (nx, ny, nz))
            lat_jitter = rng.uniform(-noise_voxels * s, noise_voxels * s, (nx, ny))
            rho_limit = 1.0 + lat_jitter / min(field.radius_lat, field.radius_ap)
            inside = (
                (rho[:, :, None] <= rho_limit[:, :, None])
                & (zloc >= 0.0)
                & (zloc <= hmap[:, :, None] + top_jitter)
            )
        else:
            inside = (
                (rho[:, :, None] <= 1.0) & (zloc >= 0.0) & (zloc <= hmap[:, :, None])
            )
        labels[inside] = label

    origin = np.array([xc[0], yc[0], zc[0]])
    return LabelVolume((nx, ny, nz), (s, s, s), np.eye(3), origin, labels)
