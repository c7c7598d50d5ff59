"""Label-volume and annotation parsing.

Supports two on-disk volume formats: NIfTI-1 single-file (.nii, .nii.gz)
and a raw test format (.lvol) that round-trips byte-for-byte without any
compression library. Voxel data is held in canonical axis order with x
fastest; all spatial metadata is in millimetres in the patient (R/A/S)
frame.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyMaskError,
    FormatError,
    ResourceError,
    UnsupportedTypeError,
    ValidationError,
)

# NIfTI-1 datatype codes accepted for label volumes
_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 512: "u2"}

_KNOWN_FLAGS = {"foreign_material", "single_vertebra_scan"}

DEFAULT_MEMORY_BUDGET = 512 * 1024 * 1024


def _check_direction(direction: np.ndarray, tol: float = 1e-6) -> None:
    if direction.shape != (3, 3):
        raise FormatError("direction matrix must be 3x3")
    err = np.abs(direction.T @ direction - np.eye(3)).max()
    if err > tol:
        raise FormatError(f"direction matrix not orthonormal (deviation {err:.2e})")


@dataclass
class LabelVolume:
    """Dense integer label grid with spatial metadata.

    voxels[i, j, k] is the label at voxel index (i, j, k); physical
    position is origin + direction @ (spacing * (i, j, k)).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    direction: np.ndarray
    origin: np.ndarray
    voxels: np.ndarray

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float).reshape(3, 3)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d <= 0 for d in self.dims):
            raise ValidationError(f"non-positive dims {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"non-positive spacing {self.spacing}")
        _check_direction(self.direction)
        self.voxels = np.asarray(self.voxels)
        if not np.issubdtype(self.voxels.dtype, np.integer):
            raise UnsupportedTypeError(f"voxel dtype {self.voxels.dtype} is not integer")
        if self.voxels.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise FormatError("voxel payload length does not match dims")
        self.voxels = self.voxels.reshape(self.dims)
        if self.voxels.min(initial=0) < 0:
            raise FormatError("negative label values")

    def labels_present(self) -> list[int]:
        labels = np.unique(self.voxels)
        return [int(v) for v in labels if v != 0]

    def voxel_to_patient(self, ijk: np.ndarray) -> np.ndarray:
        """Map voxel indices (possibly fractional) to patient-frame mm."""
        ijk = np.atleast_2d(np.asarray(ijk, dtype=float))
        mm = ijk * np.asarray(self.spacing)
        out = mm @ self.direction.T + self.origin
        return out[0] if out.shape[0] == 1 else out


@dataclass
class BinaryMask:
    """Boolean grid for one vertebra, same spatial metadata as its volume."""

    mask: np.ndarray
    spacing: tuple[float, float, float]
    direction: np.ndarray
    origin: np.ndarray
    label: int = 0

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class VertebraRecord:
    scan_id: str
    vertebra_label: int
    genant_grade: int
    exclusion_flags: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.genant_grade not in (0, 1, 2, 3):
            raise ValidationError(
                f"genant_grade {self.genant_grade} outside 0-3 "
                f"({self.scan_id}/{self.vertebra_label})"
            )
        unknown = set(self.exclusion_flags) - _KNOWN_FLAGS
        if unknown:
            raise ValidationError(f"unknown exclusion flags {sorted(unknown)}")


def load_label_volume(path, max_bytes: int = DEFAULT_MEMORY_BUDGET) -> LabelVolume:
    """Load a .lvol or NIfTI-1 (.nii / .nii.gz) label volume."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    if path.suffix == ".lvol":
        return _load_lvol(path, max_bytes)
    return _load_nifti(path, max_bytes)


# ---------------------------------------------------------------------------
# raw test format


def _load_lvol(path: Path, max_bytes: int) -> LabelVolume:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            fields = header.decode("ascii").split()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: undecodable header") from exc
        if len(fields) != 19 or fields[0] != "LVOL1":
            raise FormatError(f"{path}: bad lvol header ({len(fields)} fields)")
        try:
            dims = tuple(int(v) for v in fields[1:4])
            spacing = tuple(float(v) for v in fields[4:7])
            direction = np.array([float(v) for v in fields[7:16]]).reshape(3, 3)
            origin = np.array([float(v) for v in fields[16:19]])
        except ValueError as exc:
            raise FormatError(f"{path}: unparseable header numbers") from exc
        n = dims[0] * dims[1] * dims[2]
        if n * 2 > max_bytes:
            raise ResourceError(f"{path}: {n} voxels exceeds memory budget")
        payload = fh.read(n * 2)
        if len(payload) != n * 2:
            raise FormatError(f"{path}: truncated voxel payload")
        # payload is x-fastest; reshape to voxels[i, j, k]
        voxels = np.frombuffer(payload, dtype="<u2").reshape(dims, order="F")
    return LabelVolume(dims, spacing, direction, origin, np.ascontiguousarray(voxels))


def write_lvol(vol: LabelVolume, path) -> None:
    """Write the raw test format; load(write(v)) is byte-identical."""
    if vol.voxels.max(initial=0) > 0xFFFF:
        raise ValidationError("labels exceed u16 range of the lvol format")
    parts = ["LVOL1"]
    parts += [str(d) for d in vol.dims]
    parts += [repr(float(s)) for s in vol.spacing]
    parts += [repr(float(v)) for v in vol.direction.ravel()]
    parts += [repr(float(v)) for v in vol.origin]
    with open(path, "wb") as fh:
        fh.write((" ".join(parts) + "\n").encode("ascii"))
        fh.write(vol.voxels.astype("<u2").ravel(order="F").tobytes())


# ---------------------------------------------------------------------------
# NIfTI-1


def _load_nifti(path: Path, max_bytes: int) -> LabelVolume:
    with open(path, "rb") as raw:
        magic2 = raw.read(2)
    opener = gzip.open if magic2 == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        header = fh.read(348)
        if len(header) < 348:
            raise FormatError(f"{path}: header shorter than 348 bytes")
        endian = "<"
        (sizeof_hdr,) = struct.unpack("<i", header[:4])
        if sizeof_hdr != 348:
            endian = ">"
            (sizeof_hdr,) = struct.unpack(">i", header[:4])
            if sizeof_hdr != 348:
                raise FormatError(f"{path}: sizeof_hdr is not 348")
        magic = header[344:348]
        if magic != b"n+1\x00":
            raise FormatError(f"{path}: magic {magic!r} is not single-file NIfTI-1")

        dim = struct.unpack(endian + "8h", header[40:56])
        ndim = dim[0]
        if ndim < 3 or any(d > 1 for d in dim[4 : 1 + max(ndim, 3)]):
            raise FormatError(f"{path}: only 3D volumes supported (dim={dim})")
        dims = tuple(int(d) for d in dim[1:4])
        (datatype, bitpix) = struct.unpack(endian + "2h", header[70:74])
        if datatype not in _NIFTI_DTYPES:
            raise UnsupportedTypeError(f"{path}: NIfTI datatype {datatype} unsupported")
        dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
        if dtype.itemsize * 8 != bitpix:
            raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype")

        pixdim = struct.unpack(endian + "8f", header[76:108])
        spacing = tuple(float(abs(p)) for p in pixdim[1:4])
        if any(s <= 0 for s in spacing):
            raise FormatError(f"{path}: non-positive pixdim {pixdim[1:4]}")
        (vox_offset,) = struct.unpack(endian + "f", header[108:112])
        (qform_code, sform_code) = struct.unpack(endian + "2h", header[252:256])

        if sform_code > 0:
            srow = np.array(struct.unpack(endian + "12f", header[280:328])).reshape(3, 4)
            affine = srow
        elif qform_code > 0:
            affine = _qform_affine(header, endian, pixdim)
        else:
            affine = np.hstack([np.diag(spacing), np.zeros((3, 1))])

        origin = affine[:, 3].astype(float)
        rot = affine[:, :3].astype(float)
        norms = np.linalg.norm(rot, axis=0)
        if np.any(norms == 0):
            raise FormatError(f"{path}: degenerate affine column")
        direction = rot / norms
        _check_direction(direction)

        n = dims[0] * dims[1] * dims[2]
        if n * dtype.itemsize > max_bytes:
            raise ResourceError(f"{path}: {n} voxels exceeds memory budget")
        offset = int(vox_offset) if vox_offset >= 348 else 352
        fh.read(offset - 348)
        payload = fh.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise FormatError(f"{path}: truncated voxel payload")
        data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")

    voxels = np.ascontiguousarray(data.astype(np.int32))
    if voxels.min(initial=0) < 0:
        raise FormatError(f"{path}: negative voxel values cannot be labels")
    return LabelVolume(dims, spacing, direction, origin, voxels)


def _qform_affine(header: bytes, endian: str, pixdim) -> np.ndarray:
    b, c, d = struct.unpack(endian + "3f", header[256:268])
    ox, oy, oz = struct.unpack(endian + "3f", header[268:280])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    return np.hstack([rot * scale, np.array([[ox], [oy], [oz]])])


# ---------------------------------------------------------------------------
# masks and annotations


def extract_mask(vol: LabelVolume, label: int) -> BinaryMask:
    """Binary mask of one label; raises EmptyMaskError if absent."""
    if label <= 0:
        raise ValidationError(f"label must be positive, got {label}")
    mask = vol.voxels == label
    if not mask.any():
        raise EmptyMaskError(f"label {label} absent (present: {vol.labels_present()})")
    return BinaryMask(mask, vol.spacing, vol.direction, vol.origin, label=label)


def load_annotations(path) -> list[VertebraRecord]:
    """Parse the annotations CSV; flagged rows are kept but marked."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = ["scan_id", "vertebra_label", "genant_grade", "flags"]
        if reader.fieldnames is None or [
            c for c in required if c not in reader.fieldnames
        ]:
            raise FormatError(f"{path}: annotations need columns {required}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["vertebra_label"])
                grade = int(row["genant_grade"])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-integer field") from exc
            flags = frozenset(f for f in (row["flags"] or "").split("|") if f)
            records.append(VertebraRecord(row["scan_id"], label, grade, flags))
    return records


def write_annotations(records: list[VertebraRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "vertebra_label", "genant_grade", "flags"])
        for rec in records:
            writer.writerow(
                [
                    rec.scan_id,
                    rec.vertebra_label,
                    rec.genant_grade,
                    "|".join(sorted(rec.exclusion_flags)),
                ]
            )
