"""Raw-payload persistence with plain-text sidecar metadata.

A payload file holds little-endian float32 samples (x-fastest volumes,
u-fastest projections); its sidecar (``<path>.meta``) is line-oriented
``key = value`` text so files stay diffable and language-neutral.
Projection sidecars embed the full scan geometry.  Writes go through
temporary files and the sidecar is renamed into place before the payload,
so a payload never exists without its sidecar.
"""

from __future__ import annotations

import os

import numpy as np

from .geometry import DetectorGrid, ScanGeometry, VoxelGrid
from .projectors import ProjectionStack, Volume

__all__ = [
    "read_volume",
    "write_volume",
    "read_projections",
    "write_projections",
    "read_sidecar",
    "read_geometry",
]

_DTYPE_TAG = "float32"
_BYTE_ORDER_TAG = "little"


def sidecar_path(path: str) -> str:
    return path + ".meta"


def _format_sidecar(fields: dict) -> str:
    lines = [f"{k} = {v}" for k, v in fields.items()]
    return "\n".join(lines) + "\n"


def read_sidecar(path: str) -> dict:
    fields: dict[str, str] = {}
    with open(sidecar_path(path), "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed sidecar line: {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split())


def _check_tags(fields: dict, kind: str, layout: str):
    if fields.get("kind") != kind:
        raise ValueError(f"sidecar kind tag {fields.get('kind')!r} "
                         f"is not {kind!r}")
    tag = fields.get("dtype")
    if tag != _DTYPE_TAG:
        raise ValueError(f"unknown dtype tag {tag!r}")
    tag = fields.get("byte_order")
    if tag != _BYTE_ORDER_TAG:
        raise ValueError(f"unsupported byte order tag {tag!r}")
    tag = fields.get("layout")
    if tag != layout:
        raise ValueError(f"unexpected layout tag {tag!r}")


def _read_payload(path: str, count: int) -> np.ndarray:
    size = os.path.getsize(path)
    if size != count * 4:
        raise ValueError(
            f"payload holds {size} bytes, sidecar dims need {count * 4}")
    return np.fromfile(path, dtype="<f4", count=count)


def _atomic_write(path: str, sidecar_text: str, payload: np.ndarray):
    meta = sidecar_path(path)
    tmp_meta = meta + ".tmp"
    tmp_payload = path + ".tmp"
    with open(tmp_meta, "w", encoding="ascii") as fh:
        fh.write(sidecar_text)
    payload.astype("<f4").tofile(tmp_payload)
    os.replace(tmp_meta, meta)
    os.replace(tmp_payload, path)


def _geometry_fields(geometry: ScanGeometry) -> dict:
    grid = geometry.voxel_grid
    det = geometry.detector
    return {
        "geometry.dso": repr(geometry.dso),
        "geometry.dsd": repr(geometry.dsd),
        "geometry.angles": " ".join(repr(a) for a in geometry.angles),
        "grid.dims": f"{grid.n_x} {grid.n_y} {grid.n_z}",
        "grid.voxel_size": " ".join(repr(v) for v in grid.voxel_size),
        "grid.origin_offset": " ".join(repr(v) for v in grid.origin_offset),
        "detector.dims": f"{det.n_u} {det.n_v}",
        "detector.pixel_size": " ".join(repr(v) for v in det.pixel_size),
        "detector.offset": " ".join(repr(v) for v in det.detector_offset),
    }


def read_geometry(path: str) -> ScanGeometry:
    """Rebuild a scan geometry from any sidecar that embeds one."""
    fields = read_sidecar(path)
    if "geometry.dso" not in fields:
        raise ValueError(f"{sidecar_path(path)} carries no geometry block")
    nx, ny, nz = _ints(fields["grid.dims"])
    grid = VoxelGrid(nx, ny, nz, _floats(fields["grid.voxel_size"]),
                     _floats(fields["grid.origin_offset"]))
    nu, nv = _ints(fields["detector.dims"])
    det = DetectorGrid(nu, nv, _floats(fields["detector.pixel_size"]),
                       _floats(fields["detector.offset"]))
    return ScanGeometry(float(fields["geometry.dso"]),
                        float(fields["geometry.dsd"]),
                        _floats(fields["geometry.angles"]), grid, det)


def write_volume(path: str, volume: Volume):
    if volume.slab_range != (0, volume.grid.n_z):
        raise ValueError("only full volumes are persisted")
    grid = volume.grid
    fields = {
        "kind": "volume",
        "dims": f"{grid.n_x} {grid.n_y} {grid.n_z}",
        "dtype": _DTYPE_TAG,
        "byte_order": _BYTE_ORDER_TAG,
        "layout": "x-fastest",
        "voxel_size": " ".join(repr(v) for v in grid.voxel_size),
        "origin_offset": " ".join(repr(v) for v in grid.origin_offset),
    }
    _atomic_write(path, _format_sidecar(fields), volume.data)


def read_volume(path: str) -> Volume:
    fields = read_sidecar(path)
    _check_tags(fields, "volume", "x-fastest")
    nx, ny, nz = _ints(fields["dims"])
    data = _read_payload(path, nx * ny * nz).reshape(nz, ny, nx)
    grid = VoxelGrid(nx, ny, nz, _floats(fields["voxel_size"]),
                     _floats(fields["origin_offset"]))
    return Volume(grid, data, (0, nz))


def write_projections(path: str, projections: ProjectionStack,
                      geometry: ScanGeometry):
    if projections.n_angles != geometry.n_angles:
        raise ValueError("projection stack does not cover the scan angles")
    det = projections.detector
    fields = {
        "kind": "projections",
        "dims": f"{det.n_u} {det.n_v} {projections.n_angles}",
        "dtype": _DTYPE_TAG,
        "byte_order": _BYTE_ORDER_TAG,
        "layout": "u-fastest",
    }
    fields.update(_geometry_fields(geometry))
    _atomic_write(path, _format_sidecar(fields), projections.data)


def read_projections(path: str) -> tuple[ProjectionStack, ScanGeometry]:
    fields = read_sidecar(path)
    _check_tags(fields, "projections", "u-fastest")
    nu, nv, n_angles = _ints(fields["dims"])
    geometry = read_geometry(path)
    if (geometry.detector.n_u, geometry.detector.n_v) != (nu, nv):
        raise ValueError("sidecar dims disagree with the geometry block")
    if geometry.n_angles != n_angles:
        raise ValueError("sidecar dims disagree with the angle list")
    data = _read_payload(path, nu * nv * n_angles).reshape(n_angles, nv, nu)
    return ProjectionStack(geometry.detector, data, (0, n_angles)), geometry
