"""Pixel-to-patient geometry."""

from __future__ import annotations

import numpy as np


class GeometryError(Exception):
    pass


def _unit_or_raise(name, vec):
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > 1e-3:
        raise GeometryError(f"{name} is not unit-norm (|v| = {norm:.6f})")
    return v


def to_patient_coords(point, header):
    """Map a (row, col) pixel coordinate to a 3D patient-space point in mm.

    P = position + row * spacing_row * row_dir + col * spacing_col * col_dir,
    with position_mm being the center of pixel (0, 0).
    """
    row_dir = _unit_or_raise("row_dir", header.row_dir)
    col_dir = _unit_or_raise("col_dir", header.col_dir)
    row, col = float(point[0]), float(point[1])
    return (np.asarray(header.position_mm, dtype=np.float64)
            + row * header.pixel_spacing_mm[0] * row_dir
            + col * header.pixel_spacing_mm[1] * col_dir)


def slice_center_mm(header):
    """Patient-space center of the pixel grid."""
    return to_patient_coords(((header.rows - 1) / 2.0, (header.cols - 1) / 2.0),
                             header)


def slice_normal(header):
    """Unit normal of the image plane (row_dir x col_dir)."""
    row_dir = _unit_or_raise("row_dir", header.row_dir)
    col_dir = _unit_or_raise("col_dir", header.col_dir)
    normal = np.cross(row_dir, col_dir)
    return normal / np.linalg.norm(normal)
