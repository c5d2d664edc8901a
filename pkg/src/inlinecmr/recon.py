"""Fully-sampled FFT reconstruction with root-sum-of-squares coil combination.

Conventions (fixed so golden images are portable):
  * the k-space center sits at index N//2 in both dimensions;
  * the 2D transform is unitary (norm="ortho"), so a single nonzero sample
    of value 1 at the center of a 4x4 grid reconstructs to a constant 0.25
    and single-coil image energy equals k-space energy.

Undersampled buckets are an error here; parallel-imaging stages are a
different gadget occupying the same chain slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .wire import PIXEL_F32, ImageFrame, ImageHeader


class ReconError(Exception):
    pass


@dataclass
class ReconGeometry:
    """Geometry defaults the readout headers cannot carry themselves."""

    pixel_spacing_mm: tuple = (1.0, 1.0)
    slice_thickness_mm: float = 1.0
    slice_spacing_mm: float = 1.0

    @classmethod
    def from_session(cls, session_header):
        if session_header is None:
            return cls()
        get = session_header.get_float
        thickness = get("slice_thickness_mm", 1.0)
        return cls(
            pixel_spacing_mm=(get("pixel_spacing_row_mm", 1.0),
                              get("pixel_spacing_col_mm", 1.0)),
            slice_thickness_mm=thickness,
            slice_spacing_mm=get("slice_spacing_mm", thickness))


@dataclass
class KGrid:
    """K-space bucket regridded to [coils, phases, klines, samples]."""

    data: np.ndarray
    filled: np.ndarray     # [phases, klines] fill mask
    duplicates: int        # cells written more than once (last write wins)
    trigger_time_ms: list  # per phase, from the first readout of the phase
    slice_idx: int
    position_mm: tuple
    row_dir: tuple
    col_dir: tuple


def assemble_grid(bucket):
    if len(bucket.readouts) == 0:
        raise ReconError("empty bucket")
    coils = bucket.num_coils
    samples = bucket.num_samples
    phases = bucket.num_phases
    klines = bucket.num_klines
    if klines * samples == 0:
        raise ReconError("zero-size grid")
    data = np.zeros((coils, phases, klines, samples), dtype=np.complex64)
    filled = np.zeros((phases, klines), dtype=bool)
    trigger = [None] * phases
    duplicates = 0
    first = bucket.readouts[0].header
    for readout in bucket.readouts:
        hdr = readout.header
        if hdr.num_coils != coils or hdr.num_samples != samples:
            raise ReconError(
                "readouts in one bucket disagree on coils/samples")
        if filled[hdr.phase_idx, hdr.kline_idx]:
            duplicates += 1
        data[:, hdr.phase_idx, hdr.kline_idx, :] = readout.samples
        filled[hdr.phase_idx, hdr.kline_idx] = True
        if trigger[hdr.phase_idx] is None:
            trigger[hdr.phase_idx] = hdr.sample_time_ns / 1e6
    return KGrid(data, filled, duplicates,
                 [t if t is not None else 0.0 for t in trigger],
                 first.slice_idx, first.position_mm,
                 row_dir=first.phase_dir, col_dir=first.read_dir)


def ifft2c(kspace):
    """Centered unitary 2D inverse DFT over the last two axes."""
    shifted = np.fft.ifftshift(kspace, axes=(-2, -1))
    image = np.fft.ifft2(shifted, norm="ortho")
    return np.fft.fftshift(image, axes=(-2, -1))


def fft2c(image):
    """Centered unitary 2D forward DFT; exact inverse of ifft2c."""
    shifted = np.fft.ifftshift(image, axes=(-2, -1))
    kspace = np.fft.fft2(shifted, norm="ortho")
    return np.fft.fftshift(kspace, axes=(-2, -1))


def rss(coil_images):
    """Root-sum-of-squares over the leading coil axis."""
    return np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=0))


def recon_bucket(bucket, geometry: ReconGeometry):
    """One magnitude ImageFrame per (slice, phase) in the bucket.

    A bucket normally holds one slice (slice-triggered chains) but may
    span the whole scan (trigger "none"); readouts are regridded per
    slice either way. Pixel value is sqrt(sum_coils |IDFT2|^2);
    deterministic for identical input.
    """
    from .stages import KSpaceBucket

    if len(bucket.readouts) == 0:
        raise ReconError("empty bucket")
    by_slice = {}
    for readout in bucket.readouts:
        by_slice.setdefault(readout.header.slice_idx, []).append(readout)

    frames = []
    for slice_idx in sorted(by_slice):
        sub = (bucket if len(by_slice) == 1
               else KSpaceBucket(bucket.key, by_slice[slice_idx]))
        grid = assemble_grid(sub)
        if not grid.filled.all():
            missing = np.argwhere(~grid.filled)
            head = ", ".join(f"(phase {p}, kline {k})" for p, k in missing[:8])
            more = "" if len(missing) <= 8 else f" and {len(missing) - 8} more"
            raise ReconError(
                f"slice {slice_idx} not fully sampled, missing {head}{more}")
        images = ifft2c(grid.data)      # [coils, phases, rows, cols]
        magnitude = rss(images).astype(np.float32)
        rows, cols = magnitude.shape[-2:]
        for phase in range(magnitude.shape[0]):
            header = ImageHeader(
                slice_idx=grid.slice_idx, phase_idx=phase,
                rows=rows, cols=cols, data_type=PIXEL_F32,
                pixel_spacing_mm=tuple(geometry.pixel_spacing_mm),
                slice_thickness_mm=geometry.slice_thickness_mm,
                slice_spacing_mm=geometry.slice_spacing_mm,
                trigger_time_ms=grid.trigger_time_ms[phase],
                position_mm=grid.position_mm,
                row_dir=grid.row_dir, col_dir=grid.col_dir)
            frames.append(ImageFrame(header, [("role", "recon")],
                                     magnitude[phase]))
    return frames


def label_from_probability(planes, threshold=0.5):
    """Per-pixel argmax over per-class probability planes.

    Plane i carries class label i+1; pixels whose best probability is
    below the threshold become background (0).
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in planes]
    if not arrays:
        raise ReconError("no probability planes")
    if any(a.ndim != 2 for a in arrays):
        raise ReconError("probability planes must be 2D")
    if len({a.shape for a in arrays}) != 1:
        raise ReconError("probability planes have mismatched shapes")
    stack = np.stack(arrays)
    best = stack.max(axis=0)
    labels = (stack.argmax(axis=0) + 1).astype(np.uint16)
    labels[best < threshold] = 0
    return labels
