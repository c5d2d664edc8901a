"""Raster output: PNG writing and small deterministic drawing helpers
(curves, bullseye plots, text labels). No plotting dependency; rasters are
plain uint8 [H, W, 3] arrays and the PNG encoder is stdlib zlib."""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np

# 5x7 bitmap glyphs, one int per row, bit 4 = leftmost column.
_FONT = {
    " ": (0, 0, 0, 0, 0, 0, 0),
    "%": (0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011),
    "(": (0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010),
    ")": (0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000),
    "+": (0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0),
    ",": (0, 0, 0, 0, 0b00110, 0b00100, 0b01000),
    "-": (0, 0, 0, 0b11111, 0, 0, 0),
    ".": (0, 0, 0, 0, 0, 0b01100, 0b01100),
    "/": (0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000),
    ":": (0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0),
    "=": (0, 0, 0b11111, 0, 0b11111, 0, 0),
    "0": (0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110),
    "1": (0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110),
    "2": (0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111),
    "3": (0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110),
    "4": (0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010),
    "5": (0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110),
    "6": (0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110),
    "7": (0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000),
    "8": (0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110),
    "9": (0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100),
    "A": (0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001),
    "B": (0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110),
    "C": (0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110),
    "D": (0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100),
    "E": (0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111),
    "F": (0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000),
    "G": (0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111),
    "H": (0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001),
    "I": (0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110),
    "J": (0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100),
    "K": (0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001),
    "L": (0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111),
    "M": (0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001),
    "N": (0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001),
    "O": (0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110),
    "P": (0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000),
    "Q": (0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101),
    "R": (0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001),
    "S": (0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110),
    "T": (0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100),
    "U": (0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110),
    "V": (0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b01010, 0b00100),
    "W": (0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001),
    "X": (0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001),
    "Y": (0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100),
    "Z": (0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111),
}


def png_bytes(rgb):
    """Encode a uint8 [H, W, 3] raster as PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("raster must be [H, W, 3] uint8")
    height, width = rgb.shape[:2]

    def chunk(tag, body):
        return (struct.pack(">I", len(body)) + tag + body
                + struct.pack(">I", zlib.crc32(tag + body)))

    raw = b"".join(b"\x00" + rgb[row].tobytes() for row in range(height))
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw, 6))
            + chunk(b"IEND", b""))


def write_png(path, rgb):
    with open(path, "wb") as fh:
        fh.write(png_bytes(rgb))


def draw_text(canvas, row, col, text, color=(255, 255, 255)):
    """Draw 5x7 text; unknown characters render as '.'; lowercase maps up."""
    c = col
    for char in str(text).upper():
        glyph = _FONT.get(char, _FONT["."])
        for gr, bits in enumerate(glyph):
            for gc in range(5):
                if bits & (1 << (4 - gc)):
                    rr, cc = row + gr, c + gc
                    if 0 <= rr < canvas.shape[0] and 0 <= cc < canvas.shape[1]:
                        canvas[rr, cc] = color
        c += 6


def draw_line(canvas, r0, c0, r1, c1, color):
    steps = int(max(abs(r1 - r0), abs(c1 - c0), 1)) * 2
    for t in np.linspace(0.0, 1.0, steps + 1):
        rr = int(round(r0 + (r1 - r0) * t))
        cc = int(round(c0 + (c1 - c0) * t))
        if 0 <= rr < canvas.shape[0] and 0 <= cc < canvas.shape[1]:
            canvas[rr, cc] = color


_SERIES_COLORS = [(230, 60, 60), (60, 120, 230), (40, 170, 90), (200, 160, 40)]


def plot_curves(series, size=(360, 560), title=""):
    """Plot named (t, value) series on a shared axis. Returns a raster."""
    height, width = size
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    margin_l, margin_r, margin_t, margin_b = 56, 16, 24, 32
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    points = [p for pts in series.values() for p in pts]
    if not points:
        return canvas
    ts = [p[0] for p in points]
    vs = [p[1] for p in points]
    t0, t1 = min(ts), max(ts)
    v0, v1 = min(vs), max(vs)
    if t1 == t0:
        t1 = t0 + 1.0
    if v1 == v0:
        v1 = v0 + 1.0

    def to_px(t, v):
        col = margin_l + (t - t0) / (t1 - t0) * (plot_w - 1)
        row = margin_t + (1.0 - (v - v0) / (v1 - v0)) * (plot_h - 1)
        return row, col

    axis = (90, 90, 90)
    draw_line(canvas, margin_t, margin_l, margin_t + plot_h - 1, margin_l, axis)
    draw_line(canvas, margin_t + plot_h - 1, margin_l,
              margin_t + plot_h - 1, margin_l + plot_w - 1, axis)
    draw_text(canvas, 4, margin_l, title, color=(0, 0, 0))
    draw_text(canvas, margin_t + plot_h + 6, margin_l, f"{t0:.0f}", (0, 0, 0))
    draw_text(canvas, margin_t + plot_h + 6, margin_l + plot_w - 40,
              f"{t1:.0f}", (0, 0, 0))
    draw_text(canvas, margin_t + plot_h - 8, 2, f"{v0:.1f}", (0, 0, 0))
    draw_text(canvas, margin_t, 2, f"{v1:.1f}", (0, 0, 0))

    for idx, (name, pts) in enumerate(series.items()):
        color = _SERIES_COLORS[idx % len(_SERIES_COLORS)]
        ordered = sorted(pts)
        for (ta, va), (tb, vb) in zip(ordered, ordered[1:]):
            ra, ca = to_px(ta, va)
            rb, cb = to_px(tb, vb)
            draw_line(canvas, ra, ca, rb, cb, color)
        draw_text(canvas, margin_t + 2 + 10 * idx, width - margin_r - 6 * len(name) - 4,
                  name, color)
    return canvas


def _ramp(t):
    """Blue -> cyan -> yellow -> red color ramp for t in [0, 1]."""
    t = min(max(float(t), 0.0), 1.0)
    stops = [(0.0, (40, 40, 200)), (0.33, (40, 200, 200)),
             (0.66, (230, 220, 60)), (1.0, (220, 40, 40))]
    for (ta, ca), (tb, cb) in zip(stops, stops[1:]):
        if t <= tb:
            f = 0.0 if tb == ta else (t - ta) / (tb - ta)
            return tuple(int(a + (b - a) * f) for a, b in zip(ca, cb))
    return stops[-1][1]


def bullseye(values, size=420, title="", value_format="{:.2f}"):
    """AHA 16-sector bullseye: basal ring outside, mid ring, apical ring
    inside; each wedge colored by value and labeled. None renders gray.

    values: dict sector id (1..16) -> value or None.
    """
    canvas = np.full((size + 28, size, 3), 255, dtype=np.uint8)
    draw_text(canvas, 4, 8, title, color=(0, 0, 0))
    center = (size / 2 + 24, size / 2)
    outer = size / 2 - 8
    rings = [  # (radius_lo, radius_hi, n_sectors, base)
        (outer * 2 / 3, outer, 6, 0),
        (outer / 3, outer * 2 / 3, 6, 6),
        (0.0, outer / 3, 4, 12),
    ]
    present = [v for v in values.values() if v is not None]
    lo = min(present) if present else 0.0
    hi = max(present) if present else 1.0
    if hi == lo:
        hi = lo + 1.0
    rows = np.arange(canvas.shape[0])[:, None] - center[0]
    cols = np.arange(canvas.shape[1])[None, :] - center[1]
    radius = np.hypot(rows, cols)
    angle = np.degrees(np.arctan2(-rows, cols)) % 360.0
    for r_lo, r_hi, n, base in rings:
        width = 360.0 / n
        ring = (radius >= r_lo) & (radius < r_hi)
        for k in range(n):
            sector = base + k + 1
            wedge = ring & (angle >= k * width) & (angle < (k + 1) * width)
            value = values.get(sector)
            color = (200, 200, 200) if value is None else _ramp(
                (value - lo) / (hi - lo))
            canvas[wedge] = color
        for k in range(n):
            sector = base + k + 1
            mid = math.radians((k + 0.5) * width)
            rr = (r_lo + r_hi) / 2
            row = int(center[0] - math.sin(mid) * rr) - 3
            col = int(center[1] + math.cos(mid) * rr) - 8
            value = values.get(sector)
            text = "-" if value is None else value_format.format(value)
            draw_text(canvas, row, col, text, color=(0, 0, 0))
    return canvas
