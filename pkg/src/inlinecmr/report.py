"""Structured report documents carried in REPORT frames.

The document is line-oriented UTF-8 so it stays bit-exact through the wire:

    [report]
    kind=sax_function

    [info]
    heart_rate_bpm=68

    [table.sax_function]
    columns=biomarker|value|index_name|index_value
    row=EF (%)|77.39|-|-

    [curve.lv_length_ch4]
    point=0.0,98.5

    [raster.ed_mosaic]
    rows=480
    cols=640
    data=<base64 RGB bytes, row-major>

Floats are serialized with repr() so parse(serialize(doc)) round-trips
exactly. Cell text must not contain '|' or newlines.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np


class ReportError(Exception):
    pass


@dataclass
class ReportTable:
    columns: list
    rows: list = field(default_factory=list)

    def add_row(self, *cells):
        if len(cells) != len(self.columns):
            raise ReportError(
                f"row has {len(cells)} cells, table has {len(self.columns)} columns")
        self.rows.append([_cell(c) for c in cells])

    def column(self, name):
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def lookup(self, key_column, key, value_column):
        """Value of ``value_column`` in the first row whose ``key_column`` == key."""
        ki = self.columns.index(key_column)
        vi = self.columns.index(value_column)
        for row in self.rows:
            if row[ki] == key:
                return row[vi]
        raise ReportError(f"no row with {key_column}={key!r}")


@dataclass
class ReportDocument:
    """Tables, curves, scalar info fields and raster panels of one analysis."""

    kind: str = ""
    info: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)    # name -> list[(t, value)]
    rasters: dict = field(default_factory=dict)   # name -> uint8 array [H, W, 3]
    flags: list = field(default_factory=list)

    def new_table(self, name, columns):
        table = ReportTable(list(columns))
        self.tables[name] = table
        return table

    def serialize(self):
        lines = ["[report]", f"kind={self.kind}"]
        for flag in self.flags:
            lines.append(f"flag={flag}")
        if self.info:
            lines.append("")
            lines.append("[info]")
            for key, value in self.info.items():
                lines.append(f"{key}={_cell(value)}")
        for name in self.tables:
            table = self.tables[name]
            lines.append("")
            lines.append(f"[table.{name}]")
            lines.append("columns=" + "|".join(table.columns))
            for row in table.rows:
                lines.append("row=" + "|".join(row))
        for name in self.curves:
            lines.append("")
            lines.append(f"[curve.{name}]")
            for t, v in self.curves[name]:
                lines.append(f"point={_num(t)},{_num(v)}")
        for name in self.rasters:
            raster = np.ascontiguousarray(self.rasters[name], dtype=np.uint8)
            if raster.ndim != 3 or raster.shape[2] != 3:
                raise ReportError(f"raster {name!r} must be [H, W, 3] uint8")
            lines.append("")
            lines.append(f"[raster.{name}]")
            lines.append(f"rows={raster.shape[0]}")
            lines.append(f"cols={raster.shape[1]}")
            lines.append("data=" + base64.b64encode(raster.tobytes()).decode("ascii"))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        doc = cls()
        section = None
        name = None
        raster_parts = {}
        for lineno, raw in enumerate(text.split("\n"), start=1):
            line = raw.rstrip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                if section.startswith("table."):
                    name = section[len("table."):]
                elif section.startswith("curve."):
                    name = section[len("curve."):]
                    doc.curves[name] = []
                elif section.startswith("raster."):
                    name = section[len("raster."):]
                    raster_parts[name] = {}
                elif section not in ("report", "info"):
                    raise ReportError(f"line {lineno}: unknown section [{section}]")
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ReportError(f"line {lineno}: expected key=value, got {line!r}")
            if section == "report":
                if key == "kind":
                    doc.kind = value
                elif key == "flag":
                    doc.flags.append(value)
                else:
                    raise ReportError(f"line {lineno}: unknown report key {key!r}")
            elif section == "info":
                doc.info[key] = value
            elif section is not None and section.startswith("table."):
                if key == "columns":
                    doc.tables[name] = ReportTable(value.split("|"))
                elif key == "row":
                    doc.tables[name].rows.append(value.split("|"))
                else:
                    raise ReportError(f"line {lineno}: unknown table key {key!r}")
            elif section is not None and section.startswith("curve."):
                if key != "point":
                    raise ReportError(f"line {lineno}: unknown curve key {key!r}")
                t_text, _, v_text = value.partition(",")
                doc.curves[name].append((float(t_text), float(v_text)))
            elif section is not None and section.startswith("raster."):
                raster_parts[name][key] = value
            else:
                raise ReportError(f"line {lineno}: content before any section")
        for rname, parts in raster_parts.items():
            shape = (int(parts["rows"]), int(parts["cols"]), 3)
            blob = base64.b64decode(parts["data"])
            doc.rasters[rname] = np.frombuffer(blob, dtype=np.uint8).reshape(shape)
        return doc


def _num(value):
    return repr(float(value))


def _cell(value):
    if isinstance(value, float):
        text = repr(value)
    else:
        text = str(value)
    if "|" in text or "\n" in text:
        raise ReportError(f"cell text {text!r} contains '|' or newline")
    return text
