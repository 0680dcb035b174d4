"""Point cloud file formats: XYZ text (read/write) and ascii PLY (read)."""

from __future__ import annotations

import os

import numpy as np

from .errors import IoError, ParseError, UnsupportedFormatError
from .geometry import PointCloud


def read_xyz(path):
    """One point per line, three whitespace-separated floats.

    Blank lines are skipped and `#` starts a comment; order is preserved.
    """
    points = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}"
                )
            try:
                points.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: not a number: {exc}") from exc
    if not points:
        raise ParseError(f"{path}: empty cloud")
    return PointCloud(np.array(points), source=path)


def write_xyz(cloud, path):
    """12-significant-digit decimal text, one point per line, \\n endings."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    directory = os.path.dirname(path) or "."
    if not os.path.isdir(directory):
        raise IoError(f"directory does not exist: {directory}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in points:
            fh.write(f"{x:.12g} {y:.12g} {z:.12g}\n")


def read_ply_ascii(path):
    """Vertex positions from an ascii PLY; every other element is ignored."""
    with open(path, encoding="utf-8", errors="replace") as fh:
        lines = iter(enumerate(fh, start=1))

        def next_line():
            for lineno, raw in lines:
                text = raw.strip()
                if text:
                    return lineno, text
            raise ParseError(f"{path}: truncated PLY file")

        _, magic = next_line()
        if magic != "ply":
            raise UnsupportedFormatError(f"{path}: missing 'ply' magic")
        elements = []  # (name, count, [scalar property names])
        saw_format = False
        while True:
            lineno, text = next_line()
            parts = text.split()
            if parts[0] == "format":
                if parts[1] != "ascii":
                    raise UnsupportedFormatError(
                        f"{path}: only ascii PLY is supported, got {parts[1]}"
                    )
                saw_format = True
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise ParseError(f"{path}:{lineno}: property before element")
                if parts[1] == "list":
                    elements[-1][2].append(None)  # list property, positions unusable
                else:
                    elements[-1][2].append(parts[2])
            elif parts[0] == "comment":
                continue
            elif parts[0] == "end_header":
                break
            else:
                raise ParseError(f"{path}:{lineno}: unexpected header line {text!r}")
        if not saw_format:
            raise UnsupportedFormatError(f"{path}: missing format declaration")

        vertex_props = None
        for name, _, props in elements:
            if name == "vertex":
                vertex_props = props
        if vertex_props is None or not {"x", "y", "z"} <= set(vertex_props):
            raise UnsupportedFormatError(
                f"{path}: PLY lacks a vertex element with x, y, z properties"
            )
        columns = [vertex_props.index(axis) for axis in ("x", "y", "z")]

        points = []
        for name, count, _ in elements:
            for _ in range(count):
                lineno, text = next_line()
                if name != "vertex":
                    continue
                parts = text.split()
                try:
                    points.append([float(parts[c]) for c in columns])
                except (IndexError, ValueError) as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex line") from exc
    if not points:
        raise ParseError(f"{path}: empty cloud")
    return PointCloud(np.array(points), source=path)
