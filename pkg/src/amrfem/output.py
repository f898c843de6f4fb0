"""Legacy ASCII VTK and CSV writers."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .fespace import CG, FeFunction

CSV_HEADER = ["mesh_or_step", "cells", "dofs", "error", "iterations", "seconds"]
VTK_QUAD = 9
VTK_HEXAHEDRON = 12

# corner bits in VTK order: counter-clockwise in each z layer
_VTK_CORNERS = {
    2: [(0, 0), (1, 0), (1, 1), (0, 1)],
    3: [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
}


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _corner_local_nodes(order: int, dim: int) -> list[int]:
    q1 = order + 1
    return [sum(b * order * q1 ** a for a, b in enumerate(bits)) for bits in _VTK_CORNERS[dim]]


def mesh_points(mesh, discontinuous: bool = False):
    """VTK points and connectivity of ``mesh``.

    Shared vertices are merged unless ``discontinuous``, in which case
    every cell gets its own corner points.
    """
    anchors, sizes, _ = mesh.lattice
    bits = np.array(_VTK_CORNERS[mesh.dim])
    corners = anchors[:, None, :] + sizes[:, None, None] * bits[None]
    flat = corners.reshape(-1, mesh.dim)
    if discontinuous:
        conn = np.arange(len(flat)).reshape(mesh.num_cells, -1)
        return mesh.lattice_to_physical(flat), conn
    uniq, first, inv = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order] = np.arange(len(uniq))
    conn = rank[inv.reshape(-1)].reshape(mesh.num_cells, -1)
    return mesh.lattice_to_physical(uniq[order]), conn


def _format_array(values) -> str:
    return "\n".join(repr(float(v)) for v in values)


def vtk_string(mesh, point_data=None, cell_data=None, discontinuous: bool = False,
               title: str = "amrfem output") -> str:
    """Legacy ASCII VTK unstructured grid.

    ``point_data`` arrays follow the point ordering of :func:`mesh_points`
    and ``cell_data`` arrays the cell ordering of the mesh.
    """
    pts, conn = mesh_points(mesh, discontinuous)
    ncell, nvert = conn.shape
    ctype = VTK_QUAD if mesh.dim == 2 else VTK_HEXAHEDRON
    if mesh.dim == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    out = io.StringIO()
    out.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {len(pts)} double\n")
    for p in pts:
        out.write(" ".join(repr(float(x)) for x in p) + "\n")
    out.write(f"CELLS {ncell} {ncell * (nvert + 1)}\n")
    for c in conn:
        out.write(f"{nvert} " + " ".join(str(int(i)) for i in c) + "\n")
    out.write(f"CELL_TYPES {ncell}\n")
    out.write("\n".join([str(ctype)] * ncell) + "\n")
    if cell_data:
        out.write(f"CELL_DATA {ncell}\n")
        for name, vals in cell_data.items():
            vals = np.asarray(vals, dtype=float)
            if len(vals) != ncell:
                raise ValueError(f"cell field {name!r} has {len(vals)} values for {ncell} cells")
            out.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n{_format_array(vals)}\n")
    if point_data:
        out.write(f"POINT_DATA {len(pts)}\n")
        for name, vals in point_data.items():
            vals = np.asarray(vals, dtype=float)
            if len(vals) != len(pts):
                raise ValueError(f"point field {name!r} has {len(vals)} values "
                                 f"for {len(pts)} points")
            out.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n{_format_array(vals)}\n")
    return out.getvalue()


def write_vtk(mesh, path, point_data=None, cell_data=None, discontinuous: bool = False) -> Path:
    path = Path(path)
    atomic_write_text(path, vtk_string(mesh, point_data, cell_data, discontinuous))
    return path


def corner_values(u: FeFunction) -> np.ndarray:
    """Values of ``u`` at the VTK points of its mesh (merged for CG, per cell for DG)."""
    space = u.space
    local = _corner_local_nodes(space.order, space.dim)
    per_cell = u.cell_values()[:, local]
    if space.conformity != CG:
        return per_cell.reshape(-1)
    _, conn = mesh_points(space.mesh)
    out = np.empty(conn.max() + 1)
    out[conn.reshape(-1)] = per_cell.reshape(-1)
    return out


def write_solution_vtk(u: FeFunction, path, cell_data=None, name: str = "u_h") -> Path:
    discontinuous = u.space.conformity != CG
    return write_vtk(u.space.mesh, path, {name: corner_values(u)}, cell_data, discontinuous)


def step_filename(stem: str, step: int, suffix: str = ".vtk") -> str:
    return f"{stem}_{step:04d}{suffix}"


def csv_string(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.mesh_or_step, r.cells, r.dofs, f"{r.error:.10e}", r.iterations,
                    f"{r.seconds:.3f}"])
    return buf.getvalue()


def write_csv(records, path) -> Path:
    path = Path(path)
    atomic_write_text(path, csv_string(records))
    return path


def observed_orders(errors, ratio: float = 2.0) -> list[float]:
    """``log(e_i / e_{i+1}) / log(ratio)`` between consecutive entries."""
    return [math.log(a / b) / math.log(ratio) for a, b in zip(errors[:-1], errors[1:])]
