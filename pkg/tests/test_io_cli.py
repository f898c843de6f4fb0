import csv

import numpy as np
import pytest

from amrfem.adapt import AmrConfig, ProblemConfig
from amrfem.cli import main
from amrfem.fespace import CG, DG, StrongBoundaryConditions, build_fe_space, interpolate
from amrfem.mesh import create_forest_mesh, create_unit_box_mesh
from amrfem.output import (CSV_HEADER, VTK_HEXAHEDRON, VTK_QUAD, csv_string, mesh_points,
                           observed_orders, step_filename, vtk_string, write_csv,
                           write_solution_vtk, write_vtk)
from amrfem.params import ParameterRegistry, default_registry
from amrfem.study import StudyRecord, run_convergence_study

from conftest import refine_cells


def read_vtk(path):
    vtk = pytest.importorskip("vtk")
    reader = vtk.vtkUnstructuredGridReader()
    reader.SetFileName(str(path))
    reader.ReadAllScalarsOn()
    reader.Update()
    return reader.GetOutput()


def test_registry_defaults_and_override():
    reg = default_registry()
    values = reg.parse([])
    assert values["formulation"] == "CG" and values["order"] == 1 and values["dim"] == 2
    values = reg.parse(["--FE_FORMULATION", "DG", "--FE_ORDER", "3", "--STUDY_MESHES", "8", "16"])
    assert values["formulation"] == "DG" and values["order"] == 3 and values["meshes"] == [8, 16]
    reg.override("solver", "pcg")
    assert reg["solver"] == "pcg"
    with pytest.raises(ValueError):
        reg.override("solver", "gmres")
    with pytest.raises(KeyError):
        reg.override("nope", 1)


def test_registry_rejects_bad_registration():
    reg = ParameterRegistry()
    reg.register("a", "--A", 1, "a", int)
    with pytest.raises(ValueError):
        reg.register("a", "--B", 1, "b", int)
    with pytest.raises(ValueError):
        reg.register("c", "C", 1, "c", int)
    with pytest.raises(ValueError):
        reg.register("d", "--D", 5, "d", int, (1, 2))


def test_registry_round_trip():
    reg = default_registry()
    argv = ["--FE_FORMULATION", "DG", "--DG_TAU", "-1", "--SOLUTION_ALPHA", "12.5",
            "--SOLUTION_CENTER", "0.1", "0.2", "--OUTPUT_MATRIX_MARKET", "--AMR_STEPS", "3"]
    first = reg.parse(argv)
    second = default_registry().parse(reg.format_argv(first))
    assert second == first
    defaults = reg.parse([])
    assert default_registry().parse(reg.format_argv(defaults)) == defaults


def test_bad_choice_exits_with_message(capsys):
    with pytest.raises(SystemExit) as exc:
        default_registry().parse(["--FE_FORMULATION", "XX"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "--FE_FORMULATION" in err and "'CG', 'DG'" in err
    with pytest.raises(SystemExit) as exc:
        default_registry().parse(["--NO_SUCH_FLAG"])
    assert exc.value.code == 2


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in default_registry().entries.values():
        assert flag.flag in out


def test_print_values(capsys):
    reg = default_registry()
    reg.parse(["--FE_ORDER", "2"])
    reg.print_values()
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(reg.entries)
    assert any(line.startswith("--FE_ORDER") and line.endswith("2") for line in lines)


def test_vtk_single_cell():
    text = vtk_string(create_unit_box_mesh(2, 1))
    lines = text.splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert lines[4] == "POINTS 4 double"
    assert lines[5:9] == ["0.0 0.0 0.0", "1.0 0.0 0.0", "1.0 1.0 0.0", "0.0 1.0 0.0"]
    assert lines[9:11] == ["CELLS 1 5", "4 0 1 2 3"]
    assert lines[-1] == str(VTK_QUAD)


def test_vtk_cell_data_order():
    mesh = create_unit_box_mesh(2, 2)
    text = vtk_string(mesh, cell_data={"error_sq": [1.0, 2.0, 3.0, 4.0]})
    lines = text.splitlines()
    k = lines.index("CELL_DATA 4")
    assert lines[k + 1:k + 7] == ["SCALARS error_sq double 1", "LOOKUP_TABLE default",
                                  "1.0", "2.0", "3.0", "4.0"]
    with pytest.raises(ValueError):
        vtk_string(mesh, cell_data={"bad": [1.0]})


def test_vtk_points_counterclockwise():
    mesh = create_unit_box_mesh(2, 1)
    pts, conn = mesh_points(mesh)
    quad = pts[conn[0]]
    area = 0.5 * sum(quad[i - 1, 0] * quad[i, 1] - quad[i, 0] * quad[i - 1, 1] for i in range(4))
    assert area > 0


def test_vtk_loads_in_reader(tmp_path):
    mesh = refine_cells(create_forest_mesh(2), [5])
    u = lambda x: x[:, 0] + 2 * x[:, 1]
    space = build_fe_space(mesh, 2, CG, StrongBoundaryConditions.everywhere(2, u))
    path = write_solution_vtk(interpolate(space, u), tmp_path / "sol.vtk",
                              {"error_sq": np.arange(mesh.num_cells, dtype=float)})
    grid = read_vtk(path)
    assert grid.GetNumberOfCells() == mesh.num_cells
    assert {grid.GetCellType(i) for i in range(mesh.num_cells)} == {VTK_QUAD}
    vals = np.array([grid.GetPointData().GetArray("u_h").GetValue(i)
                     for i in range(grid.GetNumberOfPoints())])
    pts = np.array([grid.GetPoint(i) for i in range(grid.GetNumberOfPoints())])
    assert np.allclose(vals, u(pts[:, :2]))
    assert grid.GetCellData().GetArray("error_sq").GetValue(3) == 3.0


def test_vtk_dg_and_3d(tmp_path):
    mesh = create_unit_box_mesh(2, 2)
    space = build_fe_space(mesh, 1, DG)
    uh = interpolate(space, lambda x: x[:, 0])
    grid = read_vtk(write_solution_vtk(uh, tmp_path / "dg.vtk"))
    assert grid.GetNumberOfPoints() == 16
    mesh3 = create_unit_box_mesh(3, 2)
    grid = read_vtk(write_vtk(mesh3, tmp_path / "m3.vtk", cell_data={"id": np.arange(8.0)}))
    assert grid.GetNumberOfPoints() == 27
    assert grid.GetCellType(0) == VTK_HEXAHEDRON
    assert grid.GetCell(0).GetBounds() == pytest.approx((0, 0.5, 0, 0.5, 0, 0.5))


def test_write_to_missing_directory_fails(tmp_path):
    with pytest.raises(OSError):
        write_vtk(create_unit_box_mesh(2, 1), tmp_path / "nope" / "a.vtk")


def test_csv_header_is_stable():
    assert ",".join(CSV_HEADER) == "mesh_or_step,cells,dofs,error,iterations,seconds"
    text = csv_string([StudyRecord("16^2", 256, 225, 0, 1.5, 3, 0.12345)])
    assert text == ("mesh_or_step,cells,dofs,error,iterations,seconds\n"
                    "16^2,256,225,1.5000000000e+00,3,0.123\n")


def test_study_record_validation():
    with pytest.raises(ValueError):
        StudyRecord("0", -1, 0, 0, 1.0, 0, 0.0)


def test_observed_orders():
    assert observed_orders([4.0, 2.0, 1.0]) == [1.0, 1.0]
    assert step_filename("amr", 3) == "amr_0003.vtk"


def test_uniform_study(tmp_path):
    recs = run_convergence_study("uniform", ProblemConfig(), [16, 32, 64, 128], tmp_path)
    assert len(recs) == 4
    errors = [r.error for r in recs]
    assert all(b < a for a, b in zip(errors, errors[1:]))
    with open(tmp_path / "convergence.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_HEADER and len(rows) == 5
    assert rows[4][:3] == ["128^2", "16384", str(127 ** 2)]


def test_amr_study_files(tmp_path):
    recs = run_convergence_study("amr", AmrConfig(ProblemConfig(), amr_steps=2), None, tmp_path,
                                 vtk=True)
    assert [r.mesh_or_step for r in recs] == ["0", "1", "2"]
    for k in range(3):
        assert (tmp_path / step_filename("amr", k)).exists()
    with pytest.raises(ValueError):
        run_convergence_study("sweep", ProblemConfig())


def test_amr_beats_uniform_at_similar_size():
    amr = run_convergence_study("amr", AmrConfig(ProblemConfig(), amr_steps=12))
    uni = run_convergence_study("uniform", ProblemConfig(), [16, 32, 64])
    last = amr[-1]
    closest = min(uni, key=lambda r: abs(r.dofs - last.dofs))
    assert last.error < closest.error


def test_cli_single_with_outputs(tmp_path, capsys):
    code = main(["--SOLVER_TYPE", "pcg", "--SOLVER_PRECONDITIONER", "bddc", "--OUTPUT_FORMAT",
                 "vtk", "--OUTPUT_MATRIX_MARKET", "--OUTPUT_DIR", str(tmp_path)])
    assert code == 0
    assert "16^2" in capsys.readouterr().out
    grid = read_vtk(tmp_path / "solution_0000.vtk")
    sub = grid.GetCellData().GetArray("subdomain")
    assert {sub.GetValue(i) for i in range(grid.GetNumberOfCells())} == {0.0, 1.0, 2.0, 3.0}
    assert (tmp_path / "system.mtx").exists()


def test_cli_uniform_reports_orders(tmp_path, capsys):
    code = main(["--STUDY_MODE", "uniform", "--STUDY_MESHES", "8", "16", "--OUTPUT_DIR",
                 str(tmp_path), "--PARAMETER_HANDLER_PRINT_VALUES"])
    out = capsys.readouterr().out
    assert code == 0
    assert "--STUDY_MODE" in out and "observed order 8 -> 16" in out
    assert (tmp_path / "convergence.csv").exists()


def test_cli_amr(tmp_path):
    assert main(["--STUDY_MODE", "amr", "--AMR_STEPS", "2", "--OUTPUT_DIR", str(tmp_path)]) == 0
    assert len((tmp_path / "convergence.csv").read_text().splitlines()) == 4


def test_cli_reports_config_errors(tmp_path, capsys):
    code = main(["--SOLUTION_CENTER", "1", "2", "3", "--OUTPUT_DIR", str(tmp_path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err
    assert main(["--FE_FORMULATION", "DG", "--SOLVER_TYPE", "pcg", "--SOLVER_PRECONDITIONER",
                 "bddc", "--OUTPUT_DIR", str(tmp_path)]) == 1
