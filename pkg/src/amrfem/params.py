"""Command-line parameter registry built on argparse."""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass


@dataclass(frozen=True)
class Parameter:
    key: str
    flag: str
    default: object
    help: str
    type: type = str
    choices: tuple | None = None
    nargs: str | None = None


class ParameterRegistry:
    """Named command-line parameters with defaults, help and admissible choices.

    Keys are lower-case identifiers; flags follow the ``--COMPONENT_NAME``
    convention. Boolean parameters become switches.
    """

    def __init__(self, prog: str = "amrfem", description: str | None = None):
        self.prog = prog
        self.description = description
        self.entries: dict[str, Parameter] = {}
        self.values: dict = {}

    def register(self, key, flag, default, help, type=str, choices=None, nargs=None):
        if key in self.entries:
            raise ValueError(f"parameter {key!r} already registered")
        if not flag.startswith("--"):
            raise ValueError(f"flag {flag!r} must start with --")
        if choices is not None and default is not None and default not in choices:
            raise ValueError(f"default {default!r} of {flag} not in {choices}")
        self.entries[key] = Parameter(key, flag, default, help, type,
                                      tuple(choices) if choices else None, nargs)
        self.values[key] = default
        return self

    def _parser(self) -> argparse.ArgumentParser:
        p = argparse.ArgumentParser(prog=self.prog, description=self.description,
                                    formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        for e in self.entries.values():
            if e.type is bool:
                p.add_argument(e.flag, dest=e.key, action="store_true", default=e.default,
                               help=e.help)
            else:
                p.add_argument(e.flag, dest=e.key, type=e.type, default=e.default,
                               choices=e.choices, nargs=e.nargs, help=e.help)
        return p

    def parse(self, argv=None) -> dict:
        """Parse ``argv``; bad flags or values exit with status 2 and a message."""
        ns = self._parser().parse_args(argv)
        self.values = {k: getattr(ns, k) for k in self.entries}
        return dict(self.values)

    def override(self, key, value):
        e = self.entries.get(key)
        if e is None:
            raise KeyError(f"unknown parameter {key!r}")
        if e.choices is not None and value not in e.choices:
            raise ValueError(f"{e.flag}: {value!r} not in {list(e.choices)}")
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def format_argv(self, values=None) -> list[str]:
        """Command line that reproduces ``values`` when parsed."""
        values = self.values if values is None else values
        argv = []
        for key, e in self.entries.items():
            v = values[key]
            if e.type is bool:
                if v:
                    argv.append(e.flag)
            elif v is None:
                continue
            elif e.nargs:
                argv.append(e.flag)
                argv.extend(repr(x) if isinstance(x, float) else str(x) for x in v)
            else:
                argv.extend([e.flag, repr(v) if isinstance(v, float) else str(v)])
        return argv

    def print_values(self, file=None):
        file = file or sys.stdout
        width = max(len(e.flag) for e in self.entries.values())
        for key, e in self.entries.items():
            print(f"{e.flag:<{width}}  {self.values[key]}", file=file)


def default_registry() -> ParameterRegistry:
    r = ParameterRegistry(description="Poisson wave-front benchmark with CG/DG, AMR and BDDC.")
    r.register("dim", "--MESH_DIMENSION", 2, "space dimension", int, (2, 3))
    r.register("cells", "--MESH_CELLS_PER_DIR", 16, "cells per axis of the uniform mesh", int)
    r.register("formulation", "--FE_FORMULATION", "CG", "finite element formulation",
               str, ("CG", "DG"))
    r.register("order", "--FE_ORDER", 1, "polynomial order q", int, (1, 2, 3, 4))
    r.register("tau", "--DG_TAU", 1, "interior penalty variant (1 symmetric)", int, (-1, 0, 1))
    r.register("penalty", "--DG_PENALTY", 10.0, "penalty factor c in gamma = c q^2", float)
    r.register("alpha", "--SOLUTION_ALPHA", 200.0, "wave-front sharpness", float)
    r.register("radius", "--SOLUTION_RADIUS", 0.7, "wave-front radius", float)
    r.register("center", "--SOLUTION_CENTER", None,
               "wave-front centre, one value per axis (default -0.05 each)", float, nargs="+")
    r.register("quadrature", "--SOLUTION_QUADRATURE", "standard",
               "load-vector quadrature: q+2 points or resolved to the front width",
               str, ("standard", "resolved"))
    r.register("mode", "--STUDY_MODE", "single", "single solve, uniform study or AMR loop",
               str, ("single", "uniform", "amr"))
    r.register("meshes", "--STUDY_MESHES", [16, 32, 64, 128],
               "cells per axis of the uniform study meshes", int, nargs="+")
    r.register("uniform_steps", "--AMR_UNIFORM_STEPS", 2, "initial uniform refinements", int)
    r.register("amr_steps", "--AMR_STEPS", 8, "number of adaptation steps", int)
    r.register("refine_fraction", "--AMR_REFINE_FRACTION", 0.1, "refinement fraction", float)
    r.register("coarsen_fraction", "--AMR_COARSEN_FRACTION", 0.05, "coarsening fraction", float)
    r.register("solver", "--SOLVER_TYPE", "direct", "linear solver", str, ("direct", "pcg"))
    r.register("preconditioner", "--SOLVER_PRECONDITIONER", "none", "PCG preconditioner",
               str, ("none", "jacobi", "bddc"))
    r.register("subdomains", "--BDDC_SUBDOMAINS", 4,
               "number of SFC subdomains (4^k gives a square grid on 2^k x 2^k meshes)", int)
    r.register("rtol", "--SOLVER_RTOL", 1e-6, "relative residual tolerance", float)
    r.register("maxit", "--SOLVER_MAXIT", 5000, "maximum PCG iterations", int)
    r.register("output_dir", "--OUTPUT_DIR", "output", "directory for CSV and VTK files", str)
    r.register("output_format", "--OUTPUT_FORMAT", "none", "write VTK files",
               str, ("none", "vtk"))
    r.register("matrix_market", "--OUTPUT_MATRIX_MARKET", False,
               "dump the linear system of single solves in MatrixMarket format", bool)
    r.register("print_values", "--PARAMETER_HANDLER_PRINT_VALUES", False,
               "print all parameter values before running", bool)
    return r
