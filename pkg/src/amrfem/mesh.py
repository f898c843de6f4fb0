"""Uniform brick meshes and 2:1 balanced forest-of-quadtrees meshes.

Cells are stored as (level, integer coordinates at that level). Geometry is
resolved on an integer lattice so that vertices, edges and faces shared by
several cells compare equal exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

REFINE = 1
KEEP = 0
COARSEN = -1


# --------------------------------------------------------------------------
# Morton keys
# --------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class MortonKey:
    level: int
    index: int
    dim: int = 2

    def coords(self) -> tuple[int, ...]:
        return morton_decode(self)


def morton_key(level: int, coords, dim: int | None = None) -> MortonKey:
    """Bit-interleave ``coords`` (x bit least significant) at ``level``."""
    coords = tuple(int(c) for c in coords)
    d = len(coords) if dim is None else dim
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    for c in coords:
        if not 0 <= c < (1 << level):
            raise ValueError(f"coordinate {c} out of range for level {level}")
    index = 0
    for bit in range(level):
        for a, c in enumerate(coords):
            index |= ((c >> bit) & 1) << (bit * d + a)
    return MortonKey(level, index, d)


def morton_decode(key: MortonKey) -> tuple[int, ...]:
    coords = [0] * key.dim
    for bit in range(key.level):
        for a in range(key.dim):
            coords[a] |= ((key.index >> (bit * key.dim + a)) & 1) << bit
    return tuple(coords)


def interleave(coords: np.ndarray, nbits: int) -> np.ndarray:
    """Vectorised Morton index of integer coordinates, shape (N, d)."""
    coords = np.asarray(coords, dtype=np.int64)
    d = coords.shape[1]
    if nbits * d > 63:
        raise ValueError("Morton index does not fit in 63 bits")
    out = np.zeros(coords.shape[0], dtype=np.int64)
    for bit in range(nbits):
        for a in range(d):
            out |= ((coords[:, a] >> bit) & 1) << (bit * d + a)
    return out


# --------------------------------------------------------------------------
# Region (set id) numbering
# --------------------------------------------------------------------------

def _region_codes(d: int) -> list[tuple[int, ...]]:
    # Per-axis code: 0 lower side, 1 upper side, 2 open interior.
    codes = [c for c in itertools.product((0, 1, 2), repeat=d) if c != (2,) * d]
    return sorted(codes, key=lambda c: (c.count(2), c[::-1]))


_REGION_IDS = {d: {c: i + 1 for i, c in enumerate(_region_codes(d))} for d in (1, 2, 3)}


def interior_set_id(d: int) -> int:
    return 3 ** d


def boundary_set_ids(d: int) -> list[int]:
    return list(range(1, 3 ** d))


def region_set_id(code: tuple[int, ...]) -> int:
    """Set id of a box region given its per-axis code (0/1 boundary, 2 interior)."""
    d = len(code)
    if all(c == 2 for c in code):
        return interior_set_id(d)
    return _REGION_IDS[d][tuple(code)]


def local_vef_codes(d: int) -> list[tuple[int, ...]]:
    """Local VEF enumeration of a cell: vertices, then edges, then faces."""
    return _region_codes(d)


# --------------------------------------------------------------------------
# Mesh entities
# --------------------------------------------------------------------------

@dataclass
class Cell:
    key: MortonKey
    set_id: int


@dataclass
class Vef:
    dim: int
    lo: tuple[int, ...]
    hi: tuple[int, ...]
    incident_cells: list[tuple[int, int]] = field(default_factory=list)
    set_id: int = 0
    is_hanging: bool = False


@dataclass
class CellTransferMap:
    """Lineage of new cells: ``kind[i]`` in {"keep", "refine", "coarsen"}.

    ``source[i]`` is the old cell index for keep/refine (for refine it is
    the old ancestor), or a tuple of old child indices for coarsen.
    """
    kind: list[str]
    source: list


class UnbalancedMeshError(ValueError):
    pass


def _offsets(d: int) -> list[tuple[int, ...]]:
    return [o for o in itertools.product((-1, 0, 1), repeat=d) if any(o)]


class ForestMesh:
    """Box mesh made of axis-aligned cells.

    ``kind == "uniform"`` is an ``n_1 x ... x n_d`` brick mesh (d = 2, 3).
    ``kind == "adaptive"`` is a single-root quadtree (d = 2) whose leaves may
    sit at different levels.
    """

    def __init__(self, dim, levels, coords, set_ids=None, kind="adaptive",
                 lower=None, upper=None, cells_per_dim=None, _sorted=False):
        if dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {dim}")
        if kind not in ("uniform", "adaptive"):
            raise ValueError(f"unknown mesh kind {kind!r}")
        if kind == "adaptive" and dim != 2:
            raise ValueError("adaptive meshes are only supported in 2D")
        self.dim = dim
        self.kind = kind
        self.lower = np.zeros(dim) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.ones(dim) if upper is None else np.asarray(upper, dtype=float)
        levels = np.asarray(levels, dtype=np.int64).reshape(-1)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, dim)
        set_ids = (np.zeros(len(levels), dtype=np.int64) if set_ids is None
                   else np.asarray(set_ids, dtype=np.int64).reshape(-1))
        if kind == "uniform":
            self.cells_per_dim = np.asarray(cells_per_dim, dtype=np.int64)
            self._nbits = max(int(math.ceil(math.log2(max(self.cells_per_dim)))), 0)
        else:
            self.cells_per_dim = None
            self._nbits = int(levels.max()) if len(levels) else 0
        if not _sorted:
            order = np.argsort(self._sfc_index(levels, coords), kind="stable")
            levels, coords, set_ids = levels[order], coords[order], set_ids[order]
        self.levels = levels
        self.coords = coords
        self.set_ids = set_ids
        self.levels.setflags(write=False)
        self.coords.setflags(write=False)
        self.set_ids.setflags(write=False)

    # -- basic queries ---------------------------------------------------

    @property
    def num_cells(self) -> int:
        return len(self.levels)

    def __len__(self):
        return self.num_cells

    def __repr__(self):
        return f"ForestMesh(dim={self.dim}, kind={self.kind!r}, cells={self.num_cells})"

    def _sfc_index(self, levels, coords):
        if self.kind == "uniform":
            return interleave(coords, self._nbits)
        lm = self._nbits
        return interleave(coords << (lm - levels)[:, None], lm)

    def morton_keys(self) -> list[MortonKey]:
        if self.kind == "uniform":
            idx = interleave(self.coords, self._nbits)
            return [MortonKey(self._nbits, int(i), self.dim) for i in idx]
        idx = np.empty(self.num_cells, dtype=np.int64)
        for lvl in np.unique(self.levels):
            sel = self.levels == lvl
            idx[sel] = interleave(self.coords[sel], int(lvl))
        return [MortonKey(int(l), int(i), self.dim) for l, i in zip(self.levels, idx)]

    @property
    def cells(self) -> list[Cell]:
        return [Cell(k, int(s)) for k, s in zip(self.morton_keys(), self.set_ids)]

    @cached_property
    def lattice(self):
        """(anchors (N, d), sizes (N,), extent (d,)) on a common integer lattice."""
        if self.kind == "uniform":
            return self.coords.copy(), np.ones(self.num_cells, dtype=np.int64), \
                self.cells_per_dim.copy()
        lm = self._nbits
        shift = lm - self.levels
        return self.coords << shift[:, None], np.int64(1) << shift, \
            np.full(self.dim, 1 << lm, dtype=np.int64)

    @cached_property
    def cell_lower(self) -> np.ndarray:
        anchors, _, ext = self.lattice
        return self.lower + anchors / ext * (self.upper - self.lower)

    @cached_property
    def cell_size(self) -> np.ndarray:
        _, sizes, ext = self.lattice
        return sizes[:, None] / ext[None, :] * (self.upper - self.lower)

    def cell_measures(self) -> np.ndarray:
        return np.prod(self.cell_size, axis=1)

    def domain_measure(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def lattice_to_physical(self, pts, scale=1) -> np.ndarray:
        """Map lattice points (optionally scaled by ``scale``) to physical coordinates."""
        _, _, ext = self.lattice
        pts = np.asarray(pts, dtype=float)
        return self.lower + pts / (ext * scale) * (self.upper - self.lower)

    # -- leaf lookups ----------------------------------------------------

    @cached_property
    def _lookup(self) -> dict:
        return {(int(l), tuple(int(x) for x in c)): i
                for i, (l, c) in enumerate(zip(self.levels, self.coords))}

    def _in_range(self, level, coords) -> bool:
        if self.kind == "uniform":
            return level == self._nbits and all(0 <= c < n for c, n in zip(coords, self.cells_per_dim))
        return all(0 <= c < (1 << level) for c in coords)

    def find_leaf(self, level, coords):
        """Index of the cell containing the region (level, coords), or None
        if the region is subdivided into finer cells or out of range."""
        if not self._in_range(level, coords):
            return None
        lookup = self._lookup
        if self.kind == "uniform":
            return lookup.get((level, tuple(coords)))
        for m in range(level, -1, -1):
            s = level - m
            i = lookup.get((m, tuple(c >> s for c in coords)))
            if i is not None:
                return i
        return None

    def _leaves_in_region_touching(self, level, coords, offset):
        # Leaves inside region (level, coords) that touch the side facing -offset.
        i = self.find_leaf(level, coords)
        if i is not None:
            return [i]
        if not self._in_range(level, coords) or self.kind == "uniform":
            return []
        out = []
        choices = [(1,) if o < 0 else (0,) if o > 0 else (0, 1) for o in offset]
        for bits in itertools.product(*choices):
            child = tuple(2 * c + b for c, b in zip(coords, bits))
            out.extend(self._leaves_in_region_touching(level + 1, child, offset))
        return out

    def touching_cells(self, i: int) -> list[int]:
        """Cells whose closed boxes touch cell ``i`` (i.e. share some VEF)."""
        level = int(self.levels[i])
        c = self.coords[i]
        found = set()
        for off in _offsets(self.dim):
            nc = tuple(int(x + o) for x, o in zip(c, off))
            found.update(self._leaves_in_region_touching(level, nc, off))
        found.discard(i)
        return sorted(found)

    def facet_neighbor(self, i: int, axis: int, side: int):
        """Cell across facet (axis, side) of cell i.

        Returns ``(j, relation)`` with relation "same", "coarser" or "finer"
        (for "finer" j is a list of cells), or ``(None, "boundary")``.
        """
        level = int(self.levels[i])
        nc = [int(x) for x in self.coords[i]]
        nc[axis] += 1 if side else -1
        nc = tuple(nc)
        if not self._in_range(level, nc):
            return None, "boundary"
        j = self.find_leaf(level, nc)
        if j is not None:
            return j, "same" if self.levels[j] == level else "coarser"
        off = [0] * self.dim
        off[axis] = 1 if side else -1
        return self._leaves_in_region_touching(level, nc, tuple(off)), "finer"

    # -- balance ---------------------------------------------------------

    def balance_violations(self) -> list[tuple[int, int]]:
        """All pairs of touching cells whose levels differ by more than one."""
        bad = []
        for i in range(self.num_cells):
            for j in self.touching_cells(i):
                if j > i and abs(int(self.levels[i]) - int(self.levels[j])) > 1:
                    bad.append((i, j))
        return bad

    def is_balanced(self) -> bool:
        if self.kind == "uniform":
            return True
        return not self.balance_violations()

    # -- VEFs ------------------------------------------------------------

    def _vef_box(self, anchor, size, code):
        lo = tuple(int(a + (size if c == 1 else 0)) for a, c in zip(anchor, code))
        hi = tuple(int(a + (0 if c == 0 else size)) for a, c in zip(anchor, code))
        return lo, hi

    def vef_set_id(self, lo, hi) -> int:
        _, _, ext = self.lattice
        code = []
        for a in range(self.dim):
            if lo[a] == hi[a] and lo[a] == 0:
                code.append(0)
            elif lo[a] == hi[a] and lo[a] == ext[a]:
                code.append(1)
            else:
                code.append(2)
        return region_set_id(tuple(code))

    @cached_property
    def vefs(self) -> list[Vef]:
        """All VEFs (vertices, edges, faces) in order of first appearance."""
        anchors, sizes, _ = self.lattice
        codes = local_vef_codes(self.dim)
        table: dict = {}
        out: list[Vef] = []
        for i in range(self.num_cells):
            for k, code in enumerate(codes):
                lo, hi = self._vef_box(anchors[i], sizes[i], code)
                idx = table.get((lo, hi))
                if idx is None:
                    idx = table[(lo, hi)] = len(out)
                    out.append(Vef(dim=code.count(2), lo=lo, hi=hi,
                                   set_id=self.vef_set_id(lo, hi)))
                out[idx].incident_cells.append((i, k))
        if self.kind == "adaptive":
            hanging = self.find_hanging_vefs()
            for key in hanging["vertices"] | hanging["facets"]:
                out[table[key]].is_hanging = True
        return out

    def find_hanging_vefs(self) -> dict:
        """Lattice boxes of hanging vertices and hanging (fine) facets.

        Returns ``{"vertices": set, "facets": set, "facet_pairs": list}``
        where ``facet_pairs`` holds ``(fine cell, axis, side, coarse cell)``.
        """
        if self.kind == "uniform":
            return {"vertices": set(), "facets": set(), "facet_pairs": []}
        if not self.is_balanced():
            raise UnbalancedMeshError("hanging VEF classification requires a 2:1 balanced mesh")
        return self._hanging_info

    @cached_property
    def _hanging_info(self) -> dict:
        anchors, sizes, _ = self.lattice
        verts, facets, pairs = set(), set(), []
        for i in range(self.num_cells):
            for axis in range(self.dim):
                for side in (0, 1):
                    j, rel = self.facet_neighbor(i, axis, side)
                    if rel != "coarser":
                        continue
                    pairs.append((i, axis, side, j))
                    code = [2] * self.dim
                    code[axis] = side
                    lo, hi = self._vef_box(anchors[i], sizes[i], tuple(code))
                    facets.add((lo, hi))
                    coarse_vertices = {
                        tuple(int(a + b * sizes[j]) for a, b in zip(anchors[j], bits))
                        for bits in itertools.product((0, 1), repeat=self.dim)}
                    for bits in itertools.product((0, 1), repeat=self.dim):
                        if bits[axis] != side:
                            continue
                        v = tuple(int(a + b * sizes[i]) for a, b in zip(anchors[i], bits))
                        if v not in coarse_vertices:
                            verts.add((v, v))
                    # In 3D fine facet edges would be hanging too; adaptive is 2D only.
        return {"vertices": verts, "facets": facets, "facet_pairs": pairs}

    def boundary_facets(self):
        """(cell, axis, side) triples of facets on the domain boundary."""
        out = []
        for i in range(self.num_cells):
            for axis in range(self.dim):
                for side in (0, 1):
                    if self._boundary_facet(i, axis, side):
                        out.append((i, axis, side))
        return out

    def _boundary_facet(self, i, axis, side):
        anchors, sizes, ext = self.lattice
        if side == 0:
            return anchors[i, axis] == 0
        return anchors[i, axis] + sizes[i] == ext[axis]

    # -- helpers ---------------------------------------------------------

    def leaf_dict(self) -> dict:
        return {(int(l), tuple(int(x) for x in c)): int(s)
                for l, c, s in zip(self.levels, self.coords, self.set_ids)}

    @classmethod
    def from_leaf_dict(cls, leaves: dict, template: "ForestMesh") -> "ForestMesh":
        keys = list(leaves)
        levels = np.array([k[0] for k in keys], dtype=np.int64)
        coords = np.array([k[1] for k in keys], dtype=np.int64).reshape(-1, template.dim)
        set_ids = np.array([leaves[k] for k in keys], dtype=np.int64)
        return cls(template.dim, levels, coords, set_ids, kind="adaptive",
                   lower=template.lower, upper=template.upper)


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------

def create_unit_box_mesh(d: int, cells_per_dim, lower=None, upper=None,
                         adaptive: bool = False) -> ForestMesh:
    """Uniform mesh of the box ``[lower, upper]`` (unit box by default).

    With ``adaptive=True`` the mesh is a single-root quadtree refined
    uniformly, which requires d = 2 and a power-of-two cell count per axis.
    """
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    if np.isscalar(cells_per_dim):
        cells_per_dim = [int(cells_per_dim)] * d
    cells_per_dim = [int(n) for n in cells_per_dim]
    if len(cells_per_dim) != d or any(n < 1 for n in cells_per_dim):
        raise ValueError(f"need {d} positive cell counts, got {cells_per_dim}")
    grids = np.meshgrid(*[np.arange(n) for n in cells_per_dim], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    if adaptive:
        if d != 2:
            raise ValueError("adaptive meshes are only supported in 2D")
        n = cells_per_dim[0]
        if any(m != n for m in cells_per_dim) or n & (n - 1):
            raise ValueError("adaptive box mesh needs equal power-of-two counts per axis")
        level = n.bit_length() - 1
        return ForestMesh(d, np.full(len(coords), level), coords, kind="adaptive",
                          lower=lower, upper=upper)
    nbits = max(int(math.ceil(math.log2(max(cells_per_dim)))), 0)
    return ForestMesh(d, np.full(len(coords), nbits), coords, kind="uniform",
                      lower=lower, upper=upper, cells_per_dim=cells_per_dim)


def create_forest_mesh(initial_refinements: int = 0, lower=None, upper=None) -> ForestMesh:
    """Single-root quadtree of the unit square refined uniformly."""
    mesh = ForestMesh(2, [0], [[0, 0]], kind="adaptive", lower=lower, upper=upper)
    for _ in range(initial_refinements):
        mesh, _ = refine_and_coarsen(mesh, np.full(mesh.num_cells, REFINE))
    return mesh


# --------------------------------------------------------------------------
# Adaptation
# --------------------------------------------------------------------------

def _children(key, d):
    level, c = key
    return [(level + 1, tuple(2 * x + b for x, b in zip(c, bits[::-1])))
            for bits in itertools.product((0, 1), repeat=d)]


def _parent(key):
    level, c = key
    return level - 1, tuple(x >> 1 for x in c)


def _containing(leaves, level, coords):
    for m in range(level, -1, -1):
        s = level - m
        k = (m, tuple(x >> s for x in coords))
        if k in leaves:
            return k
    return None


def _split(leaves, key, d):
    sid = leaves.pop(key)
    kids = _children(key, d)
    for k in kids:
        leaves[k] = sid
    return kids


def _balance_leaves(leaves: dict, d: int) -> None:
    offsets = _offsets(d)
    stack = sorted(leaves)
    while stack:
        key = stack.pop()
        if key not in leaves:
            continue
        level, c = key
        if level < 2:
            continue
        n = 1 << level
        for off in offsets:
            nc = tuple(x + o for x, o in zip(c, off))
            if any(x < 0 or x >= n for x in nc):
                continue
            nk = _containing(leaves, level, nc)
            if nk is not None and nk[0] < level - 1:
                stack.extend(_split(leaves, nk, d))
                stack.append(key)


def enforce_2to1_balance(mesh: ForestMesh) -> ForestMesh:
    """Refine cells until touching cells differ by at most one level."""
    if mesh.kind == "uniform":
        return mesh
    leaves = mesh.leaf_dict()
    n0 = len(leaves)
    _balance_leaves(leaves, mesh.dim)
    if len(leaves) == n0:
        return mesh
    return ForestMesh.from_leaf_dict(leaves, mesh)


def _touching_levels_ok(leaves, key, d, max_level):
    # True iff every leaf touching region ``key`` (outside it) has level <= max_level.
    level, c = key
    n = 1 << level
    for off in _offsets(d):
        nc = tuple(x + o for x, o in zip(c, off))
        if any(x < 0 or x >= n for x in nc):
            continue
        if _containing(leaves, level, nc) is not None:
            continue
        # Region subdivided: any leaf finer than level + 1 touching us is a violation.
        stack = [((level, nc))]
        while stack:
            lk, ck = stack.pop()
            if (lk, ck) in leaves:
                if lk > max_level:
                    return False
                continue
            if lk + 1 > max_level:
                return False
            choices = [(1,) if o < 0 else (0,) if o > 0 else (0, 1) for o in off]
            for bits in itertools.product(*choices):
                stack.append((lk + 1, tuple(2 * x + b for x, b in zip(ck, bits))))
    return True


def refine_and_coarsen(mesh: ForestMesh, flags) -> tuple[ForestMesh, CellTransferMap]:
    """Adapt an adaptive mesh according to per-cell flags.

    Refinement is applied first and the result is 2:1 balanced (including
    corner neighbours). A sibling family is then merged only if all its
    members are still leaves, all were flagged for coarsening, and merging
    keeps the balance; otherwise the coarsen flags are ignored.
    """
    if mesh.kind != "adaptive":
        raise ValueError("refine_and_coarsen requires an adaptive mesh")
    flags = np.asarray(flags).reshape(-1)
    if len(flags) != mesh.num_cells:
        raise ValueError(f"got {len(flags)} flags for {mesh.num_cells} cells")
    d = mesh.dim
    old_keys = [(int(l), tuple(int(x) for x in c)) for l, c in zip(mesh.levels, mesh.coords)]
    leaves = mesh.leaf_dict()
    for key, f in zip(old_keys, flags):
        if f == REFINE:
            _split(leaves, key, d)
    _balance_leaves(leaves, d)

    coarsen_set = {k for k, f in zip(old_keys, flags) if f == COARSEN and k[0] > 0}
    families: dict = {}
    for k in coarsen_set:
        families.setdefault(_parent(k), []).append(k)
    merge = []
    for parent, kids in sorted(families.items()):
        if len(kids) != 2 ** d or any(k not in leaves for k in kids):
            continue
        if _touching_levels_ok(leaves, parent, d, parent[0] + 1):
            merge.append(parent)
    for parent in merge:
        kids = _children(parent, d)
        sid = leaves[kids[0]]
        for k in kids:
            del leaves[k]
        leaves[parent] = sid

    new = ForestMesh.from_leaf_dict(leaves, mesh)
    old_lookup = mesh._lookup
    kinds, sources = [], []
    for l, c in zip(new.levels, new.coords):
        key = (int(l), tuple(int(x) for x in c))
        if key in old_lookup:
            kinds.append("keep")
            sources.append(old_lookup[key])
            continue
        anc = mesh.find_leaf(*key)
        if anc is not None:
            kinds.append("refine")
            sources.append(anc)
        else:
            kinds.append("coarsen")
            sources.append(tuple(old_lookup[k] for k in _children(key, d)))
    return new, CellTransferMap(kinds, sources)


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------

class Partition:
    """Contiguous split of the Morton-ordered cells into ``num_parts`` segments."""

    def __init__(self, mesh: ForestMesh, num_parts: int):
        n = mesh.num_cells
        if num_parts < 1:
            raise ValueError("number of parts must be positive")
        if num_parts > n:
            raise ValueError(f"cannot split {n} cells into {num_parts} parts")
        self.mesh = mesh
        self.num_parts = num_parts
        base, extra = divmod(n, num_parts)
        sizes = np.full(num_parts, base, dtype=np.int64)
        sizes[:extra] += 1
        self.sizes = sizes
        self.owner = np.repeat(np.arange(num_parts), sizes)

    def cells(self, p: int) -> np.ndarray:
        return np.flatnonzero(self.owner == p)

    @cached_property
    def ghosts(self) -> list[set[int]]:
        """Per part, the off-part cells touching one of its cells."""
        out = [set() for _ in range(self.num_parts)]
        owner = self.owner
        for i in range(self.mesh.num_cells):
            p = owner[i]
            for j in self.mesh.touching_cells(i):
                if owner[j] != p:
                    out[p].add(j)
        return out


def partition_sfc(mesh: ForestMesh, num_parts: int) -> Partition:
    return Partition(mesh, num_parts)
