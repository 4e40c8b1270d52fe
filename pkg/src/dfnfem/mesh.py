"""Macro meshes of the n|s|p laminate and per-electrode radial grids.

The macro mesh is structured: 1D intervals along the through-cell axis, or a
tensor grid of the laminate split into triangles in 2D.  In 1D the boundary
facets are the two end vertices and carry unit measure, so boundary
integrals reduce to point evaluations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .params import ELECTRODES, ConfigError, ParameterSet, SubdomainTag

__all__ = [
    "FacetTag",
    "InterfaceTag",
    "CellMesh",
    "RadialGrid",
    "build_laminate",
    "refine_uniform",
    "build_radial",
    "refine_radial",
    "surface_clustered_nodes",
    "dump_mesh",
    "load_mesh",
    "grids_from_config",
]


class FacetTag(IntEnum):
    GAMMA_N = 0
    GAMMA_P = 1
    INSULATED = 2


class InterfaceTag(IntEnum):
    SN = 0
    SP = 1


@dataclass(frozen=True, eq=False)
class CellMesh:
    """Conforming simplicial mesh of the laminate.

    Attributes
    ----------
    vertices : (nv, dim) float array
    elements : (ne, dim+1) int array of vertex indices
    tags : (ne,) int array of :class:`SubdomainTag` values
    boundary_facets : (nb, dim) int array of vertex indices
    boundary_tags : (nb,) int array of :class:`FacetTag` values
    interface_facets : (ni, dim) int array
    interface_tags : (ni,) int array of :class:`InterfaceTag` values
    """

    vertices: np.ndarray
    elements: np.ndarray
    tags: np.ndarray
    boundary_facets: np.ndarray
    boundary_tags: np.ndarray
    interface_facets: np.ndarray
    interface_tags: np.ndarray
    max_shape_ratio: float = field(default=50.0)

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (1, 2):
            raise ValueError("vertices must be (nv, 1) or (nv, 2)")
        if self.elements.shape[1] != self.dim + 1:
            raise ValueError("elements must have dim+1 vertices")
        if self.tags.shape != (self.elements.shape[0],):
            raise ValueError("one tag per element is required")
        for a in (self.vertices, self.elements, self.tags, self.boundary_facets,
                  self.boundary_tags, self.interface_facets, self.interface_tags):
            a.setflags(write=False)
        if np.any(self.volumes <= 0.0):
            raise ValueError("element with non-positive volume")
        if self.shape_ratio > self.max_shape_ratio:
            raise ValueError(f"shape-regularity ratio {self.shape_ratio:.3g} exceeds {self.max_shape_ratio}")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def volumes(self) -> np.ndarray:
        x = self.vertices[self.elements]
        if self.dim == 1:
            return x[:, 1, 0] - x[:, 0, 0]
        d1 = x[:, 1] - x[:, 0]
        d2 = x[:, 2] - x[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        if self.dim == 1:
            return self.volumes.copy()
        x = self.vertices[self.elements]
        edges = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 1], x[:, 0] - x[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def shape_ratio(self) -> float:
        """max over elements of diameter / inradius (1 in 1D)."""
        if self.dim == 1:
            return 1.0
        x = self.vertices[self.elements]
        lengths = np.linalg.norm(
            np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 1], x[:, 0] - x[:, 2]], axis=1), axis=2
        )
        inradius = 2.0 * self.volumes / lengths.sum(axis=1)
        return float((self.diameters / inradius).max())

    @cached_property
    def boundary_measures(self) -> np.ndarray:
        if self.dim == 1:
            return np.ones(len(self.boundary_facets))
        x = self.vertices[self.boundary_facets]
        return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)

    def elements_of(self, tag) -> np.ndarray:
        return np.flatnonzero(self.tags == int(tag))

    @cached_property
    def electrode_elements(self) -> np.ndarray:
        """Indices of the elements of the two electrodes, in ascending order."""
        return np.flatnonzero(np.isin(self.tags, [int(t) for t in ELECTRODES]))

    @cached_property
    def electrode_vertices(self) -> np.ndarray:
        """Sorted vertex indices touching an electrode element."""
        return np.unique(self.elements[self.electrode_elements])

    def volume_of(self, tag) -> float:
        return float(self.volumes[self.tags == int(tag)].sum())

    def gamma(self, which: FacetTag) -> tuple[np.ndarray, np.ndarray]:
        """Facets and measures carrying ``which``."""
        sel = self.boundary_tags == int(which)
        return self.boundary_facets[sel], self.boundary_measures[sel]


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Radial nodes on [0, Rs] for one electrode."""

    nodes: np.ndarray
    tag: SubdomainTag

    def __post_init__(self):
        n = self.nodes
        if n.ndim != 1 or n.size < 2:
            raise ValueError("radial grid needs at least two nodes")
        if n[0] != 0.0:
            raise ValueError("radial grid must start at 0")
        if np.any(np.diff(n) <= 0.0):
            raise ValueError("radial nodes must be strictly increasing")
        n.setflags(write=False)

    @property
    def Rs(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def dr(self) -> float:
        return float(np.diff(self.nodes).max())


# construction ---------------------------------------------------------------

def _axis_nodes(extents: Sequence[float], counts: Sequence[int]):
    xs, cell_tags = [np.zeros(1)], []
    x0 = 0.0
    for tag, (length, n) in zip(SubdomainTag, zip(extents, counts)):
        if not length > 0.0:
            raise ValueError(f"degenerate extent for {tag.key}: {length}")
        if int(n) < 1:
            raise ValueError(f"zero element count for {tag.key}")
        n = int(n)
        seg = x0 + length * np.arange(1, n + 1) / n
        seg[-1] = x0 + length
        xs.append(seg)
        cell_tags += [int(tag)] * n
        x0 = x0 + length
    return np.concatenate(xs), np.array(cell_tags, dtype=np.int64)


def build_laminate(
    extents: Sequence[float],
    counts: Sequence[int],
    height: float | None = None,
    ny: int | None = None,
) -> CellMesh:
    """Structured mesh of the n|s|p laminate.

    Parameters
    ----------
    extents : three thicknesses (m), ordered negative, separator, positive
    counts : element counts along the through-cell axis per subdomain
    height, ny : cell height (m) and element rows; give both for a 2D mesh

    Returns
    -------
    CellMesh
        Boundary facets at x = 0 are tagged GAMMA_N, at x = L GAMMA_P; all
        other exterior facets are INSULATED.
    """
    if len(extents) != 3 or len(counts) != 3:
        raise ValueError("need three extents and three counts (n, s, p)")
    x, cell_tags = _axis_nodes(extents, counts)
    nx = x.size - 1
    # interface vertex columns
    i_sn = int(counts[0])
    i_sp = int(counts[0]) + int(counts[1])

    if height is None:
        verts = x[:, None]
        elems = np.stack([np.arange(nx), np.arange(1, nx + 1)], axis=1)
        bfac = np.array([[0], [nx]])
        btag = np.array([FacetTag.GAMMA_N, FacetTag.GAMMA_P])
        ifac = np.array([[i_sn], [i_sp]])
        itag = np.array([InterfaceTag.SN, InterfaceTag.SP])
        return CellMesh(verts, elems, cell_tags, bfac, btag, ifac, itag)

    if not height > 0.0 or ny is None or int(ny) < 1:
        raise ValueError("2D laminate needs height > 0 and ny >= 1")
    ny = int(ny)
    y = height * np.arange(ny + 1) / ny
    y[-1] = height
    X, Y = np.meshgrid(x, y, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    a, b, c, d = vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)
    lower = np.stack([a, b, c], axis=1)
    upper = np.stack([a, c, d], axis=1)
    elems = np.stack([lower, upper], axis=1).reshape(-1, 3)
    tags = np.repeat(cell_tags[I], 2)

    js = np.arange(ny)
    is_ = np.arange(nx)
    fac, ftag = [], []
    fac.append(np.stack([vid(0, js + 1), vid(0, js)], axis=1))
    ftag.append(np.full(ny, FacetTag.GAMMA_N))
    fac.append(np.stack([vid(nx, js), vid(nx, js + 1)], axis=1))
    ftag.append(np.full(ny, FacetTag.GAMMA_P))
    fac.append(np.stack([vid(is_, 0), vid(is_ + 1, 0)], axis=1))
    ftag.append(np.full(nx, FacetTag.INSULATED))
    fac.append(np.stack([vid(is_ + 1, ny), vid(is_, ny)], axis=1))
    ftag.append(np.full(nx, FacetTag.INSULATED))
    ifac = np.concatenate([
        np.stack([vid(i_sn, js), vid(i_sn, js + 1)], axis=1),
        np.stack([vid(i_sp, js), vid(i_sp, js + 1)], axis=1),
    ])
    itag = np.repeat([InterfaceTag.SN, InterfaceTag.SP], ny)
    return CellMesh(verts, elems, tags, np.concatenate(fac), np.concatenate(ftag), ifac, itag)


def _refine_1d(mesh: CellMesh) -> CellMesh:
    x = mesh.vertices[:, 0]
    mid = 0.5 * (x[:-1] + x[1:])
    nv = x.size
    xf = np.empty(2 * nv - 1)
    xf[0::2] = x
    xf[1::2] = mid
    ne = 2 * mesh.n_elements
    elems = np.stack([np.arange(ne), np.arange(1, ne + 1)], axis=1)
    return CellMesh(
        xf[:, None], elems, np.repeat(mesh.tags, 2),
        2 * mesh.boundary_facets, mesh.boundary_tags.copy(),
        2 * mesh.interface_facets, mesh.interface_tags.copy(),
        mesh.max_shape_ratio,
    )


def _refine_2d(mesh: CellMesh) -> CellMesh:
    el = mesh.elements
    nv = mesh.n_vertices
    edges = np.concatenate([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    verts = np.concatenate([mesh.vertices, mids])
    ne = el.shape[0]
    m01, m12, m20 = (nv + inv[k * ne:(k + 1) * ne] for k in range(3))
    v0, v1, v2 = el.T
    children = np.stack([
        np.stack([v0, m01, m20], axis=1),
        np.stack([m01, v1, m12], axis=1),
        np.stack([m20, m12, v2], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ], axis=1).reshape(-1, 3)
    tags = np.repeat(mesh.tags, 4)

    lookup = {tuple(e): nv + i for i, e in enumerate(uniq)}

    def split(facets):
        if facets.size == 0:
            return facets
        m = np.array([lookup[tuple(sorted(f))] for f in facets])
        return np.stack([np.stack([facets[:, 0], m], 1), np.stack([m, facets[:, 1]], 1)], 1).reshape(-1, 2)

    return CellMesh(
        verts, children, tags,
        split(mesh.boundary_facets), np.repeat(mesh.boundary_tags, 2),
        split(mesh.interface_facets), np.repeat(mesh.interface_tags, 2),
        mesh.max_shape_ratio,
    )


def refine_uniform(mesh: CellMesh, levels: int) -> CellMesh:
    """Uniform refinement: bisection in 1D, red (4-way) refinement in 2D.

    Coarse vertices keep their coordinates bit-for-bit, so the vertex sets
    are nested and tags are inherited.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    step = _refine_1d if mesh.dim == 1 else _refine_2d
    for _ in range(int(levels)):
        mesh = step(mesh)
    return mesh


def surface_clustered_nodes(n: int = 9) -> np.ndarray:
    """Nodes {0} u {1 - 2^-k, k = 1..n} u {1} on the unit interval."""
    k = np.arange(1, n + 1)
    return np.concatenate([[0.0], 1.0 - 0.5**k, [1.0]])


def build_radial(ps: ParameterSet, tag, spec) -> RadialGrid:
    """Radial grid for electrode ``tag``.

    ``spec`` is either an interval count (uniform grid) or a node list on
    [0, 1] that is scaled by the particle radius.
    """
    tag = SubdomainTag(tag)
    Rs = ps.electrode(tag).Rs
    if np.isscalar(spec):
        n = int(spec)
        if n < 1:
            raise ValueError("radial interval count must be >= 1")
        nodes = Rs * np.arange(n + 1) / n
    else:
        s = np.asarray(spec, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("radial node list needs at least two entries")
        if np.any(np.diff(s) <= 0.0):
            raise ValueError("radial node list must be strictly increasing")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError("radial node list must start at 0 and end at 1")
        nodes = Rs * s
    nodes[-1] = Rs
    return RadialGrid(nodes, tag)


def refine_radial(grid: RadialGrid, levels: int = 1) -> RadialGrid:
    """Halve every radial interval ``levels`` times."""
    n = grid.nodes.copy()
    for _ in range(int(levels)):
        f = np.empty(2 * n.size - 1)
        f[0::2] = n
        f[1::2] = 0.5 * (n[:-1] + n[1:])
        n = f
    return RadialGrid(n, grid.tag)


_MESH_KEYS = {"counts", "refine", "height", "ny"}
_RADIAL_KEYS = {"intervals", "nodes", "clustered", "refine"}


def grids_from_config(ps: ParameterSet, mesh_spec=None, radial_spec=None):
    """Macro mesh and radial grids described by the ``[mesh]``/``[radial]`` tables.

    ``[mesh]`` takes ``counts`` (per subdomain), ``refine`` and, for 2D,
    ``height`` and ``ny``.  ``[radial]`` takes one of ``intervals`` (uniform),
    ``nodes`` (list on [0, 1]) or ``clustered`` (surface-clustered node count)
    plus ``refine``.  Missing tables fall back to ``ps.extra``.

    Returns
    -------
    mesh : CellMesh
    radial : dict tag -> RadialGrid
    """
    m = dict(ps.extra.get("mesh", {}) if mesh_spec is None else mesh_spec)
    r = dict(ps.extra.get("radial", {}) if radial_spec is None else radial_spec)
    for name, table, keys in (("mesh", m, _MESH_KEYS), ("radial", r, _RADIAL_KEYS)):
        bad = sorted(set(table) - keys)
        if bad:
            raise ConfigError(f"[{name}]: unknown key(s) {', '.join(bad)}")
    if ("height" in m) != ("ny" in m):
        raise ConfigError("[mesh]: give both height and ny for a 2D mesh, or neither")
    try:
        mesh = build_laminate(ps.thicknesses(), m.get("counts", [4, 1, 4]), m.get("height"), m.get("ny"))
        mesh = refine_uniform(mesh, int(m.get("refine", 0)))
        if "nodes" in r:
            spec = r["nodes"]
        elif "clustered" in r:
            spec = surface_clustered_nodes(int(r["clustered"]))
        else:
            spec = int(r.get("intervals", 8))
        radial = {tag: refine_radial(build_radial(ps, tag, spec), int(r.get("refine", 0))) for tag in ELECTRODES}
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad mesh or radial settings: {exc}") from None
    return mesh, radial


# plain-text dump ------------------------------------------------------------

def dump_mesh(mesh: CellMesh, path) -> None:
    """Write a mesh as text sections: vertices, elements (+tag), facets (+tag)."""
    with open(path, "w") as fh:
        fh.write(f"dfnfem-mesh 1\ndim {mesh.dim}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        for name, idx, tag in (
            ("elements", mesh.elements, mesh.tags),
            ("boundary", mesh.boundary_facets, mesh.boundary_tags),
            ("interfaces", mesh.interface_facets, mesh.interface_tags),
        ):
            fh.write(f"{name} {idx.shape[0]}\n")
            np.savetxt(fh, np.column_stack([idx, tag]), fmt="%d")


def load_mesh(path) -> CellMesh:
    """Inverse of :func:`dump_mesh`."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("dfnfem-mesh"):
        raise ValueError(f"{path}: not a mesh dump")
    dim = int(lines[1].split()[1])
    pos = 2
    blocks = {}
    for name in ("vertices", "elements", "boundary", "interfaces"):
        head, count = lines[pos].split()
        if head != name:
            raise ValueError(f"{path}: expected section {name!r}, found {head!r}")
        count = int(count)
        rows = lines[pos + 1:pos + 1 + count]
        dtype = float if name == "vertices" else np.int64
        width = dim if name == "vertices" else (dim + 2 if name == "elements" else dim + 1)
        blocks[name] = np.array([r.split() for r in rows], dtype=dtype).reshape(count, width)
        pos += 1 + count
    e, b, i = blocks["elements"], blocks["boundary"], blocks["interfaces"]
    return CellMesh(blocks["vertices"], e[:, :-1], e[:, -1], b[:, :-1], b[:, -1], i[:, :-1], i[:, -1])
