"""Structured triangulations of the unit square with square subdomain decompositions.

Node, element and subdomain numbering is row-major in grid coordinates, so
every object built here is a pure function of its integer inputs and
re-running a constructor is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DecomposedMesh",
    "Edge",
    "InterfaceConnectivity",
    "IndexPartition",
    "build_mesh",
    "enumerate_interface",
    "build_partition",
]


@dataclass(frozen=True)
class DecomposedMesh:
    """Uniform triangle mesh of [0,1]^2 split into square subdomains.

    Every grid square is cut along its lower-left to upper-right diagonal,
    giving two counterclockwise triangles per cell.  Cells, nodes and
    subdomains are numbered row-major (x fastest).
    """

    nodes: np.ndarray                 # (n_nodes, 2)
    elements: np.ndarray              # (n_elements, 3) node triples, CCW
    subdomains_per_dim: int
    elements_per_subdomain_edge: int
    subdomain_element_map: tuple      # per subdomain: sorted element ids
    local_to_global: tuple            # per subdomain: (hh+1)^2 global node ids

    @property
    def n_cells(self) -> int:
        return self.subdomains_per_dim * self.elements_per_subdomain_edge

    @property
    def n_side(self) -> int:
        return self.n_cells + 1

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_subdomains(self) -> int:
        return self.subdomains_per_dim ** 2

    @property
    def element_subdomain(self) -> np.ndarray:
        """Owning subdomain id per element."""
        hh = self.elements_per_subdomain_edge
        n = self.n_cells
        cell = np.arange(self.elements.shape[0]) // 2
        cx, cy = cell % n, cell // n
        return (cy // hh) * self.subdomains_per_dim + cx // hh


@dataclass(frozen=True)
class Edge:
    """Open interface segment between two subdomains (corner points excluded).

    `nodes` lists the edge-interior global node ids in canonical order: along
    the tangent t = rot90(n) where the normal n points from `sub_lo` into
    `sub_hi`.  `anchor` is the grid coordinate of the corner endpoint the
    tangent starts from.
    """

    index: int
    sub_lo: int
    sub_hi: int
    nodes: np.ndarray
    touches_dirichlet: bool
    normal: tuple
    anchor: tuple

    @property
    def tangent(self) -> tuple:
        nx, ny = self.normal
        return (-ny, nx)


@dataclass(frozen=True)
class InterfaceConnectivity:
    """Interface classification: corner (vertex) nodes, edges, Dirichlet nodes."""

    vertex_nodes: np.ndarray          # sorted global node ids on the interface
    edges: tuple                      # Edge records, lexicographic by (lo, hi)
    dirichlet_nodes: np.ndarray       # sorted global node ids on x = 0

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def vertex_rank(self) -> dict:
        return {int(v): i for i, v in enumerate(self.vertex_nodes)}


@dataclass(frozen=True)
class IndexPartition:
    """Free-dof bookkeeping for the dual-primal splitting.

    Per subdomain, the free (non-Dirichlet) local degrees of freedom are
    numbered by ascending local node id; `interior_pos`, `dual_pos` and
    `vertex_pos` partition those positions.  `edge_pos_lo/hi[e]` give, per
    edge, the free-local positions of its interior nodes (edge order) in the
    two adjacent subdomains.
    """

    free_nodes: np.ndarray            # global node ids, ascending
    node_to_free: np.ndarray          # global node id -> free index, -1 if Dirichlet
    multiplicity: np.ndarray          # per free dof: number of owning subdomains
    sub_free_local: tuple             # per sub: local node ids of free dofs
    sub_free_global: tuple            # per sub: global free index per position
    interior_pos: tuple
    dual_pos: tuple
    vertex_pos: tuple
    vertex_rank_at_pos: tuple         # per sub: global vertex rank per vertex_pos entry
    edge_pos_lo: tuple
    edge_pos_hi: tuple

    @property
    def n_free(self) -> int:
        return len(self.free_nodes)

    def n_free_local(self, s: int) -> int:
        return len(self.sub_free_local[s])


def build_mesh(n_sub: int, h_over_h: int) -> DecomposedMesh:
    """Build the structured mesh with `n_sub` x `n_sub` square subdomains of
    `h_over_h` x `h_over_h` grid squares each."""
    if n_sub < 2:
        raise ValueError(f"need at least 2x2 subdomains, got {n_sub}")
    if h_over_h < 2:
        raise ValueError(f"need at least 2 elements per subdomain edge, got {h_over_h}")

    n = n_sub * h_over_h
    n_side = n + 1
    xs = np.linspace(0.0, 1.0, n_side)
    X, Y = np.meshgrid(xs, xs)        # X[iy, ix] = xs[ix]
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    cx, cy = np.meshgrid(np.arange(n), np.arange(n))
    cx, cy = cx.ravel(), cy.ravel()
    ll = cy * n_side + cx
    lr, ul = ll + 1, ll + n_side
    ur = ul + 1
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([ll, lr, ur])    # below the ll->ur diagonal
    elements[1::2] = np.column_stack([ll, ur, ul])

    sub_of_cell = (cy // h_over_h) * n_sub + cx // h_over_h
    sub_of_el = np.repeat(sub_of_cell, 2)
    el_ids = np.arange(2 * n * n)
    subdomain_element_map = tuple(
        np.sort(el_ids[sub_of_el == s]) for s in range(n_sub * n_sub)
    )

    loc = np.arange(h_over_h + 1)
    lx, ly = np.meshgrid(loc, loc)
    local_to_global = []
    for sy in range(n_sub):
        for sx in range(n_sub):
            gx = sx * h_over_h + lx
            gy = sy * h_over_h + ly
            local_to_global.append((gy * n_side + gx).ravel())
    return DecomposedMesh(
        nodes=nodes,
        elements=elements,
        subdomains_per_dim=n_sub,
        elements_per_subdomain_edge=h_over_h,
        subdomain_element_map=subdomain_element_map,
        local_to_global=tuple(local_to_global),
    )


def enumerate_interface(mesh: DecomposedMesh) -> InterfaceConnectivity:
    """Classify interface nodes per the rule: a node lies on the interface iff
    it belongs to at least two subdomain closures and not to the Dirichlet
    boundary x = 0."""
    ns = mesh.subdomains_per_dim
    hh = mesh.elements_per_subdomain_edge
    n = mesh.n_cells
    n_side = mesh.n_side

    ix = np.arange(n_side)
    on_sub_line = (ix % hh == 0) & (ix > 0) & (ix < n)
    count_1d = np.where(on_sub_line, 2, 1)
    mult = count_1d[None, :] * count_1d[:, None]          # [iy, ix]
    IX, IY = np.meshgrid(ix, ix)
    dirichlet = IX == 0
    on_gamma = (mult >= 2) & ~dirichlet
    is_corner = (IX % hh == 0) & (IY % hh == 0)
    vertex_mask = on_gamma & is_corner
    node_id = IY * n_side + IX
    vertex_nodes = np.sort(node_id[vertex_mask].ravel())
    dirichlet_nodes = np.sort(node_id[dirichlet].ravel())

    edges = []
    for sy in range(ns):
        for sx in range(ns - 1):
            # vertical interface: normal (1,0), tangent (0,1), nodes bottom-up
            lo = sy * ns + sx
            hi = lo + 1
            ixe = (sx + 1) * hh
            iys = np.arange(sy * hh + 1, (sy + 1) * hh)
            edges.append(
                (lo, hi, iys * n_side + ixe, False, (1, 0), (ixe, sy * hh))
            )
    for sy in range(ns - 1):
        for sx in range(ns):
            # horizontal interface: normal (0,1), tangent (-1,0), nodes right-to-left
            lo = sy * ns + sx
            hi = lo + ns
            iye = (sy + 1) * hh
            ixs = np.arange((sx + 1) * hh - 1, sx * hh, -1)
            edges.append(
                (lo, hi, iye * n_side + ixs, sx == 0, (0, 1), ((sx + 1) * hh, iye))
            )
    edges.sort(key=lambda e: (e[0], e[1]))
    records = tuple(
        Edge(index=i, sub_lo=lo, sub_hi=hi, nodes=nds, touches_dirichlet=td,
             normal=nrm, anchor=anc)
        for i, (lo, hi, nds, td, nrm, anc) in enumerate(edges)
    )
    return InterfaceConnectivity(
        vertex_nodes=vertex_nodes, edges=records, dirichlet_nodes=dirichlet_nodes
    )


def build_partition(mesh: DecomposedMesh, conn: InterfaceConnectivity) -> IndexPartition:
    """Number the free dofs and split each subdomain's into interior / dual /
    vertex-primal positions."""
    n_nodes = mesh.nodes.shape[0]
    is_dirichlet = np.zeros(n_nodes, dtype=bool)
    is_dirichlet[conn.dirichlet_nodes] = True
    free_nodes = np.flatnonzero(~is_dirichlet)
    node_to_free = np.full(n_nodes, -1, dtype=np.int64)
    node_to_free[free_nodes] = np.arange(len(free_nodes))

    kind = np.zeros(n_nodes, dtype=np.int8)               # 0 interior, 1 dual, 2 vertex
    for e in conn.edges:
        kind[e.nodes] = 1
    kind[conn.vertex_nodes] = 2
    vrank = np.full(n_nodes, -1, dtype=np.int64)
    vrank[conn.vertex_nodes] = np.arange(len(conn.vertex_nodes))

    n_sub = mesh.n_subdomains
    sub_free_local, sub_free_global = [], []
    interior_pos, dual_pos, vertex_pos, vertex_rank_at_pos = [], [], [], []
    glob_to_pos = []                                       # per sub: global node -> position
    for s in range(n_sub):
        l2g = mesh.local_to_global[s]
        free_loc = np.flatnonzero(~is_dirichlet[l2g])
        gids = l2g[free_loc]
        sub_free_local.append(free_loc)
        sub_free_global.append(node_to_free[gids])
        k = kind[gids]
        interior_pos.append(np.flatnonzero(k == 0))
        dual_pos.append(np.flatnonzero(k == 1))
        vpos = np.flatnonzero(k == 2)
        vertex_pos.append(vpos)
        vertex_rank_at_pos.append(vrank[gids[vpos]])
        g2p = np.full(n_nodes, -1, dtype=np.int64)
        g2p[gids] = np.arange(len(gids))
        glob_to_pos.append(g2p)

    edge_pos_lo, edge_pos_hi = [], []
    for e in conn.edges:
        edge_pos_lo.append(glob_to_pos[e.sub_lo][e.nodes])
        edge_pos_hi.append(glob_to_pos[e.sub_hi][e.nodes])

    multiplicity = np.zeros(len(free_nodes), dtype=np.int64)
    for s in range(n_sub):
        multiplicity[sub_free_global[s]] += 1

    return IndexPartition(
        free_nodes=free_nodes,
        node_to_free=node_to_free,
        multiplicity=multiplicity,
        sub_free_local=tuple(sub_free_local),
        sub_free_global=tuple(sub_free_global),
        interior_pos=tuple(interior_pos),
        dual_pos=tuple(dual_pos),
        vertex_pos=tuple(vertex_pos),
        vertex_rank_at_pos=tuple(vertex_rank_at_pos),
        edge_pos_lo=tuple(edge_pos_lo),
        edge_pos_hi=tuple(edge_pos_hi),
    )
