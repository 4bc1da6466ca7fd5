"""Coarse spaces: vertex primal set plus per-edge weighted constraints.

Three sources produce the same object: the plain vertex space, the adaptive
space (per-edge generalized eigenvalue problems selecting eigenvectors above
a tolerance), and externally supplied constraint vectors (from the trained
networks or by hand).  Constraint vectors use the edge's canonical node
order, unit 2-norm and a positive largest-magnitude entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .geometry import DecomposedMesh, InterfaceConnectivity, IndexPartition
from .coefficients import CoefficientField
from .operators import JumpOperator, build_jump, build_scaled_jump

__all__ = [
    "CoarseSpace",
    "EdgeEigenResult",
    "vertex_coarse",
    "edge_eigenproblem",
    "adaptive_coarse",
    "manual_coarse",
    "sign_fix",
    "interface_schur",
]

KERNEL_RTOL = 1e-10      # relative eigenvalue cut for the local Schur kernel
SHIFT_DELTA = 1e-12      # relative shift keeping the right-hand operator SPD
DEP_TOL = 1e-8           # near-dependence drop tolerance for constraint sets


def sign_fix(v: np.ndarray) -> np.ndarray:
    """Flip the vector so its largest-magnitude entry is positive; idempotent."""
    if v.size == 0:
        return v
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


@dataclass
class CoarseSpace:
    """Vertex primal nodes plus orthonormal per-edge constraint vectors."""

    vertex_nodes: np.ndarray
    edge_constraints: dict               # edge index -> (k, n_E) array
    provenance: dict                     # edge index -> list of tags
    n_edges: int
    dropped: int = 0                     # near-dependent vectors discarded

    @property
    def size(self) -> int:
        return len(self.vertex_nodes) + sum(
            c.shape[0] for c in self.edge_constraints.values())

    def constraints_on(self, edge_index: int) -> np.ndarray:
        return self.edge_constraints.get(edge_index, np.empty((0, 0)))

    def to_json_dict(self) -> dict:
        return {
            "version": 1,
            "vertices": [int(v) for v in self.vertex_nodes],
            "n_edges": self.n_edges,
            "edges": [
                {
                    "edge": int(e),
                    "constraints": np.asarray(c).tolist(),
                    "provenance": self.provenance.get(e, []),
                }
                for e, c in sorted(self.edge_constraints.items())
            ],
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f)

    @classmethod
    def from_json_dict(cls, d: dict) -> "CoarseSpace":
        if d.get("version") != 1:
            raise ValueError("unsupported coarse space file version")
        ec = {int(e["edge"]): np.asarray(e["constraints"], dtype=float)
              for e in d["edges"]}
        prov = {int(e["edge"]): e.get("provenance", []) for e in d["edges"]}
        return cls(vertex_nodes=np.asarray(d["vertices"], dtype=np.int64),
                   edge_constraints=ec, provenance=prov, n_edges=d["n_edges"])

    @classmethod
    def load(cls, path) -> "CoarseSpace":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class EdgeEigenResult:
    edge_index: int
    eigenvalues: np.ndarray              # descending
    constraints: list                    # weight vectors for the selected pairs
    count_above_tol: int


def vertex_coarse(conn: InterfaceConnectivity) -> CoarseSpace:
    """Subdomain corner points only."""
    return CoarseSpace(vertex_nodes=conn.vertex_nodes.copy(),
                       edge_constraints={}, provenance={}, n_edges=conn.n_edges)


def interface_schur(tangent, part: IndexPartition, s: int):
    """Dense Schur complement of a subdomain tangent onto its interface dofs
    (dual plus vertex positions); singular for floating subdomains."""
    gamma = np.sort(np.concatenate([part.dual_pos[s], part.vertex_pos[s]]))
    iota = part.interior_pos[s]
    A = tangent.tocsr()
    A_gg = A[gamma][:, gamma].toarray()
    if len(iota) == 0:
        return gamma, A_gg
    A_gi = A[gamma][:, iota]
    A_ig = A[iota][:, gamma].toarray()
    lu = splu(A[iota][:, iota].tocsc())
    return gamma, A_gg - A_gi @ lu.solve(A_ig)


def edge_eigenproblem(edge_index: int, conn: InterfaceConnectivity,
                      part: IndexPartition, tangents, B: JumpOperator,
                      B_D: JumpOperator, tol: float,
                      schur_cache: dict | None = None) -> EdgeEigenResult:
    """Two-subdomain edge eigenvalue problem: with S = blockdiag(S_i, S_j) the
    interface Schur complements and P_D = B_{D,E}^T B_E the edge jump/scaling
    operator, solve  P_D^T S P_D w = mu S w  on the complement of ker(S)
    (kernel projected out, right side shifted SPD).  Eigenvectors above `tol`
    are post-processed to edge weight vectors  B_{D,E} S P_D w, normalized
    and sign-fixed."""
    e = conn.edges[edge_index]
    if schur_cache is None:
        schur_cache = {}
    parts = []
    for s in (e.sub_lo, e.sub_hi):
        if s not in schur_cache:
            schur_cache[s] = interface_schur(tangents[s], part, s)
        parts.append(schur_cache[s])
    (g_lo, S_lo), (g_hi, S_hi) = parts
    m_lo, m_hi = len(g_lo), len(g_hi)
    m = m_lo + m_hi
    S = np.zeros((m, m))
    S[:m_lo, :m_lo] = S_lo
    S[m_lo:, m_lo:] = S_hi

    n_e = len(e.nodes)
    rows = np.arange(n_e)
    col_lo = np.searchsorted(g_lo, part.edge_pos_lo[edge_index])
    col_hi = m_lo + np.searchsorted(g_hi, part.edge_pos_hi[edge_index])
    sl = B.edge_slices[edge_index]

    def edge_matrix(op):
        Bm = np.zeros((n_e, m))
        blo = op.blocks[e.sub_lo][sl].toarray()
        bhi = op.blocks[e.sub_hi][sl].toarray()
        Bm[rows, col_lo] = blo[rows, part.edge_pos_lo[edge_index]]
        Bm[rows, col_hi] = bhi[rows, part.edge_pos_hi[edge_index]]
        return Bm

    B_E = edge_matrix(B)
    B_DE = edge_matrix(B_D)
    P = B_DE.T @ B_E
    A_evp = P.T @ S @ P

    sev, svec = np.linalg.eigh(S)
    scale = max(sev[-1], 1e-300)
    Z = svec[:, sev <= KERNEL_RTOL * scale]
    trace_scale = np.trace(S) / m

    def project(M):
        if Z.shape[1] == 0:
            return M
        ZM = Z.T @ M
        M = M - Z @ ZM
        MZ = M @ Z
        return M - MZ @ Z.T

    lhs = project(A_evp)
    rhs = project(S) + trace_scale * (Z @ Z.T) + SHIFT_DELTA * trace_scale * np.eye(m)
    try:
        mu, W = sla.eigh(lhs, rhs)
    except sla.LinAlgError as exc:
        raise RuntimeError(f"edge {edge_index}: eigensolver failed: {exc}") from exc
    mu, W = mu[::-1], W[:, ::-1]
    count = int(np.sum(mu > tol))
    constraints = []
    for j in range(count):
        c = B_DE @ (S @ (P @ W[:, j]))
        nrm = np.linalg.norm(c)
        if nrm <= 1e-300:
            continue
        constraints.append(sign_fix(c / nrm))
    return EdgeEigenResult(edge_index=edge_index, eigenvalues=mu,
                           constraints=constraints, count_above_tol=count)


def _orthonormalize_with_drop(vectors, tol=DEP_TOL):
    """Gram-Schmidt keeping the input order; near-dependent vectors are dropped."""
    kept, dropped = [], 0
    for v in vectors:
        w = np.asarray(v, dtype=float).copy()
        nrm0 = np.linalg.norm(w)
        if nrm0 == 0:
            dropped += 1
            continue
        w /= nrm0
        for u in kept:
            w -= (u @ w) * u
        nrm = np.linalg.norm(w)
        if nrm <= tol:
            dropped += 1
            continue
        kept.append(sign_fix(w / nrm))
    return kept, dropped


def manual_coarse(conn: InterfaceConnectivity, per_edge_constraints: dict,
                  provenance_tag: str = "manual") -> CoarseSpace:
    """Coarse space from externally supplied per-edge constraint lists; the
    vectors are orthonormalized per edge and near-duplicates dropped."""
    ec, prov = {}, {}
    dropped_total = 0
    for e_idx, vectors in per_edge_constraints.items():
        if e_idx < 0 or e_idx >= conn.n_edges:
            raise ValueError(f"unknown edge index {e_idx}")
        n_e = len(conn.edges[e_idx].nodes)
        vecs = [np.asarray(v, dtype=float) for v in vectors]
        for v in vecs:
            if v.shape != (n_e,):
                raise ValueError(
                    f"edge {e_idx}: constraint has length {v.shape}, expected {n_e}")
        kept, dropped = _orthonormalize_with_drop(vecs)
        dropped_total += dropped
        if kept:
            ec[e_idx] = np.vstack(kept)
            prov[e_idx] = [provenance_tag] * len(kept)
    return CoarseSpace(vertex_nodes=conn.vertex_nodes.copy(), edge_constraints=ec,
                       provenance=prov, n_edges=conn.n_edges, dropped=dropped_total)


def adaptive_coarse(mesh: DecomposedMesh, field: CoefficientField,
                    tangents, conn: InterfaceConnectivity, part: IndexPartition,
                    tol: float, B: JumpOperator | None = None,
                    B_D: JumpOperator | None = None) -> CoarseSpace:
    """Adaptive coarse space at the given tolerance from tangents evaluated at
    the Newton initial value; computed once, then fixed for the whole solve."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if B is None:
        B = build_jump(conn, part)
    if B_D is None:
        B_D = build_scaled_jump(mesh, conn, part, field)
    ec, prov = {}, {}
    dropped_total = 0
    cache = {}
    for e in conn.edges:
        res = edge_eigenproblem(e.index, conn, part, tangents, B, B_D, tol,
                                schur_cache=cache)
        if not res.constraints:
            continue
        kept, dropped = _orthonormalize_with_drop(res.constraints)
        dropped_total += dropped
        if kept:
            ec[e.index] = np.vstack(kept)
            prov[e.index] = [
                {"source": "adaptive", "eigenvalue": float(res.eigenvalues[j])}
                for j in range(len(kept))
            ]
    return CoarseSpace(vertex_nodes=conn.vertex_nodes.copy(), edge_constraints=ec,
                       provenance=prov, n_edges=conn.n_edges, dropped=dropped_total)
