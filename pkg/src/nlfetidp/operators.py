"""Dual-primal interface algebra.

The jump operator has one Lagrange multiplier per edge-interior interface
node (interface multiplicity is 2 everywhere dual in this 2D layout, so this
choice is non-redundant).  Edge constraints are enforced by an explicit
transformation of basis: per edge, an orthogonal change of variables whose
first k coordinates are the constraint values; those become extra primal
dofs, the remaining coordinates stay dual.  The partially assembled tangent
is eliminated block-wise: local sparse factorizations of the non-primal
blocks plus one dense factorization of the primal Schur complement.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import DecomposedMesh, InterfaceConnectivity, IndexPartition
from .coefficients import CoefficientField

__all__ = [
    "JumpOperator",
    "build_jump",
    "build_scaled_jump",
    "ConstraintTransform",
    "build_transform",
    "PartiallyAssembledTangent",
    "assemble_partial",
    "solve_partial",
    "apply_F",
    "DirichletPreconditioner",
    "FactorizationError",
]


class FactorizationError(RuntimeError):
    """A local or coarse block could not be factorized."""


class JumpOperator:
    """Signed incidence operator B = (B^(1), ..., B^(N)); rows are Lagrange
    multipliers, ordered edge-major with the edge's canonical node order.
    The scaled variant B_D shares the sparsity with rho-weighted entries."""

    def __init__(self, blocks, edge_slices, n_multipliers, scaled=False):
        self.blocks = blocks                  # per subdomain: csr (n_mult x n_free_s)
        self.edge_slices = edge_slices        # per edge: slice into the rows
        self.n_multipliers = n_multipliers
        self.scaled = scaled

    def apply(self, local_vectors) -> np.ndarray:
        lam = np.zeros(self.n_multipliers)
        for Bs, w in zip(self.blocks, local_vectors):
            if Bs.nnz:
                lam += Bs @ w
        return lam

    def apply_T(self, lam: np.ndarray) -> list:
        return [Bs.T @ lam for Bs in self.blocks]


def _edge_weights_unscaled(edge, part):
    n_e = len(edge.nodes)
    return np.ones(n_e), np.ones(n_e)


def _rho_per_subdomain(mesh, part, field):
    """Per subdomain: max coefficient over the node's adjacent elements of
    that subdomain, evaluated at the free-local positions."""
    n_nodes = mesh.nodes.shape[0]
    g2l = np.full(n_nodes, -1, dtype=np.int64)
    rhos = []
    for s in range(mesh.n_subdomains):
        els = mesh.subdomain_element_map[s]
        l2g = mesh.local_to_global[s]
        g2l[l2g] = np.arange(len(l2g))
        loc_tri = g2l[mesh.elements[els]]
        rho_local = np.zeros(len(l2g))
        np.maximum.at(rho_local, loc_tri.ravel(),
                      np.repeat(field.values[els], 3))
        rhos.append(rho_local[part.sub_free_local[s]])
    return rhos


def _build_jump_like(conn, part, weight_fn):
    n_sub = len(part.sub_free_local)
    n_mult = sum(len(e.nodes) for e in conn.edges)
    rows = [[] for _ in range(n_sub)]
    cols = [[] for _ in range(n_sub)]
    vals = [[] for _ in range(n_sub)]
    slices = []
    offset = 0
    for e in conn.edges:
        n_e = len(e.nodes)
        r = np.arange(offset, offset + n_e)
        w_lo, w_hi = weight_fn(e, part)
        rows[e.sub_lo].append(r)
        cols[e.sub_lo].append(part.edge_pos_lo[e.index])
        vals[e.sub_lo].append(+w_lo)
        rows[e.sub_hi].append(r)
        cols[e.sub_hi].append(part.edge_pos_hi[e.index])
        vals[e.sub_hi].append(-w_hi)
        slices.append(slice(offset, offset + n_e))
        offset += n_e
    blocks = []
    for s in range(n_sub):
        n_loc = part.n_free_local(s)
        if rows[s]:
            B = sp.coo_matrix(
                (np.concatenate(vals[s]),
                 (np.concatenate(rows[s]), np.concatenate(cols[s]))),
                shape=(n_mult, n_loc),
            ).tocsr()
        else:
            B = sp.csr_matrix((n_mult, n_loc))
        blocks.append(B)
    return JumpOperator(blocks, tuple(slices), n_mult)


def build_jump(conn: InterfaceConnectivity, part: IndexPartition) -> JumpOperator:
    """Unscaled jump operator: +1 on the lower-index subdomain, -1 on the other."""
    return _build_jump_like(conn, part, _edge_weights_unscaled)


def build_scaled_jump(mesh: DecomposedMesh, conn: InterfaceConnectivity,
                      part: IndexPartition, field: CoefficientField) -> JumpOperator:
    """rho-scaled jump operator: the entry on subdomain i is weighted by the
    other side's rho_j/(rho_i+rho_j)."""
    rhos = _rho_per_subdomain(mesh, part, field)

    def weights(edge, part):
        r_lo = rhos[edge.sub_lo][part.edge_pos_lo[edge.index]]
        r_hi = rhos[edge.sub_hi][part.edge_pos_hi[edge.index]]
        tot = r_lo + r_hi
        return r_hi / tot, r_lo / tot

    op = _build_jump_like(conn, part, weights)
    op.scaled = True
    return op


def _orthonormalize_rows(C: np.ndarray, tol: float):
    """QR-orthonormalize constraint rows; raise on near-dependence."""
    Qt, R = np.linalg.qr(C.T)
    d = np.abs(np.diag(R))
    if d.min() <= tol * max(d.max(), 1.0):
        raise ValueError("rank-deficient constraint set on an edge")
    Qt = Qt * np.sign(np.diag(R))
    return Qt.T


class ConstraintTransform:
    """Per-subdomain orthogonal change of basis realizing the edge constraints
    as explicit primal variables, plus the block layout of the partially
    assembled space: [remaining dofs of each subdomain | global primal]."""

    def __init__(self, conn, part, T_blocks, r_pos, p_pos, p_glob, edge_k,
                 edge_C, n_primal):
        self.conn = conn
        self.part = part
        self.T_blocks = T_blocks          # per sub: sparse orthogonal T, u_nodal = T @ u_new
        self.r_pos = r_pos                # per sub: positions remaining (interior + dual)
        self.p_pos = p_pos                # per sub: positions that became primal
        self.p_glob = p_glob              # per sub: global primal index per p_pos entry
        self.edge_k = edge_k              # constraints per edge
        self.edge_C = edge_C              # orthonormal constraint rows per edge
        self.n_primal = n_primal
        sizes = [len(r) for r in r_pos]
        self.r_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_total = int(self.r_offsets[-1]) + n_primal

    def project_multipliers(self, lam: np.ndarray, B: "JumpOperator") -> np.ndarray:
        """Project a multiplier vector onto the jump space of the partially
        assembled functions, i.e. per edge onto the orthogonal complement of
        the constraint vectors.  Jumps of admissible functions live there;
        the projection keeps PCG numerically clean on the singular operator."""
        if not self.edge_C:
            return lam
        out = lam.copy()
        for e_idx, C in self.edge_C.items():
            sl = B.edge_slices[e_idx]
            out[sl] -= C.T @ (C @ out[sl])
        return out

    # -- layout helpers -------------------------------------------------
    def r_slice(self, s: int) -> slice:
        return slice(int(self.r_offsets[s]), int(self.r_offsets[s + 1]))

    def primal_slice(self) -> slice:
        return slice(int(self.r_offsets[-1]), self.n_total)

    def restrict_T(self, local_vectors) -> np.ndarray:
        """Transpose of the subassembly injection: transform each subdomain
        vector and sum the primal components onto the global primal block."""
        out = np.zeros(self.n_total)
        pi = out[self.primal_slice()]
        for s, w in enumerate(local_vectors):
            t = self.T_blocks[s].T @ w
            out[self.r_slice(s)] = t[self.r_pos[s]]
            np.add.at(pi, self.p_glob[s], t[self.p_pos[s]])
        out[self.primal_slice()] = pi
        return out

    def expand(self, x: np.ndarray) -> list:
        """Subassembly injection: distribute the shared primal values and map
        back to nodal coordinates."""
        pi = x[self.primal_slice()]
        out = []
        for s in range(len(self.T_blocks)):
            t = np.zeros(self.T_blocks[s].shape[0])
            t[self.r_pos[s]] = x[self.r_slice(s)]
            t[self.p_pos[s]] = pi[self.p_glob[s]]
            out.append(self.T_blocks[s] @ t)
        return out

    def continuous_to_partial(self, locals_continuous) -> np.ndarray:
        """Represent a continuous function (given per subdomain) in the
        partially assembled space, averaging the shared primal values."""
        out = np.zeros(self.n_total)
        pi = np.zeros(self.n_primal)
        cnt = np.zeros(self.n_primal)
        for s, w in enumerate(locals_continuous):
            t = self.T_blocks[s].T @ w
            out[self.r_slice(s)] = t[self.r_pos[s]]
            np.add.at(pi, self.p_glob[s], t[self.p_pos[s]])
            np.add.at(cnt, self.p_glob[s], 1.0)
        out[self.primal_slice()] = pi / np.maximum(cnt, 1.0)
        return out


def build_transform(coarse, conn: InterfaceConnectivity, part: IndexPartition,
                    dep_tol: float = 1e-8) -> ConstraintTransform:
    """Build the change of basis for a coarse space (vertex primal set plus
    per-edge constraint vectors).  Constraint vectors are orthonormalized;
    a near-dependent set is rejected."""
    n_sub = len(part.sub_free_local)
    n_vert = conn.n_vertices

    edge_Q = {}
    edge_k = {}
    edge_C = {}
    for e in conn.edges:
        C = coarse.edge_constraints.get(e.index)
        if C is None or len(C) == 0:
            edge_k[e.index] = 0
            continue
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[1] != len(e.nodes):
            raise ValueError(
                f"edge {e.index}: constraint length {C.shape[1]} != {len(e.nodes)} nodes")
        Cn = _orthonormalize_rows(C, dep_tol)
        k = Cn.shape[0]
        Qc, _ = np.linalg.qr(Cn.T, mode="complete")
        Q = np.hstack([Cn.T, Qc[:, k:]])
        edge_Q[e.index] = Q
        edge_k[e.index] = k
        edge_C[e.index] = Cn

    offs = {}
    off = n_vert
    for e in conn.edges:
        offs[e.index] = off
        off += edge_k[e.index]
    n_primal = off

    T_blocks, r_pos_all, p_pos_all, p_glob_all = [], [], [], []
    edges_of_sub = [[] for _ in range(n_sub)]
    for e in conn.edges:
        edges_of_sub[e.sub_lo].append((e, part.edge_pos_lo[e.index]))
        edges_of_sub[e.sub_hi].append((e, part.edge_pos_hi[e.index]))
    for s in range(n_sub):
        n_loc = part.n_free_local(s)
        T = sp.identity(n_loc, format="lil")
        p_pos = list(part.vertex_pos[s])
        p_glob = list(part.vertex_rank_at_pos[s])
        for e, pos in edges_of_sub[s]:
            k = edge_k[e.index]
            if k == 0:
                continue
            Q = edge_Q[e.index]
            T[np.ix_(pos, pos)] = Q
            p_pos.extend(pos[:k])
            p_glob.extend(offs[e.index] + j for j in range(k))
        p_pos = np.asarray(p_pos, dtype=np.int64)
        p_glob = np.asarray(p_glob, dtype=np.int64)
        mask = np.ones(n_loc, dtype=bool)
        mask[p_pos] = False
        T_blocks.append(T.tocsr())
        r_pos_all.append(np.flatnonzero(mask))
        p_pos_all.append(p_pos)
        p_glob_all.append(p_glob)
    return ConstraintTransform(conn, part, T_blocks, r_pos_all, p_pos_all,
                               p_glob_all, edge_k, edge_C, n_primal)


class PartiallyAssembledTangent:
    """Factorized nonlinear-FETI-DP tangent: per-subdomain elimination of the
    non-primal block plus a dense Cholesky of the primal Schur complement."""

    def __init__(self, tangents, transform: ConstraintTransform):
        self.tf = transform
        self.lus, self.A_rr, self.A_rp, self.A_pp, self.X = [], [], [], [], []
        n_pi = transform.n_primal
        S = np.zeros((n_pi, n_pi))
        for s, A in enumerate(tangents):
            T = transform.T_blocks[s]
            At = (T.T @ A @ T).tocsr()
            # enforce exact symmetry; assembly order leaves eps-level asymmetry
            # that would make the elimination inconsistent with `apply`
            At = (At + At.T) * 0.5
            r, p = transform.r_pos[s], transform.p_pos[s]
            A_rr = At[r][:, r]
            A_rp = At[r][:, p].toarray()
            A_pp = At[p][:, p].toarray()
            try:
                lu = splu(A_rr.tocsc())
            except RuntimeError as exc:
                raise FactorizationError(
                    f"subdomain {s}: non-primal block factorization failed: {exc}"
                ) from exc
            X = lu.solve(A_rp) if A_rp.size else A_rp
            if not np.all(np.isfinite(X)):
                raise FactorizationError(f"subdomain {s}: singular non-primal block")
            pg = transform.p_glob[s]
            S[np.ix_(pg, pg)] += A_pp - A_rp.T @ X
            self.lus.append(lu)
            self.A_rr.append(A_rr)
            self.A_rp.append(A_rp)
            self.A_pp.append(A_pp)
            self.X.append(X)
        try:
            self.cho = sla.cho_factor(S)
        except sla.LinAlgError as exc:
            raise FactorizationError(f"coarse problem not SPD: {exc}") from exc
        self.S = S

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Block elimination with one step of iterative refinement; the
        refinement keeps the composite solve near machine accuracy even at
        coefficient contrasts of 1e6."""
        x = self._solve_once(b)
        return x + self._solve_once(b - self.apply(x))

    def _solve_once(self, b: np.ndarray) -> np.ndarray:
        tf = self.tf
        g = b[tf.primal_slice()].copy()
        ws = []
        for s in range(len(self.lus)):
            w = self.lus[s].solve(b[tf.r_slice(s)])
            g[tf.p_glob[s]] -= self.A_rp[s].T @ w
            ws.append(w)
        u_pi = sla.cho_solve(self.cho, g)
        x = np.empty_like(b)
        x[tf.primal_slice()] = u_pi
        for s, w in enumerate(ws):
            x[tf.r_slice(s)] = w - self.X[s] @ u_pi[tf.p_glob[s]]
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Matrix-vector product with the partially assembled tangent."""
        tf = self.tf
        y = np.zeros_like(x)
        pi = x[tf.primal_slice()]
        g = np.zeros(tf.n_primal)
        for s in range(len(self.lus)):
            xr = x[tf.r_slice(s)]
            ploc = pi[tf.p_glob[s]]
            y[tf.r_slice(s)] = self.A_rr[s] @ xr + self.A_rp[s] @ ploc
            g[tf.p_glob[s]] += self.A_rp[s].T @ xr + self.A_pp[s] @ ploc
        y[tf.primal_slice()] = g
        return y


def assemble_partial(tangents, transform: ConstraintTransform) -> PartiallyAssembledTangent:
    return PartiallyAssembledTangent(tangents, transform)


def solve_partial(A: PartiallyAssembledTangent, rhs: np.ndarray) -> np.ndarray:
    return A.solve(rhs)


def apply_F(A: PartiallyAssembledTangent, B: JumpOperator, lam: np.ndarray) -> np.ndarray:
    """FETI-DP operator F = B R (DK~)^-1 R^T B^T applied to a multiplier vector."""
    b = A.tf.restrict_T(B.apply_T(lam))
    return B.apply(A.tf.expand(A.solve(b)))


class DirichletPreconditioner:
    """M_D^-1 = sum_i B_D^(i) S^(i) B_D^(i)T with S^(i) the interface Schur
    complement of the subdomain tangent, applied matrix-free through one
    interior solve per subdomain."""

    def __init__(self, tangents, part: IndexPartition, B_D: JumpOperator):
        self.part = part
        self.B_D = B_D
        self.gamma, self.A_gg, self.A_gi, self.A_ig, self.lus = [], [], [], [], []
        for s, A in enumerate(tangents):
            gamma = np.sort(np.concatenate([part.dual_pos[s], part.vertex_pos[s]]))
            iota = part.interior_pos[s]
            A = A.tocsr()
            try:
                lu = splu(A[iota][:, iota].tocsc())
            except RuntimeError as exc:
                raise FactorizationError(
                    f"subdomain {s}: interior block factorization failed: {exc}"
                ) from exc
            self.gamma.append(gamma)
            self.A_gg.append(A[gamma][:, gamma])
            self.A_gi.append(A[gamma][:, iota])
            self.A_ig.append(A[iota][:, gamma])
            self.lus.append(lu)

    def apply(self, lam: np.ndarray) -> np.ndarray:
        vs = self.B_D.apply_T(lam)
        outs = []
        for s, v in enumerate(vs):
            vg = v[self.gamma[s]]
            sv = self.A_gg[s] @ vg - self.A_gi[s] @ self.lus[s].solve(self.A_ig[s] @ vg)
            out = np.zeros_like(v)
            out[self.gamma[s]] = sv
            outs.append(out)
        return self.B_D.apply(outs)
