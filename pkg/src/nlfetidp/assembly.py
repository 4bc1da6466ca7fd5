"""P1 finite-element kernels for the scaled p-Laplace operator.

Residual, tangent and load are assembled per problem (a subdomain or the
whole mesh) on the free, i.e. non-Dirichlet, degrees of freedom.  Gradients
are constant per triangle, so one-point quadrature is exact for the flux and
the tangent; the load uses the exact nodal formula for f = 1.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = ["LocalProblem", "local_residual", "local_tangent", "assemble_load"]


class LocalProblem:
    """Geometry, coefficient and free-dof bookkeeping for one assembly patch.

    `dirichlet_local` lists local node ids whose dofs are eliminated; the
    remaining nodes are numbered by ascending local id.  Requires p >= 2 so
    the tangent formula is positive semidefinite.
    """

    def __init__(self, coords, elements, alpha, p, epsilon, dirichlet_local=()):
        if p < 2:
            raise ValueError(f"exponent p must be >= 2, got {p}")
        if epsilon < 0:
            raise ValueError("regularization must be nonnegative")
        self.coords = np.asarray(coords, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        self.alpha = np.asarray(alpha, dtype=float)
        if self.alpha.shape[0] != self.elements.shape[0]:
            raise ValueError("one coefficient value per element required")
        self.p = float(p)
        self.epsilon = float(epsilon)
        n_nodes = self.coords.shape[0]
        self.free_mask = np.ones(n_nodes, dtype=bool)
        self.free_mask[np.asarray(dirichlet_local, dtype=np.int64)] = False
        self.free_index = np.full(n_nodes, -1, dtype=np.int64)
        self.free_index[self.free_mask] = np.arange(int(self.free_mask.sum()))
        self.n_free = int(self.free_mask.sum())

        v = self.coords[self.elements]                       # (e, 3, 2)
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det <= 0):
            raise ValueError("elements must be counterclockwise")
        self.area = det / 2.0
        x, y = v[..., 0], v[..., 1]
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        self.grads = np.stack([gx, gy], axis=1) / det[:, None, None]   # (e, 2, 3)

        load_full = np.zeros(n_nodes)
        np.add.at(load_full, self.elements,
                  np.repeat(self.area[:, None] / 3.0, 3, axis=1))
        self.load_full = np.where(self.free_mask, load_full, 0.0)

    def full_vector(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.coords.shape[0])
        u[self.free_mask] = u_free
        return u

    def _gradients_of(self, u_free):
        u = self.full_vector(u_free)
        return np.einsum("eij,ej->ei", self.grads, u[self.elements])


def local_residual(prob: LocalProblem, u_free: np.ndarray) -> np.ndarray:
    """K(u) - f on the free dofs: per-element flux alpha*(|grad u|^2+eps)^((p-2)/2)*grad u
    tested against P1 gradients, minus the f=1 load."""
    if u_free.shape[0] != prob.n_free:
        raise ValueError("residual input has wrong size")
    grad = prob._gradients_of(u_free)
    g = np.einsum("ei,ei->e", grad, grad) + prob.epsilon
    w = prob.alpha * g ** ((prob.p - 2.0) / 2.0) * prob.area
    per_node = np.einsum("ei,eij->ej", grad, prob.grads) * w[:, None]
    r = np.zeros(prob.coords.shape[0])
    np.add.at(r, prob.elements, per_node)
    return r[prob.free_mask] - prob.load_full[prob.free_mask]


def local_tangent(prob: LocalProblem, u_free: np.ndarray) -> sp.csr_matrix:
    """Derivative of `local_residual` at u: per-element metric
    alpha*g^((p-2)/2) * (I + (p-2) grad u grad u^T / g), g = |grad u|^2 + eps."""
    if u_free.shape[0] != prob.n_free:
        raise ValueError("tangent input has wrong size")
    grad = prob._gradients_of(u_free)
    g = np.einsum("ei,ei->e", grad, grad) + prob.epsilon
    w = prob.alpha * g ** ((prob.p - 2.0) / 2.0) * prob.area
    base = np.einsum("eik,eil->ekl", prob.grads, prob.grads)
    q = np.einsum("ei,eij->ej", grad, prob.grads)
    coef = np.divide(prob.p - 2.0, g, out=np.zeros_like(g), where=g > 0)
    blocks = w[:, None, None] * (base + coef[:, None, None] * q[:, :, None] * q[:, None, :])
    rows = prob.free_index[np.repeat(prob.elements, 3, axis=1).reshape(-1, 3, 3)]
    cols = rows.transpose(0, 2, 1)
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix(
        (blocks[keep], (rows[keep], cols[keep])),
        shape=(prob.n_free, prob.n_free),
    )
    return A.tocsr()


def assemble_load(prob: LocalProblem) -> np.ndarray:
    """Load vector for f = 1 on the free dofs; each node carries a third of
    its adjacent element area."""
    return prob.load_full[prob.free_mask].copy()
