"""Solver drivers: linear FETI-DP (PCG with Lanczos condition estimation),
Newton-Krylov-FETI-DP, Nonlinear-FETI-DP-2 and a direct reference solver.

The coarse space is built once from tangents at the Newton initial value and
stays fixed for the complete nonlinear solve; only the tangent values inside
the factorizations change between Newton steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .geometry import (DecomposedMesh, InterfaceConnectivity, IndexPartition,
                       build_mesh, enumerate_interface, build_partition)
from .coefficients import CoefficientField
from .assembly import LocalProblem, local_residual, local_tangent, assemble_load
from .operators import (JumpOperator, build_jump, build_scaled_jump,
                        ConstraintTransform, build_transform, assemble_partial,
                        apply_F, DirichletPreconditioner, FactorizationError)
from .coarse import CoarseSpace

__all__ = [
    "PcgBreakdown",
    "SolverError",
    "PcgReport",
    "StepRecord",
    "SolveReport",
    "Tolerances",
    "FetidpProblem",
    "build_problem",
    "pcg",
    "linear_fetidp",
    "nk_fetidp",
    "nl_fetidp2",
    "direct_reference_solve",
]

EPS_FALLBACK = 1e-12     # tangent regularization retried after a singular factorization


class PcgBreakdown(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class PcgReport:
    iterations: int
    converged: bool
    residuals: list                      # preconditioned-norm history, relative
    cond_estimate: float

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "cond_estimate": self.cond_estimate,
            "final_relres": self.residuals[-1] if self.residuals else 0.0,
        }


@dataclass
class StepRecord:
    step: int
    residual_norm: float
    inner_iterations: int = 0
    pcg: PcgReport | None = None


@dataclass
class SolveReport:
    method: str
    coarse_kind: str
    coarse_size: int
    steps: list
    converged: bool
    solution: np.ndarray
    wall_time: float
    coarse_built_at_step: int = 0
    notes: list = field(default_factory=list)

    @property
    def outer_iterations(self) -> int:
        return sum(1 for s in self.steps if s.pcg is not None)

    @property
    def inner_iterations(self) -> int:
        return sum(s.inner_iterations for s in self.steps)

    @property
    def pcg_iterations(self) -> int:
        return sum(s.pcg.iterations for s in self.steps if s.pcg is not None)

    def _conds(self):
        return [s.pcg.cond_estimate for s in self.steps
                if s.pcg is not None and s.pcg.iterations > 0]

    @property
    def min_cond(self) -> float:
        c = self._conds()
        return min(c) if c else float("nan")

    @property
    def max_cond(self) -> float:
        c = self._conds()
        return max(c) if c else float("nan")

    def csv_row(self) -> list:
        inner = self.inner_iterations if self.method == "nl2" else "-"
        return [self.method, self.coarse_kind, self.coarse_size,
                self.outer_iterations, inner, self.pcg_iterations,
                f"{self.min_cond:.1f}", f"{self.max_cond:.1f}"]

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "coarse_kind": self.coarse_kind,
            "coarse_size": self.coarse_size,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "pcg_iterations": self.pcg_iterations,
            "min_cond": self.min_cond,
            "max_cond": self.max_cond,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "coarse_built_at_step": self.coarse_built_at_step,
            "notes": self.notes,
            "trace": [
                {"step": s.step, "residual": s.residual_norm,
                 "inner_iterations": s.inner_iterations,
                 "pcg": s.pcg.to_json_dict() if s.pcg else None}
                for s in self.steps
            ],
        }


@dataclass
class Tolerances:
    """Solver tolerances and budgets.

    `line_search` enables monotone backtracking on the outer Newton loops.
    It defaults to on: the undamped outer iteration of the nonlinear Schur
    complement oscillates for H/h >= 8 (full steps overshoot the root along
    the Newton direction), while accepted full steps leave the iteration
    counts identical to plain Newton."""

    newton_rel: float = 1e-8
    inner_rel: float = 1e-10
    pcg_rel: float = 1e-10
    max_outer: int = 50
    max_inner: int = 50
    max_pcg: int = 5000
    line_search: bool = True
    max_halvings: int = 12


def pcg(apply_op, apply_prec, rhs, rel_tol, max_it, project=None):
    """Preconditioned conjugate gradients with the standard recurrence; the
    condition estimate comes from the eigenvalues of the Lanczos tridiagonal
    assembled from the alpha/beta coefficients.  Stops on the preconditioned
    residual norm relative to the initial one.

    `project`, when given, maps vectors onto the subspace the operator is
    positive definite on (edge constraints leave the FETI-DP operator with a
    known null space); it is applied to the right-hand side, the operator
    outputs and the preconditioned residuals."""
    if project is None:
        project = lambda v: v
    n = rhs.shape[0]
    x = np.zeros(n)
    rhs = project(rhs)
    if np.linalg.norm(rhs) == 0.0:
        return x, PcgReport(0, True, [0.0], 1.0)
    r = rhs.copy()
    z = project(apply_prec(r))
    zr = float(r @ z)
    if zr <= 0.0:
        raise PcgBreakdown("preconditioner produced a nonpositive inner product")
    res0 = np.sqrt(zr)
    history = [1.0]
    alphas, betas = [], []
    p = z.copy()
    converged = False
    it = 0
    while it < max_it:
        q = project(apply_op(p))
        pq = float(p @ q)
        if pq <= 0.0:
            raise PcgBreakdown(
                f"operator not positive definite on the Krylov space (p^T F p = {pq:g})")
        a = zr / pq
        x += a * p
        r -= a * q
        z = project(apply_prec(r))
        zr_new = float(r @ z)
        alphas.append(a)
        it += 1
        relres = np.sqrt(max(zr_new, 0.0)) / res0
        history.append(relres)
        if relres <= rel_tol:
            converged = True
            break
        if zr_new <= 0.0:
            raise PcgBreakdown("preconditioned residual norm lost positivity")
        b = zr_new / zr
        betas.append(b)
        p = z + b * p
        zr = zr_new
    cond = _lanczos_cond(alphas, betas)
    return x, PcgReport(it, converged, history, cond)


def _lanczos_cond(alphas, betas):
    m = len(alphas)
    if m == 0:
        return 1.0
    diag = np.empty(m)
    off = np.empty(max(m - 1, 0))
    for j in range(m):
        diag[j] = 1.0 / alphas[j] + (betas[j - 1] / alphas[j - 1] if j > 0 else 0.0)
        if j < m - 1:
            off[j] = np.sqrt(betas[j]) / alphas[j]
    if m == 1:
        return 1.0
    ev = sla.eigvalsh_tridiagonal(diag, off)
    lo = max(ev[0], np.finfo(float).tiny)
    return float(ev[-1] / lo)


class FetidpProblem:
    """Mesh, decomposition, coefficient and assembly context shared by all
    solver drivers.  B and the rho-scaled B_D depend only on the coefficient
    field and are built once."""

    def __init__(self, mesh, conn, part, field_, p, epsilon=0.0):
        self.mesh = mesh
        self.conn = conn
        self.part = part
        self.field = field_
        self.p = float(p)
        self.epsilon = float(epsilon)
        self.local_probs = self._build_local_problems(epsilon)
        self.global_prob = LocalProblem(
            mesh.nodes, mesh.elements, field_.values, p, epsilon,
            dirichlet_local=conn.dirichlet_nodes)
        self.B = build_jump(conn, part)
        self.B_D = build_scaled_jump(mesh, conn, part, field_)
        self.loads = [assemble_load(lp) for lp in self.local_probs]

    def _build_local_problems(self, epsilon):
        mesh, conn = self.mesh, self.conn
        dir_set = set(int(v) for v in conn.dirichlet_nodes)
        probs = []
        for s in range(mesh.n_subdomains):
            l2g = mesh.local_to_global[s]
            els = mesh.subdomain_element_map[s]
            g2l = {int(g): i for i, g in enumerate(l2g)}
            loc_els = np.array([[g2l[int(g)] for g in tri]
                                for tri in mesh.elements[els]])
            dir_local = [g2l[int(g)] for g in l2g if int(g) in dir_set]
            probs.append(LocalProblem(
                mesh.nodes[l2g], loc_els, self.field.values[els],
                self.p, epsilon, dirichlet_local=dir_local))
        return probs

    # -- state transfer --------------------------------------------------
    def u0_global(self) -> np.ndarray:
        """Newton initial value u0(x, y) = x on the free dofs."""
        return self.mesh.nodes[self.part.free_nodes, 0].copy()

    def globals_to_locals(self, u: np.ndarray) -> list:
        return [u[self.part.sub_free_global[s]]
                for s in range(self.mesh.n_subdomains)]

    def average_locals(self, locals_) -> np.ndarray:
        acc = np.zeros(self.part.n_free)
        for s, w in enumerate(locals_):
            np.add.at(acc, self.part.sub_free_global[s], w)
        return acc / self.part.multiplicity

    # -- assembly wrappers -------------------------------------------------
    def local_tangents(self, locals_, epsilon=None):
        probs = self.local_probs
        if epsilon is not None and epsilon != self.epsilon:
            probs = self._build_local_problems(epsilon)
        return [local_tangent(pr, w) for pr, w in zip(probs, locals_)]

    def local_residuals(self, locals_):
        return [local_residual(pr, w) for pr, w in zip(self.local_probs, locals_)]

    def global_residual(self, u: np.ndarray) -> np.ndarray:
        return local_residual(self.global_prob, u)

    def tangents_at_initial(self):
        return self.local_tangents(self.globals_to_locals(self.u0_global()))


def build_problem(mesh: DecomposedMesh, field_: CoefficientField, p: float,
                  epsilon: float = 0.0,
                  conn: InterfaceConnectivity | None = None,
                  part: IndexPartition | None = None) -> FetidpProblem:
    if conn is None:
        conn = enumerate_interface(mesh)
    if part is None:
        part = build_partition(mesh, conn)
    return FetidpProblem(mesh, conn, part, field_, p, epsilon)


def _assemble_with_fallback(problem, locals_u, transform, notes):
    """Partial assembly; a singular non-primal block is retried once with the
    epsilon-regularized tangent."""
    tangents = problem.local_tangents(locals_u)
    try:
        return assemble_partial(tangents, transform), tangents
    except FactorizationError:
        notes.append(f"singular tangent, retried with epsilon={EPS_FALLBACK}")
        tangents = problem.local_tangents(locals_u, epsilon=EPS_FALLBACK)
        return assemble_partial(tangents, transform), tangents


def linear_fetidp(problem: FetidpProblem, transform: ConstraintTransform,
                  tangents, rhs_locals, tol: Tolerances):
    """One linear FETI-DP solve of the tangent system with broken right-hand
    side `rhs_locals`; returns the continuous solution increment (averaged at
    the dual nodes) and the PCG report."""
    pat = assemble_partial(tangents, transform)
    prec = DirichletPreconditioner(tangents, problem.part, problem.B_D)
    b = transform.restrict_T(rhs_locals)
    d = problem.B.apply(transform.expand(pat.solve(b)))
    lam, rep = pcg(lambda v: apply_F(pat, problem.B, v), prec.apply, d,
                   tol.pcg_rel, tol.max_pcg,
                   project=lambda v: transform.project_multipliers(v, problem.B))
    corr = b - transform.restrict_T(problem.B.apply_T(lam))
    locals_du = transform.expand(pat.solve(corr))
    return problem.average_locals(locals_du), rep


def nk_fetidp(problem: FetidpProblem, coarse: CoarseSpace,
              tol: Tolerances = Tolerances()) -> SolveReport:
    """Newton-Krylov-FETI-DP: Newton on the assembled global problem, linear
    FETI-DP for every correction."""
    t0 = time.perf_counter()
    transform = build_transform(coarse, problem.conn, problem.part)
    notes = []
    u = problem.u0_global()
    r0 = np.linalg.norm(problem.global_residual(u))
    steps = []
    converged = r0 == 0.0
    for k in range(tol.max_outer + 1):
        rn = np.linalg.norm(problem.global_residual(u))
        if rn <= tol.newton_rel * r0:
            converged = True
            break
        if k == tol.max_outer:
            break
        locals_u = problem.globals_to_locals(u)
        tangents = problem.local_tangents(locals_u)
        try:
            rhs = [-r for r in problem.local_residuals(locals_u)]
            du, rep = linear_fetidp(problem, transform, tangents, rhs, tol)
        except FactorizationError:
            notes.append(f"singular tangent, retried with epsilon={EPS_FALLBACK}")
            tangents = problem.local_tangents(locals_u, epsilon=EPS_FALLBACK)
            rhs = [-r for r in problem.local_residuals(locals_u)]
            du, rep = linear_fetidp(problem, transform, tangents, rhs, tol)
        if tol.line_search:
            du = _backtrack(problem, u, du, rn)
        u = u + du
        steps.append(StepRecord(step=k, residual_norm=rn, pcg=rep))
    report = SolveReport(method="nk", coarse_kind="", coarse_size=coarse.size,
                         steps=steps, converged=converged, solution=u,
                         wall_time=time.perf_counter() - t0, notes=notes)
    if not converged:
        raise SolverError("NK-FETI-DP did not converge within the outer budget",
                          report)
    return report


def _backtrack(problem, u, du, rn, max_halvings=8):
    t = 1.0
    for _ in range(max_halvings):
        if np.linalg.norm(problem.global_residual(u + t * du)) < rn:
            break
        t *= 0.5
    return t * du


def nl_fetidp2(problem: FetidpProblem, coarse: CoarseSpace,
               tol: Tolerances = Tolerances()) -> SolveReport:
    """Nonlinear-FETI-DP-2: Newton on the nonlinear Schur complement in the
    multipliers; every outer step solves the partially assembled nonlinear
    system by an inner Newton iteration (warm-started), then applies PCG to
    the outer correction with the Dirichlet preconditioner."""
    t0 = time.perf_counter()
    transform = build_transform(coarse, problem.conn, problem.part)
    notes = []

    lam = np.zeros(problem.B.n_multipliers)
    u_tilde = transform.continuous_to_partial(
        problem.globals_to_locals(problem.u0_global()))

    def inner_solve(lam, u_tilde):
        """Solve K~(u) + R^T B^T lam - f~ = 0 by Newton from the warm start;
        returns the solution, the update count, and the tangent factorization
        at the solution (the outer Jacobian).  Convergence is measured on the
        Newton update norm: force residuals are not comparable across
        coefficient contrasts, displacements are."""
        c = transform.restrict_T(problem.B.apply_T(lam))
        prev, stall = None, 0
        for it in range(tol.max_inner + 1):
            locals_u = transform.expand(u_tilde)
            g = transform.restrict_T(problem.local_residuals(locals_u)) + c
            pat, tangents = _assemble_with_fallback(problem, locals_u,
                                                    transform, notes)
            step = pat.solve(g)
            sn = np.linalg.norm(step)
            un = max(np.linalg.norm(u_tilde), 1.0)
            if sn <= tol.inner_rel * un:
                return u_tilde, it, pat, tangents
            if sn <= 1e-6 * un and prev is not None and sn > 0.5 * prev:
                stall += 1
                if stall >= 2:
                    return u_tilde, it, pat, tangents        # roundoff floor
            else:
                stall = 0
            prev = sn
            u_tilde = u_tilde - step
        raise SolverError("inner Newton did not converge within the budget")

    steps = []
    jump0 = None
    converged = False
    u_tilde, n_inner, pat, tangents = inner_solve(lam, u_tilde)
    for k in range(tol.max_outer + 1):
        d = problem.B.apply(transform.expand(u_tilde))
        dn = np.linalg.norm(d)
        if jump0 is None:
            jump0 = dn
        if dn <= tol.newton_rel * max(jump0, np.finfo(float).tiny):
            steps.append(StepRecord(step=k, residual_norm=dn,
                                    inner_iterations=n_inner, pcg=None))
            converged = True
            break
        if k == tol.max_outer:
            steps.append(StepRecord(step=k, residual_norm=dn,
                                    inner_iterations=n_inner, pcg=None))
            break
        prec = DirichletPreconditioner(tangents, problem.part, problem.B_D)
        dlam, rep = pcg(lambda v: apply_F(pat, problem.B, v), prec.apply, d,
                        tol.pcg_rel, tol.max_pcg,
                        project=lambda v: transform.project_multipliers(v, problem.B))
        # backtracking on the jump norm; each trial needs an inner solve,
        # warm-started from the current partially assembled iterate
        t = 1.0
        for _ in range(tol.max_halvings + 1):
            u_try, n_try, pat_try, tang_try = inner_solve(lam + t * dlam, u_tilde)
            n_inner += n_try
            dn_try = np.linalg.norm(problem.B.apply(transform.expand(u_try)))
            if dn_try <= (1.0 - 1e-4 * t) * dn or not tol.line_search:
                break
            t *= 0.5
        else:
            raise SolverError(
                "outer line search failed to reduce the interface jump",
                SolveReport(method="nl2", coarse_kind="", coarse_size=coarse.size,
                            steps=steps, converged=False,
                            solution=problem.average_locals(transform.expand(u_tilde)),
                            wall_time=time.perf_counter() - t0, notes=notes))
        lam = lam + t * dlam
        u_tilde, pat, tangents = u_try, pat_try, tang_try
        steps.append(StepRecord(step=k, residual_norm=dn,
                                inner_iterations=n_inner, pcg=rep))
        n_inner = 0
    locals_u = transform.expand(u_tilde)
    u = problem.average_locals(locals_u)
    report = SolveReport(method="nl2", coarse_kind="", coarse_size=coarse.size,
                         steps=steps, converged=converged, solution=u,
                         wall_time=time.perf_counter() - t0, notes=notes)
    if not converged:
        raise SolverError("NL-FETI-DP-2 did not converge within the outer budget",
                          report)
    return report


def direct_reference_solve(problem: FetidpProblem, newton_tol: float = 1e-8,
                           max_outer: int = 50) -> np.ndarray:
    """Global Newton with a sparse direct solve per step; no decomposition."""
    u = problem.u0_global()
    r = problem.global_residual(u)
    r0 = np.linalg.norm(r)
    if r0 == 0.0:
        return u
    for _ in range(max_outer):
        r = problem.global_residual(u)
        if np.linalg.norm(r) <= newton_tol * r0:
            return u
        A = local_tangent(problem.global_prob, u).tocsc()
        du = spla.spsolve(A, -r)
        if not np.all(np.isfinite(du)):
            raise SolverError("direct solve hit a singular tangent")
        u = u + du
    raise SolverError("direct reference Newton did not converge")
