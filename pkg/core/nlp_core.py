"""
Multi-period NLP container shared by all model modules.

    minimize    f(x) = objᵀx + ½ Σ q_i (x_i − x̂_i)²
    subject to  c(x) = 0          (stacked equality blocks)
                G x + g0 ≥ 0      (all inequalities and variable bounds are linear)

Nonlinear structure lives only in the equality blocks; each block supplies its residual,
sparse Jacobian and the Hessian of its multiplier-weighted sum.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from core.utils.errors import ConfigurationError


# ------------------------------
# variable layout
# ------------------------------

@dataclass
class VariableFamily:
    name: str
    shape: Tuple[int, ...]
    offset: int
    scale: float

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.size).reshape(self.shape)


class VariableLayout:
    """Named, shaped slices of the decision vector."""

    def __init__(self):
        self.families: Dict[str, VariableFamily] = {}
        self.n = 0
        self._lower: List[np.ndarray] = []
        self._upper: List[np.ndarray] = []
        self._init: List[np.ndarray] = []
        self._scale: List[np.ndarray] = []

    def add(self, name, shape, lower=-np.inf, upper=np.inf, init=0.0, scale=1.0) -> np.ndarray:
        if name in self.families:
            raise ConfigurationError(f"variable family '{name}' declared twice")
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        family = VariableFamily(name, shape, self.n, float(scale))
        size = family.size
        lower = np.broadcast_to(np.asarray(lower, dtype=float), shape).ravel().copy()
        upper = np.broadcast_to(np.asarray(upper, dtype=float), shape).ravel().copy()
        bad = lower > upper
        if np.any(bad):
            pos = [int(v) for v in np.unravel_index(int(np.argmax(bad)), shape)]
            raise ConfigurationError(
                f"infeasible bound pair for {name}{pos}: {lower[bad][0]:.6g} > {upper[bad][0]:.6g}")
        init = np.broadcast_to(np.asarray(init, dtype=float), shape).ravel().copy()
        self.families[name] = family
        self._lower.append(lower)
        self._upper.append(upper)
        self._init.append(np.clip(init, lower, upper))
        self._scale.append(np.full(size, float(scale)))
        self.n += size
        return family.indices

    def __contains__(self, name) -> bool:
        return name in self.families

    def indices(self, name) -> np.ndarray:
        return self.families[name].indices

    def view(self, x, name) -> np.ndarray:
        fam = self.families[name]
        return x[fam.offset:fam.offset + fam.size].reshape(fam.shape)

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate(self._lower) if self._lower else np.zeros(0)

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate(self._upper) if self._upper else np.zeros(0)

    @property
    def initial(self) -> np.ndarray:
        return np.concatenate(self._init) if self._init else np.zeros(0)

    @property
    def scale(self) -> np.ndarray:
        return np.concatenate(self._scale) if self._scale else np.zeros(0)

    def release_fixed(self, tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
        """Drop equal bound pairs; returns (indices, values) to pin with equality rows instead."""
        idx, vals = [], []
        for fam, lo, up, init in zip(self.families.values(), self._lower, self._upper, self._init):
            fixed = np.flatnonzero(np.isfinite(lo) & np.isfinite(up)
                                   & (np.abs(up - lo) <= tol * np.maximum(1.0, np.abs(lo))))
            if fixed.size:
                idx.append(fam.offset + fixed)
                vals.append(lo[fixed].copy())
                init[fixed] = lo[fixed]
                lo[fixed], up[fixed] = -np.inf, np.inf
        if not idx:
            return np.zeros(0, dtype=int), np.zeros(0)
        return np.concatenate(idx), np.concatenate(vals)

    def describe(self, i: int) -> str:
        for fam in self.families.values():
            if fam.offset <= i < fam.offset + fam.size:
                return f"{fam.name}{[int(v) for v in np.unravel_index(i - fam.offset, fam.shape)]}"
        raise IndexError(i)


# ------------------------------
# equality blocks
# ------------------------------

class EqualityBlock:
    """Residual rows c_b(x) with analytic derivatives."""
    name: str = "block"
    size: int = 0

    def residual(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> sparse.coo_matrix:
        raise NotImplementedError

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> Optional[sparse.coo_matrix]:
        """Σ_i lam_i ∇²c_i(x); `None` for linear blocks."""
        return None


class LinearBlock(EqualityBlock):
    """A x + b = 0."""

    def __init__(self, name, matrix, const):
        self.name = name
        self.matrix = sparse.csr_matrix(matrix)
        self.const = np.asarray(const, dtype=float).ravel()
        self.size = self.matrix.shape[0]
        if self.const.shape[0] != self.size:
            raise ConfigurationError(f"{name}: constant has {self.const.shape[0]} rows, matrix {self.size}")

    def residual(self, x):
        return self.matrix @ x + self.const

    def jacobian(self, x):
        return self.matrix.tocoo()


class BilinearBlock(EqualityBlock):
    """Rows of the form  Σ coef·x_a·x_b + (L x)_row + const_row."""

    def __init__(self, name, size, n, rows, a, b, coef, linear, const):
        self.name = name
        self.size = int(size)
        self.n = n
        self.rows = np.asarray(rows, dtype=int)
        self.a = np.asarray(a, dtype=int)
        self.b = np.asarray(b, dtype=int)
        self.coef = np.asarray(coef, dtype=float)
        self.linear = sparse.csr_matrix(linear, shape=(self.size, n))
        self.const = np.asarray(const, dtype=float).ravel()

    def residual(self, x):
        vals = self.coef * x[self.a] * x[self.b]
        return np.bincount(self.rows, weights=vals, minlength=self.size) + self.linear @ x + self.const

    def jacobian(self, x):
        trip = Triplets()
        lin = self.linear.tocoo()
        trip.add(lin.row, lin.col, lin.data)
        trip.add(self.rows, self.a, self.coef * x[self.b])
        trip.add(self.rows, self.b, self.coef * x[self.a])
        return trip.matrix((self.size, self.n))

    def hessian(self, x, lam):
        w = lam[self.rows] * self.coef
        trip = Triplets()
        same = self.a == self.b
        trip.add(self.a[same], self.b[same], 2.0 * w[same])
        trip.add(self.a[~same], self.b[~same], w[~same])
        return trip.symmetric(self.n)


class RowBuilder:
    """Collects bilinear and linear terms row by row for a `BilinearBlock`."""

    def __init__(self, name, n):
        self.name, self.n = name, n
        self.size = 0
        self.bil = ([], [], [], [])
        self.lin = Triplets()
        self.const: List[float] = []

    def row(self, const=0.0) -> int:
        self.const.append(float(const))
        self.size += 1
        return self.size - 1

    def bilinear(self, row, a, b, coef):
        for store, v in zip(self.bil, (row, a, b, coef)):
            store.append(v)

    def linear(self, row, col, coef):
        self.lin.add([row], [col], [coef])

    def add_const(self, row, value):
        self.const[row] += float(value)

    def build(self) -> BilinearBlock:
        return BilinearBlock(self.name, self.size, self.n, *self.bil,
                             self.lin.matrix((self.size, self.n)), np.asarray(self.const))


class Triplets:
    """Accumulator for coo assembly."""

    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())

    def matrix(self, shape) -> sparse.coo_matrix:
        if not self.rows:
            return sparse.coo_matrix(shape)
        return sparse.coo_matrix((np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
                                 shape=shape)

    def symmetric(self, n) -> sparse.coo_matrix:
        """Mirror off-diagonal entries given once (i, j) with i != j."""
        m = self.matrix((n, n)).tocsr()
        diag = sparse.diags(m.diagonal())
        return (m + m.T - diag).tocoo()


# ------------------------------
# problem
# ------------------------------

@dataclass
class NlpProblem:
    layout: VariableLayout
    objective: np.ndarray
    blocks: List[EqualityBlock]
    ineq_matrix: sparse.csr_matrix
    ineq_const: np.ndarray
    ineq_names: Dict[str, slice] = field(default_factory=dict)
    quad_weight: Optional[np.ndarray] = None
    quad_ref: Optional[np.ndarray] = None
    objective_const: float = 0.0
    x0: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.row_slices: Dict[str, slice] = {}
        offset = 0
        for b in self.blocks:
            if b.name in self.row_slices:
                raise ConfigurationError(f"equality block '{b.name}' added twice")
            self.row_slices[b.name] = slice(offset, offset + b.size)
            offset += b.size
        self.m_eq = offset
        if self.x0 is None:
            self.x0 = self.layout.initial
        if self.quad_weight is None:
            self.quad_weight = np.zeros(self.n)
        if self.quad_ref is None:
            self.quad_ref = np.zeros(self.n)

    @property
    def n(self) -> int:
        return self.layout.n

    @property
    def m_ineq(self) -> int:
        return self.ineq_matrix.shape[0]

    # -- objective --
    def objective_value(self, x) -> float:
        d = x - self.quad_ref
        return float(self.objective @ x + 0.5 * np.sum(self.quad_weight * d * d) + self.objective_const)

    def objective_gradient(self, x) -> np.ndarray:
        return self.objective + self.quad_weight * (x - self.quad_ref)

    # -- equalities --
    def equality_residual(self, x) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.residual(x) for b in self.blocks])

    def equality_jacobian(self, x) -> sparse.csr_matrix:
        if not self.blocks:
            return sparse.csr_matrix((0, self.n))
        return sparse.vstack([b.jacobian(x) for b in self.blocks], format="csr")

    def lagrangian_hessian(self, x, lam) -> sparse.csr_matrix:
        """∇²f − Σ λ_i ∇²c_i."""
        hess = sparse.diags(self.quad_weight).tocsr()
        for b in self.blocks:
            part = b.hessian(x, lam[self.row_slices[b.name]])
            if part is not None:
                hess = hess - part.tocsr()
        return hess

    # -- inequalities --
    def inequality_residual(self, x) -> np.ndarray:
        return self.ineq_matrix @ x + self.ineq_const

    def block_residual(self, x, name) -> np.ndarray:
        return self.equality_residual(x)[self.row_slices[name]]

    def check_dimensions(self):
        for b in self.blocks:
            jac = b.jacobian(self.x0)
            if jac.shape != (b.size, self.n):
                raise ConfigurationError(f"block {b.name}: Jacobian shape {jac.shape} != {(b.size, self.n)}")
        if self.ineq_matrix.shape[1] != self.n or self.ineq_const.shape[0] != self.m_ineq:
            raise ConfigurationError("inequality block dimensions do not match the layout")
        if self.m_eq > self.n:
            raise ConfigurationError(f"{self.m_eq} equality rows exceed {self.n} unknowns")


def bound_rows(layout: VariableLayout) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Finite variable bounds as rows of G x + g0 ≥ 0."""
    lo, up = layout.lower, layout.upper
    lo_idx = np.flatnonzero(np.isfinite(lo))
    up_idx = np.flatnonzero(np.isfinite(up))
    n = layout.n
    rows = np.arange(lo_idx.size + up_idx.size)
    cols = np.concatenate([lo_idx, up_idx])
    vals = np.concatenate([np.ones(lo_idx.size), -np.ones(up_idx.size)])
    G = sparse.csr_matrix((vals, (rows, cols)), shape=(rows.size, n))
    g0 = np.concatenate([-lo[lo_idx], up[up_idx]])
    return G, g0


# ------------------------------
# solution
# ------------------------------

@dataclass
class KktSolution:
    x: np.ndarray
    lam: np.ndarray                      # equality multipliers, original units
    z: np.ndarray                        # inequality multipliers ≥ 0, original units
    s: np.ndarray                        # inequality slacks, original units
    status: str
    iterations: int
    objective: float
    inf_pr: float
    inf_du: float
    complementarity: float
    wall_time: float = 0.0
    history: List[dict] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def multipliers(self, problem: NlpProblem, block: str) -> np.ndarray:
        return self.lam[problem.row_slices[block]]

    def ineq_multipliers(self, problem: NlpProblem, name: str) -> np.ndarray:
        return self.z[problem.ineq_names[name]]


def solve(problem: NlpProblem, warm_start: Optional[KktSolution] = None, settings=None) -> KktSolution:
    from core.interior_point import InteriorPointSolver

    return InteriorPointSolver(settings).solve(problem, warm_start)


def assemble(network, bids, forecasts, thermal_history, omega, horizon, **kwargs) -> NlpProblem:
    from core.problem_builder import assemble as _assemble

    return _assemble(network, bids, forecasts, thermal_history, omega, horizon, **kwargs)


# ------------------------------
# derivative checks
# ------------------------------

def _interior_point(problem: NlpProblem, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo, up = problem.layout.lower, problem.layout.upper
    x = problem.x0.copy()
    span = np.where(np.isfinite(lo) & np.isfinite(up), up - lo, np.abs(x) * 0.1 + problem.layout.scale * 0.1)
    x = x + (rng.random(x.size) - 0.5) * 0.2 * span
    inner_lo = np.where(np.isfinite(lo), lo + 0.01 * np.abs(span), -np.inf)
    inner_up = np.where(np.isfinite(up), up - 0.01 * np.abs(span), np.inf)
    return np.clip(x, np.minimum(inner_lo, inner_up), np.maximum(inner_lo, inner_up))


def gradient_check(problem: NlpProblem, point: Optional[np.ndarray] = None, h_step: float = 1e-6,
                   seed: int = 0, max_columns: Optional[int] = 400, check_hessian: bool = False) -> float:
    """Max relative deviation between analytic and central-difference derivatives.

    Deviation per entry is |fd − an| / max(1, |an|). Columns are sampled when the problem is
    larger than `max_columns`.
    """
    x = _interior_point(problem, seed) if point is None else np.asarray(point, dtype=float)
    n = problem.n
    columns = np.arange(n)
    if max_columns is not None and n > max_columns:
        columns = np.sort(np.random.default_rng(seed).choice(n, max_columns, replace=False))

    jac = problem.equality_jacobian(x).tocsc()
    worst = 0.0
    for j in columns:
        h = h_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (problem.equality_residual(xp) - problem.equality_residual(xm)) / (2 * h)
        an = jac[:, j].toarray().ravel()
        if fd.size:
            worst = max(worst, float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an)))))
        g_fd = (problem.objective_value(xp) - problem.objective_value(xm)) / (2 * h)
        g_an = problem.objective_gradient(x)[j]
        worst = max(worst, abs(g_fd - g_an) / max(1.0, abs(g_an)))

    if check_hessian and problem.m_eq:
        lam = np.random.default_rng(seed + 1).standard_normal(problem.m_eq)
        hess = problem.lagrangian_hessian(x, lam).tocsc()
        for j in columns:
            h = h_step * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            grad_p = problem.objective_gradient(xp) - problem.equality_jacobian(xp).T @ lam
            grad_m = problem.objective_gradient(xm) - problem.equality_jacobian(xm).T @ lam
            fd = (grad_p - grad_m) / (2 * h)
            an = hess[:, j].toarray().ravel()
            worst = max(worst, float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an)))))
    return worst
