"""Factor graph container and a robust sparse Levenberg-Marquardt solver."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:  # optional sparse Cholesky (CHOLMOD); SuperLU is the fallback
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, analyze as cholmod_analyze
except ImportError:  # pragma: no cover - depends on the environment
    cholmod_analyze = None

    class CholmodNotPositiveDefiniteError(Exception):
        pass


from .camera import BehindCamera
from .factors import Factor
from .liegroup import AngleNearPi, Pose3, poses_to_arrays, se3_exp_batch


class GraphError(ValueError):
    """Graph invariants violated (missing or unconstrained variables)."""


class SingularSystem(RuntimeError):
    """Damped normal equations could not be solved even at the maximum damping."""


@dataclass
class SolverConfig:
    max_iterations: int = 100
    relative_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    absolute_tolerance: float = 1e-24
    step_tolerance: float = 1e-12
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_lambda: float = 1e12
    min_diagonal: float = 1e-6
    # "sparse": CHOLMOD if available, else SuperLU; "superlu"; "dense"
    linear_solver: str = "sparse"

    def __post_init__(self) -> None:
        for name in (
            "max_iterations",
            "relative_tolerance",
            "gradient_tolerance",
            "absolute_tolerance",
            "step_tolerance",
            "initial_lambda",
            "lambda_up",
            "lambda_down",
            "max_lambda",
            "min_diagonal",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver setting {name} must be positive")
        if self.relative_tolerance >= 1:
            raise ValueError("relative_tolerance must be < 1")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda scaling factors must exceed 1")
        if self.linear_solver not in ("sparse", "superlu", "dense"):
            raise ValueError("linear_solver must be 'sparse', 'superlu' or 'dense'")


@dataclass
class SolveStats:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list[float] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    wall_time: float = 0.0
    rejected_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": list(self.cost_trace),
            "converged": self.converged,
            "reason": self.reason,
            "wall_time": self.wall_time,
            "rejected_steps": self.rejected_steps,
        }


def robust_weight(kernel: float | None, mahalanobis_norm):
    """IRLS weight of the Huber kernel with threshold ``kernel`` (None = quadratic)."""
    s = np.asarray(mahalanobis_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("norm must be non-negative")
    if kernel is None:
        w = np.ones_like(s)
    else:
        w = np.where(s <= kernel, 1.0, kernel / np.maximum(s, 1e-300))
    return float(w) if w.ndim == 0 else w


def robust_cost(kernel, s):
    """Per-factor cost: s^2 in the quadratic zone, 2ks - k^2 beyond (C1 at s = k)."""
    s = np.asarray(s, dtype=float)
    k = np.asarray(kernel, dtype=float)
    quad = s * s
    return np.where(np.isnan(k) | (s <= k), quad, 2.0 * k * s - k * k)


class FactorGraph:
    """Factors over hashable keys plus the current value of each variable."""

    def __init__(self) -> None:
        self.factors: list[Factor] = []
        self.values: OrderedDict[Hashable, object] = OrderedDict()

    def add(self, factor: Factor) -> Factor:
        self.factors.append(factor)
        return factor

    def insert(self, key: Hashable, value) -> None:
        if isinstance(value, Pose3):
            self.values[key] = value
        else:
            self.values[key] = np.atleast_1d(np.asarray(value, dtype=float)).copy()

    def __contains__(self, key) -> bool:
        return key in self.values

    def __len__(self) -> int:
        return len(self.factors)

    @property
    def num_variables(self) -> int:
        return len(self.values)

    def census(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.factors:
            counts[type(f).__name__] = counts.get(type(f).__name__, 0) + 1
        return counts

    def validate(self, values=None) -> None:
        values = self.values if values is None else values
        touched = set()
        for f in self.factors:
            for slot, key in zip(f.slots, f.keys):
                if key not in values:
                    raise GraphError(f"{f!r} references missing variable {key}")
                v = values[key]
                if (slot == "pose") != isinstance(v, Pose3):
                    raise GraphError(f"variable {key} has the wrong type for {f!r}")
                touched.add(key)
        loose = [k for k in values if k not in touched]
        if loose:
            raise GraphError(f"unconstrained variables: {', '.join(map(str, loose[:5]))}")

    def cost(self, values=None) -> float:
        """Robustified objective, evaluated factor by factor."""
        values = self.values if values is None else values
        total = 0.0
        for f in self.factors:
            r, _ = f.evaluate([values[k] for k in f.keys])
            s = f.noise.mahalanobis(r)
            k = np.nan if f.noise.huber is None else f.noise.huber
            total += float(robust_cost(k, s))
        return total

    def dump(self, values=None) -> str:
        """One line per factor: type, keys, whitened residual."""
        values = self.values if values is None else values
        lines = []
        for f in self.factors:
            r, _ = f.evaluate([values[k] for k in f.keys])
            w = f.noise.whiten(r)
            keys = " ".join(str(k) for k in f.keys)
            res = " ".join(f"{x:.9e}" for x in w)
            lines.append(f"{type(f).__name__} [{keys}] {res}")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Array state and vectorised linearisation
# ---------------------------------------------------------------------------


class _State:
    """Variables packed into arrays: a pose stack and one flat vector buffer."""

    def __init__(self, values) -> None:
        self.keys = list(values)
        self.pose_index: dict = {}
        self.vec_offset: dict = {}
        self.vec_dim: dict = {}
        self.col_offset: dict = {}
        poses, vecs = [], []
        pose_cols, vec_cols = [], []
        vec_len = col = 0
        for k in self.keys:
            v = values[k]
            self.col_offset[k] = col
            if isinstance(v, Pose3):
                self.pose_index[k] = len(poses)
                poses.append(v)
                pose_cols.append(col + np.arange(6))
                col += 6
            else:
                self.vec_offset[k] = vec_len
                self.vec_dim[k] = len(v)
                vecs.append(v)
                vec_cols.append(col + np.arange(len(v)))
                vec_len += len(v)
                col += len(v)
        self.R, self.t = poses_to_arrays(poses)
        self.vec = np.concatenate(vecs) if vecs else np.zeros(0)
        self.ncols = col
        self.pose_cols = np.stack(pose_cols) if pose_cols else np.zeros((0, 6), dtype=int)
        self.vec_cols = np.concatenate(vec_cols) if vec_cols else np.zeros(0, dtype=int)

    def retract(self, delta: np.ndarray) -> _State:
        out = object.__new__(_State)
        out.__dict__.update(self.__dict__)
        if len(self.R):
            dR, dt = se3_exp_batch(delta[self.pose_cols])
            out.R = dR @ self.R
            out.t = np.einsum("nij,nj->ni", dR, self.t) + dt
        if len(self.vec):
            out.vec = self.vec + delta[self.vec_cols]
        return out

    def to_values(self) -> OrderedDict:
        out = OrderedDict()
        for k in self.keys:
            if k in self.pose_index:
                i = self.pose_index[k]
                out[k] = Pose3.from_rt(self.R[i], self.t[i])
            else:
                o = self.vec_offset[k]
                out[k] = self.vec[o : o + self.vec_dim[k]].copy()
        return out


class _Group:
    """All factors of one (type, residual dim) stacked together."""

    def __init__(self, cls, members: list[int], factors: list[Factor], state: _State, row0: int) -> None:
        self.cls = cls
        self.members = np.asarray(members, dtype=int)
        self.n = len(factors)
        self.dim = d = factors[0].dim
        self.slots = cls.slots
        self.row0 = row0
        first = factors[0].data()
        self.data = [np.stack(col) for col in zip(*(f.data() for f in factors))] if first else []
        self.W = np.stack([f.noise.sqrt_information for f in factors])
        self.huber = np.array([np.nan if f.noise.huber is None else f.noise.huber for f in factors])
        rows = row0 + np.arange(self.n * d).reshape(self.n, d)
        self.index, self.row_idx, self.col_idx = [], [], []
        for s, slot in enumerate(self.slots):
            keys = [f.keys[s] for f in factors]
            dv = factors[0].dims[s]
            if slot == "pose":
                self.index.append(np.array([state.pose_index[k] for k in keys], dtype=int))
            else:
                offs = np.array([state.vec_offset[k] for k in keys], dtype=int)
                self.index.append(offs[:, None] + np.arange(dv))
            cols = np.array([state.col_offset[k] for k in keys], dtype=int)[:, None] + np.arange(dv)
            self.row_idx.append(np.broadcast_to(rows[:, :, None], (self.n, d, dv)).ravel())
            self.col_idx.append(np.broadcast_to(cols[:, None, :], (self.n, d, dv)).ravel())

    def gather(self, state: _State):
        vals = []
        for slot, idx in zip(self.slots, self.index):
            if slot == "pose":
                vals.append((state.R[idx], state.t[idx]))
            else:
                vals.append(state.vec[idx])
        return vals

    def evaluate(self, state: _State, jacobians: bool = True):
        r, jacs = self.cls.evaluate_batch(self.gather(state), self.data)
        rw = (self.W @ r[:, :, None])[:, :, 0]
        if not jacobians:
            return rw, None
        return rw, [self.W @ J for J in jacs]


@dataclass
class LinearSystem:
    """Whitened Jacobian and residual at one linearisation point.

    ``weights`` are the IRLS weights per factor (graph order). ``J`` and ``r``
    are not yet scaled by them; ``weighted()`` applies the square roots.
    """

    J: sp.csr_matrix
    r: np.ndarray
    weights: np.ndarray
    mahalanobis: np.ndarray
    cost: float
    row_factor: np.ndarray

    def weighted(self) -> tuple[sp.csr_matrix, np.ndarray]:
        sw = np.sqrt(self.weights[self.row_factor])
        return sp.diags(sw) @ self.J, sw * self.r


class _Problem:
    """Graph compiled against a fixed variable ordering.

    Besides the stacked Jacobian, the normal matrix is accumulated block-wise
    into a sparsity pattern computed once, which is much cheaper than forming
    ``J^T J`` with sparse products at every iteration.
    """

    def __init__(self, graph: FactorGraph, values) -> None:
        graph.validate(values)
        self.state = _State(values)
        by_type: OrderedDict = OrderedDict()
        for i, f in enumerate(graph.factors):
            by_type.setdefault((type(f), f.dim, f.dims), []).append(i)
        self.groups: list[_Group] = []
        row = 0
        row_factor = []
        for (cls, d, _), members in by_type.items():
            g = _Group(cls, members, [graph.factors[i] for i in members], self.state, row)
            self.groups.append(g)
            row_factor.append(np.repeat(g.members, d))
            row += g.n * d
        self.nrows = row
        self.nfactors = len(graph.factors)
        n = self.state.ncols
        self.ncols = n
        empty = np.zeros(0, dtype=int)
        self.row_factor = np.concatenate(row_factor) if row_factor else empty
        self.rows = np.concatenate([np.concatenate(g.row_idx) for g in self.groups]) if self.groups else empty
        self.cols = np.concatenate([np.concatenate(g.col_idx) for g in self.groups]) if self.groups else empty

        # normal-matrix pattern: one (n, da, db) block list per group and slot pair
        keys = []
        self.grad_cols = []
        for g in self.groups:
            g.slot_cols = []
            for s in range(len(g.slots)):
                dv = g.index[s].shape[1] if g.slots[s] == "vector" else 6
                g.slot_cols.append(g.col_idx[s].reshape(g.n, g.dim, dv)[:, 0, :])
            for a in range(len(g.slots)):
                ca = g.slot_cols[a]
                self.grad_cols.append(ca.ravel())
                for b in range(len(g.slots)):
                    cb = g.slot_cols[b]
                    keys.append((ca[:, :, None] * n + cb[:, None, :]).ravel())
        all_keys = np.concatenate(keys) if keys else empty
        uniq, self.h_inverse = np.unique(all_keys, return_inverse=True)
        self.h_rows = uniq // n
        self.h_cols = uniq % n
        self.h_indptr = np.searchsorted(self.h_rows, np.arange(n + 1))
        self.h_diag = np.nonzero(self.h_rows == self.h_cols)[0]
        self.grad_cols = np.concatenate(self.grad_cols) if self.grad_cols else empty
        self.symbolic = None  # cached sparse Cholesky analysis

    def _robust(self, rw_list):
        s = np.zeros(self.nfactors)
        cost = 0.0
        weights = np.ones(self.nfactors)
        for g, rw in zip(self.groups, rw_list):
            sg = np.linalg.norm(rw, axis=1)
            s[g.members] = sg
            cost += float(np.sum(robust_cost(g.huber, sg)))
            weights[g.members] = np.where(np.isnan(g.huber) | (sg <= g.huber), 1.0, g.huber / np.maximum(sg, 1e-300))
        return s, cost, weights

    def cost(self, state: _State) -> float:
        rws = [g.evaluate(state, jacobians=False)[0] for g in self.groups]
        return self._robust(rws)[1]

    def linearize(self, state: _State) -> LinearSystem:
        rws, data = [], []
        for g in self.groups:
            rw, Jw = g.evaluate(state)
            rws.append(rw)
            data.append(np.concatenate([J.ravel() for J in Jw]))
        s, cost, weights = self._robust(rws)
        r = np.concatenate([rw.ravel() for rw in rws]) if rws else np.zeros(0)
        vals = np.concatenate(data) if data else np.zeros(0)
        J = sp.csr_matrix((vals, (self.rows, self.cols)), shape=(self.nrows, state.ncols))
        return LinearSystem(J, r, weights, s, cost, self.row_factor)

    def normal_equations(self, state: _State):
        """IRLS-weighted (H data, gradient, cost) at ``state``."""
        rws, jacs = [], []
        for g in self.groups:
            rw, Jw = g.evaluate(state)
            rws.append(rw)
            jacs.append(Jw)
        _, cost, weights = self._robust(rws)
        hvals, gvals = [], []
        for g, rw, Jw in zip(self.groups, rws, jacs):
            w = weights[g.members]
            wr = (w[:, None] * rw)[:, :, None]
            JT = [np.swapaxes(J, 1, 2) for J in Jw]
            wJ = [w[:, None, None] * J for J in Jw]
            for a in range(len(Jw)):
                gvals.append((JT[a] @ wr).ravel())
                for b in range(len(Jw)):
                    hvals.append((JT[a] @ wJ[b]).ravel())
        n = self.ncols
        hdata = np.bincount(self.h_inverse, np.concatenate(hvals), minlength=len(self.h_rows)) if hvals else np.zeros(0)
        grad = np.bincount(self.grad_cols, np.concatenate(gvals), minlength=n) if gvals else np.zeros(n)
        return hdata, grad, cost

    def damped_matrix(self, hdata: np.ndarray, lam: float, min_diagonal: float) -> sp.csc_matrix:
        data = hdata.copy()
        data[self.h_diag] += lam * np.clip(hdata[self.h_diag], min_diagonal, None)
        # symmetric, so the CSR arrays read as CSC describe the same matrix
        return sp.csc_matrix((data, self.h_cols, self.h_indptr), shape=(self.ncols, self.ncols))


def linearize(graph: FactorGraph, values=None) -> LinearSystem:
    """Stacked whitened Jacobian/residual, robust weights and objective."""
    values = graph.values if values is None else values
    problem = _Problem(graph, values)
    return problem.linearize(problem.state)


# below this many unknowns a dense factorization beats sparse overhead
_DENSE_LIMIT = 150


def _solve_damped(problem: _Problem, hdata: np.ndarray, g: np.ndarray, lam: float, cfg: SolverConfig) -> np.ndarray | None:
    A = problem.damped_matrix(hdata, lam, cfg.min_diagonal)
    try:
        if cfg.linear_solver == "dense" or A.shape[0] <= _DENSE_LIMIT:
            c = scipy.linalg.cho_factor(A.toarray(), check_finite=False)
            delta = scipy.linalg.cho_solve(c, -g, check_finite=False)
        elif cfg.linear_solver == "sparse" and cholmod_analyze is not None:
            if problem.symbolic is None:
                problem.symbolic = cholmod_analyze(A, mode="supernodal", ordering_method="amd")
            factor = problem.symbolic.cholesky(A)
            delta = factor(-g)
        else:
            delta = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0).solve(-g)
    except (RuntimeError, np.linalg.LinAlgError, scipy.linalg.LinAlgError, CholmodNotPositiveDefiniteError):
        return None
    if not np.all(np.isfinite(delta)):
        return None
    return delta


def optimize(graph: FactorGraph, initial=None, cfg: SolverConfig | None = None):
    """Levenberg-Marquardt with IRLS Huber weights. Returns ``(values, stats)``."""
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    values = graph.values if initial is None else initial
    problem = _Problem(graph, values)
    state = problem.state
    stats = SolveStats()
    lam = cfg.initial_lambda
    hdata, grad, cost = problem.normal_equations(state)
    stats.initial_cost = cost
    stats.cost_trace.append(cost)
    while True:
        if cost <= cfg.absolute_tolerance:
            stats.converged, stats.reason = True, "absolute_cost"
            break
        if np.max(np.abs(grad), initial=0.0) <= cfg.gradient_tolerance:
            stats.converged, stats.reason = True, "gradient"
            break
        if stats.iterations >= cfg.max_iterations:
            stats.reason = "max_iterations"
            break
        stats.iterations += 1
        accepted = False
        solved_any = False
        while lam <= cfg.max_lambda:
            delta = _solve_damped(problem, hdata, grad, lam, cfg)
            if delta is None:
                lam *= cfg.lambda_up
                stats.rejected_steps += 1
                continue
            solved_any = True
            trial = state.retract(delta)
            try:
                new_cost = problem.cost(trial)
            except (BehindCamera, AngleNearPi):
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= cfg.lambda_up
            stats.rejected_steps += 1
        if not accepted:
            if not solved_any:
                stats.wall_time = time.perf_counter() - start
                raise SingularSystem("damped normal equations are singular up to the maximum damping")
            stats.converged, stats.reason = True, "no_decrease"
            break
        rel = (cost - new_cost) / cost
        state = trial
        cost = new_cost
        stats.cost_trace.append(cost)
        lam = max(lam / cfg.lambda_down, 1e-16)
        if rel < cfg.relative_tolerance:
            stats.converged, stats.reason = True, "relative_decrease"
            break
        if np.linalg.norm(delta) < cfg.step_tolerance:
            stats.converged, stats.reason = True, "small_step"
            break
        hdata, grad, cost_lin = problem.normal_equations(state)
    stats.final_cost = cost
    stats.wall_time = time.perf_counter() - start
    return state.to_values(), stats
