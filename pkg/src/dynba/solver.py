"""Sparse Levenberg-Marquardt over batched residual blocks.

A :class:`Problem` holds named parameter blocks, each an ``(n, d)`` array whose
rows are individual blocks with their own frozen flag. Residual blocks are
registered in homogeneous batches: one residual function evaluated over many
instances, each instance gathering one row from every referenced parameter
block. Residual functions have the signature::

    fn(*args, jac=True) -> (r, [J_0, J_1, ...])   # r: (n, m), J_i: (n, m, d_i)
    fn(*args, jac=False) -> r

The total cost is ``sum(weight * rho(|r_i|^2))`` with ``rho`` the robust loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from .errors import NumericalFailure
from .geometry import canonical_rotvec

log = logging.getLogger(__name__)

MAX_DAMPING = 1e16
MIN_DIAGONAL = 1e-6
DENSE_LIMIT = 3000


# --------------------------------------------------------------------------
# robust losses
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Loss:
    """Robust loss on the squared residual norm ``s``.

    ``none``: rho(s) = s. ``huber``: quadratic up to ``delta``, linear beyond.
    ``soft_l1``: Charbonnier ``sqrt(s + eps^2) - eps``, a smooth stand-in for |r|.
    """

    kind: str = "none"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "soft_l1"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind != "none" and not self.param > 0:
            raise ValueError("loss parameter must be positive")

    def rho(self, s):
        """Return ``(rho(s), rho'(s))``."""
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "none":
            return s, np.ones_like(s)
        if self.kind == "huber":
            d = self.param
            quad = s <= d * d
            root = np.sqrt(np.where(quad, d * d, s))
            return (np.where(quad, s, 2.0 * d * root - d * d),
                    np.where(quad, 1.0, d / root))
        e = self.param
        q = np.sqrt(s + e * e)
        return q - e, 0.5 / q


NO_LOSS = Loss()


def huber(delta=2.0):
    return Loss("huber", delta)


def soft_l1(eps=1e-3):
    return Loss("soft_l1", eps)


def apply_robust_loss(residual_norm, loss=NO_LOSS):
    """Cost and IRLS weight for a residual of the given norm."""
    if residual_norm < 0:
        raise ValueError("residual norm must be non-negative")
    rho, w = loss.rho(float(residual_norm) ** 2)
    return float(rho), float(w)


# --------------------------------------------------------------------------
# problem definition
# --------------------------------------------------------------------------

@dataclass
class ParameterBlock:
    name: str
    values: np.ndarray
    manifold: str = "euclidean"
    frozen: np.ndarray = None
    eliminate: bool = False

    @property
    def dim(self):
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


@dataclass
class ResidualBlock:
    term: str
    fn: object
    refs: list
    loss: Loss = NO_LOSS
    weight: float = 1.0

    @property
    def count(self):
        return len(self.refs[0][1]) if self.refs else 0


class Problem:
    def __init__(self):
        self.parameters = {}
        self.residuals = []

    def add_parameter_block(self, name, values, manifold="euclidean", frozen=False, eliminate=False):
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if manifold not in ("euclidean", "so3"):
            raise ValueError(f"unknown manifold {manifold!r}")
        if manifold == "so3" and values.shape[1] != 3:
            raise ValueError("so3 blocks must be 3-dimensional")
        frozen = np.broadcast_to(np.asarray(frozen, dtype=bool), (len(values),)).copy()
        self.parameters[name] = ParameterBlock(name, values, manifold, frozen, eliminate)
        return self.parameters[name]

    def add_residual_block(self, term, fn, refs, loss=NO_LOSS, weight=1.0):
        """Register a batch of residual instances.

        ``refs`` is a list of ``(block_name, indices)``; all index arrays share
        one length, the number of instances.
        """
        if weight < 0:
            raise ValueError("residual weight must be >= 0")
        norm_refs = []
        n = None
        for name, idx in refs:
            if name not in self.parameters:
                raise KeyError(f"residual {term!r} references unknown block {name!r}")
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
            if n is None:
                n = len(idx)
            elif len(idx) != n:
                raise ValueError(f"residual {term!r}: reference lengths differ")
            if len(idx) and (idx.min() < 0 or idx.max() >= len(self.parameters[name])):
                raise IndexError(f"residual {term!r}: index out of range for block {name!r}")
            norm_refs.append((name, idx))
        if n:
            self.residuals.append(ResidualBlock(term, fn, norm_refs, loss, float(weight)))

    def values(self, name):
        return self.parameters[name].values

    # -- evaluation ---------------------------------------------------------

    def _args(self, block, values=None):
        values = values or {k: p.values for k, p in self.parameters.items()}
        return [values[name][idx] for name, idx in block.refs]

    def term_costs(self, values=None):
        out = {}
        for block in self.residuals:
            r = block.fn(*self._args(block, values), jac=False)
            rho, _ = block.loss.rho(np.sum(r * r, axis=1))
            out[block.term] = out.get(block.term, 0.0) + block.weight * float(np.sum(rho))
        return out

    def cost(self, values=None):
        return float(sum(self.term_costs(values).values()))

    def residual_norms(self, term, values=None):
        """Per-instance residual norms of every block registered under ``term``."""
        parts = [np.linalg.norm(b.fn(*self._args(b, values), jac=False), axis=1)
                 for b in self.residuals if b.term == term]
        return np.concatenate(parts) if parts else np.zeros(0)


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

@dataclass
class SolverOptions:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    initial_damping: float = 1e-4
    schur: str = "auto"  # auto | always | never


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    terms: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    gradient_norm: float = 0.0

    def to_dict(self):
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "termination": self.termination,
            "gradient_norm": self.gradient_norm,
            "terms": {k: {"initial": a, "final": b} for k, (a, b) in self.terms.items()},
            "history": self.history,
        }


class _Layout:
    """Maps free parameter rows to columns of the Jacobian."""

    def __init__(self, problem):
        self.index = {}
        self.order = []
        col = 0
        blocks = sorted(problem.parameters.values(), key=lambda p: p.eliminate)
        self.n_reduced = None
        for p in blocks:
            if p.eliminate and self.n_reduced is None:
                self.n_reduced = col
            idx = np.full(len(p), -1, dtype=np.int64)
            free = np.flatnonzero(~p.frozen)
            idx[free] = col + p.dim * np.arange(len(free))
            col += p.dim * len(free)
            self.index[p.name] = idx
            self.order.append(p)
        if self.n_reduced is None:
            self.n_reduced = col
        self.n = col

    def flatten(self, values):
        parts = []
        for p in self.order:
            parts.append(values[p.name][~p.frozen].reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def apply(self, values, delta):
        new = {}
        for p in self.order:
            v = values[p.name]
            free = self.index[p.name] >= 0
            if np.any(free):
                v = v.copy()
                start = self.index[p.name][free][0]
                v[free] += delta[start:start + p.dim * int(free.sum())].reshape(-1, p.dim)
                if p.manifold == "so3":
                    v[free] = canonical_rotvec(v[free])
            new[p.name] = v
        return new


def _linearize(problem, layout, values):
    rows, cols, vals, res = [], [], [], []
    cost = 0.0
    row0 = 0
    for block in problem.residuals:
        args = [values[name][idx] for name, idx in block.refs]
        r, jacs = block.fn(*args, jac=True)
        n, m = r.shape
        rho, rho1 = block.loss.rho(np.sum(r * r, axis=1))
        cost += block.weight * float(np.sum(rho))
        scale = np.sqrt(block.weight * rho1)
        res.append((r * scale[:, None]).reshape(-1))
        ridx = row0 + np.arange(n * m).reshape(n, m)
        for (name, idx), J in zip(block.refs, jacs):
            base = layout.index[name][idx]
            keep = base >= 0
            if not np.any(keep):
                continue
            d = J.shape[2]
            Jk = J[keep] * scale[keep, None, None]
            rr = np.broadcast_to(ridx[keep][:, :, None], Jk.shape)
            cc = np.broadcast_to(base[keep][:, None, None] + np.arange(d)[None, None, :], Jk.shape)
            rows.append(rr.reshape(-1))
            cols.append(cc.reshape(-1))
            vals.append(Jk.reshape(-1))
        row0 += n * m
    f = np.concatenate(res) if res else np.zeros(0)
    if rows:
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(row0, layout.n))
    else:
        J = sp.csr_matrix((row0, layout.n))
    return cost, f, J


def _use_schur(problem, layout, mode):
    if mode == "never" or layout.n_reduced == layout.n:
        return False
    if mode == "always":
        return True
    n_elim = sum(int((~p.frozen).sum()) for p in problem.parameters.values() if p.eliminate)
    others = [int((~p.frozen).sum()) for p in problem.parameters.values() if not p.eliminate]
    n_pose = max([c for c in others if c > 0], default=0)
    return n_elim > 10 * n_pose


def _block_dims(layout):
    dims = []
    for p in layout.order:
        if p.eliminate:
            dims.extend([p.dim] * int((~p.frozen).sum()))
    return dims


def _solve_schur(A, b, layout):
    nc = layout.n_reduced
    dims = set(_block_dims(layout))
    if len(dims) != 1:
        return None
    d = dims.pop()
    A = A.tocsr()
    B = A[:nc, :nc]
    E = A[:nc, nc:]
    C = A[nc:, nc:].tocoo()
    nb = C.shape[0] // d
    if np.any(C.row // d != C.col // d):
        return None  # structure block is not block-diagonal
    blocks = np.zeros((nb, d, d))
    np.add.at(blocks, (C.row // d, C.row % d, C.col % d), C.data)
    inv = np.linalg.inv(blocks)
    ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    base = (np.arange(nb) * d)[:, None, None]
    Cinv = sp.csr_matrix((inv.reshape(-1), ((base + ii).reshape(-1), (base + jj).reshape(-1))),
                         shape=C.shape)
    bc, bp = b[:nc], b[nc:]
    if nc:
        ECinv = E @ Cinv
        S = (B - ECinv @ E.T).toarray()
        rhs = bc - ECinv @ bp
        dc = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), rhs)
    else:
        dc = np.zeros(0)
    dp = Cinv @ (bp - E.T @ dc)
    return np.concatenate([dc, dp])


def _solve_step(J, f, lam, layout, schur):
    JtJ = (J.T @ J).tocsr()
    diag = np.clip(JtJ.diagonal(), MIN_DIAGONAL, 1e32)
    A = JtJ + sp.diags(lam * diag)
    b = -(J.T @ f)
    if schur:
        step = _solve_schur(A, b, layout)
        if step is not None:
            return step
    if layout.n <= DENSE_LIMIT:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A.toarray()), b)
    lu = scipy.sparse.linalg.splu(A.tocsc())
    step = lu.solve(b)
    if not np.all(np.isfinite(step)):
        raise np.linalg.LinAlgError("sparse factorisation produced non-finite step")
    return step


def solve(problem, options=None):
    """Minimise the problem's cost in place; returns a :class:`SolveReport`."""
    options = options or SolverOptions()
    layout = _Layout(problem)
    values = {k: p.values for k, p in problem.parameters.items()}
    terms0 = problem.term_costs(values)
    cost, f, J = _linearize(problem, layout, values)
    if not np.isfinite(cost) or not np.all(np.isfinite(f)):
        raise NumericalFailure("non-finite residual at the initial point")
    initial = cost
    history = []

    def finish(term, it, g):
        for k, v in values.items():
            problem.parameters[k].values = v
        terms1 = problem.term_costs(values)
        return SolveReport(initial, cost, it, term,
                           {k: (terms0.get(k, 0.0), terms1.get(k, 0.0)) for k in terms0},
                           history, float(np.max(np.abs(g))) if len(g) else 0.0)

    if layout.n == 0:
        return finish("converged", 0, np.zeros(0))
    schur = _use_schur(problem, layout, options.schur)
    g = 2.0 * (J.T @ f)
    if np.max(np.abs(g)) < options.grad_tol:
        return finish("converged", 0, g)

    lam = options.initial_damping
    it = 0
    while it < options.max_iter:
        it += 1
        try:
            step = _solve_step(J, f, lam, layout, schur)
        except (np.linalg.LinAlgError, RuntimeError, ValueError):
            lam *= 10.0
            if lam > MAX_DAMPING:
                raise NumericalFailure("augmented system singular after damping escalation")
            history.append({"iteration": it, "cost": cost, "damping": lam, "step_norm": 0.0,
                            "accepted": False})
            continue
        step_norm = float(np.linalg.norm(step))
        x_norm = float(np.linalg.norm(layout.flatten(values)))
        if step_norm <= options.step_tol * (x_norm + options.step_tol):
            history.append({"iteration": it, "cost": cost, "damping": lam,
                            "step_norm": step_norm, "accepted": False})
            return finish("stalled", it, g)
        trial = layout.apply(values, step)
        try:
            new_cost = problem.cost(trial)
        except Exception as exc:  # noqa: BLE001 - e.g. NonPositiveDepth at the trial point
            log.debug("trial point rejected: %s", exc)
            new_cost = math.inf
        accepted = bool(np.isfinite(new_cost) and new_cost < cost)
        if accepted:
            values = trial
            new_cost, f, J = _linearize(problem, layout, values)
            assert new_cost <= cost * (1 + 1e-12), "accepted LM step increased the cost"
            cost = new_cost
            lam = max(lam * 0.5, 1e-12)
            g = 2.0 * (J.T @ f)
        else:
            lam *= 10.0
        history.append({"iteration": it, "cost": cost, "damping": lam,
                        "step_norm": step_norm, "accepted": accepted})
        log.debug("iter %3d cost %.6e damping %.1e step %.3e %s", it, cost, lam, step_norm,
                  "accept" if accepted else "reject")
        if accepted and np.max(np.abs(g)) < options.grad_tol:
            return finish("converged", it, g)
        if lam > MAX_DAMPING:
            return finish("stalled", it, g)
    return finish("max_iter", it, g)


def check_jacobian(problem, block, eps=1e-6, relative=True):
    """Largest deviation between analytic and central-difference Jacobians.

    Every residual batch referencing ``block`` is checked at the current
    parameter values. With ``relative`` the deviation of each entry is divided
    by ``max(1, |J_fd|)``.
    """
    worst = 0.0
    for rb in problem.residuals:
        slots = [i for i, (name, _) in enumerate(rb.refs) if name == block]
        if not slots:
            continue
        args = problem._args(rb)
        _, jacs = rb.fn(*args, jac=True)
        for i in slots:
            for j in range(args[i].shape[1]):
                plus = [a.copy() for a in args]
                minus = [a.copy() for a in args]
                plus[i][:, j] += eps
                minus[i][:, j] -= eps
                fd = (rb.fn(*plus, jac=False) - rb.fn(*minus, jac=False)) / (2.0 * eps)
                dev = np.abs(jacs[i][:, :, j] - fd)
                if relative:
                    dev = dev / np.maximum(1.0, np.abs(fd))
                worst = max(worst, float(np.max(dev)))
    return worst
