"""Shared nonlinear least-squares machinery.

All geometric refinements in this package (static calibration, bundle
adjustment, body-sequence refinement, broadcast calibration) are expressed as
sums of weighted, optionally robustified residual blocks over named parameter
blocks and solved with the same Levenberg-Marquardt core.  The broadcast clip
objective additionally runs in a first-order mode (Adam) because its matching
step re-forms the objective mid-flight.

Parameter blocks are either Euclidean (optionally with a per-element free/fixed
mask) or unit quaternions optimized through 3-dim axis-angle increments applied
on the left (see geometry module conventions).  Jacobians default to numeric
central differences (step 1e-7 relative, the correctness reference); residual
blocks may provide analytic Jacobians which can be gated against the numeric
ones with check_jacobians().
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import quat_from_axis_angle, quat_mul, quat_normalize

log = logging.getLogger(__name__)

NUMERIC_STEP = 1e-7
DENSE_LIMIT = 600  # switch to sparse normal equations above this many params


class SolverError(RuntimeError):
    pass


class NumericalFailure(SolverError):
    """Residuals, Jacobian or cost became non-finite."""


class DivergenceDetected(SolverError):
    """First-order mode: cost rose above its start for too many iterations."""


# ---------------------------------------------------------------------------
# robust kernels
# ---------------------------------------------------------------------------

@dataclass
class RobustKernel:
    """rho applied to per-chunk residual norms; cost = sum_chunks rho(|r_chunk|).

    kind "none": rho(t) = t^2 (plain squared loss).
    kind "geman_mcclure": rho(t) = s^2 t^2 / (s^2 + t^2), saturating at s^2.
    """

    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "geman_mcclure"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "geman_mcclure" and self.scale <= 0:
            raise ValueError("geman_mcclure scale must be positive")

    def rho(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "none":
            return t * t
        s2 = self.scale * self.scale
        return s2 * t * t / (s2 + t * t)

    def irls_weight(self, t):
        """omega(t) = rho'(t) / (2t); plain loss gives 1."""
        t = np.asarray(t, dtype=float)
        if self.kind == "none":
            return np.ones_like(t)
        s2 = self.scale * self.scale
        return s2 * s2 / (s2 + t * t) ** 2


def geman_mcclure(residual_norm, sigma):
    """Convenience scalar form of the saturating kernel."""
    return RobustKernel("geman_mcclure", sigma).rho(residual_norm)


# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------

@dataclass
class ParameterBlock:
    name: str
    values: np.ndarray
    manifold: str = "euclidean"  # or "quaternion"
    frozen: bool = False
    mask: np.ndarray | None = None  # free-element mask, euclidean only
    scale: np.ndarray | None = None  # per-local-dim conditioning, first-order mode

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.manifold not in ("euclidean", "quaternion"):
            raise ValueError(f"unknown manifold {self.manifold!r}")
        if self.manifold == "quaternion":
            if self.values.shape != (4,):
                raise ValueError("quaternion block must have shape (4,)")
            if self.mask is not None:
                raise ValueError("quaternion blocks do not support masks")
            self.values = quat_normalize(self.values)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.values.size)
        if self.scale is not None:
            self.scale = np.broadcast_to(
                np.asarray(self.scale, dtype=float), (self.local_size,)).copy()

    @property
    def full_size(self):
        return 3 if self.manifold == "quaternion" else self.values.size

    @property
    def local_size(self):
        if self.manifold == "quaternion":
            return 3
        if self.mask is not None:
            return int(np.count_nonzero(self.mask))
        return self.values.size

    def free_columns(self):
        """Indices into the full local space that are free to move."""
        if self.manifold == "quaternion" or self.mask is None:
            return np.arange(self.full_size)
        return np.flatnonzero(self.mask)

    def apply(self, delta):
        """Apply a local increment (length local_size) in place."""
        if self.manifold == "quaternion":
            self.values = quat_normalize(
                quat_mul(quat_from_axis_angle(delta), self.values))
        elif self.mask is not None:
            flat = self.values.reshape(-1)
            flat[self.mask] += delta
        else:
            self.values += delta.reshape(self.values.shape)


@dataclass
class ResidualBlock:
    fn: callable
    params: list
    dim: int
    jac: callable | None = None
    kernel: RobustKernel | None = None
    weight: float = 1.0
    chunk: int | None = None
    name: str = ""


class LeastSquaresProblem:
    """Container of parameter blocks and residual blocks."""

    def __init__(self):
        self.blocks: dict[str, ParameterBlock] = {}
        self.residuals: list[ResidualBlock] = []

    # -- construction -------------------------------------------------------

    def add_parameter_block(self, name, values, manifold="euclidean",
                            frozen=False, mask=None, scale=None):
        if name in self.blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        self.blocks[name] = ParameterBlock(name, values, manifold, frozen,
                                           mask, scale)

    def add_residual_block(self, fn, params, dim, jac=None, kernel=None,
                           weight=1.0, chunk=None, name=""):
        for p in params:
            if p not in self.blocks:
                raise ValueError(f"residual references unknown block {p!r}")
        if kernel is not None and kernel.kind != "none":
            if chunk is None:
                chunk = dim
            if dim % chunk != 0:
                raise ValueError("residual dim not divisible by chunk size")
        self.residuals.append(ResidualBlock(fn, list(params), int(dim), jac,
                                            kernel, float(weight), chunk, name))

    def set_frozen(self, name, frozen=True):
        self.blocks[name].frozen = bool(frozen)

    def values(self, name):
        return self.blocks[name].values

    # -- state management ---------------------------------------------------

    def snapshot(self):
        return {n: b.values.copy() for n, b in self.blocks.items()}

    def restore(self, state):
        for n, v in state.items():
            self.blocks[n].values = v.copy()

    def free_blocks(self):
        return [b for b in self.blocks.values()
                if not b.frozen and b.local_size > 0]

    def layout(self):
        offsets, total = {}, 0
        for b in self.free_blocks():
            offsets[b.name] = (total, total + b.local_size)
            total += b.local_size
        return offsets, total

    def apply_step(self, delta, offsets):
        for b in self.free_blocks():
            lo, hi = offsets[b.name]
            b.apply(delta[lo:hi])

    # -- evaluation ---------------------------------------------------------

    def _block_values(self, names):
        return [self.blocks[n].values for n in names]

    def residual_vector(self):
        parts = []
        for rb in self.residuals:
            r = np.asarray(rb.fn(*self._block_values(rb.params)),
                           dtype=float).reshape(-1)
            if r.size != rb.dim:
                raise ValueError(
                    f"residual block {rb.name!r} returned {r.size} values, "
                    f"expected {rb.dim}")
            parts.append(r)
        return parts

    def cost(self, parts=None):
        if parts is None:
            parts = self.residual_vector()
        total = 0.0
        for rb, r in zip(self.residuals, parts):
            if rb.kernel is None or rb.kernel.kind == "none":
                total += rb.weight * float(r @ r)
            else:
                t = np.linalg.norm(r.reshape(-1, rb.chunk), axis=1)
                total += rb.weight * float(np.sum(rb.kernel.rho(t)))
        return total

    def _chunk_weights(self, rb, r):
        """Per-element sqrt(weight * irls) factors for one residual block."""
        if rb.kernel is None or rb.kernel.kind == "none":
            return np.full(rb.dim, np.sqrt(rb.weight))
        t = np.linalg.norm(r.reshape(-1, rb.chunk), axis=1)
        w = rb.kernel.irls_weight(t) * rb.weight
        return np.sqrt(np.repeat(w, rb.chunk))

    def _numeric_block_jac(self, rb, block):
        """Central-difference Jacobian of one residual block wrt one block."""
        cols = []
        saved = block.values.copy()
        free = block.free_columns()
        for k in free:
            if block.manifold == "quaternion":
                x0 = 0.0
            else:
                x0 = float(block.values.reshape(-1)[k])
            h = NUMERIC_STEP * max(1.0, abs(x0))
            e = np.zeros(block.full_size)
            e[k] = h
            if block.manifold == "quaternion":
                block.values = quat_normalize(
                    quat_mul(quat_from_axis_angle(e), saved))
            else:
                block.values = saved.copy()
                block.values.reshape(-1)[k] += h
            r_plus = np.asarray(rb.fn(*self._block_values(rb.params)),
                                dtype=float).reshape(-1)
            if block.manifold == "quaternion":
                block.values = quat_normalize(
                    quat_mul(quat_from_axis_angle(-e), saved))
            else:
                block.values = saved.copy()
                block.values.reshape(-1)[k] -= h
            r_minus = np.asarray(rb.fn(*self._block_values(rb.params)),
                                 dtype=float).reshape(-1)
            cols.append((r_plus - r_minus) / (2.0 * h))
            block.values = saved.copy()
        if not cols:
            return np.zeros((rb.dim, 0))
        return np.stack(cols, axis=1)

    def _analytic_block_jacs(self, rb):
        jacs = rb.jac(*self._block_values(rb.params))
        if len(jacs) != len(rb.params):
            raise ValueError(
                f"residual block {rb.name!r}: jac returned {len(jacs)} "
                f"entries for {len(rb.params)} parameter blocks")
        out = {}
        for pname, J in zip(rb.params, jacs):
            block = self.blocks[pname]
            if J is None:
                continue
            free = block.free_columns()
            if sp.issparse(J):
                out[pname] = J.tocsc()[:, free]
            else:
                out[pname] = np.asarray(J, dtype=float)[:, free]
        return out

    def build_jacobian(self, parts):
        """Weighted residual vector and sparse Jacobian over free local coords.

        Returns (r_tilde, J (csr), offsets, total_cols).
        """
        offsets, ncols = self.layout()
        rows_data, rows_i, rows_j = [], [], []
        weighted = []
        row0 = 0
        dense_rows = []
        for rb, r in zip(self.residuals, parts):
            s = self._chunk_weights(rb, r)
            weighted.append(s * r)
            if rb.jac is not None:
                jacs = self._analytic_block_jacs(rb)
            else:
                jacs = None
            for pname in rb.params:
                block = self.blocks[pname]
                if block.frozen or block.local_size == 0:
                    continue
                lo, _ = offsets[pname]
                if jacs is not None:
                    J = jacs.get(pname)
                    if J is None:
                        continue
                else:
                    J = self._numeric_block_jac(rb, block)
                if sp.issparse(J):
                    Jc = (sp.diags(s) @ J).tocoo()
                    rows_data.append(Jc.data)
                    rows_i.append(Jc.row + row0)
                    rows_j.append(Jc.col + lo)
                else:
                    Jw = J * s[:, None]
                    jj, kk = np.meshgrid(np.arange(rb.dim),
                                         np.arange(J.shape[1]), indexing="ij")
                    rows_data.append(Jw.reshape(-1))
                    rows_i.append(jj.reshape(-1) + row0)
                    rows_j.append(kk.reshape(-1) + lo)
            row0 += rb.dim
        r_tilde = np.concatenate(weighted) if weighted else np.zeros(0)
        if rows_data:
            data = np.concatenate(rows_data)
            ii = np.concatenate(rows_i)
            jj = np.concatenate(rows_j)
            J = sp.csr_matrix((data, (ii, jj)), shape=(row0, ncols))
        else:
            J = sp.csr_matrix((row0, ncols))
        return r_tilde, J, offsets, ncols


def check_jacobians(problem, rtol=1e-5):
    """Compare analytic Jacobians against central differences.

    Returns the worst elementwise discrepancy |Ja - Jn| / max(1, |Jn|) over all
    residual blocks that provide analytic Jacobians.
    """
    worst = 0.0
    for rb in problem.residuals:
        if rb.jac is None:
            continue
        jacs = problem._analytic_block_jacs(rb)
        for pname, Ja in jacs.items():
            block = problem.blocks[pname]
            if block.local_size == 0:
                continue
            Jn = problem._numeric_block_jac(rb, block)
            if sp.issparse(Ja):
                Ja = Ja.toarray()
            diff = np.abs(Ja - Jn) / np.maximum(1.0, np.abs(Jn))
            worst = max(worst, float(diff.max()) if diff.size else 0.0)
    if worst > rtol:
        raise NumericalFailure(
            f"analytic jacobian deviates from numeric by {worst:.3g} "
            f"(tolerance {rtol:g})")
    return worst


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

@dataclass
class SolveConfig:
    mode: str = "lm"  # "lm" or "first_order"
    max_iterations: int = 200
    cost_tol: float = 1e-10
    grad_tol: float = 1e-10
    init_lambda: float = 1e-4
    # first-order mode
    learning_rate: float = 1e-3
    first_order_iterations: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_patience: int = 50
    iteration_callback: callable | None = None


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    n_residuals: int = 0
    n_parameters: int = 0

    def __str__(self):
        return (f"cost {self.initial_cost:.6g} -> {self.final_cost:.6g} "
                f"in {self.iterations} iterations ({self.termination})")


def solve_least_squares(problem, config=None):
    config = config or SolveConfig()
    if config.mode == "lm":
        return _solve_lm(problem, config)
    if config.mode == "first_order":
        return _solve_first_order(problem, config)
    raise ValueError(f"unknown solve mode {config.mode!r}")


def _solve_normal_equations(J, r, lam):
    n = J.shape[1]
    JtJ = (J.T @ J).tocsc()
    d = np.maximum(JtJ.diagonal(), 1e-12)
    H = JtJ + sp.diags(lam * d)
    g = J.T @ r
    if n <= DENSE_LIMIT:
        try:
            return np.linalg.solve(H.toarray(), -g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H.toarray(), -g, rcond=None)[0]
    try:
        return spla.splu(H).solve(-g)
    except RuntimeError:
        return spla.lsmr(H, -g, atol=1e-12, btol=1e-12)[0]


def _solve_lm(problem, config):
    parts = problem.residual_vector()
    cost = problem.cost(parts)
    if not np.isfinite(cost):
        raise NumericalFailure(f"initial cost is not finite ({cost})")
    initial_cost = cost
    n_res = sum(rb.dim for rb in problem.residuals)
    lam = config.init_lambda
    termination = "max_iterations"
    it = 0
    ncols = 0
    while it < config.max_iterations:
        it += 1
        r, J, offsets, ncols = problem.build_jacobian(parts)
        if ncols == 0:
            termination = "converged_grad"
            it -= 1
            break
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(J.data)):
            raise NumericalFailure("non-finite residual or jacobian")
        grad = 2.0 * (J.T @ r)
        if np.max(np.abs(grad)) < config.grad_tol:
            termination = "converged_grad"
            it -= 1
            break
        accepted = False
        state = problem.snapshot()
        while lam < 1e15:
            delta = _solve_normal_equations(J, r, lam)
            if not np.all(np.isfinite(delta)):
                lam *= 4.0
                continue
            problem.apply_step(delta, offsets)
            new_parts = problem.residual_vector()
            new_cost = problem.cost(new_parts)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost, parts = new_cost, new_parts
                if rel < config.cost_tol:
                    termination = "converged_cost"
                break
            problem.restore(state)
            lam *= 4.0
        if not accepted:
            # no decrease possible at any damping: cost change is zero
            termination = "converged_cost"
            break
        if termination == "converged_cost":
            break
    return SolveReport(initial_cost=initial_cost, final_cost=cost,
                       iterations=it, termination=termination,
                       n_residuals=n_res, n_parameters=ncols)


def _solve_first_order(problem, config):
    parts = problem.residual_vector()
    cost = problem.cost(parts)
    if not np.isfinite(cost):
        raise NumericalFailure(f"initial cost is not finite ({cost})")
    initial_cost = cost
    offsets, ncols = problem.layout()
    scale = np.ones(ncols)
    for b in problem.free_blocks():
        if b.scale is not None:
            lo, hi = offsets[b.name]
            scale[lo:hi] = b.scale
    m = np.zeros(ncols)
    v = np.zeros(ncols)
    worse = 0
    prev_cost = cost
    n_res = sum(rb.dim for rb in problem.residuals)
    for it in range(1, config.first_order_iterations + 1):
        if config.iteration_callback is not None:
            if config.iteration_callback(it - 1):
                # objective changed (e.g. re-matching): reset divergence watch
                worse = 0
                prev_cost = None
        parts = problem.residual_vector()
        _, J, offsets, _ = problem.build_jacobian(parts)
        r = np.concatenate([problem._chunk_weights(rb, p) * p
                            for rb, p in zip(problem.residuals, parts)])
        g = 2.0 * (J.T @ r) * scale
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite gradient in first-order mode")
        m = config.adam_beta1 * m + (1 - config.adam_beta1) * g
        v = config.adam_beta2 * v + (1 - config.adam_beta2) * g * g
        mh = m / (1 - config.adam_beta1 ** it)
        vh = v / (1 - config.adam_beta2 ** it)
        step = -config.learning_rate * mh / (np.sqrt(vh) + config.adam_eps)
        problem.apply_step(step * scale, offsets)
        cost = problem.cost()
        if prev_cost is not None and cost > prev_cost:
            worse += 1
            # a converged run wandering in a flat valley also shows long
            # uphill streaks at negligible cost; only a streak that carries
            # the cost above its starting value is divergence
            if worse >= config.divergence_patience and cost > initial_cost:
                raise DivergenceDetected(
                    f"cost increased for {worse} consecutive iterations "
                    f"({prev_cost:.6g} -> {cost:.6g})")
        else:
            worse = 0
        prev_cost = cost
    return SolveReport(initial_cost=initial_cost, final_cost=cost,
                       iterations=config.first_order_iterations,
                       termination="first_order_complete",
                       n_residuals=n_res, n_parameters=ncols)
