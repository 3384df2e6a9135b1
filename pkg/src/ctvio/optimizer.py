"""Manifold-aware nonlinear least squares and Schur-complement marginalization.

Parameter blocks view shared storage (e.g. trajectory control point arrays):
the solver updates block values in place, so factor objects may read state
through whatever references they hold instead of receiving copies.  Rotation
blocks live on SO(3) and retract right-multiplicatively, everything else is a
plain vector.

A factor implements

    evaluate(jac: bool) -> (cost, r, entries)

where ``r`` is the whitened (and robust-scaled) residual, ``cost`` the true
robust cost contribution, and ``entries`` is a list of
``(row_index, block_key, J)`` with ``row_index`` a slice or index array into
``r`` (``None`` when jac is False).  Duplicate keys accumulate.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3

ROTATION = "rotation"
VECTOR = "vector"


class ParameterBlock:
    __slots__ = ("key", "kind", "value", "constant")

    def __init__(self, key, kind, value, constant=False):
        self.key = key
        self.kind = kind
        self.value = value  # shared storage, mutated in place
        self.constant = constant

    @property
    def dim(self):
        return 3 if self.kind == ROTATION else self.value.shape[0]

    def retract(self, delta):
        if self.kind == ROTATION:
            self.value[...] = self.value @ so3.exp(delta)
        else:
            self.value[...] = self.value + delta

    def local_diff(self, reference):
        """Right-tangent difference of the current value from ``reference``."""
        if self.kind == ROTATION:
            return so3.log(reference.T @ self.value)
        return self.value - reference


@dataclass
class SolverOptions:
    max_iterations: int = 20
    rel_cost_tol: float = 1e-8
    gradient_tol: float = 1e-10
    init_lambda: float = 1e-4
    max_retries: int = 8
    max_step_norm: float = np.inf
    lambda_up: float = 10.0
    lambda_down: float = 3.0


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "max_iterations"
    step_norms: list = field(default_factory=list)


class Problem:
    def __init__(self):
        self.blocks = {}
        self.factors = []

    def add_block(self, key, kind, value, constant=False):
        if key in self.blocks:
            return self.blocks[key]
        b = ParameterBlock(key, kind, np.asarray(value), constant)
        self.blocks[key] = b
        return b

    def add_factor(self, factor):
        for k in factor.keys:
            if k not in self.blocks:
                raise KeyError("factor references unregistered block %r" % (k,))
        self.factors.append(factor)

    def set_constant(self, key, flag=True):
        self.blocks[key].constant = flag

    # -- assembly -----------------------------------------------------------

    def _layout(self):
        offsets = {}
        col = 0
        for key, b in self.blocks.items():
            if not b.constant:
                offsets[key] = (col, b.dim)
                col += b.dim
        return offsets, col

    def cost(self):
        return sum(f.evaluate(jac=False)[0] for f in self.factors)

    def linearize(self):
        offsets, ncols = self._layout()
        results = [f.evaluate(jac=True) for f in self.factors]
        nrows = sum(len(r) for _, r, _ in results)
        r = np.zeros(nrows)
        J = np.zeros((nrows, ncols))
        row = 0
        cost = 0.0
        for fcost, fr, entries in results:
            n = len(fr)
            r[row:row + n] = fr
            for rows, key, Jb in entries:
                if key not in offsets:
                    continue  # constant block
                c0, dim = offsets[key]
                if isinstance(rows, slice):
                    rows = slice(row + (rows.start or 0),
                                 row + (rows.stop if rows.stop is not None else n))
                    J[rows, c0:c0 + dim] += Jb
                else:
                    np.add.at(J, (row + np.asarray(rows)[:, None],
                                  np.arange(c0, c0 + dim)[None, :]), Jb)
            cost += fcost
            row += n
        return cost, r, J, offsets

    def _snapshot(self):
        return {k: b.value.copy() for k, b in self.blocks.items() if not b.constant}

    def _restore(self, snap):
        for k, v in snap.items():
            self.blocks[k].value[...] = v

    def _apply_step(self, delta, offsets):
        for key, (c0, dim) in offsets.items():
            self.blocks[key].retract(delta[c0:c0 + dim])

    # -- solve --------------------------------------------------------------

    def solve(self, options=None):
        """Levenberg-Marquardt on the whitened stacked residual."""
        opt = options or SolverOptions()
        report = SolveReport()
        lam = opt.init_lambda

        cost, r, J, offsets = self.linearize()
        if not np.isfinite(cost):
            raise ValueError("non-finite residual at the initial point")
        report.initial_cost = cost
        report.final_cost = cost
        if J.shape[1] == 0:
            report.termination = "no_free_parameters"
            return report

        H = J.T @ J
        g = J.T @ r

        for it in range(opt.max_iterations):
            report.iterations = it + 1
            if np.max(np.abs(g)) < opt.gradient_tol:
                report.termination = "gradient_tolerance"
                break

            accepted = False
            diag = np.diag(H)
            # damping floor keeps zero-information directions from drifting
            floor = 1e-8 * max(1.0, float(diag.max(initial=0.0)))
            for _ in range(opt.max_retries):
                D = lam * np.maximum(diag, floor)
                try:
                    delta = np.linalg.solve(H + np.diag(D), -g)
                except np.linalg.LinAlgError:
                    delta = np.linalg.lstsq(H + np.diag(D), -g, rcond=None)[0]
                if np.linalg.norm(delta) > opt.max_step_norm:
                    lam *= opt.lambda_up
                    continue
                snap = self._snapshot()
                self._apply_step(delta, offsets)
                try:
                    new_cost = self.cost()
                except (ValueError, FloatingPointError):
                    # trial point left a factor's valid domain; reject it
                    new_cost = np.inf
                if np.isfinite(new_cost) and new_cost < cost * (1.0 - 1e-14):
                    accepted = True
                    break
                self._restore(snap)
                lam *= opt.lambda_up
            if not accepted:
                report.termination = "step_rejected"
                break

            lam = max(lam / opt.lambda_down, 1e-12)
            report.step_norms.append(float(np.linalg.norm(delta)))
            decrease = cost - new_cost
            cost = new_cost
            report.final_cost = cost
            if decrease < opt.rel_cost_tol * max(cost, 1e-30):
                report.termination = "cost_tolerance"
                break
            _, r, J, offsets = self.linearize()
            H = J.T @ J
            g = J.T @ r

        report.final_cost = cost
        return report


# ---------------------------------------------------------------------------
# prior factor and marginalization
# ---------------------------------------------------------------------------

class PriorFactor:
    """Linearized Gaussian prior r(x) = sqrt_info * (x [-] x0) + offset.

    [-] is the right-tangent difference for rotation blocks and plain
    subtraction otherwise.  The linearization point is frozen at
    marginalization time.
    """

    def __init__(self, keys, kinds, lin_points, sqrt_info, offset, blocks):
        self.keys = list(keys)
        self.kinds = list(kinds)
        self.lin_points = [np.array(v) for v in lin_points]
        self.sqrt_info = sqrt_info
        self.offset = offset
        self._blocks = blocks  # live ParameterBlock references
        self._dims = [3 if k == ROTATION else len(np.ravel(v))
                      for k, v in zip(self.kinds, self.lin_points)]

    @property
    def dim(self):
        return len(self.offset)

    def rebind(self, blocks_by_key):
        """Point the factor at the parameter blocks of a new problem."""
        self._blocks = [blocks_by_key[k] for k in self.keys]
        return self

    def evaluate(self, jac=True):
        deltas = []
        for blk, kind, x0 in zip(self._blocks, self.kinds, self.lin_points):
            if kind == ROTATION:
                deltas.append(so3.log(x0.T @ blk.value))
            else:
                deltas.append(blk.value - x0)
        delta = np.concatenate(deltas) if deltas else np.zeros(0)
        r = self.sqrt_info @ delta + self.offset
        cost = float(r @ r)
        if not jac:
            return cost, r, None
        entries = []
        col = 0
        for key, dim, kind, x0, blk in zip(self.keys, self._dims, self.kinds,
                                           self.lin_points, self._blocks):
            Jb = self.sqrt_info[:, col:col + dim]
            if kind == ROTATION:
                # d Log(x0^T x exp(d)) / dd = Jr_inv(delta); first-order lift
                dloc = so3.log(x0.T @ blk.value)
                Jb = Jb @ so3.right_jacobian_inv(dloc)
            entries.append((slice(0, self.dim), key, Jb))
            col += dim
        return cost, r, entries


EIGEN_FLOOR = 1e-8


def _sqrt_from_information(H):
    """Square root A with A^T A = H via eigendecomposition, small modes cut."""
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    # relative cutoff: near-null directions carry gradient noise that would
    # otherwise be amplified by w^(-1/2) in the prior offset
    cut = max(EIGEN_FLOOR, 1e-12 * float(w.max(initial=0.0)))
    keep = w > cut
    return (np.sqrt(w[keep])[:, None] * V[:, keep].T), (w, V, keep)


def marginalize_schur(problem, marg_keys):
    """Marginalize ``marg_keys`` out of ``problem`` by Schur complement.

    The problem is linearized at the current values; the result is a
    PriorFactor over the remaining free blocks.  Rank-deficient
    marginal blocks are handled by an eigenvalue-thresholded pseudo-inverse.
    """
    marg_keys = [k for k in marg_keys]
    marg_set = set(marg_keys)
    for k in marg_keys:
        if k not in problem.blocks:
            raise KeyError("unknown block %r" % (k,))
        if problem.blocks[k].constant:
            raise ValueError("cannot marginalize constant block %r" % (k,))

    _, r, J, offsets = problem.linearize()
    H = J.T @ J
    g = J.T @ r

    m_idx, k_idx, keep_keys = [], [], []
    for key, (c0, dim) in offsets.items():
        cols = list(range(c0, c0 + dim))
        if key in marg_set:
            m_idx.extend(cols)
        else:
            k_idx.extend(cols)
            keep_keys.append(key)
    m_idx = np.array(m_idx, dtype=int)
    k_idx = np.array(k_idx, dtype=int)

    H_mm = H[np.ix_(m_idx, m_idx)]
    H_km = H[np.ix_(k_idx, m_idx)]
    H_kk = H[np.ix_(k_idx, k_idx)]
    g_m = g[m_idx]
    g_k = g[k_idx]

    # eigenvalue-thresholded pseudo-inverse of the marginal block
    w, V = np.linalg.eigh(0.5 * (H_mm + H_mm.T))
    inv_w = np.where(w > EIGEN_FLOOR, 1.0 / np.where(w > EIGEN_FLOOR, w, 1.0), 0.0)
    H_mm_pinv = (V * inv_w[None, :]) @ V.T

    H_keep = H_kk - H_km @ H_mm_pinv @ H_km.T
    g_keep = g_k - H_km @ H_mm_pinv @ g_m

    A, (w2, V2, keep2) = _sqrt_from_information(H_keep)
    # offset e solves A^T e = g_keep in the retained eigenspace
    e = (V2[:, keep2].T @ g_keep) / np.sqrt(w2[keep2])

    kinds = [problem.blocks[k].kind for k in keep_keys]
    lin_points = [problem.blocks[k].value.copy() for k in keep_keys]
    blocks = [problem.blocks[k] for k in keep_keys]
    return PriorFactor(keep_keys, kinds, lin_points, A, e, blocks)
