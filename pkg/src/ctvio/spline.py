"""Uniform cumulative cubic B-spline trajectory on SO(3) x R^3.

The trajectory is parameterized by compound control points (R_m, p_m) on a
uniform knot grid.  On segment i (t in [t_i, t_{i+1})) the pose is

    R(u) = R_i * prod_j Exp(zeta_j(u) * Log(R_{i+j-1}^T R_{i+j}))
    p(u) = p_i + sum_j zeta_j(u) * (p_{i+j} - p_{i+j-1})

with u = (t - t0)/dt - i and cumulative blending functions zeta_j.  All
evaluation (pose, body angular velocity, world velocity/acceleration, and the
analytic Jacobians with respect to the four contributing control points) runs
through a batched path so that the estimator can linearize many residuals per
call.

Control-point rotation perturbations are right multiplicative,
R_m <- R_m Exp(delta); output rotation tangents follow the same convention.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3

ORDER = 4  # cubic


def _basis_matrix():
    """Standard uniform cubic B-spline basis matrix M (p(u) = U M P)."""
    return np.array([
        [1.0, 4.0, 1.0, 0.0],
        [-3.0, 0.0, 3.0, 0.0],
        [3.0, -6.0, 3.0, 0.0],
        [-1.0, 3.0, -3.0, 1.0],
    ]) / 6.0


def _cumulative_basis_matrix():
    # column j of Mtilde is the sum of columns j.. of M
    M = _basis_matrix()
    return np.cumsum(M[:, ::-1], axis=1)[:, ::-1]


CUM_BASIS = _cumulative_basis_matrix()


def blending(u):
    """Cumulative blending values and their first/second u-derivatives.

    Accepts a scalar or an (N,) array; returns arrays with trailing axis 4.
    zeta[..., 0] is identically 1.
    """
    u = np.asarray(u, dtype=float)
    U = np.stack([np.ones_like(u), u, u ** 2, u ** 3], axis=-1)
    dU = np.stack([np.zeros_like(u), np.ones_like(u), 2 * u, 3 * u ** 2], axis=-1)
    ddU = np.stack([np.zeros_like(u), np.zeros_like(u),
                    2 * np.ones_like(u), 6 * u], axis=-1)
    return U @ CUM_BASIS, dU @ CUM_BASIS, ddU @ CUM_BASIS


class DomainError(ValueError):
    pass


@dataclass
class KnotGrid:
    """Uniform knot grid: knot m sits at t0 + m*dt, one control point per knot."""
    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("knot spacing must be positive")
        if self.count < ORDER:
            raise ValueError("cubic spline needs at least 4 control points")

    @property
    def t_max(self):
        # last supported instant; segment count-4 is the last evaluable one
        return self.t0 + (self.count - 3) * self.dt

    def locate(self, t):
        """Segment index and normalized time for a scalar query."""
        i, u = self.locate_batch(np.array([t]))
        return int(i[0]), float(u[0])

    def locate_batch(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t0 - 1e-12) or np.any(t > self.t_max + 1e-12):
            bad = t[(t < self.t0 - 1e-12) | (t > self.t_max + 1e-12)][0]
            raise DomainError(
                "time %.9f outside supported interval [%.9f, %.9f]"
                % (bad, self.t0, self.t_max))
        s = (t - self.t0) / self.dt
        i = np.floor(s).astype(int)
        # the right end is closed: treat t_max as u -> 1 of the last segment
        i = np.clip(i, 0, self.count - ORDER)
        return i, s - i


@dataclass
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.p)

    def __matmul__(self, other):
        return RigidTransform(self.R @ other.R, self.R @ other.p + self.p)


class SplineEval:
    """Batched evaluation result at query times ``t`` (all arrays lead with N).

    Attributes
    ----------
    seg : (N,) segment indices; the contributing control points are
        seg .. seg+3.
    R, p : pose.
    omega : body angular velocity.
    v, a : world velocity / acceleration.
    Rdot : time derivative of R.
    J_rot : (N, 4, 3, 3) right-tangent Jacobians of R wrt each rotational CP.
    c_pos, c_vel, c_acc : (N, 4) coefficients of p, v, a in the positional CPs.
    J_omega : (N, 4, 3, 3) Jacobians of omega wrt rotational CPs (optional).
    """

    __slots__ = ("t", "seg", "u", "R", "p", "omega", "v", "a", "Rdot",
                 "J_rot", "c_pos", "c_vel", "c_acc", "J_omega")


class Trajectory:
    """Spline trajectory plus the fixed body-to-camera extrinsic.

    Readers may share a Trajectory concurrently; mutation (extending,
    writing control-point values after a solver step) needs exclusive access.
    """

    def __init__(self, grid, Rs, ps, extrinsic=None):
        Rs = np.asarray(Rs, dtype=float)
        ps = np.asarray(ps, dtype=float)
        if len(Rs) != grid.count or len(ps) != grid.count:
            raise ValueError("control point count does not match knot grid")
        self.grid = grid
        self.Rs = Rs.copy()
        self.ps = ps.copy()
        self.extrinsic = extrinsic if extrinsic is not None else RigidTransform()

    @classmethod
    def constant(cls, t0, dt, count, R=None, p=None, extrinsic=None):
        R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        p = np.zeros(3) if p is None else np.asarray(p, dtype=float)
        return cls(KnotGrid(t0, dt, count),
                   np.repeat(R[None], count, axis=0),
                   np.repeat(p[None], count, axis=0), extrinsic)

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, t, jacobians=False, omega_jacobians=False):
        """Evaluate the spline at times ``t`` (scalar or array) in batch."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        seg, u = self.grid.locate_batch(t)
        zeta, dzeta, ddzeta = blending(u)
        inv_dt = 1.0 / self.grid.dt

        idx = seg[:, None] + np.arange(ORDER)[None, :]       # (N, 4)
        Rcp = self.Rs[idx]                                   # (N, 4, 3, 3)
        pcp = self.ps[idx]                                   # (N, 4, 3)

        # segment increments d_j = Log(R_{i+j-1}^T R_{i+j}), j = 1..3
        n = len(t)
        rel = np.einsum("njab,njac->njbc", Rcp[:, :3], Rcp[:, 1:])
        d = so3.log_batch(rel.reshape(-1, 3, 3)).reshape(n, 3, 3)

        zd = zeta[:, 1:, None] * d                            # (N, 3, 3)
        A = so3.exp_batch(zd.reshape(-1, 3)).reshape(n, 3, 3, 3)

        # suffix products B_j = A_{j+1} .. A_3 (B_3 = I)
        B3 = np.broadcast_to(np.eye(3), (n, 3, 3))
        B2 = A[:, 2]
        B1 = A[:, 1] @ B2
        B0 = A[:, 0] @ B1

        out = SplineEval()
        out.t = t
        out.seg = seg
        out.u = u
        out.R = Rcp[:, 0] @ B0
        out.p = pcp[:, 0] + np.einsum("nj,njk->nk", zeta[:, 1:],
                                      pcp[:, 1:] - pcp[:, :3])

        dz = dzeta[:, 1:] * inv_dt                            # (N, 3)
        ddz = ddzeta[:, 1:] * inv_dt ** 2
        # omega = sum_j dz_j * B_j^T d_j
        Btd = np.stack([
            np.einsum("nba,nb->na", B1, d[:, 0]),
            np.einsum("nba,nb->na", B2, d[:, 1]),
            d[:, 2],
        ], axis=1)                                            # (N, 3, 3)
        out.omega = np.einsum("nj,nja->na", dz, Btd)
        out.v = np.einsum("nj,njk->nk", dz, pcp[:, 1:] - pcp[:, :3])
        out.a = np.einsum("nj,njk->nk", ddz, pcp[:, 1:] - pcp[:, :3])
        out.Rdot = out.R @ so3.skew_batch(out.omega)

        # positional coefficients: p = sum_m c_pos[m] * p_{i+m}
        def diff_coeffs(z):
            c = np.zeros((n, 4))
            c[:, 0] = -z[:, 0]
            c[:, 1] = z[:, 0] - z[:, 1]
            c[:, 2] = z[:, 1] - z[:, 2]
            c[:, 3] = z[:, 2]
            return c

        out.c_pos = diff_coeffs(zeta[:, 1:])
        out.c_pos[:, 0] += 1.0
        out.c_vel = diff_coeffs(dz)
        out.c_acc = diff_coeffs(ddz)

        if not (jacobians or omega_jacobians):
            out.J_rot = None
            out.J_omega = None
            return out

        flat = lambda x: x.reshape(-1, 3)
        Jr_zd = so3.right_jacobian_batch(flat(zd)).reshape(n, 3, 3, 3)
        Jrinv_d = so3.right_jacobian_inv_batch(flat(d)).reshape(n, 3, 3, 3)
        Expd = so3.exp_batch(flat(d)).reshape(n, 3, 3, 3)

        C = np.stack([np.swapaxes(B1, 1, 2), np.swapaxes(B2, 1, 2), B3], axis=1)

        if jacobians:
            # dR wrt CP n (right tangents both sides):
            #   [n=0]  B0^T
            #   [n>=1] C_n  zeta_n Jr(zeta_n d_n) Jrinv(d_n)
            #   [n<=2] C_{n+1} zeta_{n+1} Jr(zeta_{n+1} d_{n+1})
            #          * (-Jrinv(d_{n+1}) Exp(d_{n+1})^T)
            P = zeta[:, 1:, None, None] * (C @ Jr_zd)         # (N, 3, 3, 3)
            right = P @ Jrinv_d
            left = -right @ np.swapaxes(Expd, 2, 3)
            J = np.zeros((n, 4, 3, 3))
            J[:, 0] = np.swapaxes(B0, 1, 2) + left[:, 0]
            J[:, 1] = right[:, 0] + left[:, 1]
            J[:, 2] = right[:, 1] + left[:, 2]
            J[:, 3] = right[:, 2]
            out.J_rot = J
        else:
            out.J_rot = None

        if omega_jacobians:
            # W_m = d omega / d d_m
            #     = B_m^T [dz_m I + skew(sum_{j<m} dz_j G_{jm}^T d_j)
            #              * zeta_m Jr(zeta_m d_m)]
            eye = np.broadcast_to(np.eye(3), (n, 3, 3))
            W1 = dz[:, 0, None, None] * C[:, 0]
            s2 = dz[:, 0, None] * np.einsum("nba,nb->na", A[:, 1], d[:, 0])
            W2 = C[:, 1] @ (dz[:, 1, None, None] * eye
                            + so3.skew_batch(s2)
                            @ (zeta[:, 2, None, None] * Jr_zd[:, 1]))
            s3 = dz[:, 0, None] * Btd[:, 0] + dz[:, 1, None] * Btd[:, 1]
            W3 = (dz[:, 2, None, None] * eye
                  + so3.skew_batch(s3) @ (zeta[:, 3, None, None] * Jr_zd[:, 2]))
            W = np.stack([W1, W2, W3], axis=1)
            right = W @ Jrinv_d
            left = -right @ np.swapaxes(Expd, 2, 3)
            Jw = np.zeros((n, 4, 3, 3))
            Jw[:, 0] = left[:, 0]
            Jw[:, 1] = right[:, 0] + left[:, 1]
            Jw[:, 2] = right[:, 1] + left[:, 2]
            Jw[:, 3] = right[:, 2]
            out.J_omega = Jw
        else:
            out.J_omega = None
        return out

    # convenience scalar accessors ------------------------------------------

    def eval_pose(self, t):
        e = self.evaluate(t)
        return e.R[0], e.p[0]

    def body_angular_velocity(self, t):
        return self.evaluate(t).omega[0]

    def world_velocity_acceleration(self, t):
        e = self.evaluate(t)
        return e.v[0], e.a[0]

    def rotation_time_derivative(self, t):
        return self.evaluate(t).Rdot[0]

    def camera_pose(self, t):
        """World-from-camera pose through the fixed extrinsic."""
        R, p = self.eval_pose(t)
        ex = self.extrinsic
        return R @ ex.R, R @ ex.p + p

    # -- structure ----------------------------------------------------------

    def active_span(self, t_a, t_b):
        """Smallest contiguous CP index span influencing any t in [t_a, t_b]."""
        if t_b < t_a:
            raise ValueError("empty interval")
        ia, _ = self.grid.locate(t_a)
        ib, _ = self.grid.locate(t_b)
        return ia, ib + 3

    # -- extension ----------------------------------------------------------

    def extend_with_prediction(self, t_end, imu_samples, bias, gravity):
        """Append control points (IMU dead reckoning) until t_end is covered.

        imu_samples is an (K, 7) array of rows (t, wx, wy, wz, ax, ay, az)
        covering [current t_max, t_end]; the last sample is held constant for
        knot times beyond the buffer.
        """
        if t_end <= self.grid.t_max:
            return self
        imu = np.asarray(imu_samples, dtype=float)
        if imu.size == 0 or imu[-1, 0] < t_end - 1e-9:
            have = imu[-1, 0] if imu.size else -np.inf
            raise ValueError(
                "IMU buffer ends at %.6f but prediction needs coverage to %.6f"
                % (have, t_end))

        # dead-reckoning state at the current end of the domain
        t_cur = self.grid.t_max
        e = self.evaluate(t_cur)
        R, p, v = e.R[0], e.p[0], e.v[0]
        bg, ba = bias

        def step(R, p, v, t0, t1):
            # midpoint integration over [t0, t1] on the (held) sample grid
            ts = imu[:, 0]
            lo = np.searchsorted(ts, t0, side="right")
            hi = np.searchsorted(ts, t1, side="left")
            knots = np.concatenate(([t0], ts[lo:hi], [t1]))
            for ta, tb in zip(knots[:-1], knots[1:]):
                if tb - ta <= 0:
                    continue
                sa = _sample_at(imu, ta)
                sb = _sample_at(imu, tb)
                dt = tb - ta
                w_mid = 0.5 * (sa[0] + sb[0]) - bg
                R_new = R @ so3.exp(w_mid * dt)
                a_w = 0.5 * (R @ (sa[1] - ba) + R_new @ (sb[1] - ba)) - gravity
                p = p + v * dt + 0.5 * a_w * dt * dt
                v = v + a_w * dt
                R = R_new
            return R, p, v

        while self.grid.t_max < t_end - 1e-12:
            # CP index `count` influences the curve around its Greville time
            # t0 + (count - 1) dt; initialize with the predicted pose there
            knot_t = self.grid.t0 + (self.grid.count - 1) * self.grid.dt
            R, p, v = step(R, p, v, t_cur, knot_t)
            t_cur = knot_t
            self.Rs = np.concatenate([self.Rs, R[None]], axis=0)
            self.ps = np.concatenate([self.ps, p[None]], axis=0)
            self.grid.count += 1
        return self


def _sample_at(imu, t):
    """Piecewise-linear interpolation of an IMU array, held beyond the ends."""
    ts = imu[:, 0]
    if t <= ts[0]:
        row = imu[0]
        return row[1:4], row[4:7]
    if t >= ts[-1]:
        row = imu[-1]
        return row[1:4], row[4:7]
    j = np.searchsorted(ts, t, side="right")
    w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
    row = (1 - w) * imu[j - 1] + w * imu[j]
    return row[1:4], row[4:7]
