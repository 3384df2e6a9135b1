"""Residuals and analytic Jacobians for the sliding-window cost.

Factor families: rolling-shutter visual reprojection (with the line delay in
the differentiation chain), per-sample IMU factors on the spline derivatives,
bias random walk, IMU preintegration between keyframes, and pose anchors for
fitting a spline to reference poses.  The marginalization prior lives in the
optimizer module.

All factors read their state through shared storage (trajectory control point
arrays, bias / landmark / line-delay vectors) which the solver mutates in
place; evaluation itself does not modify anything.
"""

import numpy as np

from . import so3
from .sensors import CheiralityError


# parameter block keys ------------------------------------------------------

def rcp_key(m):
    return ("rcp", int(m))


def pcp_key(m):
    return ("pcp", int(m))


def lm_key(fid):
    return ("lm", int(fid))


def bg_key(uid):
    return ("bg", int(uid))


def ba_key(uid):
    return ("ba", int(uid))


TR_KEY = ("tr",)

MIN_VISUAL_DEPTH = 1e-6


def _cp_keys(cp_range):
    lo, hi = cp_range
    return ([rcp_key(m) for m in range(lo, hi + 1)]
            + [pcp_key(m) for m in range(lo, hi + 1)])


def _rows(idx, sub, width):
    """Residual row indices: components ``sub`` of ``width``-wide blocks."""
    return (width * np.asarray(idx)[:, None]
            + np.asarray(sub)[None, :]).ravel()


# ---------------------------------------------------------------------------
# rolling-shutter visual factor
# ---------------------------------------------------------------------------

class VisualFactorSet:
    """All reprojection residuals of a window, evaluated in one batch.

    One 2D residual per (landmark, observation) pair: the landmark is
    back-projected at its anchor observation (row exposed at
    t_a = t_i + v_a * t_r), transferred through the world frame to the camera
    pose at the observing row time t_b = t_j + v_b * t_r, and compared on the
    normalized image plane.  Both row times move with the line delay, so the
    factor carries an analytic d r / d t_r that combines the trajectory time
    derivatives at t_a and t_b.

    Observations whose transferred point falls behind the camera are dropped
    from the cost for that evaluation (zero residual and Jacobian) instead of
    raising, so the solver can back out of a bad step.
    """

    def __init__(self, traj, intrinsics, anchor_t, anchor_pix, obs_t, obs_pix,
                 lam_ids, lam_store, lam_slot, tr_store, cp_range,
                 pixel_sigma=1.0, huber=1.0, estimate_tr=True):
        self.traj = traj
        self.intr = intrinsics
        self.anchor_t = np.asarray(anchor_t, dtype=float)
        self.anchor_pix = np.atleast_2d(np.asarray(anchor_pix, dtype=float))
        self.obs_t = np.asarray(obs_t, dtype=float)
        self.obs_pix = np.atleast_2d(np.asarray(obs_pix, dtype=float))
        self.lam_ids = [int(f) for f in lam_ids]
        self.lam_slot = np.asarray(lam_slot, dtype=int)
        self.lam_store = lam_store
        self.tr_store = tr_store
        self.huber = huber
        self.n = len(self.anchor_t)

        # normalized anchor / observed coordinates are fixed per observation
        self.anchor_n = np.stack([
            (self.anchor_pix[:, 0] - intrinsics.cx) / intrinsics.fx,
            (self.anchor_pix[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(self.n)], axis=1)
        self.obs_n = np.stack([
            (self.obs_pix[:, 0] - intrinsics.cx) / intrinsics.fx,
            (self.obs_pix[:, 1] - intrinsics.cy) / intrinsics.fy], axis=1)
        self.whiten = np.array([intrinsics.fx / pixel_sigma,
                                intrinsics.fy / pixel_sigma])

        self.keys = _cp_keys(cp_range) + [lm_key(f)
                                          for f in sorted(set(self.lam_ids))]
        self.estimate_tr = estimate_tr
        if estimate_tr:
            self.keys.append(TR_KEY)

    def evaluate(self, jac=True):
        tr = float(self.tr_store[0])
        t_a = self.anchor_t + self.anchor_pix[:, 1] * tr
        t_b = self.obs_t + self.obs_pix[:, 1] * tr
        ea = self.traj.evaluate(t_a, jacobians=jac)
        eb = self.traj.evaluate(t_b, jacobians=jac)

        lam = self.lam_store[self.lam_slot]
        ex = self.traj.extrinsic
        Rbc, pbc = ex.R, ex.p

        p_cam_a = self.anchor_n / lam[:, None]
        p_m = p_cam_a @ Rbc.T + pbc                       # body frame at t_a
        P_w = np.einsum("nab,nb->na", ea.R, p_m) + ea.p   # world
        q = np.einsum("nba,nb->na", eb.R, P_w - eb.p)     # body frame at t_b
        p_b = (q - pbc) @ Rbc                             # camera frame at t_b

        z = p_b[:, 2]
        valid = z > MIN_VISUAL_DEPTH
        zs = np.where(valid, z, 1.0)
        r = p_b[:, :2] / zs[:, None] - self.obs_n
        r = r * self.whiten[None, :]
        r[~valid] = 0.0

        # Huber on the whitened 2-vector norm
        norms = np.linalg.norm(r, axis=1)
        w = np.ones(self.n)
        out = norms > self.huber
        w[out] = self.huber / norms[out]
        cost = float(np.sum(np.where(out,
                                     self.huber * (2 * norms - self.huber),
                                     norms ** 2)[valid]))
        sw = np.sqrt(w)
        sw[~valid] = 0.0
        r = r * sw[:, None]
        if not jac:
            return cost, r.ravel(), None

        # projection chain d(p_b[:2]/z)/dp_b, whitened and robust-scaled
        iz = 1.0 / zs
        P = np.zeros((self.n, 2, 3))
        P[:, 0, 0] = iz
        P[:, 1, 1] = iz
        P[:, 0, 2] = -p_b[:, 0] * iz * iz
        P[:, 1, 2] = -p_b[:, 1] * iz * iz
        P *= (self.whiten[None, :, None] * sw[:, None, None])

        M = np.einsum("ab,ncb->nac", Rbc.T, eb.R)         # Rbc^T Rb^T
        MRa = M @ ea.R
        neg_MRa_skew = -MRa @ so3.skew_batch(p_m)
        skew_q = so3.skew_batch(q)

        entries = []

        def scatter(cp_idx, J_full, key_fn):
            for m in np.unique(cp_idx):
                sel = np.nonzero(cp_idx == m)[0]
                rows = _rows(sel, [0, 1], 2)
                entries.append((rows, key_fn(m), J_full[sel].reshape(-1, 3)))

        for m in range(4):
            scatter(ea.seg + m, P @ (neg_MRa_skew @ ea.J_rot[:, m]), rcp_key)
            scatter(ea.seg + m, P @ (M * ea.c_pos[:, m, None, None]), pcp_key)
            Jb = np.einsum("ab,nbc->nac", Rbc.T, skew_q @ eb.J_rot[:, m])
            scatter(eb.seg + m, P @ Jb, rcp_key)
            scatter(eb.seg + m, P @ (-M * eb.c_pos[:, m, None, None]), pcp_key)

        # inverse depth
        dpb_dlam = np.einsum("nab,nb->na", MRa @ Rbc,
                             -self.anchor_n / (lam ** 2)[:, None])
        J_lam = np.einsum("nab,nb->na", P, dpb_dlam)
        for slot in np.unique(self.lam_slot):
            sel = np.nonzero(self.lam_slot == slot)[0]
            entries.append((_rows(sel, [0, 1], 2), lm_key(self.lam_ids[sel[0]]),
                            J_lam[sel].reshape(-1, 1)))

        if self.estimate_tr:
            J_tr = self.tr_jacobian(ea, eb, p_m, P_w, P)
            entries.append((np.arange(2 * self.n), TR_KEY,
                            J_tr.reshape(-1, 1)))
        return cost, r.ravel(), entries

    def tr_jacobian(self, ea, eb, p_m, P_w, P):
        """d r / d t_r = (dr/dt_a) v_a + (dr/dt_b) v_b (whitened, scaled)."""
        dta, dtb = self.row_time_jacobians(ea, eb, p_m, P_w)
        dpb = (dta * self.anchor_pix[:, 1, None]
               + dtb * self.obs_pix[:, 1, None])
        return np.einsum("nab,nb->na", P, dpb)

    def row_time_jacobians(self, ea, eb, p_m, P_w):
        """d p_b / d t_a and d p_b / d t_b (camera point wrt the row times)."""
        Rbc = self.traj.extrinsic.R
        dq_dta = np.einsum("ab,ncb,nc->na", Rbc.T, eb.R,
                           np.einsum("nab,nb->na", ea.Rdot, p_m) + ea.v)
        dq_dtb = np.einsum("ab,nb->na", Rbc.T,
                           np.einsum("nba,nb->na", eb.Rdot, P_w - eb.p)
                           - np.einsum("nba,nb->na", eb.R, eb.v))
        return dq_dta, dq_dtb


def make_visual_pair(traj, intrinsics, inv_depth, anchor_t, anchor_pix,
                     obs_t, obs_pix, tr, pixel_sigma=1.0, huber=np.inf,
                     cp_range=None, estimate_tr=True):
    """Single-observation VisualFactorSet for tests and spot checks.

    Returns (factor, lam_store, tr_store); the stores hold the inverse depth
    and line delay so the caller can register them as parameter blocks.
    """
    lam_store = np.array([inv_depth], dtype=float)
    tr_store = np.array([tr], dtype=float)
    if cp_range is None:
        cp_range = (0, traj.grid.count - 1)
    f = VisualFactorSet(traj, intrinsics,
                        [anchor_t], [anchor_pix], [obs_t], [obs_pix],
                        [0], lam_store, [0], tr_store, cp_range,
                        pixel_sigma=pixel_sigma, huber=huber,
                        estimate_tr=estimate_tr)
    return f, lam_store, tr_store


def reproject(traj, intrinsics, inv_depth, anchor_t, anchor_pix, obs_t,
              obs_row, tr):
    """Transfer the anchored landmark into the frame at obs_t and project.

    ``obs_row`` fixes the row time of the target frame.  Raises
    CheiralityError if the point lands at or behind the target camera plane.
    """
    ex = traj.extrinsic
    lam = float(inv_depth)
    anchor_pix = np.asarray(anchor_pix, dtype=float)
    t_a = anchor_t + anchor_pix[1] * tr
    t_b = obs_t + obs_row * tr
    Ra, pa = traj.eval_pose(t_a)
    Rb, pb = traj.eval_pose(t_b)
    p_cam = intrinsics.back_project(anchor_pix) / lam
    P_w = Ra @ (ex.R @ p_cam + ex.p) + pa
    p_b = ex.R.T @ (Rb.T @ (P_w - pb) - ex.p)
    if p_b[2] <= MIN_VISUAL_DEPTH:
        raise CheiralityError("transferred point depth %.3g" % p_b[2])
    return intrinsics.project(p_b)


# ---------------------------------------------------------------------------
# raw IMU factor
# ---------------------------------------------------------------------------

class ImuFactorSet:
    """Per-sample gyro / accelerometer residuals on the spline derivatives.

        r = [ (omega_body(t) - w_m + b_g) / sigma_g
              (R^T(t) (a_world(t) + g) - a_m + b_a) / sigma_a ]

    bias_uid assigns each sample to the bias state of its owning interval;
    bias_store maps uid -> (6,) array [b_g, b_a] shared with the parameter
    blocks.
    """

    def __init__(self, traj, times, gyro, accel, bias_uid, bias_store,
                 gravity, gyro_sigma, accel_sigma, cp_range):
        self.traj = traj
        self.times = np.atleast_1d(np.asarray(times, dtype=float))
        self.gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
        self.accel = np.atleast_2d(np.asarray(accel, dtype=float))
        self._uid = np.atleast_1d(np.asarray(bias_uid))
        self.bias_store = bias_store
        self.gravity = np.asarray(gravity, dtype=float)
        self.wg = 1.0 / gyro_sigma
        self.wa = 1.0 / accel_sigma
        self.n = len(self.times)
        uids = sorted(set(int(u) for u in self._uid))
        self.keys = (_cp_keys(cp_range)
                     + [bg_key(u) for u in uids] + [ba_key(u) for u in uids])

    def evaluate(self, jac=True):
        e = self.traj.evaluate(self.times, jacobians=jac, omega_jacobians=jac)
        bg = np.zeros((self.n, 3))
        ba = np.zeros((self.n, 3))
        for uid in np.unique(self._uid):
            sel = self._uid == uid
            b = self.bias_store[int(uid)]
            bg[sel] = b[:3]
            ba[sel] = b[3:]
        spec_f = np.einsum("nba,nb->na", e.R, e.a + self.gravity)
        r = np.zeros((self.n, 6))
        r[:, :3] = (e.omega - self.gyro + bg) * self.wg
        r[:, 3:] = (spec_f - self.accel + ba) * self.wa
        cost = float(np.sum(r * r))
        if not jac:
            return cost, r.ravel(), None

        entries = []
        skew_sf = so3.skew_batch(spec_f)
        RT = np.swapaxes(e.R, 1, 2)
        g_sub = np.arange(3)
        a_sub = np.arange(3, 6)
        for m in range(4):
            Jg = e.J_omega[:, m] * self.wg
            Jar = (skew_sf @ e.J_rot[:, m]) * self.wa
            Jap = RT * (e.c_acc[:, m, None, None] * self.wa)
            cp_idx = e.seg + m
            for cp in np.unique(cp_idx):
                sel = np.nonzero(cp_idx == cp)[0]
                rg = _rows(sel, g_sub, 6)
                ra = _rows(sel, a_sub, 6)
                entries.append((rg, rcp_key(cp), Jg[sel].reshape(-1, 3)))
                entries.append((ra, rcp_key(cp), Jar[sel].reshape(-1, 3)))
                entries.append((ra, pcp_key(cp), Jap[sel].reshape(-1, 3)))
        for uid in np.unique(self._uid):
            sel = np.nonzero(self._uid == uid)[0]
            eye = np.tile(np.eye(3), (len(sel), 1))
            entries.append((_rows(sel, g_sub, 6), bg_key(uid), eye * self.wg))
            entries.append((_rows(sel, a_sub, 6), ba_key(uid), eye * self.wa))
        return cost, r.ravel(), entries


# ---------------------------------------------------------------------------
# bias random walk
# ---------------------------------------------------------------------------

class BiasFactor:
    """Random-walk constraint between consecutive bias states.

    r = sqrt_info * ([b_g, b_a]_j - [b_g, b_a]_i), whitened with the walk
    covariance accumulated over the interval duration.
    """

    def __init__(self, uid_i, uid_j, bias_store, noise_model, duration):
        self.uid_i = int(uid_i)
        self.uid_j = int(uid_j)
        self.bias_store = bias_store
        cov = noise_model.bias_walk_cov(duration)
        self.sqrt_info = np.diag(1.0 / np.sqrt(np.diag(cov)))
        self.keys = [bg_key(uid_i), ba_key(uid_i),
                     bg_key(uid_j), ba_key(uid_j)]

    def evaluate(self, jac=True):
        d = self.bias_store[self.uid_j] - self.bias_store[self.uid_i]
        r = self.sqrt_info @ d
        cost = float(r @ r)
        if not jac:
            return cost, r, None
        S = self.sqrt_info
        entries = [(slice(0, 6), bg_key(self.uid_i), -S[:, :3]),
                   (slice(0, 6), ba_key(self.uid_i), -S[:, 3:]),
                   (slice(0, 6), bg_key(self.uid_j), S[:, :3]),
                   (slice(0, 6), ba_key(self.uid_j), S[:, 3:])]
        return cost, r, entries


# ---------------------------------------------------------------------------
# IMU preintegration
# ---------------------------------------------------------------------------

class Preintegration:
    """Midpoint preintegration of gyro / accelerometer samples.

    Accumulates the relative-motion increments in the frame of the interval
    start: position increment ``alpha``, velocity increment ``beta``, and
    rotation ``R_delta``, together with the 9x9 covariance of
    [d_alpha, d_theta, d_beta] and the first-order Jacobians with respect to
    the bias values used during integration.
    """

    def __init__(self, bias_gyro, bias_accel, gyro_sigma, accel_sigma):
        self.bg = np.array(bias_gyro, dtype=float)
        self.ba = np.array(bias_accel, dtype=float)
        self.sg = float(gyro_sigma)   # continuous noise density
        self.sa = float(accel_sigma)
        self.dt_total = 0.0
        self.alpha = np.zeros(3)
        self.beta = np.zeros(3)
        self.R_delta = np.eye(3)
        self.cov = np.zeros((9, 9))
        self.J_alpha_bg = np.zeros((3, 3))
        self.J_alpha_ba = np.zeros((3, 3))
        self.J_beta_bg = np.zeros((3, 3))
        self.J_beta_ba = np.zeros((3, 3))
        self.J_R_bg = np.zeros((3, 3))

    def step(self, dt, w0, a0, w1, a1):
        """Advance by one midpoint step between two consecutive samples."""
        if dt <= 0:
            return
        w_mid = 0.5 * (np.asarray(w0) + np.asarray(w1)) - self.bg
        a0c = np.asarray(a0, dtype=float) - self.ba
        a1c = np.asarray(a1, dtype=float) - self.ba
        Rk = self.R_delta
        E = so3.exp(w_mid * dt)
        Jr = so3.right_jacobian(w_mid * dt)
        Rk1 = Rk @ E

        a_mid = 0.5 * (Rk @ a0c + Rk1 @ a1c)

        # error-state transition for [d_alpha, d_theta, d_beta]
        dA_dth = -0.5 * (Rk @ so3.skew(a0c) + Rk1 @ so3.skew(a1c) @ E.T)
        dA_dw = -0.5 * Rk1 @ so3.skew(a1c) @ Jr * dt
        dA_da = 0.5 * (Rk + Rk1)

        F = np.eye(9)
        F[0:3, 3:6] = 0.5 * dt * dt * dA_dth
        F[0:3, 6:9] = dt * np.eye(3)
        F[3:6, 3:6] = E.T
        F[6:9, 3:6] = dt * dA_dth

        G = np.zeros((9, 6))
        G[0:3, 0:3] = 0.5 * dt * dt * dA_dw
        G[0:3, 3:6] = 0.5 * dt * dt * dA_da
        G[3:6, 0:3] = Jr * dt
        G[6:9, 0:3] = dt * dA_dw
        G[6:9, 3:6] = dt * dA_da
        # continuous densities: per-step discrete variance is density^2 / dt,
        # which makes the accumulated covariance independent of the step size
        Q = np.diag([self.sg ** 2 / dt] * 3 + [self.sa ** 2 / dt] * 3)
        self.cov = F @ self.cov @ F.T + G @ Q @ G.T

        # bias Jacobians; gyro noise enters with the opposite sign of b_g
        dA_dbg = dA_dth @ self.J_R_bg - dA_dw
        self.J_alpha_bg = (self.J_alpha_bg + dt * self.J_beta_bg
                           + 0.5 * dt * dt * dA_dbg)
        self.J_beta_bg = self.J_beta_bg + dt * dA_dbg
        self.J_alpha_ba = (self.J_alpha_ba + dt * self.J_beta_ba
                           - 0.5 * dt * dt * dA_da)
        self.J_beta_ba = self.J_beta_ba - dt * dA_da
        self.J_R_bg = E.T @ self.J_R_bg - Jr * dt

        self.alpha = self.alpha + self.beta * dt + 0.5 * a_mid * dt * dt
        self.beta = self.beta + a_mid * dt
        self.R_delta = Rk1
        self.dt_total += dt

    def integrate(self, imu, t0, t1, substeps=8):
        """Run all midpoint steps over [t0, t1] of a (K, 7) sample array.

        Each inter-sample interval is subdivided (linearly interpolated
        measurements) so the discretization error stays well below the
        whitening scale of the resulting factor.
        """
        from .spline import _sample_at
        imu = np.asarray(imu, dtype=float)
        if t1 <= t0:
            raise ValueError("empty preintegration interval [%g, %g]"
                             % (t0, t1))
        if len(imu) < 2:
            raise ValueError("preintegration needs at least two samples")
        ts = imu[:, 0]
        if len(imu) >= 4:
            from scipy.interpolate import CubicSpline
            fit = CubicSpline(ts, imu[:, 1:7], axis=0)

            def sample(t):
                row = fit(min(max(t, ts[0]), ts[-1]))
                return row[:3], row[3:]
        else:
            def sample(t):
                return _sample_at(imu, t)
        lo = np.searchsorted(ts, t0, side="right")
        hi = np.searchsorted(ts, t1, side="left")
        knots = np.concatenate(([t0], ts[lo:hi], [t1]))
        for ta, tb in zip(knots[:-1], knots[1:]):
            if tb - ta <= 1e-12:
                continue
            sub = np.linspace(ta, tb, substeps + 1)
            for sa, sb in zip(sub[:-1], sub[1:]):
                w0, a0 = sample(sa)
                w1, a1 = sample(sb)
                self.step(sb - sa, w0, a0, w1, a1)
        return self

    def corrected(self, bg, ba):
        """First-order bias-corrected increments at (bg, ba)."""
        dbg = np.asarray(bg) - self.bg
        dba = np.asarray(ba) - self.ba
        alpha = self.alpha + self.J_alpha_bg @ dbg + self.J_alpha_ba @ dba
        beta = self.beta + self.J_beta_bg @ dbg + self.J_beta_ba @ dba
        R = self.R_delta @ so3.exp(self.J_R_bg @ dbg)
        return alpha, beta, R

    def sqrt_information(self, floor=1e-16):
        S = 0.5 * (self.cov + self.cov.T) + floor * np.eye(9)
        return np.linalg.cholesky(np.linalg.inv(S))


class PreintegrationFactor:
    """Relative-motion constraint between two keyframe times on the spline.

    Residual [r_alpha, r_theta, r_beta] against the preintegrated increments,
    first-order corrected to the current bias estimate of the starting
    interval and whitened with the preintegration covariance.
    """

    def __init__(self, traj, t_k, t_k1, preint, bias_uid, bias_store,
                 gravity, cp_range):
        self.traj = traj
        self.t_k = float(t_k)
        self.t_k1 = float(t_k1)
        self.preint = preint
        self.bias_uid = int(bias_uid)
        self.bias_store = bias_store
        self.gravity = np.asarray(gravity, dtype=float)
        self.sqrt_info = preint.sqrt_information()
        self.keys = _cp_keys(cp_range) + [bg_key(bias_uid), ba_key(bias_uid)]

    def evaluate(self, jac=True):
        e = self.traj.evaluate(np.array([self.t_k, self.t_k1]), jacobians=jac)
        Rk, Rk1 = e.R
        pk, pk1 = e.p
        vk, vk1 = e.v
        T = self.t_k1 - self.t_k
        g = self.gravity
        b = self.bias_store[self.bias_uid]
        alpha, beta, R_hat = self.preint.corrected(b[:3], b[3:])

        nu_p = pk1 - pk - vk * T + 0.5 * g * T * T
        nu_v = vk1 - vk + g * T
        r_a = Rk.T @ nu_p - alpha
        r_th = so3.log(R_hat.T @ Rk.T @ Rk1)
        r_b = Rk.T @ nu_v - beta
        r = self.sqrt_info @ np.concatenate([r_a, r_th, r_b])
        cost = float(r @ r)
        if not jac:
            return cost, r, None

        Jr_inv = so3.right_jacobian_inv(r_th)
        S = Rk.T @ Rk1
        acc = {}  # raw 9 x dim Jacobians per key, whitened at the end

        def add(key, row, J):
            blk = acc.setdefault(key, np.zeros((9, J.shape[1])))
            blk[row:row + 3] += J

        sk_p = so3.skew(Rk.T @ nu_p)
        sk_v = so3.skew(Rk.T @ nu_v)
        for m in range(4):
            Jk = e.J_rot[0, m]
            Jk1 = e.J_rot[1, m]
            add(rcp_key(e.seg[0] + m), 0, sk_p @ Jk)
            add(rcp_key(e.seg[0] + m), 6, sk_v @ Jk)
            add(rcp_key(e.seg[0] + m), 3, -Jr_inv @ S.T @ Jk)
            add(rcp_key(e.seg[1] + m), 3, Jr_inv @ Jk1)
            ck = -e.c_pos[0, m] - T * e.c_vel[0, m]
            add(pcp_key(e.seg[0] + m), 0, Rk.T * ck)
            add(pcp_key(e.seg[1] + m), 0, Rk.T * e.c_pos[1, m])
            add(pcp_key(e.seg[0] + m), 6, Rk.T * (-e.c_vel[0, m]))
            add(pcp_key(e.seg[1] + m), 6, Rk.T * e.c_vel[1, m])

        pre = self.preint
        # the rotation correction is Exp(J_R_bg (b - b_lin)); differentiating
        # away from b_lin picks up the right Jacobian of that increment
        psi = pre.J_R_bg @ (b[:3] - pre.bg)
        Jbg = np.zeros((9, 3))
        Jbg[0:3] = -pre.J_alpha_bg
        Jbg[3:6] = (-Jr_inv @ so3.exp(r_th).T
                    @ so3.right_jacobian(psi) @ pre.J_R_bg)
        Jbg[6:9] = -pre.J_beta_bg
        Jba = np.zeros((9, 3))
        Jba[0:3] = -pre.J_alpha_ba
        Jba[6:9] = -pre.J_beta_ba
        acc[bg_key(self.bias_uid)] = Jbg
        acc[ba_key(self.bias_uid)] = Jba

        entries = [(slice(0, 9), key, self.sqrt_info @ J)
                   for key, J in acc.items()]
        return cost, r, entries


# ---------------------------------------------------------------------------
# pose anchors (spline fitting)
# ---------------------------------------------------------------------------

class PoseSampleFactorSet:
    """Soft pose targets r = [w_r Log(R_t^T R(t)); w_p (p(t) - p_t)].

    Used to fit a spline to reference poses (initialization, tests).
    """

    def __init__(self, traj, times, R_targets, p_targets, cp_range,
                 rot_weight=1.0, pos_weight=1.0):
        self.traj = traj
        self.times = np.asarray(times, dtype=float)
        self.R_t = np.asarray(R_targets, dtype=float)
        self.p_t = np.asarray(p_targets, dtype=float)
        self.wr = float(rot_weight)
        self.wp = float(pos_weight)
        self.n = len(self.times)
        self.keys = _cp_keys(cp_range)

    def evaluate(self, jac=True):
        e = self.traj.evaluate(self.times, jacobians=jac)
        rel = np.einsum("nba,nbc->nac", self.R_t, e.R)
        phi = so3.log_batch(rel)
        r = np.concatenate([phi * self.wr, (e.p - self.p_t) * self.wp], axis=1)
        cost = float(np.sum(r * r))
        if not jac:
            return cost, r.ravel(), None
        Jlift = so3.right_jacobian_inv_batch(phi) * self.wr
        entries = []
        rr_sub = np.arange(3)
        rp_sub = np.arange(3, 6)
        for m in range(4):
            Jr_ = Jlift @ e.J_rot[:, m]
            cp_idx = e.seg + m
            for cp in np.unique(cp_idx):
                sel = np.nonzero(cp_idx == cp)[0]
                entries.append((_rows(sel, rr_sub, 6), rcp_key(cp),
                                Jr_[sel].reshape(-1, 3)))
                Jp = (np.broadcast_to(np.eye(3), (len(sel), 3, 3))
                      * (e.c_pos[sel, m, None, None] * self.wp))
                entries.append((_rows(sel, rp_sub, 6), pcp_key(cp),
                                Jp.reshape(-1, 3)))
        return cost, r.ravel(), entries
