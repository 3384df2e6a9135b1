"""Keyframe-based sliding-window estimator on a continuous-time trajectory.

The pipeline ingests IMU samples and feature-track frames, extends the spline
by IMU dead reckoning, triangulates landmarks at their rolling-shutter row
poses, solves the window cost (visual + raw IMU + bias random walk + prior),
calibrates the line delay online, and slides the window by dropping
non-keyframes or marginalizing the oldest keyframe with one of two
IMU-handling strategies.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .factors import (TR_KEY, BiasFactor, ImuFactorSet, PoseSampleFactorSet,
                      Preintegration, PreintegrationFactor, VisualFactorSet,
                      ba_key, bg_key, lm_key, pcp_key, rcp_key)
from .optimizer import (ROTATION, VECTOR, Problem, SolverOptions,
                        marginalize_schur)
from .sensors import GRAVITY, ImuNoiseModel
from .spline import KnotGrid, RigidTransform, Trajectory


class InitializationError(RuntimeError):
    pass


@dataclass
class EstimatorConfig:
    knot_dt: float = 0.03
    window: int = 11
    max_features: int = 150
    pixel_sigma: float = 1.0
    parallax_threshold: float = 10.0   # px, strict >
    min_tracks: int = 20
    strategy: int = 1
    tr_init: float = 0.0
    estimate_tr: bool = True
    tr_max: float = 1.5e-4             # span padding and clamp bound
    huber: float = 1.0
    max_iterations: int = 6
    min_parallax_deg: float = 1.0
    min_depth: float = 0.1
    max_depth: float = 1000.0
    noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)

    def __post_init__(self):
        if self.knot_dt <= 0:
            raise ValueError("knot interval must be positive")
        if self.window < 4:
            raise ValueError("window must hold at least 4 frames")
        if self.strategy not in (1, 2):
            raise ValueError("marginalization strategy must be 1 or 2")


@dataclass
class Frame:
    uid: int
    t: float
    obs: dict          # feature id -> pixel (2,)
    is_kf: bool


@dataclass
class LandmarkState:
    fid: int
    anchor_uid: int
    anchor_t: float
    anchor_pix: np.ndarray
    obs: dict          # frame uid -> (t, pixel)
    slot: int
    triangulated: bool = False
    last_attempt: int = 0      # view count of the last failed triangulation


class Estimator:
    def __init__(self, config, intrinsics, extrinsic, oracle=None):
        """``oracle``: optional (truth_pose_fn(t)->(R,p), bg, ba) for
        ground-truth seeded initialization; coarse static-prefix
        initialization is used otherwise."""
        self.cfg = config
        self.intr = intrinsics
        self.extrinsic = extrinsic
        self.oracle = oracle
        self.traj = None
        self.imu = []                      # [t, w(3), a(3)] rows
        self._imu_arr = None
        self.frames = []
        self.pending = []
        self.bias_store = {}
        self.landmarks = {}
        self.lam_store = np.zeros(64)
        self._free_slots = list(range(64))
        self.tr_store = np.array([config.tr_init], dtype=float)
        self.prior = None
        self.gauge = None      # (t0, R0, p0) pose anchor until a prior exists
        self.trace = []
        self.poses = []                    # emitted keyframe poses
        self._uid = 0
        self._last_kf = None
        self.reports = []

    # -- ingestion ----------------------------------------------------------

    def process_imu(self, t, gyro, accel):
        if self.imu and t <= self.imu[-1][0]:
            raise ValueError("IMU sample at %.9f not after %.9f"
                             % (t, self.imu[-1][0]))
        self.imu.append(np.concatenate([[t], gyro, accel]))
        self._imu_arr = None
        while self.pending and self._covered(self.pending[0][0]):
            t_f, ids, pix = self.pending.pop(0)
            self._handle_frame(t_f, ids, pix)

    def imu_array(self):
        if self._imu_arr is None:
            self._imu_arr = np.array(self.imu) if self.imu else \
                np.zeros((0, 7))
        return self._imu_arr

    def _covered(self, frame_t):
        need = frame_t + self.intr.height * self.cfg.tr_max
        if self.traj is None and self.oracle is None and self.imu:
            # coarse initialization measures gravity over a static prefix
            need = max(need, self.imu[0][0] + 0.6)
        return bool(self.imu) and self.imu[-1][0] >= need - 1e-9

    def process_frame(self, t, feature_ids, pixels):
        """Insert a tracked frame; defers it if IMU does not yet cover its
        readout.  Returns the current pose estimate at t or None."""
        if self.pending or not self._covered(t):
            self.pending.append((t, np.asarray(feature_ids),
                                 np.asarray(pixels, dtype=float)))
            return None
        return self._handle_frame(t, np.asarray(feature_ids),
                                  np.asarray(pixels, dtype=float))

    # -- internal pipeline --------------------------------------------------

    def _handle_frame(self, t, ids, pix):
        if self.traj is None:
            self._initialize(t)
        else:
            bias = self.bias_store[self.frames[-1].uid]
            self.traj.extend_with_prediction(
                t + self.intr.height * self.cfg.tr_max,
                self.imu_array(), (bias[:3].copy(), bias[3:].copy()), GRAVITY)

        frame = Frame(self._uid, float(t),
                      {int(f): np.array(p) for f, p in zip(ids, pix)},
                      is_kf=False)
        self._uid += 1
        frame.is_kf = self._keyframe_decision(frame)
        if self.frames:
            prev = self.bias_store[self.frames[-1].uid]
            self.bias_store[frame.uid] = prev.copy()
        else:
            bg, ba = self._initial_bias()
            self.bias_store[frame.uid] = np.concatenate([bg, ba])
        self.frames.append(frame)
        self._update_landmarks(frame)
        self._triangulate_new()
        report = self._solve_window()
        self.reports.append(report)
        if self.cfg.estimate_tr:
            self.trace.append((frame.t, float(self.tr_store[0])))
        self.slide_and_marginalize()
        R, p = self.traj.eval_pose(t)
        return R, p

    def _initialize(self, t0):
        grid = KnotGrid(t0, self.cfg.knot_dt, 4)
        if self.oracle is not None:
            pose_fn = self.oracle[0]
            Rs, ps = [], []
            for m in range(4):
                R, p = pose_fn(t0 + (m - 1) * self.cfg.knot_dt)
                Rs.append(R)
                ps.append(p)
            self.traj = Trajectory(grid, np.array(Rs), np.array(ps),
                                   self.extrinsic)
        else:
            R0 = self._coarse_attitude()
            self.traj = Trajectory(grid, np.repeat(R0[None], 4, axis=0),
                                   np.zeros((4, 3)), self.extrinsic)
        self.traj.extend_with_prediction(
            t0 + self.intr.height * self.cfg.tr_max,
            self.imu_array(), self._initial_bias(), GRAVITY)
        if self.oracle is not None:
            R0, p0 = self.oracle[0](t0)
        else:
            R0, p0 = self.traj.eval_pose(t0)
        self.gauge = (t0, np.array(R0), np.array(p0))

    def _initial_bias(self):
        if self.oracle is not None:
            return (np.array(self.oracle[1], dtype=float),
                    np.array(self.oracle[2], dtype=float))
        imu = self.imu_array()
        mask = imu[:, 0] <= imu[0, 0] + self._static_span()
        bg = imu[mask, 1:4].mean(axis=0)
        R0 = self._coarse_attitude()
        ba = imu[mask, 4:7].mean(axis=0) - R0.T @ GRAVITY
        return bg, ba

    def _static_span(self, motion_threshold=0.05):
        """Length of the initial low-motion prefix in the IMU buffer."""
        imu = self.imu_array()
        rates = np.linalg.norm(imu[:, 1:4] - imu[:5, 1:4].mean(axis=0),
                               axis=1)
        moving = np.nonzero(rates > motion_threshold)[0]
        end = imu[moving[0], 0] if len(moving) else imu[-1, 0]
        return end - imu[0, 0]

    def _coarse_attitude(self):
        if self._static_span() < 0.5:
            raise InitializationError(
                "coarse initialization needs a static prefix of at least "
                "0.5 s; the IMU starts moving earlier")
        imu = self.imu_array()
        mask = imu[:, 0] <= imu[0, 0] + 0.5
        a = imu[mask, 4:7].mean(axis=0)
        # rotation taking the measured specific force onto world +z gravity
        u = a / np.linalg.norm(a)
        g = GRAVITY / np.linalg.norm(GRAVITY)
        axis = np.cross(u, g)
        s = np.linalg.norm(axis)
        if s < 1e-12:
            return np.eye(3) if u @ g > 0 else so3.exp([np.pi, 0.0, 0.0])
        angle = np.arctan2(s, u @ g)
        # body measures a = R^T g, so the world-from-body rotation is the
        # one taking the measured direction onto gravity
        return so3.exp(axis / s * angle)

    # -- landmarks ----------------------------------------------------------

    def _update_landmarks(self, frame):
        for fid, pix in frame.obs.items():
            lm = self.landmarks.get(fid)
            if lm is None:
                if not frame.is_kf or len(self.landmarks) >= \
                        4 * self.cfg.max_features:
                    continue
                lm = LandmarkState(fid, frame.uid, frame.t, pix.copy(), {},
                                   self._alloc_slot())
                self.landmarks[fid] = lm
            lm.obs[frame.uid] = (frame.t, pix.copy())

    def _alloc_slot(self):
        if not self._free_slots:
            old = len(self.lam_store)
            self.lam_store = np.concatenate(
                [self.lam_store, np.zeros(old)])
            self._free_slots = list(range(old, 2 * old))
        return self._free_slots.pop()

    def _release(self, lm):
        self._free_slots.append(lm.slot)
        del self.landmarks[lm.fid]

    def _keyframe_decision(self, frame):
        if self._last_kf is None:
            self._last_kf = frame
            return True
        common = [f for f in frame.obs if f in self._last_kf.obs]
        prev = self.frames[-1] if self.frames else self._last_kf
        tracked = sum(1 for f in frame.obs if f in prev.obs)
        if tracked < self.cfg.min_tracks:
            self._last_kf = frame
            return True
        if common:
            disp = np.array([frame.obs[f] - self._last_kf.obs[f]
                             for f in common])
            parallax = float(np.mean(np.linalg.norm(disp, axis=1)))
        else:
            parallax = np.inf
        if parallax > self.cfg.parallax_threshold:
            self._last_kf = frame
            return True
        return False

    def _row_camera_pose(self, t_frame, row):
        return self.traj.camera_pose(t_frame + row * float(self.tr_store[0]))

    def _kf_views(self, lm):
        """(anchor-first) keyframe observations of a landmark."""
        kf_uids = {f.uid for f in self.frames if f.is_kf}
        views = [(t, pix) for uid, (t, pix) in lm.obs.items()
                 if uid in kf_uids]
        views.sort(key=lambda v: (v[0] != lm.anchor_t, v[0]))
        return views

    def triangulate(self, lm):
        """Row-pose DLT over the landmark's keyframe observations."""
        views = self._kf_views(lm)
        if len(views) < 2:
            return False
        tr = float(self.tr_store[0])
        times = np.array([t + pix[1] * tr for t, pix in views])
        e = self.traj.evaluate(times)
        ex = self.traj.extrinsic
        Rwc = np.einsum("nab,bc->nac", e.R, ex.R)
        pwc = e.R @ ex.p + e.p
        return self._triangulate_views(lm, views, Rwc, pwc)

    def _triangulate_views(self, lm, views, Rwc, pwc):
        x = np.array([self.intr.back_project(pix) for _, pix in views])
        bearings = np.einsum("nab,nb->na", Rwc,
                             x / np.linalg.norm(x, axis=1)[:, None])
        cosmin = np.min(np.clip(bearings @ bearings.T, -1.0, 1.0))
        if np.degrees(np.arccos(cosmin)) <= self.cfg.min_parallax_deg:
            return False
        # two DLT rows per view from x_hat cross the projection matrix
        Rcw = np.transpose(Rwc, (0, 2, 1))
        P = np.concatenate(
            [Rcw, -np.einsum("nab,nb->na", Rcw, pwc)[:, :, None]], axis=2)
        A = np.concatenate([x[:, 0:1] * P[:, 2] - P[:, 0],
                            x[:, 1:2] * P[:, 2] - P[:, 1]], axis=0)
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        if abs(X[3]) < 1e-12:
            return False
        Xw = X[:3] / X[3]
        # depth in the anchor camera at its row time (anchor view is first)
        depth = (Rwc[0].T @ (Xw - pwc[0]))[2]
        if not (self.cfg.min_depth <= depth <= self.cfg.max_depth):
            return False
        self.lam_store[lm.slot] = 1.0 / depth
        lm.triangulated = True
        return True

    def _triangulate_new(self):
        pending = []
        for lm in self.landmarks.values():
            if lm.triangulated:
                continue
            views = self._kf_views(lm)
            if len(views) < 2 or len(views) == lm.last_attempt:
                continue
            pending.append((lm, views))
        if not pending:
            return
        tr = float(self.tr_store[0])
        times = np.array([t + pix[1] * tr
                          for _, views in pending for t, pix in views])
        e = self.traj.evaluate(times)
        ex = self.traj.extrinsic
        Rwc = np.einsum("nab,bc->nac", e.R, ex.R)
        pwc = e.R @ ex.p + e.p
        i = 0
        for lm, views in pending:
            k = len(views)
            ok = self._triangulate_views(lm, views, Rwc[i:i + k],
                                         pwc[i:i + k])
            i += k
            lm.last_attempt = 0 if ok else k

    # -- window problem -----------------------------------------------------

    def _cp_span(self):
        lo, hi = self.traj.active_span(
            self.frames[0].t,
            self.frames[-1].t + self.intr.height * self.cfg.tr_max)
        if self.prior is not None:
            for key in self.prior.keys:
                if key[0] in ("rcp", "pcp"):
                    lo = min(lo, key[1])
        return lo, hi

    def _active_visual(self):
        """Landmark observations usable as factors in the current window."""
        uids = {f.uid: f.t for f in self.frames}
        rows = []
        for lm in self.landmarks.values():
            if not lm.triangulated or lm.anchor_uid not in uids:
                continue
            targets = [(t, pix) for uid, (t, pix) in lm.obs.items()
                       if uid in uids and uid != lm.anchor_uid]
            for t, pix in targets:
                rows.append((lm.anchor_t, lm.anchor_pix, t, pix, lm.fid,
                             lm.slot))
        return rows

    def _visual_factor(self, rows, cp_range):
        return VisualFactorSet(
            self.traj, self.intr,
            [r[0] for r in rows], [r[1] for r in rows],
            [r[2] for r in rows], [r[3] for r in rows],
            [r[4] for r in rows], self.lam_store, [r[5] for r in rows],
            self.tr_store, cp_range, pixel_sigma=self.cfg.pixel_sigma,
            huber=self.cfg.huber, estimate_tr=self.cfg.estimate_tr)

    def _imu_in(self, t0, t1):
        imu = self.imu_array()
        sel = (imu[:, 0] >= t0 - 1e-12) & (imu[:, 0] < t1 - 1e-12)
        return imu[sel]

    def _sample_uid(self, times):
        """Owning bias interval of each sample time."""
        bounds = [f.t for f in self.frames]
        idx = np.clip(np.searchsorted(bounds, times, side="right") - 1, 0,
                      len(self.frames) - 1)
        return [self.frames[i].uid for i in idx]

    def _register(self, problem, cp_range):
        for m in range(cp_range[0], cp_range[1] + 1):
            problem.add_block(rcp_key(m), ROTATION, self.traj.Rs[m])
            problem.add_block(pcp_key(m), VECTOR, self.traj.ps[m])
        for f in self.frames:
            b = self.bias_store[f.uid]
            problem.add_block(bg_key(f.uid), VECTOR, b[:3])
            problem.add_block(ba_key(f.uid), VECTOR, b[3:])
        problem.add_block(TR_KEY, VECTOR, self.tr_store)
        if not self.cfg.estimate_tr:
            problem.set_constant(TR_KEY)

    def _build_problem(self):
        cp_range = self._cp_span()
        p = Problem()
        self._register(p, cp_range)
        rows = self._active_visual()
        for r in rows:
            p.add_block(lm_key(r[4]), VECTOR,
                        self.lam_store[r[5]:r[5] + 1])
        if rows:
            p.add_factor(self._visual_factor(rows, cp_range))
        imu = self._imu_in(self.frames[0].t,
                           self.frames[-1].t
                           + self.intr.height * self.cfg.tr_max)
        if len(imu):
            p.add_factor(ImuFactorSet(
                self.traj, imu[:, 0], imu[:, 1:4], imu[:, 4:7],
                self._sample_uid(imu[:, 0]), self.bias_store, GRAVITY,
                self.cfg.noise.discrete_gyro_sigma(),
                self.cfg.noise.discrete_accel_sigma(), cp_range))
        for a, b in zip(self.frames[:-1], self.frames[1:]):
            p.add_factor(BiasFactor(a.uid, b.uid, self.bias_store,
                                    self.cfg.noise, b.t - a.t))
        if self.prior is None:
            p.add_factor(self._gauge_factor(cp_range))
        else:
            for key in self.prior.keys:
                if key not in p.blocks:
                    # bias of an already-marginalized frame kept by the prior
                    b = self.bias_store.get(key[1])
                    if b is None:
                        continue
                    which = b[:3] if key[0] == "bg" else b[3:]
                    p.add_block(key, VECTOR, which)
            p.add_factor(self.prior.rebind(p.blocks))
        return p

    def _solve_window(self):
        problem = self._build_problem()
        if not problem.factors:
            return None
        opts = SolverOptions(max_iterations=self.cfg.max_iterations,
                             init_lambda=1e-6, max_step_norm=1.0)
        report = problem.solve(opts)
        self.tr_store[0] = min(max(self.tr_store[0], 0.0), self.cfg.tr_max)
        return report

    # -- sliding ------------------------------------------------------------

    def slide_and_marginalize(self):
        if len(self.frames) >= 3 and not self.frames[-2].is_kf:
            self.drop_nonkeyframe(self.frames[-2])
        if len(self.frames) > self.cfg.window:
            self.marginalize_oldest()

    def drop_nonkeyframe(self, frame):
        if frame.is_kf:
            raise ValueError("frame %d is a keyframe" % frame.uid)
        for lm in list(self.landmarks.values()):
            lm.obs.pop(frame.uid, None)
            if lm.anchor_uid == frame.uid or not lm.obs:
                self._release(lm)
            elif len(lm.obs) < 2:
                lm.triangulated = False
        self.frames.remove(frame)
        del self.bias_store[frame.uid]

    def marg_cp_set(self):
        """Control point indices strictly before the second keyframe's
        support, over everything currently registered."""
        lo, _ = self._cp_span()
        i_next, _ = self.traj.grid.locate(self.frames[1].t)
        return list(range(lo, i_next)), i_next

    def build_marg_subproblem(self, strategy=None):
        """Sub-problem holding exactly the factors that touch the states to
        be marginalized, per the configured IMU-handling strategy."""
        strategy = strategy or self.cfg.strategy
        old = self.frames[0]
        nxt = self.frames[1]
        marg_cps, i_next = self.marg_cp_set()
        cp_range = self._cp_span()

        p = Problem()
        for m in range(cp_range[0], cp_range[1] + 1):
            p.add_block(rcp_key(m), ROTATION, self.traj.Rs[m])
            p.add_block(pcp_key(m), VECTOR, self.traj.ps[m])
        for f in (old, nxt):
            b = self.bias_store[f.uid]
            p.add_block(bg_key(f.uid), VECTOR, b[:3])
            p.add_block(ba_key(f.uid), VECTOR, b[3:])
        p.add_block(TR_KEY, VECTOR, self.tr_store)
        if not self.cfg.estimate_tr:
            p.set_constant(TR_KEY)

        marg_keys = ([rcp_key(m) for m in marg_cps]
                     + [pcp_key(m) for m in marg_cps]
                     + [bg_key(old.uid), ba_key(old.uid)])

        # visual factors of landmarks anchored in the oldest keyframe
        rows = []
        uids = {f.uid for f in self.frames}
        for lm in self.landmarks.values():
            if lm.anchor_uid != old.uid or not lm.triangulated:
                continue
            p.add_block(lm_key(lm.fid), VECTOR,
                        self.lam_store[lm.slot:lm.slot + 1])
            marg_keys.append(lm_key(lm.fid))
            for uid, (t, pix) in lm.obs.items():
                if uid in uids and uid != lm.anchor_uid:
                    rows.append((lm.anchor_t, lm.anchor_pix, t, pix,
                                 lm.fid, lm.slot))
        if rows:
            p.add_factor(self._visual_factor(rows, cp_range))

        imu = self._imu_in(old.t, nxt.t)
        if strategy == 1:
            if len(imu) < 2:
                raise ValueError("no IMU coverage between the two oldest "
                                 "keyframes")
            pre = Preintegration(self.bias_store[old.uid][:3].copy(),
                                 self.bias_store[old.uid][3:].copy(),
                                 self.cfg.noise.gyro_noise_density,
                                 self.cfg.noise.accel_noise_density)
            pre.integrate(self._imu_in(old.t, nxt.t + 0.1), old.t, nxt.t,
                          substeps=16)
            p.add_factor(PreintegrationFactor(
                self.traj, old.t, nxt.t, pre, old.uid, self.bias_store,
                GRAVITY, cp_range))
        else:
            if not len(imu):
                raise ValueError("no IMU samples between the two oldest "
                                 "keyframes")
            p.add_factor(ImuFactorSet(
                self.traj, imu[:, 0], imu[:, 1:4], imu[:, 4:7],
                [old.uid] * len(imu), self.bias_store, GRAVITY,
                self.cfg.noise.discrete_gyro_sigma(),
                self.cfg.noise.discrete_accel_sigma(), cp_range))
        p.add_factor(BiasFactor(old.uid, nxt.uid, self.bias_store,
                                self.cfg.noise, nxt.t - old.t))
        if self.prior is None:
            p.add_factor(self._gauge_factor(cp_range))
        else:
            p.add_factor(self.prior.rebind(p.blocks))
        return p, marg_keys

    def _gauge_factor(self, cp_range):
        t0, R0, p0 = self.gauge
        return PoseSampleFactorSet(self.traj, [t0], R0[None], p0[None],
                                   cp_range, rot_weight=1e3, pos_weight=1e3)

    def marginalize_oldest(self):
        old = self.frames[0]
        R, pos = self.traj.eval_pose(old.t)
        self.poses.append((old.t, R, pos))

        sub, marg_keys = self.build_marg_subproblem()
        self.prior = marginalize_schur(sub, marg_keys)

        # bookkeeping: remove the frame and its anchored landmarks.  A
        # triangulated landmark's observations just went into the prior, so
        # reusing them under a new anchor would double count; the track may
        # start a fresh landmark at a later keyframe instead.  Landmarks
        # never used in a factor are safe to re-anchor.
        for lm in list(self.landmarks.values()):
            lm.obs.pop(old.uid, None)
            if lm.anchor_uid != old.uid:
                continue
            if not lm.triangulated and len(lm.obs) >= 2:
                uid0 = min(lm.obs)
                t0, pix0 = lm.obs[uid0]
                lm.anchor_uid = uid0
                lm.anchor_t = t0
                lm.anchor_pix = pix0.copy()
            else:
                self._release(lm)
        self.frames.pop(0)
        del self.bias_store[old.uid]
        # trim the IMU buffer, keeping a margin before the window start
        cutoff = self.frames[0].t - 0.5
        while len(self.imu) > 2 and self.imu[1][0] < cutoff:
            self.imu.pop(0)
        self._imu_arr = None

    # -- outputs ------------------------------------------------------------

    def finish(self):
        """Emit the remaining keyframe poses and return the full list."""
        out = list(self.poses)
        for f in self.frames:
            if f.is_kf:
                R, p = self.traj.eval_pose(f.t)
                out.append((f.t, R, p))
        return out

    def calibration_trace(self):
        return list(self.trace)


def run_sequence(estimator, imu, frames):
    """Feed a dataset through the estimator in time order."""
    fi = 0
    for row in imu:
        while fi < len(frames) and frames[fi][0] <= row[0]:
            t, ids, pix = frames[fi]
            estimator.process_frame(t, ids, pix)
            fi += 1
        estimator.process_imu(row[0], row[1:4], row[4:7])
    while fi < len(frames):
        t, ids, pix = frames[fi]
        estimator.process_frame(t, ids, pix)
        fi += 1
    return estimator.finish()
