"""Synthetic rolling-shutter visual-inertial data generation.

Ground truth is either an analytic sum-of-sinusoids trajectory (closed-form
derivatives everywhere) or, optionally, a cubic spline sampled from it so that
the generated measurements are exactly representable by the estimator's
trajectory model.  From the truth we synthesize IMU streams (gyro band-limited
white noise plus random-walk biases) and rolling-shutter feature tracks whose
row times satisfy the per-landmark readout fixed point.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .sensors import GRAVITY, PinholeIntrinsics
from .spline import KnotGrid, RigidTransform, Trajectory

# camera looks along body +x: columns are the camera axes in the body frame
DEFAULT_EXTRINSIC_R = np.array([[0.0, 0.0, 1.0],
                                [-1.0, 0.0, 0.0],
                                [0.0, -1.0, 0.0]])
DEFAULT_EXTRINSIC_P = np.array([0.03, -0.01, 0.02])

DEFAULT_INTRINSICS = PinholeIntrinsics(fx=400.0, fy=400.0, cx=320.0,
                                       cy=240.0, width=640, height=480)

PRESET_SCALE = {"slow": 1.0, "medium": 2.0, "fast": 3.0}

# base sinusoid parameters, scaled by the speed preset
POS_AMP = np.array([0.6, 0.45, 0.35])     # m
POS_FREQ = np.array([0.30, 0.24, 0.40])   # Hz
POS_PHASE = np.array([0.0, 1.2, 2.1])
ROT_AMP = np.array([0.25, 0.30, 0.20])    # rad
ROT_FREQ = np.array([0.35, 0.27, 0.42])   # Hz
ROT_PHASE = np.array([0.9, 0.0, 1.7])


def _smoothstep5(x):
    """C^2 quintic smoothstep with value/1st/2nd derivatives, clamped."""
    x = np.clip(x, 0.0, 1.0)
    s = x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)
    ds = 30.0 * x * x * (1.0 - x) ** 2
    dds = 60.0 * x * (1.0 - 3.0 * x + 2.0 * x * x)
    return s, ds, dds


class AnalyticTrajectory:
    """Sum-of-sinusoids body trajectory with closed-form derivatives.

    Per axis: p(t) = p0 + env(t) * (A sin(w t + phi) - A sin(phi)) and the
    orientation is the rotation vector theta(t) built the same way, so the
    pose is exactly the initial one at t = 0.  ``static_prefix`` holds the
    pose constant that long, followed by a C^2 ramp of duration ``ramp``.
    """

    def __init__(self, duration, speed_scale=1.0, pos_amp=POS_AMP,
                 pos_freq=POS_FREQ, pos_phase=POS_PHASE, rot_amp=ROT_AMP,
                 rot_freq=ROT_FREQ, rot_phase=ROT_PHASE, static_prefix=0.0,
                 ramp=1.0, p0=None):
        self.duration = float(duration)
        self.wp = 2.0 * np.pi * np.asarray(pos_freq) * speed_scale
        self.wr = 2.0 * np.pi * np.asarray(rot_freq) * speed_scale
        self.Ap = np.asarray(pos_amp, dtype=float)
        self.Ar = np.asarray(rot_amp, dtype=float)
        self.php = np.asarray(pos_phase, dtype=float)
        self.phr = np.asarray(rot_phase, dtype=float)
        self.static_prefix = float(static_prefix)
        self.ramp = float(ramp)
        self.p0 = np.zeros(3) if p0 is None else np.asarray(p0, dtype=float)

    def _envelope(self, t):
        if self.static_prefix <= 0.0:
            one = np.ones_like(t)
            return one, np.zeros_like(t), np.zeros_like(t)
        x = (t - self.static_prefix) / self.ramp
        s, ds, dds = _smoothstep5(x)
        return s, ds / self.ramp, dds / self.ramp ** 2

    def _osc(self, t, A, w, ph):
        arg = np.outer(t, w) + ph
        f = A * (np.sin(arg) - np.sin(ph))
        df = A * w * np.cos(arg)
        ddf = -A * w * w * np.sin(arg)
        return f, df, ddf

    def state(self, t):
        """Batched truth: (R, p, v, a, omega_body) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        # a small margin on both sides lets spline fits sample just past the
        # nominal interval; the closed forms are valid there
        if np.any(t < -0.2) or np.any(t > self.duration + 0.1):
            raise ValueError("time outside [0, %.3f]" % self.duration)
        s, ds, dds = self._envelope(t)
        s, ds, dds = s[:, None], ds[:, None], dds[:, None]

        f, df, ddf = self._osc(t, self.Ap, self.wp, self.php)
        p = self.p0 + s * f
        v = ds * f + s * df
        a = dds * f + 2.0 * ds * df + s * ddf

        # product rule on the enveloped rotation vector
        f_r, df_r, _ = self._osc(t, self.Ar, self.wr, self.phr)
        th = s * f_r
        dth = ds * f_r + s * df_r
        R = so3.exp_batch(th)
        omega = np.einsum("nab,nb->na", so3.right_jacobian_batch(th), dth)
        return R, p, v, a, omega

    def pose(self, t):
        R, p, _, _, _ = self.state(t)
        return R, p


class SplineTruth:
    """Truth provider backed by a cubic spline sampled from a source path.

    Control points are taken at the source's Greville instants, so the data
    generated from this provider is exactly representable on the same knot
    grid, which gives exact-zero residual tests their reference.
    """

    def __init__(self, source, duration, dt=0.03, pad=0.0):
        count = int(np.ceil((duration + pad) / dt)) + 4
        greville = np.arange(count) * dt - dt
        R, p = source.pose(greville)
        self.traj = Trajectory(KnotGrid(0.0, dt, count), R, p)
        self.duration = float(duration)

    def state(self, t):
        e = self.traj.evaluate(t)
        return e.R, e.p, e.v, e.a, e.omega

    def pose(self, t):
        R, p, _, _, _ = self.state(t)
        return R, p


@dataclass
class SimConfig:
    duration: float = 30.0
    imu_rate: float = 90.0
    frame_rate: float = 30.0
    line_delay: float = 69.44e-6
    preset: str = "medium"
    seed: int = 0
    n_landmarks: int = 300
    box_min: tuple = (3.0, -5.0, -3.5)
    box_max: tuple = (10.0, 5.0, 3.5)
    gyro_noise: float = 0.0       # rad/s/sqrt(Hz)
    accel_noise: float = 0.0      # m/s^2/sqrt(Hz)
    gyro_walk: float = 0.0        # rad/s^2/sqrt(Hz)
    accel_walk: float = 0.0       # m/s^3/sqrt(Hz)
    pixel_noise: float = 0.0      # px
    init_gyro_bias: tuple = (0.0, 0.0, 0.0)
    init_accel_bias: tuple = (0.0, 0.0, 0.0)
    static_prefix: float = 0.0
    ramp: float = 1.0
    spline_truth: bool = False
    truth_dt: float = 0.03
    min_tracks: int = 20

    def __post_init__(self):
        if self.imu_rate <= 0 or self.frame_rate <= 0:
            raise ValueError("rates must be positive")
        if self.preset not in PRESET_SCALE:
            raise ValueError("unknown preset %r" % self.preset)
        if self.line_delay * DEFAULT_INTRINSICS.height >= 1.0 / self.frame_rate:
            raise ValueError("readout longer than the frame period")


def make_truth(config):
    analytic = AnalyticTrajectory(config.duration,
                                  speed_scale=PRESET_SCALE[config.preset],
                                  static_prefix=config.static_prefix,
                                  ramp=config.ramp)
    if config.spline_truth:
        return SplineTruth(analytic, config.duration, dt=config.truth_dt)
    return analytic


def synth_imu(truth, config, rng):
    """IMU stream (K, 7) rows (t, w, a) plus the true bias history (K, 6)."""
    dt = 1.0 / config.imu_rate
    times = np.arange(0.0, config.duration - 1e-9, dt)
    R, p, v, a, omega = truth.state(times)
    n = len(times)
    sg = config.gyro_noise * np.sqrt(config.imu_rate)
    sa = config.accel_noise * np.sqrt(config.imu_rate)
    bias = np.zeros((n, 6))
    bias[0, :3] = config.init_gyro_bias
    bias[0, 3:] = config.init_accel_bias
    walk = np.concatenate([np.full(3, config.gyro_walk),
                           np.full(3, config.accel_walk)]) * np.sqrt(dt)
    steps = rng.standard_normal((n - 1, 6)) * walk
    bias[1:] = bias[0] + np.cumsum(steps, axis=0)

    gyro = omega + bias[:, :3] + rng.standard_normal((n, 3)) * sg
    accel = (np.einsum("nba,nb->na", R, a + GRAVITY) + bias[:, 3:]
             + rng.standard_normal((n, 3)) * sa)
    return np.column_stack([times, gyro, accel]), bias


def project_world_points(truth, extrinsic, intr, points, times):
    """Project world points at per-point times; returns (pixels, valid)."""
    R, p = truth.pose(times)
    q = np.einsum("nba,nb->na", R, points - p)            # body frame
    cam = (q - extrinsic.p) @ extrinsic.R                 # camera frame
    return intr.project_batch(cam)


def synth_rs_frame(truth, extrinsic, intr, landmarks, frame_time, line_delay,
                   rng=None, pixel_noise=0.0, max_iters=20, row_tol=1e-4):
    """Rolling-shutter observations of all visible landmarks at one frame.

    Solves the readout fixed point v = row(project(pose(t_i + v * t_r)))
    per landmark, starting from the global-shutter projection.  Returns
    (ids, pixels, n_unconverged); unconverged or out-of-view landmarks are
    dropped.
    """
    n = len(landmarks)
    times = np.full(n, frame_time)
    pix, valid = project_world_points(truth, extrinsic, intr, landmarks,
                                      times)
    rows = np.clip(np.where(valid, pix[:, 1], 0.0), 0.0, intr.height - 1)
    converged = np.zeros(n, dtype=bool) if line_delay > 0 else valid.copy()
    iters_used = 0
    if line_delay > 0:
        for it in range(max_iters):
            iters_used = it + 1
            pix, ok = project_world_points(truth, extrinsic, intr, landmarks,
                                           times + rows * line_delay)
            valid &= ok
            new_rows = np.clip(np.where(ok, pix[:, 1], 0.0), 0.0,
                               intr.height - 1)
            converged = np.abs(new_rows - rows) < row_tol
            rows = new_rows
            if np.all(converged | ~valid):
                break
    n_unconverged = int(np.sum(valid & ~converged))
    keep = valid & converged
    keep &= (pix[:, 0] >= 0) & (pix[:, 0] <= intr.width - 1)
    keep &= (pix[:, 1] >= 0) & (pix[:, 1] <= intr.height - 1)
    ids = np.nonzero(keep)[0]
    out = pix[keep]
    if pixel_noise > 0 and rng is not None:
        out = out + rng.standard_normal(out.shape) * pixel_noise
        out[:, 0] = np.clip(out[:, 0], 0.0, intr.width - 1)
        out[:, 1] = np.clip(out[:, 1], 0.0, intr.height - 1)
    return ids, out, n_unconverged, iters_used


@dataclass
class SimOutput:
    config: SimConfig
    truth: object
    extrinsic: RigidTransform
    intrinsics: PinholeIntrinsics
    landmarks: np.ndarray
    imu: np.ndarray                      # (K, 7)
    true_bias: np.ndarray                # (K, 6)
    frames: list                         # [(t, ids, pixels)]
    gt_times: np.ndarray
    gt_R: np.ndarray
    gt_p: np.ndarray
    warnings: list = field(default_factory=list)


def generate_dataset(config):
    """Deterministically synthesize a full dataset from ``config``."""
    rng = np.random.default_rng(config.seed)
    truth = make_truth(config)
    extrinsic = RigidTransform(DEFAULT_EXTRINSIC_R.copy(),
                               DEFAULT_EXTRINSIC_P.copy())
    intr = DEFAULT_INTRINSICS
    lo = np.asarray(config.box_min, dtype=float)
    hi = np.asarray(config.box_max, dtype=float)
    landmarks = rng.uniform(lo, hi, size=(config.n_landmarks, 3))

    imu, true_bias = synth_imu(truth, config, rng)

    frame_dt = 1.0 / config.frame_rate
    h_read = intr.height * config.line_delay
    frame_times = np.arange(0.0, config.duration - 1e-9, frame_dt)
    frame_times = frame_times[frame_times + h_read <= config.duration]

    frames = []
    warnings = []
    any_visible = False
    for t in frame_times:
        ids, pix, bad, _ = synth_rs_frame(
            truth, extrinsic, intr, landmarks, t, config.line_delay,
            rng=rng, pixel_noise=config.pixel_noise)
        frames.append((float(t), ids, pix))
        any_visible |= len(ids) > 0
        if len(ids) < config.min_tracks:
            warnings.append("frame %.6f has only %d visible landmarks"
                            % (t, len(ids)))
    if not any_visible:
        raise RuntimeError("no landmark visible in any frame; check the "
                           "placement volume")

    gt_R, gt_p = truth.pose(frame_times)
    return SimOutput(config, truth, extrinsic, intr, landmarks, imu,
                     true_bias, frames, frame_times, gt_R, gt_p,
                     warnings)
