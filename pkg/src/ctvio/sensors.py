"""Pinhole camera with rolling-shutter row timing, plus the IMU noise model.

Pixel convention: rows are counted from the top of the image, zero-based; the
frame timestamp is the exposure instant of row 0 and row v exposes at
t + v * line_delay.  Non-integral row coordinates are used as-is.
"""

from dataclasses import dataclass

import numpy as np

# world-frame gravity, +z up
GRAVITY = np.array([0.0, 0.0, 9.8])

MIN_DEPTH = 1e-6  # cheirality limit for projection


class CheiralityError(ValueError):
    pass


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def back_project(self, pixel):
        """Pixel -> point on the normalized image plane (z = 1)."""
        u, v = pixel
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def project(self, point):
        """Camera-frame 3D point -> pixel. Raises for points at/behind z=0."""
        x, y, z = point
        if z <= MIN_DEPTH:
            raise CheiralityError("point depth %.3g is not in front of camera" % z)
        return np.array([self.fx * x / z + self.cx, self.fy * y / z + self.cy])

    def project_batch(self, points):
        """Vectorized projection; returns (pixels, valid_mask)."""
        points = np.asarray(points, dtype=float)
        z = points[:, 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)
        pix = np.stack([self.fx * points[:, 0] / zs + self.cx,
                        self.fy * points[:, 1] / zs + self.cy], axis=1)
        return pix, valid

    def in_image(self, pixel, margin=0.0):
        u, v = pixel
        return (margin <= u <= self.width - 1 - margin
                and margin <= v <= self.height - 1 - margin)


@dataclass(frozen=True)
class LineDelay:
    """Seconds of exposure offset between two adjacent image rows."""
    t_r: float

    def validate(self, height, frame_period):
        if self.t_r < 0:
            raise ValueError("line delay must be nonnegative")
        if self.t_r * height >= frame_period:
            raise ValueError(
                "rows take %.6f s to read out but frames arrive every %.6f s"
                % (self.t_r * height, frame_period))


def row_time(frame_time, row, t_r, height=None):
    """Exposure time of (possibly fractional) row ``row``: t_i + row * t_r."""
    if height is not None and not (0 <= row < height):
        raise ValueError("row %.2f outside image of height %d" % (row, height))
    return frame_time + row * t_r


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time white-noise and random-walk densities of the IMU."""
    gyro_noise_density: float = 1.7e-4   # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1.0e-5       # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1.0e-4      # m/s^3/sqrt(Hz)
    rate: float = 90.0

    def __post_init__(self):
        vals = (self.gyro_noise_density, self.accel_noise_density,
                self.gyro_bias_walk, self.accel_bias_walk)
        if any(v < 0 for v in vals) or self.rate <= 0:
            raise ValueError("noise densities must be >= 0 and rate > 0")

    def discrete_gyro_sigma(self):
        return self.gyro_noise_density * np.sqrt(self.rate)

    def discrete_accel_sigma(self):
        return self.accel_noise_density * np.sqrt(self.rate)

    def bias_walk_cov(self, dt):
        """6x6 diagonal covariance of the bias increment over dt seconds."""
        dt = max(dt, 1e-12)
        return np.diag([self.gyro_bias_walk ** 2 * dt] * 3
                       + [self.accel_bias_walk ** 2 * dt] * 3)
