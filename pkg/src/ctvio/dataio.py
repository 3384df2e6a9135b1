"""Dataset file formats, trajectory output, and run configuration parsing.

Formats (all plain text):
  - IMU stream: CSV rows ``t,gx,gy,gz,ax,ay,az`` (seconds, rad/s, m/s^2),
    strictly increasing timestamps.
  - Feature tracks: CSV rows ``frame_t,feature_id,u,v``; rows of one frame
    are contiguous and frame timestamps are non-decreasing.
  - Trajectory: space-separated ``t tx ty tz qx qy qz qw`` with a
    scalar-last quaternion; the timestamp is the exposure instant of the
    first image row.
  - Calibration trace: CSV rows ``t,line_delay_us``.

Timestamps are printed with 9 decimal digits; all other floats use the
shortest exact decimal representation, so a write -> read -> write cycle is
byte-identical and lossless at double precision.
"""

import configparser
import dataclasses
import os

import numpy as np
from scipy.spatial.transform import Rotation

from .estimator import EstimatorConfig
from .sensors import ImuNoiseModel, PinholeIntrinsics
from .simulator import SimConfig
from .spline import RigidTransform

TS = "%.9f"


def fmt(x):
    """Shortest decimal that round-trips the double exactly."""
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


class FormatError(ValueError):
    pass


def _parse_floats(path, expected_cols):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != expected_cols:
                raise FormatError("%s:%d: expected %d comma-separated "
                                  "values, got %d"
                                  % (path, lineno, expected_cols, len(parts)))
            try:
                rows.append([float(x) for x in parts])
            except ValueError:
                raise FormatError("%s:%d: non-numeric field in %r"
                                  % (path, lineno, line))
    return np.array(rows) if rows else np.zeros((0, expected_cols))


# -- IMU --------------------------------------------------------------------

def write_imu(path, imu):
    with open(path, "w") as fh:
        fh.write("# t,gx,gy,gz,ax,ay,az\n")
        for row in imu:
            fh.write(TS % row[0] + ","
                     + ",".join(fmt(x) for x in row[1:7]) + "\n")


def load_imu(path):
    imu = _parse_floats(path, 7)
    for i in range(1, len(imu)):
        if imu[i, 0] <= imu[i - 1, 0]:
            raise FormatError(
                "%s: IMU timestamp %.9f at data row %d does not increase "
                "past %.9f" % (path, imu[i, 0], i + 1, imu[i - 1, 0]))
    return imu


# -- feature tracks ---------------------------------------------------------

def write_tracks(path, frames):
    """``frames``: iterable of (t, feature_ids, pixels)."""
    with open(path, "w") as fh:
        fh.write("# frame_t,feature_id,u,v\n")
        for t, ids, pix in frames:
            for f, p in zip(ids, pix):
                fh.write(TS % t + ",%d," % int(f)
                         + fmt(p[0]) + "," + fmt(p[1]) + "\n")


def load_tracks(path):
    """Group track rows into [(t, ids, pixels)] per frame."""
    raw = _parse_floats(path, 4)
    frames = []
    for i in range(len(raw)):
        t = raw[i, 0]
        if frames and t == frames[-1][0]:
            frames[-1][1].append(int(raw[i, 1]))
            frames[-1][2].append(raw[i, 2:4])
        else:
            if frames and t < frames[-1][0]:
                raise FormatError(
                    "%s: frame timestamp %.9f at data row %d precedes "
                    "%.9f" % (path, t, i + 1, frames[-1][0]))
            frames.append((t, [int(raw[i, 1])], [raw[i, 2:4]]))
    return [(t, np.array(ids), np.array(pix)) for t, ids, pix in frames]


# -- trajectories -----------------------------------------------------------

def write_trajectory(path, poses):
    """``poses``: time-ordered [(t, R, p)] with world-from-body rotations."""
    times = [t for t, _, _ in poses]
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise FormatError("trajectory timestamps not strictly "
                              "increasing at %.9f" % b)
    with open(path, "w") as fh:
        fh.write("# t tx ty tz qx qy qz qw  (quaternion scalar-last; t is "
                 "the exposure time of image row 0)\n")
        for t, R, p in poses:
            q = Rotation.from_matrix(R).as_quat()
            if q[3] < 0:
                q = -q
            fh.write(TS % t + " " + " ".join(fmt(x) for x in p)
                     + " " + " ".join(fmt(x) for x in q) + "\n")


def load_trajectory(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError("%s:%d: expected 8 fields, got %d"
                                  % (path, lineno, len(parts)))
            try:
                rows.append([float(x) for x in parts])
            except ValueError:
                raise FormatError("%s:%d: non-numeric field" % (path, lineno))
    poses = []
    for row in rows:
        if poses and row[0] <= poses[-1][0]:
            raise FormatError("%s: timestamps not strictly increasing at "
                              "%.9f" % (path, row[0]))
        R = Rotation.from_quat(row[4:8]).as_matrix()
        poses.append((row[0], R, np.array(row[1:4])))
    return poses


# -- calibration trace and solve reports ------------------------------------

def write_trace(path, trace):
    """``trace``: [(t, line_delay_seconds)]; stored in microseconds."""
    with open(path, "w") as fh:
        fh.write("# t,line_delay_us\n")
        for t, tr in trace:
            fh.write(TS % t + "," + fmt(tr * 1e6) + "\n")


def load_trace(path):
    raw = _parse_floats(path, 2)
    return [(t, tr_us * 1e-6) for t, tr_us in raw]


def write_reports(path, times, reports):
    with open(path, "w") as fh:
        fh.write("# frame_t,iterations,initial_cost,final_cost,termination\n")
        for t, rep in zip(times, reports):
            if rep is None:
                continue
            fh.write(TS % t + ",%d," % rep.iterations
                     + fmt(rep.initial_cost) + ","
                     + fmt(rep.final_cost) + ","
                     + rep.termination + "\n")


# -- dataset directories ----------------------------------------------------

@dataclasses.dataclass
class Dataset:
    imu: np.ndarray
    frames: list
    intrinsics: PinholeIntrinsics
    extrinsic: RigidTransform
    line_delay: float
    truth_path: str = None


def write_dataset(dirpath, sim_output):
    """Write a simulated dataset (IMU, tracks, metadata, ground truth)."""
    os.makedirs(dirpath, exist_ok=True)
    write_imu(os.path.join(dirpath, "imu.csv"), sim_output.imu)
    write_tracks(os.path.join(dirpath, "tracks.csv"), sim_output.frames)
    truth = [(t, R, p) for t, R, p in
             zip(sim_output.gt_times, sim_output.gt_R, sim_output.gt_p)]
    write_trajectory(os.path.join(dirpath, "truth.txt"), truth)

    meta = configparser.ConfigParser()
    intr = sim_output.intrinsics
    meta["camera"] = {k: fmt(getattr(intr, k))
                      for k in ("fx", "fy", "cx", "cy")}
    meta["camera"]["width"] = str(intr.width)
    meta["camera"]["height"] = str(intr.height)
    ex = sim_output.extrinsic
    q = Rotation.from_matrix(ex.R).as_quat()
    meta["extrinsic"] = {
        "qx": fmt(q[0]), "qy": fmt(q[1]), "qz": fmt(q[2]),
        "qw": fmt(q[3]),
        "px": fmt(ex.p[0]), "py": fmt(ex.p[1]), "pz": fmt(ex.p[2])}
    meta["dataset"] = {"line_delay": fmt(sim_output.config.line_delay),
                       "truth": "truth.txt"}
    meta["simulation"] = {f.name: _format_value(
        getattr(sim_output.config, f.name))
        for f in dataclasses.fields(sim_output.config)}
    with open(os.path.join(dirpath, "dataset.ini"), "w") as fh:
        meta.write(fh)


def load_dataset(dirpath):
    meta_path = os.path.join(dirpath, "dataset.ini")
    if not os.path.exists(meta_path):
        raise FormatError("no dataset.ini in %s" % dirpath)
    meta = configparser.ConfigParser()
    meta.read(meta_path)
    cam = meta["camera"]
    intr = PinholeIntrinsics(cam.getfloat("fx"), cam.getfloat("fy"),
                             cam.getfloat("cx"), cam.getfloat("cy"),
                             cam.getint("width"), cam.getint("height"))
    exs = meta["extrinsic"]
    R = Rotation.from_quat([exs.getfloat("qx"), exs.getfloat("qy"),
                            exs.getfloat("qz"), exs.getfloat("qw")]
                           ).as_matrix()
    p = np.array([exs.getfloat("px"), exs.getfloat("py"),
                  exs.getfloat("pz")])
    truth = meta["dataset"].get("truth")
    truth_path = os.path.join(dirpath, truth) if truth else None
    return Dataset(load_imu(os.path.join(dirpath, "imu.csv")),
                   load_tracks(os.path.join(dirpath, "tracks.csv")),
                   intr, RigidTransform(R, p),
                   meta["dataset"].getfloat("line_delay"), truth_path)


# -- run configuration ------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    sim: SimConfig
    estimator: EstimatorConfig
    output_dir: str = "."


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, tuple):
        return ", ".join(fmt(x) for x in v)
    return str(v)


def _convert(raw, default):
    if isinstance(default, bool):
        v = raw.strip().lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise FormatError("invalid boolean %r" % raw)
        return v in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def _fill_dataclass(cls, section, skip=()):
    """Instantiate ``cls`` from a config section, rejecting unknown keys."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, raw in section.items():
        if key not in names:
            raise FormatError("unknown key %r in section [%s]"
                              % (key, section.name))
        kwargs[key] = _convert(raw, getattr(defaults, key))
    return dataclasses.replace(defaults, **kwargs)


NOISE_KEYS = {f.name for f in dataclasses.fields(ImuNoiseModel)}


def parse_run_config(path):
    if not os.path.exists(path):
        raise FormatError("config file %s does not exist" % path)
    parser = configparser.ConfigParser()
    parser.read(path)
    known_sections = {"simulation", "estimator", "output"}
    for section in parser.sections():
        if section not in known_sections:
            raise FormatError("unknown section [%s] in %s" % (section, path))

    sim = SimConfig()
    if parser.has_section("simulation"):
        sim = _fill_dataclass(SimConfig, parser["simulation"])

    est = EstimatorConfig()
    if parser.has_section("estimator"):
        section = parser["estimator"]
        noise_kwargs = {}
        rest = {}
        for key, raw in section.items():
            if key in NOISE_KEYS:
                noise_kwargs[key] = float(raw)
            else:
                rest[key] = raw
        names = {f.name for f in dataclasses.fields(EstimatorConfig)}
        names.discard("noise")
        kwargs = {}
        for key, raw in rest.items():
            if key not in names:
                raise FormatError("unknown key %r in section [estimator]"
                                  % key)
            kwargs[key] = _convert(raw, getattr(est, key))
        est = dataclasses.replace(est, noise=ImuNoiseModel(**noise_kwargs),
                                  **kwargs)

    output_dir = "."
    if parser.has_section("output"):
        for key, raw in parser["output"].items():
            if key != "directory":
                raise FormatError("unknown key %r in section [output]" % key)
            output_dir = raw
    return RunConfig(sim, est, output_dir)
