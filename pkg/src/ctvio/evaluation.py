"""Absolute pose error of an estimated trajectory against a reference.

Pose lists use the trajectory-file convention [(t, R, p)].  Estimate and
reference are associated by nearest timestamp (1 ms tolerance), aligned by a
closed-form rigid SE(3) fit (no scale), and scored by the RMSE of the
translational residuals.
"""

import numpy as np

ASSOC_TOL = 1e-3


class AssociationError(ValueError):
    pass


def associate(est_times, ref_times, tol=ASSOC_TOL):
    """Pairs (i_est, i_ref) of mutually nearest timestamps within ``tol``."""
    est_times = np.asarray(est_times)
    ref_times = np.asarray(ref_times)
    order = np.argsort(ref_times)
    sorted_ref = ref_times[order]
    pairs = []
    used = set()
    for i, t in enumerate(est_times):
        k = np.searchsorted(sorted_ref, t)
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(sorted_ref):
                d = abs(sorted_ref[j] - t)
                if d <= tol and (best is None or d < best[0]):
                    best = (d, order[j])
        if best is not None and best[1] not in used:
            used.add(best[1])
            pairs.append((i, best[1]))
    return pairs


def align_rigid(src, dst):
    """Closed-form R, t minimizing sum ||R src + t - dst||^2 (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def compute_ape(estimate, reference, tol=ASSOC_TOL):
    """Translational APE RMSE in meters after rigid SE(3) alignment."""
    pairs = associate([t for t, _, _ in estimate],
                      [t for t, _, _ in reference], tol)
    if len(pairs) < 3:
        raise AssociationError(
            "only %d timestamp associations within %.1f ms; need >= 3"
            % (len(pairs), tol * 1e3))
    est = np.array([estimate[i][2] for i, _ in pairs])
    ref = np.array([reference[j][2] for _, j in pairs])
    R, t = align_rigid(est, ref)
    res = (est @ R.T + t) - ref
    return float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))
