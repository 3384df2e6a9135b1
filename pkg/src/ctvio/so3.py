"""Minimal SO(3) toolbox: exp/log maps, skew operators and right Jacobians.

Rotations are plain 3x3 numpy arrays throughout. Batched variants operate on
arrays of shape (N, 3) / (N, 3, 3) and are used by the spline hot path.
"""

import numpy as np

# Below this angle the Rodrigues coefficients switch to their Taylor series.
SMALL_ANGLE = 1e-8

_EYE3 = np.eye(3)


def skew(v):
    """Skew-symmetric matrix such that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(M, tol=1e-9):
    """Inverse of skew. Rejects matrices that are not antisymmetric."""
    M = np.asarray(M, dtype=float)
    if np.max(np.abs(M + M.T)) > tol:
        raise ValueError("vee: input is not antisymmetric within %g" % tol)
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def exp(phi):
    """Exponential map of a rotation vector (Rodrigues formula)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < SMALL_ANGLE:
        # second-order Taylor expansion, C^1 across the switch
        return _EYE3 + S + 0.5 * (S @ S)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return _EYE3 + a * S + b * (S @ S)


def _check_rotation(R, tol):
    err = np.max(np.abs(R @ R.T - _EYE3))
    if err > tol or np.linalg.det(R) < 0.0:
        raise ValueError(
            "log: input is not a rotation matrix (orthonormality residual %.3g)" % err)


def log(R, tol=1e-6):
    """Principal logarithm of a rotation matrix, ||result|| <= pi.

    For angles at pi the sign is fixed so the last nonzero component of the
    result is nonnegative.
    """
    R = np.asarray(R, dtype=float)
    _check_rotation(R, tol)
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < SMALL_ANGLE:
        return vee(0.5 * (R - R.T), tol=np.inf)
    if np.pi - angle < 1e-6:
        # stable branch near trace = -1: axis from the symmetric part
        B = 0.5 * (R + _EYE3)  # = axis axis^T near pi
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        # recover signs from off-diagonals relative to the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            for j in range(3):
                if j != k:
                    axis[j] = B[j, k] / axis[k] * np.sign(1.0)
        axis /= np.linalg.norm(axis)
        # principal-value sign convention: last nonzero component nonnegative
        nz = np.nonzero(np.abs(axis) > 1e-12)[0]
        if len(nz) and axis[nz[-1]] < 0.0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * vee(R - R.T, tol=np.inf)


def right_jacobian(phi):
    """Right Jacobian Jr of SO(3): exp(phi + d) ~ exp(phi) exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < SMALL_ANGLE:
        return _EYE3 - 0.5 * S + (S @ S) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return _EYE3 - c1 * S + c2 * (S @ S)


def right_jacobian_inv(phi):
    """Inverse of the right Jacobian."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < SMALL_ANGLE:
        return _EYE3 + 0.5 * S + (S @ S) / 12.0
    c = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return _EYE3 + 0.5 * S + c * (S @ S)


# ---------------------------------------------------------------------------
# batched variants (leading axis N)
# ---------------------------------------------------------------------------

def skew_batch(v):
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _rodrigues_coeffs(angle, small):
    """(sin a / a, (1-cos a)/a^2) with Taylor fallback."""
    a2 = angle * angle
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.where(small, 1.0 - a2 / 6.0, np.sin(angle) / angle)
        cb = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(angle)) / a2)
    return ca, cb


def exp_batch(phi):
    """Rodrigues formula over an (N, 3) stack of rotation vectors."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=1)
    small = angle < SMALL_ANGLE
    S = skew_batch(phi)
    SS = S @ S
    ca, cb = _rodrigues_coeffs(angle, small)
    return _EYE3[None] + ca[:, None, None] * S + cb[:, None, None] * SS


def log_batch(R):
    """Principal logarithm over an (N, 3, 3) stack (angles away from pi)."""
    R = np.asarray(R, dtype=float)
    trace = np.clip((R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    w = np.stack([R[:, 2, 1] - R[:, 1, 2],
                  R[:, 0, 2] - R[:, 2, 0],
                  R[:, 1, 0] - R[:, 0, 1]], axis=1)
    small = angle < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5 + angle * angle / 12.0,
                         angle / (2.0 * np.sin(angle)))
    return scale[:, None] * w


def right_jacobian_batch(phi):
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=1)
    small = angle < SMALL_ANGLE
    S = skew_batch(phi)
    SS = S @ S
    a2 = angle * angle
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(angle)) / a2)
        c2 = np.where(small, 1.0 / 6.0 - a2 / 120.0,
                      (angle - np.sin(angle)) / (a2 * angle))
    return (_EYE3[None] - c1[:, None, None] * S + c2[:, None, None] * SS)


def right_jacobian_inv_batch(phi):
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=1)
    small = angle < SMALL_ANGLE
    S = skew_batch(phi)
    SS = S @ S
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(small, 1.0 / 12.0 + angle * angle / 720.0,
                     1.0 / (angle * angle)
                     - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle)))
    return _EYE3[None] + 0.5 * S + c[:, None, None] * SS
