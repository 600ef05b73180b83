"""
Rotation and vector algebra on SO(3).

Rotations are plain ``(3, 3)`` numpy arrays (direction cosine matrices mapping
body-frame vectors into the absolute frame) and rotation vectors are ``(3,)``
arrays in radians. No quaternion or Euler-angle representation is used.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

SMALL_ANGLE = 1e-7
ORTHONORMAL_TOL = 1e-9


class RotationError(ValueError):
    """Raised when a matrix is not a valid rotation."""


def skew(v: ArrayLike) -> NDArray[np.float64]:
    """
    Skew-symmetric cross product matrix, so that ``skew(v) @ w == cross(v, w)``.
    """
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: ArrayLike) -> NDArray[np.float64]:
    """Inverse of :func:`skew` applied to the antisymmetric part of `m`."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def exp_so3(phi: ArrayLike) -> NDArray[np.float64]:
    """
    Exponential map from a rotation vector to a rotation matrix.

    Parameters
    ----------
    phi : array-like, shape (3,)
        Rotation vector in radians. Its direction is the rotation axis and its
        norm the rotation angle.

    Returns
    -------
    numpy.ndarray, shape (3, 3)
        Direction cosine matrix.
    """
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    k = skew(phi)
    return np.eye(3) + a * k + b * (k @ k)


def exp_so3_many(phis: ArrayLike) -> NDArray[np.float64]:
    """Vectorized :func:`exp_so3` over rotation vectors of shape ``(..., 3)``."""
    phis = np.asarray(phis, dtype=float)
    theta2 = np.einsum("...i,...i->...", phis, phis)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    x, y, z = phis[..., 0], phis[..., 1], phis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2
    )
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def check_rotation(c: ArrayLike, tol: float = ORTHONORMAL_TOL) -> NDArray[np.float64]:
    """Return `c` as an array, raising :class:`RotationError` if it is not in SO(3)."""
    c = np.asarray(c, dtype=float)
    if c.shape != (3, 3) or not np.all(np.isfinite(c)):
        raise RotationError(f"expected a finite 3x3 matrix, got shape {c.shape}")
    if np.max(np.abs(c @ c.T - np.eye(3))) > tol:
        raise RotationError("matrix is not orthonormal")
    if abs(np.linalg.det(c) - 1.0) > tol:
        raise RotationError("matrix determinant is not +1")
    return c


def is_rotation(c: ArrayLike, tol: float = ORTHONORMAL_TOL) -> bool:
    try:
        check_rotation(c, tol)
    except RotationError:
        return False
    return True


def log_so3(c: ArrayLike, tol: float = ORTHONORMAL_TOL) -> NDArray[np.float64]:
    """
    Logarithmic map from a rotation matrix to a rotation vector.

    The returned angle lies in ``[0, pi]``. Close to ``pi`` the axis is
    recovered from the symmetric part of the matrix, with its sign taken from
    the antisymmetric part.

    Raises
    ------
    RotationError
        If `c` violates the orthonormality tolerance `tol`.
    """
    c = check_rotation(c, tol)
    w = vee(c)
    s = np.linalg.norm(w)
    cos_theta = 0.5 * (np.trace(c) - 1.0)
    theta = np.arctan2(s, cos_theta)

    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if cos_theta > -0.9:
        return w * (theta / s)

    # near pi: sin(theta) carries too little precision for the axis
    aat = (0.5 * (c + c.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    col = int(np.argmax(np.diag(aat)))
    axis = aat[:, col] / np.sqrt(aat[col, col])
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def orthonormalize(c: ArrayLike) -> NDArray[np.float64]:
    """Project a nearly orthonormal matrix back onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(c, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rotation_angle(c_a: ArrayLike, c_b: ArrayLike) -> float:
    """Angle in radians of the rotation taking `c_a` to `c_b`."""
    return float(np.linalg.norm(log_so3(np.asarray(c_a).T @ np.asarray(c_b))))
