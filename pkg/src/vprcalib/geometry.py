"""SE(3) arithmetic on unit quaternions and translations.

Twists are ordered ``(rho, phi)``: translational part first, rotation vector
second.  Optimizer updates are left-multiplicative, ``X <- exp(delta) @ X``.

Two layers live here.  :class:`Pose` and the free functions ``compose``,
``between``, ``exp``, ``log`` operate on single immutable poses.  The
``so3_*`` / ``se3_*`` helpers are batched over leading axes of rotation
matrices and are what the optimizer uses on whole graphs at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NearPiRotation

# Below this rotation angle exp/log switch to truncated Taylor series.
SERIES_ANGLE = 1e-8
# Coefficients of the SE(3) Jacobians lose precision to cancellation much
# earlier, so they get their own (wider) series region.
_JAC_SERIES_ANGLE = 0.05
# log() is only defined for rotation angles strictly below pi - this margin.
PI_MARGIN = 1e-6


def hat(v):
    """Skew-symmetric matrix of a 3-vector, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# --------------------------------------------------------------------------
# quaternion helpers, (w, x, y, z) order
# --------------------------------------------------------------------------


def _canonical(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    # leave already-unit quaternions untouched so re-canonicalizing is exact
    q = np.where(np.abs(n - 1.0) <= 4e-16, q, q / n)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    out = np.empty(np.shape(w) + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Shepperd's method, batched.  Returns canonical (w >= 0) quaternions."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = m00 + m11 + m22
    cand = np.stack([trace, m00, m11, m22], axis=-1)
    pick = np.argmax(cand, axis=-1)

    # each branch divides by the largest component, so it is well conditioned
    s = np.sqrt(np.maximum(1.0 + trace, 0.0)) * 2
    s = np.where(pick == 0, s, 1.0)
    q0 = np.stack(
        [
            0.25 * s,
            (R[..., 2, 1] - R[..., 1, 2]) / s,
            (R[..., 0, 2] - R[..., 2, 0]) / s,
            (R[..., 1, 0] - R[..., 0, 1]) / s,
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2
    s = np.where(pick == 1, s, 1.0)
    q1 = np.stack(
        [
            (R[..., 2, 1] - R[..., 1, 2]) / s,
            0.25 * s,
            (R[..., 0, 1] + R[..., 1, 0]) / s,
            (R[..., 0, 2] + R[..., 2, 0]) / s,
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0)) * 2
    s = np.where(pick == 2, s, 1.0)
    q2 = np.stack(
        [
            (R[..., 0, 2] - R[..., 2, 0]) / s,
            (R[..., 0, 1] + R[..., 1, 0]) / s,
            0.25 * s,
            (R[..., 1, 2] + R[..., 2, 1]) / s,
        ],
        axis=-1,
    )
    s = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0)) * 2
    s = np.where(pick == 3, s, 1.0)
    q3 = np.stack(
        [
            (R[..., 1, 0] - R[..., 0, 1]) / s,
            (R[..., 0, 2] + R[..., 2, 0]) / s,
            (R[..., 1, 2] + R[..., 2, 1]) / s,
            0.25 * s,
        ],
        axis=-1,
    )
    sel = pick[..., None]
    q = np.where(sel == 0, q0, np.where(sel == 1, q1, np.where(sel == 2, q2, q3)))
    return _canonical(q)


def _quat_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SERIES_ANGLE
    th = np.where(small, 1.0, theta)
    half_sinc = np.where(small, 0.5 - theta**2 / 48.0, np.sin(th / 2) / th)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(th / 2))
    return _canonical(np.concatenate([w[..., None], half_sinc[..., None] * phi], axis=-1))


def _quat_log(q, check=True):
    q = _canonical(q)
    w = q[..., 0]
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(vn, w)
    if check and np.any(theta >= np.pi - PI_MARGIN):
        raise NearPiRotation(f"rotation angle {np.max(theta):.12g} too close to pi")
    small = vn < 0.5 * SERIES_ANGLE
    scale = np.where(small, 2.0 / w * (1.0 - vn**2 / (3.0 * w**2)), theta / np.where(small, 1.0, vn))
    return scale[..., None] * v


# --------------------------------------------------------------------------
# batched SO(3) / SE(3)
# --------------------------------------------------------------------------


def so3_exp(phi):
    return quat_to_matrix(_quat_exp(phi))


def so3_log(R, check=True):
    return _quat_log(matrix_to_quat(R), check=check)


def _coeffs(theta):
    """Coefficients of the SO(3)/SE(3) left Jacobians and their inverses."""
    small = theta < _JAC_SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta**2
    t4 = t2 * t2
    t6 = t4 * t2
    a = np.where(small, 0.5 - t2 / 24 + t4 / 720 - t6 / 40320, (1 - np.cos(t)) / t**2)
    b = np.where(small, 1 / 6 - t2 / 120 + t4 / 5040 - t6 / 362880, (t - np.sin(t)) / t**3)
    cinv = np.where(
        small,
        1 / 12 + t2 / 720 + t4 / 30240 + t6 / 1209600,
        1 / t**2 - (1 + np.cos(t)) / (2 * t * np.sin(t)),
    )
    c2 = np.where(
        small,
        1 / 24 - t2 / 720 + t4 / 40320 - t6 / 3628800,
        (t**2 + 2 * np.cos(t) - 2) / (2 * t**4),
    )
    c3 = np.where(
        small,
        1 / 120 - t2 / 2520 + t4 / 120960 - t6 / 9979200,
        (2 * t - 3 * np.sin(t) + t * np.cos(t)) / (2 * t**5),
    )
    return a, b, cinv, c2, c3


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    a, b, *_ = _coeffs(np.linalg.norm(phi, axis=-1))
    P = hat(phi)
    return np.eye(3) + a[..., None, None] * P + b[..., None, None] * (P @ P)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    _, _, cinv, _, _ = _coeffs(np.linalg.norm(phi, axis=-1))
    P = hat(phi)
    return np.eye(3) - 0.5 * P + cinv[..., None, None] * (P @ P)


def _se3_q(rho, phi):
    _, b, _, c2, c3 = _coeffs(np.linalg.norm(phi, axis=-1))
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    b, c2, c3 = (c[..., None, None] for c in (b, c2, c3))
    return (
        0.5 * Rh
        + b * (PR + RP + PRP)
        + c2 * (PP @ Rh + RP @ P - 3 * PRP)
        + c3 * (PRP @ P + PP @ Rh @ P)
    )


def se3_exp(xi):
    """Twist(s) ``(rho, phi)`` to ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return so3_exp(phi), t


def se3_log(R, t, check=True):
    phi = so3_log(R, check=check)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), t)
    return np.concatenate([rho, phi], axis=-1)


def se3_left_jacobian_inv(xi):
    """Inverse left Jacobian of SE(3), ``(..., 6, 6)``, for ``(rho, phi)`` twists."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., :3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_adjoint(R, t):
    """Adjoint of ``(R, t)`` acting on ``(rho, phi)`` twists."""
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = hat(t) @ R
    return out


# --------------------------------------------------------------------------
# single-pose API
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Twist:
    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:])

    def as_vector(self):
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as a canonical unit quaternion plus translation.

    ``Pose(q, t)`` maps a point ``p`` expressed in the child frame to
    ``R(q) @ p + t`` in the parent frame.  The quaternion is ``(w, x, y, z)``
    and is renormalized and sign-flipped to ``w >= 0`` on construction.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = _canonical(np.asarray(self.q, dtype=float).reshape(4))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def planar(cls, x, y, yaw):
        return cls(np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)]), [x, y, 0.0])

    @property
    def rotation(self):
        return quat_to_matrix(self.q)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def angle(self):
        """Rotation angle in radians, in ``[0, pi]``."""
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), self.q[0]))

    def inverse(self):
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def act(self, points):
        """Transform points of shape ``(3,)`` or ``(n, 3)``."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.t

    def __matmul__(self, other):
        return compose(self, other)

    def allclose(self, other, atol=1e-9):
        d = between(self, other)
        return d.angle() <= atol and float(np.linalg.norm(d.t)) <= atol

    def __repr__(self):
        q = np.array2string(self.q, precision=6)
        t = np.array2string(self.t, precision=6)
        return f"Pose(q={q}, t={t})"


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(quat_multiply(a.q, b.q), a.rotation @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """Relative pose ``a^-1 * b``, i.e. ``b`` expressed in the frame of ``a``."""
    return compose(a.inverse(), b)


def exp(xi) -> Pose:
    if isinstance(xi, Twist):
        xi = xi.as_vector()
    xi = np.asarray(xi, dtype=float)
    q = _quat_exp(xi[3:])
    t = so3_left_jacobian(xi[3:]) @ xi[:3]
    return Pose(q, t)


def log(p: Pose) -> Twist:
    phi = _quat_log(p.q)
    rho = so3_left_jacobian_inv(phi) @ p.t
    return Twist(rho, phi)


def rotation_angle_between(a: Pose, b: Pose) -> float:
    return between(a, b).angle()
