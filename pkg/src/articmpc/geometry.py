"""Rotation and pose utilities.

Quaternions are stored scalar-first ``(w, x, y, z)`` and canonicalized to
``w >= 0``. Functions accept a single item or a leading batch dimension.
"""
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    r = a - TWO_PI * np.floor((a + np.pi) / TWO_PI)
    r = np.where(r == -np.pi, np.pi, r)
    return r if r.ndim else float(r)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def canonical_quat(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def matrix_from_quat(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_matrix(R):
    """Shepperd's method, batched: use the best-conditioned of four branches."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    m = R.reshape(-1, 3, 3)
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    choice = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)
    s = 2.0 * np.sqrt(np.maximum(1.0 + np.stack(
        [tr, m00 - m11 - m22, m11 - m00 - m22, m22 - m00 - m11], axis=1), 1e-300))
    rows = np.arange(m.shape[0])
    s = s[rows, choice]
    cand = np.stack([
        np.stack([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s], axis=1),
        np.stack([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s], axis=1),
        np.stack([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s], axis=1),
        np.stack([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s], axis=1),
    ], axis=1)
    q = cand[rows, choice]
    return canonical_quat(q).reshape(batch + (4,))


def rotvec_from_quat(q):
    """Rotation vector with angle in [0, pi]; antipodal sign resolved by w >= 0."""
    q = canonical_quat(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    w = q[..., 0]
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    scale = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return v * scale[..., None]


def quat_from_rotvec(r):
    r = np.asarray(r, dtype=np.float64)
    angle = np.linalg.norm(r, axis=-1)
    half = 0.5 * angle
    small = angle < 1e-12
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    q = np.concatenate([np.cos(half)[..., None], r * k[..., None]], axis=-1)
    return canonical_quat(q)


def matrix_from_rotvec(r):
    """Rodrigues formula."""
    r = np.asarray(r, dtype=np.float64)
    angle = np.linalg.norm(r, axis=-1)
    small = angle < 1e-12
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle**2 / 6.0, np.sin(angle) / safe)
    b = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(angle)) / safe**2)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def axis_angle_matrix(axis, angle):
    """Rotation about a unit axis; ``angle`` may be an array."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    K = skew(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def rpy_matrix(rpy):
    """Fixed-axis roll-pitch-yaw: R = Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def box_minus(desired, measured):
    """Rotation vector of desired^-1 * measured (tangent-space orientation error)."""
    rel = quat_mul(quat_conj(desired), measured)
    return rotvec_from_quat(rel)


def right_jacobian_inverse(phi):
    """Inverse right Jacobian of SO(3), batched over leading dims."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    # the closed form is singular at pi; the solver only needs a bounded local model
    th = np.minimum(theta, np.pi - 1e-3)
    small = th < 1e-6
    safe = np.where(small, 1.0, th)
    coef = np.where(
        small,
        1.0 / 12.0 + th**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + coef[..., None, None] * (K @ K)


def slerp(q0, q1, s):
    q0 = canonical_quat(q0)
    q1 = canonical_quat(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    if d > 1.0 - 1e-12:
        return canonical_quat(q0 + s * (q1 - q0))
    omega = np.arccos(min(d, 1.0))
    so = np.sin(omega)
    return canonical_quat((np.sin((1 - s) * omega) * q0 + np.sin(s * omega) * q1) / so)


def rotation_angle(R):
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


@dataclass
class Pose:
    """Position (m) and unit quaternion orientation (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = canonical_quat(np.asarray(self.orientation, dtype=np.float64).reshape(4))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, 3].copy(), quat_from_matrix(T[:3, :3]))

    @classmethod
    def from_rotation(cls, position, R):
        return cls(position, quat_from_matrix(R))

    @property
    def rotation(self):
        return matrix_from_quat(self.orientation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def __repr__(self):
        p = np.array2string(self.position, precision=4)
        q = np.array2string(self.orientation, precision=4)
        return f"Pose(position={p}, orientation={q})"
