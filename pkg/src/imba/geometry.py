"""SE(3) poses, pinhole projection with analytic Jacobians, triangulation,
and epipolar primitives.

Conventions used throughout the library:
  - Poses map world points into the camera frame: x_cam = R @ x_world + t.
  - Quaternions are unit, ordered (w, x, y, z).
  - Pixels are length-2 float arrays (u, v); origin top-left, +u right, +v down.
  - Twists are 6-vectors (omega, v) with the rotation part first, applied as a
    left-multiplicative perturbation: T' = exp(twist) * T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, CheiralityViolation, LowParallax

MIN_DEPTH = 1e-9
DEFAULT_MIN_PARALLAX = math.radians(1.5)


def pixel(u, v):
    """Convenience constructor for a pixel coordinate array."""
    return np.array([float(u), float(v)])


def skew(v):
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_multiply(q1, q2):
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    """Shepperd's method, stable for all rotation matrices."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def so3_exp(omega):
    """Rotation matrix from an axis-angle 3-vector."""
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = skew(omega)
    if theta < 1e-8:
        # Taylor: sin(t)/t and (1-cos(t))/t^2
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Axis-angle 3-vector from a rotation matrix (angle < pi)."""
    q = quat_from_matrix(R)
    n = np.linalg.norm(q[1:])
    if n < 1e-12:
        return 2.0 * q[1:] / q[0]
    theta = 2.0 * math.atan2(n, q[0])
    return q[1:] * (theta / n)


def _so3_left_jacobian(omega):
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = skew(omega)
    if theta < 1e-6:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - math.cos(theta)) / theta2
        c = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * W + c * (W @ W)


def _so3_left_jacobian_inv(omega):
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = skew(omega)
    if theta < 1e-6:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * W + c * (W @ W)


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform mapping world points to the camera frame.

    Treated as an immutable value; the stored arrays must not be mutated.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        q = q / np.linalg.norm(q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).copy())

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(quat_from_matrix(np.asarray(R, dtype=float)), t)

    @classmethod
    def exp(cls, twist):
        """SE(3) exponential of a (omega, v) twist."""
        twist = np.asarray(twist, dtype=float)
        omega, v = twist[:3], twist[3:]
        R = so3_exp(omega)
        t = _so3_left_jacobian(omega) @ v
        return cls.from_rt(R, t)

    def log(self):
        """Twist (omega, v) with exp(log(T)) == T for angles < pi."""
        R = self.rotation()
        omega = so3_log(R)
        v = _so3_left_jacobian_inv(omega) @ self.t
        return np.concatenate([omega, v])

    def rotation(self):
        return quat_to_matrix(self.q)

    def matrix34(self):
        M = np.empty((3, 4))
        M[:, :3] = self.rotation()
        M[:, 3] = self.t
        return M

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """self after other: (self * other)(x) = self(other(x))."""
        q = quat_multiply(self.q, other.q)
        t = self.rotation() @ other.t + self.t
        return SE3Pose(q, t)

    def __mul__(self, other):
        return self.compose(other)

    def inverse(self) -> "SE3Pose":
        qinv = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return SE3Pose(qinv, -(self.rotation().T @ self.t))

    def transform(self, p):
        """World point(s) into the camera frame. Accepts (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.rotation() @ p + self.t
        return p @ self.rotation().T + self.t

    def center(self):
        """Camera center in world coordinates."""
        return -(self.rotation().T @ self.t)

    def perturbed(self, twist) -> "SE3Pose":
        """Left-multiplicative update exp(twist) * self."""
        return SE3Pose.exp(twist).compose(self)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def normalize(self, uv):
        """Pixel -> normalized homogeneous coordinates (x, y, 1)."""
        uv = np.asarray(uv, dtype=float)
        return np.array([(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0])

    def mean_focal(self):
        return 0.5 * (self.fx + self.fy)


def project(p, T: SE3Pose, K: Intrinsics):
    """Pinhole projection of a world point; raises BehindCamera for z <= 1e-9."""
    x = T.transform(p)
    if x[2] <= MIN_DEPTH:
        raise BehindCamera(f"depth {x[2]:.3e} behind camera")
    return np.array([K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy])


def project_batch(points, T: SE3Pose, K: Intrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,)); callers handle non-positive depths.
    """
    x = T.transform(points)
    z = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * x[:, 0] / z + K.cx
        v = K.fy * x[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def _pinhole_jacobian(x, K: Intrinsics):
    # d(u,v)/d(x_cam) at camera-frame point x
    z = x[2]
    return np.array([
        [K.fx / z, 0.0, -K.fx * x[0] / (z * z)],
        [0.0, K.fy / z, -K.fy * x[1] / (z * z)],
    ])


def project_jacobians(p, T: SE3Pose, K: Intrinsics):
    """Analytic derivatives of the projected pixel.

    Returns (J_pose (2, 6), J_point (2, 3)). J_pose is with respect to a
    left-multiplicative twist (omega, v) on T; J_point with respect to the
    world point.
    """
    R = T.rotation()
    x = R @ np.asarray(p, dtype=float) + T.t
    if x[2] <= MIN_DEPTH:
        raise BehindCamera(f"depth {x[2]:.3e} behind camera")
    Jpi = _pinhole_jacobian(x, K)
    # x(eps) = exp(eps) * x ~ x + omega x x + v  =>  d x / d omega = -skew(x)
    J_pose = np.hstack([Jpi @ (-skew(x)), Jpi])
    J_point = Jpi @ R
    return J_pose, J_point


def back_project_ray(uv, T: SE3Pose, K: Intrinsics):
    """World-frame (origin, unit direction) of the viewing ray through a pixel."""
    d_cam = K.normalize(uv)
    d = T.rotation().T @ d_cam
    return T.center(), d / np.linalg.norm(d)


def triangulation_angle(u1, u2, T1: SE3Pose, T2: SE3Pose, K: Intrinsics):
    """Angle between the two viewing rays at their midpoint-intersection estimate."""
    c1, d1 = back_project_ray(u1, T1, K)
    c2, d2 = back_project_ray(u2, T2, K)
    # closest-point parameters on the two rays
    b = c2 - c1
    d11, d12, d22 = d1 @ d1, d1 @ d2, d2 @ d2
    det = d11 * d22 - d12 * d12
    if det < 1e-14:
        return 0.0  # parallel or identical rays
    s = (d22 * (d1 @ b) - d12 * (d2 @ b)) / det
    u = (d12 * (d1 @ b) - d11 * (d2 @ b)) / det
    X = 0.5 * (c1 + s * d1 + c2 + u * d2)
    a = X - c1
    bb = X - c2
    na, nb = np.linalg.norm(a), np.linalg.norm(bb)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return math.atan2(np.linalg.norm(np.cross(a, bb)), float(a @ bb))


def _refine_point(p, observations, K: Intrinsics, iterations=10):
    """Gauss-Newton refinement of a 3D point against pixel observations.

    observations: list of (SE3Pose, pixel). Steps that increase the cost or
    push the point behind a camera are halved; the best iterate is returned.
    """
    p = np.asarray(p, dtype=float).copy()

    def cost(pt):
        c = 0.0
        for T, uv in observations:
            x = T.transform(pt)
            if x[2] <= MIN_DEPTH:
                return None
            r = uv - np.array([K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy])
            c += float(r @ r)
        return c

    current = cost(p)
    if current is None:
        return p
    for _ in range(iterations):
        H = np.zeros((3, 3))
        g = np.zeros(3)
        for T, uv in observations:
            _, Jp = project_jacobians(p, T, K)
            r = uv - project(p, T, K)
            H += Jp.T @ Jp
            g += Jp.T @ r
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        for _ in range(6):
            trial = cost(p + step * delta)
            if trial is not None and trial <= current:
                p = p + step * delta
                current = trial
                break
            step *= 0.5
        else:
            break
        if np.linalg.norm(step * delta) < 1e-14:
            break
    return p


def triangulate_nview(pixels, poses, K: Intrinsics, min_parallax=DEFAULT_MIN_PARALLAX,
                      refine=True):
    """DLT triangulation from >= 2 views plus Gauss-Newton refinement.

    Raises LowParallax when the largest angle subtended at the solution is
    below min_parallax and CheiralityViolation when the point ends up behind
    any camera.
    """
    if len(pixels) < 2:
        raise ValueError("need at least two views")
    Km = K.matrix()
    A = np.empty((2 * len(pixels), 4))
    for i, (uv, T) in enumerate(zip(pixels, poses)):
        P = Km @ T.matrix34()
        A[2 * i] = uv[0] * P[2] - P[0]
        A[2 * i + 1] = uv[1] * P[2] - P[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise LowParallax("triangulated point at infinity")
    p = X[:3] / X[3]

    centers = [T.center() for T in poses]
    best_angle = 0.0
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            a, b = p - centers[i], p - centers[j]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na < 1e-12 or nb < 1e-12:
                continue
            ang = math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b))
            best_angle = max(best_angle, ang)
    if best_angle < min_parallax:
        raise LowParallax(f"max parallax {math.degrees(best_angle):.3f} deg")

    if refine:
        p = _refine_point(p, list(zip(poses, pixels)), K)
    for T in poses:
        if T.transform(p)[2] <= MIN_DEPTH:
            raise CheiralityViolation("point behind camera after triangulation")
    return p


def triangulate(u1, u2, T1: SE3Pose, T2: SE3Pose, K: Intrinsics,
                min_parallax=DEFAULT_MIN_PARALLAX):
    """Two-view triangulation: DLT followed by two-view Gauss-Newton refinement.

    The parallax precondition is checked with the midpoint-method ray angle.
    """
    angle = triangulation_angle(u1, u2, T1, T2, K)
    if angle < min_parallax:
        raise LowParallax(f"parallax {math.degrees(angle):.3f} deg below threshold")
    return triangulate_nview([u1, u2], [T1, T2], K, min_parallax=0.0)


def essential_from_pose(T_rel: SE3Pose):
    """Essential matrix of the relative pose mapping frame-1 coords to frame-2."""
    return skew(T_rel.t) @ T_rel.rotation()


def sampson_epipolar_distance(u1, u2, E, K: Intrinsics):
    """First-order Sampson approximation of the epipolar distance, in pixels^2.

    Computed in normalized camera coordinates and scaled back to pixel units
    by the mean focal length.
    """
    x1 = K.normalize(u1)
    x2 = K.normalize(u2)
    Ex1 = E @ x1
    Etx2 = E.T @ x2
    r = float(x2 @ Ex1)
    den = Ex1[0] ** 2 + Ex1[1] ** 2 + Etx2[0] ** 2 + Etx2[1] ** 2
    den = max(den, 1e-18)
    f = K.mean_focal()
    return (r * r / den) * f * f
