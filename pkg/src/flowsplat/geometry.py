"""Pinhole camera model, SE(3) poses, and reprojection-induced optical flow.

Conventions used throughout the package:

* pixel centers sit at integer coordinates, origin top-left, x right, y down;
* geometry is parameterized by disparity (inverse depth), never by depth;
* poses map world points into the camera frame (camera-from-world);
* twist increments act by left multiplication, ``T <- exp(xi) @ T``, with the
  rotational part in ``xi[:3]`` and the translational part in ``xi[3:]``;
* points with transformed depth below ``EPS_Z`` are masked, never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_Z = 1e-6


class InvalidDepthError(ValueError):
    """Raised for non-positive disparities in operations that require depth."""


class NoJacobianError(ValueError):
    """Raised when Jacobians are requested at a pixel invalid under reprojection."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def pixel_grid(self):
        """(H, W) arrays of pixel x and y coordinates."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        return np.meshgrid(u, v)

    def unit_rays(self):
        """(H, W, 3) rays through each pixel at depth 1 (z component is 1)."""
        u, v = self.pixel_grid()
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


def quat_to_matrix(q):
    """Rotation matrix from a quaternion in (w, x, y, z) order (normalized first)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _hat(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


class Pose:
    """Rigid transform stored as unit quaternion (w, x, y, z) + translation.

    ``apply`` maps points from the source frame into the target frame; for
    keyframe poses the source is the world and the target is the camera.
    """

    __slots__ = ("q", "t", "_R")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        q = np.asarray(q, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        self.q = q / n
        self.t = np.asarray(t, dtype=np.float64).copy()
        self._R = quat_to_matrix(self.q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return self._R

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self.t
        return M

    def apply(self, pts):
        """Transform points of shape (..., 3)."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self._R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self o other: first apply ``other``, then ``self``."""
        return Pose.from_matrix(self._R @ other._R, self._R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self._R.T
        return Pose.from_matrix(Rt, -Rt @ self.t)

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def se3_exp(xi) -> Pose:
    """Exponential map; ``xi[:3]`` is the rotation, ``xi[3:]`` the translation part."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    th = np.linalg.norm(w)
    W = _hat(w)
    if th < 1e-9:
        # 2nd-order series keeps exp/log consistent through the small-angle regime
        R = np.eye(3) + W + 0.5 * (W @ W)
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        A = np.sin(th) / th
        B = (1.0 - np.cos(th)) / th**2
        C = (th - np.sin(th)) / th**3
        R = np.eye(3) + A * W + B * (W @ W)
        V = np.eye(3) + B * W + C * (W @ W)
    return Pose.from_matrix(R, V @ v)


def se3_log(P: Pose) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp` for rotation angles < pi."""
    R = P.R
    cos_th = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(cos_th)
    if th < 1e-9:
        W = 0.5 * (R - R.T)
        w = np.array([W[2, 1], W[0, 2], W[1, 0]])
        Vinv = np.eye(3) - 0.5 * _hat(w)
    else:
        w = th / (2.0 * np.sin(th)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        )
        W = _hat(w)
        Vinv = (
            np.eye(3)
            - 0.5 * W
            + (1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))) * (W @ W)
        )
    return np.concatenate([w, Vinv @ P.t])


@dataclass
class InverseDepthMap:
    """Per-pixel disparity grid with a validity bitmap; valid entries are > 0."""

    disparity: np.ndarray  # (H, W) float64
    valid: np.ndarray  # (H, W) bool

    @classmethod
    def from_array(cls, d):
        d = np.asarray(d, dtype=np.float64).copy()
        return cls(d, d > 0)

    @property
    def shape(self):
        return self.disparity.shape

    def copy(self):
        return InverseDepthMap(self.disparity.copy(), self.valid.copy())


@dataclass
class FlowField:
    """Dense pixel displacement field (flow = target - source) with validity."""

    flow: np.ndarray  # (H, W, 2) float64
    valid: np.ndarray  # (H, W) bool

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))

    @property
    def shape(self):
        return self.flow.shape[:2]

    def magnitude(self):
        return np.linalg.norm(self.flow, axis=-1)


def back_project(p, d, K: Intrinsics):
    """Camera-frame 3D point for pixel ``p`` at disparity ``d``.

    The returned point has depth 1/d and reprojects exactly onto ``p``.
    """
    d = float(d)
    if d <= 0:
        raise InvalidDepthError(f"disparity must be positive, got {d}")
    u, v = float(p[0]), float(p[1])
    z = 1.0 / d
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def project(X, K: Intrinsics):
    """Pixel coordinates of camera-frame points ``X`` of shape (..., 3)."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    out = np.empty(X.shape[:-1] + (2,))
    out[..., 0] = K.fx * X[..., 0] / z + K.cx
    out[..., 1] = K.fy * X[..., 1] / z + K.cy
    return out


def induced_flow(T_ij: Pose, d_i: InverseDepthMap, K: Intrinsics) -> FlowField:
    """Displacement field implied by reprojecting frame i pixels into frame j.

    Pixels with invalid disparity, or whose transformed depth falls below
    ``EPS_Z``, are flagged invalid rather than raising.
    """
    H, W = d_i.shape
    rays = K.unit_rays()
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = rays / d_i.disparity[..., None]
    pts_j = pts @ T_ij.R.T + T_ij.t
    valid = d_i.valid & (pts_j[..., 2] > EPS_Z)
    flow = np.zeros((H, W, 2))
    u, v = K.pixel_grid()
    z = np.where(valid, pts_j[..., 2], 1.0)
    flow[..., 0] = K.fx * pts_j[..., 0] / z + K.cx - u
    flow[..., 1] = K.fy * pts_j[..., 1] / z + K.cy - v
    flow[~valid] = 0.0
    return FlowField(flow, valid)


def projection_jacobian(X, K: Intrinsics):
    """d(project)/dX at camera-frame point(s) X, shape (..., 2, 3)."""
    X = np.asarray(X, dtype=np.float64)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    J = np.zeros(X.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx / z
    J[..., 0, 2] = -K.fx * x / z**2
    J[..., 1, 1] = K.fy / z
    J[..., 1, 2] = -K.fy * y / z**2
    return J


def flow_jacobians(T_ij: Pose, d_i: InverseDepthMap, K: Intrinsics, p):
    """Jacobians of the induced flow at pixel ``p``.

    Returns ``(J_pose, J_depth)`` where ``J_pose`` (2x6) is taken w.r.t. a
    left-multiplied twist on ``T_ij`` and ``J_depth`` (2x1) w.r.t. the
    disparity at ``p``.
    """
    u, v = int(p[0]), int(p[1])
    if not (0 <= u < K.width and 0 <= v < K.height) or not d_i.valid[v, u]:
        raise NoJacobianError(f"pixel {p} invalid for Jacobian evaluation")
    d = d_i.disparity[v, u]
    b = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    Xi = b / d
    Xj = T_ij.R @ Xi + T_ij.t
    if Xj[2] <= EPS_Z:
        raise NoJacobianError(f"pixel {p} reprojects behind the camera")
    Jpi = projection_jacobian(Xj, K)
    J_pose = np.zeros((2, 6))
    J_pose[:, :3] = Jpi @ (-_hat(Xj))
    J_pose[:, 3:] = Jpi
    J_depth = (Jpi @ (T_ij.R @ (-b / d**2))).reshape(2, 1)
    return J_pose, J_depth


def flow_jacobians_dense(T_ij: Pose, d_i: InverseDepthMap, K: Intrinsics):
    """Vectorized Jacobians for every pixel.

    Returns ``(J_i, J_j, J_d, valid)``: sensitivities of the induced flow to
    left-multiplied twists on the source pose T_i and target pose T_j (with
    T_ij = T_j o T_i^-1), and to the source disparity. Shapes are
    (H, W, 2, 6), (H, W, 2, 6) and (H, W, 2).
    """
    H, W = d_i.shape
    rays = K.unit_rays()
    with np.errstate(divide="ignore", invalid="ignore"):
        Xi = rays / d_i.disparity[..., None]
    Xj = Xi @ T_ij.R.T + T_ij.t
    valid = d_i.valid & (Xj[..., 2] > EPS_Z)
    Xj_safe = np.where(valid[..., None], Xj, np.array([0.0, 0.0, 1.0]))
    Jpi = projection_jacobian(Xj_safe, K)  # (H, W, 2, 3)

    # d(exp(dj) Xj)/ddj = [-[Xj]x | I]
    hat = np.zeros((H, W, 3, 3))
    x, y, z = Xj_safe[..., 0], Xj_safe[..., 1], Xj_safe[..., 2]
    hat[..., 0, 1] = -z
    hat[..., 0, 2] = y
    hat[..., 1, 0] = z
    hat[..., 1, 2] = -x
    hat[..., 2, 0] = -y
    hat[..., 2, 1] = x
    J_j = np.empty((H, W, 2, 6))
    J_j[..., :3] = -np.einsum("hwab,hwbc->hwac", Jpi, hat, optimize=False)
    J_j[..., 3:] = Jpi

    # Perturbing T_i gives dXj/ddi = R_ij [[Xi]x | -I]
    hat_i = np.zeros((H, W, 3, 3))
    xi, yi, zi = Xi[..., 0], Xi[..., 1], Xi[..., 2]
    hat_i[..., 0, 1] = -zi
    hat_i[..., 0, 2] = yi
    hat_i[..., 1, 0] = zi
    hat_i[..., 1, 2] = -xi
    hat_i[..., 2, 0] = -yi
    hat_i[..., 2, 1] = xi
    JR = np.einsum("hwab,bc->hwac", Jpi, T_ij.R, optimize=False)  # (H, W, 2, 3)
    J_i = np.empty((H, W, 2, 6))
    J_i[..., :3] = np.einsum("hwab,hwbc->hwac", JR, hat_i, optimize=False)
    J_i[..., 3:] = -JR

    with np.errstate(divide="ignore", invalid="ignore"):
        dXi_dd = -rays / (d_i.disparity[..., None] ** 2)
    dXi_dd = np.where(valid[..., None], dXi_dd, 0.0)
    J_d = np.einsum("hwab,hwb->hwa", JR, dXi_dd, optimize=False)  # (H, W, 2)

    J_i[~valid] = 0.0
    J_j[~valid] = 0.0
    J_d[~valid] = 0.0
    return J_i, J_j, J_d, valid
