"""Depth preprocessing, point-cloud lifting, derived normals and alignment.

Camera convention: pinhole, +x right, +y down, +z forward. Depth is the
z-coordinate of the surface point (not ray length). Normals face the camera,
i.e. ``n . p <= 0`` which gives ``n_z <= 0`` on fronto-parallel surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_SIGMA = 1e-9
DEPTH_CLAMP = (1e-3, 1e4)
# a central stencil is used only when the forward and backward steps differ
# in length by at most this factor and in direction by at most CREASE_ANGLE
DISCONTINUITY_RATIO = 2.0
CREASE_ANGLE = np.deg2rad(45.0)
# a one-sided step "continues straight" when its next step bends by less than this
STRAIGHT_ANGLE = np.deg2rad(20.0)


class GeometryError(ValueError):
    pass


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    @classmethod
    def from_fov(cls, height: int, width: int, fov_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class MetricDepth:
    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise GeometryError("depth validity mask must match depth shape")
            bad = self.valid & ~(np.isfinite(self.values) & (self.values > 0))
            if bad.any():
                raise GeometryError(f"{int(bad.sum())} valid depth entries are non-positive or non-finite")


@dataclass
class ModelDepth:
    values: np.ndarray
    valid: np.ndarray
    d_sigma: float
    d_prime_min: float
    degenerate: bool = False


@dataclass
class NormalMap:
    vectors: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[0] != 3:
            raise GeometryError(f"normal map must be [3,H,W], got {self.vectors.shape}")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.vectors), axis=0) & (np.linalg.norm(self.vectors, axis=0) > 0)
        self.valid = np.asarray(self.valid, dtype=bool)


def preprocess_depth(depth: MetricDepth) -> ModelDepth:
    """Median-deviation-normalized inverse depth shifted to start at zero."""
    valid = depth.valid
    if not valid.any():
        raise GeometryError("preprocess_depth: no valid pixels")
    inv = 1.0 / depth.values[valid]
    d_sigma = float(np.mean(np.abs(inv - np.median(inv))))
    degenerate = d_sigma < EPS_SIGMA
    scaled = inv / max(d_sigma, EPS_SIGMA)
    d_prime_min = float(scaled.min())
    out = np.zeros(depth.values.shape)
    out[valid] = scaled - d_prime_min
    return ModelDepth(out, valid.copy(), d_sigma, d_prime_min, degenerate)


def depth_to_pointcloud(depth: MetricDepth, K: Intrinsics) -> np.ndarray:
    """Lift depth to camera-space points [3,H,W]; invalid pixels become NaN."""
    if not (K.fx > 0 and K.fy > 0):
        raise GeometryError("non-positive focal length")
    h, w = depth.values.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.where(depth.valid, depth.values, np.nan)
    return np.stack([z * (u - K.cx) / K.fx, z * (v - K.cy) / K.fy, z])


def _shift(p: np.ndarray, axis: int, k: int) -> np.ndarray:
    """out[..., i, ...] = p[..., i + k, ...] with NaN outside the image."""
    out = np.full_like(p, np.nan)
    n = p.shape[axis]
    src = [slice(None)] * p.ndim
    dst = [slice(None)] * p.ndim
    if k >= 0:
        src[axis], dst[axis] = slice(k, None), slice(None, n - k)
    else:
        src[axis], dst[axis] = slice(None, n + k), slice(-k, None)
    out[tuple(dst)] = p[tuple(src)]
    return out


def _angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cross = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    dot = np.sum(a * b, axis=0)
    return np.arctan2(cross, dot)


def _axis_gradient(p: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Edge-aware image-space derivative of p along ``axis`` (1=v, 2=u).

    Central difference where the forward and backward steps agree in
    direction and length; otherwise the one-sided step whose two-step
    continuation stays straight (points along an image line on a planar
    face are collinear), falling back to the shorter step.
    """
    f1 = _shift(p, axis, 1) - p
    f2 = _shift(p, axis, 2) - _shift(p, axis, 1)
    b1 = p - _shift(p, axis, -1)
    b2 = _shift(p, axis, -1) - _shift(p, axis, -2)
    finite = lambda a: np.all(np.isfinite(a), axis=0)  # noqa: E731
    f_ok, b_ok = finite(f1), finite(b1)
    f1z, b1z = np.nan_to_num(f1), np.nan_to_num(b1)
    fl, bl = np.linalg.norm(f1z, axis=0), np.linalg.norm(b1z, axis=0)
    both = f_ok & b_ok
    with np.errstate(invalid="ignore"):
        bend = _angle(f1z, b1z)
        smooth = both & (bend <= CREASE_ANGLE) & (np.maximum(fl, bl) <= DISCONTINUITY_RATIO * np.minimum(fl, bl))
        f_straight = np.where(finite(f2), _angle(f1z, np.nan_to_num(f2)), np.pi / 2)
        b_straight = np.where(finite(b2), _angle(np.nan_to_num(b2), b1z), np.pi / 2)
    f_line, b_line = f_straight <= STRAIGHT_ANGLE, b_straight <= STRAIGHT_ANGLE
    prefer_fwd = np.where(
        f_line == b_line,
        np.where(f_line, f_straight <= b_straight, fl <= bl),
        f_line,
    )
    use_fwd = (f_ok & ~b_ok) | (both & ~smooth & prefer_fwd)
    use_bwd = (b_ok & ~f_ok) | (both & ~smooth & ~prefer_fwd)
    grad = np.where(smooth, 0.5 * (f1z + b1z), 0.0)
    grad = np.where(use_fwd, f1z, grad)
    grad = np.where(use_bwd, b1z, grad)
    return grad, f_ok | b_ok


def normals_from_pointcloud(points: np.ndarray) -> NormalMap:
    """Normals from the cross product of image-space point-cloud derivatives.

    Central differences on smooth regions; at image borders, next to invalid
    pixels, across depth discontinuities and at creases a one-sided
    difference is used instead (see ``_axis_gradient``).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[0] != 3:
        raise GeometryError(f"point cloud must be [3,H,W], got {points.shape}")
    if points.shape[1] < 3 or points.shape[2] < 3:
        raise GeometryError("point cloud needs at least 3x3 pixels")
    ok = np.all(np.isfinite(points), axis=0)
    gx, okx = _axis_gradient(points, axis=2)
    gy, oky = _axis_gradient(points, axis=1)
    n = np.cross(gx, gy, axis=0)
    length = np.linalg.norm(n, axis=0)
    scale = np.abs(np.nan_to_num(points)).max(axis=0) + 1e-300
    valid = ok & okx & oky & (length > 1e-12 * scale * scale)
    n = np.where(valid, n / np.where(valid, length, 1.0), 0.0)
    facing_away = np.sum(n * np.nan_to_num(points), axis=0) > 0
    n = np.where(facing_away & valid, -n, n)
    return NormalMap(n, valid)


def normals_from_depth(depth: MetricDepth, K: Intrinsics) -> NormalMap:
    return normals_from_pointcloud(depth_to_pointcloud(depth, K))


def depth_normal_inconsistency(
    depth: MetricDepth, normals: NormalMap, K: Intrinsics
) -> tuple[float, np.ndarray]:
    """Mean of (1 - n_hat . n) / 2 with n_hat derived from ``depth``.

    Returns the mean over jointly valid pixels and the per-pixel map (NaN
    where undefined).
    """
    derived = normals_from_depth(depth, K)
    joint = derived.valid & normals.valid
    if not joint.any():
        raise GeometryError("depth_normal_inconsistency: empty joint validity mask")
    dots = np.clip(np.sum(derived.vectors * normals.vectors, axis=0), -1.0, 1.0)
    err = np.where(joint, (1.0 - dots) / 2.0, np.nan)
    return float(np.mean(err[joint])), err


def solve_affine(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Closed-form least squares for min over (s, b) of sum (s * pred + b - target)^2."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size < 2:
        raise GeometryError("affine alignment needs at least two valid pixels")
    pm, tm = pred.mean(), target.mean()
    pc = pred - pm
    var = float(np.dot(pc, pc))
    if var <= 1e-24 * max(1.0, float(np.dot(pred, pred))):
        raise GeometryError("affine alignment is rank deficient: prediction is constant over valid pixels")
    s = float(np.dot(pc, target - tm)) / var
    return s, float(tm - s * pm)


def align_affine(
    pred: np.ndarray,
    gt: MetricDepth,
    pred_valid: np.ndarray | None = None,
    return_coefficients: bool = False,
):
    """Align affine-invariant inverse depth to ground truth, returning metric depth.

    The fit runs in inverse-depth space over pixels valid in both ``gt`` and
    ``pred``; the returned depth is clamped to ``DEPTH_CLAMP`` meters.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.values.shape:
        raise GeometryError(f"prediction shape {pred.shape} does not match ground truth {gt.values.shape}")
    mask = gt.valid & np.isfinite(pred)
    if pred_valid is not None:
        mask &= pred_valid
    if mask.sum() < 2 or np.ptp(gt.values[mask]) == 0:
        raise GeometryError("affine alignment needs two or more valid pixels with distinct ground truth")
    s, b = solve_affine(pred[mask], 1.0 / gt.values[mask])
    inv = s * pred + b
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(inv > 0, 1.0 / inv, DEPTH_CLAMP[1])
    depth = np.clip(depth, *DEPTH_CLAMP)
    depth = np.where(mask, depth, np.nan)
    out = MetricDepth(depth, mask)
    return (out, (s, b)) if return_coefficients else out
