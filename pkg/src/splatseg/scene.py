"""Gaussian cloud parameterization and closed-form geometry/appearance math.

A scene is a structure-of-arrays of anisotropic 3D Gaussians. Each Gaussian
carries a mean, an orientation quaternion, per-axis log scales, an opacity
logit, spherical-harmonic color coefficients, and a d-dimensional instance
feature vector. Covariances are built as Sigma = R S S^T R^T with
S = diag(exp(log_scale)), which is symmetric positive semi-definite by
construction. Projection to the image plane uses the local-affine (EWA)
approximation: cov2d = [J W Sigma W^T J^T]_{2x2} plus a small isotropic
dilation acting as a low-pass filter.

All forward operations here have matching analytic backward functions used
by the rasterizer; every formula is checked against finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

# Real spherical harmonics constants, degree 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
DEFAULT_NEAR_PLANE = 0.01
COV2D_DILATION = 0.3


def sh_band_count(degree: int) -> int:
    """Number of SH basis functions for a given degree, B = (L+1)^2."""
    return (degree + 1) * (degree + 1)


def sh_degree_from_bands(bands: int) -> int:
    degree = int(round(np.sqrt(bands))) - 1
    if sh_band_count(degree) != bands or not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"invalid SH band count {bands}")
    return degree


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene representation.

    means:          (N, 3) world-space positions
    rotations:      (N, 4) quaternions (w, x, y, z); normalized on use
    log_scales:     (N, 3) log of per-axis standard deviation
    opacity_logits: (N,)   pre-sigmoid opacities
    sh_coeffs:      (N, 3, B) SH coefficients per color channel
    features:       (N, d) instance feature embeddings
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    features: np.ndarray

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_bands(self.sh_coeffs.shape[2])

    @property
    def dtype(self) -> np.dtype:
        return self.means.dtype

    def validate(self) -> None:
        """Check the structural invariants; raises InvalidParameterError."""
        n = self.n
        shapes = {
            "means": (self.means.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
            "log_scales": (self.log_scales.shape, (n, 3)),
            "opacity_logits": (self.opacity_logits.shape, (n,)),
            "features": (self.features.shape, (n, self.features.shape[1] if self.features.ndim == 2 else -1)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise InvalidParameterError(f"{name} has shape {got}, expected {want}")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[:2] != (n, 3):
            raise InvalidParameterError(f"sh_coeffs has shape {self.sh_coeffs.shape}")
        sh_degree_from_bands(self.sh_coeffs.shape[2])
        if n:
            if not np.all(np.isfinite(self.means)):
                raise InvalidParameterError("non-finite means")
            norms = np.linalg.norm(self.rotations, axis=1)
            if np.any(norms == 0):
                raise InvalidParameterError("zero-norm quaternion")
            if not np.all(np.isfinite(np.exp(self.log_scales))):
                raise InvalidParameterError("non-finite scales")

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).astype(dtype) for f in _FIELDS))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in _FIELDS))

    def subset(self, index) -> "GaussianCloud":
        """Cloud restricted to the given row index/mask (arrays are copies)."""
        return GaussianCloud(*(np.ascontiguousarray(getattr(self, f)[index]) for f in _FIELDS))

    def opacities(self) -> np.ndarray:
        """Opacities after the sigmoid, in (0, 1)."""
        return _sigmoid(self.opacity_logits)

    @staticmethod
    def concatenate(parts: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(p, f) for p in parts], axis=0) for f in _FIELDS))

    @staticmethod
    def empty(feature_dim: int = 8, sh_degree: int = 1, dtype=np.float32) -> "GaussianCloud":
        b = sh_band_count(sh_degree)
        return GaussianCloud(
            means=np.zeros((0, 3), dtype),
            rotations=np.zeros((0, 4), dtype),
            log_scales=np.zeros((0, 3), dtype),
            opacity_logits=np.zeros((0,), dtype),
            sh_coeffs=np.zeros((0, 3, b), dtype),
            features=np.zeros((0, feature_dim), dtype),
        )


_FIELDS = ("means", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "features")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    view_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image dimensions must be >= 1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise InvalidParameterError(f"camera rotation not orthonormal (err={err:.2e})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        return 0.5 * self.width / self.fx, 0.5 * self.height / self.fy


# --- quaternions and covariances -------------------------------------------------


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (N, 4) quaternions; raises on zero norm."""
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norms


def quats_to_rotmats(q_unit: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    R = np.empty(q_unit.shape[:-1] + (3, 3), dtype=q_unit.dtype)
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


def build_covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for a batch; (N, 4), (N, 3) -> (N, 3, 3)."""
    q = normalize_quaternions(np.asarray(rotations))
    R = quats_to_rotmats(q)
    s = np.exp(np.asarray(log_scales))
    M = R * s[..., None, :]  # R @ diag(s)
    return M @ np.swapaxes(M, -1, -2)


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Single-Gaussian covariance from a (possibly unnormalized) quaternion and log scales."""
    return build_covariances(np.asarray(rotation)[None], np.asarray(log_scale)[None])[0]


def rotmats_backward(q_unit: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Gradient of sum(R * d_R) w.r.t. the unit quaternion entries."""
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = d_R
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2]
        + z * g[..., 1, 0] - x * g[..., 1, 2]
        - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2]
        + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def build_covariances_backward(
    rotations: np.ndarray, log_scales: np.ndarray, d_sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop d(loss)/dSigma to raw quaternions and log scales.

    d_sigma need not be symmetric; it is symmetrized internally since only
    the symmetric part of Sigma is observable.
    """
    q_raw = np.asarray(rotations)
    norms = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norms
    R = quats_to_rotmats(q)
    s = np.exp(np.asarray(log_scales))
    M = R * s[..., None, :]

    d_sym = d_sigma + np.swapaxes(d_sigma, -1, -2)  # dSigma/dM = (G + G^T) M
    d_M = d_sym @ M
    d_R = d_M * s[..., None, :]
    d_s = np.einsum("...ik,...ik->...k", R, d_M)
    d_log_scales = d_s * s

    d_q = rotmats_backward(q, d_R)
    # through the normalization: d_raw = (d_q - q (q . d_q)) / |raw|
    d_q_raw = (d_q - q * np.sum(q * d_q, axis=-1, keepdims=True)) / norms
    return d_q_raw, d_log_scales


# --- spherical harmonics ----------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions; (N, 3) -> (N, B)."""
    n = dirs.shape[0]
    basis = np.empty((n, sh_band_count(degree)), dtype=dirs.dtype)
    basis[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis[:, 4] = SH_C2[0] * xy
        basis[:, 5] = SH_C2[1] * yz
        basis[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * xz
        basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        basis[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        basis[:, 10] = SH_C3[1] * xy * z
        basis[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        basis[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        basis[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        basis[:, 14] = SH_C3[5] * z * (xx - yy)
        basis[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return basis


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions; (N, 3) -> (N, B, 3)."""
    n = dirs.shape[0]
    g = np.zeros((n, sh_band_count(degree), 3), dtype=dirs.dtype)
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def sh_eval_many(sh_coeffs: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate SH color for each Gaussian along its own view direction.

    sh_coeffs (N, 3, B), dirs (N, 3) unit. Returns (colors (N, 3) clamped at 0,
    active (N, 3) bool mask marking unclamped channels for the backward pass).
    """
    degree = sh_degree_from_bands(sh_coeffs.shape[2])
    basis = sh_basis(dirs, degree)
    raw = np.einsum("ncb,nb->nc", sh_coeffs, basis) + 0.5
    active = raw > 0
    return np.maximum(raw, 0.0), active


def sh_eval(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Single-Gaussian SH color; view_dir is normalized internally."""
    d = np.asarray(view_dir, dtype=np.float64)
    nrm = np.linalg.norm(d)
    if nrm == 0:
        raise InvalidParameterError("zero view direction")
    colors, _ = sh_eval_many(np.asarray(sh_coeffs)[None], (d / nrm)[None])
    return colors[0]


def sh_eval_backward(
    sh_coeffs: np.ndarray,
    dirs: np.ndarray,
    active: np.ndarray,
    d_color: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the clamped SH evaluation.

    Returns (d_sh_coeffs (N, 3, B), d_dirs (N, 3)); d_dirs is w.r.t. the unit
    direction (the caller chains through the normalization).
    """
    degree = sh_degree_from_bands(sh_coeffs.shape[2])
    basis = sh_basis(dirs, degree)
    gated = d_color * active  # clamp kills the gradient of flat channels
    d_coeffs = gated[:, :, None] * basis[:, None, :]
    dbasis = sh_basis_grad(dirs, degree)  # (N, B, 3)
    d_dirs = np.einsum("ncb,nbk,nc->nk", sh_coeffs, dbasis, gated)
    return d_coeffs, d_dirs


def view_directions(means: np.ndarray, cam_pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions from the camera center to each mean, plus the distances."""
    delta = means - cam_pos[None, :]
    dist = np.linalg.norm(delta, axis=1)
    safe = np.maximum(dist, np.finfo(means.dtype).tiny)
    return delta / safe[:, None], dist


def view_directions_backward(
    means: np.ndarray, cam_pos: np.ndarray, d_dirs: np.ndarray
) -> np.ndarray:
    """Chain d(unit direction) back to the means: (I - d d^T)/r applied to d_dirs."""
    delta = means - cam_pos[None, :]
    dist = np.linalg.norm(delta, axis=1)
    safe = np.maximum(dist, np.finfo(means.dtype).tiny)
    d = delta / safe[:, None]
    proj = np.sum(d * d_dirs, axis=1, keepdims=True)
    return (d_dirs - d * proj) / safe[:, None]


# --- projection -------------------------------------------------------------------


@dataclass
class ProjectedGaussians:
    """Per-Gaussian screen-space quantities from one camera.

    cov2d is packed symmetric (a, b, c) = [[a, b], [b, c]], after dilation.
    radius is the tile-binning extent in pixels (0 for culled Gaussians).
    """

    mean2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 3) packed
    depth: np.ndarray  # (N,) camera-space z
    t_cam: np.ndarray  # (N, 3) camera-space means
    radius: np.ndarray  # (N,) int32 pixels
    valid: np.ndarray  # (N,) bool
    clamp_mask: np.ndarray = field(repr=False, default=None)  # (N, 2) frustum clamp hit


def project_gaussians(
    means: np.ndarray,
    covariances: np.ndarray,
    camera: Camera,
    *,
    dilation: float = COV2D_DILATION,
    radius_factor: float = 3.0,
    near: float = DEFAULT_NEAR_PLANE,
) -> ProjectedGaussians:
    """EWA projection of a batch of Gaussians into one camera.

    Culling: Gaussians with camera-space depth <= near, or whose bounding box
    misses the image entirely, get valid=False and radius 0.
    """
    dtype = means.dtype
    R = camera.rotation.astype(dtype)
    t = camera.translation.astype(dtype)
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)

    t_cam = means @ R.T + t
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    in_front = tz > near
    tz_safe = np.where(in_front, tz, 1.0)

    mean2d = np.stack(
        [fx * tx / tz_safe + dtype.type(camera.cx), fy * ty / tz_safe + dtype.type(camera.cy)],
        axis=1,
    )

    # frustum-limited lateral offsets for the covariance Jacobian
    tan_x, tan_y = camera.tan_half_fov
    lim_x = dtype.type(1.3 * tan_x)
    lim_y = dtype.type(1.3 * tan_y)
    rx = tx / tz_safe
    ry = ty / tz_safe
    rx_c = np.clip(rx, -lim_x, lim_x)
    ry_c = np.clip(ry, -lim_y, lim_y)
    clamp_mask = np.stack([rx != rx_c, ry != ry_c], axis=1)
    txc = rx_c * tz_safe
    tyc = ry_c * tz_safe

    inv_z = 1.0 / tz_safe
    inv_z2 = inv_z * inv_z
    # J rows: [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
    V = R @ covariances @ R.T if covariances.ndim == 2 else np.einsum("ij,njk,lk->nil", R, covariances, R)

    j00 = fx * inv_z
    j02 = -fx * txc * inv_z2
    j11 = fy * inv_z
    j12 = -fy * tyc * inv_z2

    v00, v01, v02 = V[:, 0, 0], V[:, 0, 1], V[:, 0, 2]
    v11, v12, v22 = V[:, 1, 1], V[:, 1, 2], V[:, 2, 2]

    a = j00 * (j00 * v00 + j02 * v02) + j02 * (j00 * v02 + j02 * v22) + dtype.type(dilation)
    b = j00 * (j11 * v01 + j12 * v02) + j02 * (j11 * v12 + j12 * v22)
    c = j11 * (j11 * v11 + j12 * v12) + j12 * (j11 * v12 + j12 * v22) + dtype.type(dilation)
    cov2d = np.stack([a, b, c], axis=1)

    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    lam_max = mid + disc
    radius = np.ceil(radius_factor * np.sqrt(np.maximum(lam_max, 0.0)))

    x0 = mean2d[:, 0] - radius
    x1 = mean2d[:, 0] + radius
    y0 = mean2d[:, 1] - radius
    y1 = mean2d[:, 1] + radius
    on_screen = (x1 >= 0) & (x0 < camera.width) & (y1 >= 0) & (y0 < camera.height)
    valid = in_front & on_screen & np.isfinite(mean2d).all(axis=1)

    radius_i = np.where(valid, radius, 0.0).astype(np.int32)
    return ProjectedGaussians(
        mean2d=mean2d, cov2d=cov2d, depth=tz, t_cam=t_cam,
        radius=radius_i, valid=valid, clamp_mask=clamp_mask,
    )


def project_gaussian(mean: np.ndarray, covariance: np.ndarray, camera: Camera,
                     *, dilation: float = COV2D_DILATION, near: float = DEFAULT_NEAR_PLANE):
    """Project a single Gaussian. Returns (mean2d, cov2d (2x2), depth), or None if culled."""
    proj = project_gaussians(
        np.asarray(mean, dtype=np.float64)[None],
        np.asarray(covariance, dtype=np.float64)[None],
        camera, dilation=dilation, near=near,
    )
    if proj.depth[0] <= near:
        return None
    a, b, c = proj.cov2d[0]
    return proj.mean2d[0], np.array([[a, b], [b, c]]), float(proj.depth[0])


def project_gaussians_backward(
    means: np.ndarray,
    covariances: np.ndarray,
    camera: Camera,
    proj: ProjectedGaussians,
    d_mean2d: np.ndarray,
    d_cov2d: np.ndarray,
    d_depth: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop screen-space gradients to world means and 3D covariances.

    d_cov2d is packed (a, b, c). Gradients of culled Gaussians must be zero
    in the inputs (they are not masked here).
    """
    dtype = means.dtype
    R = camera.rotation.astype(dtype)
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)

    t_cam = proj.t_cam
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    tz_safe = np.where(proj.depth > 0, tz, 1.0)
    inv_z = 1.0 / tz_safe
    inv_z2 = inv_z * inv_z

    tan_x, tan_y = camera.tan_half_fov
    lim_x = dtype.type(1.3 * tan_x)
    lim_y = dtype.type(1.3 * tan_y)
    rx_c = np.clip(tx * inv_z, -lim_x, lim_x)
    ry_c = np.clip(ty * inv_z, -lim_y, lim_y)
    txc = rx_c * tz_safe
    tyc = ry_c * tz_safe
    unclamped_x = ~proj.clamp_mask[:, 0]
    unclamped_y = ~proj.clamp_mask[:, 1]

    V = np.einsum("ij,njk,lk->nil", R, covariances, R)
    v00, v01, v02 = V[:, 0, 0], V[:, 0, 1], V[:, 0, 2]
    v11, v12, v22 = V[:, 1, 1], V[:, 1, 2], V[:, 2, 2]

    j00 = fx * inv_z
    j02 = -fx * txc * inv_z2
    j11 = fy * inv_z
    j12 = -fy * tyc * inv_z2

    da, db, dc = d_cov2d[:, 0], d_cov2d[:, 1], d_cov2d[:, 2]

    # cov2d = J V J^T with J = [[j00, 0, j02], [0, j11, j12]]
    # gradients w.r.t. the camera-space covariance V (symmetric accumulation)
    d_V = np.zeros_like(V)
    d_V[:, 0, 0] = da * j00 * j00
    d_V[:, 0, 2] = 2 * da * j00 * j02 + db * j11 * j00 * 0  # filled below
    # cross terms, written out explicitly:
    d_V[:, 0, 2] = 2 * da * j00 * j02
    d_V[:, 2, 2] = da * j02 * j02 + dc * j12 * j12
    d_V[:, 1, 1] = dc * j11 * j11
    d_V[:, 1, 2] = 2 * dc * j11 * j12
    d_V[:, 0, 1] = db * j00 * j11
    d_V[:, 0, 2] += db * j00 * j12
    d_V[:, 1, 2] += db * j02 * j11
    d_V[:, 2, 2] += db * j02 * j12
    # symmetrize: off-diagonal totals above are d/d(v_ij + v_ji) combined
    d_V[:, 1, 0] = 0.5 * d_V[:, 0, 1]
    d_V[:, 0, 1] = d_V[:, 1, 0]
    d_V[:, 2, 0] = 0.5 * d_V[:, 0, 2]
    d_V[:, 0, 2] = d_V[:, 2, 0]
    d_V[:, 2, 1] = 0.5 * d_V[:, 1, 2]
    d_V[:, 1, 2] = d_V[:, 2, 1]

    d_cov3d = np.einsum("ji,njk,kl->nil", R, d_V, R)

    # gradients w.r.t. the Jacobian entries
    d_j00 = da * 2 * (j00 * v00 + j02 * v02) + db * (j11 * v01 + j12 * v02)
    d_j02 = da * 2 * (j00 * v02 + j02 * v22) + db * (j11 * v12 + j12 * v22)
    d_j11 = dc * 2 * (j11 * v11 + j12 * v12) + db * (j00 * v01 + j02 * v12)
    d_j12 = dc * 2 * (j11 * v12 + j12 * v22) + db * (j00 * v02 + j02 * v22)

    # J entries as functions of (txc, tyc, tz)
    d_txc = d_j02 * (-fx * inv_z2)
    d_tyc = d_j12 * (-fy * inv_z2)
    d_tz_cov = (
        d_j00 * (-fx * inv_z2)
        + d_j11 * (-fy * inv_z2)
        + d_j02 * (2 * fx * txc * inv_z2 * inv_z)
        + d_j12 * (2 * fy * tyc * inv_z2 * inv_z)
    )
    # txc = clip(tx/z, ...) * z: inside the limits d(txc)/d(tx) = 1, outside
    # txc = ±lim*z so the gradient moves to tz.
    d_tx = np.where(unclamped_x, d_txc, 0.0)
    d_ty = np.where(unclamped_y, d_tyc, 0.0)
    d_tz = d_tz_cov + np.where(unclamped_x, 0.0, d_txc * rx_c) + np.where(unclamped_y, 0.0, d_tyc * ry_c)

    # pixel projection: mean2d = (fx tx / z + cx, fy ty / z + cy)
    d_tx = d_tx + d_mean2d[:, 0] * fx * inv_z
    d_ty = d_ty + d_mean2d[:, 1] * fy * inv_z
    d_tz = d_tz - d_mean2d[:, 0] * fx * tx * inv_z2 - d_mean2d[:, 1] * fy * ty * inv_z2

    d_tz = d_tz + d_depth

    d_t_cam = np.stack([d_tx, d_ty, d_tz], axis=1)
    d_means = d_t_cam @ R
    return d_means, d_cov3d
