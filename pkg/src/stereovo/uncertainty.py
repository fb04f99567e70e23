"""Probabilistic propagation from 2D measurements to 3D covariances.

Three independent pieces:

* disparity -> depth: first-order propagation of a relative disparity
  error rate gamma into a depth mean and variance,
* depth correction at a matched pixel: Gaussian-weighted patch statistics
  that absorb scene structure (depth edges) into the depth variance,
* 2D -> 3D projection: the exact covariance of the backprojection of
  independent Gaussian (u, v, d), including the off-diagonal terms that
  couple the lateral axes with depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Landmark3D, StereoCamera, backproject, psd_within_sym3

# Relative disparity error above which the first-order depth
# approximation degrades noticeably; results are flagged, not rejected.
GAMMA_APPROX_LIMIT = 0.3

# Floor on the Gaussian patch-weight std, in pixels, so sub-pixel
# matching uncertainty still spreads weight beyond a single sample.
MIN_WEIGHT_STD_PX = 0.5


@dataclass(frozen=True)
class PixelObservation:
    """A matched pixel with per-axis matching variance and a depth.

    u, v in pixels; sigma_u2, sigma_v2 in pixels^2; d in meters;
    sigma_d2 in meters^2.
    """

    u: float
    v: float
    sigma_u2: float
    sigma_v2: float
    d: float
    sigma_d2: float

    def __post_init__(self):
        if self.sigma_u2 < 0 or self.sigma_v2 < 0 or self.sigma_d2 < 0:
            raise ValueError("variances must be non-negative")
        if not self.d > 0:
            raise ValueError(f"depth must be positive, got {self.d}")


@dataclass(frozen=True)
class DisparityEstimate:
    """Mean disparity mu (pixels) with relative error rate gamma.

    The disparity std is gamma * mu.
    """

    mu: float
    gamma: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mean disparity must be positive, got {self.mu}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")


class DepthEstimate(NamedTuple):
    mu: float
    var: float
    # True when gamma was at or above GAMMA_APPROX_LIMIT and the
    # first-order variance should be treated as optimistic.
    approx_degraded: bool


def disparity_to_depth(cam: StereoCamera, disp: DisparityEstimate) -> DepthEstimate:
    """First-order mean/variance of depth = baseline * fx / disparity."""
    bf = cam.baseline * cam.fx
    mu_d = bf / disp.mu
    sigma_d2 = (bf * disp.gamma) ** 2 / disp.mu**2
    return DepthEstimate(mu_d, sigma_d2, disp.gamma >= GAMMA_APPROX_LIMIT)


@dataclass(frozen=True)
class DepthPatch:
    """A window of depth samples around a matched pixel.

    depths is a (rows, cols) grid in meters; origin is the pixel
    coordinate (u0, v0) of depths[0, 0]; center is the (float) pixel
    coordinate the weights are centered on. Pixels that are non-positive
    or non-finite are invalid and carry zero weight; an explicit validity
    mask may tighten this further.
    """

    depths: np.ndarray
    center: tuple[float, float]
    origin: tuple[float, float] | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=float)
        if d.ndim != 2:
            raise ValueError(f"depths must be a 2D grid, got shape {d.shape}")
        object.__setattr__(self, "depths", d)
        if self.origin is None:
            # center the grid on the rounded center pixel
            cu, cv = self.center
            object.__setattr__(
                self,
                "origin",
                (round(cu) - (d.shape[1] - 1) // 2, round(cv) - (d.shape[0] - 1) // 2),
            )
        ok = np.isfinite(d) & (d > 0)
        if self.valid is not None:
            ok &= np.asarray(self.valid, dtype=bool)
        object.__setattr__(self, "valid", ok)


def patch_weights(patch: DepthPatch, sigma_u2: float, sigma_v2: float) -> np.ndarray:
    """Discrete Gaussian weights over the patch, zero at invalid pixels.

    Per-axis stds are floored at MIN_WEIGHT_STD_PX; the result sums to 1
    over valid pixels.
    """
    su = max(np.sqrt(max(sigma_u2, 0.0)), MIN_WEIGHT_STD_PX)
    sv = max(np.sqrt(max(sigma_v2, 0.0)), MIN_WEIGHT_STD_PX)
    rows, cols = patch.depths.shape
    u0, v0 = patch.origin
    cu, cv = patch.center
    du = (u0 + np.arange(cols) - cu) / su
    dv = (v0 + np.arange(rows) - cv) / sv
    w = np.exp(-0.5 * (dv[:, None] ** 2 + du[None, :] ** 2))
    w = np.where(patch.valid, w, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("no depth support: every pixel in the patch is invalid")
    return w / total


def correct_depth_uncertainty(
    patch: DepthPatch, sigma_u2: float, sigma_v2: float
) -> tuple[float, float]:
    """Depth mean/variance of a matched point from its local patch.

    The matched pixel is only known up to the matching uncertainty, so
    the depth it lands on is a mixture over the patch; the weighted
    variance absorbs depth edges into the depth uncertainty.
    """
    w = patch_weights(patch, sigma_u2, sigma_v2)
    d = np.where(patch.valid, patch.depths, 0.0)
    mu = float((w * d).sum())
    var = float((w * (d - mu) ** 2).sum())
    return mu, var


def covariance_from_observation(cam: StereoCamera, obs: PixelObservation) -> np.ndarray:
    """Exact 3x3 covariance of backproject(u, v, d) for independent
    Gaussian u, v, d, in (x, y, z) ordering."""
    a = obs.u - cam.cx
    b = obs.v - cam.cy
    sx2 = (obs.sigma_u2 * obs.sigma_d2 + obs.sigma_u2 * obs.d**2 + a**2 * obs.sigma_d2) / cam.fx**2
    sy2 = (obs.sigma_v2 * obs.sigma_d2 + obs.sigma_v2 * obs.d**2 + b**2 * obs.sigma_d2) / cam.fy**2
    sz2 = obs.sigma_d2
    sxz = obs.sigma_d2 * a / cam.fx
    syz = obs.sigma_d2 * b / cam.fy
    sxy = obs.sigma_d2 * a * b / (cam.fx * cam.fy)
    return np.array([[sx2, sxy, sxz], [sxy, sy2, syz], [sxz, syz, sz2]])


def ensure_psd(cov: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetrize and, only if an eigenvalue dips below -tol, clamp the
    spectrum at zero. The closed forms here are PSD in exact arithmetic,
    so this is a float-rounding guard."""
    sym = 0.5 * (cov + cov.T)
    if psd_within_sym3(sym, tol):
        return sym
    vals, vecs = np.linalg.eigh(sym)
    clipped = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return 0.5 * (clipped + clipped.T)


def project_covariance(cam: StereoCamera, obs: PixelObservation) -> Landmark3D:
    """Backproject an observation into a camera-frame landmark with the
    full 3x3 covariance."""
    position = backproject(cam, obs.u, obs.v, obs.d)
    cov = ensure_psd(covariance_from_observation(cam, obs))
    return Landmark3D(position, cov, frame="camera")
