"""Two-frame pose optimization.

Solves for the camera-to-world pose T of the current frame by minimizing
the summed squared Mahalanobis distance between world-frame landmarks
from the previous frame and the transformed camera-frame landmarks of the
current frame:

    cost(T) = sum_i  r_i^T S_i^{-1} r_i,   r_i = p_i - T(q_i),
    S_i = Sigma_prev_i + R Sigma_curr_i R^T.

Levenberg-Marquardt on the right-multiplied twist (T <- T * exp(xi));
the per-pair weight S_i depends on the current rotation, so it is
recomputed at every iterate and held fixed inside each linearization.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateGeometryError
from .geometry import Landmark3D, PoseSE3, se3_exp, skew

# Combined covariances worse-conditioned than this get a trace-scaled
# ridge; an absolute floor covers the all-zero case (noiseless inputs).
_COND_LIMIT = 1e12
_RIDGE_REL = 1e-9
_RIDGE_ABS = 1e-12
# Collinearity threshold on the second singular value of the centered
# previous-frame positions.
_COLLINEAR_TOL = 1e-9


class CovarianceMode(str, Enum):
    FULL = "full"
    DIAGONAL = "diagonal"
    IDENTITY = "identity"
    SCALE_AGNOSTIC = "scale_agnostic"


@dataclass(frozen=True)
class MatchedPair:
    """A landmark seen in both frames: world-frame from the previous
    frame, camera-frame from the current one."""

    prev_world: Landmark3D
    curr_camera: Landmark3D

    def __post_init__(self):
        if self.prev_world.frame != "world":
            raise ValueError("prev_world must be a world-frame landmark")
        if self.curr_camera.frame != "camera":
            raise ValueError("curr_camera must be a camera-frame landmark")


@dataclass(frozen=True)
class LMConfig:
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    cost_tol: float = 1e-10  # relative cost decrease
    step_tol: float = 1e-10  # twist update norm

    def __post_init__(self):
        for name in ("max_iters", "lambda_init", "lambda_up", "lambda_down", "cost_tol", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class FramePairProblem:
    pairs: list[MatchedPair]
    initial_pose: PoseSE3
    covariance_mode: CovarianceMode = CovarianceMode.FULL

    def __post_init__(self):
        self.covariance_mode = CovarianceMode(self.covariance_mode)
        if len(self.pairs) < 3:
            raise DegenerateGeometryError(f"need at least 3 pairs, got {len(self.pairs)}")
        p = np.stack([m.prev_world.position for m in self.pairs])
        # collinear points leave rotation about the line unobservable
        s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
        if s[1] <= _COLLINEAR_TOL:
            raise DegenerateGeometryError(
                f"matched points are collinear (second singular value {s[1]:.3e})"
            )


@dataclass
class PoseSolution:
    pose: PoseSE3
    cost: float
    iterations: int
    residuals: np.ndarray  # (N, 3) at the returned pose
    converged: bool
    cov_regularized: bool  # some combined covariance needed a ridge


def scale_agnostic_normalizers(pairs: list[MatchedPair]) -> tuple[float, float]:
    """Per-frame normalizers for the scale-agnostic ablation: the mean of
    det(Sigma)^(1/3) over keypoints, one per frame.

    det^(1/3) of a 3x3 covariance has units of variance, so dividing by
    the mean makes the average generalized variance 1 in each frame.
    Rank-deficient covariances have zero determinant; a frame whose mean
    vanishes falls back to the mean per-axis variance (trace/3), which
    has the same units, and to 1 if even that is zero."""

    def normalizer(covs) -> float:
        dets = [max(float(np.linalg.det(c)), 0.0) ** (1.0 / 3.0) for c in covs]
        scale = float(np.mean(dets))
        if scale > _RIDGE_ABS:
            return scale
        scale = float(np.mean([np.trace(c) / 3.0 for c in covs]))
        return scale if scale > _RIDGE_ABS else 1.0

    return (
        normalizer([m.prev_world.covariance for m in pairs]),
        normalizer([m.curr_camera.covariance for m in pairs]),
    )


def _stack_covariances(
    pairs: list[MatchedPair], mode: CovarianceMode
) -> tuple[np.ndarray, np.ndarray]:
    """Mode-adjusted (N,3,3) covariance stacks for both frames."""
    sp = np.stack([m.prev_world.covariance for m in pairs])
    sq = np.stack([m.curr_camera.covariance for m in pairs])
    if mode is CovarianceMode.DIAGONAL:
        eye = np.eye(3, dtype=bool)
        sp = np.where(eye, sp, 0.0)
        sq = np.where(eye, sq, 0.0)
    elif mode is CovarianceMode.SCALE_AGNOSTIC:
        prev_scale, curr_scale = scale_agnostic_normalizers(pairs)
        sp = sp / prev_scale
        sq = sq / curr_scale
    return sp, sq


def _combined_covariances(
    sp: np.ndarray, sq: np.ndarray, rotation: np.ndarray, mode: CovarianceMode
) -> tuple[np.ndarray, bool]:
    """S_i = Sigma_prev + R Sigma_curr R^T, regularized where singular."""
    n = sp.shape[0]
    if mode is CovarianceMode.IDENTITY:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), False
    s = sp + rotation @ sq @ rotation.T
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
    vals = np.linalg.eigvalsh(s)
    cond_bad = vals[:, 0] <= vals[:, 2] / _COND_LIMIT
    if not cond_bad.any():
        return s, False
    trace = np.trace(s, axis1=1, axis2=2)
    ridge = np.maximum(_RIDGE_REL * trace / 3.0, _RIDGE_ABS)
    s[cond_bad] += ridge[cond_bad, None, None] * np.eye(3)
    return s, True


def pair_covariance(
    pair: MatchedPair,
    rotation: np.ndarray,
    mode: CovarianceMode = CovarianceMode.FULL,
    prev_scale: float = 1.0,
    curr_scale: float = 1.0,
) -> tuple[np.ndarray, bool]:
    """Combined covariance of a single pair at the given rotation.

    prev_scale/curr_scale are the per-frame scale-agnostic normalizers
    (leave at 1 unless mode is SCALE_AGNOSTIC; they are problem-level
    statistics, see scale_agnostic_normalizers). Returns (S, regularized).
    """
    mode = CovarianceMode(mode)
    if mode is CovarianceMode.IDENTITY:
        return np.eye(3), False
    sp = pair.prev_world.covariance
    sq = pair.curr_camera.covariance
    if mode is CovarianceMode.DIAGONAL:
        sp, sq = np.diag(np.diag(sp)), np.diag(np.diag(sq))
    elif mode is CovarianceMode.SCALE_AGNOSTIC:
        sp, sq = sp / prev_scale, sq / curr_scale
    s, flagged = _combined_covariances(sp[None], sq[None], np.asarray(rotation, float), mode)
    return s[0], flagged


def residual_jacobian(pose: PoseSE3, curr_position: np.ndarray) -> np.ndarray:
    """d r / d xi of r = p - T*exp(xi)(q) at xi = 0, shape (3, 6)."""
    r = pose.rotation
    return np.hstack([-r, r @ skew(curr_position)])


def _residuals(p: np.ndarray, q: np.ndarray, pose: PoseSE3) -> np.ndarray:
    return p - pose.apply(q)


def _cost(res: np.ndarray, weights: np.ndarray) -> float:
    return float(np.einsum("ni,nij,nj->", res, weights, res))


def mahalanobis_cost(problem: FramePairProblem, pose: PoseSE3) -> float:
    """Total squared Mahalanobis distance at the given pose, with the
    combined covariances evaluated at this pose's rotation."""
    p = np.stack([m.prev_world.position for m in problem.pairs])
    q = np.stack([m.curr_camera.position for m in problem.pairs])
    sp, sq = _stack_covariances(problem.pairs, problem.covariance_mode)
    s, _ = _combined_covariances(sp, sq, pose.rotation, problem.covariance_mode)
    return _cost(_residuals(p, q, pose), np.linalg.inv(s))


def solve_pose(problem: FramePairProblem, cfg: LMConfig = LMConfig()) -> PoseSolution:
    """Levenberg-Marquardt minimization of the weighted registration cost.

    Only cost-decreasing steps are accepted, so the returned cost never
    exceeds the cost at the initial pose. Damping is multiplicative on
    the diagonal of the normal equations.
    """
    p = np.stack([m.prev_world.position for m in problem.pairs])
    q = np.stack([m.curr_camera.position for m in problem.pairs])
    sp, sq = _stack_covariances(problem.pairs, problem.covariance_mode)
    mode = problem.covariance_mode

    def true_cost(pose: PoseSE3) -> tuple[float, np.ndarray, np.ndarray, bool]:
        s, flagged = _combined_covariances(sp, sq, pose.rotation, mode)
        w = np.linalg.inv(s)
        res = _residuals(p, q, pose)
        return _cost(res, w), res, w, flagged

    pose = problem.initial_pose
    cost, res, weights, regularized = true_cost(pose)
    lam = cfg.lambda_init
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iters + 1):
        if cost == 0.0:
            converged = True
            iterations -= 1
            break
        # J_i = [-R | R [q_i]_x], assembled batched
        jac = np.empty((len(problem.pairs), 3, 6))
        jac[:, :, :3] = -pose.rotation
        qx = np.zeros((len(problem.pairs), 3, 3))
        qx[:, 0, 1], qx[:, 0, 2] = -q[:, 2], q[:, 1]
        qx[:, 1, 0], qx[:, 1, 2] = q[:, 2], -q[:, 0]
        qx[:, 2, 0], qx[:, 2, 1] = -q[:, 1], q[:, 0]
        jac[:, :, 3:] = pose.rotation @ qx

        jtw = np.einsum("nij,nik->njk", jac, weights)
        h = np.einsum("nij,njk->ik", jtw, jac)
        g = np.einsum("nij,nj->i", jtw, res)

        accepted = False
        step = np.zeros(6)
        while lam <= 1e12:
            h_lm = h + lam * np.diag(np.diag(h))
            try:
                step = np.linalg.solve(h_lm, -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            candidate = pose.compose(se3_exp(step))
            new_cost, new_res, new_w, flagged = true_cost(candidate)
            if new_cost < cost:
                pose, res, weights = candidate, new_res, new_w
                prev_cost, cost = cost, new_cost
                regularized |= flagged
                lam = max(lam * cfg.lambda_down, 1e-15)
                accepted = True
                break
            lam *= cfg.lambda_up

        if not accepted:
            converged = True  # damping exhausted: no descent direction left
            break
        if float(np.linalg.norm(step)) < cfg.step_tol:
            converged = True
            break
        if prev_cost - cost < cfg.cost_tol * max(prev_cost, np.finfo(float).tiny):
            converged = True
            break

    return PoseSolution(
        pose=pose,
        cost=cost,
        iterations=iterations,
        residuals=res,
        converged=converged,
        cov_regularized=regularized,
    )
