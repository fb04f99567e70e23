"""Trajectory metrics and trajectory file I/O.

Metrics are per-frame relative errors between consecutive poses:

    t_rel = mean_t || (p_{t+1} - p_t) - R_t R_hat_t^T (p_hat_{t+1} - p_hat_t) ||   [m/frame]
    r_rel = (180/pi) * mean_t || log(R_hat_{t,t+1}^T R_{t,t+1}) ||                 [deg/frame]

with R_{t,t+1} = R_t^T R_{t+1}. Files use the TUM text format:
``timestamp tx ty tz qx qy qz qw``, one pose per line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataFormatError, NumericalError
from .geometry import PoseSE3, so3_log

ASSOCIATION_TOL = 1e-6  # seconds


@dataclass
class Trajectory:
    """Time-ordered poses; timestamps strictly increasing, in seconds."""

    timestamps: np.ndarray
    poses: list[PoseSE3]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) != self.timestamps.size:
            raise ValueError("timestamp/pose count mismatch")
        if self.timestamps.size >= 2 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])


def read_tum(path) -> Trajectory:
    """Parse a TUM trajectory file; '#' lines and blanks are skipped."""
    times, poses = [], []
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read trajectory file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: non-numeric field") from exc
        quat = np.array(vals[4:8])
        norm = np.linalg.norm(quat)
        if not np.isfinite(norm) or norm < 1e-12:
            raise DataFormatError(f"{path}:{lineno}: degenerate quaternion")
        times.append(vals[0])
        poses.append(PoseSE3(Rotation.from_quat(quat / norm).as_matrix(), np.array(vals[1:4])))
    return Trajectory(np.array(times), poses)


def write_tum(traj: Trajectory, path) -> None:
    lines = []
    for ts, pose in zip(traj.timestamps, traj.poses):
        qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
        tx, ty, tz = pose.translation
        lines.append(
            f"{ts:.9f} {tx:.17g} {ty:.17g} {tz:.17g} {qx:.17g} {qy:.17g} {qz:.17g} {qw:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def associate(gt: Trajectory, est: Trajectory, tol: float = ASSOCIATION_TOL) -> None:
    """Check the two trajectories pair 1:1 by timestamp within tol.

    Raises NumericalError listing every unmatched timestamp.
    """
    unmatched = []
    if len(gt) != len(est):
        longer, shorter = (gt, est) if len(gt) > len(est) else (est, gt)
        for ts in longer.timestamps:
            if np.min(np.abs(shorter.timestamps - ts), initial=np.inf) > tol:
                unmatched.append(ts)
        raise NumericalError(
            f"trajectory lengths differ ({len(gt)} vs {len(est)}); "
            f"unmatched timestamps: {unmatched}"
        )
    bad = np.abs(gt.timestamps - est.timestamps) > tol
    if bad.any():
        raise NumericalError(
            f"timestamp association failed; unmatched timestamps: {list(gt.timestamps[bad])}"
        )


def _check_pair(gt: Trajectory, est: Trajectory) -> None:
    if len(gt) < 2:
        raise NumericalError("relative metrics need at least 2 poses")
    associate(gt, est)


def per_frame_errors(gt: Trajectory, est: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair translation (m) and rotation (deg) errors, length N-1."""
    _check_pair(gt, est)
    n = len(gt) - 1
    t_err = np.empty(n)
    r_err = np.empty(n)
    for t in range(n):
        pg0, pg1 = gt.poses[t], gt.poses[t + 1]
        pe0, pe1 = est.poses[t], est.poses[t + 1]
        d_gt = pg1.translation - pg0.translation
        d_est = pe1.translation - pe0.translation
        t_err[t] = np.linalg.norm(d_gt - pg0.rotation @ pe0.rotation.T @ d_est)
        rel_gt = pg0.rotation.T @ pg1.rotation
        rel_est = pe0.rotation.T @ pe1.rotation
        r_err[t] = np.degrees(np.linalg.norm(so3_log(rel_est.T @ rel_gt)))
    return t_err, r_err


def t_rel(gt: Trajectory, est: Trajectory) -> float:
    """Mean relative translation error, meters per frame."""
    return float(per_frame_errors(gt, est)[0].mean())


def r_rel(gt: Trajectory, est: Trajectory) -> float:
    """Mean relative rotation error, degrees per frame."""
    return float(per_frame_errors(gt, est)[1].mean())


def scale_align(gt: Trajectory, est: Trajectory) -> tuple[Trajectory, float]:
    """Least-squares scale of est onto gt.

    The scale minimizes sum ||p_t - s * p_hat_t||^2 over displacements
    relative to each trajectory's first pose; the returned trajectory has
    every position multiplied by s, rotations untouched.
    """
    _check_pair(gt, est)
    q_gt = gt.positions() - gt.positions()[0]
    q_est = est.positions() - est.positions()[0]
    denom = float(np.sum(q_est * q_est))
    if denom <= 0.0:
        raise NumericalError("degenerate scale: estimated trajectory has no motion")
    s = float(np.sum(q_gt * q_est)) / denom
    scaled = [PoseSE3(p.rotation, s * p.translation) for p in est.poses]
    return Trajectory(est.timestamps.copy(), scaled), s


def write_metrics_csv(path, metrics: dict[str, float]) -> None:
    """Emit `metric,value` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, f"{value:.17g}"])


def write_per_frame_csv(path, t_err: np.ndarray, r_err: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "t_err", "r_err"])
        for i, (te, re) in enumerate(zip(t_err, r_err)):
            writer.writerow([i, f"{te:.17g}", f"{re:.17g}"])
