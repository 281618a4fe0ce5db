"""Odometry drift correction with capped, dampened registration offsets.

The filter keeps a rigid correction ``T_corr`` (map from planar odometry).  Per
frame the planar odometry advances by the projected 3D step, the prediction is
``T_corr * odom2d`` and a successful registration moves it towards the
measured map pose by ``clamp(gamma * offset, -C, C)`` per axis, with
``C = inliers * speed / f_i``.  The same ``C`` bounds the yaw step in radians.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2D, Pose3D, se2_compose, wrap_angle

log = logging.getLogger(__name__)


def project_to_plane(prev_xy, delta_xyz) -> tuple[np.ndarray, bool]:
    """Advance ``prev_xy`` by a planar step whose length equals the 3D step length.

    Returns ``(new_xy, vertical)``; ``vertical`` flags purely vertical motion,
    which leaves the position unchanged.
    """
    prev = np.asarray(prev_xy, dtype=float)
    d = np.asarray(delta_xyz, dtype=float)
    n3 = math.sqrt(float(d @ d))
    n2 = math.hypot(d[0], d[1])
    if n2 == 0.0:
        return prev.copy(), n3 > 0.0
    return prev + d[:2] * (n3 / n2), False


def correction_cap(inlier_count: int, speed: float, f_i: float) -> float:
    if inlier_count < 0 or speed < 0:
        raise ValueError("inlier_count and speed must be non-negative")
    return inlier_count * speed / f_i


def apply_correction(offset, C: float, gamma: float) -> np.ndarray:
    """Per-component ``max(min(gamma * o, C), -C)``."""
    if C < 0:
        raise ValueError("C must be non-negative")
    return np.clip(gamma * np.asarray(offset, dtype=float), -C, C)


@dataclass
class FilterState:
    correction: Pose2D = Pose2D()
    odom2d: Pose2D = Pose2D()
    last_odom: Pose3D | None = None
    last_stamp: float | None = None
    velocity: float = 0.0
    gamma: float = 0.3
    f_i: float = 25.0
    vertical_steps: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.f_i <= 0:
            raise ValueError("f_i must be positive")

    @property
    def pose(self) -> Pose2D:
        return se2_compose(self.correction, self.odom2d)


@dataclass(frozen=True)
class StepInfo:
    pose: Pose2D
    offset: tuple
    applied: tuple
    cap: float
    corrected: bool


@dataclass(eq=False)
class PoseFilter:
    """Stateful wrapper around ``FilterState``; keeps a short history for late results."""

    gamma: float = 0.3
    f_i: float = 25.0
    history: int = 50
    state: FilterState = field(default=None)
    _past: deque = field(default=None, repr=False)

    def __post_init__(self):
        if self.state is None:
            self.state = FilterState(gamma=self.gamma, f_i=self.f_i)
        self._past = deque(maxlen=self.history)

    @property
    def pose(self) -> Pose2D:
        return self.state.pose

    def advance(self, stamp: float, odom: Pose3D) -> Pose2D:
        """Propagate with odometry only; returns the predicted pose."""
        s = self.state
        if s.last_stamp is not None and not stamp > s.last_stamp:
            raise ValueError(f"odometry stamp {stamp} not after previous {s.last_stamp}")
        if s.last_odom is None:
            s.odom2d = Pose2D(odom.x, odom.y, odom.yaw)
            s.velocity = 0.0
        else:
            delta = np.asarray(odom.position) - np.asarray(s.last_odom.position)
            xy, vertical = project_to_plane(s.odom2d.t, delta)
            if vertical:
                s.vertical_steps += 1
                log.warning("purely vertical odometry step at t=%.3f; planar position kept", stamp)
            s.odom2d = Pose2D(float(xy[0]), float(xy[1]), odom.yaw)
            s.velocity = float(np.linalg.norm(delta)) / (stamp - s.last_stamp)
        s.last_odom = odom
        s.last_stamp = stamp
        self._past.append((stamp, s.odom2d, s.velocity))
        return s.pose

    def _correct(self, predicted: Pose2D, measured: Pose2D, n_inliers: int, speed: float):
        s = self.state
        offset = np.array([measured.x - predicted.x, measured.y - predicted.y,
                           wrap_angle(measured.yaw - predicted.yaw)])
        cap = correction_cap(n_inliers, speed, s.f_i)
        applied = apply_correction(offset, cap, s.gamma)
        target = Pose2D(predicted.x + applied[0], predicted.y + applied[1], predicted.yaw + applied[2])
        return target, offset, applied, cap

    def correct(self, measured: Pose2D, n_inliers: int) -> StepInfo:
        """Apply a registration measured at the latest odometry stamp."""
        s = self.state
        predicted = s.pose
        target, offset, applied, cap = self._correct(predicted, measured, n_inliers, s.velocity)
        s.correction = se2_compose(target, s.odom2d.inverse())
        return StepInfo(s.pose, tuple(offset), tuple(applied), cap, True)

    def correct_late(self, stamp: float, measured: Pose2D, n_inliers: int) -> StepInfo:
        """Apply a result for an earlier frame against the pose at its stamp, then re-propagate."""
        for t, odom2d, speed in reversed(self._past):
            if t == stamp:
                break
        else:
            raise KeyError(f"no pose history at stamp {stamp}")
        s = self.state
        predicted = se2_compose(s.correction, odom2d)
        target, offset, applied, cap = self._correct(predicted, measured, n_inliers, speed)
        # the same rigid change of the correction carries forward to the current pose
        s.correction = se2_compose(target, odom2d.inverse())
        return StepInfo(s.pose, tuple(offset), tuple(applied), cap, True)

    def step(self, stamp: float, odom: Pose3D, measured: Pose2D | None = None,
             n_inliers: int = 0) -> StepInfo:
        predicted = self.advance(stamp, odom)
        if measured is None:
            return StepInfo(predicted, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0, False)
        return self.correct(measured, n_inliers)


def step(state: FilterState, stamp: float, odom: Pose3D, registration=None, measured: Pose2D | None = None):
    """Functional form: returns ``(new_state, corrected pose)``.

    ``registration`` is a RegistrationResult whose transform maps the query
    (odometry xy) frame into the map; the measured pose is then that transform
    applied to the raw odometry pose.
    """
    pf = PoseFilter(state.gamma, state.f_i, state=FilterState(**{k: getattr(state, k) for k in
                                                                 state.__dataclass_fields__}))
    if registration is not None and registration.success and measured is None:
        measured = se2_compose(registration.transform, Pose2D(odom.x, odom.y, odom.yaw))
        n = registration.n_inliers
    else:
        n = registration.n_inliers if registration is not None else 0
    if registration is not None and not registration.success:
        measured = None
    info = pf.step(stamp, odom, measured, n)
    return pf.state, info.pose
