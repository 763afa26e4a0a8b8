"""Image-to-gantry mapping and a simulated positioning sequence.

Motor 1 moves along y, motor 3 along x, motor 4 rotates about z
(counter-clockwise positive seen from +z) and motor 2 lowers the probe
along z until it reaches the contact plane.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import check_positive
from .errors import ParameterError, WorkspaceError
from .metrics import wrap_axis_angle


@dataclass
class Calibration:
    scale: tuple = (1.0, 1.0)             # mm per pixel (s_x, s_y)
    translation: tuple = (0.0, 0.0)       # image origin in the robot frame, mm
    rotation: float = 0.0                 # image x-axis to robot x-axis, deg
    image_size: tuple = (128, 208)        # (H, W) px

    def __post_init__(self):
        self.scale = tuple(check_positive(s, "scale") for s in self.scale)
        self.translation = tuple(float(t) for t in self.translation)
        self.rotation = float(self.rotation)
        self.image_size = tuple(int(v) for v in self.image_size)

    @property
    def matrix(self):
        a = math.radians(self.rotation)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        return rot @ np.diag(self.scale)

    def to_robot(self, cx, cy):
        x, y = self.matrix @ np.array([cx, cy], dtype=np.float64) + np.array(self.translation)
        return float(x), float(y)

    def to_image(self, x, y):
        cx, cy = np.linalg.solve(self.matrix, np.array([x, y]) - np.array(self.translation))
        return float(cx), float(cy)


@dataclass
class WorkspaceLimits:
    x: tuple = (-500.0, 500.0)
    y: tuple = (-500.0, 500.0)
    z: tuple = (0.0, 200.0)
    max_rotation: float = 90.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ParameterError(f"workspace {name} needs min < max, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        check_positive(self.max_rotation, "max_rotation")

    def check(self, pose):
        for axis, value, (lo, hi) in (("motor3_x", pose.motor3_x, self.x),
                                      ("motor1_y", pose.motor1_y, self.y),
                                      ("motor2_z", pose.motor2_z, self.z)):
            if not lo <= value <= hi:
                raise WorkspaceError(axis, value, lo, hi)
        if abs(pose.motor4_rot) > self.max_rotation:
            raise WorkspaceError("motor4_rot", pose.motor4_rot, -self.max_rotation,
                                 self.max_rotation)
        return pose


@dataclass
class RobotPose:
    motor1_y: float
    motor3_x: float
    motor4_rot: float
    motor2_z: float

    def to_dict(self):
        return asdict(self)


@dataclass
class MotionProfile:
    vmax: float = 50.0            # mm/s (deg/s for motor 4)
    amax: float = 200.0           # mm/s^2 (deg/s^2 for motor 4)
    travel_height: float = 100.0  # mm
    dt_ms: int = 50

    def __post_init__(self):
        check_positive(self.vmax, "vmax")
        check_positive(self.amax, "amax")
        check_positive(self.dt_ms, "dt_ms")


def plan(target, calib=None, limits=None, travel_height=100.0):
    """Gantry setpoints for a puncture target.

    ``target`` needs ``centroid`` (x, y) and ``phi`` or ``cx``, ``cy`` and
    ``phi_deg``; the probe stays at ``travel_height``.
    """
    calib = calib or Calibration()
    limits = limits or WorkspaceLimits()
    cx, cy, phi = _target_fields(target)
    h, w = calib.image_size
    if not (-0.5 <= cx <= w - 0.5 and -0.5 <= cy <= h - 0.5):
        raise ParameterError(f"target ({cx}, {cy}) lies outside the {w}x{h} image")
    x, y = calib.to_robot(cx, cy)
    pose = RobotPose(motor1_y=y, motor3_x=x, motor4_rot=wrap_axis_angle(phi + calib.rotation),
                     motor2_z=float(travel_height))
    return limits.check(pose)


def inverse(pose, calib=None):
    """Pixel centroid and image angle that :func:`plan` maps to ``pose``."""
    calib = calib or Calibration()
    cx, cy = calib.to_image(pose.motor3_x, pose.motor1_y)
    return cx, cy, wrap_axis_angle(pose.motor4_rot - calib.rotation)


def _target_fields(t):
    if isinstance(t, dict):
        return float(t["cx"]), float(t["cy"]), float(t["phi_deg"])
    if isinstance(t, (tuple, list)):
        return float(t[0]), float(t[1]), float(t[2])
    if hasattr(t, "centroid"):
        return float(t.centroid[0]), float(t.centroid[1]), float(t.phi)
    return float(t.cx), float(t.cy), float(t.phi_deg)


def trapezoid(start, end, vmax, amax, dt_ms):
    """Sampled positions of a trapezoidal (or triangular) move; ``(t_ms, pos)`` pairs."""
    dist = abs(end - start)
    if dist == 0:
        return [(0, float(start))]
    sign = 1.0 if end > start else -1.0
    t_acc = vmax / amax
    d_acc = 0.5 * amax * t_acc ** 2
    if 2 * d_acc > dist:          # triangular
        t_acc = math.sqrt(dist / amax)
        vpeak, t_flat = amax * t_acc, 0.0
    else:
        vpeak, t_flat = vmax, (dist - 2 * d_acc) / vmax
    total = 2 * t_acc + t_flat

    def pos(t):
        if t < t_acc:
            s = 0.5 * amax * t * t
        elif t < t_acc + t_flat:
            s = 0.5 * amax * t_acc ** 2 + vpeak * (t - t_acc)
        else:
            r = max(total - t, 0.0)
            s = dist - 0.5 * amax * r * r
        return start + sign * min(s, dist)

    steps = int(math.ceil(total * 1000.0 / dt_ms))
    out = [(k * dt_ms, float(pos(k * dt_ms / 1000.0))) for k in range(steps)]
    out.append((int(round(total * 1000.0)), float(end)))
    return out


def simulate_sequence(pose, contact_height, limits=None, profile=None, start=None):
    """Event log of the positioning sequence: motors 1, 3, 4 then the descent of motor 2.

    Each event is ``{"t_ms", "axis", "position", "state"}`` with state
    ``start``, ``moving`` or ``reached``.
    """
    limits = limits or WorkspaceLimits()
    profile = profile or MotionProfile()
    start = start or RobotPose(0.0, 0.0, 0.0, pose.motor2_z)
    contact_height = float(contact_height)
    if contact_height < limits.z[0]:
        raise WorkspaceError("motor2_z", contact_height, *limits.z)
    if contact_height > pose.motor2_z:
        raise ParameterError("contact height lies above the travel height")
    limits.check(pose)
    events, clock = [], 0
    moves = (("motor1", start.motor1_y, pose.motor1_y),
             ("motor3", start.motor3_x, pose.motor3_x),
             ("motor4", start.motor4_rot, pose.motor4_rot),
             ("motor2", pose.motor2_z, contact_height))
    for axis, a, b in moves:
        samples = trapezoid(a, b, profile.vmax, profile.amax, profile.dt_ms)
        events.append({"t_ms": clock, "axis": axis, "position": float(a), "state": "start"})
        for t, p in samples[1:-1]:
            events.append({"t_ms": clock + t, "axis": axis, "position": p, "state": "moving"})
        t_end, p_end = samples[-1]
        clock += t_end
        events.append({"t_ms": clock, "axis": axis, "position": p_end, "state": "reached"})
    return events


def dumps_events(events):
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)
