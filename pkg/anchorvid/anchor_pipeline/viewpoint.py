"""
Geometric viewpoint classification.

theta is the angle between the character's forward direction and the camera
viewing direction. theta > 135 means the character faces the camera (front),
theta < 45 means it faces away (back). Lateral poses are split by the sign of
(camera_dir x forward) . up with up = +y: positive is left, meaning the
camera sees the character's left side. 45 and 135 themselves are lateral.
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Tuple

import numpy as np

from ..errors import GeometryError

if TYPE_CHECKING:
    from ..synth_world import EpisodeRecord

logger = logging.getLogger(__name__)

UP = (0.0, 1.0, 0.0)
CAMERA_DIR = (0.0, 0.0, 1.0)
FRONT_MIN_DEG = 135.0
BACK_MAX_DEG = 45.0
UNIT_TOLERANCE = 1e-6

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class PoseSample:
    time_s: float
    forward: Vec3
    camera_dir: Vec3 = CAMERA_DIR

    def __post_init__(self):
        for name in ("forward", "camera_dir"):
            norm = float(np.linalg.norm(getattr(self, name)))
            if abs(norm - 1.0) > UNIT_TOLERANCE:
                raise GeometryError(f"{name} must be a unit vector, norm is {norm:.8f}")


def forward_from_yaw(yaw_deg: float) -> Vec3:
    psi = math.radians(yaw_deg)
    return (math.sin(psi), 0.0, -math.cos(psi))


def pose_from_yaw(time_s: float, yaw_deg: float) -> PoseSample:
    return PoseSample(time_s, forward_from_yaw(yaw_deg))


def viewing_angle(p: PoseSample) -> float:
    """theta in degrees, in [0, 180]."""
    cos = float(np.clip(np.dot(p.forward, p.camera_dir), -1.0, 1.0))
    return math.degrees(math.acos(cos))


def boundary_margin(p: PoseSample) -> float:
    """Angular distance of theta to the nearest class threshold."""
    theta = viewing_angle(p)
    return min(abs(theta - BACK_MAX_DEG), abs(theta - FRONT_MIN_DEG))


def classify_viewpoint(p: PoseSample) -> str:
    theta = viewing_angle(p)
    if theta > FRONT_MIN_DEG:
        return "front"
    if theta < BACK_MAX_DEG:
        return "back"
    side = float(np.dot(np.cross(p.camera_dir, p.forward), UP))
    return "left" if side > 0 else "right"


def pose_stream(episode: "EpisodeRecord") -> List[PoseSample]:
    """One pose per latent frame, derived from the scripted yaw."""
    return [pose_from_yaw(episode.latent_time(k), episode.latent_yaw(k)) for k in range(episode.latent_frames)]
