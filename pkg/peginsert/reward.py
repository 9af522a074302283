"""Per-step insertion reward.

Distance-weighted reward with an arrival bonus and a depth bonus near the
hole. Positions are in metres; the harness converts the environment's
millimetres before calling in here.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Sequence, Tuple

import numpy as np

from peginsert.config import section
from peginsert.errors import InvalidConfig

# Set up logging
logger = logging.getLogger(__name__)


class DistanceSign(str, Enum):
    """How the weighted distance term enters the reward."""

    NEGATIVE = "negative"
    AS_WRITTEN = "as_written"

    @property
    def factor(self) -> float:
        return -1.0 if self is DistanceSign.NEGATIVE else 1.0


@dataclass(frozen=True)
class RewardParams:
    """Reward weights and thresholds.

    alpha holds the x, y, z distance weights, the arrival bonus and the
    depth-bonus gain, in that order. delta1 is the arrival radius and delta2
    the radius inside which the depth bonus applies (metres).
    """

    alpha: Tuple[float, float, float, float, float] = (2.30, 2.30, 1.23, 2.0, 0.5)
    delta1: float = 1e-4
    delta2: float = 0.01
    distance_sign: DistanceSign = DistanceSign.NEGATIVE

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        if len(alpha) != 5:
            raise InvalidConfig(f"reward.alpha needs 5 weights, got {len(alpha)}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "distance_sign", DistanceSign(self.distance_sign))
        if not 0 < self.delta1 < self.delta2:
            raise InvalidConfig(
                f"reward thresholds must satisfy delta2 > delta1 > 0, got {self.delta1}, {self.delta2}"
            )

    @classmethod
    def from_config(cls, config: Dict) -> "RewardParams":
        values = section(config, "reward", ("alpha", "delta1", "delta2", "distance_sign"))
        defaults = cls()
        return cls(
            alpha=tuple(values.get("alpha", defaults.alpha)),
            delta1=float(values.get("delta1", defaults.delta1)),
            delta2=float(values.get("delta2", defaults.delta2)),
            distance_sign=values.get("distance_sign", defaults.distance_sign),
        )


def _offset(p_ee: Sequence[float], p_h: Sequence[float]) -> np.ndarray:
    return np.asarray(p_ee, dtype=float) - np.asarray(p_h, dtype=float)


def z_dist(p_ee: Sequence[float], p_h: Sequence[float], params: RewardParams) -> float:
    """Height of the hole datum above the EEF while inside the delta2 ball, else 0."""
    offset = _offset(p_ee, p_h)
    if math.sqrt(float(np.dot(offset, offset))) < params.delta2:
        return float(p_h[2]) - float(p_ee[2])
    return 0.0


def reward(p_ee: Sequence[float], p_h: Sequence[float], params: RewardParams) -> float:
    """Reward for one step.

    Args:
        p_ee: EEF (tool point) position in metres
        p_h: Hole datum position in metres
        params: Weights and thresholds

    Returns:
        sign * weighted distance + arrival bonus + depth bonus
    """
    offset = _offset(p_ee, p_h)
    a1, a2, a3, a4, a5 = params.alpha
    weighted = math.sqrt(a1 * offset[0] ** 2 + a2 * offset[1] ** 2 + a3 * offset[2] ** 2)
    distance = math.sqrt(float(np.dot(offset, offset)))
    arrived = 1.0 if distance < params.delta1 else 0.0
    return params.distance_sign.factor * weighted + a4 * arrived + a5 * z_dist(p_ee, p_h, params)
