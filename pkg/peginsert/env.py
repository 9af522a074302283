"""Quasi-static peg-in-hole environment.

The peg is rigidly attached to a Cartesian end-effector that translates in
x, y, z and rotates about the vertical axis. The reported EEF point is the
centre of the peg's bottom face. Contact with the plate and the hole walls
is modelled with penalty springs evaluated on a fixed set of bottom-face
samples; the simulated F/T sensor reports their reaction on the EEF.

Units: millimetres, radians, newtons and newton-millimetres.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from peginsert.config import section
from peginsert.errors import EpisodeFinished, InvalidConfig
from peginsert.geometry import (
    CrossSection,
    PlanarPose,
    bottom_face_contact_samples,
    contains,
    penetration,
    points_inside,
    wrap_angle,
)

# Set up logging
logger = logging.getLogger(__name__)

# Observation vector layout
OBS_SIZE = 13
P_EE_SLOT = slice(0, 3)
WRENCH_SLOT = slice(3, 9)
THETA_SLOT = slice(9, 10)
HOLE_SLOT = slice(10, 13)
ACTION_SIZE = 4

WRENCH_LABELS = ("fx", "fy", "fz", "tx", "ty", "tz")

# Bisection steps for wall-limited lateral motion
_WALL_ITERATIONS = 12


class ObservationMask(str, Enum):
    """Which sensing channels the policy sees."""

    VFTM = "VFTM"
    FTM = "FTM"
    VM = "VM"

    @property
    def sees_wrench(self) -> bool:
        return self is not ObservationMask.VM

    @property
    def sees_hole(self) -> bool:
        return self is not ObservationMask.FTM

    def slots(self) -> np.ndarray:
        """1.0 for observed slots of the 13-slot vector, 0.0 for masked ones."""
        keep = np.ones(OBS_SIZE)
        if not self.sees_wrench:
            keep[WRENCH_SLOT] = 0.0
        if not self.sees_hole:
            keep[HOLE_SLOT] = 0.0
        return keep


@dataclass(frozen=True, eq=False)
class EefState:
    """EEF tool point (peg bottom centre) and rotation about z."""

    p_ee: np.ndarray
    theta_z: float = 0.0
    in_hole: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p_ee", np.array(self.p_ee, dtype=float).reshape(3))
        object.__setattr__(self, "theta_z", wrap_angle(self.theta_z))

    @property
    def pose(self) -> PlanarPose:
        return PlanarPose(self.p_ee[0], self.p_ee[1], self.theta_z)

    @property
    def bottom_z(self) -> float:
        return float(self.p_ee[2])


@dataclass(frozen=True, eq=False)
class Wrench:
    """Raw force/torque reading and its full-scale normalization."""

    force: np.ndarray
    torque: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_raw(cls, raw: Sequence[float], full_scale: Sequence[float]) -> "Wrench":
        raw = np.asarray(raw, dtype=float).reshape(6)
        normalized = np.clip(raw / np.asarray(full_scale, dtype=float), -1.0, 1.0)
        return cls(raw[:3].copy(), raw[3:].copy(), normalized)

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3), np.zeros(6))

    @property
    def raw(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass(frozen=True, eq=False)
class HoleTarget:
    """Hole centre on the plate surface, its yaw, outline and depth."""

    p_h: np.ndarray
    yaw: float
    shape: CrossSection
    depth: float

    def __post_init__(self):
        object.__setattr__(self, "p_h", np.array(self.p_h, dtype=float).reshape(3))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        if self.depth < 10.0:
            raise InvalidConfig(f"Hole depth must be at least 10 mm, got {self.depth}")

    @property
    def pose(self) -> PlanarPose:
        return PlanarPose(self.p_h[0], self.p_h[1], self.yaw)

    @property
    def surface_z(self) -> float:
        return float(self.p_h[2])

    @property
    def floor_z(self) -> float:
        return self.surface_z - self.depth


@dataclass(frozen=True, eq=False)
class Observation:
    """What the policy sees; masked channels are stored as zeros."""

    p_ee: np.ndarray
    wrench_norm: np.ndarray
    theta_z: float
    p_h_observed: np.ndarray
    mask: ObservationMask

    def vector(self) -> np.ndarray:
        """[p_ee(3), wrench_norm(6), theta_z(1), p_h_observed(3)]."""
        return np.concatenate([self.p_ee, self.wrench_norm, [self.theta_z], self.p_h_observed])


def make_observation(
    state: EefState, wrench: Wrench, p_h_observed: np.ndarray, mask: ObservationMask
) -> Observation:
    return Observation(
        p_ee=state.p_ee.copy(),
        wrench_norm=wrench.normalized.copy() if mask.sees_wrench else np.zeros(6),
        theta_z=state.theta_z,
        p_h_observed=np.array(p_h_observed, dtype=float) if mask.sees_hole else np.zeros(3),
        mask=mask,
    )


@dataclass(frozen=True)
class Action:
    """EEF increment: translation in millimetres, rotation in radians."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dtheta_z: float = 0.0

    @property
    def delta(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dtheta_z])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Action":
        dx, dy, dz, dtheta = (float(v) for v in values)
        return cls(dx, dy, dz, dtheta)

    def clamped(self, max_step: float, max_yaw_step: float) -> "Action":
        return Action(
            float(np.clip(self.dx, -max_step, max_step)),
            float(np.clip(self.dy, -max_step, max_step)),
            float(np.clip(self.dz, -max_step, max_step)),
            float(np.clip(self.dtheta_z, -max_yaw_step, max_yaw_step)),
        )


_ENV_KEYS = (
    "surface_height",
    "start_height",
    "start_xy",
    "hole_domain",
    "randomize_yaw",
    "hole_depth",
    "obs_noise",
    "contact_stiffness",
    "friction",
    "full_scale",
    "ft_noise",
    "wall_stiffness",
    "max_step",
    "max_yaw_step_deg",
    "penetration_step",
    "wall_penetration",
    "contact_samples",
    "z_limits",
    "success_depth",
    "horizon",
)


@dataclass(frozen=True)
class EnvConfig:
    """Environment constants. See default_config.yaml for units."""

    surface_height: float = 0.0
    start_height: float = 10.0
    start_xy: Tuple[float, float] = (0.0, 0.0)
    hole_low: Tuple[float, float] = (-15.0, -15.0)
    hole_high: Tuple[float, float] = (15.0, 15.0)
    randomize_yaw: bool = True
    hole_depth: float = 20.0
    obs_noise: float = 1.0
    contact_stiffness: float = 10.0
    friction: float = 0.3
    full_scale: Tuple[float, ...] = (20.0, 20.0, 40.0, 500.0, 500.0, 500.0)
    ft_noise: float = 0.01
    wall_stiffness: float = 10.0
    max_step: float = 2.0
    max_yaw_step: float = math.radians(2.0)
    penetration_step: float = 1.0
    wall_penetration: float = 1.0
    contact_samples: int = 100
    z_limits: Tuple[float, float] = (-40.0, 60.0)
    success_depth: float = 2.5
    horizon: int = 110

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.hole_low, self.hole_high)):
            raise InvalidConfig(f"Empty hole domain: low {self.hole_low}, high {self.hole_high}")
        if len(self.full_scale) != 6 or min(self.full_scale) <= 0:
            raise InvalidConfig("full_scale needs 6 positive entries")
        positive = {
            "contact_stiffness": self.contact_stiffness,
            "wall_stiffness": self.wall_stiffness,
            "max_step": self.max_step,
            "max_yaw_step": self.max_yaw_step,
            "penetration_step": self.penetration_step,
            "wall_penetration": self.wall_penetration,
            "success_depth": self.success_depth,
        }
        for name, value in positive.items():
            if not value > 0:
                raise InvalidConfig(f"env.{name} must be positive, got {value}")
        for name in ("obs_noise", "ft_noise", "friction"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"env.{name} must be >= 0")
        if self.horizon < 1:
            raise InvalidConfig("env.horizon must be >= 1")
        if self.contact_samples < 3:
            raise InvalidConfig("env.contact_samples must be >= 3")
        if self.hole_depth < 10.0:
            raise InvalidConfig("env.hole_depth must be at least 10 mm")
        if self.z_limits[0] >= self.z_limits[1]:
            raise InvalidConfig("env.z_limits must be increasing")

    @property
    def max_penetration(self) -> float:
        """Penetration at which the z channel reaches full scale."""
        return self.full_scale[2] / self.contact_stiffness

    @property
    def start_position(self) -> np.ndarray:
        return np.array(
            [self.start_xy[0], self.start_xy[1], self.surface_height + self.start_height]
        )

    @classmethod
    def from_config(cls, config: Dict) -> "EnvConfig":
        values = dict(section(config, "env", _ENV_KEYS))
        defaults = cls()
        domain = values.pop("hole_domain", {}) or {}
        yaw_deg = values.pop("max_yaw_step_deg", None)
        kwargs = {}
        for key, value in values.items():
            default = getattr(defaults, key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in value)
            elif isinstance(default, bool):
                kwargs[key] = bool(value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        if "low" in domain:
            kwargs["hole_low"] = tuple(float(v) for v in domain["low"])
        if "high" in domain:
            kwargs["hole_high"] = tuple(float(v) for v in domain["high"])
        if yaw_deg is not None:
            kwargs["max_yaw_step"] = math.radians(float(yaw_deg))
        return cls(**kwargs)


def _support_heights(
    samples: np.ndarray, in_hole: bool, target: HoleTarget
) -> Tuple[np.ndarray, np.ndarray]:
    """Height of the surface under each sample and which samples sit over solid plate."""
    if in_hole:
        over_solid = np.zeros(len(samples), dtype=bool)
    else:
        over_solid = ~points_inside(target.shape, target.pose, samples)
    support = np.where(over_solid, target.surface_z, target.floor_z)
    return support, over_solid


def _mean_depth(support: np.ndarray, z: float) -> float:
    """Mean penetration of the contact samples below their support (mm)."""
    return float(np.maximum(support - z, 0.0).mean())


def _lowest_height(support: np.ndarray, mean_depth: float) -> float:
    """Lowest bottom height whose mean penetration does not exceed mean_depth."""
    levels = np.sort(support)[::-1]
    n = len(levels)
    for count in range(1, n + 1):
        # Between levels[count] and levels[count - 1] only the first count samples touch
        height = (levels[:count].sum() - n * mean_depth) / count
        below = levels[count] if count < n else -math.inf
        if height >= below:
            return float(height)
    return float(levels[-1])


def compute_wrench(
    peg: CrossSection,
    state: EefState,
    target: HoleTarget,
    lateral_velocity: Sequence[float],
    config: EnvConfig,
    rng: Optional[np.random.Generator] = None,
) -> Wrench:
    """Simulated F/T reading for a peg pose.

    Args:
        peg: Peg cross-section
        state: EEF state (bottom-face centre, yaw, in-hole flag)
        target: Hole placement
        lateral_velocity: x/y displacement of the last step (mm), for friction
        config: Contact constants
        rng: Noise source; no sensor noise when omitted

    Returns:
        Wrench with raw values and the full-scale normalization
    """
    pose = state.pose
    samples = bottom_face_contact_samples(peg, pose, config.contact_samples)
    support, _ = _support_heights(samples, state.in_hole, target)
    depth = np.maximum(support - state.bottom_z, 0.0)

    raw = np.zeros(6)
    if np.any(depth > 0):
        forces = config.contact_stiffness * depth / len(samples)
        arms = samples - pose.translation
        fz = forces.sum()
        raw[2] = fz
        raw[3] = float(np.dot(arms[:, 1], forces))
        raw[4] = -float(np.dot(arms[:, 0], forces))

        velocity = np.asarray(lateral_velocity, dtype=float)[:2]
        speed = float(np.linalg.norm(velocity))
        if speed > 1e-12 and config.friction > 0:
            direction = velocity / speed
            raw[0:2] = -config.friction * fz * direction
            friction = -config.friction * forces[:, None] * direction[None, :]
            raw[5] += float(np.sum(arms[:, 0] * friction[:, 1] - arms[:, 1] * friction[:, 0]))

    if state.in_hole:
        contact = penetration(target.shape, target.pose, peg, pose)
        if contact.depth > 0:
            push = config.wall_stiffness * contact.depth * contact.direction
            arm = contact.point - pose.translation
            # Wall reaction acts halfway up the inserted length
            lever = 0.5 * max(target.surface_z - state.bottom_z, 0.0)
            raw[0:2] += push
            raw[3] += -lever * push[1]
            raw[4] += lever * push[0]
            raw[5] += arm[0] * push[1] - arm[1] * push[0]

    if rng is not None and config.ft_noise > 0 and np.any(raw != 0):
        raw = raw + rng.normal(0.0, config.ft_noise, 6) * np.asarray(config.full_scale)

    return Wrench.from_raw(raw, config.full_scale)


def success(peg: CrossSection, state: EefState, target: HoleTarget, depth: float = 2.5) -> bool:
    """Peg contained by the hole outline and its bottom `depth` mm below the surface."""
    if state.bottom_z > target.surface_z - depth:
        return False
    return contains(target.shape, target.pose, peg, state.pose)


class InsertionEnv:
    """One peg-in-hole episode at a time.

    reset() places the EEF at the fixed start pose and draws a new hole;
    step() applies a clamped increment and returns the new observation.
    """

    def __init__(
        self,
        config: EnvConfig,
        peg: CrossSection,
        hole: CrossSection,
        mask: ObservationMask = ObservationMask.VFTM,
    ):
        """Initialize the environment.

        Args:
            config: Environment constants
            peg: Peg cross-section attached to the EEF
            hole: Hole cross-section cut in the plate
            mask: Observation channels the policy sees
        """
        self.config = config
        self.peg = peg
        self.hole = hole
        self.mask = ObservationMask(mask)

        self.rng = np.random.default_rng()
        self.state: Optional[EefState] = None
        self.target: Optional[HoleTarget] = None
        self.wrench = Wrench.zero()
        self.steps = 0
        self.done = True
        self.penetration = 0.0
        self.mean_depth = 0.0
        self.peak_force = 0.0

    def reset(self, seed: Optional[int] = None) -> Tuple[Observation, HoleTarget]:
        """Start a new episode.

        Args:
            seed: Seed for the episode's random stream

        Returns:
            Initial observation and the drawn hole
        """
        cfg = self.config
        self.rng = np.random.default_rng(seed)
        xy = self.rng.uniform(cfg.hole_low, cfg.hole_high)
        yaw = self.rng.uniform(-math.pi, math.pi) if cfg.randomize_yaw else 0.0
        self.target = HoleTarget(
            np.array([xy[0], xy[1], cfg.surface_height]), yaw, self.hole, cfg.hole_depth
        )
        self.state = EefState(cfg.start_position, 0.0, False)
        self.steps = 0
        self.done = False
        self.penetration = 0.0

        self.mean_depth = self._settled_depth(
            bottom_face_contact_samples(self.peg, self.state.pose, cfg.contact_samples)
        )
        self.wrench = compute_wrench(self.peg, self.state, self.target, (0.0, 0.0), cfg, self.rng)
        self.peak_force = float(self.wrench.normalized[2])
        logger.debug(
            f"Reset: hole at ({xy[0]:.2f}, {xy[1]:.2f}) mm, yaw {math.degrees(yaw):.1f} deg"
        )
        return self.observe(), self.target

    def observe(self) -> Observation:
        """Observation of the current state, with fresh hole-position noise."""
        p_h_observed = self.target.p_h.copy()
        if self.config.obs_noise > 0:
            p_h_observed = p_h_observed + self.rng.normal(0.0, self.config.obs_noise, 3)
        return make_observation(self.state, self.wrench, p_h_observed, self.mask)

    def _settled_depth(self, samples: np.ndarray) -> float:
        support, _ = _support_heights(samples, self.state.in_hole, self.target)
        return _mean_depth(support, self.state.bottom_z)

    def _wall_limited(self, pose: PlanarPose, proposed: PlanarPose) -> PlanarPose:
        """Largest fraction of a lateral move that keeps wall overlap in bounds."""
        target = self.target
        limit = self.config.wall_penetration

        def overlap(fraction: float) -> Tuple[float, PlanarPose]:
            candidate = PlanarPose(
                pose.x + fraction * (proposed.x - pose.x),
                pose.y + fraction * (proposed.y - pose.y),
                pose.yaw + fraction * wrap_angle(proposed.yaw - pose.yaw),
            )
            return penetration(target.shape, target.pose, self.peg, candidate).depth, candidate

        allowed = max(limit, overlap(0.0)[0])
        depth, candidate = overlap(1.0)
        if depth <= allowed:
            return candidate

        low, high = 0.0, 1.0
        best = pose
        for _ in range(_WALL_ITERATIONS):
            middle = 0.5 * (low + high)
            depth, candidate = overlap(middle)
            if depth <= allowed:
                low, best = middle, candidate
            else:
                high = middle
        return best

    def step(self, action: Action) -> Tuple[Observation, Wrench, bool, Dict]:
        """Apply one EEF increment.

        Args:
            action: Proposed increment; clamped to the per-step limits

        Returns:
            (observation, wrench, done, info) where info carries noise-free
            poses and contact diagnostics

        Raises:
            EpisodeFinished: If the episode already ended
        """
        if self.done:
            raise EpisodeFinished("step() called on a finished episode; call reset() first")

        cfg = self.config
        applied = action.clamped(cfg.max_step, cfg.max_yaw_step)
        if applied != action:
            logger.debug(f"Clamped action {action} to {applied}")

        state = self.state
        pose = state.pose
        proposed = PlanarPose(pose.x + applied.dx, pose.y + applied.dy, pose.yaw + applied.dtheta_z)
        new_pose = self._wall_limited(pose, proposed) if state.in_hole else proposed

        samples = bottom_face_contact_samples(self.peg, new_pose, cfg.contact_samples)
        support, over_solid = _support_heights(samples, state.in_hole, self.target)
        top = float(support.max())
        z = state.bottom_z
        z_target = float(np.clip(z + applied.dz, cfg.z_limits[0], cfg.z_limits[1]))
        allowed = min(max(top - z, 0.0) + cfg.penetration_step, cfg.max_penetration)
        z_new = max(z_target, top - allowed)
        # Sliding onto more plate rides the peg up; the plate reaction only grows by descending
        reach = self.mean_depth + min(max(z - z_target, 0.0), cfg.penetration_step)
        if _mean_depth(support, z_new) > reach:
            z_new = max(z_new, _lowest_height(support, reach))

        surface = self.target.surface_z
        if z_new >= surface:
            in_hole = False
        else:
            in_hole = state.in_hole or not bool(over_solid.any())

        moved = np.array([new_pose.x - pose.x, new_pose.y - pose.y])
        self.state = EefState(np.array([new_pose.x, new_pose.y, z_new]), new_pose.yaw, in_hole)
        self.penetration = max(top - z_new, 0.0)
        self.mean_depth = self._settled_depth(samples)
        self.wrench = compute_wrench(self.peg, self.state, self.target, moved, cfg, self.rng)
        self.peak_force = max(self.peak_force, float(self.wrench.normalized[2]))
        self.steps += 1

        succeeded = success(self.peg, self.state, self.target, cfg.success_depth)
        self.done = succeeded or self.steps >= cfg.horizon

        info = {
            "step": self.steps,
            "p_ee": self.state.p_ee.copy(),
            "theta_z": self.state.theta_z,
            "p_h": self.target.p_h.copy(),
            "hole_yaw": self.target.yaw,
            "in_hole": in_hole,
            "penetration": self.penetration,
            "wrench_raw": self.wrench.raw,
            "peak_force": self.peak_force,
            "applied_action": applied,
            "success": succeeded,
        }
        return self.observe(), self.wrench, self.done, info


class VectorEnv:
    """Independent environments stepped together with automatic reset.

    Each member draws its episode seeds from its own child of the root seed,
    so the hole sequence of member i does not depend on the other members.
    """

    def __init__(self, envs: List[InsertionEnv], seed: int = 0):
        self.envs = envs
        children = np.random.SeedSequence(seed).spawn(len(envs))
        self._seed_streams = [np.random.default_rng(child) for child in children]
        self.observations: List[Observation] = []

    def __len__(self) -> int:
        return len(self.envs)

    def _next_seed(self, index: int) -> int:
        return int(self._seed_streams[index].integers(2**63 - 1))

    def reset(self) -> List[Observation]:
        self.observations = [env.reset(self._next_seed(i))[0] for i, env in enumerate(self.envs)]
        return list(self.observations)

    def step(
        self, actions: Sequence[Action]
    ) -> Tuple[List[Observation], List[Wrench], np.ndarray, List[Dict]]:
        """Step every member; finished members are reset in place.

        The info of a finished member carries its last observation under
        "terminal_observation"; the returned observation is the first one
        of the next episode.
        """
        observations, wrenches, dones, infos = [], [], [], []
        for i, (env, action) in enumerate(zip(self.envs, actions)):
            obs, wrench, done, info = env.step(action)
            if done:
                info["terminal_observation"] = obs
                obs, _ = env.reset(self._next_seed(i))
            observations.append(obs)
            wrenches.append(wrench)
            dones.append(done)
            infos.append(info)
        self.observations = observations
        return observations, wrenches, np.array(dones), infos
