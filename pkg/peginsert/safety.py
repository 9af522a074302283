"""Safety filters applied to the policy's action before the environment.

The dynamic safety lock probes downward in small increments until the F/T
sensor reports contact, then keeps the commanded height above a contact
limit derived from the last two sensor/position records. The sliding
baseline instead pins the height at first contact for the rest of the
episode. Both are pure functions of (state, inputs) with a small stateful
wrapper for rollouts.

Positions inside this module are metres; actions stay in millimetres.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from peginsert.config import section
from peginsert.env import Action, Observation
from peginsert.errors import InsufficientHistory, InvalidConfig, MissingWrench

# Set up logging
logger = logging.getLogger(__name__)

MM_PER_M = 1000.0

# Height comparisons against the contact limit (metres)
_Z_TOL = 1e-9


class Phase(str, Enum):
    PROBING = "probing"
    LIMITED = "limited"


class Branch(str, Enum):
    """Which rule produced the current contact limit."""

    NONE = ""
    EDGE = "edge"
    FLAT = "flat"
    TOUCH = "touch"


class SafetyVariant(str, Enum):
    DSL = "DSL"
    SLIDING = "Sliding"
    NONE = "None"


_DSL_KEYS = (
    "beta1",
    "beta2",
    "delta_f",
    "probe_increment",
    "contact_threshold",
    "release_threshold",
    "history",
)


@dataclass(frozen=True)
class DslParams:
    """Gains and thresholds of the safety lock.

    beta1 converts normalized wrench changes to height (metres per unit),
    beta2 weighs the last absolute displacement, delta_f holds the per-axis
    wrench-change thresholds that mark an edge contact.
    """

    beta1: Tuple[float, float, float] = (1e-3, 1e-3, 5e-4)
    beta2: Tuple[float, float, float] = (1e-7, 1e-7, 1e-3)
    delta_f: Tuple[float, ...] = (0.15, 0.15, 0.45, 0.1, 0.1, 0.2)
    probe_increment: float = 5e-4
    contact_threshold: float = 0.5
    release_threshold: float = 0.25
    history: int = 16

    def __post_init__(self):
        for name, size in (("beta1", 3), ("beta2", 3), ("delta_f", 6)):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != size:
                raise InvalidConfig(f"dsl.{name} needs {size} entries, got {len(values)}")
            object.__setattr__(self, name, values)
        if min(self.beta1) < 0 or min(self.beta2) < 0:
            raise InvalidConfig("dsl gains must be >= 0")
        if min(self.delta_f) <= 0:
            raise InvalidConfig("dsl.delta_f entries must be > 0")
        if self.probe_increment < 0:
            raise InvalidConfig("dsl.probe_increment must be >= 0")
        if not 0 < self.contact_threshold < 1:
            raise InvalidConfig("dsl.contact_threshold must lie in (0, 1)")
        if not 0 <= self.release_threshold < self.contact_threshold:
            raise InvalidConfig("dsl.release_threshold must lie in [0, contact_threshold)")
        if self.history < 2:
            raise InvalidConfig("dsl.history must keep at least 2 records")

    @property
    def disabled(self) -> bool:
        """A zero beta2 switches the lock off for wrench-blind models."""
        return not any(self.beta2)

    @classmethod
    def from_config(cls, config: Dict) -> "DslParams":
        values = section(config, "dsl", _DSL_KEYS)
        defaults = cls()
        kwargs = {}
        for key in _DSL_KEYS:
            if key not in values:
                continue
            default = getattr(defaults, key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in values[key])
            elif isinstance(default, int):
                kwargs[key] = int(values[key])
            else:
                kwargs[key] = float(values[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class DslState:
    """Recorder contents and the current contact limit.

    wrench_records and position_records are appended together, newest
    last, and trimmed to the configured history length.
    """

    wrench_records: Tuple[Tuple[float, ...], ...] = ()
    position_records: Tuple[Tuple[float, float, float], ...] = ()
    z_c: Optional[float] = None
    phase: Phase = Phase.PROBING
    branch: Branch = Branch.NONE
    increments: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def recorded(self, wrench: np.ndarray, position: np.ndarray, history: int) -> "DslState":
        wrenches = (self.wrench_records + (tuple(float(v) for v in wrench),))[-history:]
        positions = (self.position_records + (tuple(float(v) for v in position),))[-history:]
        return replace(self, wrench_records=wrenches, position_records=positions)


class LimitUpdate(NamedTuple):
    z_c: float
    branch: Branch
    increments: Tuple[float, float, float]
    displacement: float


def compute_limit(state: DslState, params: DslParams) -> LimitUpdate:
    """Contact limit from the last two records, with the branch taken.

    Raises:
        InsufficientHistory: If fewer than two records are held
    """
    if len(state.wrench_records) < 2 or len(state.position_records) < 2:
        raise InsufficientHistory(
            f"Need two recorder entries to update the contact limit, have {len(state.wrench_records)}"
        )

    change = np.subtract(state.wrench_records[-1], state.wrench_records[-2])
    z_touch = state.position_records[-1][2]

    if np.any(np.abs(change) > np.asarray(params.delta_f)):
        increments = tuple(
            float(params.beta1[axis] * abs(change[axis] + change[axis + 3])) for axis in range(3)
        )
        return LimitUpdate(z_touch + sum(increments), Branch.EDGE, increments, 0.0)

    displacement = np.abs(
        np.subtract(state.position_records[-1], state.position_records[-2])
    )
    increments = tuple(float(b * d) for b, d in zip(params.beta2, displacement))
    return LimitUpdate(
        z_touch + sum(increments), Branch.FLAT, increments, float(np.linalg.norm(displacement))
    )


def update_limit(state: DslState, params: DslParams) -> float:
    """New contact limit z_c (metres) from the recorders."""
    return compute_limit(state, params).z_c


def _sensor_inputs(obs: Observation) -> Tuple[np.ndarray, np.ndarray, float]:
    position = np.asarray(obs.p_ee, dtype=float) / MM_PER_M
    wrench = np.asarray(obs.wrench_norm, dtype=float)
    return wrench, position, float(wrench[2])


def _with_dz(action: Action, dz: float) -> Action:
    return Action(action.dx, action.dy, dz, action.dtheta_z)


def _limit_or_touch(state: DslState, params: DslParams, z: float) -> LimitUpdate:
    """compute_limit, or the touch height itself while the recorder holds one entry."""
    try:
        return compute_limit(state, params)
    except InsufficientHistory:
        return LimitUpdate(z, Branch.TOUCH, (0.0, 0.0, 0.0), 0.0)


def dsl_filter(
    state: DslState, params: DslParams, proposed: Action, obs: Observation
) -> Tuple[Action, DslState]:
    """Apply the safety lock to one proposed action.

    Args:
        state: Lock state before this control cycle
        params: Gains and thresholds
        proposed: Policy action (millimetres, radians)
        obs: Current observation carrying the normalized wrench and EEF position

    Returns:
        The filtered action and the new lock state; only dz is ever changed

    Raises:
        MissingWrench: If the observation hides the wrench while the lock is on
    """
    if not obs.mask.sees_wrench:
        if not params.disabled:
            raise MissingWrench(
                f"Safety lock needs the F/T channel but the observation mask is {obs.mask.value}"
            )
        return proposed, state

    wrench, position, fz = _sensor_inputs(obs)
    z = position[2]

    if state.phase is Phase.LIMITED:
        released = fz < params.release_threshold and z >= state.z_c - _Z_TOL
        if not released:
            state = state.recorded(wrench, position, params.history)
            if fz >= params.contact_threshold:
                # Still pressing: refresh the limit from the newest records, never lowering it
                update = _limit_or_touch(state, params, z)
                state = replace(
                    state,
                    z_c=max(state.z_c, update.z_c),
                    branch=update.branch,
                    increments=update.increments,
                )
            floor_dz = (state.z_c - z) * MM_PER_M
            return _with_dz(proposed, max(proposed.dz, floor_dz)), state
        logger.debug(f"Lock released at z={z:.6f} m, F_z={fz:.3f}; probing again")
        state = replace(state, phase=Phase.PROBING)

    state = state.recorded(wrench, position, params.history)

    if fz < params.contact_threshold:
        probed = proposed.dz - params.probe_increment * MM_PER_M
        return _with_dz(proposed, probed), replace(state, branch=Branch.NONE)

    update = _limit_or_touch(state, params, z)
    logger.debug(
        f"Contact at z={z:.6f} m, F_z={fz:.3f}: {update.branch.value} branch, z_c={update.z_c:.6f} m"
    )
    state = replace(
        state,
        z_c=update.z_c,
        phase=Phase.LIMITED,
        branch=update.branch,
        increments=update.increments,
    )
    floor_dz = (state.z_c - z) * MM_PER_M
    return _with_dz(proposed, max(proposed.dz, floor_dz)), state


@dataclass(frozen=True)
class SlidingState:
    """Height pinned at first contact (metres), None before contact."""

    pinned_z: Optional[float] = None


def sliding_filter(
    state: SlidingState, params: DslParams, proposed: Action, obs: Observation
) -> Tuple[Action, SlidingState]:
    """Probe down to first contact, then hold that height for good.

    Lateral and rotational components always pass through.

    Raises:
        MissingWrench: If the observation hides the wrench
    """
    if not obs.mask.sees_wrench:
        raise MissingWrench(
            f"Sliding filter needs the F/T channel but the observation mask is {obs.mask.value}"
        )

    _, position, fz = _sensor_inputs(obs)
    z = position[2]
    if state.pinned_z is None:
        if fz < params.contact_threshold:
            return _with_dz(proposed, proposed.dz - params.probe_increment * MM_PER_M), state
        state = SlidingState(pinned_z=z)
        logger.debug(f"Sliding pinned at z={z:.6f} m")
    return _with_dz(proposed, (state.pinned_z - z) * MM_PER_M), state


class SafetyFilter:
    """Stateful wrapper used by rollouts and evaluation.

    Call reset() at every episode start; calling the filter returns the
    action to send to the environment.
    """

    def __init__(self, variant: SafetyVariant, params: Optional[DslParams] = None):
        self.variant = SafetyVariant(variant)
        self.params = params or DslParams()
        self.reset()

    def reset(self) -> None:
        self.dsl_state = DslState()
        self.sliding_state = SlidingState()

    def __call__(self, proposed: Action, obs: Observation) -> Action:
        if self.variant is SafetyVariant.DSL:
            action, self.dsl_state = dsl_filter(self.dsl_state, self.params, proposed, obs)
            return action
        if self.variant is SafetyVariant.SLIDING:
            action, self.sliding_state = sliding_filter(
                self.sliding_state, self.params, proposed, obs
            )
            return action
        return proposed

    def log_fields(self) -> Dict[str, object]:
        """Per-step lock diagnostics for the trajectory log."""
        if self.variant is SafetyVariant.DSL:
            state = self.dsl_state
            z_c = state.z_c
            phase = state.phase.value
            branch = state.branch.value
            increments = state.increments
        elif self.variant is SafetyVariant.SLIDING:
            z_c = self.sliding_state.pinned_z
            phase = Phase.PROBING.value if z_c is None else Phase.LIMITED.value
            branch = ""
            increments = (0.0, 0.0, 0.0)
        else:
            z_c, phase, branch, increments = None, "", "", (0.0, 0.0, 0.0)
        return {
            "dsl_phase": phase,
            "dsl_z_c": math.nan if z_c is None else z_c,
            "dsl_branch": branch,
            "dsl_dx": increments[0],
            "dsl_dy": increments[1],
            "dsl_dz": increments[2],
        }


def make_safety_filter(variant, params: Optional[DslParams] = None) -> SafetyFilter:
    """Build the filter for an experiment's safety variant ("DSL", "Sliding" or "None")."""
    return SafetyFilter(SafetyVariant(variant), params)
