"""Per-step trajectory log.

One CSV row per control cycle with a fixed column schema, plus a JSON
sidecar naming the observation mask, safety variant and the parameters
needed to replay the log. Row 0 is the reset state. Floats are written with
repr so that a logged value parses back to the identical double.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from peginsert.env import WRENCH_LABELS, Action, HoleTarget, Observation, Wrench
from peginsert.errors import SchemaMismatch

# Set up logging
logger = logging.getLogger(__name__)

_AXES = ("dx", "dy", "dz", "dtheta_z")
_XYZ = ("x", "y", "z")

PROPOSED_COLUMNS = [f"proposed_{a}" for a in _AXES]
ACTION_COLUMNS = [f"action_{a}" for a in _AXES]
P_EE_COLUMNS = [f"p_ee_{c}" for c in _XYZ]
WRENCH_RAW_COLUMNS = [f"wrench_raw_{label}" for label in WRENCH_LABELS]
WRENCH_NORM_COLUMNS = [f"wrench_norm_{label}" for label in WRENCH_LABELS]
P_H_TRUE_COLUMNS = [f"p_h_true_{c}" for c in _XYZ]
P_H_OBS_COLUMNS = [f"p_h_obs_{c}" for c in _XYZ]
DSL_COLUMNS = ["dsl_phase", "dsl_z_c", "dsl_branch", "dsl_dx", "dsl_dy", "dsl_dz"]

TRAJECTORY_COLUMNS = [
    "step",
    *PROPOSED_COLUMNS,
    *ACTION_COLUMNS,
    *P_EE_COLUMNS,
    "theta_z",
    *WRENCH_RAW_COLUMNS,
    *WRENCH_NORM_COLUMNS,
    *P_H_TRUE_COLUMNS,
    "hole_yaw",
    *P_H_OBS_COLUMNS,
    "in_hole",
    "reward",
    "done",
    "success",
    *DSL_COLUMNS,
]

_INT_COLUMNS = {"step", "in_hole", "done", "success"}
_TEXT_COLUMNS = {"dsl_phase", "dsl_branch"}


def format_cell(value) -> str:
    """CSV text for a cell; floats use repr so they parse back exactly."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _columns(names: Sequence[str], values: Sequence[float]) -> Dict[str, float]:
    return {name: float(v) for name, v in zip(names, values)}


def trajectory_row(
    step: int,
    proposed: Action,
    applied: Action,
    obs: Observation,
    wrench: Wrench,
    target: HoleTarget,
    in_hole: bool,
    reward: float,
    done: bool,
    succeeded: bool,
    safety_fields: Dict[str, object],
) -> Dict[str, object]:
    """Assemble one log row.

    Args:
        step: Control cycle index (0 for the reset state)
        proposed: Policy action before the safety filter
        applied: Action sent to the environment after the safety filter
        obs: Observation after the step
        wrench: Unmasked sensor reading after the step
        target: Episode's hole
        in_hole: Contact-mode flag after the step
        reward: Reward of the step (0 for the reset row)
        done: Episode ended with this step
        succeeded: Success predicate after the step
        safety_fields: SafetyFilter.log_fields() after the step

    Returns:
        Mapping over TRAJECTORY_COLUMNS
    """
    row: Dict[str, object] = {"step": int(step)}
    row.update(_columns(PROPOSED_COLUMNS, proposed.as_array()))
    row.update(_columns(ACTION_COLUMNS, applied.as_array()))
    row.update(_columns(P_EE_COLUMNS, obs.p_ee))
    row["theta_z"] = float(obs.theta_z)
    row.update(_columns(WRENCH_RAW_COLUMNS, wrench.raw))
    row.update(_columns(WRENCH_NORM_COLUMNS, wrench.normalized))
    row.update(_columns(P_H_TRUE_COLUMNS, target.p_h))
    row["hole_yaw"] = float(target.yaw)
    row.update(_columns(P_H_OBS_COLUMNS, obs.p_h_observed))
    row["in_hole"] = bool(in_hole)
    row["reward"] = float(reward)
    row["done"] = bool(done)
    row["success"] = bool(succeeded)
    for column in DSL_COLUMNS:
        row[column] = safety_fields[column]
    return row


def metadata_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


class TrajectoryWriter:
    """Streams rows of one episode to CSV."""

    def __init__(self, path: Union[str, Path], metadata: Optional[Dict] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(
            self._file, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n"
        )
        self._writer.writeheader()
        self.rows = 0
        if metadata is not None:
            metadata_path(self.path).write_text(
                json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )

    def write(self, row: Dict[str, object]) -> None:
        self._writer.writerow({column: format_cell(row[column]) for column in TRAJECTORY_COLUMNS})
        self.rows += 1

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()
            logger.debug(f"Wrote {self.rows} trajectory rows to {self.path}")

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _parse(column: str, text: str, index: int):
    try:
        if column in _TEXT_COLUMNS:
            return text
        if column in _INT_COLUMNS:
            return int(text)
        return float(text)
    except ValueError as e:
        raise SchemaMismatch(f"Row {index}: column {column} holds {text!r}") from e


def read_trajectory(path: Union[str, Path]) -> Tuple[List[Dict[str, object]], Dict]:
    """Parse a trajectory log and its sidecar.

    Returns:
        (rows, metadata); metadata is empty when the sidecar is missing

    Raises:
        SchemaMismatch: If the header differs from the trajectory schema or a
            cell does not parse
    """
    path = Path(path)
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if header != TRAJECTORY_COLUMNS:
            missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
            extra = [c for c in header if c not in TRAJECTORY_COLUMNS]
            raise SchemaMismatch(
                f"{path.name} does not match the trajectory schema "
                f"(missing {missing}, unexpected {extra})"
            )
        rows = []
        for index, raw in enumerate(reader):
            if None in raw or any(value is None for value in raw.values()):
                raise SchemaMismatch(f"Row {index} of {path.name} has the wrong number of cells")
            rows.append({column: _parse(column, raw[column], index) for column in header})

    sidecar = metadata_path(path)
    metadata = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return rows, metadata


def row_vector(row: Dict[str, object], columns: Sequence[str]) -> np.ndarray:
    return np.array([row[column] for column in columns], dtype=float)

