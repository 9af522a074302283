"""Checkpoint container for trained policies.

A checkpoint is a self-describing binary file plus two companions:

    <name>.pegckpt      magic b"PEGCKPT1", uint32 little-endian header
                        length, UTF-8 JSON header (architecture, mask,
                        array names and shapes), then every array as
                        little-endian float64 in header order
    <name>.json         metadata sidecar (step, config hash, seed, ...)
    <name>.optim.pt     optimizer and sampler state for resuming training

Only the .pegckpt file is needed to evaluate a policy.
"""

import json
import logging
import re
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from peginsert.env import ObservationMask
from peginsert.errors import IncompatibleCheckpoint
from peginsert.rl import PpoConfig, PpoLearner

# Set up logging
logger = logging.getLogger(__name__)

MAGIC = b"PEGCKPT1"
FORMAT_VERSION = 1
SUFFIX = ".pegckpt"

_STEP_PATTERN = re.compile(r"ckpt_(\d+)\.pegckpt$")


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:09d}{SUFFIX}"


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def optimizer_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".optim.pt")


def _write_json(path: Path, obj: Dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_arrays(
    path: Union[str, Path], arrays: "OrderedDict[str, np.ndarray]", header: Dict
) -> Path:
    """Write the binary container.

    Args:
        path: Output file
        arrays: Arrays in the order they are stored
        header: Extra header fields (architecture, mask, ...)

    Returns:
        The written path
    """
    path = Path(path)
    header = dict(header)
    header["format"] = FORMAT_VERSION
    header["arrays"] = [
        {"name": name, "shape": list(np.shape(values))} for name, values in arrays.items()
    ]
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        for values in arrays.values():
            f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path


def read_arrays(path: Union[str, Path]) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    """Read the binary container.

    Returns:
        (header, arrays) with arrays in stored order

    Raises:
        IncompatibleCheckpoint: If the file is not a checkpoint or is truncated
    """
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise IncompatibleCheckpoint(f"{path} is not a peginsert checkpoint")

    offset = len(MAGIC)
    if len(data) < offset + 4:
        raise IncompatibleCheckpoint(f"Checkpoint {path} is truncated in its header")
    (header_length,) = struct.unpack_from("<I", data, offset)
    offset += 4
    try:
        header = json.loads(data[offset : offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IncompatibleCheckpoint(f"Unreadable checkpoint header in {path}: {e}") from e
    offset += header_length

    if header.get("format") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"Unsupported checkpoint format {header.get('format')}")

    arrays = OrderedDict()
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise IncompatibleCheckpoint(f"Checkpoint {path} is truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise IncompatibleCheckpoint(f"Checkpoint {path} has {len(data) - offset} trailing bytes")
    return header, arrays


def save_checkpoint(
    directory: Union[str, Path],
    learner: PpoLearner,
    step: int,
    config_hash: str,
    seed: int,
    extra: Optional[Dict] = None,
) -> Path:
    """Write container, sidecar and optimizer state for one training step.

    Args:
        directory: Checkpoint directory of the run
        learner: Learner to snapshot
        step: Environment steps taken so far
        config_hash: Hash of the resolved experiment config
        seed: Training seed
        extra: Additional sidecar fields

    Returns:
        Path of the .pegckpt file
    """
    path = Path(directory) / checkpoint_name(step)
    header = {
        "architecture": learner.model.architecture(),
        "mask": learner.mask.value,
    }
    write_arrays(path, learner.arrays(), header)

    metadata = {
        "step": int(step),
        "updates": int(learner.updates),
        "config_hash": config_hash,
        "seed": int(seed),
        "mask": learner.mask.value,
    }
    if extra:
        metadata.update(extra)
    _write_json(sidecar_path(path), metadata)

    torch.save(
        {
            "optimizer": learner.optimizer.state_dict(),
            "generator": learner.generator.get_state(),
        },
        optimizer_path(path),
    )
    logger.info(f"Saved checkpoint {path.name} at step {step}")
    return path


def read_metadata(path: Union[str, Path]) -> Dict:
    """Sidecar metadata of a checkpoint (empty if the sidecar is missing)."""
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        return {}
    return json.loads(sidecar.read_text(encoding="utf-8"))


def load_learner(
    path: Union[str, Path],
    config: PpoConfig,
    action_scale,
    mask: ObservationMask,
) -> PpoLearner:
    """Rebuild a learner from a checkpoint.

    Raises:
        IncompatibleCheckpoint: If the stored mask or network dimensions differ
            from the ones requested
    """
    header, arrays = read_arrays(path)
    mask = ObservationMask(mask)
    if header.get("mask") != mask.value:
        raise IncompatibleCheckpoint(
            f"Checkpoint was trained with mask {header.get('mask')}, spec asks for {mask.value}"
        )

    learner = PpoLearner(config, action_scale, mask)
    expected = learner.model.architecture()
    if header.get("architecture") != expected:
        raise IncompatibleCheckpoint(
            f"Checkpoint architecture {header.get('architecture')} does not match {expected}"
        )
    shapes = {name: tuple(values.shape) for name, values in learner.arrays().items()}
    stored = {name: tuple(values.shape) for name, values in arrays.items()}
    if shapes != stored:
        raise IncompatibleCheckpoint(f"Checkpoint arrays {stored} do not match {shapes}")

    learner.load_arrays(arrays)
    learner.updates = int(read_metadata(path).get("updates", 0))
    return learner


def restore_training_state(path: Union[str, Path], learner: PpoLearner) -> None:
    """Load optimizer and sampler state saved next to a checkpoint."""
    state_file = optimizer_path(path)
    if not state_file.exists():
        logger.warning(f"No optimizer state next to {Path(path).name}; starting it fresh")
        return
    state = torch.load(state_file, weights_only=False)
    learner.optimizer.load_state_dict(state["optimizer"])
    learner.generator.set_state(state["generator"])


def list_checkpoints(directory: Union[str, Path]) -> List[Tuple[int, Path]]:
    """(step, path) for every checkpoint in a directory, oldest first."""
    directory = Path(directory)
    if not directory.exists():
        return []
    found = []
    for path in directory.glob(f"ckpt_*{SUFFIX}"):
        match = _STEP_PATTERN.search(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return sorted(found)


def latest_checkpoint(directory: Union[str, Path]) -> Optional[Tuple[int, Path]]:
    found = list_checkpoints(directory)
    return found[-1] if found else None
