"""Experiment orchestration.

Training runs with checkpoints and best-model selection, the fixed-episode
evaluation protocol, the ablation matrix with its comparison tables, and
replay of logged episodes.

Run directory layout (one per experiment and seed):

    config.yaml              resolved configuration
    metrics.csv              one row per PPO update
    checkpoints/             ckpt_<step>.pegckpt + sidecars
    trajectories/            sampled episodes per checkpoint
    best.json                checkpoint chosen by the selection evaluation
"""

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from peginsert.chart import text_summary, write_svg
from peginsert.checkpoint import (
    latest_checkpoint,
    list_checkpoints,
    load_learner,
    read_metadata,
    restore_training_state,
    save_checkpoint,
)
from peginsert.config import config_hash, load_config, load_yaml, save_config, with_overrides
from peginsert.env import (
    Action,
    EnvConfig,
    HoleTarget,
    InsertionEnv,
    Observation,
    ObservationMask,
    VectorEnv,
)
from peginsert.errors import InvalidSpec, ReplayDivergence, SchemaMismatch
from peginsert.geometry import (
    CrossSection,
    gap_proportion,
    get_shape,
    hole_for_clearance,
    hole_for_gap_proportion,
)
from peginsert.reward import RewardParams, reward
from peginsert.rl import PpoConfig, PpoLearner, TrajectoryBuffer
from peginsert.safety import MM_PER_M, DslParams, SafetyFilter, SafetyVariant, make_safety_filter
from peginsert.trajectory import (
    ACTION_COLUMNS,
    DSL_COLUMNS,
    P_EE_COLUMNS,
    P_H_OBS_COLUMNS,
    P_H_TRUE_COLUMNS,
    PROPOSED_COLUMNS,
    WRENCH_NORM_COLUMNS,
    TrajectoryWriter,
    format_cell,
    read_trajectory,
    row_vector,
    trajectory_row,
)

# Set up logging
logger = logging.getLogger(__name__)

# Independent random streams derived from a run seed
TRAIN_STREAM = 0
EVAL_STREAM = 1
SELECTION_STREAM = 2
SAMPLE_STREAM = 3

_SPEC_KEYS = (
    "name",
    "model",
    "safety",
    "shape",
    "clearance_mm",
    "gap_proportion",
    "seeds",
    "eval_episodes",
    "checkpoint_every",
    "selection_episodes",
    "trajectory_samples",
    "eval_shapes",
)
_OVERRIDE_SECTIONS = ("env", "reward", "dsl", "ppo")

METRICS_COLUMNS = [
    "update",
    "env_steps",
    "episodes",
    "mean_episode_reward",
    "success_rate",
    "loss",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "learning_rate",
]

SUMMARY_COLUMNS = [
    "cell",
    "model",
    "safety",
    "shape",
    "clearance_mm",
    "gap_proportion",
    "seed",
    "spec_hash",
    "checkpoint",
    "episodes",
    "reward_mean",
    "reward_var",
    "success_mean",
    "success_var",
    "peak_fz",
    "status",
    "error",
]

GENERALIZATION_COLUMNS = [
    "cell",
    "seed",
    "train_shape",
    "eval_shape",
    "gap_proportion",
    "episodes",
    "reward_mean",
    "success_mean",
    "success_var",
    "status",
    "error",
]

_MODEL_ORDER = [m.value for m in ObservationMask]
_SAFETY_ORDER = [s.value for s in SafetyVariant]


def _stream_seed(seed: int, stream: int, offset: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, offset]).generate_state(1)[0])


def episode_seeds(seed: int, stream: int, count: int) -> List[int]:
    """Per-episode reset seeds; the first k seeds do not depend on count."""
    rng = np.random.default_rng([seed, stream])
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=count)]


def append_csv(path: Union[str, Path], columns: Sequence[str], row: Dict) -> None:
    """Append one row, writing the header when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        if not exists:
            writer.writeheader()
        writer.writerow({c: "" if row.get(c) is None else format_cell(row[c]) for c in columns})


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Dict]) -> Path:
    path = Path(path)
    if path.exists():
        path.unlink()
    for row in rows:
        append_csv(path, columns, row)
    if not rows:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(",".join(columns) + "\n")
    return path


def _eval_targets(raw) -> Tuple[Tuple[str, Optional[float]], ...]:
    """Generalization targets: a shape name, or {shape, gap_proportion}."""
    targets = []
    for item in raw or ():
        if isinstance(item, str):
            targets.append((item, None))
        elif isinstance(item, dict) and "shape" in item:
            proportion = item.get("gap_proportion")
            targets.append((str(item["shape"]), None if proportion is None else float(proportion)))
        else:
            raise InvalidSpec(f"eval_shapes entry {item!r} needs a shape name")
    return tuple(targets)


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: model variant, safety variant, task geometry and overrides.

    config holds the fully resolved configuration (defaults, user config
    and the spec's section overrides); the typed views are built from it.
    """

    name: str
    model: ObservationMask
    safety: SafetyVariant
    shape: str
    clearance_mm: Optional[float]
    gap_proportion: Optional[float]
    seeds: Tuple[int, ...]
    eval_episodes: int
    checkpoint_every: int
    selection_episodes: int
    trajectory_samples: int
    eval_shapes: Tuple[Tuple[str, Optional[float]], ...] = ()
    config: Dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.eval_episodes < 1:
            raise InvalidSpec(f"{self.name}: eval_episodes must be >= 1")
        if self.checkpoint_every < 1 or self.selection_episodes < 1:
            raise InvalidSpec(f"{self.name}: checkpoint_every and selection_episodes must be >= 1")
        if self.trajectory_samples < 0:
            raise InvalidSpec(f"{self.name}: trajectory_samples must be >= 0")
        if not self.seeds:
            raise InvalidSpec(f"{self.name}: at least one seed is required")
        if self.gap_proportion is not None:
            if not 0 < self.gap_proportion < 1:
                raise InvalidSpec(f"{self.name}: gap_proportion must lie in (0, 1)")
        elif self.clearance_mm is None or not self.clearance_mm > 0:
            raise InvalidSpec(f"{self.name}: clearance_mm must be positive")
        for shape, proportion in self.eval_shapes:
            if proportion is not None and not 0 < proportion < 1:
                raise InvalidSpec(f"{self.name}: eval gap_proportion for {shape} must lie in (0, 1)")
        if (
            self.model is ObservationMask.VM
            and self.safety is SafetyVariant.DSL
            and not self.dsl_params.disabled
        ):
            raise InvalidSpec(
                f"{self.name}: the VM model cannot sense the wrench; set dsl.beta2 to zeros "
                "to run it under DSL"
            )
        if self.model is ObservationMask.VM and self.safety is SafetyVariant.SLIDING:
            raise InvalidSpec(f"{self.name}: the sliding filter needs the wrench channel")
        # Surface invalid section values now rather than mid-run
        self.env_config, self.reward_params, self.ppo_config

    @classmethod
    def from_dict(cls, data: Dict, base_config: Optional[Dict] = None) -> "ExperimentSpec":
        """Build a spec from its YAML mapping.

        Args:
            data: Spec fields plus optional env/reward/dsl/ppo override sections
            base_config: Configuration the overrides apply to (packaged defaults
                when omitted)

        Raises:
            InvalidSpec: If a field is invalid
            InvalidConfig: If an override section holds invalid values
        """
        base = load_config() if base_config is None else base_config
        unknown = sorted(set(data) - set(_SPEC_KEYS) - set(_OVERRIDE_SECTIONS))
        for key in unknown:
            logger.warning(f"Ignoring unknown spec key '{key}'")

        overrides = {name: data[name] for name in _OVERRIDE_SECTIONS if data.get(name)}
        resolved = with_overrides(base, overrides)
        harness = dict(resolved.get("harness") or {})
        harness.update({key: data[key] for key in _SPEC_KEYS if key in data and key != "name"})
        if "clearance_mm" in data and "gap_proportion" not in data:
            harness["gap_proportion"] = None
        resolved["harness"] = harness

        try:
            model = ObservationMask(harness.get("model", "VFTM"))
            safety = SafetyVariant(harness.get("safety", "DSL"))
        except ValueError as e:
            raise InvalidSpec(str(e)) from e

        proportion = harness.get("gap_proportion")
        clearance = harness.get("clearance_mm")
        seeds = harness.get("seeds", [0])
        if isinstance(seeds, int):
            seeds = [seeds]
        return cls(
            name=str(data.get("name") or f"{model.value}-{safety.value}"),
            model=model,
            safety=safety,
            shape=str(harness.get("shape", "tr")),
            clearance_mm=None if clearance is None else float(clearance),
            gap_proportion=None if proportion is None else float(proportion),
            seeds=tuple(int(s) for s in seeds),
            eval_episodes=int(harness.get("eval_episodes", 500)),
            checkpoint_every=int(harness.get("checkpoint_every", 10000)),
            selection_episodes=int(harness.get("selection_episodes", 20)),
            trajectory_samples=int(harness.get("trajectory_samples", 1)),
            eval_shapes=_eval_targets(harness.get("eval_shapes")),
            config=resolved,
        )

    @classmethod
    def from_file(cls, path: Union[str, Path], base_config: Optional[Dict] = None) -> "ExperimentSpec":
        data = load_yaml(path)
        data.setdefault("name", Path(path).stem)
        return cls.from_dict(data, base_config)

    def derive(self, **changes) -> "ExperimentSpec":
        """Copy with harness fields or override sections changed."""
        data = {
            "name": self.name,
            "model": self.model.value,
            "safety": self.safety.value,
            "shape": self.shape,
            "clearance_mm": self.clearance_mm,
            "gap_proportion": self.gap_proportion,
            "seeds": list(self.seeds),
            "eval_episodes": self.eval_episodes,
            "checkpoint_every": self.checkpoint_every,
            "selection_episodes": self.selection_episodes,
            "trajectory_samples": self.trajectory_samples,
            "eval_shapes": [{"shape": s, "gap_proportion": p} for s, p in self.eval_shapes],
        }
        data.update(changes)
        return ExperimentSpec.from_dict(data, self.config)

    @cached_property
    def env_config(self) -> EnvConfig:
        return EnvConfig.from_config(self.config)

    @cached_property
    def reward_params(self) -> RewardParams:
        return RewardParams.from_config(self.config)

    @cached_property
    def dsl_params(self) -> DslParams:
        return DslParams.from_config(self.config)

    @cached_property
    def ppo_config(self) -> PpoConfig:
        return PpoConfig.from_config(self.config)

    @property
    def spec_hash(self) -> str:
        return config_hash(self.config)

    @property
    def gap_label(self) -> str:
        if self.gap_proportion is not None:
            return f"p{self.gap_proportion:g}"
        return f"{self.clearance_mm:g}mm"


def action_scale(config: EnvConfig) -> Tuple[float, float, float, float]:
    return (config.max_step, config.max_step, config.max_step, config.max_yaw_step)


def build_hole(
    peg: CrossSection, clearance_mm: Optional[float], proportion: Optional[float]
) -> CrossSection:
    """Hole by gap proportion when given, else by uniform clearance."""
    if proportion is not None:
        return hole_for_gap_proportion(peg, proportion)
    return hole_for_clearance(peg, clearance_mm)


def make_env(
    spec: ExperimentSpec, shape: Optional[str] = None, proportion: Optional[float] = None
) -> InsertionEnv:
    """Environment for a spec, optionally with another peg shape or gap proportion."""
    peg = get_shape(shape or spec.shape)
    if proportion is None:
        proportion = spec.gap_proportion
    hole = build_hole(peg, spec.clearance_mm, proportion)
    return InsertionEnv(spec.env_config, peg, hole, spec.model)


def step_reward(info: Dict, params: RewardParams) -> float:
    """Reward of one environment step; positions converted to metres."""
    p_ee = np.asarray(info["p_ee"], dtype=float) / MM_PER_M
    p_h = np.asarray(info["p_h"], dtype=float) / MM_PER_M
    return reward(p_ee, p_h, params)


class Policy(Protocol):
    def reset(self, target: HoleTarget) -> None:
        ...

    def __call__(self, obs: Observation) -> Action:
        ...


class LearnedPolicy:
    """Checkpointed actor; mean actions unless deterministic is False."""

    def __init__(self, learner: PpoLearner, deterministic: bool = True):
        self.learner = learner
        self.deterministic = deterministic

    def reset(self, target: HoleTarget) -> None:
        pass

    def __call__(self, obs: Observation) -> Action:
        _, out = self.learner.step(obs.vector(), deterministic=self.deterministic)
        return Action.from_array(out.action[0])


class RandomPolicy:
    """Uniform actions within the per-step limits."""

    def __init__(self, max_step: float, max_yaw_step: float, seed: int = 0):
        self.scale = np.array([max_step, max_step, max_step, max_yaw_step])
        self.rng = np.random.default_rng(seed)

    def reset(self, target: HoleTarget) -> None:
        pass

    def __call__(self, obs: Observation) -> Action:
        return Action.from_array(self.rng.uniform(-1.0, 1.0, 4) * self.scale)


class OraclePolicy:
    """Scripted policy that knows the true hole pose.

    Hovers while it aligns x, y and yaw (modulo the peg's rotational
    symmetry), then descends at full speed.
    """

    def __init__(
        self,
        peg: CrossSection,
        max_step: float,
        max_yaw_step: float,
        tolerance: float = 0.05,
        yaw_tolerance: float = 1e-6,
    ):
        self.peg = peg
        self.max_step = max_step
        self.max_yaw_step = max_yaw_step
        self.tolerance = tolerance
        self.yaw_tolerance = yaw_tolerance
        self.target: Optional[HoleTarget] = None

    def reset(self, target: HoleTarget) -> None:
        self.target = target

    def _yaw_error(self, theta_z: float) -> float:
        order = self.peg.symmetry_order
        if order == 0:
            return 0.0
        period = 2.0 * math.pi / order
        error = self.target.yaw - theta_z
        return (error + 0.5 * period) % period - 0.5 * period

    def __call__(self, obs: Observation) -> Action:
        dx, dy = (self.target.p_h[:2] - obs.p_ee[:2]).tolist()
        yaw_error = self._yaw_error(obs.theta_z)
        aligned = math.hypot(dx, dy) <= self.tolerance and abs(yaw_error) <= self.yaw_tolerance
        step = self.max_step
        return Action(
            float(np.clip(dx, -step, step)),
            float(np.clip(dy, -step, step)),
            -step if aligned else 0.0,
            float(np.clip(yaw_error, -self.max_yaw_step, self.max_yaw_step)),
        )


@dataclass(frozen=True)
class EpisodeResult:
    seed: int
    total_reward: float
    success: bool
    steps: int
    peak_force: float


def _trajectory_metadata(spec: ExperimentSpec, **extra) -> Dict:
    metadata = {
        "experiment": spec.name,
        "mask": spec.model.value,
        "safety": spec.safety.value,
        "shape": spec.shape,
        "dsl": spec.config.get("dsl", {}),
        "reward": spec.config.get("reward", {}),
        "spec_hash": spec.spec_hash,
    }
    metadata.update(extra)
    return metadata


def run_episode(
    env: InsertionEnv,
    policy: Policy,
    safety: SafetyFilter,
    reward_params: RewardParams,
    seed: int,
    writer: Optional[TrajectoryWriter] = None,
) -> EpisodeResult:
    """Play one episode to success or the horizon, optionally logging every step."""
    obs, target = env.reset(seed)
    policy.reset(target)
    safety.reset()
    if writer is not None:
        writer.write(
            trajectory_row(
                0, Action(), Action(), obs, env.wrench, target, env.state.in_hole,
                0.0, False, False, safety.log_fields(),
            )
        )

    total = 0.0
    succeeded = False
    done = False
    while not done:
        proposed = policy(obs)
        action = safety(proposed, obs)
        obs, wrench, done, info = env.step(action)
        step_value = step_reward(info, reward_params)
        total += step_value
        succeeded = info["success"]
        if writer is not None:
            writer.write(
                trajectory_row(
                    info["step"], proposed, action, obs, wrench, target, info["in_hole"],
                    step_value, done, succeeded, safety.log_fields(),
                )
            )
    return EpisodeResult(seed, total, bool(succeeded), env.steps, env.peak_force)


@dataclass(frozen=True)
class EvalReport:
    """Outcome of a fixed number of independent evaluation episodes."""

    episodes: Tuple[EpisodeResult, ...]
    spec_hash: str
    checkpoint: str
    shape: str
    gap_proportion: float

    @property
    def count(self) -> int:
        return len(self.episodes)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.total_reward for e in self.episodes])

    @property
    def successes(self) -> np.ndarray:
        return np.array([1.0 if e.success else 0.0 for e in self.episodes])

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def reward_var(self) -> float:
        return float(self.rewards.var())

    @property
    def success_mean(self) -> float:
        return float(self.successes.mean())

    @property
    def success_var(self) -> float:
        return float(self.successes.var())

    @property
    def peak_force(self) -> float:
        return max(e.peak_force for e in self.episodes)

    def summary_row(self, spec: ExperimentSpec, seed: int) -> Dict:
        return {
            "cell": spec.name,
            "model": spec.model.value,
            "safety": spec.safety.value,
            "shape": self.shape,
            "clearance_mm": spec.clearance_mm if spec.gap_proportion is None else None,
            "gap_proportion": self.gap_proportion,
            "seed": seed,
            "spec_hash": self.spec_hash,
            "checkpoint": self.checkpoint,
            "episodes": self.count,
            "reward_mean": self.reward_mean,
            "reward_var": self.reward_var,
            "success_mean": self.success_mean,
            "success_var": self.success_var,
            "peak_fz": self.peak_force,
            "status": "ok",
            "error": "",
        }


def evaluate(
    checkpoint: Optional[Union[str, Path]],
    spec: ExperimentSpec,
    seed: Optional[int] = None,
    episodes: Optional[int] = None,
    shape: Optional[str] = None,
    proportion: Optional[float] = None,
    policy: Optional[Policy] = None,
    stream: int = EVAL_STREAM,
    trajectory_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Evaluate a checkpoint (or a scripted policy) over independent episodes.

    Args:
        checkpoint: Checkpoint file; ignored when policy is given
        spec: Experiment the checkpoint belongs to
        seed: Root seed of the episode seeds (first spec seed by default)
        episodes: Episode count (spec.eval_episodes by default)
        shape: Evaluate on another peg shape
        proportion: Gap proportion for the evaluation hole
        policy: Scripted policy used instead of a checkpoint
        stream: Seed stream, so selection and evaluation never share episodes
        trajectory_dir: When set, every episode is logged there

    Returns:
        EvalReport over exactly the requested number of episodes

    Raises:
        IncompatibleCheckpoint: If the checkpoint does not fit the spec's mask
    """
    seed = spec.seeds[0] if seed is None else seed
    count = spec.eval_episodes if episodes is None else episodes
    if count < 1:
        raise InvalidSpec("Evaluation needs at least one episode")

    env = make_env(spec, shape, proportion)
    label = type(policy).__name__ if policy is not None else Path(checkpoint).name
    if policy is None:
        ppo = replace(spec.ppo_config, seed=seed)
        learner = load_learner(checkpoint, ppo, action_scale(env.config), spec.model)
        policy = LearnedPolicy(learner)
    safety = make_safety_filter(spec.safety, spec.dsl_params)

    results = []
    for index, episode_seed in enumerate(episode_seeds(seed, stream, count)):
        if trajectory_dir is None:
            results.append(run_episode(env, policy, safety, spec.reward_params, episode_seed))
            continue
        path = Path(trajectory_dir) / f"episode_{index:04d}.csv"
        metadata = _trajectory_metadata(spec, checkpoint=label, episode_seed=episode_seed)
        with TrajectoryWriter(path, metadata) as writer:
            results.append(
                run_episode(env, policy, safety, spec.reward_params, episode_seed, writer)
            )

    report = EvalReport(
        episodes=tuple(results),
        spec_hash=spec.spec_hash,
        checkpoint=label,
        shape=env.peg.name,
        gap_proportion=gap_proportion(env.peg, env.hole),
    )
    logger.info(
        f"Evaluated {label} on {report.shape} over {count} episodes: "
        f"success {report.success_mean:.4f} (var {report.success_var:.4f}), "
        f"reward {report.reward_mean:.4f} (var {report.reward_var:.4f})"
    )
    return report


def _collect_rollout(
    learner: PpoLearner,
    venv: VectorEnv,
    filters: List[SafetyFilter],
    observations: List[Observation],
    reward_params: RewardParams,
    episode_returns: np.ndarray,
    steps_per_env: int,
) -> Tuple[TrajectoryBuffer, List[Observation], List[Tuple[float, bool]]]:
    """Fill one rollout buffer; the safety filter is part of the environment."""
    buffer = TrajectoryBuffer(steps_per_env, len(venv))
    finished = []
    for _ in range(steps_per_env):
        vectors = np.stack([obs.vector() for obs in observations])
        inputs, out = learner.step(vectors, update_stats=True)
        proposed = [Action.from_array(a) for a in out.action]
        actions = [f(p, obs) for f, p, obs in zip(filters, proposed, observations)]
        observations, _, dones, infos = venv.step(actions)

        rewards = np.array([step_reward(info, reward_params) for info in infos])
        episode_returns += rewards
        for i in np.flatnonzero(dones):
            finished.append((float(episode_returns[i]), bool(infos[i]["success"])))
            episode_returns[i] = 0.0
            filters[i].reset()
        buffer.add(inputs, out.raw, out.log_prob, rewards, out.value, dones.astype(float))

    buffer.finish(learner.values(np.stack([obs.vector() for obs in observations])))
    return buffer, observations, finished


def _truncate_metrics(path: Path, updates: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[: updates + 1]))


def _write_samples(
    spec: ExperimentSpec, learner: PpoLearner, run_dir: Path, step: int, seed: int
) -> None:
    if spec.trajectory_samples < 1:
        return
    env = make_env(spec)
    policy = LearnedPolicy(learner)
    safety = make_safety_filter(spec.safety, spec.dsl_params)
    seeds = episode_seeds(_stream_seed(seed, SAMPLE_STREAM, step), SAMPLE_STREAM, spec.trajectory_samples)
    for index, episode_seed in enumerate(seeds):
        path = run_dir / "trajectories" / f"ckpt_{step:09d}_ep{index:02d}.csv"
        metadata = _trajectory_metadata(spec, step=step, seed=seed, episode_seed=episode_seed)
        with TrajectoryWriter(path, metadata) as writer:
            run_episode(env, policy, safety, spec.reward_params, episode_seed, writer)


def train(
    spec: ExperimentSpec,
    run_dir: Union[str, Path],
    seed: Optional[int] = None,
    resume: bool = False,
) -> Path:
    """Train one seed of an experiment.

    Args:
        spec: Experiment to train
        run_dir: Output directory of this run
        seed: Training seed (first spec seed by default)
        resume: Continue from the latest checkpoint in run_dir

    Returns:
        The run directory
    """
    seed = spec.seeds[0] if seed is None else seed
    run_dir = Path(run_dir)
    checkpoints = run_dir / "checkpoints"
    metrics_path = run_dir / "metrics.csv"
    run_dir.mkdir(parents=True, exist_ok=True)

    ppo = replace(spec.ppo_config, seed=seed)
    resolved = with_overrides(spec.config, {"ppo": {"seed": seed}})
    envs = [make_env(spec) for _ in range(ppo.n_envs)]
    scale = action_scale(envs[0].config)

    latest = latest_checkpoint(checkpoints) if resume else None
    if latest is not None:
        learner = load_learner(latest[1], ppo, scale, spec.model)
        restore_training_state(latest[1], learner)
        steps = int(read_metadata(latest[1]).get("env_steps", latest[0]))
        written = latest[0] // spec.checkpoint_every
        _truncate_metrics(metrics_path, learner.updates)
        logger.info(f"Resuming {spec.name} seed {seed} from step {steps}")
    else:
        learner = PpoLearner(ppo, scale, spec.model)
        steps = 0
        written = 0
        for _, path in list_checkpoints(checkpoints):
            path.unlink()
        for stale in (metrics_path, run_dir / "best.json"):
            if stale.exists():
                stale.unlink()
        logger.info(f"Training {spec.name} seed {seed} for {ppo.total_steps} steps in {run_dir}")

    save_config(resolved, run_dir / "config.yaml")

    venv = VectorEnv(envs, seed=_stream_seed(seed, TRAIN_STREAM, steps))
    filters = [make_safety_filter(spec.safety, spec.dsl_params) for _ in envs]
    observations = venv.reset()
    episode_returns = np.zeros(len(envs))

    while steps < ppo.total_steps:
        learner.set_progress(steps / ppo.total_steps)
        buffer, observations, finished = _collect_rollout(
            learner, venv, filters, observations, spec.reward_params, episode_returns,
            ppo.steps_per_env,
        )
        diagnostics = learner.update(buffer)
        steps += ppo.rollout_steps

        returns = [r for r, _ in finished]
        row = {
            "update": learner.updates,
            "env_steps": steps,
            "episodes": len(finished),
            "mean_episode_reward": float(np.mean(returns)) if returns else math.nan,
            "success_rate": float(np.mean([s for _, s in finished])) if finished else math.nan,
            "learning_rate": learner.optimizer.param_groups[0]["lr"],
        }
        row.update({key: diagnostics[key] for key in METRICS_COLUMNS if key in diagnostics})
        append_csv(metrics_path, METRICS_COLUMNS, row)
        logger.debug(
            f"Update {learner.updates}: {len(finished)} episodes, "
            f"reward {row['mean_episode_reward']:.4f}, success {row['success_rate']:.3f}"
        )

        while (written + 1) * spec.checkpoint_every <= min(steps, ppo.total_steps):
            written += 1
            milestone = written * spec.checkpoint_every
            save_checkpoint(
                checkpoints, learner, milestone, spec.spec_hash, seed, {"env_steps": steps}
            )
            _write_samples(spec, learner, run_dir, milestone, seed)

    select_best(spec, run_dir, seed)
    logger.info(f"Finished {spec.name} seed {seed}: {written} checkpoints")
    return run_dir


def select_best(spec: ExperimentSpec, run_dir: Union[str, Path], seed: int) -> Optional[Dict]:
    """Pick the checkpoint with the highest selection success rate.

    Ties go to the higher mean reward, then to the earlier checkpoint. The
    choice is written to best.json.
    """
    run_dir = Path(run_dir)
    candidates = []
    for step, path in list_checkpoints(run_dir / "checkpoints"):
        report = evaluate(
            path, spec, seed=seed, episodes=spec.selection_episodes, stream=SELECTION_STREAM
        )
        candidates.append(
            {
                "checkpoint": path.name,
                "step": step,
                "success_rate": report.success_mean,
                "mean_reward": report.reward_mean,
            }
        )
    if not candidates:
        logger.warning(f"No checkpoints in {run_dir}; nothing to select")
        return None

    best = max(candidates, key=lambda c: (c["success_rate"], c["mean_reward"], -c["step"]))
    record = dict(best, episodes=spec.selection_episodes, candidates=candidates)
    (run_dir / "best.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    logger.info(
        f"Best checkpoint {best['checkpoint']}: success {best['success_rate']:.3f}, "
        f"reward {best['mean_reward']:.4f}"
    )
    return record


def best_checkpoint(run_dir: Union[str, Path]) -> Path:
    """Checkpoint named by best.json, else the latest one.

    Raises:
        FileNotFoundError: If the run has no checkpoint
    """
    run_dir = Path(run_dir)
    best_file = run_dir / "best.json"
    if best_file.exists():
        name = json.loads(best_file.read_text())["checkpoint"]
        return run_dir / "checkpoints" / name
    latest = latest_checkpoint(run_dir / "checkpoints")
    if latest is None:
        raise FileNotFoundError(f"No checkpoints under {run_dir}")
    return latest[1]


def expand_matrix(matrix: Dict, base_config: Optional[Dict] = None) -> List[ExperimentSpec]:
    """Cells of an ablation matrix.

    The matrix lists models, safety variants, gaps (clearances_mm and/or
    gap_proportions) and shapes over a shared base spec and takes their
    product; seeds and eval_shapes given next to the lists apply to every
    cell. A "cells" list instead expands each entry separately over the
    shared keys, for tables that are not a full product.

    VM cells under DSL get beta2 = 0, which switches the lock off for the
    wrench-blind model; VM under Sliding has no meaning and is skipped.
    """
    if matrix.get("cells"):
        shared = {key: value for key, value in matrix.items() if key != "cells"}
        specs = []
        for cell in matrix["cells"]:
            specs.extend(expand_matrix(dict(shared, **cell), base_config))
        return specs

    base = dict(matrix.get("base") or {})
    for key in ("seeds", "eval_shapes"):
        if key in matrix:
            base[key] = matrix[key]
    models = matrix.get("models") or [base.get("model", "VFTM")]
    safeties = matrix.get("safety") or [base.get("safety", "DSL")]
    shapes = matrix.get("shapes") or [base.get("shape", "tr")]
    gaps = [
        {"clearance_mm": float(c), "gap_proportion": None}
        for c in matrix.get("clearances_mm") or []
    ]
    gaps += [{"gap_proportion": float(p)} for p in matrix.get("gap_proportions") or []]
    if not gaps:
        gaps = [{}]

    specs = []
    for model in models:
        for safety in safeties:
            if model == ObservationMask.VM.value and safety == SafetyVariant.SLIDING.value:
                logger.warning("Skipping VM under Sliding: the filter needs the wrench channel")
                continue
            for gap in gaps:
                for shape in shapes:
                    data = dict(base, model=model, safety=safety, shape=shape, **gap)
                    if model == ObservationMask.VM.value and safety == SafetyVariant.DSL.value:
                        dsl = dict(base.get("dsl") or {})
                        dsl["beta2"] = [0.0, 0.0, 0.0]
                        data["dsl"] = dsl
                    spec = ExperimentSpec.from_dict(data, base_config)
                    specs.append(spec.derive(name=f"{model}-{safety}-{spec.gap_label}-{shape}"))
    return specs


def _error_row(spec: ExperimentSpec, seed: int, error: Exception) -> Dict:
    return {
        "cell": spec.name,
        "model": spec.model.value,
        "safety": spec.safety.value,
        "shape": spec.shape,
        "clearance_mm": spec.clearance_mm,
        "gap_proportion": spec.gap_proportion,
        "seed": seed,
        "spec_hash": spec.spec_hash,
        "status": "failed",
        "error": repr(error),
    }


def run_cell(spec: ExperimentSpec, run_dir: Union[str, Path], seed: int) -> Tuple[Dict, List[Dict]]:
    """Train, select and evaluate one cell; failures become error rows."""
    try:
        train(spec, run_dir, seed)
        checkpoint = best_checkpoint(run_dir)
        report = evaluate(checkpoint, spec, seed)
    except Exception as e:
        logger.warning(f"Cell {spec.name} seed {seed} failed: {e!r}", exc_info=True)
        return _error_row(spec, seed, e), []

    row = report.summary_row(spec, seed)
    generalization = []
    trained = spec.gap_proportion if spec.gap_proportion is not None else report.gap_proportion
    for shape, proportion in spec.eval_shapes:
        proportion = trained if proportion is None else proportion
        entry = {"cell": spec.name, "seed": seed, "train_shape": spec.shape, "eval_shape": shape}
        try:
            shape_report = evaluate(checkpoint, spec, seed, shape=shape, proportion=proportion)
        except Exception as e:
            logger.warning(f"Cell {spec.name} on {shape} failed: {e!r}")
            entry.update(status="failed", error=repr(e))
        else:
            entry.update(
                gap_proportion=shape_report.gap_proportion,
                episodes=shape_report.count,
                reward_mean=shape_report.reward_mean,
                success_mean=shape_report.success_mean,
                success_var=shape_report.success_var,
                status="ok",
                error="",
            )
        generalization.append(entry)
    return row, generalization


def _run_job(job: Tuple[ExperimentSpec, str, int]) -> Tuple[Dict, List[Dict]]:
    spec, run_dir, seed = job
    return run_cell(spec, run_dir, seed)


def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values)) if values else math.nan


def _gap_column(row: Dict) -> str:
    if row.get("clearance_mm") not in (None, ""):
        return f"{float(row['clearance_mm']):g} mm"
    return f"p = {float(row['gap_proportion']):.3f}"


def table_one(rows: Sequence[Dict]) -> str:
    """Markdown comparison table: one line per model and safety variant,
    reward and success mean/variance (median over seeds) per gap."""
    ok = [r for r in rows if r.get("status") == "ok"]
    gaps: List[str] = []
    for row in ok:
        if _gap_column(row) not in gaps:
            gaps.append(_gap_column(row))

    def order(key):
        model, safety, shape = key
        return (_MODEL_ORDER.index(model), _SAFETY_ORDER.index(safety), shape)

    keys = sorted({(r["model"], r["safety"], r["shape"]) for r in ok}, key=order)
    header = ["Model", "Safety", "Shape"]
    for gap in gaps:
        header += [f"{gap} reward ME", "VAR", "sr ME", "VAR"]
    header.append("peak F_z")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for key in keys:
        cells = list(key)
        peaks = []
        for gap in gaps:
            group = [r for r in ok if (r["model"], r["safety"], r["shape"]) == key and _gap_column(r) == gap]
            peaks += [r["peak_fz"] for r in group]
            for column in ("reward_mean", "reward_var", "success_mean", "success_var"):
                value = _median([r[column] for r in group])
                cells.append("-" if math.isnan(value) else f"{value:.4f}")
        cells.append(f"{max(peaks):.4f}" if peaks else "-")
        lines.append("| " + " | ".join(cells) + " |")

    failed = [r for r in rows if r.get("status") != "ok"]
    for row in failed:
        lines.append(f"\nFailed: {row['cell']} seed {row['seed']}: {row['error']}")
    return "\n".join(lines) + "\n"


def table_two(rows: Sequence[Dict]) -> str:
    """Markdown shape-generalization table: gap proportion and success per shape."""
    ok = [r for r in rows if r.get("status") == "ok"]
    lines = [
        "| Cell | Trained on | Evaluated on | Gap proportion | Success rate |",
        "|---|---|---|---|---|",
    ]
    keys = []
    for row in ok:
        key = (row["cell"], row["train_shape"], row["eval_shape"], round(row["gap_proportion"], 6))
        if key not in keys:
            keys.append(key)
    for key in keys:
        cell, trained_on, evaluated_on, proportion = key
        group = [
            r for r in ok
            if (r["cell"], r["train_shape"], r["eval_shape"], round(r["gap_proportion"], 6)) == key
        ]
        rate = _median([r["success_mean"] for r in group])
        lines.append(
            f"| {cell} | {trained_on} | {evaluated_on} | {100 * proportion:.2f}% | {100 * rate:.2f}% |"
        )
    return "\n".join(lines) + "\n"


@dataclass
class AblationReport:
    rows: List[Dict]
    generalization: List[Dict]
    output_dir: Path

    @property
    def failures(self) -> int:
        failed = [r for r in self.rows if r.get("status") != "ok"]
        failed += [r for r in self.generalization if r.get("status") != "ok"]
        return len(failed)


def run_ablation(
    specs: Sequence[ExperimentSpec],
    output_dir: Union[str, Path],
    workers: int = 1,
) -> AblationReport:
    """Train and evaluate every cell and seed, then write the comparison tables.

    Args:
        specs: Cells of the matrix
        output_dir: Directory for cell run directories and the summary files
        workers: Cells run in parallel processes when > 1

    Returns:
        AblationReport; failed cells appear as rows with status "failed"
    """
    output_dir = Path(output_dir)
    jobs = [
        (spec, str(output_dir / spec.name / f"seed_{seed}"), seed)
        for spec in specs
        for seed in spec.seeds
    ]
    logger.info(f"Running {len(jobs)} ablation jobs with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]

    rows = [row for row, _ in results]
    generalization = [entry for _, entries in results for entry in entries]

    write_csv(output_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    (output_dir / "summary.md").write_text(table_one(rows))
    if generalization:
        write_csv(output_dir / "generalization.csv", GENERALIZATION_COLUMNS, generalization)
        (output_dir / "generalization.md").write_text(table_two(generalization))

    report = AblationReport(rows, generalization, output_dir)
    logger.info(f"Ablation finished: {len(rows)} rows, {report.failures} failure(s)")
    return report


def load_matrix(path: Union[str, Path], base_config: Optional[Dict] = None) -> Tuple[str, List[ExperimentSpec]]:
    """Matrix name and expanded cells from a matrix YAML file."""
    matrix = load_yaml(path)
    name = str(matrix.get("name") or Path(path).stem)
    return name, expand_matrix(matrix, base_config)


@dataclass
class ReplayResult:
    rows: int
    summary: str
    svg: Optional[Path]


def _logged_observation(row: Dict, mask: ObservationMask) -> Observation:
    wrench = row_vector(row, WRENCH_NORM_COLUMNS) if mask.sees_wrench else np.zeros(6)
    return Observation(
        p_ee=row_vector(row, P_EE_COLUMNS),
        wrench_norm=wrench,
        theta_z=float(row["theta_z"]),
        p_h_observed=row_vector(row, P_H_OBS_COLUMNS),
        mask=mask,
    )


def _same(logged, replayed) -> bool:
    if isinstance(logged, str) or isinstance(replayed, str):
        return str(logged) == str(replayed)
    logged, replayed = float(logged), float(replayed)
    if math.isnan(logged) or math.isnan(replayed):
        return math.isnan(logged) and math.isnan(replayed)
    return logged == replayed


def replay(
    csv_path: Union[str, Path],
    svg_path: Optional[Union[str, Path]] = None,
    base_config: Optional[Dict] = None,
) -> ReplayResult:
    """Recompute rewards and safety decisions of a logged episode and chart it.

    Args:
        csv_path: Trajectory CSV written by evaluation or training
        svg_path: Chart output (next to the CSV by default)
        base_config: Parameters used when the log has no sidecar

    Returns:
        ReplayResult with the text summary and the chart path

    Raises:
        SchemaMismatch: If the file does not follow the trajectory schema
        ReplayDivergence: At the first cell whose recomputed value differs
    """
    csv_path = Path(csv_path)
    rows, metadata = read_trajectory(csv_path)
    if not rows or int(rows[0]["step"]) != 0:
        raise SchemaMismatch(f"{csv_path.name} must start with the reset row (step 0)")

    config = load_config() if base_config is None else base_config
    if not metadata:
        logger.warning(f"No sidecar for {csv_path.name}; replaying with configured parameters")
    config = with_overrides(config, {k: metadata[k] for k in ("dsl", "reward") if k in metadata})
    harness = config.get("harness") or {}
    mask = ObservationMask(metadata.get("mask", harness.get("model", "VFTM")))
    variant = SafetyVariant(metadata.get("safety", harness.get("safety", "DSL")))
    reward_params = RewardParams.from_config(config)
    safety = make_safety_filter(variant, DslParams.from_config(config))
    safety.reset()

    for previous, row in zip(rows, rows[1:]):
        step = int(row["step"])
        replayed_reward = reward(
            row_vector(row, P_EE_COLUMNS) / MM_PER_M,
            row_vector(row, P_H_TRUE_COLUMNS) / MM_PER_M,
            reward_params,
        )
        checks = [("reward", row["reward"], replayed_reward)]

        proposed = Action.from_array(row_vector(row, PROPOSED_COLUMNS))
        action = safety(proposed, _logged_observation(previous, mask))
        checks += [(c, row[c], v) for c, v in zip(ACTION_COLUMNS, action.as_array())]
        fields = safety.log_fields()
        checks += [(c, row[c], fields[c]) for c in DSL_COLUMNS]

        for column, logged, replayed in checks:
            if not _same(logged, replayed):
                raise ReplayDivergence(step, column, logged, replayed)

    svg = write_svg(rows, svg_path or csv_path.with_suffix(".svg"), title=csv_path.stem)
    summary = text_summary(rows, divergences=0)
    logger.info(f"Replayed {len(rows) - 1} steps of {csv_path.name} with no divergence")
    return ReplayResult(len(rows), summary, svg)
