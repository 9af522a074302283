"""From-scratch PPO-clip learner.

A tanh-squashed diagonal Gaussian actor and a separate critic, both small
tanh MLPs, trained with generalized advantage estimation and the clipped
surrogate objective. Everything runs on the CPU in float64 so that seeded
runs repeat bit for bit.
"""

import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import Normal

from peginsert.config import section
from peginsert.env import ACTION_SIZE, OBS_SIZE, Action, ObservationMask
from peginsert.errors import InvalidConfig, NonFiniteGradient, NonFiniteOutput

# Set up logging
logger = logging.getLogger(__name__)

DTYPE = torch.float64

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0

# Normalized observations are clipped to this range
OBS_CLIP = 10.0

_LOG2 = math.log(2.0)

_PPO_KEYS = (
    "total_steps",
    "rollout_steps",
    "n_envs",
    "gamma",
    "gae_lambda",
    "clip",
    "epochs",
    "minibatch_size",
    "learning_rate",
    "entropy_coef",
    "value_coef",
    "max_grad_norm",
    "anneal_lr",
    "hidden_sizes",
    "log_std_init",
    "seed",
)


@dataclass(frozen=True)
class PpoConfig:
    """Learner hyperparameters.

    rollout_steps counts transitions per update summed over all n_envs
    environments, so each environment contributes rollout_steps / n_envs.
    """

    total_steps: int = 2_000_000
    rollout_steps: int = 2048
    n_envs: int = 8
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    anneal_lr: bool = False
    hidden_sizes: Tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.n_envs < 1 or self.rollout_steps < self.n_envs or self.rollout_steps % self.n_envs:
            raise InvalidConfig(
                f"ppo.rollout_steps ({self.rollout_steps}) must be a positive multiple of "
                f"ppo.n_envs ({self.n_envs})"
            )
        if self.total_steps < self.rollout_steps:
            raise InvalidConfig("ppo.total_steps must be at least ppo.rollout_steps")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise InvalidConfig("ppo.gamma and ppo.gae_lambda must lie in (0, 1]")
        if not 0 < self.clip < 1:
            raise InvalidConfig("ppo.clip must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise InvalidConfig("ppo.epochs and ppo.minibatch_size must be >= 1")
        if not self.learning_rate > 0 or not self.max_grad_norm > 0:
            raise InvalidConfig("ppo.learning_rate and ppo.max_grad_norm must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise InvalidConfig("ppo loss coefficients must be >= 0")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise InvalidConfig("ppo.hidden_sizes needs at least one positive layer width")
        if not LOG_STD_MIN <= self.log_std_init <= LOG_STD_MAX:
            raise InvalidConfig(f"ppo.log_std_init must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]")

    @property
    def steps_per_env(self) -> int:
        return self.rollout_steps // self.n_envs

    @property
    def num_updates(self) -> int:
        return math.ceil(self.total_steps / self.rollout_steps)

    @classmethod
    def from_config(cls, config: Dict) -> "PpoConfig":
        values = section(config, "ppo", _PPO_KEYS)
        defaults = cls()
        kwargs = {}
        for key, value in values.items():
            default = getattr(defaults, key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in value)
            elif isinstance(default, bool):
                kwargs[key] = bool(value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(n_in, n_out, dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Gaussian actor and value critic without shared weights.

    The actor outputs pre-squash means; actions are action_scale * tanh(u)
    for a sample u, so the per-step limits hold as hard bounds.
    """

    def __init__(
        self,
        hidden_sizes: Sequence[int] = (64, 64),
        action_scale: Sequence[float] = (1.0,) * ACTION_SIZE,
        log_std_init: float = 0.0,
        obs_size: int = OBS_SIZE,
        action_size: int = ACTION_SIZE,
    ):
        super().__init__()
        self.obs_size = int(obs_size)
        self.action_size = int(action_size)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)

        self.actor = _mlp([self.obs_size, *self.hidden_sizes, self.action_size])
        self.critic = _mlp([self.obs_size, *self.hidden_sizes, 1])
        self.log_std = nn.Parameter(torch.full((self.action_size,), float(log_std_init), dtype=DTYPE))
        self.register_buffer("action_scale", torch.as_tensor(action_scale, dtype=DTYPE))
        self._init_weights()

    def _init_weights(self) -> None:
        for net, output_gain in ((self.actor, 0.01), (self.critic, 1.0)):
            linears = [m for m in net if isinstance(m, nn.Linear)]
            for i, layer in enumerate(linears):
                gain = output_gain if i == len(linears) - 1 else math.sqrt(2.0)
                nn.init.orthogonal_(layer.weight, gain)
                nn.init.zeros_(layer.bias)

    def distribution(self, obs: torch.Tensor) -> Normal:
        mean = self.actor(obs)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).expand_as(mean)
        # non-finite means are reported by the callers as NonFiniteOutput or NonFiniteGradient
        return Normal(mean, log_std.exp(), validate_args=False)

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)

    def squash(self, raw: torch.Tensor) -> torch.Tensor:
        return self.action_scale * torch.tanh(raw)

    def log_prob(self, dist: Normal, raw: torch.Tensor) -> torch.Tensor:
        """Log-density of the scaled action whose pre-squash sample is raw."""
        # log(1 - tanh(u)^2) written to stay finite for large |u|
        log_jacobian = 2.0 * (_LOG2 - raw - F.softplus(-2.0 * raw)) + torch.log(self.action_scale)
        return (dist.log_prob(raw) - log_jacobian).sum(-1)

    def evaluate(
        self, obs: torch.Tensor, raw: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Log-probability, entropy (of the pre-squash Gaussian) and value."""
        dist = self.distribution(obs)
        return self.log_prob(dist, raw), dist.entropy().sum(-1), self.value(obs)

    def architecture(self) -> Dict[str, object]:
        return {
            "obs_size": self.obs_size,
            "action_size": self.action_size,
            "hidden_sizes": list(self.hidden_sizes),
        }


class PolicyStep(NamedTuple):
    """Batched policy output; action is the squashed, scaled increment."""

    action: np.ndarray
    raw: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray


@torch.no_grad()
def act_batch(
    model: ActorCritic,
    obs: np.ndarray,
    deterministic: bool = False,
    generator: Optional[torch.Generator] = None,
) -> PolicyStep:
    """Sample (or take the mean of) the policy for a batch of observation vectors.

    Raises:
        NonFiniteOutput: If the actor mean or the value is not finite
    """
    obs_t = torch.as_tensor(np.atleast_2d(obs), dtype=DTYPE)
    dist = model.distribution(obs_t)
    value = model.value(obs_t)
    if not (torch.isfinite(dist.mean).all() and torch.isfinite(value).all()):
        raise NonFiniteOutput("Policy network produced a non-finite mean or value")

    if deterministic:
        raw = dist.mean
    else:
        noise = torch.randn(dist.mean.shape, generator=generator, dtype=DTYPE)
        raw = dist.mean + dist.stddev * noise
    log_prob = model.log_prob(dist, raw)
    return PolicyStep(model.squash(raw).numpy(), raw.numpy(), log_prob.numpy(), value.numpy())


def act(
    model: ActorCritic,
    obs_vector: np.ndarray,
    deterministic: bool = False,
    generator: Optional[torch.Generator] = None,
) -> Tuple[Action, float, float]:
    """One action for one observation vector.

    Args:
        model: Actor-critic
        obs_vector: 13-slot observation, already normalized and masked
        deterministic: Use the mean action instead of sampling
        generator: Sampling RNG

    Returns:
        (action, log_prob, value)
    """
    step = act_batch(model, obs_vector, deterministic, generator)
    return Action.from_array(step.action[0]), float(step.log_prob[0]), float(step.value[0])


class RunningMeanStd:
    """Running observation mean and variance (parallel update)."""

    def __init__(self, size: int = OBS_SIZE, epsilon: float = 1e-4):
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.count = epsilon

    def update(self, batch: np.ndarray) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        n = len(batch)
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + batch_var * n + delta**2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, obs: np.ndarray, keep: Optional[np.ndarray] = None) -> np.ndarray:
        """Standardize and clip; multiplying by keep zeroes masked slots exactly."""
        out = np.clip((obs - self.mean) / np.sqrt(self.var + 1e-8), -OBS_CLIP, OBS_CLIP)
        return out if keep is None else out * keep

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            "obs_mean": self.mean.copy(),
            "obs_var": self.var.copy(),
            "obs_count": np.array([self.count]),
        }

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.mean = np.array(state["obs_mean"], dtype=float)
        self.var = np.array(state["obs_var"], dtype=float)
        self.count = float(np.asarray(state["obs_count"]).reshape(-1)[0])


class TrajectoryBuffer:
    """Fixed-size rollout storage laid out as (step, env)."""

    def __init__(
        self, steps: int, n_envs: int, obs_size: int = OBS_SIZE, action_size: int = ACTION_SIZE
    ):
        self.steps = steps
        self.n_envs = n_envs
        self.observations = np.zeros((steps, n_envs, obs_size))
        self.raw_actions = np.zeros((steps, n_envs, action_size))
        self.log_probs = np.zeros((steps, n_envs))
        self.rewards = np.zeros((steps, n_envs))
        self.values = np.zeros((steps, n_envs))
        self.dones = np.zeros((steps, n_envs))
        self.last_values: Optional[np.ndarray] = None
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None
        self.size = 0

    def __len__(self) -> int:
        return self.steps * self.n_envs

    @property
    def full(self) -> bool:
        return self.size == self.steps

    def add(self, obs, raw, log_prob, reward, value, done) -> None:
        if self.full:
            raise IndexError(f"Trajectory buffer already holds {self.steps} steps")
        t = self.size
        self.observations[t] = obs
        self.raw_actions[t] = raw
        self.log_probs[t] = log_prob
        self.rewards[t] = reward
        self.values[t] = value
        self.dones[t] = done
        self.size += 1

    def finish(self, last_values: np.ndarray) -> None:
        """Store the bootstrap values of the states after the last step."""
        self.last_values = np.asarray(last_values, dtype=float).reshape(self.n_envs)

    def flat(self) -> Dict[str, np.ndarray]:
        n = len(self)
        data = {
            "observations": self.observations.reshape(n, -1),
            "raw_actions": self.raw_actions.reshape(n, -1),
            "log_probs": self.log_probs.reshape(n),
            "values": self.values.reshape(n),
        }
        if self.advantages is not None:
            data["advantages"] = self.advantages.reshape(n)
            data["returns"] = self.returns.reshape(n)
        return data


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_values,
    gamma: float,
    gae_lambda: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantages and returns along axis 0.

    dones[t] marks that the episode ended after step t, so nothing is
    bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    advantages = np.zeros_like(rewards)
    next_values = np.asarray(last_values, dtype=float)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values * live - values[t]
        running = delta + gamma * gae_lambda * live * running
        advantages[t] = running
        next_values = values[t]
    return advantages, advantages + values


def compute_gae(
    buffer: TrajectoryBuffer, gamma: float, gae_lambda: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Fill in the buffer's advantages and returns.

    Raises:
        ValueError: If the buffer is not full or has no bootstrap values
    """
    if not buffer.full or buffer.last_values is None:
        raise ValueError("Trajectory buffer must be full and finished before computing GAE")
    advantages, returns = gae(
        buffer.rewards, buffer.values, buffer.dones, buffer.last_values, gamma, gae_lambda
    )
    buffer.advantages = advantages
    buffer.returns = returns
    return advantages, returns


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=float)
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float) -> torch.Tensor:
    """Per-sample min(rA, clip(r, 1 - clip, 1 + clip) A)."""
    return torch.min(ratio * advantages, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages)


class LossTerms(NamedTuple):
    total: torch.Tensor
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor
    clip_fraction: float
    approx_kl: float


def ppo_loss(
    model: ActorCritic,
    obs: torch.Tensor,
    raw: torch.Tensor,
    old_log_probs: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    config: PpoConfig,
) -> LossTerms:
    """Clipped surrogate loss plus weighted value error minus entropy bonus."""
    log_prob, entropy, value = model.evaluate(obs, raw)
    log_ratio = log_prob - old_log_probs
    ratio = log_ratio.exp()

    policy_loss = -clipped_surrogate(ratio, advantages, config.clip).mean()
    value_loss = (value - returns).pow(2).mean()
    entropy_mean = entropy.mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy_mean

    with torch.no_grad():
        clip_fraction = float(((ratio - 1.0).abs() > config.clip).to(DTYPE).mean())
        approx_kl = float(((ratio - 1.0) - log_ratio).mean())
    return LossTerms(total, policy_loss, value_loss, entropy_mean, clip_fraction, approx_kl)


def _as_tensor(values: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(values), dtype=DTYPE)


def ppo_update(
    model: ActorCritic,
    optimizer: torch.optim.Optimizer,
    buffer: TrajectoryBuffer,
    config: PpoConfig,
    generator: Optional[torch.Generator] = None,
) -> Tuple[ActorCritic, Dict[str, float]]:
    """Run the epochs of minibatch updates over one rollout.

    Args:
        model: Actor-critic, updated in place
        optimizer: Optimizer over model.parameters()
        buffer: Rollout with advantages already computed
        config: Clip range, loss weights, epochs and minibatch size
        generator: RNG for minibatch shuffling

    Returns:
        The model and mean diagnostics over all minibatches

    Raises:
        NonFiniteGradient: If a minibatch produces a non-finite gradient
    """
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")

    data = buffer.flat()
    obs = _as_tensor(data["observations"])
    raw = _as_tensor(data["raw_actions"])
    old_log_probs = _as_tensor(data["log_probs"])
    advantages = _as_tensor(normalize_advantages(data["advantages"]))
    returns = _as_tensor(data["returns"])

    n = len(obs)
    size = min(config.minibatch_size, n)
    totals = defaultdict(float)
    index = 0
    for _ in range(config.epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, size):
            batch = order[start : start + size]
            terms = ppo_loss(
                model,
                obs[batch],
                raw[batch],
                old_log_probs[batch],
                advantages[batch],
                returns[batch],
                config,
            )
            optimizer.zero_grad()
            terms.total.backward()
            for param in model.parameters():
                if param.grad is not None and not torch.isfinite(param.grad).all():
                    raise NonFiniteGradient(index)
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optimizer.step()

            totals["loss"] += terms.total.item()
            totals["policy_loss"] += terms.policy.item()
            totals["value_loss"] += terms.value.item()
            totals["entropy"] += terms.entropy.item()
            totals["clip_fraction"] += terms.clip_fraction
            totals["approx_kl"] += terms.approx_kl
            index += 1

    diagnostics = {key: value / index for key, value in totals.items()}
    diagnostics["minibatches"] = index
    return model, diagnostics


class PpoLearner:
    """Actor-critic, optimizer, observation statistics and RNG of one training run."""

    def __init__(
        self,
        config: PpoConfig,
        action_scale: Sequence[float],
        mask: ObservationMask = ObservationMask.VFTM,
    ):
        """Initialize the learner.

        Args:
            config: Learner hyperparameters; config.seed seeds weights and sampling
            action_scale: Per-component action limits (mm, mm, mm, rad)
            mask: Observation channels the policy sees
        """
        torch.set_num_threads(1)
        self.config = config
        self.mask = ObservationMask(mask)
        self.keep = self.mask.slots()

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.model = ActorCritic(config.hidden_sizes, action_scale, config.log_std_init)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.learning_rate, eps=1e-5
        )
        self.generator = torch.Generator().manual_seed(config.seed)
        self.obs_stats = RunningMeanStd(OBS_SIZE)
        self.updates = 0

    def prepare(self, obs_batch: np.ndarray, update_stats: bool = False) -> np.ndarray:
        """Normalize raw observation vectors, optionally folding them into the statistics."""
        obs_batch = np.atleast_2d(np.asarray(obs_batch, dtype=float))
        if update_stats:
            self.obs_stats.update(obs_batch * self.keep)
        return self.obs_stats.normalize(obs_batch, self.keep)

    def step(
        self, obs_batch: np.ndarray, deterministic: bool = False, update_stats: bool = False
    ) -> Tuple[np.ndarray, PolicyStep]:
        """Normalized inputs and the policy's output for a batch of raw observations."""
        inputs = self.prepare(obs_batch, update_stats)
        generator = None if deterministic else self.generator
        return inputs, act_batch(self.model, inputs, deterministic, generator)

    @torch.no_grad()
    def values(self, obs_batch: np.ndarray) -> np.ndarray:
        return self.model.value(_as_tensor(self.prepare(obs_batch))).numpy()

    def set_progress(self, fraction_done: float) -> None:
        """Linear learning-rate annealing when enabled."""
        if not self.config.anneal_lr:
            return
        rate = self.config.learning_rate * max(1.0 - fraction_done, 0.0)
        for group in self.optimizer.param_groups:
            group["lr"] = rate

    def update(self, buffer: TrajectoryBuffer) -> Dict[str, float]:
        compute_gae(buffer, self.config.gamma, self.config.gae_lambda)
        _, diagnostics = ppo_update(
            self.model, self.optimizer, buffer, self.config, self.generator
        )
        self.updates += 1
        logger.debug(
            f"Update {self.updates}: loss {diagnostics['loss']:.4f}, "
            f"kl {diagnostics['approx_kl']:.5f}, clip {diagnostics['clip_fraction']:.3f}"
        )
        return diagnostics

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every learned array in a fixed order: network weights, then observation statistics."""
        arrays = OrderedDict(
            (name, tensor.detach().numpy().copy()) for name, tensor in self.model.state_dict().items()
        )
        arrays.update(self.obs_stats.state_dict())
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        state = OrderedDict(
            (name, torch.as_tensor(np.asarray(arrays[name]), dtype=DTYPE))
            for name in self.model.state_dict()
        )
        self.model.load_state_dict(state)
        self.obs_stats.load_state_dict(arrays)
