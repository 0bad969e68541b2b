"""Q-guided policy optimization on a deterministic 2-D point-goal task.

Pipeline (in this order): fit a state-conditioned diffusion behavior model,
pre-generate ``K`` support actions per dataset state, fit ``Q`` with an
in-support softmax Bellman target, fit the guidance network with in-support
contrastive energy prediction under the energy ``E = -Q``, then roll out the
guided diffusion policy.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .guidance import (
    EnergySpec,
    GuidanceModel,
    cep_loss_from_energies,
    default_guidance_spec,
)
from .netcore import (
    DivergenceError,
    Network,
    NetworkSpec,
    OptimizerState,
    TrainConfig,
    adam_step,
    cosine_lr,
    init,
    polyak_update,
    value_and_grad,
)
from .prior import PriorModel, train_prior
from .sampler import SamplerConfig, solver2_sample
from .schedule import Schedule

log = logging.getLogger(__name__)

SUPPORT_STEPS = 15
S_SWEEP = (1.0, 2.0, 3.0, 5.0, 8.0, 10.0)


@dataclass(frozen=True)
class PointGoalEnv:
    goal: tuple = (2.0, 2.0)
    step_size: float = 0.5
    bound: float = 4.0
    horizon: int = 20
    gamma: float = 0.95

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-self.bound, self.bound, size=(n, 2))

    def step(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(s', r)`` with ``s' = clip(s + 0.5 a)`` and ``r = -|s' - goal|``."""
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        s2 = np.clip(np.asarray(s, dtype=np.float64) + self.step_size * a, -self.bound, self.bound)
        r = -np.linalg.norm(s2 - np.asarray(self.goal), axis=-1)
        return s2, r


@dataclass
class TransitionDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.states)
        if not all(len(v) == n for v in (self.actions, self.rewards, self.next_states, self.dones)):
            raise ValueError("transition arrays must have equal length")
        if np.any(np.abs(self.actions) > 1.0 + 1e-12):
            raise ValueError("actions must lie in the action box")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    def __len__(self):
        return len(self.states)

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s1", "s2", "a1", "a2", "r", "s1'", "s2'", "done"])
            for i in range(len(self)):
                w.writerow([*map(repr, map(float, self.states[i])), *map(repr, map(float, self.actions[i])),
                            repr(float(self.rewards[i])), *map(repr, map(float, self.next_states[i])),
                            int(self.dones[i])])

    @classmethod
    def from_csv(cls, path) -> "TransitionDataset":
        with Path(path).open(newline="") as fh:
            rows = np.array([[float(v) for v in r] for r in list(csv.reader(fh))[1:]]).reshape(-1, 8)
        return cls(rows[:, 0:2], rows[:, 2:4], rows[:, 4], rows[:, 5:7], rows[:, 7].astype(bool))


def behavior_action(env: PointGoalEnv, s, rng: np.random.Generator, mix: float, noise_std: float = 0.3):
    """Noisy greedy action toward the goal with probability ``mix``, else uniform."""
    s = np.atleast_2d(s)
    n = s.shape[0]
    to_goal = np.asarray(env.goal) - s
    norm = np.linalg.norm(to_goal, axis=1, keepdims=True)
    unit = np.divide(to_goal, norm, out=np.zeros_like(to_goal), where=norm > 0)
    greedy = np.clip(unit + noise_std * rng.standard_normal((n, 2)), -1.0, 1.0)
    uniform = rng.uniform(-1.0, 1.0, size=(n, 2))
    pick = rng.uniform(size=n) < mix
    return np.where(pick[:, None], greedy, uniform)


def generate_behavior_dataset(env: PointGoalEnv, n_episodes: int, mix: float, seed: int,
                              noise_std: float = 0.3) -> TransitionDataset:
    """Roll out the mixed behavior policy; episodes run for the full horizon.

    The task has no terminal states, so ``done`` is always false; the time
    limit is a truncation, not a termination.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must be in [0, 1]")
    rng = np.random.default_rng(seed)
    s = env.reset(rng, n_episodes)
    S, A, R, S2 = [], [], [], []
    returns = np.zeros(n_episodes)
    for _ in range(env.horizon):
        a = behavior_action(env, s, rng, mix, noise_std)
        s2, r = env.step(s, a)
        S.append(s), A.append(a), R.append(r), S2.append(s2)
        returns += r
        s = s2
    # episode-major order
    stack = lambda xs: np.stack(xs, axis=1).reshape(n_episodes * env.horizon, *np.shape(xs[0])[1:])
    n = n_episodes * env.horizon
    return TransitionDataset(stack(S), stack(A), stack(R), stack(S2), np.zeros(n, dtype=bool), returns)


def default_behavior_spec(hidden=(128, 128, 128)) -> NetworkSpec:
    return NetworkSpec(input_dim=2, output_dim=2, hidden=tuple(hidden), activation="silu",
                       time_embedding="sinusoidal", time_dim=16, cond_dim=2)


def train_behavior_policy(dataset: TransitionDataset, spec: NetworkSpec | None = None,
                          config: TrainConfig | None = None, seed: int = 0) -> PriorModel:
    """Conditional denoising fit of ``eps_theta(a_t | s, t)``."""
    return train_prior(dataset.actions, spec or default_behavior_spec(), config, seed, cond=dataset.states)


def sample_actions(behavior: PriorModel, states, config: SamplerConfig, guidance=None, chunk: int = 20_000):
    """One action per state row, clipped to the action box."""
    states = np.atleast_2d(states)
    rng = np.random.default_rng(config.seed)
    noise = rng.standard_normal((states.shape[0], 2))
    out = np.empty_like(noise)
    for lo in range(0, states.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        out[sl] = solver2_sample(behavior, guidance, config, cond=states[sl], x_init=noise[sl])
    return np.clip(out, -1.0, 1.0)


@dataclass
class SupportActionSet:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        if self.actions.ndim != 3 or self.actions.shape[0] != self.states.shape[0]:
            raise ValueError("support actions must have shape (n_states, K, action_dim)")
        if np.any(np.abs(self.actions) > 1.0):
            raise ValueError("support actions must lie in the action box")

    @property
    def K(self) -> int:
        return self.actions.shape[1]

    def to_json(self, path) -> None:
        doc = {str(i): {"state": self.states[i].tolist(), "actions": self.actions[i].tolist()}
               for i in range(self.states.shape[0])}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "SupportActionSet":
        doc = json.loads(Path(path).read_text())
        keys = sorted(doc, key=int)
        return cls(np.array([doc[k]["state"] for k in keys]), np.array([doc[k]["actions"] for k in keys]))


def generate_support_actions(behavior: PriorModel, states, K: int = 16,
                             config: SamplerConfig | None = None) -> SupportActionSet:
    """``K`` behavior samples per state via the second-order solver (15 steps)."""
    config = config or SamplerConfig(steps=SUPPORT_STEPS, method="solver2", guidance_scale=0.0)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    rep = np.repeat(states, K, axis=0)
    acts = sample_actions(behavior, rep, config)
    return SupportActionSet(states, acts.reshape(states.shape[0], K, 2))


def support_index(dataset: TransitionDataset):
    """Distinct states over ``s`` and ``s'`` with index maps for both columns."""
    allstates = np.concatenate([dataset.states, dataset.next_states])
    uniq, inverse = np.unique(allstates, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = len(dataset)
    return uniq, inverse[:n], inverse[n:]


def default_q_spec(hidden=(128, 128, 128)) -> NetworkSpec:
    return NetworkSpec(input_dim=2, output_dim=1, hidden=tuple(hidden), activation="relu",
                       time_embedding="none", cond_dim=2)


@dataclass
class QModel:
    online: list[Network]
    target: list[Network]
    beta_q: float = 1.0
    reward_scale: float = 1.0
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.online) != len(self.target) or not self.online:
            raise ValueError("need matching online and target networks")
        if any(o.spec != t.spec for o, t in zip(self.online, self.target)):
            raise ValueError("online and target specs differ")

    @staticmethod
    def _eval(nets, states, actions):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        lead = actions.shape[:-1]
        s = np.broadcast_to(states, (*lead, states.shape[-1])).reshape(-1, states.shape[-1])
        a = actions.reshape(-1, actions.shape[-1])
        vals = [net.forward(a, None, s)[:, 0] for net in nets]
        return np.min(vals, axis=0).reshape(lead)

    def value(self, states, actions) -> np.ndarray:
        """Online ``Q(s, a)`` (minimum over the ensemble); broadcasts ``states`` over actions."""
        return self._eval(self.online, states, actions)

    def target_value(self, states, actions) -> np.ndarray:
        return self._eval(self.target, states, actions)


def softmax_q_target(q: QModel, reward, next_states, support_next, done, gamma: float) -> np.ndarray:
    """``r + gamma * sum_j softmax_j(beta_Q Q'(s', a'_j)) Q'(s', a'_j)``; ``r`` on terminal rows.

    ``support_next`` has shape ``(B, K, action_dim)``; values come from the
    target networks and carry no gradient.
    """
    reward = np.atleast_1d(np.asarray(reward, dtype=np.float64))
    support_next = np.asarray(support_next, dtype=np.float64)
    if support_next.ndim == 2:
        support_next = support_next[None]
    ns = np.atleast_2d(next_states)[:, None, :]
    qn = q.target_value(ns, support_next)
    w = softmax(q.beta_q * qn, axis=1)
    v = np.sum(w * qn, axis=1)
    return reward + gamma * (1.0 - np.asarray(done, dtype=np.float64)) * v


def q_loss_and_grads(q: QModel, states, actions, targets) -> tuple[float, list[np.ndarray]]:
    """Squared Bellman error of each online net; gradients for online nets only."""
    n = len(targets)
    total = 0.0
    grads = []
    for net in q.online:
        def closure(apply):
            diff = apply(actions, None, states)[:, 0] - targets
            return np.sum(diff * diff) / n, [(2.0 * diff / n)[:, None]]
        loss, g = value_and_grad(net, closure)
        total += loss
        grads.append(g)
    return total, grads


def train_q(dataset: TransitionDataset, support: SupportActionSet, next_index, spec: NetworkSpec | None = None,
            config: TrainConfig | None = None, seed: int = 0, gamma: float = 0.95, beta_q: float = 1.0,
            tau: float = 0.005, double_q: bool = True, normalize_rewards: bool = True) -> QModel:
    """In-support softmax Q-learning with Polyak-averaged target networks.

    ``next_index[i]`` locates transition ``i``'s next state in ``support``.
    Rewards are divided by their dataset standard deviation when
    ``normalize_rewards`` is set.
    """
    spec = spec or default_q_spec()
    config = config or TrainConfig(steps=10_000, batch_size=256, learning_rate=3e-4)
    n_nets = 2 if double_q else 1
    online = [init(spec, seed + k) for k in range(n_nets)]
    q = QModel(online, [o.copy() for o in online], beta_q)
    std = float(np.std(dataset.rewards))
    q.reward_scale = 1.0 / std if normalize_rewards and std > 0 else 1.0
    rewards = dataset.rewards * q.reward_scale
    opts = [OptimizerState.for_network(o, config.learning_rate) for o in online]
    rng = np.random.default_rng(seed + 100)
    n = len(dataset)
    running = None
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        y = softmax_q_target(q, rewards[idx], dataset.next_states[idx], support.actions[next_index[idx]],
                             dataset.dones[idx], gamma)
        loss, grads = q_loss_and_grads(q, dataset.states[idx], dataset.actions[idx], y)
        if not np.isfinite(loss):
            raise DivergenceError(f"Q loss diverged at step {step}")
        lr = cosine_lr(config.learning_rate, step, config.steps) if config.cosine_decay else None
        for net, opt, g in zip(q.online, opts, grads):
            adam_step(net, opt, g, learning_rate=lr)
        q.target = [polyak_update(t, o, tau) for t, o in zip(q.target, q.online)]
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if step % config.log_every == 0 or step == config.steps - 1:
            q.loss_curve.append(float(running))
    return q


def q_energy_adapter(q: QModel, states) -> EnergySpec:
    """Energy ``E(a) = -Q(s, a)`` for fixed state rows; actions ``(..., K, 2)``."""
    states = np.asarray(states, dtype=np.float64)

    def fn(actions):
        actions = np.asarray(actions, dtype=np.float64)
        s = states[..., None, :] if states.ndim == actions.ndim - 1 else states
        return -q.value(s, actions)

    return EnergySpec(fn, 1.0, None, "neg_q")


def in_support_cep_loss(net: Network, states, support_actions, q: QModel, beta: float, t, noise,
                        schedule: Schedule | None = None, return_grad: bool = False):
    """Self-normalized CEP over support actions with labels ``softmax(beta Q(s, a_i))``.

    ``states`` is ``(G, 2)`` (or one state), ``support_actions`` ``(G, K, 2)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    acts = np.asarray(support_actions, dtype=np.float64)
    if acts.ndim == 2:
        acts = acts[None]
    energies = q_energy_adapter(q, states).energy(acts)
    return cep_loss_from_energies(net, acts, energies, beta, t, noise, schedule, states,
                                  self_normalized=True, return_grad=return_grad)


def train_qgpo_guidance(support: SupportActionSet, q: QModel, beta: float = 3.0, spec: NetworkSpec | None = None,
                        config: TrainConfig | None = None, seed: int = 0,
                        schedule: Schedule | None = None) -> GuidanceModel:
    """Fit ``f(a_t | s, t)`` by in-support CEP; returns a state-conditioned guidance model."""
    schedule = schedule or Schedule()
    spec = spec or default_guidance_spec(2, cond_dim=2)
    config = config or TrainConfig(steps=10_000, batch_size=256, learning_rate=3e-4)
    K = support.K
    groups = max(1, config.batch_size // K)
    # labels depend only on Q, which is frozen here
    energies = -q.value(support.states[:, None, :], support.actions)
    net = init(spec, seed)
    opt = OptimizerState.for_network(net, config.learning_rate)
    rng = np.random.default_rng(seed + 200)
    curve, running = [], None
    for step in range(config.steps):
        idx = rng.integers(0, support.states.shape[0], size=groups)
        t = schedule.sample_times(rng, groups)
        noise = rng.standard_normal((groups, K, 2))
        loss, grad = cep_loss_from_energies(net, support.actions[idx], energies[idx], beta, t, noise,
                                            schedule, support.states[idx], self_normalized=True,
                                            return_grad=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"QGPO guidance loss diverged at step {step}")
        lr = cosine_lr(config.learning_rate, step, config.steps) if config.cosine_decay else None
        adam_step(net, opt, grad, learning_rate=lr)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append(float(running))
    return GuidanceModel("CEP_SELF_NORM", beta, schedule, net=net, loss_curve=curve)


@dataclass
class PolicyReturns:
    mean: float
    std: float
    stderr: float
    returns: np.ndarray


def evaluate_policy(env: PointGoalEnv, behavior: PriorModel, guidance: GuidanceModel | None, s: float,
                    episodes: int = 100, seed: int = 0, steps: int = SUPPORT_STEPS) -> PolicyReturns:
    """Undiscounted returns of the guided diffusion policy, all episodes in lock-step."""
    rng = np.random.default_rng(seed)
    states = env.reset(rng, episodes)
    returns = np.zeros(episodes)
    for k in range(env.horizon):
        cfg = SamplerConfig(steps=steps, method="solver2", guidance_scale=s, seed=seed * 7919 + k)
        a = sample_actions(behavior, states, cfg, guidance)
        states, r = env.step(states, a)
        returns += r
    std = float(np.std(returns, ddof=1)) if episodes > 1 else 0.0
    return PolicyReturns(float(returns.mean()), std, std / np.sqrt(max(episodes, 1)), returns)
