"""Noise-prediction diffusion prior ``eps_theta(x_t, t[, c])``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .netcore import (
    DivergenceError,
    Network,
    NetworkSpec,
    OptimizerState,
    TrainConfig,
    adam_step,
    cosine_lr,
    init,
    value_and_grad,
)
from .schedule import Schedule

log = logging.getLogger(__name__)


@dataclass
class PriorModel:
    net: Network
    schedule: Schedule
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.net.spec.output_dim != self.net.spec.input_dim:
            raise ValueError("prior output dim must equal data dim")

    @property
    def data_dim(self) -> int:
        return self.net.spec.input_dim

    @property
    def cond_dim(self) -> int:
        return self.net.spec.cond_dim

    def eps(self, x_t, t, cond=None) -> np.ndarray:
        return self.net.forward(x_t, t, cond)

    def eps_vjp(self, x_t, t, v, cond=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``eps`` and ``v^T d eps / d x_t`` per row."""
        out, cache = self.net.forward_cached(np.atleast_2d(x_t), t, cond)
        return out, self.net.backward(cache, v)[1]


def default_prior_spec(data_dim: int, cond_dim: int = 0, hidden=(128, 128, 128)) -> NetworkSpec:
    return NetworkSpec(input_dim=data_dim, output_dim=data_dim, hidden=tuple(hidden),
                       activation="silu", time_embedding="sinusoidal", time_dim=16, cond_dim=cond_dim)


def _denoising_closure(schedule, x0, t, eps, cond):
    x_t = schedule.perturb(x0, t, eps)
    n = x0.shape[0]

    def closure(apply):
        diff = apply(x_t, t, cond) - eps
        loss = np.sum(diff * diff) / n
        return loss, [2.0 * diff / n]

    return closure


def denoising_loss(model: PriorModel, x0, rng: np.random.Generator, cond=None,
                   return_grad: bool = False):
    """Mean of ``||eps_theta(alpha_t x0 + sigma_t eps, t) - eps||^2``.

    ``t ~ U(t_min, T)`` and ``eps ~ N(0, I)`` are drawn per row from ``rng``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = model.schedule.sample_times(rng, x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    closure = _denoising_closure(model.schedule, x0, t, eps, cond)
    if return_grad:
        return value_and_grad(model.net, closure)
    return closure(lambda x, tt, c: model.net.forward_cached(x, tt, c)[0])[0]


def train_prior(data, spec: NetworkSpec | None = None, config: TrainConfig | None = None,
                seed: int = 0, cond=None, schedule: Schedule | None = None) -> PriorModel:
    """Fit ``eps_theta`` by minibatch Adam on the denoising loss.

    ``cond`` optionally holds one condition row per data row (state-conditioned
    behavior models). Deterministic given ``seed``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("cannot train a prior on an empty dataset")
    cond = None if cond is None else np.atleast_2d(np.asarray(cond, dtype=np.float64))
    config = config or TrainConfig()
    schedule = schedule or Schedule()
    if spec is None:
        spec = default_prior_spec(data.shape[1], 0 if cond is None else cond.shape[1])
    model = PriorModel(init(spec, seed), schedule)
    opt = OptimizerState.for_network(model.net, config.learning_rate)
    rng = np.random.default_rng(seed + 1)
    n = data.shape[0]
    running = None
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        c = None if cond is None else cond[idx]
        loss, grad = denoising_loss(model, data[idx], rng, cond=c, return_grad=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"prior loss diverged at step {step}")
        lr = cosine_lr(config.learning_rate, step, config.steps) if config.cosine_decay else None
        adam_step(model.net, opt, grad, learning_rate=lr)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if step % config.log_every == 0 or step == config.steps - 1:
            model.loss_curve.append(float(running))
            log.debug("prior step %d loss %.5f", step, running)
    return model
