"""Intermediate-energy guidance models and their training objectives.

Every trained model is a scalar network ``f(x_t, t[, c])`` approximating the
intermediate energy ``E_t`` whose gradient is subtracted from the prior score.
The data-space target is always the scaled energy ``beta * E(x0)``.

Contrastive losses take contrast groups: ``x0`` of shape ``(G, K, d)`` (or a
single group ``(K, d)``), noise of the same shape, and one time per group
(``t`` scalar or ``(G,)``). Within a group the loss is summed over the ``K``
members; groups are averaged.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .netcore import (
    DivergenceError,
    Network,
    NetworkSpec,
    OptimizerState,
    TrainConfig,
    adam_step,
    cosine_lr,
    grad_input,
    init,
    value_and_grad,
)
from .prior import PriorModel
from .schedule import Schedule

log = logging.getLogger(__name__)

METHODS = ("CEP", "CEP_SELF_NORM", "CEP_MULTI_T", "CEP_COND", "CLASSIFIER", "MSE", "EMSE", "DPS", "NONE")
TRAINED_METHODS = METHODS[:7]

EXP_CLAMP = 30.0
# how often an exponent had to be clamped, keyed by loss name
NUMERIC_WARNINGS: Counter = Counter()


@dataclass(frozen=True)
class EnergySpec:
    """Data-space energy ``E(x)`` with inverse temperature ``beta``.

    ``energy_fn`` maps an array of shape ``(..., d)`` to ``(...)``; ``grad_fn``
    (needed only for DPS) maps it to ``(..., d)``.
    """

    energy_fn: Callable[[np.ndarray], np.ndarray]
    beta: float = 1.0
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "custom"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    def energy(self, x) -> np.ndarray:
        return np.asarray(self.energy_fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def scaled(self, x) -> np.ndarray:
        return self.beta * self.energy(x)

    def grad(self, x) -> np.ndarray:
        if self.grad_fn is None:
            raise ValueError(f"energy {self.name!r} has no gradient")
        return np.asarray(self.grad_fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def with_beta(self, beta: float) -> "EnergySpec":
        return EnergySpec(self.energy_fn, beta, self.grad_fn, self.name)


def _clamp(arg, counter_key):
    arg = np.asarray(arg, dtype=np.float64)
    hits = int(np.count_nonzero((arg > EXP_CLAMP) | (arg < -EXP_CLAMP)))
    if hits:
        NUMERIC_WARNINGS[counter_key] += hits
        log.debug("%s: clamped %d exponent(s)", counter_key, hits)
    return np.clip(arg, -EXP_CLAMP, EXP_CLAMP)


def _as_groups(x0, noise, t, cond):
    """Normalize to ``(G, K, d)`` groups with per-sample times and conditions.

    A 2-D ``cond`` is per sample when ``x0`` is a single ``(K, d)`` group and
    per group when ``x0`` is ``(G, K, d)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    single = x0.ndim == 2
    if single:
        x0, noise = x0[None], noise[None]
    if x0.ndim != 3 or noise.shape != x0.shape:
        raise ValueError("x0 and noise must both have shape (G, K, d) or (K, d)")
    G, K, _ = x0.shape
    if K <= 1:
        raise ValueError(f"contrast groups need K > 1, got K={K}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full((G, K), float(t))
    elif single and t.shape == (K,):
        t = t[None]
    elif t.shape == (G,):
        t = np.repeat(t[:, None], K, axis=1)
    if t.shape != (G, K):
        raise ValueError(f"bad time shape {t.shape} for groups {(G, K)}")
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (G, K, cond.shape[0]))
        elif cond.ndim == 2:
            cond = cond[None] if single else np.broadcast_to(cond[:, None, :], (G, K, cond.shape[1]))
        if cond.shape[:2] != (G, K):
            raise ValueError(f"bad condition shape {cond.shape}")
    return x0, noise, t, cond


def _contrastive_closure(schedule, x0, noise, t, cond, weights):
    """Cross-entropy between ``weights`` and ``softmax_j(-f(x_t^j))`` per group."""
    G, K, d = x0.shape
    x_t = schedule.perturb(x0, t, noise).reshape(G * K, d)
    t_rows = t.reshape(G * K)
    c_rows = None if cond is None else np.ascontiguousarray(cond).reshape(G * K, -1)
    wsum = weights.sum(axis=1, keepdims=True)

    def closure(apply):
        f = apply(x_t, t_rows, c_rows)[:, 0].reshape(G, K)
        z = -f
        logp = z - logsumexp(z, axis=1, keepdims=True)
        loss = -np.sum(weights * logp) / G
        df = (weights - wsum * np.exp(logp)) / G
        return loss, [df.reshape(G * K, 1)]

    return closure


def _finish(net, closure, return_grad):
    if return_grad:
        return value_and_grad(net, closure)
    return float(closure(lambda x, t, c: net.forward_cached(x, t, c)[0])[0])


def cep_labels(energies, beta) -> np.ndarray:
    """Unnormalized soft labels ``exp(-beta E)`` with exponent clamping."""
    return np.exp(_clamp(-beta * np.asarray(energies, dtype=np.float64), "cep"))


def self_normalized_labels(energies, beta) -> np.ndarray:
    """``softmax(-beta E)`` along the last axis."""
    return softmax(-beta * np.asarray(energies, dtype=np.float64), axis=-1)


def cep_loss_from_energies(net, x0, energies, beta, t, noise, schedule=None, cond=None,
                           self_normalized=False, return_grad=False):
    schedule = schedule or Schedule()
    x0, noise, t, cond = _as_groups(x0, noise, t, cond)
    energies = np.asarray(energies, dtype=np.float64).reshape(x0.shape[:2])
    w = self_normalized_labels(energies, beta) if self_normalized else cep_labels(energies, beta)
    return _finish(net, _contrastive_closure(schedule, x0, noise, t, cond, w), return_grad)


def cep_loss(net: Network, x0, energy: EnergySpec, t, noise, schedule=None, cond=None,
             return_grad=False):
    """CEP with unnormalized labels ``exp(-beta E(x0))``; one time per group."""
    if np.ndim(t) > 1:
        raise ValueError("cep_loss takes one time per group; use cep_multi_t_loss")
    return cep_loss_from_energies(net, x0, energy.energy(x0), energy.beta, t, noise,
                                  schedule, cond, False, return_grad)


def cep_self_norm_loss(net: Network, x0, energy: EnergySpec, t, noise, schedule=None, cond=None,
                       return_grad=False):
    """CEP with labels normalized within each group (the stable default)."""
    if np.ndim(t) > 1:
        raise ValueError("cep_self_norm_loss takes one time per group")
    return cep_loss_from_energies(net, x0, energy.energy(x0), energy.beta, t, noise,
                                  schedule, cond, True, return_grad)


def cep_multi_t_loss(net: Network, x0, energy: EnergySpec, t, noise, schedule=None, cond=None,
                     self_normalized=False, return_grad=False):
    """CEP where each group member carries its own time ``t[..., i]``."""
    x0a = np.asarray(x0)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != x0a.shape[:-1]:
        raise ValueError("cep_multi_t_loss needs one time per sample")
    return cep_loss_from_energies(net, x0, energy.energy(x0), energy.beta, t, noise,
                                  schedule, cond, self_normalized, return_grad)


def cep_conditional_loss(net: Network, x0, cond, t, noise, schedule=None, return_grad=False):
    """Paired contrastive loss, normalized over data within each condition.

    ``cond`` has one row per sample (``(K, c)`` or ``(G, K, c)``). For every
    pair ``i`` the softmax runs over ``f(x_t^j, c^i, t)`` for ``j`` in the group.
    """
    schedule = schedule or Schedule()
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 2:
        cond = cond[None]
    x0, noise, t, _ = _as_groups(x0, noise, t, None)
    G, K, d = x0.shape
    if cond.shape[:2] != (G, K):
        raise ValueError("cond must pair one condition with each sample")
    eye = np.eye(K)
    x_t = schedule.perturb(x0, t, noise)
    # repeated conditions (class labels) need one evaluation per distinct value
    uniq, inv = np.unique(cond.reshape(G * K, -1), axis=0, return_inverse=True)
    inv = inv.reshape(G, K)
    U = len(uniq)
    if U < K:
        xs = np.broadcast_to(x_t[:, :, None, :], (G, K, U, d)).reshape(-1, d)
        cs = np.broadcast_to(uniq[None, None], (G, K, U, uniq.shape[1])).reshape(-1, uniq.shape[1])
        ts = np.broadcast_to(t[:, :, None], (G, K, U)).reshape(-1)
        pick = np.eye(U)[inv]  # (G, K, U): condition of pair i

        def closure(apply):
            Fu = apply(xs, ts, cs)[:, 0].reshape(G, K, U)
            F = np.einsum("gju,giu->gij", Fu, pick)
            loss = np.sum(np.einsum("gii->gi", F) + logsumexp(-F, axis=2)) / G
            dF = (eye[None] - softmax(-F, axis=2)) / G
            return loss, [np.einsum("gij,giu->gju", dF, pick).reshape(-1, 1)]

        return _finish(net, closure, return_grad)
    # rows ordered (g, i, j): data j evaluated under condition i
    xs = np.broadcast_to(x_t[:, None, :, :], (G, K, K, d)).reshape(-1, d)
    cs = np.broadcast_to(cond[:, :, None, :], (G, K, K, cond.shape[2])).reshape(-1, cond.shape[2])
    ts = np.broadcast_to(t[:, None, :], (G, K, K)).reshape(-1)

    def closure(apply):
        F = apply(xs, ts, cs)[:, 0].reshape(G, K, K)
        lse = logsumexp(-F, axis=2)
        diag = np.einsum("gii->gi", F)
        loss = np.sum(diag + lse) / G
        dF = (eye[None] - softmax(-F, axis=2)) / G
        return loss, [dF.reshape(-1, 1)]

    return _finish(net, closure, return_grad)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels.astype(int)]


def classifier_loss(net: Network, x0, labels, t, noise, num_classes: int, schedule=None,
                    return_grad=False):
    """Mean cross-entropy over ``num_classes`` logits ``-f(x_t, c_m, t)``.

    A network with ``num_classes`` outputs and no condition input is read as
    an M-headed classifier instead.
    """
    schedule = schedule or Schedule()
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    labels = np.asarray(labels).astype(int)
    target = one_hot(labels, num_classes)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    x_t = schedule.perturb(x0, t, noise)
    multi_head = net.spec.cond_dim == 0
    if multi_head:
        if net.spec.output_dim != num_classes:
            raise ValueError("M-headed classifier needs output_dim == num_classes")
        xs, ts, cs = x_t, t, None
    else:
        xs = np.repeat(x_t, num_classes, axis=0)
        ts = np.repeat(t, num_classes)
        cs = np.tile(np.eye(num_classes), (n, 1))

    def closure(apply):
        out = apply(xs, ts, cs)
        F = out if multi_head else out[:, 0].reshape(n, num_classes)
        lse = logsumexp(-F, axis=1)
        loss = np.sum(np.sum(F * target, axis=1) + lse) / n
        dF = (target - softmax(-F, axis=1)) / n
        return loss, [dF if multi_head else dF.reshape(-1, 1)]

    return _finish(net, closure, return_grad)


def _pointwise(x0, t, noise, schedule):
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[-1]
    flat = x0.reshape(-1, d)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x0.shape[:-1]).reshape(-1)
    x_t = schedule.perturb(flat, t, np.asarray(noise, dtype=np.float64).reshape(-1, d))
    return x_t, t


def mse_loss(net: Network, x0, energy: EnergySpec, t, noise, schedule=None, cond=None,
             return_grad=False):
    """Mean of ``(f(x_t, t) - beta E(x0))^2``."""
    schedule = schedule or Schedule()
    x_t, tt = _pointwise(x0, t, noise, schedule)
    target = energy.scaled(x0).reshape(-1)
    n = target.size

    def closure(apply):
        diff = apply(x_t, tt, cond)[:, 0] - target
        return np.sum(diff * diff) / n, [(2.0 * diff / n)[:, None]]

    return _finish(net, closure, return_grad)


def emse_loss(net: Network, x0, energy: EnergySpec, t, noise, schedule=None, cond=None,
              return_grad=False, exact_sign=False):
    """Mean of ``(exp(f(x_t, t)) - exp(beta E(x0)))^2`` with clamped exponents.

    As written this objective is minimized by ``log E[exp(+beta E) | x_t]``,
    which is not the intermediate energy. ``exact_sign=True`` regresses
    ``exp(-f)`` onto ``exp(-beta E)`` instead, whose minimizer is
    ``-log E[exp(-beta E) | x_t]``.
    """
    schedule = schedule or Schedule()
    x_t, tt = _pointwise(x0, t, noise, schedule)
    sign = -1.0 if exact_sign else 1.0
    target = np.exp(_clamp(sign * energy.scaled(x0).reshape(-1), "emse"))
    n = target.size

    def closure(apply):
        f = apply(x_t, tt, cond)[:, 0]
        inside = np.abs(f) <= EXP_CLAMP
        ef = np.exp(_clamp(sign * f, "emse"))
        diff = ef - target
        return np.sum(diff * diff) / n, [(2.0 * sign * diff * ef * inside / n)[:, None]]

    return _finish(net, closure, return_grad)


def dps_energy_and_grad(prior: PriorModel, energy: EnergySpec, x_t, t, cond=None):
    """Energy of the data prediction ``x_hat = (x_t - sigma eps) / alpha``.

    Returns ``(beta E(x_hat), grad w.r.t. x_t)``, differentiating through both
    ``E`` and ``eps_theta``. The ``1/alpha`` factor makes the gradient blow up
    as ``t`` approaches ``T``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    x = np.atleast_2d(x_t)
    alpha, sigma = prior.schedule.alpha_sigma(t)
    alpha = np.reshape(alpha, (-1, 1)) if np.ndim(alpha) else alpha
    sigma = np.reshape(sigma, (-1, 1)) if np.ndim(sigma) else sigma
    out, cache = prior.net.forward_cached(x, t, cond)
    x_hat = (x - sigma * out) / alpha
    value = energy.beta * energy.energy(x_hat)
    g = energy.beta * energy.grad(x_hat)
    jt_g = prior.net.backward(cache, g)[1]
    grad = (g - sigma * jt_g) / alpha
    if single:
        return float(value[0]), grad[0]
    return value, grad


@dataclass
class GuidanceModel:
    method: str
    beta: float
    schedule: Schedule
    net: Network | None = None
    prior: PriorModel | None = None
    energy: EnergySpec | None = None
    num_classes: int | None = None
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown guidance method {self.method!r}")
        if self.method in TRAINED_METHODS:
            if self.net is None:
                raise ValueError(f"{self.method} guidance needs a trained network")
            if self.net.spec.output_dim != 1 and not (
                    self.method == "CLASSIFIER" and self.net.spec.cond_dim == 0):
                raise ValueError("guidance networks must have a scalar head")
        elif self.net is not None:
            raise ValueError(f"{self.method} guidance carries no trained network")
        if self.method == "DPS" and (self.prior is None or self.energy is None):
            raise ValueError("DPS guidance needs the prior and the energy")
        if self.method == "CLASSIFIER" and not self.num_classes:
            raise ValueError("classifier guidance needs num_classes")

    def value(self, x_t, t, cond=None) -> np.ndarray:
        x = np.atleast_2d(x_t)
        if self.method == "NONE":
            return np.zeros(x.shape[0])
        if self.method == "DPS":
            return dps_energy_and_grad(self.prior, self.energy, x, t, cond)[0]
        if self.method == "CLASSIFIER":
            F = self._class_logits(x, t)
            return F[np.arange(x.shape[0]), np.argmax(cond, axis=-1) if np.ndim(cond) > 1
                     else int(np.argmax(cond))] + logsumexp(-F, axis=1)
        return self.net.forward(x, t, cond)[:, 0]

    def _class_logits(self, x, t):
        n, M = x.shape[0], self.num_classes
        if self.net.spec.cond_dim == 0:
            return self.net.forward(x, t)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        out = self.net.forward(np.repeat(x, M, axis=0), np.repeat(tt, M), np.tile(np.eye(M), (n, 1)))
        return out[:, 0].reshape(n, M)

    def grad(self, x_t, t, cond=None) -> np.ndarray:
        """Gradient of the learned intermediate energy w.r.t. ``x_t`` (rows)."""
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if self.method == "NONE":
            return np.zeros_like(x)
        if self.method == "DPS":
            return dps_energy_and_grad(self.prior, self.energy, x, t, cond)[1]
        if self.method == "CLASSIFIER":
            return self._classifier_grad(x, t, cond)
        return grad_input(self.net, x, t, cond)

    def _classifier_grad(self, x, t, cond):
        # energy -log softmax(-F)_c ; gradient dF_c - sum_m p_m dF_m
        n, d = x.shape
        M = self.num_classes
        target = np.broadcast_to(np.asarray(cond, dtype=np.float64), (n, M))
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if self.net.spec.cond_dim == 0:
            F, cache = self.net.forward_cached(x, tt)
            p = softmax(-F, axis=1)
            return self.net.backward(cache, target - p)[1]
        xs = np.repeat(x, M, axis=0)
        F, cache = self.net.forward_cached(xs, np.repeat(tt, M), np.tile(np.eye(M), (n, 1)))
        p = softmax(-F[:, 0].reshape(n, M), axis=1)
        v = (target - p).reshape(-1, 1)
        return self.net.backward(cache, v)[1].reshape(n, M, d).sum(axis=1)


def default_guidance_spec(data_dim: int, cond_dim: int = 0, hidden=(128, 128, 128)) -> NetworkSpec:
    return NetworkSpec(input_dim=data_dim, output_dim=1, hidden=tuple(hidden), activation="silu",
                       time_embedding="sinusoidal", time_dim=16, cond_dim=cond_dim)


def train_guidance(method: str, data, energy: EnergySpec | None = None, spec: NetworkSpec | None = None,
                   config: TrainConfig | None = None, seed: int = 0, group_size: int = 64,
                   labels=None, num_classes: int | None = None, schedule: Schedule | None = None,
                   prior: PriorModel | None = None) -> GuidanceModel:
    """Fit a guidance network with the objective named by ``method``.

    ``data`` holds clean samples ``x0``. Contrastive methods draw
    ``config.batch_size // group_size`` groups of ``group_size`` i.i.d. points
    per step; regression methods draw ``config.batch_size`` points. ``CEP_COND``
    and ``CLASSIFIER`` need integer ``labels`` and ``num_classes``. ``DPS`` and
    ``NONE`` return untrained models.
    """
    if method not in METHODS:
        raise ValueError(f"unknown guidance method {method!r}")
    schedule = schedule or Schedule()
    beta = energy.beta if energy is not None else 1.0
    if method == "NONE":
        return GuidanceModel("NONE", beta, schedule)
    if method == "DPS":
        if prior is None or energy is None:
            raise ValueError("DPS needs a trained prior and an energy")
        return GuidanceModel("DPS", beta, schedule, prior=prior, energy=energy)

    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    if n == 0:
        raise ValueError("empty dataset")
    config = config or TrainConfig(steps=10_000, batch_size=512, learning_rate=3e-4)
    conditional = method in ("CEP_COND", "CLASSIFIER")
    if conditional:
        if labels is None or not num_classes:
            raise ValueError(f"{method} needs labels and num_classes")
        labels = np.asarray(labels).astype(int)
        onehots = one_hot(labels, num_classes)
        beta = 1.0
    elif energy is None:
        raise ValueError(f"{method} needs an energy")
    else:
        energies = energy.energy(data)
        if not np.all(np.isfinite(energies)):
            raise ValueError("energy must be finite on the data")
    if spec is None:
        spec = default_guidance_spec(d, num_classes if conditional else 0)
    net = init(spec, seed)
    opt = OptimizerState.for_network(net, config.learning_rate)
    rng = np.random.default_rng(seed + 1)
    groups = max(1, config.batch_size // group_size)
    curve = []
    running = None
    for step in range(config.steps):
        if method in ("CEP", "CEP_SELF_NORM", "CEP_MULTI_T", "CEP_COND"):
            idx = rng.integers(0, n, size=(groups, group_size))
            if method == "CEP_MULTI_T":
                t = schedule.sample_times(rng, (groups, group_size))
            else:
                t = schedule.sample_times(rng, groups)
            noise = rng.standard_normal((groups, group_size, d))
            if method == "CEP_COND":
                loss, grad = cep_conditional_loss(net, data[idx], onehots[idx], t, noise, schedule,
                                                  return_grad=True)
            else:
                loss, grad = cep_loss_from_energies(net, data[idx], energies[idx], beta, t, noise,
                                                    schedule, None, method == "CEP_SELF_NORM",
                                                    return_grad=True)
        else:
            idx = rng.integers(0, n, size=config.batch_size)
            t = schedule.sample_times(rng, config.batch_size)
            noise = rng.standard_normal((config.batch_size, d))
            if method == "CLASSIFIER":
                loss, grad = classifier_loss(net, data[idx], labels[idx], t, noise, num_classes,
                                             schedule, return_grad=True)
            elif method == "MSE":
                loss, grad = mse_loss(net, data[idx], energy, t, noise, schedule, return_grad=True)
            else:
                loss, grad = emse_loss(net, data[idx], energy, t, noise, schedule, return_grad=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"{method} guidance loss diverged at step {step}")
        lr = cosine_lr(config.learning_rate, step, config.steps) if config.cosine_decay else None
        adam_step(net, opt, grad, learning_rate=lr)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append(float(running))
    return GuidanceModel(method, beta, schedule, net=net, num_classes=num_classes if conditional else None,
                         loss_curve=curve)
