"""Closed-form references for the intermediate energy and its gradient.

With an empirical prior (uniform weights on ``N`` atoms) the posterior
``q(x0 | x_t)`` is a softmax over atoms of ``log N(x_t | alpha a_i, sigma^2 I)``,
so the intermediate energy

    E_t(x_t) = -log sum_i w_i(x_t) exp(-beta E(a_i))

and its gradient are exact O(N) computations. The Gaussian-linear case
(standard-normal prior, linear energy) has a fully analytic guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .guidance import EnergySpec
from .schedule import Schedule

_CHUNK_ELEMS = 4_000_000


@dataclass
class EmpiricalPrior:
    atoms: np.ndarray
    schedule: Schedule = Schedule()

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        if self.atoms.shape[0] < 1:
            raise ValueError("empirical prior needs at least one atom")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms must be finite")
        self._sq = np.sum(self.atoms**2, axis=1)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def _chunks(self, n):
        step = max(1, _CHUNK_ELEMS // self.atoms.size)
        for lo in range(0, n, step):
            yield slice(lo, min(n, lo + step))

    def log_kernel(self, x_t, t) -> np.ndarray:
        """Unnormalized ``log N(x_t | alpha a_i, sigma^2 I)`` for each query row and atom."""
        alpha, sigma = self.schedule.alpha_sigma(t)
        x = np.atleast_2d(x_t)
        diff = x[:, None, :] - alpha * self.atoms[None, :, :]
        return -np.einsum("nmd,nmd->nm", diff, diff) / (2.0 * sigma**2)

    def posterior_weights(self, x_t, t) -> np.ndarray:
        """Posterior atom weights ``w_i(x_t)``, shape ``(n, N)``; rows sum to one."""
        return softmax(self.log_kernel(x_t, t), axis=1)

    def posterior_mean(self, x_t, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        out = np.empty_like(x)
        for sl in self._chunks(x.shape[0]):
            out[sl] = self.posterior_weights(x[sl], t) @ self.atoms
        return out

    def eps(self, x_t, t, cond=None) -> np.ndarray:
        """Exact noise prediction ``-sigma * grad log q_t`` of the diffused empirical prior."""
        alpha, sigma = self.schedule.alpha_sigma(t)
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        return (x - alpha * self.posterior_mean(x, t)) / sigma


@dataclass(frozen=True)
class AnalyticGaussianPrior:
    """Isotropic Gaussian data ``N(mean, std^2 I)`` with its exact noise prediction."""

    mean: tuple
    std: float = 1.0
    schedule: Schedule = Schedule()

    def eps(self, x_t, t, cond=None) -> np.ndarray:
        alpha, sigma = self.schedule.alpha_sigma(t)
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        mu = np.asarray(self.mean, dtype=np.float64)
        var = alpha**2 * self.std**2 + sigma**2
        return sigma * (x - alpha * mu) / var


def _energies(prior: EmpiricalPrior, energy: EnergySpec) -> np.ndarray:
    return energy.beta * energy.energy(prior.atoms)


def _nearest_atom(prior, x):
    d2 = np.sum(x**2, axis=1, keepdims=True) - 2 * x @ prior.atoms.T + prior._sq
    return np.argmin(d2, axis=1)


def posterior_energy(prior: EmpiricalPrior, energy: EnergySpec, x_t, t) -> np.ndarray:
    """Exact intermediate energy at each query row; ``t = 0`` uses the nearest atom."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = _energies(prior, energy)
    if float(t) == 0.0:
        return e[_nearest_atom(prior, x)]
    out = np.empty(x.shape[0])
    for sl in prior._chunks(x.shape[0]):
        lk = prior.log_kernel(x[sl], t)
        # shift first so lk - e is not rounded at the scale of |lk|
        lk = lk - lk.max(axis=1, keepdims=True)
        out[sl] = -(logsumexp(lk - e, axis=1) - logsumexp(lk, axis=1))
    return out


def posterior_guidance(prior: EmpiricalPrior, energy: EnergySpec, x_t, t) -> np.ndarray:
    """Exact ``grad E_t(x_t)``.

    With posterior weights ``w`` and energy-tilted weights ``r ∝ w exp(-beta E)``
    the gradient is ``alpha / sigma^2 * (E_w[a] - E_r[a])``.
    """
    if float(t) <= 0.0:
        raise ValueError("the exact guidance is only defined for t > 0")
    alpha, sigma = prior.schedule.alpha_sigma(t)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = _energies(prior, energy)
    out = np.empty_like(x)
    for sl in prior._chunks(x.shape[0]):
        lk = prior.log_kernel(x[sl], t)
        w = softmax(lk, axis=1)
        r = softmax(lk - e, axis=1)
        out[sl] = alpha / sigma**2 * ((w - r) @ prior.atoms)
    return out


def posterior_energy_mse(prior: EmpiricalPrior, energy: EnergySpec, x_t, t) -> np.ndarray:
    """Posterior mean of ``beta E(x0)``: the optimum of the regression objective."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = _energies(prior, energy)
    if float(t) == 0.0:
        return e[_nearest_atom(prior, x)]
    out = np.empty(x.shape[0])
    for sl in prior._chunks(x.shape[0]):
        out[sl] = prior.posterior_weights(x[sl], t) @ e
    return out


def posterior_guidance_mse(prior: EmpiricalPrior, energy: EnergySpec, x_t, t) -> np.ndarray:
    """Gradient of :func:`posterior_energy_mse`: ``alpha/sigma^2 Cov_w(a, beta E)``."""
    alpha, sigma = prior.schedule.alpha_sigma(t)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = _energies(prior, energy)
    out = np.empty_like(x)
    for sl in prior._chunks(x.shape[0]):
        w = prior.posterior_weights(x[sl], t)
        mean_e = w @ e
        out[sl] = alpha / sigma**2 * ((w * (e[None, :] - mean_e[:, None])) @ prior.atoms)
    return out


def gaussian_linear_guidance(c, t, schedule: Schedule | None = None) -> np.ndarray:
    """Exact guidance ``alpha_t c`` for a standard-normal prior and ``E(x) = c.x``, beta 1."""
    schedule = schedule or Schedule()
    alpha, _ = schedule.alpha_sigma(t)
    c = np.asarray(c, dtype=np.float64)
    return np.multiply.outer(alpha, c) if np.ndim(alpha) else alpha * c


def gaussian_linear_energy(c, x_t, t, schedule: Schedule | None = None) -> np.ndarray:
    """``E_t(x_t) = alpha_t c.x_t - |c|^2 sigma_t^2 / 2`` for the same setting."""
    schedule = schedule or Schedule()
    alpha, sigma = schedule.alpha_sigma(t)
    c = np.asarray(c, dtype=np.float64)
    return alpha * (np.atleast_2d(x_t) @ c) - 0.5 * (c @ c) * sigma**2


def resample_ground_truth(data, energy: EnergySpec, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` exact samples of ``p0 ∝ q0 exp(-beta E)`` with ``q0`` the empirical data.

    Indices are drawn with replacement with probability ``softmax(-beta E)``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    p = softmax(-energy.beta * energy.energy(data))
    idx = np.random.default_rng(seed).choice(data.shape[0], size=n, replace=True, p=p)
    return data[idx]
