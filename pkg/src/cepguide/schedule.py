"""Variance-preserving forward diffusion with a linear beta schedule.

The forward kernel is ``q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)`` with

    log alpha_t = -(beta1 - beta0) / 4 * t^2 - beta0 / 2 * t
    sigma_t     = sqrt(1 - alpha_t^2)

All functions accept scalars or numpy arrays of times and return float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# slack for float round-off when callers pass grid endpoints
_T_SLACK = 1e-12


@dataclass(frozen=True)
class Schedule:
    beta0: float = 0.1
    beta1: float = 20.0
    t_max: float = 1.0
    t_min: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.beta0 < self.beta1:
            raise ValueError(f"need 0 < beta0 < beta1, got {self.beta0}, {self.beta1}")
        if self.t_max <= 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError(f"t_min must lie in (0, t_max), got {self.t_min}")

    def _check_t(self, t, allow_zero=True):
        t = np.asarray(t, dtype=np.float64)
        lo = 0.0 if allow_zero else np.finfo(float).tiny
        if np.any(~np.isfinite(t)) or np.any(t < lo - _T_SLACK) or np.any(t > self.t_max + _T_SLACK):
            raise ValueError(f"time outside [0, {self.t_max}]: {t}")
        if not allow_zero and np.any(t <= 0):
            raise ValueError("t = 0 is not allowed here")
        return np.clip(t, 0.0, self.t_max)

    def log_alpha(self, t):
        t = self._check_t(t)
        return -0.25 * (self.beta1 - self.beta0) * t**2 - 0.5 * self.beta0 * t

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)``; exact ``(1, 0)`` at ``t = 0``."""
        la = self.log_alpha(t)
        alpha = np.exp(la)
        # expm1 keeps sigma accurate for small t
        sigma = np.sqrt(-np.expm1(2.0 * la))
        return alpha, sigma

    def drift_diffusion(self, t):
        """Return ``(f, g2)`` of the probability-flow ODE.

        ``f = d log(alpha)/dt`` and ``g2 = d(sigma^2)/dt - 2 f sigma^2``, which
        under variance preservation is ``beta0 + (beta1 - beta0) t``.
        """
        t = self._check_t(t)
        beta_t = self.beta0 + (self.beta1 - self.beta0) * t
        return -0.5 * beta_t, beta_t

    def log_snr(self, t):
        """``log(alpha_t / sigma_t)``, strictly decreasing in ``t``."""
        t = self._check_t(t, allow_zero=False)
        la = self.log_alpha(t)
        return la - 0.5 * np.log(-np.expm1(2.0 * la))

    def inverse_log_snr(self, lam, t_lo: float | None = None, tol: float = 1e-10):
        """Invert :meth:`log_snr` by bisection on ``[t_lo, t_max]``.

        ``t_lo`` defaults to ``t_min``; ``lam`` must lie in
        ``[log_snr(t_max), log_snr(t_lo)]``.
        """
        t_lo = self.t_min if t_lo is None else t_lo
        lam = np.asarray(lam, dtype=np.float64)
        lam_hi = self.log_snr(t_lo)
        lam_lo = self.log_snr(self.t_max)
        if np.any(lam > lam_hi + 1e-12) or np.any(lam < lam_lo - 1e-12):
            raise ValueError(f"log-SNR {lam} outside [{lam_lo}, {lam_hi}]")
        lo = np.full(lam.shape, float(t_lo))
        hi = np.full(lam.shape, float(self.t_max))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.log_snr(mid) > lam
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
            t = 0.5 * (lo + hi)
            if np.all(np.abs(self.log_snr(t) - lam) < tol) or np.all(hi - lo < 1e-15):
                break
        t = 0.5 * (lo + hi)
        return float(t) if t.ndim == 0 else t

    def perturb(self, x0, t, noise):
        """Draw ``x_t = alpha_t x0 + sigma_t noise``; ``t`` broadcasts per row."""
        x0 = np.asarray(x0, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        alpha, sigma = self.alpha_sigma(t)
        if np.ndim(alpha) > 0 and x0.ndim > np.ndim(alpha):
            alpha = alpha[..., None]
            sigma = sigma[..., None]
        return alpha * x0 + sigma * noise

    def sample_times(self, rng: np.random.Generator, size):
        return rng.uniform(self.t_min, self.t_max, size=size)
