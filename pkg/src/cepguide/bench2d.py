"""2-D toy datasets, reference energies and sample-quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .guidance import EnergySpec

DATASETS = ("8gaussians", "swissroll", "2spirals", "moons", "rings", "gaussian_linear")
ENERGIES = ("linear", "quadratic_bowl", "half_plane_soft", "ring_distance", "sinusoid")


@dataclass
class Dataset2D:
    points: np.ndarray
    energies: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset points must be finite")
        n = self.points.shape[0]
        for name in ("energies", "labels"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} must have one entry per point")

    def __len__(self):
        return self.points.shape[0]

    def with_energy(self, energy: EnergySpec) -> "Dataset2D":
        return Dataset2D(self.points, energy.energy(self.points), self.labels)


@dataclass
class MetricReport:
    mmd2: float
    hist_tv: float
    mean_energy: float
    n_samples: int


def _eight_gaussians(n, rng):
    s = 1.0 / np.sqrt(2.0)
    centers = 4.0 * np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (s, s), (s, -s), (-s, s), (-s, -s)])
    labels = rng.integers(0, 8, size=n)
    pts = (centers[labels] + 0.5 * rng.standard_normal((n, 2))) / 1.414
    return pts, labels


def eight_gaussian_centers() -> np.ndarray:
    s = 1.0 / np.sqrt(2.0)
    return 4.0 * np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (s, s), (s, -s), (-s, s), (-s, -s)]) / 1.414


def _swissroll(n, rng):
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) + rng.standard_normal((n, 2))
    return pts / 5.0, None


def _two_spirals(n, rng):
    arm = rng.integers(0, 2, size=n)
    r = np.sqrt(rng.uniform(size=n)) * 540 * (2 * np.pi) / 360
    x = -np.cos(r) * r + rng.uniform(size=n) * 0.5
    y = np.sin(r) * r + rng.uniform(size=n) * 0.5
    sign = np.where(arm == 0, 1.0, -1.0)[:, None]
    pts = sign * np.stack([x, y], axis=1) / 3.0 + 0.1 * rng.standard_normal((n, 2))
    return pts, arm


def _moons(n, rng):
    moon = rng.integers(0, 2, size=n)
    th = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(th), np.sin(th)], axis=1)
    inner = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=1)
    pts = np.where(moon[:, None] == 0, outer, inner) + 0.1 * rng.standard_normal((n, 2))
    return pts * 2.0 + np.array([-1.0, -0.2]), moon


def _rings(n, rng):
    ring = rng.integers(0, 4, size=n)
    radius = 0.9 * (ring + 1.0)
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = radius[:, None] * np.stack([np.cos(th), np.sin(th)], axis=1)
    return pts + 0.08 * rng.standard_normal((n, 2)), ring


def _gaussian(n, rng):
    return rng.standard_normal((n, 2)), None


_GENERATORS = {
    "8gaussians": _eight_gaussians,
    "swissroll": _swissroll,
    "2spirals": _two_spirals,
    "moons": _moons,
    "rings": _rings,
    "gaussian_linear": _gaussian,
}


def make_dataset(name: str, n: int, seed: int) -> Dataset2D:
    """Sample ``n`` points of a named toy distribution (roughly within ``[-4, 4]^2``)."""
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if n < 0:
        raise ValueError("n must be >= 0")
    pts, labels = _GENERATORS[name](n, np.random.default_rng(seed))
    return Dataset2D(pts.reshape(n, 2), None, labels)


_ENERGY_PARAMS = {"linear": {"c"}, "quadratic_bowl": {"center", "scale"},
                  "half_plane_soft": {"normal", "offset", "sharpness"}, "ring_distance": {"radius"},
                  "sinusoid": set()}


def builtin_energy(name: str, beta: float = 1.0, **params) -> EnergySpec:
    """Smooth reference energies with closed forms.

    * ``linear``: ``c.x`` (``c`` defaults to ``(0.5, 0)``)
    * ``quadratic_bowl``: ``0.5 * scale * |x - center|^2`` (center ``(1, 1)``, scale ``0.25``)
    * ``half_plane_soft``: ``softplus(k (n.x - b)) / k`` (``n=(0, 1)``, ``b=0``, ``k=2``)
    * ``ring_distance``: ``0.5 (sqrt(|x|^2 + 1e-6) - r)^2`` (``r = 2``)
    * ``sinusoid``: ``0.5 (sin(x1) + cos(x2))``
    """
    allowed = _ENERGY_PARAMS.get(name)
    if allowed is not None and set(params) - allowed:
        raise TypeError(f"unknown parameters for {name}: {sorted(set(params) - allowed)}")
    if name == "linear":
        c = np.asarray(params.get("c", (0.5, 0.0)), dtype=np.float64)
        return EnergySpec(lambda x: x @ c, beta, lambda x: np.broadcast_to(c, np.shape(x)).copy(), name)
    if name == "quadratic_bowl":
        center = np.asarray(params.get("center", (1.0, 1.0)), dtype=np.float64)
        scale = float(params.get("scale", 0.25))
        return EnergySpec(lambda x: 0.5 * scale * np.sum((x - center) ** 2, axis=-1), beta,
                          lambda x: scale * (x - center), name)
    if name == "half_plane_soft":
        nrm = np.asarray(params.get("normal", (0.0, 1.0)), dtype=np.float64)
        b = float(params.get("offset", 0.0))
        k = float(params.get("sharpness", 2.0))

        def e(x):
            return np.logaddexp(0.0, k * (x @ nrm - b)) / k

        def g(x):
            s = 0.5 * (1.0 + np.tanh(0.5 * k * (x @ nrm - b)))
            return s[..., None] * nrm
        return EnergySpec(e, beta, g, name)
    if name == "ring_distance":
        r = float(params.get("radius", 2.0))

        def e(x):
            return 0.5 * (np.sqrt(np.sum(x**2, axis=-1) + 1e-6) - r) ** 2

        def g(x):
            rho = np.sqrt(np.sum(x**2, axis=-1) + 1e-6)
            return ((rho - r) / rho)[..., None] * x
        return EnergySpec(e, beta, g, name)
    if name == "sinusoid":
        return EnergySpec(lambda x: 0.5 * (np.sin(x[..., 0]) + np.cos(x[..., 1])), beta,
                          lambda x: 0.5 * np.stack([np.cos(x[..., 0]), -np.sin(x[..., 1])], axis=-1), name)
    raise ValueError(f"unknown energy {name!r}; choose from {ENERGIES}")


def normalized_energy(energy: EnergySpec, points) -> EnergySpec:
    """Affinely rescale ``energy`` to span ``[0, 1]`` over ``points`` (the toy-benchmark convention)."""
    e = energy.energy(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    lo, span = float(e.min()), float(e.max() - e.min())
    if not span > 0:
        raise ValueError("energy is constant on the given points")
    return EnergySpec(lambda x: (energy.energy(x) - lo) / span, energy.beta,
                      lambda x: energy.grad(x) / span, energy.name)


def median_bandwidth(a, b, max_points: int = 2000) -> float:
    """Median pairwise distance of the pooled sample (deterministic subsample)."""
    pooled = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    if pooled.shape[0] > max_points:
        idx = np.random.default_rng(0).choice(pooled.shape[0], max_points, replace=False)
        pooled = pooled[idx]
    d2 = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def _kernel_sum(x, y, bw, chunk=2048):
    total = 0.0
    ysq = np.sum(y**2, axis=1)
    for lo in range(0, x.shape[0], chunk):
        xc = x[lo : lo + chunk]
        d2 = np.sum(xc**2, axis=1)[:, None] - 2 * xc @ y.T + ysq[None, :]
        total += np.exp(-np.maximum(d2, 0.0) / (2 * bw * bw)).sum()
    return total


def mmd2(sample_a, sample_b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sample_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("mmd2 needs two nonempty samples")
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    m, n = a.shape[0], b.shape[0]
    return float(_kernel_sum(a, a, bw) / m**2 + _kernel_sum(b, b, bw) / n**2
            - 2 * _kernel_sum(a, b, bw) / (m * n))


def hist_divergence(sample_a, sample_b, bins: int = 50) -> float:
    """Total variation between 2-D histograms on a shared grid."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sample_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("hist_divergence needs two nonempty samples")
    pooled = np.concatenate([a, b])
    lo, hi = pooled.min(axis=0), pooled.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    edges = [np.linspace(lo[k], hi[k], bins + 1) for k in range(2)]
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=edges)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=edges)
    return float(0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum())


def mean_energy(sample, energy: EnergySpec) -> float:
    """Mean of the unscaled energy ``E`` over a sample."""
    s = np.atleast_2d(np.asarray(sample, dtype=np.float64))
    if s.shape[0] == 0 or s.size == 0:
        raise ValueError("mean_energy of an empty sample")
    return float(np.mean(energy.energy(s)))


def evaluate_sample(sample, reference, energy: EnergySpec, bins: int = 50) -> MetricReport:
    return MetricReport(mmd2=mmd2(sample, reference), hist_tv=hist_divergence(sample, reference, bins),
                        mean_energy=mean_energy(sample, energy), n_samples=int(len(sample)))


def write_points_csv(path, points, energies=None, labels=None) -> None:
    """One row per point: ``x1..xd[,energy][,label]``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = points.shape[1]
    header = [f"x{k + 1}" for k in range(d)]
    if energies is not None:
        header.append("energy")
    if labels is not None:
        header.append("label")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, row in enumerate(points):
            out = [repr(float(v)) for v in row]
            if energies is not None:
                out.append(repr(float(energies[i])))
            if labels is not None:
                out.append(str(int(labels[i])))
            w.writerow(out)


def read_points_csv(path) -> Dataset2D:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    pts = np.array([[float(r[i]) for i in xcols] for r in body], dtype=np.float64).reshape(-1, len(xcols))
    energies = labels = None
    if "energy" in header:
        k = header.index("energy")
        energies = np.array([float(r[k]) for r in body])
    if "label" in header:
        k = header.index("label")
        labels = np.array([int(r[k]) for r in body])
    return Dataset2D(pts, energies, labels)
