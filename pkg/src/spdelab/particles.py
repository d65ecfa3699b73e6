"""Branching and resampling particle systems and their distribution functions.

Both simulators use discrete-time thinning: in each step of length ``dt`` a
particle branches with probability ``rate dt`` (SBM), so the expected event
count per unit time matches the continuous-time rate, or a Poisson number of
pair events fires (Moran).  Brownian positions are updated lazily:
a particle holds the time of its last update and receives one Gaussian
increment of the elapsed variance when it is touched or observed, which has
the same law as summing the per-step increments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.special import ndtri

from .grid import GridFunction, GridSpec, write_csv
from .io import stable_hash, write_json

__all__ = [
    "AtomicMeasure",
    "ParticleConfig",
    "ParticlePath",
    "PopulationCapError",
    "empirical_cdf",
    "fv_generator_moments",
    "generalized_inverse",
    "quantile_positions",
    "replica_seed",
    "sbm_generator_moments",
    "simulate_fv_particles",
    "simulate_sbm_particles",
]


class PopulationCapError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    positions: np.ndarray
    masses: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).ravel()
        mass = np.broadcast_to(np.asarray(self.masses, dtype=float), pos.shape).copy()
        if not np.all(np.isfinite(pos)):
            raise ValueError("atom positions must be finite")
        if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
            raise ValueError("atom masses must be positive and finite")
        pos.flags.writeable = False
        mass.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", mass)

    def __len__(self):
        return len(self.positions)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def integrate(self, f) -> float:
        """``μ(f) = Σ m_i f(x_i)`` for a vectorized callable ``f``."""
        if len(self) == 0:
            return 0.0
        return float(np.dot(self.masses, f(self.positions)))

    def to_csv(self, path) -> None:
        write_csv(path, self.positions, self.masses, header=("position", "mass"))

    @classmethod
    def from_csv(cls, path, time: float = 0.0) -> "AtomicMeasure":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], time)


def empirical_cdf(m: AtomicMeasure, grid: GridSpec, origin: str = "zero") -> GridFunction:
    """Distribution function of an atomic measure on a grid.

    ``origin="zero"`` is the signed convention ``u(y) = μ((0, y])`` for ``y >= 0``
    and ``-μ((y, 0])`` for ``y < 0``.  ``origin="-inf"`` is ``u(y) = μ((-∞, y])``.
    Both differ by the constant ``μ((-∞, 0])``.
    """
    if origin not in ("zero", "-inf"):
        raise ValueError("origin must be 'zero' or '-inf'")
    order = np.argsort(m.positions, kind="stable")
    xs = m.positions[order]
    cum = np.concatenate([[0.0], np.cumsum(m.masses[order])])
    below = cum[np.searchsorted(xs, grid.points, side="right")]
    if origin == "zero":
        below = below - cum[np.searchsorted(xs, 0.0, side="right")]
    return GridFunction(grid, below)


def generalized_inverse(u: GridFunction, a, tol: float = 1e-12):
    """``sup{x : u(x) < a}`` with linear interpolation between bracketing grid points.

    Levels below the range give ``x_min``; levels above give ``x_max``.
    """
    v = u.values
    if np.any(np.diff(v) < -tol * max(1.0, np.abs(v).max())):
        raise ValueError("generalized inverse needs a nondecreasing function")
    v = np.maximum.accumulate(v)
    x = u.spec.points
    a_arr = np.asarray(a, dtype=float)
    k = np.searchsorted(v, a_arr, side="left")  # number of grid values < a
    i = np.clip(k - 1, 0, len(v) - 2)
    lo, hi = v[i], v[i + 1]
    step = np.where(hi > lo, (a_arr - lo) / np.where(hi > lo, hi - lo, 1.0), 1.0)
    out = x[i] + np.clip(step, 0.0, 1.0) * u.spec.dx
    out = np.where(k == 0, x[0], out)
    out = np.where(k >= len(v), x[-1], out)
    return float(out) if np.ndim(out) == 0 else out


# -- configuration --------------------------------------------------------------


def quantile_positions(n: int, scale: float = 0.5, center: float = 0.0) -> np.ndarray:
    """Deterministic ``N(center, scale²)`` quantiles at ``(i + ½)/n``."""
    return center + scale * ndtri((np.arange(n) + 0.5) / n)


def replica_seed(seed: int, stream_id: int) -> int:
    """32-bit seed for the compiled generator, split from ``(seed, stream_id)``."""
    return int(np.random.SeedSequence([int(seed), int(stream_id), 0x5BD1]).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class ParticleConfig:
    """Particle system set-up.

    Each particle has mass ``initial_mass / n_init``.  For SBM the branching
    rate is ``rate_factor / mass``; for the Moran model ``pair_rate`` is the
    per-unordered-pair resampling rate.  ``dt`` defaults to the largest step
    with per-particle event probability below 0.1.  Snapshots are taken every
    ``snapshot_dt`` (default ``T/100``), rounded to whole steps.
    """

    n_init: int
    T: float
    initial_mass: float = 1.0
    rate_factor: float = 1.0
    pair_rate: float = 1.0
    dt: float | None = None
    seed: int = 0
    init_scale: float = 0.5
    init_center: float = 0.0
    snapshot_dt: float | None = None
    cap_factor: int = 50

    def __post_init__(self):
        if int(self.n_init) != self.n_init or self.n_init < 1:
            raise ValueError("n_init must be a positive integer")
        if not self.T > 0 or not self.initial_mass > 0:
            raise ValueError("T and initial_mass must be positive")
        if self.rate_factor < 0 or self.pair_rate < 0:
            raise ValueError("rates must be nonnegative")

    @property
    def particle_mass(self) -> float:
        return self.initial_mass / self.n_init

    @property
    def branching_rate(self) -> float:
        return self.rate_factor / self.particle_mass

    def per_particle_rate(self, model: str) -> float:
        if model == "sbm":
            return self.branching_rate
        return self.pair_rate * (self.n_init - 1)

    def step(self, model: str) -> tuple[float, int]:
        """``(dt, n_steps)`` with ``dt * n_steps == T``."""
        rate = self.per_particle_rate(model)
        if self.dt is None:
            n = max(1, int(math.ceil(self.T * rate / 0.0999))) if rate > 0 else max(1, int(math.ceil(self.T / 1e-3)))
        else:
            n = max(1, int(round(self.T / self.dt)))
        dt = self.T / n
        if rate * dt >= 0.1:
            raise ValueError(f"event probability per step {rate * dt:.3f} >= 0.1; reduce dt")
        return dt, n

    def snapshot_steps(self, model: str) -> np.ndarray:
        dt, n = self.step(model)
        snap = self.T / 100 if self.snapshot_dt is None else self.snapshot_dt
        every = max(1, int(round(snap / dt)))
        steps = np.arange(0, n + 1, every, dtype=np.int64)
        if steps[-1] != n:
            steps = np.append(steps, n)
        return steps

    def initial_positions(self) -> np.ndarray:
        return quantile_positions(self.n_init, self.init_scale, self.init_center)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- compiled kernels ------------------------------------------------------------


@nb.njit(cache=True)
def _grow(buf, need):
    if need <= buf.size:
        return buf
    new = np.empty(max(need, 2 * buf.size))
    new[: buf.size] = buf
    return new


@nb.njit(cache=True)
def _sbm_kernel(seed, x0, rate, dt, n_steps, snaps, cap):
    np.random.seed(seed)
    n = x0.size
    pos = np.empty(cap)
    tl = np.zeros(cap)
    pos[:n] = x0
    dead = np.empty(cap, np.int64)
    p = rate * dt
    out = np.empty(max(16, 2 * n * snaps.size))
    counts = np.zeros(snaps.size, np.int64)
    used = 0
    s = 0
    if snaps[0] == 0:
        out[:n] = x0
        used = n
        counts[0] = n
        s = 1
    for k in range(n_steps):
        t1 = (k + 1) * dt
        if p > 0.0 and n > 0:
            nold = n
            nd = 0
            i = np.random.geometric(p) - 1
            while i < nold:
                pos[i] += math.sqrt(t1 - tl[i]) * np.random.standard_normal()
                tl[i] = t1
                if np.random.random() < 0.5:
                    dead[nd] = i
                    nd += 1
                else:
                    if n >= cap:
                        return out[:used], counts, 1
                    pos[n] = pos[i]
                    tl[n] = t1
                    n += 1
                i += np.random.geometric(p)
            for q in range(nd - 1, -1, -1):
                d = dead[q]
                n -= 1
                pos[d] = pos[n]
                tl[d] = tl[n]
        if s < snaps.size and snaps[s] == k + 1:
            for i in range(n):
                pos[i] += math.sqrt(t1 - tl[i]) * np.random.standard_normal()
                tl[i] = t1
            out = _grow(out, used + n)
            out[used : used + n] = pos[:n]
            used += n
            counts[s] = n
            s += 1
    return out[:used], counts, 0


@nb.njit(cache=True)
def _fv_kernel(seed, x0, pair_rate, dt, n_steps, snaps):
    np.random.seed(seed)
    n = x0.size
    pos = x0.copy()
    tl = np.zeros(n)
    lam = pair_rate * n * (n - 1) / 2.0 * dt
    out = np.empty(n * snaps.size)
    s = 0
    if snaps[0] == 0:
        out[:n] = x0
        s = 1
    for k in range(n_steps):
        t1 = (k + 1) * dt
        n_events = np.random.poisson(lam) if lam > 0.0 else 0
        for _ in range(n_events):
            # an ordered pair uniformly at random: unordered pair plus a fair direction
            i = np.random.randint(0, n)
            j = np.random.randint(0, n - 1)
            if j >= i:
                j += 1
            pos[i] += math.sqrt(t1 - tl[i]) * np.random.standard_normal()
            tl[i] = t1
            pos[j] = pos[i]
            tl[j] = t1
        if s < snaps.size and snaps[s] == k + 1:
            for i in range(n):
                pos[i] += math.sqrt(t1 - tl[i]) * np.random.standard_normal()
                tl[i] = t1
            out[s * n : (s + 1) * n] = pos
            s += 1
    return out


# -- paths -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticlePath:
    model: str
    times: np.ndarray
    snapshots: list = field(repr=False)
    config: dict = field(default_factory=dict)
    stream_id: int = 0

    def total_mass(self) -> np.ndarray:
        return np.array([m.total_mass for m in self.snapshots])

    def integrals(self, f) -> np.ndarray:
        return np.array([m.integrate(f) for m in self.snapshots])

    def at(self, t: float) -> AtomicMeasure:
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, atol=1e-9):
            raise ValueError(f"no snapshot at t={t}")
        return self.snapshots[i]

    def manifest(self) -> dict:
        return {
            "model": self.model,
            "times": self.times.tolist(),
            "config": self.config,
            "config_hash": stable_hash(self.config),
            "stream_id": int(self.stream_id),
            "files": [f"snapshot_{i:05d}.csv" for i in range(len(self.snapshots))],
        }

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        files = []
        for i, m in enumerate(self.snapshots):
            p = out_dir / f"snapshot_{i:05d}.csv"
            m.to_csv(p)
            files.append(p)
        files.append(write_json(out_dir / "manifest.json", self.manifest()))
        return files

    @classmethod
    def load(cls, out_dir) -> "ParticlePath":
        out_dir = Path(out_dir)
        man = json.loads((out_dir / "manifest.json").read_text())
        snaps = [AtomicMeasure.from_csv(out_dir / f, t) for f, t in zip(man["files"], man["times"])]
        return cls(man["model"], np.array(man["times"]), snaps, man["config"], man["stream_id"])


def _split(flat, counts, mass, times):
    snaps, start = [], 0
    for c, t in zip(counts, times):
        snaps.append(AtomicMeasure(flat[start : start + c], mass, float(t)))
        start += c
    return snaps


def simulate_sbm_particles(config: ParticleConfig, stream_id: int = 0) -> ParticlePath:
    """Critical binary branching Brownian motion with mass ``ε`` and rate ``rate_factor/ε``."""
    dt, n_steps = config.step("sbm")
    snaps = config.snapshot_steps("sbm")
    x0 = config.initial_positions()
    cap = config.cap_factor * config.n_init
    flat, counts, status = _sbm_kernel(
        replica_seed(config.seed, stream_id), x0, config.branching_rate, dt, n_steps, snaps, cap
    )
    if status:
        raise PopulationCapError(f"population exceeded the cap of {cap} particles")
    times = snaps * dt
    return ParticlePath("sbm", times, _split(flat, counts, config.particle_mass, times), config.to_dict(), stream_id)


def simulate_fv_particles(config: ParticleConfig, stream_id: int = 0) -> ParticlePath:
    """Moran model: pair resampling at ``pair_rate`` per unordered pair, fair direction."""
    if config.n_init < 2 and config.pair_rate > 0:
        raise ValueError("the Moran model needs at least two particles")
    dt, n_steps = config.step("fv")
    snaps = config.snapshot_steps("fv")
    x0 = config.initial_positions()
    flat = _fv_kernel(replica_seed(config.seed, stream_id), x0, float(config.pair_rate), dt, n_steps, snaps)
    n = config.n_init
    times = snaps * dt
    counts = np.full(len(snaps), n)
    return ParticlePath("fv", times, _split(flat, counts, 1.0 / n, times), config.to_dict(), stream_id)


# -- exact generator moments for small systems -----------------------------------


def fv_generator_moments(x: np.ndarray, f, pair_rate: float = 1.0) -> tuple[float, float]:
    """Drift and quadratic-variation rate of ``μ(f)`` under the resampling jumps.

    Enumerates every ordered copy ``i -> j`` (rate ``pair_rate / 2`` each) and
    returns ``(Σ rate·Δ, Σ rate·Δ²)`` with ``Δ = (f(x_i) - f(x_j)) / N``.
    """
    fx = f(np.asarray(x, dtype=float))
    n = len(fx)
    drift = qv = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                d = (fx[i] - fx[j]) / n
                drift += 0.5 * pair_rate * d
                qv += 0.5 * pair_rate * d * d
    return drift, qv


def sbm_generator_moments(x: np.ndarray, f, mass: float, rate: float) -> tuple[float, float]:
    """Drift and quadratic-variation rate of ``μ(f)`` under binary branching."""
    fx = f(np.asarray(x, dtype=float))
    drift = float(np.sum(rate * (0.5 * mass * fx - 0.5 * mass * fx)))
    qv = float(np.sum(rate * (0.5 * (mass * fx) ** 2 + 0.5 * (mass * fx) ** 2)))
    return drift, qv
