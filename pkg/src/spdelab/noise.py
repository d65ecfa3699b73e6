"""Discrete space-time white noise on ``R_+ x U`` and colored fields built from it.

Every entry of a noise array is addressed by ``(seed, stream_id, step, cell)``:
the pair ``(seed, stream_id)`` keys a Philox counter generator and the entry at
``(step, cell)`` is the inverse-normal transform of raw output number
``step * n_cells + cell``.  Any row can be regenerated on its own, in any order,
and two schemes handed the same manifest consume identical noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .grid import GridFunction, GridSpec

__all__ = [
    "LevelSpec",
    "NoiseField",
    "RkhsKernel",
    "cons_brownian_increments",
    "colored_increment",
    "haar_basis",
    "sample_noise",
    "noise_row",
    "squared_exponential",
    "standard_normals",
]


@dataclass(frozen=True)
class LevelSpec:
    """The level space ``(U, λ)`` cut into cells.

    ``interval`` is a truncated piece of the real line with Lebesgue measure,
    ``unit`` is ``[0, 1]`` with Lebesgue measure and ``index`` is ``{1..n}``
    with counting measure.
    """

    kind: str
    n_levels: int
    a_min: float = 0.0
    a_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("interval", "unit", "index"):
            raise ValueError(f"unknown level kind {self.kind!r}")
        if int(self.n_levels) != self.n_levels or self.n_levels < 1:
            raise ValueError("n_levels must be a positive integer")
        if self.kind == "unit" and (self.a_min, self.a_max) != (0.0, 1.0):
            raise ValueError("unit levels live on [0, 1]")
        if self.kind == "interval" and not self.a_min < self.a_max:
            raise ValueError("interval levels need a_min < a_max")

    @classmethod
    def interval(cls, a_min: float, a_max: float, n_levels: int) -> "LevelSpec":
        return cls("interval", int(n_levels), float(a_min), float(a_max))

    @classmethod
    def unit(cls, n_levels: int) -> "LevelSpec":
        return cls("unit", int(n_levels))

    @classmethod
    def index(cls, n_modes: int) -> "LevelSpec":
        return cls("index", int(n_modes), 1.0, float(n_modes))

    @property
    def da(self) -> float:
        """λ-measure of one cell."""
        if self.kind == "index":
            return 1.0
        return (self.a_max - self.a_min) / self.n_levels

    @property
    def edges(self) -> np.ndarray:
        if self.kind == "index":
            raise ValueError("index levels have no cell edges")
        return np.linspace(self.a_min, self.a_max, self.n_levels + 1)

    @property
    def midpoints(self) -> np.ndarray:
        if self.kind == "index":
            return np.arange(1, self.n_levels + 1, dtype=float)
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_levels": self.n_levels, "a_min": self.a_min, "a_max": self.a_max}

    @classmethod
    def from_dict(cls, d: dict) -> "LevelSpec":
        return cls(d["kind"], int(d["n_levels"]), float(d["a_min"]), float(d["a_max"]))


def _philox_key(seed: int, stream_id: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), int(stream_id)]).generate_state(2, np.uint64)


def standard_normals(seed: int, stream_id: int, start: int, count: int) -> np.ndarray:
    """N(0,1) values at counter positions ``start .. start+count-1`` of a stream."""
    bg = np.random.Philox(key=_philox_key(seed, stream_id))
    block, offset = divmod(int(start), 4)
    if block:
        bg.advance(block)
    raw = bg.random_raw(offset + int(count))[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class NoiseField:
    n_steps: int
    dt: float
    level: LevelSpec
    increments: np.ndarray = field(repr=False)
    seed: int
    stream_id: int
    transform: tuple = ()

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.n_steps, self.level.n_levels):
            raise ValueError(f"increments shape {inc.shape} != {(self.n_steps, self.level.n_levels)}")
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)

    @property
    def n_cells(self) -> int:
        return self.level.n_levels

    @property
    def digest(self) -> str:
        """Content hash of the increments and their manifest."""
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest(with_digest=False), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.increments).tobytes())
        return h.hexdigest()

    def manifest(self, with_digest: bool = True) -> dict:
        m = {
            "seed": int(self.seed),
            "stream_id": int(self.stream_id),
            "n_steps": int(self.n_steps),
            "dt": float(self.dt),
            "level": self.level.to_dict(),
            "shape": list(self.increments.shape),
            "transform": [list(t) for t in self.transform],
        }
        if with_digest:
            m["digest"] = self.digest
        return m

    def to_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True, indent=2)

    @classmethod
    def from_manifest(cls, manifest: dict) -> "NoiseField":
        """Regenerate a field from its manifest and verify the digest."""
        base = sample_noise(
            manifest["n_steps"] if not manifest["transform"] else _base_steps(manifest),
            _base_dt(manifest),
            LevelSpec.from_dict(manifest["level"]),
            manifest["seed"],
            manifest["stream_id"],
        )
        out = base
        for t in manifest["transform"]:
            out = out.coarsen(t[1]) if t[0] == "coarsen" else out.reversed()
        if "digest" in manifest and out.digest != manifest["digest"]:
            raise ValueError("regenerated noise does not match the manifest digest")
        return out

    def coarsen(self, factor: int) -> "NoiseField":
        """Sum ``factor`` consecutive steps: the same noise at time step ``factor*dt``."""
        if self.n_steps % factor:
            raise ValueError("n_steps not divisible by the coarsening factor")
        inc = self.increments.reshape(self.n_steps // factor, factor, -1).sum(axis=1)
        return replace(
            self,
            n_steps=self.n_steps // factor,
            dt=self.dt * factor,
            increments=inc,
            transform=self.transform + (("coarsen", int(factor), self.digest),),
        )

    def reversed(self) -> "NoiseField":
        """Time reversal ``W~([0,t] x A) = W([T-t, T] x A)`` by row reversal."""
        return replace(
            self,
            increments=self.increments[::-1].copy(),
            transform=self.transform + (("reverse", 0, self.digest),),
        )

    @property
    def reversed_from(self) -> str | None:
        if self.transform and self.transform[-1][0] == "reverse":
            return self.transform[-1][2]
        return None


def _base_steps(manifest):
    n = manifest["n_steps"]
    for t in manifest["transform"]:
        if t[0] == "coarsen":
            n *= t[1]
    return n


def _base_dt(manifest):
    dt = manifest["dt"]
    for t in manifest["transform"]:
        if t[0] == "coarsen":
            dt /= t[1]
    return dt


def sample_noise(n_steps: int, dt: float, level: LevelSpec, seed: int, stream_id: int = 0) -> NoiseField:
    """I.i.d. ``N(0, dt·λ(cell))`` increments for ``n_steps`` time steps."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if level.n_levels < 1:
        raise ValueError("noise needs at least one cell")
    n_steps = int(n_steps)
    z = standard_normals(seed, stream_id, 0, n_steps * level.n_levels)
    inc = z.reshape(n_steps, level.n_levels) * np.sqrt(dt * level.da)
    return NoiseField(n_steps, float(dt), level, inc, int(seed), int(stream_id))


def noise_row(dt: float, level: LevelSpec, seed: int, stream_id: int, step: int) -> np.ndarray:
    """Regenerate row ``step`` alone; bit-identical to ``sample_noise(...).increments[step]``."""
    z = standard_normals(seed, stream_id, step * level.n_levels, level.n_levels)
    return z * np.sqrt(dt * level.da)


# -- CONS projections ----------------------------------------------------------


def haar_basis(level: LevelSpec, n_modes: int) -> np.ndarray:
    """First ``n_modes`` Haar functions on [0, 1], sampled at the cell midpoints."""
    if level.kind not in ("unit", "interval"):
        raise ValueError("Haar basis needs an interval level space")
    a = (level.midpoints - level.a_min) / (level.a_max - level.a_min)
    scale = 1.0 / np.sqrt(level.a_max - level.a_min)
    rows = [np.ones_like(a)]
    j = 0
    while len(rows) < n_modes:
        for k in range(2**j):
            if len(rows) == n_modes:
                break
            lo, mid, hi = k / 2**j, (k + 0.5) / 2**j, (k + 1) / 2**j
            h = np.where((a >= lo) & (a < mid), 1.0, 0.0) - np.where((a >= mid) & (a < hi), 1.0, 0.0)
            rows.append(2 ** (j / 2) * h)
        j += 1
    return scale * np.array(rows)


def cons_brownian_increments(noise: NoiseField, basis: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Project the noise onto an orthonormal system: ``ΔB^j_n = Σ_c h_j(a_c) ξ[n, c]``.

    ``basis`` has shape ``(n_modes, n_cells)``; returns ``(n_steps, n_modes)``.
    """
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    if basis.shape[1] != noise.n_cells:
        raise ValueError("basis is not sampled on the noise cells")
    gram = basis @ basis.T * noise.level.da
    err = np.abs(gram - np.eye(len(basis))).max()
    if err > tol:
        raise ValueError(f"basis is not orthonormal on the level space (Gram error {err:.3g})")
    return noise.increments @ basis.T


# -- colored noise -------------------------------------------------------------


def squared_exponential(x, y):
    return np.exp(-((x - y) ** 2))


@dataclass(frozen=True, eq=False)
class RkhsKernel:
    """Finite expansion ``φ(x, y) ≈ Σ_j ρ(j, x) ρ(j, y)`` on a grid (discrete Mercer)."""

    phi: Callable
    spec: GridSpec
    modes: np.ndarray = field(repr=False)

    @classmethod
    def mercer(cls, phi: Callable, spec: GridSpec, n_modes: int) -> "RkhsKernel":
        x = spec.points
        cov = phi(x[:, None], x[None, :])
        if np.any(np.diag(cov) < 0):
            raise ValueError("covariance must satisfy φ(x, x) >= 0")
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:n_modes]
        evals = np.clip(evals[order], 0.0, None)
        # fix the sign of each eigenvector so the expansion is reproducible
        vecs = evecs[:, order]
        signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
        modes = (vecs * signs * np.sqrt(evals)).T
        return cls(phi, spec, modes)

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def covariance(self) -> np.ndarray:
        return self.modes.T @ self.modes

    def truncation_error(self) -> float:
        x = self.spec.points
        return float(np.max(np.abs(self.phi(x, x) - np.sum(self.modes**2, axis=0))))

    def level_spec(self) -> LevelSpec:
        return LevelSpec.index(self.n_modes)


def colored_increment(kernel: RkhsKernel, noise: NoiseField, step: int) -> GridFunction:
    """The spatial field ``B(x, Δ) = Σ_j ρ(j, x) ξ[step, j]``."""
    if noise.level.kind != "index" or noise.n_cells != kernel.n_modes:
        raise ValueError(
            f"noise has {noise.n_cells} {noise.level.kind} cells, kernel has {kernel.n_modes} modes"
        )
    return GridFunction(kernel.spec, noise.increments[step] @ kernel.modes)
