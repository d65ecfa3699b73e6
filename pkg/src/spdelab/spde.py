"""Noise coefficients and integrators for ``∂u = ½Δu + ∫_U G(a, y, u) W(dt da)``.

The noise term of one step is ``N(y) = Σ_cells G(a_cell, y, u(y)) ξ_cell``.  For
the indicator kernels this telescopes to differences of the cumulative level
noise ``S(a) = W([a_min, a] x step)``, evaluated with linear interpolation
inside the cell that contains ``u`` so that ``u ↦ N`` is continuous.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .grid import GridFunction, GridSpec, Weight, norm0_batch, plain_inner, read_csv, write_csv
from .heat import HeatOperator
from .io import stable_hash, write_json
from .noise import LevelSpec, NoiseField, RkhsKernel, sample_noise

__all__ = [
    "CoefficientKernel",
    "Ensemble",
    "LevelBandError",
    "PicardContractionWarning",
    "SolverConfig",
    "SolverDivergenceError",
    "Trajectory",
    "WeakResidual",
    "check_conditions",
    "default_sbm_level",
    "g_colored",
    "g_fv",
    "g_sbm",
    "gaussian_cdf",
    "neumann_second_difference",
    "solve",
    "solve_ensemble",
    "solve_picard",
    "step_mild_euler",
    "weak_form_residual",
]


class LevelBandError(RuntimeError):
    """The solution left the band of levels that carries noise."""


class SolverDivergenceError(RuntimeError):
    pass


class PicardContractionWarning(UserWarning):
    pass


# -- pointwise coefficients ----------------------------------------------------


def g_sbm(a, y, u):
    """``1{0 <= a <= u} + 1{u <= a <= 0}``: indicator of ``a`` between 0 and ``u``."""
    a, u = np.asarray(a, dtype=float), np.asarray(u, dtype=float)
    return (((0.0 <= a) & (a <= u)) | ((u <= a) & (a <= 0.0))).astype(float)


def g_fv(a, y, u):
    """``1{a <= u} - u`` on ``a ∈ [0, 1]``."""
    a, u = np.asarray(a, dtype=float), np.asarray(u, dtype=float)
    return (a <= u).astype(float) - u


def g_colored(a, y, u, rkhs: RkhsKernel):
    """``ρ(a, y) √max(u, 0)`` with ``a`` a 1-based mode index."""
    a = np.asarray(a, dtype=int)
    if np.any(a < 1) or np.any(a > rkhs.n_modes):
        raise ValueError(f"mode index out of range 1..{rkhs.n_modes}")
    x = rkhs.spec.points
    rho = np.vectorize(lambda j, yy: np.interp(yy, x, rkhs.modes[j - 1]))(a, y)
    return rho * np.sqrt(np.maximum(u, 0.0))


def _cumulative_at(u: np.ndarray, xi: np.ndarray, level: LevelSpec) -> np.ndarray:
    """``S(u)``: noise mass of levels in ``[a_min, u]``, linear inside the last cell.

    ``xi`` is one row of increments, either shared (1-d) or one row per leading
    index of ``u`` (shape ``(B, n_cells)`` against ``u`` of shape ``(B, n)``).
    """
    pos = (u - level.a_min) / level.da
    idx = np.clip(np.floor(pos).astype(np.int64), 0, level.n_levels - 1)
    frac = pos - idx
    prefix = np.cumsum(xi, axis=-1) - xi
    if xi.ndim == 1:
        return prefix[idx] + frac * xi[idx]
    return np.take_along_axis(prefix, idx, axis=-1) + frac * np.take_along_axis(xi, idx, axis=-1)


def _coverage(u: np.ndarray, level: LevelSpec) -> np.ndarray:
    """Fraction of each cell lying in ``[a_min, u]``; shape ``u.shape + (n_cells,)``."""
    lo = level.edges[:-1]
    return np.clip((np.asarray(u, dtype=float)[..., None] - lo) / level.da, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class CoefficientKernel:
    """A noise coefficient ``G`` together with its level space.

    Build with :meth:`sbm`, :meth:`fv`, :meth:`colored`, :meth:`none` or
    :meth:`custom`.  ``K`` is the declared constant of the Hölder and growth
    conditions, checked by :func:`check_conditions`.
    """

    id: str
    level: LevelSpec
    K: float = 1.1
    rkhs: RkhsKernel | None = field(default=None, repr=False)
    fn: Callable | None = field(default=None, repr=False)
    u_domain: tuple = (-4.0, 4.0)

    @classmethod
    def sbm(cls, level: LevelSpec, K: float = 1.1) -> "CoefficientKernel":
        if level.kind != "interval" or not level.a_min <= 0.0 <= level.a_max:
            raise ValueError("sbm levels must be an interval containing 0")
        return cls("sbm", level, K, u_domain=(max(level.a_min, -4.0), min(level.a_max, 4.0)))

    @classmethod
    def fv(cls, n_levels: int = 512, K: float = 1.1) -> "CoefficientKernel":
        return cls("fv", LevelSpec.unit(n_levels), K, u_domain=(0.0, 1.0))

    @classmethod
    def colored(cls, rkhs: RkhsKernel, K: float | None = None) -> "CoefficientKernel":
        if K is None:
            K = 1.1 * max(float(np.max(np.sum(rkhs.modes**2, axis=0))), 1e-12)
        return cls("colored", rkhs.level_spec(), K, rkhs=rkhs, u_domain=(0.0, 4.0))

    @classmethod
    def none(cls, level: LevelSpec | None = None) -> "CoefficientKernel":
        return cls("none", level or LevelSpec.unit(1), 0.0, u_domain=(-4.0, 4.0))

    @classmethod
    def custom(cls, fn: Callable, level: LevelSpec, K: float = 1.1, u_domain=(-4.0, 4.0)):
        """``fn(a, y, u)`` must broadcast over numpy arrays."""
        return cls("custom", level, K, fn=fn, u_domain=tuple(u_domain))

    def evaluate(self, a, y, u):
        if self.id == "sbm":
            return g_sbm(a, y, u)
        if self.id == "fv":
            return g_fv(a, y, u)
        if self.id == "colored":
            return g_colored(a, y, u, self.rkhs)
        if self.id == "none":
            return np.zeros(np.broadcast(np.asarray(a), np.asarray(y), np.asarray(u)).shape)
        return self.fn(a, y, u)

    def coefficients(self, y, u) -> np.ndarray:
        """Per-cell weights ``g_c`` with ``N = Σ_c g_c ξ_c`` as used by the scheme."""
        y, u = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(u, dtype=float))
        lv = self.level
        if self.id == "sbm":
            return _coverage(u, lv) - _coverage(np.zeros_like(u), lv)
        if self.id == "fv":
            return _coverage(np.clip(u, 0.0, 1.0), lv) - u[..., None]
        if self.id == "colored":
            x = self.rkhs.spec.points
            rho = np.stack([np.interp(y, x, m) for m in self.rkhs.modes], axis=-1)
            return rho * np.sqrt(np.maximum(u, 0.0))[..., None]
        if self.id == "none":
            return np.zeros(u.shape + (lv.n_levels,))
        return np.asarray(self.fn(lv.midpoints, y[..., None], u[..., None]), dtype=float)

    def noise_term(self, u: np.ndarray, xi: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """``N = Σ_cells G(a_cell, y, u(y)) ξ_cell`` for stacked grid values ``u``."""
        u = np.asarray(u, dtype=float)
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.level.n_levels:
            raise ValueError(f"noise row has {xi.shape[-1]} cells, kernel level has {self.level.n_levels}")
        lv = self.level
        if self.id == "sbm":
            lo, hi = float(u.min()), float(u.max())
            if lo < lv.a_min or hi > lv.a_max:
                raise LevelBandError(
                    f"u in [{lo:.4g}, {hi:.4g}] left the level band [{lv.a_min:.4g}, {lv.a_max:.4g}]"
                )
            zero = np.zeros(u.shape[:-1] + (1,))
            return _cumulative_at(u, xi, lv) - _cumulative_at(zero, xi, lv)
        if self.id == "fv":
            total = xi.sum(axis=-1, keepdims=True)
            return _cumulative_at(np.clip(u, 0.0, 1.0), xi, lv) - u * total
        if self.id == "colored":
            if u.shape[-1] != self.rkhs.spec.n_points:
                raise ValueError("colored kernel modes live on a different grid")
            return np.sqrt(np.maximum(u, 0.0)) * (xi @ self.rkhs.modes)
        if self.id == "none":
            return np.zeros_like(u)
        if y is None:
            raise ValueError("custom kernels need the grid points y")
        g = self.coefficients(np.broadcast_to(y, u.shape), u)
        if xi.ndim == 1:
            return g @ xi
        return np.einsum("...nc,...c->...n", g, xi)

    def describe(self) -> dict:
        d = {"id": self.id, "level": self.level.to_dict(), "K": self.K}
        if self.rkhs is not None:
            d["rkhs_modes_hash"] = stable_hash(np.round(self.rkhs.modes, 15).tolist())
        return d


def check_conditions(kernel: CoefficientKernel, spec: GridSpec, n_samples: int = 1000, seed: int = 0) -> dict:
    """Check the Hölder and growth conditions numerically on random ``(y, u1, u2)``.

    ``∫|G(u1) - G(u2)|² λ(da) <= K |u1 - u2|`` and ``∫|G(u)|² λ(da) <= K (1 + u²)``,
    with the level integrals taken over the same cells the scheme uses.
    """
    rng = np.random.default_rng(seed)
    y = rng.uniform(spec.x_min, spec.x_max, n_samples)
    lo, hi = kernel.u_domain
    u1 = rng.uniform(lo, hi, n_samples)
    u2 = rng.uniform(lo, hi, n_samples)
    w = 1.0 if kernel.level.kind == "index" else kernel.level.da
    g1 = kernel.coefficients(y, u1)
    g2 = kernel.coefficients(y, u2)
    holder = np.sum((g1 - g2) ** 2, axis=-1) * w
    growth = np.sum(g1**2, axis=-1) * w
    holder_ratio = holder / np.maximum(np.abs(u1 - u2), 1e-300)
    growth_ratio = growth / (1.0 + u1**2)
    return {
        "kernel": kernel.id,
        "K": kernel.K,
        "n_samples": int(n_samples),
        "max_holder_ratio": float(holder_ratio.max()),
        "max_growth_ratio": float(growth_ratio.max()),
        "holder_ok": bool(np.all(holder <= kernel.K * np.abs(u1 - u2) + 1e-12)),
        "growth_ok": bool(np.all(growth <= kernel.K * (1.0 + u1**2) + 1e-12)),
    }


# -- initial conditions and level bands ----------------------------------------


def gaussian_cdf(spec: GridSpec, mass: float = 1.0, scale: float = 0.5, center: float = 0.0, origin: str = "-inf"):
    """Distribution function of ``mass·N(center, scale²)``.

    ``origin="-inf"`` gives ``μ((-∞, y])``; ``origin="zero"`` the signed
    ``∫_0^y μ(dx)``.
    """
    z = ndtr((spec.points - center) / scale)
    if origin == "zero":
        z = z - ndtr(-center / scale)
    elif origin != "-inf":
        raise ValueError("origin must be '-inf' or 'zero'")
    return GridFunction(spec, mass * z)


def default_sbm_level(
    F: GridFunction, T: float, n_levels: int = 8192, headroom: float = 1.5, margin: float = 0.25
) -> LevelSpec:
    """Level band for the sbm kernel: ``headroom`` over a five-sigma excursion of ``F``.

    A Feller diffusion started at ``m`` has standard deviation ``√(m T)`` at time
    ``T``; the band covers ``m + 5√(m T)`` on each side of 0.  Each side is at
    least ``margin`` times the other, since discrete states and Picard iterates
    can cross zero even when ``F >= 0``.
    """
    top = max(float(F.values.max()), 0.0)
    bot = max(float(-F.values.min()), 0.0)
    a_max = headroom * (top + 5.0 * np.sqrt(T * top))
    a_min = -headroom * (bot + 5.0 * np.sqrt(T * bot))
    a_max, a_min = max(a_max, -margin * a_min, 1e-3), min(a_min, -margin * a_max, -1e-3)
    return LevelSpec.interval(a_min, a_max, n_levels)


# -- configuration and trajectories --------------------------------------------


@dataclass(frozen=True, eq=False)
class SolverConfig:
    grid: GridSpec
    dt: float
    n_steps: int
    kernel: CoefficientKernel
    F: GridFunction
    scheme: str = "mild-euler"
    n_iter: int = 8
    laplacian: bool = True
    save_every: int = 10

    def __post_init__(self):
        if self.F.spec != self.grid:
            raise ValueError("initial condition is not sampled on the solver grid")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if self.scheme not in ("mild-euler", "picard"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.n_iter < 1:
            raise ValueError("picard needs n_iter >= 1")
        if self.save_every < 1:
            raise ValueError("save_every must be >= 1")
        if self.kernel.rkhs is not None and self.kernel.rkhs.spec != self.grid:
            raise ValueError("colored kernel modes live on a different grid")
        if not np.isfinite(norm0_batch(self.F.values, self.grid)):
            raise ValueError("initial condition must have finite weighted norm")

    @property
    def T(self) -> float:
        return self.dt * self.n_steps

    def saved_steps(self) -> np.ndarray:
        steps = np.arange(0, self.n_steps + 1, self.save_every)
        if steps[-1] != self.n_steps:
            steps = np.append(steps, self.n_steps)
        return steps

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "dt": self.dt,
            "n_steps": int(self.n_steps),
            "kernel": self.kernel.describe(),
            "F_hash": stable_hash(self.F.values.tolist()),
            "scheme": self.scheme,
            "n_iter": int(self.n_iter),
            "laplacian": bool(self.laplacian),
            "save_every": int(self.save_every),
        }

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def make_noise(self, seed: int, stream_id: int = 0) -> NoiseField:
        return sample_noise(self.n_steps, self.dt, self.kernel.level, seed, stream_id)

    def heat(self, mode: str = "implicit") -> Callable[[np.ndarray], np.ndarray]:
        if not self.laplacian:
            return lambda v: v
        return HeatOperator(self.grid, self.dt, mode=mode).apply


class _Diagnostics:
    """Running per-replica diagnostics over every time step, not only saved ones."""

    FIELDS = ("sup_norm0_sq", "negativity", "excess_over_one", "monotone_violation", "edge_slope")

    def __init__(self, spec: GridSpec, batch: tuple = ()):
        self.spec = spec
        self.w = Weight.exponential(spec)
        self.sup_norm0_sq = np.zeros(batch)
        self.negativity = np.zeros(batch)
        self.excess_over_one = np.zeros(batch)
        self.monotone_violation = np.zeros(batch)
        self.edge_slope = np.zeros(batch)

    def update(self, u: np.ndarray):
        self.sup_norm0_sq = np.maximum(self.sup_norm0_sq, norm0_batch(u, self.spec, self.w) ** 2)
        self.negativity = np.maximum(self.negativity, np.maximum(-u.min(axis=-1), 0.0))
        self.excess_over_one = np.maximum(self.excess_over_one, np.maximum(u.max(axis=-1) - 1.0, 0.0))
        dec = np.maximum(-np.diff(u, axis=-1).min(axis=-1), 0.0)
        self.monotone_violation = np.maximum(self.monotone_violation, dec)
        slope = np.maximum(np.abs(u[..., 1] - u[..., 0]), np.abs(u[..., -1] - u[..., -2])) / self.spec.dx
        self.edge_slope = np.maximum(self.edge_slope, slope)

    def summary(self) -> dict:
        out = {}
        for k in self.FIELDS:
            v = getattr(self, k)
            out[k] = float(v) if np.ndim(v) == 0 else v.copy()
        out["range_violation"] = (
            max(out["negativity"], out["excess_over_one"])
            if np.ndim(self.negativity) == 0
            else np.maximum(out["negativity"], out["excess_over_one"])
        )
        return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    spec: GridSpec
    steps: np.ndarray
    times: np.ndarray
    states: np.ndarray = field(repr=False)
    config: dict
    noise_manifest: dict
    diagnostics: dict
    picard_diagnostics: list | None = None

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != self.spec.n_points or len(states) != len(self.times):
            raise ValueError("states must be (n_saved, n_points) and aligned with times")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    @property
    def n_saved(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.config["dt"])

    @property
    def noise_digest(self) -> str:
        return self.noise_manifest.get("digest", "")

    def state(self, i: int) -> GridFunction:
        return GridFunction(self.spec, self.states[i])

    @property
    def final(self) -> GridFunction:
        return self.state(-1)

    def manifest(self) -> dict:
        return {
            "grid": self.spec.to_dict(),
            "steps": self.steps.tolist(),
            "times": self.times.tolist(),
            "config": self.config,
            "config_hash": stable_hash(self.config),
            "noise": self.noise_manifest,
            "diagnostics": self.diagnostics,
            "picard_diagnostics": self.picard_diagnostics,
            "files": [f"state_{i:05d}.csv" for i in range(self.n_saved)],
        }

    def write(self, out_dir) -> list[Path]:
        """One CSV per saved state plus ``manifest.json``; returns the files written."""
        out_dir = Path(out_dir)
        files = []
        x = self.spec.points
        for i in range(self.n_saved):
            p = out_dir / f"state_{i:05d}.csv"
            write_csv(p, x, self.states[i], header=("x", "value"))
            files.append(p)
        files.append(write_json(out_dir / "manifest.json", self.manifest()))
        return files

    @classmethod
    def load(cls, out_dir) -> "Trajectory":
        import json

        out_dir = Path(out_dir)
        m = json.loads((out_dir / "manifest.json").read_text())
        spec = GridSpec(**m["grid"])
        states = np.array([read_csv(out_dir / f)[1] for f in m["files"]])
        return cls(
            spec,
            np.array(m["steps"]),
            np.array(m["times"]),
            states,
            m["config"],
            m["noise"],
            m["diagnostics"],
            m.get("picard_diagnostics"),
        )


def _check_noise(config: SolverConfig, noise: NoiseField):
    if noise.n_steps != config.n_steps:
        raise ValueError(f"noise has {noise.n_steps} steps, config needs {config.n_steps}")
    if not np.isclose(noise.dt, config.dt, rtol=1e-12, atol=0):
        raise ValueError(f"noise dt {noise.dt} != config dt {config.dt}")
    if noise.level != config.kernel.level:
        raise ValueError("noise level space does not match the kernel's")


def _divergence_guard(u: np.ndarray, step: int, bound: float):
    if not np.all(np.isfinite(u)):
        raise SolverDivergenceError(f"non-finite values at step {step}")
    if np.abs(u).max() > bound:
        raise SolverDivergenceError(f"|u| exceeded {bound:.3g} at step {step}")


def step_mild_euler(u: GridFunction, noise_slice, kernel: CoefficientKernel, dt: float, laplacian: bool = True):
    """One Lie-split step: inject ``N(u)``, then take the implicit heat step."""
    xi = np.asarray(noise_slice, dtype=float)
    if xi.shape != (kernel.level.n_levels,):
        raise ValueError(f"noise slice has shape {xi.shape}, kernel expects ({kernel.level.n_levels},)")
    v = u.values + kernel.noise_term(u.values, xi, u.spec.points)
    if laplacian:
        v = HeatOperator(u.spec, dt).apply(v)
    return GridFunction(u.spec, v)


def solve(config: SolverConfig, noise: NoiseField) -> Trajectory:
    """Mild-Euler (or Picard, per ``config.scheme``) solution driven by ``noise``."""
    if config.scheme == "picard":
        return solve_picard(config, noise)
    _check_noise(config, noise)
    heat = config.heat()
    y = config.grid.points
    bound = 1e6 * (1.0 + np.abs(config.F.values).max())
    saved = set(config.saved_steps().tolist())
    diag = _Diagnostics(config.grid)
    u = np.array(config.F.values)
    diag.update(u)
    states = [u.copy()]
    for n in range(config.n_steps):
        try:
            u = heat(u + config.kernel.noise_term(u, noise.increments[n], y))
        except LevelBandError as exc:
            raise LevelBandError(f"step {n}: {exc}") from None
        _divergence_guard(u, n + 1, bound)
        diag.update(u)
        if n + 1 in saved:
            states.append(u.copy())
    steps = config.saved_steps()
    return Trajectory(
        config.grid,
        steps,
        steps * config.dt,
        np.array(states),
        config.to_dict(),
        noise.manifest(),
        diag.summary(),
    )


def solve_picard(config: SolverConfig, noise: NoiseField) -> Trajectory:
    """Picard iterates ``u^{k+1}_t = T_t F + Σ_s T_{t-s} N(u^k_s)`` on the same noise.

    The discrete stochastic convolution is accumulated as
    ``v_{n+1} = T_dt (v_n + N(u^k_n; ξ_n))`` with the grid semigroup
    ``T_dt = exp((dt/2) D₂)``, so ``v_n = T_{n dt} F + Σ_{m<n} T_{(n-m) dt} N_m``
    holds exactly on the grid.  ``u^0 ≡ F``.  The
    trajectory records ``sup_t ‖u^{k+1}_t - u^k_t‖₀`` for every iteration.
    """
    _check_noise(config, noise)
    heat = config.heat(mode="spectral")
    y = config.grid.points
    ns = config.n_steps
    w = Weight.exponential(config.grid)
    prev = np.tile(config.F.values, (ns + 1, 1))
    contraction = []
    for k in range(config.n_iter):
        new = np.empty_like(prev)
        new[0] = config.F.values
        for n in range(ns):
            try:
                new[n + 1] = heat(new[n] + config.kernel.noise_term(prev[n], noise.increments[n], y))
            except LevelBandError as exc:
                raise LevelBandError(f"iteration {k + 1}, step {n}: {exc}") from None
        _divergence_guard(new, ns, 1e6 * (1.0 + np.abs(config.F.values).max()))
        contraction.append(float(norm0_batch(new - prev, config.grid, w).max()))
        prev = new
    grew = [k for k in range(3, len(contraction)) if contraction[k] >= contraction[k - 1] > 0]
    if grew:
        warnings.warn(
            f"Picard diagnostic did not decrease at iteration(s) {[k + 1 for k in grew]}: "
            + ", ".join(f"{c:.3g}" for c in contraction),
            PicardContractionWarning,
            stacklevel=2,
        )
    diag = _Diagnostics(config.grid)
    for row in prev:
        diag.update(row)
    steps = config.saved_steps()
    return Trajectory(
        config.grid,
        steps,
        steps * config.dt,
        prev[steps],
        config.to_dict(),
        noise.manifest(),
        diag.summary(),
        picard_diagnostics=contraction,
    )


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Saved states of independent replicas: ``states[replica, saved_index, point]``."""

    spec: GridSpec
    times: np.ndarray
    states: np.ndarray
    stream_ids: np.ndarray
    seed: int
    diagnostics: dict

    def at(self, t: float, y) -> np.ndarray:
        """Values ``u_t(y)`` across replicas, shape ``(R,)`` or ``(R, len(y))``."""
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, atol=1e-9):
            raise ValueError(f"t={t} is not a saved time")
        x = self.spec.points
        y = np.asarray(y, dtype=float)
        vals = np.array([np.interp(y, x, s) for s in self.states[:, i]])
        return vals


def solve_ensemble(config: SolverConfig, seed: int, stream_ids, chunk: int = 8) -> Ensemble:
    """Mild-Euler replicas on the noise fields ``sample_noise(..., seed, stream_id)``.

    Replicas are advanced together in chunks; each replica's result is
    identical to ``solve(config, config.make_noise(seed, stream_id))``.
    """
    if config.scheme != "mild-euler":
        raise ValueError("ensembles use the mild-Euler scheme")
    stream_ids = np.asarray(list(stream_ids), dtype=np.int64)
    heat = config.heat()
    y = config.grid.points
    steps = config.saved_steps()
    saved = {s: i for i, s in enumerate(steps)}
    out = np.empty((len(stream_ids), len(steps), config.grid.n_points))
    diag = _Diagnostics(config.grid, (len(stream_ids),))
    bound = 1e6 * (1.0 + np.abs(config.F.values).max())
    for c0 in range(0, len(stream_ids), chunk):
        ids = stream_ids[c0 : c0 + chunk]
        xi = np.stack([config.make_noise(seed, int(s)).increments for s in ids])
        u = np.tile(config.F.values, (len(ids), 1))
        sub = _Diagnostics(config.grid, (len(ids),))
        sub.update(u)
        out[c0 : c0 + len(ids), 0] = u
        for n in range(config.n_steps):
            try:
                u = heat(u + config.kernel.noise_term(u, xi[:, n], y))
            except LevelBandError as exc:
                raise LevelBandError(f"replicas {ids.tolist()}, step {n}: {exc}") from None
            _divergence_guard(u, n + 1, bound)
            sub.update(u)
            if n + 1 in saved:
                out[c0 : c0 + len(ids), saved[n + 1]] = u
        for k in _Diagnostics.FIELDS:
            getattr(diag, k)[c0 : c0 + len(ids)] = getattr(sub, k)
    return Ensemble(config.grid, steps * config.dt, out, stream_ids, int(seed), diag.summary())


# -- weak form -----------------------------------------------------------------


def neumann_second_difference(values: np.ndarray, dx: float) -> np.ndarray:
    """``D₂`` with ghost-point Neumann rows, the operator inside the implicit step."""
    v = np.asarray(values, dtype=float)
    out = np.empty_like(v)
    out[..., 1:-1] = v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]
    out[..., 0] = 2.0 * (v[..., 1] - v[..., 0])
    out[..., -1] = 2.0 * (v[..., -2] - v[..., -1])
    return out / dx**2


@dataclass(frozen=True)
class WeakResidual:
    per_step: np.ndarray
    max_abs: float


def weak_form_residual(
    traj: Trajectory,
    f: GridFunction,
    noise: NoiseField,
    kernel: CoefficientKernel,
    edge_tol: float = 1e-10,
) -> WeakResidual:
    """Residual of the weak form along a trajectory saved at every step.

    ``R_n = ⟨u_n - F, f⟩ - Σ_{m<n} [dt ⟨u_m, ½ D₂ f⟩ + ⟨N(u_m; ξ_m), f⟩]`` with
    left-point Riemann sums.  The noise row ``m`` is applied to ``u_m``, so a
    trajectory checked against a different noise stream leaves the whole
    stochastic integral in the residual.
    """
    if f.spec != traj.spec:
        raise ValueError("test function and trajectory live on different grids")
    scale = max(np.abs(f.values).max(), 1e-300)
    if max(np.abs(f.values[:2]).max(), np.abs(f.values[-2:]).max()) > edge_tol * scale:
        raise ValueError("test function must vanish near the domain boundary")
    steps = np.asarray(traj.steps)
    if not np.array_equal(steps, np.arange(len(steps))):
        raise ValueError("weak-form residual needs every step saved (save_every=1)")
    n_steps = len(steps) - 1
    if noise.n_steps != n_steps:
        raise ValueError("noise length does not match the trajectory")
    dt = traj.dt
    spec = traj.spec
    u = traj.states
    lap_f = 0.5 * neumann_second_difference(f.values, spec.dx)
    drift = dt * plain_inner(u[:-1], lap_f, spec)
    stoch = plain_inner(kernel.noise_term(u[:-1], noise.increments, spec.points), f.values, spec)
    lhs = plain_inner(u - u[0], f.values, spec)
    res = lhs - np.concatenate([[0.0], np.cumsum(drift + stoch)])
    return WeakResidual(res, float(np.abs(res).max()))
