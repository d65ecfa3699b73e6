"""Uniform spatial grids, grid functions and the weighted spaces X0 / X1.

The real line is truncated to ``[x_min, x_max]``; with the ``e^{-|x|}`` weight
the tail contribution of any bounded function is of order ``e^{-x_max}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np


class GridMismatchError(ValueError):
    """Raised when two objects that must share a grid do not."""


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -8.0
    x_max: float = 8.0
    n_cells: int = 256

    def __post_init__(self):
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min={self.x_min} must be < x_max={self.x_max}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ValueError(f"n_cells must be an integer >= 2, got {self.n_cells}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def n_points(self) -> int:
        return self.n_cells + 1

    @property
    def points(self) -> np.ndarray:
        return _points(self.x_min, self.x_max, self.n_cells)

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_points, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.n_cells * factor)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "n_cells": self.n_cells}


@lru_cache(maxsize=64)
def _points(x_min, x_max, n_cells):
    pts = x_min + np.arange(n_cells + 1) * ((x_max - x_min) / n_cells)
    pts[-1] = x_max
    pts.flags.writeable = False
    return pts


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values sampled at every point of a :class:`GridSpec`."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.spec.n_points,):
            raise ValueError(
                f"expected {self.spec.n_points} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, spec: GridSpec, fn: Callable[[np.ndarray], np.ndarray]):
        return cls(spec, np.broadcast_to(fn(spec.points), (spec.n_points,)))

    @classmethod
    def constant(cls, spec: GridSpec, c: float = 1.0):
        return cls(spec, np.full(spec.n_points, float(c)))

    @property
    def x(self) -> np.ndarray:
        return self.spec.points

    def __call__(self, y):
        """Piecewise-linear evaluation, constant extrapolation outside the grid."""
        return np.interp(y, self.spec.points, self.values)

    def derivative(self) -> "GridFunction":
        return GridFunction(self.spec, differentiate(self.values, self.spec.dx))

    def to_csv(self, path) -> None:
        write_csv(path, self.spec.points, self.values, header=("x", "value"))

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        x, v = read_csv(path)
        n = len(x) - 1
        spec = GridSpec(float(x[0]), float(x[-1]), n)
        if not np.allclose(x, spec.points, rtol=0, atol=1e-12 * max(1.0, abs(x).max())):
            raise ValueError(f"{path}: abscissae are not a uniform grid")
        return cls(spec, v)


def differentiate(values: np.ndarray, dx: float) -> np.ndarray:
    """Second-order central differences, second-order one-sided at the ends."""
    return np.gradient(values, dx, axis=-1, edge_order=2)


def write_csv(path, *cols, header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([format(float(v), ".17g") for v in row])
    return path


def read_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


# -- weights -----------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


def _gauss_legendre(fn, a, b):
    half = 0.5 * (b - a)
    nodes = 0.5 * (a + b) + half * _GL_NODES
    return half * np.sum(_GL_WEIGHTS * fn(nodes))


# ∫ρ = 1; computed once, panels split at 0 where exp(-1/(1-x^2)) is most curved
MOLLIFIER_CONSTANT = 1.0 / (_gauss_legendre(_bump, -1.0, 0.0) + _gauss_legendre(_bump, 0.0, 1.0))


def mollifier(x):
    return MOLLIFIER_CONSTANT * _bump(x)


def _weight_j_scalar(x: float) -> float:
    integrand = lambda y: np.exp(-np.abs(y)) * mollifier(x - y)
    lo, hi = x - 1.0, x + 1.0
    if lo < 0.0 < hi:
        # the kink of e^{-|y|} at 0 would spoil Gauss-Legendre accuracy
        return _gauss_legendre(integrand, lo, 0.0) + _gauss_legendre(integrand, 0.0, hi)
    return _gauss_legendre(integrand, lo, hi)


def weight_j(x):
    """Mollified weight ``J(x) = ∫ e^{-|y|} ρ(x-y) dy``."""
    if np.ndim(x) == 0:
        if not np.isfinite(x):
            raise ValueError("x must be finite")
        return float(_weight_j_scalar(float(x)))
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return np.array([_weight_j_scalar(v) for v in x.ravel()]).reshape(x.shape)


def j_bounds(x_lo: float = -10.0, x_hi: float = 10.0, n: int = 2001) -> tuple[float, float]:
    """Scan ``J(x) e^{|x|}`` and return ``(c_0, C_0)`` with ``c_0 e^{-|x|} <= J <= C_0 e^{-|x|}``."""
    xs = np.linspace(x_lo, x_hi, n)
    ratio = weight_j(xs) * np.exp(np.abs(xs))
    return float(ratio.min()), float(ratio.max())


@dataclass(frozen=True, eq=False)
class Weight:
    spec: GridSpec
    kind: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in ("exponential", "mollified"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        values = np.array(self.values, dtype=float)
        if values.shape != (self.spec.n_points,) or not np.all(values > 0):
            raise ValueError("weight must be strictly positive on every grid point")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def exponential(cls, spec: GridSpec) -> "Weight":
        return _exp_weight(spec)

    @classmethod
    def mollified(cls, spec: GridSpec) -> "Weight":
        return _j_weight(spec)


@lru_cache(maxsize=32)
def _exp_weight(spec):
    return Weight(spec, "exponential", np.exp(-np.abs(spec.points)))


@lru_cache(maxsize=32)
def _j_weight(spec):
    return Weight(spec, "mollified", weight_j(spec.points))


# -- norms -------------------------------------------------------------------


def _check_same(spec_a: GridSpec, spec_b: GridSpec):
    if spec_a != spec_b:
        raise GridMismatchError(f"grid mismatch: {spec_a} vs {spec_b}")


def _weighted_sum(spec: GridSpec, integrand: np.ndarray, w: Weight | None) -> float:
    if w is None:
        w = Weight.exponential(spec)
    _check_same(spec, w.spec)
    return float(np.sum(integrand * w.values * spec.trapezoid_weights))


def inner0(f: GridFunction, g: GridFunction, w: Weight | None = None) -> float:
    """Weighted L2 inner product, trapezoid rule; default weight ``e^{-|x|}``."""
    _check_same(f.spec, g.spec)
    return _weighted_sum(f.spec, f.values * g.values, w)


def norm0(f: GridFunction, w: Weight | None = None) -> float:
    return float(np.sqrt(_weighted_sum(f.spec, f.values**2, w)))


def norm1(f: GridFunction, w: Weight | None = None) -> float:
    df = differentiate(f.values, f.spec.dx)
    return float(np.sqrt(_weighted_sum(f.spec, f.values**2 + df**2, w)))


def norm0_batch(values: np.ndarray, spec: GridSpec, w: Weight | None = None) -> np.ndarray:
    """``norm0`` along the last axis of a stacked array of grid values."""
    if w is None:
        w = Weight.exponential(spec)
    _check_same(spec, w.spec)
    return np.sqrt(np.sum(values**2 * (w.values * spec.trapezoid_weights), axis=-1))


def plain_inner(f: np.ndarray, g: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Unweighted ``⟨f, g⟩ = ∫ f g dx`` along the last axis (trapezoid)."""
    return np.sum(f * g * spec.trapezoid_weights, axis=-1)
