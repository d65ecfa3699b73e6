"""Backward doubly stochastic differential equations by regression Monte Carlo.

``Y_s = F(X_T) + ∫_s^T ∫_U G(a, X_r, Y_r) W~(d^r da) - ∫_s^T Z_r dB_r`` where the
``W~`` integral is a backward Itô integral (right endpoints) and ``dB`` is
the forward Brownian integral (left endpoints).  ``W~`` does not depend on
space, so the same noise row acts on every Monte Carlo path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .grid import GridFunction, differentiate, norm1
from .noise import NoiseField, standard_normals
from .spde import CoefficientKernel, Trajectory

__all__ = [
    "BdsdePath",
    "ForwardPath",
    "RankDeficientError",
    "RepresentationReport",
    "check_representation",
    "ipp_residual",
    "polynomial_basis",
    "simulate_forward",
    "solve_bdsde",
]


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class ForwardPath:
    """Ensemble of ``X^{t,y}_s = y + B_s - B_t`` on the knots ``t + j dt``."""

    t: float
    y: float
    dt: float
    dB: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    seed: int = 0
    stream_id: int = 1

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t + self.dt * np.arange(self.n_steps + 1)


def simulate_forward(
    t: float, y: float, dt: float, n_steps: int, seed: int, n_paths: int = 10_000, stream_id: int = 1
) -> ForwardPath:
    """Brownian increments from the counter-based stream ``(seed, stream_id)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_steps = int(n_steps)
    z = standard_normals(seed, stream_id, 0, n_paths * n_steps).reshape(n_paths, n_steps)
    dB = z * np.sqrt(dt)
    X = np.empty((n_paths, n_steps + 1))
    X[:, 0] = y
    np.cumsum(dB, axis=1, out=X[:, 1:])
    X[:, 1:] += y
    dB.flags.writeable = False
    X.flags.writeable = False
    return ForwardPath(float(t), float(y), float(dt), dB, X, int(seed), int(stream_id))


def polynomial_basis(x: np.ndarray, degree: int = 3) -> np.ndarray:
    """Monomials ``1, x~, ..., x~^degree`` of the standardized sample."""
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if sd == 0:
        return np.ones((len(x), 1))
    xs = (x - x.mean()) / sd
    return np.vander(xs, degree + 1, increasing=True)


@dataclass(frozen=True, eq=False)
class BdsdePath:
    times: np.ndarray
    X: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)
    basis: str = "poly3"
    diagnostics: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "basis": self.basis,
            "n_paths": int(self.Y.shape[0]),
            "n_knots": int(self.Y.shape[1]),
            "Y0_mean": float(self.Y[:, 0].mean()),
            **self.diagnostics,
        }


def solve_bdsde(
    F: Callable,
    G: CoefficientKernel,
    tilde_noise: NoiseField,
    forward: ForwardPath,
    degree: int = 3,
) -> BdsdePath:
    """Backward regression from ``Y_T = F(X_T)``.

    At each knot the target ``Q = Y_{s+dt} + N(Y_{s+dt}; ξ~_s)`` (right endpoint)
    is regressed jointly on ``[P(X_s), P(X_s) ΔB_s]`` so that ``Q ≈ Pα + (Pβ)ΔB``;
    then ``Y_s = Pα`` is the conditional mean and ``Z_s = Pβ`` estimates
    ``E[Q ΔB_s | X_s] / dt``.
    """
    if (tilde_noise.seed, tilde_noise.stream_id) == (forward.seed, forward.stream_id):
        raise ValueError("the backward noise must use a stream distinct from the forward Brownian motion")
    if tilde_noise.n_steps != forward.n_steps or not np.isclose(tilde_noise.dt, forward.dt, rtol=1e-12):
        raise ValueError("backward noise and forward paths use different time grids")
    if tilde_noise.level != G.level:
        raise ValueError("backward noise level space does not match the kernel's")
    n_paths, n_knots = forward.X.shape
    Y = np.empty((n_paths, n_knots))
    Z = np.full((n_paths, n_knots), np.nan)
    xi = np.asarray(F(forward.X[:, -1]), dtype=float)
    Y[:, -1] = xi
    for j in range(forward.n_steps - 1, -1, -1):
        x = forward.X[:, j]
        y_next = Y[:, j + 1]
        q = y_next + G.noise_term(y_next[None, :], tilde_noise.increments[j], forward.X[None, :, j + 1])[0]
        P = polynomial_basis(x, degree)
        dB = forward.dB[:, j]
        design = np.hstack([P, P * dB[:, None]])
        coef, _, rank, _ = np.linalg.lstsq(design, q, rcond=None)
        if rank < design.shape[1]:
            raise RankDeficientError(f"regression at knot {j} has rank {rank} < {design.shape[1]}; use more paths")
        m = P.shape[1]
        Y[:, j] = P @ coef[:m]
        Z[:, j] = P @ coef[m:]
    dt = forward.dt
    diag = {"E_int_Z2": float(np.mean(np.sum(Z[:, :-1] ** 2, axis=1) * dt))}
    return BdsdePath(forward.times, forward.X, Y, Z, xi, f"poly{degree}", diag)


# -- Itô-Pardoux-Peng formula -------------------------------------------------------


def ipp_residual(
    f: Callable,
    df: Callable,
    d2f: Callable,
    alpha: np.ndarray,
    z,
    xi,
    tilde_noise,
    dB: np.ndarray,
) -> dict:
    """Residual of the Itô-Pardoux-Peng formula on simulated paths.

    ``y`` is built backward from ``y_T = ξ`` as
    ``y_j = y_{j+1} + Σ_a α(s_{j+1}, a) ξ~_{j,a} - z_j ΔB_j``.  Backward terms use
    the right endpoint ``y_{j+1}``, forward terms the left endpoint ``y_j``:

    ``f(y_t) = f(ξ) + Σ f'(y_{j+1}) A_j - Σ z_j f'(y_j) ΔB_j
    + ½ Σ f''(y_{j+1}) ‖α‖² dt - ½ Σ z_j² f''(y_j) dt``.

    ``alpha`` has shape ``(n_steps, n_cells)``, ``z`` is a scalar or
    ``(n_paths, n_steps)``.  ``tilde_noise`` is one field shared by all paths or
    a sequence with one independent field per path.  Returns the RMS residual over paths and the RMS of
    ``f(y_t)`` as the scale.
    """
    dB = np.asarray(dB, dtype=float)
    n_paths, n_steps = dB.shape
    fields = [tilde_noise] if isinstance(tilde_noise, NoiseField) else list(tilde_noise)
    if len(fields) not in (1, n_paths):
        raise ValueError("give one noise field or one per path")
    first = fields[0]
    if any(f.n_steps != n_steps or f.level != first.level or f.dt != first.dt for f in fields):
        raise ValueError("noise and Brownian increments have different step counts")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (n_steps, first.n_cells))
    dt = first.dt
    w = 1.0 if first.level.kind == "index" else first.level.da
    incr = np.stack([f.increments for f in fields])
    A = np.broadcast_to(np.sum(alpha * incr, axis=2), (n_paths, n_steps))
    a2 = np.sum(alpha**2, axis=1) * w
    z = np.broadcast_to(np.asarray(z, dtype=float), (n_paths, n_steps))
    y = np.empty((n_paths, n_steps + 1))
    y[:, -1] = xi
    for j in range(n_steps - 1, -1, -1):
        y[:, j] = y[:, j + 1] + A[:, j] - z[:, j] * dB[:, j]
    right = y[:, 1:]
    left = y[:, :-1]
    rhs = (
        f(y[:, -1])
        + np.sum(df(right) * A, axis=1)
        - np.sum(z * df(left) * dB, axis=1)
        + 0.5 * np.sum(d2f(right) * a2 * dt, axis=1)
        - 0.5 * np.sum(z**2 * d2f(left) * dt, axis=1)
    )
    lhs = f(y[:, 0])
    res = lhs - rhs
    rms = float(np.sqrt(np.mean(res**2)))
    scale = float(np.sqrt(np.mean(lhs**2)))
    return {"rms": rms, "scale": scale, "relative": rms / scale if scale > 0 else np.inf, "dt": dt}


# -- SPDE representation ---------------------------------------------------------------


@dataclass
class RepresentationReport:
    t: float
    y: float
    n_paths: int
    mode: str
    u_tilde_ty: float
    residual_rms: float
    residual_mean: float
    terminal_scale: float
    relative_residual: float
    gap: float
    relative_gap: float
    norm1_integral: float
    solve_gap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def check_representation(
    traj: Trajectory,
    t: float,
    y: float,
    kernel: CoefficientKernel,
    tilde_noise: NoiseField,
    n_paths: int = 2000,
    seed: int = 0,
    stream_id: int = 7,
    mode: str = "residual",
) -> RepresentationReport:
    """Check that ``Y_s = ũ_s(X_s)``, ``Z_s = ∇ũ_s(X_s)`` solves the BDSDE.

    ``ũ_j = u_{n-j}`` is the time-reversed trajectory and ``tilde_noise`` must be
    the row-reversed noise that drove it.  In ``residual`` mode the BDSDE
    identity is evaluated on the candidate pair:

    ``D = ũ_t(y) - [F(X_T) + Σ_j N(ũ_{j+1}(X_{j+1}); ξ~_j) - Σ_j ∇ũ_j(X_j) ΔB_j]``.

    ``gap`` compares ``ũ_t(y)`` with the path average of
    ``F(X_T) + Σ_j N_j``; with no noise kernel this is Feynman-Kac.  In ``solve``
    mode the BDSDE is also solved by regression and ``solve_gap`` is
    ``|ũ_t(y) - Y_t|``.
    """
    if tilde_noise.reversed_from != traj.noise_digest or not traj.noise_digest:
        raise ValueError("backward noise is not the time reversal of the trajectory's noise")
    steps = np.asarray(traj.steps)
    if not np.array_equal(steps, np.arange(len(steps))):
        raise ValueError("representation check needs every step saved")
    ns = len(steps) - 1
    dt = traj.dt
    j0 = int(round(t / dt))
    if not 0 <= j0 < ns or not np.isclose(j0 * dt, t, atol=1e-9):
        raise ValueError("t must be a time knot strictly before T")
    spec = traj.spec
    x = spec.points
    u_tilde = traj.states[::-1]
    grads = differentiate(u_tilde, spec.dx)
    fwd = simulate_forward(t, y, dt, ns - j0, seed, n_paths, stream_id)
    X = fwd.X
    acc_noise = np.zeros(n_paths)
    acc_z = np.zeros(n_paths)
    for j in range(j0, ns):
        k = j - j0
        z_val = np.interp(X[:, k], x, grads[j])
        y_next = np.interp(X[:, k + 1], x, u_tilde[j + 1])
        acc_noise += kernel.noise_term(y_next[None, :], tilde_noise.increments[j], X[None, :, k + 1])[0]
        acc_z += z_val * fwd.dB[:, k]
    F_T = np.interp(X[:, -1], x, u_tilde[-1])
    u0 = float(np.interp(y, x, u_tilde[j0]))
    D = u0 - (F_T + acc_noise - acc_z)
    scale = float(np.abs(u_tilde[-1]).max())
    gap = abs(u0 - float(np.mean(F_T + acc_noise)))
    n1 = float(dt * sum(norm1(GridFunction(spec, s)) ** 2 for s in u_tilde[:-1]))
    rep = RepresentationReport(
        float(t),
        float(y),
        int(n_paths),
        mode,
        u0,
        float(np.sqrt(np.mean(D**2))),
        float(np.mean(D)),
        scale,
        float(np.sqrt(np.mean(D**2)) / scale),
        gap,
        gap / scale,
        n1,
    )
    if mode == "solve":
        sub = NoiseField(
            ns - j0,
            tilde_noise.dt,
            tilde_noise.level,
            tilde_noise.increments[j0:],
            tilde_noise.seed,
            tilde_noise.stream_id,
            tilde_noise.transform + (("slice", j0, tilde_noise.digest),),
        )
        terminal = lambda v: np.interp(v, x, u_tilde[-1])
        path = solve_bdsde(terminal, kernel, sub, fwd)
        rep.solve_gap = abs(u0 - float(path.Y[:, 0].mean()))
    elif mode != "residual":
        raise ValueError("mode must be 'residual' or 'solve'")
    return rep
