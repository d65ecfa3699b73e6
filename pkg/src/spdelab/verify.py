"""Checks of the structural claims: martingale problems, Yamada-Watanabe
functions, coupling under shared noise, law comparison and regularity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, stats

from .grid import GridSpec, plain_inner
from .particles import ParticlePath
from .spde import Trajectory

__all__ = [
    "LawReport",
    "MpReport",
    "NoiseMismatchError",
    "TestFunction",
    "YwConstructionError",
    "YwFamily",
    "aligned_text",
    "coupling_gap",
    "holder_modulus",
    "law_distance",
    "moment_bound",
    "mp_check_ensemble",
    "mp_check_fv",
    "mp_check_sbm",
    "yw_a",
    "yw_phi",
    "yw_psi",
    "yw_suite",
]


class NoiseMismatchError(ValueError):
    """Two trajectories compared for coupling were not driven by the same noise."""


class YwConstructionError(ValueError):
    pass


def aligned_text(rows: Sequence[Sequence], header: Sequence[str] | None = None) -> str:
    """Left-aligned columns separated by two spaces."""
    table = [list(map(_fmt, r)) for r in ([header] if header else []) + list(rows)]
    if not table:
        return ""
    widths = [max(len(r[i]) for r in table if i < len(r)) for i in range(max(map(len, table)))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


# -- test functions ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A smooth test function with its first three derivatives."""

    __test__ = False  # not a pytest class

    name: str
    f: Callable
    d1: Callable
    d2: Callable
    d3: Callable
    constant: bool = False

    @classmethod
    def gaussian_bump(cls, center: float = 0.0, width: float = 1.0) -> "TestFunction":
        def z(x):
            return (np.asarray(x, dtype=float) - center) / width

        def f(x):
            return np.exp(-0.5 * z(x) ** 2)

        return cls(
            f"bump(c={center:g},w={width:g})",
            f,
            lambda x: -z(x) / width * f(x),
            lambda x: (z(x) ** 2 - 1.0) / width**2 * f(x),
            lambda x: (3.0 * z(x) - z(x) ** 3) / width**3 * f(x),
        )

    @classmethod
    def one(cls) -> "TestFunction":
        zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
        return cls("one", lambda x: np.ones_like(np.asarray(x, dtype=float)), zero, zero, zero, constant=True)

    def check_boundary(self, x_min: float, x_max: float, tol: float = 1e-10):
        if self.constant:
            return
        scale = max(float(np.max(np.abs(self.f(np.linspace(x_min, x_max, 2001))))), 1e-300)
        edge = max(abs(float(self.f(x_min))), abs(float(self.f(x_max))))
        if edge > tol * scale:
            raise ValueError(f"test function {self.name} does not vanish at the boundary ({edge:.3g})")


# -- martingale problems -----------------------------------------------------------


@dataclass
class MpReport:
    test_function: str
    model: str
    times: np.ndarray
    increments: np.ndarray
    realized_qv: float
    predicted_qv: float
    ratio: float
    z_scores: np.ndarray
    mean_z: float
    model_mismatch: bool
    degenerate: bool
    tolerance: float = 0.15
    passed: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("times", "increments", "z_scores"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    def to_text(self) -> str:
        rows = [
            ("test function", self.test_function),
            ("model", self.model),
            ("realized QV", self.realized_qv),
            ("predicted QV", self.predicted_qv),
            ("ratio", self.ratio),
            ("mean z", self.mean_z),
            ("model mismatch", self.model_mismatch),
            ("passed", self.passed),
        ]
        rows += [(k, v) for k, v in self.extra.items() if np.ndim(v) == 0]
        return aligned_text(rows)


def _functionals_from_particles(path: ParticlePath, tf: TestFunction, domain):
    tf.check_boundary(*domain)
    mu_f = path.integrals(tf.f)
    mu_d2 = path.integrals(lambda x: 0.5 * tf.d2(x))
    mu_f2 = path.integrals(lambda x: tf.f(x) ** 2)
    mass = path.total_mass()
    return path.times, mu_f, mu_d2, mu_f2, mass


def _functionals_from_trajectory(traj: Trajectory, tf: TestFunction):
    """``μ_s(g) = [u g] - ⟨u, g'⟩`` by parts, for the distribution function ``u``."""
    spec = traj.spec
    tf.check_boundary(spec.x_min, spec.x_max)
    x = spec.points
    u = traj.states

    def mu(g, dg):
        gx, dgx = g(x), dg(x)
        return u[:, -1] * gx[-1] - u[:, 0] * gx[0] - plain_inner(u, dgx, spec)

    mu_f = mu(tf.f, tf.d1)
    mu_d2 = mu(lambda y: 0.5 * tf.d2(y), lambda y: 0.5 * tf.d3(y))
    mu_f2 = mu(lambda y: tf.f(y) ** 2, lambda y: 2.0 * tf.f(y) * tf.d1(y))
    mass = u[:, -1] - u[:, 0]
    return traj.times, mu_f, mu_d2, mu_f2, mass


def _mp_report(model, tf, times, mu_f, mu_d2, predicted_rate, tolerance):
    dt = np.diff(times)
    dm = np.diff(mu_f) - mu_d2[:-1] * dt
    pred_inc = np.maximum(predicted_rate[:-1], 0.0) * dt
    realized = float(np.sum(dm**2))
    predicted = float(np.sum(pred_inc))
    scale = max(realized, predicted, 1e-300)
    degenerate = predicted <= 1e-14 * max(1.0, scale)
    if degenerate:
        ratio = 1.0 if realized <= 1e-24 else math.inf
        z = np.zeros_like(dm)
    else:
        ratio = realized / predicted
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(pred_inc > 0, dm / np.sqrt(pred_inc), 0.0)
    mismatch = degenerate and realized > 1e-24
    passed = (not mismatch) and abs(ratio - 1.0) <= tolerance
    return MpReport(
        tf.name, model, times, dm, realized, predicted, ratio, z, float(np.mean(z)), mismatch, degenerate, tolerance, passed
    )


def mp_check_sbm(path, tf: TestFunction, domain=(-8.0, 8.0), tolerance: float = 0.1) -> MpReport:
    """``M^f = μ_t(f) - μ_0(f) - ∫ μ_s(½f'') ds`` with ``⟨M^f⟩ = ∫ μ_s(f²) ds``.

    Left-point sums over the recorded times.  ``path`` is a particle path or an
    SPDE trajectory (distribution function states).
    """
    if isinstance(path, Trajectory):
        times, mu_f, mu_d2, mu_f2, _ = _functionals_from_trajectory(path, tf)
    else:
        times, mu_f, mu_d2, mu_f2, _ = _functionals_from_particles(path, tf, domain)
    return _mp_report("sbm", tf, times, mu_f, mu_d2, mu_f2, tolerance)


def mp_check_fv(path, tf: TestFunction, domain=(-8.0, 8.0), tolerance: float = 0.15) -> MpReport:
    """As :func:`mp_check_sbm` with ``⟨N^f⟩ = ∫ (μ_s(f²) - μ_s(f)²) ds``."""
    if isinstance(path, Trajectory):
        times, mu_f, mu_d2, mu_f2, _ = _functionals_from_trajectory(path, tf)
    else:
        times, mu_f, mu_d2, mu_f2, _ = _functionals_from_particles(path, tf, domain)
    return _mp_report("fv", tf, times, mu_f, mu_d2, mu_f2 - mu_f**2, tolerance)


def mp_check_ensemble(paths, tf: TestFunction, model: str, tolerance: float | None = None, **kw) -> MpReport:
    """Per-replica checks summarized by the mean ratio across replicas."""
    check = mp_check_sbm if model == "sbm" else mp_check_fv
    tol = tolerance if tolerance is not None else (0.1 if model == "sbm" else 0.15)
    reports = [check(p, tf, tolerance=tol, **kw) for p in paths]
    ratios = np.array([r.ratio for r in reports])
    realized = np.array([r.realized_qv for r in reports])
    predicted = np.array([r.predicted_qv for r in reports])
    z = np.concatenate([r.z_scores for r in reports])
    mismatch = any(r.model_mismatch for r in reports)
    degenerate = all(r.degenerate for r in reports)
    finite = ratios[np.isfinite(ratios)]
    mean_ratio = float(finite.mean()) if len(finite) == len(ratios) else math.inf
    rep = MpReport(
        tf.name,
        model,
        reports[0].times,
        np.array([r.increments.sum() for r in reports]),
        float(realized.sum()),
        float(predicted.sum()),
        mean_ratio,
        z,
        float(z.mean()) if len(z) else 0.0,
        mismatch,
        degenerate,
        tol,
        (not mismatch) and abs(mean_ratio - 1.0) <= tol,
    )
    rep.extra = {
        "n_replicas": len(reports),
        "ratio_std_error": float(finite.std(ddof=1) / np.sqrt(len(finite))) if len(finite) > 1 else math.nan,
        "pooled_ratio": float(realized.sum() / predicted.sum()) if predicted.sum() > 0 else math.inf,
    }
    return rep


# -- Yamada-Watanabe functions -------------------------------------------------------


def yw_a(k: int) -> float:
    """``a_0 = 1``, ``a_k = a_{k-1} e^{-k}``, so ``ln(a_{k-1}/a_k) = k`` and ``a_k = e^{-k(k+1)/2}``."""
    if k < 0 or int(k) != k:
        raise ValueError("k must be a nonnegative integer")
    return math.exp(-k * (k + 1) / 2.0)


def _ramp_integral(q, lo, hi):
    """``∫_lo^hi (s - q)² e^s ds`` in closed form."""

    def prim(s):
        d = s - q
        return math.exp(s) * (d * d - 2.0 * d + 2.0)

    return prim(hi) - prim(lo) if hi > lo else 0.0


class YwFamily:
    """``ψ_k`` and its double antiderivative ``φ_k`` for one index ``k >= 1``.

    ``ψ_k(z) = h(ln z) / z`` where ``h`` is the triangular density on
    ``(ln a_k, ln a_{k-1})`` (an interval of length ``k``) with peak ``2/k`` at
    the centre, i.e. at the geometric midpoint ``√(a_k a_{k-1})``.  Then
    ``∫ψ_k = 1``, the support is ``(a_k, a_{k-1})`` and ``z ψ_k(z) = h(ln z) <= 2/k``.
    """

    def __init__(self, k: int):
        if k < 1 or int(k) != k:
            raise ValueError("k must be a positive integer")
        self.k = int(k)
        self.a_k = yw_a(k)
        self.a_km1 = yw_a(k - 1)
        self.lo = -k * (k + 1) / 2.0
        self.hi = -(k - 1) * k / 2.0
        self.mid = 0.5 * (self.lo + self.hi)
        self.half = 0.5 * (self.hi - self.lo)
        self.peak = 1.0 / self.half
        self._verify_bound()

    def _h(self, s):
        s = np.asarray(s, dtype=float)
        return np.clip(self.peak * (1.0 - np.abs(s - self.mid) / self.half), 0.0, None)

    def _H(self, s):
        """Distribution function of ``h``."""
        s = np.asarray(s, dtype=float)
        w2 = 2.0 * self.half**2
        left = (s - self.lo) ** 2 / w2
        right = 1.0 - (self.hi - s) ** 2 / w2
        return np.where(s <= self.lo, 0.0, np.where(s <= self.mid, left, np.where(s <= self.hi, right, 1.0)))

    def _verify_bound(self):
        z = np.exp(np.linspace(self.lo, self.hi, 4001))
        if np.any(z * self.psi(z) > 2.0 / self.k * (1.0 + 1e-12)):
            raise YwConstructionError(f"psi_{self.k} violates z psi(z) <= 2/k")

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        out = np.zeros_like(z)
        inside = (z > self.a_k) & (z < self.a_km1)
        out[inside] = self._h(np.log(z[inside])) / z[inside]
        return out if out.ndim else float(out)

    def phi_prime(self, z):
        z = np.asarray(z, dtype=float)
        az = np.abs(z)
        with np.errstate(divide="ignore"):
            val = self._H(np.where(az > 0, np.log(np.where(az > 0, az, 1.0)), -np.inf))
        val = np.where(az > 0, val, 0.0) * np.sign(z)
        return val if val.ndim else float(val)

    def phi_second(self, z):
        return self.psi(np.abs(np.asarray(z, dtype=float)))

    def _phi_scalar(self, z: float) -> float:
        az = abs(z)
        if az <= self.a_k:
            return 0.0
        s = math.log(az)
        w2 = 2.0 * self.half**2
        val = _ramp_integral(self.lo, self.lo, min(s, self.mid)) / w2
        if s > self.mid:
            top = min(s, self.hi)
            val += math.exp(top) - math.exp(self.mid) - _ramp_integral(self.hi, self.mid, top) / w2
        if s > self.hi:
            val += az - self.a_km1
        return val

    def phi(self, z):
        """``φ_k(z) = ∫_0^{|z|} ∫_0^y ψ_k(x) dx dy``."""
        if np.ndim(z) == 0:
            return self._phi_scalar(float(z))
        z = np.asarray(z, dtype=float)
        return np.array([self._phi_scalar(v) for v in z.ravel()]).reshape(z.shape)

    def integral_psi(self) -> float:
        """``∫ψ_k dz`` by adaptive quadrature in ``z`` (independent of the construction)."""
        center = math.sqrt(self.a_k * self.a_km1)
        left = integrate.quad(self.psi, self.a_k, center, epsabs=0, epsrel=1e-12, limit=200)[0]
        right = integrate.quad(self.psi, center, self.a_km1, epsabs=0, epsrel=1e-12, limit=200)[0]
        return left + right

    def scan(self, n: int = 4001) -> dict:
        """Required properties on a log-spaced scan reaching past the support."""
        z = np.exp(np.linspace(self.lo - 1.0, self.hi + 1.0, n))
        z = np.concatenate([-z[::-1], [0.0], z])
        zphi2 = np.abs(z) * self.phi_second(z)
        gap = np.abs(z) - self.phi(z)
        d1 = self.phi_prime(z)
        return {
            "k": self.k,
            "a_k": self.a_k,
            "a_k_error": abs(self.a_k - math.exp(-self.k * (self.k + 1) / 2.0)),
            "log_ratio": math.log(self.a_km1 / self.a_k),
            "integral_psi": self.integral_psi(),
            "sup_z_phi2": float(zphi2.max()),
            "bound_2_over_k": 2.0 / self.k,
            "min_abs_minus_phi": float(gap.min()),
            "max_abs_minus_phi": float(gap.max()),
            "a_km1": self.a_km1,
            "max_abs_phi_prime": float(np.abs(d1).max()),
        }


def yw_psi(k: int, z):
    return YwFamily(k).psi(z)


def yw_phi(k: int, z):
    return YwFamily(k).phi(z)


def yw_suite(k_max: int = 10) -> dict:
    """Every required property for ``k = 1..k_max`` with a pass flag per check."""
    rows, ok = [], True
    for k in range(1, k_max + 1):
        r = YwFamily(k).scan()
        r["a_ok"] = r["a_k_error"] <= 1e-10
        r["integral_ok"] = abs(r["integral_psi"] - 1.0) <= 1e-6
        r["phi2_ok"] = r["sup_z_phi2"] <= 2.0 / k + 1e-9
        r["gap_ok"] = r["min_abs_minus_phi"] >= -1e-15 and r["max_abs_minus_phi"] <= r["a_km1"]
        r["passed"] = r["a_ok"] and r["integral_ok"] and r["phi2_ok"] and r["gap_ok"]
        ok = ok and r["passed"]
        rows.append(r)
    return {"k_max": k_max, "rows": rows, "passed": ok}


# -- coupling, laws, regularity --------------------------------------------------------


def coupling_gap(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """``sup |u^A - u^B|`` over common saved times; both must share one noise field."""
    if traj_a.spec != traj_b.spec:
        raise ValueError("trajectories live on different grids")
    if not traj_a.noise_digest or traj_a.noise_digest != traj_b.noise_digest:
        raise NoiseMismatchError("coupling needs both trajectories driven by the same noise")
    common, ia, ib = np.intersect1d(np.round(traj_a.times, 12), np.round(traj_b.times, 12), return_indices=True)
    if len(common) == 0:
        raise ValueError("trajectories share no saved times")
    return float(np.abs(traj_a.states[ia] - traj_b.states[ib]).max())


@dataclass
class LawReport:
    probes: list
    statistics: np.ndarray
    pvalues: np.ndarray
    alpha: float
    threshold: float
    passed: bool
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["statistics"] = np.asarray(self.statistics).tolist()
        d["pvalues"] = np.asarray(self.pvalues).tolist()
        return d

    def to_text(self) -> str:
        rows = [(p, s, q, q > self.threshold) for p, s, q in zip(self.probes, self.statistics, self.pvalues)]
        return aligned_text(rows, ("probe", "KS", "p-value", "ok"))


def law_distance(samples_a, samples_b, probes=None, alpha: float = 0.01, min_samples: int = 100) -> LawReport:
    """Two-sample Kolmogorov-Smirnov per probe with a Bonferroni threshold ``alpha / n_probes``."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < min_samples or len(b) < min_samples:
        raise ValueError(f"law comparison needs at least {min_samples} samples per side ({len(a)}, {len(b)})")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different probe counts")
    stat = np.empty(a.shape[1])
    pval = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        res = stats.ks_2samp(a[:, j], b[:, j])
        stat[j], pval[j] = res.statistic, res.pvalue
    probes = list(probes) if probes is not None else list(range(a.shape[1]))
    thr = alpha / a.shape[1]
    return LawReport(probes, stat, pval, alpha, thr, bool(np.all(pval > thr)), len(a), len(b))


def _exponent(lags, rms):
    good = rms > 0
    if good.sum() < 2:
        return None
    slope = np.polyfit(np.log(lags[good]), np.log(rms[good]), 1)[0]
    return float(slope)


def holder_modulus(traj: Trajectory, max_space_lag: int = 8, max_time_lag: int = 8) -> dict:
    """Log-log slopes of RMS increments against lag in ``y`` and in ``t`` (diagnostic only)."""
    u = traj.states
    spec: GridSpec = traj.spec
    hs = np.arange(1, min(max_space_lag, spec.n_cells // 2) + 1)
    rms_y = np.array([np.sqrt(np.mean((u[:, h:] - u[:, :-h]) ** 2)) for h in hs])
    out = {
        "space_lags": (hs * spec.dx).tolist(),
        "space_rms": rms_y.tolist(),
        "space_exponent": _exponent(hs * spec.dx, rms_y),
    }
    ls = np.arange(1, min(max_time_lag, len(u) - 1) + 1)
    if len(ls):
        dts = np.diff(traj.times)
        rms_t = np.array([np.sqrt(np.mean((u[l:] - u[:-l]) ** 2)) for l in ls])
        out.update(
            time_lags=(ls * float(dts.mean())).tolist(),
            time_rms=rms_t.tolist(),
            time_exponent=_exponent(ls * float(dts.mean()), rms_t),
        )
    else:
        out.update(time_lags=[], time_rms=[], time_exponent=None)
    out["undefined"] = out["space_exponent"] is None and out["time_exponent"] is None
    return out


def moment_bound(sup_norm0_sq: np.ndarray, q: float = 99.0) -> dict:
    """Summary of per-replica ``sup_t ‖u_t‖₀²``: finiteness and the ``q``-th percentile."""
    v = np.asarray(sup_norm0_sq, dtype=float)
    finite = bool(np.all(np.isfinite(v)))
    return {
        "n_replicas": int(v.size),
        "finite": finite,
        "mean": float(v.mean()),
        "max": float(v.max()),
        f"p{q:g}": float(np.percentile(v, q)) if finite else math.inf,
    }
