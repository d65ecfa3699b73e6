"""Run orchestration behind the command line: one function per subcommand.

Each runner returns a :class:`RunResult` holding a verdict (``True``,
``False``, or ``None`` when the run performs no check), a JSON-able report and
the files it wrote.  :class:`RunManifest` records how to reproduce a run.
"""

from __future__ import annotations

import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bdsde import check_representation, ipp_residual, simulate_forward, solve_bdsde
from .config import ConfigError, RunConfig, component_seed
from .grid import GridSpec, write_csv
from .heat import HeatOperator
from .io import file_sha256, stable_hash, write_json
from .noise import LevelSpec, sample_noise
from .particles import ParticleConfig, simulate_fv_particles, simulate_sbm_particles
from .spde import (
    CoefficientKernel,
    PicardContractionWarning,
    SolverConfig,
    default_sbm_level,
    gaussian_cdf,
    solve,
    solve_ensemble,
)
from .verify import TestFunction, aligned_text, coupling_gap, holder_modulus, law_distance, mp_check_ensemble, yw_suite

__all__ = [
    "RunManifest",
    "RunResult",
    "compare_pipeline",
    "default_workers",
    "run_bdsde_ipp",
    "run_bdsde_represent",
    "run_bdsde_solve",
    "run_particles",
    "run_solve",
    "run_verify_coupling",
    "run_verify_holder",
    "run_verify_law",
    "run_verify_mp",
    "run_verify_yw",
]

MIN_REPLICAS = 100


@dataclass
class RunResult:
    name: str
    passed: bool | None
    report: dict
    files: list = field(default_factory=list)
    text: str = ""
    seeds: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    versions: dict
    files: list
    wall_clock: float
    diagnostics: dict
    status: str

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> Path:
        return write_json(Path(out_dir) / "run_manifest.json", self.to_dict())

    def missing_files(self, out_dir) -> list[str]:
        out_dir = Path(out_dir)
        return [f["path"] for f in self.files if not (out_dir / f["path"]).exists()]


def versions() -> dict:
    import numba
    import scipy

    return {
        "spdelab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


def build_manifest(command: str, cfg: RunConfig, result: RunResult, out_dir, wall_clock: float) -> RunManifest:
    out_dir = Path(out_dir)
    files = [
        {"path": str(Path(p).relative_to(out_dir)), "sha256": file_sha256(p)}
        for p in sorted(set(map(Path, result.files)))
    ]
    status = {True: "pass", False: "fail", None: "done"}[result.passed]
    diag = {k: v for k, v in result.report.items() if np.ndim(v) == 0 and not isinstance(v, dict)}
    return RunManifest(
        command, cfg.config_hash(), {"root": cfg.seed, **result.seeds}, versions(), files, wall_clock, diag, status
    )


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SPDE_LAB_WORKERS", "1")))
    except ValueError:
        return 1


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# -- builders ----------------------------------------------------------------------


def grid_of(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.x_min, g.x_max, g.n_cells)


def initial_of(cfg: RunConfig, spec: GridSpec):
    i = cfg.spde.initial
    return gaussian_cdf(spec, i.mass, i.scale, i.center)


def kernel_of(kind: str, n_levels: int, F, T: float) -> CoefficientKernel:
    if kind == "sbm":
        return CoefficientKernel.sbm(default_sbm_level(F, T, n_levels))
    if kind == "fv":
        return CoefficientKernel.fv(n_levels)
    return CoefficientKernel.none(LevelSpec.unit(1))


def solver_config_of(
    cfg: RunConfig, kernel: str | None = None, dt: float | None = None, T: float | None = None, save_every=None
) -> SolverConfig:
    s = cfg.spde
    spec = grid_of(cfg)
    F = initial_of(cfg, spec)
    dt = dt or s.dt
    T = T or s.T
    n_steps = int(round(T / dt))
    if n_steps < 1 or not np.isclose(n_steps * dt, T, rtol=1e-9):
        raise ConfigError(f"spde.T={T} is not a whole number of steps of dt={dt}")
    k = kernel_of(kernel or s.kernel, s.n_levels, F, T)
    return SolverConfig(spec, dt, n_steps, k, F, s.scheme, s.n_iter, True, save_every or s.save_every)


def particle_config_of(cfg: RunConfig, T: float | None = None, snapshot_dt=None) -> ParticleConfig:
    p = cfg.particles
    return ParticleConfig(
        p.n_init,
        T or p.T,
        p.initial_mass,
        p.rate_factor,
        p.pair_rate,
        None,
        component_seed(cfg.seed, "particles"),
        p.init_scale,
        0.0,
        snapshot_dt if snapshot_dt is not None else p.snapshot_dt,
    )


def _particle_job(job):
    pcfg, model, stream = job
    sim = simulate_sbm_particles if model == "sbm" else simulate_fv_particles
    return sim(pcfg, stream)


def particle_paths(pcfg: ParticleConfig, model: str, n: int, workers: int = 1):
    return _map(_particle_job, [(pcfg, model, r) for r in range(n)], workers)


# -- subcommands -----------------------------------------------------------------------


def run_solve(cfg: RunConfig, out_dir, kernel: str | None = None, workers: int = 1) -> RunResult:
    out_dir = Path(out_dir)
    sc = solver_config_of(cfg, kernel)
    seed = component_seed(cfg.seed, "spde")
    kind = sc.kernel.id
    files = []
    if cfg.spde.replicas == 1:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PicardContractionWarning)
            traj = solve(sc, sc.make_noise(seed, 0))
        files += traj.write(out_dir / "trajectory")
        finals = traj.states[-1][None, :]
        diag = {k: float(np.max(v)) for k, v in traj.diagnostics.items()}
        report = {"kernel": kind, "scheme": sc.scheme, "T": sc.T, "config_hash": sc.config_hash(), **diag}
        report["picard_warnings"] = [str(w.message) for w in caught]
        if traj.picard_diagnostics is not None:
            report["picard_diagnostics"] = list(traj.picard_diagnostics)
    else:
        ens = solve_ensemble(sc, seed, range(cfg.spde.replicas))
        finals = ens.states[:, -1]
        diag = {k: float(np.max(v)) for k, v in ens.diagnostics.items()}
        report = {"kernel": kind, "scheme": "mild-euler", "T": sc.T, "replicas": cfg.spde.replicas, **diag}
    x = sc.grid.points
    files.append(
        write_csv(out_dir / "final_states.csv", x, *finals, header=("x",) + tuple(f"r{i}" for i in range(len(finals))))
    )
    passed = None
    if kind == "none":
        exact = HeatOperator(sc.grid, sc.T, mode="exact").apply(sc.F.values)
        gap = float(np.abs(finals[0] - exact).max() / np.abs(sc.F.values).max())
        report["heat_gap"] = gap
        passed = gap <= 1e-3
    elif kind == "fv":
        viol = max(report["range_violation"], report["monotone_violation"])
        report["fv_violation"] = viol
        passed = viol <= cfg.compare.fv_violation_tolerance
    report["passed"] = passed
    return RunResult("solve", passed, report, files, aligned_text(sorted(_scalars(report).items())), {"spde": seed})


def _scalars(d: dict) -> dict:
    return {k: v for k, v in d.items() if np.ndim(v) == 0 and not isinstance(v, (dict, list))}


def run_particles(cfg: RunConfig, model: str, out_dir, workers: int = 1) -> RunResult:
    out_dir = Path(out_dir)
    pcfg = particle_config_of(cfg)
    paths = particle_paths(pcfg, model, cfg.particles.replicas, workers)
    files = []
    # independent replicas share snapshot times
    mass = np.array([p.total_mass() for p in paths])
    header = ("t",) + tuple(f"r{i}" for i in range(len(paths)))
    files.append(write_csv(out_dir / "total_mass.csv", paths[0].times, *mass, header=header))
    for i, p in enumerate(paths):
        m = p.at(p.times[-1])
        path = out_dir / "final" / f"replica_{i:04d}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        m.to_csv(path)
        files.append(path)
    final = mass[:, -1]
    report = {
        "model": model,
        "replicas": len(paths),
        "T": pcfg.T,
        "dt": pcfg.step(model)[0],
        "particle_mass": pcfg.particle_mass,
        "final_mass_mean": float(final.mean()),
        "final_mass_var": float(final.var(ddof=1)) if len(final) > 1 else 0.0,
        "final_count_mean": float(np.mean([len(p.at(p.times[-1]).positions) for p in paths])),
    }
    files.append(write_json(out_dir / "particles_config.json", pcfg.to_dict()))
    return RunResult("particles", None, report, files, aligned_text(sorted(report.items())), {"particles": pcfg.seed})


def run_verify_mp(cfg: RunConfig, model: str, out_dir, workers: int = 1) -> RunResult:
    pcfg = particle_config_of(cfg)
    paths = particle_paths(pcfg, model, cfg.particles.replicas, workers)
    tf = TestFunction.gaussian_bump(cfg.particles.test_center, cfg.particles.test_width)
    rep = mp_check_ensemble(paths, tf, model)
    d = rep.to_dict()
    return RunResult("verify-mp", rep.passed, d, [], rep.to_text(), {"particles": pcfg.seed})


def run_verify_yw(k: int) -> RunResult:
    rep = yw_suite(k)
    cols = ("k", "a_k_error", "integral_psi", "sup_z_phi2", "max_abs_minus_phi", "a_km1", "passed")
    text = aligned_text([[r[c] for c in cols] for r in rep["rows"]], cols)
    return RunResult("verify-yw", rep["passed"], rep, [], text)


def coupling_scan(cfg: RunConfig, dt: float | None = None) -> dict:
    """Mild-Euler against Picard on one noise field at ``dt`` and ``dt/2``."""
    dt = dt or cfg.spde.dt
    seed = component_seed(cfg.seed, "spde")
    out = {"dts": [], "gaps": [], "picard_diagnostics": [], "picard_warnings": 0}
    for h in (dt, dt / 2):
        sc = solver_config_of(cfg, "sbm", dt=h, save_every=1)
        noise = sc.make_noise(seed, 0)
        euler = solve(sc, noise)
        pc = SolverConfig(sc.grid, sc.dt, sc.n_steps, sc.kernel, sc.F, "picard", cfg.spde.n_iter, True, 1)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PicardContractionWarning)
            picard = solve(pc, noise)
        scale = float(np.abs(sc.F.values).max())
        out["dts"].append(h)
        out["gaps"].append(coupling_gap(euler, picard) / scale)
        out["picard_diagnostics"].append(list(picard.picard_diagnostics))
        out["picard_warnings"] += len(caught)
    g0, g1 = out["gaps"]
    out["shrink_factor"] = g0 / g1 if g1 > 0 else np.inf
    out["gap"] = g0
    out["passed"] = bool(g0 <= 0.05 and out["shrink_factor"] >= 1.4)
    return out


def run_verify_coupling(cfg: RunConfig, out_dir) -> RunResult:
    rep = coupling_scan(cfg)
    rows = [(h, g) for h, g in zip(rep["dts"], rep["gaps"])]
    text = aligned_text(rows, ("dt", "sup gap / sup|F|")) + f"\nshrink factor {rep['shrink_factor']:.3g}"
    return RunResult("verify-coupling", rep["passed"], rep, [], text, {"spde": component_seed(cfg.seed, "spde")})


def run_verify_holder(cfg: RunConfig, out_dir) -> RunResult:
    sc = solver_config_of(cfg, save_every=1)
    seed = component_seed(cfg.seed, "spde")
    rep = holder_modulus(solve(sc, sc.make_noise(seed, 0)))
    text = aligned_text([("space exponent", rep["space_exponent"]), ("time exponent", rep["time_exponent"])])
    return RunResult("verify-holder", None, rep, [], text, {"spde": seed})


def _law_samples(cfg: RunConfig, probes, workers: int = 1, model: str | None = None):
    c = cfg.compare
    model = model or c.model
    if c.particle_replicas < MIN_REPLICAS or c.spde_replicas < MIN_REPLICAS:
        raise ConfigError(
            f"compare needs at least {MIN_REPLICAS} replicas per side "
            f"(got {c.particle_replicas} particle, {c.spde_replicas} spde)"
        )
    p, init = cfg.particles, cfg.spde.initial
    if not (np.isclose(p.initial_mass, init.mass) and np.isclose(p.init_scale, init.scale) and init.center == 0):
        raise ConfigError("particles.initial_mass/init_scale must match spde.initial (centered)")
    if model == "fv" and not np.isclose(init.mass, 1.0):
        raise ConfigError("the Moran model compares against a probability distribution function (mass 1)")
    pcfg = particle_config_of(cfg, T=c.t)
    paths = particle_paths(pcfg, model, c.particle_replicas, workers)
    probes = np.asarray(probes, dtype=float)
    part = np.array([[m.masses[m.positions <= q].sum() for q in probes] for m in (pp.at(c.t) for pp in paths)])
    sc = solver_config_of(cfg, model, T=c.t, save_every=10**9)
    seed = component_seed(cfg.seed, "spde")
    ens = solve_ensemble(sc, seed, range(c.spde_replicas))
    spde_vals = ens.at(c.t, probes)
    seeds = {"particles": pcfg.seed, "spde": seed}
    return paths, part, spde_vals, ens, seeds


def run_verify_law(cfg: RunConfig, out_dir, probes=None, workers: int = 1) -> RunResult:
    probes = probes if probes is not None else cfg.compare.probes
    _, part, spde_vals, _, seeds = _law_samples(cfg, probes, workers)
    law = law_distance(part, spde_vals, probes, cfg.compare.alpha)
    files = _write_samples(Path(out_dir), probes, part, spde_vals)
    return RunResult("verify-law", law.passed, law.to_dict(), files, law.to_text(), seeds)


def _write_samples(out_dir: Path, probes, part, spde_vals) -> list:
    cols = [np.arange(len(part))] + [part[:, j] for j in range(part.shape[1])]
    h = ("replica",) + tuple(f"y={q:g}" for q in probes)
    a = write_csv(out_dir / "particle_samples.csv", *cols, header=h)
    cols = [np.arange(len(spde_vals))] + [spde_vals[:, j] for j in range(spde_vals.shape[1])]
    b = write_csv(out_dir / "spde_samples.csv", *cols, header=h)
    return [a, b]


def compare_pipeline(cfg: RunConfig, out_dir=None, probes=None, workers: int = 1) -> RunResult:
    """Particle ensemble against solver ensemble: law distance, martingale check, structure."""
    c = cfg.compare
    probes = probes if probes is not None else c.probes
    paths, part, spde_vals, ens, seeds = _law_samples(cfg, probes, workers)
    law = law_distance(part, spde_vals, probes, c.alpha)
    tf = TestFunction.gaussian_bump(cfg.particles.test_center, cfg.particles.test_width)
    mp = mp_check_ensemble(paths, tf, c.model)
    report = {"model": c.model, "law": law.to_dict(), "mp": mp.to_dict(), "law_passed": law.passed}
    report["mp_passed"] = mp.passed
    passed = law.passed and mp.passed
    if c.model == "fv":
        d = ens.diagnostics
        viol = float(max(np.max(d["range_violation"]), np.max(d["monotone_violation"])))
        report["fv_violation"] = viol
        report["structure_passed"] = viol <= c.fv_violation_tolerance
        passed = passed and report["structure_passed"]
    report["passed"] = passed
    files = _write_samples(Path(out_dir), probes, part, spde_vals) if out_dir is not None else []
    text = "\n".join([law.to_text(), mp.to_text(), f"verdict {'pass' if passed else 'fail'}"])
    return RunResult("compare", passed, report, files, text, seeds)


# -- bdsde ------------------------------------------------------------------------------


def bdsde_closed_form(cfg: RunConfig, terminal: str | None = None) -> dict:
    b = cfg.bdsde
    terminal = terminal or b.terminal
    dt = (b.T - b.t) / b.n_steps
    fw = simulate_forward(b.t, b.y, dt, b.n_steps, component_seed(cfg.seed, "bdsde-forward"), b.n_paths)
    lv = LevelSpec.unit(1)
    tn = sample_noise(b.n_steps, dt, lv, component_seed(cfg.seed, "bdsde-noise"), 0)
    if terminal == "x":
        F, Yt, Zt = (lambda x: x), (lambda s, x: x), (lambda s, x: np.ones_like(x))
    else:
        F, Yt, Zt = (lambda x: x**2), (lambda s, x: x**2 + (b.T - s)), (lambda s, x: 2 * x)
    path = solve_bdsde(F, CoefficientKernel.none(lv), tn, fw, b.degree)
    s = path.times[None, :]
    y_true, z_true = Yt(s, path.X), Zt(s, path.X)[:, :-1]
    y_err = float(np.sqrt(np.mean((path.Y - y_true) ** 2)) / np.sqrt(np.mean(y_true**2)))
    z_err = float(np.sqrt(np.mean((path.Z[:, :-1] - z_true) ** 2)) / np.sqrt(np.mean(z_true**2)))
    return {
        "terminal": terminal,
        "y_rms_error": y_err,
        "z_rms_error": z_err,
        "times": path.times,
        "Y_mean": path.Y.mean(axis=0),
        "Z_mean": np.append(path.Z[:, :-1].mean(axis=0), np.nan),
        "passed": bool(y_err <= b.tolerance and z_err <= b.tolerance),
        **path.report(),
    }


def run_bdsde_solve(cfg: RunConfig, out_dir) -> RunResult:
    rep = bdsde_closed_form(cfg)
    f = write_csv(Path(out_dir) / "bdsde_means.csv", rep["times"], rep["Y_mean"], rep["Z_mean"], header=("t", "Y", "Z"))
    rep = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rep.items()}
    return RunResult("bdsde-solve", rep["passed"], rep, [f], aligned_text(sorted(_scalars(rep).items())))


def ipp_scan(cfg: RunConfig, dts=None, n_paths: int | None = None, linear: bool = False) -> dict:
    """Itô-Pardoux-Peng residuals for ``f = x²`` (or ``3x``), ``α ≡ 1`` on one mode, ``z ≡ 0``."""
    b = cfg.bdsde
    dts = list(dts or b.ipp_dts)
    n_paths = n_paths or b.ipp_paths
    lv = LevelSpec.index(1)
    if linear:
        f, df, d2f = (lambda x: 3 * x), (lambda x: 3 + 0 * x), (lambda x: 0 * x)
    else:
        f, df, d2f = (lambda x: x**2), (lambda x: 2 * x), (lambda x: 2 + 0 * x)
    seed_n = component_seed(cfg.seed, "ipp-noise")
    seed_b = component_seed(cfg.seed, "ipp-forward")
    rel = []
    for dt in dts:
        n = int(round(1.0 / dt))
        fields = [sample_noise(n, dt, lv, seed_n, p) for p in range(n_paths)]
        fw = simulate_forward(0.0, 0.0, dt, n, seed_b, n_paths)
        rel.append(ipp_residual(f, df, d2f, np.ones((n, 1)), 0.0, 1.0, fields, fw.dB)["relative"])
    rel = np.array(rel)
    order = float(np.polyfit(np.log(dts), np.log(rel), 1)[0]) if len(dts) > 1 and rel.min() > 0 else None
    rep = {
        "dts": dts,
        "relative_residual": rel.tolist(),
        "order": order,
        "decreasing": bool(np.all(np.diff(rel) < 0)),
    }
    ref = rel[int(np.argmin(np.abs(np.asarray(dts) - 1e-3)))]
    rep["reference_residual"] = float(ref)
    rep["passed"] = bool(ref <= 0.03 and rep["decreasing"])
    return rep


def run_bdsde_ipp(cfg: RunConfig, out_dir) -> RunResult:
    rep = ipp_scan(cfg)
    f = write_csv(Path(out_dir) / "ipp_scan.csv", rep["dts"], rep["relative_residual"], header=("dt", "relative"))
    text = aligned_text(list(zip(rep["dts"], rep["relative_residual"])), ("dt", "relative residual"))
    return RunResult("bdsde-ipp", rep["passed"], rep, [f], text)


def representation(cfg: RunConfig, kernel: str | None = None, n_paths=None, n_cells=None, dt=None, mode="residual"):
    b = cfg.bdsde
    kind = kernel or b.represent_kernel
    c2 = cfg if n_cells is None else cfg.model_copy(update={"grid": cfg.grid.model_copy(update={"n_cells": n_cells})})
    levels = 512 if kind == "fv" else 1
    c2 = c2.model_copy(update={"spde": c2.spde.model_copy(update={"n_levels": levels})})
    sc = solver_config_of(c2, kind, dt=dt, save_every=1)
    seed = component_seed(cfg.seed, "spde")
    noise = sc.make_noise(seed, 0)
    traj = solve(sc, noise)
    rep = check_representation(
        traj,
        b.t,
        b.y,
        sc.kernel,
        noise.reversed(),
        n_paths or b.represent_paths,
        component_seed(cfg.seed, "bdsde-forward"),
        mode=mode,
    )
    return rep.to_dict()


def run_bdsde_represent(cfg: RunConfig, out_dir) -> RunResult:
    b = cfg.bdsde
    rep = representation(cfg)
    if b.represent_kernel == "none":
        rep["passed"] = rep["relative_gap"] <= 0.01
    else:
        rep["passed"] = rep["relative_residual"] <= b.represent_tolerance
    return RunResult("bdsde-represent", rep["passed"], rep, [], aligned_text(sorted(_scalars(rep).items())))


def report_hash(result: RunResult) -> str:
    return stable_hash(result.report)
