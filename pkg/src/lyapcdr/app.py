"""Workflow orchestration: building problems, running them, and writing results."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, StudyConfig
from .diagnostics import (BalanceSeries, ErrorNorms, balance_sample, convergence_rates,
                          equilibrium_distance, equilibrium_tracking, error_norms, format_float)
from .errors import ConfigurationError, IntegrationError
from .mesh import MeshGeometry, MetricData, apply_mapping, build_box_mesh, compute_metrics
from .model import DimerizationModel, DimerParams, EquilibriumPoint, ManufacturedSolution, equilibrium_from_mass
from .rhs import RhsConfig, SemiDiscreteOperator
from .rrk import (AdvanceResult, ButcherTableau, Functional, StepController, adaptive_advance,
                  fixed_advance, load_tableau, real_stability_limit, spectral_radius_estimate,
                  tableau_library)
from .sbp import TensorOperatorSet, build_sbp_d1, extend_tensor, grid_to_flat

SUMMARY_VERSION = 1
NOT_REACHED = "not reached"


@dataclass
class Problem:
    """Everything needed to integrate one configuration."""

    config: RunConfig
    mesh: MeshGeometry
    ops: TensorOperatorSet
    metrics: MetricData
    model: DimerizationModel
    operator: SemiDiscreteOperator
    u0: np.ndarray
    mass: float
    manufactured: ManufacturedSolution | None
    tableau: ButcherTableau

    @property
    def equilibrium(self) -> np.ndarray:
        return self.model.equilibrium_state()

    def functional(self) -> Functional:
        return Functional(value=self.operator.lyapunov_functional, rate=self.operator.lyapunov_rate,
                          rounding_scale=self.operator.lyapunov_rounding_scale)


def _initial_levels(cfg: RunConfig, coords: np.ndarray, params: DimerParams) -> np.ndarray:
    ic = cfg.initial_condition
    shape = coords.shape[:-1] + (2,)
    if ic.kind == "constant":
        state = ic.state if ic.state is not None else cfg.equilibrium
        if state is None:
            raise ConfigurationError("constant initial condition needs 'state' or an explicit equilibrium")
        return np.broadcast_to(np.asarray(state, dtype=float), shape).copy()
    if ic.kind == "blob":
        box = np.asarray(cfg.box, dtype=float)
        center = np.asarray(ic.center, dtype=float) if ic.center is not None else box.mean(axis=1)
        r = np.linalg.norm(coords - center, axis=-1)
        s = 0.5 * (1.0 - np.tanh((r - ic.radius) / ic.width))
        inside, outside = np.asarray(ic.inside), np.asarray(ic.outside)
        return outside + (inside - outside) * s[..., None]
    mms = ManufacturedSolution(params, ic.wavenumber, ic.base, ic.amplitude, ic.form)
    return mms.solution(coords, cfg.t_start)


def resolve_tableau(cfg: RunConfig) -> ButcherTableau:
    if cfg.tableau_file is not None:
        return load_tableau(cfg.tableau_file, relaxation=cfg.relaxation)
    return tableau_library(cfg.tableau)


def build_problem(cfg: RunConfig) -> Problem:
    """Assemble mesh, operators, model, initial state and RHS for ``cfg``."""
    op1d = build_sbp_d1(cfg.degree)
    ops = extend_tensor(op1d, cfg.dim, 2)
    box = [tuple(b) for b in cfg.box]
    mesh = build_box_mesh(cfg.dim, cfg.elements, box=box)
    coords = apply_mapping(mesh, ops, cfg.mapping, cfg.warp_amplitude)
    metrics = compute_metrics(mesh, ops, coords)
    params = DimerParams(k_f=cfg.k_f, k_r=cfg.k_r, d=cfg.d, a=tuple(cfg.velocity),
                         time_dependent_diffusion=cfg.time_dependent_diffusion)
    u0 = _initial_levels(cfg, metrics.coordinates, params)
    mj = metrics.mass_jacobian(ops)
    mass = float(np.sum(mj * (u0[..., 0] + 2.0 * u0[..., 1])) / np.sum(mj))
    if cfg.equilibrium is not None:
        eq = EquilibriumPoint(*cfg.equilibrium)
    elif cfg.k_f > 0:
        eq = equilibrium_from_mass(mass, cfg.k_f, cfg.k_r)
    else:
        raise ConfigurationError("k_f = 0 has no positive equilibrium; give 'equilibrium' explicitly")
    model = DimerizationModel(params, eq)
    manufactured = None
    if cfg.initial_condition.kind == "mms":
        ic = cfg.initial_condition
        manufactured = ManufacturedSolution(params, ic.wavenumber, ic.base, ic.amplitude, ic.form)
    rhs_cfg = RhsConfig(enable_convection=cfg.enable_convection, enable_diss_c=cfg.enable_diss_c,
                        enable_diss_d=cfg.enable_diss_d, enable_viscous=cfg.enable_viscous,
                        enable_reaction=cfg.enable_reaction, mms_forcing=manufactured is not None)
    operator = SemiDiscreteOperator(mesh, ops, metrics, model, rhs_cfg,
                                    forcing=manufactured.forcing if manufactured else None,
                                    threads=cfg.threads)
    operator.check_admissible(u0)
    return Problem(config=cfg, mesh=mesh, ops=ops, metrics=metrics, model=model, operator=operator,
                   u0=u0, mass=mass, manufactured=manufactured, tableau=resolve_tableau(cfg))


@dataclass
class RunResult:
    """Outcome of :func:`run_simulation`."""

    problem: Problem
    u: np.ndarray
    t: float
    series: BalanceSeries
    summary: dict
    advance: AdvanceResult | None
    track_times: list[float] = field(default_factory=list)
    track_distances: list[float] = field(default_factory=list)
    error: IntegrationError | None = None

    @property
    def completed(self) -> bool:
        return self.error is None


def _sanitize(value):
    """JSON-ready copy: non-finite floats become strings."""
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_state_csv(path: str | Path, problem: Problem, u: np.ndarray) -> None:
    """Nodal dump with columns ``element, node, x1.., P, Q``."""
    dim = problem.mesh.dim
    nel = problem.mesh.n_elements
    coords = grid_to_flat(problem.metrics.coordinates, dim).reshape(nel, -1, dim)
    state = grid_to_flat(u, dim).reshape(nel, -1, 2)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["element", "node"] + [f"x{l + 1}" for l in range(dim)] + ["P", "Q"])
        for e in range(nel):
            for n in range(coords.shape[1]):
                writer.writerow([e, n] + [format_float(v) for v in coords[e, n]]
                                + [format_float(v) for v in state[e, n]])


def run_simulation(cfg: RunConfig, output_dir: str | Path | None = None, ledger: bool = True,
                   log=None) -> RunResult:
    """Integrate ``cfg`` from ``t_start`` to ``t_end``.

    With ``ledger`` the Lyapunov balance is sampled at the start of every
    accepted step (every ``stride``-th step is kept).  When ``output_dir`` is
    given, ``series.csv``, ``final_state.csv`` and ``summary.json`` are written;
    an integration failure still writes the last good state and re-raises.
    """
    problem = build_problem(cfg)
    op = problem.operator
    eq = problem.equilibrium
    functional = problem.functional()
    series = BalanceSeries()
    track_t = [cfg.t_start]
    track_d = [float(np.max(equilibrium_distance(problem.u0, eq)))]
    counter = {"steps": 0, "max_q": 0.0, "gamma_min": math.inf, "gamma_max": -math.inf}

    def sample(t, u):
        ev = op.evaluate(t, u, balance=True)
        return ev, equilibrium_distance(u, eq)

    def first_stage(t, u):
        ev, dist = sample(t, u)
        return ev.rhs, (ev.balance, dist)

    def on_step(record, u_new):
        k = counter["steps"]
        counter["steps"] += 1
        counter["max_q"] = max(counter["max_q"], record.q_residual)
        counter["gamma_min"] = min(counter["gamma_min"], record.gamma)
        counter["gamma_max"] = max(counter["gamma_max"], record.gamma)
        track_t.append(record.t_end)
        track_d.append(float(np.max(equilibrium_distance(u_new, eq))))
        if ledger and k % cfg.stride == 0:
            info = record.start_info
            if info is None:
                ev, dist = sample(record.t_start, last["u"])
                info = (ev.balance, dist)
            terms, dist = info
            series.append(balance_sample(record.t_start, terms, record.v_start, dist,
                                         record.gamma, record.dt))
        last["u"] = u_new
        if log is not None and counter["steps"] % 100 == 0:
            log(f"step {counter['steps']}: t = {record.t_end:.6g}, dt = {record.dt:.3e}, "
                f"distance = {track_d[-1]:.3e}")

    last = {"u": problem.u0}
    stability = {}
    error = None
    advance = None
    u_final, t_final = problem.u0, cfg.t_start
    try:
        if cfg.dt_fixed is not None:
            advance = fixed_advance(problem.u0, cfg.t_start, cfg.t_end, cfg.dt_fixed, problem.tableau, op,
                                    functional, relaxation=cfg.relaxation, on_step=on_step)
        else:
            dt_max = math.inf if cfg.dt_max is None else cfg.dt_max
            if cfg.stability_cap:
                rho = spectral_radius_estimate(op, cfg.t_start, problem.u0)
                stability["spectral_radius"] = rho
                if rho > 0:
                    dt_max = min(dt_max, cfg.stability_safety * real_stability_limit(problem.tableau) / rho)
            stability["dt_max"] = dt_max
            controller = StepController(atol=cfg.atol, rtol=cfg.rtol, dt=cfg.dt_initial, dt_max=dt_max)
            advance = adaptive_advance(problem.u0, cfg.t_start, cfg.t_end, problem.tableau, op, functional,
                                       controller, relaxation=cfg.relaxation,
                                       first_stage=first_stage if ledger else None,
                                       on_step=on_step, max_steps=cfg.max_steps)
        u_final, t_final = advance.u, advance.t
    except IntegrationError as exc:
        error = exc
        if exc.last_state is not None:
            u_final, t_final = exc.last_state, exc.last_time
    if ledger:
        ev, dist = sample(t_final, u_final)
        series.append(balance_sample(t_final, ev.balance, op.lyapunov_functional(u_final), dist))
    summary = _summary(problem, u_final, t_final, series if ledger else None, advance, counter,
                       track_t, track_d, error)
    summary.update(_sanitize(stability))
    result = RunResult(problem=problem, u=u_final, t=t_final, series=series, summary=summary,
                       advance=advance, track_times=track_t, track_distances=track_d, error=error)
    if output_dir is not None:
        write_run_outputs(result, output_dir)
    if error is not None:
        raise error
    return result


def _summary(problem, u, t, series, advance, counter, track_t, track_d, error) -> dict:
    cfg = problem.config
    eq = problem.equilibrium
    dist = equilibrium_distance(u, eq)
    t_eq = equilibrium_tracking(track_t, track_d, cfg.threshold)
    summary = {
        "summary_version": SUMMARY_VERSION,
        "status": "completed" if error is None else "failed",
        "error": None if error is None else str(error),
        "config": cfg.to_dict(),
        "tableau": problem.tableau.name,
        "t_final": t,
        "conserved_mass": problem.mass,
        "predicted_equilibrium": [float(eq[0]), float(eq[1])],
        "final_distance": [float(dist[0]), float(dist[1])],
        "threshold": cfg.threshold,
        "T_eq": NOT_REACHED if t_eq is None else t_eq,
        "lyapunov_initial": problem.operator.lyapunov_functional(problem.u0),
        "lyapunov_final": problem.operator.lyapunov_functional(u),
        "n_steps": counter["steps"],
        "max_q_residual": counter["max_q"],
        "gamma_range": [counter["gamma_min"], counter["gamma_max"]] if counter["steps"] else None,
    }
    if advance is not None:
        summary.update(n_rejected=advance.n_rejected,
                       n_admissibility_rejections=advance.n_admissibility_rejections,
                       n_relaxation_rejections=advance.n_relaxation_rejections,
                       n_rhs_evaluations=advance.n_rhs_evaluations)
    if series is not None and len(series):
        V = series.column("V")
        summary["max_relative_balance_residual"] = series.max_relative_residual
        summary["lyapunov_nonincreasing"] = bool(np.all(np.diff(V) <= 1e-12 * np.abs(V[:-1])))
    if problem.manufactured is not None:
        ref = problem.manufactured.solution(problem.metrics.coordinates, t)
        summary["mms_errors"] = error_norms(u, ref, problem.ops, problem.metrics).as_dict()
    return _sanitize(summary)


def write_run_outputs(result: RunResult, output_dir: str | Path) -> dict[str, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"series": out / "series.csv", "final_state": out / "final_state.csv",
             "summary": out / "summary.json"}
    result.series.write_csv(paths["series"])
    write_state_csv(paths["final_state"], result.problem, result.u)
    with open(paths["summary"], "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# --------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class ConvergenceLevel:
    degree: int
    elements: tuple[int, ...]
    h: float
    norms: ErrorNorms
    n_steps: int


def mms_convergence(study: StudyConfig, output_dir: str | Path | None = None, log=None) -> dict:
    """Manufactured-solution errors and observed rates per degree and level."""
    if study.base.initial_condition.kind != "mms":
        raise ConfigurationError("mms-convergence requires initial_condition.kind = 'mms'")
    results = {}
    for p in study.degrees:
        levels = []
        for k in range(len(study.levels)):
            cfg = study.run_config(p, k)
            run = run_simulation(cfg, ledger=False)
            norms = ErrorNorms(**{key: run.summary["mms_errors"][key] for key in ("l1", "l2", "linf")},
                               per_component=tuple(tuple(c) for c in run.summary["mms_errors"]["per_component"]))
            h = (cfg.box[0][1] - cfg.box[0][0]) / cfg.elements[0]
            levels.append(ConvergenceLevel(p, tuple(cfg.elements), h, norms, run.summary["n_steps"]))
            if log is not None:
                log(f"p={p} K={cfg.elements}: L2 = {norms.l2:.6e} ({run.summary['n_steps']} steps)")
        hs = [lv.h for lv in levels]
        rates = {name: convergence_rates([getattr(lv.norms, name) for lv in levels], hs)
                 for name in ("l1", "l2", "linf")}
        results[p] = {"levels": levels, "rates": rates}
    table = format_convergence_table(results)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mms_convergence.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["degree", "elements", "h", "l1", "rate_l1", "l2", "rate_l2", "linf",
                             "rate_linf", "n_steps"])
            for p, res in results.items():
                for k, lv in enumerate(res["levels"]):
                    row = [p, "x".join(map(str, lv.elements)), format_float(lv.h)]
                    for name in ("l1", "l2", "linf"):
                        rate = res["rates"][name][k - 1] if k > 0 else None
                        row += [format_float(getattr(lv.norms, name)),
                                "" if rate is None else format_float(rate)]
                    writer.writerow(row + [lv.n_steps])
        (out / "mms_table.txt").write_text(table)
        with open(out / "study.json", "w") as fh:
            json.dump(_sanitize(study.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return {"results": results, "table": table}


def format_convergence_table(results: dict) -> str:
    lines = []
    header = f"{'p':>2} {'K':>10} {'L1 error':>12} {'rate':>6} {'L2 error':>12} {'rate':>6} {'Linf error':>12} {'rate':>6}"
    for p, res in results.items():
        lines.append(header)
        for k, lv in enumerate(res["levels"]):
            cells = [f"{p:>2}", f"{'x'.join(map(str, lv.elements)):>10}"]
            for name in ("l1", "l2", "linf"):
                rate = res["rates"][name][k - 1] if k > 0 else None
                cells.append(f"{getattr(lv.norms, name):12.5e}")
                cells.append(f"{'-' if rate is None else format(rate, '.3f'):>6}")
            lines.append(" ".join(cells))
        lines.append("")
    return "\n".join(lines)


def equilibrium_study(study: StudyConfig, output_dir: str | Path | None = None, log=None) -> dict:
    """Time to reach the equilibrium threshold for each degree and level."""
    rows = []
    for p in study.degrees:
        for k in range(len(study.levels)):
            cfg = study.run_config(p, k)
            run = run_simulation(cfg, ledger=False)
            t_eq = run.summary["T_eq"]
            rows.append({"degree": p, "elements": list(cfg.elements), "T_eq": t_eq,
                         "final_distance": max(run.summary["final_distance"]),
                         "n_steps": run.summary["n_steps"]})
            if log is not None:
                log(f"p={p} K={cfg.elements}: T_eq = {t_eq}")
    lines = [f"{'p':>2} {'K':>10} {'T_eq':>22} {'final distance':>16}"]
    for r in rows:
        t_eq = r["T_eq"] if isinstance(r["T_eq"], str) else format_float(r["T_eq"])
        lines.append(f"{r['degree']:>2} {'x'.join(map(str, r['elements'])):>10} {t_eq:>22} "
                     f"{r['final_distance']:16.6e}")
    table = "\n".join(lines) + "\n"
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "equilibrium_study.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["degree", "elements", "T_eq", "final_distance", "n_steps"])
            for r in rows:
                t_eq = r["T_eq"] if isinstance(r["T_eq"], str) else format_float(r["T_eq"])
                writer.writerow([r["degree"], "x".join(map(str, r["elements"])), t_eq,
                                 format_float(r["final_distance"]), r["n_steps"]])
        (out / "equilibrium_table.txt").write_text(table)
    return {"rows": rows, "table": table}
