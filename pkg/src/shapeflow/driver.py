"""Optimization loop, configuration, run log and artifact output.

One optimization step solves the flow and its adjoint, builds the nodal
shape sensitivity, computes a constrained descent field through the
p-continuation, applies it to the whole grid hierarchy and accepts the
step only if the objective strictly decreases; otherwise the geometry is
restored bitwise from a cached copy and the sensitivity scale sigma is
halved.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import descent as de
from . import flow as fl
from . import mesh as me


class ConfigError(Exception):
    pass


@dataclass
class OptimConfig:
    length: float = 20.0
    height: float = 6.0
    obstacle_edge: float = 0.4
    n0: int = 3
    growth: float = 1.2
    hmax: float = 0.8
    levels: int = 1
    nu: float = 0.02
    p_init: float = 2.0
    p_inc: float = 0.19
    p_max: float = 4.8
    eps1: float = 1e-5
    eps2: float = 1e-8
    eps: float = 1e-8
    sigma_min: float = 2.0 ** -20
    min_angle_floor: float = 5.0   # reject trials below this; 0 disables
    max_steps: int = 100
    flow_tol: float = 1e-10
    out_dir: str = "out"
    inner_mode: str = "direct"
    write_vtk: bool = True

    def validate(self) -> None:
        for name in ("eps1", "eps2", "eps", "flow_tol"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.p_max < self.p_init:
            raise ConfigError("p_max must be at least p_init")
        if not 0.0 < self.sigma_min <= 1.0:
            raise ConfigError("sigma_min must lie in (0, 1]")
        if self.levels < 0 or self.max_steps < 0:
            raise ConfigError("levels and max_steps must be non-negative")
        if self.inner_mode not in ("direct", "iterative"):
            raise ConfigError(f"unknown inner_mode {self.inner_mode!r}")


def parse_config(path: str) -> OptimConfig:
    """Flat key=value file with # comments; unknown keys are rejected and
    missing keys take the defaults."""
    known = {f.name: f.type for f in fields(OptimConfig)}
    cfg = OptimConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                parsed = val.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(val)
            elif isinstance(current, float):
                parsed = float(val)
            else:
                parsed = val
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: invalid value for "
                              f"{key!r}: {val!r}") from None
        setattr(cfg, key, parsed)
    cfg.validate()
    return cfg


@dataclass
class StepRecord:
    kind: str          # "accepted" or "rejected"
    step: int
    objective: float
    constraint_inf: float
    min_angle: float
    max_angle: float
    max_radius_ratio: float
    sigma: float
    update_norm: float
    descent_newton_iters: int
    flow_newton_iters: int
    wall_time: float


@dataclass
class RunLog:
    objective_0: float = 0.0
    records: list = field(default_factory=list)
    polygons: list = field(default_factory=list)  # one per accepted step
    exit_status: str = "incomplete"

    @property
    def accepted(self) -> list:
        return [r for r in self.records if r.kind == "accepted"]


def run_optimize(config: OptimConfig, gradient_hook=None,
                 hierarchy: me.GridHierarchy | None = None) -> RunLog:
    """Steepest-descent shape optimization on the benchmark channel.

    ``gradient_hook`` is a test seam: it receives the nodal sensitivity
    before each descent solve and returns a replacement.
    """
    config.validate()
    if hierarchy is None:
        hierarchy = me.generate_benchmark_mesh(
            config.length, config.height, config.obstacle_edge,
            n0=config.n0, growth=config.growth, hmax=config.hmax)
        for _ in range(config.levels):
            me.refine_uniform(hierarchy)
    mesh = hierarchy.finest
    out_dir = config.out_dir
    if config.write_vtk:
        os.makedirs(out_dir, exist_ok=True)

    log = RunLog()

    def flow_state():
        problem = fl.benchmark_problem(mesh, config.nu, config.height)
        return fl.solve_flow(problem, tol=config.flow_tol)

    state = flow_state()
    phi0 = fl.energy_dissipation(state)
    log.objective_0 = phi0

    def dump(step, u, st):
        if not config.write_vtk:
            return
        me.write_vtk(mesh, {"deformation": u,
                            "velocity": st.velocity_nodal(),
                            "pressure": st.pressure_nodal()},
                     os.path.join(out_dir, f"step_{step}.vtk"))

    step = 0
    while step < config.max_steps:
        t_start = time.perf_counter()
        adjoint = fl.solve_adjoint(state)
        G = fl.shape_gradient(state, adjoint)
        if gradient_hook is not None:
            G = gradient_hook(G)
        sigma = 1.0
        accepted_u = None
        while True:
            geo = de.P1Geometry(mesh)
            try:
                u, lam, infos = de.p_continuation(
                    mesh, G, sigma, p_init=config.p_init, p_inc=config.p_inc,
                    p_max=config.p_max, eps=config.eps, eps2=config.eps2,
                    inner_mode=config.inner_mode, geo=geo)
            except de.DescentError:
                # the subproblem itself failed; retry with a milder scale
                log.records.append(StepRecord(
                    kind="rejected", step=step + 1, objective=np.inf,
                    constraint_inf=0.0, min_angle=0.0, max_angle=0.0,
                    max_radius_ratio=0.0, sigma=sigma, update_norm=0.0,
                    descent_newton_iters=0, flow_newton_iters=0,
                    wall_time=time.perf_counter() - t_start))
                sigma *= 0.5
                if sigma < config.sigma_min:
                    log.exit_status = "stalled"
                    return _finalize(log, config)
                t_start = time.perf_counter()
                continue
            d_iters = sum(info.iterations for _, info in infos)
            u_norm = de.w1p_norm(mesh, u, config.p_max, geo)
            saved = [lvl.nodes for lvl in hierarchy.levels]
            rejected = False
            try:
                me.apply_deformation(hierarchy, u)
            except me.TanglingError:
                rejected = True
                trial_phi = np.inf
                f_iters = 0
            if not rejected and config.min_angle_floor > 0.0 \
                    and me.quality_report(mesh).min_angle < config.min_angle_floor:
                rejected = True
                trial_phi = np.inf
                f_iters = 0
                for lvl, coords in zip(hierarchy.levels, saved):
                    lvl.nodes = coords
            if not rejected:
                trial = flow_state()
                trial_phi = fl.energy_dissipation(trial)
                f_iters = trial.newton_iters
                rejected = trial_phi >= phi0
                if rejected:
                    # bitwise restore of every hierarchy level
                    for lvl, coords in zip(hierarchy.levels, saved):
                        lvl.nodes = coords
            wall = time.perf_counter() - t_start
            if rejected:
                log.records.append(StepRecord(
                    kind="rejected", step=step + 1, objective=trial_phi,
                    constraint_inf=de.constraint_values(mesh, np.zeros_like(u)).norm_inf,
                    min_angle=0.0, max_angle=0.0, max_radius_ratio=0.0,
                    sigma=sigma, update_norm=u_norm,
                    descent_newton_iters=d_iters, flow_newton_iters=f_iters,
                    wall_time=wall))
                sigma *= 0.5
                if sigma < config.sigma_min:
                    log.exit_status = "stalled"
                    return _finalize(log, config)
                t_start = time.perf_counter()
                continue
            # accepted
            phi0 = trial_phi
            state = trial
            step += 1
            quality = me.quality_report(mesh)
            g_now = de.constraint_values(mesh, np.zeros_like(u)).norm_inf
            log.records.append(StepRecord(
                kind="accepted", step=step, objective=phi0,
                constraint_inf=g_now, min_angle=quality.min_angle,
                max_angle=quality.max_angle,
                max_radius_ratio=quality.max_radius_ratio, sigma=sigma,
                update_norm=u_norm, descent_newton_iters=d_iters,
                flow_newton_iters=f_iters, wall_time=wall))
            log.polygons.append(me.obstacle_polygon(mesh))
            dump(step, u, state)
            accepted_u = u
            break
        if de.w1p_norm(mesh, accepted_u, config.p_max) < config.eps1:
            log.exit_status = "converged"
            return _finalize(log, config)
    log.exit_status = "max_steps"
    return _finalize(log, config)


def _finalize(log: RunLog, config: OptimConfig) -> RunLog:
    if config.write_vtk:
        write_runlog_csv(log, os.path.join(config.out_dir, "run.csv"))
        if log.polygons:
            pts = log.polygons[-1].points
            with open(os.path.join(config.out_dir, "final_polygon.csv"),
                      "w", encoding="utf-8") as fh:
                fh.write("x,y\n")
                for x, y in pts:
                    fh.write(f"{x:.17g},{y:.17g}\n")
    return log


# wall_time stays out of the artifact so identical runs produce
# bitwise-identical files
_CSV_COLUMNS = ["kind", "step", "objective", "constraint_inf", "min_angle",
                "max_angle", "max_radius_ratio", "sigma", "update_norm",
                "descent_newton_iters", "flow_newton_iters"]


def write_runlog_csv(log: RunLog, path: str) -> None:
    """One row per accepted step and per rejected trial, floats at 17
    significant digits so a round trip reproduces them bitwise."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.17g}"
        return str(v)

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(_CSV_COLUMNS) + "\n")
        for rec in log.records:
            fh.write(",".join(fmt(getattr(rec, c)) for c in _CSV_COLUMNS) + "\n")


def shape_convergence_report(log: RunLog, reference: me.Polygon,
                             samples_per_axis: int = 400) -> list:
    """Symmetric-difference distance of each accepted step's obstacle
    polygon to a reference polygon."""
    return [me.symmetric_difference_area(poly, reference, samples_per_axis)
            for poly in log.polygons]
