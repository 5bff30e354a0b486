import argparse
import math
import os
import sys
import time
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import yaml

from quadforge import __version__
from quadforge.models.field import Grid, segment_values
from quadforge.models.minimizer import (EnergySpec, MinimizeResult, bernoulli_residual, coercivity_bound,
                                        compare_energies, el_residual, l2_norm, lambda_sweep, minimize,
                                        positivity_density, warm_start_sensitivity)
from quadforge.models.quadrature import (potential_match_residual, quadrature_identity_per_wave,
                                         quadrature_identity_residual, radial_herglotz_integral,
                                         radial_quadrature_domain)
from quadforge.models.radial import (RadialParams, RadialSolution, StepProfile, ZeroProfile, check_admissibility,
                                     exact_mass_bound, frequency_threshold, mass_threshold, mollified_parameters,
                                     null_quadrature_radii, ode_residual, radial_du, radial_energy, radial_profile,
                                     radial_solve, radial_u)
from quadforge.models.scattering import (build_contrast, gluing_residual, incident_field, jump_relation_check,
                                         nonradiating_residual)
from quadforge.utils import io
from quadforge.utils.config import Command, RunConfig, build_run_config, parse_overrides
from quadforge.utils.logger import get_logger, set_log_level

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
DEFAULT_LAMBDAS = (0.5, 1.0, 2.0, 3.0, 4.0)
NEGATIVE_CONTROL_SHIFT = 0.1


def _radial_params(config: RunConfig, lam: Optional[float] = None) -> RadialParams:
    values = config.require("a", "b", "r1", "R")
    lam = config.lam if lam is None else lam
    if lam is None:
        raise ValueError(f"Command '{config.command.value}' requires the key 'lambda'.")
    start = config.r1 if config.g_start is None else config.g_start
    profile = StepProfile(value=config.g, start=start) if config.g > 0 else ZeroProfile()
    return RadialParams(n=config.n, lam=lam, g_profile=profile, **values)


def _radial_summary(solution: RadialSolution) -> Dict[str, Any]:
    params = solution.params
    return {"rho": solution.rho, "Rprime": solution.Rprime, "c1": solution.c1,
            "ode_residual": ode_residual(solution), "energy": radial_energy(solution),
            "u_at_rho": radial_u(solution, solution.rho),
            "bernoulli_defect": radial_du(solution, solution.rho) + float(params.g(solution.rho))}


def run_radial(config: RunConfig, out: str) -> Dict[str, Any]:
    solution = radial_solve(_radial_params(config))
    io.write_table(os.path.join(out, "radial_profile.csv"), ("r", "u", "du"), radial_profile(solution))
    return _radial_summary(solution)


def run_thresholds(config: RunConfig, out: str) -> Dict[str, Any]:
    values = config.require("beta", "eps", "b", "b0", "mass")
    n = config.n
    k_max = frequency_threshold(n, values["beta"], values["b"], values["mass"])
    k = config.k if config.k is not None else 0.9 * k_max
    mollified = mollified_parameters(n, k, values["beta"], values["eps"], values["mass"], values["b"], values["b0"])
    report = check_admissibility(n, mollified.lam, mollified.a, mollified.a0, mollified.b, mollified.b0,
                                 mollified.r1, mollified.r2, mollified.R)
    return {"mass_threshold": mass_threshold(n, values["b0"], values["eps"]),
            "exact_mass_bound": exact_mass_bound(n, k, values["b0"], values["eps"]),
            "k_max": k_max, "k": k, "mollified": mollified,
            "admissible": report.passed, "admissibility": report}


def _grid_problem(config: RunConfig, lam: Optional[float] = None):
    params = _radial_params(config, lam)
    grid = Grid(R=params.R, m=config.m)
    return params, grid, EnergySpec.from_radial(params, grid)


def positivity_radius(result: MinimizeResult) -> float:
    """Median distance of the free-boundary segment midpoints from the origin."""
    if result.boundary is None:
        return 0.0
    return float(np.median(np.linalg.norm(result.boundary.midpoints, axis=1)))


def _minimize_summary(spec: EnergySpec, result: MinimizeResult, solution: RadialSolution) -> Dict[str, Any]:
    grid = spec.grid
    radius = positivity_radius(result)
    oracle_energy = radial_energy(solution)
    density = positivity_density(spec, result)
    return {"energy": result.energy, "sweeps": result.sweeps, "fixed_point_gap": result.fixed_point_gap,
            "positive_nodes": int(result.positivity_mask.sum()), "l2_norm": l2_norm(result.u),
            "coercivity_bound": coercivity_bound(spec, l2_norm(result.u)),
            "positivity_radius": radius, "oracle_rho": solution.rho,
            "radius_error_cells": abs(radius - solution.rho) / grid.h,
            "oracle_energy": oracle_energy,
            "energy_relative_error": abs(result.energy - oracle_energy) / abs(oracle_energy),
            "positivity_density": density, "h": grid.h}


def _write_minimizer(out: str, result: MinimizeResult):
    io.write_field(os.path.join(out, "u.csv"), result.u)
    if result.boundary is not None:
        io.write_boundary(os.path.join(out, "boundary.csv"), result.boundary)
    io.write_models(os.path.join(out, "energy_log.csv"), ("sweep", "energy", "positive_nodes"), result.energy_log)


def run_minimize(config: RunConfig, out: str) -> Dict[str, Any]:
    params, grid, spec = _grid_problem(config)
    result = minimize(spec, sweep_order=config.sweep_order, max_sweeps=config.max_sweeps)
    _write_minimizer(out, result)
    return _minimize_summary(spec, result, radial_solve(params))


def comparison_trials(spec: EnergySpec, trials: int, seed: int) -> Dict[str, Any]:
    """Check the lattice inequality on random admissible pairs for spec at half its lambda against spec."""
    rng = np.random.default_rng(seed)
    grid = spec.grid
    lower = spec.with_lambda(0.5 * spec.lam)
    held = 0
    for _ in range(trials):
        u1, u2 = (grid.field(np.maximum(rng.normal(0.0, 1.0, grid.shape), 0.0)) for _ in range(2))
        held += compare_energies(lower, spec, u1, u2).holds
    logger.info(f"Comparison inequality held in {held} of {trials} trials (seed {seed})")
    return {"trials": trials, "held": held, "seed": seed}


def run_verify(config: RunConfig, out: str) -> Dict[str, Any]:
    params, grid, spec = _grid_problem(config)
    solution = radial_solve(params)
    result = minimize(spec, sweep_order=config.sweep_order, max_sweeps=config.max_sweeps)
    _write_minimizer(out, result)
    summary = _minimize_summary(spec, result, solution)
    summary["el_residual"] = el_residual(spec, result)
    summary["warm_start_gap"] = warm_start_sensitivity(spec, result, sweep_order=config.sweep_order)
    summary["comparison"] = comparison_trials(spec, config.comparison_trials, config.seed)
    if result.boundary is not None:
        g = segment_values(spec.g, result.boundary)
        summary["bernoulli_residual"] = bernoulli_residual(spec, result)
        summary["jump_residual"] = jump_relation_check(result.u, result.boundary, g)

    k = math.sqrt(params.lam)
    ring_radius = config.ring_radius
    if ring_radius is None:
        ring_radius = max(1.25 * params.R, solution.rho + NEGATIVE_CONTROL_SHIFT + 10 * grid.h)
    quadrature = {}
    for label, rho in (("oracle", None), ("negative_control", solution.rho + NEGATIVE_CONTROL_SHIFT)):
        domain = radial_quadrature_domain(solution, grid, config.circle_nodes, rho=rho)
        quadrature[label] = {
            "identity_residual": quadrature_identity_residual(domain, k, config.num_waves),
            "potential_residual": potential_match_residual(domain, k, ring_radius, config.ring_points,
                                                           threads=config.threads),
            "per_direction": quadrature_identity_per_wave(domain, k, config.num_waves)}
    summary["quadrature"] = quadrature
    summary["ring_radius"] = ring_radius
    # Layer potentials are checked off the boundary only.
    summary["exterior_only"] = True
    return summary


def run_nonscatter(config: RunConfig, out: str) -> Dict[str, Any]:
    params, grid, spec = _grid_problem(config)
    result = minimize(spec, sweep_order=config.sweep_order, max_sweeps=config.max_sweeps)
    if result.boundary is None:
        raise ValueError("Non-scattering construction needs a nonempty positivity set.")
    k = math.sqrt(params.lam)
    u0 = incident_field(2, k, grid)
    contrast = build_contrast(result, spec, k, u0, config.delta_cells * grid.h)
    g = segment_values(spec.g, result.boundary)
    residual = nonradiating_residual(contrast, result.boundary, g, k, config.num_directions, threads=config.threads)
    gluing = gluing_residual(contrast, result.boundary, g, k)
    io.write_field(os.path.join(out, "rho.csv"), contrast.rho)
    io.write_field(os.path.join(out, "v.csv"), contrast.v)
    io.write_boundary(os.path.join(out, "boundary.csv"), result.boundary)
    return {"nonradiating_residual": residual, "band": contrast.band_statistics(),
            "gluing": {"domain_residual": gluing.domain_residual, "surface_mass": gluing.surface_mass,
                       "surface_target": gluing.surface_target, "surface_defect": gluing.surface_defect},
            "energy": result.energy, "sweeps": result.sweeps, "h": grid.h}


def run_sweep_lambda(config: RunConfig, out: str) -> Dict[str, Any]:
    lambdas = config.lambdas or list(DEFAULT_LAMBDAS)
    _, _, spec = _grid_problem(config, lam=config.lam if config.lam is not None else lambdas[0])
    rows = lambda_sweep(spec, lambdas, sweep_order=config.sweep_order)
    io.write_table(os.path.join(out, "lambda_sweep.csv"), ("lambda", "l2_norm", "energy"),
                   np.array([[row.lam, row.l2_norm, row.energy] for row in rows]))
    return {"rows": rows}


def run_null_radii(config: RunConfig, out: str) -> Dict[str, Any]:
    k = config.require("k")["k"]
    radii = null_quadrature_radii(config.n, k, config.count)
    return {"radii": radii, "herglotz": [radial_herglotz_integral(config.n, k, radius) for radius in radii]}


PIPELINES: Dict[Command, Callable[[RunConfig, str], Dict[str, Any]]] = {
    Command.radial: run_radial,
    Command.thresholds: run_thresholds,
    Command.minimize: run_minimize,
    Command.verify: run_verify,
    Command.nonscatter: run_nonscatter,
    Command.sweep_lambda: run_sweep_lambda,
    Command.null_radii: run_null_radii,
}


def run(config: RunConfig) -> Dict[str, Any]:
    """Execute the configured pipeline and write its manifest; returns the manifest document."""
    out = io.ensure_dir(config.output_dir)
    started = time.perf_counter()
    logger.info(f"Running {config.command.value} into {out}")
    results = PIPELINES[config.command](config, out)
    manifest = {"command": config.command.value,
                "inputs": config.model_dump(mode="json", by_alias=True, exclude={"out"}),
                "version": __version__, "results": results,
                "wall_time_seconds": time.perf_counter() - started}
    io.write_json(os.path.join(out, "manifest.json"), manifest)
    logger.info(f"Finished {config.command.value} in {manifest['wall_time_seconds']:.2f}s")
    return manifest


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadforge", allow_abbrev=False,
                                     description="Construct and verify hybrid quadrature domains for the "
                                                 "Helmholtz operator.")
    parser.add_argument("command", choices=[command.value for command in Command])
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--out", help="Output directory (defaults to $QUADFORGE_OUT)")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--log-level", default="INFO")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    set_log_level(args.log_level)
    try:
        overrides = parse_overrides(extra)
        for key in ("out", "threads", "seed"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        config = build_run_config(args.command, args.config, overrides)
        run(config)
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Cannot read or write run files: {e}")
        return EXIT_INVALID
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID
    except RuntimeError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
