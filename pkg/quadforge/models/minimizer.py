from enum import Enum
from typing import Any, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from quadforge.errors import EmptyDomainError, NoConvergenceError
from quadforge.models.field import (BoundaryCurve, Grid, ScalarField, check_same_grid, discrete_fundamental_tone,
                                    disk_coverage, distance_to_zero_set, extract_boundary, helmholtz_solve,
                                    jump_deviation, laplacian, segment_values)
from quadforge.models.radial import RadialParams
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

LAMBDA_SAFETY = 0.9
POSITIVITY_SCALE = 1e-12
ENERGY_TOLERANCE = 1e-12
MAX_SWEEPS = 100_000
BARRIER_SLACK = 1e-10
COMPARISON_SLACK = 1e-10
DENSITY_RADIUS_CELLS = 8
WARM_START_TOLERANCE = 1e-6
# Parts of the boundary layer, and numbers of whole layers, tried by each support move.
MOVE_FRACTIONS = (0.25, 0.5, 1.0)
MOVE_LAYERS = (2, 4)


class SweepOrder(Enum):
    lexicographic = "lexicographic"
    red_black = "red_black"


class EnergySpec(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, arbitrary_types_allowed=True)

    lam: float = Field(alias="lambda")
    f: ScalarField
    g: ScalarField

    def __init__(self, **data: Any):
        f, g = data.get("f"), data.get("g")
        if isinstance(f, ScalarField) and isinstance(g, ScalarField):
            check_same_grid(f, g)
        super().__init__(**data)

    @model_validator(mode="after")
    def _check_spec(self) -> "EnergySpec":
        check_same_grid(self.f, self.g)
        if np.any(self.g.values < 0):
            raise ValueError("Bernoulli density g must be nonnegative.")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}.")
        bound = LAMBDA_SAFETY * discrete_fundamental_tone(self.grid, solver="direct")
        if self.lam >= bound:
            raise ValueError(f"lambda={self.lam} violates the safety bound lambda < {LAMBDA_SAFETY} * discrete "
                             f"fundamental tone = {bound:.10g}.")
        return self

    @property
    def grid(self) -> Grid:
        return self.f.grid

    @property
    def positivity_threshold(self) -> float:
        return POSITIVITY_SCALE * float(np.max(np.abs(self.f.values))) * self.grid.R ** 2

    def with_lambda(self, lam: float) -> "EnergySpec":
        return EnergySpec(lam=lam, f=self.f, g=self.g)

    @classmethod
    def from_radial(cls, params: RadialParams, grid: Grid) -> "EnergySpec":
        """f = a * 1{|x| < r1} - b sampled by exact cell coverage, g = g_profile(|x|)."""
        if params.n != 2:
            raise ValueError(f"Grid problems are two-dimensional, got n={params.n}.")
        f = grid.field(params.a * disk_coverage(grid, params.r1) - params.b)
        g = grid.field(params.g(grid.radius))
        return cls(lam=params.lam, f=f, g=g)


class EnergyLogRow(BaseModel):
    sweep: int
    energy: float
    positive_nodes: int
    l2_norm: float


class MinimizeResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: ScalarField
    energy: float
    sweeps: int
    positivity_mask: np.ndarray
    boundary: Optional[BoundaryCurve] = None
    energy_log: List[EnergyLogRow] = []
    fixed_point_gap: float = 0.0

    @classmethod
    def from_field(cls, spec: EnergySpec, u: ScalarField, sweeps: int = 0,
                   energy_log: Optional[List[EnergyLogRow]] = None, fixed_point_gap: float = 0.0
                   ) -> "MinimizeResult":
        positive = u.positive_set(spec.positivity_threshold)
        boundary = extract_boundary(u.grid, positive) if positive.any() else None
        return cls(u=u, energy=energy(spec, u), sweeps=sweeps, positivity_mask=positive, boundary=boundary,
                   energy_log=energy_log or [], fixed_point_gap=fixed_point_gap)


def _dirichlet_energy(values: np.ndarray) -> float:
    return float(np.sum(np.diff(values, axis=0) ** 2) + np.sum(np.diff(values, axis=1) ** 2))


def energy(spec: EnergySpec, u: ScalarField, threshold: Optional[float] = None) -> float:
    """Discrete functional with forward-difference gradients.

    Nodes count as positive above `threshold`, which defaults to `spec.positivity_threshold`.
    """
    check_same_grid(spec.f, u)
    if not u.is_admissible:
        raise ValueError("Energy is defined on admissible (nonnegative) fields only.")
    h2 = spec.grid.h ** 2
    interior = ~spec.grid.dirichlet_mask
    values = u.values[interior]
    positive = values > (spec.positivity_threshold if threshold is None else threshold)
    pointwise = (-spec.lam * values ** 2 - 2 * spec.f.values[interior] * values
                 + spec.g.values[interior] ** 2 * positive)
    return _dirichlet_energy(u.values) + float(np.sum(pointwise)) * h2


def l2_norm(u: ScalarField) -> float:
    return float(np.sqrt(np.sum(u.values ** 2)) * u.grid.h)


def barrier_field(spec: EnergySpec) -> ScalarField:
    """||f_+||_inf * v with (Laplace_h + lambda) v = -1 and v = 0 on the mask."""
    grid = spec.grid
    f_plus = float(np.max(np.maximum(spec.f.values, 0.0)))
    if f_plus == 0:
        return grid.zeros()
    v = helmholtz_solve(grid, spec.lam, -np.ones(grid.shape))
    return grid.field(np.maximum(f_plus * v, 0.0))


def coercivity_bound(spec: EnergySpec, l2: float) -> float:
    """Lower bound (c/2)||u||^2 - 2|Omega| ||f_+||^2 / c valid for every admissible u."""
    tone = discrete_fundamental_tone(spec.grid, solver="direct")
    c = (1 - spec.lam / tone) * min(1.0, tone)
    volume = float(np.sum(~spec.grid.dirichlet_mask)) * spec.grid.h ** 2
    f_plus = float(np.max(np.maximum(spec.f.values, 0.0)))
    return c / 2 * l2 ** 2 - 2 * volume * f_plus ** 2 / c


class _SweepState:
    """Padded working copy of u plus the per-node coefficients of the exact coordinate update."""

    def __init__(self, spec: EnergySpec, initial: ScalarField):
        grid = spec.grid
        self.grid = grid
        self.width = grid.m + 2
        self.alpha = 4.0 - spec.lam * grid.h ** 2
        self.tau = spec.positivity_threshold
        interior = ~grid.dirichlet_mask
        i, j = np.nonzero(interior)
        self.flat_index = ((i + 1) * self.width + (j + 1)).tolist()
        h2 = grid.h ** 2
        self.fh = (spec.f.values[interior] * h2).tolist()
        self.gamma = (spec.g.values[interior] ** 2 * h2).tolist()
        self.fh_array = np.zeros((self.width, self.width))
        self.gamma_array = np.zeros((self.width, self.width))
        self.fh_array[1:-1, 1:-1][interior] = spec.f.values[interior] * h2
        self.gamma_array[1:-1, 1:-1][interior] = spec.g.values[interior] ** 2 * h2
        self.interior_padded = np.zeros((self.width, self.width), dtype=bool)
        self.interior_padded[1:-1, 1:-1] = interior
        self.load(initial)

    def load(self, u: ScalarField):
        padded = np.zeros((self.width, self.width))
        padded[1:-1, 1:-1] = u.values
        self.values = padded.ravel().tolist()

    def field(self) -> ScalarField:
        padded = np.asarray(self.values).reshape(self.width, self.width)
        return self.grid.field(padded[1:-1, 1:-1])

    def sweep_sequential(self, reverse: bool):
        u = self.values
        w, alpha, tau = self.width, self.alpha, self.tau
        nodes = zip(self.flat_index, self.fh, self.gamma)
        for p, fh, gamma in (reversed(list(nodes)) if reverse else nodes):
            t = (u[p - 1] + u[p + 1] + u[p - w] + u[p + w] + fh) / alpha
            if t > 0 and (gamma if t > tau else 0.0) - alpha * t * t < 0:
                u[p] = t
            else:
                u[p] = 0.0

    def sweep_red_black(self):
        u = np.asarray(self.values).reshape(self.width, self.width)
        parity = np.add.outer(np.arange(self.width), np.arange(self.width)) % 2
        for colour in (0, 1):
            neighbours = np.zeros_like(u)
            neighbours[1:-1, 1:-1] = u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2]
            t = (neighbours + self.fh_array) / self.alpha
            cost = np.where(t > self.tau, self.gamma_array, 0.0) - self.alpha * t * t
            accepted = np.where((t > 0) & (cost < 0), t, 0.0)
            update = self.interior_padded & (parity == colour)
            u[update] = accepted[update]
        self.values = u.ravel().tolist()


def _support_candidates(spec: EnergySpec, support: np.ndarray) -> List[ScalarField]:
    """Exact minimizers of the quadratic part on a support: clipped, and shrunk until it stays positive."""
    grid = spec.grid
    support = support & ~grid.dirichlet_mask
    rhs = -spec.f.values
    candidates = []
    while support.any():
        solution = helmholtz_solve(grid, spec.lam, rhs, support)
        still_positive = solution > spec.positivity_threshold
        candidates.append(grid.field(np.maximum(solution, 0.0)))
        if np.all(still_positive[support]):
            break
        support &= still_positive
    return candidates


def _ranked_subsets(nodes: np.ndarray, score: np.ndarray) -> List[np.ndarray]:
    """Masks holding the lowest-scoring MOVE_FRACTIONS of the given nodes."""
    index = np.flatnonzero(nodes)
    if index.size == 0:
        return []
    order = index[np.argsort(score.ravel()[index], kind="stable")]
    subsets = []
    for fraction in MOVE_FRACTIONS:
        chosen = np.zeros(nodes.size, dtype=bool)
        chosen[order[:max(1, int(round(fraction * order.size)))]] = True
        subsets.append(chosen.reshape(nodes.shape))
    return subsets


def _boundary_moves(spec: EnergySpec, u: ScalarField) -> List[np.ndarray]:
    """Supports with the free boundary pushed in or out by part of a layer or by whole layers.

    Inward moves drop the boundary-layer nodes with the smallest values first; outward moves add the outside
    neighbours with the largest coordinate-update value first.
    """
    grid = spec.grid
    interior = ~grid.dirichlet_mask
    support = u.positive_set(spec.positivity_threshold)
    if not support.any():
        return []
    layer = support & ndimage.binary_dilation(~support)
    shell = interior & ~support & ndimage.binary_dilation(support)
    padded = np.pad(u.values, 1)
    neighbours = padded[2:, 1:-1] + padded[:-2, 1:-1] + padded[1:-1, 2:] + padded[1:-1, :-2]
    predicted = (neighbours + spec.f.values * grid.h ** 2) / (4.0 - spec.lam * grid.h ** 2)
    moves = [support & ~removed for removed in _ranked_subsets(layer, u.values)]
    moves += [support | added for added in _ranked_subsets(shell, -predicted)]
    for layers in MOVE_LAYERS:
        moves.append(support & ~ndimage.binary_dilation(~support, iterations=layers))
        moves.append(interior & ndimage.binary_dilation(support, iterations=layers))
    return moves


def _log_row(spec: EnergySpec, u: ScalarField, sweep: int, value: float) -> EnergyLogRow:
    positive = int(np.count_nonzero(u.positive_set(spec.positivity_threshold)))
    return EnergyLogRow(sweep=sweep, energy=value, positive_nodes=positive, l2_norm=l2_norm(u))


def minimize(spec: EnergySpec, initial: Optional[ScalarField] = None,
             sweep_order: SweepOrder = SweepOrder.lexicographic, max_sweeps: int = MAX_SWEEPS) -> MinimizeResult:
    """Exact coordinate minimization started from the barrier field.

    Each iteration runs a forward and a reverse sweep, then tries the exact solve on the current positivity set,
    then moves the free boundary in or out (see _boundary_moves) until no move lowers the energy. A solve or a
    move is kept only when it lowers the energy. Stops once an iteration lowers the energy by less than
    ENERGY_TOLERANCE * |energy| without changing the positivity set.
    """
    grid = spec.grid
    barrier = barrier_field(spec)
    start = barrier if initial is None else grid.field(np.maximum(initial.values, barrier.values))
    state = _SweepState(spec, start)
    u = start
    current = energy(spec, u)
    log = [_log_row(spec, u, 0, current)]
    sweeps = 0
    support = u.positive_set(spec.positivity_threshold)

    def run_sweep(reverse: bool) -> float:
        nonlocal sweeps, u, current
        if sweep_order == SweepOrder.red_black:
            state.sweep_red_black()
        else:
            state.sweep_sequential(reverse)
        sweeps += 1
        u = state.field()
        value = energy(spec, u)
        if value > current + ENERGY_TOLERANCE * max(abs(current), 1.0):
            raise RuntimeError(f"Energy increased during sweep {sweeps}: {current} -> {value}.")
        current = value
        log.append(_log_row(spec, u, sweeps, value))
        logger.debug(f"Sweep {sweeps}: energy {value:.15g}, positive nodes {log[-1].positive_nodes}")
        return value

    def accept_best(candidates: List[ScalarField]) -> bool:
        nonlocal u, current
        best, best_energy = None, current - ENERGY_TOLERANCE * max(abs(current), 1.0)
        for candidate in candidates:
            candidate_energy = energy(spec, candidate)
            if candidate_energy < best_energy:
                best, best_energy = candidate, candidate_energy
        if best is None:
            return False
        u, current = best, best_energy
        state.load(u)
        log.append(_log_row(spec, u, sweeps, current))
        return True

    while True:
        before = current
        run_sweep(reverse=False)
        run_sweep(reverse=True)
        accept_best(_support_candidates(spec, u.positive_set(spec.positivity_threshold)))
        moves = 0
        while accept_best([candidate for moved in _boundary_moves(spec, u)
                           for candidate in _support_candidates(spec, moved)]):
            moves += 1
        if moves:
            logger.debug(f"Accepted {moves} support moves after sweep {sweeps}: energy {current:.15g}")
        new_support = u.positive_set(spec.positivity_threshold)
        settled = np.array_equal(new_support, support)
        support = new_support
        if before - current <= ENERGY_TOLERANCE * abs(current) and settled:
            break
        if sweeps >= max_sweeps:
            raise NoConvergenceError(f"Coordinate minimization did not converge within {max_sweeps} sweeps "
                                     f"(energy {current}).", last_iterate=u)
    if current > 0:
        logger.warning(f"Minimizer energy {current} is positive; returning the zero field instead.")
        u, current = grid.zeros(), 0.0
        log.append(_log_row(spec, u, sweeps, current))
    # One more sweep on a copy measures how far u is from a fixed point.
    state.load(u)
    if sweep_order == SweepOrder.red_black:
        state.sweep_red_black()
    else:
        state.sweep_sequential(reverse=False)
    gap = float(np.max(np.abs(state.field().values - u.values)))
    result = MinimizeResult.from_field(spec, u, sweeps=sweeps, energy_log=log, fixed_point_gap=gap)
    _check_barrier(result.u, barrier)
    logger.info(f"Minimized in {sweeps} sweeps: energy {result.energy:.12g}, "
                f"{int(result.positivity_mask.sum())} positive nodes, fixed-point gap {gap:.3g}")
    return result


def _check_barrier(u: ScalarField, barrier: ScalarField):
    slack = BARRIER_SLACK * max(1.0, float(np.max(barrier.values)))
    if np.any(u.values < 0) or np.any(u.values > barrier.values + slack):
        raise RuntimeError("Minimizer violates the barrier bound 0 <= u <= ||f_+|| v.")


def el_residual(spec: EnergySpec, result: MinimizeResult) -> float:
    """Max of |Laplace_h u + lambda u + f| / ||f||_inf over nodes more than 3h from the zero set."""
    u = result.u
    distance = distance_to_zero_set(u, spec.positivity_threshold)
    far = (distance.values > 3 * spec.grid.h) & ~spec.grid.dirichlet_mask
    if not far.any():
        return 0.0
    residual = laplacian(u).values + spec.lam * u.values + spec.f.values
    return float(np.max(np.abs(residual[far])) / np.max(np.abs(spec.f.values)))


def bernoulli_residual(spec: EnergySpec, result: MinimizeResult) -> float:
    """Mean relative deviation of |grad u| on the free boundary from g (absolute when g vanishes there)."""
    if result.boundary is None or result.boundary.size == 0:
        raise EmptyDomainError("Bernoulli residual needs a nonempty positivity set.")
    g = segment_values(spec.g, result.boundary)
    return jump_deviation(result.u, result.boundary, g)


class ComparisonReport(BaseModel):
    j1_min: float
    j2_max: float
    j1_u1: float
    j2_u2: float

    @property
    def holds(self) -> bool:
        return self.j1_min + self.j2_max <= self.j1_u1 + self.j2_u2 + COMPARISON_SLACK


def compare_energies(spec1: EnergySpec, spec2: EnergySpec, u1: ScalarField, u2: ScalarField) -> ComparisonReport:
    check_same_grid(spec1.f, spec2.f, u1, u2)
    if np.any(spec1.f.values > spec2.f.values):
        raise ValueError("Comparison requires f1 <= f2 nodewise.")
    if np.any(spec1.g.values < spec2.g.values):
        raise ValueError("Comparison requires g1 >= g2 nodewise.")
    if spec1.lam > spec2.lam:
        raise ValueError(f"Comparison requires lambda1 <= lambda2, got {spec1.lam} > {spec2.lam}.")
    if not (u1.is_admissible and u2.is_admissible):
        raise ValueError("Comparison requires admissible fields.")
    grid = spec1.grid
    # All four energies count positivity with one cutoff.
    tau = min(spec1.positivity_threshold, spec2.positivity_threshold)
    v = grid.field(np.minimum(u1.values, u2.values))
    w = grid.field(np.maximum(u1.values, u2.values))
    return ComparisonReport(j1_min=energy(spec1, v, tau), j2_max=energy(spec2, w, tau),
                            j1_u1=energy(spec1, u1, tau), j2_u2=energy(spec2, u2, tau))


class SweepRow(BaseModel):
    lam: float
    l2_norm: float
    energy: float


def lambda_sweep(base: EnergySpec, lambdas: Sequence[float],
                 sweep_order: SweepOrder = SweepOrder.lexicographic) -> List[SweepRow]:
    """Minimize for increasing lambda, warm-starting each run from max(previous minimizer, barrier)."""
    lambdas = list(lambdas)
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError(f"lambdas must be strictly increasing, got {lambdas}.")
    rows = []
    previous: Optional[ScalarField] = None
    for lam in lambdas:
        spec = base.with_lambda(lam)
        result = minimize(spec, initial=previous, sweep_order=sweep_order)
        rows.append(SweepRow(lam=lam, l2_norm=l2_norm(result.u), energy=result.energy))
        previous = result.u
    return rows


class DensityReport(BaseModel):
    nodes: int
    min_fraction: float
    max_fraction: float

    @property
    def within_bounds(self) -> bool:
        return 0.01 < self.min_fraction and self.max_fraction < 0.99


def positivity_density(spec: EnergySpec, result: MinimizeResult,
                       radius_cells: int = DENSITY_RADIUS_CELLS) -> Optional[DensityReport]:
    """Positive-node fraction in balls of radius 8h around free-boundary nodes where g > 0."""
    positive = result.positivity_mask
    if not positive.any():
        return None
    offsets = np.arange(-radius_cells, radius_cells + 1)
    footprint = np.add.outer(offsets ** 2, offsets ** 2) <= radius_cells ** 2
    kernel = footprint / footprint.sum()
    fraction = ndimage.convolve(positive.astype(float), kernel, mode="constant")
    edge = positive & ndimage.binary_dilation(~positive) & (spec.g.values > 0)
    if not edge.any():
        return None
    report = DensityReport(nodes=int(edge.sum()), min_fraction=float(fraction[edge].min()),
                           max_fraction=float(fraction[edge].max()))
    if not report.within_bounds:
        logger.warning(f"Positivity density outside (0.01, 0.99): [{report.min_fraction:.3g}, "
                       f"{report.max_fraction:.3g}] over {report.nodes} boundary nodes")
    return report


def warm_start_sensitivity(spec: EnergySpec, result: MinimizeResult,
                           sweep_order: SweepOrder = SweepOrder.lexicographic) -> float:
    """Max nodal gap between result and a rerun started from twice the barrier field.

    A gap well above the sweep tolerance flags a possibly non-unique minimizer for this lambda.
    """
    barrier = barrier_field(spec)
    restart = spec.grid.field(2.0 * barrier.values)
    other = minimize(spec, initial=restart, sweep_order=sweep_order)
    gap = float(np.max(np.abs(other.u.values - result.u.values)))
    if abs(other.energy - result.energy) <= ENERGY_TOLERANCE * max(abs(result.energy), 1.0) and \
            gap > WARM_START_TOLERANCE * max(float(np.max(result.u.values)), 1.0):
        logger.warning(f"Warm starts reach equal energy {result.energy:.12g} with nodal gap {gap:.3g}; "
                       f"the minimizer may not be unique at lambda={spec.lam}.")
    return gap
