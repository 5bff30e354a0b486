import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate, ndimage
from scipy.spatial import cKDTree

from quadforge.errors import NearSingularError
from quadforge.models.bessel import (BesselOrder, bessel_j, bessel_y, bessel_zeros, check_dimension,
                                     orders_for_dimension)
from quadforge.models.field import BoundaryCurve, Grid, ScalarField, cell_coverage, check_same_grid, disk_coverage
from quadforge.models.processor import map_chunks
from quadforge.models.radial import RadialSolution, mvt_constant
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

STANDOFF = 5.0
POINTS_PER_CHUNK = 16
DEFAULT_CIRCLE_NODES = 2048
_J0 = BesselOrder(twice_order=0)


def fundamental_solution(n: int, k: float, r):
    """Real fundamental solution of -(Laplace + k^2): -Y_0(kr)/4 in the plane, cos(kr)/(4 pi r) in space."""
    check_dimension(n)
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0):
        raise ValueError("The fundamental solution is singular at r = 0.")
    if n == 2:
        values = -0.25 * bessel_y(_J0, k * r_arr)
    else:
        values = np.cos(k * r_arr) / (4 * math.pi * r_arr)
    if np.ndim(r) == 0:
        return float(values)
    return values


def circle_boundary(center: Tuple[float, float], radius: float, nodes: int = DEFAULT_CIRCLE_NODES
                    ) -> BoundaryCurve:
    """Exact circle sampled at equispaced angles; summing over it is the trapezoid rule."""
    if radius <= 0 or nodes < 3:
        raise ValueError(f"circle_boundary needs radius > 0 and at least 3 nodes, got {radius}, {nodes}.")
    theta = 2 * math.pi * np.arange(nodes) / nodes
    normals = np.column_stack([np.cos(theta), np.sin(theta)])
    return BoundaryCurve(midpoints=np.asarray(center, dtype=float) + radius * normals,
                         lengths=np.full(nodes, 2 * math.pi * radius / nodes), normals=normals,
                         loop_index=np.zeros(nodes, dtype=np.int64), closed=True)


def _as_points(points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != 2:
        raise ValueError(f"Evaluation points must be 2-vectors, got shape {points.shape}.")
    return points


def _potential_chunk(payload) -> np.ndarray:
    k, sources, weights, points = payload
    out = np.empty(len(points))
    for i, point in enumerate(points):
        distance = np.hypot(sources[:, 0] - point[0], sources[:, 1] - point[1])
        out[i] = float(np.dot(fundamental_solution(2, k, distance), weights))
    return out


def _sum_potential(k: float, sources: np.ndarray, weights: np.ndarray, points: np.ndarray, threads: int,
                   name: str) -> np.ndarray:
    if len(sources) == 0:
        return np.zeros(len(points))
    payloads = [(k, sources, weights, points[start:start + POINTS_PER_CHUNK])
                for start in range(0, len(points), POINTS_PER_CHUNK)]
    return np.concatenate(map_chunks(_potential_chunk, payloads, instances=threads, name=name))


def _check_standoff(sources: np.ndarray, points: np.ndarray, standoff: float, what: str):
    if len(sources) == 0:
        return
    distance, _ = cKDTree(sources).query(points)
    if np.min(distance) < standoff:
        raise NearSingularError(f"Evaluation point at distance {np.min(distance):.6g} from the {what}; "
                                f"at least {standoff:.6g} is required.")


def volume_potential(density: ScalarField, k: float, points, threads: int = 1) -> np.ndarray:
    """Sum of Psi_k(|p - y|) density(y) h^2 over the support nodes, per point p."""
    grid = density.grid
    points = _as_points(points)
    support = density.values != 0
    x, y = grid.coords
    sources = np.column_stack([x[support], y[support]])
    _check_standoff(sources, points, STANDOFF * grid.h, "density support")
    return _sum_potential(k, sources, density.values[support] * grid.h ** 2, points, threads, "volume")


def layer_potential(boundary: BoundaryCurve, g, k: float, points, threads: int = 1) -> np.ndarray:
    """Midpoint-rule single layer sum of Psi_k(|p - m|) g len over the segments."""
    points = _as_points(points)
    g = np.broadcast_to(np.asarray(g, dtype=float), (boundary.size,))
    if boundary.size == 0 or not np.any(g):
        return np.zeros(len(points))
    _check_standoff(boundary.midpoints, points, STANDOFF * float(np.max(boundary.lengths)), "boundary curve")
    return _sum_potential(k, boundary.midpoints, g * boundary.lengths, points, threads, "layer")


class QuadratureDomain(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mask: np.ndarray
    boundary: BoundaryCurve
    g_boundary: np.ndarray
    h_volume: ScalarField
    mu: ScalarField

    @model_validator(mode="after")
    def _check_domain(self) -> "QuadratureDomain":
        grid = check_same_grid(self.h_volume, self.mu)
        if self.mask.shape != grid.shape:
            raise ValueError(f"Domain mask shape {self.mask.shape} does not match grid shape {grid.shape}.")
        if self.g_boundary.shape != (self.boundary.size,):
            raise ValueError("g_boundary needs one value per boundary segment.")
        if np.any(self.g_boundary < 0):
            raise ValueError("g_boundary must be nonnegative.")
        if np.any(self.h_volume.values[self.mask] < 0):
            raise ValueError("h_volume must be nonnegative on the domain.")
        if np.any(self.mu.values[~self.mask] != 0) or np.any(self.h_volume.values[~self.mask] != 0):
            raise ValueError("mu and h_volume must vanish outside the domain mask.")
        if not self.boundary.closed:
            raise ValueError("The domain boundary must be closed.")
        return self

    @property
    def grid(self) -> Grid:
        return self.mu.grid


class FarFieldSamples(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    directions: np.ndarray
    values: np.ndarray

    @model_validator(mode="after")
    def _check_directions(self) -> "FarFieldSamples":
        if len(self.directions) and np.max(np.abs(np.linalg.norm(self.directions, axis=1) - 1)) > 1e-12:
            raise ValueError("Far-field directions must be unit vectors.")
        if self.values.shape != (len(self.directions),):
            raise ValueError("Expected one far-field value per direction.")
        return self

    def pattern(self, n: int, k: float) -> np.ndarray:
        """Far-field pattern of the radiated wave: gamma_{n,k} times the samples."""
        return gamma_constant(n, k) * self.values


def unit_directions(count: int) -> np.ndarray:
    theta = 2 * math.pi * np.arange(count) / count
    return np.column_stack([np.cos(theta), np.sin(theta)])


def _herglotz_chunk(payload) -> np.ndarray:
    k, sources, weights, directions = payload
    out = np.empty(len(directions), dtype=complex)
    for i, direction in enumerate(directions):
        phase = k * (sources @ direction)
        out[i] = complex(float(np.dot(np.cos(phase), weights)), -float(np.dot(np.sin(phase), weights)))
    return out


def herglotz_integral(volume_density: Optional[ScalarField], boundary: Optional[BoundaryCurve], g, k: float,
                      directions, threads: int = 1) -> FarFieldSamples:
    """Per direction d: sum of exp(-i k d.y) over the volume source plus the surface source."""
    directions = _as_points(directions)
    source_points, weights = [], []
    if volume_density is not None:
        grid = volume_density.grid
        support = volume_density.values != 0
        x, y = grid.coords
        source_points.append(np.column_stack([x[support], y[support]]))
        weights.append(volume_density.values[support] * grid.h ** 2)
    if boundary is not None and boundary.size:
        g = np.broadcast_to(np.asarray(g, dtype=float), (boundary.size,))
        source_points.append(boundary.midpoints)
        weights.append(g * boundary.lengths)
    if not source_points or sum(len(w) for w in weights) == 0:
        return FarFieldSamples(directions=directions, values=np.zeros(len(directions), dtype=complex))
    sources = np.vstack(source_points)
    weights = np.concatenate(weights)
    payloads = [(k, sources, weights, directions[start:start + POINTS_PER_CHUNK])
                for start in range(0, len(directions), POINTS_PER_CHUNK)]
    values = np.concatenate(map_chunks(_herglotz_chunk, payloads, instances=threads, name="herglotz"))
    return FarFieldSamples(directions=directions, values=values)


def radial_herglotz_integral(n: int, k: float, radius: float) -> float:
    """Direction-independent Herglotz integral of the ball indicator by 1-D radial quadrature."""
    nu0, _ = orders_for_dimension(n)
    sphere = 2 * math.pi ** (n / 2) / math.gamma(n / 2)

    def integrand(s: float) -> float:
        # Angular average of exp(-i k d.y) over the sphere of radius s.
        if s == 0:
            return 0.0
        return (math.gamma(n / 2) * (2 / (k * s)) ** nu0.nu * bessel_j(nu0, k * s)) * s ** (n - 1)

    # Break the interval at the sign changes so each piece is integrated without cancellation.
    zeros = [zero / k for zero in bessel_zeros(nu0, int(k * radius / math.pi) + 2)]
    breaks = [zero for zero in zeros if 0 < zero < radius]
    value, _ = integrate.quad(integrand, 0.0, radius, points=breaks or None, limit=400, epsabs=1e-12,
                              epsrel=1e-12)
    return sphere * value


def gamma_constant(n: int, k: float) -> complex:
    check_dimension(n)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}.")
    return (np.exp(-1j * (n - 3) * math.pi / 4) / (2 * (2 * math.pi) ** ((n - 1) / 2))
            * k ** ((n - 3) / 2))


def mollify_point_mass(grid: Grid, k: float, mass: float, radius: float,
                       center: Tuple[float, float] = (0.0, 0.0)) -> ScalarField:
    """Point mass averaged over B_radius(center) with the Helmholtz mean-value normalization."""
    return grid.field(mass / mvt_constant(2, k, radius) * disk_coverage(grid, radius, center))


def mollify(density: ScalarField, k: float, radius: float) -> ScalarField:
    """Convolution of a density with 1_{B_radius} / c(2, k, radius)."""
    grid = density.grid
    cells = int(math.ceil(radius / grid.h)) + 1
    offsets = grid.h * np.arange(-cells, cells + 1)
    dx, dy = np.meshgrid(offsets, offsets, indexing="ij")
    kernel = cell_coverage(dx, dy, grid.h, radius) / mvt_constant(2, k, radius)
    return grid.field(ndimage.convolve(density.values, kernel, mode="constant") * grid.h ** 2)


def radial_quadrature_domain(solution: RadialSolution, grid: Grid, nodes: int = DEFAULT_CIRCLE_NODES,
                             rho: Optional[float] = None) -> QuadratureDomain:
    """Hybrid domain built from a radial solution: mu = a 1_{B_r1}, h = b on B_rho, g = g(rho) on the circle.

    Passing rho different from the solution's radius gives a deliberately wrong domain.
    """
    params = solution.params
    radius = solution.rho if rho is None else rho
    coverage = disk_coverage(grid, radius)
    mask = (coverage > 0) & ~grid.dirichlet_mask
    boundary = circle_boundary((0.0, 0.0), radius, nodes)
    g_value = float(params.g(radius))
    return QuadratureDomain(mask=mask, boundary=boundary, g_boundary=np.full(nodes, g_value),
                            h_volume=grid.field(params.b * coverage),
                            mu=grid.field(params.a * disk_coverage(grid, params.r1)))


def _plane_wave_terms(qd: QuadratureDomain, k: float, num_waves: int) -> List[Tuple[float, float]]:
    """(|defect|, scale) per test function cos(k x.theta_j), sin(k x.theta_j)."""
    grid = qd.grid
    x, y = grid.coords
    h2 = grid.h ** 2
    rows = []
    for direction in unit_directions(num_waves) if num_waves > 0 else []:
        phase = k * (x * direction[0] + y * direction[1])
        boundary_phase = k * (qd.boundary.midpoints @ direction)
        for wave, boundary_wave in ((np.cos(phase), np.cos(boundary_phase)),
                                    (np.sin(phase), np.sin(boundary_phase))):
            mu_term = float(np.sum(wave * qd.mu.values)) * h2
            h_term = float(np.sum(wave * qd.h_volume.values)) * h2
            g_term = float(np.dot(boundary_wave, qd.g_boundary * qd.boundary.lengths))
            rows.append((abs(mu_term - h_term - g_term), abs(mu_term) + abs(h_term) + 1e-30))
    return rows


def quadrature_identity_per_wave(qd: QuadratureDomain, k: float, num_waves: int) -> List[float]:
    return [defect / scale for defect, scale in _plane_wave_terms(qd, k, num_waves)]


def quadrature_identity_residual(qd: QuadratureDomain, k: float, num_waves: int) -> float:
    """max |int w dmu - int_D w h - int_dD w g| / max scale over plane-wave test functions."""
    rows = _plane_wave_terms(qd, k, num_waves)
    if not rows:
        return 0.0
    return max(defect for defect, _ in rows) / max(scale for _, scale in rows)


def ring_points(radius: float, count: int) -> np.ndarray:
    return radius * unit_directions(count)


def potential_match_residual(qd: QuadratureDomain, k: float, ring_radius: float, num_points: int,
                             threads: int = 1) -> float:
    """max over a ring of |Psi*mu - Psi*(h 1_D) - SL(g)| / max |Psi*mu|."""
    grid = qd.grid
    x, y = grid.coords
    extent = float(np.max(np.hypot(x[qd.mask], y[qd.mask]))) if qd.mask.any() else 0.0
    if ring_radius < extent + STANDOFF * grid.h:
        raise NearSingularError(f"Ring radius {ring_radius} needs clearance {STANDOFF}h from the domain "
                                f"(extent {extent:.6g}).")
    points = ring_points(ring_radius, num_points)
    mu_potential = volume_potential(qd.mu, k, points, threads)
    h_potential = volume_potential(qd.h_volume, k, points, threads)
    layer = layer_potential(qd.boundary, qd.g_boundary, k, points, threads)
    scale = float(np.max(np.abs(mu_potential)))
    if scale == 0:
        return float(np.max(np.abs(h_potential + layer)))
    return float(np.max(np.abs(mu_potential - h_potential - layer)) / scale)
