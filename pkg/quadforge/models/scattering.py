import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from quadforge.errors import PositivityLostError
from quadforge.models.bessel import bessel_j, first_zero, orders_for_dimension
from quadforge.models.field import (BoundaryCurve, Grid, ScalarField, boundary_clearance, check_same_grid,
                                    jump_deviation, laplacian)
from quadforge.models.minimizer import EnergySpec, MinimizeResult
from quadforge.models.quadrature import herglotz_integral, unit_directions
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

MIN_BAND_CELLS = 6
JUMP_CLEARANCE_CELLS = 6
BAND_FLOOR = 0.5
# The cutoff psi is 1 within delta / 3 of the free boundary and falls to 0 over the next PLATEAU_END * delta.
PLATEAU_END = 2 / 3


def incident_field(n: int, k: float, grid: Grid) -> ScalarField:
    """Regular radial Helmholtz solution normalized to 1 at the origin, positive on the grid ball."""
    nu0, _ = orders_for_dimension(n)
    if n != grid.n:
        raise ValueError(f"Incident field of dimension {n} requested on a {grid.n}-dimensional grid.")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}.")
    j = first_zero(nu0)
    if k * grid.R >= j:
        raise ValueError(f"Incident field is positive only for k R < {j:.12g}; got k R = {k * grid.R:.12g}.")
    kr = k * grid.radius
    with np.errstate(divide="ignore", invalid="ignore"):
        values = math.gamma(n / 2) * (2 / kr) ** nu0.nu * bessel_j(nu0, kr)
    values = np.where(kr == 0, 1.0, values)
    return grid.field(values)


def smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t ** 2)


class ContrastResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rho: ScalarField
    v: ScalarField
    v0: ScalarField
    psi: ScalarField
    band_width: float
    domain_mask: np.ndarray
    band_mask: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.v.grid

    def band_statistics(self) -> dict:
        band_rho = np.abs(self.rho.values[self.band_mask])
        return {"band_width": self.band_width, "band_nodes": int(self.band_mask.sum()),
                "domain_nodes": int(self.domain_mask.sum()),
                "min_abs_rho_band": float(band_rho.min()) if band_rho.size else 0.0,
                "max_abs_rho": float(np.max(np.abs(self.rho.values))),
                "min_v_domain": float(self.v.values[self.domain_mask].min())}


def _inside_distance(domain: np.ndarray, h: float) -> np.ndarray:
    """Distance from domain nodes to the free boundary, taken midway between a domain node and its outside neighbour."""
    return ndimage.distance_transform_edt(domain, sampling=h) - h / 2


def _outside_distance(domain: np.ndarray, h: float) -> np.ndarray:
    """Distance from nodes outside the domain to the nearest domain node, less half a cell."""
    return ndimage.distance_transform_edt(~domain, sampling=h) - h / 2


def build_contrast(result: MinimizeResult, spec: EnergySpec, k: float, u0: ScalarField, delta: float,
                   h_volume: Optional[ScalarField] = None) -> ContrastResult:
    """Contrast rho and total field v that make the incident wave u0 non-scattering off the positivity set.

    h_volume defaults to the negative part of f. Within delta/3 of the free boundary v = u_* + u0; deeper inside
    v blends to 1 and rho = -(Laplace_h + k^2) v / v. On the band, the plateau nodes whose whole stencil stays on
    the plateau, rho = -h / v0 instead.
    """
    grid = check_same_grid(spec.f, result.u, u0)
    h = grid.h
    if abs(spec.lam - k * k) > 1e-12 * max(1.0, k * k):
        raise ValueError(f"Contrast construction needs lambda = k^2; got lambda={spec.lam}, k={k}.")
    if delta < MIN_BAND_CELLS * h:
        raise ValueError(f"Band width delta={delta} must be at least {MIN_BAND_CELLS}h = {MIN_BAND_CELLS * h}.")
    domain = result.positivity_mask
    if not domain.any():
        raise ValueError("Contrast construction needs a nonempty positivity set.")
    if h_volume is None:
        h_volume = grid.field(np.maximum(-spec.f.values, 0.0))

    inside = _inside_distance(domain, h)
    near = (domain & (inside <= delta)) | (~domain & (_outside_distance(domain, h) <= delta))
    if np.any(u0.values[near] <= 0) or np.any(grid.dirichlet_mask & near):
        raise ValueError(f"Incident field must be positive on every node within delta={delta} of the free boundary.")
    if np.any(h_volume.values[domain & near] <= 0):
        raise ValueError(f"Volume density h must be positive on every domain node within delta={delta} of the "
                         "free boundary.")

    psi_values = np.where(domain, smoothstep((delta - inside) / (PLATEAU_END * delta)), 0.0)
    v0_values = result.u.values + u0.values
    v_values = np.where(domain, v0_values * psi_values + (1 - psi_values), u0.values)
    if np.any(v_values[domain | near] <= 0):
        raise PositivityLostError("Total field v lost positivity near the domain.")
    v = grid.field(v_values)

    plateau = ~domain | (psi_values >= 1.0)
    band = domain & ndimage.binary_erosion(plateau, border_value=1)
    helmholtz = laplacian(v).values + k * k * v_values
    rho_values = np.zeros(grid.shape)
    rho_values[domain] = -helmholtz[domain] / v_values[domain]
    rho_values[band] = -h_volume.values[band] / v0_values[band]
    contrast = ContrastResult(rho=grid.field(rho_values), v=v, v0=grid.field(v0_values),
                              psi=grid.field(psi_values), band_width=delta, domain_mask=domain, band_mask=band)
    _check_contrast(contrast, u0, h_volume, domain & (inside <= delta / 2))
    logger.info(f"Built contrast with band width {delta:.6g}: {contrast.band_statistics()}")
    return contrast


def _check_contrast(contrast: ContrastResult, u0: ScalarField, h_volume: ScalarField, half_band: np.ndarray):
    domain = contrast.domain_mask
    if np.any(contrast.v.values[~domain] != u0.values[~domain]):
        raise RuntimeError("Total field differs from the incident field outside the domain.")
    band = contrast.band_mask
    if band.any():
        floor = BAND_FLOOR * float(np.min(h_volume.values[band] / contrast.v0.values[band]))
        if np.any(np.abs(contrast.rho.values[half_band]) < floor):
            raise RuntimeError(f"Contrast drops below {floor:.6g} within half the band width of the free boundary.")
    if np.any(contrast.v.values[domain] <= 0):
        raise PositivityLostError("Total field must stay positive on the domain.")


def nonradiating_residual(contrast: ContrastResult, boundary: Optional[BoundaryCurve], g, k: float,
                          num_directions: int, threads: int = 1) -> float:
    """Normalized far-field size of the source -rho v on D plus g on the boundary; zero when w = v - u0 is compact."""
    grid = contrast.grid
    source = grid.field(-contrast.rho.values * contrast.v.values)
    g = np.zeros(0) if boundary is None else np.broadcast_to(np.asarray(g, dtype=float), (boundary.size,))
    scale = float(np.sum(np.abs(source.values))) * grid.h ** 2
    if boundary is not None:
        scale += float(np.dot(np.abs(g), boundary.lengths))
    if scale == 0:
        return 0.0
    samples = herglotz_integral(source, boundary, g, k, unit_directions(num_directions), threads=threads)
    residual = float(np.max(np.abs(samples.values))) / scale
    logger.info(f"Nonradiating residual over {num_directions} directions: {residual:.6g}")
    return residual


class GluingReport(BaseModel):
    domain_residual: float
    surface_mass: float
    surface_target: float

    @property
    def surface_defect(self) -> float:
        if self.surface_target == 0:
            return abs(self.surface_mass)
        return abs(self.surface_mass - self.surface_target) / self.surface_target


def gluing_residual(contrast: ContrastResult, boundary: Optional[BoundaryCurve], g, k: float) -> GluingReport:
    """(Laplace_h + k^2 + rho 1_D) v: relative size on domain nodes more than 2h inside the band, and its mass
    just outside D against the integral of g."""
    grid = contrast.grid
    domain = contrast.domain_mask
    operator = laplacian(contrast.v).values + (k * k + contrast.rho.values) * contrast.v.values
    scale = float(np.max(np.abs(contrast.rho.values * contrast.v.values))) or 1.0
    deep = domain & (_inside_distance(domain, grid.h) > contrast.band_width / 3 + 2 * grid.h)
    domain_residual = float(np.max(np.abs(operator[deep]))) / scale if deep.any() else 0.0
    shell = ndimage.binary_dilation(domain) & ~domain & ~grid.dirichlet_mask
    surface_mass = float(np.sum(operator[shell])) * grid.h ** 2
    target = 0.0
    if boundary is not None and boundary.size:
        target = float(np.dot(np.broadcast_to(np.asarray(g, dtype=float), (boundary.size,)), boundary.lengths))
    return GluingReport(domain_residual=domain_residual, surface_mass=surface_mass, surface_target=target)


def jump_relation_check(u_total: ScalarField, boundary: BoundaryCurve, g) -> float:
    """Mean relative deviation of the normal-derivative jump of u_total across the boundary from g."""
    clearance = boundary_clearance(u_total.grid, boundary)
    if clearance < JUMP_CLEARANCE_CELLS:
        raise ValueError(f"Boundary must keep {JUMP_CLEARANCE_CELLS}h clearance from the Dirichlet region, "
                         f"got {clearance:.3g}h.")
    g = np.broadcast_to(np.asarray(g, dtype=float), (boundary.size,))
    return jump_deviation(u_total, boundary, np.array(g))
