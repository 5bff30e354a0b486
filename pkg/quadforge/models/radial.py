import math
from typing import Any, Callable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, optimize

from quadforge.errors import NoAdmissibleSupportError
from quadforge.models.bessel import (ArrayLike, bessel_j, bessel_y, bessel_zeros, check_dimension, first_zero,
                                     fundamental_tone_ball, orders_for_dimension)
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

PROFILE_SAMPLES = 10_000
PROFILE_TOLERANCE = 1e-12
ROOT_XTOL = 1e-14
MAX_NULL_RADII = 8


class ZeroProfile(BaseModel):
    """The Bernoulli density g = 0."""
    model_config = ConfigDict(frozen=True)

    def __call__(self, r: ArrayLike) -> ArrayLike:
        return np.zeros_like(np.asarray(r, dtype=float))


class StepProfile(BaseModel):
    """Radial density value * 1{r > start}."""
    model_config = ConfigDict(frozen=True)

    value: float = Field(ge=0)
    start: float = Field(ge=0)

    def __call__(self, r: ArrayLike) -> ArrayLike:
        return np.where(np.asarray(r, dtype=float) > self.start, self.value, 0.0)


def _eval_profile(profile: Callable, r: ArrayLike) -> ArrayLike:
    values = np.asarray(profile(r), dtype=float)
    if np.ndim(r) == 0:
        return float(values)
    return np.broadcast_to(values, np.shape(r)).astype(float)


def _ball_volume(n: int, radius: float) -> float:
    return math.pi ** (n / 2) * radius ** n / math.gamma(1 + n / 2)


def _sphere_area(n: int) -> float:
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


class RadialParams(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, arbitrary_types_allowed=True)

    n: int
    lam: float = Field(alias="lambda")
    a: float
    b: float
    r1: float
    R: float
    g_profile: Callable[[Any], Any] = Field(default_factory=ZeroProfile)

    @model_validator(mode="after")
    def _check_invariants(self) -> "RadialParams":
        check_dimension(self.n)
        if not self.a > self.b > 0:
            raise ValueError(f"Invariant a > b > 0 violated: a={self.a}, b={self.b}.")
        if not 0 < self.r1 < self.R:
            raise ValueError(f"Invariant 0 < r1 < R violated: r1={self.r1}, R={self.R}.")
        lambda_star = fundamental_tone_ball(self.n, self.R)
        if not 0 < self.lam < lambda_star:
            raise ValueError(f"Invariant 0 < lambda < lambda*(B_R) = {lambda_star:.12g} violated: "
                             f"lambda={self.lam}.")
        samples = np.linspace(0.0, self.R, PROFILE_SAMPLES)
        g = _eval_profile(self.g_profile, samples)
        if not np.all(np.isfinite(g)) or np.any(g < -PROFILE_TOLERANCE):
            raise ValueError("g_profile must be finite and nonnegative.")
        if np.any(np.abs(g[samples <= self.r1]) > PROFILE_TOLERANCE):
            raise ValueError(f"g_profile must vanish on [0, r1] with r1={self.r1}.")
        if np.any(np.diff(g) < -PROFILE_TOLERANCE):
            raise ValueError("g_profile must be nondecreasing on [0, R].")
        return self

    @property
    def sqrt_lam(self) -> float:
        return math.sqrt(self.lam)

    def g(self, r: ArrayLike) -> ArrayLike:
        return _eval_profile(self.g_profile, r)

    def source(self, r: ArrayLike) -> ArrayLike:
        """f = a * 1{r < r1} - b."""
        return np.where(np.asarray(r) < self.r1, self.a, 0.0) - self.b


class RadialSolution(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: RadialParams
    c1: float
    rho: float
    Rprime: float

    @model_validator(mode="after")
    def _check_invariants(self) -> "RadialSolution":
        if not self.c1 > 0:
            raise ValueError(f"Invariant c1 > 0 violated: c1={self.c1}.")
        tol = 1e-12 * self.params.R
        if not (self.params.r1 < self.rho <= self.Rprime + tol and self.Rprime <= self.params.R + tol):
            raise ValueError(f"Invariant r1 < rho <= R' <= R violated: r1={self.params.r1}, rho={self.rho}, "
                             f"R'={self.Rprime}, R={self.params.R}.")
        return self


def _scaled_bessel_power(n: int, lam: float, r: ArrayLike) -> ArrayLike:
    """t(r) = r^{n/2} J_{n/2}(sqrt(lam) r)."""
    _, nu1 = orders_for_dimension(n)
    r = np.asarray(r, dtype=float)
    return r ** (n / 2) * bessel_j(nu1, math.sqrt(lam) * r)


def _regular_branch(n: int, lam: float, r: np.ndarray) -> np.ndarray:
    """r^{(2-n)/2} J_{(n-2)/2}(sqrt(lam) r) with its analytic value at r = 0."""
    nu0, _ = orders_for_dimension(n)
    out = np.full(r.shape, (math.sqrt(lam) / 2) ** nu0.nu / math.gamma(n / 2))
    positive = r > 0
    rp = r[positive]
    out[positive] = rp ** ((2 - n) / 2) * bessel_j(nu0, math.sqrt(lam) * rp)
    return out


def _outer_coefficient(params: RadialParams) -> float:
    return params.a * math.pi * params.r1 ** (params.n / 2) / (2 * params.sqrt_lam)


def _outer_branch(params: RadialParams, r: np.ndarray) -> np.ndarray:
    """Y_{n/2}(s r1) J_{(n-2)/2}(s r) - J_{n/2}(s r1) Y_{(n-2)/2}(s r), r > 0."""
    nu0, nu1 = orders_for_dimension(params.n)
    s = params.sqrt_lam
    return (bessel_y(nu1, s * params.r1) * bessel_j(nu0, s * r)
            - bessel_j(nu1, s * params.r1) * bessel_y(nu0, s * r))


def support_ratio(params: RadialParams, rho: float) -> float:
    """phi(rho) = b/a - t(r1)/t(rho); strictly increasing on (r1, R]."""
    t_r1 = _scaled_bessel_power(params.n, params.lam, params.r1)
    return params.b / params.a - float(t_r1 / _scaled_bessel_power(params.n, params.lam, rho))


def _largest_root(func: Callable[[float], float], lo: float, hi: float) -> float:
    if func(hi) <= 0:
        return hi
    return optimize.bisect(func, lo, hi, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps, maxiter=500)


def support_radius_gzero(params: RadialParams) -> float:
    Rprime = _largest_root(lambda rho: support_ratio(params, rho), params.r1, params.R)
    logger.debug(f"Support bound R'={Rprime} for R={params.R}")
    return Rprime


def sign_function(params: RadialParams, rho: float) -> float:
    """F(rho); its sign is the sign of u'(rho) + g(rho) for the solution vanishing at rho."""
    nu0, _ = orders_for_dimension(params.n)
    n, s = params.n, params.sqrt_lam
    t_rho = float(_scaled_bessel_power(n, params.lam, rho))
    t_r1 = float(_scaled_bessel_power(n, params.lam, params.r1))
    numerator = params.b * t_rho - params.a * t_r1
    denominator = rho ** (n / 2) * s * bessel_j(nu0, s * rho)
    return numerator / denominator + params.g(rho)


def _solve_c1(params: RadialParams, rho: float) -> float:
    """Coefficient of the regular branch enforcing u(rho) = 0."""
    n = params.n
    regular = float(_regular_branch(n, params.lam, np.array([rho]))[0])
    outer = float(_outer_branch(params, np.array([rho]))[0])
    inner_term = -_outer_coefficient(params) * rho ** ((2 - n) / 2) * outer
    return (inner_term - params.b / params.lam) / regular


def radial_solve(params: RadialParams) -> RadialSolution:
    Rprime = support_radius_gzero(params)
    F = lambda rho: sign_function(params, rho)
    scale = params.a * float(_scaled_bessel_power(params.n, params.lam, params.r1)) / params.R ** (params.n / 2)
    lo = params.r1 * (1 + 1e-12)
    if F(lo) >= 0:
        raise NoAdmissibleSupportError(f"No admissible support: F(r1+) = {F(lo):.6g} >= 0, the g profile is too "
                                       f"large for a free boundary in (r1, R'] = ({params.r1}, {Rprime}].")
    F_hi = F(Rprime)
    if F_hi >= 0:
        rho = optimize.bisect(F, lo, Rprime, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps, maxiter=500)
    elif Rprime < params.R or abs(F_hi) <= 1e-9 * scale:
        # phi(R') vanishes up to rounding
        rho = Rprime
    else:
        raise NoAdmissibleSupportError("No admissible support: F has no sign change on (r1, R'] = "
                                       f"({params.r1}, {Rprime}], F(R') = {F_hi:.6g}.")
    c1 = _solve_c1(params, rho)
    solution = RadialSolution(params=params, c1=c1, rho=rho, Rprime=Rprime)
    logger.info(f"Radial solve: rho={rho:.12g}, R'={Rprime:.12g}, c1={c1:.12g}")
    return solution


def radial_u(sol: RadialSolution, r: ArrayLike) -> ArrayLike:
    params = sol.params
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr < 0):
        raise ValueError("radial_u requires r >= 0.")
    u = np.zeros_like(r_arr)
    inside = r_arr < sol.rho
    ri = r_arr[inside]
    values = (params.b - params.a) / params.lam + sol.c1 * _regular_branch(params.n, params.lam, ri)
    outer = ri > params.r1
    ro = ri[outer]
    values[outer] += (params.a / params.lam
                      + _outer_coefficient(params) * ro ** ((2 - params.n) / 2) * _outer_branch(params, ro))
    u[inside] = values
    if np.ndim(r) == 0:
        return float(u[0])
    return u


def radial_du(sol: RadialSolution, r: ArrayLike) -> ArrayLike:
    params = sol.params
    nu0, nu1 = orders_for_dimension(params.n)
    s = params.sqrt_lam
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr <= 0):
        raise ValueError("radial_du requires r > 0.")
    du = np.zeros_like(r_arr)
    inside = r_arr <= sol.rho
    ri = r_arr[inside]
    power = ri ** ((2 - params.n) / 2)
    values = -sol.c1 * s * power * bessel_j(nu1, s * ri)
    outer = ri > params.r1
    ro = ri[outer]
    jump = (bessel_y(nu1, s * params.r1) * bessel_j(nu1, s * ro)
            - bessel_j(nu1, s * params.r1) * bessel_y(nu1, s * ro))
    values[outer] -= params.a * math.pi * params.r1 ** (params.n / 2) / 2 * power[outer] * jump
    du[inside] = values
    if np.ndim(r) == 0:
        return float(du[0])
    return du


def ode_residual(sol: RadialSolution, samples: int = 200, step: float = 1e-4) -> float:
    """Max of |u'' + (n-1)/r u' + lam u + f| / (a+b) on interior points, central differences."""
    params = sol.params
    r = np.linspace(0, sol.rho, samples + 2)[1:-1]
    keep = (np.abs(r - params.r1) > 2 * step) & (r > 2 * step) & (r < sol.rho - 2 * step)
    r = r[keep]
    u = radial_u(sol, r)
    u_plus, u_minus = radial_u(sol, r + step), radial_u(sol, r - step)
    second = (u_plus - 2 * u + u_minus) / step ** 2
    first = (u_plus - u_minus) / (2 * step)
    residual = second + (params.n - 1) / r * first + params.lam * u + params.source(r)
    return float(np.max(np.abs(residual)) / (params.a + params.b))


def radial_profile(sol: RadialSolution, count: int = 401) -> np.ndarray:
    """Rows (r, u, u') on (0, R]."""
    r = np.linspace(0, sol.params.R, count)[1:]
    return np.column_stack([r, radial_u(sol, r), radial_du(sol, r)])


def radial_energy(sol: RadialSolution) -> float:
    """Minimal energy through the representation int (g^2 1{u>0} - f u)."""
    params = sol.params

    def integrand(r: float) -> float:
        return (params.g(r) ** 2 - float(params.source(r)) * radial_u(sol, r)) * r ** (params.n - 1)

    value, _ = integrate.quad(integrand, 0.0, sol.rho, points=[params.r1], limit=400, epsabs=1e-13, epsrel=1e-12)
    return _sphere_area(params.n) * value


def trivial_branch_energy(n: int, lam: float, a: float, b: float, rho: float, g_sq_integral: float = 0.0) -> float:
    """Energy of the explicit branch evaluated with r1 = R; positive whenever a > b."""
    check_dimension(n)
    return (g_sq_integral
            + (a - b) ** 2 / lam * _ball_volume(n, rho) * (n - 1) * math.gamma(n / 2) / (2 * math.gamma(1 + n / 2)))


def mvt_constant(n: int, k: float, radius: float) -> float:
    """c with int_{B_radius} w = c * w(0) for every Helmholtz solution w."""
    nu0, nu1 = orders_for_dimension(n)
    if k <= 0 or radius <= 0:
        raise ValueError(f"mvt_constant needs k > 0 and radius > 0, got k={k}, radius={radius}.")
    if k * radius >= first_zero(nu0):
        raise ValueError(f"mvt_constant needs k*radius < j_(n-2)/2,1 = {first_zero(nu0):.12g}, "
                         f"got {k * radius}.")
    return (2 * math.pi) ** (n / 2) * k ** (-n / 2) * radius ** (n / 2) * bessel_j(nu1, k * radius)


def mass_threshold(n: int, b0: float, eps: float) -> float:
    nu0, nu1 = orders_for_dimension(n)
    if b0 <= 0 or eps <= 0:
        raise ValueError(f"mass_threshold needs b0 > 0 and eps > 0, got b0={b0}, eps={eps}.")
    j = first_zero(nu0)
    constant = (2 ** n * (3 * math.pi) ** (n / 2) / math.gamma(1 + n / 2)
                * bessel_j(nu1, j) / bessel_j(nu1, j / 3))
    return constant * b0 * eps ** n


def exact_mass_bound(n: int, k: float, b0: float, eps: float) -> float:
    """Mass above which r1 = eps, r2 = 3 eps, a0 = mass / c(n, k, 2 eps) satisfy the inner chain clause."""
    nu0, nu1 = orders_for_dimension(n)
    if 3 * k * eps >= first_zero(nu0):
        raise ValueError(f"exact_mass_bound needs 3*k*eps < j_(n-2)/2,1, got {3 * k * eps}.")
    ratio = 3 ** (n / 2) * bessel_j(nu1, 3 * k * eps) / bessel_j(nu1, k * eps)
    return ratio * b0 * mvt_constant(n, k, 2 * eps)


def frequency_threshold(n: int, beta: float, b: float, mass: float) -> float:
    nu0, nu1 = orders_for_dimension(n)
    j = first_zero(nu0)
    if not 0 < beta < j:
        raise ValueError(f"beta must lie in (0, {j:.12g}), got {beta}.")
    if b <= 0 or mass <= 0:
        raise ValueError(f"frequency_threshold needs b > 0 and mass > 0, got b={b}, mass={mass}.")
    constant = ((4 * math.pi / 3) ** (n / 2) * beta ** (n / 2) * bessel_j(nu1, beta)
                * bessel_j(nu1, 2 * j / 3) / bessel_j(nu1, j))
    return min(1 / 3, (constant * b / mass) ** (1 / n))


class MollifiedParameters(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int
    k: float
    lam: float
    a: float
    a0: float
    b: float
    b0: float
    r1: float
    r2: float
    R: float


def mollified_parameters(n: int, k: float, beta: float, eps: float, mass: float, b: float,
                         b0: float) -> MollifiedParameters:
    """Parameters of the construction after mollifying a measure of the given mass supported in B_eps."""
    a0 = mass / mvt_constant(n, k, 2 * eps)
    return MollifiedParameters(n=n, k=k, lam=k ** 2, a=a0, a0=a0, b=b, b0=b0, r1=eps, r2=3 * eps, R=beta / k)


class ClauseReport(BaseModel):
    name: str
    passed: bool
    slack: float


class AdmissibilityReport(BaseModel):
    clauses: List[ClauseReport]
    Rprime_r1_bracket: Optional[float] = None
    Rprime_zero_bracket: Optional[float] = None
    Rprime_r2: Optional[float] = None

    @property
    def passed(self) -> bool:
        return all(clause.passed for clause in self.clauses)

    def clause(self, name: str) -> ClauseReport:
        for clause in self.clauses:
            if clause.name == name:
                return clause
        raise KeyError(name)


def check_admissibility(n: int, lam: float, a: float, a0: float, b: float, b0: float, r1: float, r2: float,
                        R: float) -> AdmissibilityReport:
    check_dimension(n)
    values = dict(lam=lam, a=a, a0=a0, b=b, b0=b0, r1=r1, r2=r2, R=R)
    non_positive = [key for key, value in values.items() if not value > 0]
    if non_positive:
        raise ValueError(f"check_admissibility needs positive inputs, got non-positive {non_positive}.")
    lambda_star = fundamental_tone_ball(n, R)
    t = lambda r: float(_scaled_bessel_power(n, lam, r))
    with np.errstate(divide="ignore", invalid="ignore"):
        inner_ratio = t(r1) / t(r2) if t(r2) > 0 else math.nan
        outer_ratio = t(r2) / t(R) if t(R) > 0 else math.nan

    def clause(name: str, slack: float, strict: bool) -> ClauseReport:
        passed = bool(np.isfinite(slack) and (slack > 0 if strict else slack >= 0))
        return ClauseReport(name=name, passed=passed, slack=float(slack))

    clauses = [
        clause("inner_ratio > b0/a0", inner_ratio - b0 / a0, strict=True),
        clause("b0/a0 >= b/a", b0 / a0 - b / a, strict=False),
        clause("b/a > outer_ratio", b / a - outer_ratio, strict=True),
        clause("b <= b0", b0 - b, strict=False),
        clause("b0 < a0", a0 - b0, strict=True),
        clause("a0 <= a", a - a0, strict=False),
        clause("r1 <= r2", r2 - r1, strict=False),
        clause("r2 < R", R - r2, strict=True),
        clause("lambda < lambda_star", lambda_star - lam, strict=True),
    ]
    report = AdmissibilityReport(clauses=clauses)
    if lam < lambda_star and b < a and r1 < R:
        ratio = b / a
        phi = lambda rho, r_in: ratio - t(r_in) / t(rho)
        report.Rprime_r1_bracket = _largest_root(lambda rho: phi(rho, r1), r1, R)
        report.Rprime_zero_bracket = _largest_root(lambda rho: phi(rho, r1), 1e-9 * R, R)
        if r2 < R:
            report.Rprime_r2 = _largest_root(lambda rho: phi(rho, r2), r2, R)
    logger.info(f"Admissibility: passed={report.passed}, failing="
                f"{[c.name for c in report.clauses if not c.passed]}")
    return report


def null_quadrature_radii(n: int, k: float, count: int) -> List[float]:
    """Radii r with J_{n/2}(k r) = 0; balls of these radii are null quadrature domains."""
    _, nu1 = orders_for_dimension(n)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}.")
    if not 1 <= count <= MAX_NULL_RADII:
        raise ValueError(f"count must lie in [1, {MAX_NULL_RADII}], got {count}.")
    return [zero / k for zero in bessel_zeros(nu1, count)]
