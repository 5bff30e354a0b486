from functools import lru_cache
from typing import List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import optimize, special

from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]

SUPPORTED_DIMENSIONS = (2, 3)
# Bracketing step for the zero scan. Consecutive zeros of these orders are more than pi apart.
_ZERO_SCAN_STEP = 0.25


class BesselOrder(BaseModel):
    """Order nu = twice_order / 2 of a Bessel function, restricted to {0, 1/2, 1, 3/2}."""
    model_config = ConfigDict(frozen=True)

    twice_order: int

    @field_validator("twice_order")
    @classmethod
    def _check_twice_order(cls, value: int) -> int:
        if value not in (0, 1, 2, 3):
            raise ValueError(f"Unsupported Bessel order {value}/2. Only orders 0, 1/2, 1 and 3/2 are available.")
        return value

    @classmethod
    def from_nu(cls, nu: float) -> "BesselOrder":
        twice_order = 2 * nu
        if not float(twice_order).is_integer():
            raise ValueError(f"Unsupported Bessel order {nu}. Only orders 0, 1/2, 1 and 3/2 are available.")
        return cls(twice_order=int(twice_order))

    @property
    def nu(self) -> float:
        return self.twice_order / 2

    @property
    def is_half_integer(self) -> bool:
        return self.twice_order % 2 == 1


def check_dimension(n: int) -> int:
    if n not in SUPPORTED_DIMENSIONS:
        raise ValueError(f"Dimension must be 2 or 3, got {n}.")
    return n


def orders_for_dimension(n: int) -> Tuple[BesselOrder, BesselOrder]:
    """Return the pair ((n-2)/2, n/2) used by the radial formulas in dimension n."""
    check_dimension(n)
    return BesselOrder(twice_order=n - 2), BesselOrder(twice_order=n)


def _finish(x, values: np.ndarray) -> ArrayLike:
    if np.ndim(x) == 0:
        return float(values)
    return values


def bessel_j(order: BesselOrder, x: ArrayLike) -> ArrayLike:
    """J_nu(x) for x >= 0. Half-integer orders use the spherical (trigonometric) forms."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0) or np.any(np.isnan(x_arr)):
        raise ValueError("bessel_j requires x >= 0.")
    if order.is_half_integer:
        ell = (order.twice_order - 1) // 2
        values = np.sqrt(2.0 * x_arr / np.pi) * special.spherical_jn(ell, x_arr)
    else:
        values = special.jv(order.nu, x_arr)
    return _finish(x, values)


def bessel_y(order: BesselOrder, x: ArrayLike) -> ArrayLike:
    """Y_nu(x) for x > 0."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0) or np.any(np.isnan(x_arr)):
        raise ValueError("bessel_y requires x > 0; Y_nu is singular at the origin.")
    if order.is_half_integer:
        ell = (order.twice_order - 1) // 2
        values = np.sqrt(2.0 * x_arr / np.pi) * special.spherical_yn(ell, x_arr)
    else:
        values = special.yv(order.nu, x_arr)
    return _finish(x, values)


@lru_cache(maxsize=None)
def _zeros(twice_order: int, count: int) -> Tuple[float, ...]:
    order = BesselOrder(twice_order=twice_order)
    zeros = []
    left = _ZERO_SCAN_STEP
    f_left = bessel_j(order, left)
    while len(zeros) < count:
        right = left + _ZERO_SCAN_STEP
        f_right = bessel_j(order, right)
        if f_right == 0.0:
            zeros.append(right)
        elif f_left * f_right < 0:
            root = optimize.bisect(lambda t: bessel_j(order, t), left, right,
                                   xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
            zeros.append(root)
        left, f_left = right, f_right
    logger.debug(f"Located {count} zeros of J_{order.nu}: {zeros}")
    return tuple(zeros)


def bessel_zeros(order: BesselOrder, count: int) -> List[float]:
    if count < 1:
        raise ValueError(f"count must be positive, got {count}.")
    return list(_zeros(order.twice_order, count))


def first_zero(order: BesselOrder) -> float:
    return _zeros(order.twice_order, 1)[0]


def fundamental_tone_ball(n: int, R: float) -> float:
    """Smallest Dirichlet eigenvalue of -Laplace on the ball of radius R in dimension n."""
    check_dimension(n)
    if R <= 0:
        raise ValueError(f"Ball radius must be positive, got {R}.")
    nu0, _ = orders_for_dimension(n)
    return first_zero(nu0) ** 2 / R ** 2
