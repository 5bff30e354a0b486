from functools import lru_cache
from typing import Any, Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import ndimage, sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse import linalg as spla

from quadforge.errors import EigenNoConvergeError, EmptyDomainError, GridMismatchError
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)

MIN_NODES = 33
# Dirichlet nodes are those with |x| >= R - DIRICHLET_SHRINK * h, which keeps the staircase boundary inside B_R.
DIRICHLET_SHRINK = 0.75
CONTOUR_SMOOTHING_PASSES = 8
EIGEN_TOLERANCE = 1e-8
EIGEN_MAX_STEPS = 500
# Offsets (in units of h) of the three samples used for one-sided normal derivatives.
NORMAL_SAMPLE_OFFSETS = (2.0, 4.0, 6.0)


class _Layout(NamedTuple):
    axis: np.ndarray
    x: np.ndarray
    y: np.ndarray
    radius: np.ndarray
    dirichlet_mask: np.ndarray
    interior_index: np.ndarray


@lru_cache(maxsize=32)
def _layout(R: float, m: int) -> _Layout:
    R_box = R * (1 + 4 / m)
    h = 2 * R_box / (m - 1)
    axis = np.linspace(-R_box, R_box, m)
    x, y = np.meshgrid(axis, axis, indexing="ij")
    radius = np.hypot(x, y)
    mask = radius >= R - DIRICHLET_SHRINK * h
    index = np.full((m, m), -1, dtype=np.int64)
    index[~mask] = np.arange(int((~mask).sum()))
    for array in (axis, x, y, radius, mask, index):
        array.setflags(write=False)
    return _Layout(axis, x, y, radius, mask, index)


class Grid(BaseModel):
    """Uniform node-centred grid on the box [-R_box, R_box]^2 padding the ball B_R."""
    model_config = ConfigDict(frozen=True)

    n: int = 2
    R: float
    m: int

    @field_validator("n")
    @classmethod
    def _check_dimension(cls, value: int) -> int:
        if value != 2:
            raise ValueError(f"Grids are two-dimensional, got n={value}.")
        return value

    @model_validator(mode="after")
    def _check_grid(self) -> "Grid":
        if self.m < MIN_NODES or self.m % 2 == 0:
            raise ValueError(f"m must be odd and >= {MIN_NODES}, got {self.m}.")
        if not self.R > 0:
            raise ValueError(f"Grid ball radius must be positive, got {self.R}.")
        return self

    @property
    def R_box(self) -> float:
        return self.R * (1 + 4 / self.m)

    @property
    def h(self) -> float:
        return 2 * self.R_box / (self.m - 1)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.m, self.m

    @property
    def axis(self) -> np.ndarray:
        return _layout(self.R, self.m).axis

    @property
    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        layout = _layout(self.R, self.m)
        return layout.x, layout.y

    @property
    def radius(self) -> np.ndarray:
        return _layout(self.R, self.m).radius

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return _layout(self.R, self.m).dirichlet_mask

    @property
    def interior_index(self) -> np.ndarray:
        """Position of each unmasked node in the unknown vector, -1 on the mask."""
        return _layout(self.R, self.m).interior_index

    def rim_mask(self, width: int = 1) -> np.ndarray:
        """Unmasked nodes within `width` stencil steps of a Dirichlet node."""
        grown = ndimage.binary_dilation(self.dirichlet_mask, iterations=width)
        return grown & ~self.dirichlet_mask

    def field(self, values: np.ndarray) -> "ScalarField":
        """Wrap values as a field, pinning the Dirichlet nodes to zero."""
        values = np.asarray(values, dtype=float)
        if values.shape != self.shape:
            raise GridMismatchError(f"Field shape {values.shape} does not match grid shape {self.shape}.")
        return ScalarField(grid=self, values=np.where(self.dirichlet_mask, 0.0, values))

    def zeros(self) -> "ScalarField":
        return ScalarField(grid=self, values=np.zeros(self.shape))


class ScalarField(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: Grid
    values: np.ndarray

    def __init__(self, **data: Any):
        grid, values = data.get("grid"), data.get("values")
        if isinstance(grid, Grid) and isinstance(values, np.ndarray) and values.shape != grid.shape:
            raise GridMismatchError(f"Field shape {values.shape} does not match grid shape {grid.shape}.")
        super().__init__(**data)

    @model_validator(mode="after")
    def _check_values(self) -> "ScalarField":
        if self.values.shape != self.grid.shape:
            raise ValueError(f"Field shape {self.values.shape} does not match grid shape {self.grid.shape}.")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Field values must be finite.")
        if np.any(self.values[self.grid.dirichlet_mask] != 0):
            raise ValueError("Field values must vanish on the Dirichlet mask.")
        return self

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return self.grid.dirichlet_mask

    @property
    def is_admissible(self) -> bool:
        return bool(np.all(self.values >= 0))

    def positive_set(self, threshold: float = 0.0) -> np.ndarray:
        return (self.values > threshold) & ~self.dirichlet_mask

    def interior_values(self) -> np.ndarray:
        """Unknown-vector view of the unmasked nodes."""
        return self.values[~self.dirichlet_mask]


def check_same_grid(*fields: ScalarField) -> Grid:
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise GridMismatchError(f"Fields live on different grids: {grid} and {other.grid}.")
    return grid


def sample_radial(grid: Grid, profile: Callable[[np.ndarray], np.ndarray]) -> ScalarField:
    return grid.field(profile(grid.radius))


def laplacian(u: ScalarField) -> ScalarField:
    """Five-point Laplacian at unmasked nodes, zero on the mask."""
    values = np.pad(u.values, 1)
    stencil = (values[2:, 1:-1] + values[:-2, 1:-1] + values[1:-1, 2:] + values[1:-1, :-2]
               - 4 * u.values) / u.grid.h ** 2
    return u.grid.field(stencil)


def integrate(u: ScalarField) -> float:
    return float(np.sum(u.interior_values()) * u.grid.h ** 2)


@lru_cache(maxsize=16)
def laplacian_matrix(grid: Grid) -> sparse.csr_matrix:
    """Sparse -Laplacian on the unmasked nodes with homogeneous Dirichlet data."""
    index = grid.interior_index
    count = int(index.max()) + 1
    rows = [np.arange(count)]
    cols = [np.arange(count)]
    data = [np.full(count, 4.0)]
    padded = np.pad(index, 1, constant_values=-1)
    centre = index
    for shifted in (padded[2:, 1:-1], padded[:-2, 1:-1], padded[1:-1, 2:], padded[1:-1, :-2]):
        linked = (centre >= 0) & (shifted >= 0)
        rows.append(centre[linked])
        cols.append(shifted[linked])
        data.append(np.full(int(linked.sum()), -1.0))
    matrix = sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(count, count))
    return (matrix / grid.h ** 2).tocsr()


def helmholtz_solve(grid: Grid, lam: float, rhs: np.ndarray, support: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve (Laplace_h + lam) v = rhs on `support` (default all unmasked nodes), v = 0 elsewhere."""
    A = laplacian_matrix(grid)
    interior = ~grid.dirichlet_mask
    keep = np.ones(A.shape[0], dtype=bool) if support is None else support[interior]
    out = np.zeros(grid.shape)
    if not keep.any():
        return out
    system = (lam * sparse.identity(A.shape[0], format="csr") - A)[keep][:, keep]
    solution = spla.spsolve(system.tocsc(), rhs[interior][keep])
    flat = np.zeros(A.shape[0])
    flat[keep] = solution
    out[interior] = flat
    return out


@lru_cache(maxsize=16)
def discrete_fundamental_tone(grid: Grid, solver: str = "cg") -> float:
    """Smallest Dirichlet eigenvalue of -Laplace_h by inverse power iteration."""
    A = laplacian_matrix(grid).tocsr()
    if solver == "direct":
        solve = spla.factorized(A.tocsc())
    elif solver == "cg":
        def solve(rhs, guess=None):
            solution, info = spla.cg(A, rhs, x0=guess, rtol=1e-12, maxiter=20 * A.shape[0])
            if info != 0:
                raise EigenNoConvergeError(f"Inner conjugate-gradient solve did not converge (info={info}).")
            return solution
    else:
        raise ValueError(f"Unknown inner solver {solver!r}; expected 'cg' or 'direct'.")
    x = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    eigenvalue = float(x @ (A @ x))
    guess = None
    for step in range(1, EIGEN_MAX_STEPS + 1):
        y = solve(x) if solver == "direct" else solve(x, guess)
        x_next = y / np.linalg.norm(y)
        estimate = float(x_next @ (A @ x_next))
        guess = x_next / estimate
        logger.debug(f"Inverse power step {step}: eigenvalue {estimate:.15g}")
        if abs(estimate - eigenvalue) <= EIGEN_TOLERANCE * estimate:
            logger.info(f"Discrete fundamental tone {estimate:.10g} after {step} steps (m={grid.m})")
            return estimate
        x, eigenvalue = x_next, estimate
    raise EigenNoConvergeError(f"Inverse power iteration stagnated after {EIGEN_MAX_STEPS} steps "
                               f"(last estimate {eigenvalue}).")


def distance_to_zero_set(u: ScalarField, threshold: float = 0.0) -> ScalarField:
    """Euclidean distance from each node to the node set {u <= threshold}; the mask counts as zero set."""
    outside = u.positive_set(threshold)
    distance = ndimage.distance_transform_edt(outside, sampling=u.grid.h)
    return u.grid.field(distance)


def _segment_area(x: np.ndarray, r: float) -> np.ndarray:
    """Primitive S(x) of sqrt(r^2 - x^2)."""
    xc = np.clip(x, -r, r)
    return 0.5 * (xc * np.sqrt(np.maximum(r * r - xc * xc, 0.0)) + r * r * np.arcsin(xc / r))


def _lower_left_area(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    """Area of the disk of radius r with X <= x and Y <= y."""
    xc = np.clip(x, -r, r)
    w = np.sqrt(np.maximum(r * r - y * y, 0.0))
    sign = np.sign(y)
    full = _segment_area(xc, r) - _segment_area(-r, r)
    clipped = (sign * (_segment_area(np.minimum(xc, -w), r) - _segment_area(-r, r))
               + y * (np.clip(xc, -w, w) + w)
               + sign * (_segment_area(np.maximum(xc, w), r) - _segment_area(w, r)))
    return full + clipped


def cell_coverage(x: np.ndarray, y: np.ndarray, h: float, radius: float) -> np.ndarray:
    """Fraction of the h-cells centred at (x, y) covered by the disk of the given radius about the origin."""
    half = h / 2
    area = (_lower_left_area(x + half, y + half, radius) - _lower_left_area(x - half, y + half, radius)
            - _lower_left_area(x + half, y - half, radius) + _lower_left_area(x - half, y - half, radius))
    return np.clip(area / h ** 2, 0.0, 1.0)


def disk_coverage(grid: Grid, radius: float, center: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Fraction of each node's cell covered by the disk, from the exact circle/rectangle area."""
    x, y = grid.coords
    return cell_coverage(x - center[0], y - center[1], grid.h, radius)


class BoundaryCurve(BaseModel):
    """Oriented polyline(s); the true side lies to the left of each segment."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    midpoints: np.ndarray
    lengths: np.ndarray
    normals: np.ndarray
    loop_index: np.ndarray
    closed: bool

    @model_validator(mode="after")
    def _check_segments(self) -> "BoundaryCurve":
        count = len(self.lengths)
        if self.midpoints.shape != (count, 2) or self.normals.shape != (count, 2) or len(self.loop_index) != count:
            raise ValueError("Boundary arrays must describe the same number of segments.")
        if np.any(self.lengths <= 0):
            raise ValueError("Boundary segment lengths must be positive.")
        if count and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1)) > 1e-12:
            raise ValueError("Boundary normals must have unit length.")
        return self

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def total_length(self) -> float:
        return float(np.sum(self.lengths))

    def loops(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.loop_index == loop) for loop in np.unique(self.loop_index)]

    def total_turning(self, loop: Optional[np.ndarray] = None) -> float:
        """Sum of signed exterior angles along a closed loop (the first loop by default)."""
        segments = self.loops()[0] if loop is None else loop
        tangents = np.column_stack([-self.normals[segments, 1], self.normals[segments, 0]])
        following = np.roll(tangents, -1, axis=0)
        cross = tangents[:, 0] * following[:, 1] - tangents[:, 1] * following[:, 0]
        dot = np.sum(tangents * following, axis=1)
        return float(np.sum(np.arctan2(cross, dot)))


def _polyline_segments(vertices: np.ndarray, closed: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ends = np.roll(vertices, -1, axis=0) if closed else vertices[1:]
    starts = vertices if closed else vertices[:-1]
    delta = ends - starts
    lengths = np.linalg.norm(delta, axis=1)
    normals = np.column_stack([delta[:, 1], -delta[:, 0]]) / lengths[:, None]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return (starts + ends) / 2, lengths, normals


def _smooth_vertices(vertices: np.ndarray, closed: bool, passes: int) -> np.ndarray:
    smoothed = vertices.copy()
    for _ in range(passes):
        if closed:
            smoothed = 0.25 * np.roll(smoothed, 1, axis=0) + 0.5 * smoothed + 0.25 * np.roll(smoothed, -1, axis=0)
        else:
            inner = 0.25 * smoothed[:-2] + 0.5 * smoothed[1:-1] + 0.25 * smoothed[2:]
            smoothed = np.vstack([smoothed[:1], inner, smoothed[-1:]])
    return smoothed


# Cell edges in counter-clockwise order: edge k joins corner k to corner k+1.
_CORNER_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))
_EDGE_KEY_OFFSETS = ((1, 0), (2, 1), (1, 2), (0, 1))


def extract_boundary(grid: Grid, mask: np.ndarray, smoothing_passes: int = CONTOUR_SMOOTHING_PASSES
                     ) -> BoundaryCurve:
    """Marching-squares contour of the 0.5-level of the node indicator of mask restricted to the ball.

    Saddle cells connect the true corners. Contour vertices sit at edge midpoints and are then smoothed along
    each loop by a few binomial passes.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise GridMismatchError(f"Mask shape {mask.shape} does not match grid shape {grid.shape}.")
    indicator = mask & ~grid.dirichlet_mask
    if not indicator.any():
        raise EmptyDomainError("Cannot extract a boundary: the mask has no true node inside the ball.")
    corners = np.stack([indicator[di:grid.m - 1 + di, dj:grid.m - 1 + dj] for di, dj in _CORNER_OFFSETS])
    code = sum(corners[k].astype(np.int64) << k for k in range(4))
    starts, ends = [], []
    for i, j in zip(*np.nonzero((code != 0) & (code != 15))):
        bits = [bool(corners[k, i, j]) for k in range(4)]
        start_edge = [bits[k] and not bits[(k + 1) % 4] for k in range(4)]
        end_edge = [not bits[k] and bits[(k + 1) % 4] for k in range(4)]
        for k in range(4):
            if not start_edge[k]:
                continue
            partner = next((k + d) % 4 for d in range(1, 4) if end_edge[(k + d) % 4])
            starts.append((2 * i + _EDGE_KEY_OFFSETS[k][0], 2 * j + _EDGE_KEY_OFFSETS[k][1]))
            ends.append((2 * i + _EDGE_KEY_OFFSETS[partner][0], 2 * j + _EDGE_KEY_OFFSETS[partner][1]))
    following = {start: index for index, start in enumerate(starts)}
    visited = np.zeros(len(starts), dtype=bool)
    midpoints, lengths, normals, loop_index = [], [], [], []
    all_closed = True
    for first in range(len(starts)):
        if visited[first]:
            continue
        chain = [first]
        visited[first] = True
        closed = False
        current = first
        while True:
            nxt = following.get(ends[current])
            if nxt is None:
                break
            if nxt == first:
                closed = True
                break
            if visited[nxt]:
                break
            chain.append(nxt)
            visited[nxt] = True
            current = nxt
        keys = [starts[index] for index in chain]
        if not closed:
            keys.append(ends[chain[-1]])
        all_closed &= closed
        vertices = grid.axis[0] + np.asarray(keys, dtype=float) * grid.h / 2
        vertices = _smooth_vertices(vertices, closed, smoothing_passes)
        loop_mid, loop_len, loop_normal = _polyline_segments(vertices, closed)
        midpoints.append(loop_mid)
        lengths.append(loop_len)
        normals.append(loop_normal)
        loop_index.append(np.full(len(loop_len), len(loop_index)))
    curve = BoundaryCurve(midpoints=np.vstack(midpoints), lengths=np.concatenate(lengths),
                          normals=np.vstack(normals), loop_index=np.concatenate(loop_index), closed=all_closed)
    logger.debug(f"Extracted boundary with {curve.size} segments in {len(loop_index)} loops, "
                 f"length {curve.total_length:.6g}")
    return curve


def _normal_derivative_weights(h: float) -> np.ndarray:
    """Weights giving the slope at offset 0 of the quadratic through the samples at NORMAL_SAMPLE_OFFSETS."""
    offsets = np.asarray(NORMAL_SAMPLE_OFFSETS) * h
    vandermonde = np.column_stack([np.ones_like(offsets), offsets, offsets ** 2])
    return np.linalg.inv(vandermonde)[1]


def normal_derivatives(u: ScalarField, curve: BoundaryCurve) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided derivatives of u along the outward normal at each segment midpoint.

    Returns (interior, exterior) slopes, each extrapolated to the midpoint from three samples 2h, 4h and 6h away
    on its side.
    """
    grid = u.grid
    interpolator = RegularGridInterpolator((grid.axis, grid.axis), u.values, method="linear")
    weights = _normal_derivative_weights(grid.h)
    offsets = np.asarray(NORMAL_SAMPLE_OFFSETS) * grid.h
    points_out = curve.midpoints[:, None, :] + offsets[None, :, None] * curve.normals[:, None, :]
    points_in = curve.midpoints[:, None, :] - offsets[None, :, None] * curve.normals[:, None, :]
    values_out = interpolator(points_out.reshape(-1, 2)).reshape(curve.size, -1)
    values_in = interpolator(points_in.reshape(-1, 2)).reshape(curve.size, -1)
    exterior = values_out @ weights
    # Samples run against the normal on the interior side.
    interior = -(values_in @ weights)
    return interior, exterior


def boundary_clearance(grid: Grid, curve: BoundaryCurve) -> float:
    """Smallest distance from a segment midpoint to the Dirichlet region, in units of h."""
    radius = np.linalg.norm(curve.midpoints, axis=1)
    return float(np.min(grid.R - DIRICHLET_SHRINK * grid.h - radius) / grid.h)


def segment_values(field: ScalarField, curve: BoundaryCurve) -> np.ndarray:
    """Bilinear interpolation of a field at the segment midpoints."""
    grid = field.grid
    interpolator = RegularGridInterpolator((grid.axis, grid.axis), field.values, method="linear")
    return interpolator(curve.midpoints)


def jump_deviation(u: ScalarField, curve: BoundaryCurve, g: np.ndarray) -> float:
    """Mean relative deviation of the normal-derivative jump across the curve from g.

    The jump is the exterior slope minus the interior slope, which equals |grad u| for a field vanishing outside.
    With g = 0 on every segment the mean absolute jump is returned instead.
    """
    g = np.asarray(g, dtype=float)
    if curve.size == 0:
        raise EmptyDomainError("Cannot evaluate a jump on an empty boundary.")
    if g.shape != (curve.size,):
        raise ValueError(f"Expected one g value per segment ({curve.size}), got shape {g.shape}.")
    interior, exterior = normal_derivatives(u, curve)
    jump = exterior - interior
    positive = g > 0
    if not positive.any():
        return float(np.mean(np.abs(jump)))
    return float(np.mean(np.abs(jump[positive] - g[positive]) / g[positive]))
