import math
import unittest
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from quadforge.errors import NearSingularError
from quadforge.models.field import Grid, disk_coverage
from quadforge.models.quadrature import (FarFieldSamples, QuadratureDomain, circle_boundary, fundamental_solution,
                                         gamma_constant, herglotz_integral, layer_potential, mollify,
                                         mollify_point_mass, potential_match_residual, quadrature_identity_per_wave,
                                         quadrature_identity_residual, radial_herglotz_integral,
                                         radial_quadrature_domain, unit_directions, volume_potential)
from quadforge.models.radial import RadialParams, ZeroProfile, null_quadrature_radii, radial_solve

K = math.sqrt(2.0)


@lru_cache(maxsize=None)
def oracle_solution():
    return radial_solve(RadialParams(n=2, lam=2.0, a=10.0, b=1.0, r1=0.25, R=1.0, g_profile=ZeroProfile()))


def point_density(grid: Grid, center, radius: float = 0.05):
    return grid.field(disk_coverage(grid, radius, center))


class TestFundamentalSolution(unittest.TestCase):
    def test_values(self):
        self.assertAlmostEqual(fundamental_solution(3, 2.0, 1.0), math.cos(2.0) / (4 * math.pi), places=15)
        self.assertAlmostEqual(fundamental_solution(2, 2.0, 0.5), -0.25 * special.y0(1.0), places=14)
        np.testing.assert_allclose(fundamental_solution(2, 1.0, np.array([1.0, 2.0])),
                                   -0.25 * special.y0([1.0, 2.0]), rtol=1e-13)
        self.assertIsInstance(fundamental_solution(2, 1.0, 1.0), float)
        with self.assertRaises(ValueError):
            fundamental_solution(2, 1.0, 0.0)
        with self.assertRaises(ValueError):
            fundamental_solution(4, 1.0, 1.0)

    def test_logarithmic_singularity(self):
        difference = fundamental_solution(2, K, 1e-4) - fundamental_solution(2, K, 2e-4)
        self.assertAlmostEqual(difference / (math.log(2) / (2 * math.pi)), 1.0, delta=1e-6)

    def test_solves_helmholtz_away_from_origin(self):
        step = 1e-3
        for x, y in ((1.0, 0.5), (-0.3, 0.8), (2.0, -1.5)):
            psi = lambda px, py: fundamental_solution(2, K, math.hypot(px, py))
            lap = (psi(x + step, y) + psi(x - step, y) + psi(x, y + step) + psi(x, y - step)
                   - 4 * psi(x, y)) / step ** 2
            self.assertLess(abs(lap + K ** 2 * psi(x, y)), 1e-5)


class TestPotentials(unittest.TestCase):
    def test_zero_density(self):
        grid = Grid(R=1.0, m=65)
        np.testing.assert_array_equal(volume_potential(grid.zeros(), K, [[2.0, 0.0], [0.0, 3.0]]), 0.0)
        boundary = circle_boundary((0.0, 0.0), 0.5, 64)
        np.testing.assert_array_equal(layer_potential(boundary, 0.0, K, [[2.0, 0.0]]), 0.0)

    def test_translation(self):
        grid = Grid(R=1.0, m=129)
        shift = 10 * grid.h
        axis = grid.axis
        base = (float(axis[50]), float(axis[60]))
        moved = (float(axis[60]), float(axis[60]))
        points = np.array([[2.0, 0.3], [-1.5, 1.5]])
        first = volume_potential(point_density(grid, base), K, points)
        second = volume_potential(point_density(grid, moved), K, points + [shift, 0.0])
        np.testing.assert_allclose(second, first, rtol=1e-9)

    def test_reciprocity(self):
        grid = Grid(R=1.0, m=129)
        axis = grid.axis
        a = (float(axis[40]), float(axis[50]))
        b = (float(axis[90]), float(axis[75]))
        forward = volume_potential(point_density(grid, a), K, [b])
        backward = volume_potential(point_density(grid, b), K, [a])
        np.testing.assert_allclose(forward, backward, rtol=1e-10)

    def test_near_singular(self):
        grid = Grid(R=1.0, m=65)
        with self.assertRaises(NearSingularError):
            volume_potential(point_density(grid, (0.0, 0.0)), K, [[0.0, 0.0]])
        boundary = circle_boundary((0.0, 0.0), 0.5, 256)
        with self.assertRaises(NearSingularError):
            layer_potential(boundary, 1.0, K, [[0.5, 0.0]])
        with self.assertRaises(ValueError):
            volume_potential(point_density(grid, (0.0, 0.0)), K, [[1.0, 2.0, 3.0]])

    def test_circle_layer_potential(self):
        radius, g = 0.5, 0.7
        boundary = circle_boundary((0.0, 0.0), radius, 2048)
        points = np.array([[1.5, 0.3], [-0.2, 2.0], [3.0, -3.0]])
        values = layer_potential(boundary, g, K, points)
        for point, value in zip(points, values):
            # Addition theorem: the circle average of Y_0(k|p - y|) is J_0(k a) Y_0(k|p|).
            closed_form = -0.25 * g * 2 * math.pi * radius * special.j0(K * radius) * special.y0(
                K * np.linalg.norm(point))
            numeric, _ = integrate.quad(
                lambda t: fundamental_solution(2, K, math.hypot(point[0] - radius * math.cos(t),
                                                                point[1] - radius * math.sin(t))) * g * radius,
                0.0, 2 * math.pi, epsabs=1e-14, epsrel=1e-13, limit=200)
            self.assertAlmostEqual(value / closed_form, 1.0, delta=1e-10)
            self.assertAlmostEqual(numeric / closed_form, 1.0, delta=1e-10)

    def test_circle_boundary(self):
        boundary = circle_boundary((0.1, -0.2), 0.5, 128)
        self.assertTrue(boundary.closed)
        self.assertAlmostEqual(boundary.total_length, math.pi, places=12)
        np.testing.assert_allclose(np.linalg.norm(boundary.midpoints - [0.1, -0.2], axis=1), 0.5)
        with self.assertRaises(ValueError):
            circle_boundary((0.0, 0.0), 0.0, 128)
        with self.assertRaises(ValueError):
            circle_boundary((0.0, 0.0), 1.0, 2)

    def test_threads_match_inline(self):
        grid = Grid(R=1.0, m=65)
        density = point_density(grid, (0.1, 0.2), 0.3)
        points = 2.0 * unit_directions(40)
        np.testing.assert_array_equal(volume_potential(density, K, points, threads=2),
                                      volume_potential(density, K, points, threads=1))
        directions = unit_directions(40)
        np.testing.assert_array_equal(herglotz_integral(density, None, 0.0, K, directions, threads=2).values,
                                      herglotz_integral(density, None, 0.0, K, directions).values)


class TestMollification(unittest.TestCase):
    def test_mean_value_property(self):
        grid = Grid(R=1.0, m=257)
        center, radius, mass = (0.1, -0.05), 0.2, 3.0
        mollified = mollify_point_mass(grid, K, mass, radius, center)
        x, y = grid.coords
        for direction in unit_directions(8):
            wave = np.cos(K * (x * direction[0] + y * direction[1]))
            expected = mass * math.cos(K * (center[0] * direction[0] + center[1] * direction[1]))
            tested = float(np.sum(wave * mollified.values)) * grid.h ** 2
            self.assertAlmostEqual(tested, expected, delta=1e-4 * mass)

    def test_convolution_matches_point_mass(self):
        grid = Grid(R=1.0, m=129)
        spike = np.zeros(grid.shape)
        spike[70, 55] = 5.0
        expected = mollify_point_mass(grid, K, 5.0 * grid.h ** 2, 0.1,
                                      (float(grid.axis[70]), float(grid.axis[55])))
        result = mollify(grid.field(spike), K, 0.1)
        np.testing.assert_allclose(result.values, expected.values, atol=1e-10 * np.max(expected.values))


class TestQuadratureIdentity(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(R=1.0, m=513)
        cls.solution = oracle_solution()
        cls.oracle = radial_quadrature_domain(cls.solution, cls.grid)
        cls.control = radial_quadrature_domain(cls.solution, cls.grid, rho=cls.solution.rho + 0.1)

    def test_oracle_domain(self):
        self.assertLess(quadrature_identity_residual(self.oracle, K, 32), 1e-6)
        self.assertLess(potential_match_residual(self.oracle, K, 1.25, 64), 1e-4)

    def test_negative_control(self):
        self.assertGreater(quadrature_identity_residual(self.control, K, 32), 1e-2)
        self.assertGreater(potential_match_residual(self.control, K, 1.25, 64), 1e-2)

    def test_per_wave_report(self):
        per_wave = quadrature_identity_per_wave(self.oracle, K, 16)
        self.assertEqual(len(per_wave), 32)
        self.assertEqual(quadrature_identity_residual(self.oracle, K, 0), 0.0)

    def test_ring_clearance(self):
        with self.assertRaises(NearSingularError):
            potential_match_residual(self.oracle, K, self.solution.rho, 16)

    def test_domain_validation(self):
        grid = Grid(R=1.0, m=65)
        mask = disk_coverage(grid, 0.5) > 0
        boundary = circle_boundary((0.0, 0.0), 0.5, 64)
        fields = dict(h_volume=grid.field(mask * 1.0), mu=grid.field(disk_coverage(grid, 0.2)))
        QuadratureDomain(mask=mask, boundary=boundary, g_boundary=np.zeros(64), **fields)
        with self.assertRaises(ValueError):
            QuadratureDomain(mask=mask, boundary=boundary, g_boundary=np.zeros(3), **fields)
        with self.assertRaises(ValueError):
            QuadratureDomain(mask=mask, boundary=boundary, g_boundary=-np.ones(64), **fields)
        with self.assertRaises(ValueError):
            QuadratureDomain(mask=disk_coverage(grid, 0.1) > 0, boundary=boundary, g_boundary=np.zeros(64),
                             **fields)


class TestFarField(unittest.TestCase):
    def test_radial_closed_form(self):
        for n in (2, 3):
            for radius in (0.3, 1.0, 2.5):
                exact = (2 * math.pi / K) ** (n / 2) * radius ** (n / 2) * special.jv(n / 2, K * radius)
                self.assertAlmostEqual(radial_herglotz_integral(n, K, radius), exact, delta=1e-10)

    def test_null_balls(self):
        for n in (2, 3):
            for radius in null_quadrature_radii(n, 1.0, 3):
                volume = math.pi ** (n / 2) / math.gamma(n / 2 + 1) * radius ** n
                self.assertLess(abs(radial_herglotz_integral(n, 1.0, radius)), 1e-6 * volume)

    def test_null_ball_on_grid(self):
        radius = null_quadrature_radii(2, 1.0, 1)[0]
        grid = Grid(R=4.5, m=1025)
        samples = herglotz_integral(grid.field(disk_coverage(grid, radius)), None, 0.0, 1.0, unit_directions(64))
        self.assertLess(np.max(np.abs(samples.values)), 1e-6 * math.pi * radius ** 2)

    def test_gamma_constant(self):
        self.assertAlmostEqual(gamma_constant(3, 2.0), 1 / (4 * math.pi), places=15)
        expected = np.exp(1j * math.pi / 4) / (2 * math.sqrt(2 * math.pi) * math.sqrt(2.0))
        self.assertAlmostEqual(abs(gamma_constant(2, 2.0) - expected), 0.0, places=15)
        with self.assertRaises(ValueError):
            gamma_constant(2, 0.0)

    def test_samples(self):
        directions = unit_directions(4)
        samples = FarFieldSamples(directions=directions, values=np.ones(4, dtype=complex))
        np.testing.assert_allclose(samples.pattern(3, 1.0), np.full(4, 1 / (4 * math.pi)))
        with self.assertRaises(ValueError):
            FarFieldSamples(directions=2 * directions, values=np.ones(4, dtype=complex))
        with self.assertRaises(ValueError):
            FarFieldSamples(directions=directions, values=np.ones(3, dtype=complex))

    def test_point_mass_phase(self):
        grid = Grid(R=1.0, m=65)
        i, j = 40, 22
        mass = 0.7
        values = np.zeros(grid.shape)
        values[i, j] = mass / grid.h ** 2
        x, y = grid.coords
        y0 = np.array([x[i, j], y[i, j]])
        directions = unit_directions(16)
        samples = herglotz_integral(grid.field(values), None, 0.0, K, directions)
        np.testing.assert_allclose(samples.values, mass * np.exp(-1j * K * (directions @ y0)), atol=1e-12)

    def test_layer_source_far_field(self):
        radius = 0.5
        boundary = circle_boundary((0.0, 0.0), radius, 512)
        samples = herglotz_integral(None, boundary, 1.0, K, unit_directions(8))
        # Uniform density on a circle radiates 2 pi a J_0(k a) in every direction.
        np.testing.assert_allclose(samples.values, 2 * math.pi * radius * special.j0(K * radius), atol=1e-12)
