import math
import pickle
import unittest

import numpy as np
from scipy import integrate

from quadforge.errors import NoAdmissibleSupportError
from quadforge.models.bessel import BesselOrder, bessel_j, first_zero, fundamental_tone_ball, orders_for_dimension
from quadforge.models.radial import (RadialParams, StepProfile, ZeroProfile, check_admissibility, exact_mass_bound,
                                     frequency_threshold, mass_threshold, mollified_parameters, mvt_constant,
                                     null_quadrature_radii, ode_residual, radial_du, radial_energy, radial_profile,
                                     radial_solve, radial_u, sign_function, support_radius_gzero, support_ratio,
                                     trivial_branch_energy)


def acceptance_params(g: float = 0.0) -> RadialParams:
    profile = StepProfile(value=g, start=0.25) if g > 0 else ZeroProfile()
    return RadialParams(n=2, lam=2.0, a=10.0, b=1.0, r1=0.25, R=1.0, g_profile=profile)


def random_params(rng: np.random.Generator) -> RadialParams:
    """Admissible parameters whose free boundary lies strictly inside B_R."""
    while True:
        n = int(rng.choice([2, 3]))
        R = float(rng.uniform(1.0, 2.0))
        lam = float(rng.uniform(0.1, 0.8)) * fundamental_tone_ball(n, R)
        r1 = float(rng.uniform(0.15, 0.4)) * R
        a = float(rng.uniform(3.0, 10.0))
        params = RadialParams(n=n, lam=lam, a=a, b=1.0, r1=r1, R=R)
        if support_ratio(params, R) > 0:
            return params


def scan_root(func, lo: float, hi: float, points: int = 100_001) -> float:
    """Last sign change of func on a uniform scan, located to the scan spacing."""
    rho = np.linspace(lo, hi, points)
    values = np.array([func(value) for value in rho])
    change = np.flatnonzero(np.sign(values[:-1]) != np.sign(values[1:]))
    return float(rho[change[-1]])


class TestRadialParams(unittest.TestCase):
    def test_invariants(self):
        with self.assertRaisesRegex(ValueError, "a > b > 0"):
            RadialParams(n=2, lam=1.0, a=1.0, b=2.0, r1=0.5, R=1.0)
        with self.assertRaisesRegex(ValueError, "r1 < R"):
            RadialParams(n=2, lam=1.0, a=2.0, b=1.0, r1=1.5, R=1.0)
        with self.assertRaisesRegex(ValueError, "lambda"):
            RadialParams(n=2, lam=6.0, a=2.0, b=1.0, r1=0.5, R=1.0)
        with self.assertRaisesRegex(ValueError, "vanish"):
            RadialParams(n=2, lam=1.0, a=2.0, b=1.0, r1=0.5, R=1.0, g_profile=StepProfile(value=1.0, start=0.2))
        with self.assertRaisesRegex(ValueError, "nondecreasing"):
            RadialParams(n=2, lam=1.0, a=2.0, b=1.0, r1=0.5, R=1.0,
                         g_profile=lambda r: np.where(np.asarray(r) > 0.5, 1.0 - np.asarray(r), 0.0))

    def test_lambda_alias(self):
        params = RadialParams.model_validate({"n": 2, "lambda": 1.0, "a": 2.0, "b": 1.0, "r1": 0.5, "R": 1.0})
        self.assertEqual(params.lam, 1.0)

    def test_profiles_pickle(self):
        profile = StepProfile(value=0.2, start=0.25)
        self.assertEqual(pickle.loads(pickle.dumps(profile)), profile)
        np.testing.assert_array_equal(profile(np.array([0.1, 0.25, 0.3])), [0.0, 0.0, 0.2])


class TestSupportRadius(unittest.TestCase):
    def test_bracketed_root(self):
        params = RadialParams(n=2, lam=1.0, a=2.0, b=1.0, r1=1.0, R=2.2)
        Rprime = support_radius_gzero(params)
        self.assertTrue(1.5 < Rprime < 1.6)
        self.assertLess(abs(support_ratio(params, Rprime)), 1e-9)
        self.assertAlmostEqual(Rprime * bessel_j(BesselOrder(twice_order=2), Rprime),
                               2 * bessel_j(BesselOrder(twice_order=2), 1.0), places=9)
        scanned = scan_root(lambda rho: support_ratio(params, rho), 1.0 + 1e-9, 2.2)
        self.assertLess(abs(scanned - Rprime), 2e-5)

    def test_endpoint(self):
        base = RadialParams(n=2, lam=1.0, a=2.0, b=1.0, r1=1.0, R=2.2)
        # b/a equal to t(r1)/t(R) puts the root at R.
        t_ratio = 0.5 - support_ratio(base, 2.2)
        params = RadialParams(n=2, lam=1.0, a=2.0, b=2.0 * t_ratio, r1=1.0, R=2.2)
        self.assertAlmostEqual(support_radius_gzero(params), 2.2, places=9)


class TestRadialSolve(unittest.TestCase):
    def test_gzero_matches_support_radius(self):
        params = acceptance_params()
        solution = radial_solve(params)
        self.assertEqual(solution.rho, solution.Rprime)
        self.assertGreater(solution.c1, 0)
        self.assertTrue(params.r1 < solution.rho <= params.R)

    def test_three_dimensional_closed_form(self):
        params = RadialParams(n=3, lam=1.0, a=4.0, b=1.0, r1=0.5, R=3.0)
        solution = radial_solve(params)
        # t(r) = r^{3/2} J_{3/2}(r) = sqrt(2/pi) (sin r - r cos r)
        t = lambda r: math.sin(r) - r * math.cos(r)
        scanned = scan_root(lambda rho: params.b / params.a - t(params.r1) / t(rho), params.r1 + 1e-9, params.R)
        self.assertLess(abs(scanned - solution.rho), 5e-5)
        self.assertLess(abs(radial_u(solution, solution.rho - 1e-12)), 1e-9)

    def test_oracle_self_consistency(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            params = random_params(rng)
            solution = radial_solve(params)
            self.assertTrue(params.r1 < solution.rho <= solution.Rprime)
            self.assertLess(ode_residual(solution), 1e-6)
            self.assertLess(abs(radial_u(solution, solution.rho * (1 - 1e-13))), 1e-10 * (params.a + params.b))
            self.assertLess(abs(radial_du(solution, solution.rho) + params.g(solution.rho)), 1e-10 * params.a)

    def test_bernoulli_profile(self):
        params = acceptance_params(g=0.2)
        solution = radial_solve(params)
        self.assertLess(solution.rho, solution.Rprime)
        self.assertLess(abs(sign_function(params, solution.rho)), 1e-9)
        self.assertAlmostEqual(radial_du(solution, solution.rho), -0.2, places=9)
        self.assertEqual(radial_u(solution, solution.rho), 0.0)
        self.assertLess(ode_residual(solution), 1e-6)

    def test_positive_and_nonincreasing_on_support(self):
        rng = np.random.default_rng(11)
        for params in [acceptance_params(), acceptance_params(0.2)] + [random_params(rng) for _ in range(10)]:
            solution = radial_solve(params)
            r = np.linspace(0.0, solution.rho, 502)[1:-1]
            self.assertTrue(np.all(radial_u(solution, r) > 0), params)
            self.assertTrue(np.all(radial_du(solution, r) <= 1e-12), params)

    def test_support_ratio_increases(self):
        rng = np.random.default_rng(17)
        for params in [acceptance_params()] + [random_params(rng) for _ in range(10)]:
            rho = np.linspace(params.r1, params.R, 1001)[1:]
            values = np.array([support_ratio(params, value) for value in rho])
            self.assertTrue(np.all(np.diff(values) > 0), params)

    def test_large_g_has_no_support(self):
        with self.assertRaises(NoAdmissibleSupportError):
            radial_solve(acceptance_params(g=50.0))

    def test_derivative_matches_finite_difference(self):
        solution = radial_solve(acceptance_params())
        r = np.linspace(0.01, solution.rho - 0.01, 100)
        r = r[np.abs(r - 0.25) > 1e-3]
        step = 1e-5
        numeric = (radial_u(solution, r + step) - radial_u(solution, r - step)) / (2 * step)
        exact = radial_du(solution, r)
        self.assertLess(np.max(np.abs(numeric - exact) / np.maximum(np.abs(exact), 1e-3)), 1e-6)
        self.assertTrue(np.all(exact < 0))

    def test_outside_support_vanishes(self):
        solution = radial_solve(acceptance_params())
        np.testing.assert_array_equal(radial_u(solution, np.array([solution.rho, 0.99, 1.0])), 0.0)
        self.assertEqual(radial_du(solution, 0.999), 0.0)
        self.assertAlmostEqual(radial_u(solution, 0.0), radial_u(solution, 1e-9), places=9)
        profile = radial_profile(solution, 101)
        self.assertEqual(profile.shape, (100, 3))

    def test_scaling_symmetry(self):
        s = 2.0
        base = RadialParams(n=2, lam=2.0, a=10.0, b=1.0, r1=0.25, R=1.0, g_profile=StepProfile(value=0.3, start=0.25))
        scaled = RadialParams(n=2, lam=2.0 / s ** 2, a=10.0, b=1.0, r1=0.25 * s, R=1.0 * s,
                              g_profile=StepProfile(value=0.3 * s, start=0.25 * s))
        sol, sol_scaled = radial_solve(base), radial_solve(scaled)
        self.assertAlmostEqual(sol_scaled.rho, s * sol.rho, places=9)
        r = np.linspace(0.0, sol.rho * 0.99, 25)
        np.testing.assert_allclose(radial_u(sol_scaled, s * r), s ** 2 * radial_u(sol, r), rtol=1e-8, atol=1e-10)

    def test_energy_is_negative_and_below_trivial_branch(self):
        params = acceptance_params()
        solution = radial_solve(params)
        self.assertLess(radial_energy(solution), 0)
        self.assertGreater(trivial_branch_energy(2, params.lam, params.a, params.b, solution.rho), 0)


class TestConstants(unittest.TestCase):
    def test_mvt_constant(self):
        # n = 3: 4 pi (sin r - r cos r) / k^3
        self.assertAlmostEqual(mvt_constant(3, 1.0, 2.0), 4 * math.pi * (math.sin(2.0) - 2.0 * math.cos(2.0)),
                               places=10)
        self.assertAlmostEqual(mvt_constant(2, 1e-4, 1.0), math.pi, places=6)
        with self.assertRaises(ValueError):
            mvt_constant(3, 1.0, math.pi)

    def test_mvt_constant_averages_helmholtz_solutions(self):
        # w(x) = cos(k x1) on the disk of radius r about the origin, polar trapezoid rule
        k, radius = 1.3, 0.8
        s = np.linspace(0, radius, 2001)
        theta = 2 * math.pi * np.arange(512) / 512
        w = np.cos(k * np.outer(s, np.cos(theta))).mean(axis=1) * 2 * math.pi * s
        integral = float(np.sum((w[1:] + w[:-1]) / 2) * (s[1] - s[0]))
        self.assertAlmostEqual(integral, mvt_constant(2, k, radius), places=5)

    def test_bessel_integral_identity(self):
        # d/dr [r^{n/2} J_{n/2}(s r)] = s r^{n/2} J_{(n-2)/2}(s r)
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.choice([2, 3]))
            s = math.sqrt(float(rng.uniform(0.1, 10.0)))
            rho = float(rng.uniform(0.1, 2.0))
            nu0, nu1 = orders_for_dimension(n)
            integral, _ = integrate.quad(lambda r: bessel_j(nu0, s * r) * r ** (n / 2), 0.0, rho,
                                         epsabs=1e-13, epsrel=1e-12)
            self.assertLess(abs(integral - rho ** (n / 2) * bessel_j(nu1, s * rho) / s), 1e-8)

    def test_thresholds(self):
        mass_bound = mass_threshold(2, 1.0, 0.1)
        self.assertGreater(mass_bound, 0)
        self.assertAlmostEqual(mass_threshold(2, 2.0, 0.1), 2 * mass_bound, places=12)
        self.assertAlmostEqual(mass_threshold(3, 1.0, 0.2), 8 * mass_threshold(3, 1.0, 0.1), places=10)
        with self.assertRaises(ValueError):
            frequency_threshold(2, first_zero(BesselOrder(twice_order=0)), 1.0, 2.0)

    def test_mollified_parameters_are_admissible(self):
        n, beta, eps, b = 2, 2.0, 0.1, 1.0
        mass = 2.0
        k_max = frequency_threshold(n, beta, b, mass)
        self.assertGreater(k_max, 0)
        k = 0.9 * k_max
        self.assertGreater(mass, exact_mass_bound(n, k, b, eps))
        params = mollified_parameters(n, k, beta, eps, mass, b, b)
        self.assertAlmostEqual(params.R, beta / k, places=12)
        self.assertAlmostEqual(params.lam, k * k, places=14)
        report = check_admissibility(n, params.lam, params.a, params.a0, params.b, params.b0, params.r1, params.r2,
                                     params.R)
        self.assertTrue(report.passed, [c for c in report.clauses if not c.passed])
        self.assertTrue(params.r2 <= report.Rprime_r2 <= params.R)

    def test_admissibility_reports_failing_clause(self):
        report = check_admissibility(2, 1.0, 2.0, 2.0, 1.0, 1.0, 0.5, 1.0, 3.0)
        self.assertFalse(report.passed)
        self.assertFalse(report.clause("lambda < lambda_star").passed)
        with self.assertRaises(ValueError):
            check_admissibility(2, 1.0, 2.0, 2.0, 0.0, 1.0, 0.5, 1.0, 3.0)

    def test_null_quadrature_radii(self):
        radii = null_quadrature_radii(2, 1.0, 3)
        np.testing.assert_allclose(radii, [3.831705970207512, 7.015586669815619, 10.173468135062722], atol=1e-10)
        np.testing.assert_allclose(null_quadrature_radii(2, 2.0, 3), np.array(radii) / 2, atol=1e-12)
        # J_{3/2} zeros solve tan x = x
        for radius in null_quadrature_radii(3, 1.0, 3):
            self.assertAlmostEqual(math.tan(radius), radius, places=6)
        with self.assertRaises(ValueError):
            null_quadrature_radii(2, 1.0, 0)
