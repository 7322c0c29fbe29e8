import math

import numpy as np
import pytest

from fastslow import (Budgets, CachePolicy, CoupledSystem, PSDFailure, Regime,
                      averaged_diffusion, averaged_drift, build_limit_sde,
                      psd_sqrt, regime_averages)
from fastslow.presets import ou_averaging, ou_full

RT2 = math.sqrt(2.0)

FAST_BUDGETS = Budgets(invariant_samples=20000, invariant_thinning=10,
                       corrector_paths=4000, corrector_tmax=6.0,
                       grid_points=17)
GOOD_BUDGETS = Budgets(invariant_samples=50000, invariant_thinning=20,
                       corrector_paths=20000, corrector_tmax=8.0,
                       grid_points=25)


def make_system(b=None, c=None, F=None, H=None, G=None, sigma=None):
    zero = lambda *a: np.zeros(np.shape(a[-2])[:-1] + (1,)) if False else None
    return CoupledSystem(
        d1=1, d2=1,
        b=b or (lambda x, y: -x),
        sigma=sigma or (lambda x, y: np.array([[RT2]])),
        c=c or (lambda x, y: np.zeros_like(x)),
        F=F or (lambda t, x, y: np.zeros_like(x)),
        H=H or (lambda t, x, y: np.zeros_like(x)),
        G=G or (lambda t, x, y: np.array([[1.0]])),
        autonomous=True,
    )


class TestPsdSqrt:
    def test_identity(self):
        assert np.array_equal(psd_sqrt(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        S = psd_sqrt(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(S, np.diag([2.0, 3.0]), atol=1e-14)

    def test_two_by_two(self):
        M = np.array([[2.0, 1.0], [1.0, 2.0]])
        S = psd_sqrt(M)
        w = np.linalg.eigvalsh(S)
        np.testing.assert_allclose(sorted(w ** 2), [1.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(S @ S, M, atol=1e-12)

    def test_random_matrices_reconstruct_clamped(self):
        gen = np.random.default_rng(2024)
        for _ in range(100):
            n = int(gen.integers(1, 6))
            A = gen.normal(size=(n, n))
            M = A + A.T
            S = psd_sqrt(M, tol_psd=np.inf)
            w, V = np.linalg.eigh(0.5 * (M + M.T))
            clamped = (V * np.clip(w, 0.0, None)) @ V.T
            assert np.linalg.norm(S @ S - clamped) <= 1e-10

    def test_psd_failure(self):
        with pytest.raises(PSDFailure):
            psd_sqrt(np.diag([1.0, -0.1]))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            psd_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestAveragedDrift:
    def test_r1_gaussian_mean(self):
        sys1 = make_system(b=lambda x, y: y - x, F=lambda t, x, y: x)
        for y in (-1.0, 0.0, 2.0):
            fh, se = averaged_drift(Regime.R1, sys1, 0.0, [y],
                                    FAST_BUDGETS, seed=5)
            assert abs(fh[0] - y) <= 3 * se[0] + 0.01

    def test_r1_centered_slow_drift(self):
        sys1 = make_system(b=lambda x, y: y - x, F=lambda t, x, y: x - y)
        for y in (-1.0, 0.0, 1.0):
            fh, se = averaged_drift(Regime.R1, sys1, 0.0, [y],
                                    FAST_BUDGETS, seed=8)
            assert abs(fh[0]) <= 3 * se[0] + 0.01

    def test_r2_with_zero_c_matches_r1_bitwise(self):
        sys1 = make_system(b=lambda x, y: y - x, F=lambda t, x, y: x,
                           H=lambda t, x, y: x - y)
        f1, _ = averaged_drift(Regime.R1, sys1, 0.0, [0.5], FAST_BUDGETS, seed=3)
        f2, _ = averaged_drift(Regime.R2, sys1, 0.0, [0.5], FAST_BUDGETS, seed=3)
        assert np.array_equal(f1, f2)

    def test_r2_correction_oracle(self):
        # H = x gives the identity corrector, so the correction is E[c]
        sys1 = make_system(H=lambda t, x, y: x, c=lambda x, y: x ** 2)
        fh, se = averaged_drift(Regime.R2, sys1, 0.0, [0.0],
                                GOOD_BUDGETS, seed=11)
        assert abs(fh[0] - 1.0) <= max(0.1, 4 * se[0])

    def test_r3_no_parameter_dependence_matches_r1_bitwise(self):
        sys1 = make_system(H=lambda t, x, y: x, F=lambda t, x, y: x)
        f1, _ = averaged_drift(Regime.R1, sys1, 0.0, [0.0], FAST_BUDGETS, seed=4)
        f3, _ = averaged_drift(Regime.R3, sys1, 0.0, [0.0], FAST_BUDGETS, seed=4)
        assert np.array_equal(f1, f3)

    def test_r4_full_benchmark_oracle(self):
        # corrected drift of the fully coupled benchmark is -y + 1/2
        fh, se = averaged_drift(Regime.R4, ou_full(), 0.0, [1.0],
                                GOOD_BUDGETS, seed=13)
        assert abs(fh[0] - (-0.5)) <= max(0.1, 4 * se[0])


class TestAveragedDiffusion:
    def test_constant_matrix_exact(self):
        sys1 = make_system(G=lambda t, x, y: RT2 * np.eye(1))
        gh, se = averaged_diffusion(Regime.R1, sys1, 0.0, [0.0],
                                    FAST_BUDGETS, seed=2)
        assert gh[0, 0] == pytest.approx(RT2, abs=1e-15)
        assert np.all(se == 0.0)

    def test_state_free_factor_exact(self):
        sys1 = make_system(G=lambda t, x, y: (1.0 + float(y[..., 0]) ** 2) * np.eye(1))
        gh, _ = averaged_diffusion(Regime.R1, sys1, 0.0, [2.0],
                                   FAST_BUDGETS, seed=2)
        assert gh[0, 0] == pytest.approx(5.0, abs=1e-12)

    def test_augmented_diffusion_oracle(self):
        sys1 = make_system(H=lambda t, x, y: x)
        gh, _ = averaged_diffusion(Regime.R3, sys1, 0.0, [0.0],
                                   GOOD_BUDGETS, seed=21)
        assert abs(gh[0, 0] - RT2) <= 0.05

    def test_augmentation_is_psd(self):
        sys1 = make_system(H=lambda t, x, y: x)
        ra3 = regime_averages(sys1, Regime.R3, 0.0, [0.0], GOOD_BUDGETS, seed=21)
        ra1 = regime_averages(sys1, Regime.R1, 0.0, [0.0], GOOD_BUDGETS, seed=21)
        gap = ra3.ghat @ ra3.ghat - ra1.ghat @ ra1.ghat
        tol = 1e-6 * abs(np.trace(ra3.cov))
        assert np.linalg.eigvalsh(gap).min() >= -tol

    def test_reconstruction_tolerance(self):
        sys1 = make_system(H=lambda t, x, y: x)
        ra = regime_averages(sys1, Regime.R3, 0.0, [0.0], FAST_BUDGETS, seed=9)
        w, V = np.linalg.eigh(ra.cov)
        clamped = (V * np.clip(w, 0.0, None)) @ V.T
        assert np.linalg.norm(ra.ghat @ ra.ghat - clamped) <= 1e-10


class TestLimitField:
    def test_cache_hit_bit_identical(self):
        avg = build_limit_sde(Regime.R1, ou_averaging(), FAST_BUDGETS,
                              CachePolicy(quantum=1e-2), seed=7)
        a = avg.Fhat(0.0, [0.2501])
        b = avg.Fhat(0.0, [0.2549])  # same lattice cell
        c = avg.Fhat(0.0, [0.2501])
        assert np.array_equal(a, b)
        assert np.array_equal(a, c)
        assert avg.provenance()["n_cells"] == 1

    def test_r4_with_trivial_couplings_matches_r1(self):
        sys1 = ou_averaging()
        a1 = build_limit_sde(Regime.R1, sys1, FAST_BUDGETS, seed=3)
        a4 = build_limit_sde(Regime.R4, sys1, FAST_BUDGETS, seed=3)
        y = [0.4]
        assert np.array_equal(a1.Fhat(0.0, y), a4.Fhat(0.0, y))
        assert np.array_equal(a1.Ghat(0.0, y), a4.Ghat(0.0, y))

    def test_batch_matches_pointwise(self):
        avg = build_limit_sde(Regime.R1, ou_averaging(), FAST_BUDGETS, seed=7)
        Y = np.array([[0.1], [0.3]])
        batch = avg.drift_batch(0.0, Y)
        assert np.array_equal(batch[0], avg.Fhat(0.0, [0.1]))
        assert np.array_equal(batch[1], avg.Fhat(0.0, [0.3]))

    def test_interpolation_between_cells(self):
        pol = CachePolicy(quantum=0.1, interpolate=True)
        avg = build_limit_sde(Regime.R1, ou_averaging(), FAST_BUDGETS,
                              CachePolicy(quantum=0.1), seed=7)
        avgi = build_limit_sde(Regime.R1, ou_averaging(), FAST_BUDGETS,
                               pol, seed=7)
        lo = avg.Fhat(0.0, [0.2])[0]
        hi = avg.Fhat(0.0, [0.3])[0]
        mid = avgi.Fhat(0.0, [0.25])[0]
        assert mid == pytest.approx(0.5 * (lo + hi), rel=1e-12)

    def test_drift_tracks_mean_reversion(self):
        # the averaged drift of the benchmark is -y; check sign and scale
        avg = build_limit_sde(Regime.R1, ou_averaging(),
                              Budgets(invariant_samples=40000,
                                      invariant_thinning=10,
                                      corrector_paths=2000,
                                      corrector_tmax=4.0), seed=19)
        for y, want in ((-1.0, 1.0), (1.0, -1.0)):
            got = avg.Fhat(0.0, [y])[0]
            assert got == pytest.approx(want, abs=0.2)
