import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdcm.errors import DegenerateSignalError, InvalidInputError
from cdcm.model import ParamSet, StimulusDesign, hrf_kernel, convolve
from cdcm.simulate import (
    SimulationSpec, benchmark_design, chain_models, clamp_factor, roi_streams,
    simple_model_truth, simulate,
)


class TestBenchmarkDesign:
    def test_layout(self):
        des = benchmark_design()
        assert des.U.shape == (150, 2) and des.r == 2.0
        assert des.U[:10].sum() == 0
        assert np.all(des.U[10:20] == [1, 0])
        assert des.U[20:30].sum() == 0
        assert np.all(des.U[30:40] == [0, 1])
        assert len(des.blocks) == 15

    def test_never_both_on(self):
        assert benchmark_design().U.sum(1).max() == 1


class TestTruths:
    def test_simple_values(self):
        h, p = simple_model_truth()
        assert np.allclose(p.A(h), [[-0.55, 0.3], [0.4, -0.55]])
        assert p.B(h)[1, 0, 1] == -0.2 and np.count_nonzero(p.B(h)) == 1
        assert np.allclose(p.C(h), [[0.7, 0.0], [0.0, 0.0]])
        assert np.allclose(p.s_star, 0.1)
        assert h.n_neural == 6

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_chain_sizes(self, k):
        h, p = chain_models(k)
        assert h.d == 2 * k
        assert h.n_neural == 6 * k + 2 * (k - 1)

    def test_chain_spectra_real_distinct_stable(self):
        h, p = chain_models(3)
        for u in ([0, 0], [1, 0], [0, 1]):
            a = p.A(h) + np.tensordot(u, p.B(h), axes=1)
            ev = np.linalg.eigvals(a)
            assert np.max(np.abs(ev.imag)) < 1e-12
            ev = np.sort(ev.real)
            assert np.all(ev < 0) and np.min(np.diff(ev)) > 1e-3

    def test_bad_k(self):
        with pytest.raises(InvalidInputError):
            chain_models(0)


class TestStreams:
    def test_roi_independence(self):
        a = [g.standard_normal(5) for g in roi_streams(7, 2)]
        b = [g.standard_normal(5) for g in roi_streams(7, 4)]
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(b[0], b[2])


class TestClamp:
    def test_no_clamp_needed(self):
        assert clamp_factor(np.zeros((5, 1)), np.ones((5, 1)) * 0.1) == 1.0

    def test_bisection_oracle(self, rng):
        sig = rng.normal(size=(50, 2)) * 0.3
        noise = rng.normal(size=(50, 2)) * 5
        k = clamp_factor(sig, noise)
        rng_of = lambda x: x.max() - x.min()  # noqa: E731
        assert 0 < k < 1
        assert rng_of(sig + k * noise) <= 4.0
        assert rng_of(sig + (k + 1e-9) * noise) > 4.0 - 1e-6

    @given(st.floats(0.05, 20))
    def test_range_bound(self, scale):
        rng = np.random.default_rng(3)
        sig = rng.normal(size=(40, 2)) * 0.5
        noise = rng.normal(size=(40, 2)) * scale
        k = clamp_factor(sig, noise)
        y = sig + k * noise
        assert y.max() - y.min() <= 4.0 + 1e-12


class TestSimulate:
    def test_noise_sd_from_snr(self, simple, design):
        h, p = simple
        b = simulate(SimulationSpec(p, h, design, snr=1.68, seed=3, range_clamp=False))
        mu = convolve(b.z, hrf_kernel(design.r, design.n))
        assert np.allclose(b.mu, mu)
        assert np.allclose(b.noise_sd, mu.std(0, ddof=1) / 1.68)
        assert b.clamp_factor == 1.0

    def test_range_clamped(self, simple, design):
        h, p = simple
        for seed in range(5):
            b = simulate(SimulationSpec(p, h, design, snr=0.05, seed=seed))
            assert b.Y.max() - b.Y.min() <= 4.0 + 1e-12
            assert b.clamp_factor < 1

    def test_reproducible(self, simple, design):
        h, p = simple
        a = simulate(SimulationSpec(p, h, design, seed=11)).Y
        b = simulate(SimulationSpec(p, h, design, seed=11)).Y
        c = simulate(SimulationSpec(p, h, design, seed=12)).Y
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_noise_free(self, simple, design):
        h, p = simple
        b = simulate(SimulationSpec(p, h, design, snr=math.inf))
        assert np.array_equal(b.Y, b.mu + p.beta)

    def test_empirical_snr(self, simple):
        # long design so the sample SD of the noise is close to its target
        h, p = simple
        des = benchmark_design(n=4000)
        b = simulate(SimulationSpec(p, h, des, snr=2.0, seed=1, range_clamp=False))
        ratio = b.mu.std(0, ddof=1) / (b.Y - b.mu).std(0, ddof=1)
        assert np.allclose(ratio, 2.0, rtol=0.05)

    def test_degenerate_signal(self, simple):
        h, p = simple
        q = ParamSet(**{**p.to_dict(), "C_entries": [0.0], "s_star": [0.0, 0.0]})
        with pytest.raises(DegenerateSignalError):
            simulate(SimulationSpec(q, h, benchmark_design()))

    def test_bad_spec(self, simple, design):
        h, p = simple
        with pytest.raises(InvalidInputError):
            SimulationSpec(p, h, design, snr=0)
        with pytest.raises(InvalidInputError):
            SimulationSpec(p, h, StimulusDesign(np.zeros((10, 1)), 2.0))
