import numpy as np
import pytest

from leraylab.experiments import (
    ExperimentRecord,
    RateStudyConfig,
    bootstrap_ci,
    fit_rate,
    initial_field,
    predicted_clt_exponent,
    predicted_main_exponent,
    run_clt_study,
    run_main_rate_study,
)
from leraylab.noise import stream


def tiny_main_config(**kw):
    base = dict(
        dim=2, gamma=0.5, gamma0=0.6, kappa=0.01, q=3.0, alpha=0.9,
        n_sweep=(1, 2), cutoff=4, samples=10, T=0.01, dt=1e-3, seed=5,
    )
    base.update(kw)
    return RateStudyConfig(**base)


def tiny_clt_config(**kw):
    base = dict(
        dim=3, gamma=1.1, gamma0=0.8, kappa=0.01, q=3.0, alpha=0.7,
        n_sweep=(1, 2), cutoff=4, samples=10, T=0.01, dt=1e-3, seed=5,
    )
    base.update(kw)
    return RateStudyConfig(**base)


class TestInitialField:
    @pytest.mark.parametrize("dim", [2, 3])
    def test_properties(self, dim):
        u = initial_field(dim, 8, amplitude=0.7)
        assert np.linalg.norm(u.coeffs) == pytest.approx(0.7)
        assert u.is_real()
        assert u.is_divergence_free()
        # supported on |k|^2 <= 4 only
        outside = u.lattice.norm2 > 4
        assert np.max(np.abs(u.coeffs[outside]), initial=0.0) == 0.0

    def test_deterministic(self):
        a = initial_field(3, 6)
        b = initial_field(3, 6)
        assert np.array_equal(a.coeffs, b.coeffs)


class TestPredictedExponents:
    def test_main_2d(self):
        cfg = tiny_main_config()
        # (2 gamma - d) alpha / 2 for gamma > (d-2)/2
        assert predicted_main_exponent(cfg) == pytest.approx(-0.45)

    def test_main_3d_small_gamma(self):
        cfg = tiny_clt_config(gamma=0.4, alpha=0.9)
        # gamma <= (d-2)/2 switches to the 1/d power
        assert predicted_main_exponent(cfg) == pytest.approx(
            (2 * 0.4 - 3) * 0.9 / 3.0
        )

    def test_clt(self):
        cfg = tiny_clt_config()
        assert predicted_clt_exponent(cfg) == pytest.approx(-0.08)


class TestValidation:
    def test_clt_requires_3d(self):
        with pytest.raises(ValueError, match="d=3"):
            tiny_main_config().validate_clt()

    def test_clt_gamma_window(self):
        with pytest.raises(ValueError, match="gamma must lie in"):
            tiny_clt_config(gamma=0.9).validate_clt()

    def test_main_gamma0_window(self):
        with pytest.raises(ValueError, match="gamma0"):
            tiny_main_config(gamma0=1.5).validate_main()

    def test_main_q_floor(self):
        with pytest.raises(ValueError, match="q must exceed"):
            tiny_main_config(q=2.0).validate_main()

    def test_alpha_window(self):
        with pytest.raises(ValueError, match="alpha"):
            tiny_main_config(alpha=1.5).validate_main()
        with pytest.raises(ValueError, match="alpha0"):
            tiny_clt_config(alpha=0.4).validate_clt()

    def test_sweep_must_fit_cutoff(self):
        with pytest.raises(ValueError, match="cutoff"):
            tiny_main_config(n_sweep=(4, 8)).validate_main()

    def test_record_ordering(self):
        with pytest.raises(ValueError):
            ExperimentRecord(
                N=2, error=0.1, ci_low=0.3, ci_high=0.2, epsilon=0.1,
                d_n=0.1, samples=4,
            )

    def test_config_hash_stable(self):
        assert tiny_main_config().config_hash() == tiny_main_config().config_hash()
        assert tiny_main_config().config_hash() != tiny_main_config(seed=6).config_hash()


class TestFitRate:
    def test_exact_power_law(self):
        records = [
            {"N": n, "error": n**-0.5, "epsilon": 1.0 / n} for n in (2, 4, 8, 16)
        ]
        fit = fit_rate(records)
        assert fit["slope"] == pytest.approx(-0.5, abs=1e-12)
        assert fit["stderr"] == pytest.approx(0.0, abs=1e-12)
        assert fit["slope_vs_epsilon"] == pytest.approx(0.5, abs=1e-12)
        assert fit["points"] == 4

    def test_drops_nonpositive_with_warning(self):
        records = [{"N": n, "error": n**-1.0, "epsilon": 1.0} for n in (2, 4, 8)]
        records.append({"N": 16, "error": 0.0, "epsilon": 1.0})
        with pytest.warns(UserWarning, match="nonpositive"):
            fit = fit_rate(records)
        assert fit["points"] == 3

    def test_too_few_points(self):
        records = [{"N": n, "error": 0.1, "epsilon": 1.0} for n in (2, 4)]
        with pytest.raises(ValueError, match="at least 3"):
            fit_rate(records)


class TestBootstrap:
    def test_constant_sample_collapses(self):
        lo, hi = bootstrap_ci(np.full(20, 0.3), 3.0, rng=stream(0, 0))
        assert lo == pytest.approx(0.3)
        assert hi == pytest.approx(0.3)

    def test_interval_brackets_estimate(self):
        vals = stream(1, 0).gamma(2.0, size=40)
        est = np.mean(vals**3.0) ** (1 / 3.0)
        lo, hi = bootstrap_ci(vals, 3.0, rng=stream(1, 1))
        assert lo < est < hi

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least 10"):
            bootstrap_ci(np.ones(5), 2.0)
        with pytest.raises(ValueError, match="q"):
            bootstrap_ci(np.ones(20), 0.5)
        with pytest.raises(ValueError, match="level"):
            bootstrap_ci(np.ones(20), 2.0, level=1.5)


class TestStudies:
    def test_main_study_record_shape(self):
        cfg = tiny_main_config()
        records = run_main_rate_study(cfg, threads=1)
        assert [r.N for r in records] == [1, 2]
        for r in records:
            assert r.ci_low <= r.error <= r.ci_high or r.flagged
            assert r.samples == 10 and r.flagged == 0
            assert r.meta["study"] == "main"

    def test_main_study_thread_count_invariant(self):
        cfg = tiny_main_config()
        serial = run_main_rate_study(cfg, threads=1)
        parallel = run_main_rate_study(cfg, threads=2)
        for a, b in zip(serial, parallel):
            assert a.error == b.error
            assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)

    def test_clt_study_runs_and_is_deterministic(self):
        cfg = tiny_clt_config()
        one = run_clt_study(cfg, threads=1)
        two = run_clt_study(cfg, threads=1)
        assert [r.N for r in one] == [1, 2]
        for a, b in zip(one, two):
            assert a.error == b.error

    def test_main_study_validates(self):
        with pytest.raises(ValueError):
            run_main_rate_study(tiny_main_config(q=1.0), threads=1)
