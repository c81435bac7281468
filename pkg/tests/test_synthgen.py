import math

import numpy as np
import pytest
from oracles import signal_variance_oracle

from ddacspam.core import Dataset, ScenarioSpec, load_dataset
from ddacspam.errors import NoGroundTruth, OutOfRange
from ddacspam.synthgen import (
    component_functions,
    export_csv,
    g1,
    g2,
    g4,
    g6,
    g7,
    gen_example,
    gen_fig3,
    generate,
    parse_scenario,
    snr,
)

# quadrature values; sampling-based checks below allow for Monte Carlo error
VAR_H = {"ex1": 34.641285, "ex2": 100.672894, "ex3": 0.913154, "ex5": 25.909860}
SIGMA = {"ex1": 1.5, "ex2": 2.56, "ex3": 0.3, "ex4": 0.3, "ex5": 1.2}


class TestComponents:
    def test_identity(self):
        assert g1(np.array([2.0]))[0] == 2.0

    def test_centered_square_root(self):
        assert g2(np.array([math.sqrt(25.0 / 12.0)]))[0] == pytest.approx(0.0, abs=1e-15)

    def test_exp_centering_constant(self):
        assert g4(np.array([0.0]))[0] == pytest.approx(-1.4200817924159153, abs=1e-14)

    def test_ratio_peak(self):
        # sin = 1 makes the ratio 1/(2-1)
        assert g6(np.array([0.5]), math.pi)[0] == pytest.approx(1.0, abs=1e-12)

    def test_trig_mix_peak(self):
        assert g7(np.array([0.5]), math.pi)[0] == pytest.approx(0.9, abs=1e-12)

    def test_table_complete(self):
        table = component_functions()
        assert sorted(table) == ["g1", "g2", "g3", "g4", "g5", "g6", "g7"]
        assert table["g3"](np.array([1.0]), 2.0)[0] == pytest.approx(math.sin(2.0))


class TestGenExample:
    def test_shapes_and_truth(self):
        ds = gen_example(ScenarioSpec("ex1", n=200, p=10, seed=3))
        assert ds.n == 200 and ds.p == 10
        assert ds.truth.active_set == (1, 2, 3, 4)
        assert ds.truth.sigma == 1.5
        assert ds.truth.scenario.example_id == "ex1"
        assert ds.truth.h_values.shape == (200,)

    def test_truth_reconstructs_h(self):
        ds = gen_example(ScenarioSpec("ex3", n=150, p=8, seed=5))
        np.testing.assert_allclose(ds.truth.h(ds.x), ds.truth.h_values, atol=1e-12)

    def test_inactive_features_inert(self):
        ds = gen_example(ScenarioSpec("ex2", n=100, p=9, seed=1))
        bent = ds.x.copy()
        bent[:, 4:] = 77.0
        np.testing.assert_array_equal(ds.truth.h(bent), ds.truth.h_values)

    def test_deterministic(self):
        a = gen_example(ScenarioSpec("ex5", n=120, p=7, seed=42))
        b = gen_example(ScenarioSpec("ex5", n=120, p=7, seed=42))
        c = gen_example(ScenarioSpec("ex5", n=120, p=7, seed=43))
        assert np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)
        assert not np.array_equal(a.y, c.y)

    def test_noise_scale(self):
        ds = gen_example(ScenarioSpec("ex1", n=100_000, p=4, seed=9))
        resid = ds.y - ds.truth.h_values
        assert resid.std() == pytest.approx(1.5, rel=0.02)
        assert abs(resid.mean()) < 0.02

    @pytest.mark.parametrize("example_id", ["ex1", "ex2", "ex3", "ex5"])
    def test_snr_matches_quadrature(self, example_id):
        p = 25 if example_id == "ex3" else 4
        ds = gen_example(ScenarioSpec(example_id, n=100_000, p=p, seed=11))
        want = signal_variance_oracle(example_id) / SIGMA[example_id] ** 2
        assert snr(ds) == pytest.approx(want, rel=0.05)
        assert want == pytest.approx(VAR_H[example_id] / SIGMA[example_id] ** 2, rel=1e-4)

    def test_ex4_matches_oracle_too(self):
        ds = gen_example(ScenarioSpec("ex4", n=100_000, p=25, seed=11))
        want = signal_variance_oracle("ex4") / 0.09
        assert snr(ds) == pytest.approx(want, rel=0.05)

    def test_snr_claimed_ranges(self):
        # stated working ranges for the iid scenarios
        assert 13 < snr(gen_example(ScenarioSpec("ex1", 100_000, 4, 2))) < 17
        assert 16 < snr(gen_example(ScenarioSpec("ex5", 100_000, 4, 2))) < 20

    def test_segment_correlation(self):
        ds = gen_example(ScenarioSpec("ex3", n=100_000, p=25, seed=17))
        r = np.corrcoef(ds.x, rowvar=False)
        # within segment: t^2/(1+t^2) = 9/13; across segments: independent
        assert r[0, 1] == pytest.approx(9.0 / 13.0, abs=0.01)
        assert abs(r[0, 24]) < 0.02

    def test_global_sharing(self):
        ds = gen_example(ScenarioSpec("ex4", n=100_000, p=25, seed=17))
        r = np.corrcoef(ds.x, rowvar=False)
        assert r[0, 24] == pytest.approx(9.0 / 13.0, abs=0.01)

    def test_single_segment_equals_global(self):
        a = gen_example(ScenarioSpec("ex3", n=300, p=20, seed=23))
        b = gen_example(ScenarioSpec("ex4", n=300, p=20, seed=23))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_independence_limit(self):
        ds = gen_example(ScenarioSpec("ex4", n=50_000, p=6, seed=3, t_or_rho=0.0))
        assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0
        r = np.corrcoef(ds.x, rowvar=False)
        assert np.max(np.abs(r - np.eye(6))) < 0.02

    def test_rho_override(self):
        ds = gen_example(ScenarioSpec("ex5", n=100_000, p=5, seed=3, t_or_rho=0.9))
        r = np.corrcoef(ds.x, rowvar=False)
        assert r[0, 1] == pytest.approx(0.9, abs=0.01)
        assert ds.x[:, 0].std() == pytest.approx(1.0, rel=0.02)

    def test_bad_arguments(self):
        with pytest.raises(OutOfRange):
            gen_example(ScenarioSpec("ex9", 100, 10, 0))
        with pytest.raises(OutOfRange):
            gen_example(ScenarioSpec("ex1", 100, 3, 0))
        with pytest.raises(OutOfRange):
            gen_example(ScenarioSpec("ex3", 100, 10, 0, t_or_rho=-0.5))
        with pytest.raises(OutOfRange):
            gen_example(ScenarioSpec("ex5", 100, 10, 0, t_or_rho=1.0))


class TestFig3:
    def test_null_model(self):
        ds = gen_fig3(0.0, n=50_000, p=8, seed=5)
        assert ds.truth.active_set == ()
        assert not ds.truth.h_values.any()
        assert snr(ds) == 0.0
        assert ds.y.var() == pytest.approx(0.25, rel=0.03)
        np.testing.assert_array_equal(ds.truth.h(ds.x), np.zeros(ds.n))

    def test_quadratic_snr_scaling(self):
        half = gen_fig3(0.5, n=2_000, p=6, seed=8)
        full = gen_fig3(1.0, n=2_000, p=6, seed=8)
        assert np.array_equal(half.x, full.x)  # same covariate draw
        assert snr(full) / snr(half) == pytest.approx(4.0, rel=1e-12)

    def test_snr_level(self):
        ds = gen_fig3(0.6, n=100_000, p=6, seed=21)
        want = 0.36 * signal_variance_oracle("ex3") / 0.25
        assert snr(ds) == pytest.approx(want, rel=0.05)
        assert want == pytest.approx(1.315, abs=0.01)

    def test_negative_scale(self):
        with pytest.raises(OutOfRange):
            gen_fig3(-0.1, n=100, p=6, seed=0)


def test_snr_requires_truth():
    rng = np.random.default_rng(0)
    plain = Dataset(y=rng.standard_normal(50), x=rng.random((50, 3)))
    with pytest.raises(NoGroundTruth):
        snr(plain)


class TestParseScenario:
    def test_full_config(self):
        spec = parse_scenario(
            "# testing run\nexample_id=fig3\nn=300 p=500\nseed=7\na=0.5\n"
        )
        assert spec == ScenarioSpec("fig3", 300, 500, 7, a=0.5)

    def test_dependence_override(self):
        spec = parse_scenario("example_id=ex5 n=100 p=10 seed=1 t_or_rho=0.3")
        assert spec.t_or_rho == 0.3

    def test_missing_key(self):
        with pytest.raises(ValueError, match="missing"):
            parse_scenario("example_id=ex1 n=100 p=10")

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_scenario("example_id=ex1 n=100 p=10 seed=0 snr=5")

    def test_duplicate_key(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_scenario("example_id=ex1 n=100 n=200 p=10 seed=0")

    def test_bad_number(self):
        with pytest.raises(ValueError, match="bad scenario value"):
            parse_scenario("example_id=ex1 n=ten p=10 seed=0")

    def test_generate_dispatch(self):
        null = generate(ScenarioSpec("fig3", 64, 6, 3, a=0.0))
        assert null.truth.active_set == ()
        ex = generate(ScenarioSpec("ex1", 64, 6, 3))
        assert ex.truth.active_set == (1, 2, 3, 4)


def test_csv_round_trip(tmp_path):
    ds = gen_example(ScenarioSpec("ex1", n=50, p=6, seed=13))
    out = tmp_path / "ex1.csv"
    export_csv(ds, str(out))
    back = load_dataset(str(out), "y")
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.x, ds.x)
    assert back.feature_names == ("x1", "x2", "x3", "x4", "x5", "x6")
