import numpy as np
import pytest

from ddacspam.core import (
    Dataset,
    PartitionPlan,
    load_dataset,
    partition_features,
    zeta_inverse,
)
from ddacspam.errors import (
    ConstantColumn,
    MissingColumn,
    MissingFile,
    NonNumericCell,
    OutOfRange,
    TooFewRows,
)


def _toy(n=20, p=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    return Dataset(y=y, x=x)


class TestPartition:
    def test_balanced_sizes(self):
        for p, m in [(10, 3), (100, 7), (5, 5), (3, 5), (1000, 10)]:
            plan = partition_features(p, m, seed=1)
            sizes = plan.sizes
            assert sum(sizes) == p
            assert max(sizes) - min(sizes) <= 1

    def test_is_bijection(self):
        plan = partition_features(37, 4, seed=9)
        seen = sorted(j for machine in plan.machines for j in machine)
        assert seen == list(range(1, 38))

    def test_sorted_within_machine(self):
        plan = partition_features(50, 6, seed=3)
        for machine in plan.machines:
            assert list(machine) == sorted(machine)

    def test_deterministic(self):
        a = partition_features(40, 4, seed=7)
        b = partition_features(40, 4, seed=7)
        c = partition_features(40, 4, seed=8)
        assert a.machines == b.machines
        assert a.machines != c.machines

    def test_machine_of_and_inverse(self):
        plan = partition_features(23, 3, seed=2)
        for j in range(1, 24):
            i, k = plan.machine_of(j)
            assert plan.machines[i - 1][k - 1] == j
            assert zeta_inverse(plan, i, k) == j

    def test_empty_machines_when_m_exceeds_p(self):
        plan = partition_features(3, 5, seed=0)
        assert plan.sizes == (1, 1, 1, 0, 0)

    def test_out_of_range(self):
        plan = partition_features(10, 2, seed=0)
        with pytest.raises(OutOfRange):
            plan.machine_of(0)
        with pytest.raises(OutOfRange):
            plan.machine_of(11)
        with pytest.raises(OutOfRange):
            zeta_inverse(plan, 3, 1)
        with pytest.raises(OutOfRange):
            zeta_inverse(plan, 1, 99)


class TestDataset:
    def test_valid(self):
        ds = _toy()
        assert ds.n == 20 and ds.p == 4

    def test_constant_column(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((15, 3))
        x[:, 1] = 2.5
        with pytest.raises(ConstantColumn):
            Dataset(y=rng.standard_normal(15), x=x)

    def test_non_finite(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((15, 3))
        x[4, 2] = np.nan
        with pytest.raises(NonNumericCell):
            Dataset(y=rng.standard_normal(15), x=x)

    def test_too_few_rows(self):
        rng = np.random.default_rng(0)
        with pytest.raises(TooFewRows):
            Dataset(y=rng.standard_normal(5), x=rng.standard_normal((5, 2)))

    def test_length_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(Exception):
            Dataset(y=rng.standard_normal(9), x=rng.standard_normal((10, 2)))


class TestLoadDataset:
    def _write(self, tmp_path, text, name="d.csv"):
        f = tmp_path / name
        f.write_text(text)
        return str(f)

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((12, 2))
        y = rng.standard_normal(12)
        lines = ["y,x1,x2"]
        for i in range(12):
            lines.append(f"{float(y[i])!r},{float(x[i, 0])!r},{float(x[i, 1])!r}")
        path = self._write(tmp_path, "\n".join(lines) + "\n")
        ds = load_dataset(path, "y")
        np.testing.assert_allclose(ds.y, y, rtol=0, atol=0)
        np.testing.assert_allclose(ds.x, x, rtol=0, atol=0)
        assert ds.feature_names == ("x1", "x2")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_dataset(str(tmp_path / "nope.csv"), "y")

    def test_missing_response(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,2\n")
        with pytest.raises(MissingColumn):
            load_dataset(path, "y")

    def test_non_numeric_cell_reports_location(self, tmp_path):
        rows = ["y,a,b"] + [f"{i}.0,1.{i},2.{i}" for i in range(10)]
        rows[4] = "3.0,oops,2.3"
        path = self._write(tmp_path, "\n".join(rows) + "\n")
        with pytest.raises(NonNumericCell) as err:
            load_dataset(path, "y")
        assert "oops" in str(err.value) or "a" in str(err.value)

    def test_too_few_data_rows(self, tmp_path):
        path = self._write(tmp_path, "y,a\n1.0,2.0\n2.0,1.0\n")
        with pytest.raises(TooFewRows):
            load_dataset(path, "y")

    def test_blank_lines_skipped(self, tmp_path):
        rng = np.random.default_rng(1)
        body = [
            f"{float(rng.standard_normal())!r},{float(rng.standard_normal())!r}"
            for _ in range(9)
        ]
        text = "y,a\n" + body[0] + "\n\n" + "\n".join(body[1:]) + "\n"
        ds = load_dataset(self._write(tmp_path, text), "y")
        assert ds.n == 9
