import csv

import numpy as np
import pytest

from scno.metrics import (DegenerateTargetError, MetricsRow, compute_metrics, depth_monotone, depth_scan,
                          per_sample_metrics, write_depth_scan, write_metrics_csv)
from scno.training import StageResult


def stage(depth, loss, val=0.5):
    return StageResult(depth, {}, {}, [], loss * 2, loss, val, val, 1)


class TestPerSample:
    def test_exact(self, rng):
        t = rng.normal(size=(3, 1, 8, 8))
        for v in per_sample_metrics(t, t, 0.1).values():
            np.testing.assert_array_equal(v, 0.0)

    def test_constant_offset(self, rng):
        t = rng.normal(size=(1, 1, 8, 8))
        t /= np.linalg.norm(t)
        m = per_sample_metrics(t + 0.25, t, 0.1)
        assert m["max_error"][0] == pytest.approx(0.25, rel=1e-14)
        assert m["rel_l2"][0] == pytest.approx(0.25 * 8, rel=1e-12)

    def test_rel_h1_analytic_pair(self):
        n = 33
        x = np.linspace(0, 1, n)
        h = x[1] - x[0]
        X, Y = np.meshgrid(x, x, indexing="ij")
        u = np.sin(np.pi * X) * np.sin(np.pi * Y)
        v = u + 0.1 * X * Y
        e = v - u

        def h1_sq(a):
            total = (a**2).sum()
            total += sum(((a[i, j + 1] - a[i, j]) / h) ** 2 for i in range(n) for j in range(n - 1))
            total += sum(((a[i + 1, j] - a[i, j]) / h) ** 2 for i in range(n - 1) for j in range(n))
            return total

        expected = np.sqrt(h1_sq(e) / h1_sq(u))
        got = per_sample_metrics(v[None, None], u[None, None], h)["rel_h1"][0]
        assert got == pytest.approx(expected, rel=1e-12)

    def test_complex_modulus(self):
        t = np.ones((1, 2, 4, 4))
        p = t.copy()
        p[0, 0, 1, 1] += 3.0
        p[0, 1, 1, 1] += 4.0
        assert per_sample_metrics(p, t, 1.0)["max_error"][0] == pytest.approx(5.0)

    def test_scale_and_permutation_invariance(self, rng):
        p, t = rng.normal(size=(2, 5, 1, 8, 8))
        a = per_sample_metrics(p, t, 0.1)
        b = per_sample_metrics(3.0 * p, 3.0 * t, 0.1)
        for key in ("rel_l2", "rel_h1", "rrmse"):
            np.testing.assert_allclose(a[key], b[key], rtol=1e-13)
        order = rng.permutation(5)
        c = compute_metrics(p[order], t[order], 0.1)
        d = compute_metrics(p, t, 0.1)
        assert c.rel_l2 == pytest.approx(d.rel_l2, rel=1e-14)
        assert d.rrmse == d.rel_l2

    def test_errors(self):
        with pytest.raises(DegenerateTargetError):
            per_sample_metrics(np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)), 1.0)
        with pytest.raises(ValueError):
            per_sample_metrics(np.ones((1, 1, 4, 4)), np.ones((1, 1, 5, 5)), 1.0)

    def test_single_sample_input(self, rng):
        t = rng.normal(size=(1, 8, 8))
        assert per_sample_metrics(2 * t, t, 0.1)["rel_l2"].shape == (1,)


class TestDepthScan:
    def test_single_stage(self):
        assert depth_scan([stage(1, 0.3)]) == [{"depth": 1, "final_train_loss": 0.3, "val_rel_l2": 0.5,
                                                "val_rel_h1": 0.5}]

    def test_depth_column_follows_schedule(self):
        rows = depth_scan([stage(d, 1.0 / d) for d in (1, 2, 4, 8)])
        assert [r["depth"] for r in rows] == [1, 2, 4, 8]
        assert depth_monotone(rows)

    def test_monotone_slack(self):
        rows = depth_scan([stage(1, 1.0), stage(2, 1.04), stage(3, 1.0)])
        assert depth_monotone(rows, slack=1.05)
        assert not depth_monotone(rows, slack=1.01)

    def test_empty(self):
        with pytest.raises(ValueError):
            depth_scan([])

    def test_csv_files(self, tmp_path):
        write_depth_scan(tmp_path / "scan.csv", depth_scan([stage(1, 0.3), stage(2, 0.2)]))
        rows = list(csv.DictReader(open(tmp_path / "scan.csv")))
        assert [r["depth"] for r in rows] == ["1", "2"]
        write_metrics_csv(tmp_path / "m.csv", [MetricsRow("a", 3, 0.1, 0.2, 0.1, 1.0)])
        (row,) = csv.DictReader(open(tmp_path / "m.csv"))
        assert row["model_id"] == "a" and float(row["rel_h1"]) == 0.2
