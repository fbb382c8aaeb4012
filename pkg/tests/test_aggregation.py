import math
from functools import reduce

import numpy as np
import pytest

from dpgb.aggregation import AggregateReport, secure_sum, server_work, write_ledger
from dpgb.client import ClientContribution, fleet_contributions
from dpgb.dp_core import BudgetExceededError, PrivacyLedger, clip_l1
from dpgb.schema import Dimensions, ScaleMatrix, SparseHistogram, user_histogram
from conftest import random_dataset, random_histogram


def contribution(uid, hist):
    return ClientContribution(uid, hist)


class TestSecureSum:
    def test_empty_list(self, small_dims):
        assert secure_sum([], dims=small_dims).cells == {}
        with pytest.raises(ValueError):
            secure_sum([])

    def test_two_single_cell_vectors(self, small_dims):
        a = SparseHistogram(small_dims, {(0, 0, 0, 0): 1.0})
        b = SparseHistogram(small_dims, {(0, 0, 0, 0): 2.0})
        total = secure_sum([contribution("a", a), contribution("b", b)])
        assert total.cells == {(0, 0, 0, 0): 3.0}

    def test_permuted_copies_match_scaled_copy(self, small_dims, rng):
        base = random_histogram(rng, small_dims, max_cells=10)
        n = 7
        total = secure_sum([contribution(f"u{i}", base) for i in range(n)], dims=small_dims)
        assert total.allclose(base.scale(float(n)), rel_tol=1e-9)

    def test_mixed_dims_rejected(self, small_dims):
        other = Dimensions(num_activities=3, num_regions=4)
        with pytest.raises(ValueError):
            secure_sum([
                contribution("a", SparseHistogram.empty(small_dims)),
                contribution("b", SparseHistogram.empty(other)),
            ])

    def test_accepts_bare_histograms(self, small_dims, rng):
        hists = [random_histogram(rng, small_dims) for _ in range(3)]
        via_contrib = secure_sum([contribution(str(i), h) for i, h in enumerate(hists)],
                                 dims=small_dims)
        assert secure_sum(hists, dims=small_dims).cells == via_contrib.cells


class TestServerWork:
    def test_test_mode_identity_pipeline(self, small_dims, rng):
        data = random_dataset(rng, small_dims, 12)
        ones = ScaleMatrix.ones(small_dims.num_activities)
        clip = 6.0
        fleet = fleet_contributions(data, ones, clip, small_dims)
        report = server_work(fleet, ones, clip, 1.0, 0.0, 5, small_dims, test_mode=True)
        assert report.released.cells == report.raw_sum.cells  # bit-exact
        expected = reduce(
            lambda x, y: x.add(y),
            [clip_l1(user_histogram(recs, small_dims), clip) for _, recs in data.users],
            SparseHistogram.empty(small_dims))
        assert report.released.cells == expected.cells
        assert report.suppressed_cells == 0

    def test_descale_roundtrip(self, small_dims, rng):
        # contributions pre-scaled by 1/k, descaling by k restores the raw sums
        k = 4.0
        scales = ScaleMatrix(np.full((small_dims.num_activities, 3), k))
        data = random_dataset(rng, small_dims, 10)
        fleet = fleet_contributions(data, scales, math.inf, small_dims)
        report = server_work(fleet, scales, 1e9, 1.0, 0.0, 5, small_dims, test_mode=True)
        raw = reduce(lambda x, y: x.add(y),
                     [user_histogram(recs, small_dims) for _, recs in data.users],
                     SparseHistogram.empty(small_dims))
        assert report.released.allclose(raw, rel_tol=1e-12)

    def test_descaling_is_single_multiplication(self, small_dims, rng):
        data = random_dataset(rng, small_dims, 8)
        scales = ScaleMatrix(np.exp(rng.normal(0, 1, size=(small_dims.num_activities, 3))))
        fleet = fleet_contributions(data, scales, 5.0, small_dims)
        report = server_work(fleet, scales, 5.0, 2.0, 0.0, 17, small_dims)
        for cell, value in report.released.cells.items():
            assert value == report.noisy.get(cell) * scales.factor(cell[0], cell[1])

    def test_threshold_suppresses_small_cells(self, small_dims):
        ones = ScaleMatrix.ones(small_dims.num_activities)
        report = server_work([], ones, 10.0, 2.0, 3.0, 23, small_dims)
        threshold = 3.0 * (10.0 / 2.0)
        assert all(v >= threshold for v in report.released.cells.items() for v in [v[1]])
        assert report.suppressed_cells == small_dims.total_cells - len(report.released)

    def test_tau_zero_clamps_negatives_out(self, small_dims):
        ones = ScaleMatrix.ones(small_dims.num_activities)
        report = server_work([], ones, 10.0, 2.0, 0.0, 23, small_dims)
        assert all(v >= 0 for v in report.released.cells.values())
        assert any(v < 0 for v in report.noisy.cells.values())  # noisy keeps signs

    def test_suppression_monotone_in_tau(self, small_dims, rng):
        data = random_dataset(rng, small_dims, 10)
        ones = ScaleMatrix.ones(small_dims.num_activities)
        fleet = fleet_contributions(data, ones, 8.0, small_dims)
        kept_cells = None
        for tau in (0.0, 1.0, 2.0, 4.0):
            report = server_work(fleet, ones, 8.0, 2.0, tau, 99, small_dims)
            cells = set(report.released.cells)
            if kept_cells is not None:
                assert cells <= kept_cells  # raising tau never resurrects a cell
            kept_cells = cells

    def test_unbiased_before_threshold_and_clamp(self, small_dims, rng):
        data = random_dataset(rng, small_dims, 6, max_records=4)
        scales = ScaleMatrix(np.full((small_dims.num_activities, 3), 2.0))
        clip, epsilon = 5.0, 2.0
        fleet = fleet_contributions(data, scales, clip, small_dims)
        clipped_sum = secure_sum(fleet, dims=small_dims)
        n_seeds = 1500
        acc = np.zeros(small_dims.total_cells)
        for seed in range(n_seeds):
            report = server_work(fleet, scales, clip, epsilon, 0.0, seed, small_dims,
                                 keep_raw=False)
            acc += report.noisy.to_dense() * scales.per_cell(small_dims)
        mean = acc / n_seeds
        expected = clipped_sum.to_dense() * scales.per_cell(small_dims)
        # per-cell standard error of the mean of descaled Laplace noise
        se = math.sqrt(2.0) * (clip / epsilon) * 2.0 / math.sqrt(n_seeds)
        assert np.all(np.abs(mean - expected) <= 4.0 * se)

    def test_budget_abort(self, small_dims):
        ledger = PrivacyLedger(budget=0.5)
        ones = ScaleMatrix.ones(small_dims.num_activities)
        with pytest.raises(BudgetExceededError):
            server_work([], ones, 1.0, 1.0, 0.0, 1, small_dims, ledger=ledger)

    def test_deterministic(self, small_dims, rng):
        data = random_dataset(rng, small_dims, 5)
        ones = ScaleMatrix.ones(small_dims.num_activities)
        fleet = fleet_contributions(data, ones, 4.0, small_dims)
        a = server_work(fleet, ones, 4.0, 1.0, 2.0, 31, small_dims)
        b = server_work(fleet, ones, 4.0, 1.0, 2.0, 31, small_dims)
        assert a.released.cells == b.released.cells
        assert a.noisy.cells == b.noisy.cells

    def test_keep_raw_flag(self, small_dims):
        ones = ScaleMatrix.ones(small_dims.num_activities)
        report = server_work([], ones, 1.0, 1.0, 0.0, 1, small_dims, keep_raw=False)
        assert report.raw_sum is None

    def test_ledger_snapshot_isolated(self, small_dims):
        ones = ScaleMatrix.ones(small_dims.num_activities)
        report = server_work([], ones, 1.0, 1.0, 0.0, 1, small_dims)
        assert isinstance(report, AggregateReport)
        assert report.ledger_snapshot.total() == 1.0


def test_write_ledger(tmp_path):
    ledger = PrivacyLedger(budget=2.0)
    ledger.charge("noise", 2.0)
    path = tmp_path / "run.ledger"
    write_ledger(path, ledger)
    text = path.read_text()
    assert "noise,2.0" in text
    assert "total,2.0" in text
