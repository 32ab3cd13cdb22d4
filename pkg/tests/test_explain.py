"""Feature-mask explainer: loss landscape facts, penalty limits,
determinism, and the box-plot aggregation against a quantile oracle."""

import numpy as np
import pytest

from mesograph.errors import DataError, NumericalError
from mesograph.explain import (
    FeatureImportance,
    aggregate_importance,
    importance_report,
    learn_feature_mask,
    mask_fidelity_gap,
)
from mesograph.model import init_params

from test_model import random_graph


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(77)
    graph = random_graph(rng, n=14, d0=6)
    params = init_params(6, seed=5)
    return graph, params


class TestLearnFeatureMask:
    def test_identity_mask_has_zero_fidelity_loss(self, setup):
        graph, params = setup
        assert mask_fidelity_gap(graph, params, np.ones(6)) == 0.0

    def test_fidelity_no_worse_than_total_ablation(self, setup):
        graph, params = setup
        imp = learn_feature_mask(graph, params, seed=1)
        gap = mask_fidelity_gap(graph, params, imp.mask)
        zeros_gap = mask_fidelity_gap(graph, params, np.zeros(6))
        assert gap <= zeros_gap + 1e-9

    def test_pure_fidelity_objective_descends(self, setup):
        graph, params = setup
        one_step = learn_feature_mask(
            graph, params, lambda_size=0.0, lambda_ent=0.0, steps=1, seed=2
        )
        many_steps = learn_feature_mask(
            graph, params, lambda_size=0.0, lambda_ent=0.0, steps=200, seed=2
        )
        gap1 = mask_fidelity_gap(graph, params, one_step.mask)
        gap200 = mask_fidelity_gap(graph, params, many_steps.mask)
        assert gap200 <= gap1 + 1e-6

    def test_huge_size_penalty_collapses_mask(self, setup):
        graph, params = setup
        imp = learn_feature_mask(graph, params, lambda_size=1e6, seed=3)
        assert imp.mask.max() < 0.05

    def test_mask_strictly_inside_unit_interval(self, setup):
        graph, params = setup
        for lam in (0.0, 0.05, 10.0):
            imp = learn_feature_mask(graph, params, lambda_size=lam, seed=4)
            assert np.all(imp.mask > 0.0) and np.all(imp.mask < 1.0)

    def test_ranking_is_permutation_sorted_by_mask(self, setup):
        graph, params = setup
        imp = learn_feature_mask(graph, params, seed=5)
        assert sorted(imp.ranking.tolist()) == list(range(6))
        ordered = imp.mask[imp.ranking]
        assert np.all(np.diff(ordered) <= 0)

    def test_deterministic_per_seed(self, setup):
        graph, params = setup
        a = learn_feature_mask(graph, params, seed=6)
        b = learn_feature_mask(graph, params, seed=6)
        c = learn_feature_mask(graph, params, seed=7)
        assert np.array_equal(a.mask, b.mask)
        assert not np.array_equal(a.mask, c.mask)

    def test_non_finite_model_aborts_with_diagnostic(self, setup):
        graph, _ = setup
        broken = init_params(6, seed=5)
        broken.branch_s.W2[:] = np.nan
        with pytest.raises(NumericalError, match="diverged"):
            learn_feature_mask(graph, broken, seed=8)

    def test_bad_arguments(self, setup):
        graph, params = setup
        with pytest.raises(DataError):
            learn_feature_mask(graph, params, lambda_size=-1.0)
        with pytest.raises(DataError):
            learn_feature_mask(graph, params, steps=0)


def imp(bag_id, mask):
    mask = np.asarray(mask, dtype=float)
    return FeatureImportance(
        bag_id=bag_id, mask=mask, ranking=np.argsort(-mask, kind="stable")
    )


def quantile_oracle(values, q):
    """Linear interpolation on the sorted array, computed by hand."""
    xs = np.sort(np.asarray(values, dtype=float))
    pos = q / 100.0 * (xs.size - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return xs[lo] * (1 - frac) + xs[hi] * frac


class TestAggregateImportance:
    def test_single_bag_percentiles_collapse(self):
        summary = aggregate_importance(
            [imp("a", [0.9, 0.1, 0.5])], {"a": "E"}
        )
        stats = summary.groups["E"]
        for j, v in enumerate([0.9, 0.1, 0.5]):
            assert np.allclose(stats[j], [v, v, v, v, v])

    def test_identical_masks_zero_iqr(self):
        mask = [0.4, 0.8]
        summary = aggregate_importance(
            [imp("a", mask), imp("b", mask)], {"a": "S", "b": "S"}
        )
        stats = summary.groups["S"]
        for j in range(2):
            q25, q50, q75, lo, hi = stats[j]
            assert q25 == q50 == q75 == lo == hi == mask[j]

    def test_random_masks_match_quantile_oracle(self):
        rng = np.random.default_rng(91)
        masks = rng.random((9, 4))
        imps = [imp(f"b{i}", masks[i]) for i in range(9)]
        summary = aggregate_importance(
            imps, {f"b{i}": "E" for i in range(9)}
        )
        stats = summary.groups["E"]
        for j in range(4):
            col = masks[:, j]
            q25 = quantile_oracle(col, 25)
            q75 = quantile_oracle(col, 75)
            assert stats[j][0] == pytest.approx(q25, abs=1e-12)
            assert stats[j][1] == pytest.approx(quantile_oracle(col, 50), abs=1e-12)
            assert stats[j][2] == pytest.approx(q75, abs=1e-12)
            iqr = q75 - q25
            assert stats[j][3] == pytest.approx(
                max(col.min(), q25 - 1.5 * iqr), abs=1e-12
            )
            assert stats[j][4] == pytest.approx(
                min(col.max(), q75 + 1.5 * iqr), abs=1e-12
            )

    def test_groups_kept_separate(self):
        summary = aggregate_importance(
            [imp("a", [1.0, 0.0]), imp("b", [0.0, 1.0])],
            {"a": "E", "b": "S"},
        )
        assert summary.groups["E"][0][1] == 1.0
        assert summary.groups["S"][0][1] == 0.0

    def test_top10_by_overall_mean(self):
        masks = [[0.1, 0.9, 0.5, 0.3], [0.2, 0.8, 0.6, 0.3]]
        summary = aggregate_importance(
            [imp("a", masks[0]), imp("b", masks[1])],
            {"a": "E", "b": "S"},
        )
        # Means: 0.15, 0.85, 0.55, 0.30.
        assert summary.top10 == [1, 2, 3, 0]

    def test_top10_truncates_at_ten(self):
        rng = np.random.default_rng(92)
        summary = aggregate_importance(
            [imp("a", rng.random(16))], {"a": "E"}
        )
        assert len(summary.top10) == 10

    def test_missing_group_label_rejected(self):
        with pytest.raises(DataError, match="group"):
            aggregate_importance([imp("a", [0.5])], {})

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            aggregate_importance([], {})

    def test_report_structure(self):
        summary = aggregate_importance(
            [imp("a", [0.9, 0.1]), imp("b", [0.8, 0.2])],
            {"a": "E", "b": "S"},
        )
        text = importance_report(summary)
        lines = text.strip().split("\n")
        assert lines[0].startswith("group\tfeature")
        assert len(lines) == 1 + 2 * 2 + 1  # header, 2 groups x 2 features, top10
        assert lines[-1].startswith("top10\tf0")
