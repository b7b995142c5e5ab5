"""Selection, set algebra, agreement statistics, and the cosine baseline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnkit import (
    Dataset,
    ForgetSpec,
    InfluenceScores,
    ParameterError,
    agreement_matrix,
    class_distribution,
    cosine_filter,
    jaccard_similarity,
    make_selection,
    rank_ids,
    select_bottom,
    spearman_correlation,
)
from unlearnkit.ranking import reduce_sets


def _scores(mapping, method="hessian", mode="self"):
    return InfluenceScores(method, mode, {int(k): float(v) for k, v in mapping.items()})


class TestSelectBottom:
    def test_boundaries(self):
        s = _scores({1: 0.5, 2: 0.1, 3: 0.9})
        assert select_bottom(s, 0.0) == frozenset()
        assert select_bottom(s, 1.0) == {1, 2, 3}

    def test_floor_count(self):
        s = _scores({i: float(i) for i in range(5)})
        assert select_bottom(s, 0.5) == {0, 1}

    def test_self_mode_keeps_sign(self):
        """Self scores select raw-smallest, so a negative score goes first."""
        s = _scores({1: -3.0, 2: 0.1, 3: 5.0})
        assert rank_ids(s) == [1, 2, 3]

    def test_test_mode_ranks_by_magnitude(self):
        """Test-mode scores are signed; selection treats -3 as large."""
        s = _scores({1: -3.0, 2: 0.1, 3: 5.0}, mode="test")
        assert rank_ids(s) == [2, 1, 3]
        assert select_bottom(s, 0.34) == {2}

    def test_ties_break_by_id(self):
        s = _scores({9: 1.0, 2: 1.0, 5: 1.0})
        assert rank_ids(s) == [2, 5, 9]
        assert select_bottom(s, 0.67) == {2, 5}

    def test_x_out_of_range(self):
        s = _scores({1: 0.0})
        for bad in (-0.1, 1.1):
            with pytest.raises(ParameterError, match="x must be"):
                select_bottom(s, bad)

    def test_empty_scores_rejected(self):
        with pytest.raises(ParameterError, match="empty"):
            select_bottom(_scores({}), 0.5)

    @given(
        values=st.lists(st.floats(-100, 100), min_size=1, max_size=30),
        x_lo=st.floats(0, 1),
        x_hi=st.floats(0, 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_selections_nest(self, values, x_lo, x_hi):
        """A smaller x never selects something the larger x leaves out."""
        if x_lo > x_hi:
            x_lo, x_hi = x_hi, x_lo
        s = _scores(dict(enumerate(values)))
        assert select_bottom(s, x_lo) <= select_bottom(s, x_hi)

    def test_make_selection_provenance(self):
        s = _scores({1: 0.5, 2: 0.1}, method="less", mode="test")
        sel = make_selection(s, 0.5)
        assert sel.selected_ids == {2}
        assert (sel.method, sel.mode, sel.n_total, sel.x) == ("less", "test", 2, 0.5)


class TestReduceSets:
    def test_disjoint_removal_is_identity(self):
        spec = ForgetSpec(frozenset({1, 2}), frozenset({3, 4}))
        assert reduce_sets(spec, {99}) == (frozenset({1, 2}), frozenset({3, 4}))

    def test_example(self):
        spec = ForgetSpec(frozenset({1, 2, 3}), frozenset({4, 5}))
        s_hi, r_hi = reduce_sets(spec, {2, 4})
        assert s_hi == {1, 3}
        assert r_hi == {5}

    @given(st.data())
    @settings(max_examples=80, deadline=None)
    def test_partition_arithmetic(self, data):
        """S_HI and R_HI stay disjoint and only ever lose D_LI members."""
        universe = list(range(8))
        forget = data.draw(st.sets(st.sampled_from(universe), min_size=1))
        retain = frozenset(universe) - forget
        d_li = data.draw(st.sets(st.sampled_from(universe)))
        spec = ForgetSpec(frozenset(forget), frozenset(retain))
        s_hi, r_hi = reduce_sets(spec, d_li)
        assert s_hi == forget - d_li
        assert r_hi == retain - d_li
        assert not s_hi & r_hi
        assert s_hi | r_hi | (frozenset(d_li) & (forget | retain)) == forget | retain


class TestJaccard:
    def test_known_values(self):
        assert jaccard_similarity({1, 2}, {1, 2}) == 1.0
        assert jaccard_similarity({1, 2}, {3, 4}) == 0.0
        assert jaccard_similarity(set(), set()) == 1.0
        assert jaccard_similarity({1, 2, 3}, {2, 3, 4}) == 0.5

    @given(
        a=st.sets(st.integers(0, 20)),
        b=st.sets(st.integers(0, 20)),
    )
    @settings(max_examples=80, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        j = jaccard_similarity(a, b)
        assert j == jaccard_similarity(b, a)
        assert 0.0 <= j <= 1.0

    def test_random_subset_overlap_expectation(self):
        """Two independent m-subsets of [n] intersect in m^2/n points on
        average; the empirical mean over many draws must land within four
        standard errors."""
        n, m, trials = 400, 60, 300
        rng = np.random.default_rng(7)
        inter = np.array([
            len(
                frozenset(rng.choice(n, m, replace=False))
                & frozenset(rng.choice(n, m, replace=False))
            )
            for _ in range(trials)
        ])
        expected = m * m / n
        stderr = inter.std(ddof=1) / np.sqrt(trials)
        assert abs(inter.mean() - expected) <= 4 * stderr


class TestSpearman:
    def test_identical_and_reversed(self):
        a = {i: float(i) for i in range(10)}
        b = {i: float(-i) for i in range(10)}
        assert spearman_correlation(a, a) == 1.0
        np.testing.assert_allclose(spearman_correlation(a, b), -1.0, atol=1e-12)

    def test_matches_rank_pearson(self):
        """Spearman is the Pearson correlation of the rank vectors; recompute
        it that way from scratch."""
        rng = np.random.default_rng(17)
        keys = list(range(40))
        a = {k: float(v) for k, v in zip(keys, rng.standard_normal(40))}
        b = {k: float(v) for k, v in zip(keys, rng.standard_normal(40))}
        ra = np.argsort(np.argsort([a[k] for k in keys]))
        rb = np.argsort(np.argsort([b[k] for k in keys]))
        expected = np.corrcoef(ra, rb)[0, 1]
        np.testing.assert_allclose(spearman_correlation(a, b), expected, atol=1e-12)

    def test_coverage_mismatch(self):
        with pytest.raises(ParameterError, match="different ids"):
            spearman_correlation({1: 0.0, 2: 1.0}, {1: 0.0, 3: 1.0})

    def test_too_few_points(self):
        with pytest.raises(ParameterError, match="at least two"):
            spearman_correlation({1: 0.0}, {1: 5.0})


class TestClassDistribution:
    def _dataset(self):
        return Dataset(
            features=np.zeros((6, 2)),
            labels=np.array([0, 0, 0, 1, 1, 2]),
            ids=np.arange(6),
            n_classes=3,
        )

    def test_empty_selection(self):
        assert class_distribution([], self._dataset()) == {0: 0, 1: 0, 2: 0}

    def test_counts_and_total(self):
        hist = class_distribution([0, 1, 3, 5], self._dataset())
        assert hist == {0: 2, 1: 1, 2: 1}
        assert sum(hist.values()) == 4

    def test_skewed_selection_visible(self):
        """A selection drawn from one class shows up as pure in the
        histogram, which is exactly what the summary table is for."""
        hist = class_distribution([0, 1, 2], self._dataset())
        assert hist == {0: 3, 1: 0, 2: 0}

    def test_requires_class_count(self):
        ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), np.arange(2))
        ds = Dataset(ds.features, ds.labels, ds.ids, n_classes=None)
        # inference fills n_classes in; force the degenerate case directly
        object.__setattr__(ds, "n_classes", None)
        with pytest.raises(ParameterError, match="class count"):
            class_distribution([0], ds)


def _angle_dataset():
    """2-d points at known angles; cosines between them are exact by
    construction. Forget ids 0..2 at 0, 45, and 90 degrees; retain ids 3..5
    all at 0 degrees."""
    r2 = np.sqrt(0.5)
    feats = np.array([
        [1.0, 0.0],
        [r2, r2],
        [0.0, 1.0],
        [2.0, 0.0],
        [3.0, 0.0],
        [0.5, 0.0],
    ])
    ds = Dataset(feats, np.zeros(6, dtype=int), np.arange(6), n_classes=1)
    spec = ForgetSpec(frozenset({0, 1, 2}), frozenset({3, 4, 5}))
    return ds, spec


class TestCosineFilter:
    def test_duplicate_qualifies_at_one(self):
        """An exact duplicate of a retain point must pass the strictest
        threshold c = 1."""
        feats = np.array([[0.3, 0.4], [0.3, 0.4], [5.0, 0.0]])
        ds = Dataset(feats, np.zeros(3, dtype=int), np.arange(3), n_classes=1)
        spec = ForgetSpec(frozenset({0}), frozenset({1, 2}))
        chosen = cosine_filter(ds, spec, c=1.0, k=1, sample_n=1, seed=0)
        assert chosen == {0}

    def test_threshold_selects_known_angles(self):
        ds, spec = _angle_dataset()
        # c = 0.9 admits only the 0-degree forget point (three 0-degree
        # retain neighbors); c = 0.6 admits the 45-degree point as well
        strict = cosine_filter(ds, spec, c=0.9, k=3, sample_n=1, seed=1)
        assert strict == {0}
        loose = {
            i
            for s in range(25)
            for i in cosine_filter(ds, spec, c=0.6, k=3, sample_n=1, seed=s)
        }
        assert loose == {0, 1}

    def test_neighbor_count_requirement(self):
        ds, spec = _angle_dataset()
        with pytest.raises(ParameterError, match="only 0"):
            cosine_filter(ds, spec, c=0.9, k=4, sample_n=1, seed=0)

    def test_too_few_qualifiers_reports_count(self):
        ds, spec = _angle_dataset()
        with pytest.raises(ParameterError, match="only 2"):
            cosine_filter(ds, spec, c=0.6, k=1, sample_n=3, seed=0)

    def test_sampling_is_seeded(self):
        ds, spec = _angle_dataset()
        a = cosine_filter(ds, spec, c=0.0, k=1, sample_n=2, seed=5)
        b = cosine_filter(ds, spec, c=0.0, k=1, sample_n=2, seed=5)
        assert a == b

    def test_zero_norm_rows_excluded(self):
        feats = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        ds = Dataset(feats, np.zeros(4, dtype=int), np.arange(4), n_classes=1)
        spec = ForgetSpec(frozenset({0, 1}), frozenset({2, 3}))
        with pytest.warns(UserWarning, match="zero-norm"):
            chosen = cosine_filter(ds, spec, c=0.9, k=1, sample_n=1, seed=0)
        assert chosen == {0}

    def test_feature_override_shape_checked(self):
        ds, spec = _angle_dataset()
        with pytest.raises(ParameterError, match="rows"):
            cosine_filter(ds, spec, c=0.5, k=1, sample_n=1, seed=0,
                          features=np.ones((2, 2)))

    def test_parameter_validation(self):
        ds, spec = _angle_dataset()
        with pytest.raises(ParameterError, match="threshold"):
            cosine_filter(ds, spec, c=1.5, k=1, sample_n=1, seed=0)
        with pytest.raises(ParameterError, match="k >= 1"):
            cosine_filter(ds, spec, c=0.5, k=0, sample_n=1, seed=0)


class TestAgreementMatrix:
    def test_diagonal_is_perfect(self):
        rng = np.random.default_rng(3)
        named = {
            "hessian": _scores(dict(enumerate(rng.standard_normal(20)))),
            "less": _scores(dict(enumerate(rng.standard_normal(20))), method="less"),
        }
        entries = agreement_matrix(named, x=0.25)
        assert len(entries) == 4
        diag = [e for e in entries if e.label_a == e.label_b]
        assert all(e.jaccard == 1.0 and e.spearman == 1.0 for e in diag)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        named = {
            "a": _scores(dict(enumerate(rng.standard_normal(15)))),
            "b": _scores(dict(enumerate(rng.standard_normal(15))), method="less"),
        }
        entries = {(e.label_a, e.label_b): e for e in agreement_matrix(named, x=0.4)}
        ab, ba = entries[("a", "b")], entries[("b", "a")]
        assert ab.jaccard == ba.jaccard
        assert ab.spearman == ba.spearman

    def test_empty_rejected(self):
        with pytest.raises(ParameterError, match="at least one"):
            agreement_matrix({}, x=0.5)
