import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionpool.errors import LabelError, ValidationError
from fusionpool.evaluation import ConfusionMatrix, confusion, evaluate, f1_score, metrics
from fusionpool.heads import HeadConfig, TrainedHead, train
from fusionpool.fusion_pool import FeaturePool, FeatureRecord, LabelSpace

from conftest import clustered_pool
from paper_tables import BINARY_ROWS, MISPRINTED, MISPRINT_COMPUTED_F1, row_tolerance


class TestConfusion:
    def test_hand_enumerated(self):
        cm = confusion([0, 0, 1, 1], [0, 1, 1, 1], 2)
        assert cm.counts.tolist() == [[1, 1], [0, 2]]

    def test_perfect_predictions_are_diagonal(self, rng):
        labels = rng.integers(0, 3, size=40)
        cm = confusion(labels, labels, 3)
        assert np.array_equal(cm.counts, np.diag(np.bincount(labels, minlength=3)))

    def test_empty_lists(self):
        cm = confusion([], [], 2)
        assert cm.counts.tolist() == [[0, 0], [0, 0]]

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            confusion([0, 1], [0], 2)

    def test_out_of_range_label(self):
        with pytest.raises(ValidationError):
            confusion([0, 2], [0, 1], 2)

    def test_row_and_column_sums(self, rng):
        true = rng.integers(0, 4, size=100)
        pred = rng.integers(0, 4, size=100)
        cm = confusion(true, pred, 4)
        assert np.array_equal(cm.counts.sum(axis=1), np.bincount(true, minlength=4))
        assert np.array_equal(cm.counts.sum(axis=0), np.bincount(pred, minlength=4))
        assert cm.total == 100


class TestMetricsBinary:
    def test_paper_table_value(self):
        # precision 90.14, recall 74.56 -> F1 81.61 as published.
        assert f1_score(90.14, 74.56) == pytest.approx(81.61, abs=0.01)

    def test_hand_counts(self):
        # TP=3, FP=1, FN=2, TN=4 with positive class 1.
        cm = ConfusionMatrix(counts=np.array([[4, 1], [2, 3]]))
        report = metrics(cm, positive_class=1)
        assert report.precision == pytest.approx(75.0)
        assert report.recall == pytest.approx(60.0)
        assert report.f1 == pytest.approx(66.67, abs=0.01)
        assert report.accuracy == pytest.approx(70.0)

    def test_perfect_predictions(self):
        cm = ConfusionMatrix(counts=np.array([[5, 0], [0, 5]]))
        report = metrics(cm, positive_class=1)
        assert (report.accuracy, report.recall, report.precision, report.f1) == \
               (100.0, 100.0, 100.0, 100.0)

    def test_zero_denominator_flagged_not_nan(self):
        # Nothing predicted positive: precision undefined -> 0 with a flag.
        cm = ConfusionMatrix(counts=np.array([[4, 0], [2, 0]]))
        report = metrics(cm, positive_class=1, class_names=["normal", "anomaly"])
        assert report.precision == 0.0
        assert report.f1 == 0.0
        assert any(flag.startswith("precision/") for flag in report.undefined)

    def test_binary_mode_requires_two_classes(self):
        cm = ConfusionMatrix(counts=np.eye(3, dtype=int) * 2)
        with pytest.raises(ValidationError, match="binary"):
            metrics(cm, positive_class=0)

    def test_empty_matrix_rejected(self):
        cm = ConfusionMatrix(counts=np.zeros((2, 2), dtype=int))
        with pytest.raises(ValidationError):
            metrics(cm, positive_class=1)

    def test_harmonic_identity_on_published_rows(self):
        for table, model, recall, precision, printed, decimals in BINARY_ROWS:
            computed = f1_score(precision, recall)
            if (table, model) in MISPRINTED:
                assert computed == pytest.approx(MISPRINT_COMPUTED_F1, abs=5e-5)
            else:
                assert computed == pytest.approx(printed, abs=row_tolerance(decimals)), \
                    f"table {table} {model}"


class TestMetricsMacro:
    def test_macro_is_mean_of_per_class(self, rng):
        true = rng.integers(0, 3, size=60)
        pred = rng.integers(0, 3, size=60)
        cm = confusion(true, pred, 3)
        report = metrics(cm)
        assert report.averaging == "macro"
        assert report.recall == pytest.approx(np.mean([m.recall for m in report.per_class]))
        assert report.precision == pytest.approx(np.mean([m.precision for m in report.per_class]))
        assert report.f1 == pytest.approx(np.mean([m.f1 for m in report.per_class]))

    def test_accuracy_is_trace_over_total(self, rng):
        true = rng.integers(0, 3, size=50)
        pred = rng.integers(0, 3, size=50)
        cm = confusion(true, pred, 3)
        assert metrics(cm).accuracy == pytest.approx(
            100.0 * np.trace(cm.counts) / cm.total)

    def test_macro_matches_independent_implementation(self, rng):
        # Oracle: a second, loop-based implementation of the four formulas.
        true = rng.integers(0, 3, size=90)
        pred = np.where(rng.uniform(size=90) < 0.7, true, rng.integers(0, 3, size=90))
        cm = confusion(true, pred, 3)
        report = metrics(cm)

        recalls, precisions, f1s = [], [], []
        for c in range(3):
            tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
            fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
            fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
            rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
            prec = 100.0 * tp / (tp + fp) if tp + fp else 0.0
            recalls.append(rec)
            precisions.append(prec)
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        assert report.recall == pytest.approx(np.mean(recalls), abs=1e-9)
        assert report.precision == pytest.approx(np.mean(precisions), abs=1e-9)
        assert report.f1 == pytest.approx(np.mean(f1s), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60),
           st.randoms())
    def test_permutation_invariance(self, pairs, rand):
        true = [t for t, _ in pairs]
        pred = [p for _, p in pairs]
        base = metrics(confusion(true, pred, 3))
        shuffled = list(pairs)
        rand.shuffle(shuffled)
        permuted = metrics(confusion([t for t, _ in shuffled], [p for _, p in shuffled], 3))
        assert base.accuracy == permuted.accuracy
        assert base.recall == permuted.recall
        assert base.precision == permuted.precision
        assert base.f1 == permuted.f1

    def test_values_in_percentage_range(self, rng):
        true = rng.integers(0, 3, size=30)
        pred = rng.integers(0, 3, size=30)
        report = metrics(confusion(true, pred, 3))
        for value in (report.accuracy, report.recall, report.precision, report.f1):
            assert 0.0 <= value <= 100.0


class TestEvaluate:
    def test_knn_k1_memorization_scores_100(self, rng):
        pool = clustered_pool(rng, ["normal", "violence"], 10, 4, separation=1.0)
        head = train(pool, HeadConfig(kind="knn", k=1))
        report, cm = evaluate(head, pool)
        assert report.accuracy == 100.0
        assert np.trace(cm.counts) == len(pool)

    def test_majority_head_on_balanced_pool_scores_50(self, rng):
        pool = clustered_pool(rng, ["a", "b"], 20, 3)
        head = TrainedHead(
            kind="softmax", class_count=2, class_names=["a", "b"],
            mean=np.zeros(3), std=np.ones(3),
            params={"w": np.zeros((2, 3)), "b": np.array([1.0, 0.0])},
        )
        report, _ = evaluate(head, pool)
        assert report.accuracy == pytest.approx(50.0)

    def test_label_space_mismatch(self, rng):
        pool = clustered_pool(rng, ["a", "b"], 5, 3)
        test_pool = clustered_pool(rng, ["a", "zzz"], 5, 3, start_id=500)
        head = train(pool, HeadConfig(kind="knn"))
        with pytest.raises(LabelError, match="zzz"):
            evaluate(head, test_pool)

    def test_dim_mismatch(self, rng):
        pool = clustered_pool(rng, ["a", "b"], 5, 3)
        other = clustered_pool(rng, ["a", "b"], 5, 4, start_id=500)
        head = train(pool, HeadConfig(kind="knn"))
        with pytest.raises(ValidationError, match="D="):
            evaluate(head, other)

    def test_test_pool_class_indices_remapped_by_name(self, rng):
        # Same class names registered in the opposite order must still score.
        train_pool = clustered_pool(rng, ["normal", "violence"], 10, 4, separation=8.0)
        head = train(train_pool, HeadConfig(kind="knn", k=1))

        space = LabelSpace()
        space.register_task(7, ["violence", "normal"])
        flipped = FeaturePool(
            schema=list(train_pool.schema), label_space=space,
            records=[
                FeatureRecord(sample_id=10_000 + i, task_id=7,
                              global_class=1 - rec.global_class, features=rec.features)
                for i, rec in enumerate(train_pool.records)
            ],
            tasks={7: "flipped"},
        )
        report, _ = evaluate(head, flipped)
        assert report.accuracy == 100.0

    def test_csv_and_text_output(self, rng):
        pool = clustered_pool(rng, ["a", "b", "c"], 5, 4, separation=8.0)
        head = train(pool, HeadConfig(kind="knn", k=1))
        report, cm = evaluate(head, pool)
        csv_text = report.to_csv()
        assert csv_text.startswith("metric,scope,value")
        assert "accuracy,overall,100.000000" in csv_text
        assert len(cm.to_csv().strip().splitlines()) == 3
        assert "accuracy:  100.00" in report.to_text()
