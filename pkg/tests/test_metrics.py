import numpy as np
import pytest

from segmilcbm import metrics
from segmilcbm.bagio import Bag, Instance
from segmilcbm.errors import ProtocolError, SchemaError
from segmilcbm.milmodel import ModelParams


def passthrough_model():
    """Logits equal the mean instance embedding: D=C=K=2, so a one-hot
    embedding forces the prediction and accuracies are controllable."""
    return ModelParams(
        w_c=np.eye(2),
        att_hidden=None,
        att_score=None,
        w_cls=np.eye(2),
        b_cls=np.zeros(2),
        attention="uniform",
        aggregate_normalized=False,
    )


def rigged_bag(label, predicted, group_id=None, image_id="b"):
    emb = np.zeros(2)
    emb[predicted] = 1.0
    inst = Instance(embedding=emb, clip_scores=np.array([0.5, 0.5]))
    return Bag(image_id=image_id, label=label, instances=[inst], group_id=group_id)


def rigged_cell(n, n_correct, group_id=None):
    bags = []
    for i in range(n):
        label = i % 2
        predicted = label if i < n_correct else 1 - label
        bags.append(rigged_bag(label, predicted, group_id=group_id, image_id=f"c{i}"))
    return bags


# ------------------------------------------------------------- evaluate

def test_evaluate_hand_counted_fixture():
    bags = [rigged_bag(0, 0, group_id=0, image_id=f"g0-{i}") for i in range(9)]
    bags += [rigged_bag(0, 1, group_id=0, image_id="g0-wrong")]
    bags += [rigged_bag(1, 1, group_id=1, image_id=f"g1-{i}") for i in range(3)]
    bags += [rigged_bag(1, 0, group_id=1, image_id=f"g1-w{i}") for i in range(2)]
    report = metrics.evaluate(passthrough_model(), bags)
    assert report.per_group_acc == {0: pytest.approx(0.9), 1: pytest.approx(0.6)}
    assert report.worst_group_acc == pytest.approx(0.6)
    assert report.avg_acc == pytest.approx(12 / 15)
    assert report.n_per_group == {0: 10, 1: 5}


def test_evaluate_single_group_worst_equals_avg():
    bags = rigged_cell(8, 5, group_id=2)
    report = metrics.evaluate(passthrough_model(), bags)
    assert report.worst_group_acc == report.avg_acc == pytest.approx(5 / 8)


def test_evaluate_all_correct():
    bags = rigged_cell(6, 6, group_id=0)
    report = metrics.evaluate(passthrough_model(), bags)
    assert report.avg_acc == 1.0
    assert report.worst_group_acc == 1.0
    assert all(v == 1.0 for v in report.per_group_acc.values())


def test_evaluate_without_groups_has_no_worst():
    report = metrics.evaluate(passthrough_model(), rigged_cell(6, 3))
    assert report.worst_group_acc is None
    assert report.per_group_acc == {}


def test_evaluate_mixed_group_coverage_is_schema_error():
    bags = [rigged_bag(0, 0, group_id=1), rigged_bag(0, 0, group_id=None)]
    with pytest.raises(SchemaError, match="mixed group coverage"):
        metrics.evaluate(passthrough_model(), bags)


def test_evaluate_argmax_tie_breaks_to_lowest_class():
    inst = Instance(embedding=np.zeros(2), clip_scores=np.array([0.5, 0.5]))
    bags = [Bag(image_id="tie", label=0, instances=[inst])]
    report = metrics.evaluate(passthrough_model(), bags)
    assert report.avg_acc == 1.0  # tie predicted as class 0


def test_evaluate_invariant_to_bag_and_instance_order():
    rng = np.random.default_rng(0)
    bags = []
    for i in range(12):
        embs = rng.normal(size=(3, 2))
        insts = [Instance(embedding=e, clip_scores=np.array([0.5, 0.5])) for e in embs]
        bags.append(Bag(image_id=f"r{i}", label=int(rng.integers(0, 2)), instances=insts, group_id=i % 2))
    base = metrics.evaluate(passthrough_model(), bags)
    perm = list(rng.permutation(len(bags)))
    shuffled_bags = [
        Bag(
            image_id=bags[i].image_id,
            label=bags[i].label,
            instances=list(reversed(bags[i].instances)),
            group_id=bags[i].group_id,
        )
        for i in perm
    ]
    other = metrics.evaluate(passthrough_model(), shuffled_bags)
    assert other.avg_acc == base.avg_acc
    assert other.per_group_acc == base.per_group_acc
    assert other.worst_group_acc == base.worst_group_acc


def test_worst_never_exceeds_avg_on_random_predictions():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 3, size=n)
        predictions = rng.integers(0, 3, size=n)
        groups = rng.integers(0, 4, size=n)
        report = metrics.report_from_predictions(labels, predictions, groups)
        assert report.worst_group_acc <= report.avg_acc + 1e-12


def test_workers_do_not_change_results():
    rng = np.random.default_rng(5)
    bags = []
    for i in range(20):
        embs = rng.normal(size=(2, 2))
        insts = [Instance(embedding=e, clip_scores=np.array([0.5, 0.5])) for e in embs]
        bags.append(Bag(image_id=f"w{i}", label=i % 2, instances=insts))
    r1 = metrics.evaluate(passthrough_model(), bags, workers=1)
    r4 = metrics.evaluate(passthrough_model(), bags, workers=4)
    assert r1.avg_acc == r4.avg_acc
    assert r1.n_correct == r4.n_correct


# -------------------------------------------------------- corruption_eval

def suite_from_accuracies(acc_by_kind_severity, n=10):
    return {
        kind: {
            severity: rigged_cell(n, int(round(acc * n)))
            for severity, acc in by_severity.items()
        }
        for kind, by_severity in acc_by_kind_severity.items()
    }


def test_corruption_all_perfect_gives_zero_ce():
    suite = suite_from_accuracies({"gauss_noise": {s: 1.0 for s in range(1, 6)}})
    report = metrics.corruption_eval(passthrough_model(), rigged_cell(10, 10), suite)
    assert report.ce_per_corruption == {"gauss_noise": 0.0}
    assert report.overall_ce == 0.0
    assert report.clean_acc == 1.0


def test_corruption_ce_is_mean_error_over_severities():
    accs = {1: 0.9, 2: 0.8, 3: 0.7, 4: 0.6, 5: 0.5}
    suite = suite_from_accuracies({"shot_noise": accs})
    report = metrics.corruption_eval(passthrough_model(), rigged_cell(10, 10), suite)
    assert report.ce_per_corruption["shot_noise"] == pytest.approx(0.3)
    for severity, acc in accs.items():
        assert report.cell_acc[("shot_noise", severity)] == pytest.approx(acc)


def test_corruption_missing_severity_is_protocol_error():
    suite = suite_from_accuracies({"fog": {s: 1.0 for s in (1, 2, 3, 4)}})
    with pytest.raises(ProtocolError, match=r"missing severities \[5\]"):
        metrics.corruption_eval(passthrough_model(), rigged_cell(4, 4), suite)


def test_corruption_fifteen_kind_suite_layout():
    kinds = [
        "gauss_noise", "shot_noise", "impulse_noise", "defocus_blur", "glass_blur",
        "motion_blur", "zoom_blur", "snow", "frost", "fog", "brightness",
        "contrast", "elastic_transf", "pixelate", "jpeg_comp",
    ]
    suite = suite_from_accuracies({k: {s: 0.8 for s in range(1, 6)} for k in kinds})
    report = metrics.corruption_eval(passthrough_model(), rigged_cell(10, 10), suite)
    assert len(report.ce_per_corruption) == 15
    assert set(report.ce_per_corruption) == set(kinds)
    assert report.overall_ce == pytest.approx(0.2)
    assert len(report.cell_acc) == 75


def test_corruption_ce_monotone_under_degradation():
    base = {1: 0.9, 2: 0.9, 3: 0.8, 4: 0.7, 5: 0.6}
    degraded = dict(base)
    degraded[3] = 0.5
    r_base = metrics.corruption_eval(
        passthrough_model(), rigged_cell(10, 10), suite_from_accuracies({"fog": base})
    )
    r_degraded = metrics.corruption_eval(
        passthrough_model(), rigged_cell(10, 10), suite_from_accuracies({"fog": degraded})
    )
    assert r_degraded.ce_per_corruption["fog"] >= r_base.ce_per_corruption["fog"]


def test_corruption_baseline_normalized_ratio_behind_flag():
    suite = suite_from_accuracies({"fog": {s: 0.8 for s in range(1, 6)}})
    report = metrics.corruption_eval(
        passthrough_model(), rigged_cell(10, 10), suite, baseline_ce={"fog": 0.4}
    )
    assert report.mce_ratio == {"fog": pytest.approx(0.5)}
    plain = metrics.corruption_eval(passthrough_model(), rigged_cell(10, 10), suite)
    assert plain.mce_ratio is None


# ---------------------------------------------------------- seed_aggregate

def report_with(avg, worst=None, groups=None):
    return metrics.EvalReport(
        avg_acc=avg,
        worst_group_acc=worst,
        per_group_acc=groups or {},
    )


def test_aggregate_constant_runs():
    stats = metrics.seed_aggregate([report_with(0.8)] * 3)
    assert stats["avg_acc"].mean == pytest.approx(0.8)
    assert stats["avg_acc"].std == pytest.approx(0.0)


def test_aggregate_two_runs_closed_form():
    stats = metrics.seed_aggregate([report_with(0.7), report_with(0.9)])
    assert stats["avg_acc"].mean == pytest.approx(0.8, abs=1e-12)
    assert stats["avg_acc"].std == pytest.approx(np.sqrt(0.02), abs=1e-12)


def test_aggregate_ci_hand_computed():
    stats = metrics.seed_aggregate([report_with(v) for v in (0.7, 0.8, 0.9)])
    assert stats["avg_acc"].std == pytest.approx(0.1, abs=1e-12)
    assert stats["avg_acc"].ci95 == pytest.approx(1.96 * 0.1 / np.sqrt(3), abs=1e-12)


def test_aggregate_single_run_flags_missing_std():
    stats = metrics.seed_aggregate([report_with(0.5)])
    assert stats["avg_acc"].mean == 0.5
    assert stats["avg_acc"].std is None
    assert stats["avg_acc"].ci95 is None


def test_aggregate_includes_worst_and_groups_when_present():
    runs = [
        report_with(0.8, worst=0.6, groups={0: 0.9, 1: 0.6}),
        report_with(0.9, worst=0.7, groups={0: 0.95, 1: 0.7}),
    ]
    stats = metrics.seed_aggregate(runs)
    assert stats["worst_group_acc"].mean == pytest.approx(0.65)
    assert stats["group_1_acc"].mean == pytest.approx(0.65)


def test_aggregate_zero_runs_rejected():
    with pytest.raises(SchemaError):
        metrics.seed_aggregate([])
