"""Metric oracles, classifier behavior, and protocol hygiene."""

import numpy as np
import pytest

from rectiflow import evalharness as ev
from rectiflow.errors import ContractError, DataError, UndefinedMetricError
from rectiflow.flowmodel import VelocityFieldNet
from rectiflow.lesiondata import DatasetConfig, build_dataset
from rectiflow.rng import Rng
from rectiflow.trainer import Checkpoint


def brute_force_auc(scores, labels):
    """Independent oracle: count ordered positive-negative pairs directly."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# accuracy


def test_accuracy_trivial_cases():
    assert ev.accuracy([1.0, 1.0, -1.0], [1, 1, 0]) == 1.0
    assert ev.accuracy([-1.0, -1.0, 1.0], [1, 1, 0]) == 0.0
    assert ev.accuracy([1.0, 1.0, 1.0, -1.0], [1, 1, 0, 0]) == 0.75


def test_accuracy_threshold_matches_confusion_matrix():
    rng = Rng(3)
    scores = rng.normals(40)
    labels = (rng.uniforms(40) < 0.5).astype(int)
    pred = (scores > 0).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    assert ev.accuracy(scores, labels) == (tp + tn) / 40


def test_accuracy_rejects_mismatched_lengths():
    with pytest.raises(ContractError):
        ev.accuracy([1.0], [1, 0])


# ---------------------------------------------------------------------------
# roc auc


def test_roc_auc_perfect_inverted_constant():
    assert ev.roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert ev.roc_auc([0.9, 0.8, 0.3, 0.2], [0, 0, 1, 1]) == 0.0
    assert ev.roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_roc_auc_pairwise_hand_case():
    # pairs ordered correctly: (0.9 vs 0.6), (0.9 vs 0.2), (0.4 vs 0.2) = 3 of 4
    assert ev.roc_auc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75


def test_roc_auc_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        ev.roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_brute_force_with_ties():
    rng = Rng(123)
    for trial in range(100):
        n = 2 + rng.below(48)
        # coarse grid of score values forces plenty of ties
        scores = np.round(rng.uniforms(n) * 8) / 8.0
        labels = (rng.uniforms(n) < 0.5).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert ev.roc_auc(scores, labels) == pytest.approx(
            brute_force_auc(scores, labels), abs=1e-12)


def test_roc_auc_invariant_under_monotone_transforms():
    rng = Rng(9)
    scores = rng.normals(30)
    labels = (rng.uniforms(30) < 0.5).astype(int)
    labels[0], labels[1] = 0, 1
    base = ev.roc_auc(scores, labels)
    assert ev.roc_auc(3.0 * scores + 5.0, labels) == pytest.approx(base, abs=1e-12)
    assert ev.roc_auc(scores ** 3, labels) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------------------
# roc curve


def test_roc_curve_perfect_passes_through_corner():
    points = ev.roc_curve([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0])
    assert (0.0, 1.0) in points
    assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)


def test_roc_curve_constant_scores_is_diagonal():
    points = ev.roc_curve([0.5] * 6, [1, 0, 1, 0, 1, 0])
    assert points == [(0.0, 0.0), (1.0, 1.0)]
    assert ev.trapezoid_area(points) == 0.5


def test_roc_curve_monotone():
    rng = Rng(5)
    scores = np.round(rng.uniforms(25) * 4) / 4.0
    labels = (rng.uniforms(25) < 0.5).astype(int)
    labels[0], labels[1] = 0, 1
    points = ev.roc_curve(scores, labels)
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        assert x1 >= x0 and y1 >= y0


def test_roc_curve_area_equals_rank_statistic():
    rng = Rng(31)
    for trial in range(100):
        n = 2 + rng.below(48)
        scores = np.round(rng.uniforms(n) * 6) / 6.0
        labels = (rng.uniforms(n) < 0.5).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        area = ev.trapezoid_area(ev.roc_curve(scores, labels))
        assert abs(area - ev.roc_auc(scores, labels)) < 1e-10


# ---------------------------------------------------------------------------
# classifier


def separable_set(n=40, d=4, seed=1):
    rng = Rng(seed)
    x = rng.normals(n * d).reshape(n, d)
    y = (x[:, 0] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 2.0, -2.0)  # wide margin
    return ev.LabeledSet(x, y, [f"r{i}" for i in range(n)])


def test_classifier_fits_separable_data():
    train = separable_set()
    model = ev.train_classifier(train, ev.ClassifierConfig(seed=1))
    acc, auc = ev.evaluate(model, train)
    assert acc == 1.0
    assert auc == 1.0


def test_classifier_deterministic():
    train = separable_set(seed=7)
    m1 = ev.train_classifier(train, ev.ClassifierConfig(seed=3))
    m2 = ev.train_classifier(train, ev.ClassifierConfig(seed=3))
    assert np.array_equal(m1.w.data, m2.w.data)
    assert np.array_equal(m1.b.data, m2.b.data)


def test_classifier_rejects_single_class():
    x = Rng(1).normals(20).reshape(10, 2)
    with pytest.raises(DataError):
        ev.train_classifier(ev.LabeledSet(x, np.ones(10, dtype=int),
                                          [f"r{i}" for i in range(10)]),
                            ev.ClassifierConfig())


def test_permuted_labels_give_chance_accuracy():
    # train on shuffled labels, evaluate on the true ones: chance band
    rng = Rng(77)
    n, d = 120, 6
    x = rng.normals(n * d).reshape(n, d)
    y = (x[:, 0] > 0).astype(int)
    accs = []
    for seed in range(1, 6):
        perm = Rng(seed).permutation(n)
        train = ev.LabeledSet(x[: n // 2], y[perm][: n // 2],
                              [f"a{i}" for i in range(n // 2)])
        test = ev.LabeledSet(x[n // 2 :], y[n // 2 :], [f"b{i}" for i in range(n // 2)])
        model = ev.train_classifier(train, ev.ClassifierConfig(seed=seed, epochs=10))
        accs.append(ev.evaluate(model, test)[0])
    assert 0.4 <= float(np.mean(accs)) <= 0.6


# ---------------------------------------------------------------------------
# protocol pieces


def test_assert_no_leakage():
    ev.assert_no_leakage(["a", "b"], ["c"])
    with pytest.raises(DataError):
        ev.assert_no_leakage(["a", "b"], ["b"])


def test_ratio_spec_arithmetic():
    spec = ev.RatioSpec(real_count=250, x=0.75)
    assert spec.synthetic_per_class() == 187  # floor(250 * 0.75)
    assert spec.real_per_class() == 250
    assert spec.tag() == "1:0.75"
    pure = ev.RatioSpec(real_count=250, pure_synthetic=True)
    assert pure.synthetic_per_class() == 250
    assert pure.real_per_class() == 0
    assert pure.tag() == "0:1"


def test_ratio_x_one_matches_real_count():
    spec = ev.RatioSpec(real_count=500, x=1.0)
    assert spec.synthetic_per_class() == 500


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    manifest = build_dataset(
        DatasetConfig(n_per_class=25, resolutions=(16,), test_fraction=0.2, seed=4),
        out / "d")
    net = VelocityFieldNet.create(16, Rng(2), hidden=8)
    ckpt = Checkpoint.from_net(net, {"seed": 2})
    return manifest, ckpt


def quick_harness(**kw):
    base = dict(
        seeds=(1, 2), gen_seed=50,
        classifier=ev.ClassifierConfig(epochs=4),
        scenario_i_syn_per_class=10, scenario_ii_real_per_class=10,
        scenario_ii_syn_per_class=10,
        real_counts=(10,), x_values=(0.0, 1.0),
    )
    base.update(kw)
    return ev.HarnessConfig(**base)


def test_run_scenarios_shapes(tiny_world):
    manifest, ckpt = tiny_world
    rep_i, rep_ii = ev.run_scenarios(manifest, ckpt, quick_harness())
    assert rep_i.scenario == "i" and rep_ii.scenario == "ii"
    assert len(rep_i.accuracies) == 2
    # both scenarios share the identical held-out test split
    assert rep_i.test_fingerprint == rep_ii.test_fingerprint
    # synthetic-only never uses real ids
    assert all(fp for fp in rep_i.train_fingerprints)


def test_run_scenarios_insufficient_real_data(tiny_world):
    manifest, ckpt = tiny_world
    with pytest.raises(DataError) as exc:
        ev.run_scenarios(manifest, ckpt, quick_harness(scenario_ii_real_per_class=1000))
    assert "insufficient real data" in str(exc.value)


def test_run_ratio_sweep_rows_and_baseline(tiny_world):
    manifest, ckpt = tiny_world
    cfg = quick_harness()
    reports = ev.run_ratio_sweep(manifest, ckpt, cfg)
    # |real_counts| x |x_values| + pure-synthetic rows
    assert len(reports) == 1 * 2 + 1
    tags = [r.scenario for r in reports]
    assert tags == ["1:0", "1:1", "0:1"]
    for r in reports:
        assert len(r.accuracies) == len(cfg.seeds)
    # x = 0 rows are real-only baselines: same fingerprints as no synthetic
    assert reports[0].ratio.synthetic_per_class() == 0


def test_sweep_determinism(tiny_world):
    manifest, ckpt = tiny_world
    cfg = quick_harness(seeds=(3,))
    a = ev.run_ratio_sweep(manifest, ckpt, cfg)
    b = ev.run_ratio_sweep(manifest, ckpt, cfg)
    assert [r.accuracies for r in a] == [r.accuracies for r in b]
    assert [r.train_fingerprints for r in a] == [r.train_fingerprints for r in b]


def test_write_reports(tiny_world, tmp_path):
    manifest, ckpt = tiny_world
    reports = ev.run_ratio_sweep(manifest, ckpt, quick_harness(seeds=(1,)),
                                 roc_sink=ev.make_roc_sink(tmp_path))
    paths = ev.write_reports(reports, tmp_path, "sweep")
    csv_lines = paths["csv"].read_text().splitlines()
    assert csv_lines[0] == f"# {ev.SCALE_NOTE}"
    assert csv_lines[1] == "scenario,real_count,x,seed,accuracy,auc"
    assert len(csv_lines) == 2 + len(reports) * 1
    assert ev.SCALE_NOTE in paths["table"].read_text()
    import json
    blob = json.loads(paths["json"].read_text())
    assert blob["scale_note"] == ev.SCALE_NOTE
    assert len(blob["reports"]) == len(reports)
    roc_files = list((tmp_path / "roc").glob("*.csv"))
    assert len(roc_files) == len(reports)
    first = roc_files[0].read_text().splitlines()
    assert first[0] == "fpr,tpr"


def test_synthetic_pool_deterministic(tiny_world):
    _, ckpt = tiny_world
    a = ev.synthetic_pool(ckpt, 3, gen_seed=11)
    b = ev.synthetic_pool(ckpt, 3, gen_seed=11)
    for label in ("benign", "malignant"):
        assert np.array_equal(a[label].x, b[label].x)
        assert a[label].ids == b[label].ids
