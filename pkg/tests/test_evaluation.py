import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepmaps import evaluation as ev, gbdt
from deepmaps.core import ConfigurationError, InputError, LabelSet

from oracles import smape_direct
from test_featurize import small_context


def label_set(n, w=5, h=4, fixed_every=3, seed=0):
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    return LabelSet(x=idx % w, y=(idx // w) % h, t=idx // (w * h), pm25=rng.uniform(5, 80, n),
                    is_fixed=(idx % fixed_every == 0))


def test_metrics_example():
    m = ev.compute_metrics([12.0, 16.0], [10.0, 20.0])
    assert m.rmse == pytest.approx(np.sqrt(10.0), rel=1e-12)
    assert m.smape == pytest.approx(100.0 * (2 / 11 + 4 / 18) / 2, rel=1e-12)
    assert m.smape == pytest.approx(20.2020202020, rel=1e-9)
    assert m.r_squared == pytest.approx(1 - 20.0 / 50.0)


def test_metrics_edge_cases():
    y = np.array([3.0, 5.0, 7.0, 9.0])
    assert ev.compute_metrics(np.full(4, y.mean()), y).r_squared == pytest.approx(0.0, abs=1e-12)
    assert ev.compute_metrics(y, y) == ev.Metrics(0.0, 0.0, 1.0)
    assert ev.compute_metrics([0.0, 1.0], [0.0, 1.0]).smape == 0.0
    assert ev.compute_metrics([2.0, 2.0], [2.0, 2.0]).r_squared == 0.0
    with pytest.raises(InputError):
        ev.compute_metrics([1.0], [1.0, 2.0])
    with pytest.raises(InputError):
        ev.compute_metrics([], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1_000_000), st.floats(0.01, 100.0))
def test_metric_properties(seed, scale):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 100, 30)
    p = rng.uniform(0, 100, 30)
    a, b = ev.compute_metrics(p, y), ev.compute_metrics(p * scale, y * scale)
    assert b.rmse == pytest.approx(scale * a.rmse, rel=1e-9)
    assert b.smape == pytest.approx(a.smape, rel=1e-9)
    assert ev.compute_metrics(y, p).smape == pytest.approx(a.smape, rel=1e-12)
    assert a.smape == pytest.approx(smape_direct(p, y), rel=1e-12)
    assert 0.0 <= a.smape <= 200.0
    assert a.r_squared <= 1.0


def test_kfold_sizes_and_determinism():
    labels = label_set(10)
    f = ev.kfold_split(labels, k=5, seed=3)
    assert sorted(np.bincount(f.folds)) == [2] * 5
    np.testing.assert_array_equal(f.folds, ev.kfold_split(labels, k=5, seed=3).folds)
    assert not np.array_equal(f.folds, ev.kfold_split(labels, k=5, seed=4).folds)
    tr, te = f.train_test(0)
    assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 10
    big = ev.kfold_split(label_set(23), k=5, seed=0)
    assert sorted(np.bincount(big.folds)) == [4, 4, 5, 5, 5]
    with pytest.raises(InputError):
        ev.kfold_split(labels, k=1)
    with pytest.raises(InputError):
        ev.kfold_split(label_set(3), k=5)
    with pytest.raises(InputError):
        ev.kfold_split(labels, mode="spatial")


def test_grid_grouped_keeps_cells_together():
    labels = label_set(60)
    f = ev.kfold_split(labels, k=4, seed=1, mode="grid_grouped")
    cells = {}
    for x, y, fold in zip(labels.x, labels.y, f.folds):
        cells.setdefault((x, y), set()).add(int(fold))
    assert all(len(v) == 1 for v in cells.values())
    assert set(f.folds.tolist()) == {0, 1, 2, 3}


def test_holdout_split():
    labels = label_set(100)
    train, test = ev.holdout_split(labels, 0.15, seed=2)
    assert len(test) == 15 and len(train) == 85
    assert not set(train.keys()) & set(test.keys())
    again = ev.holdout_split(labels, 0.15, seed=2)[1]
    assert again.keys() == test.keys()


def test_method_spec_validation():
    assert ev.MethodSpec("idw", "L").features_label == "-"
    assert ev.MethodSpec("deep_maps", "M+L").selection == "L+M"
    with pytest.raises(ConfigurationError):
        ev.MethodSpec("svm", "L")
    with pytest.raises(ConfigurationError):
        ev.MethodSpec("knn")


def test_ablation_training_sets():
    pool = label_set(90)
    n_fixed = int(pool.is_fixed.sum())
    zero = ev.ablation_training_set(pool, 0, seed=5)
    assert len(zero) == n_fixed and zero.is_fixed.all()
    sizes, prev = [], set()
    for x in ev.ABLATION_FRACTIONS:
        s = ev.ablation_training_set(pool, x, seed=5)
        keys = set(s.keys())
        assert prev <= keys
        prev = keys
        sizes.append(len(s))
    assert sizes[-1] == len(pool)
    assert sizes == sorted(sizes)
    with pytest.raises(InputError):
        ev.ablation_training_set(pool, 120, seed=0)
    with pytest.raises(InputError):
        ev.AblationCurve(0, [0, 40, 20], [], [])


def test_ablation_rejects_bad_fraction():
    rng = np.random.default_rng(0)
    ctx = small_context(rng, with_macro=False)
    with pytest.raises(InputError):
        ev.coverage_ablation(label_set(12, 4, 3), label_set(4, 4, 3), ctx, fractions=(0, 150), selection="L")


def test_cross_validate_spatial_baseline():
    rng = np.random.default_rng(1)
    ctx = small_context(rng, with_macro=False)
    labels = label_set(60, 4, 3)
    res = ev.cross_validate(labels, ev.MethodSpec("idw"), ctx, k=5, seed=0)
    assert (res.method, res.features) == ("idw", "-")
    assert len(res.per_fold) == 5
    mean = np.mean([m.rmse for m in res.per_fold])
    assert res.mean.rmse == pytest.approx(mean)


def test_infer_city_zero_tree_model():
    rng = np.random.default_rng(2)
    ctx = small_context(rng, with_macro=True)
    labels = label_set(30, 4, 3)
    fm = ctx.assemble(labels, "L+M")
    model = gbdt.fit(fm, fm.response, gbdt.GbdtParams(num_trees=0, min_samples_leaf=1))
    frames = ev.infer_city(model, ctx, "L+M", hours=[0, 3, 5])
    assert [fr.t for fr in frames] == [0, 3, 5]
    base = float(np.mean(fm.response))
    for fr in frames[:2]:
        assert fr.mask.sum() == 4 * 3
        np.testing.assert_allclose(fr.values, base)
    # the macro input for hour 5 is missing, so no cell is predicted
    assert frames[2].mask.sum() == 0 and np.all(frames[2].values == 0)
    assert len(ev.infer_city(model, ctx, "L+M")) == 6
    with pytest.raises(InputError):
        ev.infer_city(model, ctx, "L+M", hours=[6])


def test_predictions_csv(tmp_path):
    rng = np.random.default_rng(3)
    ctx = small_context(rng, with_macro=False)
    labels = label_set(30, 4, 3)
    fm = ctx.assemble(labels, "L")
    model = gbdt.fit(fm, fm.response, gbdt.GbdtParams(num_trees=0))
    frames = ev.infer_city(model, ctx, "L", hours=[1, 2])
    path = tmp_path / "p.csv"
    ev.write_predictions_csv(frames, path, header="# h\n")
    lines = path.read_text().splitlines()
    assert lines[:2] == ["# h", "x,y,t,value"]
    assert len(lines) == 2 + 2 * 12
