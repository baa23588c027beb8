import math

import numpy as np
import pytest

from vifo.data import (
    SINUSOID_INTERVALS,
    CsvFormatError,
    CsvSchema,
    Dataset,
    DatasetConfig,
    aux_bounds,
    build_dataset,
    gen_blobs,
    gen_sinusoid,
    gen_two_moons,
    load_csv,
    sample_aux,
    sinusoid_grid,
    standardize,
    train_val_split,
)

# ── generators ──────────────────────────────────────────────────────


def test_noise_free_sinusoid_lies_on_the_curve():
    ds = gen_sinusoid(100, noise=0.0, seed=1)
    np.testing.assert_allclose(ds.y, 2.0 * np.sin(ds.X[:, 0]))
    assert ds.task == "regression"


def test_sinusoid_inputs_stay_in_their_intervals():
    x = gen_sinusoid(101, seed=2).X[:, 0]
    (lo1, hi1), (lo2, hi2) = SINUSOID_INTERVALS
    first = (x >= lo1) & (x <= hi1)
    second = (x >= lo2) & (x <= hi2)
    assert np.all(first | second)
    assert first.sum() == 51
    assert second.sum() == 50


def test_sinusoid_noise_moments():
    n = 100_000
    ds = gen_sinusoid(n, noise=0.1, seed=3)
    residual = ds.y - 2.0 * np.sin(ds.X[:, 0])
    assert abs(residual.mean()) <= 3 * 0.1 / math.sqrt(n)
    # Standard error of a normal sample's standard deviation is sigma / sqrt(2(n - 1)).
    assert abs(residual.std(ddof=1) - 0.1) <= 3 * 0.1 / math.sqrt(2 * (n - 1))


def test_sinusoid_grid_spans_minus_pi_to_pi():
    grid = sinusoid_grid(5)
    assert grid.shape == (5, 1)
    assert grid[0, 0] == pytest.approx(-math.pi)
    assert grid[-1, 0] == pytest.approx(math.pi)


def test_blobs_are_balanced():
    ds = gen_blobs(300, 3, seed=0)
    assert np.bincount(ds.y).tolist() == [100, 100, 100]
    assert ds.n_classes == 3


def test_blob_centers_are_separated():
    ds = gen_blobs(3000, 4, seed=1, separation=10.0)
    centers = np.array([ds.X[ds.y == k].mean(axis=0) for k in range(4)])
    distances = [np.linalg.norm(centers[k] - centers[(k + 1) % 4]) for k in range(4)]
    np.testing.assert_allclose(distances, 10.0, atol=0.3)


def test_shift_translates_every_point():
    plain = gen_blobs(60, 3, seed=4)
    shifted = gen_blobs(60, 3, seed=4, shift=5.0)
    np.testing.assert_allclose(shifted.X, plain.X + 5.0)
    assert shifted.source == "blobs+shift=5.0"


def test_moons_are_balanced_within_one():
    counts = np.bincount(gen_two_moons(301, seed=0).y)
    assert abs(int(counts[0]) - int(counts[1])) <= 1


@pytest.mark.parametrize(
    "make",
    [
        lambda seed: gen_blobs(50, 2, seed=seed),
        lambda seed: gen_two_moons(50, seed=seed),
        lambda seed: gen_sinusoid(50, seed=seed),
    ],
)
def test_generators_are_deterministic(make):
    a, b = make(7), make(7)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_dataset_ranges_and_validation():
    ds = Dataset(X=[[0.0, 2.0], [1.0, 2.0]], y=[0, 1])
    np.testing.assert_array_equal(ds.feature_mins, [0.0, 2.0])
    np.testing.assert_array_equal(ds.feature_maxs, [1.0, 2.0])
    assert ds.n_classes == 2
    with pytest.raises(ValueError, match="targets"):
        Dataset(X=[[0.0], [1.0]], y=[0])
    with pytest.raises(ValueError, match="Unknown task"):
        Dataset(X=[[0.0]], y=[0], task="ranking")


# ── auxiliary inputs ────────────────────────────────────────────────


def _unit_range_dataset():
    return Dataset(X=[[0.0, 2.0], [1.0, 2.0], [0.5, 2.0]], y=[0, 1, 0])


def test_aux_bounds_widen_by_half_the_range():
    low, high = aux_bounds(_unit_range_dataset())
    np.testing.assert_allclose(low, [-0.5, 1.5])
    np.testing.assert_allclose(high, [1.5, 2.5])


def test_aux_samples_fill_the_widened_box():
    rng = np.random.default_rng(5)
    m = 100_000
    aux = sample_aux(_unit_range_dataset(), m, rng)
    assert aux.shape == (m, 2)
    assert aux[:, 0].min() >= -0.5 and aux[:, 0].max() <= 1.5
    assert aux[:, 0].min() < -0.49 and aux[:, 0].max() > 1.49
    assert aux[:, 1].min() >= 1.5 and aux[:, 1].max() <= 2.5


def test_aux_mean_is_the_range_midpoint():
    rng = np.random.default_rng(6)
    m = 100_000
    aux = sample_aux(_unit_range_dataset(), m, rng)[:, 0]
    # Uniform on a width-2 interval has standard deviation 2 / sqrt(12).
    assert abs(aux.mean() - 0.5) <= 3 * (2 / math.sqrt(12)) / math.sqrt(m)


def test_half_the_aux_mass_lies_outside_the_data_box():
    rng = np.random.default_rng(7)
    m = 100_000
    aux = sample_aux(_unit_range_dataset(), m, rng)[:, 0]
    outside = np.mean((aux < 0.0) | (aux > 1.0))
    assert abs(outside - 0.5) <= 3 * math.sqrt(0.25 / m)


def test_aux_needs_a_positive_count(rng):
    with pytest.raises(ValueError, match="at least one"):
        sample_aux(_unit_range_dataset(), 0, rng)


# ── CSV ─────────────────────────────────────────────────────────────


def test_load_csv_parses_exactly(tmp_path):
    path = tmp_path / "points.csv"
    path.write_text("a,b,y\n1.5,-2,0\n0.25,3e2,1\n\n7,8,2\n", encoding="utf-8")
    ds = load_csv(path, CsvSchema(target="y"))
    np.testing.assert_array_equal(ds.X, [[1.5, -2.0], [0.25, 300.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ds.y, [0, 1, 2])
    assert ds.X.dtype == np.float64
    assert ds.source == str(path)


def test_load_csv_reports_the_bad_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,y\n1,0\nx,1\n", encoding="utf-8")
    with pytest.raises(CsvFormatError, match="row 3, column 1") as excinfo:
        load_csv(path, CsvSchema(target="y"))
    assert (excinfo.value.row, excinfo.value.column) == (3, 1)


@pytest.mark.parametrize(
    "text, match",
    [
        ("", "is empty"),
        ("a,y\n", "no data rows"),
        ("a,b\n1,2\n", "missing column"),
        ("a,y\n1,0,3\n", "expected 2 cells"),
        ("a,y\n1,0.5\n", "not an integer"),
    ],
)
def test_load_csv_errors(tmp_path, text, match):
    path = tmp_path / "data.csv"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(CsvFormatError, match=match):
        load_csv(path, CsvSchema(target="y"))


def test_load_csv_regression_and_unlabelled(tmp_path):
    path = tmp_path / "reg.csv"
    path.write_text("x,y\n0.1,0.5\n0.2,-1.25\n", encoding="utf-8")
    ds = load_csv(path, CsvSchema(target="y", task="regression"))
    np.testing.assert_array_equal(ds.y, [0.5, -1.25])
    unlabelled = load_csv(path, CsvSchema(target=None))
    assert unlabelled.n_features == 2


# ── scaling and splits ──────────────────────────────────────────────


def test_standardize_round_trip(rng):
    ds = Dataset(X=rng.normal(3.0, 2.0, size=(40, 3)), y=rng.integers(0, 2, size=40))
    scaled, transform = standardize(ds)
    np.testing.assert_allclose(scaled.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled.X.std(axis=0), 1.0)
    np.testing.assert_allclose(transform.inverse(scaled.X), ds.X, atol=1e-12)
    np.testing.assert_allclose(scaled.feature_mins, scaled.X.min(axis=0))
    assert "standardize" in scaled.transform


def test_standardize_leaves_constant_columns_unscaled():
    ds = Dataset(X=[[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]], y=[0, 1, 0])
    scaled, transform = standardize(ds)
    assert transform.scale[1] == 1.0
    np.testing.assert_array_equal(scaled.X[:, 1], 0.0)


def test_standardize_reuses_a_fitted_transform(rng):
    train = Dataset(X=rng.normal(size=(20, 2)), y=rng.integers(0, 2, size=20))
    test = Dataset(X=rng.normal(size=(5, 2)), y=rng.integers(0, 2, size=5))
    _, transform = standardize(train)
    scaled, same = standardize(test, transform)
    assert same is transform
    np.testing.assert_allclose(scaled.X, transform.apply(test.X))


def test_train_val_split(blobs):
    train, val = train_val_split(blobs, 0.1, seed=0)
    assert (len(train), len(val)) == (81, 9)
    again, _ = train_val_split(blobs, 0.1, seed=0)
    np.testing.assert_array_equal(train.X, again.X)
    with pytest.raises(ValueError, match="val_fraction"):
        train_val_split(blobs, 1.0)


# ── configs ─────────────────────────────────────────────────────────


def test_build_dataset_kinds(tmp_path):
    assert build_dataset(DatasetConfig(kind="moons", n=40)).n_classes == 2
    assert build_dataset(DatasetConfig(kind="sinusoid", n=30)).task == "regression"
    path = tmp_path / "d.csv"
    path.write_text("a,y\n1,0\n2,1\n", encoding="utf-8")
    assert len(build_dataset(DatasetConfig(kind="csv", path=str(path)))) == 2


def test_dataset_config_validation():
    with pytest.raises(ValueError, match="kind"):
        DatasetConfig(kind="cifar")
    with pytest.raises(ValueError, match="path"):
        DatasetConfig(kind="csv")
