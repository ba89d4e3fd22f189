import numpy as np
import pytest

from dualgossip.datagen import (
    AgentDataset,
    epoch_batches,
    export_federation,
    generate_federation,
    load_csv_dataset,
    sample_minibatch,
    save_csv_dataset,
)
from dualgossip.errors import (
    DataIOError,
    InvalidConfigError,
    InvalidInputError,
    ParseError,
)
from dualgossip.metrics import accuracy
from dualgossip.model import build_backbone, grad_personalized, new_model


def small_federation(**overrides):
    kwargs = dict(
        n_agents=3,
        samples_per_agent=[60, 60, 60],
        d=6,
        c=4,
        skew_alpha=0.5,
        rotation_max=0.3,
        holdout_frac=0.2,
        seed=21,
    )
    kwargs.update(overrides)
    return generate_federation(**kwargs)


def test_high_alpha_label_weights_near_uniform():
    datasets = small_federation(skew_alpha=1e6, c=5)
    for ds in datasets:
        assert np.max(np.abs(ds.label_weights - 0.2)) < 0.02


def test_homogeneous_agents_transfer_across_holdouts():
    # With no rotation and near-uniform labels all agents share one
    # distribution: a head trained on agent 0 scores about the same on
    # agent 1's holdout as on its own.
    datasets = generate_federation(
        2, [400, 400], d=8, c=3, skew_alpha=1e6, rotation_max=0.0,
        holdout_frac=0.2, seed=5,
    )
    backbone = build_backbone(8, 16, seed=1)
    m = new_model(backbone, 3, mu=1.0)
    ds0 = datasets[0]
    for _ in range(300):
        g = grad_personalized(m, ds0.train_x, ds0.train_y)
        m.personalized.set_flat(m.personalized.flatten() - 0.5 * g)
    own = accuracy(m, ds0.holdout_x, ds0.holdout_y)
    other = accuracy(m, datasets[1].holdout_x, datasets[1].holdout_y)
    assert own > 0.6  # sanity: the head actually learned something
    assert abs(own - other) <= 0.03


def test_split_sizes_round_down():
    datasets = generate_federation(
        4, [800, 800, 200, 100], d=4, c=3, skew_alpha=1.0, rotation_max=0.0,
        holdout_frac=0.2, seed=9,
    )
    assert [ds.n_train for ds in datasets] == [640, 640, 160, 80]
    assert [len(ds.holdout_y) for ds in datasets] == [160, 160, 40, 20]


def test_generation_is_deterministic():
    a = small_federation()
    b = small_federation()
    for da, db in zip(a, b):
        assert da.train_x.tobytes() == db.train_x.tobytes()
        assert da.train_y.tobytes() == db.train_y.tobytes()
        assert da.holdout_x.tobytes() == db.holdout_x.tobytes()
        assert da.rotation_angle == db.rotation_angle


def test_holdout_disjoint_from_train():
    for ds in small_federation():
        train_rows = {row.tobytes() for row in ds.train_x}
        holdout_rows = {row.tobytes() for row in ds.holdout_x}
        assert not train_rows & holdout_rows


def test_label_weights_on_simplex():
    for ds in small_federation(skew_alpha=0.1):
        assert np.all(ds.label_weights >= 0)
        assert abs(ds.label_weights.sum() - 1.0) <= 1e-12


def test_generation_preconditions():
    with pytest.raises(InvalidConfigError):
        small_federation(n_agents=1, samples_per_agent=[60])
    with pytest.raises(InvalidConfigError):
        small_federation(samples_per_agent=[60, 60, 5])
    with pytest.raises(InvalidConfigError):
        small_federation(c=1)
    with pytest.raises(InvalidConfigError):
        small_federation(holdout_frac=1.0)
    with pytest.raises(InvalidConfigError):
        small_federation(samples_per_agent=[60, 60])


def test_minibatch_full_size_is_permutation():
    ds = small_federation()[0]
    rng = np.random.default_rng(3)
    bx, by = sample_minibatch(ds, ds.n_train, rng)
    assert sorted(r.tobytes() for r in bx) == sorted(r.tobytes() for r in ds.train_x)
    assert sorted(by.tolist()) == sorted(ds.train_y.tolist())


def test_minibatch_deterministic_for_same_stream_state():
    ds = small_federation()[0]
    a = sample_minibatch(ds, 8, np.random.default_rng(7))
    b = sample_minibatch(ds, 8, np.random.default_rng(7))
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_minibatch_rejects_oversized_batch():
    ds = small_federation()[0]
    with pytest.raises(InvalidInputError):
        sample_minibatch(ds, ds.n_train + 1, np.random.default_rng(0))


def test_minibatch_frequencies_uniform():
    ds = generate_federation(
        2, [25, 25], d=3, c=2, skew_alpha=1.0, rotation_max=0.0,
        holdout_frac=0.2, seed=13,
    )[0]
    n = ds.n_train  # 20 samples
    rng = np.random.default_rng(17)
    counts = np.zeros(n)
    draws = 10_000
    for _ in range(draws):
        bx, _ = sample_minibatch(ds, 1, rng)
        idx = next(
            i for i, row in enumerate(ds.train_x) if row.tobytes() == bx[0].tobytes()
        )
        counts[idx] += 1
    expected = draws / n
    se = np.sqrt(draws * (1 / n) * (1 - 1 / n))
    assert np.max(np.abs(counts - expected)) <= 4 * se


def test_epoch_batches_cover_train_set_once():
    ds = small_federation()[0]
    rng = np.random.default_rng(1)
    seen = []
    for bx, by in epoch_batches(ds, 16, rng):
        assert len(bx) == len(by) <= 16
        seen.extend(r.tobytes() for r in bx)
    assert sorted(seen) == sorted(r.tobytes() for r in ds.train_x)


def test_csv_parse_small_file(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("f0,f1,label\n1.5,2.0,0\n-1.0,0.25,1\n3.0,4.0,1\n")
    ds = load_csv_dataset(str(path), "label")
    assert ds.d == 2
    assert ds.c == 2
    assert len(ds.y) == 3
    assert np.array_equal(ds.x[0], [1.5, 2.0])


def test_csv_ragged_row_names_line(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("f0,f1,label\n1.0,2.0,0\n1.0,0\n")
    with pytest.raises(ParseError) as err:
        load_csv_dataset(str(path), "label")
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_csv_non_numeric_feature_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,label\noops,0\n")
    with pytest.raises(ParseError) as err:
        load_csv_dataset(str(path), "label")
    assert err.value.line == 2


def test_csv_unknown_label_column(tmp_path):
    path = tmp_path / "cols.csv"
    path.write_text("f0,f1,target\n1.0,2.0,0\n")
    with pytest.raises(InvalidConfigError):
        load_csv_dataset(str(path), "label")


def test_csv_missing_file():
    with pytest.raises(DataIOError):
        load_csv_dataset("/nonexistent/file.csv", "label")


def test_csv_round_trip_exact(tmp_path):
    ds = small_federation()[1]
    path = tmp_path / "shard.csv"
    save_csv_dataset(ds.train_x, ds.train_y, str(path))
    back = load_csv_dataset(str(path), "label")
    assert np.array_equal(back.x, ds.train_x)
    assert np.array_equal(back.y, ds.train_y)


def test_export_federation_one_file_pair_per_agent(tmp_path):
    datasets = small_federation()
    paths = export_federation(datasets, str(tmp_path / "fed"))
    assert len(paths) == 2 * len(datasets)
    reloaded = load_csv_dataset(paths[0], "label")
    assert np.array_equal(reloaded.x, datasets[0].train_x)


def test_dataset_invariants_enforced():
    with pytest.raises(InvalidInputError):
        AgentDataset(
            agent_id=0,
            n_classes=2,
            train_x=np.zeros((2, 2)),
            train_y=np.array([0, 3]),
            holdout_x=np.zeros((1, 2)),
            holdout_y=np.array([0]),
        )
