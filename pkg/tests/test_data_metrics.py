import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepgcn.data import (
    SynthSpec,
    load_dataset,
    load_point_file,
    save_dataset,
    save_point_file,
    synth_dataset,
)
from deepgcn.errors import ContractError, PointFileError
from deepgcn.graph import PointCloud, knn
from deepgcn.metrics import ConfusionMatrix, compute_metrics, iou_from_counts


def test_synth_is_deterministic():
    spec = SynthSpec(num_blocks=3, points_per_block=256, seed=11)
    a, b = synth_dataset(spec), synth_dataset(spec)
    for x, y in zip(a.blocks, b.blocks):
        assert x.coords.tobytes() == y.coords.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    other = synth_dataset(SynthSpec(num_blocks=3, points_per_block=256, seed=12))
    assert not np.array_equal(a.blocks[0].coords, other.blocks[0].coords)


def test_train_and_test_splits_differ():
    spec = SynthSpec(num_blocks=2, points_per_block=128)
    tr, te = synth_dataset(spec, "train"), synth_dataset(spec, "test")
    assert te.split == "test"
    assert not np.array_equal(tr.blocks[0].coords, te.blocks[0].coords)
    with pytest.raises(ContractError):
        synth_dataset(spec, "val")


def test_label_histogram_follows_mix():
    mix = (0.1, 0.2, 0.3, 0.4)
    ds = synth_dataset(SynthSpec(num_blocks=4, points_per_block=4096, shape_mix=mix, seed=3))
    for block in ds.blocks:
        frac = np.bincount(block.labels, minlength=4) / 4096
        assert np.all(np.abs(frac - mix) < 0.05)
        assert block.aux_dim == 0


def test_two_class_nearest_neighbor_is_near_perfect():
    ds = synth_dataset(SynthSpec(num_blocks=4, points_per_block=1024, num_classes=2, seed=5))
    for block in ds.blocks:
        # leave-one-out: the nearest other point predicts the label
        nearest = knn(block.coords, 1).indices[:, 0]
        assert np.mean(block.labels[nearest] == block.labels) > 0.99


def test_synth_spec_validation():
    with pytest.raises(ContractError):
        SynthSpec(shape_mix=(0.5, 0.6, 0.0, -0.1))
    with pytest.raises(ContractError):
        SynthSpec(num_classes=3, shape_mix=(0.5, 0.5))
    with pytest.raises(ContractError):
        SynthSpec(num_blocks=0)
    with pytest.raises(ContractError):
        SynthSpec(num_classes=9)
    with pytest.raises(ContractError):
        SynthSpec(num_classes=8, instances=4)
    assert SynthSpec(points_per_block=10, num_classes=3).class_counts().sum() == 10


def _random_cloud(rng, n, c, classes):
    aux = rng.standard_normal((n, c)) if c else None
    return PointCloud(rng.standard_normal((n, 3)) * 1e3, aux, rng.integers(0, classes, n))


def test_point_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = _random_cloud(rng, 50, 2, 5)
    path = tmp_path / "b.pts"
    save_point_file(cloud, path, 5)
    back, classes = load_point_file(path)
    assert classes == 5
    assert np.array_equal(back.coords, cloud.coords)
    assert np.array_equal(back.aux, cloud.aux)
    assert np.array_equal(back.labels, cloud.labels)


def test_minimal_point_file(tmp_path):
    path = tmp_path / "one.pts"
    path.write_text("PCSEG v1 1 0 2\n0.5 -1 2 1\n")
    cloud, classes = load_point_file(path)
    assert cloud.num_points == 1 and cloud.aux_dim == 0 and classes == 2
    assert cloud.labels[0] == 1


@pytest.mark.parametrize(
    "text,line",
    [
        ("PCSEG v1 2 0 2\n0 0 0 1\n0 0 1\n", 3),
        ("PCSEG v2 1 0 2\n0 0 0 1\n", 1),
        ("PCSEG v1 1 0 2\n0 0 0 2\n", 2),
        ("PCSEG v1 1 0 2\n0 x 0 1\n", 2),
        ("PCSEG v1 3 0 2\n0 0 0 1\n", 3),
        ("PCSEG v1 1 0 2\n0 nan 0 1\n", 2),
    ],
)
def test_malformed_point_files(tmp_path, text, line):
    path = tmp_path / "bad.pts"
    path.write_text(text)
    with pytest.raises(PointFileError) as info:
        load_point_file(path)
    assert info.value.line == line
    assert f":{line}" in str(info.value)


def test_dataset_round_trip(tmp_path):
    ds = synth_dataset(SynthSpec(num_blocks=3, points_per_block=64, seed=2), "test")
    manifest = save_dataset(ds, tmp_path)
    back = load_dataset(manifest)
    assert back.split == "test" and back.num_classes == ds.num_classes and len(back) == 3
    for a, b in zip(ds.blocks, back.blocks):
        assert np.array_equal(a.coords, b.coords) and np.array_equal(a.labels, b.labels)


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.pcds"
    bad.write_text("PCDS v1 4\n")
    with pytest.raises(PointFileError):
        load_dataset(bad)
    bad.write_text("PCDS v1 4 train\n")
    with pytest.raises(PointFileError):
        load_dataset(bad)


# ---------------------------------------------------------------------------
# metrics


def test_iou_examples():
    assert iou_from_counts(5, 8, 7) == 0.5
    with pytest.raises(ContractError):
        iou_from_counts(9, 8, 7)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    m = ConfusionMatrix(3).update(labels, labels).metrics()
    assert m.overall_accuracy == 1.0 and m.mean_iou == 1.0
    assert np.all(m.per_class_iou == 1.0)


def test_all_one_class_on_balanced_two_classes():
    labels = np.array([0, 0, 1, 1])
    m = ConfusionMatrix(2).update(np.zeros(4, int), labels).metrics()
    assert m.overall_accuracy == 0.5
    np.testing.assert_array_equal(m.per_class_iou, [0.5, 0.0])
    assert m.mean_iou == 0.25


def test_absent_classes_left_out_of_mean():
    m = compute_metrics(np.array([[3, 0, 1], [0, 0, 0], [0, 0, 0]]))
    assert np.isnan(m.per_class_iou[1])
    assert m.per_class_iou[2] == 0.0
    assert m.mean_iou == pytest.approx(0.375)


def test_confusion_contracts():
    cm = ConfusionMatrix(2)
    with pytest.raises(ContractError):
        cm.update([0, 2], [0, 1])
    with pytest.raises(ContractError):
        cm.update([0], [0, 1])
    with pytest.raises(ContractError):
        cm.metrics()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_metrics_match_per_point_loops(classes, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    preds = np.where(rng.random(n) < 0.6, labels, rng.integers(0, classes, n))
    m = ConfusionMatrix(classes).update(preds, labels).metrics()
    assert m.overall_accuracy == sum(int(p == t) for p, t in zip(preds, labels)) / n
    ious = []
    for c in range(classes):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        union = sum(1 for p, t in zip(preds, labels) if p == c or t == c)
        if union:
            assert m.per_class_iou[c] == pytest.approx(tp / union, abs=1e-15)
            ious.append(tp / union)
        else:
            assert np.isnan(m.per_class_iou[c])
    assert m.mean_iou == pytest.approx(np.mean(ious), abs=1e-15)
    assert m.mean_iou <= np.nanmax(m.per_class_iou)
