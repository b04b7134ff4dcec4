import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphfuse import ConfigError, DataError
from graphfuse.data import (
    ArrayDataset,
    Recording,
    SplitSpec,
    apply_split,
    load_imu_csv,
    load_manifest,
    load_recordings,
    load_skeleton_csv,
    pad_or_crop,
    synthesize_dataset,
    synthetic_arrays,
    utd_mhad_split,
    write_imu_csv,
    write_skeleton_csv,
    write_synthetic,
)
from graphfuse.fusion import IMU, SKELETON, FusionPlan, ModalityBlock
from graphfuse.graph import AttachmentSpec


def write(path, text):
    path.write_text(text)
    return path


# -- skeleton CSV --------------------------------------------------------------------
def test_skeleton_shape(tmp_path):
    rows = ["frame,person,joint,x,y,z"]
    for f in range(2):
        for j in range(2):
            rows.append(f"{f},0,{j},{f},{j},1.5")
    block = load_skeleton_csv(write(tmp_path / "s.csv", "\n".join(rows)))
    assert block.tensor.shape == (1, 3, 2, 2)
    assert block.tensor.numpy()[0, :, 1, 1].tolist() == [1.0, 1.0, 1.5]


def test_skeleton_duplicate_row(tmp_path):
    p = write(tmp_path / "s.csv", "frame,person,joint,x,y,z\n0,0,0,1,2,3\n0,0,0,1,2,3\n")
    with pytest.raises(DataError, match=":3"):
        load_skeleton_csv(p)


def test_skeleton_malformed_row_reports_line(tmp_path):
    p = write(tmp_path / "s.csv", "frame,person,joint,x,y,z\n0,0,0,1,2,3\n1,0,0,a,2,3\n")
    with pytest.raises(DataError, match=":3"):
        load_skeleton_csv(p)
    p = write(tmp_path / "t.csv", "frame,person,joint,x,y,z\n0,0,0,1,2\n")
    with pytest.raises(DataError, match=":2"):
        load_skeleton_csv(p)


def test_skeleton_missing_joint_zero_filled(tmp_path, caplog):
    p = write(tmp_path / "s.csv", "frame,person,joint,x,y,z\n0,0,0,1,1,1\n0,0,1,2,2,2\n1,0,0,3,3,3\n")
    with caplog.at_level(logging.WARNING):
        block = load_skeleton_csv(p)
    assert np.all(block.tensor.numpy()[0, :, 1, 1] == 0)
    assert "missing" in caplog.text


def test_skeleton_frame_gap_reindexed(tmp_path, caplog):
    p = write(tmp_path / "s.csv", "frame,person,joint,x\n0,0,0,1\n5,0,0,2\n")
    with caplog.at_level(logging.WARNING):
        block = load_skeleton_csv(p)
    assert block.tensor.shape == (1, 1, 2, 1)
    assert "non-contiguous" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_skeleton_round_trip(tmp_path_factory, m, c, t, n, seed):
    x = np.random.default_rng(seed).standard_normal((m, c, t, n)).astype(np.float32)
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    write_skeleton_csv(path, ModalityBlock(SKELETON, x))
    np.testing.assert_allclose(load_skeleton_csv(path, n).tensor.numpy(), x, atol=1e-6)


# -- IMU CSV -------------------------------------------------------------------------
def imu_text(sensors, t, shuffle=False):
    rows = ["t_index,sensor_id,x,y,z"]
    order = list(range(t))
    if shuffle:
        order = order[::-1]
    for s in sensors:
        for i in order:
            rows.append(f"{i},{s},{i},{-i},{2 * i}")
    return "\n".join(rows)


def test_imu_shape_and_subset(tmp_path):
    p = write(tmp_path / "i.csv", imu_text(["acc_watch", "gyro_watch"], 100))
    assert load_imu_csv(p, ["acc_watch", "gyro_watch"]).tensor.shape == (1, 3, 2, 100)
    assert load_imu_csv(p, ["acc_watch"]).tensor.shape == (1, 3, 1, 100)


def test_imu_unknown_sensor(tmp_path):
    p = write(tmp_path / "i.csv", imu_text(["acc", "mystery"], 5))
    with pytest.raises(DataError, match="mystery"):
        load_imu_csv(p, ["acc"], known_sensors=["acc", "gyro"])


def test_imu_misordered_sorted_with_warning(tmp_path, caplog):
    p = write(tmp_path / "i.csv", imu_text(["acc"], 6, shuffle=True))
    with caplog.at_level(logging.WARNING):
        block = load_imu_csv(p, ["acc"])
    np.testing.assert_array_equal(block.tensor.numpy()[0, 0, 0], np.arange(6))
    assert "out of order" in caplog.text


def test_imu_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((1, 3, 2, 7)).astype(np.float32)
    write_imu_csv(tmp_path / "i.csv", ModalityBlock(IMU, x), ["a", "b"])
    np.testing.assert_allclose(load_imu_csv(tmp_path / "i.csv", ["a", "b"]).tensor.numpy(), x, atol=1e-6)


# -- manifest and splits -------------------------------------------------------------
def recs(subjects):
    return [Recording(f"r{i}", s, 0, "x.csv") for i, s in enumerate(subjects)]


def test_utd_protocol():
    spec = utd_mhad_split()
    assert spec.train_subjects == (1, 3, 5, 7) and spec.test_subjects == (2, 4, 6, 8)


def test_split_errors():
    with pytest.raises(ConfigError):
        SplitSpec((1, 2), (2, 3))
    with pytest.raises(ConfigError):
        SplitSpec((1,), ())
    with pytest.raises(ConfigError):
        apply_split(recs([1, 3]), SplitSpec((1, 3), (2,)))
    with pytest.raises(ConfigError):
        apply_split(recs([1, 9]), SplitSpec((1,), (2,)))


def test_split_warns_on_empty_subject(caplog):
    with caplog.at_level(logging.WARNING):
        apply_split(recs([1, 2]), SplitSpec((1, 3), (2,)))
    assert "subject 3" in caplog.text


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=1, max_size=40), st.data())
def test_split_is_partition(subjects, data):
    present = sorted(set(subjects))
    if len(present) < 2:
        return
    test = data.draw(st.sets(st.sampled_from(present), min_size=1, max_size=len(present) - 1))
    train = set(present) - test
    rs = recs(subjects)
    tr, te = apply_split(rs, SplitSpec(tuple(train), tuple(test)))
    assert len(tr) + len(te) == len(rs)
    assert {r.sample_id for r in tr}.isdisjoint({r.sample_id for r in te})


def test_manifest_labels_and_missing_files(tmp_path):
    (tmp_path / "a.csv").write_text("frame,person,joint,x\n0,0,0,1\n")
    write(tmp_path / "m.json", '{"classes": ["wave", "clap"], "recordings": ['
          '{"sample_id": "a", "subject": 1, "label": "clap", "skeleton": "a.csv"}]}')
    m = load_manifest(tmp_path / "m.json")
    assert m.recordings[0].label == 1
    write(tmp_path / "bad.json", '{"classes": ["wave"], "recordings": ['
          '{"sample_id": "a", "subject": 1, "label": "jump", "skeleton": "a.csv"}]}')
    with pytest.raises(DataError):
        load_manifest(tmp_path / "bad.json")
    write(tmp_path / "gone.json", '{"classes": ["wave"], "recordings": ['
          '{"sample_id": "a", "subject": 1, "label": 0, "skeleton": "nope.csv"}]}')
    with pytest.raises(DataError, match="nope.csv"):
        load_manifest(tmp_path / "gone.json")


# -- synthetic data -------------------------------------------------------------------
def test_synthetic_construction():
    ds = synthesize_dataset(classes=3, samples_per_class=20, num_nodes=8, frames=32, sensors=2)
    assert len(ds) == 60
    assert ds.skeleton.shape == (60, 1, 3, 32, 8) and ds.imu.shape == (60, 1, 3, 2, 32)
    assert np.bincount(ds.labels).tolist() == [20, 20, 20]
    assert ds.imu_only_pairs() == [(1, 2)]
    # the pair is indistinguishable from the skeleton alone
    np.testing.assert_array_equal(ds.skeleton[ds.labels == 1], ds.skeleton[ds.labels == 2])
    assert not np.array_equal(ds.imu[ds.labels == 1], ds.imu[ds.labels == 2])


def test_synthetic_determinism():
    a = synthesize_dataset(seed=3)
    b = synthesize_dataset(seed=3)
    assert a.skeleton.tobytes() == b.skeleton.tobytes() and a.imu.tobytes() == b.imu.tobytes()
    assert synthesize_dataset(seed=4).skeleton.tobytes() != a.skeleton.tobytes()


def test_synthetic_fused_shapes():
    ds = synthesize_dataset(samples_per_class=2)
    assert synthetic_arrays(ds, FusionPlan()).x.shape == (6, 1, 3, 32, 8)
    assert synthetic_arrays(ds, FusionPlan(imu_mode="channel_broadcast")).x.shape == (6, 1, 9, 32, 8)
    sp = synthetic_arrays(ds, FusionPlan(imu_mode="spatial_nodes", attachment=AttachmentSpec(2, (4,))))
    assert sp.x.shape == (6, 1, 3, 32, 10) and sp.graph.n_nodes == 10


def test_written_synthetic_reloads(tmp_path):
    ds = synthesize_dataset(samples_per_class=2, frames=8)
    path = write_synthetic(ds, tmp_path)
    m = load_manifest(path)
    sk, imu, rgb = load_recordings(m, m.recordings, 8)
    assert len(sk) == 6 and rgb == [None] * 6
    np.testing.assert_allclose(sk[3].tensor.numpy(), ds.skeleton[3], atol=1e-6)
    np.testing.assert_allclose(imu[3].tensor.numpy(), ds.imu[3], atol=1e-6)


# -- array datasets -------------------------------------------------------------------
def test_pad_or_crop():
    x = np.arange(6.0).reshape(2, 3)
    assert pad_or_crop(x, 5, 1).tolist() == [[0, 1, 2, 0, 0], [3, 4, 5, 0, 0]]
    assert pad_or_crop(x, 2, 1).tolist() == [[0, 1], [3, 4]]


def test_array_dataset_round_trip(tmp_path):
    ds = synthetic_arrays(synthesize_dataset(samples_per_class=2), FusionPlan(imu_mode="channel_broadcast"))
    ds.save(tmp_path / "d")
    back = ArrayDataset.load(tmp_path / "d")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.y.tolist() == ds.y.tolist() and back.graph == ds.graph
    assert back.subjects.tolist() == ds.subjects.tolist()
    sub = back.subset(back.y == 1)
    assert len(sub) == 2 and set(sub.y.tolist()) == {1}
