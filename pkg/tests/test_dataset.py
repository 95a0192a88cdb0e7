import json

import numpy as np
import pytest

from spatial_distill.config import DatasetConfig
from spatial_distill.dataset import build_dataset, load_dataset, read_manifest, write_dataset


def test_manifest_deterministic():
    cfg = DatasetConfig(n_scenes=4)
    assert build_dataset(cfg, 5).manifest() == build_dataset(cfg, 5).manifest()
    assert build_dataset(cfg, 5).manifest() != build_dataset(cfg, 6).manifest()


def test_manifest_fields(small_ds):
    row = small_ds.manifest()[0]
    for key in ("scene_id", "scene_file", "view_ids", "question_text", "answer_text", "relation"):
        assert key in row


def test_write_load_round_trip(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    assert read_manifest(tmp_path) == small_ds.manifest()
    loaded = load_dataset(tmp_path)
    assert loaded.vocab.id_to_token == small_ds.vocab.id_to_token
    assert loaded.config == small_ds.config
    assert len(loaded) == len(small_ds)
    for a, b in zip(loaded.scenes, small_ds.scenes):
        assert a.graph == b.graph
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.depth, b.depth)
        for k in b.teacher:
            np.testing.assert_array_equal(a.teacher[k], b.teacher[k])
    for a, b in zip(loaded.samples, small_ds.samples):
        assert a.qa == b.qa
        np.testing.assert_array_equal(a.answer_ids, b.answer_ids)
        np.testing.assert_array_equal(a.soft_targets, b.soft_targets)


def test_container_encoding(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    with np.load(tmp_path / "scenes" / "scene_00000.npz") as z:
        for name in z.files:
            kind = "<i4" if name.startswith("answer_ids") else "<f4"
            assert z[name].dtype == np.dtype(kind), name
        assert z["features"].shape == (3, 16, 16, 8)


def test_scene_level_split(small_ds):
    train, val = small_ds.split(0.25, 0)
    assert sorted(train + val) == list(range(len(small_ds)))
    tr_scenes = {small_ds.samples[i].scene_index for i in train}
    va_scenes = {small_ds.samples[i].scene_index for i in val}
    assert not tr_scenes & va_scenes
    assert len(va_scenes) == 2


def test_manifest_lines(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == len(small_ds)
    assert json.loads(lines[0])["sample_id"] == 0


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
