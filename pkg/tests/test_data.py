import dataclasses
import json
import os

import numpy as np
import pytest

from scenekt import data as data_mod
from scenekt.data import (
    Dataset,
    GeneratorConfig,
    generate,
    load_checkpoint,
    load_dataset,
    load_split,
    save_checkpoint,
    save_dataset,
    zipf_weights,
)
from scenekt.model import ModelDims, ModelParams


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(objects_min=1)
    with pytest.raises(ValueError):
        GeneratorConfig(objects_min=5, objects_max=4)
    with pytest.raises(ValueError):
        GeneratorConfig(scenes=0)


def test_zipf_degenerates_to_uniform():
    w = zipf_weights(6, 0.0)
    np.testing.assert_allclose(w, np.full(5, 0.2))


def test_generate_deterministic(tiny_dataset):
    again = generate(tiny_dataset.config)
    assert len(again.train) == len(tiny_dataset.train)
    for a, b in zip(tiny_dataset.train + tiny_dataset.test, again.train + again.test):
        assert a.image_id == b.image_id
        assert a.gt_triples == b.gt_triples
        for oa, ob in zip(a.objects, b.objects):
            assert oa.label == ob.label and oa.box == ob.box
            np.testing.assert_array_equal(oa.feature, ob.feature)
        np.testing.assert_array_equal(a.scene_feature, b.scene_feature)


def test_generated_scenes_valid(tiny_dataset):
    cfg = tiny_dataset.config
    for s in tiny_dataset.train + tiny_dataset.test:
        s.validate(cfg.n_object_classes, cfg.n_relations)
        for si, r, oi in s.gt_triples:
            assert r != 0  # none relation never appears as ground truth
    train_ids = {s.image_id for s in tiny_dataset.train}
    test_ids = {s.image_id for s in tiny_dataset.test}
    assert not train_ids & test_ids


def test_zipf_histogram_and_head_tail_ratio():
    cfg = GeneratorConfig(
        n_object_classes=30,
        n_relations=50,
        scenes=1600,
        d_v=4,
        d_s=2,
        objects_min=5,
        objects_max=10,
        seed=3,
    )
    ds = generate(cfg)
    counts = ds.relation_counts("train") + ds.relation_counts("test")
    total = counts[1:].sum()
    assert total >= 10000
    target = zipf_weights(cfg.n_relations, cfg.zipf_exponent)
    empirical = counts[1:] / total
    tv = 0.5 * np.abs(empirical - target).sum()
    assert tv <= 0.02
    by_freq = np.sort(counts[1:])[::-1]
    assert by_freq[0] >= 50 * by_freq[39]


def test_dataset_round_trip(tmp_path, tiny_dataset):
    save_dataset(tiny_dataset, str(tmp_path / "ds"))
    loaded = load_dataset(str(tmp_path / "ds"))
    assert loaded.config == tiny_dataset.config
    for a, b in zip(tiny_dataset.train, loaded.train):
        assert a.image_id == b.image_id
        assert [tuple(t) for t in a.gt_triples] == [tuple(t) for t in b.gt_triples]
        np.testing.assert_array_equal(a.scene_feature, b.scene_feature)
        for oa, ob in zip(a.objects, b.objects):
            assert oa.box == ob.box and oa.label == ob.label
            np.testing.assert_array_equal(oa.feature, ob.feature)
        assert set(a.union_features) == set(b.union_features)
        for k in a.union_features:
            np.testing.assert_array_equal(a.union_features[k], b.union_features[k])


def test_loader_errors_name_line_and_field(tmp_path, tiny_dataset):
    path = tmp_path / "bad.jsonl"
    rec = data_mod._scene_to_record(tiny_dataset.train[0])
    rec["scene_feature"] = None
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="line 1.*scene_feature"):
        load_split(str(path))

    rec = data_mod._scene_to_record(tiny_dataset.train[0])
    rec["gt_triples"][0][1] = 999
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="line 1.*relation id"):
        load_split(str(path), tiny_dataset.config.n_object_classes, tiny_dataset.config.n_relations)

    path.write_text("{not json\n")
    with pytest.raises(ValueError, match="line 1.*malformed"):
        load_split(str(path))


def test_union_feature_fallback(tiny_dataset):
    s = tiny_dataset.train[0]
    i, j = 0, 1
    s.union_features.pop((i, j), None)
    np.testing.assert_array_equal(
        s.union_feature(i, j), 0.5 * (s.objects[i].feature + s.objects[j].feature)
    )


def test_checkpoint_round_trip_bit_exact(tmp_path):
    dims = ModelDims(d_v=6, d_s=3, n_object_classes=4, n_relations=5)
    params = ModelParams.initialize(dims, seed=11)
    params.class_weights = np.random.default_rng(0).uniform(0.5, 2.0, size=4)
    params.bias_table = np.log(
        np.random.default_rng(1).dirichlet(np.ones(5), size=(4, 4))
    )
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    for name, t in params.blocks.items():
        np.testing.assert_array_equal(t.value, loaded.blocks[name].value)
    np.testing.assert_array_equal(params.class_weights, loaded.class_weights)
    np.testing.assert_array_equal(params.bias_table, loaded.bias_table)
    assert loaded.alpha == params.alpha and loaded.margin == params.margin


def test_checkpoint_dims_mismatch(tmp_path):
    dims = ModelDims(d_v=6, d_s=3, n_object_classes=4, n_relations=5)
    params = ModelParams.initialize(dims, seed=1)
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(params, path)
    other = ModelDims(d_v=7, d_s=3, n_object_classes=4, n_relations=5)
    with pytest.raises(ValueError, match="dims"):
        load_checkpoint(path, expect_dims=other)


def test_checkpoint_version_mismatch(tmp_path):
    dims = ModelDims(d_v=2, d_s=2, n_object_classes=2, n_relations=2)
    params = ModelParams.initialize(dims, seed=1)
    path = str(tmp_path / "ckpt.json")
    save_checkpoint(params, path)
    doc = json.loads(open(path).read())
    doc["version"] = 999
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
