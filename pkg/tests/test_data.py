import dataclasses
import json

import numpy as np
import pytest

from cite.assignment import kmeans_fit
from cite.config import SynthConfig, build_config, load_config
from cite.data import (
    FeatureStore,
    gen_synthetic,
    load_annotations,
    load_dataset,
    load_features,
    model_input_dims,
    phrase_rows,
    region_inputs,
    save_dataset,
    save_features,
)
from cite.errors import ConfigError, DataError
from cite.geometry import BBox, union_box


# ---------------------------------------------------------------------------
# feature store
# ---------------------------------------------------------------------------

def test_feature_round_trip_exact(tmp_path, rng):
    store = FeatureStore(rng.normal(size=(3, 4)).astype(np.float32),
                         ["a", "b", "c"])
    path = tmp_path / "feat.bin"
    save_features(store, path)
    loaded = load_features(path)
    assert loaded.matrix.tobytes() == store.matrix.tobytes()
    assert loaded.ids == store.ids


def test_feature_truncated_payload(tmp_path, rng):
    store = FeatureStore(rng.normal(size=(4, 5)).astype(np.float32),
                         [f"r{i}" for i in range(4)])
    path = tmp_path / "feat.bin"
    save_features(store, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(DataError, match="expected .* bytes"):
        load_features(path)


def test_feature_wide_rows_supported(tmp_path):
    # text features at the 6000-dim scale load without special casing
    store = FeatureStore(np.zeros((2, 6000), dtype=np.float32), ["p0", "p1"])
    path = tmp_path / "big.bin"
    save_features(store, path)
    assert load_features(path).dim == 6000


def test_feature_bad_magic(tmp_path):
    path = tmp_path / "feat.bin"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
    with pytest.raises(DataError, match="magic"):
        load_features(path)


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def _write_lines(path, lines):
    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n")


def test_load_annotations_minimal(tmp_path):
    path = tmp_path / "ann.jsonl"
    _write_lines(path, [{
        "image_id": "im0", "W": 64, "H": 48, "phrase_id": "p0",
        "phrase_text": "a dog", "feature_row": 0,
        "gt_boxes": [[1, 2, 10, 20]],
    }])
    recs = load_annotations(path)
    assert len(recs) == 1
    assert recs[0]["gt_boxes"][0] == BBox(1, 2, 10, 20)


def test_load_annotations_bad_box_reports_line(tmp_path):
    path = tmp_path / "ann.jsonl"
    _write_lines(path, [
        {"image_id": "im0", "W": 64, "H": 48, "phrase_id": "p0",
         "phrase_text": "x", "feature_row": 0, "gt_boxes": [[0, 0, 5, 5]]},
        {"image_id": "im0", "W": 64, "H": 48, "phrase_id": "p1",
         "phrase_text": "y", "feature_row": 1, "gt_boxes": [[9, 0, 5, 5]]},
    ])
    with pytest.raises(DataError, match=":2"):
        load_annotations(path)


def test_load_annotations_malformed_json(tmp_path):
    path = tmp_path / "ann.jsonl"
    path.write_text('{"image_id": "im0"\n')
    with pytest.raises(DataError, match=":1"):
        load_annotations(path)


def test_multibox_gt_union(tmp_path):
    path = tmp_path / "ann.jsonl"
    boxes = [[0, 0, 4, 4], [10, 2, 12, 9]]
    _write_lines(path, [{
        "image_id": "im0", "W": 64, "H": 48, "phrase_id": "p0",
        "phrase_text": "two things", "feature_row": 0, "gt_boxes": boxes,
    }])
    rec = load_annotations(path)[0]
    expected = union_box([BBox(*b) for b in boxes])
    from cite.sampling import PhraseSample
    sample = PhraseSample("p0", "im0", rec["gt_boxes"], 0)
    assert sample.gt_union == expected


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synth_noiseless_oracle_is_one():
    from cite.evaluation import oracle_upper_bound
    cfg = SynthConfig(images=16, noise_sigma=0.0, jitter=0.0, seed=3,
                      regions_per_image=4, phrases_per_image=2,
                      proposals_per_image=6, d_v=8, d_t=8)
    ds = gen_synthetic(cfg)
    for split in ("train", "val", "test"):
        assert oracle_upper_bound(ds, split) == 1.0


def test_synth_single_concept_kmeans_recovers_center():
    cfg = SynthConfig(concepts=1, images=80, regions_per_image=4,
                      phrases_per_image=2, proposals_per_image=6,
                      d_v=8, d_t=8, seed=5, instance_scale=0.2)
    ds = gen_synthetic(cfg)
    samples = ds.split_phrases("train")
    x = phrase_rows(ds, samples)
    model = kmeans_fit(x, 1, seed=0)
    # the lone center sits within noise scale of the concept prototype
    assert np.linalg.norm(model.centers[0] - x.mean(axis=0)) < 1e-9
    spread = np.linalg.norm(x - x.mean(axis=0), axis=1).mean()
    assert spread < 3 * (cfg.instance_scale + cfg.noise_sigma) * np.sqrt(cfg.d_t)


def test_synth_concepts_balanced():
    ds = gen_synthetic(SynthConfig(images=64, seed=0, d_v=8, d_t=8,
                                   regions_per_image=6, phrases_per_image=4,
                                   proposals_per_image=8))
    labels = [s.concept_label for s in ds.phrases]
    counts = np.bincount(labels, minlength=4)
    freqs = counts / counts.sum()
    assert np.all(np.abs(freqs - 0.25) <= 0.025)


def test_synth_deterministic_byte_identical(tmp_path):
    cfg = SynthConfig(images=16, seed=9, d_v=8, d_t=8, regions_per_image=4,
                      phrases_per_image=2, proposals_per_image=6)
    for sub in ("a", "b"):
        save_dataset(gen_synthetic(cfg), tmp_path / sub)
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes(), name


def test_synth_round_trip_through_disk(tmp_path, tiny_synth):
    save_dataset(tiny_synth, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded.phrases) == len(tiny_synth.phrases)
    assert loaded.region_features.matrix.tobytes() == \
        tiny_synth.region_features.matrix.tobytes()
    assert sorted(loaded.images) == sorted(tiny_synth.images)
    for pid in list(loaded.images)[:3]:
        np.testing.assert_array_equal(loaded.images[pid].boxes,
                                      tiny_synth.images[pid].boxes)
    loaded.validate()


def test_synth_split_sizes():
    ds = gen_synthetic(SynthConfig(images=800, d_v=4, d_t=4,
                                   regions_per_image=4, phrases_per_image=2,
                                   proposals_per_image=4, seed=1))
    counts = {s: len(ds.split_images(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 600, "val": 100, "test": 100}


def test_synth_spatial_bias_predicts_concept():
    # with the bias on, a depth-1 stump on the 5-d encoding beats chance
    cfg = SynthConfig(images=48, seed=2, spatial_bias=True, d_v=8, d_t=8,
                      regions_per_image=4, phrases_per_image=4,
                      proposals_per_image=6)
    ds = gen_synthetic(cfg)
    encs, labels = [], []
    from cite.geometry import encode_spatial_flickr
    for s in ds.phrases:
        encs.append(encode_spatial_flickr(s.gt_union, ds.images[s.image_id].size))
        labels.append(s.concept_label)
    encs = np.stack(encs)
    labels = np.asarray(labels)
    chance = max(np.bincount(labels)) / len(labels)
    best = 0.0
    for dim in range(encs.shape[1]):
        for thr in np.quantile(encs[:, dim], [0.25, 0.5, 0.75]):
            left = labels[encs[:, dim] <= thr]
            right = labels[encs[:, dim] > thr]
            if len(left) == 0 or len(right) == 0:
                continue
            acc = (np.sum(left == np.bincount(left).argmax())
                   + np.sum(right == np.bincount(right).argmax())) / len(labels)
            best = max(best, acc)
    assert best > chance + 0.05


def test_region_inputs_appends_spatial(tiny_synth):
    image_id = next(iter(tiny_synth.images))
    plain = region_inputs(tiny_synth, image_id, "none")
    flickr = region_inputs(tiny_synth, image_id, "flickr")
    referit = region_inputs(tiny_synth, image_id, "referit")
    assert flickr.shape[1] == plain.shape[1] + 5
    assert referit.shape[1] == plain.shape[1] + 8
    np.testing.assert_array_equal(flickr[:, :plain.shape[1]], plain)
    d_v, d_t = model_input_dims(tiny_synth, "flickr")
    assert d_v == plain.shape[1] + 5
    assert d_t == tiny_synth.phrase_features.dim


def test_dataset_integrity_validation(tiny_synth):
    broken = dataclasses.replace(tiny_synth)
    broken.phrases = list(tiny_synth.phrases)
    bad = dataclasses.replace(tiny_synth.phrases[0])
    bad.phrase_id = "rogue"
    bad.image_id = "no-such-image"
    broken.phrases.append(bad)
    with pytest.raises(DataError, match="unknown image"):
        broken.validate()


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_preset_flickr30k():
    cfg = build_config("flickr30k")
    assert cfg.train.learning_rate == 5e-5
    assert cfg.train.l1_weight == 5e-5
    assert cfg.train.batch_size == 200
    assert cfg.spatial == "flickr"


def test_preset_referit():
    cfg = build_config("referit")
    assert cfg.train.learning_rate == 5e-4
    assert cfg.train.l1_weight == 5e-4
    assert cfg.train.batch_size == 128
    assert cfg.spatial == "referit"


def test_preset_vgenome():
    cfg = build_config("vgenome")
    assert cfg.train.learning_rate == 5e-5
    assert cfg.train.l1_weight == 5e-4
    assert cfg.train.batch_size == 128


def test_config_override_batch_size(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "flickr30k",
                                "train": {"batch_size": 64}}))
    cfg = load_config(path)
    assert cfg.train.batch_size == 64
    assert cfg.train.learning_rate == 5e-5


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "synth", "train": {"bogus": 1}}))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(path)


def test_config_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        build_config("imagenet")


def test_config_type_mismatch(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"batch_size": "many"}}))
    with pytest.raises(ConfigError, match="integer"):
        load_config(path)


def test_set_override():
    from cite.config import apply_set_override
    cfg = build_config("synth")
    apply_set_override(cfg, "train.batch_size=64")
    assert cfg.train.batch_size == 64
    apply_set_override(cfg, "l1_weight=0.001")
    assert cfg.train.l1_weight == 0.001
    with pytest.raises(ConfigError, match="ambiguous"):
        apply_set_override(cfg, "seed=3")
    with pytest.raises(ConfigError):
        apply_set_override(cfg, "no_such_key=1")
