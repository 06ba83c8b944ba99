import json

import numpy as np
import pytest

from tryonlab import synth


def test_white_background_border_is_white():
    spec = synth.SceneSpec(seed=1, canvas_size=(64, 64), background_mode="white")
    img = synth.render_person(spec)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    assert np.all(border == 1.0)


def test_render_person_deterministic():
    spec = synth.SceneSpec(seed=5, canvas_size=(64, 64),
                           background_mode="natural", texture_seed=9)
    a = synth.render_person(spec)
    b = synth.render_person(spec)
    assert np.array_equal(a, b)


def test_natural_background_has_border_variance():
    spec = synth.SceneSpec(seed=7, canvas_size=(64, 64),
                           background_mode="natural", texture_seed=7)
    img = synth.render_person(spec)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    assert border.var() > 0


def test_render_person_is_achromatic():
    spec = synth.SceneSpec(seed=2, canvas_size=(48, 48),
                           background_mode="natural", texture_seed=4)
    img = synth.render_person(spec)
    assert np.array_equal(img[..., 0], img[..., 1])
    assert np.array_equal(img[..., 1], img[..., 2])


def test_bad_canvas_rejected():
    spec = synth.SceneSpec(seed=1, canvas_size=(62, 64))
    with pytest.raises(synth.ConfigurationError):
        synth.render_person(spec, patch_size=4)


def test_compose_exact_outside_mask(scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(0)
    for cls in synth.CLASSES:
        obj = synth.random_object_spec(rng, cls, lay)
        tryon, mask = synth.compose_tryon(person, obj)
        assert mask.any()
        assert np.array_equal(tryon[~mask], person[~mask])


def test_compose_determinism(scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(1)
    obj = synth.random_object_spec(rng, "hat", lay)
    a, ma = synth.compose_tryon(person, obj)
    b, mb = synth.compose_tryon(person, obj)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)


def test_mask_popcount_matches_alpha_threshold(scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(2)
    obj = synth.random_object_spec(rng, "bag", lay)
    _, alpha = synth.render_glyph(obj, person.shape[:2])
    _, mask = synth.compose_tryon(person, obj)
    assert mask.sum() == (alpha > 0.5).sum()


def test_hat_mask_centroid_in_head_zone(scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(3)
    obj = synth.random_object_spec(rng, "hat", lay)
    _, mask = synth.compose_tryon(person, obj)
    ys, xs = np.nonzero(mask)
    r0, c0, r1, c1 = synth.wearing_zone(lay, "hat")
    assert r0 <= ys.mean() <= r1 and c0 <= xs.mean() <= c1


def test_anchor_validity_all_classes():
    # wide sweep: every random spec's composed-mask centroid stays in-zone
    rng = np.random.default_rng(11)
    spec = synth.SceneSpec(seed=8, canvas_size=(48, 48))
    person = synth.render_person(spec)
    lay = synth.layout_for(spec)
    for cls in synth.CLASSES:
        for _ in range(60):
            obj = synth.random_object_spec(rng, cls, lay)
            _, mask = synth.compose_tryon(person, obj)
            ys, xs = np.nonzero(mask)
            r0, c0, r1, c1 = synth.wearing_zone(lay, cls)
            assert r0 <= ys.mean() <= r1
            assert c0 <= xs.mean() <= c1


def test_anchor_outside_canvas_rejected(scene64):
    _, person, _ = scene64
    obj = synth.ObjectSpec(class_id="hat", anchor=(200.0, 10.0), scale=8.0,
                           color=(0.9, 0.1, 0.1))
    with pytest.raises(synth.CompositionError):
        synth.compose_tryon(person, obj)


def test_oracle_detect_box_matches_mask(scene64):
    _, person, lay = scene64
    rng = np.random.default_rng(4)
    for cls in synth.CLASSES:
        obj = synth.random_object_spec(rng, cls, lay)
        tryon, mask = synth.compose_tryon(person, obj)
        det = synth.oracle_detect(tryon, cls)
        assert det is not None
        assert synth.box_iou(det.box, synth._tight_box(mask)) >= 0.9
        assert det.confidence >= synth.DETECTION_THRESHOLD


def test_oracle_detect_no_object(scene64):
    _, person, _ = scene64
    assert synth.oracle_detect(person, "hat") is None


def test_detector_soundness_sweep():
    # 100% detection at threshold on unoccluded composites
    rng = np.random.default_rng(5)
    hits = total = 0
    for seed in range(3):
        spec = synth.SceneSpec(seed=seed, canvas_size=(64, 64),
                               background_mode="natural", texture_seed=seed)
        person = synth.render_person(spec)
        lay = synth.layout_for(spec)
        for cls in synth.CLASSES:
            for _ in range(10):
                obj = synth.random_object_spec(rng, cls, lay)
                tryon, _ = synth.compose_tryon(person, obj)
                det = synth.oracle_detect(tryon, cls)
                hits += det is not None and det.confidence >= 0.25
                total += 1
    assert hits == total


def test_occluded_glyph_confidence_regression(scene64):
    # half the glyph replaced by person pixels; confidence drops but the
    # detector still responds deterministically
    _, person, lay = scene64
    rng = np.random.default_rng(6)
    obj = synth.random_object_spec(rng, "hat", lay)
    tryon, mask = synth.compose_tryon(person, obj)
    ys, xs = np.nonzero(mask)
    cut = xs >= np.median(xs)
    occluded = tryon.copy()
    occluded[ys[cut], xs[cut]] = person[ys[cut], xs[cut]]
    det_full = synth.oracle_detect(tryon, "hat")
    det_half = synth.oracle_detect(occluded, "hat")
    assert det_half is not None
    assert det_half.confidence < det_full.confidence
    again = synth.oracle_detect(occluded, "hat")
    assert again.confidence == det_half.confidence


def test_prompt_templates():
    assert synth.prompt_for_class("hat") == "trying on hat"
    assert synth.prompt_for_class("top") == "replacing top"
    assert synth.prompt_for_class("shoes") == "replacing shoes"


def test_make_dataset_weights_and_manifest(tmp_path):
    cfg = synth.DatasetConfig(out_dir=tmp_path, n=700, seed=1, canvas=(32, 32),
                              weights=synth.DEFAULT_CLASS_WEIGHTS)
    records = synth.make_dataset(cfg)
    assert len(records) == 700
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert isinstance(manifest, list) and len(manifest) == 700
    rec = manifest[0]
    for key in ("id", "tryon_path", "person_path", "object_path", "mask_path",
                "class", "prompt", "split"):
        assert key in rec
    assert rec["object_path"] is None  # unpaired by default
    # empirical frequency of a weight-4 class within 3 sigma of 4/14
    counts = {c: 0 for c in synth.CLASSES}
    for r in manifest:
        counts[r["class"]] += 1
    p = 4.0 / 14.0
    sigma = np.sqrt(700 * p * (1 - p))
    assert abs(counts["top"] - 700 * p) <= 3 * sigma


def test_make_dataset_exact_counts_and_absence(tmp_path):
    cfg = synth.DatasetConfig(out_dir=tmp_path, n=10, seed=2, canvas=(32, 32),
                              class_counts={"hat": 4, "shoes": 3, "bag": 0})
    records = synth.make_dataset(cfg)
    classes = [r["class"] for r in records]
    assert classes.count("hat") == 4
    assert classes.count("shoes") == 3
    assert "bag" not in classes


def test_make_dataset_zero_weights_error(tmp_path):
    cfg = synth.DatasetConfig(out_dir=tmp_path, n=5,
                              weights={c: 0.0 for c in synth.CLASSES})
    with pytest.raises(synth.ConfigurationError):
        synth.make_dataset(cfg)


def test_dataset_roundtrip_and_mask_encoding(tmp_path):
    cfg = synth.DatasetConfig(out_dir=tmp_path, n=3, seed=3, canvas=(32, 32),
                              paired=True)
    records = synth.make_dataset(cfg)
    triple = synth.load_triple(records[0], tmp_path)
    assert triple.tryon.shape == (32, 32, 3)
    assert triple.object_image is not None
    assert triple.mask.dtype == bool
    from PIL import Image

    raw = np.asarray(Image.open(tmp_path / records[0]["mask_path"]))
    assert raw.ndim == 2
    assert set(np.unique(raw)) <= {0, 255}


def test_worn_object_image_has_chromatic_glyph():
    rng = np.random.default_rng(9)
    spec = synth.SceneSpec(seed=12, canvas_size=(48, 48))
    lay = synth.layout_for(spec)
    obj = synth.random_object_spec(rng, "glasses", lay, background_mode="worn")
    img, mask = synth.render_object_image(obj, (48, 48))
    assert mask.any()
    seg = synth.segment_chromatic(img)
    assert seg is not None and np.array_equal(seg, mask)
