import numpy as np
import pytest

from seatlab.synthdata import (SceneSpec, dataset_split, default_appearances,
                               generate_scene, read_manifest, read_pgm, read_ppm,
                               write_manifest, write_pgm, write_ppm)


@pytest.fixture(scope="module")
def spec():
    return SceneSpec.default()


def test_same_seed_shares_geometry_not_appearance(spec):
    for seed in (0, 3, 17):
        src = generate_scene(seed, "source", spec)
        trg = generate_scene(seed, "target", spec)
        np.testing.assert_array_equal(src.label, trg.label)
        assert not np.allclose(src.image, trg.image)


def test_images_clamped_to_unit_range(spec):
    for seed in range(30):
        for domain in ("source", "target"):
            b = generate_scene(seed, domain, spec)
            assert b.image.min() >= 0.0 and b.image.max() <= 1.0
            assert b.image.shape == (3, spec.image_size, spec.image_size)


def test_labels_only_valid_values(spec):
    for seed in range(30):
        vals = set(np.unique(generate_scene(seed, "source", spec).label).tolist())
        assert vals <= set(range(spec.num_classes)) | {255}


def test_every_class_at_least_one_percent(spec):
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    total = 0
    for seed in range(1000):
        lab = generate_scene(seed, "source", spec).label
        lab = lab[lab != 255]
        counts += np.bincount(lab, minlength=spec.num_classes)
        total += lab.size
    assert (counts / total >= 0.01).all(), counts / total


def test_generation_is_deterministic(spec):
    a = generate_scene(11, "target", spec)
    b = generate_scene(11, "target", spec)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)


def test_rejects_bad_inputs(spec):
    with pytest.raises(ValueError, match="classes"):
        generate_scene(0, "source", SceneSpec.default(num_classes=1))
    with pytest.raises(ValueError, match="domain"):
        generate_scene(0, "middle", spec)


def test_style_transfer_source_keeps_geometry():
    plain = SceneSpec.default()
    styled = SceneSpec.default(style_transfer_source=True)
    a = generate_scene(5, "source", plain)
    b = generate_scene(5, "source", styled)
    np.testing.assert_array_equal(a.label, b.label)
    assert not np.allclose(a.image, b.image)


def test_appearance_shift_zero_collapses_palettes():
    src, trg = default_appearances(5, shift=0.0)
    np.testing.assert_array_equal(np.asarray(src.palette), np.asarray(trg.palette))
    assert trg.contrast == 1.0 and trg.brightness == 0.0


def test_dataset_split_sizes_and_label_withholding(spec):
    splits = dataset_split(spec, 12, 10, 4, seed=2)
    assert len(splits.train_src) == 12
    assert len(splits.train_trg) == 10
    assert len(splits.eval_trg) == 4
    assert all(b.label is not None for b in splits.train_src)
    assert all(b.label is None for b in splits.train_trg)
    assert all(b.label is not None for b in splits.eval_trg)
    assert all(b.domain == "source" for b in splits.train_src)
    assert all(b.domain == "target" for b in splits.train_trg + splits.eval_trg)


def test_dataset_split_regeneration_bitwise(spec):
    a = dataset_split(spec, 3, 3, 3, seed=9)
    b = dataset_split(spec, 3, 3, 3, seed=9)
    for ba, bb in zip(a.eval_trg, b.eval_trg):
        np.testing.assert_array_equal(ba.image, bb.image)
        np.testing.assert_array_equal(ba.label, bb.label)


def test_dataset_split_rejects_zero_counts(spec):
    with pytest.raises(ValueError, match="n_train_trg"):
        dataset_split(spec, 3, 0, 3)


def test_ppm_round_trip(tmp_path, spec):
    b = generate_scene(4, "source", spec)
    path = tmp_path / "img.ppm"
    write_ppm(path, b.image)
    back = read_ppm(path)
    assert back.shape == b.image.shape
    # quantized to 8 bits on disk
    assert np.abs(back - b.image).max() <= 0.5 / 255 + 1e-12
    write_ppm(tmp_path / "img2.ppm", back)
    assert (tmp_path / "img.ppm").read_bytes() == (tmp_path / "img2.ppm").read_bytes()


def test_pgm_round_trip_exact(tmp_path, spec):
    lab = generate_scene(4, "source", spec).label
    path = tmp_path / "lab.pgm"
    write_pgm(path, lab)
    np.testing.assert_array_equal(read_pgm(path), lab)


def test_manifest_round_trip(tmp_path):
    records = [("a.ppm", "a.pgm", "source"), ("b.ppm", None, "target")]
    path = tmp_path / "manifest.txt"
    write_manifest(path, records)
    assert read_manifest(path) == records
