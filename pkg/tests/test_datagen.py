import json

import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from ccda.datagen import (DatasetError, DomainShiftSpec, SceneSpec, generate_domain, generate_pair,
                          read_dataset, render_scene, write_dataset)

SHIFT = DomainShiftSpec(brightness_offset=-0.1, contrast_scale=0.7, hue_rotation=25,
                        noise_stddev=0.03, texture_frequency=4)


def test_identity_shift_deterministic():
    a = generate_domain(SceneSpec(seed=5), DomainShiftSpec(), 4)
    b = generate_domain(SceneSpec(seed=5), DomainShiftSpec(), 4)
    assert a == b


def test_worker_count_does_not_matter():
    a = generate_domain(SceneSpec(seed=2), SHIFT, 6, workers=1)
    b = generate_domain(SceneSpec(seed=2), SHIFT, 6, workers=3)
    assert a == b


def test_sample_is_independent_of_batch_position():
    whole = generate_domain(SceneSpec(seed=4), SHIFT, 6)
    tail = generate_domain(SceneSpec(seed=4), SHIFT, 3, first_index=3)
    assert whole["train"][3:] == tail["train"]


def test_neighbouring_seeds_do_not_share_scenes():
    a = generate_domain(SceneSpec(seed=0), DomainShiftSpec(), 4)["train"]
    b = generate_domain(SceneSpec(seed=1), DomainShiftSpec(), 4)["train"]
    for i in range(3):
        assert not np.array_equal(a[i + 1].labels, b[i].labels)


def test_images_on_unit_grid():
    s = generate_domain(SceneSpec(), SHIFT, 2)["train"][0]
    assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    np.testing.assert_allclose(s.image * 255, np.round(s.image * 255), atol=1e-4)
    assert set(np.unique(s.labels)) <= set(range(5))


def test_no_shapes_means_all_background():
    ds = generate_domain(SceneSpec(num_classes=2, shapes_per_image=(0, 0)), DomainShiftSpec(), 5)
    assert all((s.labels == 0).all() for s in ds["train"])


def test_stride_mismatch_rejected():
    with pytest.raises(ValueError, match="divisible"):
        generate_domain(SceneSpec(image_height=60), DomainShiftSpec(), 1, stride=8)


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(class_frequency_skew=-1),
                                 dict(shapes_per_image=(3, 2)), dict(shape_radius=(0, 4))])
def test_scene_spec_validation(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        generate_domain(SceneSpec(), DomainShiftSpec(), 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.3, 0.3), st.floats(0.3, 1.5), st.floats(-180, 180))
def test_shift_changes_only_image_channels(seed, br, ct, hue):
    spec = SceneSpec(seed=seed)
    src = generate_domain(spec, DomainShiftSpec(), 2)["train"]
    tgt = generate_domain(spec, DomainShiftSpec(brightness_offset=br, contrast_scale=ct, hue_rotation=hue), 2)
    for a, b in zip(src, tgt["train"]):
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.image.shape == b.image.shape


def test_skew_makes_counts_non_increasing():
    spec = SceneSpec(seed=1, class_frequency_skew=1.5)
    ds = generate_domain(spec, DomainShiftSpec(), 500)
    fg = ds.class_pixel_counts()[1:]
    assert all(fg[i] >= fg[i + 1] for i in range(len(fg) - 1)), fg


def test_zero_skew_is_uniform_within_3_sigma():
    # Monte-Carlo: per-class pixel totals over 1000 images vs their common mean.
    spec = SceneSpec(seed=11, class_frequency_skew=0.0)
    per_image = np.array([np.bincount(render_scene(spec, i)[1].ravel(), minlength=5)[1:]
                          for i in range(1000)])
    totals = per_image.sum(axis=0)
    sigma = np.sqrt(len(per_image) * per_image.var(axis=0, ddof=1))
    z = (totals - totals.mean()) / sigma
    assert np.all(np.abs(z) < 3), z


def test_pair_splits_and_shift():
    src, tgt = generate_pair(SceneSpec(seed=0), SHIFT, 4, 2)
    assert list(src.splits) == ["train", "val"] and len(src["val"]) == 2
    assert src.shift.is_identity and tgt.shift == SHIFT
    assert tgt.spec.seed == 1
    assert src["val"][0].id == "000004"


# -- on-disk round trip -------------------------------------------------------

def test_round_trip(tmp_path):
    ds = generate_domain(SceneSpec(seed=7), SHIFT, 3)
    manifest = write_dataset(ds, tmp_path / "d")
    assert read_dataset(manifest) == ds
    assert read_dataset(tmp_path / "d") == ds


def test_withhold_labels(tmp_path):
    ds = generate_domain(SceneSpec(), DomainShiftSpec(), 2)
    back = read_dataset(write_dataset(ds, tmp_path), withhold_labels=True)
    assert all(s.labels is None for s in back["train"])


def test_write_is_byte_identical(tmp_path):
    ds = generate_domain(SceneSpec(seed=9), SHIFT, 2)
    write_dataset(ds, tmp_path / "a")
    write_dataset(ds, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_missing_raster_named(tmp_path):
    manifest = write_dataset(generate_domain(SceneSpec(), DomainShiftSpec(), 2), tmp_path)
    victim = tmp_path / "images" / "train" / "000001.png"
    victim.unlink()
    with pytest.raises(DatasetError) as err:
        read_dataset(manifest)
    assert str(victim) in str(err.value)


def test_label_value_out_of_range(tmp_path):
    manifest = write_dataset(generate_domain(SceneSpec(num_classes=3), DomainShiftSpec(), 1), tmp_path)
    lab = tmp_path / "labels" / "train" / "000000.png"
    arr = np.asarray(Image.open(lab)).copy()
    arr[0, 0] = 3
    Image.fromarray(arr, mode="L").save(lab)
    with pytest.raises(DatasetError) as err:
        read_dataset(manifest)
    assert str(lab) in str(err.value)


def test_ignore_value_allowed(tmp_path):
    manifest = write_dataset(generate_domain(SceneSpec(num_classes=3), DomainShiftSpec(), 1), tmp_path)
    lab = tmp_path / "labels" / "train" / "000000.png"
    arr = np.asarray(Image.open(lab)).copy()
    arr[0, 0] = 255
    Image.fromarray(arr, mode="L").save(lab)
    assert read_dataset(manifest)["train"][0].labels[0, 0] == 255


def test_corrupt_and_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        read_dataset(tmp_path / "nope.json")
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    with pytest.raises(DatasetError) as err:
        read_dataset(bad)
    assert str(bad) in str(err.value)
    bad.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(DatasetError):
        read_dataset(bad)
