from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from midvcl.errors import DatasetError, InvalidInputError, MissingMaskError
from midvcl.shapes import (
    CORRUPTION_LADDERS,
    SHAPE_FAMILY,
    CueConflictStimulus,
    SilhouetteMask,
    aligned_iou,
    classify_texture,
    corrupt,
    load_dataset,
    make_cue_conflict,
    make_shape_texture_dataset,
    random_pose,
    render_mask,
    texture_templates,
    write_dataset,
)


def test_dataset_counts_and_splits():
    samples = make_shape_texture_dataset(0, 4, 4, 10)
    assert len(samples) == 160
    cells = Counter((x.shape_label, x.texture_label) for x in samples)
    assert set(cells.values()) == {10} and len(cells) == 16
    train = Counter((x.shape_label, x.texture_label) for x in samples if x.split == "train")
    assert set(train.values()) == {8}


def test_masks_are_the_rendered_regions():
    samples = make_shape_texture_dataset(3, 3, 2, 4, 28, 30)
    for x in samples:
        s, t, k = x.shape_label, x.texture_label, int(x.name.split("_")[-1])
        # replay the renderer's generator for this sample
        rng = np.random.default_rng([3, s, t, k])
        pose = random_pose(rng, 28, 30)
        assert np.array_equal(x.silhouette.mask, render_mask(s, pose, 28, 30))
        assert x.image.shape == (28, 30, 3)
        assert 0.0 <= x.image.min() and x.image.max() <= 1.0


def test_dataset_is_deterministic():
    a = make_shape_texture_dataset(5, 2, 2, 3)
    b = make_shape_texture_dataset(5, 2, 2, 3)
    for x, y in zip(a, b):
        assert x.name == y.name and x.split == y.split
        assert np.array_equal(x.image, y.image) and np.array_equal(x.silhouette.mask, y.silhouette.mask)


def test_dataset_rejects_bad_sizes():
    with pytest.raises(InvalidInputError):
        make_shape_texture_dataset(0, 1, 4, 2)
    with pytest.raises(InvalidInputError):
        make_shape_texture_dataset(0, len(SHAPE_FAMILY) + 1, 2, 2)
    with pytest.raises(InvalidInputError):
        make_shape_texture_dataset(0, 2, 99, 2)


def test_same_shape_class_masks_align():
    a = make_shape_texture_dataset(0, 4, 2, 2, 64, 64)
    b = make_shape_texture_dataset(1, 4, 2, 2, 64, 64)
    for s in range(4):
        ma = next(x for x in a if x.shape_label == s).silhouette.mask
        mb = next(x for x in b if x.shape_label == s).silhouette.mask
        assert aligned_iou(ma, mb) >= 0.7


def test_silhouette_validation():
    with pytest.raises(DatasetError):
        SilhouetteMask(np.zeros((10, 10), dtype=np.uint8))
    with pytest.raises(InvalidInputError):
        SilhouetteMask(np.full((10, 10), 2))
    m = np.zeros((10, 10), dtype=np.uint8)
    m[:5] = 1
    assert SilhouetteMask(m).foreground_fraction == 0.5


def test_load_dataset_round_trip(tmp_path):
    samples = make_shape_texture_dataset(0, 2, 2, 3)[:10]
    write_dataset(tmp_path, samples)
    back = load_dataset(tmp_path)
    assert [x.name for x in back] == [x.name for x in samples]
    for x, y in zip(samples, back):
        assert set(np.unique(y.silhouette.mask)) <= {0, 1}
        assert np.array_equal(x.silhouette.mask, y.silhouette.mask)
        assert np.max(np.abs(x.image - y.image)) <= 0.5 / 255 + 1e-12
        assert (x.shape_label, x.texture_label, x.split) == (y.shape_label, y.texture_label, y.split)


def test_missing_mask_names_file(tmp_path):
    samples = make_shape_texture_dataset(0, 2, 2, 1)
    write_dataset(tmp_path, samples)
    gone = tmp_path / "masks" / f"{samples[2].name}.png"
    gone.unlink()
    with pytest.raises(MissingMaskError, match=samples[2].name):
        load_dataset(tmp_path)
    relaxed = load_dataset(tmp_path, require_masks=False)
    assert relaxed[2].silhouette is None and relaxed[0].silhouette is not None


def test_mask_binarised_at_half(tmp_path):
    samples = make_shape_texture_dataset(0, 2, 2, 1)[:1]
    write_dataset(tmp_path, samples)
    raw = np.zeros((32, 32), dtype=np.uint8)
    raw[:8] = 255
    raw[8:16] = 128
    Image.fromarray(raw).save(tmp_path / "masks" / f"{samples[0].name}.png")
    mask = load_dataset(tmp_path)[0].silhouette.mask
    assert mask[:16].min() == 1 and mask[16:].max() == 0


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    samples = make_shape_texture_dataset(0, 2, 2, 1)[:1]
    write_dataset(tmp_path, samples)
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8) + 255 * (np.arange(16) < 8)[:, None].astype(np.uint8)).save(
        tmp_path / "masks" / f"{samples[0].name}.png")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


# -- cue conflict ------------------------------------------------------------

def test_cue_conflict_labels_and_determinism():
    samples = make_shape_texture_dataset(0, 4, 4, 4)
    stim = make_cue_conflict(1, samples, 50)
    assert len(stim) == 50
    assert all(s.shape_label != s.texture_label for s in stim)
    again = make_cue_conflict(1, samples, 50)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(stim, again))
    # balanced over the 12 off-diagonal pairs
    counts = Counter((s.shape_label, s.texture_label) for s in stim)
    assert len(counts) == 12 and max(counts.values()) - min(counts.values()) <= 1


def test_cue_conflict_texture_matches_texture_class():
    samples = make_shape_texture_dataset(0, 4, 4, 10)
    templates = texture_templates(samples)
    stim = make_cue_conflict(2, samples, 80)
    hits = [classify_texture(s.image, s.mask, templates) == s.texture_label for s in stim]
    wrong_shape = [classify_texture(s.image, s.mask, templates) == s.shape_label for s in stim]
    assert np.mean(hits) >= 0.9
    assert np.mean(wrong_shape) <= 0.1


def test_cue_conflict_needs_two_classes():
    samples = [x for x in make_shape_texture_dataset(0, 2, 2, 2) if x.shape_label == 0]
    with pytest.raises(InvalidInputError):
        make_cue_conflict(0, samples, 5)
    with pytest.raises(InvalidInputError):
        CueConflictStimulus(np.zeros((4, 4, 3)), np.zeros((4, 4)), 1, 1)


# -- corruptions -------------------------------------------------------------

def test_contrast_ladder_entry():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(8, 8, 3))
    assert np.allclose(corrupt(img, "contrast", 1), 0.5 + 0.75 * (img - 0.5), atol=1e-15)


@pytest.mark.parametrize("severity", range(1, 6))
def test_grayscale_channels_equal(severity):
    img = np.random.default_rng(severity).uniform(size=(8, 8, 3))
    out = corrupt(img, "grayscale", severity)
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])


@pytest.mark.parametrize("severity", range(1, 6))
def test_noise_std_follows_ladder(severity):
    img = np.full((100, 100, 1), 0.5)
    out = corrupt(img, "noise", severity, seed=3)
    sigma = CORRUPTION_LADDERS["noise"][severity - 1]
    assert abs((out - img).std() - sigma) <= 0.05 * sigma


def test_corrupt_rejects_bad_arguments():
    img = np.zeros((8, 8, 3))
    with pytest.raises(InvalidInputError):
        corrupt(img, "contrast", 0)
    with pytest.raises(InvalidInputError):
        corrupt(img, "contrast", 6)
    with pytest.raises(InvalidInputError):
        corrupt(img, "fog", 1)


def test_noise_deterministic_per_seed():
    img = np.full((8, 8, 3), 0.5)
    assert np.array_equal(corrupt(img, "noise", 3, seed=1), corrupt(img, "noise", 3, seed=1))
    assert not np.array_equal(corrupt(img, "noise", 3, seed=1), corrupt(img, "noise", 3, seed=2))


@given(st.integers(0, 1000), st.sampled_from(list(CORRUPTION_LADDERS) + ["identity"]), st.integers(1, 5))
def test_corruptions_keep_shape_and_range(seed, kind, severity):
    img = np.random.default_rng(seed).uniform(size=(9, 7, 3))
    out = corrupt(img, kind, severity, seed=seed)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
