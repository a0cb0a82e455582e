import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from app.core.data import (
    BUILDING,
    PALETTE,
    SKY,
    VEGETATION,
    colors_to_labels,
    decode_image,
    dominant_class,
    encode_image,
    gen_toy_pair,
    labels_to_onehot,
    load_pairs,
    make_batch,
    quantize,
    select_fraction,
    semantic_to_colors,
    toy_dataset,
    write_sample_grid,
    write_toy_dataset,
)
from app.core.errors import DataError, ShapeError


def save_rgb(path, rgb):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------- toy scenes

@given(st.integers(min_value=0, max_value=10_000), st.sampled_from([32, 64]))
def test_toy_pairs_are_deterministic(seed, size):
    a, b = gen_toy_pair(seed, size), gen_toy_pair(seed, size)
    for field in ("aerial", "ground", "ground_semantic", "aerial_semantic"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert a.scene_label == b.scene_label and a.id == b.id


@given(st.integers(min_value=0, max_value=10_000))
def test_toy_semantics_are_one_hot(seed):
    sample = gen_toy_pair(seed, 32)
    for onehot in (sample.ground_semantic, sample.aerial_semantic):
        assert set(np.unique(onehot)) <= {0.0, 1.0}
        np.testing.assert_array_equal(onehot.sum(axis=0), 1.0)
    assert sample.aerial.shape == sample.ground.shape == (3, 32, 32)
    assert sample.aerial.min() >= -1.0 and sample.aerial.max() <= 1.0


@pytest.mark.parametrize("seed", range(25))
def test_facades_match_roofs(seed):
    size = 32
    sample = gen_toy_pair(seed, size)
    aerial = quantize(sample.aerial).transpose(1, 2, 0)
    ground = quantize(sample.ground).transpose(1, 2, 0)
    aerial_labels = sample.aerial_semantic.argmax(axis=0)
    ground_labels = sample.ground_semantic.argmax(axis=0)

    cw = size // 4
    roof_row = size // 2
    for j in range(4):
        x = j * cw + 1
        roof = aerial_labels[roof_row, x]
        column = ground_labels[:, x]
        if roof == BUILDING:
            rows = np.flatnonzero(column == BUILDING)
            assert len(rows) > 0
            for y in rows:
                np.testing.assert_array_equal(ground[y, x], aerial[roof_row, x])
        elif roof == VEGETATION:
            assert np.any(column == VEGETATION)
        else:
            assert not np.any(column == BUILDING) and not np.any(column == VEGETATION)
    assert sample.scene_label == dominant_class(ground_labels)


def test_toy_labels_vary_across_seeds():
    labels = {s.scene_label for s in toy_dataset(40, 32, seed=0)}
    assert len(labels) >= 2


def test_unsupported_toy_size():
    with pytest.raises(DataError):
        gen_toy_pair(0, 48)


def test_palette_is_a_bijection(rng):
    labels = rng.integers(0, 4, size=(9, 7))
    colors = semantic_to_colors(labels_to_onehot(labels))
    np.testing.assert_array_equal(colors_to_labels(colors), labels)
    assert len(set(PALETTE.values())) == len(PALETTE)


def test_unknown_colour_reports_its_position():
    rgb = np.tile(np.array(PALETTE[SKY], dtype=np.uint8), (4, 4, 1))
    rgb[2, 3] = (1, 2, 3)
    with pytest.raises(DataError, match=r"\(y=2, x=3\)"):
        colors_to_labels(rgb, source="map.png")


def test_dominant_class_ties_go_low():
    assert dominant_class(np.array([[2, 2, 1, 1]])) == 1


# ---------------------------------------------------------------- codec

def test_endpoints_round_trip_exactly(tmp_path):
    for value in (-1.0, 1.0):
        path = str(tmp_path / f"{value}.png")
        encode_image(np.full((3, 4, 5), value), path)
        np.testing.assert_array_equal(decode_image(path), np.full((3, 4, 5), value))


def test_quantization_bound(tmp_path, rng):
    image = rng.uniform(-1, 1, size=(3, 8, 8))
    path = str(tmp_path / "x.png")
    encode_image(image, path)
    assert np.max(np.abs(decode_image(path) - image)) <= 1 / 127.5


def test_quantize_rounds_half_away_from_zero():
    np.testing.assert_array_equal(quantize(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])


def test_encode_rejects_wrong_channels(tmp_path):
    with pytest.raises(ShapeError):
        encode_image(np.zeros((4, 2, 2)), str(tmp_path / "x.png"))


def test_truncated_file_is_an_error(tmp_path):
    path = str(tmp_path / "x.png")
    encode_image(np.zeros((3, 16, 16)), path)
    with open(path, "rb") as handle:
        data = handle.read()
    with open(path, "wb") as handle:
        handle.write(data[: len(data) // 2])
    with pytest.raises(DataError):
        decode_image(path)


def test_grayscale_file_is_rejected(tmp_path):
    path = str(tmp_path / "gray.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
    with pytest.raises(DataError, match="mode L"):
        decode_image(path)


def test_sample_grid_width(tmp_path):
    path = str(tmp_path / "grid.png")
    write_sample_grid(path, [np.zeros((3, 8, 8))] * 4)
    assert decode_image(path).shape == (3, 8, 32)


# ---------------------------------------------------------------- loading

def test_written_toy_dataset_loads_back(tmp_path):
    root = str(tmp_path / "toy")
    ids = write_toy_dataset(root, 3, 32, seed=5)
    loaded = list(load_pairs(root, size=32))
    assert [s.id for s in loaded] == sorted(ids)
    for original, sample in zip(toy_dataset(3, 32, seed=5), loaded):
        np.testing.assert_array_equal(sample.aerial, original.aerial)
        np.testing.assert_array_equal(sample.ground, original.ground)
        np.testing.assert_array_equal(sample.ground_semantic, original.ground_semantic)
        np.testing.assert_array_equal(sample.aerial_semantic, original.aerial_semantic)
        assert sample.scene_label == original.scene_label


def test_side_by_side_file_gives_two_views(tmp_path):
    root = tmp_path / "data"
    both = np.zeros((64, 128, 3), dtype=np.uint8)
    both[:, 64:] = 255
    save_rgb(str(root / "a.png"), both)
    save_rgb(str(root / "semantic" / "a.png"), np.tile(np.array(PALETTE[SKY], dtype=np.uint8), (64, 64, 1)))
    (sample,) = list(load_pairs(str(root), "side-by-side", size=64))
    np.testing.assert_array_equal(sample.aerial, -1.0)
    np.testing.assert_array_equal(sample.ground, 1.0)
    assert sample.scene_label == SKY and sample.aerial_semantic is None


def test_resize_keeps_a_constant_image(tmp_path):
    root = tmp_path / "data"
    save_rgb(str(root / "pairs" / "a.png"), np.full((64, 128, 3), 77, dtype=np.uint8))
    save_rgb(str(root / "semantic" / "a.png"), np.tile(np.array(PALETTE[BUILDING], dtype=np.uint8), (64, 64, 1)))
    (sample,) = list(load_pairs(str(root), size=32))
    np.testing.assert_array_equal(sample.ground, np.full((3, 32, 32), 77 / 127.5 - 1.0))
    assert sample.ground_semantic.shape == (4, 32, 32)
    np.testing.assert_array_equal(sample.ground_semantic[BUILDING], 1.0)


def test_split_folders_layout(tmp_path):
    root = tmp_path / "data"
    for name in ("b.png", "a.png"):
        save_rgb(str(root / "aerial" / name), np.full((32, 32, 3), 10))
        save_rgb(str(root / "ground" / name), np.full((32, 32, 3), 200))
        save_rgb(str(root / "semantic" / name), np.tile(np.array(PALETTE[SKY], dtype=np.uint8), (32, 32, 1)))
    samples = list(load_pairs(str(root), size=32))
    assert [s.id for s in samples] == ["a", "b"]
    np.testing.assert_array_equal(samples[0].aerial, np.full((3, 32, 32), 10 / 127.5 - 1.0))


def test_empty_directory_is_an_empty_stream(tmp_path):
    assert list(load_pairs(str(tmp_path), size=32)) == []


def test_missing_directory(tmp_path):
    with pytest.raises(DataError, match="not found"):
        list(load_pairs(str(tmp_path / "nope"), size=32))


def test_missing_semantic_twin(tmp_path):
    save_rgb(str(tmp_path / "pairs" / "a.png"), np.zeros((32, 64, 3)))
    with pytest.raises(DataError, match="semantic twin"):
        list(load_pairs(str(tmp_path), size=32))


def test_unknown_palette_colour_in_a_map(tmp_path):
    save_rgb(str(tmp_path / "pairs" / "a.png"), np.zeros((32, 64, 3)))
    bad = np.tile(np.array(PALETTE[SKY], dtype=np.uint8), (32, 32, 1))
    bad[5, 6] = (0, 0, 0)
    save_rgb(str(tmp_path / "semantic" / "a.png"), bad)
    with pytest.raises(DataError, match=r"y=5, x=6"):
        list(load_pairs(str(tmp_path), size=32))


def test_side_by_side_needs_double_width(tmp_path):
    save_rgb(str(tmp_path / "pairs" / "a.png"), np.zeros((32, 32, 3)))
    with pytest.raises(DataError, match="2W x H"):
        list(load_pairs(str(tmp_path), size=32))


# ---------------------------------------------------------------- subsets and batches

def test_select_fraction(toy_samples):
    subset = select_fraction(toy_samples, 0.5, seed=1)
    assert len(subset) == 2
    ids = [s.id for s in toy_samples]
    positions = [ids.index(s.id) for s in subset]
    assert positions == sorted(positions)
    assert [s.id for s in select_fraction(toy_samples, 0.5, seed=1)] == [s.id for s in subset]
    assert len(select_fraction(toy_samples, 0.01)) == 1
    with pytest.raises(ValueError):
        select_fraction(toy_samples, 0.0)


def test_make_batch_directions(toy_samples):
    a2g = make_batch(toy_samples[:2])
    assert a2g.source.shape == a2g.target.shape == (2, 3, 32, 32)
    assert a2g.semantic.shape == (2, 4, 32, 32)
    assert set(np.unique(a2g.semantic)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(a2g.source[0], toy_samples[0].aerial)

    g2a = make_batch(toy_samples[:2], "g2a")
    np.testing.assert_array_equal(g2a.source, a2g.target)
    np.testing.assert_array_equal(g2a.target, a2g.source)
    assert g2a.ids == a2g.ids == (toy_samples[0].id, toy_samples[1].id)


def test_make_batch_errors(toy_samples):
    with pytest.raises(DataError):
        make_batch([])
    without = [s.__class__(s.id, s.aerial, s.ground, s.ground_semantic, s.scene_label) for s in toy_samples[:1]]
    with pytest.raises(DataError, match="aerial semantic"):
        make_batch(without, "g2a")
