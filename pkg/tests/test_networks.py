import numpy as np
import pytest

from app.core.errors import CheckpointError, ShapeError
from app.core.functional import concat_channels
from app.core.models import DiscriminatorConfig, GeneratorConfig
from app.core.networks import (
    CrossViewModel,
    DiscriminatorWeights,
    GeneratorWeights,
    discriminate,
    generator_forward,
    stage2,
)
from app.core.tensor import no_grad
from tests.conftest import tiny_config


def small_inputs(config, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    aerial = rng.uniform(-1, 1, size=(batch, 3, config.size, config.size))
    labels = rng.integers(0, config.semantic_classes, size=(batch, config.size, config.size))
    semantic = np.where(np.eye(config.semantic_classes)[labels].transpose(0, 3, 1, 2) > 0, 1.0, -1.0)
    return aerial, semantic


def test_generator_shapes_and_range(rng):
    g = GeneratorWeights.create(GeneratorConfig(in_channels=6, out_channels=3, depth=3, base_channels=8, feature_channels=64), rng)
    out, feature = generator_forward(g, rng.normal(size=(1, 6, 32, 32)))
    assert out.shape == (1, 3, 32, 32)
    assert feature.shape == (1, 64, 32, 32)
    assert np.all(np.abs(out.value) <= 1.0)


def test_generator_divisibility(rng):
    g = GeneratorWeights.create(GeneratorConfig(in_channels=3, out_channels=3, depth=2, base_channels=4, feature_channels=4), rng)
    with pytest.raises(ShapeError, match="divisible"):
        generator_forward(g, np.zeros((1, 3, 30, 32)))


def test_generator_channel_mismatch(rng):
    g = GeneratorWeights.create(GeneratorConfig(in_channels=3, out_channels=3, depth=1, base_channels=4, feature_channels=4), rng)
    with pytest.raises(ShapeError, match="C=4"):
        generator_forward(g, np.zeros((1, 4, 8, 8)))


@pytest.mark.parametrize("placement", ["first", "first_and_last"])
def test_zero_offset_deform_matches_plain_generator(placement):
    x = np.random.default_rng(5).normal(size=(2, 5, 16, 16))
    outputs = []
    for use_deform in (False, True):
        config = GeneratorConfig(in_channels=5, out_channels=3, depth=2, base_channels=4, feature_channels=8,
                                 use_deform=use_deform, deform_placement=placement)
        g = GeneratorWeights.create(config, np.random.default_rng(7))
        outputs.append(generator_forward(g, x))
    (plain, plain_feature), (deformed, deformed_feature) = outputs
    assert np.max(np.abs(plain.value - deformed.value)) <= 1e-12
    assert np.max(np.abs(plain_feature.value - deformed_feature.value)) <= 1e-12


def test_deform_layer_names(rng):
    config = GeneratorConfig(in_channels=3, out_channels=3, depth=1, base_channels=4, feature_channels=4,
                             use_deform=True, deform_placement="first_and_last")
    names = GeneratorWeights.create(config, rng).named_parameters("Gi.")
    assert "Gi.enc0.deform.offset.weight" in names and "Gi.head.deform.weight" in names
    assert "Gi.enc0.conv.weight" not in names


def test_discriminator_patch_map(rng):
    d = DiscriminatorWeights.create(DiscriminatorConfig(in_channels=6, base_channels=4, n_layers=3), rng)
    p = discriminate(d, rng.normal(size=(2, 3, 64, 64)), rng.normal(size=(2, 3, 64, 64)))
    assert p.shape == (2, 1, 8, 8)
    assert np.all((p.value > 0) & (p.value < 1))


def test_zeroed_discriminator_outputs_one_half(rng):
    d = DiscriminatorWeights.create(DiscriminatorConfig(in_channels=6, base_channels=4, n_layers=2), rng)
    d.zero_output_layer()
    np.testing.assert_array_equal(discriminate(d, rng.normal(size=(1, 3, 16, 16)), rng.normal(size=(1, 3, 16, 16))).value, 0.5)


def test_discriminator_channel_mismatch(rng):
    d = DiscriminatorWeights.create(DiscriminatorConfig(in_channels=6, base_channels=4, n_layers=2), rng)
    with pytest.raises(ShapeError, match="C=6"):
        discriminate(d, np.zeros((1, 3, 16, 16)), np.zeros((1, 4, 16, 16)))


def test_stage_shapes():
    config = tiny_config()
    model = CrossViewModel(config)
    aerial, semantic = small_inputs(config)
    with no_grad():
        first = model.stage1(aerial, semantic)
        second = model.stage2(aerial, first)
    assert first.image.shape == (2, 3, 32, 32)
    assert first.semantic.shape == (2, 4, 32, 32)
    assert first.image_features.shape == first.semantic_features.shape == (2, 8, 32, 32)
    assert second.image.shape == (2, 3, 32, 32) and second.semantic.shape == (2, 4, 32, 32)
    assert model.ga.config.in_channels == 3 + 3 + 2 * 8


def test_semantic_generator_is_shared_between_stages():
    config = tiny_config()
    model = CrossViewModel(config)
    aerial, semantic = small_inputs(config)
    first = model.stage1(aerial, semantic)
    second = model.stage2(aerial, first)
    second.semantic.sum().backward()

    gs = model.gs.named_parameters()
    assert all(p.grad is not None for p in gs.values())
    params = model.generator_parameters()
    assert all(params[f"Gs.{name}"] is p for name, p in gs.items())


def test_attention_off_passes_features_through():
    config = tiny_config(ablation="A")
    model = CrossViewModel(config)
    assert model.am_image is None and model.am_semantic is None and model.d2 is None
    aerial, semantic = small_inputs(config)
    with no_grad():
        first = model.stage1(aerial, semantic)
        second = stage2(model.ga, model.gs, None, None, aerial, first.image, first.image_features, first.semantic_features)
        direct, _ = generator_forward(model.ga, concat_channels([aerial, first.image, first.image_features, first.semantic_features]))
    np.testing.assert_array_equal(second.image.value, direct.value)


def test_parameter_deltas_follow_the_toggles():
    counts = {ablation: CrossViewModel(tiny_config(ablation=ablation)).parameter_counts() for ablation in "ABCD"}
    assert counts["B"]["total"] - counts["A"]["total"] == counts["B"]["AMi"] + counts["B"]["AMs"]
    assert counts["C"]["total"] - counts["B"]["total"] == counts["C"]["offsets"]
    assert counts["D"]["total"] - counts["C"]["total"] == counts["D"]["D2"]
    feats, taps = 8, 18
    assert counts["C"]["offsets"] == sum(taps * cin * 9 + taps for cin in (3 + 4, 3, 6 + 2 * feats))


def test_components_are_seeded_independently():
    a = CrossViewModel(tiny_config(ablation="A")).state_dict()
    d = CrossViewModel(tiny_config(ablation="D")).state_dict()
    for name in ("Gi.down1.conv.weight", "Gs.up1.conv.weight", "D1.out.conv.weight"):
        np.testing.assert_array_equal(a[name], d[name])


def test_state_dict_round_trip():
    config = tiny_config()
    source = CrossViewModel(config)
    target = CrossViewModel(tiny_config(seed=9))
    target.load_state_dict(source.state_dict())
    aerial, semantic = small_inputs(config)
    with no_grad():
        np.testing.assert_array_equal(source.stage1(aerial, semantic).image.value, target.stage1(aerial, semantic).image.value)


def test_state_dict_mismatches():
    model = CrossViewModel(tiny_config())
    state = model.state_dict()
    missing = {k: v for k, v in state.items() if k != "D1.out.conv.bias"}
    with pytest.raises(CheckpointError, match="missing"):
        model.load_state_dict(missing)
    reshaped = dict(state, **{"D1.out.conv.bias": np.zeros(2)})
    with pytest.raises(CheckpointError, match="shape"):
        model.load_state_dict(reshaped)
    with pytest.raises(CheckpointError):
        CrossViewModel(tiny_config(ablation="C")).load_state_dict(state)


# ---------------------------------------------------------------- reference forward

def reference_conv(x, w, b, stride=1, padding=0):
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", windows, w) + b[None, :, None, None]


def reference_bn(x, gamma, beta):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    return gamma[None, :, None, None] * (x - mean) / np.sqrt(var + 1e-5) + beta[None, :, None, None]


def reference_generator(g, x):
    p = {name: v.value for name, v in g.named_parameters().items()}
    leaky = lambda v: np.where(v > 0, v, 0.2 * v)
    relu = lambda v: np.maximum(v, 0.0)

    def conv(name, v, stride=1):
        prefix = f"{name}.deform." if f"{name}.deform.weight" in p else f"{name}.conv."
        return reference_conv(v, p[prefix + "weight"], p[prefix + "bias"], stride, 1)

    skips = [leaky(conv("enc0", x))]
    for i in range(1, g.config.depth + 1):
        skips.append(leaky(reference_bn(conv(f"down{i}", skips[-1], 2), p[f"down{i}.bn.gamma"], p[f"down{i}.bn.beta"])))
    u = skips[-1]
    for i in range(g.config.depth, 0, -1):
        up = u.repeat(2, axis=2).repeat(2, axis=3)
        u = relu(reference_bn(conv(f"up{i}", up), p[f"up{i}.bn.gamma"], p[f"up{i}.bn.beta"]))
        u = np.concatenate([u, skips[i - 1]], axis=1)
    feature = relu(reference_bn(conv("feature", u), p["feature.bn.gamma"], p["feature.bn.beta"]))
    return np.tanh(conv("head", feature)), feature


def reference_attention(m, f):
    mlp = lambda v: reference_conv(np.maximum(reference_conv(v, m.fc1_weight.value, m.fc1_bias.value), 0.0),
                                   m.fc2_weight.value, m.fc2_bias.value)
    sigmoid = lambda v: 1.0 / (1.0 + np.exp(-v))
    channel = sigmoid(mlp(f.mean(axis=(2, 3), keepdims=True)) + mlp(f.max(axis=(2, 3), keepdims=True)))
    f1 = channel * f
    pooled = np.concatenate([f1.mean(axis=1, keepdims=True), f1.max(axis=1, keepdims=True)], axis=1)
    return sigmoid(reference_conv(pooled, m.spatial_weight.value, m.spatial_bias.value, padding=3)) * f1


@pytest.mark.parametrize("placement", ["first", "first_and_last"])
def test_two_stage_pipeline_matches_plain_numpy_reference(placement):
    config = tiny_config(seed=42, deform_placement=placement)
    model = CrossViewModel(config)
    aerial, semantic = small_inputs(config, seed=42)
    with no_grad():
        first = model.stage1(aerial, semantic)
        second = model.stage2(aerial, first)

    coarse, fi = reference_generator(model.gi, np.concatenate([aerial, semantic], axis=1))
    coarse_sem, fs = reference_generator(model.gs, coarse)
    refined = np.concatenate(
        [aerial, coarse, reference_attention(model.am_image, fi), reference_attention(model.am_semantic, fs)], axis=1
    )
    fine, _ = reference_generator(model.ga, refined)
    fine_sem, _ = reference_generator(model.gs, fine)

    for actual, expected in ((first.image, coarse), (first.semantic, coarse_sem),
                             (second.image, fine), (second.semantic, fine_sem)):
        assert actual.shape == expected.shape
        assert np.max(np.abs(actual.value - expected)) <= 1e-9
