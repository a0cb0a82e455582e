import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from app.core.attention import AttentionModule, attention_refine, channel_attention, spatial_attention
from app.core.errors import ShapeError
from app.core.functional import channel_max, channel_mean


def random_module(seed: int, channels: int = 8, reduction: int = 4) -> AttentionModule:
    return AttentionModule.create(np.random.default_rng(seed), channels, reduction, init_std=0.5)


def test_zero_module_gates_are_one_half(rng):
    m = AttentionModule.zeros(8)
    f = rng.normal(size=(2, 8, 5, 5))
    np.testing.assert_array_equal(channel_attention(m, f).value, np.full((2, 8, 1, 1), 0.5))
    np.testing.assert_array_equal(spatial_attention(m, f).value, np.full((2, 1, 5, 5), 0.5))


def test_zero_module_scales_by_a_quarter(rng):
    f = rng.normal(size=(2, 8, 5, 5))
    np.testing.assert_array_equal(attention_refine(AttentionModule.zeros(8), f).value, 0.25 * f)


def test_zero_features_stay_zero():
    out = attention_refine(random_module(0), np.zeros((1, 8, 4, 4)))
    np.testing.assert_array_equal(out.value, 0.0)


def test_constant_features_use_both_paths_equally():
    m = random_module(1)
    v = np.random.default_rng(2).normal(size=8)
    f = np.broadcast_to(v[None, :, None, None], (1, 8, 3, 3)).copy()

    w1 = m.fc1_weight.value[:, :, 0, 0]
    w2 = m.fc2_weight.value[:, :, 0, 0]
    mlp = w2 @ np.maximum(w1 @ v + m.fc1_bias.value, 0.0) + m.fc2_bias.value
    expected = expit(2.0 * mlp)
    assert np.max(np.abs(channel_attention(m, f).value.reshape(8) - expected)) <= 1e-12


def test_channel_pooling_is_permutation_invariant(rng):
    f = rng.normal(size=(2, 6, 4, 4))
    shuffled = f[:, rng.permutation(6)]
    np.testing.assert_array_equal(channel_max(f).value, channel_max(shuffled).value)
    assert np.max(np.abs(channel_mean(f).value - channel_mean(shuffled).value)) <= 1e-12


@given(st.integers(min_value=0, max_value=2**16), st.sampled_from([(4, 1), (8, 2), (8, 4), (12, 3)]))
def test_gates_are_bounded_and_shape_is_kept(seed, shape):
    channels, reduction = shape
    rng = np.random.default_rng(seed)
    m = AttentionModule.create(rng, channels, reduction, init_std=0.5)
    f = rng.normal(size=(2, channels, 4, 6))

    mc = channel_attention(m, f).value
    ms = spatial_attention(m, f).value
    assert np.all((mc > 0) & (mc < 1)) and np.all((ms > 0) & (ms < 1))
    out = attention_refine(m, f).value
    assert out.shape == f.shape
    assert np.all(np.abs(out) <= np.abs(f))


def test_ten_thousand_gates_lie_strictly_inside_the_unit_interval():
    values = []
    for seed in range(40):
        rng = np.random.default_rng(seed)
        m = AttentionModule.create(rng, 8, 2, init_std=1.0)
        f = rng.normal(scale=3.0, size=(4, 8, 8, 8))
        values.append(channel_attention(m, f).value.ravel())
        values.append(spatial_attention(m, f).value.ravel())
    gates = np.concatenate(values)
    assert gates.size >= 10_000
    assert np.all(gates > 0) and np.all(gates < 1)


def test_saturated_logits_keep_gates_open():
    m = AttentionModule.zeros(4, 2)
    m.fc2_bias.value = np.array([60.0, -60.0, 800.0, -800.0])
    m.spatial_bias.value = np.array([-800.0])
    f = np.ones((1, 4, 5, 5))
    mc = channel_attention(m, f).value
    ms = spatial_attention(m, f).value
    assert np.all((mc > 0) & (mc < 1))
    assert np.all((ms > 0) & (ms < 1))
    assert mc[0, 0, 0, 0] == pytest.approx(1.0) and mc[0, 3, 0, 0] == pytest.approx(0.0)


def test_gate_order_matters(rng):
    m = random_module(3)
    f = rng.normal(size=(1, 8, 6, 6))
    channel_first = attention_refine(m, f).value
    spatial_first_inner = spatial_attention(m, f).value * f
    spatial_first = channel_attention(m, spatial_first_inner).value * spatial_first_inner
    assert not np.allclose(channel_first, spatial_first)


def test_reduction_must_divide_channels(rng):
    with pytest.raises(ShapeError, match="r=4"):
        AttentionModule.create(rng, 6, 4)


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        channel_attention(AttentionModule.zeros(8), rng.normal(size=(1, 4, 3, 3)))


def test_parameter_count():
    m = AttentionModule.zeros(8, reduction=4)
    assert m.reduction == 4
    assert m.parameter_count() == (2 * 8 + 2) + (8 * 2 + 8) + (2 * 49 + 1)
