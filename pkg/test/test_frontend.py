import math
import numpy as np
import pytest
from m2former.exc import RecordingTooShortError, ShapeError
from m2former.frontend import (
    ChannelEmbedConfig,
    ChannelEmbedding,
    Cnndd,
    CnnddConfig,
    add_positional,
    channel_embed,
    cnndd_forward,
    stride_schedule,
)
from m2former.signal import AxisMeaning
from m2former.tensor import grad_check
from m2former.utils import make_rng

SMALL_CNNDD = CnnddConfig(layer_channels=[2, 3, 4, 4], d_model=5)


def test_embedding_shape_for_six_microphones():
    embedding = ChannelEmbedding(ChannelEmbedConfig(n_bins=129, dim=256), make_rng(0))
    x = pytest.helpers.microphones(pytest.helpers.random_array((6, 100, 387), seed=1))
    y = channel_embed(x, embedding)
    assert y.data.shape == (6, 100, 256)
    assert y.axis_meaning is AxisMeaning.MICROPHONES


def test_embedding_of_zero_input_with_zero_biases_is_zero():
    embedding = ChannelEmbedding(ChannelEmbedConfig(n_bins=4, dim=6), make_rng(0))
    y = embedding(pytest.helpers.microphones(np.zeros((3, 5, 12))))
    assert np.all(y.data.data == 0.0)


def test_embedding_hand_case():
    embedding = ChannelEmbedding(ChannelEmbedConfig(n_bins=2, dim=3, mag_dim=2, pha_dim=1), make_rng(0))
    embedding.w_mag.weight.assign([[1.0, 0.0], [2.0, -1.0]])
    embedding.w_mag.bias.assign([0.5, 0.0])
    embedding.w_pha.weight.assign([[1.0], [0.0], [-1.0], [2.0]])
    embedding.w_pha.bias.assign([1.0])
    embedding.w_emb.weight.assign([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    embedding.w_emb.bias.assign([0.0, 0.0, -1.0])
    # mag = [1, 2], phase = [1, 0, 0, 1]
    x = np.array([[[1.0, 2.0, 1.0, 0.0, 0.0, 1.0]], [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]])
    y = embedding(pytest.helpers.microphones(x)).data.data
    # mag projection [1 + 4 + 0.5, -2] = [5.5, -2]; phase projection [1 + 2 + 1] = [4]
    np.testing.assert_allclose(y[0, 0], [9.5, 2.0, 2.5], atol=1e-12)
    # zeros map through the biases only: [0.5, 0, 1] W + b
    np.testing.assert_allclose(y[1, 0], [1.5, 1.0, -0.5], atol=1e-12)


def test_embedding_rejects_wrong_feature_dim():
    embedding = ChannelEmbedding(ChannelEmbedConfig(n_bins=4, dim=6), make_rng(0))
    with pytest.raises(ShapeError, match='12'):
        embedding(pytest.helpers.microphones(np.zeros((2, 3, 11))))


def test_embedding_is_microphone_permutation_equivariant():
    embedding = ChannelEmbedding(ChannelEmbedConfig(n_bins=3, dim=4), make_rng(2))
    x = pytest.helpers.random_array((4, 6, 9), seed=3)
    order = [2, 0, 3, 1]
    y = embedding(pytest.helpers.microphones(x)).data.data
    y_perm = embedding(pytest.helpers.microphones(x[order])).data.data
    np.testing.assert_allclose(y_perm, y[order], atol=1e-12)


def test_stride_schedule():
    assert stride_schedule(8) == [(2, 2), (2, 1)] + [(1, 1)] * 6
    assert stride_schedule(1) == [(2, 2)]


def test_cnndd_six_microphones_hundred_frames():
    cnndd = Cnndd(6, 256, CnnddConfig(d_model=256), make_rng(0))
    x = pytest.helpers.microphones(pytest.helpers.random_array((6, 100, 256), seed=4))
    y = cnndd_forward(x, cnndd)
    assert y.data.shape == (40, 25, 256)
    assert y.axis_meaning is AxisMeaning.DECOUPLED
    assert y.frame_rate == pytest.approx(25.0)
    assert CnnddConfig().output_shape(100, 256) == (40, 25, 128)


@pytest.mark.parametrize('frames', range(4, 30))
def test_cnndd_output_frames_are_a_quarter_rounded_up(frames):
    cnndd = Cnndd(2, 6, SMALL_CNNDD, make_rng(0))
    y = cnndd(pytest.helpers.microphones(np.ones((2, frames, 6))))
    assert y.data.shape == (4, math.ceil(frames / 4), 5)


def test_cnndd_of_zero_input_is_zero():
    cnndd = Cnndd(3, 8, SMALL_CNNDD, make_rng(5))
    y = cnndd(pytest.helpers.microphones(np.zeros((3, 9, 8))))
    assert np.all(y.data.data == 0.0)


def test_cnndd_is_not_microphone_permutation_equivariant():
    cnndd = Cnndd(3, 8, SMALL_CNNDD, make_rng(6))
    x = pytest.helpers.random_array((3, 8, 8), seed=7)
    y = cnndd(pytest.helpers.microphones(x)).data.data
    y_swapped = cnndd(pytest.helpers.microphones(x[[1, 0, 2]])).data.data
    assert not np.allclose(y, y_swapped)


def test_cnndd_short_input_names_minimum_frames():
    cnndd = Cnndd(2, 6, SMALL_CNNDD, make_rng(0))
    with pytest.raises(RecordingTooShortError, match='at least 4 frames'):
        cnndd(pytest.helpers.microphones(np.ones((2, 3, 6))))


def test_cnndd_requires_microphone_channels():
    cnndd = Cnndd(2, 6, SMALL_CNNDD, make_rng(0))
    with pytest.raises(ValueError):
        cnndd(pytest.helpers.decoupled(np.ones((2, 8, 6))))


def test_cnndd_passes_grad_check():
    rng = make_rng(8)
    cnndd = Cnndd(2, 6, SMALL_CNNDD, rng)
    cnndd.name_parameters()
    for p in cnndd.parameters():
        if p.name.endswith('bias'):
            p.assign(rng.uniform(0.1, 0.3, size=p.shape))
    x = pytest.helpers.random_parameter((2, 8, 6), seed=9, name='x')

    def f():
        return (cnndd(pytest.helpers.microphones(x)).data ** 2).sum()

    report = grad_check(f, [x] + cnndd.parameters(), max_entries=20)
    assert report.passed, report.max_rel_error


def test_positional_encoding_is_shared_by_channels():
    x = pytest.helpers.decoupled(np.zeros((3, 5, 6)))
    y = add_positional(x).data.data
    np.testing.assert_array_equal(y[0, 0], [0, 1, 0, 1, 0, 1])
    assert np.array_equal(y[0], y[1]) and np.array_equal(y[1], y[2])
    for t in range(5):
        for i in range(3):
            assert y[2, t, 2 * i] == pytest.approx(math.sin(t / 10000 ** (2 * i / 6)), abs=1e-12)
