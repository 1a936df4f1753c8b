import numpy as np
import pytest
from m2former.cf import (
    ChannelAssignment,
    IfsdConfig,
    canonical_labels,
    cf_layer,
    eigengap_count,
    filter_labels,
    ifsd,
    kmeans,
    normalized_laplacian,
    spectral_cluster,
)
from m2former.exc import ClusteringError, IfsdError
from m2former.m2a import speaker_average
from m2former.tensor import backward
from m2former.utils import make_rng

FRAMES, DIM = 60, 16


def compositions(total, smallest=2):
    """ Ordered block sizes, each >= smallest, summing to total. """
    if total == 0:
        yield []
        return
    for first in range(smallest, total + 1):
        for rest in compositions(total - first, smallest):
            yield [first] + rest


def smooth_track(rng, frames=FRAMES, dim=DIM, tau=10):
    """ Frames rotating a quarter turn every tau frames in a random plane, under a slow envelope. """
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    phase = rng.uniform(0, 2 * np.pi)
    angle = np.pi / (2 * tau) * np.arange(frames) + phase
    envelope = 1.5 + np.sin(2 * np.pi * np.arange(frames) / frames)
    return envelope[:, None] * (np.stack([np.cos(angle), np.sin(angle)], axis=1) @ basis.T)


def speakers_and_noise(seed, amplitude=2.0):
    """
    Nine decoupled channels: 0, 3, 6 carry speaker A, 1, 4, 7 speaker B and 2, 5, 8 a shared
    white-noise track, each with a small independent perturbation.
    """
    rng = make_rng(seed)
    tracks = [
        amplitude * smooth_track(rng) / 1.5,
        amplitude * smooth_track(rng) / 1.5,
        amplitude / np.sqrt(DIM) * rng.standard_normal((FRAMES, DIM)),
    ]
    x = np.stack([tracks[c % 3] + 0.05 * rng.standard_normal((FRAMES, DIM)) for c in range(9)])
    return x


def test_block_similarity_two_blocks_gives_expected_labels():
    labels = spectral_cluster(pytest.helpers.block_similarity([2, 2]), 2)
    np.testing.assert_array_equal(labels, [0, 0, 1, 1])


@pytest.mark.parametrize('total', range(4, 13))
def test_exact_blocks_are_recovered_for_every_size_combination(total):
    for sizes in compositions(total):
        labels = spectral_cluster(pytest.helpers.block_similarity(sizes), len(sizes))
        expected = np.repeat(np.arange(len(sizes)), sizes)
        np.testing.assert_array_equal(labels, expected, err_msg=f'sizes {sizes}')


def test_permuting_channels_permutes_labels():
    z = pytest.helpers.block_similarity([3, 2, 4], eps=0.01)
    order = make_rng(1).permutation(9)
    labels = spectral_cluster(z, 3)
    permuted = spectral_cluster(z[np.ix_(order, order)], 3)
    assert pytest.helpers.same_partition(permuted, labels[order])
    np.testing.assert_array_equal(permuted, canonical_labels(labels[order]))


def test_single_cluster_and_out_of_range_k():
    z = pytest.helpers.block_similarity([3, 3])
    np.testing.assert_array_equal(spectral_cluster(z, 1), np.zeros(6))
    with pytest.raises(ClusteringError):
        spectral_cluster(z, 7)
    with pytest.raises(ClusteringError):
        spectral_cluster(z, 0)


def test_zero_degree_channel_is_named():
    z = pytest.helpers.block_similarity([3, 3])
    z[4, :] = 0.0
    z[:, 4] = 0.0
    with pytest.raises(ClusteringError, match='Channel 4'):
        spectral_cluster(z, 2)


def test_laplacian_of_uniform_similarity():
    laplacian = normalized_laplacian(np.full((4, 4), 0.25))
    eigenvalues = np.linalg.eigvalsh(laplacian)
    np.testing.assert_allclose(eigenvalues, [0, 4 / 3, 4 / 3, 4 / 3], atol=1e-12)


def test_clustering_is_reproducible():
    z = pytest.helpers.block_similarity([2, 3, 3], eps=0.05)
    assert np.array_equal(spectral_cluster(z, 3, seed=4), spectral_cluster(z, 3, seed=4))


def test_kmeans_separates_distant_points():
    points = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    labels = canonical_labels(kmeans(points, 2, make_rng(0)))
    np.testing.assert_array_equal(labels, [0, 0, 1, 1])


@pytest.mark.parametrize(
    'sizes', [[10], [5, 5], [3, 3, 4], [2, 2, 3, 3], [2, 2, 2, 2, 2]], ids=lambda s: f'k={len(s)}'
)
def test_eigengap_counts_exact_blocks(sizes):
    assert eigengap_count(pytest.helpers.block_similarity(sizes), 10) == len(sizes)


def test_eigengap_with_small_off_block_noise():
    assert eigengap_count(pytest.helpers.block_similarity([4, 5], eps=1e-3), 9) == 2


def test_eigengap_of_uniform_similarity_is_one():
    assert eigengap_count(np.full((6, 6), 1 / 6), 6) == 1


def test_eigengap_checks_k_max():
    with pytest.raises(ClusteringError):
        eigengap_count(pytest.helpers.block_similarity([2, 2]), 1)
    with pytest.raises(ClusteringError):
        eigengap_count(pytest.helpers.block_similarity([2, 2]), 5)


def test_ifsd_config_limits():
    with pytest.raises(ValueError):
        IfsdConfig(alpha=0.0)
    with pytest.raises(ValueError):
        IfsdConfig(tau=1)


def test_ifsd_of_constant_frames_is_one_minus_alpha():
    x = np.tile([0.3, -1.2, 2.0], (25, 1))
    assert ifsd(x, IfsdConfig()) == pytest.approx(1 - 5.3, abs=1e-12)


def test_ifsd_of_alternating_orthogonal_frames_is_minus_alpha():
    x = np.tile([[2.0, 0.0], [0.0, 3.0]], (6, 1))
    assert ifsd(x, IfsdConfig(alpha=5.3, tau=2)) == pytest.approx(-5.3, abs=1e-12)


def test_ifsd_of_zero_frames_is_zero():
    assert ifsd(np.zeros((12, 4)), IfsdConfig(tau=3)) == 0.0


def test_ifsd_is_invariant_to_positive_frame_scaling():
    x = pytest.helpers.random_array((30, 5), seed=2)
    scale = make_rng(3).uniform(0.1, 10.0, size=(30, 1))
    assert abs(ifsd(x * scale) - ifsd(x)) < 1e-10


def test_ifsd_needs_more_frames_than_tau():
    with pytest.raises(IfsdError):
        ifsd(np.ones((10, 3)), IfsdConfig(tau=10))


def test_smooth_track_outscores_white_noise():
    wins = 0
    for seed in range(100):
        rng = make_rng(seed)
        smooth = smooth_track(rng, frames=40)
        noise = rng.standard_normal((40, DIM))
        wins += ifsd(smooth) > ifsd(noise)
    assert wins >= 95


def test_filter_labels_keeps_highest_scores():
    assignment = filter_labels([0, 1, 0, 1], [-0.4, -3.0, -0.6, -5.0], 1)
    assert assignment.kept == [0]
    assert assignment.label_scores == pytest.approx({0: -0.5, 1: -4.0})
    assert assignment.discarded_channels == [1, 3]


@pytest.mark.parametrize(
    'scores, kept',
    [([-1.0, -1.0, -9.0], [0, 1]), ([-9.0, -1.0, -1.0], [1, 2]), ([-1.0, -9.0, -1.0], [0, 2])],
)
def test_filter_labels_breaks_ties_by_lower_label(scores, kept):
    assignment = filter_labels([0, 1, 2], scores, 2)
    assert assignment.kept == kept
    assert filter_labels([0, 1, 2], scores, 2).kept == kept


def test_filter_labels_needs_enough_labels():
    with pytest.raises(ClusteringError):
        filter_labels([0, 0, 1], [0.0, 0.0, 0.0], 3)


def test_assignment_invariants():
    with pytest.raises(ClusteringError):
        ChannelAssignment([0, 0, 1], {}, [2], 1)
    with pytest.raises(ClusteringError):
        ChannelAssignment([0, 0, 1], {}, [0, 0], 2)
    assignment = ChannelAssignment.from_labels([2, 0, 2])
    assert assignment.kept == [0, 2] and assignment.n_speakers == 2


def test_cf_layer_with_known_count_discards_the_noise_label():
    x = speakers_and_noise(seed=5)
    features = pytest.helpers.decoupled(x)
    assignment, mask = cf_layer(features, n_speakers=2, d_k=1)
    np.testing.assert_array_equal(assignment.labels, [0, 1, 2] * 3)
    assert sorted(assignment.kept) == [0, 1]
    assert assignment.discarded_channels == [2, 5, 8]
    assert assignment.label_scores[2] < min(assignment.label_scores[0], assignment.label_scores[1])
    expected = np.equal.outer(np.arange(9) % 3, np.arange(9) % 3) & (np.arange(9) % 3 != 2)
    np.fill_diagonal(expected, True)
    np.testing.assert_array_equal(mask.allowed, expected)
    # The data path is untouched
    np.testing.assert_array_equal(features.data.data, x)


def test_cf_layer_with_unknown_count_uses_the_eigengap():
    assignment, _ = cf_layer(pytest.helpers.decoupled(speakers_and_noise(seed=6)), d_k=1)
    assert assignment.n_speakers == 2
    assert sorted(assignment.kept) == [0, 1]
    assignment, _ = cf_layer(
        pytest.helpers.decoupled(speakers_and_noise(seed=6)), d_k=1, eigengap_includes_noise=False
    )
    assert assignment.n_speakers == 3


def test_cf_layer_without_discarding_keeps_every_label():
    features = pytest.helpers.decoupled(speakers_and_noise(seed=7))
    assignment, mask = cf_layer(features, k=2, n_speakers=2, d_k=1, discard=False)
    assert len(assignment.kept) == 2
    assert not assignment.discarded_channels
    assert mask.allowed.sum() == sum(np.sum(assignment.labels == label) ** 2 for label in assignment.kept)


def test_cf_layer_requires_decoupled_channels():
    with pytest.raises(ValueError):
        cf_layer(pytest.helpers.microphones(speakers_and_noise(seed=0)), n_speakers=2)


def test_cf_layer_adds_nothing_to_the_gradient():
    x = pytest.helpers.random_parameter((9, FRAMES, DIM), seed=8, name='x')
    x.assign(speakers_and_noise(seed=8))
    features = pytest.helpers.decoupled(x)
    assignment, _ = cf_layer(features, n_speakers=2, d_k=1)
    assert x.grad is None
    outputs = speaker_average(features, assignment)
    backward(sum(out.sum() for out in outputs))
    expected = np.zeros(9)
    for label in assignment.kept:
        members = assignment.labels == label
        expected[members] = 1.0 / members.sum()
    np.testing.assert_allclose(x.grad, np.broadcast_to(expected[:, None, None], x.shape), atol=1e-15)


def test_cf_layer_clamps_the_cluster_count_to_the_channels():
    features = pytest.helpers.decoupled(speakers_and_noise(seed=8)[:4])
    assignment, _ = cf_layer(features, n_speakers=3, d_k=1)
    assert len(assignment.kept) == 3 and len(assignment.discarded_channels) == 1
    assignment, mask = cf_layer(features, n_speakers=4, d_k=1)
    assert sorted(assignment.kept) == [0, 1, 2, 3]
    assert not assignment.discarded_channels
    np.testing.assert_array_equal(mask.allowed, np.eye(4, dtype=bool))
    with pytest.raises(ClusteringError, match='cannot hold 5 speakers'):
        cf_layer(features, n_speakers=5, d_k=1)
