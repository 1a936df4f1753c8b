"""
Clustering-and-filtering (CF) of decoupled channels.

Channels are grouped by spectral clustering of the similarity matrix Z, each channel is scored
with the inter-frame similarity difference (IFSD) and the labels with the lowest mean score are
discarded as noise. Everything here runs on plain arrays outside the gradient tape.
"""
from typing import Dict, List, Sequence, Tuple, Union
import attr
import numpy as np
from m2former.exc import ClusteringError, IfsdError
from m2former.m2a import ChannelMask, SimilarityMatrix, similarity_matrix
from m2former.signal import AxisMeaning, FeatureStack
from m2former.tensor import Tensor, no_grad
from m2former.utils import logger, make_rng

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-8


def _positive(instance, attribute, value):
    if value <= 0:
        raise ValueError(f'{attribute.name} must be positive, got {value}')


def _at_least_two(instance, attribute, value):
    if value < 2:
        raise ValueError(f'{attribute.name} must be at least 2, got {value}')


@attr.s(auto_attribs=True, frozen=True)
class IfsdConfig:
    alpha: float = attr.ib(default=5.3, validator=_positive)
    tau: int = attr.ib(default=10, validator=_at_least_two)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ChannelAssignment:
    """
    Cluster labels of the decoupled channels and the labels kept as speakers.

    kept is ordered by descending label score (ties by lower label id).
    """

    labels: np.ndarray = attr.ib(converter=lambda a: np.asarray(a, dtype=np.int64))
    label_scores: Dict[int, float]
    kept: List[int]
    n_speakers: int
    channel_scores: np.ndarray = None

    def __attrs_post_init__(self):
        distinct = set(int(label) for label in self.labels)
        if not set(self.kept) <= distinct:
            raise ClusteringError(f'Kept labels {self.kept} not among labels {sorted(distinct)}')
        if len(self.kept) != self.n_speakers or len(set(self.kept)) != len(self.kept):
            raise ClusteringError(f'Expected {self.n_speakers} distinct kept labels, got {self.kept}')

    @property
    def discarded_channels(self) -> List[int]:
        return [c for c, label in enumerate(self.labels) if label not in self.kept]

    @classmethod
    def from_labels(cls, labels: Sequence[int], kept: Sequence[int] = None) -> 'ChannelAssignment':
        """ Assignment with fixed labels and no scores. kept defaults to every label by id. """
        labels = np.asarray(labels, dtype=np.int64)
        kept = sorted(set(labels.tolist())) if kept is None else [int(k) for k in kept]
        return cls(labels, {}, kept, len(kept))

    def mask(self) -> ChannelMask:
        return ChannelMask.from_labels(self.labels, self.kept)


def _as_array(z: Union[SimilarityMatrix, np.ndarray, Tensor]) -> np.ndarray:
    if isinstance(z, SimilarityMatrix):
        z = z.z
    if isinstance(z, Tensor):
        z = z.data
    return np.asarray(z, dtype=np.float64)


def normalized_laplacian(z: Union[SimilarityMatrix, np.ndarray]) -> np.ndarray:
    """
    L_sym = I - D^-1/2 A D^-1/2 of the symmetrized similarity A = (Z + Z^T) / 2 with zero diagonal.

    :raises ClusteringError: if a channel has zero degree
    """
    z = _as_array(z)
    a = (z + z.T) / 2.0
    np.fill_diagonal(a, 0.0)
    degree = a.sum(axis=1)
    isolated = np.flatnonzero(degree <= 0.0)
    if len(isolated):
        raise ClusteringError(f'Channel {int(isolated[0])} has zero degree in the similarity graph')
    d = 1.0 / np.sqrt(degree)
    return np.eye(len(a)) - d[:, None] * a * d[None, :]


def canonical_labels(labels: Sequence[int]) -> np.ndarray:
    """ Relabel so that labels appear as 0, 1, 2, ... in order of first occurrence. """
    mapping = {}
    for label in labels:
        mapping.setdefault(int(label), len(mapping))
    return np.array([mapping[int(label)] for label in labels], dtype=np.int64)


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> np.ndarray:
    """
    Lloyd iterations from a k-means++ initialization.

    :return: Label per row of points
    """
    n = len(points)
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        p = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(points[rng.choice(n, p=p)])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(((points[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        updated = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                updated[j] = members.mean(axis=0)
            else:
                logger.warning(f'k-means cluster {j} went empty, keeping its previous center')
        shift = np.max(np.abs(updated - centers))
        centers = updated
        if shift < tol:
            break
    return labels


def spectral_cluster(z: Union[SimilarityMatrix, np.ndarray], k: int, seed: int = 0) -> np.ndarray:
    """
    Normalized spectral clustering of channels.

    :param z: Channel similarity (not necessarily symmetric)
    :param k: Number of clusters, 1 <= k <= C'
    :param seed: k-means seed
    :return: Canonical labels (first occurrence order)
    :raises ClusteringError: on k out of range or a zero-degree channel
    """
    z = _as_array(z)
    n = len(z)
    if not 1 <= k <= n:
        raise ClusteringError(f'Cluster count {k} out of range for {n} channels')
    laplacian = normalized_laplacian(z)
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    _, vectors = np.linalg.eigh(laplacian)
    embedding = vectors[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.where(norms > 0, norms, 1.0)
    return canonical_labels(kmeans(embedding, k, make_rng(seed)))


def eigengap_count(z: Union[SimilarityMatrix, np.ndarray], k_max: int) -> int:
    """
    Number of clusters at the largest gap of the ascending L_sym spectrum, searched in [1, k_max].
    """
    z = _as_array(z)
    n = len(z)
    if not 2 <= k_max <= n:
        raise ClusteringError(f'k_max {k_max} out of range for {n} channels')
    eigenvalues = np.linalg.eigvalsh(normalized_laplacian(z))
    k_max = min(k_max, n - 1)
    gaps = eigenvalues[1 : k_max + 1] - eigenvalues[:k_max]
    return int(np.argmax(gaps)) + 1


def ifsd(x: Union[Tensor, np.ndarray], cfg: IfsdConfig = IfsdConfig()) -> float:
    """
    Inter-frame similarity difference of one channel's frames (T' x d):

        1/(T' - tau) * sum_t [x_t . x_{t+1} - alpha * x_t . x_{t+tau}]

    over L2-normalized frames, t = 0 .. T' - tau - 1. Zero-norm frames contribute 0.

    :raises IfsdError: if T' <= tau
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    frames = len(x)
    if frames <= cfg.tau:
        raise IfsdError(f'IFSD needs more than tau={cfg.tau} frames, got {frames}')
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    span = frames - cfg.tau
    adjacent = np.einsum('td,td->t', unit[:span], unit[1 : span + 1])
    lagged = np.einsum('td,td->t', unit[:span], unit[cfg.tau :])
    return float((adjacent - cfg.alpha * lagged).sum() / span)


def filter_labels(
    labels: Sequence[int], per_channel_ifsd: Sequence[float], n_speakers: int
) -> ChannelAssignment:
    """
    Keep the n_speakers labels with the highest mean channel IFSD.

    :raises ClusteringError: if there are fewer distinct labels than n_speakers
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(per_channel_ifsd, dtype=np.float64)
    distinct = sorted(set(labels.tolist()))
    if len(distinct) < n_speakers:
        raise ClusteringError(f'{len(distinct)} distinct labels for {n_speakers} speakers')
    label_scores = {label: float(scores[labels == label].mean()) for label in distinct}
    ranked = sorted(distinct, key=lambda label: (-label_scores[label], label))
    return ChannelAssignment(labels, label_scores, ranked[:n_speakers], n_speakers, scores)


def cf_layer(
    x: FeatureStack,
    cfg: IfsdConfig = IfsdConfig(),
    n_speakers: int = None,
    k: int = None,
    d_k: int = None,
    eigengap_includes_noise: bool = True,
    discard: bool = True,
    seed: int = 0,
) -> Tuple[ChannelAssignment, ChannelMask]:
    """
    Cluster the decoupled channels and keep the speech-dominated labels.

    :param x: Decoupled features; values are read only
    :param cfg: IFSD constants
    :param n_speakers: Known speaker count, or None to estimate it with the eigengap heuristic
    :param k: Cluster count override (default n_speakers + 1, or the eigengap estimate)
    :param d_k: Scaling dimension of Z
    :param eigengap_includes_noise: Whether the eigengap cluster count includes one noise cluster
    :param discard: If False, every label is kept and n_speakers becomes the label count
    :param seed: k-means seed
    :return: (assignment, mask allowing attention only within kept same-label groups)
    """
    if x.axis_meaning is not AxisMeaning.DECOUPLED:
        raise ValueError(f'CF layer expects decoupled channels, got {x.axis_meaning.value}')
    with no_grad():
        z = similarity_matrix(x.with_data(x.data.detach()), d_k).numpy()
    channels = len(z)
    if n_speakers is not None and n_speakers > channels:
        raise ClusteringError(f'{channels} decoupled channels cannot hold {n_speakers} speakers')
    if k is None:
        if n_speakers is None:
            k = eigengap_count(z, channels)
        else:
            k = n_speakers + 1 if discard else n_speakers
    if k > channels:
        # one channel per label, so nothing is left to discard
        logger.warning(f'Cluster count {k} exceeds {channels} channels, clustering with k={channels}')
        k = channels
    if n_speakers is None:
        n_speakers = max(k - 1, 1) if (eigengap_includes_noise and discard) else k
    labels = spectral_cluster(z, k, seed)
    while len(set(labels.tolist())) < n_speakers and k < channels:
        k += 1
        logger.warning(f'Clustering produced too few labels, re-clustering with k={k}')
        labels = spectral_cluster(z, k, seed)
    scores = [ifsd(x.data.data[c], cfg) for c in range(channels)]
    if discard:
        assignment = filter_labels(labels, scores, n_speakers)
    else:
        assignment = filter_labels(labels, scores, len(set(labels.tolist())))
    logger.debug(
        f'CF k={k} labels={assignment.labels.tolist()} kept={assignment.kept} '
        f'scores={ {label: round(s, 3) for label, s in assignment.label_scores.items()} }'
    )
    return assignment, assignment.mask()
