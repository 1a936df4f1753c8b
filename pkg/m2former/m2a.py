"""
Encoder attention: intra-channel self-attention, the inter-channel similarity matrix Z,
similarity-gated (M2A) cross-channel attention, the learnable-weight (MCT) cross-channel baseline,
cluster-masked attention and per-speaker channel averaging.
"""
import math
from typing import TYPE_CHECKING, List, Sequence
import attr
import numpy as np
from m2former.exc import ClusteringError, ShapeError
from m2former.nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from m2former.signal import AxisMeaning, FeatureStack
from m2former.tensor import Parameter, Tensor, masked_fill, softmax

if TYPE_CHECKING:
    from m2former.cf import ChannelAssignment

CROSS_VARIANTS = ('m2a', 'mct', 'none')
MASKED_LOGIT = -1e30


@attr.s(auto_attribs=True, frozen=True, eq=False)
class SimilarityMatrix:
    """ Row-stochastic C' x C' channel similarity, with the scaled Gram logits it was softmaxed from. """

    z: Tensor
    logits: Tensor = None

    @property
    def size(self) -> int:
        return self.z.shape[0]

    def numpy(self) -> np.ndarray:
        return self.z.numpy()


def _check_mask(instance, attribute, allowed):
    if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
        raise ShapeError(f'Channel mask must be square, got {allowed.shape}')
    if not np.all(np.diag(allowed)):
        raise ValueError('Channel mask diagonal must be True')
    if not np.array_equal(allowed, allowed.T):
        raise ValueError('Channel mask must be symmetric')


@attr.s(auto_attribs=True, frozen=True, eq=False)
class ChannelMask:
    """ allowed[i, j] is True when channels i and j may attend to each other across channels. """

    allowed: np.ndarray = attr.ib(converter=lambda a: np.asarray(a, dtype=bool), validator=_check_mask)

    @classmethod
    def full(cls, n_channels: int) -> 'ChannelMask':
        return cls(np.ones((n_channels, n_channels), dtype=bool))

    @classmethod
    def from_labels(cls, labels: Sequence[int], kept: Sequence[int]) -> 'ChannelMask':
        """ Same-label pairs of kept labels; every channel keeps its diagonal entry. """
        labels = np.asarray(labels)
        in_kept = np.isin(labels, list(kept))
        allowed = (labels[:, None] == labels[None, :]) & in_kept[:, None] & in_kept[None, :]
        np.fill_diagonal(allowed, True)
        return cls(allowed)


def similarity_matrix(x: FeatureStack, d_k: int = None) -> SimilarityMatrix:
    """
    Z = row-softmax((1/T) sum_t X_t X_t^T / sqrt(d_k)), X_t the C' x d matrix of frame t.

    :param d_k: Scaling dimension (defaults to the feature dimension)
    """
    c, t, d = x.data.shape
    if c < 2:
        raise ShapeError(f'Similarity matrix needs at least 2 channels, got {c}')
    d_k = d if d_k is None else d_k
    flat = x.data.reshape(c, t * d)
    gram = (flat @ flat.T) / (t * math.sqrt(d_k))
    return SimilarityMatrix(softmax(gram, axis=1), gram)


def mix_channels(h: Tensor, weights: Tensor) -> Tensor:
    """ Row c of the result is sum_i weights[c, i] * h[i]. """
    c, t, d = h.shape
    return (weights @ h.reshape(c, t * d)).reshape(c, t, d)


def masked_weights(z: SimilarityMatrix, mask: ChannelMask) -> Tensor:
    """
    Row-stochastic weights restricted to the allowed entries.

    A masked row softmax of the logits when Z carries them. Otherwise the disallowed entries of Z
    are zeroed and each row renormalized.
    """
    if mask.allowed.shape != z.z.shape:
        raise ShapeError(f'Mask {mask.allowed.shape} does not match similarity {z.z.shape}')
    if z.logits is not None:
        return softmax(masked_fill(z.logits, ~mask.allowed, MASKED_LOGIT), axis=1)
    kept = z.z * mask.allowed.astype(np.float64)
    return kept / kept.sum(axis=1, keepdims=True)


def _check_decoupled(x: FeatureStack, d_model: int):
    if x.axis_meaning is not AxisMeaning.DECOUPLED:
        raise ValueError(f'Attention layers expect decoupled channels, got {x.axis_meaning.value}')
    if x.features != d_model:
        raise ShapeError(f'Expected d_model {d_model}, got shape {x.data.shape}')


class IntraChannelLayer(Module):
    """ Pre-norm self-attention over frames inside each channel, then a feed-forward sublayer. """

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.d_model = d_model
        self.norm_att = LayerNorm(d_model)
        self.attention = MultiHeadAttention(d_model, heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.feed_forward = FeedForward(d_model, d_ff, rng, dropout_rate)

    def forward(self, x: FeatureStack) -> FeatureStack:
        _check_decoupled(x, self.d_model)
        h = x.data
        n = self.norm_att(h)
        h = h + self.attention(n, n)
        h = h + self.feed_forward(self.norm_ff(h))
        return x.with_data(h)


class CrossChannelLayer(Module):
    """
    M2A cross-channel attention. Queries come from each channel, keys and values from the
    Z-weighted mixture of channels. Z is computed from the layer input unless given.
    """

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.d_model = d_model
        self.d_k = d_model // heads
        self.norm_att = LayerNorm(d_model)
        self.attention = MultiHeadAttention(d_model, heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.feed_forward = FeedForward(d_model, d_ff, rng, dropout_rate)

    def mixing_weights(self, x: FeatureStack, z: SimilarityMatrix = None, mask: ChannelMask = None) -> Tensor:
        if z is None:
            z = similarity_matrix(x, self.d_k)
        if z.size != x.channels:
            raise ShapeError(f'Similarity matrix of size {z.size} for {x.channels} channels')
        return z.z if mask is None else masked_weights(z, mask)

    def attend(self, x: FeatureStack, weights: Tensor) -> FeatureStack:
        """ Attention sublayer plus feed-forward with explicit channel mixing weights. """
        _check_decoupled(x, self.d_model)
        h = x.data
        n = self.norm_att(h)
        h = h + self.attention(n, mix_channels(n, weights))
        h = h + self.feed_forward(self.norm_ff(h))
        return x.with_data(h)

    def forward(self, x: FeatureStack, z: SimilarityMatrix = None, mask: ChannelMask = None) -> FeatureStack:
        return self.attend(x, self.mixing_weights(x, z, mask))


class MctCrossChannelLayer(CrossChannelLayer):
    """
    Cross-channel attention that mixes channels with a learnable C' x C' matrix P (row-softmaxed
    logits, zero-initialized). Only valid for the channel count it was built for.
    """

    def __init__(self, d_model: int, heads: int, d_ff: int, n_channels: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        super().__init__(d_model, heads, d_ff, rng, dropout_rate)
        self.p_logits = Parameter(np.zeros((n_channels, n_channels)))

    def mixing_weights(self, x: FeatureStack, z: SimilarityMatrix = None, mask: ChannelMask = None) -> Tensor:
        if x.channels != self.p_logits.shape[0]:
            raise ShapeError(
                f'MCT layer built for {self.p_logits.shape[0]} channels, got {x.channels}'
            )
        return softmax(self.p_logits, axis=1)


def intra_attention(x: FeatureStack, layer: IntraChannelLayer) -> FeatureStack:
    return layer(x)


def cross_attention(
    x: FeatureStack, z: SimilarityMatrix, layer: CrossChannelLayer, mask: ChannelMask = None
) -> FeatureStack:
    return layer(x, z=z, mask=mask)


def mct_cross_attention(x: FeatureStack, layer: MctCrossChannelLayer) -> FeatureStack:
    return layer(x)


class M2ABlock(Module):
    """ Intra-channel layer followed by the cross-channel layer of the chosen variant. """

    def __init__(
        self,
        d_model: int,
        heads: int,
        d_ff: int,
        rng: np.random.Generator,
        variant: str = 'm2a',
        n_channels: int = None,
        dropout_rate: float = 0.0,
    ):
        if variant not in CROSS_VARIANTS:
            raise ValueError(f'Unknown cross-channel variant "{variant}"')
        self.variant = variant
        self.intra = IntraChannelLayer(d_model, heads, d_ff, rng, dropout_rate)
        if variant == 'm2a':
            self.cross = CrossChannelLayer(d_model, heads, d_ff, rng, dropout_rate)
        elif variant == 'mct':
            self.cross = MctCrossChannelLayer(d_model, heads, d_ff, n_channels, rng, dropout_rate)
        else:
            self.cross = None

    def forward(self, x: FeatureStack, mask: ChannelMask = None) -> FeatureStack:
        x = self.intra(x)
        if self.cross is None:
            return x
        return self.cross(x, mask=mask)


def speaker_average(x: FeatureStack, assignment: 'ChannelAssignment') -> List[Tensor]:
    """
    Mean over the channels of each kept label, in the order of assignment.kept (descending score).

    :raises ClusteringError: if a kept label has no channels
    """
    labels = np.asarray(assignment.labels)
    outputs = []
    for label in assignment.kept:
        index = np.flatnonzero(labels == label)
        if len(index) == 0:
            raise ClusteringError(f'Kept label {label} has no channels')
        outputs.append(x.data[index].mean(axis=0))
    return outputs
