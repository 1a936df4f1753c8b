"""
Channel embedding and the CNN decoupling-and-downsampling (CNNDD) stack.
"""
from typing import List, Tuple
import attr
import numpy as np
from m2former.constants import MIN_CNNDD_FRAMES
from m2former.exc import RecordingTooShortError, ShapeError
from m2former.nn import Conv2d, Linear, Module, sinusoidal_encoding
from m2former.signal import AxisMeaning, FeatureStack
from m2former.tensor import Tensor, concatenate, conv_output_length, relu


@attr.s(auto_attribs=True, frozen=True)
class ChannelEmbedConfig:
    n_bins: int
    dim: int
    mag_dim: int = None
    pha_dim: int = None

    @property
    def mag_features(self) -> int:
        return self.mag_dim or self.dim

    @property
    def pha_features(self) -> int:
        return self.pha_dim or self.dim


class ChannelEmbedding(Module):
    """
    Per microphone: [X_mag W_mag + b, X_pha W_pha + b] W_emb + b. Weights are shared by all channels.
    """

    def __init__(self, cfg: ChannelEmbedConfig, rng: np.random.Generator):
        self.n_bins = cfg.n_bins
        self.w_mag = Linear(cfg.n_bins, cfg.mag_features, rng)
        self.w_pha = Linear(2 * cfg.n_bins, cfg.pha_features, rng)
        self.w_emb = Linear(cfg.mag_features + cfg.pha_features, cfg.dim, rng)

    def forward(self, x: FeatureStack) -> FeatureStack:
        if x.features != 3 * self.n_bins:
            raise ShapeError(
                f'Channel embedding expects {3 * self.n_bins} features, got shape {x.data.shape}'
            )
        mag = x.data[:, :, : self.n_bins]
        pha = x.data[:, :, self.n_bins :]
        joint = concatenate([self.w_mag(mag), self.w_pha(pha)], axis=-1)
        return x.with_data(self.w_emb(joint))


def channel_embed(x: FeatureStack, embedding: ChannelEmbedding) -> FeatureStack:
    return embedding(x)


def stride_schedule(n_layers: int) -> List[Tuple[int, int]]:
    """ [2, 2] for the first layer, [2, 1] for the second, [1, 1] afterwards. """
    return [(2, 2), (2, 1)][:n_layers] + [(1, 1)] * max(n_layers - 2, 0)


@attr.s(auto_attribs=True, frozen=True)
class CnnddConfig:
    layer_channels: List[int] = attr.Factory(lambda: [6, 6, 10, 10, 20, 20, 40, 40])
    kernel: Tuple[int, int] = (3, 3)
    padding: Tuple[int, int] = (1, 1)
    d_model: int = 256

    @property
    def strides(self) -> List[Tuple[int, int]]:
        return stride_schedule(len(self.layer_channels))

    @property
    def out_channels(self) -> int:
        return self.layer_channels[-1]

    def output_shape(self, frames: int, features: int) -> Tuple[int, int, int]:
        """ (C', T', D') after the convolution stack, before the post-projection. """
        for stride in self.strides:
            frames = conv_output_length(frames, self.kernel[0], stride[0], self.padding[0])
            features = conv_output_length(features, self.kernel[1], stride[1], self.padding[1])
        return self.out_channels, frames, features


class Cnndd(Module):
    """
    Treats microphones as convolution input channels over the frames x features plane. Every conv
    layer is followed by ReLU; a linear post-projection maps D' to d_model at each position.
    """

    def __init__(self, in_channels: int, features: int, cfg: CnnddConfig, rng: np.random.Generator):
        self.cfg = cfg
        channels = [in_channels] + list(cfg.layer_channels)
        self.convs = [
            Conv2d(c_in, c_out, rng, kernel=cfg.kernel, stride=stride, padding=cfg.padding)
            for c_in, c_out, stride in zip(channels[:-1], channels[1:], cfg.strides)
        ]
        _, _, reduced = cfg.output_shape(MIN_CNNDD_FRAMES, features)
        self.post = Linear(reduced, cfg.d_model, rng)

    @property
    def time_reduction(self) -> int:
        return int(np.prod([stride[0] for stride in self.cfg.strides]))

    def forward(self, x: FeatureStack) -> FeatureStack:
        if x.axis_meaning is not AxisMeaning.MICROPHONES:
            raise ValueError(f'CNNDD expects microphone channels, got {x.axis_meaning.value}')
        if x.frames < MIN_CNNDD_FRAMES:
            raise RecordingTooShortError(
                f'CNNDD needs at least {MIN_CNNDD_FRAMES} frames, got {x.frames}'
            )
        h = x.data
        for conv in self.convs:
            h = relu(conv(h))
        return x.with_data(
            self.post(h),
            axis_meaning=AxisMeaning.DECOUPLED,
            frame_rate=x.frame_rate / self.time_reduction,
        )


def cnndd_forward(x: FeatureStack, cnndd: Cnndd) -> FeatureStack:
    return cnndd(x)


def add_positional(x: FeatureStack) -> FeatureStack:
    """ Add the sinusoidal position table along the frame axis, identically for every channel. """
    table = sinusoidal_encoding(x.frames, x.features)
    return x.with_data(x.data + Tensor(table[None, :, :]))
