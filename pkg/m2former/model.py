"""
The M2Former: multi-channel encoder with clustering-and-filtering, shared CTC head and decoder.
"""
from typing import List, Sequence, Tuple
import attr
import numpy as np
from m2former.cf import ChannelAssignment, IfsdConfig, cf_layer
from m2former.config import ExperimentConfig, ModelConfig
from m2former.decoder import (
    Decoder,
    LossConfig,
    PitResult,
    TokenSequence,
    ctc_greedy_decode,
    greedy_decode,
    pit_loss,
)
from m2former.exc import ShapeError
from m2former.frontend import ChannelEmbedConfig, ChannelEmbedding, Cnndd, add_positional
from m2former.m2a import ChannelMask, M2ABlock, speaker_average
from m2former.nn import LayerNorm, Linear, Module
from m2former.signal import FeatureStack, MultiChannelRecording, stft_features
from m2former.tensor import Tensor, no_grad
from m2former.utils import make_rng


@attr.s(auto_attribs=True, frozen=True, eq=False)
class EncoderOutput:
    """ One T' x d_model stream per kept speaker label, in assignment.kept order. """

    streams: List[Tensor]
    assignment: ChannelAssignment
    mask: ChannelMask
    decoupled: FeatureStack


def contiguous_assignment(n_channels: int, n_speakers: int) -> ChannelAssignment:
    """ Split the channels into n_speakers contiguous groups, all kept (no clustering). """
    if n_speakers > n_channels:
        raise ShapeError(f'{n_channels} channels cannot be split among {n_speakers} speakers')
    labels = [c * n_speakers // n_channels for c in range(n_channels)]
    return ChannelAssignment.from_labels(labels)


class Encoder(Module):
    """
    features -> channel embedding -> CNNDD -> positions -> N_M1 blocks -> CF -> N_M2 masked blocks
    (or a smoothing linear layer when N_M2 = 0) -> per-speaker channel average -> layer norm.
    """

    def __init__(self, cfg: ModelConfig, n_mics: int, rng: np.random.Generator):
        self.cfg = cfg
        self.embedding = ChannelEmbedding(ChannelEmbedConfig(cfg.n_bins, cfg.embed_dim), rng)
        self.cnndd = Cnndd(n_mics, cfg.embed_dim, cfg.cnndd(), rng)
        n_channels = cfg.cnndd_channels[-1]
        self.blocks1 = [
            M2ABlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.variant, n_channels, cfg.dropout)
            for _ in range(cfg.n_m1)
        ]
        self.blocks2 = [
            M2ABlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.variant, n_channels, cfg.dropout)
            for _ in range(cfg.n_m2)
        ]
        self.smoothing = Linear(cfg.d_model, cfg.d_model, rng) if cfg.n_m2 == 0 else None
        self.norm_out = LayerNorm(cfg.d_model)
        self.ifsd = IfsdConfig(alpha=cfg.ifsd_alpha, tau=cfg.ifsd_tau)

    def assign(self, x: FeatureStack, n_speakers: int = None) -> Tuple[ChannelAssignment, ChannelMask]:
        """ Clustering-and-filtering decision for decoupled features (gradient-free). """
        cfg = self.cfg
        if not cfg.cf_enabled:
            assignment = contiguous_assignment(x.channels, n_speakers or 1)
            return assignment, assignment.mask()
        return cf_layer(
            x,
            self.ifsd,
            n_speakers=n_speakers,
            k=cfg.clusters or None,
            d_k=cfg.d_model // cfg.heads,
            eigengap_includes_noise=cfg.eigengap_includes_noise,
            discard=cfg.ifsd_enabled,
        )

    def forward(
        self, features: FeatureStack, n_speakers: int = None, assignment: ChannelAssignment = None
    ) -> EncoderOutput:
        """
        :param features: STFT features (microphones x frames x 3F)
        :param n_speakers: Known speaker count, None to estimate it
        :param assignment: Use this channel assignment instead of running CF
        """
        x = add_positional(self.cnndd(self.embedding(features)))
        for block in self.blocks1:
            x = block(x)
        if assignment is None:
            assignment, mask = self.assign(x, n_speakers)
        else:
            mask = assignment.mask()
        for block in self.blocks2:
            x = block(x, mask)
        if self.smoothing is not None:
            x = x.with_data(self.smoothing(x.data))
        streams = [self.norm_out(stream) for stream in speaker_average(x, assignment)]
        return EncoderOutput(streams, assignment, mask, x)


class M2Former(Module):
    def __init__(self, cfg: ModelConfig, n_mics: int, vocab_size: int, seed: int = 0):
        rng = make_rng(seed)
        self.cfg = cfg
        self.n_mics = n_mics
        self.encoder = Encoder(cfg, n_mics, rng)
        self.ctc_head = Linear(cfg.d_model, vocab_size, rng)
        self.decoder = Decoder(vocab_size, cfg.d_model, cfg.heads, cfg.d_ff, cfg.n_d, rng, cfg.dropout)
        self.name_parameters()

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> 'M2Former':
        return cls(cfg.model, cfg.data.n_mics, cfg.data.n_tokens + 1, seed=cfg.optim.seed)

    def features(self, rec: MultiChannelRecording) -> FeatureStack:
        if rec.n_mics != self.n_mics:
            raise ShapeError(f'Model built for {self.n_mics} microphones, recording has {rec.n_mics}')
        cfg = self.cfg
        return stft_features(rec, cfg.frame_ms, cfg.shift_ms, cfg.fft_size, cfg.compression)

    def forward(
        self, features: FeatureStack, n_speakers: int = None, assignment: ChannelAssignment = None
    ) -> EncoderOutput:
        return self.encoder(features, n_speakers, assignment)

    def loss(
        self,
        features: FeatureStack,
        refs: Sequence[TokenSequence],
        cfg: LossConfig = LossConfig(),
        assignment: ChannelAssignment = None,
        permutation: Sequence[int] = None,
    ) -> PitResult:
        """ PIT hybrid loss of one utterance with the reference count as the known speaker count. """
        out = self(features, n_speakers=len(refs), assignment=assignment)
        return pit_loss(out.streams, refs, self.ctc_head, self.decoder, cfg, permutation)

    def transcribe(
        self, features: FeatureStack, n_speakers: int = None, max_len: int = None
    ) -> Tuple[EncoderOutput, List[TokenSequence], List[TokenSequence]]:
        """
        :return: (encoder output, attention-decoder hypotheses, CTC-greedy hypotheses)
        """
        max_len = self.cfg.max_decode_len if max_len is None else max_len
        with no_grad():
            out = self(features, n_speakers)
            hyps = [greedy_decode(stream, self.decoder, max_len) for stream in out.streams]
            ctc_hyps = [ctc_greedy_decode(self.ctc_head(stream)) for stream in out.streams]
        return out, hyps, ctc_hyps
