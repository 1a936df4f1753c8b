"""
Synthetic multi-microphone mixtures and STFT magnitude/phase features.
"""
import enum
from typing import Dict, List, Optional
import attr
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from m2former.constants import (
    BLANK_ID,
    FFT_SIZE,
    FRAME_MS,
    SAMPLE_RATE,
    SHIFT_MS,
    SPEED_OF_SOUND,
)
from m2former.exc import RecordingTooShortError, ShapeError, SignalPowerError
from m2former.tensor import Tensor
from m2former.utils import make_rng, logger


@attr.s(auto_attribs=True, frozen=True, eq=False)
class TokenAlphabet:
    """
    Token ids 1..n_tokens, each rendered as a fixed multi-tone signature. Id 0 is the blank
    and has no waveform.
    """

    n_tokens: int
    sample_rate: int
    signatures: Dict[int, np.ndarray] = attr.ib(repr=False)

    @property
    def vocab_size(self) -> int:
        """ Number of ids including the blank. """
        return self.n_tokens + 1

    @property
    def symbols(self) -> List[int]:
        return list(range(self.vocab_size))

    @property
    def signature_samples(self) -> int:
        return len(self.signatures[1])

    @classmethod
    def create(
        cls,
        n_tokens: int = 8,
        duration_s: float = 0.16,
        sample_rate: int = SAMPLE_RATE,
        tones: int = 2,
        seed: int = 0,
    ) -> 'TokenAlphabet':
        """
        Build an alphabet whose signatures are sums of `tones` sinusoids under a sin^2 envelope,
        scaled to unit RMS. Each token gets its own set of tone frequencies.
        """
        if n_tokens < 1:
            raise ValueError(f'n_tokens must be positive, got {n_tokens}')
        rng = make_rng(seed)
        n = int(round(duration_s * sample_rate))
        t = np.arange(n) / sample_rate
        envelope = np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2
        # Tone grid between 200 Hz and 0.45 * sample_rate
        grid = np.linspace(200.0, 0.45 * sample_rate, n_tokens * tones)
        order = rng.permutation(len(grid))
        signatures = {}
        for token in range(1, n_tokens + 1):
            freqs = grid[order[(token - 1) * tones : token * tones]]
            phases = rng.uniform(0, 2 * np.pi, size=tones)
            wave = np.sum(np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]), axis=0)
            wave = wave * envelope
            signatures[token] = wave / np.sqrt(np.mean(wave ** 2))
        return cls(n_tokens=n_tokens, sample_rate=sample_rate, signatures=signatures)

    def random_sequence(self, rng: np.random.Generator, min_len: int, max_len: int) -> List[int]:
        length = int(rng.integers(min_len, max_len + 1))
        return [int(x) for x in rng.integers(1, self.n_tokens + 1, size=length)]


@attr.s(auto_attribs=True, frozen=True)
class SourceMeta:
    """ Placement of one speaker: onset (samples) and per-microphone integer delay and gain. """

    onset: int
    delays: List[int]
    gains: List[float]


def _check_recording(instance, attribute, samples):
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ShapeError(f'Recording needs at least 2 channels, got shape {samples.shape}')


@attr.s(auto_attribs=True, eq=False)
class MultiChannelRecording:
    samples: np.ndarray = attr.ib(validator=_check_recording, repr=False)
    sample_rate: int
    transcripts: List[List[int]]
    source_meta: List[SourceMeta]
    noise_std: float = 0.0
    snr_db: Optional[float] = None
    utt_id: str = '0'

    def __attrs_post_init__(self):
        if len(self.transcripts) < 1:
            raise ValueError('Recording needs at least one speaker')
        if any(BLANK_ID in tokens for tokens in self.transcripts):
            raise ValueError('Transcripts must not contain the blank token')

    @property
    def n_mics(self) -> int:
        return self.samples.shape[0]

    @property
    def n_speakers(self) -> int:
        return len(self.transcripts)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


class AxisMeaning(enum.Enum):
    MICROPHONES = 'microphones'
    DECOUPLED = 'decoupled'


@attr.s(auto_attribs=True, frozen=True, eq=False)
class FeatureStack:
    """ channels x frames x features activations with the meaning of the channel axis. """

    data: Tensor
    axis_meaning: AxisMeaning
    frame_rate: float

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def features(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: Tensor, axis_meaning: AxisMeaning = None, frame_rate: float = None):
        return attr.evolve(
            self,
            data=data,
            axis_meaning=self.axis_meaning if axis_meaning is None else axis_meaning,
            frame_rate=self.frame_rate if frame_rate is None else frame_rate,
        )


@attr.s(auto_attribs=True, frozen=True)
class MixtureConfig:
    n_speakers: int = 2
    n_mics: int = 4
    snr_db: Optional[float] = 10.0
    min_tokens: int = 3
    max_tokens: int = 5
    # Microphones on a circle of this radius (m); sources 1..3 m away
    array_radius: float = 0.1
    min_distance: float = 1.0
    max_distance: float = 3.0
    max_onset_s: float = 0.1
    min_duration_s: float = 0.5
    unit_gains: bool = False

    def __attrs_post_init__(self):
        if self.n_speakers < 1:
            raise ValueError(f'n_speakers must be >= 1, got {self.n_speakers}')
        if self.n_mics < 2:
            raise ValueError(f'n_mics must be >= 2, got {self.n_mics}')
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError(f'Invalid token range [{self.min_tokens}, {self.max_tokens}]')


def render_source(tokens: List[int], alphabet: TokenAlphabet) -> np.ndarray:
    """ Concatenate the token signatures of one speaker. """
    return np.concatenate([alphabet.signatures[token] for token in tokens])


def array_delays(
    rng: np.random.Generator, n_sources: int, n_mics: int, cfg: MixtureConfig, sample_rate: int
) -> np.ndarray:
    """
    Integer propagation delays (n_sources x n_mics) for sources at random angles and distances
    around a circular microphone array. The earliest arrival is shifted to zero.
    """
    mic_angles = 2 * np.pi * np.arange(n_mics) / n_mics
    mics = cfg.array_radius * np.stack([np.cos(mic_angles), np.sin(mic_angles)], axis=1)
    angles = rng.uniform(0, 2 * np.pi, size=n_sources)
    distances = rng.uniform(cfg.min_distance, cfg.max_distance, size=n_sources)
    sources = distances[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    dist = np.linalg.norm(sources[:, None, :] - mics[None, :, :], axis=-1)
    delays = np.round(dist / SPEED_OF_SOUND * sample_rate).astype(int)
    return delays - delays.min()


def synth_mixture(
    cfg: MixtureConfig, alphabet: TokenAlphabet, seed: int, utt_id: str = '0'
) -> MultiChannelRecording:
    """
    Render a C-microphone mixture of n speakers. Each microphone receives each source delayed by
    an integer number of samples and scaled by a gain in [0.5, 1]; white Gaussian noise is added
    at cfg.snr_db relative to the mixture power (cfg.snr_db None disables noise).

    :raises SignalPowerError: if noise is requested for a silent mixture
    """
    rng = make_rng(seed)
    sr = alphabet.sample_rate
    transcripts = [
        alphabet.random_sequence(rng, cfg.min_tokens, cfg.max_tokens)
        for _ in range(cfg.n_speakers)
    ]
    sources = [render_source(tokens, alphabet) for tokens in transcripts]
    delays = array_delays(rng, cfg.n_speakers, cfg.n_mics, cfg, sr)
    if cfg.unit_gains:
        gains = np.ones((cfg.n_speakers, cfg.n_mics))
    else:
        gains = rng.uniform(0.5, 1.0, size=(cfg.n_speakers, cfg.n_mics))
    max_onset = int(cfg.max_onset_s * sr)
    onsets = rng.integers(0, max_onset + 1, size=cfg.n_speakers)
    n_samples = max(
        int(onsets[s] + delays[s].max() + len(sources[s])) for s in range(cfg.n_speakers)
    )
    n_samples = max(n_samples, int(cfg.min_duration_s * sr))
    samples = np.zeros((cfg.n_mics, n_samples))
    for s, source in enumerate(sources):
        for c in range(cfg.n_mics):
            start = onsets[s] + delays[s, c]
            samples[c, start : start + len(source)] += gains[s, c] * source
    noise_std = 0.0
    if cfg.snr_db is not None:
        power = np.mean(samples ** 2)
        if power <= 0:
            raise SignalPowerError('Mixture power is zero; cannot add noise at an SNR')
        noise_std = float(np.sqrt(power / 10 ** (cfg.snr_db / 10)))
        samples = samples + rng.normal(0.0, noise_std, size=samples.shape)
    meta = [
        SourceMeta(
            onset=int(onsets[s]),
            delays=[int(d) for d in delays[s]],
            gains=[float(g) for g in gains[s]],
        )
        for s in range(cfg.n_speakers)
    ]
    return MultiChannelRecording(
        samples=samples,
        sample_rate=sr,
        transcripts=transcripts,
        source_meta=meta,
        noise_std=noise_std,
        snr_db=cfg.snr_db,
        utt_id=utt_id,
    )


def clean_image(rec: MultiChannelRecording, alphabet: TokenAlphabet, speaker: int) -> np.ndarray:
    """ Rebuild one speaker's noise-free contribution to every microphone from the source metadata. """
    source = render_source(rec.transcripts[speaker], alphabet)
    meta = rec.source_meta[speaker]
    image = np.zeros_like(rec.samples)
    for c in range(rec.n_mics):
        start = meta.onset + meta.delays[c]
        image[c, start : start + len(source)] = meta.gains[c] * source
    return image


def frame_count(n_samples: int, frame_samples: int, shift_samples: int) -> int:
    return 1 + (n_samples - frame_samples) // shift_samples


def stft_features(
    rec: MultiChannelRecording,
    frame_ms: float = FRAME_MS,
    shift_ms: float = SHIFT_MS,
    fft_size: int = FFT_SIZE,
    compression: str = 'none',
) -> FeatureStack:
    """
    Per channel and frame: F = fft_size/2 + 1 magnitudes followed by F (cos, sin) phase pairs,
    3F features in total. Hann analysis window. Zero-magnitude bins get phase (1, 0).

    :param compression: 'none' or 'log1p' (applied to magnitudes)
    :raises RecordingTooShortError: if the recording is shorter than one frame
    """
    frame = int(round(frame_ms * rec.sample_rate / 1000))
    shift = int(round(shift_ms * rec.sample_rate / 1000))
    if frame > fft_size:
        raise ShapeError(f'Frame length {frame} exceeds fft_size {fft_size}')
    if compression not in ('none', 'log1p'):
        raise ValueError(f'Unknown magnitude compression "{compression}"')
    if rec.n_samples < frame:
        raise RecordingTooShortError(
            f'Recording has {rec.n_samples} samples, one frame needs {frame}'
        )
    frames = sliding_window_view(rec.samples, frame, axis=-1)[:, ::shift, :]
    spectrum = np.fft.rfft(frames * np.hanning(frame), n=fft_size, axis=-1)
    magnitude = np.abs(spectrum)
    nonzero = magnitude > 0
    safe = np.where(nonzero, magnitude, 1.0)
    phase = np.empty(magnitude.shape[:-1] + (2 * magnitude.shape[-1],))
    phase[..., 0::2] = np.where(nonzero, spectrum.real / safe, 1.0)
    phase[..., 1::2] = np.where(nonzero, spectrum.imag / safe, 0.0)
    if compression == 'log1p':
        magnitude = np.log1p(magnitude)
    logger.debug(f'STFT features for utt {rec.utt_id}: {frames.shape[1]} frames')
    return FeatureStack(
        data=Tensor(np.concatenate([magnitude, phase], axis=-1)),
        axis_meaning=AxisMeaning.MICROPHONES,
        frame_rate=rec.sample_rate / shift,
    )
