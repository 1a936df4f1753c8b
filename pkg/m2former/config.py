"""
Experiment configuration: a frozen attrs tree with a flat ``section.key = value`` text format.

Example file::

    # desk-scale run with MCT cross-channel attention
    model.variant = mct
    model.n_m1 = 4
    model.n_m2 = 0
    optim.steps = 500
"""
from pathlib import Path
from typing import List, Union
import attr
from m2former.decoder import LossConfig
from m2former.exc import ConfigError
from m2former.frontend import CnnddConfig
from m2former.m2a import CROSS_VARIANTS
from m2former.signal import MixtureConfig

SECTIONS = ('data', 'model', 'loss', 'optim')
PRESETS = ('micro', 'desk', 'paper')


def _int_list(value) -> List[int]:
    if isinstance(value, str):
        value = [v for v in value.split(',') if v.strip()]
    return [int(v) for v in value]


@attr.s(auto_attribs=True, frozen=True)
class DataConfig:
    n_speakers: int = 2
    n_mics: int = 4
    n_train: int = 200
    n_test: int = 50
    snr_db: float = 10.0
    seed: int = 0
    n_tokens: int = 8
    min_tokens: int = 3
    max_tokens: int = 5

    def mixture(self) -> MixtureConfig:
        return MixtureConfig(
            n_speakers=self.n_speakers,
            n_mics=self.n_mics,
            snr_db=self.snr_db,
            min_tokens=self.min_tokens,
            max_tokens=self.max_tokens,
        )

    def alphabet_spec(self) -> dict:
        return {'n_tokens': self.n_tokens, 'seed': self.seed}


@attr.s(auto_attribs=True, frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    n_m1: int = 2
    n_m2: int = 2
    n_d: int = 2
    embed_dim: int = 64
    cnndd_channels: List[int] = attr.ib(factory=lambda: [4, 4, 8, 8], converter=_int_list)
    variant: str = 'm2a'
    cf_enabled: bool = True
    ifsd_enabled: bool = True
    # 0 selects the default cluster count (speakers + 1, or the eigengap estimate)
    clusters: int = 0
    eigengap_includes_noise: bool = True
    ifsd_alpha: float = 5.3
    ifsd_tau: int = 10
    dropout: float = 0.0
    frame_ms: float = 25.0
    shift_ms: float = 10.0
    fft_size: int = 256
    compression: str = 'log1p'
    max_decode_len: int = 12

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def cnndd(self) -> CnnddConfig:
        return CnnddConfig(layer_channels=list(self.cnndd_channels), d_model=self.d_model)


@attr.s(auto_attribs=True, frozen=True)
class OptimConfig:
    steps: int = 2000
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup: int = 400
    clip_norm: float = 5.0
    seed: int = 0


@attr.s(auto_attribs=True, frozen=True)
class ExperimentConfig:
    data: DataConfig = attr.Factory(DataConfig)
    model: ModelConfig = attr.Factory(ModelConfig)
    loss: LossConfig = attr.Factory(LossConfig)
    optim: OptimConfig = attr.Factory(OptimConfig)

    def __attrs_post_init__(self):
        validate(self)


def validate(cfg: ExperimentConfig):
    """
    :raises ConfigError: if the configuration breaks a structural rule
    """
    m = cfg.model
    if m.n_m1 < 0 or m.n_m2 < 0 or m.n_m1 + m.n_m2 <= 0:
        raise ConfigError(f'Need at least one M2A block, got n_m1={m.n_m1} n_m2={m.n_m2}')
    if m.variant not in CROSS_VARIANTS:
        raise ConfigError(f'variant must be one of {CROSS_VARIANTS}, got "{m.variant}"')
    if m.variant == 'mct' and m.n_m2 > 0:
        raise ConfigError('MCT cross-channel attention needs a fixed channel count: set n_m2 = 0')
    if m.d_model % m.heads:
        raise ConfigError(f'd_model {m.d_model} is not divisible by {m.heads} heads')
    if not m.cnndd_channels:
        raise ConfigError('cnndd_channels must not be empty')
    if m.ifsd_tau < 2 or m.ifsd_alpha <= 0:
        raise ConfigError(f'Invalid IFSD constants alpha={m.ifsd_alpha} tau={m.ifsd_tau}')
    if m.compression not in ('none', 'log1p'):
        raise ConfigError(f'Unknown compression "{m.compression}"')
    if m.clusters < 0:
        raise ConfigError(f'clusters must be >= 0, got {m.clusters}')
    if cfg.data.n_speakers < 1 or cfg.data.n_mics < 2:
        raise ConfigError(f'Invalid data shape: {cfg.data.n_speakers} speakers, {cfg.data.n_mics} mics')
    if cfg.optim.steps < 0 or cfg.optim.batch_size < 1:
        raise ConfigError(f'Invalid optimizer settings {cfg.optim}')


def preset(name: str = 'desk') -> ExperimentConfig:
    """
    micro: gradient-check scale. desk: default. paper: full-size model dimensions.
    """
    if name == 'desk':
        return ExperimentConfig()
    if name == 'micro':
        model = ModelConfig(
            d_model=8,
            heads=2,
            d_ff=16,
            n_m1=1,
            n_m2=1,
            n_d=1,
            embed_dim=8,
            cnndd_channels=[4, 4],
            ifsd_tau=4,
            max_decode_len=8,
        )
        return ExperimentConfig(model=model, optim=OptimConfig(warmup=200))
    if name == 'paper':
        model = ModelConfig(
            d_model=256,
            heads=4,
            d_ff=1024,
            n_m1=3,
            n_m2=3,
            n_d=6,
            embed_dim=256,
            cnndd_channels=[6, 6, 10, 10, 20, 20, 40, 40],
        )
        return ExperimentConfig(model=model)
    raise ConfigError(f'Unknown preset "{name}", expected one of {PRESETS}')


def _parse_value(field: attr.Attribute, text: str):
    kind = field.type
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(text)
            return lowered == 'true'
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return _int_list(text)
    except ValueError:
        raise ConfigError(f'Invalid value "{text}" for {field.name} ({kind})')


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    return str(value)


def parse_config(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    """
    Apply ``section.key = value`` lines on top of base (default: the desk preset).

    :raises ConfigError: on malformed lines, unknown keys or invalid values
    """
    cfg = ExperimentConfig() if base is None else base
    updates = {section: {} for section in SECTIONS}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        section, dot, name = key.strip().partition('.')
        if not sep or not dot:
            raise ConfigError(f'Line {number}: expected "section.key = value", got "{raw}"')
        if section not in SECTIONS:
            raise ConfigError(f'Line {number}: unknown section "{section}"')
        fields = attr.fields_dict(type(getattr(cfg, section)))
        if name not in fields:
            raise ConfigError(f'Line {number}: unknown key "{section}.{name}"')
        updates[section][name] = _parse_value(fields[name], value.strip())
    try:
        return attr.evolve(
            cfg,
            **{
                section: attr.evolve(getattr(cfg, section), **values)
                for section, values in updates.items()
                if values
            },
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        for name, value in attr.asdict(getattr(cfg, section)).items():
            lines.append(f'{section}.{name} = {_format_value(value)}')
    return '\n'.join(lines) + '\n'


def load_config(path: Union[str, Path], base: ExperimentConfig = None) -> ExperimentConfig:
    with open(path, encoding='utf-8') as stream:
        return parse_config(stream.read(), base)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]):
    with open(path, 'w', encoding='utf-8') as stream:
        stream.write(dump_config(cfg))
