"""
On-disk dataset splits: raw little-endian float64 waveforms plus a JSON manifest per split.
"""
import json
from pathlib import Path
from typing import List, Union
import attr
import numpy as np
from atomicwrites import atomic_write
from m2former.constants import MANIFEST_FILENAME, WAVEFORM_FMT
from m2former.signal import (
    MixtureConfig,
    MultiChannelRecording,
    SourceMeta,
    TokenAlphabet,
    synth_mixture,
)
from m2former.utils import logger

SPLITS = ('train', 'test')


def utterance_seed(seed: int, split: str, index: int) -> int:
    """ Independent per-utterance seed; splits draw from disjoint streams. """
    sequence = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(sequence.generate_state(1)[0])


def write_split(
    recordings: List[MultiChannelRecording],
    split_dir: Union[str, Path],
    alphabet_spec: dict,
) -> Path:
    """
    Write waveforms and manifest of one split.

    :param recordings: Recordings of the split
    :param split_dir: Output directory (created)
    :param alphabet_spec: Arguments of TokenAlphabet.create used for the recordings
    :return: Manifest path
    """
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in recordings:
        files = []
        for c in range(rec.n_mics):
            name = WAVEFORM_FMT.format(utt_id=rec.utt_id, channel=c)
            rec.samples[c].astype('<f8').tofile(str(split_dir / name))
            files.append(name)
        entries.append(
            {
                'utt_id': rec.utt_id,
                'channel_files': files,
                'sample_rate': rec.sample_rate,
                'n_samples': rec.n_samples,
                'transcripts': rec.transcripts,
                'source_meta': [attr.asdict(m) for m in rec.source_meta],
                'noise_std': rec.noise_std,
                'snr_db': rec.snr_db,
            }
        )
    manifest = {'alphabet': alphabet_spec, 'utterances': entries}
    path = split_dir / MANIFEST_FILENAME
    with atomic_write(str(path), overwrite=True) as stream:
        json.dump(manifest, stream, indent=2)
    logger.info(f'Wrote {len(entries)} utterances to {split_dir}')
    return path


def read_manifest(split_dir: Union[str, Path]) -> dict:
    path = Path(split_dir) / MANIFEST_FILENAME
    if not path.exists():
        raise FileNotFoundError(f'No dataset manifest at {path}')
    with open(path) as stream:
        return json.load(stream)


def load_alphabet(split_dir: Union[str, Path]) -> TokenAlphabet:
    return TokenAlphabet.create(**read_manifest(split_dir)['alphabet'])


def load_split(split_dir: Union[str, Path]) -> List[MultiChannelRecording]:
    """ Read every utterance listed in a split manifest. """
    split_dir = Path(split_dir)
    recordings = []
    for entry in read_manifest(split_dir)['utterances']:
        samples = np.stack(
            [np.fromfile(str(split_dir / name), dtype='<f8') for name in entry['channel_files']]
        )
        recordings.append(
            MultiChannelRecording(
                samples=samples.astype(np.float64),
                sample_rate=entry['sample_rate'],
                transcripts=entry['transcripts'],
                source_meta=[SourceMeta(**m) for m in entry['source_meta']],
                noise_std=entry['noise_std'],
                snr_db=entry['snr_db'],
                utt_id=entry['utt_id'],
            )
        )
    return recordings


def generate_dataset(
    mixture: MixtureConfig,
    alphabet_spec: dict,
    n_train: int,
    n_test: int,
    seed: int,
    out_dir: Union[str, Path],
) -> Path:
    """
    Generate train and test splits under out_dir. A pure function of its arguments.

    :return: out_dir as a Path
    """
    out_dir = Path(out_dir)
    alphabet = TokenAlphabet.create(**alphabet_spec)
    for split, count in zip(SPLITS, (n_train, n_test)):
        recordings = [
            synth_mixture(mixture, alphabet, utterance_seed(seed, split, i), utt_id=str(i))
            for i in range(count)
        ]
        write_split(recordings, out_dir / split, alphabet_spec)
    return out_dir
