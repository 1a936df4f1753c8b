#!/usr/bin/env python
import argparse
import pandas as pd
from pathlib import Path
from m2former.dataset import read_manifest
from m2former.utils import logger, configure_logging

parser = argparse.ArgumentParser()
parser.add_argument('path', help='Dataset split directory (contains manifest.json)', type=str)


def manifest_rows(manifest: dict):
    """ One row per utterance and speaker. """
    for entry in manifest['utterances']:
        for speaker, (tokens, meta) in enumerate(zip(entry['transcripts'], entry['source_meta'])):
            yield {
                'utt_id': entry['utt_id'],
                'speaker': speaker,
                'tokens': ' '.join(str(t) for t in tokens),
                'n_tokens': len(tokens),
                'onset': meta['onset'],
                'max_delay': max(meta['delays']),
                'mean_gain': sum(meta['gains']) / len(meta['gains']),
                'n_samples': entry['n_samples'],
                'snr_db': entry['snr_db'],
                'noise_std': entry['noise_std'],
            }


if __name__ == '__main__':
    configure_logging()
    args = parser.parse_args()
    path = Path(args.path)
    path_out = path / 'manifest.csv'
    df = pd.DataFrame(list(manifest_rows(read_manifest(path))))
    logger.info(f'Write {len(df)} manifest rows from {path} to {path_out}')
    df.to_csv(path_out, sep=';', index=False)
