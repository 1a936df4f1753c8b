import numpy as np
import pytest
from m2former.constants import MANIFEST_FILENAME
from m2former.dataset import (
    SPLITS,
    generate_dataset,
    load_alphabet,
    load_split,
    read_manifest,
    utterance_seed,
)
from m2former.signal import MixtureConfig, clean_image, synth_mixture


def test_generated_splits_match_direct_synthesis(tiny_dataset):
    alphabet = load_alphabet(tiny_dataset / 'train')
    mixture = MixtureConfig(n_speakers=2, n_mics=2, snr_db=20.0, min_tokens=2, max_tokens=3)
    for split, count in zip(SPLITS, (4, 2)):
        recordings = load_split(tiny_dataset / split)
        assert len(recordings) == count
        for i, rec in enumerate(recordings):
            expected = synth_mixture(mixture, alphabet, utterance_seed(0, split, i), utt_id=str(i))
            assert rec.utt_id == str(i)
            assert np.array_equal(rec.samples, expected.samples)
            assert rec.transcripts == expected.transcripts
            assert rec.source_meta == expected.source_meta
            assert rec.noise_std == expected.noise_std


def test_manifest_lists_channel_files_and_ground_truth(tiny_dataset):
    manifest = read_manifest(tiny_dataset / 'test')
    assert manifest['alphabet'] == {'n_tokens': 8, 'seed': 0}
    entry = manifest['utterances'][1]
    assert entry['channel_files'] == ['utt1_ch0.f64', 'utt1_ch1.f64']
    assert entry['sample_rate'] == 8000
    assert len(entry['transcripts']) == len(entry['source_meta']) == 2
    raw = np.fromfile(str(tiny_dataset / 'test' / 'utt1_ch1.f64'), dtype='<f8')
    assert len(raw) == entry['n_samples']


def test_loaded_metadata_reconstructs_clean_images(tiny_dataset):
    alphabet = load_alphabet(tiny_dataset / 'train')
    rec = load_split(tiny_dataset / 'train')[0]
    clean = sum(clean_image(rec, alphabet, s) for s in range(rec.n_speakers))
    residual = rec.samples - clean
    assert np.std(residual) == pytest.approx(rec.noise_std, rel=0.1)


def test_generation_is_a_pure_function_of_its_arguments(tmp_path):
    mixture = MixtureConfig(n_speakers=1, n_mics=2, min_tokens=1, max_tokens=2)
    spec = {'n_tokens': 4, 'seed': 1}
    a = generate_dataset(mixture, spec, 2, 1, seed=5, out_dir=tmp_path / 'a')
    b = generate_dataset(mixture, spec, 2, 1, seed=5, out_dir=tmp_path / 'b')
    for split in SPLITS:
        files = sorted(p.name for p in (a / split).iterdir())
        assert files == sorted(p.name for p in (b / split).iterdir())
        for name in files:
            assert (a / split / name).read_bytes() == (b / split / name).read_bytes()


def test_splits_use_disjoint_seed_streams():
    seeds = {utterance_seed(0, split, i) for split in SPLITS for i in range(50)}
    assert len(seeds) == 100
    assert utterance_seed(0, 'train', 3) != utterance_seed(1, 'train', 3)


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(FileNotFoundError, match=MANIFEST_FILENAME):
        load_split(tmp_path)
