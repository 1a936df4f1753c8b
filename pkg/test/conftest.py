import itertools
import logging
import logging.config
from typing import List, Sequence
import numpy as np
import pytest
from m2former.config import preset
from m2former.dataset import generate_dataset
from m2former.decoder import TokenSequence
from m2former.signal import AxisMeaning, FeatureStack, MixtureConfig, TokenAlphabet
from m2former.tensor import Parameter, Tensor
from m2former.utils import get_logging_config, make_rng


@pytest.fixture(scope='session', autouse=True)
def logging_fixture():
    logging.config.dictConfig(get_logging_config())


@pytest.fixture(scope='session')
def alphabet() -> TokenAlphabet:
    return TokenAlphabet.create(n_tokens=8, seed=0)


@pytest.fixture
def micro_cfg():
    return preset('micro')


@pytest.fixture
def tiny_dataset(tmp_path):
    """ 4 training and 2 test utterances of 2 speakers on 2 microphones. """
    mixture = MixtureConfig(n_speakers=2, n_mics=2, snr_db=20.0, min_tokens=2, max_tokens=3)
    return generate_dataset(mixture, {'n_tokens': 8, 'seed': 0}, 4, 2, seed=0, out_dir=tmp_path / 'data')


@pytest.helpers.register
def random_array(shape, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    return scale * make_rng(seed).standard_normal(shape)


@pytest.helpers.register
def random_parameter(shape, seed: int = 0, scale: float = 1.0, name: str = '') -> Parameter:
    return Parameter(random_array(shape, seed, scale), name=name)


@pytest.helpers.register
def decoupled(data, frame_rate: float = 25.0) -> FeatureStack:
    if not isinstance(data, Tensor):
        data = Tensor(data)
    return FeatureStack(data, AxisMeaning.DECOUPLED, frame_rate)


@pytest.helpers.register
def microphones(data, frame_rate: float = 100.0) -> FeatureStack:
    if not isinstance(data, Tensor):
        data = Tensor(data)
    return FeatureStack(data, AxisMeaning.MICROPHONES, frame_rate)


@pytest.helpers.register
def block_similarity(sizes: Sequence[int], eps: float = 0.0) -> np.ndarray:
    """ Block-diagonal matrix of ones (diagonal blocks given by sizes) plus eps off the blocks. """
    labels = np.repeat(np.arange(len(sizes)), sizes)
    z = np.where(labels[:, None] == labels[None, :], 1.0, eps)
    return z


@pytest.helpers.register
def same_partition(a: Sequence[int], b: Sequence[int]) -> bool:
    """ True when two labelings describe the same partition. """
    mapping = {}
    for x, y in zip(a, b):
        if mapping.setdefault(x, y) != y:
            return False
    return len(set(mapping.values())) == len(mapping)


@pytest.helpers.register
def brute_force_ctc(logits: np.ndarray, target: Sequence[int]) -> float:
    """ -log of the summed probability of every frame labeling that collapses to target. """
    log_probs = logits - logits.max(axis=1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
    frames, vocab = logits.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=frames):
        collapsed = [k for i, k in enumerate(path) if i == 0 or k != path[i - 1]]
        if [k for k in collapsed if k != 0] == list(target):
            total = np.logaddexp(total, sum(log_probs[t, k] for t, k in enumerate(path)))
    return -total


@pytest.helpers.register
def token_sequences(*sequences: List[int]) -> List[TokenSequence]:
    return [TokenSequence(s) for s in sequences]
