import attr
import numpy as np
import pandas as pd
import pytest
from m2former.checkpoint import load_checkpoint
from m2former.config import load_config, preset
from m2former.constants import CONFIG_FILENAME, LOSS_CSV
from m2former.decoder import PitResult
from m2former.exc import ConfigError, NonFiniteError
from m2former.model import M2Former
from m2former.tensor import Tensor
from m2former.train import LOSS_COLUMNS, check_dataset, train


def tiny_cfg(steps=2, **model):
    cfg = preset('micro')
    return attr.evolve(
        cfg,
        data=attr.evolve(cfg.data, n_mics=2, n_tokens=8),
        model=attr.evolve(cfg.model, **model),
        optim=attr.evolve(cfg.optim, steps=steps, batch_size=2, warmup=10),
    )


def test_zero_steps_saves_the_initialization(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=0)
    result = train(cfg, tiny_dataset, tmp_path / 'run')
    assert result.losses.empty
    initial = M2Former.from_config(cfg).state_dict()
    loaded, _, info = load_checkpoint(result.checkpoint)
    assert info.step == 0
    for name, value in loaded.state_dict().items():
        assert np.array_equal(value, initial[name]), name


def test_training_writes_loss_curve_config_and_checkpoint(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=3)
    out = tmp_path / 'run'
    result = train(cfg, tiny_dataset, out)
    losses = pd.read_csv(out / LOSS_CSV)
    assert list(losses.columns) == LOSS_COLUMNS
    assert losses['step'].tolist() == [1, 2, 3]
    assert np.all(np.isfinite(losses['loss']))
    assert load_config(out / CONFIG_FILENAME) == cfg
    _, stored, info = load_checkpoint(result.checkpoint, cfg)
    assert info.step == 3 and stored == cfg
    assert not result.model.training


def test_training_is_deterministic(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=2)
    first = train(cfg, tiny_dataset, tmp_path / 'a')
    second = train(cfg, tiny_dataset, tmp_path / 'b')
    pd.testing.assert_frame_equal(first.losses, second.losses)
    assert (tmp_path / 'a' / 'model.ckpt').read_bytes() == (tmp_path / 'b' / 'model.ckpt').read_bytes()


def test_training_changes_the_parameters(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=1)
    trained = train(cfg, tiny_dataset, tmp_path / 'run').model.state_dict()
    initial = M2Former.from_config(cfg).state_dict()
    assert any(not np.array_equal(trained[name], initial[name]) for name in initial)


def test_non_finite_loss_names_the_step(tiny_dataset, tmp_path, monkeypatch):
    def nan_loss(self, features, refs, cfg=None, assignment=None, permutation=None):
        return PitResult(tuple(range(len(refs))), np.zeros((len(refs), len(refs))), Tensor(np.nan), 0.0, 0.0)

    monkeypatch.setattr(M2Former, 'loss', nan_loss)
    with pytest.raises(NonFiniteError) as info:
        train(tiny_cfg(steps=2), tiny_dataset, tmp_path / 'run')
    assert info.value.step == 1
    assert 'Step 1' in str(info.value)


def test_dataset_must_match_the_config(tiny_dataset):
    check_dataset(tiny_cfg(), tiny_dataset / 'train')
    cfg = tiny_cfg()
    with pytest.raises(ConfigError, match='microphones'):
        check_dataset(attr.evolve(cfg, data=attr.evolve(cfg.data, n_mics=4)), tiny_dataset / 'train')
    with pytest.raises(ConfigError, match='tokens'):
        check_dataset(attr.evolve(cfg, data=attr.evolve(cfg.data, n_tokens=6)), tiny_dataset / 'train')


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(tiny_cfg(), tmp_path / 'nowhere', tmp_path / 'run')
