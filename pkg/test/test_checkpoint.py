import attr
import numpy as np
import pytest
from m2former import __version__
from m2former.checkpoint import load_checkpoint, read_header, save_checkpoint
from m2former.config import dump_config
from m2former.constants import CHECKPOINT_VERSION
from m2former.exc import CheckpointError
from m2former.model import M2Former


@pytest.fixture
def saved(micro_cfg, tmp_path):
    model = M2Former.from_config(micro_cfg)
    # Move away from the seeded initialization so loading cannot pass by re-initializing
    for p in model.parameters():
        p.assign(p.data + 0.125)
    path = save_checkpoint(model, micro_cfg, tmp_path / 'model.ckpt', step=17, rng_state={'seed': 3})
    return model, path


def test_round_trip_is_bit_identical(micro_cfg, saved):
    model, path = saved
    loaded, cfg, info = load_checkpoint(path)
    assert cfg == micro_cfg
    assert info.step == 17 and info.rng_state == {'seed': 3}
    assert info.package_version == __version__
    expected = model.state_dict()
    actual = loaded.state_dict()
    assert list(actual) == list(expected)
    for name in expected:
        assert actual[name].tobytes() == expected[name].tobytes(), name


def test_header_lists_parameters_in_model_order(saved):
    model, path = saved
    header, data = read_header(path)
    assert [entry['name'] for entry in header['parameters']] == [name for name, _ in model.named_parameters()]
    assert len(data) == 8 * sum(p.size for p in model.parameters())
    assert header['version'] == CHECKPOINT_VERSION
    assert header['step'] == 17


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / 'not.ckpt'
    path.write_bytes(b'PK\x03\x04' + bytes(32))
    with pytest.raises(CheckpointError, match='not an m2former checkpoint'):
        read_header(path)


def test_truncated_file_is_rejected(saved, tmp_path):
    _, path = saved
    short = tmp_path / 'short.ckpt'
    short.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(short)


def test_config_mismatch_is_rejected(micro_cfg, saved):
    _, path = saved
    other = attr.evolve(micro_cfg, optim=attr.evolve(micro_cfg.optim, steps=micro_cfg.optim.steps + 1))
    with pytest.raises(CheckpointError, match='Config'):
        load_checkpoint(path, other)
    load_checkpoint(path, micro_cfg)


def test_parameter_mismatch_is_rejected(micro_cfg, tmp_path):
    # Written by a model with a wider decoder than the stored config describes
    wide = attr.evolve(micro_cfg, model=attr.evolve(micro_cfg.model, d_ff=24))
    path = save_checkpoint(M2Former.from_config(wide), micro_cfg, tmp_path / 'mismatch.ckpt')
    with pytest.raises(CheckpointError, match='parameters'):
        load_checkpoint(path)


def test_save_replaces_existing_file(micro_cfg, tmp_path):
    path = tmp_path / 'model.ckpt'
    model = M2Former.from_config(micro_cfg)
    save_checkpoint(model, micro_cfg, path, step=1)
    save_checkpoint(model, micro_cfg, path, step=2)
    assert read_header(path)[0]['step'] == 2
    assert dump_config(load_checkpoint(path)[1]) == dump_config(micro_cfg)
    np.testing.assert_array_equal(
        load_checkpoint(path)[0].ctc_head.weight.data, model.ctc_head.weight.data
    )
