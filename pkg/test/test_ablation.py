import multiprocessing as mp
import time
import attr
import pandas as pd
import pytest
from m2former.ablation import (
    ABLATION_COLUMNS,
    AXES,
    COMPLETE,
    ablate_config,
    ablation_cells,
    get_all_from_queue,
    run_ablation,
)
from m2former.config import preset
from m2former.constants import ABLATION_CSV
from m2former.exc import ConfigError


def test_complete_cell_is_the_base_config():
    cfg = preset('desk')
    assert ablate_config(cfg, COMPLETE) is cfg


def test_each_axis_changes_only_its_component():
    cfg = preset('desk')
    model = cfg.model
    assert ablate_config(cfg, 'ifsd').model == attr.evolve(model, clusters=2, ifsd_enabled=False)
    assert ablate_config(cfg, 'm2a1').model == attr.evolve(model, n_m1=0, n_m2=4)
    assert ablate_config(cfg, 'm2a2').model == attr.evolve(model, n_m1=4, n_m2=0)
    assert ablate_config(cfg, 'cnndd').model.cnndd_channels == [8, 8]
    mct = ablate_config(cfg, 'mct').model
    assert (mct.variant, mct.n_m1, mct.n_m2) == ('mct', 4, 0)
    for axis in AXES:
        ablated = ablate_config(cfg, axis)
        assert (ablated.data, ablated.loss, ablated.optim) == (cfg.data, cfg.loss, cfg.optim)


def test_combined_axes_apply_together():
    cfg = preset('paper')
    model = ablate_config(cfg, 'cnndd+mct').model
    assert model.cnndd_channels == [40, 40]
    assert (model.variant, model.n_m1, model.n_m2) == ('mct', 6, 0)


def test_invalid_cells_raise_config_error():
    with pytest.raises(ConfigError, match='Unknown ablation axis'):
        ablate_config(preset('desk'), 'decoder')
    with pytest.raises(ConfigError, match='both M2A stages'):
        ablate_config(preset('desk'), 'm2a1+m2a2')


def test_cells_start_with_the_complete_model():
    assert ablation_cells([]) == [COMPLETE]
    assert ablation_cells(['ifsd', ' mct', 'ifsd', '']) == [COMPLETE, 'ifsd', 'mct']


def test_get_all_from_queue():
    queue = mp.Queue()
    queue.put(('ifsd', {'cell': 'ifsd'}))
    queue.put(('mct', {'cell': 'mct'}))
    # the feeder thread flushes asynchronously
    time.sleep(0.1)
    cells, rows = get_all_from_queue(queue)
    assert cells == ['ifsd', 'mct']
    assert rows == [{'cell': 'ifsd'}, {'cell': 'mct'}]


def test_unknown_axis_fails_before_training(tmp_path):
    with pytest.raises(ConfigError):
        run_ablation(preset('micro'), ['bogus'], tmp_path / 'data', tmp_path / 'out')
    assert not (tmp_path / 'out').exists()


def test_ablation_table(tiny_dataset, tmp_path):
    cfg = preset('micro')
    cfg = attr.evolve(
        cfg, data=attr.evolve(cfg.data, n_mics=2), optim=attr.evolve(cfg.optim, steps=1, batch_size=2)
    )
    table = run_ablation(cfg, ['ifsd'], tiny_dataset, tmp_path / 'out', workers=1)
    assert table['cell'].tolist() == [COMPLETE, 'ifsd']
    assert list(table.columns) == ABLATION_COLUMNS
    written = pd.read_csv(tmp_path / 'out' / ABLATION_CSV)
    assert written['cell'].tolist() == [COMPLETE, 'ifsd']
    assert (tmp_path / 'out' / 'ifsd' / 'model.ckpt').exists()


@pytest.mark.parametrize('axis', ['m2a1', 'm2a2'])
def test_m2a_cells_keep_the_block_count(axis):
    model = ablate_config(preset('paper'), axis).model
    assert model.n_m1 + model.n_m2 == 6
    assert 0 in (model.n_m1, model.n_m2)
