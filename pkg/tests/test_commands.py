import pytest
import numpy as np
import pandas as pd
import yaml
import glob
import sys
import os

# Ensure we can import src and the top-level scripts
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.append(os.path.join(ROOT, 'src'))
sys.path.append(ROOT)

from nic.commands import (
    cmd_generate, cmd_iterate, cmd_mc_dropout, cmd_phase_portrait, cmd_roa, cmd_simulate, cmd_train,
)
from nic.config import build_plant, evaluation_plant, load_config, load_experiment_list, parse_config
from nic.errors import ConfigError
import master_experiment
import run_experiment


def tiny_doc(tmp_path, **sections):
    doc = {
        'schema': 'nic-experiment/1',
        'name': 'tiny',
        'seed': 3,
        'output_dir': str(tmp_path / 'out'),
        'plant': {'kind': 'pendulum', 'links': 1},
        'stability': {'q_diag': [0.9, 0.1], 'alpha': 0.5},
        'network': {'hidden': [8, 8]},
        'training': {'epochs': 2, 'batch_size': 16},
        'data': {'n_train': 64, 'n_val': 32},
        'roa': {'n_samples': 10, 'horizon': 3.0, 'grid': 3},
        'mc_dropout': {'n_mc': 2, 'grid': 3},
        'iterate': {'rounds': 1},
    }
    doc.update(sections)
    return doc


def write_config(tmp_path, doc, name='tiny.yml'):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return str(path)


@pytest.fixture
def tiny_cfg(tmp_path):
    return parse_config(tiny_doc(tmp_path))


def test_shipped_configs_load():
    paths = sorted(glob.glob(os.path.join(ROOT, 'configs', '*.yml')))
    assert len(paths) >= 5
    names = set()
    for path in paths:
        cfg = load_config(path)
        plant = build_plant(cfg)
        assert len(cfg.stability.q_diag) == plant.n
        names.add(cfg.name)
    assert {'pendulum_1link', 'pendulum_2link', 'pendulum_3link', 'cartpole', 'vehicle'} <= names


def test_shipped_config_values():
    two = load_config(os.path.join(ROOT, 'configs', 'pendulum_2link.yml'))
    assert two.stability.q_diag == [0.60, 0.32, 0.045, 0.035]
    assert two.stability.alpha == 0.5
    assert build_plant(two).input_bound == pytest.approx(10 * np.sqrt(2))
    vehicle = load_config(os.path.join(ROOT, 'configs', 'vehicle.yml'))
    assert vehicle.stability.q_diag == [0.96, 0.04]
    assert vehicle.stability.alpha == 0.05
    cart = load_config(os.path.join(ROOT, 'configs', 'cartpole.yml'))
    assert cart.stability.q_diag == [0.0001, 1.0, 0.0001, 0.004]


def test_shipped_configs_use_the_reference_training_settings():
    for path in sorted(glob.glob(os.path.join(ROOT, 'configs', '*.yml'))):
        cfg = load_config(path)
        t = cfg.training
        assert (t.epochs, t.batch_size, t.lr, t.lr_decay) == (300, 32, 1e-3, 0.99), cfg.name
        assert cfg.network.hidden == [64, 64, 64], cfg.name
        assert cfg.data.n_train == 10_000 and cfg.data.n_val == 5_000, cfg.name
    dropout = load_config(os.path.join(ROOT, 'configs', 'pendulum_1link_dropout.yml'))
    assert dropout.training.dropout == 0.2


def test_shipped_pendulums_can_hold_their_training_domain():
    # gravity torque at the domain corner stays below the input bound
    for name in ('pendulum_1link', 'pendulum_2link', 'pendulum_3link'):
        plant = build_plant(load_config(os.path.join(ROOT, 'configs', f'{name}.yml')))
        links = plant.m
        corner = np.concatenate([plant.state_hi[:links], np.zeros(links)])
        acc = plant.deriv(corner, np.zeros(links))[links:]
        mass_matrix = np.column_stack([
            plant.deriv(corner, np.eye(links)[j])[links:] - acc for j in range(links)
        ])
        gravity_torque = np.linalg.solve(mass_matrix, acc)
        assert np.linalg.norm(gravity_torque) < 0.5 * plant.input_bound, name


def test_batch_config_lists_existing_experiments():
    for path in load_experiment_list(os.path.join(ROOT, 'config.yml')):
        assert os.path.exists(path)


def test_unknown_key_names_its_field(tmp_path):
    doc = tiny_doc(tmp_path, training={'epochs': 2, 'epoch': 3})
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert info.value.field == 'training.epoch'


@pytest.mark.parametrize("change, field", [
    ({'schema': 'nic-experiment/0'}, 'schema'),
    ({'stability': {'q_diag': [0.9, 0.1, 0.3], 'alpha': 0.5}}, 'stability.q_diag'),
    ({'stability': {'q_diag': [0.9, 0.1], 'alpha': -1.0}}, 'stability.alpha'),
    ({'stability': {'q_diag': [0.9, -0.1], 'alpha': 0.5}}, 'stability.q_diag'),
    ({'plant': {'kind': 'pendulum', 'links': 1, 'input_bound': 0}}, 'plant.input_bound'),
    ({'plant': {'kind': 'pendulum', 'links': 5}}, 'plant.links'),
    ({'training': {'epochs': 'ten'}}, 'training.epochs'),
    ({'roa': {'slice': [0, 2]}}, 'roa.slice'),
    ({'colour': 'blue'}, 'colour'),
])
def test_invalid_configs(tmp_path, change, field):
    with pytest.raises(ConfigError) as info:
        parse_config(tiny_doc(tmp_path, **change))
    assert info.value.field == field


def test_overrides(tiny_cfg):
    cfg = tiny_cfg.with_overrides(seed=11, rounds=4)
    assert cfg.seed == 11 and cfg.iterate.rounds == 4
    assert tiny_cfg.seed == 3
    with pytest.raises(ConfigError):
        tiny_cfg.with_overrides(rounds=0)


def test_evaluation_plant_scales_domain_and_bound(tmp_path):
    cfg = parse_config(tiny_doc(tmp_path, roa={'domain_scale': 2.0, 'eval_bound_scale': 0.5}))
    plant = evaluation_plant(cfg)
    np.testing.assert_allclose(plant.state_hi, [2.0, 2.0])
    assert plant.input_bound == pytest.approx(5.0)


def test_generate_is_byte_identical(tmp_path, tiny_cfg):
    cmd_generate(tiny_cfg, tmp_path / 'a')
    cmd_generate(tiny_cfg, tmp_path / 'b')
    for name in ('train.csv', 'val.csv', 'train.meta.yml'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
    assert len(pd.read_csv(tmp_path / 'a' / 'train.csv')) == 64


def test_training_and_roa_reruns_are_byte_identical(tmp_path, tiny_cfg):
    cmd_generate(tiny_cfg, tmp_path / 'data')
    for run in ('a', 'b'):
        cmd_train(tiny_cfg, tmp_path / 'data', tmp_path / run / 'ckpt')
        cmd_roa(tiny_cfg, tmp_path / run / 'roa', checkpoints=tmp_path / run / 'ckpt')
    for name in ('ckpt/ghat.yml', 'ckpt/stability_head.yml', 'ckpt/policy.yml', 'ckpt/train_curves.csv',
                 'ckpt/loss_curves.svg', 'roa/roa_samples.csv', 'roa/roa_slice.csv', 'roa/roa_slice.svg'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name


def test_pipeline(tmp_path, tiny_cfg):
    data, ckpt = tmp_path / 'data', tmp_path / 'ckpt'
    cmd_generate(tiny_cfg, data)
    summary = cmd_train(tiny_cfg, data, ckpt)
    assert set(summary['final_val']) == {'ghat', 'stage2'}
    for name in ('ghat.yml', 'stability_head.yml', 'policy.yml', 'train_curves.csv', 'loss_curves.svg'):
        assert (ckpt / name).exists()

    learned = cmd_roa(tiny_cfg, tmp_path / 'roa', checkpoints=ckpt)
    assert learned['n_samples'] == 10
    grid = pd.read_csv(tmp_path / 'roa' / 'roa_slice.csv')
    assert len(grid) == 9
    assert (tmp_path / 'roa' / 'roa_slice.svg').exists()

    sim = cmd_simulate(tiny_cfg, ckpt, [[0.1, 0.0], [-0.2, 0.1]], tmp_path / 'sim')
    assert sim['trajectories'] == 2
    traj = pd.read_csv(tmp_path / 'sim' / 'trajectory_0.csv')
    assert list(traj.columns) == ['t', 'x0', 'x1', 'u0', 'V']

    portrait = cmd_phase_portrait(tiny_cfg, 'closed_loop', tmp_path / 'portrait', checkpoints=ckpt)
    assert portrait['trajectories'] == 49
    assert (tmp_path / 'portrait' / 'phase_portrait.svg').exists()


def test_zero_baseline_is_flagged_invalid(tmp_path, tiny_cfg):
    summary = cmd_roa(tiny_cfg, tmp_path / 'zero', baseline='zero')
    assert summary['valid'] is False
    doc = yaml.safe_load((tmp_path / 'zero' / 'roa_summary.yml').read_text())
    assert doc['valid'] is False
    assert doc['controller'] == 'zero'


def test_lqr_baseline_summary(tmp_path, tiny_cfg):
    summary = cmd_roa(tiny_cfg, tmp_path / 'lqr', baseline='lqr')
    assert summary['controller'] == 'lqr'
    assert len(summary['K'][0]) == 2


def test_roa_needs_a_controller(tmp_path, tiny_cfg):
    with pytest.raises(ConfigError):
        cmd_roa(tiny_cfg, tmp_path / 'none')


def test_hypothesis_portrait_without_checkpoints(tmp_path, tiny_cfg):
    summary = cmd_phase_portrait(tiny_cfg, 'hypothesis', tmp_path / 'hyp')
    assert summary['trajectories'] == 49
    assert 0 <= summary['reached_origin'] <= 49
    assert (tmp_path / 'hyp' / 'phase_trajectories.csv').exists()
    with pytest.raises(ConfigError):
        cmd_phase_portrait(tiny_cfg, 'sideways', tmp_path / 'hyp')


def test_mc_dropout_requires_dropout_training(tmp_path, tiny_cfg):
    with pytest.raises(ConfigError):
        cmd_mc_dropout(tiny_cfg, tmp_path / 'ckpt', tmp_path / 'mc')


def test_mc_dropout_map(tmp_path):
    cfg = parse_config(tiny_doc(tmp_path, training={'epochs': 2, 'batch_size': 16, 'dropout': 0.2}))
    cmd_generate(cfg, tmp_path / 'data')
    cmd_train(cfg, tmp_path / 'data', tmp_path / 'ckpt')
    summary = cmd_mc_dropout(cfg, tmp_path / 'ckpt', tmp_path / 'mc')
    df = pd.read_csv(tmp_path / 'mc' / 'failure_map.csv')
    assert len(df) == 9
    np.testing.assert_allclose(df['p_fail'] * 2, np.round(df['p_fail'] * 2))
    assert 0.0 <= summary['mean_failure'] <= 1.0


def test_iterate_writes_round_directories(tmp_path, tiny_cfg):
    summary = cmd_iterate(tiny_cfg, tmp_path / 'iter')
    assert summary['rounds_completed'] == 1
    assert (tmp_path / 'iter' / 'round_1' / 'policy.yml').exists()
    assert (tmp_path / 'iter' / 'iterate_summary.yml').exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert run_experiment.main(['generate', '--config', str(tmp_path / 'missing.yml')]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith('FileNotFoundError:')

    bad = write_config(tmp_path, tiny_doc(tmp_path, stability={'q_diag': [1.0], 'alpha': 0.5}), 'bad.yml')
    assert run_experiment.main(['generate', '--config', bad]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith('ConfigError: stability.q_diag')

    good = write_config(tmp_path, tiny_doc(tmp_path))
    assert run_experiment.main(['generate', '--config', good, '--out', str(tmp_path / 'gen'), '--seed', '5']) == 0
    assert (tmp_path / 'gen' / 'train.csv').exists()

    assert run_experiment.main(['train', '--config', good, '--dataset', str(tmp_path / 'nowhere'),
                                '--out', str(tmp_path / 'ckpt')]) == 3


def test_archive_parks_earlier_results(tmp_path):
    (tmp_path / 'pendulum_1link').mkdir()
    (tmp_path / 'batch_summary.csv').write_text('experiment\n')
    master_experiment.archive_previous_results(str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == ['archive']
    (stamp,) = list((tmp_path / 'archive').iterdir())
    assert sorted(p.name for p in stamp.iterdir()) == ['batch_summary.csv', 'pendulum_1link']
    master_experiment.archive_previous_results(str(tmp_path))
    assert len(list((tmp_path / 'archive').iterdir())) == 1
