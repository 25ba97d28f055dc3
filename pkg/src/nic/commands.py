"""
Config-driven pipelines behind run_experiment.py. Every command writes its
artifacts under `out` and returns a small summary dict for the orchestrator.
"""
from datetime import datetime
import os

import numpy as np
import pandas as pd
import yaml

from .config import (
    ExperimentConfig, build_iterative_settings, build_plant, build_stability, build_thresholds,
    build_train_config, evaluation_plant, lqr_weights,
)
from .errors import ConfigError
from .evaluation import (
    CONVERGED, estimate_roa, iterative_learning, lqr_controller, lqr_gain, mc_dropout_map,
    hypothesis_plant, response_metrics, roa_slice_grid, simulate_closed_loop, slice_grid, zero_controller,
)
from .numkit import Rng
from .plants import generate_dataset, load_dataset, save_dataset
from .plots import generate_dashboard, plot_failure_map, plot_phase_portrait, plot_roa_slice
from .stability import init_stability_head
from .training import load_model, save_model, train_model

# rng stream ids of the command layer
STREAM_TRAIN_DATA = 1
STREAM_VAL_DATA = 2
STREAM_ROA = 3
STREAM_MC = 4
STREAM_ITERATE = 5
STREAM_PORTRAIT_HEAD = 6

TRAIN_FILE = 'train.csv'
VAL_FILE = 'val.csv'
BASELINES = ('lqr', 'zero')
SOURCES = ('hypothesis', 'closed_loop')
PORTRAIT_GRID = 7


def _write_summary(path, doc):
    """YAML summary; the creation timestamp is its only run-dependent field."""
    doc = {'created': datetime.now().isoformat(timespec='seconds'), **doc}
    with open(path, 'w') as f:
        yaml.safe_dump(doc, f, sort_keys=False)
    print(f"Saved {path}")


def _save_frame(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format='%.17g')
    print(f"Saved {path}")


def cmd_generate(cfg: ExperimentConfig, out):
    print(f"=== Generate: {cfg.name} ===")
    plant = build_plant(cfg)
    os.makedirs(out, exist_ok=True)
    rng = Rng(cfg.seed)
    train = generate_dataset(plant, cfg.data.n_train, rng.child(STREAM_TRAIN_DATA),
                             cfg.data.include_zero_input, split='train')
    val = generate_dataset(plant, cfg.data.n_val, rng.child(STREAM_VAL_DATA),
                           cfg.data.include_zero_input, split='val')
    print(f"Sampled {len(train)} training and {len(val)} validation pairs from {plant.name}.")
    for ds, name in ((train, TRAIN_FILE), (val, VAL_FILE)):
        save_dataset(ds, os.path.join(out, name), plant.input_norm)
        print(f"Saved {os.path.join(out, name)}")
    return {'plant': plant.name, 'n_train': len(train), 'n_val': len(val)}


def cmd_train(cfg: ExperimentConfig, dataset_dir, out):
    print(f"=== Train: {cfg.name} ===")
    plant = build_plant(cfg)
    train = load_dataset(os.path.join(dataset_dir, TRAIN_FILE))
    val = load_dataset(os.path.join(dataset_dir, VAL_FILE))
    if train.n != plant.n or train.m != plant.m:
        raise ConfigError(f"dataset has n={train.n}, m={train.m} but {plant.name} has n={plant.n}, m={plant.m}",
                          field='plant.kind')
    print(f"Loaded {len(train)} training / {len(val)} validation samples.")

    train_cfg = build_train_config(cfg, plant, verbose=True)
    model, report = train_model(train, val, train_cfg)

    os.makedirs(out, exist_ok=True)
    save_model(model, out)
    print(f"Saved checkpoints to {out}")
    _save_frame(report.curves, os.path.join(out, 'train_curves.csv'))
    summary = report.summary()
    _write_summary(os.path.join(out, 'train_report.yml'), {'experiment': cfg.name, **summary})
    generate_dashboard(out, report=report, name=cfg.name)

    print("\n--- Training Summary ---")
    for stage, value in summary['final_val'].items():
        print(f"{stage} final val loss: {value:.4e} (best {summary['best_val'][stage]:.4e})")
    return summary


def _controller(cfg, plant, checkpoints=None, baseline=None):
    """(controller, description) for a learned model or a baseline."""
    if checkpoints is not None and baseline is not None:
        raise ConfigError("give either checkpoints or a baseline, not both", field='baseline')
    if baseline == 'zero':
        return zero_controller(plant), {'controller': 'zero'}
    if baseline == 'lqr':
        Q_lqr, R_lqr = lqr_weights(cfg, plant)
        gain = lqr_gain(plant, Q_lqr, R_lqr, cfg.lqr.h_disc)
        print(f"LQR gain converged in {gain.iterations} Riccati iterations.")
        return lqr_controller(gain, plant), {'controller': 'lqr', 'K': gain.K.tolist(),
                                             'riccati_iterations': gain.iterations}
    if baseline is not None:
        raise ConfigError(f"must be one of {BASELINES}, got {baseline!r}", field='baseline')
    if checkpoints is None:
        raise ConfigError("a checkpoint directory or a baseline is required", field='checkpoints')
    model = load_model(checkpoints)
    if model.pi.input_dim != plant.n:
        raise ConfigError(f"policy expects {model.pi.input_dim} states, plant has {plant.n}", field='checkpoints')
    return model.policy(), {'controller': 'learned', 'checkpoints': str(checkpoints)}


def cmd_simulate(cfg: ExperimentConfig, checkpoints, x0_list, out, baseline=None):
    print(f"=== Simulate: {cfg.name} ===")
    plant = evaluation_plant(cfg)
    controller, desc = _controller(cfg, plant, checkpoints, baseline)
    Q = build_stability(cfg).Q
    os.makedirs(out, exist_ok=True)

    rows = []
    for i, x0 in enumerate(x0_list):
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (plant.n,):
            raise ConfigError(f"initial state {i} has {x0.size} entries, expected {plant.n}", field='x0')
        traj = simulate_closed_loop(plant, controller, x0, cfg.roa.horizon, cfg.roa.step, Q)
        _save_frame(traj.to_frame(), os.path.join(out, f'trajectory_{i}.csv'))
        metrics = response_metrics(traj)
        metrics.insert(0, 'trajectory', i)
        rows.append(metrics)
        status = 'left domain' if traj.left_domain else f"final |x| = {np.linalg.norm(traj.states[-1]):.3e}"
        print(f"Trajectory {i}: {len(traj.times)} steps, {status}")

    _save_frame(pd.concat(rows, ignore_index=True), os.path.join(out, 'response_metrics.csv'))
    return {'experiment': cfg.name, 'trajectories': len(x0_list), **desc}


def cmd_roa(cfg: ExperimentConfig, out, checkpoints=None, baseline=None):
    print(f"=== ROA: {cfg.name} ({baseline or 'learned'}) ===")
    plant = evaluation_plant(cfg)
    controller, desc = _controller(cfg, plant, checkpoints, baseline)
    Q = build_stability(cfg).Q
    thresholds = build_thresholds(cfg)
    os.makedirs(out, exist_ok=True)

    roa = estimate_roa(plant, controller, cfg.roa.n_samples, thresholds, Rng(cfg.seed).child(STREAM_ROA), Q)
    _save_frame(roa.to_frame(), os.path.join(out, 'roa_samples.csv'))
    grid = roa_slice_grid(plant, controller, cfg.roa.slice, cfg.roa.grid, thresholds, Q, tau_v=roa.tau_v)
    _save_frame(grid, os.path.join(out, 'roa_slice.csv'))
    plot_roa_slice(grid, cfg.roa.slice, os.path.join(out, 'roa_slice.svg'),
                   title=f"Region of attraction - {cfg.name} ({desc['controller']})")

    summary = {'experiment': cfg.name, **desc, **roa.summary(),
               'domain_lo': plant.state_lo.tolist(), 'domain_hi': plant.state_hi.tolist()}
    _write_summary(os.path.join(out, 'roa_summary.yml'), summary)
    print(f"Membership: {roa.membership}/{cfg.roa.n_samples} (tau_N = {roa.tau_n}, valid = {roa.valid})")
    if not roa.valid:
        print("Controller flagged invalid: too few initial states converge.")
    return summary


def cmd_iterate(cfg: ExperimentConfig, out):
    print(f"=== Iterate: {cfg.name} ({cfg.iterate.rounds} rounds) ===")
    base = build_plant(cfg)
    plant = base.scaled(cfg.roa.domain_scale)
    initial = (base.state_lo * cfg.iterate.initial_scale, base.state_hi * cfg.iterate.initial_scale)
    settings = build_iterative_settings(cfg, base, verbose=True)
    results, halted = iterative_learning(plant, initial, cfg.iterate.rounds, settings,
                                         Rng(cfg.seed).child(STREAM_ITERATE))

    os.makedirs(out, exist_ok=True)
    rounds = []
    for r in results:
        round_dir = os.path.join(out, f'round_{r.round}')
        os.makedirs(round_dir, exist_ok=True)
        save_model(r.model, round_dir)
        _save_frame(r.report.curves, os.path.join(round_dir, 'train_curves.csv'))
        _save_frame(r.roa.to_frame(), os.path.join(round_dir, 'roa_samples.csv'))
        rounds.append({
            'round': r.round,
            'train_domain_lo': np.asarray(r.domain_lo).tolist(),
            'train_domain_hi': np.asarray(r.domain_hi).tolist(),
            'membership': r.roa.membership,
            'valid': bool(r.roa.valid),
            'final_val': {s: r.report.final_val(s) for s in r.report.curves['stage'].unique()},
        })

    summary = {'experiment': cfg.name, 'rounds_requested': cfg.iterate.rounds,
               'rounds_completed': len(results), 'halted': halted, 'rounds': rounds}
    _write_summary(os.path.join(out, 'iterate_summary.yml'), summary)

    print("\n--- Membership per round ---")
    print(pd.DataFrame(rounds)[['round', 'membership', 'valid']].to_string(index=False))
    return summary


def cmd_mc_dropout(cfg: ExperimentConfig, checkpoints, out, grid=None):
    print(f"=== MC dropout: {cfg.name} ===")
    if cfg.training.dropout <= 0:
        raise ConfigError("MC dropout needs a policy trained with dropout > 0", field='training.dropout')
    plant = evaluation_plant(cfg)
    model = load_model(checkpoints)
    Q = build_stability(cfg).Q
    dims = cfg.roa.slice
    resolution = cfg.mc_dropout.grid if grid is None else grid
    X0 = slice_grid(plant, dims, resolution, cfg.mc_dropout.radius_scale)

    p_fail = mc_dropout_map(plant, model.pi, X0, build_thresholds(cfg), Rng(cfg.seed).child(STREAM_MC), Q,
                            n_mc=cfg.mc_dropout.n_mc, p_drop=cfg.training.dropout)
    os.makedirs(out, exist_ok=True)
    df = pd.DataFrame({f"x{d}": X0[:, d] for d in dims})
    df['p_fail'] = p_fail
    _save_frame(df, os.path.join(out, 'failure_map.csv'))
    plot_failure_map(df, dims, os.path.join(out, 'failure_map.svg'), title=f'MC dropout failure map - {cfg.name}')

    summary = {'experiment': cfg.name, 'n_mc': cfg.mc_dropout.n_mc, 'grid': resolution,
               'mean_failure': float(np.mean(p_fail)), 'max_failure': float(np.max(p_fail))}
    _write_summary(os.path.join(out, 'mc_dropout_summary.yml'), summary)
    return summary


def cmd_phase_portrait(cfg: ExperimentConfig, source, out, checkpoints=None):
    """
    hypothesis: integrates x' = f_s(x) (a trained head from checkpoints, else a
    freshly initialised one); closed_loop: the plant under the learned policy.
    """
    print(f"=== Phase portrait: {cfg.name} ({source}) ===")
    if source not in SOURCES:
        raise ConfigError(f"must be one of {SOURCES}, got {source!r}", field='source')
    base = evaluation_plant(cfg)
    stability = build_stability(cfg)
    if source == 'hypothesis':
        if checkpoints is not None:
            head = load_model(checkpoints).head
        else:
            head = init_stability_head(base.n, Rng(cfg.seed).child(STREAM_PORTRAIT_HEAD),
                                       tuple(cfg.network.hidden), stability.rows)
        plant = hypothesis_plant(stability, head, base.state_lo, base.state_hi)
        controller = zero_controller(plant)
    else:
        plant = base
        controller, _ = _controller(cfg, plant, checkpoints)

    dims = cfg.roa.slice
    starts = slice_grid(plant, dims, PORTRAIT_GRID)
    trajectories, frames = [], []
    for i, x0 in enumerate(starts):
        traj = simulate_closed_loop(plant, controller, x0, cfg.roa.horizon, cfg.roa.step, stability.Q)
        trajectories.append(traj.states)
        frame = traj.to_frame()
        frame.insert(0, 'trajectory', i)
        frames.append(frame)

    os.makedirs(out, exist_ok=True)
    _save_frame(pd.concat(frames, ignore_index=True), os.path.join(out, 'phase_trajectories.csv'))
    plot_phase_portrait(trajectories, dims, os.path.join(out, 'phase_portrait.svg'),
                        title=f'Phase portrait - {cfg.name} ({source})',
                        domain=(plant.state_lo, plant.state_hi))
    final = np.array([t[-1] for t in trajectories])
    reached = int(np.sum(np.linalg.norm(final, axis=1) < cfg.roa.final_radius_fraction * plant.radius()))
    return {'experiment': cfg.name, 'source': source, 'trajectories': len(starts), 'reached_origin': reached}


def converged_fraction(summary: dict) -> float:
    counts = summary.get('verdict_counts', {})
    total = summary.get('n_samples', 0)
    return counts.get(CONVERGED, 0) / total if total else 0.0
