import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

# fixed salt and no date stamp, so reruns write identical SVG bytes
plt.rcParams['svg.hashsalt'] = 'nic'

VERDICT_COLORS = {
    'converged': 'tab:green',
    'left_domain': 'tab:red',
    'energy_above_threshold': 'tab:orange',
}


def _save(output_file):
    plt.tight_layout()
    plt.savefig(output_file, format='svg', metadata={'Date': None})
    print(f"Saved {output_file}")
    plt.close()


def plot_roa_slice(grid_df, dims, output_file='roa_slice.svg', title=None):
    """Scatter of a 2-D ROA slice, one colour per verdict."""
    xi, xj = f"x{dims[0]}", f"x{dims[1]}"
    plt.figure(figsize=(7, 6))
    for verdict, color in VERDICT_COLORS.items():
        part = grid_df[grid_df['verdict'] == verdict]
        if not part.empty:
            plt.scatter(part[xi], part[xj], s=8, color=color, label=verdict)
    plt.scatter([0.0], [0.0], marker='x', color='black', label='equilibrium')
    plt.title(title or 'Region of attraction (slice)')
    plt.xlabel(xi)
    plt.ylabel(xj)
    plt.grid(True, alpha=0.3)
    plt.legend(loc='upper right', fontsize=8)
    _save(output_file)


def plot_failure_map(map_df, dims, output_file='failure_map.svg', title=None):
    xi, xj = f"x{dims[0]}", f"x{dims[1]}"
    pivot = map_df.pivot(index=xj, columns=xi, values='p_fail').sort_index(ascending=False)
    pivot.index = [f"{v:.2f}" for v in pivot.index]
    pivot.columns = [f"{v:.2f}" for v in pivot.columns]

    plt.figure(figsize=(9, 7))
    sns.heatmap(pivot, vmin=0.0, vmax=1.0, cmap='RdYlGn_r', cbar_kws={'label': 'failure probability'})
    plt.title(title or 'MC dropout failure probability')
    plt.xlabel(xi)
    plt.ylabel(xj)
    _save(output_file)


def plot_loss_curves(curves: pd.DataFrame, output_file='loss_curves.svg', title=None):
    plt.figure(figsize=(10, 5))
    for stage, part in curves.groupby('stage', sort=False):
        plt.semilogy(part['epoch'], part['train_loss'], label=f'{stage} train')
        plt.semilogy(part['epoch'], part['val_loss'], linestyle='--', label=f'{stage} val')
    plt.title(title or 'Training loss')
    plt.xlabel('Epoch')
    plt.ylabel('Mean squared error')
    plt.grid(True, alpha=0.3)
    plt.legend()
    _save(output_file)


def plot_phase_portrait(trajectories, dims, output_file='phase_portrait.svg', title=None, domain=None):
    """Trajectories (list of (T, n) state arrays) projected onto two coordinates."""
    plt.figure(figsize=(7, 7))
    for states in trajectories:
        states = np.asarray(states)
        plt.plot(states[:, dims[0]], states[:, dims[1]], linewidth=0.8, color='tab:blue', alpha=0.8)
        plt.plot(states[0, dims[0]], states[0, dims[1]], 'o', markersize=2, color='tab:blue')
    plt.plot(0.0, 0.0, 'x', color='black')
    if domain is not None:
        lo, hi = domain
        plt.xlim(lo[dims[0]], hi[dims[0]])
        plt.ylim(lo[dims[1]], hi[dims[1]])
    plt.title(title or 'Phase portrait')
    plt.xlabel(f"x{dims[0]}")
    plt.ylabel(f"x{dims[1]}")
    plt.grid(True, alpha=0.3)
    _save(output_file)


def generate_dashboard(output_dir, report, name=None):
    """Training charts for one run, written into output_dir."""
    os.makedirs(output_dir, exist_ok=True)
    if not report.curves.empty:
        plot_loss_curves(report.curves, os.path.join(output_dir, 'loss_curves.svg'),
                         title=f'Training loss - {name}' if name else None)
