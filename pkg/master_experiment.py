import argparse
import os
import shutil
import sys
from datetime import datetime

import pandas as pd
import yaml

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), 'src')))
from nic.commands import cmd_generate, cmd_roa, cmd_train, converged_fraction
from nic.config import load_config, load_experiment_list
from nic.errors import BaselineError, NicError


def load_batch_settings(config_path="config.yml"):
    with open(config_path, "r") as f:
        return (yaml.safe_load(f) or {}).get('batch', {})


def archive_previous_results(output_dir):
    """
    Park whatever an earlier batch left in output_dir under archive/<timestamp>,
    so a new batch starts from an empty results tree.
    """
    if not os.path.exists(output_dir):
        return

    items_to_move = [i for i in os.listdir(output_dir) if i != "archive"]
    if not items_to_move:
        return

    ts = datetime.now().strftime("%Y%m%d%H%M%S")
    target_dir = os.path.join(output_dir, "archive", ts)

    print(f"Archiving previous results to {target_dir}...")
    os.makedirs(target_dir, exist_ok=True)

    for item in items_to_move:
        try:
            shutil.move(os.path.join(output_dir, item), os.path.join(target_dir, item))
        except OSError as e:
            print(f"Failed to move {item}: {e}")


def run_one(config_path, base_output_dir, seed=None):
    """generate -> train -> roa for the learned controller and both baselines."""
    cfg = load_config(config_path).with_overrides(seed=seed)
    out = os.path.join(base_output_dir, cfg.name)
    row = {'Experiment': cfg.name}

    cmd_generate(cfg, os.path.join(out, "generate"))
    train_summary = cmd_train(cfg, os.path.join(out, "generate"), os.path.join(out, "train"))
    row['Stage-2 Val Loss'] = train_summary['final_val'].get('stage2')

    learned = cmd_roa(cfg, os.path.join(out, "roa_learned"), checkpoints=os.path.join(out, "train"))
    row['Learned ROA'] = learned['membership']
    row['Learned Valid'] = learned['valid']
    row['Learned Converged'] = round(converged_fraction(learned), 3)

    for baseline in ("lqr", "zero"):
        label = baseline.upper() if baseline == "lqr" else "Zero"
        try:
            summary = cmd_roa(cfg, os.path.join(out, f"roa_{baseline}"), baseline=baseline)
            row[f'{label} ROA'] = summary['membership']
            row[f'{label} Valid'] = summary['valid']
        except BaselineError as e:
            print(f"{label} baseline unavailable for {cfg.name}: {e}")
            row[f'{label} ROA'] = None
            row[f'{label} Valid'] = False
    row['Samples'] = learned['n_samples']
    return row


def main(config_path="config.yml", seed=None):
    print("=== Master Experiment Orchestrator ===")
    settings = load_batch_settings(config_path)
    base_output_dir = settings.get('output_base_dir', 'results')

    archive_previous_results(base_output_dir)
    os.makedirs(base_output_dir, exist_ok=True)

    summary_results = []
    for path in load_experiment_list(config_path):
        print(f"\n--- Experiment: {path} ---")
        try:
            summary_results.append(run_one(path, base_output_dir, seed))
        except (NicError, FileNotFoundError) as e:
            print(f"CRITICAL: {type(e).__name__}: {e}. Skipping {path}.")

    if not summary_results:
        print("\nNo results to summarize.")
        return None

    print("\n\n=== FINAL SUMMARY REPORT ===")
    summary_df = pd.DataFrame(summary_results)
    cols = ['Experiment', 'Samples', 'Learned ROA', 'LQR ROA', 'Zero ROA',
            'Learned Valid', 'LQR Valid', 'Zero Valid', 'Learned Converged', 'Stage-2 Val Loss']
    cols = [c for c in cols if c in summary_df.columns]
    print(summary_df[cols].to_string(index=False))

    summary_csv = os.path.join(base_output_dir, "summary_report.csv")
    summary_df[cols].to_csv(summary_csv, index=False)
    print(f"\nSaved summary to {summary_csv}")
    return summary_df


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="config.yml", help="Batch config listing the experiments")
    parser.add_argument("--seed", type=int, help="Override every experiment's seed")
    args = parser.parse_args()

    main(config_path=args.config, seed=args.seed)
