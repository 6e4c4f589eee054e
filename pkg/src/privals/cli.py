"""Command-line interface for dataset prep, training, sweeps, and accounting."""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import accounting, data, harness, solver
from .evaluation import rmse as rmse_metric


def _apply_overrides(payload: dict, overrides) -> dict:
    """Apply dotted-path overrides like model.rank=16 onto a config dict."""
    for item in overrides:
        if "=" not in item:
            raise click.BadParameter(f"override must look like section.key=value: {item}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return payload


def _load_config(path, overrides):
    with open(path) as handle:
        payload = json.load(handle)
    payload = _apply_overrides(payload, overrides)
    return harness.ExperimentConfig.from_dict(payload)


@click.group()
def main():
    """Private matrix completion: train, evaluate, sweep, and account."""


@main.command()
@click.option("--n", type=int, required=True, help="number of users")
@click.option("--m", type=int, required=True, help="number of items")
@click.option("--rank", type=int, default=5, show_default=True)
@click.option("--p", type=float, default=None, help="observation probability (default 20 ln(n)/m)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="output directory")
def synth(n, m, rank, p, seed, out):
    """Generate a synthetic low-rank ratings CSV plus a manifest."""
    if p is None:
        p = 20.0 * math.log(n) / m
    ds, truth = data.generate_synthetic(n, m, rank, p, seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ratings.csv"
    with open(csv_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["user_id", "item_id", "rating"])
        for u, i, v in zip(ds.users, ds.items, ds.values):
            writer.writerow([int(u), int(i), repr(float(v))])
    # the truth is scale * (orthonormal U) @ V^T, so ||U||_F = scale * sqrt(r)
    scale = float(np.linalg.norm(truth.user_factors) / math.sqrt(rank))
    manifest = {
        "n": n,
        "m": m,
        "r": rank,
        "p": p,
        "seed": seed,
        "scale": scale,
        "observations": len(ds),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    click.echo(json.dumps(manifest, sort_keys=True))


@main.command()
@click.argument("path", type=click.Path(exists=True))
def ingest(path):
    """Validate a ratings CSV and print its statistics."""
    result = data.ingest_csv(path)
    ds = result.dataset
    stats = {
        "n": ds.n,
        "m": ds.m,
        "observations": len(ds),
        "duplicates_dropped": result.duplicates,
    }
    click.echo(json.dumps(stats, sort_keys=True))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None, help="override the first config seed")
@click.option("--epsilon", type=str, default=None, help="privacy target, or 'inf'")
@click.option("--set", "overrides", multiple=True, help="config override section.key=value")
def train(config_path, seed, epsilon, overrides):
    """Run one experiment cell and write its report."""
    config = _load_config(config_path, overrides)
    run_seed = config.seeds[0] if seed is None else seed
    eps = None
    if epsilon is not None:
        eps = math.inf if epsilon == "inf" else float(epsilon)
    report = harness.run_experiment(config, run_seed, eps)
    path = harness.write_report(config, report)
    click.echo(json.dumps({"report": str(path), "metrics": report.metrics}, sort_keys=True, default=str))
    if report.mode == "failed":
        sys.exit(1)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--set", "overrides", multiple=True)
def sweep(config_path, overrides):
    """Run the full (epsilon x seed) grid and summarize."""
    config = _load_config(config_path, overrides)
    runs_path, summary_path = harness.sweep(config)
    click.echo(json.dumps({"runs": str(runs_path), "summary": str(summary_path)}))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True)
def evaluate(config_path, checkpoint, seed, overrides):
    """Evaluate a saved factor checkpoint on the config's test split."""
    config = _load_config(config_path, overrides)
    run_seed = config.seeds[0] if seed is None else seed
    state = solver.load_checkpoint(checkpoint)
    ds = harness.build_dataset(config, run_seed)
    splits = harness._split(config, ds, run_seed)
    test = splits.get("test")
    if test is None or len(test) == 0:
        raise click.ClickException("config split has no test entries to evaluate")
    value = rmse_metric(state.factors, test)
    click.echo(json.dumps({"rmse": value, "n_eval_entries": len(test)}, sort_keys=True))


@main.command()
@click.option("--k", type=int, required=True, help="per-user rating cap")
@click.option("--steps", type=int, required=True, help="number of alternating steps")
@click.option("--sigma", type=float, default=None, help="training noise multiplier")
@click.option("--sigma-p", type=float, default=None, help="preprocessing noise std")
@click.option("--sigma-g", type=float, default=None, help="shared Gramian-penalty noise scale")
@click.option("--delta", type=float, default=1e-5, show_default=True)
@click.option("--target-epsilon", type=float, default=None, help="calibrate sigma instead")
def accountant(k, steps, sigma, sigma_p, sigma_g, delta, target_epsilon):
    """Compose the run ledger, or calibrate sigma for a target epsilon."""
    fixed = 0.0
    entries = []
    if sigma_p is not None:
        rho = accounting.preprocessing_rho_sq(k, sigma_p)
        entries.append({"label": "preprocessing", "rho_sq": rho})
        fixed += rho
    if sigma_g is not None:
        rho = accounting.gramian_rho_sq(steps, sigma_g)
        entries.append({"label": "gramian_penalty", "rho_sq": rho})
        fixed += rho
    if target_epsilon is not None:
        calibrated = accounting.solve_sigma_for_budget(
            k * steps / 2.0, target_epsilon, delta, fixed_rho_sq=fixed
        )
        click.echo(json.dumps({"sigma": calibrated, "delta": delta}, sort_keys=True))
        return
    if sigma is None:
        raise click.ClickException("provide --sigma or --target-epsilon")
    entries.insert(0, {"label": "dpals_training", "rho_sq": accounting.dpals_rho_sq(k, steps, sigma)})
    total = sum(entry["rho_sq"] for entry in entries)
    payload = {
        "rho_sq_entries": entries,
        "total_rho_sq": total,
        "epsilon": accounting.rdp_to_dp(total, delta),
        "delta": delta,
    }
    click.echo(json.dumps(payload, sort_keys=True))


@main.command("skew-report")
@click.option("--csv", "csv_path", type=click.Path(exists=True), default=None)
@click.option("--zipf", type=str, default=None, help="synthetic popularity spec n,m,per_user,exponent")
@click.option("--k", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def skew_report_cmd(csv_path, zipf, k, seed, out):
    """Emit the cumulative top-item share curve for sampling variants."""
    if (csv_path is None) == (zipf is None):
        raise click.ClickException("provide exactly one of --csv or --zipf")
    if csv_path is not None:
        ds = data.ingest_csv(csv_path).dataset
    else:
        try:
            n, m, per_user, exponent = zipf.split(",")
            ds = data.generate_skewed_dataset(int(n), int(m), int(per_user), float(exponent), seed)
        except ValueError:
            raise click.ClickException("--zipf expects n,m,per_user,exponent")
    rows = harness.skew_report(ds, k, seed)
    harness.write_skew_csv(rows, out)
    shares = {row["variant"]: row["share"] for row in rows if row["top_fraction"] == 0.2}
    click.echo(json.dumps({"out": str(out), "top20_share": shares}, sort_keys=True))


if __name__ == "__main__":
    main()
