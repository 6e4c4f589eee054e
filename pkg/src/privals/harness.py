"""Experiment orchestration: config parsing, pipeline wiring, sweeps, reports.

A run is fully determined by (config, seed): dataset construction, splits,
preprocessing, initialization, training, and evaluation all derive their
randomness from those two values. Reports serialize deterministically so a
repeated run produces byte-identical output modulo wall-clock fields.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import accounting, data, evaluation, solver, spectral
from .accounting import RdpLedger
from .linalg import clip_entries
from .rng import RngStream

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "dataset",
    "mode",
    "epsilon",
    "delta",
    "r",
    "lambda",
    "lambda0",
    "mu",
    "nu",
    "T",
    "k",
    "beta",
    "sigma_G",
    "sigma_g",
    "sigma_p",
    "seed",
    "metric",
    "value",
    "wall_seconds",
]

SUMMARY_COLUMNS = ["epsilon", "metric", "mean", "std", "n_runs"]


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class DatasetSpec:
    type: str
    n: int | None = None
    m: int | None = None
    rank: int | None = None
    p: float | None = None
    seed: int | None = None
    path: str | None = None

    @classmethod
    def from_dict(cls, section: dict) -> "DatasetSpec":
        _check_keys(section, {"type", "n", "m", "rank", "p", "seed", "path"}, "dataset")
        kind = section.get("type")
        if kind == "synthetic":
            for key in ("n", "m", "rank"):
                if key not in section:
                    raise ConfigError(f"synthetic dataset requires '{key}'")
        elif kind == "csv":
            if "path" not in section:
                raise ConfigError("csv dataset requires 'path'")
        else:
            raise ConfigError("dataset.type must be 'synthetic' or 'csv'")
        return cls(**section)


@dataclass(frozen=True)
class SplitSpec:
    mode: str
    fractions: tuple = (0.8, 0.1, 0.1)
    holdout_valid: int = 0
    holdout_test: int = 0
    query_fraction: float = 0.5
    seed: int | None = None

    @classmethod
    def from_dict(cls, section: dict) -> "SplitSpec":
        _check_keys(
            section,
            {"mode", "fractions", "holdout_valid", "holdout_test", "query_fraction", "seed"},
            "split",
        )
        mode = section.get("mode")
        if mode not in ("random-by-entry", "holdout-by-user"):
            raise ConfigError("split.mode must be 'random-by-entry' or 'holdout-by-user'")
        section = dict(section)
        if "fractions" in section:
            fractions = tuple(section["fractions"])
            if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
                raise ConfigError("split.fractions must be nonnegative and sum to 1")
            section["fractions"] = fractions
        return cls(**section)


@dataclass(frozen=True)
class PrivacySpec:
    epsilons: tuple = (math.inf,)
    delta: float = 1e-5
    gamma_u: float = 1.0
    gamma_m: float = 5.0
    k: int = 50
    sigma_gram: float | None = None
    sigma_vec: float | None = None
    sigma_p: float = 0.0
    beta: float = 1.0
    preprocess: bool = False

    @classmethod
    def from_dict(cls, section: dict) -> "PrivacySpec":
        _check_keys(
            section,
            {
                "epsilons",
                "delta",
                "gamma_u",
                "gamma_m",
                "k",
                "sigma_gram",
                "sigma_vec",
                "sigma_p",
                "beta",
                "preprocess",
            },
            "privacy",
        )
        section = dict(section)
        if "epsilons" in section:
            raw = section["epsilons"]
            if raw is None:
                raw = [None]
            eps = tuple(math.inf if e in (None, "inf") else float(e) for e in raw)
            if not eps:
                raise ConfigError("privacy.epsilons must not be empty")
            section["epsilons"] = eps
        if not 0.0 < section.get("delta", 1e-5) < 1.0:
            raise ConfigError("privacy.delta must lie in (0, 1)")
        return cls(**section)


@dataclass(frozen=True)
class InitSpec:
    mode: str = "random"
    steps: int | None = None
    nu: float | None = None
    s: int | None = None
    gamma_m: float | None = None
    sigma: float | None = None

    @classmethod
    def from_dict(cls, section: dict) -> "InitSpec":
        _check_keys(section, {"mode", "steps", "nu", "s", "gamma_m", "sigma"}, "init")
        mode = section.get("mode", "random")
        if mode not in ("random", "power-iteration"):
            raise ConfigError("init.mode must be 'random' or 'power-iteration'")
        if mode == "power-iteration":
            for key in ("steps", "nu", "s", "gamma_m", "sigma"):
                if section.get(key) is None:
                    raise ConfigError(f"power-iteration init requires '{key}'")
        return cls(**section)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    split: SplitSpec
    model: solver.Hyper
    model_rank: int
    privacy: PrivacySpec
    init: InitSpec
    seeds: tuple
    output_dir: str
    name: str = "experiment"
    recall_ks: tuple = (20,)
    workers: int = 1

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        _check_keys(
            payload,
            {
                "name",
                "dataset",
                "split",
                "model",
                "privacy",
                "init",
                "seeds",
                "output_dir",
                "recall_ks",
                "workers",
            },
            "config",
        )
        if "dataset" not in payload:
            raise ConfigError("config requires a 'dataset' section")
        model_section = dict(payload.get("model", {}))
        _check_keys(model_section, {"rank", "lam", "lam0", "mu", "nu", "steps"}, "model")
        if "rank" not in model_section:
            raise ConfigError("model requires 'rank'")
        rank = int(model_section.pop("rank"))
        hyper = solver.Hyper(**model_section)
        seeds = tuple(int(s) for s in payload.get("seeds", (0,)))
        if not seeds:
            raise ConfigError("seeds must not be empty")
        return cls(
            dataset=DatasetSpec.from_dict(payload["dataset"]),
            split=SplitSpec.from_dict(payload.get("split", {"mode": "random-by-entry"})),
            model=hyper,
            model_rank=rank,
            privacy=PrivacySpec.from_dict(payload.get("privacy", {})),
            init=InitSpec.from_dict(payload.get("init", {"mode": "random"})),
            seeds=seeds,
            output_dir=str(payload.get("output_dir", "runs")),
            name=str(payload.get("name", "experiment")),
            recall_ks=tuple(int(k) for k in payload.get("recall_ks", (20,))),
            workers=int(payload.get("workers", 1)),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as handle:
            return cls.from_dict(json.load(handle))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["privacy"]["epsilons"] = [
            "inf" if math.isinf(e) else e for e in self.privacy.epsilons
        ]
        return payload


@dataclass
class RunReport:
    config: dict
    seed: int
    mode: str
    epsilon_target: float
    epsilon_achieved: float | None
    delta: float
    ledger: dict | None
    trace: list
    metrics: dict
    wall_seconds: float
    audit_ok: bool | None = None
    failure_stage: str | None = None
    init_fallback: bool = False

    def to_json(self) -> str:
        return json.dumps(_sanitize(asdict(self)), sort_keys=True)


def _json_float(value):
    if value is None:
        return None
    if isinstance(value, (np.floating, np.integer)):
        value = float(value)
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def _sanitize(value):
    """Make a report tree strictly JSON-serializable (inf -> 'inf', numpy -> python)."""
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_sanitize(v) for v in value.tolist()]
    return _json_float(value)


def build_dataset(config: ExperimentConfig, seed: int):
    """Construct the run's dataset; synthetic specs default p to 20 ln(n)/m."""
    spec = config.dataset
    if spec.type == "csv":
        return data.ingest_csv(spec.path).dataset
    ds_seed = spec.seed if spec.seed is not None else seed
    p = spec.p if spec.p is not None else min(1.0, 20.0 * math.log(spec.n) / spec.m)
    ds, _ = data.generate_synthetic(spec.n, spec.m, spec.rank, p, ds_seed)
    return ds


def _split(config: ExperimentConfig, ds, seed: int):
    spec = config.split
    split_seed = spec.seed if spec.seed is not None else seed
    if spec.mode == "random-by-entry":
        train, valid, test = data.split_random(ds, spec.fractions, split_seed)
        return {"train": train, "valid": valid, "test": test}
    train, valid, test = data.split_by_users(
        ds, spec.holdout_valid, spec.holdout_test, spec.query_fraction, split_seed
    )
    return {"train": train, "valid_users": valid, "test_users": test}


def _evaluate(config, splits, factors, offset, frequent_items, fallback_means, z_norm):
    metrics = {}
    report = evaluation.EvalReport()
    if "test" in splits and len(splits["test"]):
        value = evaluation.rmse(
            factors,
            splits["test"],
            offset=offset,
            frequent_items=frequent_items,
            fallback_user_means=fallback_means,
        )
        metrics["rmse"] = value
        report.rmse = value
        report.n_eval_entries = len(splits["test"])
    if "test_users" in splits:
        for k in config.recall_ks:
            recall = evaluation.recall_at_k(
                factors.item_factors,
                splits["test_users"],
                k,
                config.model,
                z_norm=z_norm,
                value_offset=offset,
            )
            metrics[f"recall@{k}"] = recall.mean_recall
            report.recall[k] = recall.mean_recall
            report.n_eval_users = recall.users_scored
    return metrics, report


def run_experiment(config: ExperimentConfig, seed: int, epsilon: float | None = None) -> RunReport:
    """Execute the full pipeline for one (config, seed, epsilon) cell."""
    started = time.perf_counter()
    target = config.privacy.epsilons[0] if epsilon is None else epsilon
    stage = "dataset"
    try:
        ds = build_dataset(config, seed)
        stage = "split"
        splits = _split(config, ds, seed)
        train = splits["train"]
        if math.isinf(target):
            stage = "train"
            report = _run_exact(config, seed, splits, train, started)
        else:
            stage = "private"
            report = _run_private(config, seed, target, splits, train, started)
        return report
    except Exception as exc:
        logger.exception("run failed at stage %s", stage)
        return RunReport(
            config=config.to_dict(),
            seed=seed,
            mode="failed",
            epsilon_target=target,
            epsilon_achieved=None,
            delta=config.privacy.delta,
            ledger=None,
            trace=[],
            metrics={"error": f"{type(exc).__name__}: {exc}"},
            wall_seconds=time.perf_counter() - started,
            failure_stage=stage,
        )


def _run_exact(config, seed, splits, train, started) -> RunReport:
    factors, trace = solver.train_als(train, config.model_rank, config.model, seed)
    _, z_norm = solver.user_penalties(train.counts_by_user(), config.model.lam, config.model.nu)
    metrics, _ = _evaluate(config, splits, factors, 0.0, None, None, z_norm)
    return RunReport(
        config=config.to_dict(),
        seed=seed,
        mode="exact",
        epsilon_target=math.inf,
        epsilon_achieved=math.inf,
        delta=config.privacy.delta,
        ledger=None,
        trace=trace.steps,
        metrics=metrics,
        wall_seconds=time.perf_counter() - started,
    )


def _run_private(config, seed, target, splits, train, started) -> RunReport:
    priv = config.privacy
    hyper = config.model
    ledger = RdpLedger(priv.delta)
    expected_charges = {}

    # ---- preprocessing --------------------------------------------------
    offset = 0.0
    frequent = None
    fallback_means = None
    item_counts = None
    active_items = None
    if priv.preprocess:
        params = data.PreprocessParams(
            gamma_m=priv.gamma_m, k=priv.k, sigma_p=priv.sigma_p, beta=priv.beta
        )
        pre = data.preprocess(train, params, RngStream(seed, ("preprocess",)))
        ledger.charge("preprocessing", pre.rho_sq_charged, unique=True)
        expected_charges["preprocessing"] = pre.rho_sq_charged
        train_ds = pre.sampled_dataset
        offset = pre.global_mean
        item_counts = pre.noisy_counts
        if priv.beta < 1.0:
            frequent = pre.frequent_items
            active_items = pre.frequent_items
        fallback_means = evaluation.user_mean_fallback(train, offset)
    else:
        clipped = train.with_values(clip_entries(train.values, priv.gamma_m))
        train_ds = data.uniform_sample_per_user(
            clipped, priv.k, RngStream(seed, ("cap",)).derived_seed()
        )
        if hyper.mu != 0.0:
            raise ConfigError("item weight exponent mu requires preprocess: true")

    rank = config.model_rank

    # ---- initialization --------------------------------------------------
    init_fallback = False
    if config.init.mode == "power-iteration":
        init_cfg = spectral.PowerIterConfig(
            steps=config.init.steps,
            nu=config.init.nu,
            s=config.init.s,
            gamma_m=config.init.gamma_m,
            sigma=config.init.sigma,
            seed=seed,
        )
        init_sampled = data.uniform_sample_per_user(
            train.with_values(clip_entries(train.values, config.init.gamma_m)),
            config.init.s,
            RngStream(seed, ("init_cap",)).derived_seed(),
        )
        try:
            init_v, init_rho = spectral.noisy_subspace_init(init_sampled, rank, init_cfg)
        except spectral.InitFailure:
            logger.warning("power-iteration init failed the incoherence gate; random fallback")
            init_fallback = True
            init_v = spectral.random_orthonormal_init(train_ds.m, rank, seed)
            init_rho = rank * init_cfg.rho_sq(train_ds.m)
        ledger.charge("power_iteration_init", init_rho, unique=True)
        expected_charges["power_iteration_init"] = init_rho
    else:
        init_v = spectral.random_orthonormal_init(train_ds.m, rank, seed)

    # ---- noise calibration -----------------------------------------------
    if priv.sigma_gram is not None and priv.sigma_vec is not None:
        sigma_gram, sigma_vec = priv.sigma_gram, priv.sigma_vec
    else:
        coeff = priv.k * hyper.steps / 2.0
        if hyper.lam0 > 0:
            coeff += hyper.steps / 2.0
        sigma = accounting.solve_sigma_for_budget(
            coeff, target, priv.delta, fixed_rho_sq=ledger.total_rho_sq
        )
        sigma_gram = sigma_vec = sigma
    noise = solver.NoiseParams(
        gamma_u=priv.gamma_u,
        gamma_m=priv.gamma_m,
        k=priv.k,
        sigma_gram=sigma_gram,
        sigma_vec=sigma_vec,
    )

    # ---- training ----------------------------------------------------------
    factors, trace = solver.train_dpals(
        train_ds,
        rank,
        hyper,
        noise,
        ledger,
        seed,
        init_item_factors=init_v,
        item_counts=item_counts,
        active_items=active_items,
    )
    expected_charges.update(trace.charged)

    # ---- evaluation ---------------------------------------------------------
    _, z_norm = solver.user_penalties(train_ds.counts_by_user(), hyper.lam, hyper.nu)
    metrics, _ = _evaluate(config, splits, factors, offset, frequent, fallback_means, z_norm)

    expected_total = sum(expected_charges.values())
    audit_ok = expected_total == ledger.total_rho_sq or math.isclose(
        expected_total, ledger.total_rho_sq, rel_tol=1e-12
    )
    return RunReport(
        config=config.to_dict(),
        seed=seed,
        mode="private",
        epsilon_target=target,
        epsilon_achieved=ledger.epsilon(),
        delta=priv.delta,
        ledger=ledger.summary(),
        trace=trace.steps,
        metrics=metrics,
        wall_seconds=time.perf_counter() - started,
        audit_ok=bool(audit_ok),
        init_fallback=init_fallback,
    )


def csv_rows(config: ExperimentConfig, report: RunReport) -> list:
    """Fixed-schema CSV rows, one per metric."""
    priv = config.privacy
    base = {
        "dataset": config.name,
        "mode": report.mode,
        "epsilon": _json_float(report.epsilon_achieved if report.mode == "private" else report.epsilon_target),
        "delta": priv.delta,
        "r": config.model_rank,
        "lambda": config.model.lam,
        "lambda0": config.model.lam0,
        "mu": config.model.mu,
        "nu": config.model.nu,
        "T": config.model.steps,
        "k": priv.k,
        "beta": priv.beta,
        "sigma_G": "" if priv.sigma_gram is None else priv.sigma_gram,
        "sigma_g": "" if priv.sigma_vec is None else priv.sigma_vec,
        "sigma_p": priv.sigma_p,
        "seed": report.seed,
        "wall_seconds": round(report.wall_seconds, 3),
    }
    rows = []
    if report.mode == "failed":
        row = dict(base)
        row["metric"] = "failed"
        row["value"] = ""
        rows.append(row)
    for metric, value in sorted(report.metrics.items()):
        if not isinstance(value, (int, float)):
            continue
        row = dict(base)
        row["metric"] = metric
        row["value"] = value
        rows.append(row)
    return rows


def _resolve_output_dir(config: ExperimentConfig) -> Path:
    import os

    root = os.environ.get("PRIVALS_OUTPUT", "")
    out = Path(root) / config.output_dir if root else Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(config: ExperimentConfig, report: RunReport) -> Path:
    out_dir = _resolve_output_dir(config)
    eps_tag = "inf" if math.isinf(report.epsilon_target) else f"{report.epsilon_target:g}"
    path = out_dir / f"{config.name}_eps{eps_tag}_seed{report.seed}.json"
    path.write_text(report.to_json())
    return path


def _run_cell(args):
    config, seed, eps = args
    return run_experiment(config, seed, eps)


def sweep(config: ExperimentConfig):
    """Cross product of (epsilon, seed) runs with per-epsilon summary rows.

    Returns (runs_csv_path, summary_csv_path). Failed cells are recorded as
    'failed' rows and excluded from summaries; the sweep always continues.
    """
    if not config.privacy.epsilons:
        raise ConfigError("nothing to sweep: empty epsilon list")
    cells = [(config, seed, eps) for eps in config.privacy.epsilons for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(cell) for cell in cells]

    out_dir = _resolve_output_dir(config)
    runs_path = out_dir / f"{config.name}_runs.csv"
    all_rows = []
    for (cfg, seed, eps), report in zip(cells, reports):
        write_report(cfg, report)
        all_rows.extend(csv_rows(cfg, report))
    with open(runs_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(all_rows)

    groups = {}
    for (cfg, seed, eps), report in zip(cells, reports):
        if report.mode == "failed":
            continue
        for metric, value in report.metrics.items():
            if isinstance(value, (int, float)):
                groups.setdefault((eps, metric), []).append(value)
    summary_path = out_dir / f"{config.name}_summary.csv"
    with open(summary_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for (eps, metric), values in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            writer.writerow(
                {
                    "epsilon": _json_float(eps),
                    "metric": metric,
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
                    "n_runs": len(values),
                }
            )
    return runs_path, summary_path


def skew_report(ds, k: int, seed: int = 0, fractions=None) -> list:
    """Cumulative top-item observation shares for three sampling variants.

    Rows of (variant, top_fraction, share) for the unsampled data, the
    uniform k-per-user sample, and the adaptive (noiseless-count) sample.
    """
    if fractions is None:
        fractions = [round(0.01 * i, 2) for i in range(1, 101)]
    uniform = data.uniform_sample_per_user(ds, k, seed)
    counts = ds.counts_by_item().astype(np.float64)
    frequent, _ = data.partition_frequent(counts, 1.0)
    adaptive = data.adaptive_sample_per_user(ds, frequent, counts, k)
    rows = []
    for variant, variant_ds in (
        ("unsampled", ds),
        ("uniform", uniform),
        ("adaptive", adaptive),
    ):
        for fraction in fractions:
            rows.append(
                {
                    "variant": variant,
                    "top_fraction": fraction,
                    "share": data.top_share(variant_ds, fraction),
                }
            )
    return rows


def write_skew_csv(rows, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["variant", "top_fraction", "share"])
        writer.writeheader()
        writer.writerows(rows)
