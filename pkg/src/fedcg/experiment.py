"""Experiment orchestration: datasets, seeded runs, persistence, summaries."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import serialize
from . import tensor as T
from .attack import (AttackConfig, AttackResult, dlg_reconstruct, generator_feature_stats,
                     observe_gradients)
from .config import ExperimentConfig, dump_config, write_resolved_config
from .data import Dataset, generate_synthetic_dataset, load_dataset, partition
from .federation import NetworkBundle, SeedRunResult, run_seed
from .metrics import MetricsRecord, now, write_metrics

_TAG_DATASET = 41
_TAG_VICTIM = 42
_TAG_ATTACK_SAMPLE = 43
_TAG_STATS_STREAM = 44
_TAG_OBSERVE = 45


def run_id_for(cfg: ExperimentConfig, strategy: str) -> str:
    digest = hashlib.sha256(dump_config(replace(cfg, strategy=strategy)).encode()).hexdigest()[:8]
    return f"{strategy}-{digest}"


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.data_source == "synthetic":
        return generate_synthetic_dataset(
            classes=cfg.classes, samples_per_class=cfg.samples_per_class,
            image_shape=(cfg.image_channels, 32, 32), difficulty=cfg.difficulty,
            seed=_derive(seed, _TAG_DATASET))
    dataset = load_dataset(cfg.data_source)
    if dataset.classes != cfg.classes or dataset.image_shape[0] != cfg.image_channels:
        raise ValueError(
            f"dataset at {cfg.data_source} has {dataset.classes} classes / "
            f"{dataset.image_shape[0]} channels; config expects {cfg.classes} / {cfg.image_channels}")
    return dataset


def build_partition(cfg: ExperimentConfig, dataset: Dataset, seed: int):
    return partition(dataset, cfg.clients, scheme=cfg.scheme,
                     train_fraction=cfg.train_fraction, val_fraction=cfg.val_fraction,
                     concentration=cfg.concentration, seed=seed,
                     max_train_per_client=cfg.max_train_per_client or None)


@dataclass
class ExperimentResult:
    run_id: str
    strategy: str
    per_seed: list[SeedRunResult]
    records: list[MetricsRecord] = field(default_factory=list)

    @property
    def seed_means(self) -> list[float]:
        return [r.mean_best_accuracy for r in self.per_seed]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.seed_means))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.seed_means))


def run_experiment(cfg: ExperimentConfig, strategy: str | None = None,
                   output_dir: str | None = None, max_workers: int | None = None,
                   progress=None) -> ExperimentResult:
    """Full multi-seed experiment for one strategy; persists metrics and the
    resolved config when an output directory is given."""
    strategy = strategy or cfg.strategy
    cfg = replace(cfg, strategy=strategy)
    T.set_default_dtype(np.float64 if cfg.dtype == "float64" else np.float32)
    rid = run_id_for(cfg, strategy)
    workers = max_workers if max_workers is not None else cfg.workers

    per_seed: list[SeedRunResult] = []
    records: list[MetricsRecord] = []
    for seed in cfg.seeds:
        dataset = build_dataset(cfg, seed)
        part = build_partition(cfg, dataset, seed)
        result = run_seed(dataset, part, cfg.model_spec(), cfg.round_config(),
                          strategy, seed, max_workers=workers, progress=progress)
        stamp = now()
        for round_idx, client, metric, value in result.records:
            records.append(MetricsRecord(run_id=rid, seed=seed, round=round_idx,
                                         client=client, metric=metric, value=value,
                                         timestamp=stamp))
        per_seed.append(result)

    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        write_resolved_config(cfg, os.path.join(output_dir, f"{rid}.resolved.toml"))
        write_metrics(records, os.path.join(output_dir, f"{rid}.metrics.csv"))
    return ExperimentResult(run_id=rid, strategy=strategy, per_seed=per_seed,
                            records=records)


def summarize_strategies(records: list[MetricsRecord]) -> list[dict]:
    """Per-strategy mean and std of per-seed mean best accuracies.

    Works from raw records so an independent reload of the metrics file
    produces the same table.
    """
    per_run: dict[str, dict[int, float]] = {}
    for rec in records:
        if rec.metric != "mean_best_test_accuracy":
            continue
        per_run.setdefault(rec.run_id, {})[rec.seed] = rec.value
    rows = []
    for rid in sorted(per_run):
        strategy = rid.rsplit("-", 1)[0]
        values = [per_run[rid][s] for s in sorted(per_run[rid])]
        rows.append({"run_id": rid, "strategy": strategy,
                     "seeds": len(values),
                     "mean_accuracy": float(np.mean(values)),
                     "std_accuracy": float(np.std(values))})
    return rows


# ---------------------------------------------------------------------------
# attack experiments
# ---------------------------------------------------------------------------

@dataclass
class AttackRun:
    variant: str
    noise_variance: float
    seed: int
    result: AttackResult


def run_attack_once(cfg: ExperimentConfig, variant: str, seed: int,
                    noise_variance: float = 0.0,
                    attack_overrides: dict | None = None) -> AttackRun:
    """One gradient-inversion attempt against a freshly initialized victim.

    The victim holds the split network at the common initialization the
    server distributed; the target sample is drawn from the synthetic
    corpus. For the fedcg variant the per-channel feature statistics come
    from the victim's shared generator.
    """
    T.set_default_dtype(np.float64 if cfg.dtype == "float64" else np.float32)
    spec = cfg.model_spec()
    dataset = build_dataset(cfg, seed)
    sample_rng = _stream(seed, _TAG_ATTACK_SAMPLE)
    index = int(sample_rng.integers(0, len(dataset)))
    image = dataset.images[index]
    label = int(dataset.labels[index])

    victim = NetworkBundle.build(spec, seed=_derive(seed, _TAG_VICTIM))
    scope = "full" if variant == "fedavg" else "classifier"
    observed = observe_gradients(victim.extractor, victim.classifier, image, label,
                                 scope=scope, noise_variance=noise_variance,
                                 rng=_stream(seed, _TAG_OBSERVE))

    overrides = dict(attack_overrides or {})
    attack_cfg = AttackConfig(
        variant=variant, budget=overrides.pop("budget", cfg.attack_budget),
        lr=overrides.pop("lr", cfg.attack_lr), alpha=overrides.pop("alpha", cfg.attack_alpha),
        restarts=overrides.pop("restarts", cfg.attack_restarts),
        stats_samples=overrides.pop("stats_samples", cfg.attack_stats_samples),
        dp_noise_variance=noise_variance, seed=_derive(seed, 51), **overrides)

    stats = None
    if variant == "fedcg":
        stats = generator_feature_stats(victim.generator, label, attack_cfg.stats_samples,
                                        _stream(seed, _TAG_STATS_STREAM))
    result = dlg_reconstruct(
        victim.classifier, observed, attack_cfg, spec, label,
        extractor=victim.extractor if variant == "fedavg" else None,
        feature_stats=stats, ground_truth=image)
    return AttackRun(variant=variant, noise_variance=noise_variance, seed=seed,
                     result=result)


def run_attack_grid(cfg: ExperimentConfig, variants: list[str], seeds: list[int],
                    noise_variances: list[float] | None = None,
                    output_dir: str | None = None,
                    attack_overrides: dict | None = None,
                    progress=None) -> list[AttackRun]:
    """Attack PSNR grid over variants (and DP noise levels for fedavg)."""
    runs: list[AttackRun] = []
    cells: list[tuple[str, float]] = []
    for variant in variants:
        cells.append((variant, 0.0))
    for nv in noise_variances or []:
        if nv > 0.0:
            cells.append(("fedavg", nv))
    for variant, nv in cells:
        for seed in seeds:
            run = run_attack_once(cfg, variant, seed, noise_variance=nv,
                                  attack_overrides=attack_overrides)
            runs.append(run)
            if progress is not None:
                progress(run)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        _persist_attack_runs(runs, output_dir)
    return runs


def _persist_attack_runs(runs: list[AttackRun], output_dir: str) -> None:
    from PIL import Image

    records = []
    stamp = now()
    for run in runs:
        tag = f"{run.variant}_nv{run.noise_variance:g}_s{run.seed}"
        arr = run.result.image[0]
        img8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        pil = Image.fromarray(img8.transpose(1, 2, 0) if img8.shape[0] == 3 else img8[0],
                              mode="RGB" if img8.shape[0] == 3 else "L")
        pil.save(os.path.join(output_dir, f"recon_{tag}.png"))
        serialize.save_file(os.path.join(output_dir, f"recon_{tag}.fcg1"),
                            {"reconstruction": run.result.image})
        records.append(MetricsRecord(
            run_id=f"attack-{run.variant}", seed=run.seed, round=0,
            client=f"nv{run.noise_variance:g}", metric="psnr_db",
            value=run.result.psnr_db, timestamp=stamp))
        records.append(MetricsRecord(
            run_id=f"attack-{run.variant}", seed=run.seed, round=0,
            client=f"nv{run.noise_variance:g}", metric="wall_clock_s",
            value=run.result.wall_clock_s, timestamp=stamp))
    write_metrics(records, os.path.join(output_dir, "attack_metrics.csv"))


def summarize_attacks(runs: list[AttackRun]) -> list[dict]:
    cells: dict[tuple[str, float], list[float]] = {}
    for run in runs:
        cells.setdefault((run.variant, run.noise_variance), []).append(run.result.psnr_db)
    rows = []
    for (variant, nv), values in sorted(cells.items()):
        rows.append({"variant": variant, "noise_variance": nv,
                     "seeds": len(values),
                     "median_psnr_db": float(np.median(values)),
                     "min_psnr_db": float(np.min(values)),
                     "max_psnr_db": float(np.max(values))})
    return rows


def _derive(seed: int, tag: int, *parts: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(tag), *[int(p) for p in parts]])
    return int(ss.generate_state(1, np.uint64)[0])


def _stream(seed: int, tag: int, *parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(tag), *[int(p) for p in parts]])))
