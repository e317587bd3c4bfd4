"""Benchmark harness: 2AFC accuracy, agreement buckets, per-attack statistics,
and the white-box-to-black-box transfer pipeline.

Samples are processed with an order-independent map/reduce: results are keyed
by sample index and aggregated in index order, so the thread count never
changes any reported number. Per-sample randomness (one-pixel attack) is
derived from the global seed and the sample index.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import (
    AttackOutcome,
    PIXEL_THRESHOLDS,
    Triplet,
    combined_stadv_pgd,
    fgsm_attack,
    one_pixel_attack,
    pgd_attack,
    pgd_fixed_iterations,
    reverse_pgd_attack,
    select_prey,
    stadv_attack,
)
from .metrics import Metric
from .optim import DeConfig

AGREE = "agree"
DISAGREE = "disagree"
ATTACK_NAMES = ("fgsm", "pgd", "onepixel", "stadv", "stadv-pgd", "reverse-pgd")


class BenchmarkError(ValueError):
    """Invalid benchmark configuration."""


def derive_seed(global_seed: int, index: int) -> int:
    """Stable per-sample seed (splitmix64 of seed xor index), order independent."""
    z = (global_seed ^ (index * 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0xFFFFFFFFFFFFFFFF


def select_unanimous(triplets: Sequence[Triplet]) -> list[Triplet]:
    """Keep only samples where every rater chose the same distorted image."""
    return [t for t in triplets if t.human_judgment in (0.0, 1.0)]


def human_rank(triplet: Triplet) -> int:
    return 1 if triplet.human_judgment == 1.0 else 0


def metric_rank(s0: float, s1: float) -> int:
    """0 if i_0 is (weakly) more similar, 1 if i_1 is strictly more similar."""
    return 1 if s1 < s0 else 0


def _parallel_map(fn: Callable[[int], object], n: int, threads: int) -> list:
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def evaluate_2afc_accuracy(triplets: Sequence[Triplet], metric: Metric,
                           threads: int = 1) -> float:
    """Fraction of unanimous samples where the metric's choice matches the vote."""
    if not triplets:
        return 0.0

    def one(i: int) -> bool:
        t = triplets[i]
        s0 = metric.distance(t.i_ref, t.i_0)
        s1 = metric.distance(t.i_ref, t.i_1)
        return metric_rank(s0, s1) == human_rank(t)

    hits = _parallel_map(one, len(triplets), threads)
    return sum(hits) / len(triplets)


def margin_statistics(triplets: Sequence[Triplet], metric: Metric,
                      threads: int = 1) -> dict[str, float]:
    """Mean |s_0 - s_1| per agreement bucket (NaN for an empty bucket)."""
    def one(i: int) -> tuple[str, float]:
        t = triplets[i]
        s0 = metric.distance(t.i_ref, t.i_0)
        s1 = metric.distance(t.i_ref, t.i_1)
        bucket = AGREE if metric_rank(s0, s1) == human_rank(t) else DISAGREE
        return bucket, abs(s0 - s1)

    rows = _parallel_map(one, len(triplets), threads)
    out = {}
    for bucket in (AGREE, DISAGREE):
        values = [m for b, m in rows if b == bucket]
        out[bucket] = float(np.mean(values)) if values else math.nan
    return out


# -- attack benchmark ---------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    """Which attack to run and with what hyperparameters.

    Defaults follow the attack definitions: PGD eps 0.03 / alpha 0.001 /
    30 iterations; FGSM max eps 0.05 in 1e-4 steps; stAdv rank weight 50,
    flow weight 0.05, 250 iterations; one-pixel DE population 80 over 75
    generations.
    """

    name: str
    eps: float = 0.03
    alpha: float = 0.001
    max_iters: int = 30
    max_eps: float = 0.05
    eps_step: float = 1e-4
    alpha_rank: float = 50.0
    beta_flow: float = 0.05
    stadv_iterations: int = 250
    pgd_k: int = 10
    de_population: int = 80
    de_generations: int = 75
    de_weight: float = 0.5
    de_crossover: float = 0.9

    def __post_init__(self) -> None:
        if self.name not in ATTACK_NAMES:
            raise BenchmarkError(
                f"unknown attack {self.name!r}; available: {', '.join(ATTACK_NAMES)}"
            )


def run_attack(triplet: Triplet, metric: Metric, config: AttackConfig,
               seed: int = 0) -> AttackOutcome:
    """Dispatch one attack on one triplet."""
    if config.name == "fgsm":
        return fgsm_attack(triplet, metric, max_eps=config.max_eps, eps_step=config.eps_step)
    if config.name == "pgd":
        return pgd_attack(triplet, metric, eps=config.eps, alpha=config.alpha,
                          max_iters=config.max_iters)
    if config.name == "reverse-pgd":
        return reverse_pgd_attack(triplet, metric, eps=config.eps, alpha=config.alpha,
                                  max_iters=config.max_iters)
    if config.name == "onepixel":
        de = DeConfig(population=config.de_population, max_generations=config.de_generations,
                      differential_weight=config.de_weight, crossover_rate=config.de_crossover,
                      seed=seed)
        return one_pixel_attack(triplet, metric, de)
    if config.name == "stadv":
        return stadv_attack(triplet, metric, alpha_rank=config.alpha_rank,
                            beta_flow=config.beta_flow, max_iterations=config.stadv_iterations)
    if config.name == "stadv-pgd":
        stage = stadv_attack(triplet, metric, alpha_rank=config.alpha_rank,
                             beta_flow=config.beta_flow,
                             max_iterations=config.stadv_iterations)
        if not stage.success:
            stage.diagnostic = f"stadv_failed: {stage.diagnostic}"
            return stage
        return combined_stadv_pgd(triplet, metric, config.pgd_k, eps=config.eps,
                                  alpha=config.alpha, stadv_outcome=stage)
    raise BenchmarkError(f"unknown attack {config.name!r}")


@dataclass
class SampleRecord:
    index: int
    bucket: str
    success: bool
    prey_index: int | None
    s_prey: float | None
    s_other: float | None
    s_adv: float | None
    epsilon_used: float | None
    iterations_used: int | None
    first_flip_iteration: int | None
    rmse_255: float | None
    psnr_255: float | None
    pct_pixels_gt: dict[float, float] | None
    error: str | None = None


@dataclass
class BucketStats:
    total: int = 0
    flipped: int = 0
    mean_eps: float | None = None
    pct_pixels_gt: dict[float, float] = field(default_factory=dict)
    rmse_mean: float | None = None
    rmse_std: float | None = None
    psnr_mean: float | None = None
    psnr_std: float | None = None

    @property
    def flip_rate(self) -> float:
        return self.flipped / self.total if self.total else 0.0


@dataclass
class BenchmarkReport:
    metric_name: str
    attack_name: str
    seed: int
    buckets: dict[str, BucketStats]
    samples: list[SampleRecord]


def _bucket_stats(records: list[SampleRecord]) -> BucketStats:
    stats = BucketStats(total=len(records))
    flipped = [r for r in records if r.success]
    stats.flipped = len(flipped)
    if flipped:
        eps_values = [r.epsilon_used for r in flipped if r.epsilon_used is not None]
        stats.mean_eps = float(np.mean(eps_values)) if eps_values else None
        stats.pct_pixels_gt = {
            thr: float(np.mean([r.pct_pixels_gt[thr] for r in flipped]))
            for thr in PIXEL_THRESHOLDS
        }
        rmse = np.array([r.rmse_255 for r in flipped])
        stats.rmse_mean = float(rmse.mean())
        stats.rmse_std = float(rmse.std())
        psnr = np.array([r.psnr_255 for r in flipped])
        finite = psnr[np.isfinite(psnr)]
        if finite.size:
            stats.psnr_mean = float(finite.mean())
            stats.psnr_std = float(finite.std())
    return stats


def run_attack_benchmark(triplets: Sequence[Triplet], metric: Metric,
                         config: AttackConfig, seed: int = 0,
                         threads: int = 1) -> BenchmarkReport:
    """Attack every sample and aggregate Table-style statistics per bucket.

    Per-sample failures are recorded on the row and never abort the run.
    """

    def one(i: int) -> SampleRecord:
        t = triplets[i]
        s0 = metric.distance(t.i_ref, t.i_0)
        s1 = metric.distance(t.i_ref, t.i_1)
        bucket = AGREE if metric_rank(s0, s1) == human_rank(t) else DISAGREE
        try:
            out = run_attack(t, metric, config, seed=derive_seed(seed, i))
        except Exception as exc:  # per-sample isolation is part of the contract
            return SampleRecord(i, bucket, False, None, None, None, None, None,
                                None, None, None, None, None, error=str(exc))
        return SampleRecord(
            index=i, bucket=bucket, success=out.success, prey_index=out.prey_index,
            s_prey=out.s_prey, s_other=out.s_other, s_adv=out.s_adv,
            epsilon_used=out.epsilon_used, iterations_used=out.iterations_used,
            first_flip_iteration=out.first_flip_iteration, rmse_255=out.rmse_255,
            psnr_255=out.psnr_255, pct_pixels_gt=out.pct_pixels_gt,
        )

    records = _parallel_map(one, len(triplets), threads)
    records.sort(key=lambda r: r.index)
    buckets = {
        name: _bucket_stats([r for r in records if r.bucket == name])
        for name in (AGREE, DISAGREE)
    }
    return BenchmarkReport(metric.name, config.name, seed, buckets, records)


# -- transfer pipeline ---------------------------------------------------------


@dataclass
class TransferCell:
    target: str
    variant: str
    accurate: int
    flipped: int

    @property
    def flip_rate(self) -> float:
        return self.flipped / self.accurate if self.accurate else 0.0


@dataclass
class TransferReport:
    source_name: str
    seed: int
    rmse_cap: float
    n_total: int
    n_source_agree: int
    n_stadv_success: int
    n_kept: int
    variants: list[str]
    cells: list[TransferCell]
    kept_indices: list[int]
    kept_rmse: list[float]
    stadv_rmse_mean: float | None
    stadv_rmse_std: float | None


def run_transfer_benchmark(triplets: Sequence[Triplet], source_metric: Metric,
                           targets: dict[str, Metric],
                           combine_ks: Sequence[int] = (5, 10, 15, 20),
                           plain_pgd_ks: Sequence[int] = (10, 20),
                           rmse_cap: float = 3.0, seed: int = 0, threads: int = 1,
                           stadv_config: AttackConfig | None = None) -> TransferReport:
    """Craft white-box attacks on the source metric and score targets on the
    byte-identical transferred images.

    Pipeline: (1) keep samples where the source metric agrees with the
    unanimous human rank, (2) run stAdv, (3) keep successes with RMSE below
    the cap, (4) build the variant images (stAdv, stAdv + k PGD steps, plain
    fixed-k PGD), (5) for each target count rank flips among the samples
    where the target agrees with the human rank on the original images.
    """
    stadv_config = stadv_config or AttackConfig("stadv")

    def source_agrees(i: int) -> bool:
        t = triplets[i]
        s0 = source_metric.distance(t.i_ref, t.i_0)
        s1 = source_metric.distance(t.i_ref, t.i_1)
        return metric_rank(s0, s1) == human_rank(t)

    agree_flags = _parallel_map(source_agrees, len(triplets), threads)
    agree_idx = [i for i, flag in enumerate(agree_flags) if flag]

    def run_stadv(j: int) -> AttackOutcome:
        return stadv_attack(
            triplets[agree_idx[j]], source_metric,
            alpha_rank=stadv_config.alpha_rank, beta_flow=stadv_config.beta_flow,
            max_iterations=stadv_config.stadv_iterations,
        )

    stadv_outcomes = _parallel_map(run_stadv, len(agree_idx), threads)
    n_success = sum(o.success for o in stadv_outcomes)
    kept = [
        (idx, out) for idx, out in zip(agree_idx, stadv_outcomes)
        if out.success and out.rmse_255 <= rmse_cap
    ]
    kept_indices = [idx for idx, _ in kept]

    variants = (["stadv"]
                + [f"stadv+pgd{k}" for k in combine_ks]
                + [f"pgd{k}" for k in plain_pgd_ks])

    def build_variants(j: int) -> dict[str, np.ndarray]:
        idx, stadv_out = kept[j]
        t = triplets[idx]
        images = {"stadv": stadv_out.adv_image}
        for k in combine_ks:
            images[f"stadv+pgd{k}"] = combined_stadv_pgd(
                t, source_metric, k, eps=stadv_config.eps, alpha=stadv_config.alpha,
                stadv_outcome=stadv_out,
            ).adv_image
        for k in plain_pgd_ks:
            images[f"pgd{k}"] = pgd_fixed_iterations(
                t, source_metric, k, eps=stadv_config.eps, alpha=stadv_config.alpha,
            ).adv_image
        return images

    variant_images = _parallel_map(build_variants, len(kept), threads)

    cells: list[TransferCell] = []
    for target_name, target in sorted(targets.items()):

        def score_sample(j: int) -> tuple[bool, dict[str, bool]]:
            idx, _ = kept[j]
            t = triplets[idx]
            s0 = target.distance(t.i_ref, t.i_0)
            s1 = target.distance(t.i_ref, t.i_1)
            if metric_rank(s0, s1) != human_rank(t):
                return False, {}
            # The target-agreed prey coincides with the source prey because
            # both agree with the unanimous human rank.
            prey_rank = human_rank(t)
            other = t.i_0 if prey_rank == 1 else t.i_1
            s_other = target.distance(t.i_ref, other)
            flips = {
                name: target.distance(t.i_ref, variant_images[j][name]) > s_other
                for name in variants
            }
            return True, flips

        rows = _parallel_map(score_sample, len(kept), threads)
        accurate = sum(1 for ok, _ in rows if ok)
        for name in variants:
            flipped = sum(1 for ok, flips in rows if ok and flips[name])
            cells.append(TransferCell(target_name, name, accurate, flipped))

    kept_rmse = np.array([out.rmse_255 for _, out in kept])
    return TransferReport(
        source_name=source_metric.name,
        seed=seed,
        rmse_cap=rmse_cap,
        n_total=len(triplets),
        n_source_agree=len(agree_idx),
        n_stadv_success=n_success,
        n_kept=len(kept),
        variants=variants,
        cells=cells,
        kept_indices=kept_indices,
        kept_rmse=[float(v) for v in kept_rmse],
        stadv_rmse_mean=float(kept_rmse.mean()) if kept_rmse.size else None,
        stadv_rmse_std=float(kept_rmse.std()) if kept_rmse.size else None,
    )
