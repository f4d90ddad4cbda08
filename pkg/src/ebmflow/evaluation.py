"""Metrics over trained flows and samplers: divergence to a gridded
target, feature-mean gaps, label-distribution divergence, histogram
distances, and a per-sample latency/energy comparison across samplers.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .energies import LatentEBM
from .flows import FlowStack
from .samplers import DensityGrid


@dataclass
class EvalReport:
    metric: str
    value: float
    method: str
    sample_count: int
    seed: Optional[int] = None
    wall_clock: float = 0.0
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metric": self.metric,
            "value": self.value,
            "method": self.method,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "details": self.details,
        }


def kl_flow_to_target(flow: FlowStack, ebm: LatentEBM, grid: DensityGrid) -> float:
    """Cell-weighted KL from the flow's density to the gridded target, in nats.

    Both densities are evaluated at cell midpoints; the flow must put nearly
    all of its mass inside the grid or the estimate is meaningless, so low
    coverage is an error.
    """
    if grid.dim != 2 or flow.dim != 2 or ebm.dim != 2:
        raise ValueError("grid KL is defined for 2-dimensional targets")
    centers = grid.centers()
    log_p_flow = np.empty(centers.shape[0])
    with ad.no_grad():
        for start in range(0, centers.shape[0], 100_000):
            stop = min(start + 100_000, centers.shape[0])
            log_p_flow[start:stop] = flow.log_prob(centers[start:stop]).data
    p_flow = np.exp(log_p_flow)
    vol = grid.cell_volume
    coverage = p_flow.sum() * vol
    if coverage < 1.0 - 1e-4:
        raise ValueError(
            f"grid covers only {coverage:.6f} of the flow's mass; enlarge the bounds"
        )
    p_target = np.maximum(grid.normalized.reshape(-1), 1e-300)
    mask = p_flow > 0
    kl = float(
        (p_flow[mask] * (log_p_flow[mask] - np.log(p_target[mask]))).sum() * vol
    )
    return kl


def moment_gap(samples: np.ndarray, gamma: Callable[[np.ndarray], np.ndarray],
               mu) -> float:
    """L2 distance between the sample mean of gamma(x) and the target mu."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] < 1000:
        raise ValueError("need at least 1000 samples for a stable gap estimate")
    mu = np.asarray(mu, dtype=np.float64)
    feats = gamma(samples)
    mean = np.asarray(feats).mean(axis=0)
    if mean.shape != mu.shape:
        raise ValueError(f"gamma gives {mean.shape}, target has {mu.shape}")
    return float(np.linalg.norm(mean - mu))


def empirical_label_distribution(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Relative label frequencies; zero-count classes get a 1/(2n) floor."""
    n = len(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    probs = counts / n
    floor = 1.0 / (2.0 * n)
    probs = np.where(probs == 0.0, floor, probs)
    return probs / probs.sum()


def attribute_kl(samples: np.ndarray, classifier, reference) -> float:
    """KL from the classified label distribution to a reference, in nats."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != (classifier.n_classes,):
        raise ValueError(
            f"reference has {reference.shape[0]} entries, classifier has "
            f"{classifier.n_classes} classes"
        )
    labels = classifier.labels(np.atleast_2d(samples))
    probs = empirical_label_distribution(labels, classifier.n_classes)
    return float((probs * np.log(probs / reference)).sum())


def histogram_tv(a: np.ndarray, b: np.ndarray, bounds, bins: int) -> float:
    """Total-variation distance between two sample sets, binned on a box."""
    ranges = [list(bd) for bd in bounds]
    ha, _ = np.histogramdd(a, bins=bins, range=ranges)
    hb, _ = np.histogramdd(b, bins=bins, range=ranges)
    pa = ha / len(a)
    pb = hb / len(b)
    return float(0.5 * np.abs(pa - pb).sum())


def histogram_vs_grid_tv(samples: np.ndarray, grid: DensityGrid) -> float:
    """TV distance between a sample histogram and a normalized density grid."""
    edges = []
    for axis in range(grid.dim):
        lo, hi = grid.bounds[axis]
        edges.append(np.linspace(lo, hi, grid.resolution[axis] + 1))
    hist, _ = np.histogramdd(samples, bins=edges)
    p_samples = hist / len(samples)
    p_grid = grid.normalized * grid.cell_volume
    return float(0.5 * np.abs(p_samples - p_grid).sum())


# ---- latency benchmark ---------------------------------------------------------------


@dataclass
class BenchSampler:
    """A named way of drawing n latent samples targeting a shared EBM."""

    name: str
    draw: Callable[[int], np.ndarray]
    ebm: LatentEBM


@dataclass
class BenchRow:
    name: str
    sec_per_sample: float
    grad_calls_per_sample: float
    mean_energy: float
    n: int
    batch_amortized: bool = True

    def to_dict(self):
        return {
            "name": self.name,
            "sec_per_sample": self.sec_per_sample,
            "grad_calls_per_sample": self.grad_calls_per_sample,
            "mean_energy": self.mean_energy,
            "n": self.n,
            "batch_amortized": self.batch_amortized,
        }


def latency_bench(samplers: Sequence[BenchSampler], n: int, warmup: int = 10,
                  repeats: int = 5):
    """Median-of-repeats wall clock per sample, with gradient-call accounting.

    Timing is batch-amortized (total time for n samples divided by n) and
    flagged as such; per-sample timing at this scale would sit below timer
    resolution. The mean achieved energy uses the last drawn batch.
    """
    if warmup < 10:
        raise ValueError("need at least 10 warmup samples")
    rows = []
    for sampler in samplers:
        sampler.draw(warmup)  # discarded
        before = sampler.ebm.grad_eval_count
        times = []
        samples = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            samples = sampler.draw(n)
            times.append(time.perf_counter() - t0)
        grad_calls = (sampler.ebm.grad_eval_count - before) / (repeats * n)
        with ad.no_grad():
            outputs = sampler.ebm.generator.apply(ad.as_tensor(samples)).data
        mean_energy = float(sampler.ebm.energy.value_batch(outputs).mean())
        rows.append(
            BenchRow(
                name=sampler.name,
                sec_per_sample=float(np.median(times)) / n,
                grad_calls_per_sample=float(grad_calls),
                mean_energy=mean_energy,
                n=n,
            )
        )
    return rows


def bench_table_text(rows) -> str:
    header = f"{'sampler':<16}{'sec/sample':>14}{'grad calls':>12}{'mean energy':>14}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.name:<16}{row.sec_per_sample:>14.6g}"
            f"{row.grad_calls_per_sample:>12.4g}{row.mean_energy:>14.6g}"
        )
    return "\n".join(lines)


def bench_rows_to_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sampler", "sec_per_sample", "grad_calls_per_sample",
                         "mean_energy", "n", "batch_amortized"])
        for row in rows:
            writer.writerow([row.name, row.sec_per_sample, row.grad_calls_per_sample,
                             row.mean_energy, row.n, row.batch_amortized])


def report_to_json(path, reports):
    payload = [r.to_dict() for r in reports]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
