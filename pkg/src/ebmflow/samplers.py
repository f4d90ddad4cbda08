"""Oracle and baseline samplers over the same latent tilted target:
gradient-based chains, exact rejection from the prior, and midpoint
quadrature for low-dimensional normalization.

These exist to cross-check trained flows: the chain sampler mirrors the
inference-time-optimization baseline, rejection gives exact draws when a
valid envelope is known, and the grid gives the normalizer and pointwise
densities in 2-3 dimensions.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .energies import LatentEBM


@dataclass
class LangevinConfig:
    n_steps: int = 200
    step_size: float = 0.05
    seed: int = 0
    metropolis_adjust: bool = False

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")


@dataclass
class LangevinInfo:
    grad_evals: int
    wall_clock: float
    restarts: int
    n_steps: int
    acceptance_rate: Optional[float] = None


def langevin_sample(ebm: LatentEBM, cfg: LangevinConfig, n: int):
    """Run n independent chains from the prior; returns final states.

    Unadjusted update z += (eta/2) grad log u(z) + sqrt(eta) noise; the
    optional Metropolis correction rejects moves against the exact density
    ratio. Chains whose state turns non-finite restart once from a fresh
    prior draw; a second failure is an error.
    """
    rng = np.random.default_rng([cfg.seed, 23])
    restart_rng = np.random.default_rng([cfg.seed, 29])
    d = ebm.dim
    z = rng.standard_normal((n, d))
    restarted = np.zeros(n, dtype=bool)
    restarts = 0
    eta = cfg.step_size
    accepts = 0
    proposals = 0
    start = time.perf_counter()
    if cfg.metropolis_adjust:
        log_u = ebm.log_density_unnorm_np(z)
        grad = ebm.grad_log_density(z)
    for _ in range(cfg.n_steps):
        if not cfg.metropolis_adjust:
            grad = ebm.grad_log_density(z)
        noise = rng.standard_normal((n, d))
        proposal = z + 0.5 * eta * grad + math.sqrt(eta) * noise
        if cfg.metropolis_adjust:
            prop_log_u = ebm.log_density_unnorm_np(proposal)
            prop_grad = ebm.grad_log_density(proposal)
            fwd = proposal - z - 0.5 * eta * grad
            bwd = z - proposal - 0.5 * eta * prop_grad
            log_q_fwd = -(fwd * fwd).sum(axis=1) / (2.0 * eta)
            log_q_bwd = -(bwd * bwd).sum(axis=1) / (2.0 * eta)
            log_alpha = prop_log_u - log_u + log_q_bwd - log_q_fwd
            accept = np.log(rng.uniform(size=n)) < log_alpha
            proposals += n
            accepts += int(accept.sum())
            z = np.where(accept[:, None], proposal, z)
            log_u = np.where(accept, prop_log_u, log_u)
            grad = np.where(accept[:, None], prop_grad, grad)
        else:
            z = proposal
        bad = ~np.isfinite(z).all(axis=1)
        if bad.any():
            if (restarted & bad).any():
                raise RuntimeError(
                    f"{int((restarted & bad).sum())} chains went non-finite twice; "
                    "reduce the step size"
                )
            restarts += int(bad.sum())
            restarted |= bad
            z[bad] = restart_rng.standard_normal((int(bad.sum()), d))
            if cfg.metropolis_adjust:
                log_u[bad] = ebm.log_density_unnorm_np(z[bad])
                grad[bad] = ebm.grad_log_density(z[bad])
    info = LangevinInfo(
        grad_evals=cfg.n_steps * n if not cfg.metropolis_adjust else proposals + n,
        wall_clock=time.perf_counter() - start,
        restarts=restarts,
        n_steps=cfg.n_steps,
        acceptance_rate=accepts / proposals if proposals else None,
    )
    return z, info


@dataclass
class RejectionInfo:
    acceptance_rate: float
    envelope: float
    envelope_estimated: bool
    proposals: int
    wall_clock: float


def estimate_envelope(ebm: LatentEBM, n_draws: int = 1_000_000, seed: int = 0) -> float:
    """Non-rigorous envelope: max tilt over prior draws times a 1.5 margin."""
    rng = np.random.default_rng([seed, 37])
    best = -np.inf
    remaining = n_draws
    while remaining > 0:
        chunk = min(remaining, 100_000)
        z = rng.standard_normal((chunk, ebm.dim))
        tilt = -_energies_at(ebm, z)
        best = max(best, float(tilt.max()))
        remaining -= chunk
    return 1.5 * float(np.exp(best))


def _energies_at(ebm: LatentEBM, z: np.ndarray) -> np.ndarray:
    from . import autodiff as ad

    with ad.no_grad():
        x = ebm.generator.apply(ad.as_tensor(z)).data
    return ebm.energy.value_batch(x)


def rejection_sample(ebm: LatentEBM, n: int, envelope: Optional[float] = None,
                     seed: int = 0, chunk: int = 100_000):
    """Exact draws from the tilted target, given a valid envelope constant.

    Proposes from the prior and accepts with probability exp(-E)/envelope.
    When no envelope is supplied one is estimated from prior draws and
    flagged as such. Observing exp(-E) above the envelope is a hard error;
    a sustained acceptance rate below 1e-5 aborts with advice.
    """
    estimated = envelope is None
    if estimated:
        envelope = estimate_envelope(ebm, seed=seed)
    if envelope <= 0:
        raise ValueError("envelope must be positive")
    log_envelope = math.log(envelope)
    rng = np.random.default_rng([seed, 31])
    out = np.empty((0, ebm.dim))
    proposals = 0
    accepted = 0
    start = time.perf_counter()
    while accepted < n:
        z = rng.standard_normal((chunk, ebm.dim))
        u = rng.uniform(size=chunk)
        energies = _energies_at(ebm, z)
        log_ratio = -energies - log_envelope
        if (log_ratio > 1e-12).any():
            worst = float(np.exp(-energies.min()))
            raise RuntimeError(
                f"envelope violated: observed tilt {worst:.6g} exceeds envelope "
                f"{envelope:.6g}"
            )
        with np.errstate(over="ignore"):
            accept = u < np.exp(log_ratio)
        out = np.concatenate([out, z[accept]], axis=0)
        proposals += chunk
        accepted += int(accept.sum())
        if proposals >= max(2_000_000, 20 * chunk) and accepted / proposals < 1e-5:
            raise RuntimeError(
                f"acceptance rate {accepted / proposals:.2e} below 1e-5 after "
                f"{proposals} proposals; review the energy weights or the envelope"
            )
    info = RejectionInfo(
        acceptance_rate=accepted / proposals,
        envelope=envelope,
        envelope_estimated=estimated,
        proposals=proposals,
        wall_clock=time.perf_counter() - start,
    )
    return out[:n], info


# ---- quadrature ------------------------------------------------------------------


@dataclass
class DensityGrid:
    """Midpoint evaluation of the unnormalized latent density on a box."""

    bounds: list
    resolution: list
    values: np.ndarray  # unnormalized, shaped per resolution
    z_estimate: float = field(init=False)

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")
        self.z_estimate = float(self.values.sum() * self.cell_volume)
        if self.z_estimate <= 0:
            raise ValueError("normalizer must be positive")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for (lo, hi), res in zip(self.bounds, self.resolution):
            vol *= (hi - lo) / res
        return vol

    @property
    def normalized(self) -> np.ndarray:
        return self.values / self.z_estimate

    def axis_centers(self, axis: int) -> np.ndarray:
        lo, hi = self.bounds[axis]
        res = self.resolution[axis]
        width = (hi - lo) / res
        return lo + width * (np.arange(res) + 0.5)

    def centers(self) -> np.ndarray:
        axes = [self.axis_centers(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# bounds={self.bounds!r}\n")
            fh.write(f"# resolution={self.resolution!r}\n")
            fh.write(f"# z_estimate={self.z_estimate!r}\n")
            writer = csv.writer(fh)
            writer.writerow([f"z{i}" for i in range(self.dim)] + ["density_unnorm"])
            flat = self.values.reshape(-1)
            for point, val in zip(self.centers(), flat):
                writer.writerow([*point, val])


def _prior_mass(bounds) -> float:
    mass = 1.0
    for lo, hi in bounds:
        mass *= 0.5 * (math.erf(hi / math.sqrt(2)) - math.erf(lo / math.sqrt(2)))
    return mass


def quadrature_grid(ebm: LatentEBM, bounds, resolution) -> DensityGrid:
    """Evaluate the unnormalized density at cell midpoints and integrate."""
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    resolution = (
        [int(resolution)] * len(bounds)
        if np.isscalar(resolution)
        else [int(r) for r in resolution]
    )
    if len(bounds) != ebm.dim:
        raise ValueError(f"bounds cover {len(bounds)} dims, target has {ebm.dim}")
    if ebm.dim > 3:
        raise ValueError("quadrature supports at most 3 dimensions")
    if any(r < 32 for r in resolution):
        raise ValueError("need at least 32 cells per dimension")
    if _prior_mass(bounds) < 1.0 - 1e-6:
        raise ValueError("bounds must cover at least 1 - 1e-6 of the prior mass")
    axes = [
        (lo + (hi - lo) / res * (np.arange(res) + 0.5))
        for (lo, hi), res in zip(bounds, resolution)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack(mesh, axis=-1).reshape(-1, len(bounds))
    values = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 100_000):
        stop = min(start + 100_000, points.shape[0])
        log_u = ebm.log_density_unnorm_np(points[start:stop])
        values[start:stop] = np.exp(log_u)
    return DensityGrid(bounds=bounds, resolution=resolution,
                       values=values.reshape([r for r in resolution]))


# ---- exports -----------------------------------------------------------------------


def samples_to_csv(path, samples: np.ndarray):
    samples = np.atleast_2d(samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(samples.shape[1])])
        writer.writerows(samples.tolist())


def samples_to_binary(path, samples: np.ndarray, meta: Optional[dict] = None):
    header = {"type": "samples", **(meta or {})}
    save_checkpoint(path, header, {"samples": np.atleast_2d(samples)})
