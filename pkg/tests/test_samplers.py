import numpy as np
import pytest
from scipy import stats

from ebmflow.checkpoint import load_checkpoint
from ebmflow.energies import (
    CompositeEnergy,
    IndicatorHalfPlaneEnergy,
    LatentEBM,
    RegressorEnergy,
)
from ebmflow.generators import make_linear_gaussian
from ebmflow.samplers import (
    DensityGrid,
    LangevinConfig,
    langevin_sample,
    quadrature_grid,
    rejection_sample,
    samples_to_binary,
    samples_to_csv,
)

TARGET_MEAN = np.array([1.0, 0.0])  # tilt center (2,0) with weight 1/2
TARGET_COV = 0.5 * np.eye(2)


def identity_gen():
    return make_linear_gaussian(np.eye(2), np.zeros(2))


def gaussian_oracle_ebm():
    energy = CompositeEnergy(
        [(0.5, RegressorEnergy(lambda x: x, np.array([2.0, 0.0])))]
    )
    return LatentEBM(identity_gen(), energy)


def zero_ebm():
    return LatentEBM(identity_gen(), CompositeEnergy())


# ---- langevin ------------------------------------------------------------------


def test_langevin_zero_energy_prior_stationary():
    samples, info = langevin_sample(
        zero_ebm(), LangevinConfig(n_steps=500, step_size=0.05, seed=1), n=10_000
    )
    cov = np.cov(samples.T)
    assert np.linalg.norm(cov - np.eye(2)) < 0.1
    assert info.grad_evals == 500 * 10_000


def test_langevin_quadratic_energy_variance():
    # latent-space quadratic tilt: target variance 1/2 per dimension
    energy = CompositeEnergy([(0.5, RegressorEnergy(lambda x: x, np.zeros(2)))])
    ebm = LatentEBM(identity_gen(), energy)
    samples, _ = langevin_sample(
        ebm, LangevinConfig(n_steps=1000, step_size=0.05, seed=2), n=10_000
    )
    var = samples.var(axis=0)
    assert ((var > 0.45) & (var < 0.55)).all()


def test_langevin_gaussian_oracle_mean():
    samples, _ = langevin_sample(
        gaussian_oracle_ebm(), LangevinConfig(n_steps=800, step_size=0.05, seed=3),
        n=20_000,
    )
    assert np.abs(samples.mean(axis=0) - TARGET_MEAN).max() < 0.05


def test_langevin_metropolis_removes_step_bias():
    energy = CompositeEnergy([(0.5, RegressorEnergy(lambda x: x, np.zeros(2)))])
    ebm = LatentEBM(identity_gen(), energy)
    cfg = LangevinConfig(n_steps=600, step_size=0.2, seed=4, metropolis_adjust=True)
    samples, info = langevin_sample(ebm, cfg, n=20_000)
    var = samples.var(axis=0)
    # unadjusted chains at eta=0.2 would sit near 1/(2-0.2) ~ 0.556
    assert ((var > 0.47) & (var < 0.53)).all()
    assert 0 < info.acceptance_rate < 1


def test_langevin_determinism():
    cfg = LangevinConfig(n_steps=50, step_size=0.05, seed=5)
    a, _ = langevin_sample(gaussian_oracle_ebm(), cfg, n=100)
    b, _ = langevin_sample(gaussian_oracle_ebm(), cfg, n=100)
    assert (a == b).all()


def test_langevin_config_validation():
    with pytest.raises(ValueError):
        LangevinConfig(n_steps=0)
    with pytest.raises(ValueError):
        LangevinConfig(step_size=-0.1)


# ---- rejection -------------------------------------------------------------------


def test_rejection_zero_energy_accepts_everything():
    samples, info = rejection_sample(zero_ebm(), n=50_000, envelope=1.0, seed=0)
    assert info.acceptance_rate == 1.0
    assert abs(samples.mean()) < 0.02
    cov = np.cov(samples.T)
    assert np.linalg.norm(cov - np.eye(2)) < 0.05


def test_rejection_gaussian_oracle_moments():
    n = 100_000
    samples, info = rejection_sample(gaussian_oracle_ebm(), n=n, envelope=1.0, seed=1)
    se_mean = np.sqrt(0.5 / n)
    assert np.abs(samples.mean(axis=0) - TARGET_MEAN).max() < 3 * se_mean * 1.5
    cov = np.cov(samples.T)
    assert np.linalg.norm(cov - TARGET_COV) < 0.01
    assert 0.1 < info.acceptance_rate < 0.25


def test_rejection_indicator_support_restriction():
    energy = CompositeEnergy([(1.0, IndicatorHalfPlaneEnergy(axis=0, threshold=0.0))])
    ebm = LatentEBM(identity_gen(), energy)
    samples, _ = rejection_sample(ebm, n=5_000, envelope=1.0, seed=2)
    assert (samples[:, 0] >= 0).all()


def test_rejection_envelope_violation_detected():
    with pytest.raises(RuntimeError, match="envelope"):
        rejection_sample(zero_ebm(), n=100, envelope=0.5, seed=3)


def test_rejection_estimated_envelope_flagged():
    samples, info = rejection_sample(gaussian_oracle_ebm(), n=2_000, seed=4)
    assert info.envelope_estimated
    assert info.envelope >= 1.0  # sup of the tilt is 1 at z=(2,0)
    assert len(samples) == 2_000


def test_rejection_chi2_against_grid():
    ebm = gaussian_oracle_ebm()
    n = 40_000
    samples, _ = rejection_sample(ebm, n=n, envelope=1.0, seed=5)
    grid = quadrature_grid(ebm, bounds=[(-6, 6), (-6, 6)], resolution=64)
    edges = [np.linspace(-6, 6, 65)] * 2
    counts, _ = np.histogramdd(samples, bins=edges)
    expected = grid.normalized * grid.cell_volume * n
    mask = expected > 5
    chi2 = ((counts[mask] - expected[mask]) ** 2 / expected[mask]).sum()
    outside = n - counts[mask].sum()
    exp_outside = n - expected[mask].sum()
    if exp_outside > 5:
        chi2 += (outside - exp_outside) ** 2 / exp_outside
        dof = mask.sum()
    else:
        dof = mask.sum() - 1
    pvalue = stats.chi2.sf(chi2, dof)
    assert pvalue > 0.01


# ---- quadrature -------------------------------------------------------------------


def test_quadrature_zero_energy_normalizer():
    grid = quadrature_grid(zero_ebm(), bounds=[(-6, 6), (-6, 6)], resolution=400)
    assert abs(grid.z_estimate - 1.0) < 0.001


def test_quadrature_matches_closed_form_pointwise():
    ebm = gaussian_oracle_ebm()
    grid = quadrature_grid(ebm, bounds=[(-6, 6), (-6, 6)], resolution=200)
    centers = grid.centers()
    diff = centers - TARGET_MEAN
    closed = np.exp(-((diff**2).sum(axis=1))) / (np.pi)  # N(mean, I/2)
    norm = grid.normalized.reshape(-1)
    core = closed > 1e-4  # away from tails
    rel = np.abs(norm[core] - closed[core]) / closed[core]
    assert rel.max() < 1e-3


def test_quadrature_resolution_convergence():
    ebm = gaussian_oracle_ebm()
    z1 = quadrature_grid(ebm, [(-6, 6), (-6, 6)], 128).z_estimate
    z2 = quadrature_grid(ebm, [(-6, 6), (-6, 6)], 256).z_estimate
    assert abs(z2 - z1) < 1e-4


def test_quadrature_normalized_sums_to_one():
    grid = quadrature_grid(gaussian_oracle_ebm(), [(-6, 6), (-6, 6)], 64)
    total = grid.normalized.sum() * grid.cell_volume
    assert abs(total - 1.0) < 1e-9


def test_quadrature_validation():
    ebm = gaussian_oracle_ebm()
    with pytest.raises(ValueError, match="32"):
        quadrature_grid(ebm, [(-6, 6), (-6, 6)], 16)
    with pytest.raises(ValueError, match="prior mass"):
        quadrature_grid(ebm, [(-1, 1), (-6, 6)], 64)
    gen4 = make_linear_gaussian(np.eye(4), np.zeros(4))
    ebm4 = LatentEBM(gen4, CompositeEnergy())
    with pytest.raises(ValueError, match="3 dimensions"):
        quadrature_grid(ebm4, [(-6, 6)] * 4, 64)


# ---- exports -----------------------------------------------------------------------


def test_sample_exports(tmp_path):
    samples = np.random.default_rng(0).standard_normal((10, 2))
    csv_path = tmp_path / "s.csv"
    samples_to_csv(csv_path, samples)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "z0,z1"
    assert len(lines) == 11
    bin_path = tmp_path / "s.bin"
    samples_to_binary(bin_path, samples, meta={"seed": 0})
    header, arrays = load_checkpoint(bin_path)
    assert header["type"] == "samples"
    assert (arrays["samples"] == samples).all()


def test_grid_csv_export(tmp_path):
    grid = quadrature_grid(zero_ebm(), [(-6, 6), (-6, 6)], 32)
    path = tmp_path / "grid.csv"
    grid.to_csv(path)
    text = path.read_text().splitlines()
    assert text[0].startswith("# bounds=")
    assert text[2].startswith("# z_estimate=")
    assert len(text) == 3 + 1 + 32 * 32
