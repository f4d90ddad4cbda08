"""Packaged end-to-end scenarios: each builds its models, trains, samples,
measures, and writes a deterministic artifact tree.

Every scenario returns its reportable numbers (deterministic given the
seed) separately from wall-clock timings, so re-runs can be compared
bit-for-bit with timing excluded. Artifact layout per run directory:
manifest.json, report.json, plus sample CSVs, density grids, loss traces,
and checkpoints as applicable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import config_hash
from .energies import (
    ClassifierEnergy,
    CompositeEnergy,
    LatentEBM,
    MomentEnergy,
    RegressorEnergy,
    embedding_distance,
)
from .evaluation import (
    BenchSampler,
    attribute_kl,
    bench_rows_to_csv,
    bench_table_text,
    histogram_tv,
    kl_flow_to_target,
    latency_bench,
)
from .flows import init_flow
from .generators import (
    FairClassifier,
    GanConfig,
    GroupedClassifier,
    Mlp,
    MixtureSpec,
    RestrictedClassifier,
    compose_generator,
    make_linear_gaussian,
    train_mixture_gan,
)
from .samplers import (
    LangevinConfig,
    langevin_sample,
    quadrature_grid,
    rejection_sample,
    samples_to_csv,
)
from .training import (
    ControlStage,
    TrainConfig,
    iterate_control,
    solve_moment_beta,
    train_conditional_flow,
    train_flow,
    train_with_id_energy,
)

try:
    from importlib.metadata import version as _pkg_version

    CODE_VERSION = _pkg_version("ebmflow")
except Exception:  # pragma: no cover - not installed
    CODE_VERSION = "unknown"


@dataclass
class ScenarioResult:
    name: str
    seed: int
    numbers: dict
    timing: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    def flagged_unconverged(self) -> bool:
        return bool(self.numbers.get("unconverged_flag", False))


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _finish(name, seed, out_dir, numbers, timing, config, artifacts):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scenario": name,
        "seed": seed,
        "config_sha256": config_hash(config),
        "code_version": CODE_VERSION,
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "report.json", {"numbers": numbers, "timing": timing})
    files = sorted(artifacts + ["manifest.json", "report.json"])
    return ScenarioResult(name=name, seed=seed, numbers=numbers, timing=timing,
                          artifacts=files)


def _identity(x):
    return x


def _float(x):
    return float(x)


def gaussian_oracle_target():
    """Shared setup: identity map with a quadratic pull toward (2, 0).

    The tilted latent target is exactly N((1, 0), I/2).
    """
    generator = make_linear_gaussian(np.eye(2), np.zeros(2))
    energy = CompositeEnergy(
        [(0.5, RegressorEnergy(_identity, np.array([2.0, 0.0])))]
    )
    return generator, energy


TARGET_MEAN = np.array([1.0, 0.0])
TARGET_COV = 0.5 * np.eye(2)


# ---- gaussian-oracle ----------------------------------------------------------------


def run_gaussian_oracle(out_dir, seed=1004, overrides=None) -> ScenarioResult:
    """Train a stack on the exactly solvable tilted target, then cross-check
    it against chain and rejection sampling plus quadrature."""
    cfg = {
        "train": {"batch": 512, "steps": 3000, "lr": 1e-3, "lr_final": 2e-4},
        "flow": {"n_blocks": 8, "hidden_width": 64},
        "langevin": {"n_steps": 200, "step_size": 0.05},
        "n_samples": 100_000,
        "bins": 50,
        "bounds": [[-3.0, 5.0], [-4.0, 4.0]],
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generator, energy = gaussian_oracle_target()
    ebm = LatentEBM(generator, energy)

    timing = {}
    t0 = time.perf_counter()
    flow = init_flow(2, n_blocks=cfg["flow"]["n_blocks"],
                     hidden_width=cfg["flow"]["hidden_width"], seed=seed)
    flow, report = train_flow(generator, energy, flow,
                              TrainConfig(seed=seed, **cfg["train"]))
    timing["train_s"] = time.perf_counter() - t0
    flow.save(out / "flow.ckpt")
    report.save_csv(out / "loss_trace.csv")

    grid = quadrature_grid(ebm, [(-6, 6), (-6, 6)], 400)
    grid.to_csv(out / "target_grid.csv")
    kl = kl_flow_to_target(flow, ebm, grid)

    n = cfg["n_samples"]
    flow_samples = flow.sample(n, np.random.default_rng([seed, 1]))
    t0 = time.perf_counter()
    langevin_samples, linfo = langevin_sample(
        ebm, LangevinConfig(seed=seed, **cfg["langevin"]), n
    )
    timing["langevin_s"] = time.perf_counter() - t0
    rejection_samples, rinfo = rejection_sample(ebm, n, envelope=1.0, seed=seed)

    samples_to_csv(out / "samples_flow.csv", flow_samples)
    samples_to_csv(out / "samples_langevin.csv", langevin_samples)
    samples_to_csv(out / "samples_rejection.csv", rejection_samples)

    bounds = [tuple(b) for b in cfg["bounds"]]
    bins = cfg["bins"]
    mean = flow_samples.mean(axis=0)
    cov = np.cov(flow_samples.T)
    numbers = {
        "kl_nats": _float(kl),
        "flow_mean": [_float(v) for v in mean],
        "flow_mean_err": _float(np.abs(mean - TARGET_MEAN).max()),
        "flow_cov_frobenius_err": _float(np.linalg.norm(cov - TARGET_COV)),
        "tv_flow_langevin": _float(histogram_tv(flow_samples, langevin_samples, bounds, bins)),
        "tv_flow_rejection": _float(histogram_tv(flow_samples, rejection_samples, bounds, bins)),
        "tv_langevin_rejection": _float(
            histogram_tv(langevin_samples, rejection_samples, bounds, bins)
        ),
        "rejection_acceptance_rate": _float(rinfo.acceptance_rate),
        "langevin_grad_evals": linfo.grad_evals,
        "quadrature_z": _float(grid.z_estimate),
        "final_loss": _float(report.final_total),
    }
    artifacts = ["flow.ckpt", "loss_trace.csv", "target_grid.csv",
                 "samples_flow.csv", "samples_langevin.csv", "samples_rejection.csv"]
    return _finish("gaussian-oracle", seed, out_dir, numbers, timing, cfg, artifacts)


# ---- appendix-a ------------------------------------------------------------------------


def run_appendix_a(out_dir, seed=1006, overrides=None) -> ScenarioResult:
    """Biased-mixture study: train the toy adversarial generator, steer it
    onto one component with the closed-form classifier, then reweight it to
    a uniform component distribution via the moment constraint."""
    cfg = {
        "gan": {"steps": 5000},
        "control": {
            "target_component": 1,
            "weight": 8.0,
            "flow": {"n_blocks": 8, "hidden_width": 64},
            "train": {"batch": 256, "steps": 3000, "lr": 1e-3, "lr_final": 2e-4},
        },
        "debias": {
            "n_batch": 100_000,
            "beta": {"batch": 2, "steps": 2000, "lr": 0.05},
            "flow": {"n_blocks": 12, "hidden_width": 128},
            "train": {"batch": 512, "steps": 5000, "lr": 1e-3, "lr_final": 1e-4},
        },
        "n_samples": 100_000,
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = MixtureSpec.biased_default()
    classifier = FairClassifier(spec)

    timing = {}
    t0 = time.perf_counter()
    gan, gan_report = train_mixture_gan(spec, GanConfig(seed=seed, **cfg["gan"]))
    timing["gan_s"] = time.perf_counter() - t0
    gan.save(out / "generator.ckpt")

    n = cfg["n_samples"]
    rng = np.random.default_rng([seed, 2])
    real_samples = spec.sample(20_000, rng)
    gan_samples = gan.sample_outputs(n, np.random.default_rng([seed, 3]))
    pre_dist = np.bincount(classifier.labels(gan_samples), minlength=4) / n

    # controllability: concentrate on one component
    ctl = cfg["control"]
    t0 = time.perf_counter()
    control_energy = CompositeEnergy(
        [(ctl["weight"], ClassifierEnergy(classifier, ctl["target_component"]))]
    )
    control_flow = init_flow(2, n_blocks=ctl["flow"]["n_blocks"],
                             hidden_width=ctl["flow"]["hidden_width"], seed=seed + 1)
    control_flow, control_report = train_flow(
        gan, control_energy, control_flow, TrainConfig(seed=seed + 1, **ctl["train"])
    )
    timing["control_s"] = time.perf_counter() - t0
    control_flow.save(out / "control_flow.ckpt")
    control_report.save_csv(out / "control_trace.csv")
    controlled = compose_generator(gan, control_flow)
    controlled_samples = controlled.sample_outputs(n, np.random.default_rng([seed, 4]))
    control_fraction = _float(
        (classifier.labels(controlled_samples) == ctl["target_component"]).mean()
    )

    # de-biasing: exponential tilt toward uniform component mass
    deb = cfg["debias"]
    t0 = time.perf_counter()
    solution = solve_moment_beta(
        gan, classifier.probs, np.full(4, 0.25), n_batch=deb["n_batch"],
        cfg=TrainConfig(seed=seed + 2, **deb["beta"]),
    )
    timing["beta_s"] = time.perf_counter() - t0

    # independent reweighting check on a fresh latent batch
    check_rng = np.random.default_rng([seed, 5])
    z_check = check_rng.standard_normal((deb["n_batch"], 2))
    with ad.no_grad():
        feats = classifier.probs(gan.apply(ad.as_tensor(z_check))).data
    tilt = np.exp(feats @ solution.beta)
    snis = (tilt / tilt.sum()) @ feats
    snis_gap = _float(np.abs(snis - 0.25).max())

    t0 = time.perf_counter()
    debias_energy = CompositeEnergy([(1.0, MomentEnergy(solution.beta, classifier.probs))])
    debias_flow = init_flow(2, n_blocks=deb["flow"]["n_blocks"],
                            hidden_width=deb["flow"]["hidden_width"], seed=seed + 3)
    debias_flow, debias_report = train_flow(
        gan, debias_energy, debias_flow, TrainConfig(seed=seed + 3, **deb["train"])
    )
    timing["debias_s"] = time.perf_counter() - t0
    debias_flow.save(out / "debias_flow.ckpt")
    debias_report.save_csv(out / "debias_trace.csv")
    debiased = compose_generator(gan, debias_flow)
    debiased_samples = debiased.sample_outputs(n, np.random.default_rng([seed, 6]))
    post_dist = np.bincount(classifier.labels(debiased_samples), minlength=4) / n

    samples_to_csv(out / "samples_real.csv", real_samples)
    samples_to_csv(out / "samples_generator.csv", gan_samples[:20_000])
    samples_to_csv(out / "samples_controlled.csv", controlled_samples[:20_000])
    samples_to_csv(out / "samples_debiased.csv", debiased_samples[:20_000])
    quadrature_grid(LatentEBM(gan, control_energy), [(-6, 6), (-6, 6)], 200).to_csv(
        out / "control_target_grid.csv"
    )
    quadrature_grid(LatentEBM(gan, debias_energy), [(-6, 6), (-6, 6)], 200).to_csv(
        out / "debias_target_grid.csv"
    )

    numbers = {
        "gan_coverage": [_float(c) for c in gan_report.coverage],
        "pre_control_dist": [_float(p) for p in pre_dist],
        "pre_dominant_mass": _float(pre_dist.max()),
        "control_fraction": control_fraction,
        "beta": [_float(b) for b in solution.beta],
        "beta_residual": _float(solution.residual),
        "snis_gap": snis_gap,
        "post_debias_dist": [_float(p) for p in post_dist],
        "post_debias_linf": _float(np.abs(post_dist - 0.25).max()),
        "unconverged_flag": not solution.converged,
    }
    artifacts = [
        "generator.ckpt", "control_flow.ckpt", "debias_flow.ckpt",
        "control_trace.csv", "debias_trace.csv", "samples_real.csv",
        "samples_generator.csv", "samples_controlled.csv", "samples_debiased.csv",
        "control_target_grid.csv", "debias_target_grid.csv",
    ]
    return _finish("appendix-a", seed, out_dir, numbers, timing, cfg, artifacts)


# ---- moment-debias (scalar tilt study) -----------------------------------------------------


def run_moment_debias(out_dir, seed=1007, overrides=None) -> ScenarioResult:
    """Solve the scalar exponential tilt for sigmoid features at two targets
    and compare against a dense-quadrature bisection root."""
    cfg = {
        "n_batch": 100_000,
        "beta": {"batch": 2, "steps": 2000, "lr": 0.05},
        "targets": [0.5, 0.7],
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generator = make_linear_gaussian(np.eye(1), np.zeros(1))

    def gamma(x):
        return ad.sigmoid(x)

    timing = {}
    numbers = {"targets": [_float(t) for t in cfg["targets"]]}
    unconverged = False
    rows = []
    for mu in cfg["targets"]:
        t0 = time.perf_counter()
        sol = solve_moment_beta(generator, gamma, np.array([mu]),
                                n_batch=cfg["n_batch"],
                                cfg=TrainConfig(seed=seed, **cfg["beta"]))
        timing[f"solve_mu{mu}_s"] = time.perf_counter() - t0
        root = _sigmoid_tilt_root(mu)
        key = f"mu_{mu}"
        numbers[f"{key}_beta"] = _float(sol.beta[0])
        numbers[f"{key}_root"] = _float(root)
        numbers[f"{key}_abs_diff"] = _float(abs(sol.beta[0] - root))
        numbers[f"{key}_residual"] = _float(sol.residual)
        unconverged |= not sol.converged
        rows.append((mu, sol.beta[0], root, sol.residual))
    numbers["unconverged_flag"] = unconverged
    with open(out / "tilt_solutions.csv", "w") as fh:
        fh.write("mu,beta,quadrature_root,residual\n")
        for mu, beta, root, res in rows:
            fh.write(f"{mu},{beta},{root},{res}\n")
    return _finish("moment-debias", seed, out_dir, numbers, timing, cfg,
                   ["tilt_solutions.csv"])


def _sigmoid_tilt_root(target, lo=-30.0, hi=30.0):
    """Bisection on dense-grid quadrature of the tilted sigmoid mean."""
    xs = np.linspace(-12.0, 12.0, 24001)
    phi = np.exp(-0.5 * xs * xs) / np.sqrt(2.0 * np.pi)
    sig = 1.0 / (1.0 + np.exp(-xs))

    def tilted_mean(beta):
        w = np.exp(beta * sig) * phi
        return np.trapezoid(sig * w, xs) / np.trapezoid(w, xs)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tilted_mean(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---- conditional-pose-analog ------------------------------------------------------------------


def run_conditional_pose_analog(out_dir, seed=1008, overrides=None) -> ScenarioResult:
    """Condition-indexed control with an exact per-condition Gaussian oracle,
    plus the identity-preservation study in a 4-d latent."""
    cfg = {
        "grid": {
            "weight": 2.0,  # posterior mean is 0.8 * condition (precision 5)
            "flow": {"n_blocks": 8, "hidden_width": 64},
            "train": {"batch": 256, "steps": 3000, "lr": 1e-3, "lr_final": 2e-4},
            "eval_samples": 4000,
        },
        "id": {
            "weight": 2.0,
            "lambda_id": 1.0,
            "flow": {"n_blocks": 8, "hidden_width": 64},
            "train": {"batch": 256, "steps": 2500, "lr": 1e-3, "lr_final": 2e-4},
            "embed": {"sizes": [4, 16, 8], "seed": 77},
            "eval_pairs": 4000,
        },
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}

    # part 1: conditional mean tracks 0.8 * rho on a 5x5 grid
    g2 = make_linear_gaussian(np.eye(2), np.zeros(2))
    grid_cfg = cfg["grid"]

    def family2(rho):
        return CompositeEnergy([(grid_cfg["weight"], RegressorEnergy(_identity, rho))])

    t0 = time.perf_counter()
    cond_flow = init_flow(2, n_blocks=grid_cfg["flow"]["n_blocks"],
                          hidden_width=grid_cfg["flow"]["hidden_width"],
                          conditional=True, condition_dim=2, seed=seed)
    cond_flow, cond_report = train_conditional_flow(
        g2, family2, cond_flow,
        TrainConfig(seed=seed, rho_ranges=[(-1.0, 1.0), (-1.0, 1.0)],
                    **grid_cfg["train"]),
    )
    timing["conditional_s"] = time.perf_counter() - t0
    cond_flow.save(out / "conditional_flow.ckpt")
    cond_report.save_csv(out / "conditional_trace.csv")

    eval_rng = np.random.default_rng([seed, 7])
    grid_errs = []
    rows = []
    for r0 in np.linspace(-1, 1, 5):
        for r1 in np.linspace(-1, 1, 5):
            rho = np.array([r0, r1])
            eps = eval_rng.standard_normal((grid_cfg["eval_samples"], 2))
            with ad.no_grad():
                z, _ = cond_flow.forward(eps, np.tile(rho, (grid_cfg["eval_samples"], 1)))
            mean = z.data.mean(axis=0)
            err = np.abs(mean - 0.8 * rho).max()
            grid_errs.append(err)
            rows.append((r0, r1, mean[0], mean[1], err))
    with open(out / "conditional_grid.csv", "w") as fh:
        fh.write("rho0,rho1,mean0,mean1,max_abs_err\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")

    # part 2: identity preservation across conditions in a wider latent
    g4 = make_linear_gaussian(np.eye(4), np.zeros(4))
    id_cfg = cfg["id"]

    def head2(x):
        return ad.narrow(x, 0, 2)

    def family4(rho):
        return CompositeEnergy([(id_cfg["weight"], RegressorEnergy(head2, rho))])

    embed = Mlp(id_cfg["embed"]["sizes"], seed=id_cfg["embed"]["seed"],
                trainable=False, out_activation="tanh")
    t0 = time.perf_counter()
    id_flow = init_flow(4, n_blocks=id_cfg["flow"]["n_blocks"],
                        hidden_width=id_cfg["flow"]["hidden_width"],
                        conditional=True, condition_dim=2, seed=seed + 1)
    id_flow, id_report = train_with_id_energy(
        g4, family4, id_flow,
        TrainConfig(seed=seed + 1, rho_ranges=[(-1.0, 1.0), (-1.0, 1.0)],
                    rho_canonical=np.zeros(2), lambda_id=id_cfg["lambda_id"],
                    **id_cfg["train"]),
        embed,
    )
    timing["id_s"] = time.perf_counter() - t0
    id_flow.save(out / "id_flow.ckpt")
    id_report.save_csv(out / "id_trace.csv")

    pair_rng = np.random.default_rng([seed, 8])
    m = id_cfg["eval_pairs"]
    eps = pair_rng.standard_normal((m, 4))
    rho_a = pair_rng.uniform(-1, 1, (m, 2))
    rho_b = pair_rng.uniform(-1, 1, (m, 2))
    eps_other = pair_rng.standard_normal((m, 4))
    with ad.no_grad():
        za, _ = id_flow.forward(eps, rho_a)
        zb, _ = id_flow.forward(eps, rho_b)
        zc, _ = id_flow.forward(eps_other, rho_b)
        xa, xb, xc = g4.apply(za), g4.apply(zb), g4.apply(zc)
        same_id = _float(embedding_distance(embed, xa, xb).data.mean())
        diff_id = _float(embedding_distance(embed, xa, xc).data.mean())

    numbers = {
        "grid_max_abs_err": _float(max(grid_errs)),
        "grid_mean_abs_err": _float(np.mean(grid_errs)),
        "same_id_distance": same_id,
        "diff_id_distance": diff_id,
        "id_margin": _float(diff_id / same_id),
    }
    artifacts = ["conditional_flow.ckpt", "conditional_trace.csv",
                 "conditional_grid.csv", "id_flow.ckpt", "id_trace.csv"]
    return _finish("conditional-pose-analog", seed, out_dir, numbers, timing, cfg,
                   artifacts)


# ---- iterative-debias ---------------------------------------------------------------------------


def run_iterative_debias(out_dir, seed=1010, overrides=None) -> ScenarioResult:
    """Two-stage control: steer onto a two-component region, then equalize
    the split between the two components against the composed generator."""
    cfg = {
        "gan": {"steps": 5000},
        "union": [0, 1],
        "stage1": {
            "weight": 8.0,
            "tilt_weight": 0.028,  # nudges the union split toward 80/20
            "flow": {"n_blocks": 8, "hidden_width": 64},
            "train": {"batch": 256, "steps": 3000, "lr": 1e-3, "lr_final": 2e-4},
        },
        "stage2": {
            "n_batch": 100_000,
            "beta": {"batch": 2, "steps": 2000, "lr": 0.05},
            "flow": {"n_blocks": 12, "hidden_width": 128},
            "train": {"batch": 512, "steps": 5000, "lr": 1e-3, "lr_final": 1e-4},
        },
        "n_samples": 100_000,
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = MixtureSpec.biased_default()
    classifier = FairClassifier(spec)
    union = list(cfg["union"])
    union_clf = GroupedClassifier(classifier, [union, [k for k in range(4) if k not in union]])
    binary_clf = RestrictedClassifier(classifier, union)

    timing = {}
    t0 = time.perf_counter()
    gan, gan_report = train_mixture_gan(spec, GanConfig(seed=seed, **cfg["gan"]))
    timing["gan_s"] = time.perf_counter() - t0
    gan.save(out / "generator.ckpt")

    s1 = cfg["stage1"]

    def stage1_energy(_generator):
        terms = [(s1["weight"], ClassifierEnergy(union_clf, 0))]
        if s1["tilt_weight"] > 0:
            terms.append((s1["tilt_weight"], ClassifierEnergy(classifier, union[1])))
        stage1_energy.composite = CompositeEnergy(terms)
        return stage1_energy.composite

    s2 = cfg["stage2"]

    def stage2_energy(generator):
        solution = solve_moment_beta(
            generator, binary_clf.probs, np.array([0.5, 0.5]),
            n_batch=s2["n_batch"], cfg=TrainConfig(seed=seed + 2, **s2["beta"]),
        )
        stage2_energy.solution = solution
        stage2_energy.composite = CompositeEnergy(
            [(1.0, MomentEnergy(solution.beta, binary_clf.probs))]
        )
        return stage2_energy.composite

    stages = [
        ControlStage(
            name="concentrate-union",
            build_energy=stage1_energy,
            train=TrainConfig(seed=seed + 1, **s1["train"]),
            n_blocks=s1["flow"]["n_blocks"],
            hidden_width=s1["flow"]["hidden_width"],
            flow_seed=seed + 1,
        ),
        ControlStage(
            name="equalize-split",
            build_energy=stage2_energy,
            train=TrainConfig(seed=seed + 3, **s2["train"]),
            n_blocks=s2["flow"]["n_blocks"],
            hidden_width=s2["flow"]["hidden_width"],
            flow_seed=seed + 3,
        ),
    ]
    t0 = time.perf_counter()
    result = iterate_control(gan, stages)
    timing["stages_s"] = time.perf_counter() - t0
    final_generator = result.generator
    final_generator.save(out / "final_generator.ckpt")
    for stage_result in result.stages:
        stage_result.report.save_csv(out / f"trace_{stage_result.name}.csv")

    n = cfg["n_samples"]
    stage1_gen = compose_generator(gan, result.stages[0].flow)
    stage1_samples = stage1_gen.sample_outputs(n, np.random.default_rng([seed, 4]))
    final_samples = final_generator.sample_outputs(n, np.random.default_rng([seed, 5]))
    samples_to_csv(out / "samples_stage1.csv", stage1_samples[:20_000])
    samples_to_csv(out / "samples_final.csv", final_samples[:20_000])

    stage1_union_frac = _float((union_clf.labels(stage1_samples) == 0).mean())
    final_union_frac = _float((union_clf.labels(final_samples) == 0).mean())
    stage1_split = np.bincount(binary_clf.labels(stage1_samples), minlength=2) / n
    final_split = np.bincount(binary_clf.labels(final_samples), minlength=2) / n
    final_kl = _float(attribute_kl(final_samples, binary_clf, np.array([0.5, 0.5])))
    stage1_kl = _float(attribute_kl(stage1_samples, binary_clf, np.array([0.5, 0.5])))

    # the final generator must sample without touching any energy
    used_energies = [stage1_energy.composite, stage2_energy.composite]
    count_before = sum(e.eval_count for e in used_energies)
    final_generator.sample_outputs(1000, np.random.default_rng([seed, 9]))
    count_after = sum(e.eval_count for e in used_energies)

    solution = stage2_energy.solution
    numbers = {
        "gan_coverage": [_float(c) for c in gan_report.coverage],
        "stage1_union_fraction": stage1_union_frac,
        "stage1_split": [_float(p) for p in stage1_split],
        "stage1_attribute_kl": stage1_kl,
        "final_union_fraction": final_union_frac,
        "final_split": [_float(p) for p in final_split],
        "final_attribute_kl": final_kl,
        "union_retention_drop": _float(stage1_union_frac - final_union_frac),
        "beta": [_float(b) for b in solution.beta],
        "beta_residual": _float(solution.residual),
        "energy_evals_during_sampling": count_after - count_before,
        "unconverged_flag": not solution.converged,
    }
    artifacts = ["generator.ckpt", "final_generator.ckpt",
                 "trace_concentrate-union.csv", "trace_equalize-split.csv",
                 "samples_stage1.csv", "samples_final.csv"]
    return _finish("iterative-debias", seed, out_dir, numbers, timing, cfg, artifacts)


# ---- latency --------------------------------------------------------------------------------------


def run_latency(out_dir, seed=1011, overrides=None) -> ScenarioResult:
    """Per-sample cost of the trained feed-forward sampler against chain
    sampling on the same target, with gradient-call accounting."""
    cfg = {
        "train": {"batch": 512, "steps": 2000, "lr": 1e-3, "lr_final": 2e-4},
        "flow": {"n_blocks": 8, "hidden_width": 64},
        "bench": {"n": 2000, "warmup": 16, "repeats": 5},
        "langevin_steps": [50, 200],
        "step_size": 0.05,
    }
    cfg = _merge(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generator, energy = gaussian_oracle_target()
    ebm = LatentEBM(generator, energy)

    timing = {}
    t0 = time.perf_counter()
    flow = init_flow(2, n_blocks=cfg["flow"]["n_blocks"],
                     hidden_width=cfg["flow"]["hidden_width"], seed=seed)
    flow, _ = train_flow(generator, energy, flow, TrainConfig(seed=seed, **cfg["train"]))
    timing["train_s"] = time.perf_counter() - t0
    flow.save(out / "flow.ckpt")

    flow_rng = np.random.default_rng([seed, 1])

    def draw_flow(n):
        return flow.sample(n, flow_rng)

    samplers = [BenchSampler("flow", draw_flow, ebm)]
    for steps in cfg["langevin_steps"]:
        def draw(n, _steps=steps):
            samples, _ = langevin_sample(
                ebm, LangevinConfig(n_steps=_steps, step_size=cfg["step_size"],
                                    seed=seed), n
            )
            return samples

        samplers.append(BenchSampler(f"langevin-{steps}", draw, ebm))

    t0 = time.perf_counter()
    rows = latency_bench(samplers, n=cfg["bench"]["n"],
                         warmup=cfg["bench"]["warmup"],
                         repeats=cfg["bench"]["repeats"])
    timing["bench_s"] = time.perf_counter() - t0
    bench_rows_to_csv(out / "latency.csv", rows)
    (out / "latency.txt").write_text(bench_table_text(rows) + "\n")

    by_name = {row.name: row for row in rows}
    ref = by_name[f"langevin-{max(cfg['langevin_steps'])}"]
    fast = by_name[f"langevin-{min(cfg['langevin_steps'])}"]
    flow_row = by_name["flow"]
    numbers = {
        "flow_grad_calls_per_sample": _float(flow_row.grad_calls_per_sample),
        "langevin_grad_calls_per_sample": {
            row.name: _float(row.grad_calls_per_sample) for row in rows[1:]
        },
        "flow_mean_energy": _float(flow_row.mean_energy),
        "reference_mean_energy": _float(ref.mean_energy),
        "energy_parity_rel_err": _float(
            abs(flow_row.mean_energy - ref.mean_energy) / abs(ref.mean_energy)
        ),
    }
    timing["speedup_vs_fast_chain"] = _float(
        fast.sec_per_sample / flow_row.sec_per_sample
    )
    timing["sec_per_sample"] = {row.name: _float(row.sec_per_sample) for row in rows}
    artifacts = ["flow.ckpt", "latency.csv", "latency.txt"]
    return _finish("latency", seed, out_dir, numbers, timing, cfg, artifacts)


# ---- registry ----------------------------------------------------------------------------------------


def _merge(base, overrides):
    if not overrides:
        return base
    out = json.loads(json.dumps(base))

    def rec(dst, src):
        for key, value in src.items():
            if isinstance(value, dict) and isinstance(dst.get(key), dict):
                rec(dst[key], value)
            else:
                dst[key] = value

    rec(out, overrides)
    return out


SCENARIOS = {
    "gaussian-oracle": run_gaussian_oracle,
    "appendix-a": run_appendix_a,
    "moment-debias": run_moment_debias,
    "conditional-pose-analog": run_conditional_pose_analog,
    "iterative-debias": run_iterative_debias,
    "latency": run_latency,
}


def run_scenario(name, out_dir, seed=None, overrides=None) -> ScenarioResult:
    if name not in SCENARIOS:
        raise KeyError(
            f"unknown scenario {name!r}; available: {', '.join(sorted(SCENARIOS))}"
        )
    fn = SCENARIOS[name]
    if seed is None:
        return fn(out_dir, overrides=overrides)
    return fn(out_dir, seed=seed, overrides=overrides)
