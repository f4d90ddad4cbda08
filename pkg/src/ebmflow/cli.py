"""Command-line entry point.

Commands bind YAML configs to library operations:

    train              fit an unconditional stack to a configured target
    train-conditional  fit a conditional stack over a condition prior
    train-id           conditional fit plus the identity-preservation term
    solve-beta         solve moment-constraint tilt coefficients
    iterate            run configured control stages and compose
    sample             draw latents/outputs from a checkpoint
    eval               divergence of a flow checkpoint against its target
    bench              per-sample latency and gradient accounting
    scenario NAME      run a packaged reproduction scenario

Exit codes: 0 success, 2 config error, 3 numerical failure,
4 finished-but-flagged-unconverged.
"""

from __future__ import annotations

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import (
    ConfigError,
    apply_overrides,
    build_composite,
    build_flow,
    build_generator,
    build_langevin_config,
    build_train_config,
    config_hash,
    load_config,
    validate_config,
)
from .autodiff import NonFiniteError
from .energies import LatentEBM, RegressorEnergy, CompositeEnergy
from .evaluation import (
    BenchSampler,
    bench_rows_to_csv,
    bench_table_text,
    kl_flow_to_target,
    latency_bench,
)
from .flows import FlowStack
from .generators import load_generator
from .samplers import langevin_sample, quadrature_grid, samples_to_csv
from .scenarios import SCENARIOS, CODE_VERSION, run_scenario
from .training import (
    TrainConfig,
    TrainingAborted,
    TrainingDiverged,
    solve_moment_beta,
    train_conditional_flow,
    train_flow,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_UNCONVERGED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebmflow",
        description="Distributional control of fixed generators via "
                    "latent tilted targets approximated by invertible flows.",
    )
    parser.add_argument("command", choices=[
        "train", "train-conditional", "train-id", "solve-beta", "iterate",
        "sample", "eval", "bench", "scenario",
    ])
    parser.add_argument("name", nargs="?", default=None,
                        help="scenario name (for the scenario command)")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed derived by the run")
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
    parser.add_argument("--deterministic", action="store_true",
                        help="record strict determinism intent in the manifest")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, TrainingAborted, TrainingDiverged, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


def _load(args) -> dict:
    if args.command == "scenario":
        config = load_config(args.config) if args.config else {}
        return apply_overrides(config, args.overrides)
    if args.config is None:
        raise ConfigError(f"{args.command} requires --config")
    config = validate_config(apply_overrides(load_config(args.config), args.overrides))
    return config


def _out_dir(args, config) -> Path:
    out = args.out or config.get("out")
    if out is None:
        raise ConfigError("no output directory: pass --out or set `out` in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


def _write_manifest(out: Path, args, config, seed):
    payload = {
        "command": args.command,
        "name": args.name,
        "seed": seed,
        "config_sha256": config_hash(config),
        "code_version": CODE_VERSION,
        "deterministic": bool(args.deterministic),
    }
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _dispatch(args) -> int:
    config = _load(args)

    if args.command == "scenario":
        if not args.name:
            raise ConfigError("scenario requires a name, e.g. `ebmflow scenario latency`")
        if args.name not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario {args.name!r}; available: {', '.join(sorted(SCENARIOS))}"
            )
        out = args.out or Path("runs") / args.name
        result = run_scenario(args.name, out, seed=args.seed, overrides=config or None)
        print(json.dumps(result.numbers, indent=2, sort_keys=True))
        return EXIT_UNCONVERGED if result.flagged_unconverged() else EXIT_OK

    out = _out_dir(args, config)
    seed = _seed(args, config)
    base_dir = args.config.parent if args.config else None

    if args.command == "train":
        generator = build_generator(config["generator"], base_dir)
        energy = build_composite(config.get("energies"))
        flow = build_flow(config["flow"], base_dir)
        cfg = build_train_config(config.get("train"), seed_override=seed)
        flow, report = train_flow(generator, energy, flow, cfg)
        flow.save(out / "flow.ckpt")
        report.save_csv(out / "loss_trace.csv")
        _write_manifest(out, args, config, seed)
        print(f"final loss {report.final_total:.6f} over {report.steps} steps")
        return EXIT_OK

    if args.command in ("train-conditional", "train-id"):
        generator = build_generator(config["generator"], base_dir)
        flow = build_flow(config["flow"], base_dir)
        cfg = build_train_config(config.get("train"), seed_override=seed)
        energy_specs = config.get("energies") or []
        if len(energy_specs) != 1 or energy_specs[0].get("kind") != "regressor":
            raise ConfigError(
                "conditional training drives one regressor energy whose target "
                "is the sampled condition"
            )
        weight = float(energy_specs[0].get("weight", 1.0))
        metric = energy_specs[0].get("metric", "euclidean")

        def family(rho):
            return CompositeEnergy(
                [(weight, RegressorEnergy(lambda x: x, rho, metric=metric))]
            )

        if args.command == "train-id":
            from .generators import Mlp
            from .training import train_with_id_energy

            embed_spec = (energy_specs[0].get("embed") or {"sizes": [flow.dim, 16, 8],
                                                           "seed": 0})
            embed = Mlp(embed_spec["sizes"], seed=embed_spec.get("seed", 0),
                        trainable=False, out_activation="tanh")
            flow, report = train_with_id_energy(generator, family, flow, cfg, embed)
        else:
            flow, report = train_conditional_flow(generator, family, flow, cfg)
        flow.save(out / "flow.ckpt")
        report.save_csv(out / "loss_trace.csv")
        _write_manifest(out, args, config, seed)
        print(f"final loss {report.final_total:.6f} over {report.steps} steps")
        return EXIT_OK

    if args.command == "solve-beta":
        generator = build_generator(config["generator"], base_dir)
        moment = config.get("moment") or {}
        if "mu" not in moment:
            raise ConfigError("solve-beta needs moment.mu")
        from .config import build_classifier

        gamma_spec = moment.get("gamma")
        if gamma_spec:
            gamma = build_classifier(gamma_spec).probs
        else:
            gamma = ad.sigmoid
        cfg = build_train_config(config.get("train"), seed_override=seed)
        solution = solve_moment_beta(
            generator, gamma, np.asarray(moment["mu"], dtype=np.float64),
            n_batch=int(moment.get("n_batch", 100_000)), cfg=cfg,
        )
        (out / "beta.json").write_text(
            json.dumps(solution.to_dict(), indent=2, sort_keys=True) + "\n"
        )
        _write_manifest(out, args, config, seed)
        print(f"beta={solution.beta.tolist()} residual={solution.residual:.3e} "
              f"converged={solution.converged}")
        return EXIT_OK if solution.converged else EXIT_UNCONVERGED

    if args.command == "sample":
        generator = build_generator(config["generator"], base_dir)
        section = config.get("sample") or {}
        n = int(section.get("n", 10_000))
        rng = np.random.default_rng([seed, 1])
        samples = generator.sample_outputs(n, rng)
        samples_to_csv(out / "samples.csv", samples)
        _write_manifest(out, args, config, seed)
        print(f"wrote {n} samples to {out / 'samples.csv'}")
        return EXIT_OK

    if args.command == "eval":
        generator = build_generator(config["generator"], base_dir)
        energy = build_composite(config.get("energies"))
        flow = build_flow(config["flow"], base_dir)
        section = config.get("eval") or {}
        bounds = [tuple(b) for b in section.get("bounds", [[-6, 6], [-6, 6]])]
        resolution = section.get("resolution", 400)
        ebm = LatentEBM(generator, energy)
        grid = quadrature_grid(ebm, bounds, resolution)
        kl = kl_flow_to_target(flow, ebm, grid)
        payload = {"kl_nats": kl, "z_estimate": grid.z_estimate,
                   "bounds": section.get("bounds", [[-6, 6], [-6, 6]]),
                   "resolution": resolution}
        (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _write_manifest(out, args, config, seed)
        print(f"kl_nats={kl:.6f}")
        return EXIT_OK

    if args.command == "bench":
        generator = build_generator(config["generator"], base_dir)
        energy = build_composite(config.get("energies"))
        flow = build_flow(config["flow"], base_dir)
        section = config.get("bench") or {}
        ebm = LatentEBM(generator, energy)
        flow_rng = np.random.default_rng([seed, 1])
        samplers = [BenchSampler("flow", lambda n: flow.sample(n, flow_rng), ebm)]
        for steps in section.get("langevin_steps", [50, 200]):
            lcfg = build_langevin_config(
                {"n_steps": steps, **(config.get("langevin") or {})}, seed_override=seed
            )

            def draw(n, _cfg=lcfg):
                samples, _ = langevin_sample(ebm, _cfg, n)
                return samples

            samplers.append(BenchSampler(f"langevin-{steps}", draw, ebm))
        rows = latency_bench(samplers, n=int(section.get("n", 2000)),
                             warmup=int(section.get("warmup", 16)),
                             repeats=int(section.get("repeats", 5)))
        bench_rows_to_csv(out / "latency.csv", rows)
        table = bench_table_text(rows)
        (out / "latency.txt").write_text(table + "\n")
        _write_manifest(out, args, config, seed)
        print(table)
        return EXIT_OK

    if args.command == "iterate":
        from .config import build_classifier
        from .energies import MomentEnergy
        from .training import ControlStage, iterate_control

        generator = build_generator(config["generator"], base_dir)
        stage_specs = config.get("stages") or []
        if not stage_specs:
            raise ConfigError("iterate needs a non-empty `stages` list")
        stages = []
        for idx, spec in enumerate(stage_specs):
            flow_spec = spec.get("flow") or {}
            train_cfg = build_train_config(spec.get("train"), seed_override=seed + idx)
            if "moment" in spec:
                moment = spec["moment"]
                gamma = build_classifier(moment.get("gamma", {})).probs
                mu = np.asarray(moment["mu"], dtype=np.float64)
                n_batch = int(moment.get("n_batch", 100_000))

                def build(gen, _gamma=gamma, _mu=mu, _n=n_batch, _cfg=train_cfg):
                    solution = solve_moment_beta(gen, _gamma, _mu, n_batch=_n, cfg=_cfg)
                    return CompositeEnergy([(1.0, MomentEnergy(solution.beta, _gamma))])

            else:
                composite = build_composite(spec.get("energies"))

                def build(gen, _c=composite):
                    return _c

            stages.append(ControlStage(
                name=spec.get("name", f"stage{idx}"),
                build_energy=build,
                train=train_cfg,
                n_blocks=flow_spec.get("n_blocks", 8),
                hidden_width=flow_spec.get("hidden_width", 64),
                flow_seed=flow_spec.get("seed", seed + idx),
            ))
        result = iterate_control(generator, stages)
        result.generator.save(out / "final_generator.ckpt")
        for stage_result in result.stages:
            stage_result.report.save_csv(out / f"trace_{stage_result.name}.csv")
        _write_manifest(out, args, config, seed)
        print(f"composed {len(result.stages)} stages; final generator saved")
        return EXIT_OK

    raise ConfigError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    raise SystemExit(main())
