"""Hierarchical YAML experiment configs with strict key checking and
dotted-path overrides.

A silent typo in an energy weight or a step count would invalidate a
whole run, so unknown keys anywhere in the tree are fatal. Overrides take
the form `section.key=value` with YAML-parsed values.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .energies import (
    ClassifierEnergy,
    CompositeEnergy,
    MomentEnergy,
    RegressorEnergy,
    SignedDistanceEnergy,
    SimilarityEnergy,
)
from .flows import FlowStack, init_flow
from .generators import (
    FairClassifier,
    GroupedClassifier,
    Mlp,
    MixtureSpec,
    RestrictedClassifier,
    load_generator,
    make_class_conditional,
    make_linear_gaussian,
    make_warped_gaussian,
)
from .samplers import LangevinConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


# Allowed keys per section; a "*" entry admits any scalar value under it.
_TRAIN_KEYS = {
    "batch", "steps", "optimizer", "lr", "lr_final", "adam_beta1", "adam_beta2",
    "adam_eps", "grad_clip", "seed", "rho_ranges", "rho_canonical", "lambda_id",
    "beta_rescale", "moment_tol", "snapshot_every",
}
_FLOW_KEYS = {"dim", "n_blocks", "hidden_width", "conditional", "condition_dim",
              "seed", "checkpoint"}
_GENERATOR_KEYS = {
    "kind", "checkpoint", "a_matrix", "bias", "seed", "dim", "shift",
    "n_classes", "embed_dim", "latent_dim", "mixture", "gan",
}
_MIXTURE_KEYS = {"preset", "weights", "means", "covs"}
_GAN_KEYS = {"steps", "batch", "lr", "beta1", "beta2", "adam_eps", "width",
             "disc_width", "pack", "instance_noise", "noise_anneal_frac", "seed"}
_CLASSIFIER_KEYS = {"type", "mixture", "groups", "classes"}
_ENERGY_KEYS = {
    "kind", "weight", "target", "target_class", "metric", "regressor",
    "classifier", "beta", "gamma", "l1", "l2", "direction", "reference",
    "embed", "temperature",
}
_EMBED_KEYS = {"seed", "sizes"}
_LANGEVIN_KEYS = {"n_steps", "step_size", "seed", "metropolis_adjust"}
_EVAL_KEYS = {"bounds", "resolution", "n_samples", "bins"}
_SAMPLE_KEYS = {"n", "seed", "rho"}
_BENCH_KEYS = {"n", "warmup", "repeats", "langevin_steps"}
_MOMENT_KEYS = {"mu", "n_batch", "gamma"}
_STAGE_KEYS = {"name", "energies", "moment", "flow", "train"}
_TOP_KEYS = {
    "seed", "out", "generator", "energies", "flow", "train", "langevin",
    "eval", "sample", "bench", "moment", "stages",
}


def load_config(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed YAML in {path}: {err}") from err
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_overrides(config: dict, assignments) -> dict:
    """Apply `a.b.c=value` assignments (YAML-parsed values) to a config copy."""
    out = json.loads(json.dumps(config))  # deep copy of plain data
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, raw_value = item.partition("=")
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty path segment")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as err:
            raise ConfigError(f"override {item!r}: bad value ({err})") from err
        node = out
        for key in keys[:-1]:
            nxt = node.get(key)
            if nxt is None:
                nxt = node[key] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r} descends into non-mapping {key!r}")
            node = nxt
        node[keys[-1]] = value
    return out


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def validate_config(config: dict):
    _check_keys(config, _TOP_KEYS, "config")
    if "generator" in config:
        _check_keys(config["generator"], _GENERATOR_KEYS, "generator")
        if "mixture" in config["generator"]:
            _check_keys(config["generator"]["mixture"], _MIXTURE_KEYS, "generator.mixture")
        if "gan" in config["generator"]:
            _check_keys(config["generator"]["gan"], _GAN_KEYS, "generator.gan")
    if "flow" in config:
        _check_keys(config["flow"], _FLOW_KEYS, "flow")
    if "train" in config:
        _check_keys(config["train"], _TRAIN_KEYS, "train")
    if "langevin" in config:
        _check_keys(config["langevin"], _LANGEVIN_KEYS, "langevin")
    if "eval" in config:
        _check_keys(config["eval"], _EVAL_KEYS, "eval")
    if "sample" in config:
        _check_keys(config["sample"], _SAMPLE_KEYS, "sample")
    if "bench" in config:
        _check_keys(config["bench"], _BENCH_KEYS, "bench")
    if "moment" in config:
        _check_keys(config["moment"], _MOMENT_KEYS, "moment")
        if "gamma" in config["moment"]:
            _check_keys(config["moment"]["gamma"], _CLASSIFIER_KEYS, "moment.gamma")
    _validate_energy_list(config.get("energies"), "energies")
    for j, stage in enumerate(config.get("stages", []) or []):
        _check_keys(stage, _STAGE_KEYS, f"stages[{j}]")
        _validate_energy_list(stage.get("energies"), f"stages[{j}].energies")
        if "moment" in stage:
            _check_keys(stage["moment"], _MOMENT_KEYS, f"stages[{j}].moment")
            if "gamma" in stage["moment"]:
                _check_keys(stage["moment"]["gamma"], _CLASSIFIER_KEYS,
                            f"stages[{j}].moment.gamma")
        if "flow" in stage:
            _check_keys(stage["flow"], _FLOW_KEYS, f"stages[{j}].flow")
        if "train" in stage:
            _check_keys(stage["train"], _TRAIN_KEYS, f"stages[{j}].train")
    return config


def _validate_energy_list(specs, where):
    for i, spec in enumerate(specs or []):
        _check_keys(spec, _ENERGY_KEYS, f"{where}[{i}]")
        if "classifier" in spec:
            _check_keys(spec["classifier"], _CLASSIFIER_KEYS, f"{where}[{i}].classifier")
            if "mixture" in spec["classifier"]:
                _check_keys(spec["classifier"]["mixture"], _MIXTURE_KEYS,
                            f"{where}[{i}].classifier.mixture")
        if "embed" in spec:
            _check_keys(spec["embed"], _EMBED_KEYS, f"{where}[{i}].embed")


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---- builders -----------------------------------------------------------------


def build_mixture(spec: dict) -> MixtureSpec:
    if spec.get("preset") == "biased-default":
        return MixtureSpec.biased_default()
    try:
        return MixtureSpec(
            weights=np.asarray(spec["weights"], dtype=np.float64),
            means=np.asarray(spec["means"], dtype=np.float64),
            covs=np.asarray(spec["covs"], dtype=np.float64),
        )
    except KeyError as err:
        raise ConfigError(f"mixture spec missing {err}") from err


def build_generator(spec: dict, base_dir=None):
    kind = spec.get("kind")
    if kind == "checkpoint" or "checkpoint" in spec:
        path = Path(spec["checkpoint"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"generator checkpoint {path} does not exist")
        return load_generator(path)
    if kind == "linear-gaussian":
        return make_linear_gaussian(
            np.asarray(spec["a_matrix"], dtype=np.float64),
            np.asarray(spec["bias"], dtype=np.float64),
        )
    if kind == "warped-gaussian":
        shift = spec.get("shift")
        return make_warped_gaussian(
            spec.get("seed", 0),
            dim=spec.get("dim", 2),
            shift=None if shift is None else np.asarray(shift, dtype=np.float64),
        )
    if kind == "class-conditional":
        return make_class_conditional(
            spec["n_classes"], spec["embed_dim"], spec.get("seed", 0),
            latent_dim=spec.get("latent_dim"),
        )
    if kind == "mixture-gan":
        from .generators import GanConfig, train_mixture_gan

        mixture = build_mixture(spec.get("mixture", {"preset": "biased-default"}))
        gan_cfg = GanConfig(**spec.get("gan", {}))
        generator, _ = train_mixture_gan(mixture, gan_cfg)
        return generator
    raise ConfigError(f"unknown generator kind {kind!r}")


def build_flow(spec: dict, base_dir=None) -> FlowStack:
    if "checkpoint" in spec:
        path = Path(spec["checkpoint"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"flow checkpoint {path} does not exist")
        return FlowStack.load(path)
    try:
        return init_flow(
            dim=spec["dim"],
            n_blocks=spec.get("n_blocks", 8),
            hidden_width=spec.get("hidden_width", 64),
            conditional=spec.get("conditional", False),
            condition_dim=spec.get("condition_dim", 0),
            seed=spec.get("seed", 0),
        )
    except KeyError as err:
        raise ConfigError(f"flow spec missing {err}") from err


def build_classifier(spec: dict):
    kind = spec.get("type", "fair")
    mixture = build_mixture(spec.get("mixture", {"preset": "biased-default"}))
    base = FairClassifier(mixture)
    if kind == "fair":
        return base
    if kind == "fair-grouped":
        return GroupedClassifier(base, spec["groups"])
    if kind == "fair-restricted":
        return RestrictedClassifier(base, spec["classes"])
    raise ConfigError(f"unknown classifier type {kind!r}")


def _identity_regressor(x):
    return x


def build_energy(spec: dict):
    kind = spec.get("kind")
    weight = float(spec.get("weight", 1.0))
    if kind == "regressor":
        if spec.get("regressor", "identity") != "identity":
            raise ConfigError("only the identity regressor is config-addressable")
        energy = RegressorEnergy(
            _identity_regressor,
            np.asarray(spec["target"], dtype=np.float64),
            metric=spec.get("metric", "euclidean"),
        )
    elif kind == "classifier":
        energy = ClassifierEnergy(
            build_classifier(spec.get("classifier", {})), spec["target_class"]
        )
    elif kind == "moment":
        gamma = build_classifier(spec.get("gamma", {})).probs
        energy = MomentEnergy(np.asarray(spec["beta"], dtype=np.float64), gamma)
    elif kind == "similarity":
        embed_spec = spec.get("embed", {})
        embed = Mlp(embed_spec.get("sizes", [2, 16, 8]), seed=embed_spec.get("seed", 0),
                    trainable=False, out_activation="tanh")
        energy = SimilarityEnergy(embed, np.asarray(spec["reference"], dtype=np.float64))
    elif kind == "signed-distance":
        energy = SignedDistanceEnergy(
            spec["l1"], spec["l2"],
            np.asarray(spec["direction"], dtype=np.float64), spec["target"],
        )
    else:
        raise ConfigError(f"unknown energy kind {kind!r}")
    return weight, energy


def build_composite(specs) -> CompositeEnergy:
    composite = CompositeEnergy()
    for spec in specs or []:
        weight, energy = build_energy(spec)
        composite.add(weight, energy)
    return composite


def build_train_config(section: dict, seed_override=None) -> TrainConfig:
    data = dict(section or {})
    if seed_override is not None:
        data["seed"] = seed_override
    if "rho_ranges" in data and data["rho_ranges"] is not None:
        data["rho_ranges"] = [tuple(pair) for pair in data["rho_ranges"]]
    try:
        return TrainConfig(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad train config: {err}") from err


def build_langevin_config(section: dict, seed_override=None) -> LangevinConfig:
    data = dict(section or {})
    if seed_override is not None:
        data["seed"] = seed_override
    try:
        return LangevinConfig(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad langevin config: {err}") from err
