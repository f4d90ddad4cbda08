"""Training loops: fitting flow stacks to latent tilted targets by
sampled reverse KL, the exponential-tilt coefficient solver for moment
constraints, the joint latent/class-embedding trainer, and iterative
control by functional composition.

The per-step objective decomposes into a log-det term, a latent-prior
term, and an energy term; reports keep the three series separately and
their sum is the recorded total. All loops are deterministic given the
config seed: independent generator streams feed noise, conditions, and
auxiliary draws so that variants consuming fewer streams stay aligned.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .energies import CompositeEnergy, LatentEBM, embedding_distance
from .flows import FlowStack, init_flow
from .generators import ComposedGenerator, Generator, compose_generator

# Stream ids under the master seed; fixed so reduced variants stay aligned.
_STREAM_EPS = 11
_STREAM_RHO = 13
_STREAM_XI = 17
_STREAM_BETA = 19


class TrainingAborted(RuntimeError):
    """Non-finite loss; the flow has been restored to the last good state."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TrainingDiverged(RuntimeError):
    pass


# ---- optimizers ------------------------------------------------------------


class Sgd:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Rescale all gradients so their joint norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    if not np.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---- configuration and reports ------------------------------------------------


@dataclass
class TrainConfig:
    batch: int = 256
    steps: int = 5000
    optimizer: str = "adam"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    lr_final: Optional[float] = None  # linear decay target; None keeps lr flat
    seed: int = 0
    # condition prior: per-dimension uniform ranges; lo == hi is a point mass
    rho_ranges: Optional[Sequence] = None
    rho_canonical: Optional[Sequence] = None
    lambda_id: float = 0.0
    beta_rescale: float = 1.0
    moment_tol: float = 0.01
    snapshot_every: int = 25

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.rho_ranges is not None:
            for lo, hi in self.rho_ranges:
                if lo > hi:
                    raise ValueError(f"condition range ({lo}, {hi}) has lo > hi")

    def make_optimizer(self, params):
        if self.optimizer == "sgd":
            return Sgd(params, self.lr)
        return Adam(params, self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps)


@dataclass
class TrainReport:
    """Per-step loss decomposition plus run metadata."""

    seed: int
    loss_jac: list = field(default_factory=list)
    loss_prior: list = field(default_factory=list)
    loss_energy: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def record(self, jac, prior, energy, total, **extra):
        self.loss_jac.append(jac)
        self.loss_prior.append(prior)
        self.loss_energy.append(energy)
        self.loss_total.append(total)
        for key, value in extra.items():
            self.extras.setdefault(key, []).append(value)

    @property
    def steps(self) -> int:
        return len(self.loss_total)

    @property
    def final_total(self) -> float:
        tail = self.loss_total[-min(100, len(self.loss_total)) :]
        return float(np.mean(tail)) if tail else float("nan")

    def trailing_mean(self, at_step: int, window: int = 100) -> float:
        lo = max(0, at_step - window + 1)
        return float(np.mean(self.loss_total[lo : at_step + 1]))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps": self.steps,
            "final_total": self.final_total,
            "first_total": self.loss_total[0] if self.loss_total else None,
            "wall_clock": self.wall_clock,
            "extras": sorted(self.extras),
        }

    def save_csv(self, path):
        extra_keys = sorted(self.extras)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_jac", "loss_prior", "loss_energy",
                             "loss_total", *extra_keys])
            for i in range(self.steps):
                row = [i, self.loss_jac[i], self.loss_prior[i],
                       self.loss_energy[i], self.loss_total[i]]
                row.extend(self.extras[k][i] for k in extra_keys)
                writer.writerow(row)


def _sample_conditions(rng, ranges, batch):
    los = np.array([lo for lo, _ in ranges], dtype=np.float64)
    his = np.array([hi for _, hi in ranges], dtype=np.float64)
    return rng.uniform(los, his, size=(batch, len(ranges)))


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_final is None:
        return cfg.lr
    frac = step / max(cfg.steps - 1, 1)
    return cfg.lr + (cfg.lr_final - cfg.lr) * frac


class _Loop:
    """Shared bookkeeping: snapshots, divergence detection, abort handling."""

    def __init__(self, flow_states, cfg):
        self.flow_states = flow_states  # list of (flow, get/set via get_state)
        self.cfg = cfg
        self.snapshots = [f.get_state() for f in flow_states]
        self.initial_total = None
        self.over_streak = 0

    def keep(self, step):
        if step % self.cfg.snapshot_every == 0:
            self.snapshots = [f.get_state() for f in self.flow_states]

    def restore(self):
        for f, s in zip(self.flow_states, self.snapshots):
            f.set_state(s)

    def check_divergence(self, step, total):
        if self.initial_total is None:
            self.initial_total = total
            return
        if total > 10.0 * max(abs(self.initial_total), 1e-12) and total > self.initial_total:
            self.over_streak += 1
        else:
            self.over_streak = 0
        if self.over_streak >= 200:
            raise TrainingDiverged(
                f"loss exceeded 10x its initial value for 200 steps "
                f"(step {step}, total={total:.4g}, initial={self.initial_total:.4g})"
            )


def train_flow(generator: Generator, energy: CompositeEnergy, flow: FlowStack,
               cfg: TrainConfig):
    """Fit an unconditional stack to the latent target tilted by `energy`.

    Minimizes the sampled objective mean[-logdet - log N(z|0,I) + E(G(z))]
    over noise batches; the stack is updated in place and returned with a
    per-step loss report.
    """
    if flow.conditional:
        raise ValueError("train_flow needs an unconditional stack")
    if generator.latent_dim != flow.dim:
        raise ValueError("generator latent dim does not match flow dim")
    eps_rng = np.random.default_rng([cfg.seed, _STREAM_EPS])
    opt = cfg.make_optimizer(flow.parameters())
    report = TrainReport(seed=cfg.seed)
    loop = _Loop([flow], cfg)
    start = time.perf_counter()
    for step in range(cfg.steps):
        loop.keep(step)
        eps = eps_rng.standard_normal((cfg.batch, flow.dim))
        try:
            z, logdet = flow.forward(eps)
            x = generator.apply(z)
            l_jac = ad.tmean(-logdet)
            l_prior = ad.tmean(-ad.standard_normal_logpdf(z))
            l_energy = ad.tmean(energy.eval(x))
            total = l_jac + l_prior + l_energy
            opt.zero_grad()
            total.backward()
            clip_global_norm(flow.parameters(), cfg.grad_clip)
            opt.lr = _lr_at(cfg, step)
            opt.step()
        except NonFiniteError as err:
            loop.restore()
            report.wall_clock = time.perf_counter() - start
            raise TrainingAborted(
                f"aborted at step {step}: {err}; parameters restored to last snapshot",
                report,
            ) from err
        total_val = total.item()
        report.record(l_jac.item(), l_prior.item(), l_energy.item(), total_val)
        loop.check_divergence(step, total_val)
    report.wall_clock = time.perf_counter() - start
    return flow, report


def train_conditional_flow(generator: Generator,
                           energy_family: Callable[[np.ndarray], CompositeEnergy],
                           flow: FlowStack, cfg: TrainConfig):
    """Fit a conditional stack against condition-indexed targets.

    Each step draws noise and a batch of conditions from the configured
    uniform prior; `energy_family(rho_batch)` must return the composite
    energy whose per-row targets are those conditions.
    """
    if not flow.conditional:
        raise ValueError("train_conditional_flow needs a conditional stack")
    if cfg.rho_ranges is None or len(cfg.rho_ranges) != flow.condition_dim:
        raise ValueError("cfg.rho_ranges must match the stack's condition_dim")
    return _run_conditional(generator, energy_family, flow, cfg, embed_net=None)


def train_with_id_energy(generator: Generator,
                         energy_family: Callable[[np.ndarray], CompositeEnergy],
                         flow: FlowStack, cfg: TrainConfig, embed_net):
    """Conditional training plus an identity-preservation term.

    For every (noise, condition) pair the canonical-condition output is also
    generated, and the embedding distance between the pair enters the loss
    with weight cfg.lambda_id. With lambda_id == 0 this reduces exactly to
    train_conditional_flow.
    """
    if not flow.conditional:
        raise ValueError("train_with_id_energy needs a conditional stack")
    if cfg.rho_canonical is None:
        raise ValueError("cfg.rho_canonical (the canonical condition) is required")
    if cfg.lambda_id < 0:
        raise ValueError("lambda_id must be nonnegative")
    return _run_conditional(generator, energy_family, flow, cfg, embed_net=embed_net)


def _run_conditional(generator, energy_family, flow, cfg, embed_net):
    eps_rng = np.random.default_rng([cfg.seed, _STREAM_EPS])
    rho_rng = np.random.default_rng([cfg.seed, _STREAM_RHO])
    opt = cfg.make_optimizer(flow.parameters())
    report = TrainReport(seed=cfg.seed)
    loop = _Loop([flow], cfg)
    use_id = embed_net is not None and cfg.lambda_id > 0
    rho0 = None
    if use_id:
        rho0 = np.asarray(cfg.rho_canonical, dtype=np.float64).reshape(1, -1)
    start = time.perf_counter()
    for step in range(cfg.steps):
        loop.keep(step)
        eps = eps_rng.standard_normal((cfg.batch, flow.dim))
        rho = _sample_conditions(rho_rng, cfg.rho_ranges, cfg.batch)
        energy = energy_family(rho)
        try:
            z, logdet = flow.forward(eps, rho)
            x = generator.apply(z)
            l_jac = ad.tmean(-logdet)
            l_prior = ad.tmean(-ad.standard_normal_logpdf(z))
            l_base_energy = ad.tmean(energy.eval(x))
            extra = {}
            if use_id:
                rho0_batch = np.repeat(rho0, cfg.batch, axis=0)
                z0, _ = flow.forward(eps, rho0_batch)
                x0 = generator.apply(z0)
                l_id = ad.tmean(embedding_distance(embed_net, x0, x))
                l_energy = l_base_energy + cfg.lambda_id * l_id
                extra["loss_id"] = l_id.item()
            else:
                l_energy = l_base_energy
            total = l_jac + l_prior + l_energy
            opt.zero_grad()
            total.backward()
            clip_global_norm(flow.parameters(), cfg.grad_clip)
            opt.lr = _lr_at(cfg, step)
            opt.step()
        except NonFiniteError as err:
            loop.restore()
            report.wall_clock = time.perf_counter() - start
            raise TrainingAborted(
                f"aborted at step {step}: {err}; parameters restored to last snapshot",
                report,
            ) from err
        total_val = total.item()
        report.record(l_jac.item(), l_prior.item(), l_energy.item(), total_val, **extra)
        loop.check_divergence(step, total_val)
    report.wall_clock = time.perf_counter() - start
    return flow, report


# ---- moment-constraint coefficient solver ----------------------------------------


@dataclass
class MomentSolution:
    beta: np.ndarray
    beta_raw: np.ndarray
    residual: float
    converged: bool
    n_batch: int
    rescale: float
    steps: int

    def to_dict(self):
        return {
            "beta": [float(b) for b in self.beta],
            "beta_raw": [float(b) for b in self.beta_raw],
            "residual": self.residual,
            "converged": self.converged,
            "n_batch": self.n_batch,
            "rescale": self.rescale,
            "steps": self.steps,
        }


def solve_moment_beta(generator: Generator, gamma, mu, n_batch: int = 100_000,
                      cfg: Optional[TrainConfig] = None) -> MomentSolution:
    """Find the tilt coefficients matching target feature means.

    Draws one fixed batch of prior latents, maps them through the generator,
    caches the features gamma(x), and minimizes the squared gap between the
    self-normalized reweighted feature mean and `mu` by gradient descent on
    the coefficients. The returned beta includes the configured rescale; the
    raw solution is kept alongside. If `mu` is outside the achievable hull
    the residual floor is reported and the solution flagged unconverged.
    """
    if cfg is None:
        cfg = TrainConfig(batch=2, steps=2000, lr=0.05)
    mu = np.asarray(mu, dtype=np.float64)
    rng = np.random.default_rng([cfg.seed, _STREAM_BETA])
    feats = []
    remaining = n_batch
    while remaining > 0:
        chunk = min(remaining, 20_000)
        z = rng.standard_normal((chunk, generator.latent_dim))
        with ad.no_grad():
            x = generator.apply(ad.as_tensor(z))
            feats.append(gamma(x).data.copy())
        remaining -= chunk
    features = np.concatenate(feats, axis=0)
    k = features.shape[1]
    if mu.shape != (k,):
        raise ValueError(f"mu has shape {mu.shape}, gamma produces {k} features")

    feats_t = Tensor(features)
    beta = Tensor(np.zeros(k), requires_grad=True)
    opt = cfg.make_optimizer([beta])
    residual = float("inf")
    for _ in range(cfg.steps):
        logits = ad.reshape(feats_t @ ad.reshape(beta, (k, 1)), (-1,))
        weights = ad.softmax(logits, axis=0)
        estimate = ad.reshape(weights, (1, -1)) @ feats_t
        diff = ad.reshape(estimate, (-1,)) - Tensor(mu)
        loss = ad.tsum(diff * diff)
        opt.zero_grad()
        loss.backward()
        opt.step()
        residual = float(np.sqrt(loss.item()))
    return MomentSolution(
        beta=cfg.beta_rescale * beta.data.copy(),
        beta_raw=beta.data.copy(),
        residual=residual,
        converged=residual <= cfg.moment_tol,
        n_batch=n_batch,
        rescale=cfg.beta_rescale,
        steps=cfg.steps,
    )


# ---- joint latent / class-embedding training ----------------------------------------


def sample_class_embeddings(generator, flow_y: FlowStack, n: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw embedding vectors from a trained embedding stack.

    The stack acts in standardized embedding coordinates, so outputs are
    rescaled by the generator's embedding statistics.
    """
    return generator.embedding_mean + generator.embedding_std * flow_y.sample(n, rng)


def train_class_embedding_flow(generator, energy: CompositeEnergy,
                               flow_z: FlowStack, flow_y: FlowStack,
                               cfg: TrainConfig, freeze_embedding_flow: bool = False):
    """Jointly fit a latent stack and a class-embedding stack.

    The embedding stack acts in standardized coordinates: embeddings are
    y = mean + std * flow_y(noise), which makes the per-dimension scalings
    cancel out of the determinant and puts the freshly initialized stack
    exactly at the embedding prior N(mean, std^2 I). Both stacks' log-det
    and prior terms plus the output energy form the loss; the report keeps
    the embedding-side terms, the latent-side objective in isolation, and
    the mean absolute embedding log-det as extra columns.
    """
    if flow_z.conditional or flow_y.conditional:
        raise ValueError("class-embedding training uses unconditional stacks")
    if flow_y.dim != generator.embed_dim:
        raise ValueError("embedding stack dim must match the embedding size")
    if flow_z.dim != generator.latent_dim:
        raise ValueError("latent stack dim must match the generator latent dim")
    mu_y = generator.embedding_mean
    std_y = generator.embedding_std
    if np.any(std_y <= 0):
        raise ValueError("degenerate embedding table: zero std in some dimension")
    log_norm_const = float(np.log(std_y).sum() + 0.5 * len(std_y) * np.log(2.0 * np.pi))

    eps_rng = np.random.default_rng([cfg.seed, _STREAM_EPS])
    xi_rng = np.random.default_rng([cfg.seed, _STREAM_XI])
    params = list(flow_z.parameters())
    if not freeze_embedding_flow:
        params += flow_y.parameters()
    opt = cfg.make_optimizer(params)
    report = TrainReport(seed=cfg.seed)
    loop = _Loop([flow_z, flow_y], cfg)
    mu_t = Tensor(mu_y)
    std_t = Tensor(std_y)
    start = time.perf_counter()
    for step in range(cfg.steps):
        loop.keep(step)
        eps = eps_rng.standard_normal((cfg.batch, flow_z.dim))
        zeta = xi_rng.standard_normal((cfg.batch, flow_y.dim))
        try:
            z, logdet_z = flow_z.forward(eps)
            y_std, logdet_y = flow_y.forward(zeta)
            y = mu_t + std_t * y_std
            x = generator.apply(z, y)
            logp_y = -0.5 * ad.tsum(y_std * y_std, axis=1) - log_norm_const
            l_jac = ad.tmean(-logdet_z)
            l_prior = ad.tmean(-ad.standard_normal_logpdf(z))
            l_jac_y = ad.tmean(-logdet_y)
            l_prior_y = ad.tmean(-logp_y)
            l_energy = ad.tmean(energy.eval(x))
            total = l_jac + l_prior + l_jac_y + l_prior_y + l_energy
            opt.zero_grad()
            total.backward()
            clip_global_norm(params, cfg.grad_clip)
            opt.lr = _lr_at(cfg, step)
            opt.step()
        except NonFiniteError as err:
            loop.restore()
            report.wall_clock = time.perf_counter() - start
            raise TrainingAborted(
                f"aborted at step {step}: {err}; parameters restored to last snapshot",
                report,
            ) from err
        jac, prior, energy_val = l_jac.item(), l_prior.item(), l_energy.item()
        total_val = total.item()
        report.record(
            jac, prior, energy_val, total_val,
            loss_jac_y=l_jac_y.item(),
            loss_prior_y=l_prior_y.item(),
            eq_latent_component=jac + prior + energy_val,
            abs_logdet_y=float(np.abs(logdet_y.data).mean()),
        )
        loop.check_divergence(step, total_val)
    report.wall_clock = time.perf_counter() - start
    return flow_z, flow_y, report


# ---- iterative control ------------------------------------------------------------------


@dataclass
class ControlStage:
    """One round of control: build an energy against the current generator,
    train a fresh stack, compose."""

    name: str
    build_energy: Callable[[Generator], CompositeEnergy]
    train: TrainConfig
    n_blocks: int = 8
    hidden_width: int = 64
    flow_seed: int = 0


@dataclass
class StageResult:
    name: str
    report: TrainReport
    flow: FlowStack


@dataclass
class IterateResult:
    generator: Generator
    stages: list
    error: Optional[str] = None


def iterate_control(generator: Generator, stages: Sequence[ControlStage],
                    return_partial_on_error: bool = False) -> IterateResult:
    """Run control stages sequentially, composing after each one.

    Every stage's energy builder receives the current composed generator, so
    constraint coefficients are re-solved against the distribution being
    corrected. The final generator is feed-forward: sampling from it touches
    no energy or classifier.
    """
    if not stages:
        raise ValueError("need at least one control stage")
    current = generator
    results = []
    for stage in stages:
        try:
            energy = stage.build_energy(current)
            flow = init_flow(
                current.latent_dim,
                n_blocks=stage.n_blocks,
                hidden_width=stage.hidden_width,
                seed=stage.flow_seed,
            )
            flow, report = train_flow(current, energy, flow, stage.train)
        except Exception as err:
            if return_partial_on_error:
                return IterateResult(current, results, error=f"{stage.name}: {err}")
            raise
        results.append(StageResult(stage.name, report, flow))
        current = compose_generator(current, flow)
    return IterateResult(current, results)
