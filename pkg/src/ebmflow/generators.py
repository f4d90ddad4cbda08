"""Fixed toy generators standing in for large pre-trained models.

All generators are deterministic, differentiable maps from latent codes
to outputs, built on the autodiff engine so energies can push gradients
back to the latent space. A small adversarially trained MLP generator
reproduces the classic biased-mixture setting; a closed-form equal-prior
classifier over the mixture components serves as the control signal.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .flows import FlowStack

LEAKY = 0.2


class Generator:
    """Base class: a fixed map from latent codes to outputs."""

    kind = "base"
    latent_dim: int
    output_dim: int

    def apply(self, z: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, z):
        return self.apply(z)

    def sample_outputs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Push n standard-normal latents through the map (no tape)."""
        z = rng.standard_normal((n, self.latent_dim))
        with ad.no_grad():
            return self.apply(ad.as_tensor(z)).data

    def _header(self) -> dict:
        raise NotImplementedError

    def _arrays(self) -> dict:
        raise NotImplementedError

    def save(self, path):
        header = {"type": "generator", **self._header()}
        save_checkpoint(path, header, self._arrays())


class LinearGaussianGenerator(Generator):
    """G(z) = A z + b. The one setting where the tilted target is an exact Gaussian."""

    kind = "linear-gaussian"

    def __init__(self, a_matrix, bias):
        a_matrix = np.asarray(a_matrix, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if a_matrix.ndim != 2 or bias.shape != (a_matrix.shape[0],):
            raise ValueError("need A of shape (D, d) and b of shape (D,)")
        if np.linalg.matrix_rank(a_matrix) < a_matrix.shape[1]:
            warnings.warn("A is rank-deficient; the latent target is still defined but degenerate")
        self.a_matrix = a_matrix
        self.bias = bias
        self.latent_dim = a_matrix.shape[1]
        self.output_dim = a_matrix.shape[0]

    def apply(self, z):
        return ad.affine(ad.as_tensor(z), Tensor(self.a_matrix.T.copy()), Tensor(self.bias))

    def _header(self):
        return {"kind": self.kind}

    def _arrays(self):
        return {"a_matrix": self.a_matrix, "bias": self.bias}


def make_linear_gaussian(a_matrix, bias) -> LinearGaussianGenerator:
    return LinearGaussianGenerator(a_matrix, bias)


class WarpedGaussianGenerator(Generator):
    """Smooth injective warp G(z) = z + alpha * tanh(W z + c)."""

    kind = "warped-gaussian"

    def __init__(self, seed: int, dim: int = 2, alpha: float = 0.5, shift=None):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((dim, dim))
        w /= np.linalg.norm(w, ord=2)  # spectral norm 1: alpha < 1 keeps G injective
        self.w = w
        self.shift = (
            np.asarray(shift, dtype=np.float64)
            if shift is not None
            else 0.5 * rng.standard_normal(dim)
        )
        self.alpha = alpha
        self.seed = seed
        self.latent_dim = dim
        self.output_dim = dim

    def apply(self, z):
        z = ad.as_tensor(z)
        warped = ad.tanh(ad.affine(z, Tensor(self.w.T.copy()), Tensor(self.shift)))
        return z + self.alpha * warped

    def _header(self):
        return {"kind": self.kind, "alpha": self.alpha, "seed": self.seed, "dim": self.latent_dim}

    def _arrays(self):
        return {"w": self.w, "shift": self.shift}


def make_warped_gaussian(seed: int, dim: int = 2, shift=None) -> WarpedGaussianGenerator:
    return WarpedGaussianGenerator(seed, dim=dim, shift=shift)


# ---- Gaussian mixtures and the closed-form fair classifier --------------------


@dataclass
class MixtureSpec:
    """K-component Gaussian mixture: weights, means, covariances."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if self.means.ndim != 2 or self.covs.shape != (*self.means.shape, self.means.shape[1]):
            raise ValueError("means must be (K, d) and covs (K, d, d)")
        for k, cov in enumerate(self.covs):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"covariance {k} is not symmetric")
            np.linalg.cholesky(cov)  # raises if not positive definite

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def biased_default(cls) -> "MixtureSpec":
        """Four well-separated components with one dominating mode."""
        means = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
        covs = np.stack([0.15 * np.eye(2)] * 4)
        return cls(weights=np.array([0.85, 0.05, 0.05, 0.05]), means=means, covs=covs)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        chols = np.linalg.cholesky(self.covs)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("nij,nj->ni", chols[comps], noise)

    def component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            diff = x - self.means[k]
            prec = np.linalg.inv(self.covs[k])
            quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
            _, logdet = np.linalg.slogdet(self.covs[k])
            out[:, k] = -0.5 * (quad + logdet + self.dim * np.log(2.0 * np.pi))
        return out


class FairClassifier:
    """Component posteriors under equal priors: immune to the mixture weights."""

    def __init__(self, spec: MixtureSpec):
        self.spec = spec
        self.n_classes = spec.n_components
        self._precs = [np.linalg.inv(c) for c in spec.covs]
        self._consts = [
            -0.5 * (np.linalg.slogdet(c)[1] + spec.dim * np.log(2.0 * np.pi))
            for c in spec.covs
        ]

    def _component_scores(self, x: Tensor) -> Tensor:
        cols = []
        for k in range(self.n_classes):
            diff = x - Tensor(self.spec.means[k])
            quad = ad.tsum((diff @ Tensor(self._precs[k])) * diff, axis=1)
            cols.append(ad.reshape(-0.5 * quad + self._consts[k], (-1, 1)))
        return ad.concat(cols, axis=1)

    def probs(self, x: Tensor) -> Tensor:
        return ad.softmax(self._component_scores(ad.as_tensor(x)), axis=1)

    def log_probs(self, x: Tensor) -> Tensor:
        scores = self._component_scores(ad.as_tensor(x))
        lse = ad.logsumexp(scores, axis=1)
        return scores - ad.reshape(lse, (-1, 1))

    def probs_np(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.probs(ad.as_tensor(np.atleast_2d(x))).data

    def labels(self, x: np.ndarray) -> np.ndarray:
        return self.probs_np(x).argmax(axis=1)


def fair_classifier(spec: MixtureSpec, x) -> np.ndarray:
    """Equal-prior component posteriors at a single point (sums to 1)."""
    return FairClassifier(spec).probs_np(np.asarray(x, dtype=np.float64))[0]


class GroupedClassifier:
    """Merge classes of a base classifier into index groups (probs add up)."""

    def __init__(self, base, groups):
        self.base = base
        self.groups = [list(g) for g in groups]
        self.n_classes = len(self.groups)
        flat = sorted(i for g in self.groups for i in g)
        if len(set(flat)) != len(flat):
            raise ValueError("groups must be disjoint")
        mat = np.zeros((base.n_classes, self.n_classes))
        for j, group in enumerate(self.groups):
            mat[group, j] = 1.0
        self._mat = mat

    def probs(self, x: Tensor) -> Tensor:
        return self.base.probs(x) @ Tensor(self._mat)

    def log_probs(self, x: Tensor) -> Tensor:
        return ad.log(self.probs(x))

    def probs_np(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.probs(ad.as_tensor(np.atleast_2d(x))).data

    def labels(self, x: np.ndarray) -> np.ndarray:
        return self.probs_np(x).argmax(axis=1)


class RestrictedClassifier:
    """Renormalize a base classifier over a subset of its classes."""

    def __init__(self, base, classes):
        self.base = base
        self.classes = list(classes)
        self.n_classes = len(self.classes)

    def probs(self, x: Tensor) -> Tensor:
        sub = ad.take_columns(self.base.probs(x), self.classes)
        total = ad.reshape(ad.tsum(sub, axis=1), (-1, 1))
        return sub / total

    def log_probs(self, x: Tensor) -> Tensor:
        return ad.log(self.probs(x))

    def probs_np(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.probs(ad.as_tensor(np.atleast_2d(x))).data

    def labels(self, x: np.ndarray) -> np.ndarray:
        return self.probs_np(x).argmax(axis=1)


# ---- small MLPs ---------------------------------------------------------------


class Mlp:
    """Plain fully connected stack with leaky-relu hidden activations."""

    def __init__(self, sizes, seed, trainable=True, out_activation=None, slope=LEAKY):
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        self.slope = slope
        self.out_activation = out_activation
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(Tensor(w, requires_grad=trainable))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=trainable))

    def parameters(self):
        return [*self.weights, *self.biases]

    def apply(self, x: Tensor) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < last:
                h = ad.leaky_relu(h, self.slope)
            elif self.out_activation == "tanh":
                h = ad.tanh(h)
        return h

    def __call__(self, x):
        return self.apply(x)

    def state_arrays(self, prefix=""):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w.data
            out[f"{prefix}b{i}"] = b.data
        return out

    def load_state(self, arrays, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.asarray(arrays[f"{prefix}w{i}"], dtype=np.float64).copy()
            b.data = np.asarray(arrays[f"{prefix}b{i}"], dtype=np.float64).copy()


class MixtureGanGenerator(Generator):
    """Frozen two-hidden-layer MLP generator produced by adversarial training."""

    kind = "mixture-gan"

    def __init__(self, seed: int, latent_dim: int = 2, output_dim: int = 2, width: int = 64):
        self.net = Mlp([latent_dim, width, width, output_dim], seed=seed)
        self.latent_dim = latent_dim
        self.output_dim = output_dim
        self.width = width
        self.seed = seed

    def apply(self, z):
        return self.net.apply(ad.as_tensor(z))

    def parameters(self):
        return self.net.parameters()

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def _header(self):
        return {
            "kind": self.kind,
            "seed": self.seed,
            "latent_dim": self.latent_dim,
            "output_dim": self.output_dim,
            "width": self.width,
        }

    def _arrays(self):
        return self.net.state_arrays()


@dataclass
class GanConfig:
    """Fixed adversarial training recipe for the toy mixture generator.

    The discriminator scores packed pairs of samples and both sides see
    instance noise annealed from mode-separation scale to zero; without
    these the generator reliably collapses onto the dominant mode.
    """

    steps: int = 5000
    batch: int = 256
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: int = 64
    disc_width: int = 64
    pack: int = 2
    instance_noise: float = 2.5
    noise_anneal_frac: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.batch % max(self.pack, 1) != 0:
            raise ValueError("batch must be divisible by the pack size")


@dataclass
class GanReport:
    coverage: np.ndarray
    disc_loss_final: float
    gen_loss_final: float
    steps: int
    seed: int
    wall_clock: float
    divergence_flag: bool = False

    def to_dict(self):
        return {
            "coverage": [float(c) for c in self.coverage],
            "disc_loss_final": self.disc_loss_final,
            "gen_loss_final": self.gen_loss_final,
            "steps": self.steps,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
        }


def voronoi_fractions(samples: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Fraction of samples landing nearest to each mixture mean."""
    d2 = ((samples[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    counts = np.bincount(d2.argmin(axis=1), minlength=len(means))
    return counts / len(samples)


def train_mixture_gan(spec: MixtureSpec, config: GanConfig):
    """Adversarially fit an MLP generator to the mixture; returns it frozen.

    Non-saturating losses, alternating single steps, Adam on both nets.
    Sustained near-zero discriminator loss is treated as divergence.
    """
    from .training import Adam  # local import to avoid a cycle

    rng = np.random.default_rng([config.seed, 0])
    gen = MixtureGanGenerator(
        seed=int(np.random.default_rng([config.seed, 1]).integers(2**31)),
        latent_dim=spec.dim,
        output_dim=spec.dim,
        width=config.width,
    )
    pack = max(config.pack, 1)
    disc = Mlp(
        [spec.dim * pack, config.disc_width, config.disc_width, 1],
        seed=int(np.random.default_rng([config.seed, 2]).integers(2**31)),
    )
    opt_g = Adam(gen.parameters(), lr=config.lr, beta1=config.beta1,
                 beta2=config.beta2, eps=config.adam_eps)
    opt_d = Adam(disc.parameters(), lr=config.lr, beta1=config.beta1,
                 beta2=config.beta2, eps=config.adam_eps)
    rows = config.batch // pack
    packed = (rows, spec.dim * pack)

    start = time.perf_counter()
    low_disc_streak = 0
    d_loss_val = g_loss_val = float("nan")
    anneal_steps = max(1.0, config.noise_anneal_frac * config.steps)
    for step in range(config.steps):
        sigma = config.instance_noise * max(0.0, 1.0 - step / anneal_steps)

        # discriminator step (generator outputs detached)
        real = spec.sample(config.batch, rng)
        z = rng.standard_normal((config.batch, spec.dim))
        with ad.no_grad():
            fake = gen.apply(ad.as_tensor(z)).data
        if sigma > 0:
            real = real + sigma * rng.standard_normal(real.shape)
            fake = fake + sigma * rng.standard_normal(fake.shape)
        logit_real = disc.apply(ad.as_tensor(real.reshape(packed)))
        logit_fake = disc.apply(ad.as_tensor(fake.reshape(packed)))
        d_loss = ad.tmean(ad.softplus(-logit_real)) + ad.tmean(ad.softplus(logit_fake))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        d_loss_val = d_loss.item()

        # generator step
        z = rng.standard_normal((config.batch, spec.dim))
        fake_t = gen.apply(ad.as_tensor(z))
        if sigma > 0:
            fake_t = fake_t + ad.constant(sigma * rng.standard_normal((config.batch, spec.dim)))
        g_loss = ad.tmean(ad.softplus(-disc.apply(ad.reshape(fake_t, packed))))
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        g_loss_val = g_loss.item()

        low_disc_streak = low_disc_streak + 1 if d_loss_val < 1e-3 else 0
        if low_disc_streak >= 500:
            raise RuntimeError(
                "GAN training diverged: discriminator loss stayed below 1e-3 for "
                f"500 consecutive steps (step {step}, d_loss={d_loss_val:.3e}, "
                f"g_loss={g_loss_val:.3e})"
            )

    gen.freeze()
    eval_rng = np.random.default_rng([config.seed, 3])
    samples = gen.sample_outputs(20_000, eval_rng)
    report = GanReport(
        coverage=voronoi_fractions(samples, spec.means),
        disc_loss_final=d_loss_val,
        gen_loss_final=g_loss_val,
        steps=config.steps,
        seed=config.seed,
        wall_clock=time.perf_counter() - start,
    )
    return gen, report


# ---- class-conditional and composed generators ---------------------------------


class ClassConditionalGenerator(Generator):
    """G(z, y) = z + M y with a fixed table of class embeddings."""

    kind = "class-conditional"

    def __init__(self, n_classes: int, embed_dim: int, seed: int, latent_dim=None):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.embed_dim = embed_dim
        self.latent_dim = latent_dim if latent_dim is not None else embed_dim
        self.output_dim = self.latent_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.embedding_table = rng.standard_normal((n_classes, embed_dim))
        self.mix = rng.standard_normal((self.latent_dim, embed_dim)) / np.sqrt(embed_dim)
        mapped = self.embedding_table @ self.mix.T
        gaps = np.linalg.norm(mapped[:, None, :] - mapped[None, :, :], axis=2)
        if np.min(gaps[np.triu_indices(n_classes, k=1)]) < 1e-9:
            raise ValueError("seeded embedding map collapsed two classes; pick another seed")

    @property
    def embedding_mean(self) -> np.ndarray:
        return self.embedding_table.mean(axis=0)

    @property
    def embedding_std(self) -> np.ndarray:
        return self.embedding_table.std(axis=0)

    def apply(self, z, y=None):
        z = ad.as_tensor(z)
        if y is None:
            raise ValueError("class-conditional generator needs an embedding input")
        y = ad.as_tensor(y)
        return z + y @ Tensor(self.mix.T.copy())

    def embedding_for(self, class_index: int) -> np.ndarray:
        return self.embedding_table[class_index]

    def _header(self):
        return {
            "kind": self.kind,
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
        }

    def _arrays(self):
        return {"embedding_table": self.embedding_table, "mix": self.mix}


def make_class_conditional(n_classes: int, embed_dim: int, seed: int, latent_dim=None):
    return ClassConditionalGenerator(n_classes, embed_dim, seed, latent_dim=latent_dim)


class ComposedGenerator(Generator):
    """Evaluate inner(flow(eps)); composition never mutates its pieces."""

    kind = "composed"

    def __init__(self, inner: Generator, flow: FlowStack):
        if flow.dim != inner.latent_dim:
            raise ValueError(
                f"flow dim {flow.dim} does not match generator latent dim {inner.latent_dim}"
            )
        self.inner = inner
        self.flow = flow
        self.latent_dim = flow.dim
        self.output_dim = inner.output_dim

    def apply(self, eps, rho=None):
        z, _ = self.flow.forward(ad.as_tensor(eps), rho)
        return self.inner.apply(z)

    def _header(self):
        return {
            "kind": self.kind,
            "inner": {"type": "generator", **self.inner._header()},
            "flow": {
                "type": "flow",
                "dim": self.flow.dim,
                "n_blocks": self.flow.n_blocks,
                "hidden_width": self.flow.hidden_width,
                "conditional": self.flow.conditional,
                "condition_dim": self.flow.condition_dim,
                "seed": self.flow.seed,
            },
        }

    def _arrays(self):
        out = {f"inner.{k}": v for k, v in self.inner._arrays().items()}
        out.update({f"flow.{k}": v for k, v in self.flow.get_state().items()})
        return out


def compose_generator(generator: Generator, flow: FlowStack) -> ComposedGenerator:
    return ComposedGenerator(generator, flow)


# ---- persistence ----------------------------------------------------------------


def _generator_from_header(header: dict, arrays: dict) -> Generator:
    kind = header.get("kind")
    if kind == LinearGaussianGenerator.kind:
        return LinearGaussianGenerator(arrays["a_matrix"], arrays["bias"])
    if kind == WarpedGaussianGenerator.kind:
        gen = WarpedGaussianGenerator(header["seed"], dim=header["dim"], alpha=header["alpha"])
        gen.w = np.asarray(arrays["w"], dtype=np.float64).copy()
        gen.shift = np.asarray(arrays["shift"], dtype=np.float64).copy()
        return gen
    if kind == MixtureGanGenerator.kind:
        gen = MixtureGanGenerator(
            seed=header["seed"],
            latent_dim=header["latent_dim"],
            output_dim=header["output_dim"],
            width=header["width"],
        )
        gen.net.load_state(arrays)
        return gen.freeze()
    if kind == ClassConditionalGenerator.kind:
        gen = ClassConditionalGenerator(
            header["n_classes"], header["embed_dim"], header["seed"],
            latent_dim=header["latent_dim"],
        )
        gen.embedding_table = np.asarray(arrays["embedding_table"], dtype=np.float64).copy()
        gen.mix = np.asarray(arrays["mix"], dtype=np.float64).copy()
        return gen
    if kind == ComposedGenerator.kind:
        inner_arrays = {
            k[len("inner.") :]: v for k, v in arrays.items() if k.startswith("inner.")
        }
        flow_arrays = {
            k[len("flow.") :]: v for k, v in arrays.items() if k.startswith("flow.")
        }
        inner = _generator_from_header(header["inner"], inner_arrays)
        fh = header["flow"]
        flow = FlowStack(
            dim=fh["dim"],
            n_blocks=fh["n_blocks"],
            hidden_width=fh["hidden_width"],
            conditional=fh["conditional"],
            condition_dim=fh["condition_dim"],
            seed=fh["seed"],
        )
        flow.set_state(flow_arrays)
        return ComposedGenerator(inner, flow)
    raise CheckpointError(f"unknown generator kind {kind!r}")


def load_generator(path) -> Generator:
    header, arrays = load_checkpoint(path)
    if header.get("type") != "generator":
        raise CheckpointError(f"{path}: not a generator checkpoint")
    return _generator_from_header(header, arrays)
