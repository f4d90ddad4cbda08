"""Energy functions over generator outputs, their weighted composition,
and the latent-space unnormalized density they induce.

Conventions: every energy maps a batch of outputs (B, D) to per-sample
scalars (B,) through the autodiff engine, so gradients flow back to the
latent code. Evaluation counters record how often each energy is touched;
a trained sampler must be able to run with all counters frozen.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-300
MAX_CLASSIFIER_ENERGY = -np.log(PROB_FLOOR)


class Energy:
    """Base energy: differentiable per-sample scalar over outputs."""

    kind = "base"

    def __init__(self):
        self.eval_count = 0

    def _eval(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def eval(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim == 1:
            x = ad.reshape(x, (1, x.data.shape[0]))
        self.eval_count += x.data.shape[0]
        return self._eval(x)

    def __call__(self, x) -> Tensor:
        return self.eval(x)

    def value(self, x) -> float:
        """Energy of a single output vector, no tape."""
        with ad.no_grad():
            return float(self.eval(np.atleast_2d(np.asarray(x, dtype=np.float64))).data[0])

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.eval(np.atleast_2d(np.asarray(x, dtype=np.float64))).data


class ClassifierEnergy(Energy):
    """-log P(target | x) for a classifier exposing probs().

    Probabilities below 1e-300 are floored before the log, so the energy is
    capped at -log(1e-300); clamp activations are counted on the instance.
    """

    kind = "classifier"

    def __init__(self, classifier, target_class: int):
        super().__init__()
        if not 0 <= target_class < classifier.n_classes:
            raise ValueError(f"target class {target_class} out of range")
        self.classifier = classifier
        self.target_class = target_class
        self.clamp_hits = 0

    def _eval(self, x):
        p = ad.take_columns(self.classifier.probs(x), [self.target_class])
        self.clamp_hits += int((p.data < PROB_FLOOR).sum())
        floored = ad.maximum_const(p, PROB_FLOOR)
        return ad.reshape(-ad.log(floored), (-1,))


class RegressorEnergy(Energy):
    """Squared distance between inferred parameters and a target.

    `regressor` maps outputs (B, D) to parameters (B, P); the target may be
    one vector or one per sample. Metric is squared euclidean distance or a
    squared geodesic angle for unit-sphere parameters.
    """

    kind = "regressor"

    def __init__(self, regressor, target, metric: str = "euclidean"):
        super().__init__()
        if metric not in ("euclidean", "angular"):
            raise ValueError(f"unknown metric {metric!r}")
        self.regressor = regressor
        self.metric = metric
        self.target = np.asarray(target, dtype=np.float64)
        if metric == "angular":
            norms = np.linalg.norm(np.atleast_2d(self.target), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("angular metric requires unit-norm targets")

    def _eval(self, x):
        pred = self.regressor(x)
        target = self.target
        if target.ndim == 1:
            target = np.broadcast_to(target, pred.data.shape)
        if target.shape != pred.data.shape:
            raise ValueError(
                f"target shape {self.target.shape} incompatible with predictions "
                f"{pred.data.shape}"
            )
        tgt = Tensor(np.ascontiguousarray(target))
        if self.metric == "euclidean":
            diff = pred - tgt
            return ad.tsum(diff * diff, axis=1)
        norms = np.linalg.norm(pred.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("angular metric requires unit-norm predictions")
        dot = ad.tsum(pred * tgt, axis=1)
        rejection = pred - ad.reshape(dot, (-1, 1)) * tgt
        sin = ad.norm(rejection, axis=1)
        angle = ad.atan2(sin, dot)
        return angle * angle


def regressor_energy(regressor, target, x, metric="euclidean") -> float:
    return RegressorEnergy(regressor, target, metric).value(x)


class SimilarityEnergy(Energy):
    """1 - cos(R(x0), R(x)) against a fixed reference output, in [0, 2]."""

    kind = "similarity"

    def __init__(self, embed_net, reference):
        super().__init__()
        self.embed_net = embed_net
        reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        with ad.no_grad():
            ref_embed = embed_net(ad.as_tensor(reference)).data
        if np.any(np.linalg.norm(ref_embed, axis=1) < 1e-12):
            raise ValueError("reference embedding has zero norm")
        self._ref_embed = ref_embed

    def _eval(self, x):
        emb = self.embed_net(x)
        if np.any(np.linalg.norm(emb.data, axis=1) < 1e-12):
            raise ValueError("zero-norm embedding")
        ref = self._ref_embed
        if ref.shape[0] == 1:
            ref = np.broadcast_to(ref, emb.data.shape)
        return 1.0 - ad.cosine_similarity(emb, Tensor(np.ascontiguousarray(ref)), axis=1)


def embedding_distance(embed_net, x0: Tensor, x: Tensor) -> Tensor:
    """Pairwise 1 - cos(R(x0), R(x)) for two batches of outputs."""
    e0 = embed_net(ad.as_tensor(x0))
    e1 = embed_net(ad.as_tensor(x))
    if np.any(np.linalg.norm(e0.data, axis=1) < 1e-12) or np.any(
        np.linalg.norm(e1.data, axis=1) < 1e-12
    ):
        raise ValueError("zero-norm embedding")
    return 1.0 - ad.cosine_similarity(e0, e1, axis=1)


def similarity_energy(embed_net, x0, x) -> float:
    with ad.no_grad():
        d = embedding_distance(
            embed_net,
            np.atleast_2d(np.asarray(x0, dtype=np.float64)),
            np.atleast_2d(np.asarray(x, dtype=np.float64)),
        )
    return float(d.data[0])


class SignedDistanceEnergy(Energy):
    """|<x[l1] - x[l2], u> - s| for index groups l1, l2 and unit direction u."""

    kind = "signed-distance"

    def __init__(self, l1, l2, direction, target: float):
        super().__init__()
        self.l1 = [int(i) for i in np.atleast_1d(l1)]
        self.l2 = [int(i) for i in np.atleast_1d(l2)]
        if len(self.l1) != len(self.l2):
            raise ValueError("index groups must have equal length")
        self.direction = np.atleast_1d(np.asarray(direction, dtype=np.float64))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")
        if self.direction.shape != (len(self.l1),):
            raise ValueError("direction length must match the index groups")
        self.target = float(target)

    def _eval(self, x):
        width = x.data.shape[1]
        for i in (*self.l1, *self.l2):
            if not 0 <= i < width:
                raise IndexError(f"vertex index {i} out of range for width {width}")
        v1 = ad.take_columns(x, self.l1)
        v2 = ad.take_columns(x, self.l2)
        signed = ad.tsum((v1 - v2) * Tensor(self.direction), axis=1)
        return ad.absval(signed - self.target)


def signed_distance_energy(x, l1, l2, direction, target) -> float:
    return SignedDistanceEnergy(l1, l2, direction, target).value(x)


class MomentEnergy(Energy):
    """-beta^T gamma(x): plugging into the latent tilt reproduces the
    exponential reweighting that realizes a moment constraint."""

    kind = "moment"

    def __init__(self, beta, gamma):
        super().__init__()
        self.beta = np.asarray(beta, dtype=np.float64)
        if self.beta.ndim != 1:
            raise ValueError("beta must be a vector")
        self.gamma = gamma

    def _eval(self, x):
        feats = self.gamma(x)
        if feats.data.shape[1] != self.beta.shape[0]:
            raise ValueError(
                f"gamma produced {feats.data.shape[1]} features, beta has "
                f"{self.beta.shape[0]}"
            )
        dot = ad.reshape(feats @ Tensor(self.beta.reshape(-1, 1)), (-1,))
        return -dot


class ZeroEnergy(Energy):
    kind = "zero"

    def _eval(self, x):
        return ad.constant(np.zeros(x.data.shape[0]))


class IndicatorHalfPlaneEnergy(Energy):
    """Test energy: +inf where x[axis] < threshold, else 0. Not differentiable;
    only meant for samplers that consume raw values."""

    kind = "indicator"

    def __init__(self, axis: int = 0, threshold: float = 0.0):
        super().__init__()
        self.axis = axis
        self.threshold = threshold

    def _eval(self, x):
        raise TypeError("indicator energy has no differentiable form")

    def eval(self, x):
        raise TypeError("indicator energy has no differentiable form")

    def value_batch(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.eval_count += x.shape[0]
        return np.where(x[:, self.axis] < self.threshold, np.inf, 0.0)


class CompositeEnergy:
    """Weighted sum of energies; the empty composite is the zero energy."""

    def __init__(self, terms=()):
        self.terms = []
        for lam, energy in terms:
            self.add(lam, energy)

    def add(self, lam: float, energy: Energy):
        lam = float(lam)
        if lam < 0:
            raise ValueError("energy weights must be nonnegative")
        self.terms.append((lam, energy))
        return self

    def eval(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim == 1:
            x = ad.reshape(x, (1, x.data.shape[0]))
        total = ad.constant(np.zeros(x.data.shape[0]))
        for lam, energy in self.terms:
            total = total + lam * energy.eval(x)
        return total

    def __call__(self, x):
        return self.eval(x)

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        total = np.zeros(x.shape[0])
        for lam, energy in self.terms:
            total = total + lam * energy.value_batch(x)
        return total

    def scaled(self, factor: float) -> "CompositeEnergy":
        return CompositeEnergy([(lam * factor, e) for lam, e in self.terms])

    @property
    def eval_count(self) -> int:
        return sum(e.eval_count for _, e in self.terms)


def composite_eval(composite: CompositeEnergy, x) -> float:
    return float(composite.value_batch(np.asarray(x, dtype=np.float64))[0])


def classifier_energy(classifier, target_class, x) -> float:
    return ClassifierEnergy(classifier, target_class).value(x)


def moment_energy(beta, gamma, x) -> float:
    return MomentEnergy(beta, gamma).value(x)


class LatentEBM:
    """Latent prior N(0, I) tilted by exp(-E(G(z))): the unnormalized target."""

    def __init__(self, generator, energy: CompositeEnergy):
        self.generator = generator
        self.energy = energy
        self.dim = generator.latent_dim
        self.grad_eval_count = 0

    def log_density_unnorm(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.data.ndim == 1:
            z = ad.reshape(z, (1, z.data.shape[0]))
        prior = ad.standard_normal_logpdf(z)
        return prior - self.energy.eval(self.generator.apply(z))

    def log_density_unnorm_np(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        d = z.shape[1]
        prior = -0.5 * (z * z).sum(axis=1) - 0.5 * d * np.log(2.0 * np.pi)
        with ad.no_grad():
            energies = self.energy.value_batch(self.generator.apply(ad.as_tensor(z)).data)
        return prior - energies

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        """d log u / dz for a batch of latents; one counted call per row."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        leaf = Tensor(z.copy(), requires_grad=True)
        total = ad.tsum(self.log_density_unnorm(leaf))
        total.backward()
        self.grad_eval_count += z.shape[0]
        return leaf.grad


def latent_log_density_unnorm(ebm: LatentEBM, z) -> float:
    return float(ebm.log_density_unnorm_np(np.asarray(z, dtype=np.float64))[0])
