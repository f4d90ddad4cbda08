"""Invertible flow stacks: soft permutation, affine coupling, actnorm.

Each block applies a fixed orthogonal mixing matrix, then an affine
coupling layer whose scale/shift come from a one-hidden-layer MLP over
the conditioning half (plus the condition vector, when the stack is
conditional), then a per-dimension affine actnorm. Coupling scales are
soft-clamped so the map stays invertible under arbitrary training.

The coupling MLP's output layer is zero-initialized, so a freshly built
stack is an orthogonal map with zero log-det.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

SCALE_CLAMP = 5.0
LEAKY_SLOPE = 0.1

# Per-tensor stream codes so shared parameters draw identical values
# whether or not the stack is conditional.
_STREAM_PERM = 0
_STREAM_W1_MAIN = 1
_STREAM_W1_COND = 2


def _rng_for(seed: int, block: int, code: int) -> np.random.Generator:
    return np.random.default_rng([seed, block, code])


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class FlowBlock:
    """One permutation + coupling + actnorm unit."""

    def __init__(self, dim, hidden_width, condition_dim, seed, index):
        self.dim = dim
        self.d_a = (dim + 1) // 2
        self.d_b = dim - self.d_a
        self.condition_dim = condition_dim
        self.hidden_width = hidden_width

        self.perm = _orthogonal(_rng_for(seed, index, _STREAM_PERM), dim)

        w1_main = _rng_for(seed, index, _STREAM_W1_MAIN).standard_normal(
            (self.d_a, hidden_width)
        ) * np.sqrt(2.0 / (self.d_a + hidden_width))
        if condition_dim:
            w1_cond = _rng_for(seed, index, _STREAM_W1_COND).standard_normal(
                (condition_dim, hidden_width)
            ) * np.sqrt(2.0 / (condition_dim + hidden_width))
            w1 = np.concatenate([w1_main, w1_cond], axis=0)
        else:
            w1 = w1_main

        self.w1 = Tensor(w1, requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden_width), requires_grad=True)
        self.w2 = Tensor(np.zeros((hidden_width, 2 * self.d_b)), requires_grad=True)
        self.b2 = Tensor(np.zeros(2 * self.d_b), requires_grad=True)
        self.act_scale = Tensor(np.ones(dim), requires_grad=True)
        self.act_bias = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.act_scale, self.act_bias]

    def named_parameters(self, prefix):
        names = ["w1", "b1", "w2", "b2", "act_scale", "act_bias"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def _scale_shift(self, x_a: Tensor, rho):
        inp = ad.concat([x_a, rho]) if rho is not None else x_a
        hidden = ad.leaky_relu(ad.affine(inp, self.w1, self.b1), LEAKY_SLOPE)
        st = ad.affine(hidden, self.w2, self.b2)
        s_raw = ad.narrow(st, 0, self.d_b)
        t = ad.narrow(st, self.d_b, self.d_b)
        s = SCALE_CLAMP * ad.tanh(s_raw / SCALE_CLAMP)
        return s, t

    def forward(self, x: Tensor, rho):
        x = x @ Tensor(self.perm)
        x_a = ad.narrow(x, 0, self.d_a)
        x_b = ad.narrow(x, self.d_a, self.d_b)
        s, t = self._scale_shift(x_a, rho)
        y_b = x_b * ad.exp(s) + t
        y = ad.concat([x_a, y_b])
        out = y * self.act_scale + self.act_bias
        logdet = ad.tsum(s, axis=1) + ad.tsum(ad.log_abs(self.act_scale))
        return out, logdet

    def inverse(self, y: Tensor, rho):
        x = (y - self.act_bias) / self.act_scale
        x_a = ad.narrow(x, 0, self.d_a)
        y_b = ad.narrow(x, self.d_a, self.d_b)
        s, t = self._scale_shift(x_a, rho)
        x_b = (y_b - t) * ad.exp(-s)
        u = ad.concat([x_a, x_b])
        out = u @ Tensor(self.perm.T.copy())
        logdet = ad.tsum(s, axis=1) + ad.tsum(ad.log_abs(self.act_scale))
        return out, logdet


class FlowStack:
    """Ordered invertible blocks defining a bijection with tracked log-det."""

    def __init__(self, dim, n_blocks, hidden_width, conditional, condition_dim, seed):
        if dim < 2:
            raise ValueError("flow dimension must be at least 2 (coupling needs a split)")
        if n_blocks < 1:
            raise ValueError("need at least one block")
        if conditional and condition_dim < 1:
            raise ValueError("conditional stack needs condition_dim >= 1")
        self.dim = dim
        self.n_blocks = n_blocks
        self.hidden_width = hidden_width
        self.conditional = conditional
        self.condition_dim = condition_dim if conditional else 0
        self.seed = seed
        self.blocks = [
            FlowBlock(dim, hidden_width, self.condition_dim, seed, i)
            for i in range(n_blocks)
        ]

    # ---- parameter plumbing ------------------------------------------------

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def named_parameters(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"block{i:02d}"))
        return out

    def get_state(self):
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for i, block in enumerate(self.blocks):
            state[f"block{i:02d}.perm"] = block.perm.copy()
        return state

    def set_state(self, state):
        for name, p in self.named_parameters().items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
        for i, block in enumerate(self.blocks):
            key = f"block{i:02d}.perm"
            if key in state:
                block.perm = np.asarray(state[key], dtype=np.float64).copy()

    # ---- core bijection ------------------------------------------------------

    def _check_condition(self, rho, batch):
        if self.conditional:
            if rho is None:
                raise ValueError("conditional stack requires a condition vector")
            rho = ad.as_tensor(rho)
            if rho.data.ndim == 1:
                rho = ad.reshape(rho, (1, rho.data.shape[0]))
            if rho.data.shape[0] == 1 and batch > 1:
                rho = ad.as_tensor(np.broadcast_to(rho.data, (batch, rho.data.shape[1])).copy()) \
                    if not rho.requires_grad else ad.concat([rho] * batch, axis=0)
            if rho.data.shape != (batch, self.condition_dim):
                raise ValueError(
                    f"condition shape {rho.data.shape} incompatible with "
                    f"(batch={batch}, condition_dim={self.condition_dim})"
                )
            return rho
        if rho is not None:
            raise ValueError("stack is unconditional but a condition was supplied")
        return None

    def _as_batch(self, x):
        t = ad.as_tensor(x)
        if t.data.ndim == 1:
            t = ad.reshape(t, (1, t.data.shape[0]))
        if t.data.ndim != 2 or t.data.shape[1] != self.dim:
            raise ValueError(f"expected shape (batch, {self.dim}), got {t.data.shape}")
        return t

    def forward(self, eps, rho=None):
        x = self._as_batch(eps)
        rho = self._check_condition(rho, x.data.shape[0])
        logdet = ad.constant(np.zeros(x.data.shape[0]))
        for block in self.blocks:
            x, contrib = block.forward(x, rho)
            logdet = logdet + contrib
        return x, logdet

    def inverse(self, z, rho=None):
        x = self._as_batch(z)
        rho = self._check_condition(rho, x.data.shape[0])
        logdet = ad.constant(np.zeros(x.data.shape[0]))
        for block in reversed(self.blocks):
            x, contrib = block.inverse(x, rho)
            logdet = logdet + contrib
        return x, logdet

    def log_prob(self, z, rho=None):
        eps, logdet = self.inverse(z, rho)
        return ad.standard_normal_logpdf(eps) - logdet

    def sample(self, n, rng, rho=None):
        """Draw n outputs by pushing standard-normal noise forward (no tape)."""
        eps = rng.standard_normal((n, self.dim))
        with ad.no_grad():
            z, _ = self.forward(eps, rho)
        return z.data

    # ---- persistence -----------------------------------------------------------

    def save(self, path):
        header = {
            "type": "flow",
            "dim": self.dim,
            "n_blocks": self.n_blocks,
            "hidden_width": self.hidden_width,
            "conditional": self.conditional,
            "condition_dim": self.condition_dim,
            "seed": self.seed,
        }
        save_checkpoint(path, header, self.get_state())

    @classmethod
    def load(cls, path):
        header, arrays = load_checkpoint(path)
        if header.get("type") != "flow":
            raise CheckpointError(f"{path}: not a flow checkpoint")
        stack = cls(
            dim=header["dim"],
            n_blocks=header["n_blocks"],
            hidden_width=header["hidden_width"],
            conditional=header["conditional"],
            condition_dim=header["condition_dim"],
            seed=header["seed"],
        )
        stack.set_state(arrays)
        return stack


def init_flow(dim, n_blocks=8, hidden_width=64, conditional=False, condition_dim=0, seed=0):
    """Build an identity-initialized stack (coupling output zeroed, actnorm 1/0)."""
    return FlowStack(dim, n_blocks, hidden_width, conditional, condition_dim, seed)


def perturb_parameters(stack: FlowStack, rng: np.random.Generator, scale: float = 0.1):
    """Randomize parameters around init, fan-in normalized so coupling scales
    stay in the regime trained stacks occupy (round-trip precision degrades
    as exp(sum |s|), so saturated scales would drown float64)."""
    for block in stack.blocks:
        fan1 = np.sqrt(block.w1.data.shape[0])
        fan2 = np.sqrt(block.w2.data.shape[0])
        block.w1.data = block.w1.data + scale / fan1 * rng.standard_normal(block.w1.data.shape)
        block.b1.data = block.b1.data + scale * rng.standard_normal(block.b1.data.shape)
        block.w2.data = block.w2.data + scale / fan2 * rng.standard_normal(block.w2.data.shape)
        block.b2.data = block.b2.data + scale * rng.standard_normal(block.b2.data.shape)
        block.act_scale.data = block.act_scale.data * np.exp(
            scale * rng.standard_normal(block.act_scale.data.shape)
        )
        block.act_bias.data = block.act_bias.data + scale * rng.standard_normal(
            block.act_bias.data.shape
        )
    return stack


# ---- single-sample conveniences ----------------------------------------------


def flow_forward(stack: FlowStack, eps, rho=None):
    """Map one latent draw forward; returns (z as 1-d array, logdet float)."""
    z, logdet = stack.forward(np.asarray(eps, dtype=np.float64), rho)
    return z.data[0], float(logdet.data[0])


def flow_inverse(stack: FlowStack, z, rho=None):
    eps, _ = stack.inverse(np.asarray(z, dtype=np.float64), rho)
    return eps.data[0]


def flow_logprob(stack: FlowStack, z, rho=None) -> float:
    return float(stack.log_prob(np.asarray(z, dtype=np.float64), rho).data[0])
