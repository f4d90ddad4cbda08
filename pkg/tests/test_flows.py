import numpy as np
import pytest

from ebmflow import autodiff as ad
from ebmflow.autodiff import Tensor
from ebmflow.flows import (
    FlowStack,
    flow_forward,
    flow_inverse,
    flow_logprob,
    init_flow,
    perturb_parameters,
)


def numeric_jacobian(fn, x, step=1e-6):
    """Central-difference Jacobian of a vector map, column by column."""
    x = np.asarray(x, dtype=np.float64)
    base = fn(x)
    jac = np.zeros((base.size, x.size))
    for j in range(x.size):
        hi = x.copy()
        hi[j] += step
        lo = x.copy()
        lo[j] -= step
        jac[:, j] = (fn(hi) - fn(lo)) / (2 * step)
    return jac


def random_stack(dim, n_blocks=4, seed=0, conditional=False, condition_dim=0, scale=0.25):
    stack = init_flow(dim, n_blocks=n_blocks, hidden_width=16,
                      conditional=conditional, condition_dim=condition_dim, seed=seed)
    perturb_parameters(stack, np.random.default_rng(seed + 1000), scale=scale)
    return stack


# ---- identity initialization -------------------------------------------------


def test_identity_init_logdet_zero():
    stack = init_flow(2, n_blocks=8, hidden_width=64, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        _, logdet = flow_forward(stack, rng.standard_normal(2))
        assert logdet == pytest.approx(0.0, abs=1e-12)


def test_identity_init_is_orthogonal_chain():
    stack = init_flow(3, n_blocks=4, hidden_width=8, seed=5)
    chain = np.eye(3)
    for block in stack.blocks:
        chain = chain @ block.perm
    eps = np.array([0.3, -1.2, 0.7])
    z, _ = flow_forward(stack, eps)
    np.testing.assert_allclose(z, eps @ chain, atol=1e-12)


def test_same_seed_bit_identical_parameters():
    a = init_flow(4, n_blocks=3, hidden_width=16, seed=11)
    b = init_flow(4, n_blocks=3, hidden_width=16, seed=11)
    for (na, pa), (nb, pb) in zip(
        sorted(a.named_parameters().items()), sorted(b.named_parameters().items())
    ):
        assert na == nb
        assert (pa.data == pb.data).all()


def test_conditional_requires_condition():
    stack = init_flow(2, n_blocks=2, hidden_width=8, conditional=True,
                      condition_dim=1, seed=0)
    with pytest.raises(ValueError, match="condition"):
        flow_forward(stack, np.zeros(2))
    z, _ = flow_forward(stack, np.zeros(2), rho=np.array([0.5]))
    assert z.shape == (2,)
    plain = init_flow(2, n_blocks=2, hidden_width=8, seed=0)
    with pytest.raises(ValueError, match="unconditional"):
        flow_forward(plain, np.zeros(2), rho=np.array([0.5]))


def test_dim_below_two_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        init_flow(1, n_blocks=2, hidden_width=8, seed=0)


# ---- permutation properties ----------------------------------------------------


def test_permutations_orthogonal():
    stack = init_flow(6, n_blocks=8, hidden_width=8, seed=2)
    for block in stack.blocks:
        err = np.abs(block.perm.T @ block.perm - np.eye(6)).max()
        assert err < 1e-12


# ---- bijectivity -----------------------------------------------------------------


@pytest.mark.parametrize("dim", [2, 5, 8])
def test_round_trip_random_stack(dim):
    stack = random_stack(dim, n_blocks=8, seed=dim)
    rng = np.random.default_rng(99)
    z = rng.standard_normal((1000, dim))
    with ad.no_grad():
        eps, _ = stack.inverse(z)
        back, _ = stack.forward(eps.data)
    assert np.abs(back.data - z).max() < 1e-10
    with ad.no_grad():
        fwd, _ = stack.forward(z)
        rec, _ = stack.inverse(fwd.data)
    assert np.abs(rec.data - z).max() < 1e-10


def test_round_trip_conditional():
    stack = random_stack(3, n_blocks=4, seed=7, conditional=True, condition_dim=2)
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((64, 3))
    rho = rng.uniform(-1, 1, size=(64, 2))
    with ad.no_grad():
        z, _ = stack.forward(eps, rho)
        rec, _ = stack.inverse(z.data, rho)
    assert np.abs(rec.data - eps).max() < 1e-10


def test_round_trip_large_coordinates():
    stack = random_stack(2, n_blocks=8, seed=21)
    z = np.array([[50.0, -50.0], [50.0, 3.0], [-0.1, 50.0]])
    with ad.no_grad():
        eps, _ = stack.inverse(z)
        back, _ = stack.forward(eps.data)
    assert np.abs(back.data - z).max() < 1e-8


# ---- log-det exactness ---------------------------------------------------------------


@pytest.mark.parametrize("dim", [2, 4])
def test_logdet_matches_numeric_jacobian(dim):
    rng = np.random.default_rng(dim)
    for trial in range(10):
        stack = random_stack(dim, n_blocks=3, seed=100 * dim + trial, scale=0.5)
        eps = rng.standard_normal(dim)

        def fwd(v):
            with ad.no_grad():
                z, _ = stack.forward(v)
            return z.data[0]

        _, logdet = flow_forward(stack, eps)
        jac = numeric_jacobian(fwd, eps)
        _, num_logdet = np.linalg.slogdet(jac)
        assert abs(logdet - num_logdet) < 1e-6


def test_forward_and_inverse_logdets_agree():
    stack = random_stack(3, n_blocks=5, seed=8)
    rng = np.random.default_rng(2)
    eps = rng.standard_normal((10, 3))
    with ad.no_grad():
        z, ld_fwd = stack.forward(eps)
        _, ld_inv = stack.inverse(z.data)
    np.testing.assert_allclose(ld_fwd.data, ld_inv.data, atol=1e-9)


# ---- densities ------------------------------------------------------------------------


def test_identity_init_logprob_is_standard_normal():
    stack = init_flow(2, n_blocks=8, hidden_width=64, seed=3)
    assert flow_logprob(stack, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(10):
        z = rng.standard_normal(2) * 2
        expected = -0.5 * z @ z - np.log(2 * np.pi)
        assert flow_logprob(stack, z) == pytest.approx(expected, abs=1e-10)


def test_density_integrates_to_one_2d():
    stack = random_stack(2, n_blocks=6, seed=4, scale=0.3)
    xs = np.linspace(-6, 6, 400, endpoint=False) + 6.0 / 400
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    with ad.no_grad():
        logp = stack.log_prob(grid).data
    cell = (12.0 / 400) ** 2
    total = np.exp(logp).sum() * cell
    assert abs(total - 1.0) < 0.01


def test_pushforward_histogram_matches_density():
    stack = random_stack(2, n_blocks=6, seed=14, scale=0.3)
    rng = np.random.default_rng(0)
    n = 1_000_000
    samples = stack.sample(n, rng)
    bins = 60
    lo, hi = -6.0, 6.0
    hist, xe, ye = np.histogram2d(
        samples[:, 0], samples[:, 1], bins=bins, range=[[lo, hi], [lo, hi]]
    )
    hist = hist / n
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    centers = np.stack(np.meshgrid(xc, yc, indexing="ij"), axis=-1).reshape(-1, 2)
    with ad.no_grad():
        logp = stack.log_prob(centers).data
    cell = ((hi - lo) / bins) ** 2
    model = np.exp(logp).reshape(bins, bins) * cell
    tv = 0.5 * np.abs(hist - model).sum()
    assert tv < 0.02


# ---- gradients -------------------------------------------------------------------------


def test_condition_gradient_matches_finite_differences():
    stack = random_stack(2, n_blocks=3, seed=17, conditional=True, condition_dim=2)
    rng = np.random.default_rng(3)
    eps = rng.standard_normal(2)
    rho0 = rng.uniform(-1, 1, size=2)

    for out_idx in range(2):
        def f(rho):
            z, _ = stack.forward(eps, ad.reshape(rho, (1, 2)))
            return ad.tsum(ad.narrow(z, out_idx, 1))

        err = ad.finite_difference_check(f, rho0, step=1e-6)
        assert err < 1e-5


def test_parameter_gradients_flow():
    stack = random_stack(2, n_blocks=2, seed=23)
    eps = np.random.default_rng(0).standard_normal((8, 2))
    z, logdet = stack.forward(eps)
    loss = ad.tmean(ad.tsum(z * z, axis=1)) - ad.tmean(logdet)
    loss.backward()
    grads = [p.grad for p in stack.parameters()]
    assert any(g is not None and np.abs(g).sum() > 0 for g in grads)


# ---- persistence --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    stack = random_stack(3, n_blocks=4, seed=31, conditional=True, condition_dim=1)
    path = tmp_path / "flow.ckpt"
    stack.save(path)
    loaded = FlowStack.load(path)
    rng = np.random.default_rng(8)
    eps = rng.standard_normal((16, 3))
    rho = rng.uniform(-1, 1, (16, 1))
    with ad.no_grad():
        z1, ld1 = stack.forward(eps, rho)
        z2, ld2 = loaded.forward(eps, rho)
    assert (z1.data == z2.data).all()
    assert (ld1.data == ld2.data).all()
    # byte-exact second save
    path2 = tmp_path / "flow2.ckpt"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_single_sample_helpers_match_batch():
    stack = random_stack(2, n_blocks=3, seed=41)
    eps = np.array([0.4, -0.9])
    z, logdet = flow_forward(stack, eps)
    with ad.no_grad():
        zb, ldb = stack.forward(eps[None, :])
    np.testing.assert_array_equal(z, zb.data[0])
    assert logdet == ldb.data[0]
    rec = flow_inverse(stack, z)
    assert np.abs(rec - eps).max() < 1e-10
