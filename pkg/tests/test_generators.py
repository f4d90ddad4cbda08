import numpy as np
import pytest

from ebmflow import autodiff as ad
from ebmflow.autodiff import Tensor
from ebmflow.flows import init_flow, perturb_parameters
from ebmflow.generators import (
    ComposedGenerator,
    FairClassifier,
    GroupedClassifier,
    MixtureSpec,
    RestrictedClassifier,
    compose_generator,
    fair_classifier,
    load_generator,
    make_class_conditional,
    make_linear_gaussian,
    make_warped_gaussian,
)


def jacobian_of_generator(gen, z0, step=1e-6):
    z0 = np.asarray(z0, dtype=np.float64)
    with ad.no_grad():
        base = gen.apply(ad.as_tensor(z0[None, :])).data[0]
    jac = np.zeros((base.size, z0.size))
    with ad.no_grad():
        for j in range(z0.size):
            hi = z0.copy()
            hi[j] += step
            lo = z0.copy()
            lo[j] -= step
            jac[:, j] = (
                gen.apply(ad.as_tensor(hi[None, :])).data[0]
                - gen.apply(ad.as_tensor(lo[None, :])).data[0]
            ) / (2 * step)
    return jac


def autodiff_jacobian(gen, z0):
    z0 = np.asarray(z0, dtype=np.float64)
    rows = []
    for i in range(gen.output_dim):
        def f(z):
            out = gen.apply(ad.reshape(z, (1, -1)))
            return ad.tsum(ad.narrow(out, i, 1))

        _, grads = ad.evaluate_with_gradients(f, [Tensor(z0.copy())])
        rows.append(grads[0])
    return np.stack(rows)


# ---- linear gaussian ---------------------------------------------------------


def test_linear_identity():
    gen = make_linear_gaussian(np.eye(2), np.zeros(2))
    z = np.array([[0.3, -0.7]])
    with ad.no_grad():
        np.testing.assert_array_equal(gen.apply(ad.as_tensor(z)).data, z)


def test_linear_affine_arithmetic():
    gen = make_linear_gaussian(np.diag([2.0, 1.0]), np.array([1.0, -1.0]))
    with ad.no_grad():
        out = gen.apply(ad.as_tensor(np.array([[1.0, 1.0]]))).data[0]
    np.testing.assert_allclose(out, [3.0, 0.0])


def test_rank_deficient_warns():
    with pytest.warns(UserWarning, match="rank"):
        make_linear_gaussian(np.array([[1.0, 1.0], [2.0, 2.0]]), np.zeros(2))


# ---- warped gaussian ------------------------------------------------------------


def test_warp_fixed_point_at_origin_with_zero_shift():
    gen = make_warped_gaussian(seed=0, dim=3, shift=np.zeros(3))
    with ad.no_grad():
        out = gen.apply(ad.as_tensor(np.zeros((1, 3)))).data[0]
    np.testing.assert_allclose(out, np.zeros(3), atol=1e-15)


def test_warp_seed_determinism():
    a = make_warped_gaussian(seed=7)
    b = make_warped_gaussian(seed=7)
    z = np.random.default_rng(0).standard_normal((5, 2))
    with ad.no_grad():
        assert (a.apply(ad.as_tensor(z)).data == b.apply(ad.as_tensor(z)).data).all()


@pytest.mark.parametrize("maker", [
    lambda: make_linear_gaussian(np.array([[1.0, 0.5], [-0.3, 2.0], [0.1, 0.1]]), np.ones(3)),
    lambda: make_warped_gaussian(seed=3),
])
def test_generator_jacobians_match_finite_differences(maker):
    gen = maker()
    rng = np.random.default_rng(11)
    for _ in range(3):
        z0 = rng.uniform(-2, 2, size=gen.latent_dim)
        num = jacobian_of_generator(gen, z0)
        ana = autodiff_jacobian(gen, z0)
        rel = np.abs(ana - num) / (np.abs(ana) + 1e-12)
        assert rel.max() < 1e-5


# ---- mixture + fair classifier -----------------------------------------------------


def test_mixture_spec_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        MixtureSpec(np.array([0.5, 0.4]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(np.linalg.LinAlgError):
        MixtureSpec(
            np.array([0.5, 0.5]),
            np.zeros((2, 2)),
            np.stack([np.eye(2), -np.eye(2)]),
        )


def test_fair_classifier_symmetry():
    spec = MixtureSpec(
        weights=np.array([0.9, 0.1]),
        means=np.array([[1.0, 0.0], [-1.0, 0.0]]),
        covs=np.stack([0.2 * np.eye(2)] * 2),
    )
    probs = fair_classifier(spec, np.array([0.0, 0.4]))
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)


def test_fair_classifier_at_component_mean():
    spec = MixtureSpec.biased_default()
    probs = fair_classifier(spec, spec.means[1])
    assert probs[1] > 0.99


def test_fair_classifier_normalization_many_points():
    spec = MixtureSpec.biased_default()
    clf = FairClassifier(spec)
    rng = np.random.default_rng(1)
    probs = clf.probs_np(rng.uniform(-4, 4, size=(10_000, 2)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_fair_classifier_ignores_weights():
    base = MixtureSpec.biased_default()
    reweighted = MixtureSpec(
        weights=np.array([0.25, 0.25, 0.25, 0.25]),
        means=base.means,
        covs=base.covs,
    )
    x = np.random.default_rng(2).uniform(-3, 3, size=(100, 2))
    pa = FairClassifier(base).probs_np(x)
    pb = FairClassifier(reweighted).probs_np(x)
    assert (pa == pb).all()


def test_grouped_and_restricted_classifiers():
    spec = MixtureSpec.biased_default()
    clf = FairClassifier(spec)
    grouped = GroupedClassifier(clf, [[0, 1], [2, 3]])
    x = np.random.default_rng(3).uniform(-3, 3, size=(50, 2))
    gp = grouped.probs_np(x)
    np.testing.assert_allclose(gp.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(gp[:, 0], clf.probs_np(x)[:, [0, 1]].sum(axis=1))
    restricted = RestrictedClassifier(clf, [0, 1])
    rp = restricted.probs_np(x)
    np.testing.assert_allclose(rp.sum(axis=1), 1.0, atol=1e-12)
    ratio_full = clf.probs_np(x)[:, 0] / clf.probs_np(x)[:, 1]
    np.testing.assert_allclose(rp[:, 0] / rp[:, 1], ratio_full, rtol=1e-9)


# ---- class conditional ----------------------------------------------------------------


def test_class_conditional_zero_embedding_is_identity():
    gen = make_class_conditional(n_classes=4, embed_dim=2, seed=5)
    z = np.array([[0.1, -0.4]])
    with ad.no_grad():
        out = gen.apply(ad.as_tensor(z), ad.as_tensor(np.zeros((1, 2)))).data
    np.testing.assert_array_equal(out, z)


def test_class_conditional_embedding_stats():
    gen = make_class_conditional(n_classes=5, embed_dim=3, seed=9)
    np.testing.assert_allclose(
        gen.embedding_mean, gen.embedding_table.mean(axis=0), atol=1e-12
    )
    np.testing.assert_allclose(
        gen.embedding_std, gen.embedding_table.std(axis=0), atol=1e-12
    )


def test_class_conditional_distinct_classes_distinct_outputs():
    gen = make_class_conditional(n_classes=4, embed_dim=2, seed=5)
    z = np.zeros((1, 2))
    outs = []
    with ad.no_grad():
        for k in range(4):
            y = gen.embedding_for(k)[None, :]
            outs.append(gen.apply(ad.as_tensor(z), ad.as_tensor(y)).data[0])
    outs = np.stack(outs)
    gaps = np.linalg.norm(outs[:, None] - outs[None, :], axis=2)
    assert gaps[np.triu_indices(4, k=1)].min() > 1e-6


# ---- composition --------------------------------------------------------------------------


def test_compose_identity_flow_is_pointwise_equal():
    gen = make_warped_gaussian(seed=1)
    flow = init_flow(2, n_blocks=4, hidden_width=16, seed=2)
    composed = compose_generator(gen, flow)
    rng = np.random.default_rng(4)
    eps = rng.standard_normal((20, 2))
    with ad.no_grad():
        direct = gen.apply(ad.as_tensor(eps @ _perm_chain(flow))).data
        via = composed.apply(ad.as_tensor(eps)).data
    np.testing.assert_allclose(via, direct, atol=1e-12)


def _perm_chain(flow):
    chain = np.eye(flow.dim)
    for block in flow.blocks:
        chain = chain @ block.perm
    return chain


def test_double_composition_order():
    gen = make_linear_gaussian(np.eye(2), np.zeros(2))
    f1 = perturb_parameters(init_flow(2, 2, 8, seed=3), np.random.default_rng(0), 0.2)
    f2 = perturb_parameters(init_flow(2, 2, 8, seed=4), np.random.default_rng(1), 0.2)
    once = compose_generator(gen, f1)
    twice = compose_generator(once, f2)
    eps = np.random.default_rng(5).standard_normal((10, 2))
    with ad.no_grad():
        z1, _ = f2.forward(eps)
        z0, _ = f1.forward(z1.data)
        expect = gen.apply(z0).data
        got = twice.apply(ad.as_tensor(eps)).data
    np.testing.assert_allclose(got, expect, atol=1e-14)


def test_composition_is_pure():
    gen = make_linear_gaussian(np.eye(2), np.zeros(2))
    flow = init_flow(2, 2, 8, seed=3)
    before = {k: v.copy() for k, v in flow.get_state().items()}
    compose_generator(gen, flow)
    after = flow.get_state()
    assert all((before[k] == after[k]).all() for k in before)


def test_compose_dim_mismatch_rejected():
    gen = make_linear_gaussian(np.eye(2), np.zeros(2))
    flow = init_flow(3, 2, 8, seed=0)
    with pytest.raises(ValueError, match="dim"):
        compose_generator(gen, flow)


def test_pushforward_self_consistency():
    gen = make_warped_gaussian(seed=6)
    flow = perturb_parameters(init_flow(2, 4, 16, seed=7), np.random.default_rng(2), 0.25)
    composed = compose_generator(gen, flow)
    rng_a = np.random.default_rng(10)
    rng_b = np.random.default_rng(10)
    n = 200_000
    with ad.no_grad():
        via = composed.apply(ad.as_tensor(rng_a.standard_normal((n, 2)))).data
        z, _ = flow.forward(rng_b.standard_normal((n, 2)))
        direct = gen.apply(z).data
    from ebmflow.evaluation import histogram_tv

    tv = histogram_tv(via, direct, [(-6, 6), (-6, 6)], bins=40)
    assert tv < 0.01


# ---- persistence -----------------------------------------------------------------------------


@pytest.mark.parametrize("maker", [
    lambda: make_linear_gaussian(np.array([[1.0, 0.5], [0.0, 2.0]]), np.array([0.1, 0.2])),
    lambda: make_warped_gaussian(seed=3),
    lambda: make_class_conditional(4, 2, seed=5),
])
def test_generator_checkpoint_round_trip(tmp_path, maker):
    gen = maker()
    path = tmp_path / "gen.ckpt"
    gen.save(path)
    loaded = load_generator(path)
    z = np.random.default_rng(0).standard_normal((6, gen.latent_dim))
    with ad.no_grad():
        if gen.kind == "class-conditional":
            y = np.tile(gen.embedding_for(1), (6, 1))
            a = gen.apply(ad.as_tensor(z), ad.as_tensor(y)).data
            b = loaded.apply(ad.as_tensor(z), ad.as_tensor(y)).data
        else:
            a = gen.apply(ad.as_tensor(z)).data
            b = loaded.apply(ad.as_tensor(z)).data
    assert (a == b).all()
    path2 = tmp_path / "gen2.ckpt"
    loaded.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_composed_checkpoint_round_trip(tmp_path):
    gen = make_warped_gaussian(seed=2)
    flow = perturb_parameters(init_flow(2, 3, 8, seed=1), np.random.default_rng(0), 0.2)
    composed = compose_generator(gen, flow)
    path = tmp_path / "composed.ckpt"
    composed.save(path)
    loaded = load_generator(path)
    assert isinstance(loaded, ComposedGenerator)
    eps = np.random.default_rng(1).standard_normal((5, 2))
    with ad.no_grad():
        assert (
            composed.apply(ad.as_tensor(eps)).data == loaded.apply(ad.as_tensor(eps)).data
        ).all()
