"""Objectives: cross-entropy identities, adversarial losses, Fisher penalty."""

import math

import numpy as np
import pytest

from pseudorec import autodiff as ad
from pseudorec import losses as LS
from pseudorec.autodiff import Tensor
from pseudorec.errors import ShapeMismatch
from pseudorec.layers import LayerSpec, ModelSpec, softmax


def rand_probs(rng, n, k, dtype=np.float64):
    logits = rng.standard_normal((n, k))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(dtype)


# -- cross entropy -----------------------------------------------------------


def test_uniform_probs_give_log_k():
    probs = Tensor(np.full((4, 10), 0.1))
    targets = np.eye(10, dtype=np.float32)[[0, 3, 7, 9]]
    loss = LS.cross_entropy(probs, targets)
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)
    assert loss.item() == pytest.approx(2.302585093, abs=1e-6)


def test_perfect_prediction_gives_zero_loss():
    targets = np.eye(5, dtype=np.float32)[[2, 0]]
    loss = LS.cross_entropy(Tensor(targets), targets)
    assert abs(loss.item()) < 1e-7


def test_soft_target_equal_to_probs_gives_entropy():
    rng = np.random.default_rng(3)
    p = rand_probs(rng, 6, 8)
    loss = LS.cross_entropy(Tensor(p, dtype=np.float64), p)
    entropy = -(p * np.log(p)).sum(axis=1).mean()
    assert loss.item() == pytest.approx(entropy, abs=1e-9)


def test_cross_entropy_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatch):
        LS.cross_entropy(Tensor(np.full((2, 3), 1 / 3)), np.eye(4, dtype=np.float32)[:2])


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True, dtype=np.float64)
    targets = rand_probs(rng, 4, 6)
    report = ad.finite_difference_check(
        lambda: LS.cross_entropy(softmax(logits), targets),
        [("logits", logits)], eps=1e-3, tol=1e-3,
    )
    assert report.flagged == [], report.summary()


# -- rehearsal objectives ----------------------------------------------------


def linear_model(rng, d, k):
    w = Tensor(rng.standard_normal((d, k)) * 0.3, requires_grad=True, dtype=np.float64)
    return w, lambda x: softmax(ad.matmul(x, w))


def test_single_task_rehearsal_equals_cross_entropy():
    rng = np.random.default_rng(7)
    _, model = linear_model(rng, 5, 4)
    x = rng.standard_normal((6, 5))
    y = np.eye(4)[rng.integers(0, 4, 6)]
    single = LS.rehearsal_loss(model, [(x, y)])
    plain = LS.cross_entropy(model(Tensor(x, dtype=np.float64)), y)
    assert single.item() == plain.item()


def test_duplicated_batch_doubles_rehearsal_loss():
    rng = np.random.default_rng(9)
    _, model = linear_model(rng, 5, 4)
    x = rng.standard_normal((6, 5))
    y = np.eye(4)[rng.integers(0, 4, 6)]
    once = LS.rehearsal_loss(model, [(x, y)])
    twice = LS.rehearsal_loss(model, [(x, y), (x, y)])
    assert twice.item() == pytest.approx(2 * once.item(), rel=1e-12)


def test_rehearsal_over_three_tasks_sums_independent_terms():
    rng = np.random.default_rng(11)
    _, model = linear_model(rng, 5, 4)
    batches = [(rng.standard_normal((4, 5)), rand_probs(rng, 4, 4)) for _ in range(3)]
    combined = LS.rehearsal_loss(model, batches)
    separate = sum(LS.cross_entropy(model(Tensor(x, dtype=np.float64)), y).item()
                   for x, y in batches)
    assert combined.item() == pytest.approx(separate, rel=1e-9)


def test_rehearsal_rejects_empty_batch_list():
    with pytest.raises(ValueError):
        LS.rehearsal_loss(lambda x: x, [])


def test_pseudo_rehearsal_with_no_pseudo_tasks_is_plain_ce():
    rng = np.random.default_rng(13)
    _, model = linear_model(rng, 5, 4)
    x = rng.standard_normal((6, 5))
    y = np.eye(4)[rng.integers(0, 4, 6)]
    jp = LS.pseudo_rehearsal_loss(model, (x, y), [])
    plain = LS.cross_entropy(model(Tensor(x, dtype=np.float64)), y)
    assert jp.item() == plain.item()


def test_pseudo_term_at_snapshot_equals_target_entropy():
    # labels produced by the model currently being evaluated sit at the
    # cross-entropy minimum: CE(h(x), h(x)) = entropy(h(x))
    rng = np.random.default_rng(15)
    _, model = linear_model(rng, 5, 4)
    x_new = rng.standard_normal((3, 5))
    y_new = np.eye(4)[rng.integers(0, 4, 3)]
    x_pseudo = rng.standard_normal((8, 5))
    y_pseudo = model(Tensor(x_pseudo, dtype=np.float64)).data.copy()

    jp = LS.pseudo_rehearsal_loss(model, (x_new, y_new), [(x_pseudo, y_pseudo)])
    ce_new = LS.cross_entropy(model(Tensor(x_new, dtype=np.float64)), y_new).item()
    entropy = -(y_pseudo * np.log(y_pseudo)).sum(axis=1).mean()
    assert jp.item() == pytest.approx(ce_new + entropy, abs=1e-9)


def test_pseudo_rehearsal_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(17)
    w, model = linear_model(rng, 5, 4)
    new = (rng.standard_normal((4, 5)), np.eye(4)[rng.integers(0, 4, 4)])
    pseudo = (rng.standard_normal((6, 5)), rand_probs(rng, 6, 4))

    LS.pseudo_rehearsal_loss(model, new, [pseudo]).backward()
    combined = w.grad.copy()
    w.zero_grad()
    LS.cross_entropy(model(Tensor(new[0], dtype=np.float64)), new[1]).backward()
    g_new = w.grad.copy()
    w.zero_grad()
    LS.cross_entropy(model(Tensor(pseudo[0], dtype=np.float64)), pseudo[1]).backward()
    g_pseudo = w.grad.copy()
    np.testing.assert_allclose(combined, g_new + g_pseudo, atol=1e-12)

    w.zero_grad()
    report = ad.finite_difference_check(
        lambda: LS.pseudo_rehearsal_loss(model, new, [pseudo]),
        [("w", w)], eps=1e-3, tol=1e-3,
    )
    assert report.flagged == [], report.summary()


# -- adversarial losses ------------------------------------------------------


def test_gan_losses_at_zero_logits():
    zero = Tensor(np.zeros((8, 1)))
    d_loss, g_loss = LS.gan_losses(zero, zero)
    assert d_loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert g_loss.item() == pytest.approx(math.log(2), abs=1e-6)
    assert d_loss.item() == pytest.approx(1.3862944, abs=1e-6)


def test_perfect_discriminator_drives_d_loss_to_zero():
    d_loss, _ = LS.gan_losses(Tensor(np.full((4, 1), 50.0)), Tensor(np.full((4, 1), -50.0)))
    assert d_loss.item() < 1e-8


def test_gan_losses_match_direct_sigmoid_formula():
    rng = np.random.default_rng(19)
    real = rng.uniform(-5, 5, (16, 1))
    fake = rng.uniform(-5, 5, (16, 1))
    d_loss, g_loss = LS.gan_losses(Tensor(real, dtype=np.float64),
                                   Tensor(fake, dtype=np.float64))
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    d_ref = (-np.log(sig(real))).mean() + (-np.log(1 - sig(fake))).mean()
    g_ref = (-np.log(sig(fake))).mean()
    assert d_loss.item() == pytest.approx(d_ref, abs=1e-5)
    assert g_loss.item() == pytest.approx(g_ref, abs=1e-5)


def test_gan_losses_finite_at_extreme_logits():
    real = Tensor(np.array([[500.0], [-500.0]]))
    fake = Tensor(np.array([[-500.0], [500.0]]))
    d_loss, g_loss = LS.gan_losses(real, fake)
    assert np.isfinite(d_loss.item()) and np.isfinite(g_loss.item())


def test_gan_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    real = Tensor(rng.uniform(-3, 3, (6, 1)), requires_grad=True, dtype=np.float64)
    fake = Tensor(rng.uniform(-3, 3, (6, 1)), requires_grad=True, dtype=np.float64)
    report = ad.finite_difference_check(
        lambda: LS.gan_losses(real, fake)[0] + LS.gan_losses(real, fake)[1],
        [("real", real), ("fake", fake)], eps=1e-3, tol=1e-3,
    )
    assert report.flagged == [], report.summary()


# -- fisher + penalty --------------------------------------------------------


def tiny_net(seed=0, zero_hidden_unit=None):
    spec = ModelSpec(
        name="tiny",
        input_shape=(6,),
        layers=(LayerSpec("dense", units=5), LayerSpec("relu"),
                LayerSpec("dense", units=3), LayerSpec("softmax")),
        init="he",
    )
    net = spec.build(seed=seed)
    if zero_hidden_unit is not None:
        # cut hidden unit's outgoing weights: its incoming weights go dead
        net.params["02_dense.w"].data[zero_hidden_unit, :] = 0.0
    return net


def test_fisher_values_are_non_negative():
    net = tiny_net()
    images = np.random.default_rng(23).standard_normal((40, 6)).astype(np.float32)
    fisher = LS.fisher_diagonal(net, images, n_samples=30, seed=1)
    assert set(fisher) == {name for name, _ in net.parameters()}
    for f in fisher.values():
        assert np.all(f >= 0)


def test_dead_unit_has_zero_fisher():
    net = tiny_net(zero_hidden_unit=2)
    images = np.random.default_rng(29).standard_normal((30, 6)).astype(np.float32)
    fisher = LS.fisher_diagonal(net, images, n_samples=20, seed=2)
    np.testing.assert_array_equal(fisher["00_dense.w"][:, 2], np.zeros(6))
    assert fisher["00_dense.b"][2] == 0.0


def test_fisher_estimate_stabilizes_with_more_samples():
    net = tiny_net()
    images = np.random.default_rng(31).standard_normal((400, 6)).astype(np.float32)
    f_small = LS.fisher_diagonal(net, images, n_samples=150, seed=3)
    f_large = LS.fisher_diagonal(net, images, n_samples=300, seed=3)
    for name in f_small:
        scale = np.abs(f_large[name]).mean() + 1e-8
        assert np.abs(f_small[name] - f_large[name]).mean() / scale < 0.5


def test_fisher_on_image_model_runs_in_eval_mode():
    # single-sample forward passes must not trip train-mode batch checks
    spec = ModelSpec(
        name="bn-model", input_shape=(1, 4, 4),
        layers=(LayerSpec("conv", filters=2, kernel=3), LayerSpec("batchnorm"),
                LayerSpec("relu"), LayerSpec("flatten"),
                LayerSpec("dense", units=3), LayerSpec("softmax")),
    )
    net = spec.build(seed=5)
    images = np.random.default_rng(37).standard_normal((10, 1, 4, 4)).astype(np.float32)
    fisher = LS.fisher_diagonal(net, images, n_samples=5, seed=1)
    assert all(np.all(f >= 0) for f in fisher.values())


def anchored_state(net, lam):
    fisher = {name: np.ones_like(p.data) for name, p in net.parameters()}
    anchor = {name: p.data.copy() for name, p in net.parameters()}
    return LS.FisherState(fisher=fisher, anchor=anchor, lam=lam)


def test_penalty_is_zero_at_anchor():
    net = tiny_net()
    state = anchored_state(net, lam=270.0)
    assert LS.ewc_penalty(net, [state]).item() == 0.0


def test_penalty_is_zero_with_zero_lambda():
    net = tiny_net()
    state = anchored_state(net, lam=0.0)
    for _, p in net.parameters():
        p.data = p.data + 0.3
    assert LS.ewc_penalty(net, [state]).item() == 0.0


def test_penalty_hand_arithmetic():
    # one parameter, F=2, lambda=270, displacement 0.1 -> 270/2 * 2 * 0.01
    theta = Tensor(np.array([0.6]), requires_grad=True)
    state = LS.FisherState(fisher={"w": np.array([2.0], dtype=np.float32)},
                           anchor={"w": np.array([0.5], dtype=np.float32)}, lam=270.0)
    penalty = LS.ewc_penalty([("w", theta)], [state])
    assert penalty.item() == pytest.approx(2.7, rel=1e-5)


def test_penalty_accumulates_across_tasks_and_stays_non_negative():
    net = tiny_net()
    s1 = anchored_state(net, lam=100.0)
    s2 = anchored_state(net, lam=50.0)
    rng = np.random.default_rng(41)
    for _, p in net.parameters():
        p.data = p.data + rng.standard_normal(p.shape).astype(np.float32) * 0.1
    both = LS.ewc_penalty(net, [s1, s2]).item()
    alone = LS.ewc_penalty(net, [s1]).item() + LS.ewc_penalty(net, [s2]).item()
    assert both == pytest.approx(alone, rel=1e-6)
    assert both > 0


def test_penalty_rejects_mismatched_shapes():
    theta = Tensor(np.zeros((2, 2)), requires_grad=True)
    state = LS.FisherState(fisher={"w": np.ones(3, dtype=np.float32)},
                           anchor={"w": np.zeros(3, dtype=np.float32)}, lam=1.0)
    with pytest.raises(ShapeMismatch):
        LS.ewc_penalty([("w", theta)], [state])


def test_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(43)
    theta = Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    state = LS.FisherState(
        fisher={"w": np.abs(rng.standard_normal(8)).astype(np.float32)},
        anchor={"w": rng.standard_normal(8).astype(np.float32)}, lam=270.0)
    report = ad.finite_difference_check(
        lambda: LS.ewc_penalty([("w", theta)], [state]),
        [("theta", theta)], eps=1e-3, tol=1e-3,
    )
    assert report.flagged == [], report.summary()


def test_fisher_state_validates_inputs():
    with pytest.raises(ValueError):
        LS.FisherState(fisher={"w": np.array([-1.0])},
                       anchor={"w": np.array([0.0])}, lam=1.0)
    with pytest.raises(ShapeMismatch):
        LS.FisherState(fisher={"w": np.ones(2)}, anchor={"w": np.ones(3)}, lam=1.0)
