import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import numeric_grad, numeric_grad_kinkaware
from test_network import relu_pattern
from mmq.autodiff import Tensor, grad
from mmq.data import sample_episode
from mmq.errors import ConfigError, ContractError
from mmq.maml import (ClassificationTask, FunctionTask, TrainConfig, evaluate_adaptation, inner_adapt,
                      meta_gradient, meta_train, meta_update, write_metrics)
from mmq.network import init_feature_net, save_feature_net
from mmq.rng import stream
from mmq.synthetic import GeneratorSpec, generate


def scalar(v):
    return {"w": Tensor(np.array([v], np.float64), requires_grad=True)}


def sq(c):
    return lambda p: ((p["w"] - c) * (p["w"] - c)).sum()


def quad_task(a, b, c, d):
    """Train loss 0.5 w'Aw + b'w, validation loss 0.5 w'Cw + d'w, on a 2-vector w."""
    def loss(M, v):
        M, v = Tensor(M), Tensor(v[None])
        return lambda p: (p["w"] * (p["w"] @ M)).sum() * 0.5 + (p["w"] * v).sum()
    return FunctionTask(loss(a, b), loss(c, d))


def test_inner_step_on_square():
    out = inner_adapt(scalar(1.0), FunctionTask(sq(0.0), None), 0.01)
    assert out["w"].data[0] == pytest.approx(0.98)


def test_inner_step_at_stationary_point_is_identity():
    out = inner_adapt(scalar(2.0), FunctionTask(sq(2.0), None), 0.5)
    assert out["w"].data[0] == 2.0


def test_inner_adapt_leaves_theta_untouched():
    theta = scalar(1.5)
    before = theta["w"].data.copy()
    inner_adapt(theta, FunctionTask(sq(0.0), None), 0.1, create_graph=True)
    inner_adapt(theta, FunctionTask(sq(0.0), None), 0.1)
    assert np.array_equal(theta["w"].data, before) and theta["w"].grad is None


def test_inner_adapt_rejects_empty_train_set():
    with pytest.raises(ContractError):
        inner_adapt(scalar(0.0), FunctionTask(None, sq(1.0)), 0.1)


def test_quadratic_meta_update_exact_and_first_order():
    task = FunctionTask(sq(1.0), sq(1.0))
    exact = meta_update(scalar(0.0), [task], alpha=0.25, beta=0.1, mode="exact")
    first = meta_update(scalar(0.0), [task], alpha=0.25, beta=0.1, mode="first_order")
    assert abs(exact["w"].data[0] - 0.05) < 1e-6
    assert abs(first["w"].data[0] - 0.1) < 1e-6
    grads, _, _ = meta_gradient(scalar(0.0), [task], 0.25, "exact")
    assert abs(grads["w"][0] + 0.5) < 1e-6


def test_meta_update_rejects_bad_input():
    with pytest.raises(ContractError):
        meta_update(scalar(0.0), [FunctionTask(sq(1.0), None)], 0.1, 0.1)
    with pytest.raises(ContractError):
        meta_update(scalar(0.0), [], 0.1, 0.1)
    with pytest.raises(ConfigError):
        meta_update(scalar(0.0), [FunctionTask(sq(1.0), sq(1.0))], 0.1, 0.1, mode="second")


def bilevel_objective(tasks_np, alpha, w):
    total = 0.0
    for a, b, c, d in tasks_np:
        adapted = w - alpha * (0.5 * (a + a.T) @ w + b)
        total += 0.5 * adapted @ c @ adapted + d @ adapted
    return total


@pytest.mark.parametrize("seed", range(5))
def test_exact_meta_gradient_matches_bilevel_finite_differences(seed):
    rng = np.random.default_rng(seed)
    tasks_np = [tuple(rng.normal(size=s) for s in [(2, 2), 2, (2, 2), 2]) for _ in range(3)]
    w0 = rng.normal(size=2)
    theta = {"w": Tensor(w0[None].copy(), requires_grad=True)}
    grads, meta_loss, _ = meta_gradient(theta, [quad_task(*t) for t in tasks_np], 0.3, "exact")
    w = w0.copy()
    (fd,) = numeric_grad(lambda: bilevel_objective(tasks_np, 0.3, w), [w])
    assert meta_loss == pytest.approx(bilevel_objective(tasks_np, 0.3, w0), abs=1e-10)
    assert np.abs(grads["w"][0] - fd).max() <= 1e-4 * max(1.0, np.abs(fd).max())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), beta=st.floats(0.01, 1.0))
def test_alpha_zero_modes_coincide(seed, beta):
    rng = np.random.default_rng(seed)
    tasks = [quad_task(*(rng.normal(size=s) for s in [(2, 2), 2, (2, 2), 2])) for _ in range(2)]
    w0 = rng.normal(size=(1, 2))
    exact = meta_update({"w": Tensor(w0, requires_grad=True)}, tasks, 0.0, beta, "exact")
    first = meta_update({"w": Tensor(w0, requires_grad=True)}, tasks, 0.0, beta, "first_order")
    # and both equal plain descent on the summed validation losses
    direct = {"w": Tensor(w0, requires_grad=True)}
    plain_grad = sum(grad(t.val_loss(direct), [direct["w"]])[0].data for t in tasks)
    assert np.allclose(exact["w"].data, first["w"].data, atol=1e-12)
    assert np.allclose(exact["w"].data, w0 - beta * plain_grad, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0.0, 1.0))
def test_linear_inner_loss_makes_modes_agree(seed, alpha):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(1, 3)))
    c, d = rng.normal(size=(3, 3)), rng.normal(size=3)
    task = FunctionTask(lambda p: (p["w"] * b).sum(),
                        lambda p: (p["w"] * (p["w"] @ Tensor(c))).sum() + (p["w"] * Tensor(d[None])).sum())
    w0 = rng.normal(size=(1, 3))
    ge, _, _ = meta_gradient({"w": Tensor(w0, requires_grad=True)}, [task], alpha, "exact")
    gf, _, _ = meta_gradient({"w": Tensor(w0, requires_grad=True)}, [task], alpha, "first_order")
    assert np.allclose(ge["w"], gf["w"], atol=1e-10)


@pytest.fixture(scope="module")
def small_pool():
    pool, _ = generate(GeneratorSpec(image_size=31, samples_per_class=12, downstream_train_per_class=1,
                                     downstream_test_per_class=1, seed=2))
    return pool


def test_conv_inner_step_matches_finite_difference_gradient(small_pool):
    net = init_feature_net(np.random.default_rng(0), feature_dim=4, image_size=31, filters=3)
    theta = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in net.params.items()}
    task = ClassificationTask(sample_episode(small_pool, 1, 3, 2, 0).tasks[0], 4)
    task.x_train = task.x_train.astype(np.float64)
    alpha = 0.1
    adapted = inner_adapt(theta, task, alpha)
    # zero head: the head gradient drives the step; the trunk gradient is exactly zero
    head = task.init_params()
    full = {**theta, **{k: Tensor(v.data.astype(np.float64)) for k, v in head.items()}}
    keys = list(full)
    fd = numeric_grad(lambda: task.train_loss(full).item(), [full[k].data for k in keys])
    for k, g in zip(keys, fd):
        assert np.allclose(adapted[k].data, full[k].data - alpha * g, atol=1e-7), k
    assert np.abs(adapted["head.w"].data).max() > 0


def test_conv_inner_step_with_random_head_moves_the_trunk(small_pool):
    rng = np.random.default_rng(1)
    net = init_feature_net(rng, feature_dim=4, image_size=31, filters=6)
    theta = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in net.params.items()}
    task = ClassificationTask(sample_episode(small_pool, 1, 3, 2, 0).tasks[0], 4, head_init="uniform", rng=rng)
    task.x_train = task.x_train.astype(np.float64)
    head = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in task.init_params().items()}
    task.init_params = lambda: head
    adapted = inner_adapt(theta, task, 0.1)
    full = {**theta, **head}
    keys = list(full)
    fd, valid = numeric_grad_kinkaware(lambda: task.train_loss(full).item(), [full[k].data for k in keys],
                                       lambda: relu_pattern(full, task.x_train))
    for k, g, ok in zip(keys, fd, valid):
        expected = full[k].data - 0.1 * g
        assert np.allclose(adapted[k].data[ok], expected[ok], atol=1e-7), k
    assert not np.array_equal(adapted["conv1.w"].data, theta["conv1.w"].data)


def test_zero_iterations_returns_initialisation(small_pool):
    cfg = TrainConfig(iterations=0, feature_dim=8)
    model = meta_train(small_pool, cfg, seed=4)
    init = init_feature_net(stream(4, "init", "round0"), 8, 31)
    for k in init.params:
        assert np.array_equal(model.net.params[k].data, init.params[k].data)


def test_meta_train_is_deterministic(small_pool, tmp_path):
    cfg = TrainConfig(iterations=3, feature_dim=8)
    for name in ("a", "b"):
        model = meta_train(small_pool, cfg, seed=9)
        save_feature_net(tmp_path / f"{name}.ckpt", model.net)
        write_metrics(tmp_path / f"{name}.tsv", model, "h")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.tsv").read_text() == (tmp_path / "b.tsv").read_text()
    rows = (tmp_path / "a.tsv").read_text().splitlines()[2:]
    assert len(rows) == 3 and len(rows[0].split("\t")[1].split(",")) == cfg.tasks


def test_exact_mode_runs_on_conv_net(small_pool):
    model = meta_train(small_pool, TrainConfig(iterations=2, feature_dim=4, gradient_mode="exact",
                                               tasks=2, shots=2, update_shots=1), seed=1)
    assert len(model.training_log) == 2


def test_train_config_validation():
    for bad in (dict(inner_lr=0), dict(meta_lr=-1), dict(gradient_mode="x"), dict(update_shots=6)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_meta_training_beats_chance_by_a_margin():
    """Adapted 3-way accuracy on the 9-class pool after 200 iterations."""
    pool, _ = generate(GeneratorSpec(image_size=42, samples_per_class=60, downstream_train_per_class=1,
                                     downstream_test_per_class=1, seed=0))
    cfg = TrainConfig(iterations=200)
    model = meta_train(pool, cfg, seed=0)
    losses = [r.meta_loss for r in model.training_log]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])
    acc = evaluate_adaptation(model.net, pool, cfg, 20, np.random.default_rng(1))
    assert acc > 1 / 3 + 0.2
