import math

import numpy as np
import pytest

from conftest import make_question
from morphoscale.schema import Campaign, build_global_index
from morphoscale.toytrain import (
    ALPHA_MAX,
    LinearHead,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    forward,
    fraction_mae,
    link,
    load_head,
    loss_and_grad,
    make_features,
    save_head,
    train,
)
from morphoscale.votesim import SimulationConfig, random_truths, sample_dataset


def stack(data):
    return np.stack([g.K for g in data])


def test_zero_head_gives_one_plus_ln2():
    head = LinearHead.zeros(3, 5)
    np.testing.assert_allclose(forward(head, np.ones(3)), 1 + math.log(2), rtol=1e-15)


def test_link_range():
    raw = np.array([-1e6, -50, -1, 0, 1, 20, 48, 49, 60, 300, 1e6])
    alpha = link(raw)
    # open interval in exact arithmetic; the extremes round onto the bounds
    assert np.all(alpha >= 1) and np.all(alpha <= ALPHA_MAX)
    assert np.all(np.diff(alpha) >= 0)
    assert np.all(link(np.linspace(-30, 30, 101)) > 1)


def test_forward_errors_and_determinism():
    head = LinearHead.initialise(4, 6, np.random.default_rng(0), scale=1.0)
    x = np.array([0.1, 0.2, -0.3, 0.4])
    np.testing.assert_array_equal(forward(head, x), forward(head, x.copy()))
    with pytest.raises(ValueError):
        forward(head, np.ones(3))
    with pytest.raises(ValueError):
        forward(head, np.array([np.nan, 0, 0, 0]))


def toy_instance():
    c = Campaign("toy", (make_question("q1", ["a", "b"], {"a": "q2"}), make_question("q2", ["c", "d", "e"])), ("q1",))
    index = build_global_index([c])
    rng = np.random.default_rng(5)
    head = LinearHead.initialise(3, index.size, rng, scale=0.5)
    head.bias[:] = rng.normal(size=index.size)
    X = rng.normal(size=(3, 3))
    K = np.array([[4, 6, 1, 2, 1], [10, 0, 3, 3, 4], [0, 3, 0, 0, 0]])
    return head, X, K, index


def test_parameter_gradient_matches_finite_differences():
    head, X, K, index = toy_instance()
    _, gw, gc = loss_and_grad(head, X, K, index)
    analytic = np.concatenate([gw.ravel(), gc])
    theta = np.concatenate([head.weights.ravel(), head.bias])
    nw = head.weights.size

    def loss_at(t):
        h = LinearHead(t[:nw].reshape(head.weights.shape), t[nw:], head.alpha_max)
        return loss_and_grad(h, X, K, index)[0]

    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = 1e-5 * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * step)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


def test_batch_order_does_not_change_gradient():
    head, X, K, index = toy_instance()
    perm = [2, 0, 1]
    a = loss_and_grad(head, X, K, index)
    b = loss_and_grad(head, X[perm], K[perm], index)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])


@pytest.fixture
def two_campaign_data(campaigns, index):
    rng = np.random.default_rng(12)
    truths = random_truths(campaigns[0], 120, rng) + random_truths(campaigns[1], 120, rng)
    K = stack(sample_dataset(campaigns, truths, SimulationConfig(40, 3), index))
    X = make_features(truths, index, rng)
    return truths, X, K


def test_training_lowers_loss_and_is_deterministic(two_campaign_data, index):
    truths, X, K = two_campaign_data
    head = LinearHead.zeros(X.shape[1], index.size)
    config = TrainConfig(epochs=5, seed=1)
    a = train(head, X, K, index, config)
    b = train(head, X, K, index, config)
    assert a.trace[-1][1] < a.trace[0][1]
    assert [t for t, _ in a.trace] == list(range(6))
    np.testing.assert_array_equal(a.head.weights, b.head.weights)
    assert fraction_mae(a.head, X, truths, index) < fraction_mae(head, X, truths, index)
    np.testing.assert_array_equal(head.weights, 0.0)


def test_full_batch_training_ignores_galaxy_order(two_campaign_data, index):
    _, X, K = two_campaign_data
    head = LinearHead.initialise(X.shape[1], index.size, np.random.default_rng(2), scale=0.1)
    config = TrainConfig(learning_rate=1.0, epochs=4, batch_size=X.shape[0])
    perm = np.random.default_rng(3).permutation(X.shape[0])
    a = train(head, X, K, index, config).head
    b = train(head, X[perm], K[perm], index, config).head
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.bias, b.bias)


def test_zero_learning_rate_leaves_head_unchanged(two_campaign_data, index):
    _, X, K = two_campaign_data
    head = LinearHead.initialise(X.shape[1], index.size, np.random.default_rng(2), scale=0.1)
    result = train(head, X, K, index, TrainConfig(learning_rate=0.0, epochs=2))
    np.testing.assert_array_equal(result.head.weights, head.weights)
    np.testing.assert_array_equal(result.head.bias, head.bias)
    assert result.trace[0][1] == result.trace[-1][1]


@pytest.mark.parametrize("weight_decay", [0.0, 0.01])
def test_masked_campaign_columns_untouched(campaigns, index, weight_decay):
    rng = np.random.default_rng(4)
    truths = random_truths(campaigns[0], 50, rng)
    K = stack(sample_dataset(campaigns, truths, SimulationConfig(40, 2), index))
    X = make_features(truths, index, rng)
    desi = index.campaign_mask("desi")
    head = LinearHead.initialise(X.shape[1], index.size, rng, scale=0.1)

    _, gw, gc = loss_and_grad(head, X[:7], K[:7], index)
    assert np.all(gw[:, desi] == 0) and np.all(gc[desi] == 0)

    config = TrainConfig(learning_rate=1.0, epochs=3, batch_size=16, weight_decay=weight_decay)
    trained = train(head, X, K, index, config).head
    expected = head.weights[:, desi].copy()
    for _ in range(3 * math.ceil(50 / 16)):
        if weight_decay:
            expected -= config.learning_rate * weight_decay * expected
    np.testing.assert_array_equal(trained.weights[:, desi], expected)
    np.testing.assert_array_equal(trained.bias[desi], head.bias[desi])
    assert not np.array_equal(trained.weights[:, ~desi], head.weights[:, ~desi])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_reports_last_finite_loss(campaigns, index):
    rng = np.random.default_rng(0)
    truths = random_truths(campaigns[0], 8, rng)
    K = stack(sample_dataset(campaigns, truths, SimulationConfig(40, 0), index))
    X = 1e200 * make_features(truths, index, rng)
    head = LinearHead.zeros(X.shape[1], index.size)
    with pytest.raises(TrainingDiverged) as info:
        train(head, X, K, index, TrainConfig(learning_rate=1e300, epochs=2))
    assert info.value.last_finite_loss is not None and math.isfinite(info.value.last_finite_loss)


def test_config_and_shape_errors(index):
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1)
    head = LinearHead.zeros(2, index.size)
    with pytest.raises(ValueError):
        train(head, np.zeros((0, 2)), np.zeros((0, index.size)), index, TrainConfig())
    with pytest.raises(ValueError):
        train(head, np.zeros((3, 2)), np.zeros((3, index.size - 1)), index, TrainConfig())


def test_evaluate_invariant_to_order(two_campaign_data, index):
    _, X, K = two_campaign_data
    head = LinearHead.initialise(X.shape[1], index.size, np.random.default_rng(0), scale=0.3)
    perm = np.random.default_rng(1).permutation(X.shape[0])
    a, b = evaluate(head, X, K, index), evaluate(head, X[perm], K[perm], index)
    assert a.mean_nll == b.mean_nll
    assert a.calibration == b.calibration
    with pytest.raises(ValueError):
        evaluate(head, np.zeros((0, X.shape[1])), np.zeros((0, index.size)), index)


def test_calibration_shrinks_with_concentration():
    c = Campaign("c", (make_question("q", ["yes", "no"]),), ("q",))
    index = build_global_index([c])
    K = np.tile([40, 0], (10, 1))
    X = np.zeros((10, 1))
    errors = []
    for raw in [0.0, 5.0, 20.0, 45.0]:
        head = LinearHead(np.zeros((1, 2)), np.array([raw, -50.0]))
        errors.append(evaluate(head, X, K, index).calibration[("c", "q")])
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 0.025


def test_head_roundtrip(tmp_path):
    head = LinearHead.initialise(3, 4, np.random.default_rng(0))
    save_head(head, tmp_path / "head.json")
    back = load_head(tmp_path / "head.json")
    np.testing.assert_array_equal(back.weights, head.weights)
    np.testing.assert_array_equal(back.bias, head.bias)
