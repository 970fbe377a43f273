import math

import numpy as np
import pytest

from inceptseg.errors import ConfigError, NumericalError, UsageError, ValidationError
from inceptseg.network import NetworkSpec, Parameter, build_model
from inceptseg.training import (EPOCH_FIELDS, EarlyStopping, TrainConfig, adam_step, bce_loss, evaluate,
                                pixel_accuracy, train)


def tiny_data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 8, 8, 1))
    return x, (x > 0.5).astype(float)


def tiny_model(**kw):
    return build_model(NetworkSpec(variant="bcdu", base_filters=(4, 8, 16, 32), input_shape=(8, 8, 1), **kw))


def test_bce_known_values_and_gradient():
    loss, grad = bce_loss(np.full((1, 2, 2, 1), 0.5), np.array([1., 0., 1., 0.]).reshape(1, 2, 2, 1))
    assert loss == pytest.approx(math.log(2))
    np.testing.assert_allclose(grad.ravel(), np.array([-2., 2., -2., 2.]) / 4)


def test_bce_clamps_and_zeroes_gradient_outside():
    loss, grad = bce_loss(np.array([0.0, 1.0]).reshape(1, 1, 2, 1), np.array([1.0, 0.0]).reshape(1, 1, 2, 1))
    assert loss == pytest.approx(-math.log(1e-7))
    np.testing.assert_array_equal(grad, 0.0)


def test_bce_rejects_soft_targets():
    with pytest.raises(ValidationError):
        bce_loss(np.full((1, 1, 1, 1), 0.5), np.full((1, 1, 1, 1), 0.3))


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter("w", np.array([1.0, -2.0, 3.0]))
    p.grad[...] = [0.5, -4.0, 1e-3]
    cfg = TrainConfig(learning_rate=0.01)
    adam_step([p], 1, cfg)
    # bias-corrected first step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0, 3.0]) - 0.01 * np.array([0.5, -4.0, 1e-3]) / (np.abs([0.5, -4.0, 1e-3]) + 1e-8)
    np.testing.assert_allclose(p.value, expected, rtol=1e-12)
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_matches_reference_optimizer():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(5)
    grads = rng.standard_normal((6, 5))
    p = Parameter("w", w0.copy())
    cfg = TrainConfig(learning_rate=0.05)
    tw = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tw], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    for t, g in enumerate(grads, start=1):
        p.grad[...] = g
        adam_step([p], t, cfg)
        tw.grad = torch.tensor(g)
        opt.step()
    np.testing.assert_allclose(p.value, tw.detach().numpy(), rtol=1e-10)


def test_adam_rejects_step_zero():
    with pytest.raises(UsageError):
        adam_step([], 0, TrainConfig())


def test_bce_matches_reference():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(1)
    p, y = rng.uniform(0.01, 0.99, (2, 3, 3, 1)), (rng.random((2, 3, 3, 1)) < 0.5).astype(float)
    ours, grad = bce_loss(p, y)
    tp = torch.tensor(p, requires_grad=True)
    ref = torch.nn.functional.binary_cross_entropy(tp, torch.tensor(y))
    ref.backward()
    assert ours == pytest.approx(ref.item(), rel=1e-12)
    np.testing.assert_allclose(grad, tp.grad.numpy(), rtol=1e-10)


def test_early_stopping_flat_and_improving():
    flat = EarlyStopping(patience=10, min_delta=1e-4)
    stops = [flat.update(1.0)[1] for _ in range(20)]
    assert stops.index(True) + 1 == 11
    better = EarlyStopping(patience=3, min_delta=1e-4)
    assert not any(better.update(1.0 - 0.01 * k)[1] for k in range(50))


def test_early_stopping_small_gains_mark_best_without_resetting():
    es = EarlyStopping(patience=2, min_delta=0.1)
    assert es.update(1.0) == (True, False)
    assert es.update(0.95) == (True, False)  # new best, but within min_delta
    assert es.update(0.94) == (True, True)


def test_train_config_validation():
    for bad in (dict(max_epochs=0), dict(patience=0), dict(batch_size=0), dict(beta1=1.0), dict(learning_rate=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_train_writes_log_and_checkpoint(tmp_path):
    data = tiny_data()
    ckpt, logs = train(tiny_model(), data, tiny_data(2, 1), TrainConfig(max_epochs=3, batch_size=2), tmp_path)
    assert ckpt.exists() and len(logs) == 3
    lines = (tmp_path / "epochs.csv").read_text().splitlines()
    assert lines[0] == ",".join(EPOCH_FIELDS)
    assert len(lines) == 4
    assert logs[0].is_best


def test_train_stubbed_validator_stops_on_plateau(tmp_path):
    _, logs = train(tiny_model(), tiny_data(), None, TrainConfig(max_epochs=30, patience=4),
                    tmp_path, validator=lambda m, e: (0.5, 0.5))
    assert len(logs) == 5


def test_nan_loss_raises_numerical_error(tmp_path):
    x, y = tiny_data()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        train(tiny_model(), (x, y), tiny_data(2, 1), TrainConfig(max_epochs=2), tmp_path)


def test_empty_sets_rejected(tmp_path):
    x, y = tiny_data()
    with pytest.raises(ConfigError):
        train(tiny_model(), (x[:0], y[:0]), tiny_data(), TrainConfig(max_epochs=1), tmp_path)
    with pytest.raises(ConfigError):
        train(tiny_model(), (x, y), None, TrainConfig(max_epochs=1), tmp_path)


def test_pixel_accuracy_and_evaluate():
    truth = np.array([1., 0., 1., 0.]).reshape(1, 2, 2, 1)
    assert pixel_accuracy(np.array([0.9, 0.1, 0.2, 0.5]).reshape(1, 2, 2, 1), truth) == 0.5
    rep = evaluate(tiny_model(), tiny_data())
    assert 0.0 <= rep.accuracy <= 1.0 and rep.auc is not None
