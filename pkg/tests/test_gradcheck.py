import numpy as np
import pytest

from inceptseg import gradcheck


@pytest.mark.parametrize("name", sorted(gradcheck.OPS))
def test_op_gradient(name):
    assert gradcheck.OPS[name]() < gradcheck.OP_TOLERANCE


def test_registry_covers_every_differentiable_primitive():
    required = {"conv2d", "transposed_conv2x2", "maxpool2x2", "batchnorm", "relu", "sigmoid", "tanh",
                "convlstm_step", "bconvlstm_fuse", "bce_loss"}
    assert required <= set(gradcheck.OPS)


def test_relative_error_floor():
    assert gradcheck.relative_error(np.array([1e-12]), np.array([-1e-12])) < 1e-5
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    with pytest.raises(ValueError):
        gradcheck.relative_error(np.zeros(2), np.zeros(3))


def test_numerical_gradient_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = gradcheck.numerical_gradient(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])  # restored


def test_graph_check_bcdu():
    result = gradcheck.check_graph(gradcheck.tiny_spec("bcdu", 1), per_param=1)
    assert result.passed, result
    assert result.skipped_fraction < 0.1


def test_graph_check_flags_wrong_gradient(monkeypatch):
    # a corrupted backward rule must be caught by the graph check
    from inceptseg import network

    original = network.TransposedConv.backward

    def broken(self, g):
        return 1.5 * original(self, g)

    monkeypatch.setattr(network.TransposedConv, "backward", broken)
    assert not gradcheck.check_graph(gradcheck.tiny_spec("unet", 1), per_param=1).passed
