import numpy as np
import pytest

from inceptseg.errors import ConfigError, ShapeError, UsageError
from inceptseg.network import NetworkSpec, build_model, count_parameters, format_audit


def tiny(variant="inceptnet", d=1, **kw):
    return NetworkSpec(variant=variant, d=d, base_filters=(4, 8, 16, 32), input_shape=(8, 8, 1), **kw)


@pytest.mark.parametrize("variant", ["unet", "bcdu", "inceptnet"])
@pytest.mark.parametrize("d", [1, 3])
def test_forward_shape_and_range(variant, d):
    model = build_model(tiny(variant, d))
    x = np.random.default_rng(0).standard_normal((3, 8, 8, 1))
    for mode in ("infer", "train"):
        y = model.forward(x, mode, step=1)
        assert y.shape == (3, 8, 8, 1)
        assert np.all((y > 0) & (y < 1))


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        build_model(tiny()).forward(np.zeros((1, 16, 16, 1)))


def test_backward_requires_train_forward():
    model = build_model(tiny())
    model.forward(np.zeros((1, 8, 8, 1)), "infer")
    with pytest.raises(UsageError):
        model.backward(np.zeros((1, 8, 8, 1)))


def test_initialisation_is_seeded():
    a, b, c = build_model(tiny(seed=1)), build_model(tiny(seed=1)), build_model(tiny(seed=2))
    for pa, pb, pc in zip(a.parameters(), b.parameters(), c.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)
    assert any(not np.array_equal(pa.value, pc.value) for pa, pc in zip(a.parameters(), c.parameters()))


def test_dropout_masks_follow_step():
    model = build_model(tiny(dropout_rate=0.5))
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 1))
    y1 = model.forward(x, "train", step=1)
    np.testing.assert_array_equal(y1, model.forward(x, "train", step=1))
    assert not np.array_equal(y1, model.forward(x, "train", step=2))
    # inference ignores dropout
    np.testing.assert_array_equal(model.forward(x, "infer", step=1), model.forward(x, "infer", step=9))


@pytest.mark.parametrize("variant", ["unet", "bcdu", "inceptnet"])
@pytest.mark.parametrize("d", [1, 3])
def test_every_layer_matches_closed_form(variant, d):
    total, rows = count_parameters(build_model(tiny(variant, d)))
    assert rows
    for r in rows:
        assert r.count == r.closed_form, r
    assert total == sum(r.count for r in rows)


def test_unet_tiny_total_by_hand():
    # two 3x3 convs per block, 2x2 up-convs, BN (4 values/channel), 1x1 head
    def conv(k, ci, co):
        return k * k * ci * co + co

    f = (4, 8, 16, 32)
    enc = sum(conv(3, ci, co) + conv(3, co, co) for ci, co in [(1, 4), (4, 8), (8, 16)])
    bott = conv(3, 16, 32) + conv(3, 32, 32)
    dec = sum(conv(2, f[k + 1], f[k]) + 4 * f[k] + conv(3, 2 * f[k], f[k]) + conv(3, f[k], f[k]) for k in range(3))
    expected = enc + bott + dec + conv(1, 4, 1)
    assert count_parameters(build_model(tiny("unet", 1)))[0] == expected


def test_dense_bottleneck_edges():
    e1 = build_model(tiny(d=1)).edges()
    e3 = build_model(tiny(d=3)).edges()
    assert sum(e.kind == "skip" for e in e1) == 3
    assert not any(e.kind == "dense-concat" for e in e1)
    dense = [(e.src, e.dst) for e in e3 if e.kind == "dense-concat"]
    assert ("bottleneck.block1", "bottleneck.block3") in dense
    assert ("bottleneck.block2", "bottleneck.block3") in dense


def test_format_audit_lists_total():
    total, rows = count_parameters(build_model(tiny()))
    text = format_audit(total, rows)
    assert f"{total:,}" in text.splitlines()[-1]
    assert "head" in text


@pytest.mark.parametrize("bad", [
    dict(variant="resnet"), dict(d=2), dict(base_filters=(4, 8, 16, 30)), dict(input_shape=(12, 12, 1)),
    dict(dropout_rate=1.0), dict(base_filters=(6, 12, 24, 48)),
])
def test_invalid_specs(bad):
    args = dict(variant="inceptnet", d=1, base_filters=(4, 8, 16, 32), input_shape=(8, 8, 1))
    args.update(bad)
    with pytest.raises(ConfigError):
        NetworkSpec(**args)


def test_spec_roundtrip():
    spec = tiny("bcdu", 3, seed=7)
    again = NetworkSpec.from_dict(spec.to_dict())
    assert again == spec and again.canonical() == spec.canonical()
    with pytest.raises(ConfigError):
        NetworkSpec.from_dict({**spec.to_dict(), "layers": 5})
