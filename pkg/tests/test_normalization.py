import numpy as np
import pytest

from oracles import standard_batchnorm_oracle
from seatlab.autodiff import Tensor, grad_check, mean, mul, reset_tape
from seatlab.normalization import (DomainNormLayer, LayerSwitchSpec,
                                   apply_layer_switch, clear_layer_switch,
                                   layer_switch)
from seatlab.training import SGD


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


def test_standardized_input_passes_through():
    rng = np.random.default_rng(0)
    layer = DomainNormLayer(4, mode="sat")
    x = rng.standard_normal((4, 16, 16))
    # variance 1 - eps makes the normalization denominator exactly 1
    x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
    x *= np.sqrt(1.0 - layer.eps)
    out = layer.forward(Tensor(x), "source", training=True)
    assert np.abs(out.data - x).max() < 1e-6


def test_constant_input_outputs_beta():
    layer = DomainNormLayer(3, mode="seat")
    layer.beta["source"].data[:] = [1.0, -2.0, 0.5]
    x = Tensor(np.full((3, 8, 8), 4.2))
    out = layer.forward(x, "source", training=True)
    for c, b in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_allclose(out.data[c], b, atol=1e-12)


def test_seat_gamma_scaling_between_domains():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 10, 10))
    layer = DomainNormLayer(2, mode="seat")
    layer.gamma["source"].data[:] = 1.0
    layer.gamma["target"].data[:] = 2.0
    out_src = layer.forward(Tensor(x), "source", training=True, update_stats=False)
    out_trg = layer.forward(Tensor(x), "target", training=True, update_stats=False)
    np.testing.assert_allclose(out_trg.data, 2.0 * out_src.data, atol=1e-12)


def test_prenorm_statistics_invariant():
    rng = np.random.default_rng(2)
    layer = DomainNormLayer(6, mode="sat")
    layer.capture_prenorm = True
    x = Tensor(rng.standard_normal((6, 24, 24)) * 3.0 + 1.5)
    layer.forward(x, "source", training=True)
    xhat = layer.last_prenorm
    assert np.abs(xhat.mean(axis=(1, 2))).max() < 1e-6
    assert np.abs(xhat.var(axis=(1, 2)) - 1.0).max() < 1e-4


def test_sat_aliases_are_identical_objects():
    layer = DomainNormLayer(4, mode="sat")
    assert layer.gamma["source"] is layer.gamma["target"]
    assert layer.running_mean["source"] is layer.running_mean["target"]
    layer.gamma["source"].data[0] = 9.0
    assert layer.gamma["target"].data[0] == 9.0


def test_sat_equals_standard_batchnorm_oracle():
    rng = np.random.default_rng(3)
    layer = DomainNormLayer(3, mode="sat")
    layer.gamma["source"].data[:] = rng.uniform(0.5, 1.5, 3)
    layer.beta["source"].data[:] = rng.standard_normal(3)
    x = rng.standard_normal((3, 12, 12)) * 2.0 + 0.3

    out = layer.forward(Tensor(x), "target", training=True)
    expected = standard_batchnorm_oracle(x, layer.gamma["source"].data,
                                         layer.beta["source"].data, layer.eps)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)

    # eval mode: running stats were updated once from init (0, 1)
    rm = 0.1 * x.mean(axis=(1, 2))
    rv = 0.9 + 0.1 * x.var(axis=(1, 2))
    np.testing.assert_allclose(layer.running_mean["source"], rm, atol=1e-12)
    np.testing.assert_allclose(layer.running_var["source"], rv, atol=1e-12)
    out_eval = layer.forward(Tensor(x), "target", training=False)
    expected_eval = standard_batchnorm_oracle(x, layer.gamma["source"].data,
                                              layer.beta["source"].data, layer.eps,
                                              mean_val=rm, var_val=rv)
    np.testing.assert_allclose(out_eval.data, expected_eval, atol=1e-12)


def test_seat_source_step_leaves_target_bitwise_unchanged():
    rng = np.random.default_rng(4)
    layer = DomainNormLayer(4, mode="seat")
    snap = {
        "gamma": layer.gamma["target"].data.copy(),
        "beta": layer.beta["target"].data.copy(),
        "rm": layer.running_mean["target"].copy(),
        "rv": layer.running_var["target"].copy(),
    }
    opt = SGD(layer.parameters(), lr=0.05, momentum=0.9, weight_decay=5e-4)
    opt.zero_grad()
    out = layer.forward(Tensor(rng.standard_normal((4, 8, 8)), requires_grad=False),
                        "source", training=True)
    loss = mean(mul(out, out))
    loss.backward()
    opt.step()

    assert layer.gamma["source"].grad is not None
    assert layer.gamma["target"].grad is None
    assert np.array_equal(layer.gamma["target"].data, snap["gamma"])
    assert np.array_equal(layer.beta["target"].data, snap["beta"])
    assert np.array_equal(layer.running_mean["target"], snap["rm"])
    assert np.array_equal(layer.running_var["target"], snap["rv"])
    # source side did move
    assert not np.array_equal(layer.running_mean["source"], np.zeros(4))
    assert not np.array_equal(layer.gamma["source"].data, np.ones(4))


def test_running_stats_update_rule():
    layer = DomainNormLayer(2, mode="seat", momentum=0.1)
    x = np.random.default_rng(5).standard_normal((2, 6, 6))
    layer.forward(Tensor(x), "target", training=True)
    np.testing.assert_allclose(layer.running_mean["target"], 0.1 * x.mean(axis=(1, 2)), atol=1e-14)
    np.testing.assert_allclose(layer.running_var["target"], 0.9 + 0.1 * x.var(axis=(1, 2)), atol=1e-14)
    np.testing.assert_array_equal(layer.running_mean["source"], np.zeros(2))


def test_gradients_pass_finite_differences():
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((3, 6, 6))
    for training in (True, False):
        layer = DomainNormLayer(3, mode="seat")
        layer.gamma["source"].data[:] = rng.uniform(0.5, 1.5, 3)
        layer.beta["source"].data[:] = rng.standard_normal(3)
        layer.running_mean["source"][:] = rng.standard_normal(3) * 0.1
        layer.running_var["source"][:] = rng.uniform(0.5, 1.5, 3)
        fixed = Tensor(rng.standard_normal((3, 6, 6)))

        def f_x(t):
            return mean(mul(layer.forward(t, "source", training=training, update_stats=False), fixed))

        assert grad_check(f_x, Tensor(x0)) < 1e-4, f"input grad, training={training}"

        x_t = Tensor(x0)

        def f_gamma(t):
            layer.gamma["source"] = t
            return mean(mul(layer.forward(x_t, "source", training=training, update_stats=False), fixed))

        assert grad_check(f_gamma, Tensor(rng.uniform(0.5, 1.5, 3))) < 1e-4

        def f_beta(t):
            layer.beta["source"] = t
            return mean(mul(layer.forward(x_t, "source", training=training, update_stats=False), fixed))

        assert grad_check(f_beta, Tensor(rng.standard_normal(3))) < 1e-4


def test_batched_input_axes():
    rng = np.random.default_rng(7)
    layer = DomainNormLayer(3, mode="sat")
    x = rng.standard_normal((2, 3, 5, 5))
    out = layer.forward(Tensor(x), "source", training=True, update_stats=False)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    expected = (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + layer.eps)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_rejects_bad_inputs():
    layer = DomainNormLayer(3)
    with pytest.raises(ValueError, match="domain"):
        layer.forward(Tensor(np.zeros((3, 4, 4))), "src", training=True)
    with pytest.raises(ValueError, match="channels"):
        layer.forward(Tensor(np.zeros((2, 4, 4))), "source", training=True)
    with pytest.raises(ValueError, match="mode"):
        DomainNormLayer(3, mode="hybrid")


# ---------------------------------------------------------------------------
# layer switch


class _FakeNet:
    def __init__(self, n_groups=4):
        self.groups = [[DomainNormLayer(2, mode="seat") for _ in range(2)] for _ in range(n_groups)]

    def norm_groups(self):
        return self.groups


def test_switch_spec_parse_and_validate():
    assert LayerSwitchSpec.parse("").empty
    assert LayerSwitchSpec.parse("none").empty
    assert LayerSwitchSpec.parse("3-4") == LayerSwitchSpec(3, 4)
    assert LayerSwitchSpec.parse("4") == LayerSwitchSpec(4, 4)
    assert str(LayerSwitchSpec(2, 4)) == "2-4"
    with pytest.raises(ValueError):
        LayerSwitchSpec.parse("x-y")
    with pytest.raises(ValueError, match="out of bounds"):
        LayerSwitchSpec(3, 5).validate(4)
    with pytest.raises(ValueError, match="out of bounds"):
        LayerSwitchSpec(0, 2).validate(4)


def test_apply_switch_sets_only_requested_groups():
    net = _FakeNet()
    apply_layer_switch(net, LayerSwitchSpec(2, 3))
    flags = [[l.switch_to_source for l in g] for g in net.groups]
    assert flags == [[False, False], [True, True], [True, True], [False, False]]
    clear_layer_switch(net)
    assert not any(l.switch_to_source for g in net.groups for l in g)


def test_switch_is_reversible_context_manager():
    net = _FakeNet()
    with layer_switch(net, LayerSwitchSpec(1, 4)):
        assert all(l.switch_to_source for g in net.groups for l in g)
    assert not any(l.switch_to_source for g in net.groups for l in g)


def test_switch_affects_only_target_eval_forwards():
    rng = np.random.default_rng(8)
    layer = DomainNormLayer(2, mode="seat")
    # make the two domains' stats/affine genuinely different
    layer.running_mean["target"][:] = 1.0
    layer.gamma["target"].data[:] = 3.0
    x = Tensor(rng.standard_normal((2, 5, 5)))
    src_before = layer.forward(x, "source", training=False).data
    trg_before = layer.forward(x, "target", training=False).data
    layer.switch_to_source = True
    src_after = layer.forward(x, "source", training=False).data
    trg_after = layer.forward(x, "target", training=False).data
    np.testing.assert_array_equal(src_before, src_after)
    assert not np.array_equal(trg_before, trg_after)
    np.testing.assert_array_equal(trg_after, src_after)
