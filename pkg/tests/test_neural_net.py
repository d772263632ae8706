import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_loop, unet_numpy
from swe_interp.dynamics import PhysicsParams, flat_energy, flow_map
from swe_interp.fe_core import build_mesh
from swe_interp.neural_net import (ConvLayer, LearnFlow, ShapeError, UNet, build_model,
                                   conv1d_circular, flow_rows, load_model, read_model_header,
                                   save_model)

T = torch.from_numpy


@pytest.fixture(scope="module")
def tiny_flow():
    return flow_map(build_mesh(12), PhysicsParams())


def unet_layers_numpy(net):
    return [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in net.layers]


def randomize(module, seed, scale=0.5):
    r = np.random.default_rng(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(T(scale * r.standard_normal(tuple(p.shape))))
    return module


def test_conv_identity_kernel(rng):
    x = T(rng.standard_normal((2, 9)))
    w = torch.zeros(2, 2, 3, dtype=torch.float64)
    w[0, 0, 1] = w[1, 1, 1] = 1.0
    assert torch.equal(conv1d_circular(x, w, torch.zeros(2, dtype=torch.float64)), x)


def test_conv_constant_input(rng):
    w = T(rng.standard_normal((3, 2, 5)))
    b = T(rng.standard_normal(3))
    y = conv1d_circular(torch.full((2, 11), 1.5, dtype=torch.float64), w, b)
    expected = b + 1.5 * w.sum(dim=(1, 2))
    torch.testing.assert_close(y, expected[:, None].expand(3, 11), rtol=0, atol=1e-13)


def test_conv_matches_loop(rng):
    x = rng.standard_normal((2, 8))
    w = rng.standard_normal((3, 2, 3))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(conv1d_circular(T(x), T(w), T(b)).numpy(), conv_loop(x, w, b), rtol=0, atol=1e-14)
    x7 = rng.standard_normal((4, 2, 10))
    w7 = rng.standard_normal((3, 2, 7))
    got = conv1d_circular(T(x7), T(w7), T(b)).numpy()
    for i in range(4):
        np.testing.assert_allclose(got[i], conv_loop(x7[i], w7, b), rtol=0, atol=1e-13)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        conv1d_circular(torch.zeros(3, 8, dtype=torch.float64), torch.zeros(2, 2, 3, dtype=torch.float64))
    with pytest.raises(ShapeError):
        ConvLayer(2, 2, 4)


@settings(max_examples=25, deadline=None)
@given(shift=st.integers(-20, 20), seed=st.integers(0, 2**32 - 1), k=st.sampled_from([1, 3, 5, 7]))
def test_conv_shift_equivariance(shift, seed, k):
    r = np.random.default_rng(seed)
    x = T(r.standard_normal((2, 12)))
    w = T(r.standard_normal((3, 2, k)))
    b = T(r.standard_normal(3))
    lhs = conv1d_circular(torch.roll(x, shift, -1), w, b)
    rhs = torch.roll(conv1d_circular(x, w, b), shift, -1)
    assert torch.equal(lhs, rhs)


def test_unet_structure():
    net = UNet(10, 20, 80)
    shapes = [tuple(l.weight.shape) for l in net.layers]
    assert shapes == [(20, 10, 3), (80, 20, 5), (80, 80, 7), (20, 80, 5), (10, 20, 3)]


def test_unet_zero_weights_identity(rng):
    net = UNet(4, 3, 5)
    x = T(rng.standard_normal((2, 4, 16)))
    assert torch.equal(net(x), x)


def test_unet_zero_input_zero_bias(rng):
    net = randomize(UNet(3, 2, 4), 1)
    with torch.no_grad():
        for layer in net.layers:
            layer.bias.zero_()
    assert not net(torch.zeros(3, 8, dtype=torch.float64)).any()


def test_unet_matches_numpy_oracle(rng):
    net = randomize(UNet(3, 2, 4), 2)
    x = rng.standard_normal((3, 8))
    np.testing.assert_allclose(net(T(x)).detach().numpy(), unet_numpy(unet_layers_numpy(net), x),
                               rtol=0, atol=1e-12)


def test_learnflow_steady_state(tiny_flow):
    lf = LearnFlow(3, 2, 4, tiny_flow)
    steady = np.concatenate([np.zeros(24), np.full(12, 0.4)])
    x = torch.zeros(3, 36, dtype=torch.float64)
    x[0] = T(steady)
    x[1:] = 9.0  # overwritten by the recurrence
    out = lf(x).detach().numpy()
    np.testing.assert_allclose(out, np.tile(steady, (3, 1)), atol=1e-14)


def test_learnflow_single_level_is_unet2(tiny_flow, rng):
    lf = randomize(LearnFlow(1, 2, 4, tiny_flow), 3)
    x = T(rng.standard_normal((1, 36)))
    expected = lf.unet2(x)
    assert torch.equal(lf(x), expected)


def test_learnflow_rows_conserve_energy(tiny_flow, rng):
    lf = LearnFlow(5, 2, 4, tiny_flow)
    x = T(rng.standard_normal((5, 36)))
    out = lf(x).detach().numpy()
    e = flat_energy(out, tiny_flow.mesh, 1.0)
    np.testing.assert_allclose(e, e[0], rtol=1e-10)
    np.testing.assert_allclose(out[0], x[0].numpy())


def test_learnflow_dimension_error(tiny_flow):
    with pytest.raises(ShapeError):
        LearnFlow(3, 2, 4, tiny_flow)(torch.zeros(3, 30, dtype=torch.float64))


def test_flow_rows_powers(tiny_flow, rng):
    a = tiny_flow.matrix
    x0 = rng.standard_normal(36)
    rows = flow_rows(T(x0), T(a), 4).numpy()
    np.testing.assert_allclose(rows[3], np.linalg.matrix_power(a, 3) @ x0, atol=1e-13)


def test_nn_zero_weights_closed_form(tiny_flow, rng):
    model = build_model(3, 2, 4, tiny_flow)
    x = rng.standard_normal((3, 36))
    a = tiny_flow.matrix
    flow = np.stack([x[0], a @ x[0], a @ a @ x[0]])
    np.testing.assert_allclose(model(T(x)).detach().numpy(), x + flow, rtol=0, atol=1e-14)
    assert not model(torch.zeros(3, 36, dtype=torch.float64)).any()


def test_nn_matches_composition_oracle(tiny_flow, rng):
    model = randomize(build_model(3, 2, 4, tiny_flow), 4, scale=0.3)
    x = rng.standard_normal((3, 36))
    a = tiny_flow.matrix

    def fieldwise(block, y):
        parts = [unet_numpy(unet_layers_numpy(block.nets[f]), y[:, 12 * i:12 * (i + 1)])
                 for i, f in enumerate("uvp")]
        return np.concatenate(parts, axis=1)

    z = fieldwise(model.stage1, x)
    rows = np.stack([z[0], a @ z[0], a @ (a @ z[0])])
    ref = z + fieldwise(model.learnflow.unet2, rows)
    np.testing.assert_allclose(model(T(x)).detach().numpy(), ref, rtol=0, atol=1e-11)


def test_nn_parameters_exclude_flow_map(tiny_flow):
    model = build_model(3, 2, 4, tiny_flow, np.random.default_rng(0))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == 6 * 5 * 2
    assert not any("A" == n.split(".")[-1] for n in names)
    assert not model.learnflow.A.requires_grad


def test_backward_requires_forward(tiny_flow):
    model = build_model(3, 2, 4, tiny_flow)
    with pytest.raises(RuntimeError):
        model.backward(torch.ones(3, 36, dtype=torch.float64))


def test_backward_bias_gradient_is_length():
    layer = ConvLayer(2, 3, 3)
    x = torch.randn(2, 10, dtype=torch.float64)
    layer(x).sum().backward()
    torch.testing.assert_close(layer.bias.grad, torch.full((3,), 10.0, dtype=torch.float64))


def test_backward_flows_through_flow_map(tiny_flow, rng):
    model = randomize(build_model(3, 2, 4, tiny_flow), 5, scale=0.3)
    x = T(rng.standard_normal((3, 36)))
    gout = rng.standard_normal((3, 36))
    model(x)
    grads = model.backward(gout)
    assert set(grads) == {n for n, _ in model.named_parameters()}
    assert model.learnflow.A.grad is None

    # finite differences on one stage-one weight: gradient reaches it through LearnFlow as well
    p = model.stage1.nets["u"].layers[0].weight
    idx = (0, 1, 2)
    analytic = grads["stage1.nets.u.layers.0.weight"][idx].item()
    with torch.no_grad():
        base = p[idx].item()
        p[idx] = base + 1e-6
        fp = float((model(x) * T(gout)).sum())
        p[idx] = base - 1e-6
        fm = float((model(x) * T(gout)).sum())
        p[idx] = base
    assert analytic == pytest.approx((fp - fm) / 2e-6, rel=1e-6)


def test_relu_subgradient_zero_at_kink():
    x = torch.zeros(1, 1, 4, dtype=torch.float64, requires_grad=True)
    torch.relu(x).sum().backward()
    assert not x.grad.any()


def test_init_scale_and_determinism(tiny_flow):
    a = build_model(3, 2, 4, tiny_flow, np.random.default_rng(7))
    b = build_model(3, 2, 4, tiny_flow, np.random.default_rng(7))
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
        if na.endswith("weight"):
            fan_in = pa.shape[1] * pa.shape[2]
            assert pa.abs().max() <= np.sqrt(1.0 / fan_in)
        else:
            assert not pa.any()


def test_forward_is_deterministic(tiny_flow, rng):
    model = build_model(3, 2, 4, tiny_flow, np.random.default_rng(1))
    x = T(rng.standard_normal((4, 3, 36)))
    assert torch.equal(model(x), model(x))


def test_model_file_roundtrip(tiny_flow, tmp_path):
    model = build_model(3, 2, 4, tiny_flow, np.random.default_rng(11))
    path = save_model(model, tmp_path / "m.bin")
    assert read_model_header(path) == {"n_levels": 3, "length": 12, "dimension": 36, "s1": 2, "s2": 4}
    loaded = load_model(path, tiny_flow)
    for pa, pb in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)
    assert save_model(loaded, tmp_path / "m2.bin").read_bytes() == path.read_bytes()


def test_model_file_validation(tiny_flow, tmp_path):
    path = save_model(build_model(3, 2, 4, tiny_flow), tmp_path / "m.bin")
    other = flow_map(build_mesh(8), PhysicsParams())
    with pytest.raises(ShapeError):
        load_model(path, other)
    (tmp_path / "t.bin").write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ShapeError):
        load_model(tmp_path / "t.bin", tiny_flow)
    (tmp_path / "x.bin").write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ShapeError):
        load_model(tmp_path / "x.bin", tiny_flow)
