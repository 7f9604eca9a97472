import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from richlab.network import Network, backward, forward, gaussian_task, init_network, loss_and_grad
from richlab.numkit import RngState
from richlab.parameterization import NetSpec, RichnessSpec, layer_scales
from richlab.probes import (_output_jacobian, alignment_magnification, batch_alignment,
                            batch_criteria, chebyshev_nodes, decompose_update,
                            linearization_batch, linearization_probe, measure_criteria,
                            perturbed, single_step, single_step_batch)


def setup(width=8, depth=3, activation="linear", gauge="mup", r=0.25, seed=0, n=4):
    spec = NetSpec(depth, 5, width, 3, activation)
    net = init_network(spec, layer_scales(gauge, RichnessSpec(r), spec), RngState(seed, 2))
    ds = gaussian_task(spec, n, RngState(seed, 1))
    return net, ds


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(2, 32), st.sampled_from(["linear", "relu"]),
       st.sampled_from(["mup", "rescaling", "stp", "standard"]), st.floats(0, 0.5),
       st.integers(0, 10_000))
def test_decomposition_identity(depth, width, activation, gauge, r, seed):
    net, ds = setup(width, depth, activation, gauge, r, seed)
    net1, deltas, ft0, ft1, _ = single_step(net, ds.x[0], ds.y[0], 1.0)
    dec = decompose_update(net, deltas, ft0, ft1)
    assert dec.approximate == (activation == "relu")
    for l in range(1, depth + 1):
        scale = max(1.0, float(np.linalg.norm(dec.total[l - 1])))
        assert np.linalg.norm(dec.residual(l)) <= 1e-12 * scale


def test_first_layer_has_no_passthrough():
    net, ds = setup()
    _, deltas, ft0, ft1, _ = single_step(net, ds.x[0], ds.y[0])
    dec = decompose_update(net, deltas, ft0, ft1)
    assert np.all(dec.passthrough_term[0] == 0) and np.all(dec.interaction_term[0] == 0)
    ratios = dec.ratios(1)
    assert ratios["layer"] == pytest.approx(1.0, abs=1e-14)


def test_decomposition_brute_force_width2():
    net, ds = setup(width=2, activation="relu", seed=3)
    x, y = ds.x[0], ds.y[0]
    net1, deltas, ft0, ft1, _ = single_step(net, x, y)
    dec = decompose_update(net, deltas, ft0, ft1)
    for l in range(1, 4):
        g = net.scales.g[l - 1]
        w, dw = net.weights[l - 1], deltas[l - 1]
        h, hn = ft0.reps[l - 1], ft1.reps[l - 1]
        for i in range(w.shape[0]):
            lay = g * sum(dw[i, j] * h[j] for j in range(w.shape[1]))
            pas = g * sum(w[i, j] * (hn[j] - h[j]) for j in range(w.shape[1]))
            inter = g * sum(dw[i, j] * (hn[j] - h[j]) for j in range(w.shape[1]))
            new = g * sum((w[i, j] + dw[i, j]) * hn[j] for j in range(w.shape[1]))
            assert dec.layer_term[l - 1][i] == pytest.approx(lay, rel=1e-12, abs=1e-14)
            assert dec.passthrough_term[l - 1][i] == pytest.approx(pas, rel=1e-12, abs=1e-14)
            assert dec.interaction_term[l - 1][i] == pytest.approx(inter, rel=1e-12, abs=1e-14)
            assert ft1.preacts[l - 1][i] == pytest.approx(new, rel=1e-12, abs=1e-14)


def test_decompose_rejects_mismatched_inputs():
    net, ds = setup()
    _, deltas, ft0, _, _ = single_step(net, ds.x[0], ds.y[0])
    other = forward(net, ds.x[1])
    with pytest.raises(ValueError, match="different inputs"):
        decompose_update(net, deltas, ft0, other)


def test_uuc_dot_oracle():
    net, ds = setup(width=6)
    _, deltas, ft0, ft1, bt0 = single_step(net, ds.x[0], ds.y[0])
    dec = decompose_update(net, deltas, ft0, ft1)
    cr = measure_criteria(bt0, dec, ft0)
    for l in range(1, 4):
        g, dh = bt0.rep_grads[l], ft1.reps[l] - ft0.reps[l]
        want = abs(sum(a * b for a, b in zip(g, dh)))
        assert cr.uuc_value[l - 1] == pytest.approx(want, rel=1e-12)
        assert cr.rep_update_norm[l - 1] == pytest.approx(math.sqrt(sum(v * v for v in dh)), rel=1e-12)
        assert cr.order_parameter[l - 1] == pytest.approx(
            cr.rep_update_norm[l - 1] / cr.rep_norm[l - 1], rel=1e-14)


def test_zero_learning_rate_gives_zero_update():
    net, ds = setup()
    net1, deltas, ft0, ft1, bt0 = single_step(net, ds.x[0], ds.y[0], global_eta=0.0)
    assert all(np.all(d == 0) for d in deltas)
    dec = decompose_update(net, deltas, ft0, ft1)
    assert all(np.all(t == 0) for t in dec.total)


def test_chebyshev_nodes():
    np.testing.assert_allclose(chebyshev_nodes(2), [math.sqrt(0.5), -math.sqrt(0.5)], atol=1e-15)
    assert np.all(np.abs(chebyshev_nodes(7)) < 1)


def test_linearization_single_layer_update_is_linear():
    net, ds = setup(width=16)
    _, deltas, _, _, _ = single_step(net, ds.x[0], ds.y[0])
    only = [np.zeros_like(d) for d in deltas]
    only[1] = deltas[1]
    rep = linearization_probe(net, only, ds.x[0])
    scale = float(np.max(np.abs(rep.poly_coeffs[:2])))
    assert np.max(np.abs(rep.poly_coeffs[2:])) <= 1e-10 * max(1.0, scale)
    assert np.linalg.norm(rep.curvature_term) <= 1e-10 * max(1.0, scale)


def test_linearization_zero_update():
    net, ds = setup(width=16)
    zeros = [np.zeros_like(w) for w in net.weights]
    rep = linearization_probe(net, zeros, ds.x[0])
    np.testing.assert_allclose(rep.poly_coeffs[0], rep.f0, rtol=1e-12)
    assert np.max(np.abs(rep.poly_coeffs[1:])) <= 1e-12
    assert rep.grad_change_abs == 0.0 and rep.grad_change_rel == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 24), st.floats(0, 0.5), st.integers(0, 10_000))
def test_linearization_coefficient_sum(depth, width, r, seed):
    net, ds = setup(width, depth, r=r, seed=seed)
    net1, deltas, _, ft1, _ = single_step(net, ds.x[0], ds.y[0])
    rep = linearization_probe(net, deltas, ds.x[0])
    scale = max(1.0, float(np.max(np.abs(ft1.output))))
    np.testing.assert_allclose(rep.poly_coeffs.sum(axis=0), ft1.output, rtol=0, atol=1e-10 * scale)
    np.testing.assert_allclose(rep.poly_coeffs[0], rep.f0, rtol=0, atol=1e-10 * scale)


def test_linearization_subset_expansion():
    # f(eps) = prod_l g_l (W_l + eps dW_l) x; c_k sums products with k layers replaced by dW
    net, ds = setup(width=2, seed=5)
    x = ds.x[0]
    _, deltas, _, _, _ = single_step(net, x, ds.y[0])
    rep = linearization_probe(net, deltas, x)
    g = np.prod(net.scales.g)
    want = np.zeros((4, 3))
    for mask in itertools.product((0, 1), repeat=3):
        h = x
        for l, use_delta in enumerate(mask):
            h = (deltas[l] if use_delta else net.weights[l]) @ h
        want[sum(mask)] += g * h
    np.testing.assert_allclose(rep.poly_coeffs, want, rtol=1e-9, atol=1e-12)


def test_grad_change_matches_finite_difference_jacobian():
    # for a small step the Jacobian change is its directional derivative along the step
    net, ds = setup(width=16, r=0.25, seed=1)
    x = ds.x[0]
    _, deltas, _, _, _ = single_step(net, x, ds.y[0], global_eta=1e-3)
    rep = linearization_probe(net, deltas, x)
    eps = 1e-3
    jp = _output_jacobian(perturbed(net, deltas, eps), x)
    jm = _output_jacobian(perturbed(net, deltas, -eps), x)
    fd2 = sum(float(np.sum(((a - b) / (2 * eps)) ** 2)) for ka, kb in zip(jp, jm) for a, b in zip(ka, kb))
    assert rep.grad_change_abs == pytest.approx(math.sqrt(fd2), rel=0.05)


def test_linearization_rejects_relu():
    net, ds = setup(activation="relu")
    _, deltas, _, _, _ = single_step(net, ds.x[0], ds.y[0])
    with pytest.raises(ValueError, match="linear activation"):
        linearization_probe(net, deltas, ds.x[0])
    with pytest.raises(ValueError, match="linear activation"):
        linearization_batch(single_step_batch(net, ds.x, ds.y))


def test_alignment_identity_without_update():
    net, ds = setup()
    ft = forward(net, ds.x[0])
    bt = backward(net, ft, loss_and_grad(ds.y[0], ft.output)[1])
    rep = alignment_magnification(net, net.copy(), bt)
    for ratio in rep.ratios:
        assert float(ratio) == pytest.approx(1.0, abs=1e-15)
    assert not any(rep.degenerate)


def test_alignment_grows_off_scale():
    readout = []
    for n in (64, 256, 1024):
        spec = NetSpec(3, 10, n, 10)
        net = init_network(spec, layer_scales("mup", RichnessSpec(0.75, True), spec), RngState(0, 2))
        ds = gaussian_task(spec, 20, RngState(0, 1))
        ratios = batch_alignment(single_step_batch(net, ds.x, ds.y, 1.0))
        readout.append(float(np.exp(np.mean(np.log(ratios[-1])))))
    assert readout[0] < readout[1] < readout[2]


@pytest.mark.parametrize("activation", ["linear", "relu"])
@pytest.mark.parametrize("gauge", ["mup", "stp", "standard"])
def test_batch_route_matches_explicit_route(activation, gauge):
    net, ds = setup(width=12, depth=4, activation=activation, gauge=gauge, r=0.3, seed=7, n=5)
    step = single_step_batch(net, ds.x, ds.y, 0.7)
    crit = batch_criteria(step)
    align = batch_alignment(step)
    lin = linearization_batch(step) if activation == "linear" else None
    for s in range(5):
        net1, deltas, ft0, ft1, bt0 = single_step(net, ds.x[s], ds.y[s], 0.7)
        for l in range(1, net.depth + 1):
            np.testing.assert_allclose(step.delta_matrix(l, s), deltas[l - 1], rtol=1e-12, atol=1e-15)
        dec = decompose_update(net, deltas, ft0, ft1)
        ref = measure_criteria(bt0, dec, ft0)
        for name in ("rep_update_norm", "uuc_value", "layer_contrib_norm", "rep_norm", "rep_grad_norm"):
            for a, b in zip(getattr(crit, name), getattr(ref, name)):
                assert a[s] == pytest.approx(float(b), rel=1e-10, abs=1e-13)
        for l in range(1, net.depth + 1):
            np.testing.assert_allclose(step.dec.total[l - 1][s], dec.total[l - 1], rtol=1e-10, atol=1e-13)
            np.testing.assert_allclose(step.dec.interaction_term[l - 1][s], dec.interaction_term[l - 1],
                                       rtol=1e-10, atol=1e-13)
        _, dl1 = loss_and_grad(ds.y[s], ft1.output)
        ar = alignment_magnification(net, net1, backward(net1, ft1, dl1))
        for a, b in zip(align, ar.ratios):
            assert a[s] == pytest.approx(float(b), rel=1e-10)
        if lin is not None:
            rep = linearization_probe(net, deltas, ds.x[s])
            np.testing.assert_allclose(lin.coeffs[:, s], rep.poly_coeffs, rtol=1e-9, atol=1e-12)
            assert lin.grad_change_abs[s] == pytest.approx(rep.grad_change_abs, rel=1e-9)
            assert lin.grad_change_rel[s] == pytest.approx(rep.grad_change_rel, rel=1e-9)
            assert lin.curvature_ratio[s] == pytest.approx(rep.curvature_ratio, rel=1e-8)
