"""Single-step diagnostics of a network update.

Two routes are provided. The explicit functions (``decompose_update``,
``measure_criteria``, ``linearization_probe``, ``alignment_magnification``)
work from materialized weight updates and traces. ``single_step_batch`` and
``linearization_batch`` compute the same quantities for many independent
single-sample steps at once using the rank-1 structure of each update; the
sweep harness uses these, and the test-suite checks them against the explicit
route.

Parameter-space gradients are taken with respect to learning-rate-scaled
parameters ``W_l / sqrt(eta_l)``, under which every gauge has unit learning
rate. In the muP gauge (``eta_l = 1``) this is the plain gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import (BackwardTrace, ForwardTrace, Network, backward, forward,
                      loss_and_grad)


def _rowdot(a, b):
    return np.sum(a * b, axis=-1)


def _norm(a):
    return np.sqrt(_rowdot(a, a))


def _proj_ratio(term, total):
    # signed length of term's projection on total, over |total|
    tt = _rowdot(total, total)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _rowdot(term, total) / tt


@dataclass
class StepDecomposition:
    """Per-layer terms of one update, index ``l - 1`` for layer ``l``.

    For ReLU networks the terms decompose the preactivation change (exact),
    and ``approximate`` is set because that is not the representation change.
    """

    layer_term: list[np.ndarray]
    passthrough_term: list[np.ndarray]
    interaction_term: list[np.ndarray]
    total: list[np.ndarray]
    rep_delta: list[np.ndarray]
    approximate: bool = False

    @property
    def depth(self) -> int:
        return len(self.total)

    def ratios(self, layer: int) -> dict[str, np.ndarray]:
        tot = self.total[layer - 1]
        return {"layer": _proj_ratio(self.layer_term[layer - 1], tot),
                "passthrough": _proj_ratio(self.passthrough_term[layer - 1], tot),
                "interaction": _proj_ratio(self.interaction_term[layer - 1], tot)}

    def residual(self, layer: int) -> np.ndarray:
        i = layer - 1
        return self.total[i] - (self.layer_term[i] + self.passthrough_term[i] + self.interaction_term[i])


def decompose_update(net_before: Network, deltas: list[np.ndarray],
                     trace_before: ForwardTrace, trace_after: ForwardTrace) -> StepDecomposition:
    x0, x1 = trace_before.reps[0], trace_after.reps[0]
    if x0.shape != x1.shape or not np.array_equal(x0, x1):
        raise ValueError("traces were computed on different inputs")
    if len(deltas) != net_before.depth or len(trace_before.reps) != net_before.depth + 1:
        raise ValueError("trace or update depth does not match network")
    lay, pas, inter, tot, rep = [], [], [], [], []
    for l in range(1, net_before.depth + 1):
        g = net_before.scales.g[l - 1]
        w, dw = net_before.weights[l - 1], deltas[l - 1]
        h_prev = trace_before.reps[l - 1]
        dh_prev = trace_after.reps[l - 1] - h_prev
        lay.append(g * (h_prev @ dw.T))
        pas.append(g * (dh_prev @ w.T))
        inter.append(g * (dh_prev @ dw.T))
        tot.append(trace_after.preacts[l - 1] - trace_before.preacts[l - 1])
        rep.append(trace_after.reps[l] - trace_before.reps[l])
    return StepDecomposition(lay, pas, inter, tot, rep,
                             approximate=net_before.spec.activation == "relu")


@dataclass
class CriteriaReport:
    """Per-layer magnitudes (index ``l - 1``). Arrays are per sample for batches."""

    rep_update_norm: list
    uuc_value: list
    layer_contrib_norm: list
    rep_norm: list
    rep_grad_norm: list

    @property
    def order_parameter(self) -> list:
        with np.errstate(divide="ignore", invalid="ignore"):
            return [np.asarray(a) / np.asarray(b) for a, b in zip(self.rep_update_norm, self.rep_norm)]


def measure_criteria(bt: BackwardTrace, dec: StepDecomposition, ft: ForwardTrace) -> CriteriaReport:
    L = dec.depth
    out = CriteriaReport([], [], [], [], [])
    for l in range(1, L + 1):
        dh = dec.rep_delta[l - 1]
        grad = bt.rep_grads[l]
        out.rep_update_norm.append(_norm(dh))
        out.uuc_value.append(np.abs(_rowdot(grad, dh)))
        out.layer_contrib_norm.append(_norm(dec.layer_term[l - 1]))
        out.rep_norm.append(_norm(ft.reps[l]))
        out.rep_grad_norm.append(_norm(grad))
    return out


# --------------------------------------------------------------------------
# linearization


def chebyshev_nodes(k: int) -> np.ndarray:
    j = np.arange(k)
    return np.cos(np.pi * (2 * j + 1) / (2 * k))


def _poly_coeffs(nodes: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Solve the Vandermonde system; ``values`` has nodes on axis 0."""
    v = np.vander(nodes, len(nodes), increasing=True)
    flat = values.reshape(len(nodes), -1)
    return np.linalg.solve(v, flat).reshape(values.shape)


@dataclass
class LinearizationReport:
    poly_coeffs: np.ndarray       # (L + 1, nL): f(x; theta0 + eps * dtheta) = sum_k c_k eps^k
    f0: np.ndarray                # direct forward value at theta0
    grad_change_abs: float
    grad_change_rel: float
    grad_norm0: float

    @property
    def gradient_term(self) -> np.ndarray:
        return self.poly_coeffs[1]

    @property
    def curvature_term(self) -> np.ndarray:
        return 2.0 * self.poly_coeffs[2] if len(self.poly_coeffs) > 2 else np.zeros_like(self.f0)

    @property
    def curvature_ratio(self) -> float:
        den = float(np.linalg.norm(self.gradient_term))
        num = float(np.linalg.norm(self.curvature_term))
        return num / den if den > 0 else math.nan


def _output_jacobian(net: Network, x: np.ndarray) -> list[list[np.ndarray]]:
    """Per output coordinate, per layer: d f_k / d(W_l / sqrt(eta_l))."""
    ft = forward(net, x)
    nl = net.spec.d_out
    jac = []
    for k in range(nl):
        e = np.zeros(nl)
        e[k] = 1.0
        bt = backward(net, ft, e)
        jac.append([gw * math.sqrt(eta) for gw, eta in zip(bt.weight_grads, net.scales.eta)])
    return jac


def perturbed(net: Network, deltas: list[np.ndarray], eps: float) -> Network:
    return Network(net.spec, net.scales, [w + eps * d for w, d in zip(net.weights, deltas)],
                   net.base_draws)


def linearization_probe(net: Network, deltas: list[np.ndarray], x: np.ndarray) -> LinearizationReport:
    """Taylor coefficients of ``eps -> f(x; theta0 + eps * deltas)`` and the
    relative change of the output gradient between ``theta0`` and ``theta0 + deltas``.

    The network is a degree-L polynomial in ``eps`` so interpolation at L + 1
    Chebyshev nodes is exact up to rounding.
    """
    if net.spec.activation != "linear":
        raise ValueError("probe requires linear activation")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("linearization_probe takes a single input vector")
    L = net.depth
    nodes = chebyshev_nodes(L + 1)
    values = np.stack([forward(perturbed(net, deltas, float(e)), x).output for e in nodes])
    coeffs = _poly_coeffs(nodes, values)
    f0 = forward(net, x).output

    j0 = _output_jacobian(net, x)
    j1 = _output_jacobian(perturbed(net, deltas, 1.0), x)
    diff2 = sum(float(np.sum((b - a) ** 2)) for ka, kb in zip(j0, j1) for a, b in zip(ka, kb))
    norm0 = math.sqrt(sum(float(np.sum(a * a)) for ka in j0 for a in ka))
    diff = math.sqrt(diff2)
    rel = diff / norm0 if norm0 > 0 else math.nan
    return LinearizationReport(coeffs, f0, diff, rel, norm0)


@dataclass
class AlignmentReport:
    ratios: list            # index l - 1
    degenerate: list


def alignment_magnification(net_before: Network, net_after: Network,
                            bt_new: BackwardTrace) -> AlignmentReport:
    """Per layer ``|(W + dW)^T v| / |W^T v|`` with ``v`` the new upstream gradient."""
    ratios, degen = [], []
    for l in range(1, net_before.depth + 1):
        v = bt_new.preact_grads[l - 1]
        num = _norm(v @ net_after.weights[l - 1])
        den = _norm(v @ net_before.weights[l - 1])
        bad = np.asarray(den == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios.append(np.where(bad, np.nan, num / np.where(bad, 1.0, den)))
        degen.append(bool(np.any(bad)))
    return AlignmentReport(ratios, degen)


def single_step(net: Network, x: np.ndarray, y: np.ndarray, global_eta: float = 1.0):
    """Explicit single-sample plain gradient step and all its artifacts.

    Returns ``(net_after, deltas, trace_before, trace_after, bt_before)``.
    """
    from .network import OptimizerConfig, sgd_step

    ft0 = forward(net, x)
    _, dl = loss_and_grad(y, ft0.output)
    bt0 = backward(net, ft0, dl)
    net1, deltas, _ = sgd_step(net, bt0, OptimizerConfig(global_eta=global_eta, beta=0.0))
    ft1 = forward(net1, x)
    return net1, deltas, ft0, ft1, bt0


# --------------------------------------------------------------------------
# vectorized per-sample probes


@dataclass
class BatchStep:
    """Independent single-sample steps taken from one network, one per row."""

    net: Network
    x: np.ndarray
    y: np.ndarray
    global_eta: float
    reps0: list = field(default_factory=list)
    preacts0: list = field(default_factory=list)
    reps1: list = field(default_factory=list)
    preacts1: list = field(default_factory=list)
    rep_grads: list = field(default_factory=list)     # dL/dh_l at theta0, l = 0..L
    dz: list = field(default_factory=list)            # dL/dz_l at theta0, index l - 1
    coupling: list = field(default_factory=list)      # global_eta * eta_l * g_l
    dec: StepDecomposition | None = None
    loss0: np.ndarray | None = None

    def delta_matrix(self, layer: int, row: int) -> np.ndarray:
        """Materialize the weight change of ``layer`` for sample ``row``."""
        c = self.coupling[layer - 1]
        return -c * np.outer(self.dz[layer - 1][row], self.reps0[layer - 1][row])


def single_step_batch(net: Network, x: np.ndarray, y: np.ndarray, global_eta: float = 1.0) -> BatchStep:
    """For each row ``s`` take one plain GD step on sample ``s`` alone and
    record the before/after traces and the update decomposition."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    relu = net.spec.activation == "relu"
    L = net.depth
    out = BatchStep(net, x, y, global_eta)
    ft0 = forward(net, x)
    out.reps0, out.preacts0 = ft0.reps, ft0.preacts
    with np.errstate(over="ignore", invalid="ignore"):
        err = ft0.output - y
        out.loss0 = 0.5 * _rowdot(err, err)
        bt = backward(net, ft0, err)   # per-row gradients; summed weight grads unused
    out.rep_grads = bt.rep_grads
    out.dz = bt.preact_grads
    out.coupling = [global_eta * e * g for e, g in zip(net.scales.eta, net.scales.g)]

    reps1, pre1 = [x], []
    lay, pas, inter, tot, rep = [], [], [], [], []
    h1 = x
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(1, L + 1):
            g = net.scales.g[l - 1]
            w = net.weights[l - 1]
            h0p = ft0.reps[l - 1]
            dh_prev = h1 - h0p
            cg = out.coupling[l - 1] * g      # dW h = -c * dz * (h0p . h)
            dz = out.dz[l - 1]
            layer_t = -cg * dz * _rowdot(h0p, h0p)[:, None]
            pass_t = g * (dh_prev @ w.T)
            inter_t = -cg * dz * _rowdot(h0p, dh_prev)[:, None]
            # after-step preactivation computed directly, independent of the terms
            z1 = g * (h1 @ w.T) - cg * dz * _rowdot(h0p, h1)[:, None]
            h1 = np.maximum(z1, 0.0) if (relu and l < L) else z1
            pre1.append(z1)
            reps1.append(h1)
            lay.append(layer_t)
            pas.append(pass_t)
            inter.append(inter_t)
            tot.append(z1 - ft0.preacts[l - 1])
            rep.append(h1 - ft0.reps[l])
    out.reps1, out.preacts1 = reps1, pre1
    out.dec = StepDecomposition(lay, pas, inter, tot, rep, approximate=relu)
    return out


def batch_criteria(step: BatchStep) -> CriteriaReport:
    ft = ForwardTrace(step.reps0, step.preacts0)
    bt = BackwardTrace(step.rep_grads, step.dz, [])
    return measure_criteria(bt, step.dec, ft)


def batch_alignment(step: BatchStep) -> list[np.ndarray]:
    """Per-layer magnification ratio for each sample's own step."""
    net = step.net
    L = net.depth
    y = step.y
    # second backward pass at theta1, per sample
    with np.errstate(over="ignore", invalid="ignore"):
        v = step.reps1[L] - y
        vs = [None] * L
        for l in range(L, 0, -1):
            if net.spec.activation == "relu" and l < L:
                v = v * (step.preacts1[l - 1] > 0)
            g = net.scales.g[l - 1]
            c = step.coupling[l - 1]
            w = net.weights[l - 1]
            # (W + dW)^T v with dW = -c dz (x) h0p
            vw = v @ w
            v_new = vw - c * _rowdot(v, step.dz[l - 1])[:, None] * step.reps0[l - 1]
            vs[l - 1] = (vw, v_new)
            v = g * v_new
        ratios = []
        for l in range(1, L + 1):
            vw, v_new = vs[l - 1]
            den = _norm(vw)
            ratios.append(np.where(den > 0, _norm(v_new) / np.where(den > 0, den, 1.0), np.nan))
    return ratios


@dataclass
class BatchLinearization:
    coeffs: np.ndarray          # (L + 1, S, nL)
    grad_change_abs: np.ndarray  # (S,)
    grad_change_rel: np.ndarray  # (S,)
    grad_norm0: np.ndarray      # (S,)

    @property
    def gradient_term(self) -> np.ndarray:
        return self.coeffs[1]

    @property
    def curvature_term(self) -> np.ndarray:
        return 2.0 * self.coeffs[2]

    @property
    def curvature_ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return _norm(self.curvature_term) / _norm(self.gradient_term)


def linearization_batch(step: BatchStep) -> BatchLinearization:
    """``linearization_probe`` for each row's own update, evaluated at its own input."""
    net = step.net
    if net.spec.activation != "linear":
        raise ValueError("probe requires linear activation")
    L = net.depth
    x = step.x
    g = net.scales.g
    c = step.coupling
    nodes = chebyshev_nodes(L + 1)
    vals = []
    with np.errstate(over="ignore", invalid="ignore"):
        for e in nodes:
            h = x
            for l in range(1, L + 1):
                h0p = step.reps0[l - 1]
                h = g[l - 1] * (h @ net.weights[l - 1].T) \
                    - e * c[l - 1] * g[l - 1] * step.dz[l - 1] * _rowdot(h0p, h)[:, None]
            vals.append(h)
        coeffs = _poly_coeffs(nodes, np.stack(vals))

        # output Jacobian blocks: d f_k / d W_l = g_l * B_l[k] (x) h_{l-1}
        # B_L = I, B_{l-1} = g_l B_l W_l  (at theta1: W_l + dW_l per sample)
        S = x.shape[0]
        nl = net.spec.d_out
        b0 = np.eye(nl)
        b1 = np.broadcast_to(np.eye(nl), (S, nl, nl))
        diff2 = np.zeros(S)
        norm2 = np.zeros(S)
        for l in range(L, 0, -1):
            a0 = step.reps0[l - 1]
            a1 = step.reps1[l - 1]
            scale = g[l - 1] ** 2 * net.scales.eta[l - 1]
            n00 = np.sum(b0 * b0)                               # sum_k |b0_k|^2
            n11 = np.sum(b1 * b1, axis=(1, 2))
            n10 = np.einsum("skj,kj->s", b1, b0)
            aa0, aa1, a10 = _rowdot(a0, a0), _rowdot(a1, a1), _rowdot(a1, a0)
            norm2 += scale * n00 * aa0
            diff2 += scale * (n11 * aa1 + n00 * aa0 - 2.0 * n10 * a10)
            if l > 1:
                w = net.weights[l - 1]
                b0_next = g[l - 1] * (b0 @ w)
                bw = g[l - 1] * (b1.reshape(S * nl, -1) @ w).reshape(S, nl, -1)
                bdz = np.einsum("skj,sj->sk", b1, step.dz[l - 1])
                b1 = bw - g[l - 1] * c[l - 1] * bdz[:, :, None] * a0[:, None, :]
                b0 = b0_next
    diff = np.sqrt(np.maximum(diff2, 0.0))
    norm0 = np.sqrt(norm2)
    return BatchLinearization(coeffs, diff, diff / norm0, norm0)
