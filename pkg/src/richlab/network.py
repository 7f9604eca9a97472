"""Deep linear / ReLU MLP with gradient multipliers and layerwise learning rates.

Layer ``l`` (1-based) computes ``z_l = g_l * W_l @ h_{l-1}``; hidden layers apply
the activation, the readout is always linear. Python lists are 0-based, so
``net.weights[l - 1]`` is ``W_l`` while ``trace.reps[l]`` is ``h_l``.

Inputs may be a single vector of shape ``(n0,)`` or a batch ``(B, n0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import DTYPE, RngState
from .parameterization import LayerScales, NetSpec

DIVERGENCE_LOSS = 1e12


@dataclass
class Network:
    spec: NetSpec
    scales: LayerScales
    weights: list[np.ndarray]
    base_draws: list[np.ndarray]
    diverged: bool = False

    def copy(self) -> "Network":
        return Network(self.spec, self.scales, [w.copy() for w in self.weights],
                       self.base_draws, self.diverged)

    def with_scales(self, scales: LayerScales) -> "Network":
        """Same weights, different scales (e.g. a global learning-rate fold)."""
        return Network(self.spec, scales, [w.copy() for w in self.weights],
                       self.base_draws, self.diverged)

    @property
    def depth(self) -> int:
        return self.spec.depth


@dataclass
class ForwardTrace:
    reps: list[np.ndarray]          # h_0 .. h_L
    preacts: list[np.ndarray]       # z_1 .. z_L (index l - 1); equal to reps[l] when linear
    diverged: bool = False

    @property
    def output(self) -> np.ndarray:
        return self.reps[-1]


@dataclass
class BackwardTrace:
    rep_grads: list[np.ndarray]     # dL/dh_0 .. dL/dh_L
    preact_grads: list[np.ndarray]  # dL/dz_1 .. dL/dz_L (index l - 1)
    weight_grads: list[np.ndarray]  # dL/dW_1 .. dL/dW_L (index l - 1)


@dataclass(frozen=True)
class OptimizerConfig:
    global_eta: float = 0.1
    beta: float = 0.9
    batch_size: int = 1

    def __post_init__(self):
        if not self.global_eta >= 0:
            raise ValueError("global_eta must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: np.ndarray


@dataclass
class Dataset:
    x: np.ndarray  # (N, n0)
    y: np.ndarray  # (N, nL)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], self.y[i])

    @classmethod
    def from_samples(cls, samples) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("data must be nonempty")
        return cls(np.stack([s.x for s in samples]).astype(DTYPE),
                   np.stack([s.y for s in samples]).astype(DTYPE))


def gaussian_task(spec: NetSpec, n_samples: int, rng: RngState) -> Dataset:
    """Unit Gaussian inputs labelled by a random linear teacher.

    Labels are ``T x / sqrt(n0)`` with a unit Gaussian ``T``, so their entries
    are order one as well.
    """
    gen = rng.generator()
    x = gen.standard_normal((n_samples, spec.d_in))
    teacher = gen.standard_normal((spec.d_out, spec.d_in))
    y = x @ teacher.T / math.sqrt(spec.d_in)
    return Dataset(x, y)


def init_network(spec: NetSpec, scales: LayerScales, rng: RngState) -> Network:
    if scales.depth != spec.depth:
        raise ValueError("scales depth does not match network depth")
    gen = rng.generator()
    dims = spec.dims
    draws = [gen.standard_normal((dims[l], dims[l - 1])) for l in range(1, spec.depth + 1)]
    weights = [s * z for s, z in zip(scales.sigma, draws)]
    return Network(spec, scales, weights, draws)


def _relu(z):
    return np.maximum(z, 0.0)


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != net.spec.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != {net.spec.d_in}")
    relu = net.spec.activation == "relu"
    L = net.depth
    reps, preacts = [x], []
    h = x
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(1, L + 1):
            z = net.scales.g[l - 1] * (h @ net.weights[l - 1].T)
            preacts.append(z)
            h = _relu(z) if (relu and l < L) else z
            reps.append(h)
    return ForwardTrace(reps, preacts, diverged=not np.all(np.isfinite(h)))


def loss_and_grad(y: np.ndarray, h_out: np.ndarray) -> tuple[float, np.ndarray]:
    """Half squared error, averaged over the batch when inputs are 2-D.

    The returned gradient is that of the (averaged) loss, i.e. ``h - y`` for a
    single sample and ``(h - y) / B`` per row for a batch of ``B``.
    """
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != h_out.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {h_out.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        err = h_out - y
        if err.ndim == 1:
            return 0.5 * float(err @ err), err
        b = err.shape[0]
        return 0.5 * float(np.sum(err * err)) / b, err / b


def backward(net: Network, trace: ForwardTrace, grad_out: np.ndarray) -> BackwardTrace:
    relu = net.spec.activation == "relu"
    L = net.depth
    rep_grads = [None] * (L + 1)
    preact_grads = [None] * L
    weight_grads = [None] * L
    rep_grads[L] = np.asarray(grad_out, dtype=DTYPE)
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(L, 0, -1):
            dz = rep_grads[l]
            if relu and l < L:
                dz = dz * (trace.preacts[l - 1] > 0)
            preact_grads[l - 1] = dz
            g = net.scales.g[l - 1]
            w = net.weights[l - 1]
            h_prev = trace.reps[l - 1]
            if dz.ndim == 1:
                weight_grads[l - 1] = g * np.outer(dz, h_prev)
            else:
                weight_grads[l - 1] = g * (dz.T @ h_prev)
            rep_grads[l - 1] = g * (dz @ w)
    return BackwardTrace(rep_grads, preact_grads, weight_grads)


def sgd_step(net: Network, bt: BackwardTrace, opt: OptimizerConfig,
             velocity: list[np.ndarray] | None = None):
    """One heavy-ball step; returns ``(new_net, deltas, velocity)``.

    ``velocity`` is updated as ``v <- beta * v + grad`` and the applied change
    is ``-global_eta * eta_l * v``.
    """
    if velocity is None:
        velocity = [np.zeros_like(w) for w in net.weights]
    new_v, deltas, new_w = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (w, v, gw) in enumerate(zip(net.weights, velocity, bt.weight_grads)):
            if gw.shape != w.shape:
                raise ValueError(f"layer {l + 1}: gradient shape {gw.shape} != {w.shape}")
            v = opt.beta * v + gw if opt.beta else gw.copy()
            dw = (-opt.global_eta * net.scales.eta[l]) * v
            new_v.append(v)
            deltas.append(dw)
            new_w.append(w + dw)
    diverged = net.diverged or not all(np.all(np.isfinite(w)) for w in new_w)
    return Network(net.spec, net.scales, new_w, net.base_draws, diverged), deltas, new_v


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    traces: dict[int, ForwardTrace] = field(default_factory=dict)
    diverged_at: int | None = None
    net: Network | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def is_divergent_loss(loss: float) -> bool:
    return not math.isfinite(loss) or loss > DIVERGENCE_LOSS


def train(net: Network, data: Dataset, steps: int, opt: OptimizerConfig,
          rng: RngState | None = None, record_steps=(), eval_x: np.ndarray | None = None,
          on_step=None) -> TrainHistory:
    """Minibatch SGD with momentum.

    Losses are minibatch losses taken before each update. A batch size of at
    least ``len(data)`` means full-batch descent; smaller batches are drawn
    uniformly with replacement from ``rng``. Forward traces on ``eval_x``
    (default: the whole dataset) are stored for steps in ``record_steps``,
    where step ``t`` means "after ``t`` updates". ``on_step(t, net)`` is called
    with the network before update ``t`` and once more after the last update.
    """
    if isinstance(data, (list, tuple)):
        data = Dataset.from_samples(data)
    if len(data) == 0:
        raise ValueError("data must be nonempty")
    gen = (rng or RngState(0)).generator()
    record_steps = set(record_steps)
    hist = TrainHistory()
    xe = data.x if eval_x is None else eval_x
    velocity = None
    full = opt.batch_size >= len(data)
    for t in range(steps):
        if t in record_steps:
            hist.traces[t] = forward(net, xe)
        if on_step is not None:
            on_step(t, net)
        if full:
            xb, yb = data.x, data.y
        else:
            idx = gen.integers(0, len(data), size=opt.batch_size)
            xb, yb = data.x[idx], data.y[idx]
        ft = forward(net, xb)
        loss, dl = loss_and_grad(yb, ft.output)
        hist.steps.append(t)
        hist.losses.append(loss)
        if ft.diverged or is_divergent_loss(loss):
            hist.diverged_at = t
            net = Network(net.spec, net.scales, net.weights, net.base_draws, True)
            break
        bt = backward(net, ft, dl)
        net, _, velocity = sgd_step(net, bt, opt, velocity)
        if net.diverged:
            hist.diverged_at = t
            break
    else:
        if steps in record_steps:
            hist.traces[steps] = forward(net, xe)
        if on_step is not None:
            on_step(steps, net)
    hist.net = net
    return hist
