"""Trajectory comparisons across gauges and against rescaled emulation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import OptimizerConfig, gaussian_task, init_network, train
from .numkit import RngState
from .parameterization import (GaugeId, NetSpec, RichnessSpec, emulated_scales,
                               layer_scales, rescaled_emulation)

ON_SCALE_GAUGES = (GaugeId.MUP, GaugeId.RESCALING, GaugeId.STP)


@dataclass
class Trajectory:
    outputs: list[np.ndarray]   # h_L on the evaluation inputs after t = 0 .. steps updates
    losses: list[float]
    diverged: bool


def output_trajectory(spec: NetSpec, scales, opt: OptimizerConfig, steps: int, seed: int,
                      n_data: int = 50) -> Trajectory:
    root = RngState(seed)
    data = gaussian_task(spec, n_data, root.child(1))
    net = init_network(spec, scales, root.child(2, spec.width))
    hist = train(net, data, steps, opt, root.child(3, spec.width),
                 record_steps=range(steps + 1))
    outs = [hist.traces[t].output for t in sorted(hist.traces)]
    return Trajectory(outs, hist.losses, hist.diverged)


def max_relative_deviation(a: Trajectory, b: Trajectory) -> float:
    """Max over time of |a_t - b_t|_F / |b_t|_F."""
    if len(a.outputs) != len(b.outputs):
        return float("inf")
    dev = 0.0
    for oa, ob in zip(a.outputs, b.outputs):
        den = float(np.linalg.norm(ob))
        num = float(np.linalg.norm(oa - ob))
        dev = max(dev, num / den if den > 0 else (0.0 if num == 0 else float("inf")))
    return dev


def default_spec(width: int, activation: str = "linear") -> NetSpec:
    return NetSpec(3, 10, width, 10, activation)


def gauge_deviation(r: float, width: int, seed: int, steps: int,
                    opt: OptimizerConfig | None = None, spec: NetSpec | None = None) -> dict[str, float]:
    """Deviation of the Rescaling and STP trajectories from the muP one."""
    opt = opt or OptimizerConfig(0.1, 0.9, 1)
    spec = spec or default_spec(width)
    rich = RichnessSpec(r)
    trajs = {g: output_trajectory(spec, layer_scales(g, rich, spec), opt, steps, seed)
             for g in ON_SCALE_GAUGES}
    ref = trajs[GaugeId.MUP]
    return {g.value: max_relative_deviation(trajs[g], ref) for g in ON_SCALE_GAUGES if g is not GaugeId.MUP}


def emulation_deviation(base_r: float, target_r: float, width: int, seed: int, steps: int,
                        opt: OptimizerConfig | None = None, spec: NetSpec | None = None) -> float:
    """Train a muP network built at ``base_r`` with the output divided by
    ``n**(target_r - base_r)`` and the global learning rate multiplied by its
    square; compare with muP built directly at ``target_r``."""
    opt = opt or OptimizerConfig(0.1, 0.9, 1)
    spec = spec or default_spec(width)
    gamma, lr_factor = rescaled_emulation(base_r, target_r, spec)
    base = layer_scales(GaugeId.MUP, RichnessSpec(base_r), spec)
    emulated = output_trajectory(spec, emulated_scales(base, gamma, 1.0),
                                 replace(opt, global_eta=opt.global_eta * lr_factor), steps, seed)
    target = output_trajectory(spec, layer_scales(GaugeId.MUP, RichnessSpec(target_r), spec),
                               opt, steps, seed)
    return max_relative_deviation(emulated, target)
