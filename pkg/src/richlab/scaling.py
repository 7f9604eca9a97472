"""Width/richness sweeps, exponent fits and stability classification."""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .network import (Dataset, Network, OptimizerConfig, forward, gaussian_task,
                      init_network, is_divergent_loss, loss_and_grad, train)
from .numkit import RngState, ScalingFit, loglog_fit
from .parameterization import GaugeId, NetSpec, RichnessSpec, layer_scales
from .probes import (batch_alignment, batch_criteria, linearization_batch,
                     single_step_batch)

# quantities measured per layer from a single-step probe
LAYER_QUANTITIES = ("rep_norm", "rep_update_norm", "uuc", "layer_contrib_norm",
                    "rep_grad_norm", "order_param", "alignment_ratio")
# projection ratios; layer 1 has no passthrough or interaction so they start at 2
RATIO_QUANTITIES = ("layer_ratio", "passthrough_ratio", "interaction_ratio",
                    "layer_ratio_signed", "passthrough_ratio_signed", "interaction_ratio_signed")
NETWORK_QUANTITIES = ("init_output_norm", "loss")
LINEARIZATION_QUANTITIES = ("grad_change_rel", "grad_change_abs", "curvature_ratio",
                            "gradient_term", "curvature_term")
STABILITY_QUANTITIES = ("final_loss", "loss_ratio", "time_to_halve", "time_to_target",
                        "verdict", "diverged")

PER_LAYER = set(LAYER_QUANTITIES) | set(RATIO_QUANTITIES)
ALL_QUANTITIES = PER_LAYER | set(NETWORK_QUANTITIES) | set(LINEARIZATION_QUANTITIES) | set(STABILITY_QUANTITIES)

TASKS = {"gaussian_linear": "linear", "gaussian_relu": "relu"}


def parse_quantity(name: str) -> tuple[str, int | None]:
    """``"uuc.l2"`` -> ``("uuc", 2)``; ``"uuc"`` -> ``("uuc", None)`` (all layers).

    Raises ``KeyError`` carrying the offending name for unknown quantities.
    """
    base, _, suffix = name.partition(".")
    if base not in ALL_QUANTITIES:
        raise KeyError(name)
    if not suffix:
        return base, None
    if base not in PER_LAYER or not suffix.startswith("l") or not suffix[1:].isdigit() \
            or int(suffix[1:]) < 1:
        raise KeyError(name)
    return base, int(suffix[1:])


def quantity_key(base: str, layer: int) -> str:
    return f"{base}.l{layer}" if layer else base


@dataclass(frozen=True)
class MeasurementRecord:
    run_id: str
    gauge: str
    r: float
    width: int
    seed: int
    step: int
    quantity: str
    layer: int
    value: float
    diverged: bool = False

    @property
    def key(self) -> str:
        return quantity_key(self.quantity, self.layer)

    def sort_key(self):
        return (self.r, self.width, self.seed, self.step, self.quantity, self.layer)


@dataclass(frozen=True)
class SweepConfig:
    gauge: GaugeId = GaugeId.MUP
    richness: tuple[float, ...] = (0.0, 0.25, 0.5)
    widths: tuple[int, ...] = (64, 128, 256, 512, 1024, 2048)
    seeds: int = 20
    samples: int = 50
    task: str = "gaussian_linear"
    depth: int = 3
    d_in: int = 10
    d_out: int = 10
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(0.1, 0.9, 1))
    probe_eta: float = 1.0
    probe_steps: tuple[int, ...] = (0,)
    train_steps: int = 50
    n_train: int | None = None
    quantities: tuple[str, ...] = ()
    root_seed: int = 0
    off_scale_allowed: bool = False
    fit_drop_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "gauge", GaugeId.parse(self.gauge))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if list(self.widths) != sorted(set(self.widths)) or not self.widths:
            raise ValueError("widths must be nonempty and strictly increasing")
        if self.seeds < 1 or self.samples < 1:
            raise ValueError("seeds and samples must be >= 1")
        if any(s < 0 for s in self.probe_steps):
            raise ValueError("probe steps must be >= 0")
        for r in self.richness:
            RichnessSpec(r, self.off_scale_allowed)
        for q in self.quantities:
            _, layer = parse_quantity(q)
            if layer is not None and layer > self.depth:
                raise ValueError(f"quantity {q} names a layer beyond depth {self.depth}")

    @property
    def activation(self) -> str:
        return TASKS[self.task]

    @property
    def dataset_size(self) -> int:
        return self.n_train or self.samples

    def net_spec(self, width: int) -> NetSpec:
        return NetSpec(self.depth, self.d_in, width, self.d_out, self.activation)

    def cells(self) -> list[tuple[float, int, int]]:
        return [(r, n, s) for r in self.richness for n in self.widths for s in range(self.seeds)]


def cell_rngs(root_seed: int, seed: int, width: int) -> dict[str, RngState]:
    """Streams for one cell. Data depends on the seed only; draws depend on
    (seed, width) and never on gauge or richness."""
    root = RngState(root_seed)
    return {"data": root.child(seed, 1), "init": root.child(seed, 2, width),
            "batches": root.child(seed, 3, width)}


# --------------------------------------------------------------------------
# stability


class Verdict(str, enum.Enum):
    CONVERGING = "converging"
    STALLED = "stalled"
    DIVERGING = "diverging"

    @property
    def code(self) -> int:
        return {"converging": 0, "stalled": 1, "diverging": 2}[self.value]


@dataclass(frozen=True)
class StabilityVerdict:
    verdict: Verdict
    time_to_halve: int | None


def classify_stability(losses, width: int | None = None, diverged: bool = False) -> StabilityVerdict:
    """Diverging if flagged or any loss is non-finite/above threshold;
    converging once the loss reaches half its initial value; stalled otherwise."""
    losses = [float(v) for v in losses]
    if not losses:
        raise ValueError("empty loss history")
    if diverged or any(is_divergent_loss(v) for v in losses):
        return StabilityVerdict(Verdict.DIVERGING, None)
    first = losses[0]
    for t, v in enumerate(losses):
        if v <= 0.5 * first:
            return StabilityVerdict(Verdict.CONVERGING, t)
    return StabilityVerdict(Verdict.STALLED, None)


def time_to_target(losses, target: float) -> int | None:
    for t, v in enumerate(losses):
        if math.isfinite(v) and v <= target:
            return t
    return None


# --------------------------------------------------------------------------
# cell execution


def _geomean_abs(values) -> tuple[float, bool]:
    v = np.abs(np.asarray(values, dtype=float))
    if not np.all(np.isfinite(v)):
        return math.nan, True
    with np.errstate(divide="ignore"):
        return float(np.exp(np.mean(np.log(v)))), False


def _probe_values(net: Network, x, y, wanted: dict[str, set[int] | None], probe_eta: float,
                  step_index: int) -> dict[tuple[str, int], np.ndarray]:
    """Per-sample arrays for every requested (quantity, layer)."""
    L = net.depth
    step = single_step_batch(net, x, y, probe_eta)
    out: dict[tuple[str, int], np.ndarray] = {}

    def layers(base, first=1):
        sel = wanted.get(base, ())
        rng = range(first, L + 1)
        return list(rng) if sel is None else [l for l in sorted(sel) if l in rng]

    need = lambda base: base in wanted
    if any(need(b) for b in LAYER_QUANTITIES if b != "alignment_ratio"):
        cr = batch_criteria(step)
        table = {"rep_norm": cr.rep_norm, "rep_update_norm": cr.rep_update_norm,
                 "uuc": cr.uuc_value, "layer_contrib_norm": cr.layer_contrib_norm,
                 "rep_grad_norm": cr.rep_grad_norm, "order_param": cr.order_parameter}
        for base, vals in table.items():
            if need(base):
                for l in layers(base):
                    out[(base, l)] = vals[l - 1]
    if need("alignment_ratio"):
        al = batch_alignment(step)
        for l in layers("alignment_ratio"):
            out[("alignment_ratio", l)] = al[l - 1]
    for base in RATIO_QUANTITIES:
        if need(base):
            kind = base.split("_")[0]
            for l in layers(base, first=2):
                out[(base, l)] = step.dec.ratios(l)[kind]
    if need("init_output_norm") and step_index == 0:
        out[("init_output_norm", 0)] = np.sqrt(np.sum(step.reps0[L] ** 2, axis=-1))
    if need("loss"):
        out[("loss", 0)] = step.loss0
    if any(need(b) for b in LINEARIZATION_QUANTITIES) and net.spec.activation == "linear":
        lin = linearization_batch(step)
        table = {"grad_change_rel": lin.grad_change_rel, "grad_change_abs": lin.grad_change_abs,
                 "curvature_ratio": lin.curvature_ratio,
                 "gradient_term": np.sqrt(np.sum(lin.gradient_term ** 2, axis=-1)),
                 "curvature_term": np.sqrt(np.sum(lin.curvature_term ** 2, axis=-1))}
        for base, vals in table.items():
            if need(base):
                out[(base, 0)] = vals
    return out


def _wanted(quantities) -> dict[str, set[int] | None]:
    wanted: dict[str, set[int] | None] = {}
    for q in quantities:
        base, layer = parse_quantity(q)
        if layer is None or wanted.get(base, set()) is None:
            wanted[base] = None
        else:
            wanted.setdefault(base, set()).add(layer)
    return wanted


def run_cell(cfg: SweepConfig, r: float, width: int, seed: int) -> list[MeasurementRecord]:
    wanted = _wanted(cfg.quantities)
    if not wanted:
        return []
    spec = cfg.net_spec(width)
    scales = layer_scales(cfg.gauge, RichnessSpec(r, cfg.off_scale_allowed), spec)
    rngs = cell_rngs(cfg.root_seed, seed, width)
    data = gaussian_task(spec, max(cfg.dataset_size, cfg.samples), rngs["data"])
    net = init_network(spec, scales, rngs["init"])
    run_id = f"{cfg.gauge.value}-r{r:g}-n{width}-s{seed}"
    recs: list[MeasurementRecord] = []

    def emit(step, base, layer, value, diverged=False):
        recs.append(MeasurementRecord(run_id, cfg.gauge.value, float(r), width, seed, step,
                                      base, layer, float(value), bool(diverged)))

    stab = [b for b in STABILITY_QUANTITIES if b in wanted]
    if stab:
        train_data = Dataset(data.x[:cfg.dataset_size], data.y[:cfg.dataset_size])
        hist = train(net, train_data, cfg.train_steps, cfg.optimizer, rngs["batches"])
        losses = list(hist.losses)
        if not hist.diverged and hist.net is not None and cfg.train_steps > 0:
            final, _ = loss_and_grad(train_data.y, forward(hist.net, train_data.x).output)
            losses.append(final)
        verdict = classify_stability(losses, width, diverged=hist.diverged)
        div = verdict.verdict is Verdict.DIVERGING
        step = cfg.train_steps
        label_loss = 0.5 * float(np.mean(np.sum(train_data.y ** 2, axis=-1)))
        values = {"final_loss": losses[-1] if losses else math.nan,
                  "loss_ratio": (losses[-1] / losses[0]) if losses else math.nan,
                  "verdict": verdict.verdict.code, "diverged": int(div)}
        if verdict.time_to_halve is not None:
            values["time_to_halve"] = verdict.time_to_halve
        if not div:
            ttt = time_to_target(losses, 0.5 * label_loss)
            if ttt is not None:
                values["time_to_target"] = ttt
        for base in stab:
            if base in values:
                v = values[base]
                emit(step, base, 0, v, div and base not in ("verdict", "diverged"))

    probe_wanted = {k: v for k, v in wanted.items() if k not in STABILITY_QUANTITIES}
    if probe_wanted:
        steps = sorted(set(cfg.probe_steps))
        nets: dict[int, Network] = {}
        if steps[-1] == 0:
            nets[0] = net
        else:
            hist = train(net, Dataset(data.x[:cfg.dataset_size], data.y[:cfg.dataset_size]),
                         steps[-1], cfg.optimizer, rngs["batches"],
                         on_step=lambda t, nt: nets.__setitem__(t, nt) if t in steps else None)
        x, y = data.x[:cfg.samples], data.y[:cfg.samples]
        for t in steps:
            nt = nets.get(t)
            if nt is None or nt.diverged:
                for base, sel in probe_wanted.items():
                    emit(t, base, 0, math.nan, True)
                continue
            vals = _probe_values(nt, x, y, probe_wanted, cfg.probe_eta, t)
            for (base, layer), arr in vals.items():
                if base.endswith("_signed"):
                    a = np.asarray(arr, dtype=float)
                    v, bad = float(np.mean(a)), not np.all(np.isfinite(a))
                else:
                    v, bad = _geomean_abs(arr)
                emit(t, base, layer, v, bad)
    return recs


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list[MeasurementRecord]:
    """Run every (r, width, seed) cell; output is sorted and independent of ``jobs``."""
    if not cfg.quantities:
        return []
    cells = cfg.cells()
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            chunks = list(ex.map(_run_cell_args, [(cfg, *c) for c in cells]))
    else:
        chunks = [run_cell(cfg, *c) for c in cells]
    recs = [rec for chunk in chunks for rec in chunk]
    recs.sort(key=MeasurementRecord.sort_key)
    return recs


def default_jobs(flag: int | None = None) -> int:
    env = os.environ.get("RICHLAB_JOBS")
    if env:
        return max(1, int(env))
    return max(1, flag or 1)


# --------------------------------------------------------------------------
# fitting


def width_means(records, quantity: str, r: float | None = None, step: int | None = None):
    """Per-width geometric means of |value| over non-diverged records.

    Returns ``(means, n_diverged)`` with ``means`` a sorted list of (width, mean).
    """
    base, layer = parse_quantity(quantity)
    layer = layer or 0
    sel = [rec for rec in records
           if rec.quantity == base and rec.layer == layer
           and (r is None or math.isclose(rec.r, r, abs_tol=1e-12))]
    if step is None and sel:
        step = min(rec.step for rec in sel)
    sel = [rec for rec in sel if rec.step == step]
    n_div = sum(1 for rec in sel if rec.diverged)
    by_width: dict[int, list[float]] = {}
    for rec in sel:
        if rec.diverged or not math.isfinite(rec.value) or rec.value == 0:
            continue
        by_width.setdefault(rec.width, []).append(math.log(abs(rec.value)))
    means = [(w, math.exp(sum(v) / len(v))) for w, v in sorted(by_width.items())]
    return means, n_div


def fit_exponents(records, quantity: str, r: float | None = None, step: int | None = None,
                  drop_fraction: float = 0.25) -> ScalingFit:
    """Log-log slope of the per-width geometric means; the smallest
    ``ceil(drop_fraction * m)`` widths are dropped while at least 3 remain."""
    means, _ = width_means(records, quantity, r, step)
    if len(means) < 3:
        raise ValueError(f"insufficient data for {quantity} at r={r}: {len(means)} widths")
    drop = min(math.ceil(drop_fraction * len(means)), len(means) - 3) if drop_fraction > 0 else 0
    return loglog_fit(means[drop:])


@dataclass(frozen=True)
class ExponentRow:
    quantity: str
    r: float
    step: int
    fit: ScalingFit | None
    n_diverged: int


def fit_table(records, drop_fraction: float = 0.25) -> list[ExponentRow]:
    groups = sorted({(rec.key, rec.r, rec.step) for rec in records})
    rows = []
    for key, r, step in groups:
        if parse_quantity(key)[0] in ("verdict", "diverged"):
            continue
        _, n_div = width_means(records, key, r, step)
        try:
            fit = fit_exponents(records, key, r, step, drop_fraction)
        except ValueError:
            fit = None
        rows.append(ExponentRow(key, r, step, fit, n_div))
    return rows


def divergence_rates(records, r: float, step: int | None = None) -> dict[int, float]:
    """Fraction of seeds flagged diverged, per width, from ``diverged`` records."""
    out: dict[int, list[int]] = {}
    for rec in records:
        if rec.quantity == "diverged" and math.isclose(rec.r, r, abs_tol=1e-12) \
                and (step is None or rec.step == step):
            out.setdefault(rec.width, []).append(int(rec.value))
    return {w: sum(v) / len(v) for w, v in sorted(out.items())}


def with_gauge(cfg: SweepConfig, gauge) -> SweepConfig:
    return replace(cfg, gauge=GaugeId.parse(gauge))
