"""Command-line front end.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PROBE_KEYS, ConfigError, load_text, parse_config
from .equivalence import emulation_deviation, gauge_deviation
from .network import backward, gaussian_task, init_network, loss_and_grad
from .parameterization import GaugeId, RichnessSpec, layer_scales, matches_richness
from .probes import (alignment_magnification, decompose_update, linearization_probe,
                     measure_criteria, single_step)
from .records import (config_hash, exponents_to_csv, read_records, records_to_csv,
                      write_manifest)
from .scaling import (STABILITY_QUANTITIES, MeasurementRecord, SweepConfig, cell_rngs,
                      default_jobs, fit_exponents, fit_table, parse_quantity, run_sweep,
                      width_means)
from .svgplot import loglog_svg

log = logging.getLogger("richlab")

STABILITY_GRID = (-0.25, 0.0, 0.25, 0.5, 0.75)
EQUIVALENCE_TOL = 1e-8


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_sweep_outputs(cfg: SweepConfig, text: str, out: Path, no_fit: bool, jobs: int) -> int:
    if not no_fit and len(cfg.widths) < 4:
        raise UsageError("need ≥ 4 widths for fits (pass --no-fit to skip fitting)")
    if not cfg.quantities:
        raise UsageError("config lists no quantities")
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(text)
    outputs = {"records": str(out / "records.csv")}
    if not no_fit:
        outputs["exponents"] = str(out / "exponents.csv")
    write_manifest(out / "manifest.json", cfg_hash=h, version=__version__, timestamp=_now(),
                   seeds=list(range(cfg.seeds)), outputs=outputs,
                   extra={"root_seed": cfg.root_seed})
    records = run_sweep(cfg, jobs=jobs)
    body = records_to_csv(records, h)
    (out / "records.csv").write_text(body, encoding="utf-8", newline="\n")
    if not no_fit:
        rows = fit_table(records, cfg.fit_drop_fraction)
        (out / "exponents.csv").write_text(exponents_to_csv(rows), encoding="utf-8", newline="\n")
        for row in rows:
            if row.fit is not None:
                print(f"{row.quantity:28s} r={row.r:+.2f} step={row.step:<3d} slope {row.fit}")
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_sweep(args) -> int:
    text = load_text(args.config)
    cfg, _ = parse_config(text, PROBE_KEYS)
    return _write_sweep_outputs(cfg, text, Path(args.out), args.no_fit, default_jobs(args.jobs))


def cmd_stability(args) -> int:
    text = load_text(args.config)
    cfg, _ = parse_config(text, PROBE_KEYS)
    quantities = cfg.quantities or (*STABILITY_QUANTITIES, "init_output_norm")
    cfg = replace(cfg, richness=STABILITY_GRID, off_scale_allowed=True, quantities=tuple(quantities))
    return _write_sweep_outputs(cfg, text, Path(args.out), args.no_fit,
                                default_jobs(args.jobs))


def probe_report(cfg: SweepConfig, r: float, width: int, seed: int) -> dict:
    spec = cfg.net_spec(width)
    rich = RichnessSpec(r, off_scale_allowed=True)
    scales = layer_scales(cfg.gauge, rich, spec)
    rngs = cell_rngs(cfg.root_seed, seed, width)
    data = gaussian_task(spec, max(cfg.samples, 1), rngs["data"])
    net = init_network(spec, scales, rngs["init"])
    x, y = data.x[0], data.y[0]

    net1, deltas, ft0, ft1, bt0 = single_step(net, x, y, cfg.probe_eta)
    dec = decompose_update(net, deltas, ft0, ft1)
    crit = measure_criteria(bt0, dec, ft0)
    _, dl1 = loss_and_grad(y, ft1.output)
    bt1 = backward(net1, ft1, dl1)
    align = alignment_magnification(net, net1, bt1)

    layers = []
    max_resid = 0.0
    for l in range(1, spec.depth + 1):
        tot = dec.total[l - 1]
        resid = float(np.linalg.norm(dec.residual(l)))
        scale = max(float(np.linalg.norm(dec.layer_term[l - 1])) + float(np.linalg.norm(dec.passthrough_term[l - 1]))
                    + float(np.linalg.norm(dec.interaction_term[l - 1])), float(np.linalg.norm(tot)))
        rel = resid / scale if scale > 0 else 0.0
        max_resid = max(max_resid, rel)
        ratios = dec.ratios(l)
        layers.append({
            "layer": l,
            "g": scales.g[l - 1], "sigma": scales.sigma[l - 1], "eta": scales.eta[l - 1],
            "forward_scale": scales.forward_scale[l - 1],
            "update_coupling": scales.update_coupling[l - 1],
            "rep_norm": float(crit.rep_norm[l - 1]),
            "rep_update_norm": float(crit.rep_update_norm[l - 1]),
            "uuc": float(crit.uuc_value[l - 1]),
            "layer_contrib_norm": float(crit.layer_contrib_norm[l - 1]),
            "rep_grad_norm": float(crit.rep_grad_norm[l - 1]),
            "passthrough_norm": float(np.linalg.norm(dec.passthrough_term[l - 1])),
            "interaction_norm": float(np.linalg.norm(dec.interaction_term[l - 1])),
            "layer_ratio": _num(ratios["layer"]),
            "passthrough_ratio": _num(ratios["passthrough"]),
            "interaction_ratio": _num(ratios["interaction"]),
            "alignment_ratio": _num(align.ratios[l - 1]),
            "alignment_degenerate": align.degenerate[l - 1],
            "decomposition_rel_residual": rel,
        })
    report = {
        "gauge": cfg.gauge.value, "r": r, "width": width, "seed": seed,
        "task": cfg.task, "depth": spec.depth, "probe_eta": cfg.probe_eta,
        "loss": float(loss_and_grad(y, ft0.output)[0]),
        "output_norm": float(np.linalg.norm(ft0.output)),
        "decomposition_approximate": dec.approximate,
        "decomposition_max_rel_residual": max_resid,
        "decomposition_verified": max_resid <= 1e-12,
        "layers": layers,
    }
    if spec.activation == "linear":
        lin = linearization_probe(net, deltas, x)
        report["linearization"] = {
            "poly_coeffs": lin.poly_coeffs.tolist(),
            "gradient_term_norm": float(np.linalg.norm(lin.gradient_term)),
            "curvature_term_norm": float(np.linalg.norm(lin.curvature_term)),
            "curvature_ratio": _num(lin.curvature_ratio),
            "grad_change_abs": lin.grad_change_abs,
            "grad_change_rel": _num(lin.grad_change_rel),
        }
    grid = [k / 100 for k in range(0, 51)]
    fwd_match = [rr for rr in grid if matches_richness(scales, spec, rr)[0]]
    cpl_match = [rr for rr in grid if matches_richness(scales, spec, rr)[1]]
    report["scale_comparison"] = {
        "r_grid": "0.00..0.50 step 0.01",
        "forward_scale_matches_mup_at_r": fwd_match,
        "update_coupling_matches_mup_at_r": cpl_match,
        "on_richness_scale": any(matches_richness(scales, spec, rr) == (True, True) for rr in grid),
    }
    return report


def _num(v):
    v = float(np.asarray(v))
    return v if math.isfinite(v) else None


def _report_records(report: dict) -> list[MeasurementRecord]:
    run_id = f"{report['gauge']}-r{report['r']:g}-n{report['width']}-s{report['seed']}-probe"
    recs = []

    def emit(q, layer, v):
        if v is None:
            return
        recs.append(MeasurementRecord(run_id, report["gauge"], float(report["r"]), report["width"],
                                      report["seed"], 0, q, layer, float(v), False))

    for lay in report["layers"]:
        l = lay["layer"]
        for q in ("rep_norm", "rep_update_norm", "uuc", "layer_contrib_norm", "rep_grad_norm",
                  "alignment_ratio"):
            emit(q, l, lay[q])
        if l > 1:
            for q in ("layer_ratio", "passthrough_ratio", "interaction_ratio"):
                emit(q + "_signed", l, lay[q])
    lin = report.get("linearization")
    if lin:
        for q in ("grad_change_rel", "grad_change_abs", "curvature_ratio"):
            emit(q, 0, lin[q])
    return recs


def cmd_probe(args) -> int:
    text = load_text(args.config)
    cfg, extra = parse_config(text, PROBE_KEYS)
    if args.gauge:
        cfg = replace(cfg, gauge=GaugeId.parse(args.gauge))
    r = args.r if args.r is not None else float(extra.get("r", cfg.richness[0] if cfg.richness else 0.0))
    width = args.width or int(extra.get("width", cfg.widths[0]))
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    if cfg.gauge.on_scale:
        RichnessSpec(r, cfg.off_scale_allowed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = probe_report(cfg, r, width, seed)
    h = config_hash(text)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "probe.csv").write_text(records_to_csv(_report_records(report), h), encoding="utf-8", newline="\n")
    print(json.dumps({k: v for k, v in report.items() if k != "layers"}, indent=2, sort_keys=True))
    for lay in report["layers"]:
        print(f"layer {lay['layer']}: |dh|={lay['rep_update_norm']:.6g} uuc={lay['uuc']:.6g} "
              f"layer={lay['layer_contrib_norm']:.6g} pass={lay['passthrough_norm']:.6g} "
              f"inter={lay['interaction_norm']:.6g} resid={lay['decomposition_rel_residual']:.2e}")
    if report["decomposition_approximate"]:
        return 0
    return 0 if report["decomposition_verified"] else 1


def cmd_gauge_check(args) -> int:
    r = 0.5 if args.r is None else args.r
    width = args.width or 256
    seed = args.seed or 0
    steps = 100 if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    RichnessSpec(r)
    devs = gauge_deviation(r, width, seed, steps)
    for g, d in devs.items():
        print(f"mup vs {g:10s} max relative output deviation over {steps} steps: {d:.3e}")
    worst = max(devs.values())
    if args.base_r is not None:
        d = emulation_deviation(args.base_r, r, width, seed, steps)
        print(f"emulation r={args.base_r:g} -> r={r:g} vs mup: {d:.3e}")
        worst = max(worst, d)
    print(f"max deviation {worst:.3e} (tolerance {EQUIVALENCE_TOL:g})")
    return 0 if worst <= EQUIVALENCE_TOL else 1


def cmd_plot(args) -> int:
    records = read_records(args.records)
    if not records:
        raise UsageError("no records to plot")
    try:
        parse_quantity(args.quantity)
    except KeyError:
        raise UsageError(f"unknown quantity: {args.quantity}") from None
    rs = sorted({rec.r for rec in records if rec.key == args.quantity})
    if args.r is not None:
        rs = [r for r in rs if math.isclose(r, args.r, abs_tol=1e-12)]
    if not rs:
        raise UsageError(f"no records for quantity {args.quantity}")
    series, fits = {}, {}
    for r in rs:
        means, _ = width_means(records, args.quantity, r, args.step)
        if not means:
            continue
        label = f"r={r:g}"
        series[label] = means
        try:
            fits[label] = fit_exponents(records, args.quantity, r, args.step)
        except ValueError:
            fits[label] = None
    if not series:
        raise UsageError(f"no finite values for quantity {args.quantity}")
    svg = loglog_svg(series, fits, title=f"scaling({args.quantity})", ylabel=args.quantity)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg, encoding="utf-8", newline="\n")
    for label, fit in fits.items():
        print(f"{label}: slope {fit}" if fit else f"{label}: no fit")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="richlab", description="Width-scaling experiments on the richness scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("sweep", cmd_sweep, "run a width/richness sweep"),
                               ("stability", cmd_stability, "sweep over the off-scale stability grid")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--no-fit", action="store_true")
        sp.add_argument("--jobs", type=int, default=None)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("probe", help="single-cell update diagnostics")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gauge")
    sp.add_argument("--r", type=float)
    sp.add_argument("--width", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("gauge-check", help="compare trajectories across gauges")
    sp.add_argument("--r", type=float)
    sp.add_argument("--width", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--base-r", type=float, default=None,
                    help="also check rescaled emulation starting from this richness")
    sp.set_defaults(func=cmd_gauge_check)

    sp = sub.add_parser("plot", help="log-log SVG of a recorded quantity")
    sp.add_argument("--records", required=True)
    sp.add_argument("--quantity", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--r", type=float)
    sp.add_argument("--step", type=int)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # invalid richness / gauge given on the command line
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
