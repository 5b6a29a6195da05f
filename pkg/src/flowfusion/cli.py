"""Command-line interface.

Subcommands: ``synth``, ``ingest``, ``stats``, ``correlate``,
``train-stage1``, ``train-stage2``, ``evaluate-loo``. Data directories
hold ``gct_flows.csv``, ``vehicle_flows.csv``, ``camera_map.csv`` and
``segments.csv`` (plus an optional ``adjacency.csv`` override).
"""

from __future__ import annotations

import argparse
import sys
from datetime import time
from pathlib import Path

import numpy as np

from . import configio, flowdata, fusion, graphspec, harness, stgnn, synthgen


def _parse_clock(text: str) -> time:
    try:
        hh, mm = text.split(":")
        return time(int(hh), int(mm))
    except ValueError:
        raise SystemExit(f"error: invalid clock time {text!r}, expected HH:MM") from None


def _load_data_dir(data_dir: str, cfg: dict[str, str]):
    root = Path(data_dir)
    interval = configio.get_int(cfg, "task.interval_minutes")
    gct = flowdata.load_flow_matrix(root / "gct_flows.csv", flowdata.FlowKind.GCT, interval)
    veh = flowdata.load_flow_matrix(root / "vehicle_flows.csv", flowdata.FlowKind.VEHICLE, interval)
    mapping = flowdata.load_camera_mapping(root / "camera_map.csv")
    mapping.validate(gct.node_ids, veh.node_ids)
    adjacency = root / "adjacency.csv"
    if adjacency.exists():
        graph = graphspec.load_adjacency(adjacency, gct.node_ids)
    else:
        segments = flowdata.load_segments(root / "segments.csv")
        graph = graphspec.build_distance_graph(
            segments,
            sigma_m=configio.get_float(cfg, "graph.sigma_m"),
            threshold=configio.get_float(cfg, "graph.threshold"),
        )
        if graph.node_ids != gct.node_ids:
            raise flowdata.FlowDataError(
                f"segments.csv order {graph.node_ids} does not match "
                f"gct_flows.csv columns {gct.node_ids}"
            )
    return gct, veh, mapping, graph


def cmd_synth(args) -> int:
    cfg = configio.load_config(args.config)
    for key, value in (("synth.n_nodes", args.nodes), ("synth.m_cameras", args.cameras),
                       ("synth.days", args.days), ("synth.seed", args.seed)):
        if value is not None:
            cfg[key] = str(value)
    scfg = configio.synth_config(cfg)
    gct, veh, mapping, segments = synthgen.generate(scfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flowdata.save_flow_matrix(gct, out / "gct_flows.csv")
    flowdata.save_flow_matrix(veh, out / "vehicle_flows.csv")
    flowdata.save_camera_mapping(mapping, out / "camera_map.csv")
    flowdata.save_segments(segments, out / "segments.csv")
    print(f"wrote {gct.n_intervals} intervals x {gct.n_nodes} segments "
          f"({veh.n_nodes} cameras) to {out}")
    return 0


def cmd_ingest(args) -> int:
    raw_path = Path(args.raw)
    with raw_path.open() as fh:
        result = flowdata.parse_gct_records(fh)
    segments = flowdata.load_segments(args.segments)
    agg = flowdata.aggregate_gct_flow(
        result.records, segments, args.interval_minutes,
        (_parse_clock(args.day_start), _parse_clock(args.day_end)),
    )
    flowdata.save_flow_matrix(agg.flows, args.out)
    print(f"parsed {len(result.records)} records ({len(result.errors)} malformed lines)")
    print(f"counted {int(np.nansum(agg.flows.values))} into "
          f"{agg.flows.n_intervals} x {agg.flows.n_nodes} cells; "
          f"{agg.discarded} discarded; {agg.multi_box_hits} edge ties")
    if result.errors:
        errors_out = Path(args.errors_out or str(args.out) + ".errors.csv")
        lines = ["line_number,reason,line"]
        lines += [f"{e.line_number},{e.reason!r},{e.line!r}" for e in result.errors]
        errors_out.write_text("\n".join(lines) + "\n")
        print(f"error report: {errors_out}")
    print(f"wrote {args.out}")
    return 0


def _print_stats(label: str, stats: flowdata.FlowStats) -> None:
    print(f"{label:<14} samples={stats.sample_count} nodes={stats.node_count} "
          f"average={stats.mean:.1f} std={stats.std:.1f} "
          f"max_avg={stats.max_node[1]:.1f}({stats.max_node[0]}) "
          f"min_avg={stats.min_node[1]:.1f}({stats.min_node[0]})")


def cmd_stats(args) -> int:
    gct = flowdata.load_flow_matrix(args.gct, flowdata.FlowKind.GCT, args.interval_minutes)
    _print_stats("gct flow", flowdata.descriptive_stats(gct))
    if args.veh:
        veh = flowdata.load_flow_matrix(args.veh, flowdata.FlowKind.VEHICLE, args.interval_minutes)
        _print_stats("vehicle flow", flowdata.descriptive_stats(veh))
        gaps = gct.gap_count() + veh.gap_count()
    else:
        gaps = gct.gap_count()
    if gaps:
        print(f"gaps (missing cells, excluded from stats): {gaps}")
    return 0


def cmd_correlate(args) -> int:
    gct = flowdata.load_flow_matrix(args.gct, flowdata.FlowKind.GCT, args.interval_minutes)
    veh = flowdata.load_flow_matrix(args.veh, flowdata.FlowKind.VEHICLE, args.interval_minutes)
    mapping = flowdata.load_camera_mapping(args.map)
    corr = flowdata.daily_pearson(gct, veh, mapping)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "daily_pearson.csv"
    lines = ["day," + ",".join(corr.camera_ids)]
    for day, row in zip(corr.days, corr.values):
        cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
        lines.append(day.isoformat() + "," + ",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")
    png_path = out / "daily_pearson.png"
    _render_heatmap(corr, png_path)
    finite = corr.values[np.isfinite(corr.values)]
    mean_r = float(finite.mean()) if finite.size else float("nan")
    print(f"daily correlation over {len(corr.days)} days x {len(corr.camera_ids)} cameras; "
          f"mean r={mean_r:.3f}; undefined cells={int(np.isnan(corr.values).sum())}")
    print(f"wrote {csv_path} and {png_path}")
    return 0


def _render_heatmap(corr: flowdata.DailyCorrelation, path: Path) -> None:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    fig = Figure(figsize=(1.2 + 0.5 * len(corr.camera_ids), 1.5 + 0.25 * len(corr.days)))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    im = ax.imshow(corr.values, cmap="Oranges", vmin=-1.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(corr.camera_ids)))
    ax.set_xticklabels(corr.camera_ids, rotation=45, fontsize=7)
    ax.set_yticks(range(len(corr.days)))
    ax.set_yticklabels([d.isoformat() for d in corr.days], fontsize=7)
    ax.set_title("daily Pearson r, cellular-traffic vs vehicle flow")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=110, metadata={"Software": None})


def cmd_train_stage1(args) -> int:
    cfg = configio.load_config(args.config)
    fp = configio.fingerprint(cfg)
    gct, veh, mapping, graph = _load_data_dir(args.data_dir, cfg)
    loo_cfg = configio.loo_config(cfg)
    bundle = harness.prepare_windows(gct, veh, loo_cfg)
    train_range = bundle.ranges["train"]
    if args.source == "gct":
        split = harness._stage1_split(bundle, gct, None, train_range, "gct")
        arch = configio.arch_config(cfg, gct.n_nodes)
        model, history = stgnn.train_stage1(split, graph, arch, seed=args.seed,
                                            train_cfg=configio.stage_train_config(cfg, "stage1"))
        extra = ""
    else:
        retained = mapping.without(args.exclude_camera) if args.exclude_camera else mapping
        cols = [veh.node_index(c) for c in retained.camera_ids]
        split = harness._stage1_split(bundle, veh, cols, train_range, "veh")
        veh_graph = graphspec.restrict(graph, [str(s) for _, s in retained.entries])
        arch = configio.arch_config(cfg, len(cols))
        model, history = stgnn.train_stage1(split, veh_graph, arch, seed=args.seed,
                                            train_cfg=configio.stage_train_config(cfg, "stage1"))
        extra = "meta.cameras=" + ",".join(retained.camera_ids)
    stgnn.save_stgnn(model, args.out, fingerprint=fp, kind=args.source, extra_text=extra)
    print(f"trained {args.source} extractor: best val MAE {history.best_val_mae:.3f} "
          f"at epoch {history.best_epoch}")
    print(f"wrote {args.out} (fingerprint {fp[:12]})")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = configio.load_config(args.config)
    fp = configio.fingerprint(cfg)
    gct, veh, mapping, graph = _load_data_dir(args.data_dir, cfg)
    gct_model, gct_meta, _ = stgnn.load_stgnn(args.gct_ckpt)
    veh_model, veh_meta, _ = stgnn.load_stgnn(args.veh_ckpt)
    if gct_meta.get("arch.kind") != "gct" or veh_meta.get("arch.kind") != "vehicle":
        raise configio.ConfigError(
            f"checkpoint kinds are {gct_meta.get('arch.kind')}/{veh_meta.get('arch.kind')}; "
            "pass --gct-ckpt/--veh-ckpt in that order"
        )
    exclude = None if args.exclude_camera in (None, "none") else args.exclude_camera
    retained = mapping.without(exclude) if exclude else mapping
    expected = ",".join(retained.camera_ids)
    if veh_meta.get("meta.cameras") not in (None, "", expected):
        raise configio.ConfigError(
            f"vehicle checkpoint covers cameras {veh_meta['meta.cameras']}, "
            f"but this run retains {expected}"
        )
    loo_cfg = configio.loo_config(cfg)
    bundle = harness.prepare_windows(gct, veh, loo_cfg)
    retained_cols = [veh.node_index(c) for c in retained.camera_ids]
    camera_indices = [gct.node_index(str(s)) for _, s in retained.entries]
    free_indices = [i for i in range(gct.n_nodes) if i not in set(camera_indices)]
    out_mean, out_std = harness._output_scale(veh, retained_cols, bundle.ranges["train"])
    data = harness._fold_stage2_data(bundle, retained_cols, free_indices,
                                     out_mean, out_std, retained.camera_ids)
    forbidden = frozenset({("vehicle", exclude)}) if exclude else frozenset()
    model, history = fusion.train_stage2(
        gct_model, veh_model, graph, retained, data,
        configio.arch_config(cfg, gct.n_nodes), seed=args.seed,
        train_cfg=configio.stage_train_config(cfg, "stage2"),
        balance_init=configio.get_float(cfg, "stage2.balance_init"),
        forbidden_lineage=forbidden,
    )
    fusion.save_stage2(model, args.out, fingerprint=fp)
    last = history.steps[-1]
    print(f"stage-2 best camera-node val MAE {history.best_val:.3f} at epoch "
          f"{history.best_epoch}; final balance weight {last.balance:.2e}")
    print(f"wrote {args.out} (fingerprint {fp[:12]})")
    return 0


def cmd_evaluate_loo(args) -> int:
    cfg = configio.load_config(args.config)
    gct, veh, mapping, graph = _load_data_dir(args.data_dir, cfg)
    horizons = tuple(int(h) for h in args.horizons.split(",")) if args.horizons else None
    loo_cfg = configio.loo_config(cfg, horizons)
    if "," in args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(range(int(args.seeds)))
    report = harness.run_leave_one_out(gct, veh, mapping, graph, loo_cfg, seeds,
                                       workers=args.workers)
    formats = args.formats.split(",")
    written = harness.emit_report(report, formats, args.out_dir,
                                  plot_camera=args.plot_camera)
    print(harness.render_text_table(report))
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowfusion",
        description="Predict vehicle flow at camera-free road segments by fusing "
                    "cellular-traffic flows with sparse camera counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--nodes", type=int, default=None)
    p.add_argument("--cameras", type=int, default=None)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="aggregate raw records into interval flows")
    p.add_argument("--raw", required=True, help="raw_gct.csv (time,imei_hash,lat,lon)")
    p.add_argument("--segments", required=True, help="segments.csv")
    p.add_argument("--out", required=True, help="output gct_flows.csv")
    p.add_argument("--interval-minutes", type=int, default=5)
    p.add_argument("--day-start", default="06:00")
    p.add_argument("--day-end", default="19:00")
    p.add_argument("--errors-out", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="descriptive statistics of a flow file")
    p.add_argument("--gct", required=True)
    p.add_argument("--veh", default=None)
    p.add_argument("--interval-minutes", type=int, default=5)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("correlate", help="daily correlation between the two sources")
    p.add_argument("--gct", required=True)
    p.add_argument("--veh", required=True)
    p.add_argument("--map", required=True, help="camera_map.csv")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--interval-minutes", type=int, default=5)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("train-stage1", help="train a feature extractor")
    p.add_argument("--source", choices=("gct", "vehicle"), required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-camera", default=None,
                   help="withhold this camera (vehicle source only)")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the fusion stage")
    p.add_argument("--gct-ckpt", required=True)
    p.add_argument("--veh-ckpt", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-camera", default="none")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("evaluate-loo", help="leave-one-camera-out evaluation")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="10",
                   help="seed count (seeds 0..n-1) or comma-separated list")
    p.add_argument("--horizons", default=None, help="e.g. 3,6,12")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--formats", default="text-table,rows,line-plot")
    p.add_argument("--plot-camera", default=None)
    p.set_defaults(func=cmd_evaluate_loo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (flowdata.FlowDataError, graphspec.GraphError, stgnn.ModelError,
            stgnn.TrainingError, fusion.FusionError, harness.HarnessError,
            harness.ReportError, configio.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
