"""Evaluation harness: forecasting metrics, the camera-free leave-one-out
protocol, improvement-ratio reporting, and report/figure emission.

For each camera fold, that camera's vehicle flow is withheld from every
training input and target; the fold trains the vehicle-side extractor
and stage 2 on the remaining cameras, plus a baseline network that sees
only cellular-traffic inputs but is trained with the same two-part
loss. Both arms are scored at the withheld camera's node against its
held-out flow on the chronological test split.

The improvement ratio is reported with the reduction-positive
convention: IR = (score_without - score_with) / score_without * 100, so
a positive number means the fusion arm lowered the error.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion, numcore as nc, stgnn
from .flowdata import (
    CameraMapping,
    FlowMatrix,
    Normalizer,
    chronological_split,
    fit_normalizer,
    window_starts,
)
from .graphspec import GraphSpec, restrict

MAPE_EPSILON = 1.0  # vehicles; counts hit zero off-peak, so guard the ratio

METRIC_NAMES = ("mae", "rmse", "mape")
ARMS = ("fusion", "baseline")

IR_CONVENTION_NOTE = (
    "IR convention: positive percentages are error reductions of the "
    "fusion arm relative to the baseline arm."
)


class HarnessError(ValueError):
    pass


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class MetricsTriple:
    mae: float
    rmse: float
    mape: float  # percent

    def get(self, name: str) -> float:
        return getattr(self, name)


def metrics(pred: np.ndarray, truth: np.ndarray) -> MetricsTriple:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise HarnessError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise HarnessError("empty prediction vector")
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mape = float(np.mean(np.abs(err) / np.maximum(np.abs(truth), MAPE_EPSILON)) * 100.0)
    return MetricsTriple(mae, rmse, mape)


def improvement_ratio(score_with: float, score_without: float) -> float | None:
    """Reduction-positive improvement; None when the baseline is zero."""
    if score_without == 0:
        return None
    return (score_without - score_with) / score_without * 100.0


def persistence_predictions(inputs: np.ndarray, out_steps: int) -> np.ndarray:
    """Repeat-last-value baseline: [..., T_in] -> [..., out_steps]."""
    return np.repeat(inputs[..., -1:], out_steps, axis=-1)


# ---------------------------------------------------------------------------
# Protocol plan


@dataclass(frozen=True)
class FoldJob:
    camera_id: str
    seed: int
    arm: str  # "fusion" or "baseline"
    fold_index: int

    @property
    def fold_seed(self) -> int:
        return self.seed ^ self.fold_index


def plan_folds(mapping: CameraMapping, seeds: Sequence[int]) -> list[FoldJob]:
    """One fusion and one baseline training per (camera, seed)."""
    if len(mapping.entries) < 2:
        raise HarnessError("leave-one-out needs at least 2 cameras")
    jobs = []
    for fold_index, (camera_id, _) in enumerate(mapping.entries):
        for seed in seeds:
            for arm in ARMS:
                jobs.append(FoldJob(camera_id, seed, arm, fold_index))
    return jobs


# ---------------------------------------------------------------------------
# Config and data preparation


@dataclass(frozen=True)
class LooConfig:
    input_steps: int = 12
    output_steps: int = 12
    horizons: tuple[int, ...] = (3, 6, 12)
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    channels: int = 16
    layers: int = 4
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2, 2, 4)
    embedding_dim: int = 8
    adaptive: bool = True
    stage1_train: stgnn.TrainConfig = stgnn.TrainConfig()
    stage2_train: stgnn.TrainConfig = stgnn.TrainConfig()
    balance_init: float = fusion.DEFAULT_BALANCE_INIT
    fingerprint: str = ""

    def __post_init__(self):
        if any(h < 1 or h > self.output_steps for h in self.horizons):
            raise HarnessError(
                f"horizons {self.horizons} must lie in [1, {self.output_steps}]"
            )

    def arch(self, n_nodes: int) -> stgnn.StgnnConfig:
        return stgnn.StgnnConfig(
            n_nodes=n_nodes,
            in_steps=self.input_steps,
            out_steps=self.output_steps,
            channels=self.channels,
            layers=self.layers,
            kernel_size=self.kernel_size,
            dilation_schedule=self.dilations,
            use_adaptive_adjacency=self.adaptive,
            embedding_dim=self.embedding_dim,
        )


@dataclass
class WindowBundle:
    """Aligned raw windows over the shared grid for all three splits."""

    starts: dict[str, list[int]]
    gct_inputs: dict[str, np.ndarray]  # [W, N, T_in]
    gct_targets: dict[str, np.ndarray]
    veh_inputs: dict[str, np.ndarray]  # [W, M, T_in]
    veh_targets: dict[str, np.ndarray]
    ranges: dict[str, range]
    times: list
    node_ids: list[str]
    camera_ids: list[str]


def prepare_windows(gct: FlowMatrix, veh: FlowMatrix, config: LooConfig) -> WindowBundle:
    if gct.interval_start_times != veh.interval_start_times:
        raise HarnessError("flow matrices do not share an interval grid")
    train, val, test = chronological_split(gct, config.ratios)
    spans = {"train": train, "val": val, "test": test}
    span = config.input_steps + config.output_steps
    starts: dict[str, list[int]] = {}
    g_in: dict[str, np.ndarray] = {}
    g_tg: dict[str, np.ndarray] = {}
    v_in: dict[str, np.ndarray] = {}
    v_tg: dict[str, np.ndarray] = {}
    for name, rows in spans.items():
        kept = []
        for s in window_starts(gct.interval_start_times, rows,
                               config.input_steps, config.output_steps):
            g_block = gct.values[s : s + span]
            v_block = veh.values[s : s + span]
            if np.isnan(g_block).any() or np.isnan(v_block).any():
                continue
            kept.append(s)
        if not kept:
            raise HarnessError(f"no usable windows in the {name} split")
        starts[name] = kept
        g_in[name] = np.stack([gct.values[s : s + config.input_steps].T for s in kept])
        g_tg[name] = np.stack(
            [gct.values[s + config.input_steps : s + span].T for s in kept]
        )
        v_in[name] = np.stack([veh.values[s : s + config.input_steps].T for s in kept])
        v_tg[name] = np.stack(
            [veh.values[s + config.input_steps : s + span].T for s in kept]
        )
    return WindowBundle(starts, g_in, g_tg, v_in, v_tg, spans,
                        list(gct.interval_start_times), list(gct.node_ids),
                        list(veh.node_ids))


def _stage1_split(bundle: WindowBundle, matrix: FlowMatrix, cols: list[int] | None,
                  train_range: range, which: str) -> stgnn.SplitData:
    norm = fit_normalizer(matrix, train_range)
    if which == "gct":
        tr_in, tr_tg = bundle.gct_inputs["train"], bundle.gct_targets["train"]
        va_in, va_tg = bundle.gct_inputs["val"], bundle.gct_targets["val"]
    else:
        tr_in, tr_tg = bundle.veh_inputs["train"], bundle.veh_targets["train"]
        va_in, va_tg = bundle.veh_inputs["val"], bundle.veh_targets["val"]
    if cols is not None:
        tr_in, tr_tg = tr_in[:, cols], tr_tg[:, cols]
        va_in, va_tg = va_in[:, cols], va_tg[:, cols]
        norm = Normalizer(norm.per_node_mean[cols], norm.per_node_std[cols],
                          norm.epsilon, norm.flagged_nodes)
    return stgnn.SplitData(tr_in, tr_tg, va_in, va_tg, norm)


# ---------------------------------------------------------------------------
# Baseline arm: cellular-traffic-only network, same two-part loss


@dataclass
class BaselineModel:
    net: stgnn.StgnnModel
    normalizer: Normalizer
    theta: nc.Tensor | None = None
    output_mean: float = 0.0
    output_std: float = 1.0
    camera_indices: list[int] = field(default_factory=list)
    free_indices: list[int] = field(default_factory=list)


def _baseline_forward(net, x_norm, graph, out_mean, out_std, cam_idx, free_idx):
    pred = stgnn.forward_batch(net, x_norm, graph)
    raw = nc.add(nc.mul(pred, out_std), out_mean)
    return fusion.PredictionBatch(
        combined=raw,
        camera_indices=list(cam_idx),
        free_indices=list(free_idx),
        with_cameras=nc.take(raw, cam_idx, axis=1),
        without_cameras=nc.take(raw, free_idx, axis=1),
    )


def train_baseline(
    bundle_like: fusion.Stage2Data,
    gct_normalizer: Normalizer,
    graph: GraphSpec,
    camera_indices: list[int],
    free_indices: list[int],
    arch: stgnn.StgnnConfig,
    seed: int,
    train_cfg: stgnn.TrainConfig,
    balance_init: float,
    forbidden_lineage: frozenset = frozenset(),
) -> tuple[BaselineModel, fusion.Stage2History]:
    """Single network on cellular-traffic inputs, trained with the same
    dynamic loss and selected on camera-node validation error."""
    data = bundle_like
    if forbidden_lineage & data.lineage:
        raise fusion.FusionError(
            f"withheld series present in training data: {sorted(forbidden_lineage & data.lineage)}"
        )
    rng = nc.seeded_rng(seed)
    net = stgnn.init_stgnn(arch, rng)
    params = dict(net.params)
    params["balance.theta"] = nc.Tensor(fusion.theta_for_balance(balance_init),
                                        requires_grad=True)
    norm = gct_normalizer
    x_train = (data.train_gct_inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    x_val = (data.val_gct_inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]

    state = nc.init_adam(params, lr=train_cfg.lr)
    history = fusion.Stage2History()
    best_values: dict[str, np.ndarray] = {}
    stale = 0
    step = 0
    for epoch in range(train_cfg.max_epochs):
        perm = rng.permutation(len(x_train))
        for lo, hi in stgnn._batch_ranges(len(perm), train_cfg.batch_size):
            idx = perm[lo:hi]
            if forbidden_lineage & data.lineage:
                raise fusion.FusionError("withheld series leaked into a training batch")
            history.hygiene_checked_batches += 1
            pred = _baseline_forward(net, nc.Tensor(x_train[idx]), graph,
                                     data.output_mean, data.output_std,
                                     camera_indices, free_indices)
            breakdown = fusion.dynamic_loss(
                pred, data.train_veh_targets[idx], data.train_gct_targets[idx],
                params["balance.theta"],
            )
            step += 1
            if not np.isfinite(breakdown.total):
                raise stgnn.TrainingError(f"non-finite baseline loss at step {step}")
            nc.backward(breakdown.total_node)
            nc.adam_step(params, {n: nc.grad_of(p) for n, p in params.items()}, state)
            nc.reset_tape(params.values())
            breakdown.total_node = None
            history.steps.append(breakdown)
        val_lw = _baseline_val(net, x_val, data.val_veh_targets, graph,
                               data.output_mean, data.output_std, camera_indices,
                               free_indices)
        history.val_loss_with.append(val_lw)
        if val_lw < history.best_val:
            history.best_val = val_lw
            history.best_epoch = epoch
            best_values = {n: p.values.copy() for n, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                break
    for name, values in best_values.items():
        params[name].values = values
    model = BaselineModel(net, norm, params["balance.theta"],
                          data.output_mean, data.output_std,
                          list(camera_indices), list(free_indices))
    return model, history


def _baseline_val(net, x_val, veh_targets, graph, out_mean, out_std,
                  cam_idx, free_idx, batch_size: int = 256) -> float:
    errs = []
    with nc.pause_recording():
        for lo, hi in stgnn._batch_ranges(len(x_val), batch_size):
            pred = _baseline_forward(net, nc.Tensor(x_val[lo:hi]), graph,
                                     out_mean, out_std, cam_idx, free_idx)
            errs.append(np.abs(pred.with_cameras.values - veh_targets[lo:hi]).reshape(-1))
    return float(np.concatenate(errs).mean())


def baseline_predict(model: BaselineModel, gct_inputs: np.ndarray, graph: GraphSpec,
                     batch_size: int = 256) -> np.ndarray:
    norm = model.normalizer
    x = (gct_inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    outs = []
    with nc.pause_recording():
        for lo, hi in stgnn._batch_ranges(len(x), batch_size):
            pred = stgnn.forward_batch(model.net, nc.Tensor(x[lo:hi]), graph).values
            outs.append(pred * model.output_std + model.output_mean)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Leave-one-out protocol


@dataclass
class FoldEntry:
    camera_id: str
    seed: int
    arm: str
    metrics_by_horizon: dict[int, MetricsTriple]


@dataclass
class FoldFailure:
    camera_id: str
    seed: int
    arm: str
    error: str


@dataclass
class PlotSeries:
    camera_id: str
    node_id: str
    day: str
    horizon: int
    times: list[str]
    truth: list[float]
    pred_fusion: list[float]  # NaN where no window reaches the interval
    pred_baseline: list[float]


@dataclass
class ExperimentReport:
    horizons: list[int]
    camera_ids: list[str]
    seeds: list[int]
    entries: list[FoldEntry]
    failures: list[FoldFailure]
    scheduled: int
    completed: int
    headline: dict[str, dict[int, MetricsTriple]]
    improvement: dict[int, dict[str, float | None]]
    per_camera: dict[str, dict[str, dict[int, MetricsTriple]]]
    per_seed: dict[int, dict[str, dict[int, MetricsTriple]]]
    plots: dict[str, PlotSeries]
    config_fingerprint: str


def aggregate_entries(entries: list[FoldEntry], horizons: Sequence[int]):
    """Arithmetic means over all (camera x seed) cells per arm, plus IRs.

    Re-running this on a report's stored entries must reproduce its
    headline numbers bit for bit.
    """
    headline: dict[str, dict[int, MetricsTriple]] = {}
    for arm in ARMS:
        arm_entries = [e for e in entries if e.arm == arm]
        headline[arm] = {}
        for h in horizons:
            if arm_entries:
                headline[arm][h] = MetricsTriple(*(
                    float(np.mean([e.metrics_by_horizon[h].get(m) for e in arm_entries]))
                    for m in METRIC_NAMES
                ))
    improvement: dict[int, dict[str, float | None]] = {}
    for h in horizons:
        improvement[h] = {}
        for m in METRIC_NAMES:
            if headline.get("fusion", {}).get(h) and headline.get("baseline", {}).get(h):
                improvement[h][m] = improvement_ratio(
                    headline["fusion"][h].get(m), headline["baseline"][h].get(m)
                )
            else:
                improvement[h][m] = None
    return headline, improvement


def _group_means(entries: list[FoldEntry], horizons, key) -> dict:
    out: dict = {}
    for e in entries:
        out.setdefault(key(e), []).append(e)
    return {
        k: aggregate_entries(group, horizons)[0]
        for k, group in sorted(out.items(), key=lambda kv: str(kv[0]))
    }


def _fold_stage2_data(bundle: WindowBundle, retained_cols: list[int],
                      free_indices: list[int], out_mean: float, out_std: float,
                      retained_cams: list[str]) -> fusion.Stage2Data:
    lineage = frozenset(
        {("gct", nid) for nid in bundle.node_ids}
        | {("vehicle", cam) for cam in retained_cams}
    )
    return fusion.Stage2Data(
        train_gct_inputs=bundle.gct_inputs["train"],
        train_veh_inputs=bundle.veh_inputs["train"][:, retained_cols],
        train_veh_targets=bundle.veh_targets["train"][:, retained_cols],
        train_gct_targets=bundle.gct_targets["train"][:, free_indices],
        val_gct_inputs=bundle.gct_inputs["val"],
        val_veh_inputs=bundle.veh_inputs["val"][:, retained_cols],
        val_veh_targets=bundle.veh_targets["val"][:, retained_cols],
        val_gct_targets=bundle.gct_targets["val"][:, free_indices],
        output_mean=out_mean,
        output_std=out_std,
        lineage=lineage,
    )


def _output_scale(veh: FlowMatrix, retained_cols: list[int], train_range: range):
    block = veh.values[train_range.start : train_range.stop][:, retained_cols]
    mean = float(np.nanmean(block))
    std = float(np.nanstd(block))
    return mean, (std if std > 0 else 1.0)


def run_leave_one_out(
    gct: FlowMatrix,
    veh: FlowMatrix,
    mapping: CameraMapping,
    graph: GraphSpec,
    config: LooConfig,
    seeds: Sequence[int],
    workers: int = 1,
) -> ExperimentReport:
    """Full protocol: per (camera, seed), train the fusion arm with that
    camera withheld everywhere plus the baseline arm, score both at the
    withheld node on the test split, then average over folds and seeds."""
    mapping.validate(gct.node_ids, veh.node_ids)
    if graph.node_ids != gct.node_ids:
        raise HarnessError("graph node order must match the flow node order")
    if len(mapping.entries) < 2:
        raise HarnessError("leave-one-out needs at least 2 cameras")
    bundle = prepare_windows(gct, veh, config)
    jobs = plan_folds(mapping, list(seeds))
    train_range = bundle.ranges["train"]
    gct_norm = fit_normalizer(gct, train_range)

    gct_models: dict[int, stgnn.StgnnModel] = {}
    for seed in seeds:
        split = _stage1_split(bundle, gct, None, train_range, "gct")
        model, _ = stgnn.train_stage1(split, graph, config.arch(gct.n_nodes),
                                      seed=seed, train_cfg=config.stage1_train)
        gct_models[seed] = model

    pair_jobs = sorted({(j.camera_id, j.seed, j.fold_index) for j in jobs},
                       key=lambda t: (t[2], t[1]))
    entries: list[FoldEntry] = []
    failures: list[FoldFailure] = []
    plots: dict[str, PlotSeries] = {}

    def run_pair(pair):
        camera_id, seed, fold_index = pair
        return _run_fold(camera_id, seed, fold_index, gct, veh, mapping, graph,
                         config, bundle, gct_models[seed], gct_norm)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_pair, pair_jobs))
    else:
        results = [run_pair(p) for p in pair_jobs]

    for (camera_id, seed, _), outcome in zip(pair_jobs, results):
        fold_entries, fold_failures, plot = outcome
        entries.extend(fold_entries)
        failures.extend(fold_failures)
        if plot is not None and camera_id not in plots:
            plots[camera_id] = plot

    headline, improvement = aggregate_entries(entries, config.horizons)
    report = ExperimentReport(
        horizons=list(config.horizons),
        camera_ids=mapping.camera_ids,
        seeds=list(seeds),
        entries=entries,
        failures=failures,
        scheduled=len(jobs),
        completed=len(entries),
        headline=headline,
        improvement=improvement,
        per_camera=_group_means(entries, config.horizons, lambda e: e.camera_id),
        per_seed=_group_means(entries, config.horizons, lambda e: e.seed),
        plots=plots,
        config_fingerprint=config.fingerprint,
    )
    return report


def _run_fold(camera_id, seed, fold_index, gct, veh, mapping, graph, config,
              bundle, gct_model, gct_norm):
    fold_seed = seed ^ fold_index
    retained = mapping.without(camera_id)
    retained_cols = [veh.node_index(c) for c in retained.camera_ids]
    excluded_col = veh.node_index(camera_id)
    excluded_node = gct.node_index(str(mapping.segment_of(camera_id)))
    camera_indices = [gct.node_index(str(seg)) for _, seg in retained.entries]
    free_indices = [i for i in range(gct.n_nodes) if i not in set(camera_indices)]
    forbidden = frozenset({("vehicle", camera_id)})
    train_range = bundle.ranges["train"]
    out_mean, out_std = _output_scale(veh, retained_cols, train_range)
    data = _fold_stage2_data(bundle, retained_cols, free_indices, out_mean,
                             out_std, retained.camera_ids)
    truth = bundle.veh_targets["test"][:, excluded_col]  # [Wt, T_out]

    entries: list[FoldEntry] = []
    failures: list[FoldFailure] = []
    preds: dict[str, np.ndarray | None] = {"fusion": None, "baseline": None}

    try:
        veh_split = _stage1_split(bundle, veh, retained_cols, train_range, "veh")
        veh_graph = restrict(graph, [str(seg) for _, seg in retained.entries])
        veh_model, _ = stgnn.train_stage1(
            veh_split, veh_graph, config.arch(len(retained_cols)),
            seed=fold_seed, train_cfg=config.stage1_train,
        )
        stage2, _ = fusion.train_stage2(
            gct_model, veh_model, graph, retained, data, config.arch(gct.n_nodes),
            seed=fold_seed, train_cfg=config.stage2_train,
            balance_init=config.balance_init, forbidden_lineage=forbidden,
        )
        combined = fusion.stage2_predict(
            stage2, gct_model, veh_model, bundle.gct_inputs["test"],
            bundle.veh_inputs["test"][:, retained_cols], graph, retained,
        )
        preds["fusion"] = combined[:, excluded_node]
        entries.append(FoldEntry(camera_id, seed, "fusion", {
            h: metrics(preds["fusion"][:, h - 1], truth[:, h - 1])
            for h in config.horizons
        }))
    except Exception as exc:  # fold failures are reported, not fatal
        failures.append(FoldFailure(camera_id, seed, "fusion", f"{type(exc).__name__}: {exc}"))

    try:
        baseline, _ = train_baseline(
            data, gct_norm, graph, camera_indices, free_indices,
            config.arch(gct.n_nodes), seed=fold_seed,
            train_cfg=config.stage2_train, balance_init=config.balance_init,
            forbidden_lineage=forbidden,
        )
        combined = baseline_predict(baseline, bundle.gct_inputs["test"], graph)
        preds["baseline"] = combined[:, excluded_node]
        entries.append(FoldEntry(camera_id, seed, "baseline", {
            h: metrics(preds["baseline"][:, h - 1], truth[:, h - 1])
            for h in config.horizons
        }))
    except Exception as exc:
        failures.append(FoldFailure(camera_id, seed, "baseline", f"{type(exc).__name__}: {exc}"))

    plot = None
    if preds["fusion"] is not None and preds["baseline"] is not None:
        plot = _build_plot_series(camera_id, str(mapping.segment_of(camera_id)),
                                  bundle, veh, excluded_col, preds, config)
    return entries, failures, plot


def _build_plot_series(camera_id, node_id, bundle, veh, excluded_col, preds, config):
    """Daily series at the withheld node: truth plus both arms'
    predictions at the first configured horizon."""
    horizon = config.horizons[0]
    test_rows = bundle.ranges["test"]
    times = bundle.times
    by_day: dict = {}
    for r in range(test_rows.start, test_rows.stop):
        by_day.setdefault(times[r].date(), []).append(r)
    day, rows = max(by_day.items(), key=lambda kv: (len(kv[1]), -kv[1][0]))
    rows = sorted(rows)
    start_of = {s: i for i, s in enumerate(bundle.starts["test"])}
    truth = [float(veh.values[r, excluded_col]) for r in rows]
    series = {"fusion": [], "baseline": []}
    for r in rows:
        s = r - config.input_steps - (horizon - 1)
        w = start_of.get(s)
        for arm in ARMS:
            if w is None:
                series[arm].append(float("nan"))
            else:
                series[arm].append(float(preds[arm][w, horizon - 1]))
    return PlotSeries(
        camera_id=camera_id,
        node_id=node_id,
        day=day.isoformat(),
        horizon=horizon,
        times=[times[r].strftime("%H:%M") for r in rows],
        truth=truth,
        pred_fusion=series["fusion"],
        pred_baseline=series["baseline"],
    )


# ---------------------------------------------------------------------------
# Report emission

REPORT_FORMATS = ("text-table", "rows", "line-plot")


def emit_report(report: ExperimentReport, formats: Sequence[str], out_dir,
                plot_camera: str | None = None) -> list[Path]:
    """Write report files; byte output is deterministic given the report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for fmt in formats:
        if fmt == "text-table":
            path = out_dir / "report.txt"
            path.write_text(render_text_table(report))
            written.append(path)
        elif fmt == "rows":
            path = out_dir / "report_rows.csv"
            path.write_text(render_rows_csv(report))
            written.append(path)
        elif fmt == "line-plot":
            written.extend(_emit_plot(report, out_dir, plot_camera))
        else:
            raise ReportError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    return written


def _fmt(value: float | None, percent: bool = False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.1f}%" if percent else f"{value:.3f}"


def render_text_table(report: ExperimentReport) -> str:
    lines = []
    lines.append("Camera-free leave-one-out results (chronological test split)")
    lines.append("")
    header = f"{'arm':<16}" + "".join(
        f"{f'{h} steps {m.upper()}':>16}" for h in report.horizons for m in METRIC_NAMES
    )
    lines.append(header)
    lines.append("-" * len(header))
    for arm, label in (("baseline", "stgnn(w/o)"), ("fusion", "stgnn(w)")):
        cells = []
        for h in report.horizons:
            triple = report.headline.get(arm, {}).get(h)
            for m in METRIC_NAMES:
                cells.append(_fmt(triple.get(m) if triple else None, percent=(m == "mape")))
        lines.append(f"{label:<16}" + "".join(f"{c:>16}" for c in cells))
    ir_cells = [
        _fmt(report.improvement[h][m], percent=True)
        for h in report.horizons
        for m in METRIC_NAMES
    ]
    lines.append(f"{'IR':<16}" + "".join(f"{c:>16}" for c in ir_cells))
    # single integrated model per report; the average IR row keeps the
    # published table layout
    lines.append(f"{'Average IR':<16}" + "".join(f"{c:>16}" for c in ir_cells))
    lines.append("")
    lines.append(f"folds completed: {report.completed}/{report.scheduled}"
                 + (f" ({len(report.failures)} failed)" if report.failures else ""))
    for failure in report.failures:
        lines.append(f"  failed: {failure.camera_id} seed={failure.seed} "
                     f"arm={failure.arm}: {failure.error}")
    lines.append(f"cameras: {', '.join(report.camera_ids)}; seeds: "
                 + ", ".join(str(s) for s in report.seeds))
    lines.append(IR_CONVENTION_NOTE)
    lines.append(f"config fingerprint: {report.config_fingerprint}")
    lines.append("")
    return "\n".join(lines)


def render_rows_csv(report: ExperimentReport) -> str:
    lines = ["camera,seed,arm,horizon_steps,metric,value"]
    for e in report.entries:
        for h in report.horizons:
            for m in METRIC_NAMES:
                lines.append(f"{e.camera_id},{e.seed},{e.arm},{h},{m},"
                             f"{e.metrics_by_horizon[h].get(m)!r}")
    return "\n".join(lines) + "\n"


def _plot_paths(out_dir: Path, plot: PlotSeries) -> tuple[Path, Path]:
    stem = f"plot_{plot.node_id}_{plot.day}"
    return out_dir / f"{stem}.csv", out_dir / f"{stem}.png"


def _emit_plot(report: ExperimentReport, out_dir: Path, plot_camera: str | None) -> list[Path]:
    if not report.plots:
        raise ReportError("report holds no plot series (all folds failed?)")
    camera = plot_camera or report.camera_ids[0]
    if camera not in report.plots:
        raise ReportError(f"no plot series for camera {camera!r}; have {sorted(report.plots)}")
    plot = report.plots[camera]
    csv_path, png_path = _plot_paths(out_dir, plot)
    lines = ["time,truth,pred_with,pred_without"]
    for t, tr, pw, pwo in zip(plot.times, plot.truth, plot.pred_fusion, plot.pred_baseline):
        pw_s = "" if math.isnan(pw) else repr(pw)
        pwo_s = "" if math.isnan(pwo) else repr(pwo)
        lines.append(f"{t},{tr!r},{pw_s},{pwo_s}")
    csv_path.write_text("\n".join(lines) + "\n")
    _render_plot_png(plot, png_path)
    return [csv_path, png_path]


def _render_plot_png(plot: PlotSeries, path: Path) -> None:
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    fig = Figure(figsize=(9, 4.5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    x = np.arange(len(plot.times))
    ax.plot(x, plot.truth, color="black", linewidth=1.6, label="vehicle flow (held out)")
    ax.plot(x, plot.pred_fusion, color="tab:blue", linewidth=1.2, label="with fusion")
    ax.plot(x, plot.pred_baseline, color="tab:orange", linewidth=1.2,
            linestyle="--", label="without fusion")
    ticks = x[:: max(1, len(x) // 12)]
    ax.set_xticks(ticks)
    ax.set_xticklabels([plot.times[i] for i in ticks], rotation=45, fontsize=8)
    ax.set_ylabel("vehicles per interval")
    ax.set_title(f"node {plot.node_id} on {plot.day}, "
                 f"{plot.horizon}-step-ahead predictions vs camera {plot.camera_id}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=110, metadata={"Software": None})
