"""Stage 2: per-channel graph attention that fuses each cellular-traffic
feature with all vehicle-flow features, a third prediction network over
the fused features, and the dynamic two-part loss.

Attention is computed independently per feature channel. Uniform weights
across channels would wash out patterns confined to a single channel;
keeping channels separate is the point of this fusion. For node n the
candidate set is n itself plus every vehicle node whose mapped segment
has nonzero graph weight to n; a node with no such neighbor falls back
to attending over all vehicle nodes.

The training loss is ``total = loss_with + balance * loss_without``
where ``loss_with`` scores camera-equipped nodes against vehicle flows,
``loss_without`` scores camera-free nodes against raw cellular-traffic
flows as a weak prior, and ``balance`` is a learnable non-negative
weight (softplus reparameterized, initialized to 1e-4 by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import stgnn
from .flowdata import CameraMapping
from .graphspec import GraphSpec, restrict

MASK_BIAS = -1e30  # additive mask; exp underflows to exactly 0 after softmax shift

DEFAULT_BALANCE_INIT = 1e-4  # documented alternative: 1e-5


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    channels: int
    feature_dim: int
    attention_dim: int | None = None  # defaults to feature_dim
    leaky_slope: float = 0.2
    heads: int = 1

    def __post_init__(self):
        if self.attention_dim is None:
            object.__setattr__(self, "attention_dim", self.feature_dim)
        if self.attention_dim != self.feature_dim:
            # fused features feed the stage-2 predictor as [K x N x D]
            raise FusionError(
                f"attention_dim {self.attention_dim} must equal feature_dim "
                f"{self.feature_dim} so fused maps keep the stage-1 width"
            )
        if self.channels < 1 or self.heads < 1:
            raise FusionError("channels and heads must be >= 1")


@dataclass
class FusionBatch:
    gct_features: np.ndarray  # [K, N, D] or [B, K, N, D]
    vehicle_features: np.ndarray  # [K, M, D] or [B, K, M, D]
    graph: GraphSpec
    camera_mapping: CameraMapping  # retained cameras, in vehicle-feature order

    def batched(self) -> tuple[np.ndarray, np.ndarray]:
        g, v = self.gct_features, self.vehicle_features
        if g.ndim == 3:
            g = g[None]
        if v.ndim == 3:
            v = v[None]
        return g, v


@dataclass
class LossBreakdown:
    loss_with: float
    loss_without: float
    balance: float
    total: float
    total_node: nc.Tensor | None = field(default=None, repr=False, compare=False)

    def composition_holds(self) -> bool:
        """total must equal loss_with + balance * loss_without, bit for bit."""
        return self.total == self.loss_with + self.balance * self.loss_without


@dataclass
class PredictionBatch:
    combined: nc.Tensor  # [B, N, T_out], raw scale, node order
    camera_indices: list[int]
    free_indices: list[int]
    with_cameras: nc.Tensor  # [B, M, T_out]
    without_cameras: nc.Tensor  # [B, N-M, T_out]


# ---------------------------------------------------------------------------
# Attention


def candidate_mask(graph: GraphSpec, mapping: CameraMapping) -> np.ndarray:
    """[N, M+1] additive bias: column 0 is self (always open), column m+1
    opens vehicle node m when its segment has nonzero weight to the row
    node; rows with no open vehicle column fall back to all of them."""
    n = graph.n_nodes
    m = len(mapping.entries)
    seg_idx = [graph.node_ids.index(str(seg)) for _, seg in mapping.entries]
    bias = np.full((n, m + 1), MASK_BIAS)
    bias[:, 0] = 0.0
    for j, s in enumerate(seg_idx):
        bias[graph.weights[:, s] > 0, j + 1] = 0.0
    if m:
        isolated = (bias[:, 1:] == MASK_BIAS).all(axis=1)
        bias[isolated, 1:] = 0.0
    return bias


def init_attention(config: FusionConfig, rng: np.random.Generator) -> dict[str, nc.Tensor]:
    params: dict[str, nc.Tensor] = {}
    k, d, da = config.channels, config.feature_dim, config.attention_dim
    for h in range(config.heads):
        params[f"att.h{h}.w"] = nc.glorot_init((k, d, da), rng)
        params[f"att.h{h}.a_src"] = nc.glorot_init((k, da, 1), rng)
        params[f"att.h{h}.a_dst"] = nc.glorot_init((k, da, 1), rng)
    return params


def _fuse_head(hg, hv, w, a_src, a_dst, mask_bias, slope, m):
    pg = nc.matmul(hg, w)  # [B, K, N, Da]
    if m == 0:
        return pg, None
    pv = nc.matmul(hv, w)  # [B, K, M, Da]
    s_src = nc.matmul(pg, a_src)  # [B, K, N, 1]
    s_self = nc.matmul(pg, a_dst)  # [B, K, N, 1]
    s_veh = nc.transpose(nc.matmul(pv, a_dst), (0, 1, 3, 2))  # [B, K, 1, M]
    e_self = nc.leaky_relu(nc.add(s_src, s_self), slope)
    e_cross = nc.leaky_relu(nc.add(s_src, s_veh), slope)
    scores = nc.add(nc.concat([e_self, e_cross], axis=-1), nc.Tensor(mask_bias))
    alpha = nc.softmax(scores, axis=-1)  # [B, K, N, M+1]
    fused = nc.add(
        nc.mul(nc.take_slice(alpha, (Ellipsis, slice(0, 1))), pg),
        nc.matmul(nc.take_slice(alpha, (Ellipsis, slice(1, None))), pv),
    )
    return fused, alpha


def fuse_features(
    batch: FusionBatch,
    params: dict[str, nc.Tensor],
    config: FusionConfig,
    mask_bias: np.ndarray | None = None,
) -> nc.Tensor:
    """All nodes at once: [B, K, N, D] fused features."""
    g, v = batch.batched()
    if g.shape[1] != config.channels or g.shape[3] != config.feature_dim:
        raise FusionError(
            f"feature shape {g.shape[1:]} does not match config "
            f"[{config.channels} x - x {config.feature_dim}]"
        )
    if mask_bias is None:
        mask_bias = candidate_mask(batch.graph, batch.camera_mapping)
    m = v.shape[2]
    hg, hv = nc.Tensor(g), nc.Tensor(v)
    heads = []
    for h in range(config.heads):
        fused, _ = _fuse_head(
            hg, hv,
            params[f"att.h{h}.w"], params[f"att.h{h}.a_src"], params[f"att.h{h}.a_dst"],
            mask_bias, config.leaky_slope, m,
        )
        heads.append(fused)
    out = heads[0]
    for extra in heads[1:]:
        out = nc.add(out, extra)
    if config.heads > 1:
        out = nc.mul(out, 1.0 / config.heads)
    return out


def fuse_node(
    batch: FusionBatch,
    n: int,
    params: dict[str, nc.Tensor],
    config: FusionConfig,
) -> tuple[np.ndarray, list[np.ndarray], list[int]]:
    """Reference per-node fusion in plain numpy.

    Returns (fused [K, D], per-channel attention vectors over the
    candidate set, candidate vehicle indices). Used as the slow
    cross-check for :func:`fuse_features`.
    """
    g, v = batch.batched()
    if n >= g.shape[2]:
        raise FusionError(f"node index {n} out of range for {g.shape[2]} nodes")
    mask = candidate_mask(batch.graph, batch.camera_mapping)
    cand = [j for j in range(v.shape[2]) if mask[n, j + 1] == 0.0]
    hg = g[0, :, n, :]  # [K, D]
    k = config.channels
    fused = np.zeros((k, config.attention_dim))
    alphas: list[np.ndarray] = []
    for ch in range(k):
        head_out = np.zeros(config.attention_dim)
        head_alphas = []
        for h in range(config.heads):
            w = params[f"att.h{h}.w"].values[ch]
            a_src = params[f"att.h{h}.a_src"].values[ch, :, 0]
            a_dst = params[f"att.h{h}.a_dst"].values[ch, :, 0]
            pg = hg[ch] @ w
            projections = [pg] + [v[0, ch, j, :] @ w for j in cand]
            scores = []
            for proj in projections:
                e = pg @ a_src + proj @ a_dst
                scores.append(e if e > 0 else config.leaky_slope * e)
            scores = np.asarray(scores)
            ex = np.exp(scores - scores.max())
            alpha = ex / ex.sum()
            head_alphas.append(alpha)
            head_out = head_out + sum(a * p for a, p in zip(alpha, projections))
        fused[ch] = head_out / config.heads
        alphas.append(head_alphas[0] if config.heads == 1 else np.mean(head_alphas, axis=0))
    return fused, alphas, cand


# ---------------------------------------------------------------------------
# Stage-2 model


@dataclass
class Stage2Model:
    fusion_cfg: FusionConfig
    stgnn3: stgnn.StgnnModel
    params: dict[str, nc.Tensor]  # attention + projection + balance + stgnn3.*
    mask_bias: np.ndarray
    camera_indices: list[int]
    free_indices: list[int]
    output_mean: float
    output_std: float
    node_ids: list[str]
    camera_ids: list[str]


def theta_for_balance(balance: float) -> float:
    """Inverse softplus: softplus(theta) == balance."""
    return math.log(math.expm1(balance))


def init_stage2(
    gct_model: stgnn.StgnnModel,
    veh_model: stgnn.StgnnModel,
    graph: GraphSpec,
    mapping: CameraMapping,
    fusion_cfg: FusionConfig,
    stgnn3_cfg: stgnn.StgnnConfig,
    rng: np.random.Generator,
    output_mean: float,
    output_std: float,
    balance_init: float = DEFAULT_BALANCE_INIT,
) -> Stage2Model:
    for name, model in (("gct", gct_model), ("vehicle", veh_model)):
        if model.config.channels != fusion_cfg.channels:
            raise FusionError(
                f"{name} extractor has {model.config.channels} channels, "
                f"fusion expects {fusion_cfg.channels}"
            )
        if model.config.feature_width != fusion_cfg.feature_dim:
            raise FusionError(
                f"{name} extractor feature width {model.config.feature_width} "
                f"!= fusion feature_dim {fusion_cfg.feature_dim}"
            )
    if not mapping.entries:
        raise FusionError("camera set is empty; the task requires M >= 1")
    if stgnn3_cfg.n_nodes != graph.n_nodes:
        raise FusionError(
            f"stage-2 predictor sized for {stgnn3_cfg.n_nodes} nodes, graph has {graph.n_nodes}"
        )
    params = init_attention(fusion_cfg, rng)
    kd = fusion_cfg.channels * fusion_cfg.attention_dim
    params["proj.w"] = nc.glorot_init((kd, stgnn3_cfg.in_steps), rng)
    params["proj.b"] = nc.zeros_init((stgnn3_cfg.in_steps,))
    params["balance.theta"] = nc.Tensor(theta_for_balance(balance_init), requires_grad=True)
    predictor = stgnn.init_stgnn(stgnn3_cfg, rng)
    for name, p in predictor.params.items():
        params[f"stgnn3.{name}"] = p
    camera_indices = [graph.node_ids.index(str(seg)) for _, seg in mapping.entries]
    free_indices = [i for i in range(graph.n_nodes) if i not in set(camera_indices)]
    return Stage2Model(
        fusion_cfg=fusion_cfg,
        stgnn3=predictor,
        params=params,
        mask_bias=candidate_mask(graph, mapping),
        camera_indices=camera_indices,
        free_indices=free_indices,
        output_mean=float(output_mean),
        output_std=float(output_std),
        node_ids=list(graph.node_ids),
        camera_ids=mapping.camera_ids,
    )


def stage2_forward(batch: FusionBatch, model: Stage2Model, graph: GraphSpec) -> PredictionBatch:
    """Fused features through the stage-2 predictor; raw-scale output
    split into camera and camera-free parts in node order."""
    if not model.camera_indices:
        raise FusionError("camera set is empty; the task requires M >= 1")
    fused = fuse_features(batch, model.params, model.fusion_cfg, model.mask_bias)
    b, k, n, d = fused.values.shape
    flat = nc.reshape(nc.transpose(fused, (0, 2, 1, 3)), (b, n, k * d))
    lifted = nc.add(nc.matmul(flat, model.params["proj.w"]), model.params["proj.b"])
    pred = stgnn.forward_batch(model.stgnn3, lifted, graph)
    raw = nc.add(nc.mul(pred, model.output_std), model.output_mean)
    return PredictionBatch(
        combined=raw,
        camera_indices=list(model.camera_indices),
        free_indices=list(model.free_indices),
        with_cameras=nc.take(raw, model.camera_indices, axis=1),
        without_cameras=nc.take(raw, model.free_indices, axis=1),
    )


def dynamic_loss(pred: PredictionBatch, y_veh: np.ndarray, y_gct: np.ndarray,
                 theta: nc.Tensor) -> LossBreakdown:
    """Two-part MAE with a learnable non-negative balance weight."""
    for name, target in (("vehicle", y_veh), ("gct", y_gct)):
        if np.isnan(target).any():
            where = tuple(int(i) for i in np.argwhere(np.isnan(target))[0])
            raise FusionError(f"NaN in {name} targets at index {where}")
    if pred.with_cameras.values.shape != y_veh.shape:
        raise FusionError(
            f"camera-node prediction shape {pred.with_cameras.values.shape} "
            f"!= target shape {y_veh.shape}"
        )
    if pred.without_cameras.values.shape != y_gct.shape:
        raise FusionError(
            f"camera-free prediction shape {pred.without_cameras.values.shape} "
            f"!= target shape {y_gct.shape}"
        )
    l_w = nc.reduce_mean(nc.absolute(nc.sub(pred.with_cameras, nc.Tensor(y_veh))))
    l_wo = nc.reduce_mean(nc.absolute(nc.sub(pred.without_cameras, nc.Tensor(y_gct))))
    balance = nc.softplus(theta)
    total = nc.add(l_w, nc.mul(balance, l_wo))
    return LossBreakdown(
        loss_with=l_w.item(),
        loss_without=l_wo.item(),
        balance=balance.item(),
        total=total.item(),
        total_node=total,
    )


# ---------------------------------------------------------------------------
# Stage-2 training


@dataclass
class Stage2Data:
    """Raw-scale aligned windows for stage-2 training.

    ``lineage`` carries (source, node) tags for every series present, so
    fold-exclusion hygiene can assert the withheld camera never reaches a
    training batch.
    """

    train_gct_inputs: np.ndarray  # [W, N, T_in]
    train_veh_inputs: np.ndarray  # [W, M, T_in]
    train_veh_targets: np.ndarray  # [W, M, T_out]
    train_gct_targets: np.ndarray  # [W, N-M, T_out]
    val_gct_inputs: np.ndarray
    val_veh_inputs: np.ndarray
    val_veh_targets: np.ndarray
    val_gct_targets: np.ndarray
    output_mean: float
    output_std: float
    lineage: frozenset = frozenset()


@dataclass
class Stage2History:
    steps: list[LossBreakdown] = field(default_factory=list)
    val_loss_with: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    hygiene_checked_batches: int = 0


def _extract_split(model, inputs, graph, batch_size=512):
    norm = model.normalizer
    x = (inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    parts = [
        stgnn.extract_feature_array(model, x[lo:hi], graph)
        for lo, hi in stgnn._batch_ranges(len(x), batch_size)
    ]
    return np.concatenate(parts, axis=0)


def train_stage2(
    gct_model: stgnn.StgnnModel,
    veh_model: stgnn.StgnnModel,
    graph: GraphSpec,
    mapping: CameraMapping,
    data: Stage2Data,
    stgnn3_cfg: stgnn.StgnnConfig,
    seed: int,
    train_cfg: stgnn.TrainConfig = stgnn.TrainConfig(),
    balance_init: float = DEFAULT_BALANCE_INIT,
    forbidden_lineage: frozenset = frozenset(),
) -> tuple[Stage2Model, Stage2History]:
    """Adam on the fusion attention, projection, predictor, and balance
    weight; stage-1 models stay frozen (checksum-verified). Model
    selection uses the camera-node loss only."""
    if not (gct_model.frozen and veh_model.frozen):
        raise FusionError("stage-1 models must be frozen before stage-2 training")
    if forbidden_lineage & data.lineage:
        raise FusionError(
            f"withheld series present in training data: {sorted(forbidden_lineage & data.lineage)}"
        )
    checksum_gct = stgnn.param_checksum(gct_model.params)
    checksum_veh = stgnn.param_checksum(veh_model.params)

    fusion_cfg = FusionConfig(
        channels=gct_model.config.channels,
        feature_dim=gct_model.config.feature_width,
    )
    rng = nc.seeded_rng(seed)
    model = init_stage2(
        gct_model, veh_model, graph, mapping, fusion_cfg, stgnn3_cfg, rng,
        data.output_mean, data.output_std, balance_init,
    )

    veh_graph = restrict(graph, [str(seg) for _, seg in mapping.entries])
    feats = {
        "train_g": _extract_split(gct_model, data.train_gct_inputs, graph),
        "train_v": _extract_split(veh_model, data.train_veh_inputs, veh_graph),
        "val_g": _extract_split(gct_model, data.val_gct_inputs, graph),
        "val_v": _extract_split(veh_model, data.val_veh_inputs, veh_graph),
    }

    state = nc.init_adam(model.params, lr=train_cfg.lr)
    history = Stage2History()
    best_values: dict[str, np.ndarray] = {}
    stale = 0
    step = 0
    for epoch in range(train_cfg.max_epochs):
        perm = rng.permutation(len(feats["train_g"]))
        for lo, hi in stgnn._batch_ranges(len(perm), train_cfg.batch_size):
            idx = perm[lo:hi]
            # every batch draws from the tagged training arrays; a withheld
            # camera must never appear here
            if forbidden_lineage & data.lineage:
                raise FusionError("withheld series leaked into a training batch")
            history.hygiene_checked_batches += 1
            batch = FusionBatch(feats["train_g"][idx], feats["train_v"][idx], graph, mapping)
            pred = stage2_forward(batch, model, graph)
            breakdown = dynamic_loss(
                pred, data.train_veh_targets[idx], data.train_gct_targets[idx],
                model.params["balance.theta"],
            )
            step += 1
            if not np.isfinite(breakdown.total):
                raise stgnn.TrainingError(f"non-finite stage-2 loss at step {step}")
            nc.backward(breakdown.total_node)
            nc.adam_step(model.params, {n: nc.grad_of(p) for n, p in model.params.items()}, state)
            nc.reset_tape(model.params.values())
            breakdown.total_node = None  # history keeps numbers, not graph nodes
            history.steps.append(breakdown)

        val_lw = _stage2_val_loss_with(model, feats["val_g"], feats["val_v"],
                                       data.val_veh_targets, graph, mapping)
        history.val_loss_with.append(val_lw)
        if val_lw < history.best_val:
            history.best_val = val_lw
            history.best_epoch = epoch
            best_values = {n: p.values.copy() for n, p in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                break
    for name, values in best_values.items():
        model.params[name].values = values

    if stgnn.param_checksum(gct_model.params) != checksum_gct:
        raise FusionError("stage-1 gct extractor changed during stage-2 training")
    if stgnn.param_checksum(veh_model.params) != checksum_veh:
        raise FusionError("stage-1 vehicle extractor changed during stage-2 training")
    return model, history


def _stage2_val_loss_with(model, feat_g, feat_v, veh_targets, graph, mapping,
                          batch_size: int = 256) -> float:
    errs = []
    with nc.pause_recording():
        for lo, hi in stgnn._batch_ranges(len(feat_g), batch_size):
            batch = FusionBatch(feat_g[lo:hi], feat_v[lo:hi], graph, mapping)
            pred = stage2_forward(batch, model, graph)
            errs.append(np.abs(pred.with_cameras.values - veh_targets[lo:hi]).reshape(-1))
    return float(np.concatenate(errs).mean())


def stage2_predict(
    model: Stage2Model,
    gct_model: stgnn.StgnnModel,
    veh_model: stgnn.StgnnModel,
    gct_inputs: np.ndarray,
    veh_inputs: np.ndarray,
    graph: GraphSpec,
    mapping: CameraMapping,
    batch_size: int = 256,
) -> np.ndarray:
    """Raw-scale combined predictions [W, N, T_out] for raw input windows."""
    veh_graph = restrict(graph, [str(seg) for _, seg in mapping.entries])
    feat_g = _extract_split(gct_model, gct_inputs, graph)
    feat_v = _extract_split(veh_model, veh_inputs, veh_graph)
    outs = []
    with nc.pause_recording():
        for lo, hi in stgnn._batch_ranges(len(feat_g), batch_size):
            batch = FusionBatch(feat_g[lo:hi], feat_v[lo:hi], graph, mapping)
            outs.append(stage2_forward(batch, model, graph).combined.values)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Stage-2 checkpoints


def save_stage2(model: Stage2Model, path, fingerprint: str = "") -> None:
    tensors: dict[str, np.ndarray] = {n: p.values for n, p in model.params.items()}
    tensors["meta.output_scale"] = np.array([model.output_mean, model.output_std])
    tensors["meta.mask_bias"] = model.mask_bias
    lines = [
        f"fusion.channels={model.fusion_cfg.channels}",
        f"fusion.feature_dim={model.fusion_cfg.feature_dim}",
        f"fusion.leaky_slope={model.fusion_cfg.leaky_slope!r}",
        f"fusion.heads={model.fusion_cfg.heads}",
        "meta.node_ids=" + ",".join(model.node_ids),
        "meta.camera_ids=" + ",".join(model.camera_ids),
        "meta.camera_indices=" + ",".join(str(i) for i in model.camera_indices),
        stgnn._config_text(model.stgnn3.config, "stage2-predictor"),
    ]
    nc.save_checkpoint(path, tensors, "\n".join(lines), fingerprint)


def load_stage2(path) -> tuple[Stage2Model, str]:
    tensors, config_text, fingerprint = nc.load_checkpoint(path)
    kv = dict(line.split("=", 1) for line in config_text.splitlines() if line)
    fusion_cfg = FusionConfig(
        channels=int(kv["fusion.channels"]),
        feature_dim=int(kv["fusion.feature_dim"]),
        leaky_slope=float(kv["fusion.leaky_slope"]),
        heads=int(kv["fusion.heads"]),
    )
    stgnn3_cfg = stgnn.StgnnConfig(
        n_nodes=int(kv["arch.n_nodes"]),
        in_steps=int(kv["arch.in_steps"]),
        out_steps=int(kv["arch.out_steps"]),
        channels=int(kv["arch.channels"]),
        layers=int(kv["arch.layers"]),
        kernel_size=int(kv["arch.kernel_size"]),
        dilation_schedule=tuple(int(d) for d in kv["arch.dilations"].split(",")),
        use_adaptive_adjacency=kv["arch.adaptive"] == "true",
        embedding_dim=int(kv["arch.embedding_dim"]),
    )
    out_mean, out_std = tensors.pop("meta.output_scale")
    mask_bias = tensors.pop("meta.mask_bias")
    params = {n: nc.Tensor(v, requires_grad=True) for n, v in tensors.items()}
    predictor = stgnn.StgnnModel(
        stgnn3_cfg,
        {n[len("stgnn3."):]: p for n, p in params.items() if n.startswith("stgnn3.")},
    )
    camera_indices = [int(i) for i in kv["meta.camera_indices"].split(",")]
    node_ids = kv["meta.node_ids"].split(",")
    model = Stage2Model(
        fusion_cfg=fusion_cfg,
        stgnn3=predictor,
        params=params,
        mask_bias=mask_bias,
        camera_indices=camera_indices,
        free_indices=[i for i in range(len(node_ids)) if i not in set(camera_indices)],
        output_mean=float(out_mean),
        output_std=float(out_std),
        node_ids=node_ids,
        camera_ids=kv["meta.camera_ids"].split(","),
    )
    return model, fingerprint
