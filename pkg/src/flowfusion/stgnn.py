"""Spatio-temporal graph network: gated dilated temporal convolutions,
graph convolution over a fixed distance graph plus a learned adaptive
adjacency, residual and skip connections, and a linear output head.

The same architecture is used three ways: as the cellular-traffic
feature extractor, as the vehicle-flow feature extractor, and as the
second-stage predictor that consumes fused features. Extractors expose
the pre-head skip representation, a [channels x nodes x width] feature
map.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .flowdata import FlowKind, Normalizer
from .graphspec import GraphSpec, row_normalize


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StgnnConfig:
    n_nodes: int
    in_steps: int = 12
    out_steps: int = 12
    channels: int = 16
    layers: int = 4
    kernel_size: int = 2
    dilation_schedule: tuple[int, ...] = (1, 2, 2, 4)
    use_adaptive_adjacency: bool = True
    embedding_dim: int = 8

    def __post_init__(self):
        if self.channels < 1 or self.layers < 1:
            raise ModelError("channels and layers must be >= 1")
        if len(self.dilation_schedule) != self.layers:
            raise ModelError(
                f"dilation schedule {self.dilation_schedule} does not match "
                f"{self.layers} layers"
            )
        # receptive field must fit in the input window, checked here and
        # never at forward time
        if self.receptive_field > self.in_steps:
            raise ModelError(
                f"receptive field {self.receptive_field} exceeds input window "
                f"{self.in_steps} (kernel {self.kernel_size}, dilations "
                f"{self.dilation_schedule})"
            )

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilation_schedule)

    @property
    def feature_width(self) -> int:
        """Temporal width left after the conv stack (the D of [K x N x D])."""
        return self.in_steps - (self.receptive_field - 1)


@dataclass
class FeatureMap:
    values: np.ndarray  # [channels, nodes, width]
    source: FlowKind
    node_ids: list[str]


@dataclass
class StgnnModel:
    config: StgnnConfig
    params: dict[str, nc.Tensor]
    frozen: bool = False
    normalizer: Normalizer | None = None


def init_stgnn(config: StgnnConfig, rng: np.random.Generator) -> StgnnModel:
    k = config.channels
    params: dict[str, nc.Tensor] = {
        "in.w": nc.glorot_init((k, 1), rng),
        "in.b": nc.zeros_init((k,)),
    }
    for l in range(config.layers):
        p = f"layer{l:02d}"
        params[f"{p}.filter.w"] = nc.glorot_init((k, k, config.kernel_size), rng)
        params[f"{p}.filter.b"] = nc.zeros_init((k,))
        params[f"{p}.gate.w"] = nc.glorot_init((k, k, config.kernel_size), rng)
        params[f"{p}.gate.b"] = nc.zeros_init((k,))
        params[f"{p}.skip.w"] = nc.glorot_init((k, k), rng)
        params[f"{p}.mix_self.w"] = nc.glorot_init((k, k), rng)
        params[f"{p}.mix_dist.w"] = nc.glorot_init((k, k), rng)
        if config.use_adaptive_adjacency:
            params[f"{p}.mix_adapt.w"] = nc.glorot_init((k, k), rng)
        params[f"{p}.mix.b"] = nc.zeros_init((k,))
    if config.use_adaptive_adjacency:
        params["adapt.src"] = nc.glorot_init((config.n_nodes, config.embedding_dim), rng)
        params["adapt.dst"] = nc.glorot_init((config.n_nodes, config.embedding_dim), rng)
    params["head.w"] = nc.glorot_init((k * config.feature_width, config.out_steps), rng)
    params["head.b"] = nc.zeros_init((config.out_steps,))
    return StgnnModel(config, params)


def _channel_mix(x: nc.Tensor, w: nc.Tensor, b: nc.Tensor | None = None) -> nc.Tensor:
    """1x1 convolution over the channel axis of [B, N, C, T]: w is [C_out, C_in]."""
    y = nc.matmul(w, x)
    if b is not None:
        y = nc.add(y, nc.reshape(b, (-1, 1)))
    return y


def _node_mix(x: nc.Tensor, adj: nc.Tensor) -> nc.Tensor:
    """Mix node axis of [B, N, C, T] with an [N, N] operator."""
    b, n, c, t = x.values.shape
    flat = nc.reshape(x, (b, n, c * t))
    mixed = nc.matmul(adj, flat)
    return nc.reshape(mixed, (b, n, c, t))


def adaptive_adjacency(model: StgnnModel) -> nc.Tensor:
    """softmax(relu(src @ dst^T)) rows form a probability simplex."""
    logits = nc.relu(nc.matmul(model.params["adapt.src"],
                               nc.transpose(model.params["adapt.dst"], (1, 0))))
    return nc.softmax(logits, axis=1)


def _normalized_graph(model: StgnnModel, graph: GraphSpec) -> nc.Tensor:
    if graph.n_nodes != model.config.n_nodes:
        raise ModelError(
            f"graph has {graph.n_nodes} nodes, model expects {model.config.n_nodes}"
        )
    return nc.Tensor(row_normalize(graph).weights)


def _backbone(model: StgnnModel, x: nc.Tensor, dist_adj: nc.Tensor) -> nc.Tensor:
    """Input [B, N, 1, T_in] to pre-head skip sum [B, N, K, D]."""
    cfg = model.config
    p = model.params
    d_final = cfg.feature_width
    adp = adaptive_adjacency(model) if cfg.use_adaptive_adjacency else None

    x = _channel_mix(x, p["in.w"], p["in.b"])
    skip_sum = None
    for l, dilation in enumerate(cfg.dilation_schedule):
        pre = f"layer{l:02d}"
        filt = nc.tanh(nc.add(
            nc.dilated_causal_conv1d(x, p[f"{pre}.filter.w"], dilation),
            nc.reshape(p[f"{pre}.filter.b"], (-1, 1)),
        ))
        gate = nc.sigmoid(nc.add(
            nc.dilated_causal_conv1d(x, p[f"{pre}.gate.w"], dilation),
            nc.reshape(p[f"{pre}.gate.b"], (-1, 1)),
        ))
        h = nc.mul(filt, gate)
        t_here = h.values.shape[-1]

        skip = _channel_mix(h, p[f"{pre}.skip.w"])
        skip = nc.take_slice(skip, (Ellipsis, slice(t_here - d_final, None)))
        skip_sum = skip if skip_sum is None else nc.add(skip_sum, skip)

        gc = nc.add(
            _channel_mix(h, p[f"{pre}.mix_self.w"]),
            _channel_mix(_node_mix(h, dist_adj), p[f"{pre}.mix_dist.w"]),
        )
        if adp is not None:
            gc = nc.add(gc, _channel_mix(_node_mix(h, adp), p[f"{pre}.mix_adapt.w"]))
        gc = nc.add(gc, nc.reshape(p[f"{pre}.mix.b"], (-1, 1)))
        residual = nc.take_slice(x, (Ellipsis, slice(x.values.shape[-1] - t_here, None)))
        x = nc.add(gc, residual)
    return skip_sum


def _head(model: StgnnModel, skip_sum: nc.Tensor) -> nc.Tensor:
    b, n, k, d = skip_sum.values.shape
    flat = nc.reshape(nc.relu(skip_sum), (b, n, k * d))
    return nc.add(nc.matmul(flat, model.params["head.w"]), model.params["head.b"])


def forward_batch(model: StgnnModel, inputs, graph: GraphSpec) -> nc.Tensor:
    """Normalized inputs [B, N, T_in] to predictions [B, N, T_out]."""
    x = nc.as_tensor(inputs)
    b, n, t = x.values.shape
    if n != model.config.n_nodes or t != model.config.in_steps:
        raise ModelError(
            f"input shape {x.values.shape} does not match model "
            f"[{model.config.n_nodes} x {model.config.in_steps}]"
        )
    dist_adj = _normalized_graph(model, graph)
    return _head(model, _backbone(model, nc.reshape(x, (b, n, 1, t)), dist_adj))


def forward(model: StgnnModel, inputs, graph: GraphSpec) -> nc.Tensor:
    """Single window [N, T_in] to [N, T_out]."""
    x = nc.as_tensor(inputs)
    out = forward_batch(model, nc.reshape(x, (1,) + x.values.shape), graph)
    return nc.reshape(out, out.values.shape[1:])


def extract_feature_array(model: StgnnModel, inputs: np.ndarray, graph: GraphSpec) -> np.ndarray:
    """Batched feature extraction: [B, N, T_in] -> [B, K, N, D].

    Requires a frozen model; records nothing on the tape.
    """
    if not model.frozen:
        raise ModelError("feature extraction requires a frozen model")
    before = nc.tape_size()
    with nc.pause_recording():
        b, n, t = inputs.shape
        dist_adj = _normalized_graph(model, graph)
        x = nc.reshape(nc.Tensor(inputs), (b, n, 1, t))
        skip = _backbone(model, x, dist_adj)
    assert nc.tape_size() == before, "feature extraction must not record"
    return np.ascontiguousarray(skip.values.transpose(0, 2, 1, 3))


def extract_features(model: StgnnModel, inputs, graph: GraphSpec, source: FlowKind | None = None) -> FeatureMap:
    """One window [N, T_in] to a FeatureMap [K x N x D]."""
    arr = np.asarray(inputs, dtype=np.float64)
    feats = extract_feature_array(model, arr[None, :, :], graph)[0]
    kind = source if source is not None else FlowKind.GCT
    return FeatureMap(feats, kind, list(graph.node_ids))


def param_checksum(params: dict[str, nc.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].values).tobytes())
    return digest.hexdigest()


def freeze(model: StgnnModel) -> StgnnModel:
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    model.frozen = True
    return model


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 8


@dataclass
class SplitData:
    """Raw-scale windows plus the normalizer fitted on the training rows."""

    train_inputs: np.ndarray  # [W, N, T_in]
    train_targets: np.ndarray  # [W, N, T_out]
    val_inputs: np.ndarray
    val_targets: np.ndarray
    normalizer: Normalizer


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_maes: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")


def _batch_ranges(count: int, batch_size: int):
    for lo in range(0, count, batch_size):
        yield lo, min(lo + batch_size, count)


def train_stage1(
    data: SplitData,
    graph: GraphSpec,
    config: StgnnConfig,
    seed: int,
    train_cfg: TrainConfig = TrainConfig(),
) -> tuple[StgnnModel, TrainHistory]:
    """Minimize MAE between denormalized predictions and raw targets;
    early-stop on validation MAE and return the best checkpoint, frozen."""
    if len(data.train_inputs) == 0 or len(data.val_inputs) == 0:
        raise TrainingError("empty train or validation window set")
    rng = nc.seeded_rng(seed)
    model = init_stgnn(config, rng)
    norm = data.normalizer
    x_train = (data.train_inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    x_val = (data.val_inputs - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    mean_row = nc.Tensor(norm.per_node_mean[:, None])
    std_row = nc.Tensor(norm.per_node_std[:, None])

    state = nc.init_adam(model.params, lr=train_cfg.lr)
    history = TrainHistory()
    best_values: dict[str, np.ndarray] = {}
    stale = 0
    step = 0
    for epoch in range(train_cfg.max_epochs):
        perm = rng.permutation(len(x_train))
        epoch_losses = []
        for lo, hi in _batch_ranges(len(perm), train_cfg.batch_size):
            idx = perm[lo:hi]
            pred = forward_batch(model, nc.Tensor(x_train[idx]), graph)
            pred_raw = nc.add(nc.mul(pred, std_row), mean_row)
            loss = nc.reduce_mean(nc.absolute(nc.sub(pred_raw, nc.Tensor(data.train_targets[idx]))))
            value = loss.item()
            step += 1
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at step {step}")
            nc.backward(loss)
            nc.adam_step(model.params, {n: nc.grad_of(p) for n, p in model.params.items()}, state)
            nc.reset_tape(model.params.values())
            epoch_losses.append(value)
        history.train_losses.append(float(np.mean(epoch_losses)))

        val_mae = _validation_mae(model, x_val, data.val_targets, graph, norm)
        history.val_maes.append(val_mae)
        if val_mae < history.best_val_mae:
            history.best_val_mae = val_mae
            history.best_epoch = epoch
            best_values = {n: p.values.copy() for n, p in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                break
    for name, values in best_values.items():
        model.params[name].values = values
    freeze(model)
    model.normalizer = norm
    return model, history


def _validation_mae(model, x_val, val_targets, graph, norm, batch_size: int = 256) -> float:
    errs = []
    with nc.pause_recording():
        for lo, hi in _batch_ranges(len(x_val), batch_size):
            pred = forward_batch(model, nc.Tensor(x_val[lo:hi]), graph).values
            pred_raw = pred * norm.per_node_std[:, None] + norm.per_node_mean[:, None]
            errs.append(np.abs(pred_raw - val_targets[lo:hi]).reshape(-1))
    return float(np.concatenate(errs).mean())


def predict(model: StgnnModel, raw_input: np.ndarray, graph: GraphSpec) -> np.ndarray:
    """Raw window [N, T_in] (or [B, N, T_in]) to raw predictions."""
    if model.normalizer is None:
        raise ModelError("model has no attached normalizer")
    norm = model.normalizer
    arr = np.asarray(raw_input, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    x = (arr - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]
    with nc.pause_recording():
        pred = forward_batch(model, nc.Tensor(x), graph).values
    out = pred * norm.per_node_std[:, None] + norm.per_node_mean[:, None]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Checkpoint plumbing


def _config_text(config: StgnnConfig, kind: str) -> str:
    lines = [
        f"arch.kind={kind}",
        f"arch.n_nodes={config.n_nodes}",
        f"arch.in_steps={config.in_steps}",
        f"arch.out_steps={config.out_steps}",
        f"arch.channels={config.channels}",
        f"arch.layers={config.layers}",
        f"arch.kernel_size={config.kernel_size}",
        "arch.dilations=" + ",".join(str(d) for d in config.dilation_schedule),
        f"arch.adaptive={str(config.use_adaptive_adjacency).lower()}",
        f"arch.embedding_dim={config.embedding_dim}",
    ]
    return "\n".join(lines)


def save_stgnn(model: StgnnModel, path, fingerprint: str = "", kind: str = "gct",
               extra_text: str = "") -> None:
    tensors: dict[str, np.ndarray] = {n: p.values for n, p in model.params.items()}
    if model.normalizer is not None:
        tensors["norm.mean"] = model.normalizer.per_node_mean
        tensors["norm.std"] = model.normalizer.per_node_std
    text = _config_text(model.config, kind)
    if extra_text:
        text += "\n" + extra_text
    nc.save_checkpoint(path, tensors, text, fingerprint)


def load_stgnn(path) -> tuple[StgnnModel, dict[str, str], str]:
    """Returns (frozen model, metadata key=value dict, fingerprint)."""
    tensors, config_text, fingerprint = nc.load_checkpoint(path)
    kv = dict(line.split("=", 1) for line in config_text.splitlines() if line)
    config = StgnnConfig(
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
    norm = None
    if "norm.mean" in tensors:
        norm = Normalizer(tensors.pop("norm.mean"), tensors.pop("norm.std"))
    params = {n: nc.Tensor(v) for n, v in tensors.items()}
    model = StgnnModel(config, params, frozen=True, normalizer=norm)
    return model, kv, fingerprint
