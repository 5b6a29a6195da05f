import math

import numpy as np
import pytest

import flowfusion.numcore as nc
from flowfusion import stgnn
from flowfusion.flowdata import FlowKind, Normalizer
from flowfusion.graphspec import GraphSpec


def identity_graph(n):
    return GraphSpec([str(i + 1) for i in range(n)], np.eye(n), True)


def ring_graph(n):
    w = np.eye(n)
    for i in range(n):
        w[i, (i + 1) % n] = w[(i + 1) % n, i] = 0.5
    return GraphSpec([str(i + 1) for i in range(n)], w, True)


def small_config(n_nodes=3, **kw):
    defaults = dict(
        n_nodes=n_nodes, in_steps=6, out_steps=2, channels=2, layers=2,
        kernel_size=2, dilation_schedule=(1, 2), embedding_dim=2,
    )
    defaults.update(kw)
    return stgnn.StgnnConfig(**defaults)


def test_receptive_field_violation_fatal_at_construction():
    with pytest.raises(stgnn.ModelError):
        stgnn.StgnnConfig(n_nodes=4, in_steps=12, out_steps=12, channels=4,
                          layers=4, kernel_size=2, dilation_schedule=(1, 2, 4, 8))
    # the documented default fits: dilations (1,2,2,4) => receptive field 10
    cfg = stgnn.StgnnConfig(n_nodes=4)
    assert cfg.receptive_field == 10 and cfg.feature_width == 3


def test_shape_law_49_nodes():
    cfg = stgnn.StgnnConfig(n_nodes=49, in_steps=12, out_steps=12, channels=4,
                            layers=2, dilation_schedule=(1, 2), embedding_dim=4)
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(0))
    out = stgnn.forward(model, np.zeros((49, 12)), ring_graph(49))
    assert out.values.shape == (49, 12)
    nc.reset_tape()


def test_zero_output_head_gives_zero_predictions():
    cfg = small_config()
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(1))
    model.params["head.w"].values[:] = 0.0
    model.params["head.b"].values[:] = 0.0
    rng = np.random.default_rng(0)
    out = stgnn.forward(model, rng.normal(size=(3, 6)), ring_graph(3))
    assert np.array_equal(out.values, np.zeros((3, 2)))
    nc.reset_tape()


def test_single_node_reduces_to_gated_temporal_conv():
    # K=1, L=1, identity graph: the head sees only the gated conv output
    cfg = stgnn.StgnnConfig(n_nodes=1, in_steps=3, out_steps=1, channels=1,
                            layers=1, kernel_size=2, dilation_schedule=(1,),
                            use_adaptive_adjacency=False, embedding_dim=1)
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(2))
    w = {
        "in.w": 0.8, "in.b": 0.1,
        "filter.w0": 0.5, "filter.w1": -0.3, "filter.b": 0.05,
        "gate.w0": 0.2, "gate.w1": 0.4, "gate.b": -0.1,
        "skip.w": 1.3,
        "head.w0": 0.7, "head.w1": -0.6, "head.b": 0.2,
    }
    p = model.params
    p["in.w"].values[:] = w["in.w"]
    p["in.b"].values[:] = w["in.b"]
    p["layer00.filter.w"].values[0, 0, 0] = w["filter.w0"]
    p["layer00.filter.w"].values[0, 0, 1] = w["filter.w1"]
    p["layer00.filter.b"].values[:] = w["filter.b"]
    p["layer00.gate.w"].values[0, 0, 0] = w["gate.w0"]
    p["layer00.gate.w"].values[0, 0, 1] = w["gate.w1"]
    p["layer00.gate.b"].values[:] = w["gate.b"]
    p["layer00.skip.w"].values[:] = w["skip.w"]
    p["head.w"].values[0, 0] = w["head.w0"]
    p["head.w"].values[1, 0] = w["head.w1"]
    p["head.b"].values[:] = w["head.b"]

    v = [0.4, -0.2, 0.9]
    out = stgnn.forward(model, np.array([v]), identity_graph(1))

    # hand-rolled scalar trace
    x = [w["in.w"] * vi + w["in.b"] for vi in v]
    h = []
    for t in range(2):
        f = math.tanh(w["filter.w0"] * x[t] + w["filter.w1"] * x[t + 1] + w["filter.b"])
        g = 1.0 / (1.0 + math.exp(-(w["gate.w0"] * x[t] + w["gate.w1"] * x[t + 1] + w["gate.b"])))
        h.append(f * g)
    s = [max(0.0, w["skip.w"] * hi) for hi in h]
    expected = w["head.w0"] * s[0] + w["head.w1"] * s[1] + w["head.b"]
    assert out.values[0, 0] == pytest.approx(expected, rel=1e-12)
    nc.reset_tape()


from hypothesis import given, settings
from hypothesis import strategies as st


@given(
    n_nodes=st.integers(min_value=1, max_value=6),
    channels=st.integers(min_value=1, max_value=4),
    out_steps=st.integers(min_value=1, max_value=5),
    layers=st.integers(min_value=1, max_value=3),
    adaptive=st.booleans(),
    seed=st.integers(min_value=0, max_value=100),
)
@settings(max_examples=25, deadline=None)
def test_shape_laws_hold_for_random_configs(n_nodes, channels, out_steps, layers,
                                            adaptive, seed):
    dilations = tuple(1 for _ in range(layers))
    in_steps = layers + 3  # keeps the receptive field inside the window
    cfg = stgnn.StgnnConfig(
        n_nodes=n_nodes, in_steps=in_steps, out_steps=out_steps, channels=channels,
        layers=layers, kernel_size=2, dilation_schedule=dilations,
        use_adaptive_adjacency=adaptive, embedding_dim=2,
    )
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(seed))
    graph = identity_graph(n_nodes)
    with nc.pause_recording():
        out = stgnn.forward(model, np.zeros((n_nodes, in_steps)), graph)
    assert out.values.shape == (n_nodes, out_steps)
    feats = stgnn.extract_features(stgnn.freeze(model), np.zeros((n_nodes, in_steps)), graph)
    assert feats.values.shape == (channels, n_nodes, cfg.feature_width)


def test_adaptive_adjacency_rows_are_probability_simplex():
    cfg = small_config(n_nodes=5, embedding_dim=3)
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(3))
    with nc.pause_recording():
        adp = stgnn.adaptive_adjacency(model).values
    assert np.all(adp >= 0)
    assert np.abs(adp.sum(axis=1) - 1.0).max() <= 1e-9


def test_full_model_gradient_check_vs_finite_differences():
    cfg = small_config()
    graph = ring_graph(3)
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(4))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6))
    target = rng.normal(size=(2, 3, 2))

    def loss_value():
        with nc.pause_recording():
            pred = stgnn.forward_batch(model, nc.Tensor(x), graph)
            return float(np.mean(np.abs(pred.values - target)))

    nc.reset_tape()
    pred = stgnn.forward_batch(model, nc.Tensor(x), graph)
    loss = nc.reduce_mean(nc.absolute(nc.sub(pred, nc.Tensor(target))))
    nc.backward(loss)
    grads = {n: nc.grad_of(p).copy() for n, p in model.params.items()}
    nc.reset_tape(model.params.values())

    h = 1e-5
    worst = 0.0
    for name, p in model.params.items():
        flat = p.values.reshape(-1)
        g_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_value()
            flat[i] = orig - h
            lo = loss_value()
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(g_flat[i]), 1e-6)
            worst = max(worst, abs(fd - g_flat[i]) / denom)
    assert worst <= 1e-3, f"worst relative gradient error {worst:.2e}"


def frozen_random_model(cfg, seed=5):
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(seed))
    return stgnn.freeze(model)


def test_extract_features_requires_frozen():
    cfg = small_config()
    model = stgnn.init_stgnn(cfg, nc.seeded_rng(6))
    with pytest.raises(stgnn.ModelError):
        stgnn.extract_features(model, np.zeros((3, 6)), ring_graph(3))


def test_extract_features_deterministic_and_shaped():
    cfg = small_config()
    model = frozen_random_model(cfg)
    graph = ring_graph(3)
    x = np.random.default_rng(2).normal(size=(3, 6))
    a = stgnn.extract_features(model, x, graph, FlowKind.GCT)
    b = stgnn.extract_features(model, x, graph, FlowKind.GCT)
    assert a.values.shape == (2, 3, 3)  # [K, N, D]
    assert np.array_equal(a.values, b.values)
    assert a.source is FlowKind.GCT


def test_extract_features_channels_differ():
    cfg = small_config()
    model = frozen_random_model(cfg, seed=7)
    x = np.random.default_rng(3).normal(size=(3, 6))
    feats = stgnn.extract_features(model, x, ring_graph(3)).values
    assert not np.allclose(feats[0], feats[1])


def test_extract_features_records_nothing():
    cfg = small_config()
    model = frozen_random_model(cfg, seed=8)
    before = nc.tape_size()
    stgnn.extract_feature_array(model, np.zeros((4, 3, 6)), ring_graph(3))
    assert nc.tape_size() == before


# ---------------------------------------------------------------------------
# Training


def constant_split_data(n_nodes=2, value=5.0, windows=24, t_in=4, t_out=2):
    inp = np.full((windows, n_nodes, t_in), value)
    tgt = np.full((windows, n_nodes, t_out), value)
    norm = Normalizer(np.full(n_nodes, value), np.full(n_nodes, 1e-8),
                      flagged_nodes=[str(i + 1) for i in range(n_nodes)])
    return stgnn.SplitData(inp, tgt, inp[:4].copy(), tgt[:4].copy(), norm)


def test_training_constant_flows_reaches_zero_mae():
    cfg = stgnn.StgnnConfig(n_nodes=2, in_steps=4, out_steps=2, channels=2,
                            layers=1, dilation_schedule=(1,), embedding_dim=2)
    data = constant_split_data()
    model, history = stgnn.train_stage1(
        data, ring_graph(2), cfg, seed=0,
        train_cfg=stgnn.TrainConfig(max_epochs=50, batch_size=8),
    )
    assert history.best_val_mae < 1e-6
    assert model.frozen


def sinusoid_split_data(seed=0, nodes=3, steps=240, t_in=8, t_out=4):
    rng = np.random.default_rng(seed)
    t = np.arange(steps)
    base = 50 + 30 * np.sin(2 * np.pi * t / 48.0)
    series = np.stack([base * (1 + 0.2 * i) + rng.normal(0, 1.0, steps) for i in range(nodes)], axis=1)
    series = np.maximum(series, 0)
    split = int(steps * 0.8)
    mean = series[:split].mean(axis=0)
    std = series[:split].std(axis=0)
    norm = Normalizer(mean, np.where(std > 0, std, 1e-8))

    def windows(lo, hi):
        xs, ys = [], []
        for s in range(lo, hi - t_in - t_out + 1):
            xs.append(series[s : s + t_in].T)
            ys.append(series[s + t_in : s + t_in + t_out].T)
        return np.asarray(xs), np.asarray(ys)

    tr_x, tr_y = windows(0, split)
    va_x, va_y = windows(split, steps)
    return stgnn.SplitData(tr_x, tr_y, va_x, va_y, norm)


def test_training_beats_persistence_on_sinusoid():
    from flowfusion.harness import persistence_predictions

    data = sinusoid_split_data()
    cfg = stgnn.StgnnConfig(n_nodes=3, in_steps=8, out_steps=4, channels=4,
                            layers=2, dilation_schedule=(1, 2), embedding_dim=2)
    model, history = stgnn.train_stage1(
        data, ring_graph(3), cfg, seed=1,
        train_cfg=stgnn.TrainConfig(max_epochs=25, batch_size=64, patience=10),
    )
    naive = persistence_predictions(data.val_inputs, data.val_targets.shape[-1])
    baseline = float(np.mean(np.abs(naive - data.val_targets)))
    assert history.best_val_mae < baseline


def test_training_seed_determinism():
    data = sinusoid_split_data(seed=4, steps=120)
    cfg = stgnn.StgnnConfig(n_nodes=3, in_steps=8, out_steps=4, channels=2,
                            layers=1, dilation_schedule=(1,), embedding_dim=2)
    kwargs = dict(train_cfg=stgnn.TrainConfig(max_epochs=4, batch_size=32))
    m1, h1 = stgnn.train_stage1(data, ring_graph(3), cfg, seed=9, **kwargs)
    m2, h2 = stgnn.train_stage1(data, ring_graph(3), cfg, seed=9, **kwargs)
    assert stgnn.param_checksum(m1.params) == stgnn.param_checksum(m2.params)
    assert h1.train_losses == h2.train_losses


def test_divergence_reports_step():
    data = constant_split_data()
    cfg = stgnn.StgnnConfig(n_nodes=2, in_steps=4, out_steps=2, channels=2,
                            layers=1, dilation_schedule=(1,), embedding_dim=2)
    data.train_inputs[0, 0, 0] = np.nan
    with pytest.raises(stgnn.TrainingError):
        stgnn.train_stage1(data, ring_graph(2), cfg, seed=0,
                           train_cfg=stgnn.TrainConfig(max_epochs=1, batch_size=64))


def test_checkpoint_roundtrip(tmp_path):
    data = constant_split_data()
    cfg = stgnn.StgnnConfig(n_nodes=2, in_steps=4, out_steps=2, channels=2,
                            layers=1, dilation_schedule=(1,), embedding_dim=2)
    model, _ = stgnn.train_stage1(data, ring_graph(2), cfg, seed=0,
                                  train_cfg=stgnn.TrainConfig(max_epochs=2, batch_size=8))
    path = tmp_path / "stage1.ckpt"
    stgnn.save_stgnn(model, path, fingerprint="cafe", kind="vehicle",
                     extra_text="meta.cameras=Cam1,Cam2")
    loaded, meta, fp = stgnn.load_stgnn(path)
    assert meta["arch.kind"] == "vehicle" and fp == "cafe"
    assert meta["meta.cameras"] == "Cam1,Cam2"
    assert loaded.config == model.config
    assert stgnn.param_checksum(loaded.params) == stgnn.param_checksum(model.params)
    assert np.array_equal(loaded.normalizer.per_node_mean, model.normalizer.per_node_mean)
    x = np.random.default_rng(5).uniform(0, 10, size=(2, 4))
    assert np.array_equal(stgnn.predict(loaded, x, ring_graph(2)),
                          stgnn.predict(model, x, ring_graph(2)))
