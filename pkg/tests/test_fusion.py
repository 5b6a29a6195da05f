import math

import numpy as np
import pytest

import flowfusion.numcore as nc
from flowfusion import fusion, stgnn
from flowfusion.flowdata import CameraMapping, Normalizer
from flowfusion.graphspec import GraphSpec


def chain_graph(n, weight=0.5):
    w = np.eye(n)
    for i in range(n - 1):
        w[i, i + 1] = w[i + 1, i] = weight
    return GraphSpec([str(i + 1) for i in range(n)], w, True)


def full_graph(n):
    w = np.full((n, n), 0.4)
    np.fill_diagonal(w, 1.0)
    return GraphSpec([str(i + 1) for i in range(n)], w, True)


def small_extractors(n, m, in_steps=6, channels=2, seed=0):
    cfg = lambda nodes: stgnn.StgnnConfig(
        n_nodes=nodes, in_steps=in_steps, out_steps=3, channels=channels,
        layers=2, dilation_schedule=(1, 2), embedding_dim=2,
    )
    gct = stgnn.freeze(stgnn.init_stgnn(cfg(n), nc.seeded_rng(seed)))
    veh = stgnn.freeze(stgnn.init_stgnn(cfg(m), nc.seeded_rng(seed + 1)))
    return gct, veh


def test_config_attention_dim_defaults_and_rejects_mismatch():
    cfg = fusion.FusionConfig(channels=3, feature_dim=5)
    assert cfg.attention_dim == 5
    with pytest.raises(fusion.FusionError):
        fusion.FusionConfig(channels=3, feature_dim=5, attention_dim=4)
    with pytest.raises(fusion.FusionError):
        fusion.FusionConfig(channels=0, feature_dim=5)


def test_candidate_mask_gating_and_fallback():
    graph = chain_graph(5)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2)))
    mask = fusion.candidate_mask(graph, mapping)
    open_ = mask == 0.0
    assert open_[:, 0].all()  # self always a candidate
    assert open_[0, 1] and open_[1, 1] and not open_[2, 1]  # cam1 via graph
    assert open_[2, 2]  # node 3 adjacent to segment 2
    assert open_[3, 1:].all() and open_[4, 1:].all()  # isolated rows fall back


def test_empty_fusion_is_projection_identity():
    cfg = fusion.FusionConfig(channels=2, feature_dim=3)
    params = fusion.init_attention(cfg, nc.seeded_rng(0))
    g = nc.seeded_rng(1).normal(size=(1, 2, 4, 3))
    v = np.zeros((1, 2, 0, 3))
    batch = fusion.FusionBatch(g, v, full_graph(4), CameraMapping(()))
    out = fusion.fuse_features(batch, params, cfg)
    expected = g @ params["att.h0.w"].values
    assert np.allclose(out.values, expected, atol=1e-15)
    nc.reset_tape()


def test_identical_scores_give_uniform_attention():
    cfg = fusion.FusionConfig(channels=2, feature_dim=3)
    params = fusion.init_attention(cfg, nc.seeded_rng(2))
    params["att.h0.a_src"].values[:] = 0.0
    params["att.h0.a_dst"].values[:] = 0.0
    m = 3
    batch = fusion.FusionBatch(
        nc.seeded_rng(3).normal(size=(1, 2, 4, 3)),
        nc.seeded_rng(4).normal(size=(1, 2, m, 3)),
        full_graph(4),
        CameraMapping((("Cam1", 1), ("Cam2", 2), ("Cam3", 3))),
    )
    for n in range(4):
        _, alphas, cand = fusion.fuse_node(batch, n, params, cfg)
        assert len(cand) == m
        for alpha in alphas:
            assert np.allclose(alpha, 1.0 / (m + 1), atol=1e-15)


def test_scalar_hand_trace_per_channel():
    # K=2, N=1, M=1, D=1: every quantity is a scalar per channel
    cfg = fusion.FusionConfig(channels=2, feature_dim=1)
    params = fusion.init_attention(cfg, nc.seeded_rng(5))
    w = [0.7, -1.1]
    a_src = [0.4, 0.9]
    a_dst = [-0.3, 0.5]
    for ch in range(2):
        params["att.h0.w"].values[ch] = w[ch]
        params["att.h0.a_src"].values[ch] = a_src[ch]
        params["att.h0.a_dst"].values[ch] = a_dst[ch]
    hg = [0.8, -0.6]
    hv = [1.5, 0.2]
    graph = GraphSpec(["1"], np.eye(1), True)
    batch = fusion.FusionBatch(
        np.asarray(hg).reshape(1, 2, 1, 1),
        np.asarray(hv).reshape(1, 2, 1, 1),
        graph,
        CameraMapping((("Cam1", 1),)),
    )
    out = fusion.fuse_features(batch, params, cfg)

    def leaky(x):
        return x if x > 0 else 0.2 * x

    for ch in range(2):
        pg = w[ch] * hg[ch]
        pv = w[ch] * hv[ch]
        e_self = leaky(pg * a_src[ch] + pg * a_dst[ch])
        e_cross = leaky(pg * a_src[ch] + pv * a_dst[ch])
        mx = max(e_self, e_cross)
        exps = [math.exp(e_self - mx), math.exp(e_cross - mx)]
        a0, a1 = exps[0] / sum(exps), exps[1] / sum(exps)
        expected = a0 * pg + a1 * pv
        assert out.values[0, ch, 0, 0] == pytest.approx(expected, rel=1e-12)
    nc.reset_tape()


def test_attention_sums_to_one_and_masked_columns_zero():
    cfg = fusion.FusionConfig(channels=3, feature_dim=4)
    params = fusion.init_attention(cfg, nc.seeded_rng(6))
    graph = chain_graph(6)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2), ("Cam3", 3)))
    mask = fusion.candidate_mask(graph, mapping)
    rng = nc.seeded_rng(7)
    hg = nc.Tensor(rng.normal(size=(2, 3, 6, 4)))
    hv = nc.Tensor(rng.normal(size=(2, 3, 3, 4)))
    with nc.pause_recording():
        _, alpha = fusion._fuse_head(
            hg, hv, params["att.h0.w"], params["att.h0.a_src"],
            params["att.h0.a_dst"], mask, 0.2, 3,
        )
    a = alpha.values
    assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-12
    closed = np.broadcast_to(mask != 0.0, a.shape)
    assert np.all(a[closed] == 0.0)


def test_vectorized_matches_per_node_reference():
    cfg = fusion.FusionConfig(channels=2, feature_dim=3, heads=2)
    params = fusion.init_attention(cfg, nc.seeded_rng(8))
    graph = chain_graph(5)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 4)))
    rng = nc.seeded_rng(9)
    batch = fusion.FusionBatch(
        rng.normal(size=(1, 2, 5, 3)), rng.normal(size=(1, 2, 2, 3)), graph, mapping
    )
    out = fusion.fuse_features(batch, params, cfg)
    for n in range(5):
        fused, _, _ = fusion.fuse_node(batch, n, params, cfg)
        assert np.allclose(out.values[0, :, n, :], fused, atol=1e-12)
    nc.reset_tape()


# ---------------------------------------------------------------------------
# Loss


def unit_pred(values, camera_indices, free_indices):
    combined = nc.Tensor(values)
    return fusion.PredictionBatch(
        combined=combined,
        camera_indices=camera_indices,
        free_indices=free_indices,
        with_cameras=nc.take(combined, camera_indices, axis=1),
        without_cameras=nc.take(combined, free_indices, axis=1),
    )


def test_dynamic_loss_perfect_predictions():
    values = np.arange(24.0).reshape(1, 4, 6)
    pred = unit_pred(values, [0, 2], [1, 3])
    theta = nc.Tensor(fusion.theta_for_balance(0.5), requires_grad=True)
    breakdown = fusion.dynamic_loss(pred, values[:, [0, 2]], values[:, [1, 3]], theta)
    assert breakdown.loss_with == 0.0 and breakdown.loss_without == 0.0
    assert breakdown.total == 0.0
    nc.reset_tape()


def test_dynamic_loss_constant_offsets():
    # camera part off by 2, camera-free part off by 10, balance 0.5 -> 7
    values = np.zeros((2, 3, 4))
    pred = unit_pred(values, [0], [1, 2])
    theta = nc.Tensor(fusion.theta_for_balance(0.5))
    y_veh = np.full((2, 1, 4), -2.0)
    y_gct = np.full((2, 2, 4), 10.0)
    breakdown = fusion.dynamic_loss(pred, y_veh, y_gct, theta)
    assert breakdown.loss_with == 2.0 and breakdown.loss_without == 10.0
    assert breakdown.balance == pytest.approx(0.5, abs=1e-12)
    assert breakdown.total == pytest.approx(7.0, abs=1e-12)
    assert breakdown.composition_holds()
    nc.reset_tape()


def test_dynamic_loss_rejects_nan_targets_with_location():
    values = np.zeros((1, 3, 2))
    pred = unit_pred(values, [0], [1, 2])
    bad = np.zeros((1, 1, 2))
    bad[0, 0, 1] = np.nan
    with pytest.raises(fusion.FusionError) as exc:
        fusion.dynamic_loss(pred, bad, np.zeros((1, 2, 2)), nc.Tensor(0.0))
    assert "(0, 0, 1)" in str(exc.value)
    nc.reset_tape()


def test_balance_initialization_hits_default_within_1e9():
    theta = fusion.theta_for_balance(fusion.DEFAULT_BALANCE_INIT)
    lam = float(np.logaddexp(0.0, theta))
    assert abs(lam - 1e-4) <= 1e-9
    # the documented smaller end of the initialization range works too
    theta5 = fusion.theta_for_balance(1e-5)
    assert abs(float(np.logaddexp(0.0, theta5)) - 1e-5) <= 1e-9


# ---------------------------------------------------------------------------
# Stage-2 forward


def build_stage2(n=5, m=2, seed=0, out_mean=0.0, out_std=1.0, in_steps=6):
    gct_model, veh_model = small_extractors(n, m, in_steps=in_steps, seed=seed)
    graph = chain_graph(n)
    mapping = CameraMapping(tuple((f"Cam{i+1}", i + 1) for i in range(m)))
    d = gct_model.config.feature_width
    fcfg = fusion.FusionConfig(channels=2, feature_dim=d)
    s3cfg = stgnn.StgnnConfig(n_nodes=n, in_steps=in_steps, out_steps=3, channels=2,
                              layers=1, dilation_schedule=(1,), embedding_dim=2)
    model = fusion.init_stage2(gct_model, veh_model, graph, mapping, fcfg, s3cfg,
                               nc.seeded_rng(seed + 7), out_mean, out_std)
    return model, graph, mapping, d


def test_stage2_shape_law_49_nodes():
    model, graph, mapping, d = build_stage2(n=49, m=9)
    rng = nc.seeded_rng(11)
    batch = fusion.FusionBatch(
        rng.normal(size=(1, 2, 49, d)), rng.normal(size=(1, 2, 9, d)), graph, mapping
    )
    s3cfg = stgnn.StgnnConfig(n_nodes=49, in_steps=12, out_steps=12, channels=2,
                              layers=1, dilation_schedule=(1,), embedding_dim=2)
    gct_model, veh_model = small_extractors(49, 9, in_steps=6)
    model12 = fusion.init_stage2(gct_model, veh_model, graph, mapping,
                                 fusion.FusionConfig(channels=2, feature_dim=d),
                                 s3cfg, nc.seeded_rng(1), 0.0, 1.0)
    with nc.pause_recording():
        pred = fusion.stage2_forward(batch, model12, graph)
    assert pred.combined.values.shape == (1, 49, 12)
    assert pred.with_cameras.values.shape == (1, 9, 12)
    assert pred.without_cameras.values.shape == (1, 40, 12)


def test_stage2_zero_output_head_gives_zero_predictions():
    model, graph, mapping, d = build_stage2(out_mean=0.0, out_std=1.0)
    model.params["stgnn3.head.w"].values[:] = 0.0
    model.params["stgnn3.head.b"].values[:] = 0.0
    rng = nc.seeded_rng(12)
    batch = fusion.FusionBatch(
        rng.normal(size=(2, 2, 5, d)), rng.normal(size=(2, 2, 2, d)), graph, mapping
    )
    with nc.pause_recording():
        pred = fusion.stage2_forward(batch, model, graph)
    assert np.array_equal(pred.combined.values, np.zeros((2, 5, 3)))


def test_stage2_combined_is_node_order_interleaving():
    model, graph, mapping, d = build_stage2()
    rng = nc.seeded_rng(13)
    batch = fusion.FusionBatch(
        rng.normal(size=(2, 2, 5, d)), rng.normal(size=(2, 2, 2, d)), graph, mapping
    )
    with nc.pause_recording():
        pred = fusion.stage2_forward(batch, model, graph)
    rebuilt = np.empty_like(pred.combined.values)
    rebuilt[:, pred.camera_indices] = pred.with_cameras.values
    rebuilt[:, pred.free_indices] = pred.without_cameras.values
    assert np.array_equal(rebuilt, pred.combined.values)


def test_stage2_empty_camera_set_fatal():
    gct_model, veh_model = small_extractors(4, 2)
    graph = chain_graph(4)
    d = gct_model.config.feature_width
    with pytest.raises(fusion.FusionError):
        fusion.init_stage2(
            gct_model, veh_model, graph, CameraMapping(()),
            fusion.FusionConfig(channels=2, feature_dim=d),
            stgnn.StgnnConfig(n_nodes=4, in_steps=6, out_steps=3, channels=2,
                              layers=1, dilation_schedule=(1,), embedding_dim=2),
            nc.seeded_rng(0), 0.0, 1.0,
        )


def test_stage2_rejects_channel_mismatch():
    gct_model, veh_model = small_extractors(4, 2, channels=2)
    graph = chain_graph(4)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2)))
    with pytest.raises(fusion.FusionError):
        fusion.init_stage2(
            gct_model, veh_model, graph, mapping,
            fusion.FusionConfig(channels=3, feature_dim=gct_model.config.feature_width),
            stgnn.StgnnConfig(n_nodes=4, in_steps=6, out_steps=3, channels=3,
                              layers=1, dilation_schedule=(1,), embedding_dim=2),
            nc.seeded_rng(0), 0.0, 1.0,
        )


def test_stage2_permutation_equivariance():
    n, m = 5, 2
    model, graph, mapping, d = build_stage2(n=n, m=m, seed=3)
    rng = nc.seeded_rng(14)
    g_feats = rng.normal(size=(2, 2, n, d))
    v_feats = rng.normal(size=(2, 2, m, d))
    with nc.pause_recording():
        base = fusion.stage2_forward(
            fusion.FusionBatch(g_feats, v_feats, graph, mapping), model, graph
        ).combined.values

    perm = [3, 0, 4, 1, 2]  # new position i holds old node perm[i]
    pgraph = GraphSpec([graph.node_ids[p] for p in perm],
                       graph.weights[np.ix_(perm, perm)].copy(), True)
    gct_model, veh_model = small_extractors(n, m, seed=3)
    pmodel = fusion.init_stage2(
        gct_model, veh_model, pgraph, mapping, model.fusion_cfg,
        stgnn.StgnnConfig(n_nodes=n, in_steps=6, out_steps=3, channels=2,
                          layers=1, dilation_schedule=(1,), embedding_dim=2),
        nc.seeded_rng(99), model.output_mean, model.output_std,
    )
    for name, p in model.params.items():
        values = p.values.copy()
        if name in ("stgnn3.adapt.src", "stgnn3.adapt.dst"):
            values = values[perm]
        pmodel.params[name].values = values
    with nc.pause_recording():
        permuted = fusion.stage2_forward(
            fusion.FusionBatch(g_feats[:, :, perm, :], v_feats, pgraph, mapping),
            pmodel, pgraph,
        ).combined.values
    assert np.allclose(permuted, base[:, perm, :], atol=1e-12)


# ---------------------------------------------------------------------------
# Stage-2 training


def planted_stage2_data(n=4, m=2, windows=40, t_in=6, t_out=3, seed=0):
    rng = nc.seeded_rng(seed)
    g_in = rng.uniform(50, 150, size=(windows, n, t_in))
    v_in = g_in[:, :m] / 3.0
    g_tg = rng.uniform(50, 150, size=(windows, n, t_out))
    v_tg = g_tg[:, :m] / 3.0
    free = list(range(m, n))
    split = windows * 3 // 4
    return fusion.Stage2Data(
        train_gct_inputs=g_in[:split], train_veh_inputs=v_in[:split],
        train_veh_targets=v_tg[:split, :m], train_gct_targets=g_tg[:split][:, free],
        val_gct_inputs=g_in[split:], val_veh_inputs=v_in[split:],
        val_veh_targets=v_tg[split:, :m], val_gct_targets=g_tg[split:][:, free],
        output_mean=float(v_tg.mean()), output_std=float(v_tg.std()),
        lineage=frozenset({("vehicle", "Cam1"), ("vehicle", "Cam2"), ("gct", "1")}),
    )


def trained_extractors(n=4, m=2, t_in=6, seed=0):
    cfg = lambda nodes: stgnn.StgnnConfig(
        n_nodes=nodes, in_steps=t_in, out_steps=3, channels=2, layers=2,
        dilation_schedule=(1, 2), embedding_dim=2,
    )
    norm_g = Normalizer(np.full(n, 100.0), np.full(n, 30.0))
    norm_v = Normalizer(np.full(m, 33.0), np.full(m, 10.0))
    gct = stgnn.init_stgnn(cfg(n), nc.seeded_rng(seed))
    veh = stgnn.init_stgnn(cfg(m), nc.seeded_rng(seed + 1))
    stgnn.freeze(gct).normalizer = norm_g
    stgnn.freeze(veh).normalizer = norm_v
    return gct, veh


def quick_train(seed=0, max_epochs=3, forbidden=frozenset()):
    gct_model, veh_model = trained_extractors(seed=seed)
    graph = chain_graph(4)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2)))
    data = planted_stage2_data(seed=seed)
    s3cfg = stgnn.StgnnConfig(n_nodes=4, in_steps=6, out_steps=3, channels=2,
                              layers=1, dilation_schedule=(1,), embedding_dim=2)
    return fusion.train_stage2(
        gct_model, veh_model, graph, mapping, data, s3cfg, seed=seed,
        train_cfg=stgnn.TrainConfig(lr=3e-3, batch_size=16, max_epochs=max_epochs),
        forbidden_lineage=forbidden,
    ), gct_model, veh_model


def test_train_stage2_keeps_stage1_frozen_and_logs_breakdowns():
    (model, history), gct_model, veh_model = quick_train()
    before_g = stgnn.param_checksum(gct_model.params)
    before_v = stgnn.param_checksum(veh_model.params)
    assert stgnn.param_checksum(gct_model.params) == before_g
    assert stgnn.param_checksum(veh_model.params) == before_v
    assert history.steps
    for step in history.steps:
        assert step.balance >= 0.0
        assert step.composition_holds()
    assert history.hygiene_checked_batches == len(history.steps)


def test_train_stage2_balance_starts_at_default():
    (model, history), _, _ = quick_train()
    assert abs(history.steps[0].balance - 1e-4) <= 1e-9


def test_train_stage2_deterministic():
    (m1, h1), _, _ = quick_train(seed=4)
    (m2, h2), _, _ = quick_train(seed=4)
    assert stgnn.param_checksum(m1.params) == stgnn.param_checksum(m2.params)
    assert [s.total for s in h1.steps] == [s.total for s in h2.steps]


def test_train_stage2_rejects_unfrozen_stage1():
    gct_model, veh_model = trained_extractors()
    gct_model.frozen = False
    graph = chain_graph(4)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2)))
    s3cfg = stgnn.StgnnConfig(n_nodes=4, in_steps=6, out_steps=3, channels=2,
                              layers=1, dilation_schedule=(1,), embedding_dim=2)
    with pytest.raises(fusion.FusionError):
        fusion.train_stage2(gct_model, veh_model, graph, mapping,
                            planted_stage2_data(), s3cfg, seed=0)


def test_train_stage2_hygiene_rejects_withheld_series():
    with pytest.raises(fusion.FusionError) as exc:
        quick_train(forbidden=frozenset({("vehicle", "Cam1")}))
    assert "Cam1" in str(exc.value)


def test_stage2_checkpoint_roundtrip(tmp_path):
    (model, _), gct_model, veh_model = quick_train(seed=6)
    path = tmp_path / "stage2.ckpt"
    fusion.save_stage2(model, path, fingerprint="beef")
    loaded, fp = fusion.load_stage2(path)
    assert fp == "beef"
    assert loaded.camera_indices == model.camera_indices
    assert loaded.output_mean == model.output_mean
    assert np.array_equal(loaded.mask_bias, model.mask_bias)
    rng = nc.seeded_rng(20)
    d = model.fusion_cfg.feature_dim
    batch_args = (rng.normal(size=(1, 2, 4, d)), rng.normal(size=(1, 2, 2, d)))
    graph = chain_graph(4)
    mapping = CameraMapping((("Cam1", 1), ("Cam2", 2)))
    with nc.pause_recording():
        a = fusion.stage2_forward(fusion.FusionBatch(*batch_args, graph, mapping), model, graph)
        b = fusion.stage2_forward(fusion.FusionBatch(*batch_args, graph, mapping), loaded, graph)
    assert np.array_equal(a.combined.values, b.combined.values)
