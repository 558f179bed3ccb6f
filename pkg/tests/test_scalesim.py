"""Bucketing, ring collectives, the step simulator and the calibrated presets."""

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilessl.nn_core import ConfigError
from tilessl.scalesim import (
    DEFAULT_DDP,
    DEFAULT_FSDP,
    TUNED_DDP,
    ClusterSpec,
    MiB,
    ModelProfile,
    StrategyConfig,
    allreduce_time,
    cluster,
    compare_ddp_fsdp,
    curve_to_csv,
    load_experiment,
    partition_buckets,
    preset_experiment,
    profile,
    run_experiment,
    scaling_curve,
    simulate_step,
)
from tilessl.encoder import EncoderConfig, count_flops

MB = 1e6


def toy_model(n=12, size=8 * MiB, bwd=2e-3, fwd=10e-3, batch=4, teacher=0.0):
    return ModelProfile("toy", tuple([float(size)] * n), tuple([bwd] * n), tuple(range(n))[::-1],
                        fwd, teacher, batch)


def greedy_oracle(sizes, cap):
    out, cur, acc = [], [], 0
    for i, s in enumerate(sizes):
        if cur and acc + s > cap:
            out.append(cur)
            cur, acc = [], 0
        cur.append(i)
        acc += s
    return out + ([cur] if cur else [])


# -- buckets ------------------------------------------------------------------


def test_one_layer_one_bucket():
    assert partition_buckets([10 * MB], 25 * MB) == [[0]]


def test_ten_layers_five_buckets():
    b = partition_buckets([10 * MB] * 10, 25 * MB)
    assert len(b) == 5
    assert all(len(x) == 2 for x in b)
    assert b == greedy_oracle([10 * MB] * 10, 25 * MB)


def test_large_cap_single_bucket():
    assert partition_buckets([10 * MB] * 10, 360 * MB) == [list(range(10))]


def test_oversized_layer_singleton():
    assert partition_buckets([5, 50, 5], 10) == [[0], [1], [2]]


def test_bad_cap():
    with pytest.raises(ValueError):
        partition_buckets([1], 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=40), st.integers(1, 200), st.integers(1, 200))
def test_bucket_consolidation(sizes, cap_a, cap_b):
    lo, hi = sorted((cap_a, cap_b))
    a = partition_buckets(sizes, lo)
    b = partition_buckets(sizes, hi)
    assert len(b) <= len(a)
    assert a == greedy_oracle(sizes, lo)
    for bk in (a, b):
        assert [i for x in bk for i in x] == list(range(len(sizes)))
        assert sum(sizes[i] for x in bk for i in x) == sum(sizes)


# -- collectives ---------------------------------------------------------------


def test_world_one_is_free():
    assert allreduce_time(1e9, ClusterSpec(gpus_per_node=1)) == 0.0


def test_closed_form_example():
    c = ClusterSpec(gpus_per_node=8, intra_node_bw=100e9, intra_latency=0.0)
    assert allreduce_time(1e9, c) == pytest.approx(0.0175, rel=1e-12)


def test_bandwidth_term_linear():
    c = ClusterSpec(nodes=2, inter_latency=0.0)
    assert allreduce_time(2e8, c) == pytest.approx(2 * allreduce_time(1e8, c), rel=1e-12)


def test_ring_formula_multi_node():
    c = ClusterSpec(nodes=3, rdma=True)
    w = 24
    bw = c.inter_node_bw * c.rdma_bw_multiplier / (1 + c.rdma_contention * 1)
    lat = c.inter_latency * (1 - c.rdma_latency_reduction)
    assert allreduce_time(5e8, c) == pytest.approx(2 * (w - 1) / w * 5e8 / bw + 2 * (w - 1) * lat, rel=1e-12)


def test_hierarchical_cheaper_on_slow_links():
    flat = ClusterSpec(nodes=4)
    hier = ClusterSpec(nodes=4, hierarchical=True)
    assert allreduce_time(1e9, hier) < allreduce_time(1e9, flat)


@pytest.mark.parametrize("kw", [dict(nodes=0), dict(inter_node_bw=0), dict(intra_latency=-1),
                                dict(rdma_latency_reduction=1.0), dict(gpus_per_node=0)])
def test_cluster_validation(kw):
    with pytest.raises(ConfigError):
        ClusterSpec(**kw)


def test_strategy_and_model_validation():
    with pytest.raises(ConfigError):
        StrategyConfig(kind="ZeRO")
    with pytest.raises(ConfigError):
        StrategyConfig(bucket_cap_bytes=0)
    with pytest.raises(ConfigError):
        ModelProfile("m", (1.0,), (0.0,), (0,), 1.0)
    with pytest.raises(ConfigError):
        ModelProfile("m", (), (), (), 1.0)


# -- simulation ----------------------------------------------------------------


INFINITE = dict(intra_node_bw=math.inf, inter_node_bw=math.inf, intra_latency=0.0, inter_latency=0.0)


@pytest.mark.parametrize("strategy", [TUNED_DDP, StrategyConfig(kind="FSDP", fsdp_unit_overhead=0.0)])
def test_free_network_is_pure_compute(strategy):
    m = toy_model(teacher=4e-3)
    r = simulate_step(ClusterSpec(nodes=3, **INFINITE), m, strategy)
    assert r["step_time"] == pytest.approx(r["compute_time"], rel=1e-12)
    assert r["comm_fraction"] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("strategy", [DEFAULT_DDP, TUNED_DDP, DEFAULT_FSDP])
def test_single_gpu_is_pure_compute(strategy):
    m = toy_model()
    r = simulate_step(ClusterSpec(gpus_per_node=1), m, strategy)
    assert r["step_time"] == pytest.approx(m.compute_time, rel=1e-12)


def test_identical_single_gpu_ratio_is_one():
    m = toy_model()
    assert compare_ddp_fsdp(ClusterSpec(gpus_per_node=1), m) == pytest.approx(1.0)


def test_memory_check():
    m = toy_model(size=10e9)
    with pytest.raises(ValueError, match="GB per rank"):
        compare_ddp_fsdp(ClusterSpec(nodes=2), m)


def test_bucket_count_reported():
    m = toy_model(n=10, size=10 * MB)
    assert simulate_step(ClusterSpec(nodes=2), m, StrategyConfig(bucket_cap_bytes=25 * MB))["bucket_count"] == 5


@settings(max_examples=40, deadline=None)
@given(st.floats(1e9, 1e12), st.floats(1.5, 10.0), st.integers(1, 4), st.sampled_from(["DDP", "FSDP"]))
def test_monotone_in_bandwidth(bw, factor, nodes, kind):
    m = toy_model()
    s = StrategyConfig(kind=kind)
    slow = simulate_step(ClusterSpec(nodes=nodes, inter_node_bw=bw, intra_node_bw=bw), m, s)["step_time"]
    fast_inter = simulate_step(ClusterSpec(nodes=nodes, inter_node_bw=bw * factor, intra_node_bw=bw), m, s)
    fast_intra = simulate_step(ClusterSpec(nodes=nodes, inter_node_bw=bw, intra_node_bw=bw * factor), m, s)
    assert fast_inter["step_time"] <= slow + 1e-15
    assert fast_intra["step_time"] <= slow + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.floats(1e5, 1e9), st.floats(1e-5, 1e-2), st.integers(1, 4),
       st.floats(1e6, 1e9), st.booleans())
def test_overlap_bounds(n, size, bwd, nodes, cap, view):
    m = toy_model(n=n, size=size, bwd=bwd)
    s = StrategyConfig(bucket_cap_bytes=cap, gradient_as_bucket_view=view)
    r = simulate_step(ClusterSpec(nodes=nodes), m, s)
    lo = max(r["compute_time"], r["comm_time"])
    hi = r["compute_time"] + r["comm_time"]
    assert lo - 1e-12 <= r["step_time"] <= hi + 1e-12


def test_deterministic():
    m = profile("vit-g-14-like")
    a = simulate_step(cluster("h200", nodes=3), m, DEFAULT_DDP)
    b = simulate_step(cluster("h200", nodes=3), profile("vit-g-14-like"), DEFAULT_DDP)
    assert a == b


def test_scaling_curve_n1_exact():
    rows = scaling_curve(cluster("h200"), toy_model(), DEFAULT_DDP, [1, 2])
    assert rows[0]["efficiency"] == 1.0
    with pytest.raises(ValueError):
        scaling_curve(cluster("h200"), toy_model(), DEFAULT_DDP, [])


def test_csv_layout():
    rows = scaling_curve(cluster("h200"), toy_model(), DEFAULT_DDP, [1, 2])
    text = curve_to_csv(rows, {"curve": "toy"})
    lines = text.strip().split("\n")
    assert lines[0] == "curve,nodes,throughput,efficiency,comm_fraction"
    assert lines[1].startswith("toy,1,")


# -- calibrated presets --------------------------------------------------------


def _eff(model, strategy, cl, n=4):
    return scaling_curve(cl, profile(model), strategy, [1, n])[-1]


def test_vit_b_near_linear():
    rows = scaling_curve(cluster("h200"), profile("vit-b-like"), DEFAULT_DDP, [1, 2, 3, 4])
    assert all(r["efficiency"] >= 0.9 for r in rows)


def test_untuned_vit_g_degrades_past_two_nodes():
    rows = scaling_curve(cluster("h200"), profile("vit-g-14-like"), DEFAULT_DDP, [1, 2, 4])
    assert rows[2]["throughput"] < rows[1]["throughput"]
    assert rows[1]["throughput"] > rows[0]["throughput"]


def test_rdma_alone_insufficient_tuning_restores():
    assert _eff("vit-g-14-like", DEFAULT_DDP, cluster("h200-rdma"))["efficiency"] < 0.85
    assert _eff("vit-g-14-like", TUNED_DDP, cluster("h200-rdma"))["efficiency"] >= 0.85
    # tuning without RDMA is not enough either: the fix needs both
    assert _eff("vit-g-14-like", TUNED_DDP, cluster("h200"))["efficiency"] < 0.85


def test_patch_8_vs_14_step_ratio():
    one = cluster("h200")
    g8 = simulate_step(one, profile("vit-g-8-like"), DEFAULT_DDP)["step_time"]
    g14 = simulate_step(one, profile("vit-g-14-like"), DEFAULT_DDP)["step_time"]
    assert 3.0 <= g8 / g14 <= 4.0


def test_profile_compute_tracks_flop_counts():
    # teacher forward of a global view is pure encoder work, so its ratio follows count_flops
    cfg = EncoderConfig(embed_dim=1536, depth=40, heads=24, registers=4, patch_sizes=[8, 14], tile_side=224,
                        rope=False)
    f8, f14 = count_flops(cfg, 8), count_flops(cfg, 14)
    lin = (f8["linear"] + f8["embed"]) / (f14["linear"] + f14["embed"])
    att = f8["attention"] / f14["attention"]
    ratio = profile("vit-g-8-like").teacher_forward_time / profile("vit-g-14-like").teacher_forward_time
    assert min(lin, att) < ratio < max(lin, att)


def test_ddp_fsdp_ratio_ample_bandwidth():
    ratio = compare_ddp_fsdp(cluster("h200-rdma", nodes=4), profile("vit-g-14-like"))
    assert 1.7 <= ratio <= 2.3


def test_starved_bandwidth_ratio_defined():
    # the cost model keeps DDP ahead even at 1/20 bandwidth; recorded, not asserted < 1
    ample = compare_ddp_fsdp(cluster("h200-rdma", nodes=4), profile("vit-g-14-like"))
    starved = compare_ddp_fsdp(cluster("h200-rdma", nodes=4, inter_node_bw=25e9 / 20), profile("vit-g-14-like"))
    assert math.isfinite(starved) and starved > 0
    assert starved != ample


# -- spec files ----------------------------------------------------------------


@pytest.mark.parametrize("name", ["fig2", "fig3"])
def test_presets_run(name):
    csv_text, ratio = run_experiment(preset_experiment(name))
    lines = csv_text.strip().split("\n")
    assert lines[0].startswith("curve,nodes")
    assert len(lines) == 1 + 3 * 4
    if name == "fig3":
        assert 1.7 <= ratio <= 2.3


def test_unknown_preset():
    with pytest.raises(ConfigError, match="fig2"):
        preset_experiment("fig9")


def test_load_experiment_from_file(tmp_path):
    spec = {
        "name": "t", "cluster": {"nodes": 1, "inter_node_bw": 1e10}, "node_counts": [1, 2],
        "curves": [{"model": {"name": "m", "layer_bytes": [1e6, 2e6], "layer_backward": [1e-3, 1e-3],
                              "forward_time": 2e-3, "local_batch": 2},
                    "strategy": {"bucket_cap_mb": 1}}],
    }
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec))
    exp = load_experiment(p)
    assert exp.curves[0][2].bucket_cap_bytes == MiB
    csv_text, ratio = run_experiment(exp)
    assert ratio is None and csv_text.count("\n") == 3


@pytest.mark.parametrize("spec,msg", [
    ({"cluster": {}, "curves": []}, "name"),
    ({"name": "x", "cluster": {"bogus": 1}, "curves": []}, "bogus"),
    ({"name": "x", "cluster": {}, "curves": [{}]}, "model"),
    ({"name": "x", "cluster": {}, "curves": [], "node_counts": [0]}, "node_counts"),
    ({"name": "x", "cluster": {"preset": "dgx"}, "curves": []}, "unknown cluster"),
])
def test_load_experiment_errors(spec, msg):
    with pytest.raises(ConfigError, match=msg):
        load_experiment(spec)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_experiment(p)
