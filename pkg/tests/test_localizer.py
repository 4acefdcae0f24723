from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import IDENTITY_PREPROC, chain, conv_model
from fixcon.engine import RepairConfig, evaluate, localize, select_images
from fixcon.injector import FaultSpec, inject, make_desk_model
from fixcon.ir.model import ENTRY, GraphModel, InputSpec, NodeDef, PreprocessingConfig
from fixcon.localizer import (
    MODEL_INPUT,
    ActivationAnalysis,
    Category,
    activation_analysis,
    analyze_differences,
    check_input_dims,
    check_preprocessing,
    check_tensor_structure,
    compare_graph,
    compare_hyperparams,
    compare_weights,
    match_layers,
    param_mismatch_counts,
    rank_suspicious_layers,
)


def rename(model: GraphModel, old: str, new: str) -> GraphModel:
    return model.with_nodes([n.replace(id=new) if n.id == old else n for n in model.nodes])


def with_input(model: GraphModel, shape, layout="NCHW") -> GraphModel:
    return model.replace(input=InputSpec(model.input.name, shape, layout))


# -- matching --------------------------------------------------------------------

def test_match_identical():
    m = conv_model()
    match = match_layers(m, m)
    assert match.pairs == tuple((n, n) for n in m.execution_order)
    assert match.unmatched_source == () and match.unmatched_target == ()


def test_match_renamed_conv_by_shape_and_value():
    src = conv_model()
    tgt = rename(src, "c2", "conv_b")
    match = match_layers(src, tgt)
    assert match.target_of("c2") == "conv_b"
    # oracle: the shape signature of c2 is unique among Target's convs
    sigs = [tgt.node(n).param_signature() for n in tgt.execution_order if tgt.node(n).op == "Conv"]
    assert sigs.count(src.node("c2").param_signature()) == 1


def test_match_missing_conv():
    src = conv_model()
    nodes = [n for n in src.nodes if n.id != "c2"]
    nodes = [n.replace(inputs=("r1",)) if n.id == "r2" else n for n in nodes]
    tgt = src.with_nodes(nodes)
    match = match_layers(src, tgt)
    assert "c2" in match.unmatched_source
    for s, t in match.pairs:
        assert src.node(s).op == tgt.node(t).op
    assert len({s for s, _ in match.pairs}) == len(match.pairs)
    assert len({t for _, t in match.pairs}) == len(match.pairs)


# -- input-based detectors -------------------------------------------------------

def test_preprocessing_detector():
    m = conv_model()
    assert check_preprocessing(m, m) == ([], None)
    other = m.replace(preproc=PreprocessingConfig(m.preproc.scale, (0.5, 0.5, 0.5), m.preproc.std, "NCHW"))
    cands, report = check_preprocessing(m, other)
    assert report.category == Category.PP and report.location == MODEL_INPUT
    assert cands == [m.preproc, other.preproc]
    assert report.detail["fields"] == ["mean"]
    nhwc = m.replace(preproc=PreprocessingConfig(m.preproc.scale, m.preproc.mean, m.preproc.std, "NHWC"))
    assert check_preprocessing(m, nhwc)[1].detail["fields"] == ["layout"]


def test_input_dims_detector():
    m = with_input(conv_model(), (1, 3, 32, 32))
    assert check_input_dims(m, m) is None
    r = check_input_dims(with_input(m, (1, 3, 224, 224)), with_input(m, (1, 3, 299, 299)))
    assert r.category == Category.ID and r.detail["target_shape"] == [1, 3, 299, 299]
    r = check_input_dims(m, with_input(m, (1, 32, 32, 3), "NHWC"))
    assert r is not None and r.detail["layout_flavored"]


def test_tss_input_transpose():
    src = chain([("a", "Relu")], input_shape=(1, 3, 8, 8))
    tgt = GraphModel("t", InputSpec("x", (1, 8, 8, 3), "NHWC"), "a", [
        NodeDef("tr", "Transpose", ("x",), ("tr",), {"perm": (0, 3, 1, 2)}),
        NodeDef("a", "Relu", ("tr",), ("a",)),
    ], IDENTITY_PREPROC)
    (r,) = check_tensor_structure(src, tgt)
    assert r.location == MODEL_INPUT and r.detail["case"] == "input-transpose" and r.detail["transpose"] == "tr"


def test_tss_pre_flatten():
    src = chain([("a", "Relu"), ("f", "Flatten")], input_shape=(1, 3, 32, 32))
    tgt = GraphModel("t", InputSpec("x", (1, 3, 32, 32)), "f", [
        NodeDef("a", "Transpose", ("x",), ("a",), {"perm": (0, 2, 3, 1)}),
        NodeDef("f", "Flatten", ("a",), ("f",)),
    ], IDENTITY_PREPROC)
    (r,) = check_tensor_structure(src, tgt)
    assert r.location == ("f", "f") and r.detail["case"] == "pre-flatten"
    assert r.detail["source_shape"] == [1, 3, 32, 32] and r.detail["target_shape"] == [1, 32, 32, 3]
    assert check_tensor_structure(src, src) == []


# -- layer-based detectors -------------------------------------------------------

def test_weights_single_perturbation():
    src = conv_model()
    w = src.node("c2").weights["weight"].copy()
    w[1, 2, 0, 1] += 1e-3
    tgt = src.with_node(src.node("c2").with_weights({**src.node("c2").weights, "weight": w}))
    reports = compare_weights(src, tgt, match_layers(src, tgt))
    assert len(reports) == 1
    assert reports[0].location == ("c2", "c2") and reports[0].detail["mismatched_elements"] == 1
    assert reports[0].detail["max_abs_diff"] == pytest.approx(1e-3, rel=1e-3)
    assert compare_weights(src, src, match_layers(src, src)) == []


def test_weights_quantized_match_elementwise_oracle(desk):
    src, _ = desk
    tgt, _ = inject(src, FaultSpec("WB", ("conv1", "conv2", "fc"), 6.0, variant="quantize"))
    reports = {r.location[0]: r for r in compare_weights(src, tgt, match_layers(src, tgt))}
    assert set(reports) == {"conv1", "conv2", "fc"}
    for layer, r in reports.items():
        want = sum(int(np.count_nonzero(src.node(layer).weights[k] != tgt.node(layer).weights[k]))
                   for k in src.node(layer).weights)
        assert r.detail["mismatched_elements"] == want


def test_weights_shape_mismatch_is_reported():
    src = conv_model()
    node = src.node("c1")
    tgt = src.with_node(node.with_weights({**node.weights, "bias": np.zeros(3, np.float32)}))
    (r,) = compare_weights(src, tgt, match_layers(src, tgt))
    assert r.detail["shape"] == ["bias"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2), st.integers(0, 2), st.integers(0, 2),
                          st.sampled_from([1e-6, 0.5, -2.0])), max_size=6))
def test_weights_completeness(edits):
    src = conv_model()
    w = src.node("c2").weights["weight"].copy()
    for o, i, y, x, d in edits:
        w[o, i, y, x] += d
    tgt = src.with_node(src.node("c2").with_weights({**src.node("c2").weights, "weight": w}))
    want = int(np.count_nonzero(w != src.node("c2").weights["weight"]))
    reports = compare_weights(src, tgt, match_layers(src, tgt))
    assert sum(r.detail["mismatched_elements"] for r in reports) == want
    assert all(r.location == ("c2", "c2") for r in reports)


def test_hyperparam_kinds():
    src = conv_model()
    c1 = src.node("c1")
    assert compare_hyperparams(src, src, match_layers(src, src)) == []
    dropped = src.with_node(c1.with_attrs({k: v for k, v in c1.attrs.items() if k != "padding"}))
    (r,) = compare_hyperparams(src, dropped, match_layers(src, dropped))
    assert (r.detail["attr"], r.detail["kind"]) == ("padding", "missing-in-target")
    strided = src.with_node(c1.with_attrs({**c1.attrs, "strides": (2, 2)}))
    (r,) = compare_hyperparams(src, strided, match_layers(src, strided))
    assert r.detail["kind"] == "value-mismatch"
    assert (r.detail["source_value"], r.detail["target_value"]) == ((1, 1), (2, 2))
    (r,) = compare_hyperparams(dropped, src, match_layers(dropped, src))
    assert r.detail["kind"] == "extra-in-target"


_CONV_ATTRS = {
    "strides": st.sampled_from([(1, 1), (2, 2)]),
    "padding": st.sampled_from([(0, 0, 0, 0), (1, 1, 1, 1)]),
    "dilations": st.sampled_from([(1, 1), (2, 2)]),
    "kernel_shape": st.just((3, 3)),
}


@settings(max_examples=60, deadline=None)
@given(st.fixed_dictionaries({}, optional=_CONV_ATTRS), st.fixed_dictionaries({}, optional=_CONV_ATTRS))
def test_hyperparam_completeness(a, b):
    base = conv_model()
    src = base.with_node(base.node("c1").with_attrs(a))
    tgt = base.with_node(base.node("c1").with_attrs(b))
    got = {r.detail["attr"] for r in compare_hyperparams(src, tgt, match_layers(src, tgt))}
    want = {k for k in set(a) | set(b) if a.get(k) != b.get(k)}
    assert got == want


def test_graph_missing_pad(desk):
    src, _ = desk
    tgt, _ = inject(src, FaultSpec("CG", variant="pad_fold"))
    match = match_layers(src, tgt)
    (r,) = compare_graph(src, tgt, ("conv2", "conv2"), match)
    assert r.category == Category.CG
    assert "pad1" in r.detail["source_subgraph"].node_ids
    assert "pad1" not in r.detail["target_subgraph"].node_ids
    assert compare_graph(src, src, ("conv2", "conv2"), match_layers(src, src)) == []


def test_graph_batchnorm_split(desk):
    src, _ = desk
    tgt, _ = inject(src, FaultSpec("CG", variant="bn_split_equiv"))
    (r,) = compare_graph(src, tgt, ("conv2", "conv2"), match_layers(src, tgt))
    ops = {tgt.node(n).op for n in r.detail["target_subgraph"].node_ids}
    assert {"Mul", "Add"} <= ops and "BatchNormalization" not in ops
    assert r.detail["source_subgraph"].dominator_id == "conv1"
    assert compare_graph(src, tgt, ("conv1", "conv1"), match_layers(src, tgt)) == []
    assert r.detail["target_subgraph"].dominator_id != ENTRY


# -- activation analysis ---------------------------------------------------------

def _images(dataset, ids):
    return [dataset.image(i) for i in ids]


def test_activation_self_is_zero(small_desk):
    model, ds = small_desk
    imgs = _images(ds, ds.ids[:6])
    an = activation_analysis(model, model, imgs[:4], imgs[4:], match_layers(model, model), element_cap=None)
    assert an.problematic == {("conv1", "conv1"): 0, ("conv2", "conv2"): 0}


def test_activation_bad_input_sizes(small_desk):
    model, ds = small_desk
    imgs = _images(ds, ds.ids[:3])
    with pytest.raises(ValueError):
        activation_analysis(model, model, imgs[:1], imgs[1:], match_layers(model, model))


def _fault_run(seed: int, layer: str, significance=0.05):
    model, ds = make_desk_model(seed, n_images=60)
    tgt, _ = inject(model, FaultSpec("WB", (layer,), 0.5, seed=seed))
    sel = select_images(evaluate(model, tgt, ds), RepairConfig(n_sim=30, n_diss=30, seed=seed))
    return activation_analysis(model, tgt, _images(ds, sel.sim_imgs), _images(ds, sel.diss_imgs),
                               match_layers(model, tgt), significance, element_cap=None)


@pytest.mark.slow
def test_activation_localizes_injected_layer():
    hits = 0
    for seed in range(20):
        an = _fault_run(seed, "conv2")
        conv2, conv1 = an.count(("conv2", "conv2")), an.count(("conv1", "conv1"))
        assert conv2 <= an.element_counts[("conv2", "conv2")]
        hits += conv2 > conv1
    assert hits >= 18


def test_activation_significance_zero(small_desk):
    model, ds = small_desk
    tgt, _ = inject(model, FaultSpec("WB", ("conv1",), 0.5))
    imgs = _images(ds, ds.ids[:12])
    an = activation_analysis(model, tgt, imgs[:8], imgs[8:], match_layers(model, tgt), 0.0, element_cap=None)
    assert all(v == 0 for v in an.problematic.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.001, 0.2), st.floats(0.001, 0.2))
def test_activation_monotone_significance(seed, s1, s2):
    lo, hi = sorted((s1, s2))
    rng = np.random.default_rng(seed)
    sim = {("a", "a"): rng.exponential(1.0, (10, 50))}
    diss = {("a", "a"): rng.exponential(1.0, (6, 50)) * rng.uniform(0.5, 3.0, 50)}
    c_lo = analyze_differences(sim, diss, significance=lo, element_cap=None).count(("a", "a"))
    c_hi = analyze_differences(sim, diss, significance=hi, element_cap=None).count(("a", "a"))
    assert c_lo <= c_hi <= 50


def test_element_cap_is_seeded():
    rng = np.random.default_rng(1)
    sim = {("a", "a"): rng.exponential(1.0, (10, 500))}
    diss = {("a", "a"): rng.exponential(2.0, (6, 500))}
    a = analyze_differences(sim, diss, element_cap=64, seed=3)
    b = analyze_differences(sim, diss, element_cap=64, seed=3)
    assert a.problematic == b.problematic and a.count(("a", "a")) <= 64
    assert a.element_counts[("a", "a")] == 500


# -- ranking ---------------------------------------------------------------------

A, B, C = ("A", "A"), ("B", "B"), ("C", "C")


def run(counts):
    return ActivationAnalysis(dict(counts), {p: 100 for p in counts})


def test_rank_single_run():
    assert list(rank_suspicious_layers([A, B, C], None, [run({A: 5, B: 2, C: 0})])) == [A, B, C]


def test_rank_mean_rank_example():
    r = rank_suspicious_layers([A, B, C], {A: 3, B: 2, C: 1},
                               [run({A: 5, B: 2, C: 0}), run({A: 5, B: 0, C: 2})])
    assert list(r) == [A, B, C]
    assert r.mean_ranks == pytest.approx((1.0, 7 / 3, 8 / 3))


def test_rank_all_zero_declaration_order():
    r = rank_suspicious_layers([C, A, B], {}, [run({A: 0, B: 0, C: 0})])
    assert list(r) == [C, A, B]


def test_rank_skipped_layer_is_most_suspicious():
    an = ActivationAnalysis({A: 9, B: 0}, {A: 10, B: 10}, {C: "activation shape"})
    assert list(rank_suspicious_layers([A, B, C], None, [an]))[0] == C


def test_param_counts():
    src = conv_model()
    c2 = src.node("c2")
    w = c2.weights["weight"].copy()
    w[0, 0, 0, :] += 1
    tgt = src.with_node(c2.replace(weights={**c2.weights, "weight": w}, attrs={**c2.attrs, "strides": (2, 2)}))
    m = match_layers(src, tgt)
    counts = param_mismatch_counts(compare_weights(src, tgt, m) + compare_hyperparams(src, tgt, m))
    assert counts == {("c2", "c2"): 4}


# -- end to end ------------------------------------------------------------------

def test_localize_self_has_no_reports(small_desk):
    model, ds = small_desk
    assert localize(model, model, ds).reports == []


def test_localize_deterministic(small_desk):
    model, ds = small_desk
    tgt, _ = inject(model, FaultSpec("WB", ("conv1",), 0.3))
    cfg = RepairConfig(n_sim=20, n_diss=10)
    a = [r.to_dict() for r in localize(model, tgt, ds, cfg).reports]
    b = [r.to_dict() for r in localize(model, tgt, ds, cfg).reports]
    assert a == b
    assert all(r["suspicious_rank"] is not None for r in a if r["category"] == "WB")
