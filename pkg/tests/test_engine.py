from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixcon.engine import (
    EvalSummary,
    ImageEval,
    LoopState,
    RepairConfig,
    evaluate,
    run_repair,
    select_images,
    write_outcome,
)
from fixcon.errors import EvaluationError, RepairAborted, SelectionError
from fixcon.injector import FaultSpec, inject
from fixcon.interpreter.dataset import Dataset
from fixcon.interpreter.preprocess import prepare_input
from fixcon.interpreter.runtime import LabelRanking, execute
from fixcon.ir.io import load_model

FAST = RepairConfig(n_sim=30, n_diss=30, analysis_iter_no=2)


def top1(model, img) -> int:
    return int(np.argmax(execute(model, prepare_input(img, model))[0]))


# -- evaluation ------------------------------------------------------------------

def test_evaluate_self(small_desk):
    model, ds = small_desk
    ev = evaluate(model, model, ds)
    assert ev.dissimilarity_pct == 0
    assert all(e.kendall_tau == 1.0 and e.labels_match for e in ev.images)


def test_evaluate_permuted_classes(small_desk):
    model, ds = small_desk
    fc = model.node("fc")
    shifted = fc.with_weights({r: np.roll(w, 1, axis=-1) for r, w in fc.weights.items()})
    ev = evaluate(model, model.with_node(shifted), ds)
    assert ev.dissimilarity_pct == 100.0


def test_evaluate_matches_recount(desk):
    model, ds = desk
    broken, _ = inject(model, FaultSpec("WB"))
    ev = evaluate(model, broken, ds)
    mismatches = sum(top1(model, img) != top1(broken, img) for _, img in ds)
    assert ev.dissimilarity_pct == pytest.approx(100.0 * mismatches / len(ds))
    for e in ev.images:
        assert e.labels_match == (e.source_ranking.top1 == e.target_ranking.top1)


def test_evaluate_errors_name_the_image(small_desk):
    model, _ = small_desk
    with pytest.raises(EvaluationError, match="empty"):
        evaluate(model, model, Dataset((), ()))
    bad = Dataset(("ok", "bad"), (np.zeros((16, 16, 3), np.uint8), np.zeros((16, 16, 4), np.uint8)))
    with pytest.raises(EvaluationError, match="bad"):
        evaluate(model, model, bad)


# -- image selection -------------------------------------------------------------

def _eval(taus: dict[str, float | None]) -> EvalSummary:
    """Similar images carry ``None``; the rest are dissimilar with the given tau."""
    a = LabelRanking((0, 1), (1.0, 0.0))
    b = LabelRanking((1, 0), (1.0, 0.0))
    images = tuple(ImageEval(i, a, a if t is None else b, t is None, 1.0 if t is None else t)
                   for i, t in taus.items())
    return EvalSummary(images, 100.0 * sum(t is not None for t in taus.values()) / len(taus))


def test_select_orders_dissimilar_by_tau():
    ev = _eval({"a": 0.2, "b": -0.5, "c": 0.9, "s1": None, "s2": None})
    sel = select_images(ev, RepairConfig())
    assert sel.diss_imgs == ("b", "a", "c") and sel.driving_image == "b"
    assert set(sel.sim_imgs) == {"s1", "s2"}


def test_select_ties_by_id_and_caps():
    ev = _eval({"z": 0.0, "y": 0.0, "x": 0.5, **{f"s{i}": None for i in range(20)}})
    sel = select_images(ev, RepairConfig(n_sim=5, n_diss=2))
    assert sel.diss_imgs == ("y", "z")
    assert len(sel.sim_imgs) == 5 and not set(sel.sim_imgs) & set(sel.diss_imgs)
    assert select_images(ev, RepairConfig(n_sim=5, seed=3)) == select_images(ev, RepairConfig(n_sim=5, seed=3))


def test_select_requires_dissimilar_images():
    with pytest.raises(SelectionError):
        select_images(_eval({"s1": None, "s2": None}), RepairConfig())


# -- loop state and config -------------------------------------------------------

@settings(max_examples=100)
@given(st.lists(st.sampled_from([0.0, 12.5, 50.0]), min_size=1, max_size=12))
def test_same_diss_is_trailing_run_minus_one(history):
    state = LoopState()
    for h in history:
        prev = state.same_diss
        state.record(h)
        if len(state.diss_history) > 1 and state.diss_history[-2] != h:
            assert state.same_diss == 0
        elif len(state.diss_history) > 1:
            assert state.same_diss == prev + 1
    run = 0
    for h in reversed(history):
        if h != history[-1]:
            break
        run += 1
    assert state.same_diss == run - 1


@pytest.mark.parametrize("bad", [dict(n_sim=0), dict(diss_no=-1), dict(time_limit_secs=0), dict(significance=1.0),
                                 dict(significance=0.0), dict(kt_fixed_threshold=-1.0), dict(element_cap=0),
                                 dict(seed=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        RepairConfig(**bad)


# -- the repair loop -------------------------------------------------------------

def _check_invariants(outcome, cfg):
    history = outcome.state.diss_history
    assert all(b <= a for a, b in zip(history, history[1:]))
    loc, rep = outcome.localized, outcome.repaired
    for cat in rep:
        assert set(rep[cat]) <= set(loc[cat])
    accepted = [a for a in outcome.actions if a.accepted]
    for a in accepted:
        if a.strategy.value in ("WB", "LH", "CG"):
            assert a.kt_after > a.kt_before
        else:
            assert a.kt_after >= cfg.kt_fixed_threshold
    reason = outcome.termination_reason
    if reason == "zero-dissimilarity":
        assert history[-1] == 0
    elif reason == "stagnation":
        assert outcome.state.same_diss >= cfg.diss_no


def test_repair_self(small_desk):
    model, ds = small_desk
    out = run_repair(model, model, ds, FAST)
    assert out.termination_reason == "zero-dissimilarity"
    assert out.actions == [] and out.state.iteration == 0 and out.state.diss_history == [0.0]


def test_repair_single_weight_fault(small_desk):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("WB", ("conv2",), 0.5))
    out = run_repair(model, broken, ds, FAST)
    assert out.termination_reason == "zero-dissimilarity"
    assert any(a.accepted and a.strategy.value == "WB" and a.target_location == ("conv2", "conv2")
               for a in out.actions)
    _check_invariants(out, FAST)


def test_repair_quantized_layers_decreasing(desk):
    model, ds = desk
    broken, _ = inject(model, FaultSpec("WB", ("conv1", "conv2", "fc"), variant="quantize"))
    out = run_repair(model, broken, ds, FAST)
    history = out.state.diss_history
    assert out.termination_reason == "zero-dissimilarity"
    assert all(b < a for a, b in zip(history, history[1:]))
    _check_invariants(out, FAST)


@pytest.mark.parametrize("diss_no", [1, 2, 3])
def test_out_of_taxonomy_stagnates_after_diss_no(small_desk, diss_no):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("OUT_OF_TAXONOMY"))
    cfg = RepairConfig(n_sim=30, n_diss=30, analysis_iter_no=1, diss_no=diss_no)
    out = run_repair(model, broken, ds, cfg)
    assert out.termination_reason == "stagnation"
    assert out.state.iteration == diss_no
    assert len(out.state.diss_history) == diss_no + 1 and len(set(out.state.diss_history)) == 1
    _check_invariants(out, cfg)


def test_repair_deterministic(small_desk):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("LH"))
    a = run_repair(model, broken, ds, FAST)
    b = run_repair(model, broken, ds, FAST)
    assert [x.to_dict() for x in a.actions] == [x.to_dict() for x in b.actions]
    assert a.model == b.model and a.state.diss_history == b.state.diss_history


def test_time_limit_with_fake_clock(small_desk):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("OUT_OF_TAXONOMY"))
    ticks = iter(range(10 ** 9))
    cfg = RepairConfig(n_sim=30, n_diss=30, analysis_iter_no=1, diss_no=1000, time_limit_secs=150)
    out = run_repair(model, broken, ds, cfg, clock=lambda: float(next(ticks)))
    assert out.termination_reason == "time-limit"
    assert out.state.elapsed >= 150
    assert not any(a.accepted for a in out.actions if "reverted" in a.description)


def test_time_limit_before_first_evaluation(small_desk):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("WB"))
    ticks = iter(range(0, 10 ** 9, 100))
    out = run_repair(model, broken, ds, RepairConfig(time_limit_secs=50), clock=lambda: float(next(ticks)))
    assert out.termination_reason == "time-limit" and out.model is broken and out.actions == []


def test_abort_carries_partial_log(small_desk):
    model, _ = small_desk
    bad = Dataset(("x",), (np.zeros((4, 4, 1), np.uint8),))
    with pytest.raises(RepairAborted) as info:
        run_repair(model, model, bad, FAST)
    assert info.value.actions == []


def test_write_outcome(tmp_path, small_desk):
    model, ds = small_desk
    broken, _ = inject(model, FaultSpec("PP"))
    out = run_repair(model, broken, ds, FAST)
    log_path, eval_path = write_outcome(out, tmp_path / "fixed.json", FAST)
    assert log_path.name == "fixed.repairlog.jsonl" and eval_path.name == "fixed.eval.json"
    assert load_model(tmp_path / "fixed.json") == out.model
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert len(lines) == len(out.actions) and any(entry["accepted"] for entry in lines)
    meta = json.loads(eval_path.read_text())
    assert meta["termination_reason"] == "zero-dissimilarity"
    assert meta["final_dissimilarity_pct"] == 0.0
    assert len(meta["evaluations"]) == len(out.evaluations)
    assert meta["repaired"]["PP"] == ["model-input"]
