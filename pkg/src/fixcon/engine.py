"""The iterative localise-and-repair loop and its dataset-level evaluation."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import EvaluationError, FixconError, RepairAborted, RepairError, SelectionError, ValidationError
from .interpreter.dataset import Dataset
from .interpreter.preprocess import prepare_input
from .interpreter.runtime import LabelRanking, infer
from .ir.graph import validate
from .ir.io import save_model
from .ir.model import GraphModel
from .localizer.activations import DEFAULT_ELEMENT_CAP, ActivationAnalysis, analyze_differences, layer_differences
from .localizer.detectors import (
    check_input_dims,
    check_preprocessing,
    check_tensor_structure,
    compare_graph,
    compare_hyperparams,
    compare_weights,
)
from .localizer.matching import LAYER_OPS, LayerMatching, match_layers
from .localizer.ranking import SuspiciousRanking, param_mismatch_counts, rank_suspicious_layers
from .localizer.reports import Category, FaultReport, LayerPair, LocalizationResult, Location
from .interpreter.runtime import infer_traced
from .repairer import (
    CandidateModel,
    RepairAction,
    apply_strategy,
    repair_input_dims,
    repair_preprocessing,
    repair_tensor_structure,
)
from .stats import kendall_tau

TERMINATION_REASONS = ("zero-dissimilarity", "stagnation", "time-limit")


@dataclass(frozen=True)
class RepairConfig:
    n_sim: int = 100
    n_diss: int = 100
    analysis_iter_no: int = 3
    diss_no: int = 3
    time_limit_secs: float = 7200
    significance: float = 0.05
    kt_fixed_threshold: float = 0.99
    seed: int = 0
    element_cap: int | None = DEFAULT_ELEMENT_CAP

    def __post_init__(self) -> None:
        for name in ("n_sim", "n_diss", "analysis_iter_no", "diss_no", "time_limit_secs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.element_cap is not None and self.element_cap <= 0:
            raise ValueError("element_cap must be positive")
        if not 0 < self.significance < 1:
            raise ValueError("significance must lie in (0, 1)")
        if not -1 < self.kt_fixed_threshold <= 1:
            raise ValueError("kt_fixed_threshold must lie in (-1, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ImageEval:
    image_id: str
    source_ranking: LabelRanking
    target_ranking: LabelRanking
    labels_match: bool
    kendall_tau: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "image": self.image_id,
            "source_top1": self.source_ranking.top1,
            "target_top1": self.target_ranking.top1,
            "labels_match": self.labels_match,
            "kendall_tau": self.kendall_tau,
        }


@dataclass(frozen=True)
class EvalSummary:
    images: tuple[ImageEval, ...]
    dissimilarity_pct: float

    def to_dict(self) -> dict[str, Any]:
        return {"dissimilarity_pct": self.dissimilarity_pct, "images": [e.to_dict() for e in self.images]}


@dataclass(frozen=True)
class ImageSelection:
    sim_imgs: tuple[str, ...]
    diss_imgs: tuple[str, ...]

    @property
    def driving_image(self) -> str:
        return self.diss_imgs[0]


@dataclass
class LoopState:
    diss_history: list[float] = field(default_factory=list)
    elapsed: float = 0.0
    iteration: int = 0

    @property
    def same_diss(self) -> int:
        if not self.diss_history:
            return 0
        last, run = self.diss_history[-1], 0
        for value in reversed(self.diss_history):
            if value != last:
                break
            run += 1
        return run - 1

    def record(self, dissimilarity: float) -> None:
        self.diss_history.append(dissimilarity)


@dataclass
class RepairOutcome:
    model: GraphModel
    actions: list[RepairAction]
    evaluations: list[EvalSummary]
    termination_reason: str
    state: LoopState
    localized: dict[str, list[str]]

    @property
    def final_dissimilarity(self) -> float | None:
        return self.state.diss_history[-1] if self.state.diss_history else None

    @property
    def repaired(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {c.value: [] for c in Category}
        for a in self.actions:
            if a.accepted:
                _, loc = location_key(a.strategy, a.target_location)
                if loc not in out[a.strategy.value]:
                    out[a.strategy.value].append(loc)
        return out

    def localized_counts(self) -> dict[str, int]:
        return {c: len(v) for c, v in self.localized.items()}

    def repaired_counts(self) -> dict[str, int]:
        return {c: len(v) for c, v in self.repaired.items()}


def location_key(category: Category, location: Location) -> tuple[str, str]:
    return category.value, location if isinstance(location, str) else "/".join(location)


class _TimeUp(Exception):
    pass


class _Deadline:
    def __init__(self, limit: float, start: float, clock: Callable[[], float]):
        self.limit, self.start, self.clock = limit, start, clock

    def elapsed(self) -> float:
        return self.clock() - self.start

    def expired(self) -> bool:
        return self.elapsed() >= self.limit

    def check(self) -> None:
        if self.expired():
            raise _TimeUp()


def _rank(model: GraphModel, image: np.ndarray) -> LabelRanking:
    return infer(model, prepare_input(image, model))


def source_rankings(source: GraphModel, dataset: Dataset, deadline: _Deadline | None = None) -> dict[str, LabelRanking]:
    out = {}
    for image_id, image in dataset:
        if deadline is not None:
            deadline.check()
        try:
            out[image_id] = _rank(source, image)
        except FixconError as exc:
            raise EvaluationError(image_id, exc) from exc
    return out


def evaluate(source: GraphModel, target: GraphModel, dataset: Dataset,
             src_rankings: dict[str, LabelRanking] | None = None,
             deadline: _Deadline | None = None) -> EvalSummary:
    """Run both models over the dataset and compare their label rankings."""
    if len(dataset) == 0:
        raise EvaluationError("-", ValueError("empty dataset"))
    if src_rankings is None:
        src_rankings = source_rankings(source, dataset, deadline)
    evals = []
    for image_id, image in dataset:
        if deadline is not None:
            deadline.check()
        try:
            tgt = _rank(target, image)
        except FixconError as exc:
            raise EvaluationError(image_id, exc) from exc
        src = src_rankings[image_id]
        evals.append(ImageEval(image_id, src, tgt, src.top1 == tgt.top1, kendall_tau(src, tgt)))
    mismatches = sum(not e.labels_match for e in evals)
    return EvalSummary(tuple(evals), 100.0 * mismatches / len(evals))


def _sample_similar(ev: EvalSummary, n: int, rng: np.random.Generator) -> tuple[str, ...]:
    ids = [e.image_id for e in ev.images if e.labels_match]
    if len(ids) <= n:
        return tuple(ids)
    picked = np.sort(rng.choice(len(ids), size=n, replace=False))
    return tuple(ids[i] for i in picked)


def select_images(ev: EvalSummary, cfg: RepairConfig, seed: int | None = None) -> ImageSelection:
    """Seeded sample of agreeing images and the disagreeing ones, lowest tau first."""
    if not ev.images:
        raise SelectionError("empty evaluation")
    diss = sorted((e for e in ev.images if not e.labels_match), key=lambda e: (e.kendall_tau, e.image_id))
    if not diss:
        raise SelectionError("no dissimilar images: Source and Target agree on every input")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return ImageSelection(_sample_similar(ev, cfg.n_sim, rng), tuple(e.image_id for e in diss[:cfg.n_diss]))


# -- localisation ----------------------------------------------------------------

@dataclass
class _Localization:
    pp_candidates: list
    pp: FaultReport | None
    id: FaultReport | None
    tss: list[FaultReport]
    matching: LayerMatching
    wb: list[FaultReport]
    lh: list[FaultReport]
    cg: list[FaultReport]
    ranking: SuspiciousRanking
    order: list[LayerPair]
    runs: list[ActivationAnalysis]

    def reports(self) -> list[FaultReport]:
        head = [r for r in (self.pp, self.id) if r is not None]
        return head + self.tss + self.wb + self.lh + self.cg

    def layer_reports(self, category: Category, pair: LayerPair) -> list[FaultReport]:
        pool = {Category.WB: self.wb, Category.LH: self.lh, Category.CG: self.cg}[category]
        return [r for r in pool if r.location == pair]


def _trace_all(model: GraphModel, images: Sequence[np.ndarray], deadline: _Deadline | None):
    traces = []
    for img in images:
        if deadline is not None:
            deadline.check()
        traces.append(infer_traced(model, prepare_input(img, model)))
    return traces


def _activation_runs(source: GraphModel, target: GraphModel, dataset: Dataset, ev: EvalSummary,
                     sel: ImageSelection, pairs: list[LayerPair], cfg: RepairConfig, iteration: int,
                     deadline: _Deadline | None) -> list[ActivationAnalysis]:
    # every run draws its own similar-image sample from the agreeing pool
    samples = [sel.sim_imgs]
    for r in range(1, cfg.analysis_iter_no):
        samples.append(_sample_similar(ev, cfg.n_sim, np.random.default_rng([cfg.seed, iteration, r])))
    pool = sorted({i for s in samples for i in s}, key=[e.image_id for e in ev.images].index)
    if len(sel.sim_imgs) < 2 or not sel.diss_imgs or not pairs:
        return []
    try:
        sim_src = _trace_all(source, [dataset.image(i) for i in pool], deadline)
        sim_tgt = _trace_all(target, [dataset.image(i) for i in pool], deadline)
        diss_src = _trace_all(source, [dataset.image(i) for i in sel.diss_imgs], deadline)
        diss_tgt = _trace_all(target, [dataset.image(i) for i in sel.diss_imgs], deadline)
    except FixconError:
        return []
    sim_all, skipped = layer_differences(sim_src, sim_tgt, pairs)
    diss, skipped_d = layer_differences(diss_src, diss_tgt, pairs)
    skipped.update(skipped_d)
    row = {image_id: k for k, image_id in enumerate(pool)}
    runs = []
    for r, sample in enumerate(samples):
        if deadline is not None:
            deadline.check()
        idx = np.array([row[i] for i in sample])
        sim = {p: a[idx] for p, a in sim_all.items() if p not in skipped}
        dd = {p: a for p, a in diss.items() if p not in skipped}
        seed = int(np.random.default_rng([cfg.seed, iteration, r, 1]).integers(2 ** 32))
        runs.append(analyze_differences(sim, dd, skipped, cfg.significance, cfg.element_cap, seed))
    return runs


def _localize(source: GraphModel, target: GraphModel, dataset: Dataset, ev: EvalSummary,
              sel: ImageSelection | None, cfg: RepairConfig, iteration: int,
              deadline: _Deadline | None) -> _Localization:
    pp_candidates, pp = check_preprocessing(source, target)
    id_report = check_input_dims(source, target)
    tss = check_tensor_structure(source, target)
    matching = match_layers(source, target)
    wb = compare_weights(source, target, matching)
    lh = compare_hyperparams(source, target, matching)
    conv_pairs = matching.layer_pairs(source)
    runs = [] if sel is None else _activation_runs(source, target, dataset, ev, sel, conv_pairs, cfg,
                                                   iteration, deadline)
    ranking = rank_suspicious_layers(conv_pairs, param_mismatch_counts(wb + lh), runs)
    cg = [r for pair in ranking.pairs for r in compare_graph(source, target, pair, matching)]
    flagged = {r.location for r in wb + lh}
    exec_pos = {nid: i for i, nid in enumerate(source.execution_order)}
    extra = sorted((p for p in matching.pairs if source.node(p[0]).op not in LAYER_OPS and p in flagged),
                   key=lambda p: exec_pos[p[0]])
    order = list(ranking.pairs) + extra
    rank_of = {p: i + 1 for i, p in enumerate(order)}
    for report in wb + lh + cg:
        report.suspicious_rank = rank_of.get(report.location)
    return _Localization(pp_candidates, pp, id_report, tss, matching, wb, lh, cg, ranking, order, runs)


def localize(source: GraphModel, target: GraphModel, dataset: Dataset,
             cfg: RepairConfig = RepairConfig()) -> LocalizationResult:
    """One localisation pass over the current Target; no repair is attempted."""
    _check_valid(source, "source")
    _check_valid(target, "target")
    ev = evaluate(source, target, dataset)
    try:
        sel = select_images(ev, cfg)
    except SelectionError:
        sel = None
    loc = _localize(source, target, dataset, ev, sel, cfg, 0, None)
    return LocalizationResult(loc.reports())


# -- the repair loop -------------------------------------------------------------

def _check_valid(model: GraphModel, what: str) -> None:
    problems = validate(model)
    if problems:
        raise ValidationError([f"{what}: {p}" for p in problems])


class _Run:
    def __init__(self, source, dataset, cfg, deadline):
        self.source = source
        self.dataset = dataset
        self.cfg = cfg
        self.deadline = deadline
        self.actions: list[RepairAction] = []
        self.localized: dict[str, list[str]] = {c.value: [] for c in Category}
        self.src_rankings: dict[str, LabelRanking] = {}

    def note_reports(self, reports: Sequence[FaultReport]) -> None:
        for r in reports:
            cat, loc = r.key()
            if loc not in self.localized[cat]:
                self.localized[cat].append(loc)

    def tau(self, model: GraphModel, image_id: str) -> float | None:
        try:
            ranking = _rank(model, self.dataset.image(image_id))
        except FixconError:
            return None
        return kendall_tau(self.src_rankings[image_id], ranking)

    def log(self, iteration: int, cand: CandidateModel | None, strategy: Category, location: Location,
            description: str, accepted: bool, before: float | None, after: float | None) -> int:
        self.actions.append(RepairAction(strategy, location, description, accepted, before, after, iteration))
        return len(self.actions) - 1

    def iterate(self, incumbent: GraphModel, ev: EvalSummary, iteration: int) -> tuple[GraphModel, list[int]]:
        """One pass of input-based trials then layer-based repairs on ``incumbent``."""
        cfg, deadline = self.cfg, self.deadline
        sel = select_images(ev, cfg, seed=cfg.seed + iteration)
        driving = sel.driving_image
        tau_inc = self.tau(incumbent, driving)
        fixed = lambda t: t is not None and t >= cfg.kt_fixed_threshold  # noqa: E731

        pp_cands, pp = check_preprocessing(self.source, incumbent)
        if pp is not None:
            self.note_reports([pp])
            for cand in repair_preprocessing(incumbent, pp_cands):
                if cand.model.preproc == incumbent.preproc:
                    continue
                deadline.check()
                t = self.tau(cand.model, driving)
                idx = self.log(iteration, cand, Category.PP, cand.location, cand.description, fixed(t), tau_inc, t)
                if fixed(t):
                    return cand.model, [idx]

        id_report = check_input_dims(self.source, incumbent)
        tss = check_tensor_structure(self.source, incumbent)
        self.note_reports(([id_report] if id_report else []) + tss)
        trials: list[tuple[Category, Location, Callable[[], CandidateModel]]] = []
        if id_report is not None:
            trials.append((Category.ID, id_report.location, lambda: repair_input_dims(incumbent, self.source)))
        if tss:
            trials.append((Category.TSS, tss[0].location,
                           lambda: repair_tensor_structure(incumbent, self.source, tss)))
        for category, location, make in trials:
            deadline.check()
            try:
                cand = make()
            except RepairError as exc:
                self.log(iteration, None, category, location, f"rejected: {exc}", False, tau_inc, None)
                continue
            t = self.tau(cand.model, driving)
            idx = self.log(iteration, cand, category, cand.location, cand.description, fixed(t), tau_inc, t)
            if fixed(t):
                return cand.model, [idx]

        loc = _localize(self.source, incumbent, self.dataset, ev, sel, cfg, iteration, deadline)
        self.note_reports(loc.wb + loc.lh + loc.cg)
        local_best, tau_best = incumbent, tau_inc
        accepted: list[int] = []
        for strategy in (Category.WB, Category.LH, Category.CG):
            for pair in loc.order:
                reports = loc.layer_reports(strategy, pair)
                if not reports:
                    continue
                deadline.check()
                try:
                    cand = apply_strategy(strategy, local_best, self.source, pair, reports)
                except RepairError as exc:
                    self.log(iteration, None, strategy, pair, f"rejected: {exc}", False, tau_best, None)
                    continue
                t = self.tau(cand.model, driving)
                improved = t is not None and (tau_best is None or t > tau_best)
                idx = self.log(iteration, cand, strategy, pair, cand.description, improved, tau_best, t)
                if improved:
                    local_best, tau_best = cand.model, t
                    accepted.append(idx)
                    if fixed(t):
                        return local_best, accepted
        return local_best, accepted


def run_repair(source: GraphModel, target: GraphModel, dataset: Dataset, cfg: RepairConfig = RepairConfig(),
               clock: Callable[[], float] = time.monotonic, started_at: float | None = None) -> RepairOutcome:
    """Iteratively localise and repair ``target`` until it agrees with ``source``.

    Stops on zero dissimilarity, after ``cfg.diss_no`` iterations without a
    change in dissimilarity, or when the time limit is reached.
    """
    _check_valid(source, "source")
    _check_valid(target, "target")
    deadline = _Deadline(cfg.time_limit_secs, clock() if started_at is None else started_at, clock)
    run = _Run(source, dataset, cfg, deadline)
    state = LoopState()
    evaluations: list[EvalSummary] = []
    incumbent: GraphModel | None = None
    inc_eval: EvalSummary | None = None
    proposal, pending = target, []
    reason = None
    try:
        run.src_rankings = source_rankings(source, dataset, deadline)
        while True:
            if proposal is incumbent:
                ev = inc_eval
            else:
                ev = evaluate(source, proposal, dataset, run.src_rankings, deadline)
                if inc_eval is not None and ev.dissimilarity_pct > inc_eval.dissimilarity_pct:
                    for idx in pending:
                        _reject(run.actions[idx], f"dissimilarity rose to {ev.dissimilarity_pct:.2f}%")
                    ev = inc_eval
                else:
                    incumbent, inc_eval = proposal, ev
            pending = []
            evaluations.append(ev)
            state.record(ev.dissimilarity_pct)
            state.elapsed = deadline.elapsed()
            if ev.dissimilarity_pct == 0:
                reason = "zero-dissimilarity"
            elif state.same_diss >= cfg.diss_no:
                reason = "stagnation"
            elif deadline.expired():
                reason = "time-limit"
            if reason:
                break
            state.iteration += 1
            proposal, pending = run.iterate(incumbent, ev, state.iteration)
            if not pending:
                proposal = incumbent
    except _TimeUp:
        reason = "time-limit"
        for idx in pending:
            _reject(run.actions[idx], "time limit reached before evaluation")
        if incumbent is None:
            incumbent = target
    except EvaluationError as exc:
        raise RepairAborted(str(exc), run.actions) from exc
    state.elapsed = deadline.elapsed()
    return RepairOutcome(incumbent, run.actions, evaluations, reason, state, run.localized)


def _reject(action: RepairAction, why: str) -> None:
    action.accepted = False
    action.description += f" (reverted: {why})"


# -- outputs -------------------------------------------------------------------

def metadata_paths(out_path: str | Path) -> tuple[Path, Path]:
    out_path = Path(out_path)
    stem = out_path.with_suffix("")
    return Path(f"{stem}.repairlog.jsonl"), Path(f"{stem}.eval.json")


def write_repair_log(actions: Sequence[RepairAction], path: str | Path) -> None:
    lines = [json.dumps(a.to_dict(), sort_keys=True) for a in actions]
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_outcome(outcome: RepairOutcome, out_path: str | Path, cfg: RepairConfig) -> tuple[Path, Path]:
    save_model(outcome.model, out_path)
    log_path, eval_path = metadata_paths(out_path)
    write_repair_log(outcome.actions, log_path)
    meta = {
        "termination_reason": outcome.termination_reason,
        "iterations": outcome.state.iteration,
        "final_dissimilarity_pct": outcome.final_dissimilarity,
        "dissimilarity_history": outcome.state.diss_history,
        "config": cfg.to_dict(),
        "localized": outcome.localized,
        "repaired": outcome.repaired,
        "evaluations": [dict(iteration=i, **ev.to_dict()) for i, ev in enumerate(outcome.evaluations)],
    }
    eval_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return log_path, eval_path
