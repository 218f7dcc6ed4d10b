"""Weight-ensemble selection algorithms: greedy, greedier, and ranked.

All three start from the highest ID-validation-accuracy model and grow an
ingredient set whose uniform weight average (the WA) is the ensemble:

- greedy: one linear pass over the remaining models in decreasing individual
  accuracy; each candidate is accepted or permanently discarded.
- greedier: every remaining model is evaluated at every step and the argmax
  WA-accuracy candidate is accepted while it keeps improving the WA.
- ranked: remaining models are walked in decreasing distance from the current
  WA (ratio-error diversity or squared Euclidean); the first improving
  candidate is accepted and rejected ones return to the pool.

Selection always consults ID validation accuracy; OOD accuracy is recorded but
never drives a decision. Runs are fully deterministic: all ties break toward
the lowest model id.

A run produces a :class:`SoupTrajectory`, a complete event log (every candidate
evaluation, per-step distances of all remaining models to the current WA, and
the WA's per-example correctness after each acceptance) sufficient to drive the
analysis and visualization stages without re-running any model.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from soupbench.bundle import (
    SPLITS,
    Bundle,
    CorrectnessRecord,
    ModelEntry,
    average_weights,
    pack_bits,
    unpack_bits,
)
from soupbench.errors import DataError
from soupbench.metrics import KIND_DIVERSITY, KIND_EUCLIDEAN, KINDS, euclidean_sq, ratio_error

TRAJECTORY_SCHEMA_VERSION = 1

ALGO_GREEDY = "greedy"
ALGO_GREEDIER = "greedier"
ALGO_RANKED_DIVERSITY = "ranked-diversity"
ALGO_RANKED_EUCLIDEAN = "ranked-euclidean"
ALGORITHMS = (ALGO_GREEDY, ALGO_GREEDIER, ALGO_RANKED_DIVERSITY, ALGO_RANKED_EUCLIDEAN)

ACCEPT_STRICT = "strict"
ACCEPT_NONSTRICT = "nonstrict"

# Evaluator: forward pass of a weight vector over the held data splits.
Evaluator = Callable[[np.ndarray], CorrectnessRecord]


@dataclass
class CandidateEval:
    """Result of trying one candidate against the current ingredient set."""

    candidate_id: int
    wa_id_val_accuracy: float
    wa_ood_accuracy: float
    distance_to_current_wa: dict[str, float]
    wa_id_val_correctness: np.ndarray | None = None

    def accuracy(self, split: str) -> float:
        return self.wa_id_val_accuracy if split == "id_val" else self.wa_ood_accuracy


@dataclass
class IterationRecord:
    """One selection step: every evaluation made, and what (if anything) was accepted.

    ``distances_to_wa`` covers every model in ``remaining_ids_before`` (the WA is
    fixed within a step, so one table serves all of the step's candidates), which
    lets the analysis stage rank a selection among candidates that were never
    evaluated for accuracy.
    """

    t: int
    remaining_ids_before: list[int]
    distances_to_wa: dict[str, dict[int, float]]
    evals: list[CandidateEval]
    selected_id: int | None
    wa_accuracy_after: dict[str, float]
    wa_correctness_after: dict[str, np.ndarray]


@dataclass
class SoupTrajectory:
    """Full event log of one algorithm run on one bundle."""

    algorithm: str
    accept: str
    initial_model_id: int
    initial_accuracy: dict[str, float]
    initial_correctness: dict[str, np.ndarray]
    split_sizes: dict[str, int]
    iterations: list[IterationRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def terminated_at(self) -> int:
        return self.iterations[-1].t if self.iterations else 0

    def accepted_iterations(self) -> list[IterationRecord]:
        return [it for it in self.iterations if it.selected_id is not None]

    def ingredient_ids(self) -> list[int]:
        """Selected models in acceptance order, initial model first."""
        return [self.initial_model_id] + [it.selected_id for it in self.accepted_iterations()]

    def accuracy_series(self, split: str) -> list[float]:
        """WA accuracy after each acceptance; entry t-1 is the (t+1)-ingredient WA."""
        return [it.wa_accuracy_after[split] for it in self.accepted_iterations()]

    def wa_correctness_series(self, split: str) -> list[np.ndarray]:
        """Per-example WA correctness before/after each acceptance, initial WA first."""
        series = [self.initial_correctness[split]]
        series.extend(it.wa_correctness_after[split] for it in self.accepted_iterations())
        return series


@dataclass
class _WaState:
    """Current WA: its weights, correctness on both splits, and accuracies."""

    weights: np.ndarray
    correctness: CorrectnessRecord
    accuracy: dict[str, float]


def _evaluate_weights(weights: np.ndarray, evaluator: Evaluator) -> _WaState:
    corr = evaluator(weights)
    acc = {split: corr.accuracy(split) for split in SPLITS}
    return _WaState(weights=weights, correctness=corr, accuracy=acc)


def _distance_table(wa: _WaState, candidates: Sequence[ModelEntry]) -> dict[str, dict[int, float]]:
    table: dict[str, dict[int, float]] = {k: {} for k in KINDS}
    for m in candidates:
        table[KIND_DIVERSITY][m.id] = ratio_error(wa.correctness.id_val, m.correctness.id_val)
        table[KIND_EUCLIDEAN][m.id] = euclidean_sq(wa.weights, m.weights)
    return table


def _eval_candidate(
    ingredients: Sequence[ModelEntry],
    candidate: ModelEntry,
    evaluator: Evaluator,
    current: _WaState,
) -> tuple[CandidateEval, _WaState]:
    wa_weights = average_weights([m.weights for m in ingredients] + [candidate.weights])
    state = _evaluate_weights(wa_weights, evaluator)
    ev = CandidateEval(
        candidate_id=candidate.id,
        wa_id_val_accuracy=state.accuracy["id_val"],
        wa_ood_accuracy=state.accuracy["ood_test"],
        distance_to_current_wa={
            KIND_DIVERSITY: ratio_error(current.correctness.id_val, candidate.correctness.id_val),
            KIND_EUCLIDEAN: euclidean_sq(current.weights, candidate.weights),
        },
        wa_id_val_correctness=state.correctness.id_val,
    )
    return ev, state


def evaluate_candidate(
    ingredients: Sequence[ModelEntry],
    candidate: ModelEntry,
    evaluator: Evaluator,
) -> CandidateEval:
    """Evaluate the WA of ``ingredients + [candidate]`` and the candidate's distances.

    Distances are measured from the WA of the ingredients alone to the candidate
    model, under both distance kinds.
    """
    if any(m.id == candidate.id for m in ingredients):
        raise DataError(f"candidate {candidate.id} already an ingredient")
    current = _evaluate_weights(average_weights([m.weights for m in ingredients]), evaluator)
    ev, _ = _eval_candidate(ingredients, candidate, evaluator, current)
    return ev


def _passes(candidate_acc: float, max_acc: float, accept: str) -> bool:
    if accept == ACCEPT_STRICT:
        return candidate_acc > max_acc
    if accept == ACCEPT_NONSTRICT:
        return candidate_acc >= max_acc
    raise DataError(f"unknown acceptance rule {accept!r}")


def _initial_state(bundle: Bundle, evaluator: Evaluator) -> tuple[ModelEntry, list[ModelEntry], _WaState]:
    if not bundle.models:
        raise DataError("empty bundle")
    ranked = sorted(bundle.models, key=lambda m: (-m.id_val_accuracy, m.id))
    top, rest = ranked[0], ranked[1:]
    state = _evaluate_weights(average_weights([top.weights]), evaluator)
    return top, rest, state


def _trajectory(algorithm: str, accept: str, top: ModelEntry, state: _WaState, bundle: Bundle) -> SoupTrajectory:
    return SoupTrajectory(
        algorithm=algorithm,
        accept=accept,
        initial_model_id=top.id,
        initial_accuracy=dict(state.accuracy),
        initial_correctness={s: state.correctness.split(s) for s in SPLITS},
        split_sizes={s: int(state.correctness.split(s).size) for s in SPLITS},
        meta={k: bundle.manifest[k] for k in ("trial", "held_out_env", "config_hash") if k in bundle.manifest},
    )


def run_greedy(bundle: Bundle, evaluator: Evaluator, accept: str = ACCEPT_NONSTRICT) -> SoupTrajectory:
    """Single accuracy-ordered pass; rejected candidates are discarded for good.

    Models are sorted by decreasing individual ID-val accuracy (ties toward the
    lower id). The step index advances only when a candidate is accepted, so an
    iteration record groups the rejections that preceded an acceptance; a trailing
    record with ``selected_id=None`` holds any rejections after the last acceptance.
    """
    top, pool, wa = _initial_state(bundle, evaluator)
    traj = _trajectory(ALGO_GREEDY, accept, top, wa, bundle)
    ingredients = [top]
    max_acc = wa.accuracy["id_val"]

    t = 1
    pos = 0
    step_remaining = [m.id for m in pool]
    step_table = _distance_table(wa, pool)
    step_evals: list[CandidateEval] = []
    for pos, candidate in enumerate(pool):
        ev, cand_state = _eval_candidate(ingredients, candidate, evaluator, wa)
        step_evals.append(ev)
        if _passes(ev.wa_id_val_accuracy, max_acc, accept):
            ingredients.append(candidate)
            wa = cand_state
            max_acc = ev.wa_id_val_accuracy
            traj.iterations.append(
                IterationRecord(
                    t=t,
                    remaining_ids_before=step_remaining,
                    distances_to_wa=step_table,
                    evals=step_evals,
                    selected_id=candidate.id,
                    wa_accuracy_after=dict(wa.accuracy),
                    wa_correctness_after={s: wa.correctness.split(s) for s in SPLITS},
                )
            )
            t += 1
            step_remaining = [m.id for m in pool[pos + 1 :]]
            step_table = _distance_table(wa, pool[pos + 1 :])
            step_evals = []
    if step_evals:
        traj.iterations.append(
            IterationRecord(
                t=t,
                remaining_ids_before=step_remaining,
                distances_to_wa=step_table,
                evals=step_evals,
                selected_id=None,
                wa_accuracy_after=dict(wa.accuracy),
                wa_correctness_after={s: wa.correctness.split(s) for s in SPLITS},
            )
        )
    return traj


def run_greedier(bundle: Bundle, evaluator: Evaluator, accept: str = ACCEPT_STRICT) -> SoupTrajectory:
    """Evaluate every remaining model each step; accept the argmax while it improves.

    The argmax candidate joins the ingredients only if its WA passes the acceptance
    rule against the best accuracy so far (strict ``>`` by default); otherwise the
    run terminates. Argmax ties go to the lowest candidate id.
    """
    top, pool, wa = _initial_state(bundle, evaluator)
    traj = _trajectory(ALGO_GREEDIER, accept, top, wa, bundle)
    ingredients = [top]
    max_acc = wa.accuracy["id_val"]
    pool = sorted(pool, key=lambda m: m.id)

    t = 1
    while pool:
        remaining_before = [m.id for m in pool]
        table = _distance_table(wa, pool)
        evals = []
        states = {}
        for candidate in pool:
            ev, state = _eval_candidate(ingredients, candidate, evaluator, wa)
            evals.append(ev)
            states[candidate.id] = state
        best = min(evals, key=lambda e: (-e.wa_id_val_accuracy, e.candidate_id))
        accepted = _passes(best.wa_id_val_accuracy, max_acc, accept)
        if accepted:
            ingredients.append(next(m for m in pool if m.id == best.candidate_id))
            wa = states[best.candidate_id]
            max_acc = best.wa_id_val_accuracy
            pool = [m for m in pool if m.id != best.candidate_id]
        traj.iterations.append(
            IterationRecord(
                t=t,
                remaining_ids_before=remaining_before,
                distances_to_wa=table,
                evals=evals,
                selected_id=best.candidate_id if accepted else None,
                wa_accuracy_after=dict(wa.accuracy),
                wa_correctness_after={s: wa.correctness.split(s) for s in SPLITS},
            )
        )
        if not accepted:
            break
        t += 1
    return traj


def run_ranked(
    bundle: Bundle,
    evaluator: Evaluator,
    kind: str = KIND_DIVERSITY,
    accept: str = ACCEPT_STRICT,
) -> SoupTrajectory:
    """Walk remaining models in decreasing distance from the current WA.

    The first candidate whose WA passes the acceptance rule is taken; candidates
    rejected during the walk are stashed and return to the pool next step. Distance
    ties break toward the lower id; an infinite diversity sentinel outranks every
    finite distance. Terminates when a full pass accepts nothing.
    """
    if kind not in KINDS:
        raise DataError(f"unknown distance kind {kind!r}")
    algorithm = ALGO_RANKED_DIVERSITY if kind == KIND_DIVERSITY else ALGO_RANKED_EUCLIDEAN
    top, pool, wa = _initial_state(bundle, evaluator)
    traj = _trajectory(algorithm, accept, top, wa, bundle)
    ingredients = [top]
    max_acc = wa.accuracy["id_val"]
    pool = sorted(pool, key=lambda m: m.id)

    t = 1
    while pool:
        remaining_before = [m.id for m in pool]
        table = _distance_table(wa, pool)
        order = sorted(pool, key=lambda m: (-table[kind][m.id], m.id))
        evals = []
        selected = None
        for candidate in order:
            ev, state = _eval_candidate(ingredients, candidate, evaluator, wa)
            evals.append(ev)
            if _passes(ev.wa_id_val_accuracy, max_acc, accept):
                selected = candidate
                selected_state = state
                break
        if selected is not None:
            ingredients.append(selected)
            wa = selected_state
            max_acc = selected_state.accuracy["id_val"]
            pool = [m for m in pool if m.id != selected.id]
        traj.iterations.append(
            IterationRecord(
                t=t,
                remaining_ids_before=remaining_before,
                distances_to_wa=table,
                evals=evals,
                selected_id=selected.id if selected is not None else None,
                wa_accuracy_after=dict(wa.accuracy),
                wa_correctness_after={s: wa.correctness.split(s) for s in SPLITS},
            )
        )
        if selected is None:
            break
        t += 1
    return traj


def run_algorithm(
    bundle: Bundle, evaluator: Evaluator, algorithm: str, accept: str | None = None
) -> SoupTrajectory:
    """Dispatch by algorithm name, applying each algorithm's default acceptance rule."""
    if algorithm == ALGO_GREEDY:
        return run_greedy(bundle, evaluator, accept or ACCEPT_NONSTRICT)
    if algorithm == ALGO_GREEDIER:
        return run_greedier(bundle, evaluator, accept or ACCEPT_STRICT)
    if algorithm == ALGO_RANKED_DIVERSITY:
        return run_ranked(bundle, evaluator, KIND_DIVERSITY, accept or ACCEPT_STRICT)
    if algorithm == ALGO_RANKED_EUCLIDEAN:
        return run_ranked(bundle, evaluator, KIND_EUCLIDEAN, accept or ACCEPT_STRICT)
    raise DataError(f"unknown algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# serialization

def _num_out(x: float):
    return "inf" if math.isinf(x) else float(x)


def _num_in(x) -> float:
    return math.inf if x == "inf" else float(x)


def _bits_out(bits: np.ndarray) -> str:
    return base64.b64encode(pack_bits(bits)).decode("ascii")


def _bits_in(text: str, n: int) -> np.ndarray:
    return unpack_bits(base64.b64decode(text.encode("ascii")), n)


def trajectory_to_dict(traj: SoupTrajectory) -> dict:
    return {
        "schema_version": TRAJECTORY_SCHEMA_VERSION,
        "algorithm": traj.algorithm,
        "accept": traj.accept,
        "initial_model_id": traj.initial_model_id,
        "initial_accuracy": traj.initial_accuracy,
        "initial_correctness": {s: _bits_out(v) for s, v in traj.initial_correctness.items()},
        "split_sizes": traj.split_sizes,
        "meta": traj.meta,
        "terminated_at": traj.terminated_at,
        "iterations": [
            {
                "t": it.t,
                "remaining_ids_before": it.remaining_ids_before,
                "distances_to_wa": {
                    kind: {str(i): _num_out(d) for i, d in sorted(dists.items())}
                    for kind, dists in it.distances_to_wa.items()
                },
                "evals": [
                    {
                        "candidate_id": ev.candidate_id,
                        "wa_id_val_accuracy": ev.wa_id_val_accuracy,
                        "wa_ood_accuracy": ev.wa_ood_accuracy,
                        "distance_to_current_wa": {
                            k: _num_out(d) for k, d in sorted(ev.distance_to_current_wa.items())
                        },
                        "wa_id_val_correctness": _bits_out(ev.wa_id_val_correctness)
                        if ev.wa_id_val_correctness is not None
                        else None,
                    }
                    for ev in it.evals
                ],
                "selected_id": it.selected_id,
                "wa_accuracy_after": it.wa_accuracy_after,
                "wa_correctness_after": {s: _bits_out(v) for s, v in it.wa_correctness_after.items()},
            }
            for it in traj.iterations
        ],
    }


def trajectory_from_dict(data: dict) -> SoupTrajectory:
    version = data.get("schema_version")
    if version != TRAJECTORY_SCHEMA_VERSION:
        raise DataError(
            f"trajectory schema version mismatch: file has {version}, "
            f"expected {TRAJECTORY_SCHEMA_VERSION}"
        )
    sizes = data["split_sizes"]
    traj = SoupTrajectory(
        algorithm=data["algorithm"],
        accept=data["accept"],
        initial_model_id=data["initial_model_id"],
        initial_accuracy=data["initial_accuracy"],
        initial_correctness={s: _bits_in(v, sizes[s]) for s, v in data["initial_correctness"].items()},
        split_sizes=sizes,
        meta=data.get("meta", {}),
    )
    for rec in data["iterations"]:
        traj.iterations.append(
            IterationRecord(
                t=rec["t"],
                remaining_ids_before=list(rec["remaining_ids_before"]),
                distances_to_wa={
                    kind: {int(i): _num_in(d) for i, d in dists.items()}
                    for kind, dists in rec["distances_to_wa"].items()
                },
                evals=[
                    CandidateEval(
                        candidate_id=ev["candidate_id"],
                        wa_id_val_accuracy=ev["wa_id_val_accuracy"],
                        wa_ood_accuracy=ev["wa_ood_accuracy"],
                        distance_to_current_wa={
                            k: _num_in(d) for k, d in ev["distance_to_current_wa"].items()
                        },
                        wa_id_val_correctness=_bits_in(ev["wa_id_val_correctness"], sizes["id_val"])
                        if ev.get("wa_id_val_correctness") is not None
                        else None,
                    )
                    for ev in rec["evals"]
                ],
                selected_id=rec["selected_id"],
                wa_accuracy_after=rec["wa_accuracy_after"],
                wa_correctness_after={
                    s: _bits_in(v, sizes[s]) for s, v in rec["wa_correctness_after"].items()
                },
            )
        )
    return traj


def save_trajectory(traj: SoupTrajectory, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(trajectory_to_dict(traj), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_trajectory(path: str | Path) -> SoupTrajectory:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    with open(p) as fh:
        return trajectory_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# invariant verifier

def verify_trajectory(traj: SoupTrajectory, all_model_ids: Sequence[int] | None = None) -> list[str]:
    """Check the structural invariants of a trajectory log; returns violations.

    Checks monotone WA accuracy under the run's acceptance rule, single-selection
    and conservation of the model pool, greedier step-optimality, and ranked
    distance-order/stash semantics. An empty list means the trajectory is valid.
    """
    bad: list[str] = []
    ranked_kind = None
    if traj.algorithm == ALGO_RANKED_DIVERSITY:
        ranked_kind = KIND_DIVERSITY
    elif traj.algorithm == ALGO_RANKED_EUCLIDEAN:
        ranked_kind = KIND_EUCLIDEAN

    selected: list[int] = []
    discarded: set[int] = set()
    max_acc = traj.initial_accuracy["id_val"]
    acc_series = [max_acc]

    for it in traj.iterations:
        remaining = set(it.remaining_ids_before)
        ingredients = {traj.initial_model_id, *selected}
        if remaining & ingredients:
            bad.append(f"t={it.t}: remaining set overlaps ingredients: {remaining & ingredients}")
        if discarded & remaining:
            bad.append(f"t={it.t}: discarded candidate back in remaining: {discarded & remaining}")
        if all_model_ids is not None:
            universe = set(all_model_ids)
            union = remaining | ingredients | discarded
            if union != universe:
                bad.append(f"t={it.t}: pool not conserved: missing {universe - union}, extra {union - universe}")
        for kind in KINDS:
            if set(it.distances_to_wa.get(kind, {})) != remaining:
                bad.append(f"t={it.t}: {kind} distance table does not cover remaining set")
        for ev in it.evals:
            if not (0.0 <= ev.wa_id_val_accuracy <= 1.0 and 0.0 <= ev.wa_ood_accuracy <= 1.0):
                bad.append(f"t={it.t}: candidate {ev.candidate_id} accuracy out of [0,1]")
            for kind, d in ev.distance_to_current_wa.items():
                if d < 0:
                    bad.append(f"t={it.t}: candidate {ev.candidate_id} negative {kind} distance")
                table_d = it.distances_to_wa.get(kind, {}).get(ev.candidate_id)
                if table_d is not None and table_d != d:
                    bad.append(f"t={it.t}: candidate {ev.candidate_id} {kind} distance disagrees with table")
            if ev.candidate_id not in remaining:
                bad.append(f"t={it.t}: evaluated candidate {ev.candidate_id} not in remaining set")

        eval_by_id = {ev.candidate_id: ev for ev in it.evals}
        if it.selected_id is not None:
            if it.selected_id in selected:
                bad.append(f"t={it.t}: {it.selected_id} selected twice")
            sel = eval_by_id.get(it.selected_id)
            if sel is None:
                bad.append(f"t={it.t}: selected id {it.selected_id} has no recorded eval")
            else:
                if not _passes(sel.wa_id_val_accuracy, max_acc, traj.accept):
                    bad.append(f"t={it.t}: selected candidate fails the {traj.accept} acceptance rule")
                if it.wa_accuracy_after["id_val"] != sel.wa_id_val_accuracy:
                    bad.append(f"t={it.t}: wa_accuracy_after disagrees with the selected eval")
                if traj.algorithm == ALGO_GREEDIER:
                    best = max(ev.wa_id_val_accuracy for ev in it.evals)
                    if sel.wa_id_val_accuracy != best:
                        bad.append(f"t={it.t}: greedier selection is not the argmax over evals")
                if ranked_kind is not None:
                    d_sel = sel.distance_to_current_wa[ranked_kind]
                    for ev in it.evals:
                        if ev.candidate_id == it.selected_id:
                            break
                        d_ev = ev.distance_to_current_wa[ranked_kind]
                        if d_ev < d_sel:
                            bad.append(
                                f"t={it.t}: ranked walked {ev.candidate_id} (d={d_ev}) before a "
                                f"farther accepted candidate (d={d_sel})"
                            )
                        if _passes(ev.wa_id_val_accuracy, max_acc, traj.accept):
                            bad.append(f"t={it.t}: ranked skipped a passing candidate {ev.candidate_id}")
                max_acc = sel.wa_id_val_accuracy
                acc_series.append(max_acc)
            selected.append(it.selected_id)
            if traj.algorithm == ALGO_GREEDY:
                discarded.update(ev.candidate_id for ev in it.evals if ev.candidate_id != it.selected_id)
        else:
            if traj.algorithm == ALGO_GREEDY:
                discarded.update(ev.candidate_id for ev in it.evals)
            if traj.algorithm == ALGO_GREEDIER and it.evals:
                best = min(
                    (e for e in it.evals), key=lambda e: (-e.wa_id_val_accuracy, e.candidate_id)
                )
                if _passes(best.wa_id_val_accuracy, max_acc, traj.accept):
                    bad.append(f"t={it.t}: greedier terminated although candidate {best.candidate_id} passes")

    for i in range(1, len(acc_series)):
        if traj.accept == ACCEPT_STRICT and not acc_series[i] > acc_series[i - 1]:
            bad.append(f"acceptance {i}: accuracy not strictly increasing under strict acceptance")
        if acc_series[i] < acc_series[i - 1]:
            bad.append(f"acceptance {i}: accuracy decreased")
    return bad
