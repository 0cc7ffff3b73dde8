"""Counterexample-guided synthesis of monotone non-increasing threshold vectors.

Two strategies over the same falsification oracle:

* pivot-based: seed a threshold at the peak residue of the detector-free
  attack, then per counterexample either insert a new threshold before an
  existing one (case 1a), after all of them (case 1b), or reduce the existing
  threshold that needs the least effort (case 1c);
* step-wise: grow a staircase left to right at non-increasing heights
  (case 2a), then lower whole step segments by removing the cheapest area
  above a counterexample residue (case 2b with min_area_rectangle).

A run converges when the falsifier certifies that no stealthy successful
attack remains. Every repair must keep the set entries non-increasing and
must make the triggering counterexample alarm; both are asserted after each
round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import ATTACK, NULL, UNKNOWN, att_vec_syn
from .detectors import Norm, StepsVector, ThresholdVector
from .modelio import attack_to_csv, float_str, threshold_to_csv

RUNNING = "running"
CONVERGED = "converged"
TIMEOUT_PARTIAL = "timeout_partial"
BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass
class RoundRecord:
    round: int
    case: str
    index: int | None
    value: float | None
    profile: np.ndarray
    th_after: np.ndarray
    eliminated: bool


@dataclass
class SynthesisState:
    th: ThresholdVector
    steps: dict | None
    rounds: int
    history: list = field(default_factory=list)
    status: str = RUNNING

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _argmax_first(values, indices) -> int:
    """Index attaining the maximum, smallest index on ties."""
    best = None
    best_val = -math.inf
    for idx in indices:
        if values[idx] > best_val:
            best_val = values[idx]
            best = idx
    return best


def eliminates(th: ThresholdVector, profile) -> bool:
    """True iff the profile alarms somewhere under th (counterexample killed)."""
    for idx in th.set_indices():
        if idx < len(profile) and profile[idx] >= th.values[idx]:
            return True
    return False


def _insert_value(th: ThresholdVector, i: int, profile) -> float:
    """Line-10 value rule: min of the residue at i and every earlier set threshold."""
    earlier = [th.values[k] for k in th.set_indices() if k < i]
    return min([float(profile[i])] + earlier)


def apply_case_1a(th: ThresholdVector, profile):
    """Insert before an existing threshold, at the largest residue meeting it.

    For each set index p (ascending), the candidate is the maximum residue at
    k < p with ||z_k|| >= Th[p]; the insertion keeps monotonicity or the next
    p is tried. Returns (new_th, info) or None.
    """
    for p in th.set_indices():
        thp = th.values[p]
        cands = [k for k in range(p) if profile[k] >= thp]
        if not cands:
            continue
        i = _argmax_first(profile, cands)
        v = _insert_value(th, i, profile)
        new = th.copy()
        new.values[i] = v
        if new.is_monotone_nonincreasing():
            return new, {"case": "1a", "index": i, "value": v, "pivot": p}
    return None


def apply_case_1b(th: ThresholdVector, profile):
    """Insert after an existing threshold, admissible only when the candidate
    residue dominates every later set threshold. Vacuous (zero) inserts are
    skipped. Returns (new_th, info) or None."""
    T = len(profile)
    for p in th.set_indices():
        cands = list(range(p + 1, T))
        if not cands:
            continue
        i = _argmax_first(profile, cands)
        if profile[i] <= 0:
            continue
        if any(th.values[k] > profile[i] for k in th.set_indices() if k > i):
            continue
        v = _insert_value(th, i, profile)
        new = th.copy()
        new.values[i] = v
        if new.is_monotone_nonincreasing():
            return new, {"case": "1b", "index": i, "value": v, "pivot": p}
    return None


def apply_case_1c(th: ThresholdVector, profile):
    """Reduce the set threshold with the least effort Th[i] - ||z_i|| down to
    its residue, clipping later set entries to keep monotonicity."""
    set_idx = th.set_indices()
    if not set_idx:
        raise RuntimeError(
            "case 1c reached with no set thresholds; the bootstrap pivot is missing"
        )
    efforts = {i: th.values[i] - profile[i] for i in set_idx}
    best = min(efforts.values())
    i = min(k for k, e in efforts.items() if e == best)
    v = float(profile[i])
    new = th.copy()
    new.values[i] = v
    for k in new.set_indices():
        if k > i and new.values[k] > v:
            new.values[k] = v
    return new, {"case": "1c", "index": i, "value": v, "pivot": None}


class _AuditLog:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.log_path = self.out_dir / "audit.log"
            self.log_path.write_text("")

    def record(self, state: SynthesisState, rec: RoundRecord, attack) -> None:
        state.history.append(rec)
        if self.out_dir is None:
            return
        attack_ref = f"round_{rec.round:03d}_attack.csv"
        th_ref = f"round_{rec.round:03d}_threshold.csv"
        attack_to_csv(self.out_dir / attack_ref, attack)
        threshold_to_csv(self.out_dir / th_ref, ThresholdVector(rec.th_after))
        idx = "-" if rec.index is None else str(rec.index + 1)
        val = "-" if rec.value is None else float_str(rec.value)
        with open(self.log_path, "a") as fh:
            fh.write(
                f"round={rec.round} case={rec.case} index={idx} value={val} "
                f"eliminated={rec.eliminated} attack={attack_ref} threshold={th_ref}\n"
            )

    def finish(self, state: SynthesisState) -> None:
        if self.out_dir is None:
            return
        threshold_to_csv(self.out_dir / "threshold_final.csv", state.th)
        with open(self.log_path, "a") as fh:
            fh.write(f"status={state.status} rounds={state.rounds}\n")


def _synth_call(th, pfc, mdc, T, model, gains, init, bounds, norm, timeout, solver_cmd):
    return att_vec_syn(th, pfc, mdc, T, model, gains, init, bounds=bounds,
                       norm=norm, timeout=timeout, solver_cmd=solver_cmd)


def pivot_based_threshold_syn(pfc, mdc, T, model, gains, init, bounds=None,
                              budget: int = 200, norm: Norm = Norm.INF,
                              timeout: float = 300.0, solver_cmd=None,
                              out_dir=None):
    """Pivot-based synthesis (cases 1a/1b/1c). Returns (th, state)."""
    audit = _AuditLog(out_dir)
    th = ThresholdVector.empty(T)
    state = SynthesisState(th=th, steps=None, rounds=0)

    out = _synth_call(None, pfc, mdc, T, model, gains, init, bounds, norm,
                      timeout, solver_cmd)
    if out.kind == NULL:
        state.status = CONVERGED
        audit.finish(state)
        return th, state
    if out.kind == UNKNOWN:
        state.status = TIMEOUT_PARTIAL
        audit.finish(state)
        return th, state

    profile = out.report.residue_profile
    i = _argmax_first(profile, range(T))
    th.values[i] = profile[i]
    state.rounds = 1
    assert th.is_monotone_nonincreasing()
    rec = RoundRecord(1, "pivot", i, float(profile[i]), profile.copy(),
                      th.values.copy(), eliminates(th, profile))
    assert rec.eliminated
    audit.record(state, rec, out.attack)

    while True:
        if state.rounds >= budget:
            state.status = BUDGET_EXHAUSTED
            break
        out = _synth_call(th, pfc, mdc, T, model, gains, init, bounds, norm,
                          timeout, solver_cmd)
        if out.kind == NULL:
            state.status = CONVERGED
            break
        if out.kind == UNKNOWN:
            state.status = TIMEOUT_PARTIAL
            break
        profile = out.report.residue_profile
        result = apply_case_1a(th, profile) or apply_case_1b(th, profile)
        if result is None:
            result = apply_case_1c(th, profile)
        th, info = result
        state.rounds += 1
        assert th.is_monotone_nonincreasing(), f"round {state.rounds}: monotonicity broken"
        killed = eliminates(th, profile)
        assert killed, f"round {state.rounds}: counterexample not eliminated"
        rec = RoundRecord(state.rounds, info["case"], info["index"], info["value"],
                          profile.copy(), th.values.copy(), killed)
        audit.record(state, rec, out.attack)

    state.th = th
    audit.finish(state)
    return th, state


# ------------------------------------------------------------ step-wise

def min_area_rectangle(profile, steps: dict, T: int) -> int:
    """Index whose removable staircase area above its residue is minimal.

    For candidate i the area accumulates (height - ||z_i||) * (edge - i) over
    every staircase edge right of i whose height exceeds ||z_i||. Ties break
    toward the smaller index. Indices are 0-based; edges map end-of-step
    index to height.
    """
    best_idx = None
    best_area = math.inf
    edges = sorted(steps.items())
    for i in range(T):
        v = profile[i]
        area = 0.0
        for j, h in edges:
            if j > i and j < T and h > v:
                area += (h - v) * (j - i)
        if area < best_area:
            best_area = area
            best_idx = i
    return best_idx


def _breaking_point(th: ThresholdVector, v: float) -> int:
    """Last index whose threshold exceeds v (thresholds are non-increasing)."""
    p = None
    for idx in th.set_indices():
        if th.values[idx] > v:
            p = idx
    return p


def _rebuild_consistent(steps: dict, th: ThresholdVector) -> None:
    assert StepsVector(steps).heights_nonincreasing(), "staircase heights increased"
    assert StepsVector(steps).consistent_with(th), "steps vector diverged from dense Th"


def apply_case_2a(th: ThresholdVector, steps: dict, profile):
    """Extend the staircase rightward from its last edge.

    The new step ends at the largest residue not above the previous height;
    if every later residue exceeds it, the step is clipped to the previous
    height at the overall argmax (logged as 2a-clip)."""
    T = len(profile)
    last = max(steps)
    prev_h = steps[last]
    cands = list(range(last + 1, T))
    qual = [k for k in cands if profile[k] <= prev_h]
    if qual:
        k_new = _argmax_first(profile, qual)
        height = float(profile[k_new])
        case = "2a"
    else:
        k_new = _argmax_first(profile, cands)
        height = prev_h
        case = "2a-clip"
    steps[k_new] = height
    th.values[last + 1:k_new + 1] = height
    return k_new, {"case": case, "index": k_new, "value": height}


def apply_case_2b(th: ThresholdVector, steps: dict, profile):
    """Lower a step segment by the minimum removable area that detects the
    current attack.

    Candidates whose lowered segment (k*, p] would not alarm on this profile
    cannot detect it and are skipped; if no candidate detects that way, the
    segment is lowered from k* itself ([k*, p], logged as 2b-pin), which
    always alarms at k*."""
    T = len(profile)

    def region_detects(i):
        p = _breaking_point(th, profile[i])
        if p is None or p <= i:
            return False
        return bool(np.max(profile[i + 1:p + 1]) >= profile[i])

    detecting = [i for i in range(T) if region_detects(i)]
    if detecting:
        edges = sorted(steps.items())
        best_idx, best_area = None, math.inf
        for i in detecting:
            v = profile[i]
            area = sum((h - v) * (j - i) for j, h in edges if j > i and j < T and h > v)
            if area < best_area:
                best_area, best_idx = area, i
        k = best_idx
        v = float(profile[k])
        p = _breaking_point(th, v)
        old_h = float(th.values[k])
        for e in [e for e in steps if k < e < p]:
            del steps[e]
        steps[k] = old_h
        steps[p] = v
        th.values[k + 1:p + 1] = v
        return {"case": "2b", "index": k, "value": v, "breaking_point": p}

    k = min_area_rectangle(profile, steps, T)
    v = float(profile[k])
    p = _breaking_point(th, v)
    if p is None or p < k:
        p = k
    for e in [e for e in steps if k - 1 < e < p]:
        del steps[e]
    if k > 0:
        steps[k - 1] = float(th.values[k - 1])
    steps[p] = v
    th.values[k:p + 1] = v
    return {"case": "2b-pin", "index": k, "value": v, "breaking_point": p}


def stepwise_threshold_syn(pfc, mdc, T, model, gains, init, bounds=None,
                           budget: int = 200, norm: Norm = Norm.INF,
                           timeout: float = 300.0, solver_cmd=None,
                           out_dir=None):
    """Step-wise staircase synthesis (cases 2a/2b). Returns (th, state)."""
    audit = _AuditLog(out_dir)
    th = ThresholdVector.empty(T)
    steps: dict = {}
    state = SynthesisState(th=th, steps=steps, rounds=0)

    out = _synth_call(None, pfc, mdc, T, model, gains, init, bounds, norm,
                      timeout, solver_cmd)
    if out.kind == NULL:
        state.status = CONVERGED
        audit.finish(state)
        return th, state
    if out.kind == UNKNOWN:
        state.status = TIMEOUT_PARTIAL
        audit.finish(state)
        return th, state

    profile = out.report.residue_profile
    i = _argmax_first(profile, range(T))
    steps[i] = float(profile[i])
    th.values[:i + 1] = profile[i]
    k = i
    state.rounds = 1
    _rebuild_consistent(steps, th)
    rec = RoundRecord(1, "2a-init", i, float(profile[i]), profile.copy(),
                      th.values.copy(), eliminates(th, profile))
    assert rec.eliminated
    audit.record(state, rec, out.attack)

    phase = 1
    while True:
        if state.rounds >= budget:
            state.status = BUDGET_EXHAUSTED
            break
        out = _synth_call(th, pfc, mdc, T, model, gains, init, bounds, norm,
                          timeout, solver_cmd)
        if out.kind == NULL:
            state.status = CONVERGED
            break
        if out.kind == UNKNOWN:
            state.status = TIMEOUT_PARTIAL
            break
        profile = out.report.residue_profile
        if phase == 1 and k != T - 1:
            k, info = apply_case_2a(th, steps, profile)
            if k == T - 1:
                phase = 2
        else:
            phase = 2
            info = apply_case_2b(th, steps, profile)
        state.rounds += 1
        assert th.is_monotone_nonincreasing(), f"round {state.rounds}: monotonicity broken"
        _rebuild_consistent(steps, th)
        killed = eliminates(th, profile)
        assert killed, f"round {state.rounds}: counterexample not eliminated"
        rec = RoundRecord(state.rounds, info["case"], info["index"], info["value"],
                          profile.copy(), th.values.copy(), killed)
        audit.record(state, rec, out.attack)

    state.th = th
    state.steps = steps
    audit.finish(state)
    return th, state


# ------------------------------------------------------------ static baseline

@dataclass
class StaticSynthesisResult:
    threshold: float
    status: str
    solver_calls: int
    detector_unnecessary: bool = False


def static_threshold_syn(pfc, mdc, T, model, gains, init, bounds=None,
                         resolution_factor: float = 1e-4, norm: Norm = Norm.INF,
                         timeout: float = 300.0, solver_cmd=None) -> StaticSynthesisResult:
    """Largest safe constant threshold, by bisection.

    Bracket: [0, max residue of the detector-free attack]; a constant-zero
    detector is trivially safe. Resolution is resolution_factor times the
    bracket width. An unknown anywhere flags the result partial.
    """
    calls = 0

    def probe(c):
        nonlocal calls
        calls += 1
        return _synth_call(ThresholdVector.constant(c, T), pfc, mdc, T, model,
                           gains, init, bounds, norm, timeout, solver_cmd)

    out = _synth_call(None, pfc, mdc, T, model, gains, init, bounds, norm,
                      timeout, solver_cmd)
    calls += 1
    if out.kind == NULL:
        return StaticSynthesisResult(math.inf, CONVERGED, calls, detector_unnecessary=True)
    if out.kind == UNKNOWN:
        return StaticSynthesisResult(0.0, TIMEOUT_PARTIAL, calls)

    hi = float(np.max(out.report.residue_profile))
    top = probe(hi)
    if top.kind == NULL:
        return StaticSynthesisResult(hi, CONVERGED, calls)
    if top.kind == UNKNOWN:
        return StaticSynthesisResult(0.0, TIMEOUT_PARTIAL, calls)

    lo = 0.0
    resolution = resolution_factor * hi
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        out = probe(mid)
        if out.kind == NULL:
            lo = mid
        elif out.kind == ATTACK:
            hi = mid
        else:
            return StaticSynthesisResult(lo, TIMEOUT_PARTIAL, calls)
    return StaticSynthesisResult(lo, CONVERGED, calls)
