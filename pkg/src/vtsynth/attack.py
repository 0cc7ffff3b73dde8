"""End-to-end stealthy attack synthesis: encode, solve, extract, replay-verify.

Every sat result is replayed concretely through the simulator before it is
returned; a solver-produced attack that fails replay is an encoding bug and
raises. Unsat is surfaced as Null (a guarantee that no stealthy successful
attack exists at these thresholds); timeout is surfaced as Unknown and never
treated as a guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import smtlib
from .detectors import (
    MonitorSpec,
    Norm,
    ThresholdVector,
    evaluate_mdc,
    monitor_report,
    residue_norms,
)
from .exact import exact_loop_trace, exact_norm, frac
from .model import (
    ClosedLoopTrace,
    InitialSet,
    LoopGains,
    PerformanceSpec,
    PlantModel,
    check_pfc,
    simulate,
)
from .smtlib import AttackBounds, SolverError, SolverVerdict

BOUNDARY_MARGIN = 1e-6

NULL = "null"
ATTACK = "attack"
UNKNOWN = "unknown"


@dataclass
class AttackVector:
    """A solver-produced (T, m) sensor falsification with its witness x_1."""

    a: np.ndarray
    x1: np.ndarray
    encoding_sha256: str = ""
    solver_wall_time: float = 0.0

    @property
    def T(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.a.shape[1]


@dataclass
class StealthReport:
    """Concrete verdict of one attack replay against detector + monitors + pfc."""

    residue_profile: np.ndarray
    stealth_margins: dict
    stealthy: bool
    mdc_passed: bool
    pfc_satisfied: bool
    exact_fallback_used: bool = False
    min_boundary_margin: float = math.inf
    norm: Norm = Norm.INF

    @property
    def successful(self) -> bool:
        return not self.pfc_satisfied

    @property
    def stealthy_and_successful(self) -> bool:
        return self.stealthy and self.mdc_passed and self.successful


@dataclass
class SynthesisOutcome:
    """Result of one AttVecSyn call: attack / null / unknown."""

    kind: str
    attack: AttackVector | None = None
    report: StealthReport | None = None
    trace: ClosedLoopTrace | None = None
    verdict: SolverVerdict | None = None
    encoding_sha256: str = ""

    @property
    def found(self) -> bool:
        return self.kind == ATTACK


def _pfc_margin(trace, pfc: PerformanceSpec) -> float:
    """Smallest |band slack| over target dims at step T; tiny means boundary-close."""
    xT = trace.x[pfc.T - 1]
    slacks = [abs(pfc.epsilon[i] - abs(xT[i] - pfc.x_des[i])) for i in pfc.target_dims
              if not math.isinf(pfc.epsilon[i])]
    return min(slacks) if slacks else math.inf


def _exact_replay_report(attack: AttackVector, th, mdc, pfc, model, gains,
                         norm: Norm) -> tuple[bool, bool, bool]:
    """(stealthy, mdc_passed, pfc_satisfied) evaluated in exact rationals."""
    T = attack.T
    exact = exact_loop_trace(model.A, model.B, model.C, model.D, gains.L, gains.K,
                             attack.x1, attack.a, T)
    kind = "one" if norm is Norm.ONE else "inf"

    stealthy = True
    if th is not None:
        for idx in th.set_indices():
            if idx >= T:
                continue
            if exact_norm(exact["z"][idx], kind) >= frac(th.values[idx]):
                stealthy = False
                break

    mdc_ok = True
    if mdc is not None:
        ts = frac(mdc.ts)
        dz = mdc.dead_zone_samples
        y = exact["y"]

        def violated(flags):
            run = 0
            for fl in flags:
                run = run + 1 if fl else 0
                if run >= dz:
                    return True
            return False

        for mon in mdc.channels:
            lo, hi = frac(mon.low), frac(mon.high)
            flags = []
            for j in range(T):
                val = y[j][mon.channel]
                bad = val < lo or val > hi
                if mon.gradient is not None and j >= 1:
                    gts = frac(mon.gradient) * ts
                    delta = val - y[j - 1][mon.channel]
                    bad = bad or delta > gts or -delta > gts
                flags.append(bad)
            if violated(flags):
                mdc_ok = False
        for rel in mdc.relations:
            s, o, d = frac(rel.scale), frac(rel.offset), frac(rel.allowed_diff)
            flags = []
            for j in range(T):
                diff = y[j][rel.measured] - (s * y[j][rel.companion] + o)
                if diff < 0:
                    diff = -diff
                flags.append(diff >= d)
            if violated(flags):
                mdc_ok = False

    xT = exact["x"][pfc.T - 1]
    pfc_ok = True
    for i in pfc.target_dims:
        if math.isinf(pfc.epsilon[i]):
            continue
        dev = xT[i] - frac(pfc.x_des[i])
        if dev < 0:
            dev = -dev
        if dev > frac(pfc.epsilon[i]):
            pfc_ok = False
            break
    return stealthy, mdc_ok, pfc_ok


def replay_verify(attack: AttackVector, th: ThresholdVector | None,
                  mdc: MonitorSpec | None, pfc: PerformanceSpec,
                  model: PlantModel, gains: LoopGains,
                  norm: Norm = Norm.INF) -> StealthReport:
    """Replay an attack noise-free and judge stealth, monitors, and reach.

    Floating point decides outright when every margin clears 1e-6; otherwise
    the whole verdict is recomputed in exact rational arithmetic.
    """
    trace = simulate(model, gains, attack.x1, attack.T, attack=attack.a)
    profile = residue_norms(trace.z, norm)

    margins = {}
    stealthy = True
    min_margin = math.inf
    if th is not None:
        for idx in th.set_indices():
            if idx >= attack.T:
                continue
            margin = th.values[idx] - profile[idx]
            margins[idx] = margin
            min_margin = min(min_margin, abs(margin))
            if margin <= 0:
                stealthy = False

    mdc_passed = evaluate_mdc(trace, mdc) if mdc is not None else True
    pfc_satisfied = check_pfc(trace, pfc)
    min_margin = min(min_margin, _pfc_margin(trace, pfc))

    exact_used = False
    if min_margin < BOUNDARY_MARGIN:
        exact_used = True
        stealthy, mdc_passed, pfc_satisfied = _exact_replay_report(
            attack, th, mdc, pfc, model, gains, norm
        )
    return StealthReport(
        residue_profile=profile,
        stealth_margins=margins,
        stealthy=stealthy,
        mdc_passed=mdc_passed,
        pfc_satisfied=pfc_satisfied,
        exact_fallback_used=exact_used,
        min_boundary_margin=min_margin,
        norm=norm,
    )


def att_vec_syn(th: ThresholdVector | None, pfc: PerformanceSpec,
                mdc: MonitorSpec | None, T: int, model: PlantModel,
                gains: LoopGains, init: InitialSet,
                bounds: AttackBounds | None = None, norm: Norm = Norm.INF,
                timeout: float = 300.0, solver_cmd=None,
                dump_path=None) -> SynthesisOutcome:
    """One bounded falsification query for the closed loop under thresholds `th`.

    Returns an attack outcome (replay-verified), a null outcome on unsat, or
    an unknown outcome on timeout. A sat model that fails concrete replay is
    an encoding bug and raises SolverError.
    """
    enc = smtlib.encode(model, gains, init, th, mdc, pfc, T, bounds=bounds, norm=norm)
    verdict = smtlib.run_solver(enc, timeout=timeout, solver_cmd=solver_cmd,
                                dump_path=dump_path)
    if verdict.is_unsat:
        return SynthesisOutcome(kind=NULL, verdict=verdict, encoding_sha256=enc.sha256())
    if verdict.is_timeout:
        return SynthesisOutcome(kind=UNKNOWN, verdict=verdict, encoding_sha256=enc.sha256())
    if not verdict.is_sat:
        raise SolverError(
            f"solver failed: {verdict.message}\n--- transcript ---\n{verdict.transcript}"
        )
    a, x1, _ = smtlib.extract_attack(verdict, T, model.m, model.n)
    attack = AttackVector(a=a, x1=x1, encoding_sha256=enc.sha256(),
                          solver_wall_time=verdict.wall_time)
    report = replay_verify(attack, th, mdc, pfc, model, gains, norm=norm)
    if not report.stealthy_and_successful:
        raise SolverError(
            "replay verification rejected a solver attack (encoding bug): "
            f"stealthy={report.stealthy} mdc={report.mdc_passed} "
            f"pfc_satisfied={report.pfc_satisfied}"
        )
    trace = simulate(model, gains, attack.x1, T, attack=attack.a)
    return SynthesisOutcome(kind=ATTACK, attack=attack, report=report, trace=trace,
                            verdict=verdict, encoding_sha256=enc.sha256())


def randomized_attack_search(th: ThresholdVector | None, pfc: PerformanceSpec,
                             mdc: MonitorSpec | None, T: int, model: PlantModel,
                             gains: LoopGains, init: InitialSet,
                             bounds: AttackBounds, trials: int = 10_000,
                             seed: int = 0, norm: Norm = Norm.INF):
    """Random falsification within bounds (plus the zero attack).

    Returns the first stealthy successful attack found, else None. Used to
    corroborate Null certificates; it can refute but never certify.
    """
    rng = np.random.default_rng(seed)
    b = np.asarray(bounds.per_channel, dtype=float)
    for t in range(trials + 1):
        if t == 0:
            a = np.zeros((T, model.m))
            x1 = init.center
        else:
            a = rng.uniform(-b, b, size=(T, model.m))
            x1 = rng.uniform(init.lower, init.upper)
        trace = simulate(model, gains, x1, T, attack=a)
        if th is not None and th.num_set() > 0:
            profile = residue_norms(trace.z, norm)
            vals = th.values[:T]
            mask = ~np.isnan(vals)
            if np.any(profile[:len(vals)][mask] >= vals[mask]):
                continue
        if mdc is not None and not evaluate_mdc(trace, mdc):
            continue
        if check_pfc(trace, pfc):
            continue
        return AttackVector(a=a, x1=np.asarray(x1, dtype=float))
    return None
