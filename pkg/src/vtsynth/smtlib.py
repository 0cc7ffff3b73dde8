"""SMT-LIB2 encoding of the unrolled closed loop and the solver subprocess client.

The satisfiability query asserts: loop dynamics over T steps (noise-free),
initial state inside its box, attack inside its bounds, every set threshold
respected strictly (stealth), no monitor dead-zone window fully violated, and
the reach condition violated. A model of this query is a stealthy successful
attack; unsat means no such attack exists at these thresholds.

All numeric constants enter the script as exact rationals derived from their
decimal representation. The solver is any executable that reads an SMT-LIB2
script on stdin and answers check-sat/get-value on stdout (configure via the
VTSYNTH_SOLVER environment variable, e.g. "z3 -in -smt2" or the bundled
Node wrapper in solver/).
"""

from __future__ import annotations

import hashlib
import math
import os
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np

from .detectors import MonitorSpec, Norm, ThresholdVector
from .exact import frac
from .model import ConfigurationError, InitialSet, LoopGains, PerformanceSpec, PlantModel


class SolverError(RuntimeError):
    """Solver process failure or unparseable solver output."""


@dataclass(frozen=True)
class AttackBounds:
    """Optional per-channel magnitude bound |a_k[i]| <= per_channel[i]."""

    per_channel: tuple

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.per_channel)
        if any(b <= 0 for b in bounds):
            raise ConfigurationError("attack bounds must be positive")
        object.__setattr__(self, "per_channel", bounds)

    @classmethod
    def from_monitor_ranges(cls, mdc: MonitorSpec, m: int, factor: float = 10.0) -> "AttackBounds":
        """Default bounds: factor x the monitored range width per channel;
        unmonitored channels inherit the widest monitored width."""
        widths = {}
        for mon in mdc.channels:
            widths[mon.channel] = mon.high - mon.low
        if not widths:
            raise ConfigurationError(
                "cannot derive attack bounds: no channel monitors with ranges"
            )
        fallback = max(widths.values())
        return cls(tuple(factor * widths.get(i, fallback) for i in range(m)))


def smt_rat(q: Fraction) -> str:
    if q < 0:
        return f"(- {smt_rat(-q)})"
    if q.denominator == 1:
        return f"{q.numerator}.0"
    return f"(/ {q.numerator}.0 {q.denominator}.0)"


def _term(coeff: Fraction, var: str) -> str:
    if coeff == 1:
        return var
    if coeff == -1:
        return f"(- {var})"
    return f"(* {smt_rat(coeff)} {var})"


def _linear(terms, const: Fraction = Fraction(0)) -> str:
    """(+ c1*v1 ... const) with zero coefficients dropped."""
    parts = [_term(c, v) for c, v in terms if c != 0]
    if const != 0 or not parts:
        parts.append(smt_rat(const))
    if len(parts) == 1:
        return parts[0]
    return "(+ " + " ".join(parts) + ")"


@dataclass
class SymbolicEncoding:
    """An SMT-LIB2 script plus the bookkeeping needed to read a model back."""

    script: str
    T: int
    n: int
    m: int
    p: int
    norm: Norm
    attack_names: list
    x1_names: list
    z_names: list
    logic: str = "QF_LRA"

    def query_names(self) -> list[str]:
        names = [name for row in self.attack_names for name in row]
        names += list(self.x1_names)
        names += [name for row in self.z_names for name in row]
        return names

    def sha256(self) -> str:
        return hashlib.sha256(self.script.encode()).hexdigest()


def encode(model: PlantModel, gains: LoopGains, init: InitialSet,
           th: ThresholdVector | None, mdc: MonitorSpec | None,
           pfc: PerformanceSpec, T: int, bounds: AttackBounds | None = None,
           norm: Norm = Norm.INF) -> SymbolicEncoding:
    """Build the bounded-unrolling satisfiability query.

    A model of the returned script is exactly a pair (x_1, a_1..a_T) whose
    noise-free closed-loop run keeps every set threshold strict, passes all
    monitors, and misses the reach condition at step T.
    """
    if T < 1:
        raise ConfigurationError("encoding horizon T must be >= 1")
    if norm is Norm.TWO:
        raise ConfigurationError(
            "2-norm stealth is not linear; use inf- or 1-norm for encoding"
        )
    n, m, p = model.n, model.m, model.p
    gains.validate(model, stabilized=False)

    A = [[frac(v) for v in row] for row in model.A]
    B = [[frac(v) for v in row] for row in model.B]
    C = [[frac(v) for v in row] for row in model.C]
    D = [[frac(v) for v in row] for row in model.D]
    L = [[frac(v) for v in row] for row in gains.L]
    K = [[frac(v) for v in row] for row in gains.K]

    def a(k, i):
        return f"a_{k}_{i}"

    def xv(k, i):
        return f"x_{k}_{i}"

    def xh(k, i):
        return f"xh_{k}_{i}"

    def uv(k, j):
        return f"u_{k}_{j}"

    def yv(k, i):
        return f"y_{k}_{i}"

    def zv(k, i):
        return f"z_{k}_{i}"

    decls = []
    asserts = []
    for k in range(1, T + 1):
        for i in range(m):
            decls.append(a(k, i))
        for i in range(n):
            decls.append(xv(k, i))
        for i in range(n):
            decls.append(xh(k, i))
        for j in range(p):
            decls.append(uv(k, j))
        for i in range(m):
            decls.append(yv(k, i))
        for i in range(m):
            decls.append(zv(k, i))

    # initial condition: x_1 in the box, xh_1 = 0, u_1 = 0
    for i in range(n):
        lo, hi = frac(init.lower[i]), frac(init.upper[i])
        if lo == hi:
            asserts.append(f"(= {xv(1, i)} {smt_rat(lo)})")
        else:
            asserts.append(f"(>= {xv(1, i)} {smt_rat(lo)})")
            asserts.append(f"(<= {xv(1, i)} {smt_rat(hi)})")
    for i in range(n):
        asserts.append(f"(= {xh(1, i)} 0.0)")
    for j in range(p):
        asserts.append(f"(= {uv(1, j)} 0.0)")

    # unrolled dynamics
    for k in range(1, T + 1):
        for i in range(m):
            terms = [(C[i][j], xv(k, j)) for j in range(n)]
            terms += [(D[i][j], uv(k, j)) for j in range(p)]
            terms += [(Fraction(1), a(k, i))]
            asserts.append(f"(= {yv(k, i)} {_linear(terms)})")
        for i in range(m):
            terms = [(Fraction(1), yv(k, i))]
            terms += [(-C[i][j], xh(k, j)) for j in range(n)]
            terms += [(-D[i][j], uv(k, j)) for j in range(p)]
            asserts.append(f"(= {zv(k, i)} {_linear(terms)})")
        if k < T:
            for i in range(n):
                terms = [(A[i][j], xv(k, j)) for j in range(n)]
                terms += [(B[i][j], uv(k, j)) for j in range(p)]
                asserts.append(f"(= {xv(k + 1, i)} {_linear(terms)})")
            for i in range(n):
                terms = [(A[i][j], xh(k, j)) for j in range(n)]
                terms += [(B[i][j], uv(k, j)) for j in range(p)]
                terms += [(L[i][j], zv(k, j)) for j in range(m)]
                asserts.append(f"(= {xh(k + 1, i)} {_linear(terms)})")
            for j in range(p):
                terms = [(-K[j][i], xh(k + 1, i)) for i in range(n)]
                asserts.append(f"(= {uv(k + 1, j)} {_linear(terms)})")

    # attack magnitude bounds
    if bounds is not None:
        if len(bounds.per_channel) != m:
            raise ConfigurationError("attack bounds must have one entry per channel")
        for k in range(1, T + 1):
            for i in range(m):
                b = frac(bounds.per_channel[i])
                asserts.append(f"(<= {a(k, i)} {smt_rat(b)})")
                asserts.append(f"(>= {a(k, i)} {smt_rat(-b)})")

    # stealth: every set threshold strictly respected
    abs_decls = []
    if th is not None:
        for idx in th.set_indices():
            if idx >= T:
                continue
            k = idx + 1
            t = frac(th.values[idx])
            if norm is Norm.INF:
                for i in range(m):
                    asserts.append(f"(< {zv(k, i)} {smt_rat(t)})")
                    asserts.append(f"(> {zv(k, i)} {smt_rat(-t)})")
            else:  # 1-norm via exact absolute-value witnesses
                for i in range(m):
                    name = f"zabs_{k}_{i}"
                    abs_decls.append(name)
                    asserts.append(f"(>= {name} {zv(k, i)})")
                    asserts.append(f"(>= {name} (- {zv(k, i)}))")
                total = _linear([(Fraction(1), f"zabs_{k}_{i}") for i in range(m)])
                asserts.append(f"(< {total} {smt_rat(t)})")

    # monitors: no dead-zone window may be fully violated
    if mdc is not None:
        if mdc.max_channel() >= m:
            raise ConfigurationError(
                f"monitor references channel {mdc.max_channel()} but model has {m}"
            )
        dz = mdc.dead_zone_samples
        ts = frac(mdc.ts)

        def channel_ok(mon, k):
            lo, hi = frac(mon.low), frac(mon.high)
            conj = [f"(>= {yv(k, mon.channel)} {smt_rat(lo)})",
                    f"(<= {yv(k, mon.channel)} {smt_rat(hi)})"]
            if mon.gradient is not None and k >= 2:
                gts = frac(mon.gradient) * ts
                diff = f"(- {yv(k, mon.channel)} {yv(k - 1, mon.channel)})"
                conj.append(f"(<= {diff} {smt_rat(gts)})")
                conj.append(f"(>= {diff} {smt_rat(-gts)})")
            return "(and " + " ".join(conj) + ")"

        def relation_ok(rel, k):
            d = frac(rel.allowed_diff)
            est = _linear([(frac(rel.scale), yv(k, rel.companion))], frac(rel.offset))
            diff = f"(- {yv(k, rel.measured)} {est})"
            return f"(and (< {diff} {smt_rat(d)}) (> {diff} {smt_rat(-d)}))"

        for mon in mdc.channels:
            for w in range(1, T - dz + 2):
                oks = [channel_ok(mon, k) for k in range(w, w + dz)]
                asserts.append("(or " + " ".join(oks) + ")")
        for rel in mdc.relations:
            for w in range(1, T - dz + 2):
                oks = [relation_ok(rel, k) for k in range(w, w + dz)]
                asserts.append("(or " + " ".join(oks) + ")")

    # negated reach condition at step T
    disjuncts = []
    for i in pfc.target_dims:
        eps = pfc.epsilon[i]
        if math.isinf(eps):
            continue
        ub = frac(pfc.x_des[i]) + frac(eps)
        lb = frac(pfc.x_des[i]) - frac(eps)
        disjuncts.append(f"(> {xv(pfc.T, i)} {smt_rat(ub)})")
        disjuncts.append(f"(< {xv(pfc.T, i)} {smt_rat(lb)})")
    if pfc.T > T:
        raise ConfigurationError(f"pfc horizon {pfc.T} exceeds encoding horizon {T}")
    if disjuncts:
        asserts.append("(or " + " ".join(disjuncts) + ")" if len(disjuncts) > 1
                       else disjuncts[0])
    else:
        asserts.append("false")

    attack_names = [[a(k, i) for i in range(m)] for k in range(1, T + 1)]
    x1_names = [xv(1, i) for i in range(n)]
    z_names = [[zv(k, i) for i in range(m)] for k in range(1, T + 1)]
    query = [name for row in attack_names for name in row]
    query += x1_names
    query += [name for row in z_names for name in row]

    lines = ["(set-logic QF_LRA)"]
    lines += [f"(declare-fun {name} () Real)" for name in decls + abs_decls]
    lines += [f"(assert {body})" for body in asserts]
    lines.append("(check-sat)")
    lines.append("(get-value (" + " ".join(query) + "))")
    return SymbolicEncoding(
        script="\n".join(lines) + "\n",
        T=T, n=n, m=m, p=p, norm=norm,
        attack_names=attack_names, x1_names=x1_names, z_names=z_names,
    )


@dataclass
class SolverVerdict:
    """Outcome of one solver run: sat (with assignment), unsat, timeout, or error."""

    kind: str
    assignment: dict | None = None
    wall_time: float = 0.0
    transcript: str = ""
    message: str = ""

    @property
    def is_sat(self) -> bool:
        return self.kind == "sat"

    @property
    def is_unsat(self) -> bool:
        return self.kind == "unsat"

    @property
    def is_timeout(self) -> bool:
        return self.kind == "timeout"


def _tokenize(text: str):
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse_sexprs(tokens):
    stack = [[]]
    for tok in tokens:
        if tok == "(":
            stack.append([])
        elif tok == ")":
            done = stack.pop()
            if not stack:
                raise SolverError("unbalanced parentheses in solver output")
            stack[-1].append(done)
        else:
            stack[-1].append(tok)
    if len(stack) != 1:
        raise SolverError("unbalanced parentheses in solver output")
    return stack[0]


def parse_smt_value(node) -> Fraction:
    """Numeric value from a get-value s-expression node."""
    if isinstance(node, str):
        try:
            return Fraction(Decimal(node))
        except Exception as exc:
            raise SolverError(f"cannot parse solver value {node!r}") from exc
    if not node:
        raise SolverError("empty solver value expression")
    head = node[0]
    if head == "-" and len(node) == 2:
        return -parse_smt_value(node[1])
    if head == "/" and len(node) == 3:
        return parse_smt_value(node[1]) / parse_smt_value(node[2])
    if head in ("to_real", "to_int") and len(node) == 2:
        return parse_smt_value(node[1])
    raise SolverError(f"cannot parse solver value expression {node!r}")


def _bundled_shim() -> list[str] | None:
    node = shutil.which("node")
    if node is None:
        return None
    candidates = [
        Path(__file__).resolve().parents[2] / "solver" / "z3smt2.mjs",
        Path.cwd() / "solver" / "z3smt2.mjs",
    ]
    for shim in candidates:
        if shim.is_file() and (shim.parent / "node_modules" / "z3-solver").is_dir():
            return [node, str(shim)]
    return None


def default_solver_command() -> list[str]:
    """Solver resolution order: VTSYNTH_SOLVER env, a z3 binary, the bundled shim."""
    env = os.environ.get("VTSYNTH_SOLVER")
    if env:
        return shlex.split(env)
    z3 = shutil.which("z3")
    if z3 is not None:
        return [z3, "-in", "-smt2"]
    shim = _bundled_shim()
    if shim is not None:
        return shim
    raise SolverError(
        "no SMT solver found: set VTSYNTH_SOLVER, put z3 on PATH, or run "
        "`npm install` inside the repository's solver/ directory"
    )


def run_solver(encoding: SymbolicEncoding, timeout: float = 300.0,
               solver_cmd=None, dump_path=None) -> SolverVerdict:
    """Feed the script to the solver process and parse its verdict.

    The timeout is enforced by killing the process; a killed run reports the
    `timeout` kind, never unsat. A solver-reported `unknown` is treated the
    same way since neither is a proof.
    """
    cmd = list(solver_cmd) if solver_cmd else default_solver_command()
    if dump_path is not None:
        Path(dump_path).write_text(encoding.script)
    start = time.monotonic()
    try:
        proc = subprocess.run(
            cmd, input=encoding.script.encode(), capture_output=True, timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        return SolverVerdict(kind="timeout", wall_time=time.monotonic() - start,
                             message=f"killed after {timeout}s")
    except OSError as exc:
        raise SolverError(f"failed to launch solver {cmd!r}: {exc}") from exc
    wall = time.monotonic() - start
    out = proc.stdout.decode(errors="replace")
    err = proc.stderr.decode(errors="replace")
    transcript = out + (("\n# stderr\n" + err) if err.strip() else "")
    lines = [ln.strip() for ln in out.splitlines() if ln.strip()]
    if not lines:
        return SolverVerdict(kind="error", wall_time=wall, transcript=transcript,
                             message="solver produced no output")
    head = lines[0]
    if head == "unsat":
        return SolverVerdict(kind="unsat", wall_time=wall, transcript=transcript)
    if head == "unknown":
        return SolverVerdict(kind="timeout", wall_time=wall, transcript=transcript,
                             message="solver answered unknown")
    if head != "sat":
        return SolverVerdict(kind="error", wall_time=wall, transcript=transcript,
                             message=f"unrecognized solver answer {head!r}")

    value_text = out.split("\n", 1)[1] if "\n" in out else ""
    try:
        forms = _parse_sexprs(_tokenize(value_text))
        assignment = {}
        for form in forms:
            if not isinstance(form, list):
                continue
            for pair in form:
                if isinstance(pair, list) and len(pair) == 2 and isinstance(pair[0], str):
                    assignment[pair[0]] = parse_smt_value(pair[1])
    except SolverError as exc:
        return SolverVerdict(kind="error", wall_time=wall, transcript=transcript,
                             message=str(exc))
    missing = [nm for nm in encoding.query_names() if nm not in assignment]
    if missing:
        return SolverVerdict(kind="error", wall_time=wall, transcript=transcript,
                             message=f"assignment missing {missing[:5]} (+{len(missing)-5 if len(missing)>5 else 0} more)")
    return SolverVerdict(kind="sat", assignment=assignment, wall_time=wall,
                         transcript=transcript)


def extract_attack(verdict: SolverVerdict, T: int, m: int, n: int | None = None):
    """Dense (T, m) attack matrix and witness x_1 from a sat assignment.

    Returns (attack, x1, exact) where exact maps names to Fractions for
    boundary re-verification.
    """
    if not verdict.is_sat or verdict.assignment is None:
        raise SolverError("extract_attack requires a sat verdict with an assignment")
    asn = verdict.assignment
    if n is None:
        n = len([k for k in asn if k.startswith("x_1_")])
    attack = np.empty((T, m))
    for k in range(1, T + 1):
        for i in range(m):
            name = f"a_{k}_{i}"
            if name not in asn:
                raise SolverError(f"assignment missing attack unknown {name}")
            attack[k - 1, i] = float(asn[name])
    x1 = np.empty(n)
    for i in range(n):
        name = f"x_1_{i}"
        if name not in asn:
            raise SolverError(f"assignment missing initial-state unknown {name}")
        x1[i] = float(asn[name])
    return attack, x1, dict(asn)
