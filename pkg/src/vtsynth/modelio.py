"""Flat-file formats: model description files, trace/threshold/attack CSVs,
stealth reports, and certificates.

Model files are JSON with every numeric entry stored as a decimal string
(shortest round-trip form), so the values a file declares are exactly the
values the simulator and the exact-rational encoder use. CSV cells use the
same convention, which makes serialize/deserialize loops verdict-preserving.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detectors import (
    ChannelMonitor,
    MonitorSpec,
    Norm,
    RelationMonitor,
    ThresholdVector,
    monitor_report,
    residue_alarm_flags,
)
from .model import (
    ClosedLoopTrace,
    ConfigurationError,
    InitialSet,
    LoopGains,
    PerformanceSpec,
    PlantModel,
)
from .smtlib import AttackBounds


def float_str(x) -> str:
    return repr(float(x))


def _matrix_strs(m) -> list:
    return [[float_str(v) for v in row] for row in np.atleast_2d(np.asarray(m, dtype=float))]


def _vector_strs(v) -> list:
    return [float_str(x) for x in np.asarray(v, dtype=float).reshape(-1)]


def _parse_matrix(rows, field: str) -> np.ndarray:
    try:
        return np.array([[float(v) for v in row] for row in rows], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"field {field!r} is not a numeric matrix") from exc


def _parse_vector(vals, field: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in vals], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"field {field!r} is not a numeric vector") from exc


def bundle_to_dict(bundle) -> dict:
    """JSON-ready dict for a BenchmarkSpec-like bundle."""
    model = bundle.model
    doc = {
        "name": bundle.name,
        "dimensions": {"n": model.n, "m": model.m, "p": model.p},
        "plant": {key: _matrix_strs(getattr(model, key))
                  for key in ("A", "B", "C", "D", "Q", "R")},
        "gains": {"L": _matrix_strs(bundle.gains.L), "K": _matrix_strs(bundle.gains.K)},
        "initial_set": {"lower": _vector_strs(bundle.init.lower),
                        "upper": _vector_strs(bundle.init.upper)},
        "performance": {
            "x_des": _vector_strs(bundle.pfc.x_des),
            "epsilon": _vector_strs(bundle.pfc.epsilon),
            "horizon": bundle.pfc.T,
            "target_dims": list(bundle.pfc.target_dims),
        },
        "monitors": {
            "sampling_period": float_str(bundle.mdc.ts),
            "dead_zone_samples": bundle.mdc.dead_zone_samples,
            "channels": [
                {"channel": c.channel, "name": c.name,
                 "range": [float_str(c.low), float_str(c.high)],
                 "gradient": None if c.gradient is None else float_str(c.gradient)}
                for c in bundle.mdc.channels
            ],
            "relations": [
                {"measured": r.measured, "companion": r.companion, "name": r.name,
                 "scale": float_str(r.scale), "offset": float_str(r.offset),
                 "allowed_diff": float_str(r.allowed_diff)}
                for r in bundle.mdc.relations
            ],
        },
        "attack_bounds": {"per_channel": _vector_strs(bundle.bounds.per_channel)},
        "provenance": dict(bundle.provenance),
    }
    return doc


def bundle_from_dict(doc: dict):
    from .benchmarks import BenchmarkSpec

    for section in ("plant", "gains", "initial_set", "performance", "monitors"):
        if section not in doc:
            raise ConfigurationError(f"model file is missing section {section!r}")
    plant = doc["plant"]
    model = PlantModel(
        A=_parse_matrix(plant["A"], "plant.A"),
        B=_parse_matrix(plant["B"], "plant.B"),
        C=_parse_matrix(plant["C"], "plant.C"),
        D=_parse_matrix(plant["D"], "plant.D"),
        Q=_parse_matrix(plant["Q"], "plant.Q"),
        R=_parse_matrix(plant["R"], "plant.R"),
    )
    gains = LoopGains(
        L=_parse_matrix(doc["gains"]["L"], "gains.L"),
        K=_parse_matrix(doc["gains"]["K"], "gains.K"),
    )
    gains.validate(model)
    init = InitialSet(
        _parse_vector(doc["initial_set"]["lower"], "initial_set.lower"),
        _parse_vector(doc["initial_set"]["upper"], "initial_set.upper"),
    )
    perf = doc["performance"]
    pfc = PerformanceSpec(
        x_des=_parse_vector(perf["x_des"], "performance.x_des"),
        epsilon=_parse_vector(perf["epsilon"], "performance.epsilon"),
        T=int(perf["horizon"]),
        target_dims=tuple(perf.get("target_dims", ())),
    )
    mon = doc["monitors"]
    mdc = MonitorSpec(
        ts=float(mon["sampling_period"]),
        dead_zone_samples=int(mon["dead_zone_samples"]),
        channels=tuple(
            ChannelMonitor(
                channel=int(c["channel"]),
                low=float(c["range"][0]),
                high=float(c["range"][1]),
                gradient=None if c.get("gradient") is None else float(c["gradient"]),
                name=c.get("name", ""),
            )
            for c in mon.get("channels", ())
        ),
        relations=tuple(
            RelationMonitor(
                measured=int(r["measured"]),
                companion=int(r["companion"]),
                scale=float(r["scale"]),
                offset=float(r["offset"]),
                allowed_diff=float(r["allowed_diff"]),
                name=r.get("name", ""),
            )
            for r in mon.get("relations", ())
        ),
    )
    if "attack_bounds" in doc:
        bounds = AttackBounds(tuple(float(b) for b in doc["attack_bounds"]["per_channel"]))
    else:
        bounds = AttackBounds.from_monitor_ranges(mdc, model.m)
    return BenchmarkSpec(
        name=doc.get("name", "unnamed"),
        model=model, gains=gains, init=init, pfc=pfc, mdc=mdc, bounds=bounds,
        provenance=dict(doc.get("provenance", {})),
    )


def save_model_file(path, bundle) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(bundle), indent=2) + "\n")


def load_model_file(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"model file {path} is not valid JSON: {exc}") from exc
    return bundle_from_dict(doc)


# ---------------------------------------------------------------- trace CSV

def trace_to_csv(path, trace: ClosedLoopTrace, th: ThresholdVector | None = None,
                 mdc: MonitorSpec | None = None, norm: Norm = Norm.INF) -> None:
    n = trace.x.shape[1]
    p = trace.u.shape[1]
    m = trace.y.shape[1]
    header = ["k"]
    header += [f"x{i}" for i in range(n)]
    header += [f"xhat{i}" for i in range(n)]
    header += [f"u{j}" for j in range(p)]
    header += [f"y{i}" for i in range(m)]
    header += [f"z{i}" for i in range(m)]
    header += [f"a{i}" for i in range(m)]
    header += [f"w{i}" for i in range(n)]
    header += [f"v{i}" for i in range(m)]
    header += ["residue_alarm", "monitor_flag"]
    res_flags = (residue_alarm_flags(trace.z, th, norm) if th is not None
                 else np.zeros(trace.T, dtype=bool))
    if mdc is not None:
        rep = monitor_report(trace, mdc)
        mon_flags = np.zeros(trace.T, dtype=bool)
        for flags in rep.monitor_flags.values():
            mon_flags |= flags
    else:
        mon_flags = np.zeros(trace.T, dtype=bool)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(trace.T):
            row = [j + 1]
            for block in (trace.x, trace.x_hat, trace.u, trace.y, trace.z,
                          trace.a, trace.w, trace.v):
                row += [float_str(v) for v in block[j]]
            row += [int(res_flags[j]), int(mon_flags[j])]
            writer.writerow(row)


def trace_from_csv(path) -> ClosedLoopTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]

    def block(prefix):
        cols = [i for i, name in enumerate(header)
                if name.startswith(prefix) and name[len(prefix):].isdigit()]
        return np.array([[float(row[i]) for i in cols] for row in data])

    return ClosedLoopTrace(
        x=block("x"), x_hat=block("xhat"), u=block("u"), y=block("y"),
        z=block("z"), a=block("a"), w=block("w"), v=block("v"),
    )


# ----------------------------------------------------------- threshold CSV

def threshold_to_csv(path, th: ThresholdVector) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "threshold"])
        for idx, val in enumerate(th.values):
            writer.writerow([idx + 1, "unset" if math.isnan(val) else float_str(val)])


def threshold_from_csv(path) -> ThresholdVector:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    vals = np.full(len(rows), np.nan)
    for row in rows:
        k = int(row[0])
        if row[1].strip() != "unset":
            vals[k - 1] = float(row[1])
    return ThresholdVector(vals)


# -------------------------------------------------------------- attack CSV

def attack_to_csv(path, attack) -> None:
    """Attack matrix as CSV; the witness x_1 goes into a JSON sidecar."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k"] + [f"a{i}" for i in range(attack.m)])
        for j in range(attack.T):
            writer.writerow([j + 1] + [float_str(v) for v in attack.a[j]])
    meta = {
        "x1": _vector_strs(attack.x1),
        "encoding_sha256": attack.encoding_sha256,
        "solver_wall_time": attack.solver_wall_time,
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def attack_from_csv(path):
    from .attack import AttackVector

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    a = np.array([[float(v) for v in row[1:]] for row in rows])
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        x1 = _parse_vector(meta["x1"], "x1")
        return AttackVector(a=a, x1=x1,
                            encoding_sha256=meta.get("encoding_sha256", ""),
                            solver_wall_time=float(meta.get("solver_wall_time", 0.0)))
    return AttackVector(a=a, x1=np.zeros(0))


# ------------------------------------------------------- reports and certs

def stealth_report_text(report, th: ThresholdVector | None = None) -> str:
    lines = [
        f"stealthy: {report.stealthy}",
        f"mdc_passed: {report.mdc_passed}",
        f"pfc_satisfied: {report.pfc_satisfied}",
        f"stealthy_and_successful: {report.stealthy_and_successful}",
        f"exact_fallback_used: {report.exact_fallback_used}",
        f"norm: {report.norm.value}",
        "k,residue,threshold,margin",
    ]
    for j, r in enumerate(report.residue_profile):
        if th is not None and j < len(th) and th.is_set(j):
            t = th.values[j]
            lines.append(f"{j + 1},{float_str(r)},{float_str(t)},{float_str(t - r)}")
        else:
            lines.append(f"{j + 1},{float_str(r)},unset,")
    return "\n".join(lines) + "\n"


def null_certificate_text(encoding_sha256: str, solver_cmd, wall_time: float,
                          th: ThresholdVector | None) -> str:
    lines = [
        "verdict: NULL",
        "meaning: no stealthy pfc-violating attack exists for this encoding",
        f"encoding_sha256: {encoding_sha256}",
        f"solver: {' '.join(str(c) for c in solver_cmd)}",
        f"wall_time_s: {wall_time:.3f}",
        f"thresholds_set: {0 if th is None else th.num_set()}",
    ]
    return "\n".join(lines) + "\n"
