"""Discrete LTI closed loops: plant, fixed-gain Kalman observer, state feedback.

The loop simulated here is

    x_{k+1} = A x_k + B u_k + w_k
    y_k     = C x_k + D u_k + v_k + a_k      (a_k: injected sensor falsification)
    z_k     = y_k - (C xh_k + D u_k)         (residue seen by the detector)
    xh_{k+1} = A xh_k + B u_k + L z_k
    u_{k+1} = -K xh_{k+1}

with k starting at 1. The observer consumes the falsified measurement, so an
attack propagates into the estimate and from there into the control input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SYMMETRY_TOL = 1e-9
PSD_EIG_TOL = -1e-9
SPECTRAL_TOL = 1e-6
RICCATI_MAX_ITER = 10_000
RICCATI_TOL = 1e-12


class ConfigurationError(ValueError):
    """Inconsistent dimensions or malformed loop configuration."""


class GainDesignError(RuntimeError):
    """Riccati iteration failed to converge or produced a non-stabilizing gain."""


def _as_matrix(value, rows, cols, name):
    m = np.asarray(value, dtype=float)
    if m.shape != (rows, cols):
        raise ConfigurationError(f"{name} must be {rows}x{cols}, got {m.shape}")
    return m


def _check_covariance(m, name):
    if not np.all(np.abs(m - m.T) <= SYMMETRY_TOL):
        raise ConfigurationError(f"{name} is not symmetric (tol {SYMMETRY_TOL})")
    eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
    if np.any(eigs < PSD_EIG_TOL):
        raise ConfigurationError(f"{name} is not PSD (min eigenvalue {eigs.min():.3e})")


def spectral_radius(m) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(m, dtype=float)))))


@dataclass(frozen=True)
class PlantModel:
    """Discrete LTI plant (A, B, C, D) with noise covariances (Q, R)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigurationError(f"A must be square, got {A.shape}")
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape[0] != n:
            raise ConfigurationError(f"B must have {n} rows, got {B.shape}")
        p = B.shape[1]
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != n:
            raise ConfigurationError(f"C must have {n} columns, got {C.shape}")
        m = C.shape[0]
        D = _as_matrix(self.D, m, p, "D")
        Q = _as_matrix(self.Q, n, n, "Q")
        R = _as_matrix(self.R, m, m, "R")
        _check_covariance(Q, "Q")
        _check_covariance(R, "R")
        for name, mat in (("A", A), ("B", B), ("C", C), ("D", D), ("Q", Q), ("R", R)):
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class LoopGains:
    """Observer gain L (n x m) and controller gain K (p x n)."""

    L: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        L.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "K", K)

    def validate(self, model: PlantModel, stabilized: bool = True) -> None:
        if self.L.shape != (model.n, model.m):
            raise ConfigurationError(
                f"L must be {model.n}x{model.m}, got {self.L.shape}"
            )
        if self.K.shape != (model.p, model.n):
            raise ConfigurationError(
                f"K must be {model.p}x{model.n}, got {self.K.shape}"
            )
        if stabilized:
            rho = spectral_radius(model.A - self.L @ model.C)
            if rho >= 1.0 + SPECTRAL_TOL:
                raise ConfigurationError(
                    f"A - L C is not stable (spectral radius {rho:.6f})"
                )


@dataclass
class LoopState:
    """Loop state at sampling instant k (1-based)."""

    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    k: int = 1

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.x_hat = np.asarray(self.x_hat, dtype=float).reshape(-1)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        if self.k < 1:
            raise ConfigurationError("step index k must be >= 1")


@dataclass(frozen=True)
class InitialSet:
    """Box of admissible initial states, lower <= x_1 <= upper componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigurationError("initial set bounds must have equal length")
        if np.any(lo > hi):
            raise ConfigurationError("initial set requires lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x1) -> "InitialSet":
        x1 = np.asarray(x1, dtype=float).reshape(-1)
        return cls(x1, x1)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        return bool(
            np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol)
        )


@dataclass(frozen=True)
class PerformanceSpec:
    """Reach specification: |x_T[i] - x_des[i]| <= epsilon[i] on target dims at step T."""

    x_des: np.ndarray
    epsilon: np.ndarray
    T: int
    target_dims: tuple = ()

    def __post_init__(self):
        x_des = np.asarray(self.x_des, dtype=float).reshape(-1)
        eps = np.asarray(self.epsilon, dtype=float).reshape(-1)
        if eps.size == 1 and x_des.size > 1:
            eps = np.full(x_des.shape, float(eps[0]))
        if eps.shape != x_des.shape:
            raise ConfigurationError("epsilon must be scalar or match x_des")
        if np.any(eps <= 0):
            raise ConfigurationError("epsilon must be positive componentwise")
        if self.T < 1:
            raise ConfigurationError("horizon T must be >= 1")
        dims = tuple(self.target_dims) if self.target_dims else tuple(range(x_des.size))
        if any(d < 0 or d >= x_des.size for d in dims):
            raise ConfigurationError("target_dims out of range")
        x_des.setflags(write=False)
        eps.setflags(write=False)
        object.__setattr__(self, "x_des", x_des)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "target_dims", dims)


@dataclass
class ClosedLoopTrace:
    """Per-step record of a closed-loop run.

    Row j of each array holds the step k = j + 1 quantities, so ``x[T-1]`` is
    the state the reach check inspects.
    """

    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a: np.ndarray
    w: np.ndarray
    v: np.ndarray

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def __post_init__(self):
        T = self.x.shape[0]
        for name in ("x", "x_hat", "u", "y", "z", "a", "w", "v"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape[0] != T:
                raise ConfigurationError(f"trace field {name} has length {arr.shape[0]} != {T}")
            setattr(self, name, arr)


def step(model: PlantModel, gains: LoopGains, state: LoopState,
         a_k=None, w_k=None, v_k=None):
    """Advance the closed loop one sampling instant.

    Returns (next_state, y_k, z_k) where y_k already contains noise and
    attack, and z_k is the residue the detector sees at step state.k.
    """
    n, m, p = model.n, model.m, model.p
    x = state.x
    xh = state.x_hat
    u = state.u
    if x.shape != (n,) or xh.shape != (n,) or u.shape != (p,):
        raise ConfigurationError("loop state dimensions do not match the model")
    a_k = np.zeros(m) if a_k is None else np.asarray(a_k, dtype=float).reshape(-1)
    w_k = np.zeros(n) if w_k is None else np.asarray(w_k, dtype=float).reshape(-1)
    v_k = np.zeros(m) if v_k is None else np.asarray(v_k, dtype=float).reshape(-1)
    if a_k.shape != (m,) or v_k.shape != (m,) or w_k.shape != (n,):
        raise ConfigurationError("attack/noise dimensions do not match the model")

    y_k = model.C @ x + model.D @ u + v_k + a_k
    z_k = y_k - (model.C @ xh + model.D @ u)
    x_next = model.A @ x + model.B @ u + w_k
    xh_next = model.A @ xh + model.B @ u + gains.L @ z_k
    u_next = -gains.K @ xh_next
    return LoopState(x_next, xh_next, u_next, state.k + 1), y_k, z_k


def simulate(model: PlantModel, gains: LoopGains, init, T: int,
             attack=None, process_noise=None, measurement_noise=None) -> ClosedLoopTrace:
    """Iterate `step` for T instants and record everything.

    `init` is either a LoopState or a bare x_1 vector, in which case the
    observer starts at xh_1 = 0 with u_1 = 0.
    """
    if T < 1:
        raise ConfigurationError("cannot simulate an empty horizon (T >= 1 required)")
    n, m, p = model.n, model.m, model.p
    if isinstance(init, LoopState):
        state = LoopState(init.x.copy(), init.x_hat.copy(), init.u.copy(), init.k)
    else:
        x1 = np.asarray(init, dtype=float).reshape(-1)
        state = LoopState(x1, np.zeros(n), np.zeros(p))

    def _series(arr, cols, name):
        if arr is None:
            return np.zeros((T, cols))
        out = np.atleast_2d(np.asarray(arr, dtype=float))
        if out.shape[0] == 1 and cols == 1 and out.shape[1] >= T:
            out = out.reshape(-1, 1)
        if out.shape[0] < T or out.shape[1] != cols:
            raise ConfigurationError(
                f"{name} must be at least {T}x{cols}, got {out.shape}"
            )
        return out[:T]

    a = _series(attack, m, "attack")
    w = _series(process_noise, n, "process noise")
    v = _series(measurement_noise, m, "measurement noise")

    xs = np.empty((T, n))
    xhs = np.empty((T, n))
    us = np.empty((T, p))
    ys = np.empty((T, m))
    zs = np.empty((T, m))
    for j in range(T):
        xs[j] = state.x
        xhs[j] = state.x_hat
        us[j] = state.u
        state, y_k, z_k = step(model, gains, state, a[j], w[j], v[j])
        ys[j] = y_k
        zs[j] = z_k
    return ClosedLoopTrace(xs, xhs, us, ys, zs, a.copy(), w.copy(), v.copy())


def check_pfc(trace: ClosedLoopTrace, spec: PerformanceSpec,
              hold_from: int | None = None) -> bool:
    """True iff the reach condition holds at step spec.T.

    With `hold_from` set, the band must additionally hold at every step in
    [hold_from, spec.T] (reach-and-hold mode).
    """
    if trace.T < spec.T:
        raise ConfigurationError(f"trace length {trace.T} < pfc horizon {spec.T}")
    steps = [spec.T] if hold_from is None else list(range(hold_from, spec.T + 1))
    for k in steps:
        xk = trace.x[k - 1]
        for i in spec.target_dims:
            if abs(xk[i] - spec.x_des[i]) > spec.epsilon[i]:
                return False
    return True


def _riccati_fixed_point(update, start, what):
    P = start
    for _ in range(RICCATI_MAX_ITER):
        P_next = update(P)
        if not np.all(np.isfinite(P_next)):
            raise GainDesignError(f"{what} Riccati iteration diverged")
        if np.max(np.abs(P_next - P)) <= RICCATI_TOL * max(1.0, np.max(np.abs(P))):
            return P_next
        P = P_next
    raise GainDesignError(
        f"{what} Riccati iteration did not converge in {RICCATI_MAX_ITER} steps"
    )


def kalman_gain(A, C, Q, R) -> np.ndarray:
    """Steady-state predictor gain L = A P C' (C P C' + R)^-1."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))

    def update(P):
        S = C @ P @ C.T + R
        G = np.linalg.solve(S, C @ P @ A.T).T
        return A @ P @ A.T - G @ C @ P @ A.T + Q

    P = _riccati_fixed_point(update, Q.copy(), "observer")
    S = C @ P @ C.T + R
    return np.linalg.solve(S, C @ P @ A.T).T


def lqr_gain(A, B, state_weight, input_weight) -> np.ndarray:
    """Infinite-horizon discrete LQR gain for u = -K x."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    p = B.shape[1]
    Qw = np.eye(n) * float(state_weight) if np.isscalar(state_weight) \
        else np.atleast_2d(np.asarray(state_weight, dtype=float))
    Ru = np.eye(p) * float(input_weight) if np.isscalar(input_weight) \
        else np.atleast_2d(np.asarray(input_weight, dtype=float))

    def update(P):
        BtPA = B.T @ P @ A
        K = np.linalg.solve(B.T @ P @ B + Ru, BtPA)
        return A.T @ P @ A - BtPA.T @ K + Qw

    P = _riccati_fixed_point(update, Qw.copy(), "controller")
    return np.linalg.solve(B.T @ P @ B + Ru, B.T @ P @ A)


def design_gains(model: PlantModel, state_weight=1.0, input_weight=1.0) -> LoopGains:
    """Design (L, K) via the steady-state Riccati recursions and verify both
    closed-loop matrices are Schur stable."""
    L = kalman_gain(model.A, model.C, model.Q, model.R)
    K = lqr_gain(model.A, model.B, state_weight, input_weight)
    rho_obs = spectral_radius(model.A - L @ model.C)
    if rho_obs >= 1.0 + SPECTRAL_TOL:
        raise GainDesignError(f"designed L does not stabilize A - L C (rho={rho_obs:.6f})")
    rho_ctl = spectral_radius(model.A - model.B @ K)
    if rho_ctl >= 1.0 + SPECTRAL_TOL:
        raise GainDesignError(f"designed K does not stabilize A - B K (rho={rho_ctl:.6f})")
    return LoopGains(L, K)
