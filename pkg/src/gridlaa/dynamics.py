"""Hybrid third-order grid dynamics with relay-driven discontinuities."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .attack import AttackSpec, RealizedAttack, realized_changes
from .grid import Equilibrium, Network, apply_scenario, find_equilibrium
from .protection import ERConfig, EREvent, events_from_arrays, _ic_arrays


class NumericalBlowupError(RuntimeError):
    def __init__(self, time, node, outcome=None):
        super().__init__(f"non-finite state at t={time:.6g} s, node {node}")
        self.time = time
        self.node = node
        self.outcome = outcome


@dataclass
class SystemState:
    delta: np.ndarray
    delta_dot: np.ndarray
    voltage_E: np.ndarray
    governor_rho: np.ndarray
    psi: np.ndarray
    omega_line: np.ndarray
    ufls_count_F: np.ndarray
    uvls_flag_V: np.ndarray
    uvls_timer: np.ndarray
    time: float = 0.0
    p_dispatch: np.ndarray | None = None   # generator set-points P^e
    voltage_E0: np.ndarray | None = None   # AVR reference

    @classmethod
    def from_equilibrium(cls, network: Network, eq: Equilibrium) -> "SystemState":
        n, N = network.n_nodes, network.n_gen
        return cls(
            delta=eq.delta.copy(), delta_dot=np.zeros(n), voltage_E=eq.voltage_E.copy(),
            governor_rho=np.zeros(N), psi=np.ones(N, dtype=np.int64),
            omega_line=np.ones(len(network.interconnectors), dtype=np.int64),
            ufls_count_F=np.zeros(n, dtype=np.int64), uvls_flag_V=np.zeros(n, dtype=np.int64),
            uvls_timer=np.zeros(n), time=0.0,
            p_dispatch=eq.p_dispatch.copy(), voltage_E0=eq.voltage_E.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta, self.delta_dot, self.voltage_E, self.governor_rho])

    def copy(self) -> "SystemState":
        kw = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            kw[name] = v.copy() if isinstance(v, np.ndarray) else v
        return SystemState(**kw)

    def set_vector(self, y, n, N):
        self.delta = y[:n].copy()
        self.delta_dot = y[n:2 * n].copy()
        self.voltage_E = y[2 * n:3 * n].copy()
        self.governor_rho = y[3 * n:3 * n + N].copy()


@dataclass
class IntegratorConfig:
    step_dt: float = 1e-3
    method: str = "rk4"            # "rk4" or "rk45"
    event_tolerance: float = 1e-5
    t_max: float = 60.0
    rtol: float = 1e-7
    atol: float = 1e-9
    max_events: int = 200
    record_every: int = 0          # 0: no trajectory; k: keep every k-th step
    record_cap: int = 200_000
    stop_at_first_event: bool = False

    def __post_init__(self):
        if self.step_dt <= 0:
            raise ValueError("step_dt must be positive")
        if not self.event_tolerance < self.step_dt:
            raise ValueError("event_tolerance must be smaller than step_dt")
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")

    @classmethod
    def for_network(cls, network: Network, **kw) -> "IntegratorConfig":
        kw.setdefault("step_dt", 1e-3 if network.n_nodes <= 10 else 2e-3)
        return cls(**kw)


@dataclass
class SimulationOutcome:
    status: str                    # ok | truncated | collapse
    t_end: float
    events: list[EREvent]
    final_state: SystemState
    realized: RealizedAttack
    attack_times: list[float]
    omega_at_changes: np.ndarray   # (n_changes, n_nodes), NaN for changes not reached
    trajectory_t: np.ndarray
    trajectory_y: np.ndarray
    monitors: dict
    steps: int
    p_hat: np.ndarray = field(repr=False, default=None)

    @property
    def success(self) -> int:
        return int(bool(self.events))

    @property
    def truncated(self) -> bool:
        return self.status == "truncated"

    @property
    def trajectory(self):
        return self.trajectory_t, self.trajectory_y


_STATUS = {_kernel.STATUS_OK: "ok", _kernel.STATUS_TRUNCATED: "truncated",
           _kernel.STATUS_COLLAPSE: "collapse", _kernel.STATUS_BLOWUP: "blowup"}


def derivatives(state: SystemState, net_loads, network: Network) -> np.ndarray:
    """Time derivative of ``[delta, delta_dot, E, rho]`` (reference implementation).

    Written independently of the compiled kernel, with explicit pairwise
    sums, so the two can be checked against each other.
    """
    y = state.vector()
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise NumericalBlowupError(state.time, bad % network.n_nodes)
    n, N = network.n_nodes, network.n_gen
    B = _effective_B(network, state.omega_line)
    S, X, Ef = network.node_arrays()
    A, pmax, _ = network.generator_arrays()
    psi = np.asarray(state.psi, dtype=float)
    M = network.system_inertia(psi)
    pe = state.p_dispatch if state.p_dispatch is not None else np.array(
        [g.p_equilibrium for g in network.generators])
    E0 = state.voltage_E0 if state.voltage_E0 is not None else state.voltage_E
    d, w, E, rho = state.delta, state.delta_dot, state.voltage_E, state.governor_rho
    dij = d[:, None] - d[None, :]
    flow = E * np.sum(B * E[None, :] * np.sin(dij), axis=1)
    vsum = np.sum(B * E[None, :] * np.cos(dij), axis=1)
    inj = np.zeros(n)
    field_v = Ef.copy()
    pg = np.minimum(pmax, pe + rho)
    inj[:N] = psi * pg
    field_v[:N] = psi * (Ef[:N] - network.avr_gain_Kv * (E[:N] - E0[:N]))
    w_dot = (inj - np.asarray(net_loads) - flow - network.damping_D * w) / M
    e_dot = (field_v - E + X * vsum) / S
    band = 2 * math.pi * network.governor_deadband_W
    in_band = np.abs(w[:N]) <= band
    rho_dot = np.where(in_band, 0.0, -A * w[:N])
    return np.concatenate([w, w_dot, e_dot, rho_dot])


def line_flows(state: SystemState, network: Network) -> np.ndarray:
    """Flow on every interconnector (zero once tripped)."""
    B = network.susceptance_B
    E, d = state.voltage_E, state.delta
    out = np.array([B[i, j] * E[i] * E[j] * math.sin(d[i] - d[j])
                    for i, j in network.interconnectors])
    return out * np.asarray(state.omega_line, dtype=float)


def _effective_B(network: Network, omega_line) -> np.ndarray:
    """Susceptance with tripped interconnectors removed, diagonal kept consistent."""
    B = network.susceptance_B.copy()
    for (i, j), on in zip(network.interconnectors, omega_line):
        if not on:
            bij = B[i, j]
            B[i, j] = B[j, i] = 0.0
            B[i, i] += bij
            B[j, j] += bij
    return B


def integrate_with_events(initial: SystemState, attack: AttackSpec, er_config: ERConfig,
                          network: Network, cfg: IntegratorConfig | None = None,
                          equilibrium: Equilibrium | None = None) -> SimulationOutcome:
    """Advance ``initial`` to ``cfg.t_max`` under ``attack`` with relays active.

    Raises ``NumericalBlowupError`` (carrying the partial outcome) if the
    state stops being finite.
    """
    if cfg is None:
        cfg = IntegratorConfig.for_network(network, t_max=attack.t_max)
    n, N = network.n_nodes, network.n_gen
    if equilibrium is not None:
        p_eq = equilibrium.p_load
    else:
        p_eq = apply_scenario(network, attack.tau)
    _, p_tl = network.load_arrays()
    if attack.eta.shape[0] != network.n_attack:
        raise ValueError(f"attack has {attack.eta.shape[0]} rows, network has "
                         f"{network.n_attack} load entries")
    realized = realized_changes(attack, p_eq, p_tl)
    seg_times = np.asarray(attack.attack_times, dtype=float)
    if initial.p_dispatch is None:
        eq = equilibrium or find_equilibrium(network, attack.tau)
        initial = initial.copy()
        initial.p_dispatch = eq.p_dispatch.copy()
    pe = np.asarray(initial.p_dispatch, dtype=float)
    E0 = initial.voltage_E0 if initial.voltage_E0 is not None else initial.voltage_E
    S, X, Ef = network.node_arrays()
    A, pmax, Mgen = network.generator_arrays()
    load_nodes = network.load_nodes
    ic_i, ic_j = _ic_arrays(network)
    F0 = initial.ufls_count_F[load_nodes].astype(np.int64)
    V0 = initial.uvls_flag_V[load_nodes].astype(float)
    band = 2 * math.pi * network.governor_deadband_W
    method = _kernel.RK4 if cfg.method == "rk4" else _kernel.RK45
    res = _kernel.simulate(
        initial.vector(), float(initial.time), float(cfg.t_max), float(cfg.step_dt), method,
        float(cfg.rtol), float(cfg.atol), float(cfg.event_tolerance),
        network.susceptance_B, float(network.damping_D), Mgen, A, pmax, pe, S, X, Ef,
        float(network.avr_gain_Kv), np.asarray(E0, dtype=float), band,
        load_nodes, np.ascontiguousarray(realized.p_hat), seg_times, ic_i, ic_j,
        initial.psi.astype(float), initial.omega_line.astype(float), F0, V0,
        float(er_config.rocof_threshold), float(er_config.overfreq_threshold),
        np.asarray(er_config.ufls_thresholds_FU, dtype=float), float(er_config.ufls_fraction),
        float(er_config.uvls_voltage), float(er_config.uvls_hold),
        float(er_config.uvls_fraction), float(er_config.line_threshold_Pphi),
        int(cfg.max_events), bool(cfg.stop_at_first_event), int(cfg.record_every),
        int(cfg.record_cap if cfg.record_every else 0))
    (status, t_end, y, ev, ind, om_changes, rec_t, rec_y, mon, blow_t, blow_node,
     steps) = res
    psi, om, F, V, below_since = ind
    final = initial.copy()
    final.set_vector(y, n, N)
    final.time = float(t_end)
    final.psi = psi.astype(np.int64)
    final.omega_line = om.astype(np.int64)
    final.ufls_count_F[load_nodes] = F
    final.uvls_flag_V[load_nodes] = V.astype(np.int64)
    final.uvls_timer[:] = 0.0
    for l, node in enumerate(load_nodes):
        if below_since[l] >= 0:
            final.uvls_timer[node] = t_end - below_since[l]
    events = sorted(events_from_arrays(*ev), key=EREvent.sort_key)
    monitors = {
        "max_rocof": mon[0], "max_omega_gen": mon[1], "min_omega_load": mon[2],
        "max_flow": mon[3], "max_below_time": mon[4], "min_voltage_load": mon[5],
        "max_abs_omega": float(mon[6]),
    }
    outcome = SimulationOutcome(
        status=_STATUS[int(status)], t_end=float(t_end), events=events, final_state=final,
        realized=realized, attack_times=list(seg_times), omega_at_changes=om_changes,
        trajectory_t=rec_t, trajectory_y=rec_y, monitors=monitors, steps=int(steps),
        p_hat=realized.p_hat)
    if status == _kernel.STATUS_BLOWUP:
        raise NumericalBlowupError(float(blow_t), int(blow_node), outcome)
    return outcome


def simulate(network: Network, attack: AttackSpec, er_config: ERConfig | None = None,
             cfg: IntegratorConfig | None = None, equilibrium: Equilibrium | None = None):
    """Convenience wrapper: solve the scenario equilibrium and integrate."""
    eq = equilibrium or find_equilibrium(network, attack.tau)
    er = er_config or ERConfig.for_network(network)
    return integrate_with_events(SystemState.from_equilibrium(network, eq), attack, er,
                                 network, cfg, equilibrium=eq)


def system_frequency(omega, network: Network, psi=None, weighting: str = "inertia"):
    """Aggregate nodal frequency deviations into one system value.

    ``inertia`` weights generator nodes by their machine inertia (the
    centre-of-inertia frequency); ``mean`` is the plain nodal average.
    """
    omega = np.asarray(omega, dtype=float)
    if weighting == "mean":
        return omega.mean(axis=-1)
    if weighting != "inertia":
        raise ValueError(f"unknown weighting {weighting!r}")
    N = network.n_gen
    M = np.array([g.inertia_M for g in network.generators])
    if psi is not None:
        M = M * np.asarray(psi, dtype=float)
    return omega[..., :N] @ M / M.sum()


def write_trajectory_csv(outcome: SimulationOutcome, network: Network, path,
                         decimate: int = 1) -> None:
    n, N = network.n_nodes, network.n_gen
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "delta", "delta_dot", "E", "rho"])
        for k in range(0, len(outcome.trajectory_t), decimate):
            t = outcome.trajectory_t[k]
            y = outcome.trajectory_y[k]
            for i in range(n):
                rho = y[3 * n + i] if i < N else 0.0
                w.writerow([repr(float(t)), i, repr(float(y[i])), repr(float(y[n + i])),
                            repr(float(y[2 * n + i])), repr(float(rho))])


def write_events_jsonl(events, path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_events_jsonl(path) -> list[EREvent]:
    with open(path) as fh:
        return [EREvent.from_dict(json.loads(line)) for line in fh if line.strip()]
