"""Emergency-response relays, effective load factor and N-1 calibration."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _kernel

log = logging.getLogger(__name__)

UFLS_FRACTION = 0.10
UVLS_FRACTION = 0.05
UVLS_VOLTAGE = 0.9
UVLS_HOLD = 5.0
UFLS_MAX_STAGES = 4


class EventKind(enum.IntEnum):
    """Relay kinds; the integer order is the tie-break order for equal times."""
    RIGS = _kernel.RIGS
    OFGS = _kernel.OFGS
    UFLS = _kernel.UFLS
    UVLS = _kernel.UVLS
    LINE = _kernel.LINE


class ERConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    """N-1 calibration could not produce a secure configuration."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


def default_ufls_stages(f_nominal: float = 60.0) -> np.ndarray:
    """59.5 / 59.0 / 58.5 / 58.0 Hz expressed as rad/s deviations from nominal."""
    hz = np.array([59.5, 59.0, 58.5, 58.0]) - f_nominal
    return 2.0 * math.pi * hz


@dataclass
class ERConfig:
    rocof_threshold: float              # rad/s^2
    overfreq_threshold: float           # rad/s
    ufls_thresholds_FU: np.ndarray      # rad/s, strictly decreasing
    line_threshold_Pphi: float          # p.u.
    ufls_fraction: float = UFLS_FRACTION
    uvls_voltage: float = UVLS_VOLTAGE
    uvls_hold: float = UVLS_HOLD
    uvls_fraction: float = UVLS_FRACTION
    calibrated: bool = False

    def __post_init__(self):
        self.ufls_thresholds_FU = np.asarray(self.ufls_thresholds_FU, dtype=float)
        self.validate()

    def validate(self):
        fu = self.ufls_thresholds_FU
        if fu.shape != (UFLS_MAX_STAGES,):
            raise ERConfigError(f"need {UFLS_MAX_STAGES} UFLS thresholds, got {fu.shape}")
        if not np.all(np.diff(fu) < 0):
            raise ERConfigError(f"UFLS thresholds must be strictly decreasing: {fu.tolist()}")
        for name in ("rocof_threshold", "overfreq_threshold", "line_threshold_Pphi"):
            if not getattr(self, name) >= 0:
                raise ERConfigError(f"{name} must be non-negative")
        if self.uvls_hold <= 0:
            raise ERConfigError("uvls_hold must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ufls_thresholds_FU"] = [float(x) for x in self.ufls_thresholds_FU]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ERConfig":
        required = ("rocof_threshold", "overfreq_threshold", "ufls_thresholds_FU",
                    "line_threshold_Pphi")
        missing = [k for k in required if k not in d]
        if missing:
            raise ERConfigError(f"ER config missing fields: {missing}")
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def for_network(cls, network) -> "ERConfig":
        """The calibrated config shipped with ``network``, else loose defaults."""
        if network.er_config:
            return cls.from_dict(network.er_config)
        return cls(rocof_threshold=2.0, overfreq_threshold=2 * math.pi * 1.0,
                   ufls_thresholds_FU=default_ufls_stages(network.f_nominal),
                   line_threshold_Pphi=network.line_threshold_Pphi)


@dataclass(frozen=True)
class EREvent:
    time: float
    kind: EventKind
    target: int          # node index, or interconnector index for LINE
    magnitude: float     # p.u. disconnected (|flow| before trip for LINE)
    value: float = 0.0   # measured quantity that crossed the threshold
    pre: float = 0.0
    post: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("event magnitude must be non-negative")

    def sort_key(self):
        return (self.time, int(self.kind), self.target)

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind.name, "target": self.target,
                "magnitude": self.magnitude, "value": self.value,
                "pre": self.pre, "post": self.post}

    @classmethod
    def from_dict(cls, d: dict) -> "EREvent":
        return cls(float(d["time"]), EventKind[d["kind"]], int(d["target"]),
                   float(d["magnitude"]), float(d.get("value", 0.0)),
                   float(d.get("pre", 0.0)), float(d.get("post", 0.0)))


def effective_load_factor(F, V):
    """iota = 1 - 0.1 F - 0.05 V."""
    F = np.asarray(F)
    V = np.asarray(V)
    if np.any((F < 0) | (F > UFLS_MAX_STAGES)):
        raise ValueError("UFLS count must lie in 0..4")
    if np.any((V != 0) & (V != 1)):
        raise ValueError("UVLS flag must be 0 or 1")
    iota = 1.0 - UFLS_FRACTION * F - UVLS_FRACTION * V
    return float(iota) if iota.ndim == 0 else iota


def inspect(state, rocof, cfg: ERConfig, network, dt: float = 0.0, p_hat=None):
    """One relay inspection at ``state.time``.

    ``rocof`` is the analytic frequency derivative per node.  Line flows are
    recomputed from the state.  ``dt`` is the time since the previous
    inspection and advances the under-voltage timers; a node whose voltage
    has been below the UVLS level for ``uvls_hold`` seconds sheds once.
    ``p_hat`` (per load entry) only sizes the shed magnitudes.

    Returns ``(events, new_state)``; ``state`` itself is not modified.
    """
    st = state.copy()
    n, N = network.n_nodes, network.n_gen
    load_nodes = np.asarray(network.load_nodes, dtype=np.int64)
    ic_i, ic_j = _ic_arrays(network)
    if p_hat is None:
        p_hat = np.zeros(len(load_nodes))
    y = st.vector()
    f = np.zeros_like(y)
    f[n:2 * n] = rocof
    t = st.time

    # per-load-entry relay counters live on their nodes in the state
    F = st.ufls_count_F[load_nodes].astype(np.int64)
    V = st.uvls_flag_V[load_nodes].astype(float)
    ev = _EventBuffer(4 * (N + len(load_nodes) + len(ic_i)) + 4)

    for l, node in enumerate(load_nodes):
        if V[l] > 0.5:
            continue
        if st.voltage_E[node] < cfg.uvls_voltage:
            st.uvls_timer[node] += dt
            if st.uvls_timer[node] >= cfg.uvls_hold - 1e-9:
                ev.add(t, _kernel.UVLS, node, cfg.uvls_fraction * p_hat[l],
                       st.voltage_E[node], 0.0, 1.0)
                V[l] = 1.0
        else:
            st.uvls_timer[node] = 0.0

    psi = st.psi.astype(float)
    om = st.omega_line.astype(float)
    B0 = network.susceptance_B
    Beff = B0.copy()
    if _kernel.pending(y, f, n, N, psi, F, V, om, load_nodes, ic_i, ic_j, B0,
                       cfg.rocof_threshold, cfg.overfreq_threshold,
                       cfg.ufls_thresholds_FU, cfg.line_threshold_Pphi):
        Pe = (np.asarray(st.p_dispatch, dtype=float) if st.p_dispatch is not None
              else np.array([g.p_equilibrium for g in network.generators]))
        Pmax = np.array([g.p_max for g in network.generators])
        ev.n = _kernel.fire(t, y, f, n, N, psi, F, V, om, load_nodes, ic_i, ic_j, B0, Beff,
                            Pe, Pmax, np.asarray(p_hat, dtype=float),
                            cfg.rocof_threshold, cfg.overfreq_threshold,
                            cfg.ufls_thresholds_FU, cfg.ufls_fraction, cfg.line_threshold_Pphi,
                            *ev.arrays(), ev.n, ev.cap)
    st.psi = psi.astype(np.int64)
    st.omega_line = om.astype(np.int64)
    st.ufls_count_F[load_nodes] = F
    st.uvls_flag_V[load_nodes] = V.astype(np.int64)
    return sorted(ev.events(), key=EREvent.sort_key), st


class _EventBuffer:
    def __init__(self, cap):
        self.cap = cap
        self.n = 0
        self.t = np.zeros(cap)
        self.kind = np.zeros(cap, dtype=np.int64)
        self.target = np.zeros(cap, dtype=np.int64)
        self.mag = np.zeros(cap)
        self.val = np.zeros(cap)
        self.pre = np.zeros(cap)
        self.post = np.zeros(cap)

    def arrays(self):
        return self.t, self.kind, self.target, self.mag, self.val, self.pre, self.post

    def add(self, t, kind, target, mag, val, pre, post):
        i = self.n
        self.t[i], self.kind[i], self.target[i] = t, kind, target
        self.mag[i], self.val[i], self.pre[i], self.post[i] = mag, val, pre, post
        self.n += 1

    def events(self):
        return events_from_arrays(*(a[:self.n] for a in self.arrays()))


def events_from_arrays(t, kind, target, mag, val, pre, post) -> list[EREvent]:
    return [EREvent(float(t[i]), EventKind(int(kind[i])), int(target[i]), float(mag[i]),
                    float(val[i]), float(pre[i]), float(post[i])) for i in range(len(t))]


def _ic_arrays(network):
    pairs = np.asarray(network.interconnectors, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0].copy(), pairs[:, 1].copy()


# --------------------------------------------------------------------------
# N-1 calibration

@dataclass
class Contingency:
    kind: str      # "generator" or "interconnector"
    index: int

    @property
    def label(self):
        return f"{self.kind}:{self.index}"


def contingencies(network) -> list[Contingency]:
    """Deterministic order: generators by index, then interconnectors."""
    out = [Contingency("generator", g) for g in range(network.n_gen)]
    out += [Contingency("interconnector", k) for k in range(len(network.interconnectors))]
    return out


def _n1_capacity_check(network):
    from .grid import Scenario, apply_scenario
    pmax = np.array([g.p_max for g in network.generators])
    margin = pmax.sum() - pmax.max()
    bad = []
    for tau in Scenario:
        load = float(np.sum(apply_scenario(network, tau)))
        if load > margin + 1e-12:
            bad.append({"tau": tau.name.lower(), "load": load, "capacity_minus_largest": margin})
    return bad


def run_contingency(network, cfg: ERConfig, tau, cont: Contingency, integ=None,
                    relays=True, equilibria=None):
    """Zero-attack 60 s run from the ``tau`` equilibrium with one component out."""
    from . import dynamics
    from .attack import AttackSpec
    from .grid import find_equilibrium
    eq = equilibria[tau] if equilibria is not None else find_equilibrium(network, tau)
    state = dynamics.SystemState.from_equilibrium(network, eq)
    if cont.kind == "generator":
        state.psi[cont.index] = 0
    else:
        state.omega_line[cont.index] = 0
    run_cfg = cfg if relays else disabled_config(cfg)
    attack = AttackSpec.zero(network.n_attack, tau)
    return dynamics.integrate_with_events(state, attack, run_cfg, network, integ,
                                          equilibrium=eq)


def disabled_config(cfg: ERConfig) -> ERConfig:
    return replace(cfg, rocof_threshold=1e30, overfreq_threshold=1e30,
                   ufls_thresholds_FU=np.array([-1e30, -2e30, -3e30, -4e30]),
                   line_threshold_Pphi=1e30, uvls_hold=1e30)


def verify_n1(network, cfg: ERConfig, integ=None, equilibria=None) -> dict:
    """Run every contingency in every scenario; report pass/fail per case."""
    from .grid import Scenario, find_equilibrium
    if equilibria is None:
        equilibria = {tau: find_equilibrium(network, tau) for tau in Scenario}
    cases = []
    for cont in contingencies(network):
        for tau in Scenario:
            out = run_contingency(network, cfg, tau, cont, integ, equilibria=equilibria)
            first = out.events[0] if out.events else None
            cases.append({
                "contingency": cont.label, "tau": tau.name.lower(),
                "pass": not out.events and out.status == "ok",
                "status": out.status,
                "first_event": first.to_dict() if first else None,
            })
    return {"all_pass": all(c["pass"] for c in cases), "cases": cases}


def calibrate_n1(network, base_cfg: ERConfig, integ=None, margin: float = 0.1,
                 max_rounds: int = 4) -> tuple[ERConfig, dict]:
    """Raise thresholds just enough that every N-1 contingency is event-free.

    A secure ``base_cfg`` comes back unchanged.  Otherwise every contingency
    is rerun with relays disabled, the worst excursion of each monitored
    quantity is recorded, and each violated threshold is placed ``margin``
    beyond it (the UFLS ladder is shifted down as a block, keeping its
    spacing).  The result is verified with relays enabled; rounds repeat
    in case a move exposes another violation.  UVLS constants are fixed, so
    a sustained under-voltage under a contingency is a calibration failure.
    """
    from .grid import Scenario, find_equilibrium
    infeasible = _n1_capacity_check(network)
    if infeasible:
        report = {"all_pass": False, "reason": "insufficient generation margin",
                  "violations": infeasible}
        raise CalibrationError("generation margin below largest unit", report)

    equilibria = {tau: find_equilibrium(network, tau) for tau in Scenario}
    report = verify_n1(network, base_cfg, integ, equilibria)
    report["rounds"] = []
    if report["all_pass"]:
        report["changed"] = False
        result = replace(base_cfg, calibrated=True)
        report["config"] = result.to_dict()
        return result, report

    extremes = _sweep_extremes(network, integ, equilibria)
    cfg = copy.deepcopy(base_cfg)
    for rnd in range(max_rounds):
        cfg = _raise_thresholds(cfg, extremes, margin * (rnd + 1))
        if extremes["max_under_voltage_time"] >= cfg.uvls_hold:
            report = {"all_pass": False, "reason": "sustained under-voltage under contingency",
                      "extremes": extremes}
            raise CalibrationError("UVLS fires under an N-1 contingency", report)
        check = verify_n1(network, cfg, integ, equilibria)
        report["rounds"].append({"config": cfg.to_dict(), "all_pass": check["all_pass"]})
        if check["all_pass"]:
            cfg = replace(cfg, calibrated=True)
            check.update(changed=True, extremes=extremes, rounds=report["rounds"],
                         config=cfg.to_dict())
            return cfg, check
        report = {**check, "rounds": report["rounds"]}
    failing = [c for c in report["cases"] if not c["pass"]]
    report["extremes"] = extremes
    raise CalibrationError(f"{len(failing)} contingencies still trigger relays", report)


def _sweep_extremes(network, integ, equilibria) -> dict:
    from .grid import Scenario
    rocof = 0.0
    wmax = 0.0
    wmin = 0.0
    flow = 0.0
    below = 0.0
    per_case = []
    for cont in contingencies(network):
        for tau in Scenario:
            out = run_contingency(network, _PLACEHOLDER, tau, cont, integ, relays=False,
                                  equilibria=equilibria)
            mon = out.monitors
            case = {
                "contingency": cont.label, "tau": tau.name.lower(),
                "max_rocof": float(np.max(mon["max_rocof"], initial=0.0)),
                "max_omega": float(np.max(mon["max_omega_gen"], initial=0.0)),
                "min_omega_load": float(np.min(mon["min_omega_load"], initial=0.0)),
                "max_flow": float(np.max(mon["max_flow"], initial=0.0)),
                "max_under_voltage_time": float(np.max(mon["max_below_time"], initial=0.0)),
            }
            per_case.append(case)
            rocof = max(rocof, case["max_rocof"])
            wmax = max(wmax, case["max_omega"])
            wmin = min(wmin, case["min_omega_load"])
            flow = max(flow, case["max_flow"])
            below = max(below, case["max_under_voltage_time"])
    return {"max_rocof": rocof, "max_omega": wmax, "min_omega_load": wmin,
            "max_flow": flow, "max_under_voltage_time": below, "cases": per_case}


_PLACEHOLDER = ERConfig(1.0, 1.0, default_ufls_stages(), 1.0)


def _raise_thresholds(cfg: ERConfig, ext: dict, margin: float) -> ERConfig:
    rocof = max(cfg.rocof_threshold, ext["max_rocof"] * (1 + margin))
    of = max(cfg.overfreq_threshold, ext["max_omega"] * (1 + margin))
    flow = max(cfg.line_threshold_Pphi, ext["max_flow"] * (1 + margin))
    fu = cfg.ufls_thresholds_FU.copy()
    need = ext["min_omega_load"] * (1 + margin)
    if fu[0] >= need:
        fu = fu - (fu[0] - need)
    return replace(cfg, rocof_threshold=float(rocof), overfreq_threshold=float(of),
                   line_threshold_Pphi=float(flow), ufls_thresholds_FU=fu)


def write_report(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
