"""Network data model, Kron reduction, diurnal scenarios and equilibrium solving.

Node ordering convention: generators occupy indices ``0..N-1`` and pure load
buses ``N..N+L-1``.  Loads may also sit on generator buses (co-located), so
``Network.loads`` carries an explicit node index for every entry.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field, asdict
from enum import IntEnum
from pathlib import Path

import numpy as np


class GridError(Exception):
    """Base class for network-level failures."""


class KronReductionError(GridError):
    def __init__(self, buses, message="eliminated block is singular"):
        self.buses = tuple(buses)
        super().__init__(f"{message}: buses {list(self.buses)}")


class CapacityError(GridError):
    pass


class InfeasibleEquilibriumError(GridError):
    pass


class Scenario(IntEnum):
    """Diurnal load-balance state with its equilibrium load factor."""

    NIGHT = 1
    MORNING = 2
    AFTERNOON = 3
    EVENING = 4

    @property
    def factor(self) -> float:
        return SCENARIO_FACTORS[self]

    @classmethod
    def parse(cls, value) -> "Scenario":
        if isinstance(value, Scenario):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                return cls(int(value))
        return cls(int(value))


SCENARIO_FACTORS = {
    Scenario.NIGHT: 0.4,
    Scenario.MORNING: 1.0,
    Scenario.AFTERNOON: 0.85,
    Scenario.EVENING: 1.3,
}


@dataclass(frozen=True)
class GeneratorParams:
    droop_A: float
    transient_time_S: float
    reactance_X: float
    field_voltage_Ef: float
    p_max: float
    inertia_M: float
    p_equilibrium: float = 0.0

    def __post_init__(self):
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        if self.transient_time_S <= 0:
            raise ValueError("transient_time_S must be positive")
        if self.inertia_M <= 0:
            raise ValueError("inertia_M must be positive")
        if not 0.0 <= self.p_equilibrium <= self.p_max:
            raise ValueError("p_equilibrium must lie in [0, p_max]")


@dataclass(frozen=True)
class LoadParams:
    """A load entry attached to ``node``.

    Pure load buses also need voltage-model constants; co-located loads on a
    generator bus leave them as ``None`` and use the machine's constants.
    """

    node: int
    p_total_TL: float
    p_equilibrium_base: float
    transient_time_S: float | None = None
    reactance_X: float | None = None
    field_voltage_Ef: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_equilibrium_base <= self.p_total_TL:
            raise ValueError(
                f"load at node {self.node}: need 0 <= p_equilibrium_base <= p_total_TL")


@dataclass
class Network:
    name: str
    n_gen: int
    n_load: int
    susceptance_B: np.ndarray
    damping_D: float
    generators: list[GeneratorParams]
    loads: list[LoadParams]
    interconnectors: list[tuple[int, int]]
    line_threshold_Pphi: float
    governor_deadband_W: float
    f_nominal: float = 60.0
    base_mva: float = 100.0
    node_names: list[str] = field(default_factory=list)
    areas: list[int] = field(default_factory=list)
    avr_gain_Kv: float = 0.0
    er_config: dict | None = None
    notes: str = ""

    def __post_init__(self):
        B = np.asarray(self.susceptance_B, dtype=float)
        self.susceptance_B = B
        n = self.n_gen + self.n_load
        if B.shape != (n, n):
            raise ValueError(f"susceptance_B must be {n}x{n}, got {B.shape}")
        if not np.allclose(B, B.T, rtol=0, atol=1e-9):
            raise ValueError("susceptance_B must be symmetric")
        if len(self.generators) != self.n_gen:
            raise ValueError("generator count does not match n_gen")
        self.interconnectors = [tuple(sorted((int(i), int(j)))) for i, j in self.interconnectors]
        for i, j in self.interconnectors:
            if i == j or B[i, j] == 0.0:
                raise ValueError(f"interconnector ({i}, {j}) is not an existing line")
        pure = sorted(ld.node for ld in self.loads if ld.node >= self.n_gen)
        if pure != list(range(self.n_gen, n)):
            raise ValueError("every pure load bus needs exactly one load entry")
        for ld in self.loads:
            if ld.node >= self.n_gen and None in (
                    ld.transient_time_S, ld.reactance_X, ld.field_voltage_Ef):
                raise ValueError(f"pure load bus {ld.node} lacks voltage constants")
        if not self.node_names:
            self.node_names = [str(i) for i in range(n)]

    @property
    def n_nodes(self) -> int:
        return self.n_gen + self.n_load

    @property
    def n_attack(self) -> int:
        """Number of attackable load entries (rows of the attack matrix)."""
        return len(self.loads)

    @property
    def load_nodes(self) -> np.ndarray:
        return np.array([ld.node for ld in self.loads], dtype=np.int64)

    def node_arrays(self):
        """Per-node voltage constants ``(S, X, Ef)`` over all nodes."""
        n = self.n_nodes
        S = np.empty(n)
        X = np.empty(n)
        Ef = np.empty(n)
        for i, g in enumerate(self.generators):
            S[i], X[i], Ef[i] = g.transient_time_S, g.reactance_X, g.field_voltage_Ef
        for ld in self.loads:
            if ld.node >= self.n_gen:
                S[ld.node] = ld.transient_time_S
                X[ld.node] = ld.reactance_X
                Ef[ld.node] = ld.field_voltage_Ef
        return S, X, Ef

    def generator_arrays(self):
        gens = self.generators
        return (np.array([g.droop_A for g in gens]),
                np.array([g.p_max for g in gens]),
                np.array([g.inertia_M for g in gens]))

    def load_arrays(self):
        return (np.array([ld.p_equilibrium_base for ld in self.loads]),
                np.array([ld.p_total_TL for ld in self.loads]))

    def system_inertia(self, psi=None) -> float:
        M = np.array([g.inertia_M for g in self.generators])
        if psi is None:
            return float(M.sum())
        return float(np.dot(np.asarray(psi, dtype=float), M))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": "gridlaa.network/1",
            "name": self.name,
            "f_nominal": self.f_nominal,
            "base_mva": self.base_mva,
            "n_gen": self.n_gen,
            "n_load": self.n_load,
            "node_names": list(self.node_names),
            "areas": list(self.areas),
            "damping_D": self.damping_D,
            "governor_deadband_W": self.governor_deadband_W,
            "line_threshold_Pphi": self.line_threshold_Pphi,
            "avr_gain_Kv": self.avr_gain_Kv,
            "susceptance_B": self.susceptance_B.tolist(),
            "generators": [asdict(g) for g in self.generators],
            "loads": [{k: v for k, v in asdict(ld).items() if v is not None} for ld in self.loads],
            "interconnectors": [list(p) for p in self.interconnectors],
            "scenario_factors": {s.name.lower(): s.factor for s in Scenario},
            "er_config": self.er_config,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        required = ["name", "n_gen", "n_load", "susceptance_B", "damping_D", "generators",
                    "loads", "interconnectors", "line_threshold_Pphi", "governor_deadband_W"]
        missing = [k for k in required if k not in d]
        if missing:
            raise ValueError(f"network config missing fields: {missing}")
        return cls(
            name=d["name"],
            n_gen=int(d["n_gen"]),
            n_load=int(d["n_load"]),
            susceptance_B=np.array(d["susceptance_B"], dtype=float),
            damping_D=float(d["damping_D"]),
            generators=[GeneratorParams(**g) for g in d["generators"]],
            loads=[LoadParams(**ld) for ld in d["loads"]],
            interconnectors=[tuple(p) for p in d["interconnectors"]],
            line_threshold_Pphi=float(d["line_threshold_Pphi"]),
            governor_deadband_W=float(d["governor_deadband_W"]),
            f_nominal=float(d.get("f_nominal", 60.0)),
            base_mva=float(d.get("base_mva", 100.0)),
            node_names=list(d.get("node_names", [])),
            areas=list(d.get("areas", [])),
            avr_gain_Kv=float(d.get("avr_gain_Kv", 0.0)),
            er_config=d.get("er_config"),
            notes=d.get("notes", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


DATA_DIR = Path(__file__).parent / "data"


def network_path(name_or_path) -> Path:
    """Resolve a builtin network name (``ktas``, ``ieee39``) or a file path."""
    import os

    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return p
    search = [Path(s) for s in os.environ.get("GRIDLAA_CONFIG_PATH", "").split(os.pathsep) if s]
    for base in search + [DATA_DIR]:
        cand = base / f"{name_or_path}.json"
        if cand.exists():
            return cand
    raise FileNotFoundError(f"network config not found: {name_or_path}")


def load_network(name_or_path) -> Network:
    return Network.from_dict(json.loads(network_path(name_or_path).read_text()))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- operations ------------------------------------------------------------

def kron_reduce(B_full, retained) -> np.ndarray:
    """Schur-complement elimination of every bus not in ``retained``.

    The retained order is preserved in the output.
    """
    B = np.asarray(B_full, dtype=float)
    n = B.shape[0]
    keep = list(retained)
    drop = [i for i in range(n) if i not in set(keep)]
    if not drop:
        return B[np.ix_(keep, keep)].copy()
    Bee = B[np.ix_(drop, drop)]
    if np.linalg.cond(Bee) > 1e12:
        raise KronReductionError(drop)
    Brr = B[np.ix_(keep, keep)]
    Bre = B[np.ix_(keep, drop)]
    red = Brr - Bre @ np.linalg.solve(Bee, Bre.T)
    return 0.5 * (red + red.T)


def apply_scenario(network: Network, tau) -> np.ndarray:
    """Equilibrium load of every load entry under scenario ``tau``."""
    factor = Scenario.parse(tau).factor
    base, total = network.load_arrays()
    return np.minimum(factor * base, total)


def dispatch(network: Network, p_load: np.ndarray) -> np.ndarray:
    """Generator set-points balancing ``p_load`` in proportion to ``p_max``."""
    _, pmax, _ = network.generator_arrays()
    demand = float(np.sum(p_load))
    capacity = float(pmax.sum())
    if demand > capacity + 1e-12:
        raise CapacityError(f"load {demand:.4f} p.u. exceeds capacity {capacity:.4f} p.u.")
    return pmax * (demand / capacity)


@dataclass
class Equilibrium:
    """Operating point of a network under one scenario."""

    scenario: Scenario
    delta: np.ndarray
    voltage_E: np.ndarray
    p_dispatch: np.ndarray
    p_load: np.ndarray
    residual: float
    iterations: int

    def node_loads(self, network: Network) -> np.ndarray:
        out = np.zeros(network.n_nodes)
        np.add.at(out, network.load_nodes, self.p_load)
        return out


def _power_terms(B, delta, E):
    d = delta[:, None] - delta[None, :]
    C = B * np.cos(d)
    Sm = B * np.sin(d)
    return C, Sm, Sm @ E, C @ E


def equilibrium_residual(network: Network, delta, E, p_dispatch, p_load_nodes) -> np.ndarray:
    """Right-hand sides of the swing and voltage equations at rest (delta_dot = 0).

    Power mismatch ``P^G - P^L - E_i sum_j B_ij E_j sin(delta_ij)`` followed by
    the voltage forcing ``Ef - E + X sum_j B_ij E_j cos(delta_ij)``.
    """
    B = network.susceptance_B
    _, X, Ef = network.node_arrays()
    _, _, F, G = _power_terms(B, delta, E)
    pg = np.zeros(network.n_nodes)
    pg[:network.n_gen] = p_dispatch
    r_p = pg - p_load_nodes - E * F
    r_e = Ef - E + X * G
    return np.concatenate([r_p, r_e])


def find_equilibrium(network: Network, scenario, tol: float = 1e-8,
                     max_iter: int = 100) -> Equilibrium:
    """Damped Newton from a flat start (delta = 0, E = Ef).

    The first generator is the angle reference.  Converges when the max
    absolute residual of every continuous right-hand side is below ``tol``.
    """
    scenario = Scenario.parse(scenario)
    p_load = apply_scenario(network, scenario)
    p_disp = dispatch(network, p_load)
    n = network.n_nodes
    B = network.susceptance_B
    _, X, Ef = network.node_arrays()
    p_nodes = np.zeros(n)
    np.add.at(p_nodes, network.load_nodes, p_load)
    p_net = -p_nodes
    p_net[:network.n_gen] += p_disp

    def unpack(x):
        delta = np.concatenate([[0.0], x[:n - 1]])
        return delta, x[n - 1:]

    def fun(x):
        delta, E = unpack(x)
        _, _, F, G = _power_terms(B, delta, E)
        return np.concatenate([(p_net - E * F)[1:], Ef - E + X * G])

    def jac(x):
        delta, E = unpack(x)
        C, Sm, F, G = _power_terms(B, delta, E)
        dP_dd = -E[:, None] * C * E[None, :]
        dP_dd[np.diag_indices(n)] = E * (G - np.diag(B) * E)
        dP_dE = E[:, None] * Sm + np.diag(F)
        dG_dd = Sm * E[None, :] - np.diag(F)
        dG_dE = C
        top = np.hstack([-dP_dd[1:, 1:], -dP_dE[1:, :]])
        bottom = np.hstack([X[:, None] * dG_dd[:, 1:], -np.eye(n) + X[:, None] * dG_dE])
        return np.vstack([top, bottom])

    x = np.concatenate([np.zeros(n - 1), Ef.copy()])
    f = fun(x)
    norm = np.max(np.abs(f))
    it = 0
    for it in range(1, max_iter + 1):
        if norm < 1e-13:
            break
        try:
            step = np.linalg.solve(jac(x), -f)
        except np.linalg.LinAlgError as exc:
            raise InfeasibleEquilibriumError(f"singular Jacobian at iteration {it}") from exc
        lam = 1.0
        while lam > 1e-6:
            x_try = x + lam * step
            f_try = fun(x_try)
            n_try = np.max(np.abs(f_try))
            if np.all(np.isfinite(f_try)) and n_try < norm * (1 - 1e-4 * lam) or n_try < 1e-13:
                break
            lam *= 0.5
        else:
            break
        x, f, norm = x_try, f_try, n_try

    delta, E = unpack(x)
    res = float(np.max(np.abs(equilibrium_residual(network, delta, E, p_disp, p_nodes))))
    if not np.isfinite(res) or res >= tol or np.any(E <= 0):
        raise InfeasibleEquilibriumError(
            f"{network.name} {scenario.name}: residual {res:.3e} after {it} iterations")
    return Equilibrium(scenario, delta, E, p_disp, p_load, res, it)
