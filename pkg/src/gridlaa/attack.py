"""Unified static/dynamic load-altering attack model.

An attack is the quadruple ``(eta, nu, tau, interval_I)``.  Commanded changes
are a step function of time; realized loads are limited by the connected-load
cap, and the attacker's effort is tracked as per-node cumulative magnitudes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import Scenario

T_MAX = 60.0
INTERVAL_MIN = 1.0
ETA_MIN = -1.0
ETA_MAX = 5.0


class AttackValidationError(ValueError):
    pass


def build_schedule(interval_I: float, t_max: float = T_MAX,
                   interval_min: float = INTERVAL_MIN):
    """Number of changes and their times ``t_j = (j - 1) * I``."""
    if not interval_I >= interval_min:
        raise AttackValidationError(
            f"attack interval {interval_I} s below minimum {interval_min} s")
    n = int(math.floor(t_max / interval_I + 1e-12))
    n = max(n, 1)
    return n, [j * float(interval_I) for j in range(n)]


@dataclass
class AttackSpec:
    eta: np.ndarray
    nu: float
    tau: Scenario
    interval_I: float
    t_max: float = T_MAX

    def __post_init__(self):
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        self.tau = Scenario.parse(self.tau)
        self.nu = float(self.nu)
        if not 0.0 <= self.nu <= 1.0:
            raise AttackValidationError(f"nu={self.nu} outside [0, 1]")
        n, _ = build_schedule(self.interval_I, self.t_max)
        if self.eta.shape[1] != n:
            raise AttackValidationError(
                f"eta has {self.eta.shape[1]} columns but interval {self.interval_I} s "
                f"gives n={n} changes")

    @property
    def n_changes(self) -> int:
        return self.eta.shape[1]

    @property
    def attack_times(self) -> list[float]:
        return build_schedule(self.interval_I, self.t_max)[1]

    @classmethod
    def zero(cls, n_attack: int, tau, nu: float = 0.0, interval_I: float = T_MAX):
        n, _ = build_schedule(interval_I)
        return cls(np.zeros((n_attack, n)), nu, tau, interval_I)

    def to_dict(self) -> dict:
        return {
            "schema": "gridlaa.attack/1",
            "eta": self.eta.tolist(),
            "nu": self.nu,
            "tau": self.tau.name.lower(),
            "interval_I": self.interval_I,
            "t_max": self.t_max,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict, n_attack: int | None = None) -> "AttackSpec":
        for key in ("eta", "nu", "tau", "interval_I"):
            if key not in d:
                raise AttackValidationError(f"attack spec missing field '{key}'")
        eta = np.atleast_2d(np.asarray(d["eta"], dtype=float))
        if n_attack is not None and eta.shape[0] != n_attack:
            raise AttackValidationError(
                f"eta has {eta.shape[0]} rows but network has {n_attack} attackable loads")
        return cls(eta, d["nu"], d["tau"], float(d["interval_I"]), float(d.get("t_max", T_MAX)))


@dataclass
class RealizedAttack:
    lam: np.ndarray     # (L, n) realized change applied at each t_j
    sigma: np.ndarray   # (L,) cumulative magnitude
    p_hat: np.ndarray   # (L, n) realized net load on [t_j, t_{j+1})


def commanded_load(eta, p_eq, t, attack_times, t_max: float = T_MAX) -> np.ndarray:
    """Commanded offset ``u_hat(t) = P_eq * eta[:, j]`` for ``t_j <= t < t_{j+1}``."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    p_eq = np.asarray(p_eq, dtype=float)
    if t < attack_times[0] or t >= t_max:
        return np.zeros_like(p_eq)
    j = int(np.searchsorted(attack_times, t, side="right")) - 1
    return p_eq * eta[:, j]


def realized_net_load(nu, p_eq, p_TL, u_hat) -> np.ndarray:
    """Attack-inclusive load before any shedding.

    The vulnerable component ``nu * clamp(P_eq + u_hat, 0, P_TL)`` is
    confined to ``[0, nu * P_TL]``.  The min/max nesting misprinted in the
    source formula would pin the term to zero; the bounded clamp is what the
    stated authority limits describe.
    """
    p_eq = np.asarray(p_eq, dtype=float)
    return (1.0 - nu) * p_eq + nu * np.clip(p_eq + np.asarray(u_hat, dtype=float), 0.0, p_TL)


def realized_changes(spec: AttackSpec, p_eq, p_TL) -> RealizedAttack:
    """Realized per-change load steps and cumulative nodal magnitudes.

    Changes are taken between successive commanded-clamp values, with the
    pre-attack level (eta = 0) before ``t_1``, so they do not depend on any
    integrated trajectory.
    """
    p_eq = np.asarray(p_eq, dtype=float)
    p_TL = np.asarray(p_TL, dtype=float)
    eta = spec.eta
    if eta.shape[0] != p_eq.shape[0]:
        raise AttackValidationError(
            f"eta has {eta.shape[0]} rows, expected {p_eq.shape[0]}")
    p_hat = realized_net_load(spec.nu, p_eq[:, None], p_TL[:, None], p_eq[:, None] * eta)
    prev = np.concatenate([p_eq[:, None], p_hat[:, :-1]], axis=1)
    lam = p_hat - prev
    return RealizedAttack(lam, np.abs(lam).sum(axis=1), p_hat)


def static_realized_changes(eta_col, nu, p_eq, p_TL) -> RealizedAttack:
    """Single-change path used to cross-check the unified model at n = 1."""
    p_eq = np.asarray(p_eq, dtype=float)
    p_hat = realized_net_load(nu, p_eq, p_TL, p_eq * np.asarray(eta_col, dtype=float))
    lam = p_hat - p_eq
    return RealizedAttack(lam[:, None], np.abs(lam), p_hat[:, None])


CASE_STUDIES = ("case_a",)


def load_case_study(name: str = "case_a") -> dict:
    """Bundled scenario document: network name, attack spec and the events it produced."""
    import json
    from .grid import DATA_DIR
    if name not in CASE_STUDIES:
        raise KeyError(f"unknown case study {name!r}; choose from {CASE_STUDIES}")
    return json.loads((DATA_DIR / f"{name}.json").read_text())
