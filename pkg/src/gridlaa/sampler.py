"""Rare-event sampling of successful attacks: MC, random-walk Metropolis, skipping.

All three algorithms drive the same oracle interface::

    oracle.n_attack                                   rows of the attack matrix
    oracle.sample_triple(rng, cfg) -> (nu, tau, I)    network/attack-timing triple
    oracle.draw_eta(rng, shape) -> eta                initial commanded factors
    oracle.evaluate(eta, nu, tau, I) -> Evaluation    (S, Sigma) plus diagnostics

and a chain only ever moves through :func:`accept_reject`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .attack import ETA_MAX, ETA_MIN, INTERVAL_MIN, T_MAX, AttackSpec, build_schedule
from .grid import Scenario

LOGN_MU = 1.0
LOGN_SIGMA = 5.0

MC = "mc"
RWM = "rwm"
SKIPPING = "skipping"
ALGORITHMS = (MC, RWM, SKIPPING)


# ------------------------------------------------------------------ target

@dataclass(frozen=True)
class TargetDensity:
    """Product of ``dimension`` LogNormal(mu, sigma^2) marginals."""
    mu: float = LOGN_MU
    sigma: float = LOGN_SIGMA
    dimension: int = 1

    def logpdf(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape[0] != self.dimension:
            raise ValueError(f"expected {self.dimension} components, got {x.shape[0]}")
        if np.any(~(x > 0)):
            return -math.inf
        z = (np.log(x) - self.mu) / self.sigma
        return float(np.sum(-0.5 * z * z - np.log(x) - math.log(self.sigma)
                            - 0.5 * math.log(2 * math.pi)))

    def pdf(self, x) -> float:
        return math.exp(self.logpdf(x))


def target_density(sigma, mu: float = LOGN_MU, s: float = LOGN_SIGMA):
    """``(density, log_density)`` of the unconditioned target at ``sigma``."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    lp = TargetDensity(mu, s, sigma.shape[0]).logpdf(sigma)
    return math.exp(lp), lp


# ------------------------------------------------------------------ states

@dataclass
class Evaluation:
    success_S: int
    sigma: np.ndarray
    failed: bool = False
    flag: str = ""
    first_event_time: float | None = None


@dataclass
class ChainState:
    success_S: int
    sigma: np.ndarray
    nu: float
    tau: Scenario
    interval_I: float
    eta: np.ndarray
    log_target: float = -math.inf
    failed: bool = False

    @property
    def pi_positive(self) -> bool:
        return self.success_S == 1 and self.log_target > -math.inf


def _state(ev: Evaluation, eta, nu, tau, I, target: TargetDensity, oracle=None) -> ChainState:
    lt = -math.inf
    if ev.success_S == 1:
        hook = getattr(oracle, "log_target", None)
        lt = hook(eta, ev.sigma, target) if hook else target.logpdf(ev.sigma)
    return ChainState(int(ev.success_S), np.asarray(ev.sigma, dtype=float), float(nu),
                      Scenario.parse(tau), float(I), np.array(eta, dtype=float), lt, ev.failed)


@dataclass
class SamplerConfig:
    halting_K: int = 5
    n_steps_m: int = 1000
    rwm_scale: float = 0.5          # step sd on eta (per entry)
    rwm_nu_scale: float = 0.05      # step sd on nu
    skip_distance_law: str = "exponential"
    skip_distance_scale: float = 1.0
    skip_distance_shape: float = 1.0   # log-sd for the log-normal distance law
    seed: int = 0
    mode: str = "dynamic"           # "static" forces I = T_max (n = 1)
    scenario: str | None = None     # fixed tau, or None to sample it
    restart: str = "fresh"          # skipping start: fresh box draw, or current state
    triple: str = "proposal"        # resample (nu, tau, I) per proposal, or hold per chain
    burn_in: float = 0.1

    def __post_init__(self):
        if self.halting_K < 1:
            raise ValueError("halting_K must be >= 1")
        if self.rwm_scale <= 0 or self.rwm_nu_scale <= 0 or self.skip_distance_scale <= 0:
            raise ValueError("proposal scales must be positive")
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.restart not in ("fresh", "current"):
            raise ValueError(f"unknown restart {self.restart!r}")
        if self.triple not in ("proposal", "chain"):
            raise ValueError(f"unknown triple mode {self.triple!r}")
        if self.skip_distance_law not in ("exponential", "gamma2", "halfnormal", "lognormal"):
            raise ValueError(f"unknown distance law {self.skip_distance_law!r}")
        if self.scenario is not None:
            self.scenario = Scenario.parse(self.scenario).name.lower()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sampler config fields: {sorted(unknown)}")
        return cls(**d)


def draw_distance(rng, cfg: SamplerConfig, size) -> np.ndarray:
    """Strictly positive skip distances."""
    s = cfg.skip_distance_scale
    if cfg.skip_distance_law == "exponential":
        r = rng.exponential(s, size)
    elif cfg.skip_distance_law == "gamma2":
        r = rng.gamma(2.0, s / 2.0, size)
    elif cfg.skip_distance_law == "lognormal":
        r = s * rng.lognormal(0.0, cfg.skip_distance_shape, size)
    else:
        r = np.abs(rng.normal(0.0, s, size))
    return np.maximum(r, np.finfo(float).tiny)


def skip_directions(rng, L: int, n: int) -> np.ndarray:
    """``(L, n)`` matrix whose columns are uniformly random unit vectors."""
    g = rng.standard_normal((L, n))
    norms = np.linalg.norm(g, axis=0)
    while np.any(norms == 0):
        bad = norms == 0
        g[:, bad] = rng.standard_normal((L, int(bad.sum())))
        norms = np.linalg.norm(g, axis=0)
    return g / norms


# ------------------------------------------------------------------ oracles

class GridOracle:
    """Power-system model as a sampler oracle; equilibria cached per scenario."""

    def __init__(self, network, er_config, integ=None):
        from . import dynamics
        from .grid import find_equilibrium
        self.network = network
        self.er_config = er_config
        base = integ or dynamics.IntegratorConfig.for_network(network)
        self.integ = base
        self.integ_fast = dynamics.IntegratorConfig(**{**base.__dict__,
                                                       "stop_at_first_event": True})
        self.equilibria = {tau: find_equilibrium(network, tau) for tau in Scenario}
        self.n_attack = network.n_attack
        self.calls = 0
        self.failures = 0

    def sample_triple(self, rng, cfg: SamplerConfig):
        nu = rng.uniform(0.0, 1.0)
        tau_draw = int(rng.integers(1, 5))
        I_draw = rng.uniform(INTERVAL_MIN, T_MAX)
        tau = Scenario.parse(cfg.scenario) if cfg.scenario else Scenario(tau_draw)
        I = T_MAX if cfg.mode == "static" else float(I_draw)
        return float(nu), tau, I

    def draw_eta(self, rng, shape):
        return rng.uniform(ETA_MIN, ETA_MAX, shape)

    def _run(self, eta, nu, tau, I, integ):
        from . import dynamics
        tau = Scenario.parse(tau)
        spec = AttackSpec(eta, nu, tau, I)
        eq = self.equilibria[tau]
        state = dynamics.SystemState.from_equilibrium(self.network, eq)
        return dynamics.integrate_with_events(state, spec, self.er_config, self.network,
                                              integ, equilibrium=eq)

    def evaluate(self, eta, nu, tau, I) -> Evaluation:
        from .attack import realized_changes
        from .dynamics import NumericalBlowupError
        self.calls += 1
        try:
            out = self._run(eta, nu, tau, I, self.integ_fast)
        except NumericalBlowupError as exc:
            self.failures += 1
            sigma = exc.outcome.realized.sigma if exc.outcome is not None else \
                realized_changes(AttackSpec(eta, nu, tau, I), self.equilibria[tau].p_load,
                                 self.network.load_arrays()[1]).sigma
            return Evaluation(0, sigma, True, f"blowup t={exc.time:.4g} node={exc.node}")
        flag = out.status if out.status != "ok" else ""
        r = out.events[0].time if out.events else None
        return Evaluation(out.success, out.realized.sigma, False, flag, r)

    def detail(self, state: ChainState) -> dict:
        """Full 60 s replay of an accepted state for the sample store."""
        from .analysis import attack_record
        out = self._run(state.eta, state.nu, state.tau, state.interval_I, self.integ)
        return attack_record(out, self.network)


class ToyProblem:
    """One-dimensional analytic check with ``A = {Sigma > c}``.

    ``c`` is the ``quantile`` of LogNormal(mu, sigma^2), so the conditioned
    target on Sigma is a truncated log-normal with a closed-form inverse CDF.
    ``coordinates='linear'`` uses ``Sigma = |eta|`` (A has two components
    separated by the gap ``(-c, c)``); ``'log'`` uses ``Sigma = e^eta``.
    """

    n_attack = 1
    walk_nu = False

    def __init__(self, quantile: float = 0.999, mu: float = LOGN_MU, sigma: float = LOGN_SIGMA,
                 coordinates: str = "linear"):
        if coordinates not in ("linear", "log"):
            raise ValueError(f"unknown coordinates {coordinates!r}")
        self.mu, self.sigma, self.quantile = mu, sigma, quantile
        self.coordinates = coordinates
        self.log_threshold = mu + sigma * stats.norm.ppf(quantile)
        self.threshold = math.exp(self.log_threshold)
        self.calls = 0
        self.failures = 0

    def sample_triple(self, rng, cfg):
        return 1.0, Scenario.NIGHT, T_MAX

    def draw_eta(self, rng, shape):
        # a draw of Sigma from rho, with a random sign in linear coordinates
        x = rng.normal(self.mu, self.sigma, shape)
        if self.coordinates == "log":
            return x
        sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
        return sign * np.exp(x)

    def sigma_of(self, eta) -> float:
        x = float(np.asarray(eta, dtype=float).sum())
        return math.exp(x) if self.coordinates == "log" else abs(x)

    def evaluate(self, eta, nu, tau, I) -> Evaluation:
        self.calls += 1
        s = self.sigma_of(eta)
        return Evaluation(int(s > self.threshold), np.array([s]))

    def log_target(self, eta, sigma, target) -> float:
        lp = target.logpdf(sigma)
        if self.coordinates == "log":
            # density of eta = log Sigma: rho(e^eta) e^eta
            lp += float(np.asarray(eta, dtype=float).sum())
        else:
            # both signs carry Sigma = |eta|
            lp -= math.log(2.0)
        return lp

    def detail(self, state: ChainState) -> dict:
        return {}

    def truncated_sample(self, rng, size) -> np.ndarray:
        """Independent draws from the conditioned target by inverse CDF."""
        u = rng.uniform(self.quantile, 1.0, size)
        return np.exp(self.mu + self.sigma * stats.norm.ppf(u))

    def truncated_cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(x) - self.mu) / self.sigma
        p = stats.norm.cdf(z)
        return np.clip((p - self.quantile) / (1.0 - self.quantile), 0.0, 1.0)

    def stationary_start(self, rng):
        """Initial chain state drawn from the conditioned target itself."""
        s = float(self.truncated_sample(rng, 1)[0])
        x = math.log(s) if self.coordinates == "log" else s
        return np.array([[x]]), 1.0, Scenario.NIGHT, T_MAX


# ------------------------------------------------------------------ moves

def accept_reject(Y: ChainState, Z: ChainState, rng, u: float | None = None):
    """Metropolis step on the conditioned target.

    Returns ``(next_state, accepted)``.  ``alpha = 1`` whenever ``pi(Y) = 0``.
    ``u`` overrides the uniform draw (for tests); otherwise one uniform is
    always consumed so that the random stream does not depend on the branch.
    """
    if Z.success_S != 1:
        raise ValueError("only successful proposals reach the acceptance step")
    v = rng.uniform() if u is None else u
    if not Y.pi_positive:
        return Z, True
    log_alpha = min(0.0, Z.log_target - Y.log_target)
    if v <= math.exp(log_alpha):
        return Z, True
    return Y, False


def propose_skipping(current: ChainState, cfg: SamplerConfig, oracle, rng, target):
    """One skipping proposal (up to ``halting_K`` oracle calls).

    Returns ``(Z, n_evaluations, path)``, where ``path`` lists the commanded
    matrices visited.  With ``restart='fresh'`` the triple (unless held per
    chain) and a new box draw seed the path; with ``'current'`` the path
    starts at the chain state and always takes at least one skip.
    """
    if cfg.restart == "fresh":
        if cfg.triple == "proposal":
            nu, tau, I = oracle.sample_triple(rng, cfg)
        else:
            nu, tau, I = current.nu, current.tau, current.interval_I
        n, _ = build_schedule(I)
        eta = oracle.draw_eta(rng, (oracle.n_attack, n))
        ev = oracle.evaluate(eta, nu, tau, I)
        calls = 1
    else:
        nu, tau, I = current.nu, current.tau, current.interval_I
        eta = current.eta.copy()
        ev = None
        calls = 0
    L, n = eta.shape
    phi = skip_directions(rng, L, n)
    path = [eta.copy()]
    while (ev is None or ev.success_S != 1) and calls < cfg.halting_K:
        R = draw_distance(rng, cfg, n)
        eta = eta + phi * R[None, :]
        ev = oracle.evaluate(eta, nu, tau, I)
        calls += 1
        path.append(eta.copy())
    return _state(ev, eta, nu, tau, I, target, oracle), calls, path


def propose_rwm(current: ChainState, cfg: SamplerConfig, oracle, rng, target):
    """Gaussian random-walk step on (eta, nu); tau and I stay with the chain."""
    eta = current.eta + rng.normal(0.0, cfg.rwm_scale, current.eta.shape)
    nu = current.nu
    if getattr(oracle, "walk_nu", True):
        nu = current.nu + rng.normal(0.0, cfg.rwm_nu_scale)
    if not 0.0 <= nu <= 1.0:
        # outside the prior support: zero target density, counts as a miss
        return _state(Evaluation(0, current.sigma), eta, current.nu, current.tau,
                      current.interval_I, target), 0
    ev = oracle.evaluate(eta, nu, current.tau, current.interval_I)
    return _state(ev, eta, nu, current.tau, current.interval_I, target, oracle), 1


# ------------------------------------------------------------------ chains

@dataclass
class ChainResult:
    algorithm: str
    chain_id: int
    seed: int
    states: list[dict]          # distinct visited states in order (store records)
    diagnostics: dict
    trace_log_target: list[float] = field(default_factory=list)
    trace_state: list[int] = field(default_factory=list)


def chain_rng(seed: int, chain_id: int):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain_id),)))


def _record(state: ChainState, state_id, proposal_index, calls, chain_id, seed, oracle,
            weight=None, with_detail=True) -> dict:
    rec = {
        "state_id": state_id, "chain": chain_id, "seed": int(seed),
        "proposal_index": proposal_index, "oracle_calls": calls,
        "S": state.success_S, "sigma": [float(x) for x in state.sigma],
        "nu": state.nu, "tau": state.tau.name.lower(), "interval_I": state.interval_I,
        "log_target": state.log_target if state.log_target > -math.inf else None,
        "eta": state.eta.tolist(), "multiplicity": 0, "failed": state.failed,
    }
    if weight is not None:
        rec["weight"] = weight
    if with_detail and state.success_S == 1:
        rec.update(oracle.detail(state))
    return rec


def run_chain(cfg: SamplerConfig, algorithm: str, oracle, chain_id: int = 0,
              with_detail: bool = True, initial=None) -> ChainResult:
    """Run ``cfg.n_steps_m`` proposals of ``algorithm`` on ``oracle``.

    Markov chains start from ``initial = (eta, nu, tau, I)`` when given,
    otherwise from a draw of the prior box.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    rng = chain_rng(cfg.seed, chain_id)
    target = TargetDensity(dimension=oracle.n_attack)
    calls0 = oracle.calls
    fail0 = oracle.failures
    m = cfg.n_steps_m
    states: list[dict] = []
    nu_acc: list[float] = []
    hits = 0
    accepted = 0

    if algorithm == MC:
        for w in range(m):
            nu, tau, I = oracle.sample_triple(rng, cfg)
            n, _ = build_schedule(I)
            eta = oracle.draw_eta(rng, (oracle.n_attack, n))
            Z = _state(oracle.evaluate(eta, nu, tau, I), eta, nu, tau, I, target, oracle)
            if Z.success_S == 1:
                hits += 1
                accepted += 1
                weight = math.exp(Z.log_target) if Z.log_target > -math.inf else 0.0
                rec = _record(Z, len(states), w, oracle.calls - calls0, chain_id, cfg.seed,
                              oracle, weight, with_detail)
                rec["multiplicity"] = 1
                states.append(rec)
                nu_acc.append(Z.nu)
        diag = _diagnostics(algorithm, cfg, m, hits, accepted, oracle, calls0, fail0, nu_acc)
        return ChainResult(algorithm, chain_id, cfg.seed, states, diag)

    # Markov chains: initial state from the prior box
    if initial is None:
        nu, tau, I = oracle.sample_triple(rng, cfg)
        n, _ = build_schedule(I)
        eta0 = oracle.draw_eta(rng, (oracle.n_attack, n))
    else:
        eta0, nu, tau, I = initial
        eta0 = np.array(eta0, dtype=float)
    Y = _state(oracle.evaluate(eta0, nu, tau, I), eta0, nu, tau, I, target, oracle)
    states.append(_record(Y, 0, -1, oracle.calls - calls0, chain_id, cfg.seed, oracle,
                          with_detail=with_detail))
    trace_lt = []
    trace_id = []
    cur_id = 0
    for w in range(m):
        if algorithm == SKIPPING:
            Z, _, _ = propose_skipping(Y, cfg, oracle, rng, target)
        else:
            Z, _ = propose_rwm(Y, cfg, oracle, rng, target)
        if Z.success_S == 1:
            hits += 1
            Y_next, acc = accept_reject(Y, Z, rng)
            if acc:
                accepted += 1
                Y = Y_next
                cur_id = len(states)
                states.append(_record(Y, cur_id, w, oracle.calls - calls0, chain_id, cfg.seed,
                                      oracle, with_detail=with_detail))
                nu_acc.append(Y.nu)
        states[cur_id]["multiplicity"] += 1
        trace_lt.append(Y.log_target)
        trace_id.append(cur_id)
    diag = _diagnostics(algorithm, cfg, m, hits, accepted, oracle, calls0, fail0, nu_acc)
    return ChainResult(algorithm, chain_id, cfg.seed, states, diag, trace_lt, trace_id)


def _diagnostics(algorithm, cfg, m, hits, accepted, oracle, calls0, fail0, nu_acc) -> dict:
    return {
        "algorithm": algorithm,
        "proposals": m,
        "hits": hits,
        "accepted": accepted,
        "acceptance_rate": accepted / m if m else 0.0,
        "hit_rate": hits / m if m else 0.0,
        "oracle_calls": oracle.calls - calls0,
        "failures": oracle.failures - fail0,
        "nu_range": [min(nu_acc), max(nu_acc)] if nu_acc else None,
        "config": cfg.to_dict(),
    }


def post_burn_in(states: list[dict], burn_in: float = 0.1) -> list[dict]:
    """Successful distinct states after discarding the first ``burn_in`` fraction."""
    ok = [s for s in states if s.get("S") == 1]
    k = int(math.floor(burn_in * len(ok)))
    return ok[k:]


def chain_samples(result: ChainResult, key: str = "sigma", burn_in: float = 0.0):
    """Expand the chain trace into per-step values (with MCMC multiplicity)."""
    vals = [result.states[i][key] for i in result.trace_state]
    k = int(math.floor(burn_in * len(vals)))
    return vals[k:]


# ------------------------------------------------------------------ store

def write_store(results: list[ChainResult], path) -> None:
    with open(path, "w") as fh:
        for res in results:
            for rec in res.states:
                fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")


def read_store(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def merge_diagnostics(results: list[ChainResult]) -> dict:
    m = sum(r.diagnostics["proposals"] for r in results)
    acc = sum(r.diagnostics["accepted"] for r in results)
    hits = sum(r.diagnostics["hits"] for r in results)
    nus = [x for r in results if r.diagnostics["nu_range"] for x in r.diagnostics["nu_range"]]
    return {
        "algorithm": results[0].algorithm if results else None,
        "chains": [r.diagnostics for r in results],
        "proposals": m, "accepted": acc, "hits": hits,
        "acceptance_rate": acc / m if m else 0.0,
        "hit_rate": hits / m if m else 0.0,
        "oracle_calls": sum(r.diagnostics["oracle_calls"] for r in results),
        "failures": sum(r.diagnostics["failures"] for r in results),
        "nu_range": [min(nus), max(nus)] if nus else None,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
