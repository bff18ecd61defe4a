"""Post-processing of successful attacks: response time, pre-disconnection
magnitude, cascade size, distribution comparison and the reverse-governor fit."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import stats

from .grid import Scenario
from .protection import EREvent, EventKind

HF_SPLIT = 30.0        # high/low-frequency D-LAA split on the attack period
MIN_POINTS = 3
P_SIGNIFICANT = 0.05


class Classification(str, Enum):
    REVERSE_GOVERNOR = "ReverseGovernor"
    POSITIVE = "Positive"
    NO_RELATIONSHIP = "NoRelationship"


@dataclass
class AttackStats:
    response_time_r: float | None
    mu_lambda_minus: float
    cascade_by_kind: dict
    avg_mu_lambda: float
    tau: Scenario
    interval_I: float
    mu_flag: bool = False

    def to_dict(self) -> dict:
        return {"response_time_r": self.response_time_r, "mu_lambda_minus": self.mu_lambda_minus,
                "cascade_by_kind": self.cascade_by_kind, "avg_mu_lambda": self.avg_mu_lambda,
                "tau": self.tau.name.lower(), "interval_I": self.interval_I,
                "mu_flag": self.mu_flag}


@dataclass
class RegressionResult:
    beta0: float
    beta1: float
    p_value: float
    r_squared: float
    classification: Classification
    n_points: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"beta0": self.beta0, "beta1": self.beta1, "p_value": self.p_value,
                "r_squared": self.r_squared, "classification": self.classification.value,
                "n_points": self.n_points, "degenerate": self.degenerate}


# ------------------------------------------------------------------ per attack

def _as_events(event_log) -> list[EREvent]:
    return [e if isinstance(e, EREvent) else EREvent.from_dict(e) for e in event_log]


def response_time(event_log) -> float | None:
    """Time of the earliest disconnection; ``None`` for an empty log."""
    events = _as_events(event_log)
    if not events:
        return None
    return min(events, key=EREvent.sort_key).time


def first_event(event_log) -> EREvent | None:
    events = _as_events(event_log)
    return min(events, key=EREvent.sort_key) if events else None


def mu_lambda_minus(realized, r: float, attack_times):
    """Mean ``|lambda|`` over all nodes and change times strictly before ``r``.

    Returns ``(mu, flag)``; ``flag`` is set (and ``mu = 0``) when no change
    precedes ``r``.
    """
    lam = np.asarray(realized.lam if hasattr(realized, "lam") else realized, dtype=float)
    times = np.asarray(attack_times, dtype=float)
    before = times < r
    if not np.any(before):
        warnings.warn("no load change precedes the first disconnection", RuntimeWarning,
                      stacklevel=2)
        return 0.0, True
    return float(np.abs(lam[:, before]).mean()), False


def relative_mu_lambda_minus(realized, p_eq, r: float, attack_times) -> float:
    """Pre-disconnection mean of ``|lambda| / P_eq`` in percent of equilibrium load."""
    lam = np.asarray(realized.lam, dtype=float)
    p_eq = np.asarray(p_eq, dtype=float)
    before = np.asarray(attack_times, dtype=float) < r
    if not np.any(before):
        return 0.0
    return float(100.0 * (np.abs(lam[:, before]) / p_eq[:, None]).mean())


def avg_mu_lambda(realized) -> float:
    lam = np.asarray(realized.lam if hasattr(realized, "lam") else realized, dtype=float)
    return float(np.abs(lam).mean()) if lam.size else 0.0


def cascade_size(event_log, network=None, scenario=None) -> dict:
    """Disconnected p.u. per relay kind; interconnector trips as count and flow."""
    out = {k.name: 0.0 for k in EventKind}
    out["LINE_count"] = 0
    for e in _as_events(event_log):
        if e.kind == EventKind.LINE:
            out["LINE_count"] += 1
            out["LINE"] += e.magnitude
        else:
            out[e.kind.name] += e.magnitude
    return out


def attack_record(outcome, network, weighting: str = "inertia") -> dict:
    """Analysis fields stored alongside each accepted sampler state."""
    from .dynamics import system_frequency
    events = outcome.events
    r = response_time(events)
    lam = outcome.realized.lam
    p_eq = outcome.realized.p_hat[:, 0] - lam[:, 0]
    if r is None:
        mu, flag, pct = 0.0, True, 0.0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mu, flag = mu_lambda_minus(outcome.realized, r, outcome.attack_times)
        pct = relative_mu_lambda_minus(outcome.realized, p_eq, r, outcome.attack_times)
    om = outcome.omega_at_changes
    freq = [float(x) if np.isfinite(x) else None
            for x in system_frequency(om, network, weighting=weighting)]
    return {
        "r": r,
        "mu_lambda_minus": mu,
        "mu_flag": flag,
        "mu_lambda_pct": pct,
        "avg_mu_lambda": avg_mu_lambda(lam),
        "events": [e.to_dict() for e in events],
        "cascade": cascade_size(events),
        "attack_times": [float(t) for t in outcome.attack_times],
        "net_change": [float(x) for x in lam.sum(axis=0)],
        "freq_at_changes": freq,
        "status": outcome.status,
    }


def attack_stats(record: dict) -> AttackStats:
    return AttackStats(record.get("r"), record.get("mu_lambda_minus", 0.0),
                       record.get("cascade", cascade_size([])),
                       record.get("avg_mu_lambda", 0.0), Scenario.parse(record["tau"]),
                       float(record["interval_I"]), bool(record.get("mu_flag", False)))


# ------------------------------------------------------------------ statistics

def reverse_governor_fit(net_change, frequency) -> RegressionResult:
    """OLS of net load change on system frequency with a two-sided slope test.

    ``beta1`` is the fitted slope itself, so a negative ``beta1`` means load
    moves against frequency.
    """
    y = np.asarray(net_change, dtype=float)
    x = np.asarray(frequency, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    n = len(x)
    if n < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} load changes, got {n}")
    if np.ptp(x) == 0:
        return RegressionResult(float(y.mean()), 0.0, 1.0, 0.0,
                                Classification.NO_RELATIONSHIP, n, True)
    if np.ptp(y) == 0:
        return RegressionResult(float(y[0]), 0.0, 1.0, 0.0,
                                Classification.NO_RELATIONSHIP, n)
    fit = stats.linregress(x, y)
    p = float(fit.pvalue) if np.isfinite(fit.pvalue) else 1.0
    if fit.slope < 0 and p < P_SIGNIFICANT:
        cls = Classification.REVERSE_GOVERNOR
    elif fit.slope > 0 and p < P_SIGNIFICANT:
        cls = Classification.POSITIVE
    else:
        cls = Classification.NO_RELATIONSHIP
    return RegressionResult(float(fit.intercept), float(fit.slope), p,
                            float(fit.rvalue ** 2), cls, n)


def compare_distributions(sample_a, sample_b):
    """Two-sided Welch t-test; returns ``(t, p)``."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    if np.var(a) == 0 and np.var(b) == 0:
        if a[0] == b[0]:
            return 0.0, 1.0
        raise ValueError("both samples have zero variance")
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


# ------------------------------------------------------------------ tables

def successful(records, burn_in: float = 0.0) -> list[dict]:
    """Successful states, dropping the first ``burn_in`` fraction per chain."""
    by_chain: dict = {}
    for rec in records:
        if rec.get("S") == 1:
            by_chain.setdefault(rec.get("chain", 0), []).append(rec)
    out = []
    for cid in sorted(by_chain):
        recs = by_chain[cid]
        out.extend(recs[int(math.floor(burn_in * len(recs))):])
    return out


def attack_mode(rec: dict) -> str:
    return "S-LAA" if rec["interval_I"] >= 60.0 else "D-LAA"


def table_ii(records) -> list[dict]:
    """Scenario x metric summary per attack mode (means over successful states)."""
    rows = []
    for mode in ("D-LAA", "S-LAA"):
        group = [r for r in records if attack_mode(r) == mode]
        metrics = [("mu_lambda_pct", "mu_lambda_pct"), ("mu_lambda_minus", "mu_lambda_minus"),
                   ("avg_mu_lambda", "avg_mu_lambda"), ("r", "r")]
        if mode == "D-LAA":
            metrics.append(("interval_I", "interval_I"))
        for label, key in metrics:
            row = {"mode": mode, "metric": label}
            for tau in Scenario:
                vals = [r[key] for r in group if Scenario.parse(r["tau"]) == tau
                        and r.get(key) is not None]
                row[tau.name.lower()] = float(np.mean(vals)) if vals else None
            row["count"] = len(group)
            rows.append(row)
    return rows


def scenario_risk(records_all, records_ok) -> list[dict]:
    """Disconnection share and mean cascade size per scenario."""
    rows = []
    total = len(records_ok)
    for tau in Scenario:
        ok = [r for r in records_ok if Scenario.parse(r["tau"]) == tau]
        row = {"scenario": tau.name.lower(), "successful": len(ok),
               "share": len(ok) / total if total else 0.0}
        for kind in EventKind:
            vals = [r.get("cascade", {}).get(kind.name, 0.0) for r in ok]
            row[f"cascade_{kind.name}"] = float(np.mean(vals)) if vals else 0.0
        rows.append(row)
    return rows


def pie_proportions(records) -> tuple[dict, list[dict]]:
    """Reverse-governor classification shares over D-LAA states."""
    counts = {c.value: 0 for c in Classification}
    fits = []
    excluded = 0
    for rec in records:
        if attack_mode(rec) != "D-LAA":
            continue
        x = [np.nan if v is None else v for v in rec.get("freq_at_changes", [])]
        y = rec.get("net_change", [])
        if sum(1 for v in x if np.isfinite(v)) < MIN_POINTS:
            excluded += 1
            continue
        res = reverse_governor_fit(y, x)
        counts[res.classification.value] += 1
        fits.append({"state_id": rec.get("state_id"), "chain": rec.get("chain"),
                     **res.to_dict()})
    n = sum(counts.values())
    props = {k: (v / n if n else 0.0) for k, v in counts.items()}
    props["n"] = n
    props["excluded"] = excluded
    return props, fits


def histogram(values, bins: int = 30) -> list[dict]:
    values = np.asarray([v for v in values if v is not None], dtype=float)
    if values.size == 0:
        return []
    counts, edges = np.histogram(values, bins=bins)
    return [{"lo": float(edges[k]), "hi": float(edges[k + 1]), "count": int(counts[k])}
            for k in range(len(counts))]


def _write_csv(path, rows, fields=None):
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def analyze_store(records, out_dir, burn_in: float = 0.1) -> dict:
    """Write every summary table for a sample store; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ok = successful(records, burn_in)
    t2 = table_ii(ok)
    _write_csv(out / "table_ii.csv", t2,
               ["mode", "metric", "night", "morning", "afternoon", "evening", "count"])
    risk = scenario_risk(records, ok)
    _write_csv(out / "scenario_risk.csv", risk,
               ["scenario", "successful", "share"] + [f"cascade_{k.name}" for k in EventKind])
    props, fits = pie_proportions(ok)
    _write_csv(out / "pie_proportions.csv",
               [{"class": c.value, "fraction": props[c.value]} for c in Classification],
               ["class", "fraction"])
    _write_csv(out / "regressions.csv", fits,
               ["state_id", "chain", "beta0", "beta1", "p_value", "r_squared",
                "classification", "n_points", "degenerate"])
    groups = {
        "hf_dlaa": [r["mu_lambda_minus"] for r in ok
                    if attack_mode(r) == "D-LAA" and r["interval_I"] < HF_SPLIT],
        "lf_dlaa": [r["mu_lambda_minus"] for r in ok
                    if attack_mode(r) == "D-LAA" and r["interval_I"] >= HF_SPLIT],
        "slaa": [r["mu_lambda_minus"] for r in ok if attack_mode(r) == "S-LAA"],
    }
    for name, vals in groups.items():
        _write_csv(out / f"hist_mu_{name}.csv", histogram(vals), ["lo", "hi", "count"])
    d = [r.get("mu_lambda_pct", 0.0) for r in ok if attack_mode(r) == "D-LAA"]
    s = [r.get("mu_lambda_pct", 0.0) for r in ok if attack_mode(r) == "S-LAA"]
    comparison = None
    if len(d) >= 2 and len(s) >= 2:
        try:
            t, p = compare_distributions(d, s)
            comparison = {"t": t, "p": p, "mean_dlaa": float(np.mean(d)),
                          "mean_slaa": float(np.mean(s)), "n_dlaa": len(d), "n_slaa": len(s)}
        except ValueError:
            comparison = None
    summary = {"successful": len(ok), "records": len(records), "burn_in": burn_in,
               "regression": props, "dlaa_vs_slaa": comparison}
    with open(out / "regression_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
