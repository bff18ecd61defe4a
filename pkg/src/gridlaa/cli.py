"""Command-line entry point: simulate, sample, calibrate, analyze, compare, rerun."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CALIBRATION = 3
EXIT_NUMERICAL = 4

MANIFEST = "manifest.json"
TOY = "toy"


class InputError(Exception):
    pass


class PreconditionError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config_hash: str
    network_path: str | None
    network_sha256: str | None
    seed: int | None
    algorithm: str | None
    mode: str | None
    sample_counts: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        known = set(cls.__dataclass_fields__)
        missing = {"command", "argv"} - set(d)
        if missing:
            raise InputError(f"manifest missing fields: {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def _canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _dump(path, obj) -> None:
    from .sampler import _jsonable
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path}: invalid JSON ({exc})") from None


def _network(name):
    from .grid import file_sha256, load_network, network_path
    try:
        path = network_path(name)
        net = load_network(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"network {name}: {exc}") from None
    return net, path, file_sha256(path)


def _er_config(args, net, required: bool):
    from .protection import ERConfig, ERConfigError
    try:
        if getattr(args, "er_config", None):
            cfg = ERConfig.from_dict(_read_json(args.er_config, "ER config"))
        elif net.er_config:
            cfg = ERConfig.from_dict(net.er_config)
        else:
            cfg = None
        if cfg is not None:
            cfg.validate()
    except (ERConfigError, TypeError, ValueError) as exc:
        raise InputError(f"ER config: {exc}") from None
    if required and (cfg is None or not cfg.calibrated):
        raise PreconditionError("no calibrated ER config: run `gridlaa calibrate` "
                                "or pass --calibrate")
    return cfg


def _outputs(out: Path) -> dict:
    from .grid import file_sha256
    return {p.name: file_sha256(p) for p in sorted(out.iterdir())
            if p.is_file() and p.name != MANIFEST}


def _finish(out: Path, manifest: RunManifest, t0: float) -> None:
    manifest.outputs = _outputs(out)
    manifest.wall_clock_s = time.time() - t0
    _dump(out / MANIFEST, manifest.to_dict())


def _argv_without_out(argv: list) -> list:
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        res.append(a)
    return res


# ------------------------------------------------------------------ simulate

def cmd_simulate(args, argv) -> int:
    from .analysis import AttackStats, attack_record
    from .attack import CASE_STUDIES, AttackSpec, AttackValidationError, load_case_study
    from .dynamics import (IntegratorConfig, NumericalBlowupError, simulate,
                           write_events_jsonl, write_trajectory_csv)
    t0 = time.time()
    net, path, sha = _network(args.network)
    er = _er_config(args, net, required=False)
    if args.attack in CASE_STUDIES and not Path(args.attack).exists():
        raw = load_case_study(args.attack)
    else:
        raw = _read_json(args.attack, "attack spec")
    if isinstance(raw, dict) and isinstance(raw.get("attack"), dict):
        raw = raw["attack"]               # scenario document wrapping a spec
    try:
        spec = AttackSpec.from_dict(raw, net.n_attack)
    except (AttackValidationError, ValueError, TypeError) as exc:
        raise InputError(f"attack spec {args.attack}: {exc}") from None
    integ = IntegratorConfig.for_network(net, t_max=spec.t_max, record_every=args.record_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = simulate(net, spec, er, integ)
    except NumericalBlowupError as exc:
        print(f"numerical blow-up at t={exc.time:.6g} s, node {exc.node}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_trajectory_csv(res, net, out / "trajectory.csv")
    write_events_jsonl(res.events, out / "events.jsonl")
    rec = attack_record(res, net)
    stats = AttackStats(rec["r"], rec["mu_lambda_minus"], rec["cascade"], rec["avg_mu_lambda"],
                        spec.tau, spec.interval_I, rec["mu_flag"]).to_dict()
    stats.update(success_S=res.success, sigma=res.realized.sigma.tolist(),
                 mu_lambda_pct=rec["mu_lambda_pct"], status=res.status, t_end=res.t_end)
    _dump(out / "stats.json", stats)
    cfg_hash = _canonical_hash({"attack": spec.to_dict(), "er": er.to_dict() if er else None})
    _finish(out, RunManifest("simulate", argv, cfg_hash, str(path), sha, None, None,
                             "static" if spec.n_changes == 1 else "dynamic",
                             {"events": len(res.events)}), t0)
    print(f"{len(res.events)} events; stats in {out / 'stats.json'}")
    return EXIT_OK


# ------------------------------------------------------------------ sample

def _sampler_config(args):
    from .sampler import SamplerConfig
    base = {}
    if args.sampler_config:
        base = _read_json(args.sampler_config, "sampler config")
    base.update(n_steps_m=args.proposals, seed=args.seed, mode=args.mode,
                scenario=None if args.scenario == "sampled" else args.scenario)
    try:
        return SamplerConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise InputError(f"sampler config: {exc}") from None


def _toy_config(cfg):
    from dataclasses import replace
    from .sampler import ToyProblem
    toy = ToyProblem()
    return replace(cfg, restart="current", rwm_scale=toy.threshold,
                   skip_distance_scale=toy.threshold)


def _chain_job(job):
    """One chain in a worker (or inline); returns the ChainResult."""
    from .sampler import GridOracle, ToyProblem, run_chain
    network_name, er_dict, cfg, algorithm, chain_id = job
    if network_name == TOY:
        toy = ToyProblem()
        start = toy.stationary_start(np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(chain_id, 1))))
        return run_chain(cfg, algorithm, toy, chain_id, initial=start)
    from .grid import load_network
    from .protection import ERConfig
    net = load_network(network_name)
    oracle = GridOracle(net, ERConfig.from_dict(er_dict))
    return run_chain(cfg, algorithm, oracle, chain_id)


def _run_chains(network_name, er, cfg, algorithm, chains: int, workers: int):
    er_dict = er.to_dict() if er is not None else None
    jobs = [(network_name, er_dict, cfg, algorithm, c) for c in range(chains)]
    if workers > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, chains)) as ex:
            return list(ex.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def _prepare_sampling(args):
    if args.network == TOY:
        return None, None, None, None
    net, path, sha = _network(args.network)
    if args.calibrate:
        from .protection import CalibrationError, calibrate_n1
        base = _er_config(args, net, required=False)
        if base is None:
            from .protection import ERConfig
            base = ERConfig.for_network(net)
        try:
            er, _ = calibrate_n1(net, base)
        except CalibrationError as exc:
            raise PreconditionError(f"calibration failed: {exc}") from None
    else:
        er = _er_config(args, net, required=True)
    return net, path, sha, er


def cmd_sample(args, argv) -> int:
    from .sampler import merge_diagnostics, write_store
    t0 = time.time()
    cfg = _sampler_config(args)
    net, path, sha, er = _prepare_sampling(args)
    if args.network == TOY:
        cfg = _toy_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network_ref = args.network if net is None else str(path)
    results = _run_chains(network_ref, er, cfg, args.algorithm, args.chains, args.workers)
    write_store(results, out / "samples.jsonl")
    diag = merge_diagnostics(results)
    _dump(out / "diagnostics.json", diag)
    cfg_hash = _canonical_hash({"sampler": cfg.to_dict(), "er": er.to_dict() if er else None,
                                "chains": args.chains})
    _finish(out, RunManifest("sample", argv, cfg_hash, str(path) if path else None, sha,
                             cfg.seed, args.algorithm, cfg.mode,
                             {"proposals": diag["proposals"], "accepted": diag["accepted"],
                              "hits": diag["hits"], "chains": args.chains}), t0)
    print(f"{diag['accepted']} accepted of {diag['proposals']} proposals "
          f"({100 * diag['acceptance_rate']:.1f}%)")
    return EXIT_OK


# ------------------------------------------------------------------ calibrate

def cmd_calibrate(args, argv) -> int:
    from .protection import CalibrationError, ERConfig, calibrate_n1, write_report
    t0 = time.time()
    net, path, sha = _network(args.network)
    base = _er_config(args, net, required=False) or ERConfig.for_network(net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg, report = calibrate_n1(net, base, margin=args.margin)
    except CalibrationError as exc:
        write_report(exc.report, out / "calibration_report.json")
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    _dump(out / "er_config.json", cfg.to_dict())
    write_report(report, out / "calibration_report.json")
    n_case = len(report.get("cases", []))
    _finish(out, RunManifest("calibrate", argv, _canonical_hash(base.to_dict()), str(path), sha,
                             None, None, None, {"contingency_runs": n_case}), t0)
    print(f"all {n_case} contingency runs event-free; config in {out / 'er_config.json'}")
    return EXIT_OK


# ------------------------------------------------------------------ analyze

def cmd_analyze(args, argv) -> int:
    from .analysis import analyze_store
    from .grid import file_sha256
    from .sampler import read_store
    t0 = time.time()
    store = Path(args.store)
    if not store.exists():
        raise InputError(f"sample store not found: {store}")
    try:
        records = read_store(store)
    except json.JSONDecodeError as exc:
        raise InputError(f"sample store {store}: {exc}") from None
    out = Path(args.out)
    summary = analyze_store(records, out, burn_in=args.burn_in)
    _finish(out, RunManifest("analyze", argv, _canonical_hash({"burn_in": args.burn_in}),
                             None, None, None, None, None,
                             {"records": len(records), "successful": summary["successful"],
                              "store_sha256": file_sha256(store)}), t0)
    print(f"{summary['successful']} successful states analysed; tables in {out}")
    return EXIT_OK


# ------------------------------------------------------------------ compare

def _fmt_range(r):
    return "" if not r else f"[{r[0]:.2f}, {r[1]:.2f}]"


def cmd_compare(args, argv) -> int:
    import csv
    from .sampler import ALGORITHMS, merge_diagnostics, write_store
    t0 = time.time()
    cfg = _sampler_config(args)
    net, path, sha, er = _prepare_sampling(args)
    if args.network == TOY:
        cfg = _toy_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network_ref = args.network if net is None else str(path)
    rows = []
    counts = {}
    for alg in ALGORITHMS:
        res = _run_chains(network_ref, er, cfg, alg, args.chains, args.workers)
        write_store(res, out / f"samples_{alg}.jsonl")
        d = merge_diagnostics(res)
        counts[alg] = {"accepted": d["accepted"], "proposals": d["proposals"]}
        rows.append({"algorithm": alg, "distribution": "LogNormal(1, 25)",
                     "proposals": d["proposals"], "accepted": d["accepted"],
                     "acceptance_rate_pct": round(100 * d["acceptance_rate"], 4),
                     "nu_range": _fmt_range(d["nu_range"]),
                     "oracle_calls": d["oracle_calls"], "failures": d["failures"]})
    with open(out / "table_i.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _dump(out / "comparison.json", rows)
    cfg_hash = _canonical_hash({"sampler": cfg.to_dict(), "er": er.to_dict() if er else None})
    _finish(out, RunManifest("compare", argv, cfg_hash, str(path) if path else None, sha,
                             cfg.seed, "all", cfg.mode, counts), t0)
    for r in rows:
        print(f"{r['algorithm']:>9}: {r['accepted']:>6} accepted, "
              f"{r['acceptance_rate_pct']:.2f}%  nu {r['nu_range']}")
    return EXIT_OK


# ------------------------------------------------------------------ rerun

def cmd_rerun(args, argv) -> int:
    from .grid import file_sha256
    man = RunManifest.from_dict(_read_json(args.manifest, "manifest"))
    if man.network_path and man.network_sha256:
        p = Path(man.network_path)
        if not p.exists() or file_sha256(p) != man.network_sha256:
            raise InputError(f"network file {p} is missing or changed since the run")
    new_argv = _argv_without_out(man.argv) + ["--out", args.out]
    return main(new_argv)


# ------------------------------------------------------------------ parser

def _add_sampling(p):
    p.add_argument("--network", required=True, help="ktas, ieee39, a JSON path, or 'toy'")
    p.add_argument("--er-config", help="ER config JSON (defaults to the network's)")
    p.add_argument("--sampler-config", help="SamplerConfig JSON (flags override it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["static", "dynamic"], default="dynamic")
    p.add_argument("--scenario", default="sampled",
                   choices=["night", "morning", "afternoon", "evening", "sampled"])
    p.add_argument("--proposals", type=int, default=1000)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--calibrate", action="store_true", help="calibrate before sampling")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridlaa", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="replay one attack")
    p.add_argument("--network", required=True)
    p.add_argument("--attack", required=True, help="attack spec JSON, a scenario file holding one, or a bundled case name (case_a)")
    p.add_argument("--er-config")
    p.add_argument("--record-every", type=int, default=10,
                   help="store every k-th integration step in the trajectory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="draw successful attacks")
    p.add_argument("--algorithm", choices=["mc", "rwm", "skipping"], default="skipping")
    _add_sampling(p)

    p = sub.add_parser("calibrate", help="N-1 relay calibration")
    p.add_argument("--network", required=True)
    p.add_argument("--er-config")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="summary tables from a sample store")
    p.add_argument("--store", required=True)
    p.add_argument("--burn-in", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="MC vs RWM vs skipping")
    _add_sampling(p)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {"simulate": cmd_simulate, "sample": cmd_sample, "calibrate": cmd_calibrate,
            "analyze": cmd_analyze, "compare": cmd_compare, "rerun": cmd_rerun}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return COMMANDS[args.command](args, argv)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
