"""Build the shipped KTAS and IEEE 39 network files.

Both are reconstructions from the standard published datasets (Kundur
two-area system; MATPOWER case39 with the usual dynamic data), Kron-reduced
to generator and load buses, with machine constants chosen as documented in
the repository notes.  Run from the repository root:

    python3 scripts/build_networks.py [--no-calibrate]
"""

import argparse
import json
import math
import sys

import numpy as np

from gridlaa.grid import (DATA_DIR, GeneratorParams, LoadParams, Network, Scenario,
                          find_equilibrium, kron_reduce)
from gridlaa.protection import ERConfig, calibrate_n1, default_ufls_stages, write_report

OMEGA_S = 2 * math.pi * 60.0
TL_FACTOR = 2.0          # connected-load cap relative to the base load
VOLTAGE_DESIGN = Scenario.EVENING   # scenario with a flat 1 p.u. profile
KTAS_X_SCALE = 0.5
AVR_GAIN = 50.0            # proportional voltage regulation on every machine
FREQ_ZETA = 0.2             # damping ratio of the aggregate frequency mode
KTAS_PMAX = 12.0            # p.u. per machine


def full_susceptance(n_bus, branches):
    """Laplacian-form susceptance (off-diagonal 1/x, diagonal minus row sum)."""
    B = np.zeros((n_bus, n_bus))
    for i, j, x in branches:
        b = 1.0 / x
        B[i, j] += b
        B[j, i] += b
        B[i, i] -= b
        B[j, j] -= b
    return B


def flat_field_voltage(B, X, delta):
    """Ef that makes E = 1 p.u. everywhere at the given angles."""
    C = B * np.cos(delta[:, None] - delta[None, :])
    return 1.0 - X * C.sum(axis=1)


def flat_voltage_angles(net, B, scenario=None):
    from gridlaa.grid import apply_scenario, dispatch
    from scipy.optimize import fsolve
    p_load = apply_scenario(net, scenario or VOLTAGE_DESIGN)
    p = np.zeros(net.n_nodes)
    np.add.at(p, net.load_nodes, -p_load)
    p[:net.n_gen] += dispatch(net, p_load)

    def f(x):
        d = np.concatenate([[0.0], x])
        return (B * np.sin(d[:, None] - d[None, :])).sum(axis=1)[1:] - p[1:]

    x, info, ok, msg = fsolve(f, np.zeros(net.n_nodes - 1), full_output=True, xtol=1e-13)
    if np.max(np.abs(f(x))) > 1e-10:
        raise RuntimeError(f"flat-voltage power flow failed: {msg}")
    return np.concatenate([[0.0], x])


def frequency_tuning(n_nodes, M_sys, pmax, omega_n, zeta):
    """Droop gains and damping giving the aggregate mode (omega_n, zeta)."""
    nM = n_nodes * M_sys
    A_total = omega_n ** 2 * nM
    D = 2 * zeta * math.sqrt(nM * A_total) / n_nodes
    return A_total * pmax / pmax.sum(), D


def assemble(name, B, gen_rows, load_rows, interconnectors, node_names, areas,
             deadband_hz, Pphi, omega_n, zeta, notes, gen_coupling=12.0):
    """gen_rows: (S, X, pmax, M); load_rows: (node, base, S, X) with S=None for co-located."""
    n_gen = len(gen_rows)
    n = B.shape[0]
    diag = np.abs(np.diag(B))
    pmax = np.array([g[2] for g in gen_rows])
    M = np.array([g[3] for g in gen_rows])
    A, D = frequency_tuning(n, M.sum(), pmax, omega_n, zeta)
    X = np.zeros(n)
    S = np.zeros(n)
    for i, (s, x, _, _) in enumerate(gen_rows):
        S[i], X[i] = s, x
        # floor on X_i |B_ii|: a tripped machine then leaves a nearly passive
        # bus instead of a voltage sink
        X[i] = max(x, gen_coupling / diag[i])
    for node, _, s, x in load_rows:
        if node >= n_gen:
            S[node], X[node] = s, x
    # provisional network to get the Morning angles for the field voltages
    Ef = np.ones(n)

    def build(Ef):
        gens = [GeneratorParams(float(A[i]), float(S[i]), float(X[i]), float(Ef[i]),
                                float(pmax[i]), float(M[i]), 0.0) for i in range(n_gen)]
        loads = []
        for node, base, _, _ in load_rows:
            extra = {}
            if node >= n_gen:
                extra = dict(transient_time_S=float(S[node]), reactance_X=float(X[node]),
                             field_voltage_Ef=float(Ef[node]))
            loads.append(LoadParams(int(node), float(TL_FACTOR * base), float(base), **extra))
        return Network(name=name, n_gen=n_gen, n_load=n - n_gen, susceptance_B=B,
                       damping_D=float(D), generators=gens, loads=loads,
                       interconnectors=interconnectors, line_threshold_Pphi=Pphi,
                       governor_deadband_W=deadband_hz, node_names=node_names,
                       areas=areas, avr_gain_Kv=AVR_GAIN, notes=notes)

    # angles at flat 1 p.u. voltage (design scenario), then the field voltages that hold it
    delta = flat_voltage_angles(build(Ef), B)
    net = build(flat_field_voltage(B, X, delta))
    eq = find_equilibrium(net, Scenario.MORNING)
    disp = eq.p_dispatch
    gens = [GeneratorParams(g.droop_A, g.transient_time_S, g.reactance_X, g.field_voltage_Ef,
                            g.p_max, g.inertia_M, float(disp[i]))
            for i, g in enumerate(net.generators)]
    net.generators = gens
    return net


# ---------------------------------------------------------------- KTAS

def build_ktas():
    # Kundur two-area system on 100 MVA; buses 1..11 -> 0..10
    x_tf = 0.15 / 9.0
    tie = 0.05            # strengthened 7-8-9 corridor (total reactance)
    br = [(1, 5, x_tf), (2, 6, x_tf), (3, 11, x_tf), (4, 10, x_tf),
          (5, 6, 0.025), (6, 7, 0.010), (7, 8, tie / 2), (8, 9, tie / 2),
          (9, 10, 0.010), (10, 11, 0.025)]
    br = [(i - 1, j - 1, x * KTAS_X_SCALE) for i, j, x in br]
    Bf = full_susceptance(11, br)
    keep = [0, 1, 2, 3, 6, 8]
    B = kron_reduce(Bf, keep)
    M = [2 * h * 9.0 / OMEGA_S for h in (6.5, 6.5, 6.175, 6.175)]
    x_gen = (1.8 - 0.3) / 9.0
    gens = [(8.0, x_gen, KTAS_PMAX, m) for m in M]
    loads = [(4, 9.67, 0.5, 0.05), (5, 17.67, 0.5, 0.05)]
    names = ["G1", "G2", "G3", "G4", "B7", "B9"]
    areas = [1, 1, 2, 2, 1, 2]
    return assemble("ktas", B, gens, loads, [(4, 5)], names, areas,
                    deadband_hz=0.015, Pphi=1e3, omega_n=0.5, zeta=FREQ_ZETA,
                    notes="Kron-reduced Kundur two-area system (reconstruction).")


# ------------------------------------------------------------- IEEE 39

CASE39_BRANCHES = [
    (1, 2, 0.0411), (1, 39, 0.0250), (2, 3, 0.0151), (2, 25, 0.0086), (2, 30, 0.0181),
    (3, 4, 0.0213), (3, 18, 0.0133), (4, 5, 0.0128), (4, 14, 0.0129), (5, 6, 0.0026),
    (5, 8, 0.0112), (6, 7, 0.0092), (6, 11, 0.0082), (6, 31, 0.0250), (7, 8, 0.0046),
    (8, 9, 0.0363), (9, 39, 0.0250), (10, 11, 0.0043), (10, 13, 0.0043), (10, 32, 0.0200),
    (12, 11, 0.0435), (12, 13, 0.0435), (13, 14, 0.0101), (14, 15, 0.0217), (15, 16, 0.0094),
    (16, 17, 0.0089), (16, 19, 0.0195), (16, 21, 0.0135), (16, 24, 0.0059), (17, 18, 0.0082),
    (17, 27, 0.0173), (19, 20, 0.0138), (19, 33, 0.0142), (20, 34, 0.0180), (21, 22, 0.0140),
    (22, 23, 0.0096), (22, 35, 0.0143), (23, 24, 0.0350), (23, 36, 0.0272), (25, 26, 0.0323),
    (25, 37, 0.0232), (26, 27, 0.0147), (26, 28, 0.0474), (26, 29, 0.0625), (28, 29, 0.0151),
    (29, 38, 0.0156),
]
CASE39_LOADS = {3: 322.0, 4: 500.0, 7: 233.8, 8: 522.0, 12: 7.5, 15: 320.0, 16: 329.0,
                18: 158.0, 20: 628.0, 21: 274.0, 23: 247.5, 24: 308.6, 25: 224.0, 26: 139.0,
                27: 281.0, 28: 206.0, 29: 283.5, 31: 9.2, 39: 1104.0}
# bus: (Pmax MW, H s on 100 MVA, xd, x'd, T'd0)
CASE39_GENS = {
    30: (1040, 42.0, 0.100, 0.031, 10.2), 31: (646, 30.3, 0.295, 0.0697, 6.56),
    32: (725, 35.8, 0.2495, 0.0531, 5.7), 33: (652, 28.6, 0.262, 0.0436, 5.69),
    34: (508, 26.0, 0.670, 0.132, 5.4), 35: (687, 34.8, 0.254, 0.050, 7.3),
    36: (580, 26.4, 0.295, 0.049, 5.66), 37: (564, 24.3, 0.290, 0.057, 6.7),
    38: (865, 34.5, 0.2106, 0.057, 4.79), 39: (1100, 500.0, 0.020, 0.006, 7.0),
}
PMAX_SCALE = 1.35
# loads at generator terminals move one branch out so that a tripped machine
# does not take its bus voltage support with it
LOAD_RELOCATION = {39: 9, 31: 6}
AREA_A = {30, 37, 38, 3, 18, 25, 26, 27, 28, 29}
AREA_B = {31, 32, 39, 4, 7, 8, 12}


def build_ieee39():
    br = [(i - 1, j - 1, x) for i, j, x in CASE39_BRANCHES]
    Bf = full_susceptance(39, br)
    gen_buses = sorted(CASE39_GENS)
    bus_load = {}
    for b, p in CASE39_LOADS.items():
        b = LOAD_RELOCATION.get(b, b)
        bus_load[b] = bus_load.get(b, 0.0) + p
    load_buses = sorted(bus_load)
    buses = gen_buses + load_buses
    B = kron_reduce(Bf, [b - 1 for b in buses])
    node_of = {b: k for k, b in enumerate(buses)}
    gens = []
    for b in gen_buses:
        pmax, H, xd, xdp, td0 = CASE39_GENS[b]
        gens.append((td0, xd - xdp, PMAX_SCALE * pmax / 100.0, 2 * H / OMEGA_S))
    loads = [(node_of[b], bus_load[b] / 100.0, 0.5, 0.05) for b in load_buses]
    areas = [1 if b in AREA_A else 2 if b in AREA_B else 3 for b in buses]
    # interconnectors: strongest reduced couplings between different areas
    cand = []
    for i in range(len(buses)):
        for j in range(i + 1, len(buses)):
            if areas[i] != areas[j] and B[i, j] > 0:
                cand.append((B[i, j], i, j))
    cand.sort(reverse=True)
    ic = [(i, j) for _, i, j in cand[:4]]
    names = [f"bus{b}" for b in buses]
    return assemble("ieee39", B, gens, loads, ic, names, areas,
                    deadband_hz=0.015, Pphi=1e3, omega_n=0.5, zeta=FREQ_ZETA,
                    notes="Kron-reduced IEEE 39-bus system (reconstruction).",
                    gen_coupling=25.0)


def base_er(network, rocof=2 * math.pi * 1.5, of_hz=1.0, line_factor=1.5):
    """Starting relay settings before N-1 calibration."""
    worst = 0.0
    for tau in Scenario:
        eq = find_equilibrium(network, tau)
        for i, j in network.interconnectors:
            B = network.susceptance_B
            f = abs(B[i, j] * eq.voltage_E[i] * eq.voltage_E[j] * math.sin(eq.delta[i] - eq.delta[j]))
            worst = max(worst, f)
    return ERConfig(rocof_threshold=rocof, overfreq_threshold=2 * math.pi * of_hz,
                    ufls_thresholds_FU=default_ufls_stages(network.f_nominal),
                    line_threshold_Pphi=line_factor * worst)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--no-calibrate", action="store_true")
    ap.add_argument("--only", choices=["ktas", "ieee39"])
    args = ap.parse_args(argv)
    builders = {"ktas": build_ktas, "ieee39": build_ieee39}
    for name, fn in builders.items():
        if args.only and name != args.only:
            continue
        net = fn()
        er = base_er(net)
        net.line_threshold_Pphi = er.line_threshold_Pphi
        if not args.no_calibrate:
            er, report = calibrate_n1(net, er)
            write_report(report, DATA_DIR / f"{name}_calibration.json")
        net.er_config = er.to_dict()
        net.save(DATA_DIR / f"{name}.json")
        print(name, json.dumps(er.to_dict()))


if __name__ == "__main__":
    sys.exit(main())
