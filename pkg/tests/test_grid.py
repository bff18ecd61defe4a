import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from gridlaa.grid import (CapacityError, KronReductionError, Network, Scenario, apply_scenario,
                          dispatch, equilibrium_residual, file_sha256, find_equilibrium,
                          kron_reduce, load_network, network_path)

from conftest import two_bus


# -- kron_reduce -------------------------------------------------------------

def test_kron_three_bus_chain():
    B = np.array([[-1.0, 1, 0], [1, -2, 1], [0, 1, -1]])
    red = kron_reduce(B, [0, 2])
    np.testing.assert_allclose(red, [[-0.5, 0.5], [0.5, -0.5]], atol=1e-15)


def test_kron_identity_when_all_retained():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(5, 5))
    B = A + A.T
    np.testing.assert_array_equal(kron_reduce(B, range(5)), B)


def test_kron_singular_block_names_buses():
    B = np.array([[-1.0, 1, 0], [1, 0, 0], [0, 0, 0.0]])
    with pytest.raises(KronReductionError) as exc:
        kron_reduce(B, [0])
    assert list(exc.value.buses) == [1, 2]


def _laplacian(w, n):
    B = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            B[i, j] = B[j, i] = w[k]
            k += 1
    B[np.diag_indices(n)] = -B.sum(axis=1) - 0.5
    return B


@given(arrays(float, 10, elements=st.floats(0.1, 10.0)),
       st.lists(st.integers(0, 4), min_size=1, max_size=4, unique=True))
def test_kron_symmetric_and_idempotent(w, keep):
    B = _laplacian(w, 5)
    red = kron_reduce(B, keep)
    assert red.shape == (len(keep), len(keep))
    np.testing.assert_allclose(red, red.T, atol=0)
    np.testing.assert_allclose(kron_reduce(red, range(len(keep))), red, atol=0)


@given(arrays(float, 10, elements=st.floats(0.1, 10.0)))
def test_kron_matches_direct_schur(w):
    B = _laplacian(w, 5)
    keep, drop = [0, 3], [1, 2, 4]
    direct = B[np.ix_(keep, keep)] - B[np.ix_(keep, drop)] @ np.linalg.inv(
        B[np.ix_(drop, drop)]) @ B[np.ix_(drop, keep)]
    np.testing.assert_allclose(kron_reduce(B, keep), direct, rtol=1e-10, atol=1e-10)


# -- scenarios ---------------------------------------------------------------

def test_scenario_factors_and_parse():
    assert [s.factor for s in Scenario] == [0.4, 1.0, 0.85, 1.3]
    assert Scenario.parse("night") is Scenario.NIGHT
    assert Scenario.parse(4) is Scenario.EVENING
    assert Scenario.parse("2") is Scenario.MORNING


def test_apply_scenario_examples(ktas):
    base, total = ktas.load_arrays()
    np.testing.assert_array_equal(apply_scenario(ktas, Scenario.MORNING), base)
    np.testing.assert_allclose(apply_scenario(ktas, Scenario.NIGHT), 0.4 * base)


def test_apply_scenario_caps_at_total():
    net = two_bus(load=0.9)
    net.loads[0] = type(net.loads[0])(1, 1.0, 0.9, 0.5, 0.1, 1.0)
    assert apply_scenario(net, Scenario.EVENING)[0] == 1.0


@given(st.sampled_from(list(Scenario)), st.sampled_from(list(Scenario)))
def test_apply_scenario_monotone(a, b):
    ktas = load_network("ktas")
    if a.factor > b.factor:
        a, b = b, a
    assert np.all(apply_scenario(ktas, a) <= apply_scenario(ktas, b))


def test_dispatch_proportional_and_capacity(ktas):
    _, pmax, _ = ktas.generator_arrays()
    load = apply_scenario(ktas, Scenario.EVENING)
    pd = dispatch(ktas, load)
    assert math.isclose(pd.sum(), load.sum(), rel_tol=1e-12)
    np.testing.assert_allclose(pd / pmax, pd[0] / pmax[0])
    with pytest.raises(CapacityError):
        dispatch(ktas, np.full(len(load), pmax.sum()))


# -- equilibrium -------------------------------------------------------------

def test_two_bus_closed_form_angle():
    eq = find_equilibrium(two_bus(load=1.0), Scenario.MORNING)
    assert abs((eq.delta[0] - eq.delta[1]) - math.asin(1.0 / 5.0)) < 1e-10
    np.testing.assert_allclose(eq.voltage_E, 1.0, atol=1e-10)


def test_zero_load_has_no_flow():
    eq = find_equilibrium(two_bus(load=0.0), Scenario.MORNING)
    np.testing.assert_allclose(eq.delta, eq.delta[0], atol=1e-12)


@pytest.mark.parametrize("tau", list(Scenario))
def test_equilibrium_balances_load(ktas, tau):
    eq = find_equilibrium(ktas, tau)
    assert eq.residual < 1e-8
    assert math.isclose(eq.p_dispatch.sum(), eq.p_load.sum(), rel_tol=1e-12)
    B = ktas.susceptance_B
    d = eq.delta
    E = eq.voltage_E
    phi = B * np.outer(E, E) * np.sin(d[:, None] - d[None, :])
    assert abs(phi.sum()) < 1e-10


def test_ktas_equilibrium_matches_independent_root_finder(ktas):
    eq = find_equilibrium(ktas, Scenario.MORNING)
    n = ktas.n_nodes
    p_nodes = eq.node_loads(ktas)

    def f(x):
        delta = np.concatenate([[0.0], x[:n - 1]])
        r = equilibrium_residual(ktas, delta, x[n - 1:], eq.p_dispatch, p_nodes)
        return r[1:]          # the first power equation is implied (lossless)

    _, _, Ef = ktas.node_arrays()
    sol = optimize.root(f, np.concatenate([np.zeros(n - 1), Ef]), method="hybr", tol=1e-13)
    assert np.max(np.abs(f(sol.x))) < 1e-12
    np.testing.assert_allclose(sol.x[:n - 1], eq.delta[1:] - eq.delta[0], atol=1e-8)
    np.testing.assert_allclose(sol.x[n - 1:], eq.voltage_E, atol=1e-8)
    full = equilibrium_residual(ktas, eq.delta, eq.voltage_E, eq.p_dispatch, p_nodes)
    assert np.linalg.norm(full) < 1e-8


# -- data model --------------------------------------------------------------

def test_network_roundtrip_and_paths(ktas, tmp_path):
    path = tmp_path / "net.json"
    ktas.save(path)
    again = load_network(path)
    assert again.to_dict() == ktas.to_dict()
    assert network_path("ktas").name == "ktas.json"
    assert len(file_sha256(path)) == 64
    with pytest.raises(FileNotFoundError):
        network_path("no_such_grid")


def test_network_config_path_env(ktas, tmp_path, monkeypatch):
    ktas.save(tmp_path / "mine.json")
    monkeypatch.setenv("GRIDLAA_CONFIG_PATH", str(tmp_path))
    assert network_path("mine") == tmp_path / "mine.json"


def test_network_validation(ktas):
    d = ktas.to_dict()
    d["susceptance_B"][0][1] += 1.0
    with pytest.raises(ValueError, match="symmetric"):
        Network.from_dict(d)
    d = ktas.to_dict()
    del d["loads"]
    with pytest.raises(ValueError, match="missing"):
        Network.from_dict(d)


@pytest.mark.parametrize("name,n_gen,n_nodes", [("ktas", 4, 6), ("ieee39", 10, 29)])
def test_builtin_networks(name, n_gen, n_nodes):
    net = load_network(name)
    assert net.n_gen == n_gen and net.n_nodes == n_nodes
    assert net.er_config and net.er_config["calibrated"]
    assert net.interconnectors
