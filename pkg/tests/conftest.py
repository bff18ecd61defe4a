import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridlaa.grid import GeneratorParams, LoadParams, Network, load_network
from gridlaa.protection import ERConfig

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

B12 = 5.0


def two_bus(load=1.0, p_max=3.0, inertia=0.5, damping=0.1, deadband=0.015, kv=0.0):
    """One generator (node 0) feeding one load bus (node 1) over susceptance B12.

    Field voltages are chosen so both voltages sit at 1 p.u. at the loaded
    equilibrium, which makes the angle closed-form.
    """
    B = np.array([[-B12, B12], [B12, -B12]])
    d = math.asin(load / B12) if load else 0.0
    X = 0.1
    ef = 1.0 + X * B12 * (1.0 - math.cos(d))
    gen = GeneratorParams(droop_A=1.0, transient_time_S=5.0, reactance_X=X,
                          field_voltage_Ef=ef, p_max=p_max, inertia_M=inertia)
    ld = LoadParams(node=1, p_total_TL=2.0 * max(load, 0.5), p_equilibrium_base=load,
                    transient_time_S=0.5, reactance_X=X, field_voltage_Ef=ef)
    return Network("two_bus", 1, 1, B, damping, [gen], [ld], [], 10.0, deadband,
                   avr_gain_Kv=kv)


@pytest.fixture
def two_bus_net():
    return two_bus()


@pytest.fixture(scope="session")
def ktas():
    return load_network("ktas")


@pytest.fixture(scope="session")
def ieee39():
    return load_network("ieee39")


@pytest.fixture(scope="session")
def ktas_er(ktas):
    return ERConfig.from_dict(ktas.er_config)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, label = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev_status, _, cases, prev_detail = _CRITERIA.get(number, ("PASS", label, 0, ""))
    if prev_status != "PASS":
        status, detail = prev_status, prev_detail     # keep the first failure
    _CRITERIA[number] = (status, label, cases + 1, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, label, cases, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}  {label} ({cases} case{'s' * (cases > 1)})"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
