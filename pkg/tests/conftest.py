import numpy as np
import pytest

from robsur import robust
from robsur.io import grunfeld

# start at the local S-minimum (scale 3.8124) whose MM refinement gives the
# published coefficient table; the global S-minimum has scale 3.7303
LOCAL_BETA_S = np.array([-32.51330594496, 0.03250763544545, 0.1612159274493,
                         -5.796673449294, 0.05566844960671, 0.144123335664,
                         -0.8357097721054, 0.0002471066527216, 0.6388575629532])
LOCAL_SIGMA_S = np.array([[564.9963531992, 200.2868811042, 4.704141606076],
                          [200.2868811042, 114.8610354941, 1.62452018875],
                          [4.704141606076, 1.62452018875, 0.1631022530579]])

PAPER_MLE = np.array([-42.270, 0.049, 0.122, -3.684, 0.067, 0.018, -0.716, 0.016, 0.453])
PAPER_MM = np.array([-30.661, 0.033, 0.152, -6.320, 0.059, 0.117, -0.855, 0.002, 0.614])
GRUNFELD_EQUAL = ["equal 1:Shares 2:Shares", "equal 1:Capital 2:Capital"]


@pytest.fixture(scope="session")
def gdata():
    return grunfeld()


@pytest.fixture(scope="session")
def gyears():
    return grunfeld(with_years=True)[1]


@pytest.fixture(scope="session")
def gfit(gdata):
    return robust.fit(gdata, robust.FitConfig(n_subsamples=1000, seed=0))


@pytest.fixture(scope="session")
def gfit_local(gdata):
    return robust.fit_from_start(gdata, LOCAL_BETA_S, LOCAL_SIGMA_S)


def random_sur(n=40, m=3, p_j=(2, 3, 2), seed=0, tau=0.4):
    from robsur.model import SurDataset
    rng = np.random.default_rng(seed)
    S = np.full((m, m), tau) + (1 - tau) * np.eye(m)
    E = rng.standard_normal((n, m)) @ np.linalg.cholesky(S).T
    blocks = []
    for j in range(m):
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p_j[j] - 1))])
        blocks.append((X, X @ rng.uniform(-1, 1, p_j[j]) + E[:, j]))
    return SurDataset(tuple(blocks))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
