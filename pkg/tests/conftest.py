import numpy as np
import pytest
from hypothesis import settings

# Deterministic property-test runs: the acceptance gate should not depend on
# fresh random exploration at release time.
settings.register_profile("repeatable", derandomize=True, deadline=None)
settings.load_profile("repeatable")

from dcflow.crystal import make_crystal, make_lattice, make_site
from dcflow.selftest import tiny_disordered_crystal


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_crystal():
    """Four sites, five-element vocabulary, one PD site."""
    return tiny_disordered_crystal()


@pytest.fixture
def nacl():
    """Rock-salt conventional two-site cell."""
    lattice = make_lattice(5.64, 5.64, 5.64, 90, 90, 90)
    na = np.zeros(100)
    na[10] = 1.0  # Z=11
    cl = np.zeros(100)
    cl[16] = 1.0  # Z=17
    sites = [make_site(na, [(0, 0, 0), (0, 0, 0)], [1.0, 0.0]),
             make_site(cl, [(0.5, 0.5, 0.5), (0, 0, 0)], [1.0, 0.0])]
    return make_crystal(lattice, sites)
