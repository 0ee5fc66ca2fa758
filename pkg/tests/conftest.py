import os

import numpy as np
import pytest

from lodnls.mesh import build_structured_mesh, refine
from lodnls.lod import BilinearFormSpec, build_lod_basis
from lodnls.problems import configure_example
from lodnls.experiments import sigma_for


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cache")
    os.environ["LODNLS_CACHE"] = str(d)
    return d


@pytest.fixture(scope="session")
def small_pair():
    """4x4 coarse mesh refined by 4, plain Laplace corrector form."""
    rm = refine(build_structured_mesh(4), 4)
    return rm, BilinearFormSpec(None, None, 1.0, rm)


@pytest.fixture(scope="session")
def small_basis(small_pair):
    rm, form = small_pair
    return build_lod_basis(rm, form, layers=8)


@pytest.fixture(scope="session")
def ex1():
    return configure_example(1)


def build_example_basis(problem, n_side, factor, layers, threads=1):
    rm = refine(build_structured_mesh(n_side), factor)
    form = BilinearFormSpec(problem.b, problem.V, sigma_for(problem.V), rm)
    return rm, form, build_lod_basis(rm, form, layers, threads=threads)


def rng(seed=0):
    return np.random.default_rng(seed)
