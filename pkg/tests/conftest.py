"""Shared fixtures: one small synthetic world, ingested once per session."""
import numpy as np
import pytest

from agemig import synth
from agemig import io as agio
from agemig.nmr_model import McmcConfig


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    spec = synth.SynthSpec(seed=11, n_countries=8, n_age_groups=21,
                           first_year=1980, last_year=2020, vitals_through=2080)
    world = synth.generate_world(spec)
    outdir = tmp_path_factory.mktemp("world11")
    paths = world.emit(outdir)
    return world, paths


@pytest.fixture(scope="session")
def small_dataset(small_world):
    _, paths = small_world
    return agio.ingest(paths)


@pytest.fixture(scope="session")
def quick_mcmc():
    return McmcConfig(seed=404, chains=2, iterations=600, burn_in=300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
