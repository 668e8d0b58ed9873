import pytest

from relaymdp import (
    ModelConfig,
    backward_induction,
    build_forwarding_region,
    build_ordered_family,
    extract_thresholds,
)


@pytest.fixture(scope="session")
def default_config():
    return ModelConfig().validate()


@pytest.fixture(scope="session")
def default_grid(default_config):
    return build_forwarding_region(default_config)


@pytest.fixture(scope="session")
def default_family(default_config, default_grid):
    return build_ordered_family(default_grid, default_config)


@pytest.fixture(scope="session")
def default_tables(default_config, default_family):
    return backward_induction(default_family, default_config)


@pytest.fixture(scope="session")
def default_thresholds(default_tables):
    return extract_thresholds(default_tables)


def small_instance(n_locations, n_bins, n_relays, eta, delta, tau=0.3):
    config = ModelConfig(
        n_locations=n_locations,
        n_reward_bins=n_bins,
        n_relays=n_relays,
        eta=eta,
        delta=delta,
        tau=tau,
    ).validate()
    grid = build_forwarding_region(config)
    family = build_ordered_family(grid, config)
    return config, family
