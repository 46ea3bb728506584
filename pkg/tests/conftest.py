"""Shared fixtures for the heavy end-to-end setups used by the acceptance
suite.  Session-scoped so the expensive trainings run once."""

import pytest

from momentprop import experiments as ex


@pytest.fixture(scope="session")
def toy_bundle():
    """Desk-scale 1-D benchmark: 3x256 net, drop rate 0.3, 2000 epochs."""
    model, data, report = ex.train_toy_model(
        n=1536, hidden=(256, 256, 256), dropout_rate=0.3,
        epochs=2000, batch_size=128, seed=0, data_seed=1,
    )
    return model, data, report


@pytest.fixture(scope="session")
def ood_setup():
    """Held-out-class image benchmark, five independently seeded trainings."""
    return ex.build_ood_setup(
        seeds=(0, 1, 2, 3, 4),
        ensemble_size=1,
        n_per_class=300,
        epochs=30,
        split_fractions=(0.5, 0.125, 0.375),
        conv_channels=(8, 16),
        dense_units=(64,),
    )
