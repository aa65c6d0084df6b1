import numpy as np
import pytest

from bodyfit.bodymodel import BodyParams, make_toy_model


def random_params(assets, seed, theta_scale=0.1, coeff_scale=0.5, trans_scale=0.1):
    """Seeded parameter draw inside the fitting oracle's perturbation box."""
    rng = np.random.default_rng(seed)
    return BodyParams(
        beta=rng.uniform(-coeff_scale, coeff_scale, assets.num_shape),
        theta=rng.uniform(-theta_scale, theta_scale, (assets.num_joints, 3)),
        psi=rng.uniform(-coeff_scale, coeff_scale, assets.num_expr),
        trans=rng.uniform(-trans_scale, trans_scale, 3),
    )


@pytest.fixture(scope="session")
def toy():
    # small and fast; used by most unit tests
    return make_toy_model(120, 6, 0)


@pytest.fixture(scope="session")
def toy_round():
    # the round-trip fitting oracle's size
    return make_toy_model(500, 12, 0)


@pytest.fixture(scope="session")
def toy_big():
    # large enough for every landmark allocation in the ablation grid
    return make_toy_model(2400, 12, 1)
