"""Shared fixtures: the desk-scale quadratic testbed and cached baseline runs.

The convergence statements bound expectations over the algorithm's
randomness for a fixed problem, so the testbed builds one dataset and runs
it under ten different run seeds; seed means approximate the expectation.
"""

import numpy as np
import pytest

from fedquant import analysis as an
from fedquant import federation as fed
from fedquant import models as m

TESTBED = dict(
    num_clients=20, clients_per_round=5, local_steps=5, rounds=2000,
    batch_size=5, mu=1.0, lipschitz=1.0, dimension=10, spread=1.0,
    samples_per_client=20, noise_std=0.5,
)
RUN_SEEDS = tuple(range(10))
DATA_SEED = 0


def make_testbed_config(**overrides) -> fed.FederationConfig:
    fields = dict(TESTBED)
    fields.setdefault("seed", DATA_SEED)
    fields.update(overrides)
    return fed.FederationConfig(**fields)


def tight_weight_bound(datasets, batch_size: int) -> float:
    """Largest attainable |mini-batch mean| per coordinate, over all clients.

    Quadratic locals are convex combinations of the delivered model and
    batch means, so this bounds every weight the run can visit (checked at
    runtime by the engine).
    """
    worst = 0.0
    for ds in datasets:
        ranked = np.sort(ds.features, axis=0)
        worst = max(
            worst,
            float(np.max(np.abs(ranked[:batch_size].mean(axis=0)))),
            float(np.max(np.abs(ranked[-batch_size:].mean(axis=0)))),
        )
    return worst * (1 + 1e-9)


class QuadraticTestbed:
    def __init__(self):
        cfg = make_testbed_config()
        self.model, self.datasets = fed.build_problem(cfg)
        self.optimum = m.solve_optimum(self.model, self.datasets)
        self.weight_bound = tight_weight_bound(self.datasets, TESTBED["batch_size"])
        self._gap_cache: dict = {}

    def gaps(self, **overrides) -> np.ndarray:
        """(seeds, rounds) gap trajectories for a mode, cached per mode."""
        key = tuple(sorted((k, str(v)) for k, v in overrides.items()))
        if key not in self._gap_cache:
            rows = []
            for seed in RUN_SEEDS:
                cfg = make_testbed_config(seed=seed, **overrides)
                records = fed.run_federation(cfg, self.model, self.datasets)
                rows.append([r.gap for r in records])
            self._gap_cache[key] = np.array(rows)
        return self._gap_cache[key]

    def bound_params(self) -> an.BoundParams:
        cfg = make_testbed_config()
        probes = an.pilot_probe_weights(cfg, self.model, self.datasets)
        sigma_sq, h_sq = an.estimate_noise_bounds(
            self.model, self.datasets, probes, TESTBED["batch_size"],
            seed=DATA_SEED,
        )
        return an.BoundParams(
            mu=TESTBED["mu"], lipschitz=TESTBED["lipschitz"],
            sigma_sq=sigma_sq, h_sq=h_sq,
            gamma_noniid=an.noniid_gamma(self.model, self.datasets),
            weight_bound=self.weight_bound, dim=TESTBED["dimension"],
            local_steps=TESTBED["local_steps"],
            clients_per_round=TESTBED["clients_per_round"],
            num_clients=TESTBED["num_clients"],
            w0_gap_sq=float(self.optimum.w_star @ self.optimum.w_star),
        )


@pytest.fixture(scope="session")
def quadratic_testbed() -> QuadraticTestbed:
    return QuadraticTestbed()
