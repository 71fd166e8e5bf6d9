"""Named simulator worlds used by the CLI defaults and the acceptance suite.

Each factory returns a :class:`Scenario`: a simulator config plus the binning
and visual threshold that suit it. Seeds select independent draws of the same
world.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import InputError
from .simulator import Dist, Edge, SimConfig, fully_connected
from .stpattern import BinSpec


@dataclass(frozen=True)
class Scenario:
    name: str
    sim: SimConfig
    bins: BinSpec
    tau: float = 0.5

    def with_seed(self, seed: int, persons: Optional[int] = None) -> "Scenario":
        kw = {"rng_seed": seed}
        if persons is not None:
            kw["num_persons"] = persons
        return replace(self, sim=self.sim.replace(**kw))


def ring_edges(num_cameras: int, transit_for) -> tuple:
    """Bidirectional ring: each camera moves to either neighbour with probability 1/2."""
    edges = []
    for a in range(num_cameras):
        for b in ((a + 1) % num_cameras, (a - 1) % num_cameras):
            edges.append(Edge(a, b, 0.5, transit_for(a, b)))
    return tuple(edges)


def _ring_transit(a: int, b: int) -> Dist:
    return Dist("gaussian", mu=100.0 + 40 * a + 25 * b, sigma=15.0)


def pattern_recovery(seed: int = 0, persons: int = 10000, hops: int = 1) -> Scenario:
    """Four cameras, Gaussian transits, noiseless appearance."""
    sim = SimConfig(
        num_cameras=4, num_persons=persons, edges=ring_edges(4, _ring_transit),
        appearance_dim=16, hops_per_walk=hops, start_horizon=5000, rng_seed=seed,
    )
    return Scenario("pattern-recovery", sim, BinSpec(width=25, delta_min=-1000, delta_max=1000, eps=0.0), tau=0.99)


def noisy_classifier(seed: int = 0, persons: int = 6, walks: int = 150, noise: float = 1.0) -> Scenario:
    """Few identities seen in many separate sessions.

    Same-identity pairs make up a sizeable share of all pairs, so both error
    rates of the visual judgement are material. Cross-session pairs land in
    the overflow bins.
    """
    sim = SimConfig(
        num_cameras=4, num_persons=persons, edges=ring_edges(4, _ring_transit),
        appearance_dim=16, camera_noise_sigma=(noise,) * 4, hops_per_walk=2,
        walks_per_person=walks, start_horizon=1000, session_gap=100_000, rng_seed=seed,
    )
    return Scenario("noisy-classifier", sim, BinSpec(width=50, delta_min=-1000, delta_max=1000, eps=0.0), tau=0.55)


def _campus_edges(num_cameras: int, sigma: float = 20.0, self_loops: bool = False) -> tuple:
    # Fixed layout: the transit means do not depend on the population seed.
    mus = np.random.default_rng(7).uniform(80, 600, (num_cameras, num_cameras))
    return fully_connected(num_cameras, lambda a, b: Dist("gaussian", mu=float(mus[a, b]), sigma=sigma),
                           self_loops=self_loops)


def campus(seed: int = 0, persons: int = 400, noise: float = 0.5, nuisance: float = 2.0,
           hops: int = 2, timing: str = "walk") -> Scenario:
    """Five fully connected cameras with informative transit times.

    With ``timing='independent'`` the walk also allows staying put, so both the
    cameras and the times of a person's sightings are independent draws.
    Half of the appearance dimensions carry ``nuisance`` times more camera
    noise than the rest, which a learned embedding can discount.
    """
    C, D = 5, 16
    sim = SimConfig(
        num_cameras=C, num_persons=persons, edges=_campus_edges(C, self_loops=timing == "independent"),
        appearance_dim=D,
        camera_noise_sigma=(noise,) * C, noise_profile=tuple([1.0] * (D // 2) + [nuisance] * (D - D // 2)),
        dwell=(Dist("uniform", a=0, b=30),) * C, hops_per_walk=hops, start_horizon=20000,
        timing=timing, rng_seed=seed,
    )
    return Scenario(f"campus-{timing}", sim, BinSpec(width=40, delta_min=-2000, delta_max=2000, eps=1.0), tau=0.6)


def promotion(seed: int = 0, persons: int = 300) -> Scenario:
    """Campus world with longer walks and heavier noise, used for the promotion loop."""
    return replace(campus(seed, persons=persons, noise=0.6, hops=4), name="promotion")


def uninformative(seed: int = 0, persons: int = 1000, noise: float = 0.5) -> Scenario:
    """Campus world whose sighting cameras and times carry no identity signal.

    One interval bin spans the whole horizon, so each camera pair's cell holds
    enough judged-same pairs for the pattern ratio to sit close to one.
    """
    sc = campus(seed, persons=persons, noise=noise, timing="independent")
    bins = BinSpec(width=40000, delta_min=-20000, delta_max=20000, eps=1.0)
    return replace(sc, name="uninformative", bins=bins)


def source_domain(seed: int = 0, persons: int = 300) -> Scenario:
    """Labeled source world for supervised pre-training."""
    sc = campus(seed, persons=persons, noise=0.8, nuisance=1.0)
    return replace(sc, name="source")


SCENARIOS = {
    "pattern-recovery": pattern_recovery,
    "noisy-classifier": noisy_classifier,
    "campus": campus,
    "promotion": promotion,
    "uninformative": uninformative,
    "source": source_domain,
}


def get_scenario(name: str, seed: int = 0, **kw) -> Scenario:
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise InputError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return factory(seed, **kw)
