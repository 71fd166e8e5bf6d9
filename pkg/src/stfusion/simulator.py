"""Synthetic camera networks with known identities and transit-time laws.

Each person walks a first-order Markov chain over cameras. A sighting is
emitted on arrival at every camera; the person then dwells, transits to the
next camera and is sighted again. Appearance features are a per-person latent
vector plus camera-scaled Gaussian noise.

All timing distributions are continuous laws floored to integer frames, so
the probability of an integer-edged bin equals the integral of the density
over that bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml
from scipy.special import ndtr, ndtri

from .core import TARGET_EVAL, ConfigError, Dataset, Observation
from .stpattern import BinSpec, StHistogram


@dataclass(frozen=True)
class Dist:
    """Timing law: ``constant`` (d), ``uniform`` (a, b) or ``gaussian`` (mu, sigma, truncated at 0)."""

    kind: str = "constant"
    d: float = 0.0
    a: float = 0.0
    b: float = 0.0
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if self.d < 0:
                raise ConfigError("constant time must be >= 0")
        elif self.kind == "uniform":
            if not 0 <= self.a < self.b:
                raise ConfigError(f"uniform law needs 0 <= a < b, got [{self.a}, {self.b}]")
        elif self.kind == "gaussian":
            if self.sigma <= 0:
                raise ConfigError("gaussian sigma must be > 0")
        else:
            raise ConfigError(f"unknown distribution kind {self.kind!r}")

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "constant":
            return (x >= self.d).astype(np.float64)
        if self.kind == "uniform":
            return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)
        lo = ndtr(-self.mu / self.sigma)
        raw = (ndtr((x - self.mu) / self.sigma) - lo) / (1.0 - lo)
        return np.where(x <= 0, 0.0, np.clip(raw, 0.0, 1.0))

    def pmf(self, length: int) -> np.ndarray:
        """P(floor(X) = k) for k = 0 .. length-1."""
        k = np.arange(length + 1, dtype=np.float64)
        c = self.cdf(k)
        if self.kind == "constant":
            out = np.zeros(length)
            d = int(np.floor(self.d))
            if d < length:
                out[d] = 1.0
            return out
        return np.diff(c)

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "constant":
            x = np.full(size if size is not None else (), float(self.d))
        elif self.kind == "uniform":
            x = rng.uniform(self.a, self.b, size)
        else:
            lo = ndtr(-self.mu / self.sigma)
            u = rng.uniform(lo, 1.0, size)
            x = self.mu + self.sigma * ndtri(u)
            x = np.maximum(x, 0.0)
        return np.floor(x).astype(np.int64)

    @classmethod
    def from_dict(cls, d) -> "Dist":
        if isinstance(d, (int, float)):
            return cls("constant", d=float(d))
        d = dict(d)
        kind = d.pop("kind", "constant")
        try:
            return cls(kind, **{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(f"bad distribution spec {d}: {exc}") from None

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "d": self.d}
        if self.kind == "uniform":
            return {"kind": "uniform", "a": self.a, "b": self.b}
        return {"kind": "gaussian", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    prob: float
    transit: Dist


@dataclass(frozen=True)
class SimConfig:
    """Camera network, population and appearance model.

    ``timing='independent'`` draws every sighting time uniformly in
    ``[0, start_horizon)`` regardless of the walk, which yields a world with
    no spatio-temporal signal. Successive walks of one person are offset by
    ``session_gap`` frames.
    """

    num_cameras: int
    num_persons: int
    edges: tuple
    appearance_dim: int = 16
    camera_noise_sigma: tuple = ()
    noise_profile: Optional[tuple] = None
    dwell: tuple = ()
    start_probs: Optional[tuple] = None
    walks_per_person: int = 1
    hops_per_walk: int = 1
    start_horizon: int = 5000
    session_gap: int = 1_000_000
    timing: str = "walk"
    rng_seed: int = 0
    id_prefix: str = "o"

    def __post_init__(self):
        C = self.num_cameras
        if C < 1:
            raise ConfigError("num_cameras must be >= 1")
        if self.num_persons < 0 or self.walks_per_person < 1 or self.hops_per_walk < 0:
            raise ConfigError("num_persons >= 0, walks_per_person >= 1, hops_per_walk >= 0 required")
        if self.appearance_dim < 1:
            raise ConfigError("appearance_dim must be >= 1")
        if self.start_horizon < 1:
            raise ConfigError("start_horizon must be >= 1")
        if self.timing not in ("walk", "independent"):
            raise ConfigError(f"unknown timing mode {self.timing!r}")
        if not self.camera_noise_sigma:
            object.__setattr__(self, "camera_noise_sigma", (0.0,) * C)
        if len(self.camera_noise_sigma) != C or min(self.camera_noise_sigma) < 0:
            raise ConfigError("camera_noise_sigma needs one nonnegative value per camera")
        if self.noise_profile is not None and len(self.noise_profile) != self.appearance_dim:
            raise ConfigError("noise_profile needs appearance_dim entries")
        if not self.dwell:
            object.__setattr__(self, "dwell", (Dist(),) * C)
        if len(self.dwell) != C:
            raise ConfigError("dwell needs one distribution per camera")
        seen = set()
        for e in self.edges:
            if not (0 <= e.src < C and 0 <= e.dst < C):
                raise ConfigError(f"edge {e.src}->{e.dst} references an unknown camera")
            if (e.src, e.dst) in seen:
                raise ConfigError(f"duplicate edge {e.src}->{e.dst}")
            if e.prob < 0:
                raise ConfigError("transition probabilities must be >= 0")
            seen.add((e.src, e.dst))
        P = self.transition_matrix()
        if self.hops_per_walk > 0:
            reach = self.start_vector() > 0
            for _ in range(self.hops_per_walk):
                rows = P[reach].sum(axis=1)
                if np.any(np.abs(rows - 1.0) > 1e-9):
                    bad = np.flatnonzero(reach)[np.abs(rows - 1.0) > 1e-9]
                    raise ConfigError(f"outgoing probabilities of camera(s) {bad.tolist()} do not sum to 1")
                reach = reach | ((reach.astype(float) @ P) > 0)
        sv = self.start_vector()
        if abs(sv.sum() - 1.0) > 1e-9 or np.any(sv < 0):
            raise ConfigError("start_probs must be nonnegative and sum to 1")

    def transition_matrix(self) -> np.ndarray:
        P = np.zeros((self.num_cameras, self.num_cameras))
        for e in self.edges:
            P[e.src, e.dst] = e.prob
        return P

    def start_vector(self) -> np.ndarray:
        if self.start_probs is None:
            return np.full(self.num_cameras, 1.0 / self.num_cameras)
        return np.asarray(self.start_probs, dtype=np.float64)

    def edge_map(self) -> dict:
        return {(e.src, e.dst): e for e in self.edges}

    def replace(self, **kw) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **kw)

    # -- (de)serialisation -------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        try:
            edges = tuple(
                Edge(int(e["from"]), int(e["to"]), float(e["prob"]), Dist.from_dict(e.get("transit", 0)))
                for e in d.pop("edges", ())
            )
            dwell = tuple(Dist.from_dict(x) for x in d.pop("dwell", ()))
            for key in ("camera_noise_sigma", "noise_profile", "start_probs"):
                if d.get(key) is not None:
                    d[key] = tuple(float(v) for v in d[key])
            return cls(edges=edges, dwell=dwell, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid simulator config: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "num_cameras": self.num_cameras,
            "num_persons": self.num_persons,
            "edges": [
                {"from": e.src, "to": e.dst, "prob": e.prob, "transit": e.transit.to_dict()} for e in self.edges
            ],
            "appearance_dim": self.appearance_dim,
            "camera_noise_sigma": list(self.camera_noise_sigma),
            "noise_profile": None if self.noise_profile is None else list(self.noise_profile),
            "dwell": [x.to_dict() for x in self.dwell],
            "start_probs": None if self.start_probs is None else list(self.start_probs),
            "walks_per_person": self.walks_per_person,
            "hops_per_walk": self.hops_per_walk,
            "start_horizon": self.start_horizon,
            "session_gap": self.session_gap,
            "timing": self.timing,
            "rng_seed": self.rng_seed,
            "id_prefix": self.id_prefix,
        }


def load_sim_config(path) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return SimConfig.from_dict(data.get("simulator", data))


def simulate(config: SimConfig, split: str = TARGET_EVAL) -> Dataset:
    """Draw a labeled dataset. Identical configs give identical datasets."""
    C = config.num_cameras
    D = config.appearance_dim
    P = config.transition_matrix()
    start = config.start_vector()
    edges = config.edge_map()
    sig = np.asarray(config.camera_noise_sigma, dtype=np.float64)
    profile = np.ones(D) if config.noise_profile is None else np.asarray(config.noise_profile, dtype=np.float64)

    records = []
    for person in range(config.num_persons):
        # Per-person stream: results do not depend on generation order.
        rng = np.random.default_rng([config.rng_seed, person])
        latent = rng.normal(0.0, 1.0, D)
        for w in range(config.walks_per_person):
            base = w * config.session_gap
            cam = int(rng.choice(C, p=start))
            t = base + int(rng.integers(0, config.start_horizon))
            visits = [(cam, t)]
            for _ in range(config.hops_per_walk):
                nxt = int(rng.choice(C, p=P[cam]))
                t = t + int(config.dwell[cam].sample(rng)) + int(edges[(cam, nxt)].transit.sample(rng))
                cam = nxt
                visits.append((cam, t))
            if config.timing == "independent":
                visits = [(c, base + int(rng.integers(0, config.start_horizon))) for c, _ in visits]
            for c, frame in visits:
                feats = latent + sig[c] * profile * rng.normal(0.0, 1.0, D)
                records.append((c, frame, feats, person))
    width = max(6, len(str(len(records))))
    obs = [
        Observation(f"{config.id_prefix}{k:0{width}d}", c, f, feats, person)
        for k, (c, f, feats, person) in enumerate(records)
    ]
    return Dataset(obs, C, split)


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Analytic same-person pattern, binned like a :class:`StHistogram`.

    ``joint[a, b, k]`` is the probability that a uniformly chosen ordered pair
    of distinct sightings from one walk falls at cameras (a, b) with its
    interval in bin k.
    """

    bins: BinSpec
    joint: np.ndarray = field(repr=False)

    @property
    def num_cameras(self) -> int:
        return self.joint.shape[0]

    def pair_mass(self) -> np.ndarray:
        return self.joint.sum(axis=2)

    def conditional(self, cam_i: int, cam_j: int, in_range_only: bool = False) -> np.ndarray:
        row = self.joint[cam_i, cam_j]
        if in_range_only:
            row = row[1:-1]
        s = row.sum()
        return row / s if s > 0 else np.zeros_like(row)

    def as_histogram(self, total: float = 1.0) -> StHistogram:
        return StHistogram(self.bins, self.num_cameras, self.joint * total)


def _step_kernels(config: SimConfig, length: int) -> np.ndarray:
    """K[a, b, d] = P(next camera b and elapsed d frames | sighted at a)."""
    C = config.num_cameras
    K = np.zeros((C, C, length))
    for e in config.edges:
        dwell = config.dwell[e.src].pmf(length)
        transit = e.transit.pmf(length)
        K[e.src, e.dst] = e.prob * np.convolve(dwell, transit)[:length]
    return K


def ground_truth_pattern(config: SimConfig, bins: BinSpec) -> TransitionModel:
    """Exact binned distribution of (camera pair, interval) for same-person pairs.

    Covers ordered pairs of distinct sightings within one walk, in both
    directions. Mass beyond the binned range lands in the overflow bins.
    """
    C = config.num_cameras
    H = config.hops_per_walk
    nb = bins.num_bins
    joint = np.zeros((C, C, nb))
    if H == 0:
        return TransitionModel(bins, joint)
    P = config.transition_matrix()
    pis = [config.start_vector()]
    for _ in range(H):
        pis.append(pis[-1] @ P)

    if config.timing == "independent":
        h = config.start_horizon
        d = np.arange(-(h - 1), h)
        tri = (h - np.abs(d)) / (h * h)
        interval = np.zeros(nb)
        np.add.at(interval, bins.bin_index(d), tri)
        Pk = np.eye(C)
        for k in range(1, H + 1):
            Pk = Pk @ P
            occ = sum(pis[m] for m in range(H + 1 - k))
            pair = occ[:, None] * Pk
            # Both orders of a pair share the symmetric interval law.
            joint += pair[:, :, None] * interval + pair.T[:, :, None] * interval
        return TransitionModel(bins, joint / ((H + 1) * H))

    span = max(abs(bins.delta_min), abs(bins.delta_max)) + bins.width + 1
    K1 = _step_kernels(config, span)
    fwd_idx = bins.bin_index(np.arange(span))
    rev_idx = bins.bin_index(-np.arange(span))
    hi_over = nb - 1
    Kk = K1.copy()
    Pk = P.copy()
    for k in range(1, H + 1):
        if k > 1:
            nxt = np.zeros_like(Kk)
            for a in range(C):
                for m in range(C):
                    if not Kk[a, m].any():
                        continue
                    for b in range(C):
                        if K1[m, b].any():
                            nxt[a, b] += np.convolve(Kk[a, m], K1[m, b])[:span]
            Kk = nxt
            Pk = Pk @ P
        occ = sum(pis[m] for m in range(H + 1 - k))
        for a in range(C):
            for b in range(C):
                mass = occ[a] * Kk[a, b]
                if occ[a] * Pk[a, b] == 0:
                    continue
                tail = occ[a] * Pk[a, b] - mass.sum()
                fwd = np.bincount(fwd_idx, weights=mass, minlength=nb)
                rev = np.bincount(rev_idx, weights=mass, minlength=nb)
                fwd[hi_over] += max(tail, 0.0)
                rev[0] += max(tail, 0.0)
                joint[a, b] += fwd
                joint[b, a] += rev
    return TransitionModel(bins, joint / ((H + 1) * H))


def fully_connected(num_cameras: int, transit_for, self_loops: bool = False) -> tuple:
    """Edges of a complete graph with uniform transition probabilities.

    ``transit_for(a, b)`` returns the :class:`Dist` for edge a -> b.
    """
    targets = lambda a: [b for b in range(num_cameras) if self_loops or b != a]  # noqa: E731
    edges = []
    for a in range(num_cameras):
        tg = targets(a)
        for b in tg:
            edges.append(Edge(a, b, 1.0 / len(tg), transit_for(a, b)))
    return tuple(edges)

