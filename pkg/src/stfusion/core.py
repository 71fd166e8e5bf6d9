"""Shared domain types: observations, datasets, pair intervals, errors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

SOURCE_LABELED = "source-labeled"
TARGET_UNLABELED = "target-unlabeled"
TARGET_EVAL = "target-eval"
SPLITS = (SOURCE_LABELED, TARGET_UNLABELED, TARGET_EVAL)

OBS_MAGIC = "#stfusion-observations"
OBS_VERSION = 1


class StFusionError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(StFusionError, ValueError):
    exit_code = 1


class ConfigError(StFusionError, ValueError):
    exit_code = 1


class DomainError(StFusionError, ValueError):
    """Numeric precondition violated (e.g. error rates summing to >= 1)."""

    exit_code = 2


class InvariantError(StFusionError, AssertionError):
    exit_code = 3


class LabelAccessError(StFusionError):
    """A label was requested on an observation whose labels are gated."""

    exit_code = 3


@dataclass(frozen=True, eq=False)
class Observation:
    """One sighting of a pedestrian.

    The identity label is stored privately and exposed through :attr:`label`,
    which raises :class:`LabelAccessError` when the observation belongs to a
    target-unlabeled dataset.
    """

    obs_id: str
    camera: int
    frame: int
    features: np.ndarray
    _label: Optional[int] = field(default=None, repr=False)
    _locked: bool = field(default=False, repr=False)

    @property
    def label(self) -> Optional[int]:
        if self._locked:
            raise LabelAccessError(
                f"label of {self.obs_id!r} requested on a target-unlabeled dataset"
            )
        return self._label

    @property
    def has_label(self) -> bool:
        # Presence is not secret; the value is.
        return self._label is not None

    def locked(self, flag: bool = True) -> "Observation":
        return Observation(self.obs_id, self.camera, self.frame, self.features, self._label, flag)


class PairInterval(NamedTuple):
    cam_i: int
    cam_j: int
    delta: int


def pair_interval(obs_i: Observation, obs_j: Observation) -> PairInterval:
    """Camera pair and signed frame interval ``t_j - t_i``."""
    return PairInterval(obs_i.camera, obs_j.camera, obs_j.frame - obs_i.frame)


class Dataset:
    """Immutable collection of observations sharing one feature dimension.

    Columnar views (``features``, ``cameras``, ``frames``, ``obs_ids``) are
    precomputed for vectorised consumers. Labels are only reachable through
    :meth:`labels`, which refuses on the target-unlabeled split.
    """

    def __init__(
        self,
        observations: Iterable[Observation],
        num_cameras: int,
        split: str = TARGET_EVAL,
    ) -> None:
        if split not in SPLITS:
            raise InputError(f"unknown split {split!r}; expected one of {SPLITS}")
        locked = split == TARGET_UNLABELED
        obs = tuple(o.locked(locked) for o in observations)
        self.num_cameras = int(num_cameras)
        self.split = split
        self.observations = obs
        ids = [o.obs_id for o in obs]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate obs_id in dataset")
        dims = {int(np.asarray(o.features).shape[0]) for o in obs}
        if len(dims) > 1:
            raise InputError(f"inconsistent feature dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        for o in obs:
            if o.frame < 0:
                raise InputError(f"{o.obs_id}: negative frame {o.frame}")
            if not 0 <= o.camera < self.num_cameras:
                raise InputError(f"{o.obs_id}: camera {o.camera} outside [0, {self.num_cameras})")
        if obs:
            feats = np.stack([np.asarray(o.features, dtype=np.float64) for o in obs])
            if not np.all(np.isfinite(feats)):
                raise InputError("non-finite feature values")
        else:
            feats = np.zeros((0, 0))
        feats.setflags(write=False)
        self.features = feats
        self.cameras = np.array([o.camera for o in obs], dtype=np.int64)
        self.frames = np.array([o.frame for o in obs], dtype=np.int64)
        self.obs_ids = np.array(ids, dtype=object)
        # Position of each obs_id in ascending id order; used for tie-breaks.
        order = sorted(range(len(ids)), key=ids.__getitem__)
        id_rank = np.empty(len(ids), dtype=np.int64)
        id_rank[order] = np.arange(len(ids))
        self.id_rank = id_rank
        self._index = {oid: i for i, oid in enumerate(ids)}
        for arr in (self.cameras, self.frames, self.id_rank):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations)

    def __getitem__(self, i: int) -> Observation:
        return self.observations[i]

    def index_of(self, obs_id: str) -> int:
        try:
            return self._index[obs_id]
        except KeyError:
            raise InputError(f"unknown obs_id {obs_id!r}") from None

    def labels(self) -> np.ndarray:
        """Identity labels as an int array (-1 where absent)."""
        if self.split == TARGET_UNLABELED:
            raise LabelAccessError("labels requested on a target-unlabeled dataset")
        return np.array([-1 if o._label is None else o._label for o in self.observations], dtype=np.int64)

    def with_split(self, split: str) -> "Dataset":
        """Same observations under a different access role."""
        return Dataset(self.observations, self.num_cameras, split)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.observations[i] for i in indices], self.num_cameras, self.split)


# -- observation file format ------------------------------------------------
#
#   #stfusion-observations v1 dim=<D> num_cameras=<C> split=<split>
#   <obs_id>\t<camera>\t<frame>\t<f_1>\t...\t<f_D>[\t<label>]
#
# Floats are written with repr() so a write/read cycle is bit-exact.


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_observations(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(
            f"{OBS_MAGIC} v{OBS_VERSION} dim={dataset.dim} "
            f"num_cameras={dataset.num_cameras} split={dataset.split}\n"
        )
        for o in dataset.observations:
            fields = [o.obs_id, str(o.camera), str(o.frame)]
            fields.extend(_fmt_float(v) for v in np.asarray(o.features, dtype=np.float64))
            if o._label is not None:
                fields.append(str(o._label))
            fh.write("\t".join(fields) + "\n")


def _parse_header(line: str, magic: str) -> dict[str, str]:
    parts = line.strip().split()
    if not parts or parts[0] != magic:
        raise InputError(f"missing {magic} header")
    out = {"version": parts[1].lstrip("v") if len(parts) > 1 else ""}
    for tok in parts[2:]:
        key, _, value = tok.partition("=")
        out[key] = value
    return out


def read_observations(path: str | Path, split: Optional[str] = None) -> Dataset:
    """Load an observation file; ``split`` overrides the recorded role."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = _parse_header(fh.readline(), OBS_MAGIC)
        if header["version"] != str(OBS_VERSION):
            raise InputError(f"{path}: unsupported observation file version {header['version']!r}")
        try:
            dim = int(header["dim"])
            num_cameras = int(header["num_cameras"])
        except (KeyError, ValueError):
            raise InputError(f"{path}: header lacks dim/num_cameras") from None
        obs = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            if len(f) not in (dim + 3, dim + 4):
                raise InputError(f"{path}:{lineno}: expected {dim + 3} or {dim + 4} fields, got {len(f)}")
            try:
                feats = np.array([float(v) for v in f[3 : 3 + dim]], dtype=np.float64)
                label = int(f[3 + dim]) if len(f) == dim + 4 else None
                obs.append(Observation(f[0], int(f[1]), int(f[2]), feats, label))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return Dataset(obs, num_cameras, split or header.get("split", TARGET_EVAL))


def logistic(x):
    """Numerically stable logistic function for scalars or arrays."""
    if np.isscalar(x):
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        z = math.exp(x)
        return z / (1.0 + z)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def softplus(x):
    """log(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)
