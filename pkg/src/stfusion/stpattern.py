"""Spatio-temporal pattern histograms learned from classifier-judged pairs.

A histogram holds, for every ordered camera pair, counts over signed frame
intervals ``t_j - t_i``. Bin 0 collects intervals below the binned range and
the last bin collects intervals at or above it.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    DomainError,
    InputError,
    InvariantError,
    PairInterval,
)

HIST_MAGIC = "#stfusion-histogram"
HIST_VERSION = 1


@dataclass(frozen=True)
class BinSpec:
    """Binning of signed intervals.

    In-range bins cover ``[delta_min, delta_max)`` in steps of ``width``
    (the last one may extend past ``delta_max``). ``window`` is the lookup
    half-width in frames and ``eps`` the pseudocount added per bin at lookup.
    """

    width: int = 10
    delta_min: int = -1000
    delta_max: int = 1000
    window: int = 0
    eps: float = 1.0

    def __post_init__(self):
        if self.width < 1:
            raise InputError(f"bin width must be >= 1, got {self.width}")
        if not self.delta_min < self.delta_max:
            raise InputError("delta_min must be < delta_max")
        if self.window < 0:
            raise InputError("window must be >= 0")
        if self.eps < 0:
            raise InputError("eps must be >= 0")

    @property
    def num_range_bins(self) -> int:
        return -(-(self.delta_max - self.delta_min) // self.width)

    @property
    def num_bins(self) -> int:
        """Bins per camera pair, including the two overflow bins."""
        return self.num_range_bins + 2

    def bin_index(self, delta):
        """Bin index for scalar or array ``delta`` (0 and -1 are overflow)."""
        d = np.asarray(delta, dtype=np.int64)
        k = np.floor_divide(d - self.delta_min, self.width) + 1
        k = np.where(d < self.delta_min, 0, k)
        k = np.minimum(k, self.num_bins - 1)
        return int(k) if np.ndim(k) == 0 else k

    def bin_edges(self) -> np.ndarray:
        """Edges of the in-range bins (length ``num_range_bins + 1``)."""
        return self.delta_min + self.width * np.arange(self.num_range_bins + 1)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "delta_min": self.delta_min,
            "delta_max": self.delta_max,
            "window": self.window,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinSpec":
        return cls(
            width=int(d["width"]),
            delta_min=int(d["delta_min"]),
            delta_max=int(d["delta_max"]),
            window=int(d.get("window", 0)),
            eps=float(d.get("eps", 1.0)),
        )


@dataclass(frozen=True, eq=False)
class StHistogram:
    """Counts over (camera_i, camera_j, interval bin).

    ``counts`` has shape ``(num_cameras, num_cameras, bins.num_bins)``. Counts
    are stored without smoothing; the pseudocount is applied by
    :func:`lookup` and :meth:`probabilities`.
    """

    bins: BinSpec
    num_cameras: int
    counts: np.ndarray
    _cumsum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.float64)
        expected = (self.num_cameras, self.num_cameras, self.bins.num_bins)
        if c.shape != expected:
            raise InputError(f"histogram counts shape {c.shape}, expected {expected}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvariantError("histogram counts must be finite and nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)
        cs = np.concatenate([np.zeros(expected[:2] + (1,)), np.cumsum(c, axis=2)], axis=2)
        object.__setattr__(self, "_cumsum", cs)

    @classmethod
    def empty(cls, bins: BinSpec, num_cameras: int) -> "StHistogram":
        return cls(bins, num_cameras, np.zeros((num_cameras, num_cameras, bins.num_bins)))

    @property
    def total(self) -> float:
        """N, the number of pairs counted."""
        return float(self.counts.sum())

    @property
    def total_bins(self) -> int:
        return self.num_cameras * self.num_cameras * self.bins.num_bins

    def probabilities(self, eps: Optional[float] = None) -> np.ndarray:
        """Joint distribution over the full pair x bin space."""
        eps = self.bins.eps if eps is None else eps
        denom = self.total + eps * self.total_bins
        if denom == 0:
            return np.zeros_like(self.counts)
        return (self.counts + eps) / denom

    def pair_distribution(self, cam_i: int, cam_j: int, in_range_only: bool = False) -> np.ndarray:
        """Unsmoothed interval distribution conditional on the camera pair."""
        row = self.counts[cam_i, cam_j]
        if in_range_only:
            row = row[1:-1]
        s = row.sum()
        return row / s if s > 0 else np.zeros_like(row)

    def window_counts(self, cam_i, cam_j, delta, window: Optional[int] = None):
        """Summed counts and number of bins touched by ``[delta-t, delta+t]``."""
        t = self.bins.window if window is None else window
        lo = self.bins.bin_index(np.asarray(delta) - t)
        hi = self.bins.bin_index(np.asarray(delta) + t)
        cs = self._cumsum
        counts = cs[cam_i, cam_j, hi + 1] - cs[cam_i, cam_j, lo]
        return counts, hi - lo + 1

    def with_counts(self, counts: np.ndarray) -> "StHistogram":
        return StHistogram(self.bins, self.num_cameras, counts)

    def equals(self, other: "StHistogram") -> bool:
        return (
            self.bins == other.bins
            and self.num_cameras == other.num_cameras
            and np.array_equal(self.counts, other.counts)
        )


def lookup_many(hist: StHistogram, cam_i, cam_j, delta, eps: Optional[float] = None,
                window: Optional[int] = None) -> np.ndarray:
    """Vectorised :func:`lookup`."""
    eps = hist.bins.eps if eps is None else eps
    counts, covered = hist.window_counts(cam_i, cam_j, delta, window)
    denom = hist.total + eps * hist.total_bins
    if denom == 0:
        return np.zeros(np.shape(counts))
    return (counts + eps * covered) / denom


def lookup(hist: StHistogram, pi: PairInterval, eps: Optional[float] = None,
           window: Optional[int] = None) -> float:
    """Smoothed probability mass of the window around ``pi.delta`` for the pair."""
    return float(lookup_many(hist, pi.cam_i, pi.cam_j, pi.delta, eps, window))


# -- counting -----------------------------------------------------------------


def _pair_from_flat(k: np.ndarray, n: int):
    """Map flat ordered-pair indices in ``[0, n(n-1))`` to (i, j), i != j."""
    i = k // (n - 1)
    r = k % (n - 1)
    j = r + (r >= i)
    return i, j


def count_patterns(model, dataset, bins: BinSpec, pair_budget: Optional[int] = None,
                   seed: int = 0, workers: int = 1, block: int = 512):
    """Count judged-same, judged-different and all sampled ordered pairs.

    Pairs are judged with the visual classifier (cosine > tau). With no
    budget, or a budget covering every ordered pair, all ``n(n-1)`` pairs are
    counted; otherwise ``pair_budget`` pairs are drawn uniformly without
    replacement using ``seed``. Returns ``(hist_pos, hist_neg, hist_marginal)``.
    """
    from .embedder import embed_matrix

    n = len(dataset)
    if n == 0:
        raise InputError("count_patterns needs a nonempty dataset")
    C = dataset.num_cameras
    nb = bins.num_bins
    size = C * C * nb
    total_pairs = n * (n - 1)
    if pair_budget is not None and pair_budget < 0:
        raise InputError("pair_budget must be nonnegative")

    emb = embed_matrix(model, dataset.features)
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = emb / safe[:, None]
    zero = norms == 0
    cams = np.asarray(dataset.cameras)
    frames = np.asarray(dataset.frames)
    tau = model.tau

    def tally(i, j):
        score = np.einsum("ij,ij->i", unit[i], unit[j])
        score = np.clip(score, 0.0, 1.0)
        score[zero[i] | zero[j]] = 0.0
        same = score > tau
        flat = (cams[i] * C + cams[j]) * nb + bins.bin_index(frames[j] - frames[i])
        pos = np.bincount(flat[same], minlength=size)
        allc = np.bincount(flat, minlength=size)
        return pos, allc

    def tally_rows(lo, hi):
        rows = np.arange(lo, hi)
        score = unit[lo:hi] @ unit.T
        np.clip(score, 0.0, 1.0, out=score)
        score[zero[lo:hi], :] = 0.0
        score[:, zero] = 0.0
        same = score > tau
        same[np.arange(hi - lo), rows] = False
        flat = (cams[lo:hi, None] * C + cams[None, :]) * nb + bins.bin_index(
            frames[None, :] - frames[lo:hi, None])
        offdiag = np.ones_like(same)
        offdiag[np.arange(hi - lo), rows] = False
        pos = np.bincount(flat[same], minlength=size)
        allc = np.bincount(flat[offdiag], minlength=size)
        return pos, allc

    if total_pairs == 0:
        pos = np.zeros(size)
        allc = np.zeros(size)
    elif pair_budget is None or pair_budget >= total_pairs:
        chunks = [(lo, min(lo + block, n)) for lo in range(0, n, block)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(lambda c: tally_rows(*c), chunks))
        else:
            parts = [tally_rows(*c) for c in chunks]
        # Integer partial sums: merge order does not affect the result.
        pos = sum(p for p, _ in parts)
        allc = sum(a for _, a in parts)
    else:
        rng = np.random.default_rng([seed, 0x5791])
        k = rng.choice(total_pairs, size=pair_budget, replace=False)
        k.sort()
        i, j = _pair_from_flat(k, n)
        pos, allc = tally(i, j)

    shape = (C, C, nb)
    pos = pos.reshape(shape).astype(np.float64)
    allc = allc.reshape(shape).astype(np.float64)
    neg = allc - pos
    return (
        StHistogram(bins, C, pos),
        StHistogram(bins, C, neg),
        StHistogram(bins, C, allc),
    )


# -- error correction ----------------------------------------------------------


def corrected_values(p_pos, p_neg, ep: float, en: float):
    """Raw error-corrected estimate of the same-identity pattern, per bin.

    ``((1 - En) p_pos - Ep p_neg) / (1 - En - Ep)``; may be negative.
    """
    if not (0.0 <= ep <= 1.0 and 0.0 <= en <= 1.0):
        raise DomainError(f"error rates must lie in [0, 1], got Ep={ep}, En={en}")
    if ep + en >= 1.0:
        raise DomainError(f"Ep + En = {ep + en} >= 1: correction undefined")
    return ((1.0 - en) * np.asarray(p_pos) - ep * np.asarray(p_neg)) / (1.0 - en - ep)


def correct_pattern(hist_pos: StHistogram, hist_neg: StHistogram, ep: float, en: float) -> StHistogram:
    """Remove classifier error from the judged-same histogram.

    Negative bins are floored at zero and the result is rescaled so its total
    equals ``hist_pos.total``, which keeps lookups on the same evidence scale.
    """
    if hist_pos.bins != hist_neg.bins or hist_pos.num_cameras != hist_neg.num_cameras:
        raise InputError("histograms must share bins and camera count")
    values = corrected_values(hist_pos.probabilities(0.0), hist_neg.probabilities(0.0), ep, en)
    if ep == 0.0 and en == 0.0:
        return hist_pos.with_counts(hist_pos.counts)
    values = np.maximum(values, 0.0)
    s = values.sum()
    if s == 0:
        return hist_pos.with_counts(np.zeros_like(hist_pos.counts))
    return hist_pos.with_counts(values / s * hist_pos.total)


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


# -- file format -------------------------------------------------------------
#
#   #stfusion-histogram v1 {"num_cameras": C, "bins": {...}, "total": N}
#   <cam_i>\t<cam_j>\t<count_0>\t...\t<count_{B-1}>      (one line per ordered pair)


def write_histogram(hist: StHistogram, path: str | Path) -> None:
    header = {"num_cameras": hist.num_cameras, "bins": hist.bins.to_dict(), "total": hist.total}
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{HIST_MAGIC} v{HIST_VERSION} {json.dumps(header, sort_keys=True)}\n")
        for a in range(hist.num_cameras):
            for b in range(hist.num_cameras):
                vals = "\t".join(repr(float(v)) for v in hist.counts[a, b])
                fh.write(f"{a}\t{b}\t{vals}\n")


def read_histogram(path: str | Path) -> StHistogram:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
        parts = first.split(" ", 2)
        if len(parts) < 3 or parts[0] != HIST_MAGIC:
            raise InputError(f"{path}: missing histogram header")
        if parts[1] != f"v{HIST_VERSION}":
            raise InputError(f"{path}: unsupported histogram version {parts[1]}")
        header = json.loads(parts[2])
        bins = BinSpec.from_dict(header["bins"])
        C = int(header["num_cameras"])
        counts = np.zeros((C, C, bins.num_bins))
        seen = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            f = line.rstrip("\n").split("\t")
            if len(f) != bins.num_bins + 2:
                raise InputError(f"{path}:{lineno}: expected {bins.num_bins + 2} fields")
            counts[int(f[0]), int(f[1])] = [float(v) for v in f[2:]]
            seen += 1
    if seen != C * C:
        raise InputError(f"{path}: expected {C * C} pair rows, found {seen}")
    hist = StHistogram(bins, C, counts)
    if not math.isclose(hist.total, float(header["total"]), rel_tol=1e-12, abs_tol=1e-9):
        raise InputError(f"{path}: header total {header['total']} disagrees with counts {hist.total}")
    return hist


def write_plot_data(hist: StHistogram, path: str | Path) -> None:
    """Per-pair (interval bin, probability) series as CSV, in-range bins only."""
    edges = hist.bins.bin_edges()
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("cam_i,cam_j,delta_lo,delta_hi,probability\n")
        for a in range(hist.num_cameras):
            for b in range(hist.num_cameras):
                p = hist.pair_distribution(a, b)
                for k in range(hist.bins.num_range_bins):
                    fh.write(f"{a},{b},{int(edges[k])},{int(edges[k + 1])},{float(p[k + 1])!r}\n")
