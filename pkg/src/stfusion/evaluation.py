"""Ground-truth measurement: CMC curves, judgement-conditioned error rates and
an empirical check of the fused-vs-visual error-sum inequality."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import TARGET_UNLABELED, InputError, Observation
from .embedder import VisualModel, cosine_matrix, embed_matrix
from .fusion import FusionParams, dataset_fusion_scores, fuse_values, matched_threshold, pattern_terms
from .stpattern import BinSpec, count_patterns

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CmcCurve:
    accuracy: np.ndarray
    num_queries: int
    num_skipped: int = 0

    def rank(self, k: int) -> float:
        if k < 1:
            raise InputError("ranks start at 1")
        if len(self.accuracy) == 0:
            return 0.0
        return float(self.accuracy[min(k, len(self.accuracy)) - 1])


def _curve(first_hits: np.ndarray, max_rank: int, skipped: int) -> CmcCurve:
    if len(first_hits) == 0:
        return CmcCurve(np.zeros(max_rank), 0, skipped)
    ks = np.arange(1, max_rank + 1)
    acc = (first_hits[:, None] <= ks[None, :]).mean(axis=0)
    return CmcCurve(acc, len(first_hits), skipped)


def cmc(rankings: Sequence, dataset, max_rank: Optional[int] = None) -> CmcCurve:
    """Rank-k accuracy: share of queries whose first true match is within the top k.

    Queries without any true match in their gallery are skipped with a
    warning and counted in ``num_skipped``.
    """
    labels = dict(zip(dataset.obs_ids, dataset.labels()))
    hits, skipped = [], 0
    longest = 0
    for r in rankings:
        q = labels[r.query_id]
        match = np.array([labels[g] == q for g in r.gallery_ids], dtype=bool)
        longest = max(longest, len(match))
        if not match.any():
            skipped += 1
            continue
        hits.append(int(np.argmax(match)) + 1)
    if skipped:
        log.warning("%d queries had no true match in their gallery and were skipped", skipped)
    return _curve(np.array(hits), max_rank or max(longest, 1), skipped)


def first_match_ranks(scores: np.ndarray, query_idx: Sequence[int], dataset) -> np.ndarray:
    """1-based rank of the first true match for each query row of ``scores``.

    Equivalent to sorting each row by (score desc, obs_id asc) with the query
    removed; returns 0 where a query has no match.
    """
    labels = dataset.labels()
    keys = np.asarray(dataset.id_rank)
    out = np.zeros(len(query_idx), dtype=np.int64)
    for r, qi in enumerate(query_idx):
        row = scores[r]
        match = labels == labels[qi]
        match[qi] = False
        if not match.any():
            continue
        cand = np.flatnonzero(match)
        best_score = row[cand].max()
        best_key = keys[cand[row[cand] == best_score]].min()
        ahead = (row > best_score) | ((row == best_score) & (keys < best_key))
        ahead[qi] = False
        out[r] = int(ahead.sum()) + 1
    return out


def cmc_from_scores(scores: np.ndarray, query_idx: Sequence[int], dataset, max_rank: int = 20) -> CmcCurve:
    ranks = first_match_ranks(scores, query_idx, dataset)
    skipped = int((ranks == 0).sum())
    return _curve(ranks[ranks > 0], max_rank, skipped)


def visual_cmc(model: VisualModel, dataset, max_rank: int = 20) -> CmcCurve:
    emb = embed_matrix(model, dataset.features)
    s, _ = cosine_matrix(emb, emb)
    return cmc_from_scores(s, np.arange(len(dataset)), dataset, max_rank)


def fusion_cmc(params: FusionParams, dataset, max_rank: int = 20) -> CmcCurve:
    fused, _ = dataset_fusion_scores(params, dataset)
    return cmc_from_scores(fused, np.arange(len(dataset)), dataset, max_rank)


@dataclass(frozen=True)
class ErrorRates:
    """``ep``/``en`` are None when their conditioning event never occurs."""

    ep: Optional[float]
    en: Optional[float]
    judged_same: int
    judged_different: int

    @property
    def total(self) -> Optional[float]:
        if self.ep is None or self.en is None:
            return None
        return self.ep + self.en


def error_rates_from_arrays(judged_same, truth_same) -> ErrorRates:
    js = np.asarray(judged_same, dtype=bool)
    ts = np.asarray(truth_same, dtype=bool)
    n_same = int(js.sum())
    n_diff = int((~js).sum())
    ep = float((js & ~ts).sum() / n_same) if n_same else None
    en = float((~js & ts).sum() / n_diff) if n_diff else None
    return ErrorRates(ep, en, n_same, n_diff)


def error_rates(classifier: Callable[[Observation, Observation], bool], pairs: Sequence) -> ErrorRates:
    """False-positive and false-negative rates conditioned on the judgement.

    ``pairs`` holds labeled ``(obs_i, obs_j)`` tuples.
    """
    judged = [bool(classifier(a, b)) for a, b in pairs]
    truth = [a.label == b.label for a, b in pairs]
    return error_rates_from_arrays(judged, truth)


# -- empirical error-sum inequality --------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    alpha: float
    beta: float
    tau: float
    tau_f: object = "match"  # float threshold or "match"


@dataclass
class HarnessReport:
    points: list = field(default_factory=list)

    @property
    def valid(self) -> list:
        return [p for p in self.points if p["precondition"]]

    @property
    def pass_fraction(self) -> float:
        v = self.valid
        return sum(p["holds"] for p in v) / len(v) if v else float("nan")

    @property
    def margins(self) -> np.ndarray:
        return np.array([p["margin"] for p in self.valid])

    @property
    def mean_margin(self) -> float:
        m = self.margins
        return float(m.mean()) if len(m) else float("nan")

    @property
    def worst_margin(self) -> float:
        m = self.margins
        return float(m.min()) if len(m) else float("nan")

    @property
    def mean_abs_gap(self) -> float:
        """Mean |fused error sum - visual error sum| over valid points."""
        m = self.margins
        return float(np.abs(m).mean()) if len(m) else float("nan")

    def summary(self) -> dict:
        return {
            "mean_abs_gap": self.mean_abs_gap,
            "points": len(self.points),
            "valid_points": len(self.valid),
            "pass_fraction": self.pass_fraction,
            "mean_margin": self.mean_margin,
            "worst_margin": self.worst_margin,
        }


def _pair_sample(n: int, pair_budget: Optional[int], seed: int):
    total = n * (n - 1)
    if pair_budget is None or pair_budget >= total:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return i, j
    rng = np.random.default_rng([seed, 0x7E1])
    k = np.sort(rng.choice(total, size=pair_budget, replace=False))
    i = k // (n - 1)
    r = k % (n - 1)
    return i, r + (r >= i)


def theorem1_harness(dataset, model: VisualModel, bins: BinSpec, grid: Sequence[GridPoint],
                     pattern_budget: Optional[int] = None, pair_budget: Optional[int] = None,
                     seed: int = 0) -> HarnessReport:
    """Compare error sums of the visual and fused classifiers on one pair sample.

    Patterns are learned from the dataset without labels (once per visual
    threshold); labels are used only to score the judgements. A point whose
    measured visual error sum is not below one, or whose rates are undefined,
    is reported as precondition-failed rather than as a counterexample.
    """
    from dataclasses import replace

    unlabeled = dataset.with_split(TARGET_UNLABELED)
    labels = dataset.labels()
    n = len(dataset)
    I, J = _pair_sample(n, pair_budget, seed)
    truth = labels[I] == labels[J]
    emb = embed_matrix(model, dataset.features)
    visual, _ = cosine_matrix(emb, emb)
    vis_pairs = visual[I, J]

    cams, frames = dataset.cameras, dataset.frames
    terms_cache: dict = {}
    report = HarnessReport()
    for gp in grid:
        m = replace(model, tau=gp.tau)
        if gp.tau not in terms_cache:
            hp, hn, hm = count_patterns(m, unlabeled, bins, pattern_budget, seed)
            probe = FusionParams(0.0, 0.0, hp, hn, hm, m)
            terms_cache[gp.tau] = pattern_terms(probe, cams[I], cams[J], frames[J] - frames[I])
        m2, m3, p = terms_cache[gp.tau]
        fused_pairs, _ = fuse_values(gp.alpha, gp.beta, vis_pairs, m2, m3, p)
        judged_c = vis_pairs > gp.tau
        rates_c = error_rates_from_arrays(judged_c, truth)
        if gp.tau_f == "match":
            tau_f = matched_threshold(fused_pairs, judged_c.mean())
        else:
            tau_f = float(gp.tau_f)
        rates_f = error_rates_from_arrays(fused_pairs > tau_f, truth)
        sum_c, sum_f = rates_c.total, rates_f.total
        ok = sum_c is not None and sum_f is not None and sum_c < 1.0
        report.points.append({
            "alpha": gp.alpha, "beta": gp.beta, "tau": gp.tau, "tau_f": tau_f,
            "ep": rates_c.ep, "en": rates_c.en, "ep_f": rates_f.ep, "en_f": rates_f.en,
            "sum": sum_c, "sum_f": sum_f,
            "precondition": bool(ok),
            "holds": bool(ok and sum_f < sum_c),
            "margin": (sum_c - sum_f) if ok else None,
        })
    return report


def default_grid(alphas=(0.0, 0.1, 0.25), betas=(0.0, 0.1, 0.25), taus=(0.5, 0.6, 0.7),
                 tau_fs=("match",)) -> list:
    return [
        GridPoint(a, b, t, tf)
        for a in alphas for b in betas for t in taus for tf in tau_fs
        if a + b < 1
    ]
