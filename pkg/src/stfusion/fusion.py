"""Fusion classifier: visual similarity combined with spatio-temporal patterns.

For a pair with visual score M1, judged-same pattern mass M2, judged-different
pattern mass M3 and marginal mass P, the fused score is

    (M1 + alpha / (1 - alpha - beta)) * ((1 - alpha) * M2 - beta * M3) / P

Scores are ranking scores: they may be negative or exceed one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import DomainError, InputError, Observation, pair_interval
from .embedder import Score, VisualModel, cosine_matrix, embed_matrix
from .stpattern import StHistogram, lookup_many

TIE_BREAK = "obs_id-asc"


@dataclass(frozen=True, eq=False)
class FusionParams:
    alpha: float
    beta: float
    hist_pos: StHistogram
    hist_neg: StHistogram
    hist_marginal: StHistogram
    model: VisualModel

    def __post_init__(self):
        if not (0.0 <= self.alpha < 1.0 and 0.0 <= self.beta < 1.0):
            raise DomainError(f"alpha and beta must lie in [0, 1), got {self.alpha}, {self.beta}")
        if self.alpha + self.beta >= 1.0:
            raise DomainError(f"alpha + beta = {self.alpha + self.beta} must be < 1")
        h = (self.hist_pos, self.hist_neg, self.hist_marginal)
        if len({x.bins for x in h}) != 1 or len({x.num_cameras for x in h}) != 1:
            raise InputError("fusion histograms must share bins and camera count")


def fuse_values(alpha: float, beta: float, m1, m2, m3, p_marginal):
    """Elementwise fused score and degenerate mask (zero marginal)."""
    m1, m2, m3, p = (np.asarray(x, dtype=np.float64) for x in (m1, m2, m3, p_marginal))
    lift = alpha / (1.0 - alpha - beta)
    degenerate = p == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (m1 + lift) * ((1.0 - alpha) * m2 - beta * m3) / np.where(degenerate, 1.0, p)
    s = np.where(degenerate, 0.0, s)
    return s, degenerate


def pattern_terms(params: FusionParams, cam_i, cam_j, delta):
    """(M2, M3, P) lookups for vectors of camera pairs and intervals."""
    return (
        lookup_many(params.hist_pos, cam_i, cam_j, delta),
        lookup_many(params.hist_neg, cam_i, cam_j, delta),
        lookup_many(params.hist_marginal, cam_i, cam_j, delta),
    )


def fusion_score(params: FusionParams, obs_i: Observation, obs_j: Observation) -> Score:
    from .embedder import visual_score

    m1 = visual_score(params.model, obs_i, obs_j).value
    pi = pair_interval(obs_i, obs_j)
    m2, m3, p = pattern_terms(params, pi.cam_i, pi.cam_j, pi.delta)
    s, deg = fuse_values(params.alpha, params.beta, m1, m2, m3, p)
    return Score(float(s), bool(deg))


def classify_fused(params: FusionParams, obs_i: Observation, obs_j: Observation, tau_f: float) -> bool:
    return fusion_score(params, obs_i, obs_j).value > tau_f


def fusion_matrix(params: FusionParams, query_feats, query_cams, query_frames,
                  gal_feats, gal_cams, gal_frames, visual: Optional[np.ndarray] = None):
    """Fused scores for every (query, gallery) combination.

    Returns ``(fused, visual)``; ``visual`` may be passed in to avoid
    recomputing embeddings.
    """
    if visual is None:
        visual, _ = cosine_matrix(embed_matrix(params.model, query_feats), embed_matrix(params.model, gal_feats))
    ci = np.asarray(query_cams)[:, None]
    cj = np.asarray(gal_cams)[None, :]
    delta = np.asarray(gal_frames)[None, :] - np.asarray(query_frames)[:, None]
    ci, cj = np.broadcast_arrays(ci, cj)
    m2, m3, p = pattern_terms(params, ci, cj, delta)
    fused, _ = fuse_values(params.alpha, params.beta, visual, m2, m3, p)
    return fused, visual


class RankingResult(NamedTuple):
    query_id: str
    gallery_ids: tuple
    scores: np.ndarray
    tie_break: str = TIE_BREAK

    def __len__(self):
        return len(self.gallery_ids)


def rank_order(scores: np.ndarray, id_keys: np.ndarray) -> np.ndarray:
    """Indices sorting by score descending, then by ``id_keys`` ascending."""
    return np.lexsort((id_keys, -np.asarray(scores)))


def rank_with_scores(query_id: str, gallery_ids: Sequence[str], scores: np.ndarray) -> RankingResult:
    ids = np.asarray(gallery_ids, dtype=object)
    keep = ids != query_id
    ids, scores = ids[keep], np.asarray(scores, dtype=np.float64)[keep]
    if len(ids) == 0:
        raise InputError("gallery is empty after excluding the query")
    keys = np.argsort(np.argsort(ids.astype(str), kind="stable"), kind="stable")
    order = rank_order(scores, keys)
    return RankingResult(query_id, tuple(ids[order]), scores[order])


def fuse_rank(params: FusionParams, query: Observation, gallery: Sequence[Observation]) -> RankingResult:
    """Rank ``gallery`` for ``query`` by fused score (query itself excluded)."""
    if len(gallery) == 0:
        raise InputError("empty gallery")
    feats = np.stack([np.asarray(o.features, dtype=np.float64) for o in gallery])
    fused, _ = fusion_matrix(
        params,
        np.asarray(query.features, dtype=np.float64)[None, :], [query.camera], [query.frame],
        feats, [o.camera for o in gallery], [o.frame for o in gallery],
    )
    return rank_with_scores(query.obs_id, [o.obs_id for o in gallery], fused[0])


def visual_rank(model: VisualModel, query: Observation, gallery: Sequence[Observation]) -> RankingResult:
    """Rank by visual score alone, with the same tie-break."""
    if len(gallery) == 0:
        raise InputError("empty gallery")
    feats = np.stack([np.asarray(o.features, dtype=np.float64) for o in gallery])
    vis, _ = cosine_matrix(embed_matrix(model, np.asarray(query.features, dtype=np.float64)[None, :]),
                           embed_matrix(model, feats))
    return rank_with_scores(query.obs_id, [o.obs_id for o in gallery], vis[0])


def matched_threshold(scores: np.ndarray, same_fraction: float) -> float:
    """Threshold giving (as nearly as ties allow) the requested judged-same fraction.

    Used to put the fused classifier at the visual classifier's operating
    point without labels.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())[::-1]
    if len(s) == 0:
        raise InputError("no scores")
    k = int(round(same_fraction * len(s)))
    if k <= 0:
        return float(s[0])
    if k >= len(s):
        return float(np.nextafter(s[-1], -np.inf))
    # Midpoint between the k-th and (k+1)-th largest scores.
    return float(0.5 * (s[k - 1] + s[k])) if s[k - 1] != s[k] else float(s[k])


def rank_rows(scores: np.ndarray, dataset, query_idx: Sequence[int]) -> list:
    """Rankings for dataset queries from a (len(query_idx), len(dataset)) score matrix.

    Each query is excluded from its own gallery.
    """
    out = []
    keys = np.asarray(dataset.id_rank)
    ids = dataset.obs_ids
    for row, qi in zip(scores, query_idx):
        order = rank_order(row, keys)
        order = order[order != qi]
        out.append(RankingResult(ids[qi], tuple(ids[order]), row[order]))
    return out


def dataset_fusion_scores(params: FusionParams, dataset, query_idx: Optional[Sequence[int]] = None,
                          visual: Optional[np.ndarray] = None):
    """Fused and visual score matrices of queries against the whole dataset."""
    q = np.arange(len(dataset)) if query_idx is None else np.asarray(query_idx)
    if visual is None:
        emb = embed_matrix(params.model, dataset.features)
        visual, _ = cosine_matrix(emb[q], emb)
    return fusion_matrix(
        params, None, dataset.cameras[q], dataset.frames[q],
        None, dataset.cameras, dataset.frames, visual=visual,
    )
