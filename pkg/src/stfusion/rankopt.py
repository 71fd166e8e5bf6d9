"""Mutual promotion of the visual and fused classifiers by learning to rank.

The fused classifier ranks the unlabeled target set; pairs drawn from the top
``n`` and from ranks ``(n, 2n]`` form triplets whose fused-score difference is
the teacher signal. A triplet network sharing the visual model's embedding
map and verification head learns to reproduce it, and the updated visual
model regenerates the patterns behind the fused classifier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DomainError, InputError, StFusionError, logistic, softplus
from .embedder import TrainConfig, VisualModel, _embed_backward, _embed_forward
from .fusion import FusionParams, RankingResult, dataset_fusion_scores, rank_rows
from .stpattern import BinSpec, count_patterns

log = logging.getLogger(__name__)

ORIENTATIONS = ("verbatim", "conventional")


@dataclass(frozen=True)
class Triplet:
    query_id: str
    j_id: str
    k_id: str
    p: float
    # phi_ij - phi_ik; kept so the loss stays finite when p rounds to 0 or 1.
    logit: float


@dataclass(frozen=True)
class LoopConfig:
    n: int = 5
    triplets_per_query: int = 1
    max_iterations: int = 5
    delta: float = 1e-4
    train: TrainConfig = TrainConfig(lr=0.01, epochs=5, batch_size=64)
    seed: int = 0
    pair_budget: Optional[int] = None
    queries_per_iteration: Optional[int] = None
    orientation: str = "verbatim"

    def __post_init__(self):
        if self.n < 1:
            raise InputError("stratum size n must be >= 1")
        if self.delta <= 0:
            raise InputError("convergence threshold delta must be > 0")
        if self.orientation not in ORIENTATIONS:
            raise InputError(f"orientation must be one of {ORIENTATIONS}")


def ranking_probability(phi_ij: float, phi_ik: float) -> float:
    """Logistic of the score difference."""
    return float(logistic(phi_ij - phi_ik))


def sample_triplets(ranking: RankingResult, cfg: LoopConfig, rng: np.random.Generator) -> list:
    """Draw triplets from the top-n and (n, 2n] strata of one ranking."""
    n = cfg.n
    if len(ranking) < 2 * n:
        log.warning("query %s: gallery of %d < 2n = %d, skipped", ranking.query_id, len(ranking), 2 * n)
        return []
    out = []
    for _ in range(cfg.triplets_per_query):
        hi = int(rng.integers(0, n))
        lo = int(rng.integers(n, 2 * n))
        a, b = (hi, lo) if rng.random() < 0.5 else (lo, hi)
        x = float(ranking.scores[a] - ranking.scores[b])
        out.append(Triplet(ranking.query_id, ranking.gallery_ids[a], ranking.gallery_ids[b], float(logistic(x)), x))
    return out


def rank_loss(p_hat: float, p: float, orientation: str = "verbatim") -> float:
    """Cross-entropy ranking loss.

    ``verbatim``: ``-p_hat log p - (1 - p_hat) log(1 - p)`` with the teacher
    ``p`` inside the logarithms. ``conventional`` swaps the roles.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"teacher probability must lie in (0, 1), got {p}")
    if not 0.0 <= p_hat <= 1.0:
        raise DomainError(f"predicted probability must lie in [0, 1], got {p_hat}")
    if orientation == "verbatim":
        return -p_hat * math.log(p) - (1.0 - p_hat) * math.log1p(-p)
    if p_hat in (0.0, 1.0):
        raise DomainError("conventional orientation needs p_hat in (0, 1)")
    return -p * math.log(p_hat) - (1.0 - p) * math.log1p(-p_hat)


def triplet_loss(model: VisualModel, Xi: np.ndarray, Xj: np.ndarray, Xk: np.ndarray,
                 teacher_logit: np.ndarray, orientation: str = "verbatim", grad: bool = True):
    """Mean ranking loss of the triplet network and its gradient.

    The predicted ranking probability is the logistic of the difference of
    the verification-head scores of (i, j) and (i, k).
    """
    n = Xi.shape[0]
    p = model.params
    X = np.concatenate([Xi, Xj, Xk])
    V, cache = _embed_forward(model, X)
    Vi, Vj, Vk = V[:n], V[n : 2 * n], V[2 * n :]
    dj, dk = Vi - Vj, Vi - Vk
    sj, sk = dj * dj, dk * dk
    w, b = p["ver_w"], p["ver_b"][0]
    phi_j = logistic(sj @ w + b)
    phi_k = logistic(sk @ w + b)
    y = phi_j - phi_k
    p_hat = logistic(y)
    x = np.asarray(teacher_logit, dtype=np.float64)
    if orientation == "verbatim":
        # log p = -softplus(-x), log(1 - p) = -softplus(x)
        losses = p_hat * softplus(-x) + (1.0 - p_hat) * softplus(x)
        dy = -x * p_hat * (1.0 - p_hat)
    else:
        t = logistic(x)
        losses = t * softplus(-y) + (1.0 - t) * softplus(y)
        dy = p_hat - t
    loss = float(losses.mean())
    if not grad:
        return loss, None
    dy = dy / n
    dzj = dy * phi_j * (1.0 - phi_j)
    dzk = -dy * phi_k * (1.0 - phi_k)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["ver_w"] = sj.T @ dzj + sk.T @ dzk
    g["ver_b"] = np.array([dzj.sum() + dzk.sum()])
    dVj = -2.0 * dj * (dzj[:, None] * w)
    dVk = -2.0 * dk * (dzk[:, None] * w)
    dVi = -(dVj + dVk)
    dV = np.concatenate([dVi, dVj, dVk])
    for k, v in _embed_backward(model, cache, dV).items():
        g[k] += v
    return loss, g


def _triplet_arrays(triplets: Sequence[Triplet], dataset):
    idx = np.array([[dataset.index_of(t.query_id), dataset.index_of(t.j_id), dataset.index_of(t.k_id)]
                    for t in triplets], dtype=np.int64)
    logits = np.array([t.logit for t in triplets])
    return idx, logits


def train_on_triplets(model: VisualModel, triplets: Sequence[Triplet], dataset,
                      cfg: TrainConfig = TrainConfig(), orientation: str = "verbatim",
                      log_losses: Optional[list] = None, train_head: bool = False) -> VisualModel:
    """Mini-batch gradient descent on the mean ranking loss.

    Only the embedding map and verification head move; the identification
    head is untouched. ``log_losses`` receives the full-set loss before and
    after training.
    """
    if not triplets:
        raise InputError("no triplets to train on")
    idx, logits = _triplet_arrays(triplets, dataset)
    X = dataset.features
    frozen = {k for k in model.params if k.startswith("id_") or (k.startswith("ver_") and not train_head)}

    def full(m):
        return triplet_loss(m, X[idx[:, 0]], X[idx[:, 1]], X[idx[:, 2]], logits, orientation, grad=False)[0]

    if log_losses is not None:
        log_losses.append(full(model))
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng([cfg.seed, 0x3A7])
    params = {k: v.copy() for k, v in model.params.items()}
    m = len(triplets)
    for _ in range(cfg.epochs):
        perm = rng.permutation(m)
        for s in range(0, m, cfg.batch_size):
            b = perm[s : s + cfg.batch_size]
            cur = replace(model, params=params)
            _, g = triplet_loss(cur, X[idx[b, 0]], X[idx[b, 1]], X[idx[b, 2]], logits[b], orientation)
            for k in params:
                if k not in frozen:
                    params[k] = params[k] - cfg.lr * g[k]
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise DomainError("triplet training diverged (non-finite parameters)")
    out = model.with_params(params)
    if log_losses is not None:
        log_losses.append(full(out))
    return out


@dataclass
class IterationRecord:
    iteration: int
    num_triplets: int
    loss_before: float
    loss_after: float
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "iteration": self.iteration,
            "num_triplets": self.num_triplets,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
        }
        d.update(self.metrics)
        return d


class PromotionError(StFusionError):
    exit_code = 2


EvalHook = Callable[[VisualModel, FusionParams], dict]


def mutual_promote(model: VisualModel, dataset, bins: BinSpec, alpha: float, beta: float,
                   cfg: LoopConfig = LoopConfig(), eval_hook: Optional[EvalHook] = None,
                   workers: int = 1, on_iteration: Optional[Callable] = None):
    """Alternate pattern learning, fused ranking and triplet training.

    Returns ``(model, fusion_params, history)``. ``fusion_params`` is built
    from the final model (``None`` when no iteration ran). ``eval_hook`` is
    called after every iteration with the current models and may read labels
    of a separate evaluation split; nothing inside the loop does.
    """
    history: list = []
    if cfg.max_iterations == 0:
        return model, None, history

    def build(m):
        hp, hn, hm = count_patterns(m, dataset, bins, cfg.pair_budget, cfg.seed, workers=workers)
        return FusionParams(alpha, beta, hp, hn, hm, m)

    n = len(dataset)
    try:
        params = build(model)
    except StFusionError as exc:
        raise PromotionError(f"iteration 1: pattern learning failed: {exc}") from exc
    prev_loss = None
    for it in range(1, cfg.max_iterations + 1):
        try:
            rng = np.random.default_rng([cfg.seed, it, 0xF00])
            if cfg.queries_per_iteration is None or cfg.queries_per_iteration >= n:
                queries = np.arange(n)
            else:
                queries = np.sort(rng.choice(n, size=cfg.queries_per_iteration, replace=False))
            fused, _ = dataset_fusion_scores(params, dataset, queries)
            rankings = rank_rows(fused, dataset, queries)
            triplets = [t for r in rankings for t in sample_triplets(r, cfg, rng)]
            if not triplets:
                raise PromotionError("no triplets could be sampled (galleries smaller than 2n)")
            losses: list = []
            train_cfg = replace(cfg.train, seed=cfg.train.seed + it)
            model = train_on_triplets(model, triplets, dataset, train_cfg, cfg.orientation, losses)
            params = build(model)
        except PromotionError:
            raise
        except StFusionError as exc:
            raise PromotionError(f"iteration {it}: {exc}") from exc
        rec = IterationRecord(it, len(triplets), losses[0], losses[-1])
        if eval_hook is not None:
            rec.metrics.update(eval_hook(model, params))
        history.append(rec)
        if on_iteration is not None:
            on_iteration(rec, model, params)
        if prev_loss is not None and abs(rec.loss_after - prev_loss) < cfg.delta:
            break
        prev_loss = rec.loss_after
    return model, params, history
