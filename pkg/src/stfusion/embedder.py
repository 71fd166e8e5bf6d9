"""Visual classifier: a small trainable embedding map with cosine matching.

The embedding map replaces a siamese CNN trunk. Two heads hang off the
embedding during supervised training: a verification head on the squared
embedding difference (one affine unit + sigmoid) and an identification head
(affine + softmax over the K training identities).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .core import (
    SOURCE_LABELED,
    InputError,
    InvariantError,
    Observation,
    StFusionError,
    logistic,
    softplus,
)

ARCHITECTURES = ("identity", "linear", "mlp")
CKPT_MAGIC = "#stfusion-model"
CKPT_VERSION = 1


class TrainingError(StFusionError):
    exit_code = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    pairs_per_epoch: int = 2048
    seed: int = 0


@dataclass(frozen=True, eq=False)
class VisualModel:
    """Embedding map plus verification and identification heads.

    ``params`` maps parameter names to arrays; the name order is the canonical
    order of the flat parameter vector.
    """

    arch: str
    input_dim: int
    embed_dim: int
    params: dict = field(repr=False)
    tau: float = 0.5
    hidden_dim: int = 0
    num_classes: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise InputError(f"unknown architecture {self.arch!r}")
        if self.embed_dim < 1:
            raise InputError("embed_dim must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise InputError(f"tau must lie in (0, 1), got {self.tau}")
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"parameter {name} is not finite")

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([np.ravel(v) for v in self.params.values()])

    def with_flat(self, vec: np.ndarray) -> "VisualModel":
        vec = np.asarray(vec, dtype=np.float64)
        out, k = {}, 0
        for name, arr in self.params.items():
            out[name] = vec[k : k + arr.size].reshape(arr.shape).copy()
            k += arr.size
        if k != vec.size:
            raise InputError(f"flat vector has {vec.size} values, model needs {k}")
        return replace(self, params=out)

    def with_params(self, params: dict) -> "VisualModel":
        return replace(self, params={k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def equals(self, other: "VisualModel") -> bool:
        return (
            self.arch == other.arch
            and self.input_dim == other.input_dim
            and self.embed_dim == other.embed_dim
            and self.hidden_dim == other.hidden_dim
            and self.num_classes == other.num_classes
            and self.tau == other.tau
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def init_model(arch: str, input_dim: int, embed_dim: Optional[int] = None, hidden_dim: int = 0,
               num_classes: int = 0, tau: float = 0.5, seed: int = 0,
               init: str = "random") -> VisualModel:
    """Fresh model. ``init='identity'`` starts linear maps at the identity."""
    rng = np.random.default_rng([seed, 0xE3B])
    if arch == "identity":
        embed_dim = input_dim
    embed_dim = embed_dim or input_dim
    params: dict = {}
    if arch == "linear":
        if init == "identity":
            params["emb_w"] = np.eye(embed_dim, input_dim)
        else:
            params["emb_w"] = rng.normal(0, 1 / np.sqrt(input_dim), (embed_dim, input_dim))
    elif arch == "mlp":
        if hidden_dim < 1:
            raise InputError("mlp architecture needs hidden_dim >= 1")
        params["emb_w1"] = rng.normal(0, 1 / np.sqrt(input_dim), (hidden_dim, input_dim))
        params["emb_b1"] = np.zeros(hidden_dim)
        params["emb_w2"] = rng.normal(0, 1 / np.sqrt(hidden_dim), (embed_dim, hidden_dim))
    elif arch != "identity":
        raise InputError(f"unknown architecture {arch!r}")
    # Larger squared differences should mean "less similar".
    params["ver_w"] = -np.full(embed_dim, 1.0 / embed_dim)
    params["ver_b"] = np.array([1.0])
    if num_classes:
        params["id_w"] = rng.normal(0, 0.01, (num_classes, embed_dim))
        params["id_b"] = np.zeros(num_classes)
    return VisualModel(arch, input_dim, embed_dim, params, tau, hidden_dim, num_classes)


def with_classes(model: VisualModel, num_classes: int, seed: int = 0) -> VisualModel:
    """Replace (or add) the identification head for ``num_classes`` identities."""
    rng = np.random.default_rng([seed, 0x1D])
    params = {k: v.copy() for k, v in model.params.items() if not k.startswith("id_")}
    params["id_w"] = rng.normal(0, 0.01, (num_classes, model.embed_dim))
    params["id_b"] = np.zeros(num_classes)
    return replace(model, params=params, num_classes=num_classes)


# -- forward / backward ------------------------------------------------------


def _embed_forward(model: VisualModel, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected features of dimension {model.input_dim}, got shape {X.shape}")
    p = model.params
    if model.arch == "identity":
        return X, (X,)
    if model.arch == "linear":
        return X @ p["emb_w"].T, (X,)
    A = np.tanh(X @ p["emb_w1"].T + p["emb_b1"])
    return A @ p["emb_w2"].T, (X, A)


def _embed_backward(model: VisualModel, cache, dV: np.ndarray) -> dict:
    p = model.params
    if model.arch == "identity":
        return {}
    if model.arch == "linear":
        (X,) = cache
        return {"emb_w": dV.T @ X}
    X, A = cache
    dA = dV @ p["emb_w2"]
    dZ = dA * (1.0 - A * A)
    return {"emb_w1": dZ.T @ X, "emb_b1": dZ.sum(axis=0), "emb_w2": dV.T @ A}


def embed_matrix(model: VisualModel, X: np.ndarray) -> np.ndarray:
    return _embed_forward(model, X)[0]


def embed(model: VisualModel, obs: Observation) -> np.ndarray:
    feats = np.asarray(obs.features, dtype=np.float64)
    if feats.ndim != 1 or feats.shape[0] != model.input_dim:
        raise InputError(f"{obs.obs_id}: feature dimension {feats.shape} != {model.input_dim}")
    return embed_matrix(model, feats[None, :])[0]


def verification_logit(model: VisualModel, Vi: np.ndarray, Vj: np.ndarray) -> np.ndarray:
    vs = (Vi - Vj) ** 2
    return vs @ model.params["ver_w"] + model.params["ver_b"][0]


def verification_score(model: VisualModel, Vi: np.ndarray, Vj: np.ndarray) -> np.ndarray:
    """Sigmoid similarity from the verification head (q-hat)."""
    return logistic(verification_logit(model, Vi, Vj))


# -- cosine matching ----------------------------------------------------------


class Score(NamedTuple):
    value: float
    degenerate: bool = False


def cosine_matrix(A: np.ndarray, B: np.ndarray):
    """Clamped cosine similarities between rows; zero rows score 0.

    Returns ``(scores, degenerate)`` where ``degenerate`` marks entries
    involving a zero-norm embedding.
    """
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ua = A / np.where(na > 0, na, 1.0)[:, None]
    ub = B / np.where(nb > 0, nb, 1.0)[:, None]
    s = np.clip(ua @ ub.T, 0.0, 1.0)
    degenerate = (na == 0)[:, None] | (nb == 0)[None, :]
    s[degenerate] = 0.0
    return s, degenerate


def visual_score_matrix(model: VisualModel, Xa: np.ndarray, Xb: np.ndarray):
    return cosine_matrix(embed_matrix(model, Xa), embed_matrix(model, Xb))


def visual_score(model: VisualModel, obs_i: Observation, obs_j: Observation) -> Score:
    """Cosine similarity of the two embeddings, clamped to [0, 1]."""
    vi, vj = embed(model, obs_i), embed(model, obs_j)
    ni, nj = np.linalg.norm(vi), np.linalg.norm(vj)
    if ni == 0 or nj == 0:
        return Score(0.0, True)
    # Symmetric by construction: both norms enter as one product.
    raw = float(np.dot(vi, vj) / (ni * nj))
    return Score(min(1.0, max(0.0, raw)))


def classify(model: VisualModel, obs_i: Observation, obs_j: Observation) -> bool:
    """True when judged the same person (score strictly above tau)."""
    return visual_score(model, obs_i, obs_j).value > model.tau


# -- supervised losses -------------------------------------------------------


def loss_all(model: VisualModel, Xi: np.ndarray, Xj: np.ndarray, ci: np.ndarray,
             cj: np.ndarray, grad: bool = True):
    """Mean verification + identification loss over a batch of pairs.

    ``ci``/``cj`` are class indices into the identification head; the pair
    target is ``ci == cj``. Returns ``(loss, grads)`` with grads keyed like
    ``model.params`` (``None`` when ``grad`` is false).
    """
    n = Xi.shape[0]
    p = model.params
    Vi, cache_i = _embed_forward(model, Xi)
    Vj, cache_j = _embed_forward(model, Xj)
    q = (ci == cj).astype(np.float64)

    diff = Vi - Vj
    vs = diff * diff
    z = vs @ p["ver_w"] + p["ver_b"][0]
    loss_v = softplus(z) - q * z

    def id_terms(V, c):
        logits = V @ p["id_w"].T + p["id_b"]
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        return lse - logits[np.arange(n), c], logits, lse

    li, logits_i, lse_i = id_terms(Vi, ci)
    lj, logits_j, lse_j = id_terms(Vj, cj)
    loss = float(np.mean(loss_v + li + lj))
    if not grad:
        return loss, None

    dz = (logistic(z) - q) / n
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["ver_w"] = vs.T @ dz
    g["ver_b"] = np.array([dz.sum()])
    dvs = dz[:, None] * p["ver_w"][None, :]
    dVi = 2.0 * diff * dvs
    dVj = -dVi

    for V, c, logits, lse, dV in ((Vi, ci, logits_i, lse_i, dVi), (Vj, cj, logits_j, lse_j, dVj)):
        dl = np.exp(logits - lse[:, None])
        dl[np.arange(n), c] -= 1.0
        dl /= n
        g["id_w"] += dl.T @ V
        g["id_b"] += dl.sum(axis=0)
        dV += dl @ p["id_w"]

    for dV, cache in ((dVi, cache_i), (dVj, cache_j)):
        for k, v in _embed_backward(model, cache, dV).items():
            g[k] += v
    return loss, g


def sample_balanced_pairs(classes: np.ndarray, count: int, rng: np.random.Generator):
    """Draw ``count`` index pairs, half same-identity and half different."""
    n = len(classes)
    order = np.argsort(classes, kind="stable")
    sorted_c = classes[order]
    starts = np.searchsorted(sorted_c, sorted_c, side="left")
    ends = np.searchsorted(sorted_c, sorted_c, side="right")
    multi = np.flatnonzero(ends - starts > 1)
    n_same = count // 2 if len(multi) else 0
    I = np.empty(count, dtype=np.int64)
    J = np.empty(count, dtype=np.int64)
    if n_same:
        a_pos = rng.choice(multi, size=n_same)
        size = ends[a_pos] - starts[a_pos]
        off = rng.integers(0, size - 1)
        b_pos = starts[a_pos] + off
        b_pos = b_pos + (b_pos >= a_pos)
        I[:n_same] = order[a_pos]
        J[:n_same] = order[b_pos]
    k = count - n_same
    filled = 0
    while filled < k:
        a = rng.integers(0, n, size=k - filled)
        b = rng.integers(0, n, size=k - filled)
        ok = classes[a] != classes[b]
        m = int(ok.sum())
        I[n_same + filled : n_same + filled + m] = a[ok]
        J[n_same + filled : n_same + filled + m] = b[ok]
        filled += m
    return I, J


def train_supervised(model: VisualModel, dataset, cfg: TrainConfig = TrainConfig(),
                     log: Optional[list] = None) -> VisualModel:
    """Mini-batch gradient descent on the composite loss over labeled pairs.

    Each batch is half same-identity, half different-identity pairs. When
    ``log`` is given, the full-set loss on a fixed evaluation pair sample is
    appended before the first epoch and after every epoch.
    """
    if dataset.split != SOURCE_LABELED:
        raise TrainingError(f"supervised training needs a {SOURCE_LABELED} dataset, got {dataset.split}")
    labels = dataset.labels()
    if np.any(labels < 0):
        raise TrainingError("every source observation needs a label")
    uniq, classes = np.unique(labels, return_inverse=True)
    K = len(uniq)
    if K < 2:
        raise TrainingError(f"need at least 2 identities, got {K}")
    if cfg.epochs == 0:
        return model
    if model.num_classes != K:
        model = with_classes(model, K, cfg.seed)
    X = dataset.features
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    ei, ej = sample_balanced_pairs(classes, min(cfg.pairs_per_epoch, 4096), rng)

    def full_loss(m):
        return loss_all(m, X[ei], X[ej], classes[ei], classes[ej], grad=False)[0]

    if log is not None:
        log.append(full_loss(model))
    params = {k: v.copy() for k, v in model.params.items()}
    batches = max(1, cfg.pairs_per_epoch // cfg.batch_size)
    for _ in range(cfg.epochs):
        for _ in range(batches):
            I, J = sample_balanced_pairs(classes, cfg.batch_size, rng)
            cur = replace(model, params=params)
            _, g = loss_all(cur, X[I], X[J], classes[I], classes[J])
            for k in params:
                params[k] = params[k] - cfg.lr * g[k]
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingError("training diverged (non-finite parameters)")
        if log is not None:
            log.append(full_loss(replace(model, params=params)))
    return model.with_params(params)


# -- checkpoint format -------------------------------------------------------
#
#   #stfusion-model v1 {"arch": ..., "shapes": [[name, [dims]], ...], ...}
#   <p_0> <p_1> ... <p_{P-1}>        (flat parameter vector, repr floats)


def write_model(model: VisualModel, path: str | Path) -> None:
    header = {
        "arch": model.arch,
        "input_dim": model.input_dim,
        "embed_dim": model.embed_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "tau": model.tau,
        "shapes": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{CKPT_MAGIC} v{CKPT_VERSION} {json.dumps(header)}\n")
        fh.write(" ".join(repr(float(v)) for v in model.flat()) + "\n")


def read_model(path: str | Path) -> VisualModel:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        parts = fh.readline().split(" ", 2)
        if len(parts) < 3 or parts[0] != CKPT_MAGIC:
            raise InputError(f"{path}: missing model checkpoint header")
        if parts[1] != f"v{CKPT_VERSION}":
            raise InputError(f"{path}: unsupported checkpoint version {parts[1]}")
        header = json.loads(parts[2])
        body = fh.read().split()
    try:
        flat = np.array([float(v) for v in body], dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: malformed parameter value ({exc})") from None
    sizes = [int(np.prod(shape)) if shape else 1 for _, shape in header["shapes"]]
    if sum(sizes) != flat.size:
        raise InputError(f"{path}: parameter count mismatch ({flat.size} values, {sum(sizes)} expected)")
    params, k = {}, 0
    for (name, shape), size in zip(header["shapes"], sizes):
        params[name] = flat[k : k + size].reshape(shape).copy()
        k += size
    return VisualModel(
        header["arch"], int(header["input_dim"]), int(header["embed_dim"]), params,
        float(header["tau"]), int(header["hidden_dim"]), int(header["num_classes"]),
    )
