"""Trainable low-rank score predictors.

Each attention block gets two projection matrices W_q, W_k of shape
(d, d_lr) with d_lr well below d. For block input X the predicted score
matrix is ``A_hat = (X W_q) (X W_k)^T``, trained to track the block's true
pre-softmax Q K^T so that per-query top-k on A_hat recovers the critical
KV indices without ever computing full attention scores.

Loss
----
``total = 0.95 * cos_loss + 0.05 * norm_loss`` where

* cos_loss  = mean over query rows of (1 - cosine(A_hat_row, target_row)),
  rows with a (near-)zero target contributing 0;
* norm_loss = ||A_hat - target||_F / max(||target||_F, 1e-12).

Gradients w.r.t. W_q and W_k are derived analytically below and are
checked against central finite differences in the test suite.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialize
from .attention import CriticalIndexSet
from .flops import FlopCounter
from .selection import k_from_sparsity, streaming_topk
from .validate import as_matrix, check_same_cols

COS_WEIGHT = 0.95
NORM_WEIGHT = 0.05
_NORM_FLOOR = 1e-12


@dataclass
class PredictorParams:
    """Per-block projection matrices plus Adam state."""

    w_q: np.ndarray
    w_k: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_q: np.ndarray = None
    v_q: np.ndarray = None
    m_k: np.ndarray = None
    v_k: np.ndarray = None
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.w_q = as_matrix("W_q", self.w_q)
        self.w_k = as_matrix("W_k", self.w_k)
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("W_q and W_k must share a shape")
        d, d_lr = self.w_q.shape
        if d_lr >= d:
            raise ValueError(f"low-rank width d_lr={d_lr} must be below d={d}")
        for name in ("m_q", "v_q", "m_k", "v_k"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.w_q))

    @classmethod
    def initialize(cls, d: int, d_lr: int, seed: int = 0, lr: float = 1e-3) -> "PredictorParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        return cls(
            w_q=rng.normal(0.0, scale, (d, d_lr)),
            w_k=rng.normal(0.0, scale, (d, d_lr)),
            lr=lr,
        )

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_lr(self) -> int:
        return self.w_q.shape[1]


@dataclass
class PredictorLossReport:
    cos_loss: float
    norm_loss: float
    total: float
    step_skipped: bool = False


def project(x, w) -> np.ndarray:
    """X W: rows of X mapped to the low-rank space."""
    x = as_matrix("X", x)
    w = as_matrix("W", w)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"X has {x.shape[1]} cols but W has {w.shape[0]} rows")
    return x @ w


def _cos_terms(a_hat: np.ndarray, target: np.ndarray):
    """Per-row cosine pieces and the cosine-loss gradient w.r.t. a_hat."""
    n = a_hat.shape[0]
    a_norm = np.linalg.norm(a_hat, axis=1)
    t_norm = np.linalg.norm(target, axis=1)
    live = t_norm > _NORM_FLOOR

    cos = np.zeros(n)
    grad = np.zeros_like(a_hat)
    nonzero_a = live & (a_norm > _NORM_FLOOR)
    if np.any(nonzero_a):
        an = a_norm[nonzero_a, None]
        tn = t_norm[nonzero_a, None]
        dots = np.sum(a_hat[nonzero_a] * target[nonzero_a], axis=1, keepdims=True)
        cos_nz = dots / (an * tn)
        cos[nonzero_a] = cos_nz[:, 0]
        # d(1 - cos)/da = -(t/(|a||t|) - cos * a/|a|^2), averaged over rows
        grad[nonzero_a] = -(target[nonzero_a] / (an * tn) - cos_nz * a_hat[nonzero_a] / an**2) / n
    # rows with zero target: loss term 0 (and zero gradient);
    # rows with zero a_hat but live target: cos := 0, subgradient 0
    cos_loss = float(np.sum(np.where(live, 1.0 - cos, 0.0)) / n)
    return cos_loss, grad


def _norm_terms(a_hat: np.ndarray, target: np.ndarray):
    denom = max(float(np.linalg.norm(target)), _NORM_FLOOR)
    diff = a_hat - target
    dist = float(np.linalg.norm(diff))
    norm_loss = dist / denom
    if dist > _NORM_FLOOR:
        grad = diff / (denom * dist)
    else:
        grad = np.zeros_like(a_hat)
    return norm_loss, grad


def predictor_loss(a_hat, a_target) -> PredictorLossReport:
    """Composite approximation loss between predicted and true score rows."""
    a_hat = as_matrix("A_hat", a_hat)
    a_target = as_matrix("A_target", a_target)
    if a_hat.shape != a_target.shape:
        raise ValueError(f"shape mismatch: {a_hat.shape} vs {a_target.shape}")
    cos_loss, _ = _cos_terms(a_hat, a_target)
    norm_loss, _ = _norm_terms(a_hat, a_target)
    total = COS_WEIGHT * cos_loss + NORM_WEIGHT * norm_loss
    return PredictorLossReport(cos_loss=cos_loss, norm_loss=norm_loss, total=total)


def loss_and_grads(params: PredictorParams, x, a_target, rows=None):
    """Loss report plus analytic gradients w.r.t. W_q and W_k.

    ``rows`` restricts the query side to sampled rows of X; the key side
    always uses all rows. With G = dL/dA_hat the chain rule through
    A_hat = (X_r W_q)(X W_k)^T gives

        dL/dW_q = X_r^T (G K_lr),   dL/dW_k = X^T (G^T Q_lr).
    """
    x = as_matrix("X", x)
    check_same_cols("X", x, "W_q", params.w_q.T)
    x_rows = x if rows is None else x[np.asarray(rows, dtype=np.int64)]
    a_target = as_matrix("A_target", a_target)
    if a_target.shape != (x_rows.shape[0], x.shape[0]):
        raise ValueError(
            f"A_target must be ({x_rows.shape[0]}, {x.shape[0]}), got {a_target.shape}"
        )

    q_lr = x_rows @ params.w_q
    k_lr = x @ params.w_k
    a_hat = q_lr @ k_lr.T

    cos_loss, g_cos = _cos_terms(a_hat, a_target)
    norm_loss, g_norm = _norm_terms(a_hat, a_target)
    g = COS_WEIGHT * g_cos + NORM_WEIGHT * g_norm

    grad_wq = x_rows.T @ (g @ k_lr)
    grad_wk = x.T @ (g.T @ q_lr)
    report = PredictorLossReport(
        cos_loss=cos_loss,
        norm_loss=norm_loss,
        total=COS_WEIGHT * cos_loss + NORM_WEIGHT * norm_loss,
    )
    return report, grad_wq, grad_wk


def _adam_update(w, grad, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad**2
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train_step(params: PredictorParams, x, a_target, rows=None) -> PredictorLossReport:
    """One Adam step on the analytic gradients; mutates ``params``.

    A non-finite gradient skips the parameter update and flags the report
    instead of corrupting the matrices.
    """
    report, grad_wq, grad_wk = loss_and_grads(params, x, a_target, rows=rows)
    if not (np.all(np.isfinite(grad_wq)) and np.all(np.isfinite(grad_wk))):
        report.step_skipped = True
        params.loss_history.append(report.total)
        return report
    params.step += 1
    _adam_update(params.w_q, grad_wq, params.m_q, params.v_q,
                 params.lr, params.beta1, params.beta2, params.eps, params.step)
    _adam_update(params.w_k, grad_wk, params.m_k, params.v_k,
                 params.lr, params.beta1, params.beta2, params.eps, params.step)
    params.loss_history.append(report.total)
    return report


def estimate_critical(
    params: PredictorParams,
    x,
    k: int | np.ndarray | None = None,
    sparsity: float | None = None,
    *,
    flops: FlopCounter | None = None,
) -> CriticalIndexSet:
    """Per-query critical-KV estimate from the trained projections.

    Scores are ranked via the streaming selector on Q_lr K_lr^T. ``k`` may
    be a scalar or a per-query array; alternatively a sparsity level is
    converted with k_from_sparsity.
    """
    x = as_matrix("X", x)
    s_total = x.shape[0]
    if (k is None) == (sparsity is None):
        raise ValueError("provide exactly one of k or sparsity")
    if sparsity is not None:
        k = k_from_sparsity(sparsity, s_total)

    q_lr = project(x, params.w_q)
    k_lr = project(x, params.w_k)
    if flops is not None:
        flops.projection += 2 * 2 * s_total * params.d * params.d_lr

    if np.ndim(k) == 0:
        return streaming_topk(q_lr, k_lr, int(k), flops=flops).to_index_set()

    sizes = np.asarray(k, dtype=np.int64)
    if sizes.shape != (s_total,):
        raise ValueError(f"per-query k must have shape ({s_total},)")
    if np.any(sizes < 1):
        raise ValueError("per-query k must be >= 1")
    k_max = int(sizes.max())
    top = streaming_topk(q_lr, k_lr, k_max, flops=flops)
    scores = q_lr @ k_lr.T  # only used to re-rank the k_max candidates
    picked = []
    for q in range(s_total):
        cand = top.indices[q]
        order = np.lexsort((cand, -scores[q, cand]))
        picked.append(np.sort(cand[order[: sizes[q]]]))
    return CriticalIndexSet(picked, theta=None)


def prediction_accuracy(estimated: CriticalIndexSet, oracle: CriticalIndexSet, scores):
    """(recall, score_coverage) of an estimate against the oracle sets.

    Recall is |est ∩ oracle| / |oracle| averaged over queries; coverage is
    the per-query ratio of attention mass captured by the estimate to the
    mass of the oracle set, averaged over queries.
    """
    scores = as_matrix("scores", scores)
    if estimated.n_queries != oracle.n_queries:
        raise ValueError("estimate and oracle cover different query counts")
    recalls = np.empty(oracle.n_queries)
    coverages = np.empty(oracle.n_queries)
    for q in range(oracle.n_queries):
        est, ora = estimated.indices[q], oracle.indices[q]
        inter = np.intersect1d(est, ora, assume_unique=True)
        recalls[q] = inter.size / ora.size if ora.size else 1.0
        oracle_mass = scores[q, ora].sum()
        est_mass = scores[q, est].sum()
        coverages[q] = est_mass / oracle_mass if oracle_mass > 0 else 1.0
    return float(recalls.mean()), float(coverages.mean())


def save_checkpoint(params: PredictorParams, directory, block_id: int) -> Path:
    """Binary matrices plus JSON metadata under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"predictor_block{block_id:03d}"
    names = {}
    for tag, arr in (
        ("w_q", params.w_q), ("w_k", params.w_k),
        ("m_q", params.m_q), ("v_q", params.v_q),
        ("m_k", params.m_k), ("v_k", params.v_k),
    ):
        path = directory / f"{stem}.{tag}.bin"
        serialize.save_tensor(path, arr)
        names[tag] = path.name
    meta = {
        "block_id": block_id,
        "d": params.d,
        "d_lr": params.d_lr,
        "lr": params.lr,
        "step": params.step,
        "loss_history": params.loss_history,
        "files": names,
    }
    meta_path = directory / f"{stem}.json"
    meta_path.write_text(serialize.canonical_json(meta))
    return meta_path


def load_checkpoint(meta_path) -> PredictorParams:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    arrays = {
        tag: serialize.load_tensor(meta_path.parent / name)
        for tag, name in meta["files"].items()
    }
    params = PredictorParams(
        w_q=arrays["w_q"], w_k=arrays["w_k"], lr=meta["lr"], step=meta["step"],
        m_q=arrays["m_q"], v_q=arrays["v_q"], m_k=arrays["m_k"], v_k=arrays["v_k"],
        loss_history=list(meta["loss_history"]),
    )
    return params
