"""Two-level embedding model: forward objectives and exact analytic gradients.

A visit's multi-hot code vector x is mapped through two ReLU layers,

    u = ReLU(Wc x + bc)                    code-level representation
    v = ReLU(Wv [u, demo] + bv)            visit-level representation

and v feeds a softmax layer that must predict the (grouped) codes of the
visits inside a context window.  The second objective is a skip-gram over
code pairs co-occurring within a visit, acting on the non-negative columns
of ReLU(Wc).  Both objectives and their gradients for all six parameter
arrays are implemented here in closed form; ReLU subgradients at 0 are 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Visit
from .validation import check_binary_vector, check_finite, check_vector

PROB_CLAMP = 1e-8
CHECKPOINT_VERSION = 1

_ARRAY_NAMES = (
    "code_weights",
    "code_bias",
    "visit_weights",
    "visit_bias",
    "softmax_weights",
    "softmax_bias",
)


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        message = f"non-finite {term} loss"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


@dataclass
class ModelParams:
    """The six trainable arrays.

    Shapes: code_weights (code_dim, n_codes), code_bias (code_dim,),
    visit_weights (visit_dim, code_dim + demo_dim), visit_bias (visit_dim,),
    softmax_weights (n_targets, visit_dim), softmax_bias (n_targets,).
    """

    code_weights: np.ndarray
    code_bias: np.ndarray
    visit_weights: np.ndarray
    visit_bias: np.ndarray
    softmax_weights: np.ndarray
    softmax_bias: np.ndarray

    def __post_init__(self):
        for name in _ARRAY_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m, c = self.code_weights.shape
        n, md = self.visit_weights.shape
        g, n2 = self.softmax_weights.shape
        if self.code_bias.shape != (m,):
            raise ValueError(f"code_bias must have shape ({m},)")
        if md < m:
            raise ValueError("visit_weights must have at least code_dim columns")
        if self.visit_bias.shape != (n,):
            raise ValueError(f"visit_bias must have shape ({n},)")
        if n2 != n:
            raise ValueError("softmax_weights columns must equal visit_dim")
        if self.softmax_bias.shape != (g,):
            raise ValueError(f"softmax_bias must have shape ({g},)")
        for name in _ARRAY_NAMES:
            check_finite(name, getattr(self, name))

    @property
    def code_dim(self) -> int:
        return self.code_weights.shape[0]

    @property
    def n_codes(self) -> int:
        return self.code_weights.shape[1]

    @property
    def visit_dim(self) -> int:
        return self.visit_weights.shape[0]

    @property
    def demo_dim(self) -> int:
        return self.visit_weights.shape[1] - self.code_dim

    @property
    def n_targets(self) -> int:
        return self.softmax_weights.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class Gradients:
    """Shape-congruent gradient arrays for a :class:`ModelParams`."""

    code_weights: np.ndarray
    code_bias: np.ndarray
    visit_weights: np.ndarray
    visit_bias: np.ndarray
    softmax_weights: np.ndarray
    softmax_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(**{k: np.zeros_like(v) for k, v in params.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAY_NAMES}


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch means of the two objectives and their weighted sum."""

    visit_loss: float
    code_loss: float
    total: float

    @classmethod
    def combine(cls, visit_loss: float, code_loss: float, alpha: float) -> "LossBreakdown":
        return cls(float(visit_loss), float(code_loss), float(visit_loss + alpha * code_loss))


def init_params(
    n_codes: int,
    code_dim: int,
    visit_dim: int,
    demo_dim: int,
    n_targets: int,
    seed: int,
) -> ModelParams:
    """Uniform(-r, r) weights with r = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        r = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-r, r, size=(rows, cols))

    return ModelParams(
        code_weights=glorot(code_dim, n_codes),
        code_bias=np.zeros(code_dim),
        visit_weights=glorot(visit_dim, code_dim + demo_dim),
        visit_bias=np.zeros(visit_dim),
        softmax_weights=glorot(n_targets, visit_dim),
        softmax_bias=np.zeros(n_targets),
    )


# ---------------------------------------------------------------------------
# Single-visit forward operations
# ---------------------------------------------------------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift stabilization."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def intermediate_rep(x, params: ModelParams) -> np.ndarray:
    """ReLU(Wc x + bc): the non-negative code-level visit representation."""
    x = check_binary_vector(x, params.n_codes)
    return np.maximum(params.code_weights @ x + params.code_bias, 0.0)


def visit_rep(u, demo, params: ModelParams) -> np.ndarray:
    """ReLU(Wv [u, demo] + bv): the non-negative visit representation."""
    u = check_vector("u", u, params.code_dim)
    demo = check_vector("demo", demo, params.demo_dim)
    stacked = np.concatenate([u, demo])
    return np.maximum(params.visit_weights @ stacked + params.visit_bias, 0.0)


def predict_neighbors(v, params: ModelParams) -> np.ndarray:
    """Softmax over target groups given a visit representation."""
    v = check_vector("v", v, params.visit_dim)
    return _softmax_rows(params.softmax_weights @ v + params.softmax_bias)


def visit_loss(window_targets, v, params: ModelParams) -> float:
    """Cross-entropy of the window's multi-hot targets against the softmax output.

    Each target y contributes -y^T log p - (1-y)^T log(1-p) with p clamped to
    [PROB_CLAMP, 1 - PROB_CLAMP] inside the logarithms.  An empty window
    contributes 0.
    """
    targets = np.asarray(window_targets, dtype=np.float64)
    if targets.size == 0:
        return 0.0
    targets = targets.reshape(-1, params.n_targets)
    p = predict_neighbors(v, params)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    total = -(targets @ np.log(pc)).sum() - ((1.0 - targets) @ np.log1p(-pc)).sum()
    return float(total)


def code_pair_prob(i: int, j: int, params: ModelParams) -> float:
    """p(code j | code i) under the softmax over ReLU(Wc) column inner products."""
    return float(_code_context_probs(i, params)[j])


def _code_context_probs(i: int, params: ModelParams) -> np.ndarray:
    if not 0 <= i < params.n_codes:
        raise ValueError(f"code index {i} out of range")
    positive = np.maximum(params.code_weights, 0.0)
    logits = positive.T @ positive[:, i]
    return _softmax_rows(logits)


def code_loss(visit: Visit, params: ModelParams) -> float:
    """Negative log-likelihood over all ordered co-occurring code pairs.

    A visit with M codes contributes exactly M(M-1) log terms; single-code
    visits contribute 0.
    """
    codes = np.fromiter(visit.codes, dtype=np.int64)
    if codes.max() >= params.n_codes:
        raise ValueError(f"code index {codes.max()} out of range")
    m_codes = codes.size
    if m_codes < 2:
        return 0.0
    positive = np.maximum(params.code_weights, 0.0)
    centers = positive[:, codes]                     # (code_dim, M)
    logits = positive.T @ centers                    # (n_codes, M)
    mx = logits.max(axis=0)
    lse = mx + np.log(np.exp(logits - mx).sum(axis=0))
    # sum over context logits = w_i . (sum of visit columns) - w_i . w_i
    col_sum = centers.sum(axis=1)
    dot_sum = centers.T @ col_sum
    dot_self = (centers * centers).sum(axis=0)
    return float(((m_codes - 1) * lse - (dot_sum - dot_self)).sum())


# ---------------------------------------------------------------------------
# Batched loss and gradients
# ---------------------------------------------------------------------------

Batch = Sequence[tuple[Visit, np.ndarray]]


def _scatter_add_rows(target: np.ndarray, row_ids: np.ndarray, rows: np.ndarray) -> None:
    """target[row_ids[k]] += rows[k] with duplicate ids, in a fixed order."""
    order = np.argsort(row_ids, kind="stable")
    sorted_ids = row_ids[order]
    boundaries = np.flatnonzero(np.diff(sorted_ids)) + 1
    starts = np.concatenate(([0], boundaries))
    sums = np.add.reduceat(rows[order], starts, axis=0)
    target[sorted_ids[starts]] += sums


@dataclass
class _BatchData:
    codes_flat: np.ndarray   # (N,) code ids over all batch visits
    visit_ids: np.ndarray    # (N,) owning batch position per code instance
    indptr: np.ndarray       # (B + 1,) segment starts into codes_flat
    counts: np.ndarray       # (B,) codes per visit
    demo: np.ndarray         # (B, demo_dim)
    target_sums: np.ndarray  # (B, n_targets) sum of window target vectors
    n_windows: np.ndarray    # (B,) window rows per visit


def _assemble(batch: Batch, params: ModelParams) -> _BatchData:
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    n_targets, demo_dim, n_codes = params.n_targets, params.demo_dim, params.n_codes
    counts = np.empty(len(batch), dtype=np.int64)
    demo = np.empty((len(batch), demo_dim), dtype=np.float64)
    target_sums = np.zeros((len(batch), n_targets), dtype=np.float64)
    n_windows = np.zeros(len(batch), dtype=np.int64)
    code_lists = []
    for b, (visit, targets) in enumerate(batch):
        if visit.codes[-1] >= n_codes:
            raise ValueError(f"code index {visit.codes[-1]} out of range")
        if visit.demo_dim != demo_dim:
            raise ValueError(
                f"visit demographic length {visit.demo_dim} != model demo_dim {demo_dim}"
            )
        code_lists.append(np.fromiter(visit.codes, dtype=np.int64))
        counts[b] = len(visit.codes)
        demo[b] = visit.demographics
        targets = np.asarray(targets, dtype=np.float64)
        if targets.size:
            targets = targets.reshape(-1, n_targets)
            target_sums[b] = targets.sum(axis=0)
            n_windows[b] = targets.shape[0]
    codes_flat = np.concatenate(code_lists)
    visit_ids = np.repeat(np.arange(len(batch)), counts)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    return _BatchData(codes_flat, visit_ids, indptr, counts, demo, target_sums, n_windows)


def _forward(data: _BatchData, params: ModelParams):
    gathered = params.code_weights.T[data.codes_flat]            # (N, code_dim)
    pre_u = np.add.reduceat(gathered, data.indptr[:-1], axis=0) + params.code_bias
    u = np.maximum(pre_u, 0.0)
    stacked = np.concatenate([u, data.demo], axis=1)
    pre_v = stacked @ params.visit_weights.T + params.visit_bias
    v = np.maximum(pre_v, 0.0)
    logits = v @ params.softmax_weights.T + params.softmax_bias
    probs = _softmax_rows(logits)
    return pre_u, u, stacked, pre_v, v, probs


def _visit_losses(data: _BatchData, probs: np.ndarray) -> np.ndarray:
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    rest = data.n_windows[:, None] - data.target_sums
    return -(data.target_sums * np.log(clamped)).sum(axis=1) - (rest * np.log1p(-clamped)).sum(axis=1)


def _code_losses(data: _BatchData, params: ModelParams, need_grad: bool):
    """Per-visit skip-gram losses and, optionally, the gradient w.r.t. Wc."""
    n_codes, code_dim = params.n_codes, params.code_dim
    mask = data.counts[data.visit_ids] >= 2
    losses = np.zeros(len(data.counts), dtype=np.float64)
    if not mask.any():
        grad = np.zeros_like(params.code_weights) if need_grad else None
        return losses, grad

    centers = data.codes_flat[mask]
    owners = data.visit_ids[mask]
    pair_counts = (data.counts[owners] - 1).astype(np.float64)

    positive = np.maximum(params.code_weights, 0.0)               # (m, C)
    center_cols = positive[:, centers]                            # (m, N2)
    logits = positive.T @ center_cols                             # (C, N2)
    mx = logits.max(axis=0)
    expd = np.exp(logits - mx)
    z = expd.sum(axis=0)
    lse = mx + np.log(z)

    # per-visit column sums of ReLU(Wc), gathered back to each center
    gathered = positive.T[data.codes_flat]                        # (N, m)
    visit_sums = np.add.reduceat(gathered, data.indptr[:-1], axis=0)  # (B, m)
    center_sums = visit_sums[owners]                              # (N2, m)
    dot_sum = np.einsum("mn,nm->n", center_cols, center_sums)
    dot_self = (center_cols * center_cols).sum(axis=0)
    per_center = pair_counts * lse - (dot_sum - dot_self)
    np.add.at(losses, owners, per_center)

    if not need_grad:
        return losses, None

    probs = expd / z                                              # (C, N2)
    grad_pos_t = probs @ (center_cols.T * pair_counts[:, None])   # (C, m)
    # rows accumulated at each center's own column: the softmax pullback plus
    # the pairwise term, which hits a code once as center and once as context
    context_pull = (positive @ probs).T * pair_counts[:, None]    # (N2, m)
    pair_rows = -2.0 * (center_sums - center_cols.T)
    _scatter_add_rows(grad_pos_t, centers, context_pull + pair_rows)
    grad = grad_pos_t.T * (params.code_weights > 0.0)
    return losses, grad


def unified_loss(batch: Batch, params: ModelParams, alpha: float = 1.0) -> LossBreakdown:
    """Mean over the batch of visit loss plus alpha times code loss."""
    data = _assemble(batch, params)
    *_, probs = _forward(data, params)
    visit_mean = _visit_losses(data, probs).sum() / len(batch)
    code_mean = _code_losses(data, params, need_grad=False)[0].sum() / len(batch)
    return LossBreakdown.combine(visit_mean, code_mean, alpha)


def backward(batch: Batch, params: ModelParams, alpha: float = 1.0):
    """Loss breakdown and exact gradients of the batch-mean unified loss.

    Gradients are averaged over the batch; the code objective's contribution
    is scaled by ``alpha`` and reaches only Wc (through the ReLU mask).
    Raises :class:`NonFiniteLossError` naming the offending term.
    """
    data = _assemble(batch, params)
    pre_u, u, stacked, pre_v, v, probs = _forward(data, params)
    scale = 1.0 / len(batch)

    visit_mean = _visit_losses(data, probs).sum() * scale
    if not np.isfinite(visit_mean):
        raise NonFiniteLossError("visit")

    # d(loss)/d(logits) for -y log p~ - (1-y) log(1-p~) through the softmax;
    # coordinates pushed onto the clamp have zero derivative
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    ratio = np.zeros_like(probs)
    np.divide(probs, 1.0 - probs, out=ratio, where=inside)
    rest = data.n_windows[:, None] - data.target_sums
    pulled = np.where(inside, rest * ratio - data.target_sums, 0.0)
    dlogits = (pulled - probs * pulled.sum(axis=1, keepdims=True)) * scale

    grads = Gradients.zeros_like(params)
    grads.softmax_bias += dlogits.sum(axis=0)
    grads.softmax_weights += dlogits.T @ v
    dv = dlogits @ params.softmax_weights
    dpre_v = np.where(pre_v > 0.0, dv, 0.0)
    grads.visit_bias += dpre_v.sum(axis=0)
    grads.visit_weights += dpre_v.T @ stacked
    dstacked = dpre_v @ params.visit_weights
    dpre_u = np.where(pre_u > 0.0, dstacked[:, : params.code_dim], 0.0)
    grads.code_bias += dpre_u.sum(axis=0)
    grad_wc_t = np.zeros((params.n_codes, params.code_dim))
    _scatter_add_rows(grad_wc_t, data.codes_flat, dpre_u[data.visit_ids])
    grads.code_weights += grad_wc_t.T

    if alpha != 0.0:
        code_losses, code_grad = _code_losses(data, params, need_grad=True)
        code_mean = code_losses.sum() * scale
        if not np.isfinite(code_mean):
            raise NonFiniteLossError("code")
        grads.code_weights += alpha * scale * code_grad
    else:
        code_mean = _code_losses(data, params, need_grad=False)[0].sum() * scale
        if not np.isfinite(code_mean):
            raise NonFiniteLossError("code")

    return LossBreakdown.combine(visit_mean, code_mean, alpha), grads


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    vocabulary_tokens: Sequence[str],
    vocabulary_hash: str,
) -> None:
    """Write a versioned npz checkpoint: dims, vocabulary, and the six arrays."""
    np.savez(
        Path(path),
        format_version=np.int64(CHECKPOINT_VERSION),
        demo_dim=np.int64(params.demo_dim),
        vocab_hash=np.str_(vocabulary_hash),
        vocab_tokens=np.array(list(vocabulary_tokens), dtype=np.str_),
        **params.arrays(),
    )


def load_checkpoint(path: str | Path) -> tuple[ModelParams, tuple[str, ...], str]:
    """Read a checkpoint; returns (params, vocabulary tokens, vocabulary hash)."""
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params = ModelParams(**{name: data[name] for name in _ARRAY_NAMES})
        tokens = tuple(str(t) for t in data["vocab_tokens"])
        vocab_hash = str(data["vocab_hash"])
        if params.demo_dim != int(data["demo_dim"]):
            raise ValueError("checkpoint demo_dim does not match array shapes")
    return params, tokens, vocab_hash
