"""Evaluation harness: clustering conformity, next-visit recall, and AUC probes.

Metrics are deliberately self-contained (k-means, NMI, rank-statistic AUC,
top-k recall) so each can be cross-checked against brute-force oracles.
Probe classifiers are small linear models trained by mini-batch Adadelta,
re-initialized per evaluation from the probe seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, GrouperMap, Visit, Vocabulary, group_targets, to_multi_hot
from .model import ModelParams, _softmax_rows, intermediate_rep, visit_rep
from .validation import derive_seed

EmbedFn = Callable[[Visit], np.ndarray]


@dataclass(frozen=True)
class CodeEmbeddings:
    """Non-negative code vectors as columns, tied to a vocabulary."""

    vectors: np.ndarray  # (dim, n_codes)
    vocabulary: Vocabulary

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != len(self.vocabulary):
            raise ValueError(
                f"expected (dim, {len(self.vocabulary)}) vectors, got {vectors.shape}"
            )
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embeddings must be finite")
        if vectors.min() < 0:
            raise ValueError("embeddings must be non-negative")
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def from_params(cls, params: ModelParams, vocabulary: Vocabulary) -> "CodeEmbeddings":
        return cls(np.maximum(params.code_weights, 0.0), vocabulary)

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ProbeConfig:
    """Shared settings of the recall and AUC probes."""

    top_k: int = 30
    epochs: int = 10
    split_ratio: float = 0.8
    seed: int = 0
    l2_grid: tuple[float, ...] = (0.0, 1e-3, 1e-1)
    batch_size: int = 256
    cv_folds: int = 5

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if not self.l2_grid:
            raise ValueError("l2_grid must be non-empty")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")


@dataclass(frozen=True)
class MetricRecord:
    name: str
    value: float
    fingerprint: str


@dataclass
class EvalReport:
    """Named metric values, each tagged with the configuration fingerprint."""

    records: list[MetricRecord] = field(default_factory=list)

    def add(self, name: str, value: float, config: dict) -> None:
        self.records.append(MetricRecord(name, float(value), fingerprint(config)))

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="") as handle:
            handle.write("metric,value,fingerprint\n")
            for rec in self.records:
                handle.write(f"{rec.name},{rec.value!r},{rec.fingerprint}\n")

    def format_table(self) -> str:
        width = max([len("metric")] + [len(r.name) for r in self.records])
        lines = [f"{'metric':<{width}}  {'value':>12}  fingerprint"]
        for rec in self.records:
            lines.append(f"{rec.name:<{width}}  {rec.value:>12.6f}  {rec.fingerprint}")
        return "\n".join(lines)


def fingerprint(config: dict) -> str:
    """Short stable digest of a configuration mapping."""
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Clustering and mutual information
# ---------------------------------------------------------------------------


def kmeans(
    vectors,
    k: int,
    seed: int,
    *,
    max_iter: int = 300,
    return_history: bool = False,
):
    """Lloyd's algorithm with k-means++ seeding, deterministic given the seed.

    Iterates until the assignment reaches a fixpoint or ``max_iter`` passes.
    An empty cluster claims the point currently farthest from its own
    centroid (skipped when every point sits exactly on its centroid, so
    duplicates never get split apart in the degenerate case).

    Returns the assignment array, plus the per-iteration SSE history when
    ``return_history`` is set.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2:
        points = points.reshape(len(points), -1)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    dist_sq = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist_sq.sum()
        if total > 0:
            pick = rng.choice(n, p=dist_sq / total)
        else:
            pick = int(rng.integers(n))
        centers[j] = points[pick]
        dist_sq = np.minimum(dist_sq, ((points - centers[j]) ** 2).sum(axis=1))

    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iter):
        sq_dists = (
            (points * points).sum(axis=1)[:, None]
            - 2.0 * points @ centers.T
            + (centers * centers).sum(axis=1)[None, :]
        )
        new_assignment = sq_dists.argmin(axis=1)
        own = ((points - centers[new_assignment]) ** 2).sum(axis=1)
        for empty in np.setdiff1d(np.arange(k), new_assignment):
            if own.max() <= 0.0:
                break
            claimed = int(own.argmax())
            new_assignment[claimed] = empty
            own[claimed] = 0.0
        history.append(float(((points - centers[new_assignment]) ** 2).sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = points[assignment == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    if return_history:
        return assignment, history
    return assignment


def nmi(assignment, truth) -> float:
    """Normalized mutual information with arithmetic-mean normalization.

    When both labelings are constant (zero entropy on both sides) the value
    is defined as 1.0.
    """
    a = np.asarray(assignment)
    t = np.asarray(truth)
    if a.shape != t.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("assignment and truth must be equal-length non-empty 1-d arrays")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    table = np.zeros((ai.max() + 1, ti.max() + 1), dtype=np.float64)
    np.add.at(table, (ai, ti), 1.0)
    joint = table / n
    pa = joint.sum(axis=1)
    pt = joint.sum(axis=0)
    nz = joint > 0
    mutual = float((joint[nz] * np.log(joint[nz] / np.outer(pa, pt)[nz])).sum())
    ent_a = float(-(pa[pa > 0] * np.log(pa[pa > 0])).sum())
    ent_t = float(-(pt[pt > 0] * np.log(pt[pt > 0])).sum())
    if ent_a == 0.0 and ent_t == 0.0:
        return 1.0
    return mutual / ((ent_a + ent_t) / 2.0)


def code_cluster_nmi(embeddings: CodeEmbeddings, grouper: GrouperMap, seed: int) -> float:
    """Cluster code columns into n_groups and score conformity to the grouper."""
    truth = grouper.labels(embeddings.n_codes)
    assignment = kmeans(embeddings.vectors.T, grouper.n_groups, seed)
    return nmi(assignment, truth)


def permutation_nmi_baseline(
    assignment, truth, n_shuffles: int, seed: int
) -> np.ndarray:
    """NMI of the assignment against random permutations of the truth labels."""
    truth = np.asarray(truth)
    rng = np.random.default_rng(seed)
    return np.array(
        [nmi(assignment, truth[rng.permutation(truth.size)]) for _ in range(n_shuffles)]
    )


# ---------------------------------------------------------------------------
# Rank metrics
# ---------------------------------------------------------------------------


def auc(labels, scores) -> float:
    """Area under the ROC curve by the rank statistic, ties counted 1/2."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-d arrays")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(y.size, dtype=np.float64)
    sorted_scores = s[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [y.size]))
    for lo, hi in zip(starts, ends):  # average rank within each tie group
        ranks[order[lo:hi]] = 0.5 * (lo + hi - 1) + 1.0
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores per row, ties broken by ascending index."""
    scores = np.atleast_2d(scores)
    k = min(k, scores.shape[1])
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def topk_recall(scores, targets, k: int) -> float:
    """Mean over rows of |top-k predictions intersected with truth| / |truth|."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets))
    if scores.shape != targets.shape:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} differ")
    truth_sizes = targets.sum(axis=1)
    if np.any(truth_sizes == 0):
        raise ValueError("every target row needs at least one positive")
    picked = top_k_indices(scores, k)
    hits = np.take_along_axis(targets, picked, axis=1).sum(axis=1)
    return float((hits / truth_sizes).mean())


# ---------------------------------------------------------------------------
# Visit representations
# ---------------------------------------------------------------------------


def representation_fn(
    kind: str,
    params: ModelParams | None,
    vocabulary: Vocabulary,
) -> EmbedFn:
    """Visit-embedding function for one of {med2vec, multihot, sumcode}.

    multihot and sumcode append the demographic vector when present; the
    learned representation consumes demographics inside the network.
    """
    size = len(vocabulary)
    if kind == "multihot":
        def embed(visit: Visit) -> np.ndarray:
            return np.concatenate([to_multi_hot(visit, size), visit.demographics])

        return embed
    if params is None:
        raise ValueError(f"representation {kind!r} requires model parameters")
    if kind == "med2vec":
        def embed(visit: Visit) -> np.ndarray:
            u = intermediate_rep(to_multi_hot(visit, params.n_codes), params)
            return visit_rep(u, np.asarray(visit.demographics), params)

        return embed
    if kind == "sumcode":
        positive = np.maximum(params.code_weights, 0.0)

        def embed(visit: Visit) -> np.ndarray:
            summed = positive[:, list(visit.codes)].sum(axis=1)
            return np.concatenate([summed, visit.demographics])

        return embed
    raise ValueError(f"unknown representation kind {kind!r}")


def _embed_visits(visits: Sequence[Visit], embed: EmbedFn) -> np.ndarray:
    return np.stack([embed(v) for v in visits])


def consecutive_pairs(corpus: Corpus) -> list[tuple[Visit, Visit]]:
    """All (visit_t, visit_t+1) pairs, never crossing a patient boundary."""
    pairs = []
    for patient in corpus.patients:
        for a, b in zip(patient.visits, patient.visits[1:]):
            pairs.append((a, b))
    return pairs


# ---------------------------------------------------------------------------
# Probe classifiers (linear models trained by mini-batch Adadelta)
# ---------------------------------------------------------------------------


def _adadelta_update(grad, sq_grad, sq_update, rho=0.95, eps=1e-6):
    sq_grad *= rho
    sq_grad += (1.0 - rho) * grad * grad
    delta = -np.sqrt(sq_update + eps) / np.sqrt(sq_grad + eps) * grad
    sq_update *= rho
    sq_update += (1.0 - rho) * delta * delta
    return delta


def _train_softmax_probe(features, targets, epochs, l2, batch_size, seed):
    """Multi-label softmax regression on normalized targets; returns (W, b)."""
    n, dim = features.shape
    n_classes = targets.shape[1]
    norm_targets = targets / targets.sum(axis=1, keepdims=True)
    weights = np.zeros((n_classes, dim))
    bias = np.zeros(n_classes)
    acc = [np.zeros_like(weights), np.zeros_like(weights),
           np.zeros_like(bias), np.zeros_like(bias)]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x, y = features[idx], norm_targets[idx]
            probs = _softmax_rows(x @ weights.T + bias)
            dz = (probs - y) / len(idx)
            gw = dz.T @ x + 2.0 * l2 * weights
            gb = dz.sum(axis=0)
            weights += _adadelta_update(gw, acc[0], acc[1])
            bias += _adadelta_update(gb, acc[2], acc[3])
    return weights, bias


def train_logistic_probe(features, labels, epochs, l2, batch_size, seed):
    """Binary logistic regression by mini-batch Adadelta; returns (w, b)."""
    n, dim = features.shape
    y = np.asarray(labels, dtype=np.float64)
    weights = np.zeros(dim)
    bias = 0.0
    acc = [np.zeros_like(weights), np.zeros_like(weights), np.zeros(1), np.zeros(1)]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = features[idx]
            z = x @ weights + bias
            p = 1.0 / (1.0 + np.exp(-z))
            dz = (p - y[idx]) / len(idx)
            gw = x.T @ dz + 2.0 * l2 * weights
            gb = np.array([dz.sum()])
            weights += _adadelta_update(gw, acc[0], acc[1])
            bias += float(_adadelta_update(gb, acc[2], acc[3])[0])
    return weights, bias


def _cv_folds(n: int, folds: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    return [(np.concatenate([order[j::folds] for j in range(folds) if j != i]), order[i::folds])
            for i in range(folds)]


def _select_l2(features, targets_or_labels, config: ProbeConfig, metric):
    """Pick the l2 weight maximizing the cross-validated metric (first wins ties)."""
    if len(config.l2_grid) == 1:
        return config.l2_grid[0]
    folds = _cv_folds(len(features), config.cv_folds, derive_seed(config.seed, "probe-cv"))
    best_l2, best_score = config.l2_grid[0], -np.inf
    for l2 in config.l2_grid:
        scores = []
        for train_idx, val_idx in folds:
            score = metric(features[train_idx], targets_or_labels[train_idx],
                           features[val_idx], targets_or_labels[val_idx], l2)
            if score is not None:
                scores.append(score)
        mean_score = float(np.mean(scores)) if scores else -np.inf
        if mean_score > best_score + 1e-12:
            best_l2, best_score = l2, mean_score
    return best_l2


def recall_probe(
    train_corpus: Corpus,
    test_corpus: Corpus,
    embed: EmbedFn,
    grouper: GrouperMap,
    config: ProbeConfig,
) -> float:
    """Top-k recall of a fresh softmax classifier predicting next-visit groups.

    The classifier maps the representation of visit t to the grouped codes of
    visit t+1; it is trained on the train corpus' consecutive pairs and
    scored on the test corpus' pairs.
    """
    train_pairs = consecutive_pairs(train_corpus)
    test_pairs = consecutive_pairs(test_corpus)
    if not train_pairs or not test_pairs:
        raise ValueError("both corpora need at least one consecutive-visit pair")

    x_train = _embed_visits([a for a, _ in train_pairs], embed)
    y_train = np.stack([group_targets(b, grouper) for _, b in train_pairs])
    x_test = _embed_visits([a for a, _ in test_pairs], embed)
    y_test = np.stack([group_targets(b, grouper) for _, b in test_pairs])

    probe_seed = derive_seed(config.seed, "recall-probe")

    def metric(xt, yt, xv, yv, l2):
        w, b = _train_softmax_probe(xt, yt, config.epochs, l2, config.batch_size, probe_seed)
        return topk_recall(xv @ w.T + b, yv, config.top_k)

    l2 = _select_l2(x_train, y_train, config, metric)
    weights, bias = _train_softmax_probe(
        x_train, y_train, config.epochs, l2, config.batch_size, probe_seed
    )
    return topk_recall(x_test @ weights.T + bias, y_test, config.top_k)


def frequency_topk_recall(
    train_corpus: Corpus,
    test_corpus: Corpus,
    grouper: GrouperMap,
    k: int,
) -> float:
    """Recall of always predicting the groups most frequent in the train corpus."""
    counts = np.zeros(grouper.n_groups)
    for visit in train_corpus.iter_visits():
        counts += group_targets(visit, grouper)
    test_pairs = consecutive_pairs(test_corpus)
    if not test_pairs:
        raise ValueError("test corpus has no consecutive-visit pairs")
    targets = np.stack([group_targets(b, grouper) for _, b in test_pairs])
    scores = np.tile(counts, (len(test_pairs), 1))
    return topk_recall(scores, targets, k)


def auc_probe(
    train_corpus: Corpus,
    train_labels,
    test_corpus: Corpus,
    test_labels,
    embed: EmbedFn,
    config: ProbeConfig,
) -> float:
    """AUC of a logistic-regression probe over per-visit binary labels."""
    value, _ = auc_probe_with_weights(
        train_corpus, train_labels, test_corpus, test_labels, embed, config
    )
    return value


def auc_probe_with_weights(
    train_corpus: Corpus,
    train_labels,
    test_corpus: Corpus,
    test_labels,
    embed: EmbedFn,
    config: ProbeConfig,
):
    """AUC probe that also returns the fitted (weights, bias) for reuse."""
    y_train = np.asarray(train_labels, dtype=np.float64)
    y_test = np.asarray(test_labels, dtype=np.float64)
    if y_train.shape != (train_corpus.total_visits,):
        raise ValueError("train labels must align with train corpus visits")
    if y_test.shape != (test_corpus.total_visits,):
        raise ValueError("test labels must align with test corpus visits")
    if len(np.unique(y_test)) < 2:
        raise ValueError("test set must contain both classes")

    x_train = _embed_visits(list(train_corpus.iter_visits()), embed)
    x_test = _embed_visits(list(test_corpus.iter_visits()), embed)
    probe_seed = derive_seed(config.seed, "auc-probe")

    def metric(xt, yt, xv, yv, l2):
        if len(np.unique(yv)) < 2 or len(np.unique(yt)) < 2:
            return None
        w, b = train_logistic_probe(xt, yt, config.epochs, l2, config.batch_size, probe_seed)
        return auc(yv.astype(np.int64), xv @ w + b)

    l2 = _select_l2(x_train, y_train, config, metric)
    weights, bias = train_logistic_probe(
        x_train, y_train, config.epochs, l2, config.batch_size, probe_seed
    )
    return auc(y_test.astype(np.int64), x_test @ weights + bias), (weights, bias)


# ---------------------------------------------------------------------------
# Nearest neighbors
# ---------------------------------------------------------------------------


def nearest_codes(
    embeddings: CodeEmbeddings, query: int, top: int
) -> list[tuple[int, float]]:
    """Closest codes to the query column by cosine similarity, query excluded.

    Zero-norm columns get similarity 0; ties break by ascending code index.
    """
    n = embeddings.n_codes
    if not 0 <= query < n:
        raise ValueError(f"query index {query} out of range")
    if not 1 <= top <= n - 1:
        raise ValueError(f"top must lie in [1, {n - 1}]")
    vectors = embeddings.vectors
    norms = np.linalg.norm(vectors, axis=0)
    sims = np.zeros(n)
    if norms[query] > 0:
        valid = norms > 0
        sims[valid] = (vectors[:, valid].T @ vectors[:, query]) / (
            norms[valid] * norms[query]
        )
    sims[query] = -np.inf  # exclude the query itself
    order = np.argsort(-sims, kind="stable")[:top]
    return [(int(i), float(sims[i])) for i in order]
