"""Shared test utilities: independent oracles and instance generators.

The oracles here are deliberately naive (double loops, explicit softmax,
all-pairs rank counts, central finite differences) so they stay independent
of the vectorized implementations they check.
"""

from __future__ import annotations

import math

import numpy as np

from med2vec.corpus import Visit, to_multi_hot
from med2vec.model import ModelParams, PROB_CLAMP, init_params, unified_loss

# FD step 1e-5 crosses a ReLU kink whenever a pre-activation magnitude is
# below the step, so instances are resampled with a 10x safety margin.
FD_STEP = 1e-5
KINK_MARGIN = 1e-4


def rel_error(a: float, b: float, floor: float = 1e-4) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ---------------------------------------------------------------------------
# Random model instances
# ---------------------------------------------------------------------------


def random_params(rng, n_codes=20, code_dim=8, visit_dim=6, demo_dim=3, n_targets=5):
    return init_params(
        n_codes, code_dim, visit_dim, demo_dim, n_targets, seed=int(rng.integers(2**31))
    )


def random_batch(rng, params, n_visits=4, window=1, max_codes=5):
    batch = []
    for _ in range(n_visits):
        size = int(rng.integers(1, max_codes + 1))
        codes = tuple(int(c) for c in rng.choice(params.n_codes, size=size, replace=False))
        demo = tuple(float(x) for x in rng.normal(size=params.demo_dim))
        n_ctx = int(rng.integers(0, 2 * window + 1))
        targets = (rng.random((n_ctx, params.n_targets)) < 0.4).astype(float)
        batch.append((Visit(codes, demo), targets))
    return batch


def _min_preactivation(batch, params) -> float:
    """Smallest |pre-ReLU| magnitude over the batch, including Wc entries."""
    smallest = float(np.abs(params.code_weights).min())
    for visit, _ in batch:
        x = to_multi_hot(visit, params.n_codes)
        pre_u = params.code_weights @ x + params.code_bias
        stacked = np.concatenate([np.maximum(pre_u, 0.0), visit.demographics])
        pre_v = params.visit_weights @ stacked + params.visit_bias
        smallest = min(smallest, float(np.abs(pre_u).min()), float(np.abs(pre_v).min()))
    return smallest


def random_instance_away_from_kinks(rng, *, margin=KINK_MARGIN, **dims):
    """(params, batch) resampled until every pre-activation clears the margin."""
    window = dims.pop("window", 1)
    n_visits = dims.pop("n_visits", 4)
    max_codes = dims.pop("max_codes", 5)
    while True:
        params = random_params(rng, **dims)
        batch = random_batch(rng, params, n_visits=n_visits, window=window, max_codes=max_codes)
        if _min_preactivation(batch, params) >= margin:
            return params, batch


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_gradients(batch, params: ModelParams, alpha: float, step=FD_STEP):
    """Central finite differences of the unified loss for every parameter."""
    out = {}
    for name, array in params.arrays().items():
        grad = np.zeros_like(array)
        flat = array.ravel()
        grad_flat = grad.ravel()
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            loss_plus = unified_loss(batch, params, alpha).total
            flat[idx] = original - step
            loss_minus = unified_loss(batch, params, alpha).total
            flat[idx] = original
            grad_flat[idx] = (loss_plus - loss_minus) / (2.0 * step)
        out[name] = grad
    return out


def max_gradient_error(analytic: dict, numeric: dict) -> tuple[float, str]:
    worst, worst_name = 0.0, ""
    for name, fd in numeric.items():
        an = analytic[name]
        for a, f in zip(an.ravel(), fd.ravel()):
            err = rel_error(a, f)
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name


# ---------------------------------------------------------------------------
# Naive objective oracles
# ---------------------------------------------------------------------------


def naive_softmax(logits):
    shift = max(logits)
    exps = [math.exp(z - shift) for z in logits]
    total = sum(exps)
    return [e / total for e in exps]


def naive_visit_loss(window_targets, v, params: ModelParams) -> float:
    """Direct per-element evaluation of the window cross-entropy."""
    logits = [
        sum(params.softmax_weights[g, j] * v[j] for j in range(params.visit_dim))
        + params.softmax_bias[g]
        for g in range(params.n_targets)
    ]
    probs = naive_softmax(logits)
    total = 0.0
    for target in window_targets:
        for g in range(params.n_targets):
            p = min(max(probs[g], PROB_CLAMP), 1.0 - PROB_CLAMP)
            total += -target[g] * math.log(p) - (1.0 - target[g]) * math.log(1.0 - p)
    return total


def naive_code_loss(visit: Visit, params: ModelParams) -> float:
    """Double loop over ordered pairs with an explicit softmax per center."""
    positive = np.maximum(params.code_weights, 0.0)
    total = 0.0
    for i in visit.codes:
        logits = [float(positive[:, k] @ positive[:, i]) for k in range(params.n_codes)]
        probs = naive_softmax(logits)
        for j in visit.codes:
            if j != i:
                total += -math.log(probs[j])
    return total


# ---------------------------------------------------------------------------
# Naive metric oracles
# ---------------------------------------------------------------------------


def naive_nmi(assignment, truth) -> float:
    n = len(assignment)
    a_values = sorted(set(assignment))
    t_values = sorted(set(truth))
    counts = {(a, t): 0 for a in a_values for t in t_values}
    for a, t in zip(assignment, truth):
        counts[(a, t)] += 1
    a_counts = {a: sum(counts[(a, t)] for t in t_values) for a in a_values}
    t_counts = {t: sum(counts[(a, t)] for a in a_values) for t in t_values}
    mutual = 0.0
    for a in a_values:
        for t in t_values:
            joint = counts[(a, t)] / n
            if joint > 0:
                mutual += joint * math.log(joint / ((a_counts[a] / n) * (t_counts[t] / n)))
    ent_a = -sum((c / n) * math.log(c / n) for c in a_counts.values() if c)
    ent_t = -sum((c / n) * math.log(c / n) for c in t_counts.values() if c)
    if ent_a == 0.0 and ent_t == 0.0:
        return 1.0
    return mutual / ((ent_a + ent_t) / 2.0)


def naive_auc(labels, scores) -> float:
    """All-pairs comparison of positives against negatives, ties worth 1/2."""
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in positives:
        for q in negatives:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(positives) * len(negatives))


def naive_topk_recall(scores, targets, k: int) -> float:
    """Selection by repeated max scan with ties broken by lowest index."""
    recalls = []
    for row, truth in zip(scores, targets):
        remaining = list(range(len(row)))
        picked = []
        for _ in range(min(k, len(row))):
            best = remaining[0]
            for idx in remaining[1:]:
                if row[idx] > row[best]:
                    best = idx
            picked.append(best)
            remaining.remove(best)
        true_set = {i for i, t in enumerate(truth) if t == 1}
        recalls.append(len(true_set & set(picked)) / len(true_set))
    return sum(recalls) / len(recalls)
