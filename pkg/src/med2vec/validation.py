"""Input validation helpers and deterministic seed derivation."""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus, Visit, corpus_from_sequences


def derive_seed(seed: int, label: str) -> int:
    """Stable named sub-seed so independent components draw independent streams."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def check_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    return array


def check_binary_vector(x, size: int) -> np.ndarray:
    """Validate a {0,1}-valued vector of the expected length."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (size,):
        raise ValueError(f"expected a vector of length {size}, got shape {x.shape}")
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("vector must be 0/1 valued")
    return x


def check_vector(name: str, x, size: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (size,):
        raise ValueError(f"{name} must have shape ({size},), got {x.shape}")
    return check_finite(name, x)


def ensure_corpus(X) -> Corpus:
    """Accept a Corpus, or nested token sequences (patients -> visits -> tokens)."""
    if isinstance(X, Corpus):
        return X
    try:
        return corpus_from_sequences(X)
    except (TypeError, ValueError) as exc:
        raise TypeError(
            "X must be a Corpus or a sequence of patients, each a sequence of "
            f"visits given as code-token iterables ({exc})"
        ) from exc


def ensure_visits(X) -> list[Visit]:
    """Accept a Corpus or an iterable of Visit objects."""
    if isinstance(X, Corpus):
        return list(X.iter_visits())
    if isinstance(X, Visit):
        return [X]
    visits = list(X)
    if not all(isinstance(v, Visit) for v in visits):
        raise TypeError("expected a Corpus or an iterable of Visit objects")
    return visits
