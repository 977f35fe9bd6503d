"""Scikit-learn style estimator wrapping corpus preparation and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import GrouperMap
from .evaluation import CodeEmbeddings, representation_fn
from .trainer import TrainConfig, train
from .validation import ensure_corpus, ensure_visits


class Med2Vec(BaseEstimator, TransformerMixin):
    """Learns non-negative code and visit embeddings from visit sequences.

    ``fit`` accepts a :class:`~med2vec.corpus.Corpus` or nested token
    sequences (patients -> visits -> code tokens); ``transform`` maps visits
    to their learned representations.  Fitted state lives in ``params_``,
    ``vocabulary_``, ``code_embeddings_`` and ``train_log_``.
    """

    def __init__(
        self,
        code_dim: int = 40,
        visit_dim: int = 40,
        window: int = 1,
        epochs: int = 10,
        batch_size: int = 1000,
        alpha: float = 1.0,
        use_grouper: bool = True,
        adadelta_rho: float = 0.95,
        adadelta_eps: float = 1e-6,
        random_state: int = 0,
    ):
        self.code_dim = code_dim
        self.visit_dim = visit_dim
        self.window = window
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.use_grouper = use_grouper
        self.adadelta_rho = adadelta_rho
        self.adadelta_eps = adadelta_eps
        self.random_state = random_state

    def fit(self, X, y=None, *, grouper: GrouperMap | None = None):
        """Train on a corpus; ``grouper`` supplies prediction targets when used.

        With ``use_grouper`` off (or no grouper available) targets fall back
        to exact codes.
        """
        corpus = ensure_corpus(X)
        use_grouper = self.use_grouper and grouper is not None
        config = TrainConfig(
            code_dim=self.code_dim,
            visit_dim=self.visit_dim,
            window=self.window,
            epochs=self.epochs,
            batch_size=self.batch_size,
            alpha=self.alpha,
            seed=self.random_state,
            adadelta_rho=self.adadelta_rho,
            adadelta_eps=self.adadelta_eps,
            use_grouper=use_grouper,
        )
        self.params_, self.train_log_ = train(
            corpus, grouper if use_grouper else None, config
        )
        self.vocabulary_ = corpus.vocabulary
        self.code_embeddings_ = CodeEmbeddings.from_params(self.params_, self.vocabulary_)
        return self

    def transform(self, X) -> np.ndarray:
        """Visit representations, one row per visit, all entries >= 0."""
        check_is_fitted(self, "params_")
        visits = ensure_visits(X)
        embed = representation_fn("med2vec", self.params_, self.vocabulary_)
        return np.stack([embed(v) for v in visits])
