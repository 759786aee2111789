"""Thin scikit-learn style wrappers around pretraining and the task heads.

These exist so the package plays well with sklearn tooling (get_params,
set_params, clone, pipelines that pass opaque X through).  Samples here are
graph-relational, so X is a tuple instead of a feature matrix:

    ScatterEmbedder.fit(graph)                    -> embeddings_
    CouplingRegressor.fit((g, emb, pairs), y)     -> predict((g, emb, pairs))
    GroundCapClassifier.fit((g, emb, ids), y)     -> predict((g, emb, ids))

`graph` may be a HomoGraph or a labeled circuit graph (it gets homogenized).
Parameter validation happens at fit time, sklearn style.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._errors import ContractError
from .graphs import HomoGraph, homogenize
from .scatter import EmbeddingMatrix, PretrainConfig, encode, normalize_embeddings, pretrain
from .tasks import (
    EDGE_REGRESSION,
    NODE_CLASSIFICATION,
    TaskConfig,
    predict_edges,
    predict_node_classes,
    train_task,
)


def _as_homograph(X):
    if isinstance(X, HomoGraph):
        return X
    if hasattr(X, "candidate_edges"):
        return homogenize(X)
    raise ContractError(f"expected a graph, got {type(X).__name__}")


def _unpack_triplet(X):
    try:
        g, emb, indices = X
    except (TypeError, ValueError):
        raise ContractError(
            "X must be a (graph, embeddings, indices) triplet") from None
    return _as_homograph(g), emb, indices


def _as_embedding_matrix(emb):
    if isinstance(emb, EmbeddingMatrix):
        return emb
    arr = np.asarray(emb, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("embeddings must be a 2-D matrix")
    return EmbeddingMatrix(ad.Tensor(arr))


class ScatterEmbedder(TransformerMixin, BaseEstimator):
    """Self-supervised node embedder; transform() encodes any graph."""

    def __init__(self, hidden_dim=256, n_layers=4, activation="tanh",
                 dropout_rate=0.3, epochs=50, learning_rate=1e-6,
                 ema_tau=0.99, scatter_weight=1.0, eps=1e-8, seed=0,
                 degree_feature=True, ema_per_step=False,
                 subgraph_threshold=50000, subgraph_hops=2,
                 subgraph_fanout=10):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.ema_tau = ema_tau
        self.scatter_weight = scatter_weight
        self.eps = eps
        self.seed = seed
        self.degree_feature = degree_feature
        self.ema_per_step = ema_per_step
        self.subgraph_threshold = subgraph_threshold
        self.subgraph_hops = subgraph_hops
        self.subgraph_fanout = subgraph_fanout

    def _config(self):
        return PretrainConfig(**self.get_params())

    def fit(self, X, y=None):
        g = _as_homograph(X)
        result = pretrain(g, self._config())
        self.encoder_ = result.theta
        self.embeddings_ = result.embeddings.data.copy()
        self.history_ = result.history
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        g = _as_homograph(X)
        h = encode(self.encoder_, g)
        return normalize_embeddings(h, eps=self.eps).data.copy()

    def fit_transform(self, X, y=None):
        # reuse the embeddings the fit already produced
        self.fit(X)
        return self.embeddings_.copy()


class _TaskEstimator(BaseEstimator):
    _task = None

    def _config(self):
        params = self.get_params()
        loss = params.pop("loss")
        return TaskConfig(task=self._task, loss_kind=loss, **params)

    def fit(self, X, y):
        g, emb, indices = _unpack_triplet(X)
        emb = _as_embedding_matrix(emb)
        self.model_ = train_task(g, emb, (indices, np.asarray(y)),
                                 self._config())
        self.history_ = self.model_.history
        return self


class CouplingRegressor(RegressorMixin, _TaskEstimator):
    """Candidate-pair capacitance regressor on top of fixed embeddings."""

    _task = EDGE_REGRESSION

    def __init__(self, loss="mse", epochs=100, learning_rate=0.05,
                 batch_size=256, seed=0, hidden_dim=144, n_layers=5,
                 activation="tanh", dropout_rate=0.0, degree_feature=True,
                 gmm_components=8, sigma_noise=0.001,
                 fine_tune_embeddings=False):
        self.loss = loss
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.degree_feature = degree_feature
        self.gmm_components = gmm_components
        self.sigma_noise = sigma_noise
        self.fine_tune_embeddings = fine_tune_embeddings

    def predict(self, X):
        check_is_fitted(self, "model_")
        g, emb, pairs = _unpack_triplet(X)
        emb = _as_embedding_matrix(emb)
        return predict_edges(self.model_, g, emb, pairs)


class GroundCapClassifier(ClassifierMixin, _TaskEstimator):
    """Ground-capacitance bin classifier for net nodes."""

    _task = NODE_CLASSIFICATION

    def __init__(self, loss="ce", epochs=100, learning_rate=0.05,
                 batch_size=256, seed=0, hidden_dim=144, n_layers=5,
                 activation="tanh", dropout_rate=0.0, degree_feature=True,
                 n_classes=5, focal_gamma=2.0, fine_tune_embeddings=False):
        self.loss = loss
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.activation = activation
        self.dropout_rate = dropout_rate
        self.degree_feature = degree_feature
        self.n_classes = n_classes
        self.focal_gamma = focal_gamma
        self.fine_tune_embeddings = fine_tune_embeddings

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.arange(self.n_classes)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        g, emb, ids = _unpack_triplet(X)
        emb = _as_embedding_matrix(emb)
        return predict_node_classes(self.model_, g, emb, ids)

    def predict(self, X):
        return self._logits(X)[0]

    def predict_proba(self, X):
        logits = self._logits(X)[1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)
