"""scikit-learn compatible wrapper around sampled-depth training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from flextrain.data import Dataset
from flextrain.nn import forward_prefix, init_net
from flextrain.sampler import ActivationDistribution
from flextrain.trainer import TrainConfig, train_flextrain


class FlexTrainClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Residual MLP trained so that every prefix depth is a usable classifier.

    Parameters
    ----------
    hidden_dim : int
        Width of the residual stream.
    n_blocks : int
        Number of residual blocks ``K``.
    pi : sequence of float or None
        Probability of training each depth ``1..K``; ``None`` means uniform.
    beta : float
        Weight of the feature distillation penalty.
    distill_mode : str
        One of ``off``, ``centralized-k+1``, ``centralized-full-K``, ``federated``.
    depth : int or None
        Prefix depth used by ``predict``, ``predict_proba`` and ``transform``;
        ``None`` uses the full network.
    """

    def __init__(self, hidden_dim=32, n_blocks=4, pi=None, beta=0.2,
                 distill_mode="centralized-k+1", lr=0.05, momentum=0.9, weight_decay=1e-3,
                 batch_size=64, epochs=50, depth=None, random_state=0):
        self.hidden_dim = hidden_dim
        self.n_blocks = n_blocks
        self.pi = pi
        self.beta = beta
        self.distill_mode = distill_mode
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.depth = depth
        self.random_state = random_state

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(rs, np.random.RandomState):
            return int(rs.randint(2**31))
        return int(rs)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        K = int(self.n_blocks)
        pi = (ActivationDistribution(tuple(np.full(K, 1.0 / K))) if self.pi is None
              else ActivationDistribution(tuple(self.pi)))
        seed = self._seed()
        cfg = TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                          batch_size=self.batch_size, epochs=self.epochs, beta=self.beta,
                          distill_mode=self.distill_mode, pi=pi, seed=seed)
        data = Dataset(X, y_enc, len(self.classes_))
        net = init_net(X.shape[1], self.hidden_dim, len(self.classes_), K, seed)
        self.net_, self.history_ = train_flextrain(net, data, cfg)
        return self

    def _depth(self, depth):
        k = self.depth if depth is None else depth
        return self.net_.K if k is None else k

    def _logits(self, X, depth=None):
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return forward_prefix(self.net_, X, self._depth(depth)).logits

    def predict_proba(self, X, depth=None):
        z = self._logits(X, depth)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X, depth=None):
        z = self._logits(X, depth)
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X, depth=None):
        """Normalized final features of the depth-``k`` prefix."""
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        k = self._depth(depth)
        return forward_prefix(self.net_, X, k).features[k]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)
