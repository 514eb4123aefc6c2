"""scikit-learn style front end for the unconstrained feature model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import certify, geometry
from .exceptions import DimensionError
from .losses import LossSpec
from .ufm import Hyper, TrainConfig, UfmState, objective, train


def balanced_layout(y):
    """Map labels to the class-major column layout.

    Returns ``(classes, codes, columns, n)``: ``codes[i]`` is the class index
    of sample ``i`` and ``columns[i]`` its column in ``H``.
    """
    y = np.asarray(y)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("y must be a non-empty 1-d array of labels")
    check_classification_targets(y)
    classes, codes, counts = np.unique(y, return_inverse=True, return_counts=True)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    if np.any(counts != counts[0]):
        raise ValueError(f"classes must be balanced; got counts {counts.tolist()}")
    K = classes.size
    rank = np.empty(y.size, dtype=int)
    for k in range(K):
        idx = np.flatnonzero(codes == k)
        rank[idx] = np.arange(idx.size)
    return classes, codes, rank * K + codes, int(counts[0])


class UnconstrainedFeatureModel(ClassifierMixin, BaseEstimator):
    """Jointly learns free features ``H`` and a linear classifier ``(W, b)``.

    ``fit(X, y)`` treats the labels as the training set. ``X`` (shape N x d)
    is optional and, when given, seeds the features instead of the Gaussian
    start. After fitting, ``predict``/``decision_function`` apply the learned
    classifier to new feature vectors.
    """

    def __init__(self, d=16, lambda_w=0.01, lambda_h=1e-5, lambda_b=0.01, loss="CE",
                 gamma=3.0, alpha=0.1, kappa=1.0, beta=15.0, init_sigma=0.1, lr=2.0,
                 momentum=0.9, max_iters=100_000, grad_tol=1e-8, freeze_w_as_etf=False,
                 random_state=0):
        self.d = d
        self.lambda_w = lambda_w
        self.lambda_h = lambda_h
        self.lambda_b = lambda_b
        self.loss = loss
        self.gamma = gamma
        self.alpha = alpha
        self.kappa = kappa
        self.beta = beta
        self.init_sigma = init_sigma
        self.lr = lr
        self.momentum = momentum
        self.max_iters = max_iters
        self.grad_tol = grad_tol
        self.freeze_w_as_etf = freeze_w_as_etf
        self.random_state = random_state

    def _hyper(self, K, n):
        spec = LossSpec(self.loss, gamma=self.gamma, alpha=self.alpha, kappa=self.kappa,
                        beta=self.beta)
        return Hyper(K=K, d=int(self.d), n=n, lambda_w=float(self.lambda_w),
                     lambda_h=float(self.lambda_h), lambda_b=float(self.lambda_b), loss=spec)

    def fit(self, X=None, y=None):
        if y is None:
            raise ValueError("y is required")
        self.classes_, codes, cols, n = balanced_layout(y)
        hyper = self._hyper(self.classes_.size, n)
        seed = 0 if self.random_state is None else int(self.random_state)
        config = TrainConfig(hyper=hyper, init_sigma=self.init_sigma, lr=self.lr,
                             momentum=self.momentum, max_iters=self.max_iters,
                             freeze_w_as_etf=self.freeze_w_as_etf, grad_tol=self.grad_tol,
                             seed=seed)
        init = None
        if X is not None:
            X = check_array(X)
            if X.shape != (codes.size, hyper.d):
                raise DimensionError(f"X must have shape ({codes.size}, {hyper.d}), got {X.shape}")
            rng = np.random.default_rng(seed)
            H0 = np.empty((hyper.d, hyper.N))
            H0[:, cols] = X.T
            init = UfmState(self.init_sigma * rng.standard_normal((hyper.K, hyper.d)), H0,
                            self.init_sigma * rng.standard_normal(hyper.K))
        res = train(config, init=init)
        st = res.state
        self.hyper_ = hyper
        self.W_, self.H_, self.b_ = st.W, st.H, st.b
        self.columns_ = cols
        self.trace_ = res.trace
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        self.objective_ = objective(st, hyper).f
        self.n_features_in_ = hyper.d
        return self

    @property
    def features_(self):
        """Learned feature of each training sample, in the order of ``y``."""
        check_is_fitted(self, "H_")
        return self.H_[:, self.columns_].T

    def decision_function(self, X):
        check_is_fitted(self, "W_")
        X = check_array(X)
        if X.shape[1] != self.W_.shape[1]:
            raise DimensionError(f"X has {X.shape[1]} features, classifier expects {self.W_.shape[1]}")
        return X @ self.W_.T + self.b_

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Logits of ``X`` under the learned classifier."""
        return self.decision_function(X)

    def collapse_metrics(self) -> dict:
        check_is_fitted(self, "W_")
        return geometry.nc_metrics(self.W_, self.H_, self.b_, self.hyper_.n, self.hyper_.K)

    def certificate(self) -> certify.Certificate:
        check_is_fitted(self, "W_")
        return certify.global_certificate(UfmState(self.W_, self.H_, self.b_), self.hyper_)
