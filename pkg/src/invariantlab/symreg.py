"""Candidate-term libraries and sequentially thresholded least squares (STLSQ)."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import make_system
from .exceptions import ConfigError, InputError, SingularFitError

__all__ = [
    "FeatureLibrary",
    "StlsqConfig",
    "Stlsq",
    "build_features",
    "stlsq_fit",
    "format_equation",
]


class FeatureLibrary(TransformerMixin, BaseEstimator):
    """Constant, linear terms, all degree-2 monomials, and sin/cos of angles.

    Term order is fixed: ``1``, each variable, monomials ``s_i*s_j`` for
    ``i <= j`` in lexicographic order, then ``sin``/``cos`` pairs for every
    angular dimension.
    """

    def __init__(self, system="spring-mass"):
        self.system = system

    @property
    def spec(self):
        return make_system(self.system)

    @property
    def terms(self) -> list:
        sys = self.spec
        D = sys.state_dim
        terms = [("const",)] + [("var", i) for i in range(D)]
        terms += [("mono", i, j) for i in range(D) for j in range(i, D)]
        for a in sys.angular_dims:
            terms += [("sin", a), ("cos", a)]
        return terms

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def term_names(self) -> list:
        names = self.spec.variable_names
        out = []
        for t in self.terms:
            if t[0] == "const":
                out.append("1")
            elif t[0] == "var":
                out.append(names[t[1]])
            elif t[0] == "mono":
                i, j = t[1], t[2]
                out.append(f"{names[i]}^2" if i == j else f"{names[i]}*{names[j]}")
            else:
                out.append(f"{t[0]}({names[t[1]]})")
        return out

    def fit(self, X=None, y=None):
        self.n_features_in_ = self.spec.state_dim
        self.n_output_features_ = self.n_terms
        return self

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        D = self.spec.state_dim
        if X.shape[-1:] != (D,):
            raise InputError(f"expected states (..., {D}), got {X.shape}")
        return X

    def transform(self, X):
        """Feature matrix ``(..., M)``; any leading shape is kept."""
        X = self._check(X)
        cols = []
        for t in self.terms:
            if t[0] == "const":
                cols.append(np.ones(X.shape[:-1]))
            elif t[0] == "var":
                cols.append(X[..., t[1]])
            elif t[0] == "mono":
                cols.append(X[..., t[1]] * X[..., t[2]])
            elif t[0] == "sin":
                cols.append(np.sin(X[..., t[1]]))
            else:
                cols.append(np.cos(X[..., t[1]]))
        return np.stack(cols, axis=-1)

    def jacobian(self, X):
        """``(..., M, D)`` derivatives of every feature with respect to the state."""
        X = self._check(X)
        D = X.shape[-1]
        J = np.zeros(X.shape[:-1] + (self.n_terms, D))
        for k, t in enumerate(self.terms):
            if t[0] == "var":
                J[..., k, t[1]] = 1.0
            elif t[0] == "mono":
                i, j = t[1], t[2]
                J[..., k, i] += X[..., j]
                J[..., k, j] += X[..., i]
            elif t[0] == "sin":
                J[..., k, t[1]] = np.cos(X[..., t[1]])
            elif t[0] == "cos":
                J[..., k, t[1]] = -np.sin(X[..., t[1]])
        return J

    def get_feature_names_out(self, input_features=None):
        return np.asarray(self.term_names(), dtype=object)


def build_features(sys, states) -> np.ndarray:
    return FeatureLibrary(make_system(sys).name).transform(states)


@dataclass(frozen=True)
class StlsqConfig:
    threshold: float = 0.05
    ridge_lambda: float = 1e-10
    max_iterations: int = 20

    def __post_init__(self):
        if self.threshold < 0 or self.ridge_lambda < 0 or self.max_iterations < 1:
            raise ConfigError("threshold and ridge_lambda must be >= 0, max_iterations >= 1")


def _ridge(Phi, y, lam):
    n = Phi.shape[1]
    if lam > 0:
        A = np.vstack([Phi, np.sqrt(lam) * np.eye(n)])
        b = np.concatenate([y, np.zeros(n)])
    else:
        A, b = Phi, y
    w, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < n:
        raise SingularFitError(
            f"normal equations are singular (rank {rank} < {n}); set ridge_lambda > 0"
        )
    return w


class Stlsq(RegressorMixin, BaseEstimator):
    """Sparse linear regression by alternating ridge fits and hard thresholding."""

    def __init__(self, threshold=0.05, ridge_lambda=1e-10, max_iterations=20):
        self.threshold = threshold
        self.ridge_lambda = ridge_lambda
        self.max_iterations = max_iterations

    def fit(self, X, y):
        cfg = StlsqConfig(self.threshold, self.ridge_lambda, self.max_iterations)
        X = check_array(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise InputError("features and target have different lengths")
        M = X.shape[1]
        active = np.any(X != 0, axis=0)
        coef = np.zeros(M)
        self.n_iter_ = 0
        for it in range(cfg.max_iterations):
            self.n_iter_ = it + 1
            coef = np.zeros(M)
            if not active.any():
                break
            coef[active] = _ridge(X[:, active], y, cfg.ridge_lambda)
            keep = active & (np.abs(coef) >= cfg.threshold)
            if np.array_equal(keep, active):
                break
            active = keep
        else:
            coef = np.zeros(M)
            if active.any():
                coef[active] = _ridge(X[:, active], y, cfg.ridge_lambda)
        coef[~active] = 0.0
        self.coef_ = coef
        self.active_ = active
        self.n_features_in_ = M
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_


def stlsq_fit(features, target, cfg: StlsqConfig = None) -> np.ndarray:
    cfg = cfg or StlsqConfig()
    return Stlsq(cfg.threshold, cfg.ridge_lambda, cfg.max_iterations).fit(features, target).coef_


def format_equation(library: FeatureLibrary, weights, decimals: int = 2) -> str:
    """Render nonzero terms as ``"5.00*x^2 + 0.50*v^2"`` in library order."""
    weights = np.asarray(weights, dtype=np.float64)
    names = library.term_names()
    if weights.shape != (len(names),):
        raise InputError(f"expected {len(names)} weights, got {weights.shape}")
    parts = []
    for name, w in zip(names, weights):
        if w == 0:
            continue
        mag = f"{abs(w):.{decimals}f}"
        body = mag if name == "1" else f"{mag}*{name}"
        if not parts:
            parts.append(("-" if w < 0 else "") + body)
        else:
            parts.append(("- " if w < 0 else "+ ") + body)
    return " ".join(parts) if parts else "0"
