"""
KERNBAL — Propensity model (GLM baseline)
Логистическая регрессия (Newton/IRLS) + оценка Хайека для ATT.
"""
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy.special import expit
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import PolynomialFeatures, StandardScaler

import config
from strategies.balancing import Sample

log = logging.getLogger("KernBal.Propensity")


class FeatureExpansion(str, Enum):
    RAW = "raw"
    QUADRATIC = "raw_plus_quadratic_and_interactions"


def _is_binary(col: np.ndarray) -> bool:
    return np.unique(col).size <= 2


class FeatureExpander:
    """Raw columns, or raw + squares + pairwise products (squares of binary columns dropped).

    The dropped set is fixed at fit time so scoring a subset gives the same columns.
    """

    def __init__(self, expansion: FeatureExpansion):
        self.expansion = expansion
        self.poly = None
        self.keep = None
        self.names: List[str] = []

    def fit(self, values: np.ndarray, names: List[str]) -> "FeatureExpander":
        if self.expansion == FeatureExpansion.RAW:
            self.names = list(names)
            return self
        self.poly = PolynomialFeatures(degree=2, include_bias=False).fit(values)
        feat_names = list(self.poly.get_feature_names_out(names))
        keep = np.ones(len(feat_names), dtype=bool)
        for k, powers in enumerate(self.poly.powers_):
            # x² бинарного столбца совпадает с линейным членом
            if powers.max() == 2 and _is_binary(values[:, int(np.argmax(powers))]):
                keep[k] = False
        self.keep = keep
        self.names = [f for f, k in zip(feat_names, keep) if k]
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        if self.expansion == FeatureExpansion.RAW:
            return np.asarray(values, dtype=np.float64)
        return self.poly.transform(values)[:, self.keep]


def expand_features(values: np.ndarray, names: List[str],
                    expansion: FeatureExpansion) -> Tuple[np.ndarray, List[str]]:
    expander = FeatureExpander(expansion).fit(values, names)
    return expander.transform(values), expander.names


@dataclass
class LogisticModel:
    coefficients: np.ndarray          # [intercept, slopes] on standardized expanded features
    feature_expansion: FeatureExpansion
    converged: bool
    iterations: int
    feature_names: List[str] = field(default_factory=list)
    standard_errors: np.ndarray = None
    scaler: StandardScaler = None
    expander: FeatureExpander = None
    separated: bool = False

    def _design(self, raw: np.ndarray) -> np.ndarray:
        return self.scaler.transform(self.expander.transform(raw))

    def predict_proba(self, raw: np.ndarray) -> np.ndarray:
        z = self.coefficients[0] + self._design(raw) @ self.coefficients[1:]
        return expit(z)

    def raw_coefficients(self) -> np.ndarray:
        """Coefficients on the unstandardized expanded features."""
        scale = self.scaler.scale_
        slopes = self.coefficients[1:] / scale
        intercept = self.coefficients[0] - np.sum(slopes * self.scaler.mean_)
        return np.concatenate(([intercept], slopes))


def fit_logistic(sample: Sample, expansion: FeatureExpansion = FeatureExpansion.QUADRATIC) -> LogisticModel:
    """Ridge-stabilized (λ = 1e-8) maximum likelihood by Newton iterations."""
    expander = FeatureExpander(expansion).fit(sample.x.raw, sample.x.names)
    feats, names = expander.transform(sample.x.raw), expander.names
    if sample.n < feats.shape[1] + 1:
        raise ValueError(f"n={sample.n} too small for {feats.shape[1]} expanded features")
    scaler = StandardScaler().fit(feats)
    design = scaler.transform(feats)

    clf = LogisticRegression(
        solver="newton-cholesky",
        C=1.0 / config.LOGIT_RIDGE,
        tol=config.LOGIT_TOL,
        max_iter=config.LOGIT_MAX_ITER,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(design, sample.a)
    hit_limit = any(issubclass(c.category, ConvergenceWarning) for c in caught)
    iterations = int(np.max(clf.n_iter_))

    coef = np.concatenate((clf.intercept_, clf.coef_.ravel()))
    separated = bool(np.any(np.abs(coef[1:]) > config.SEPARATION_COEF))
    converged = not hit_limit and iterations < config.LOGIT_MAX_ITER and not separated
    if separated:
        log.warning(f"[Propensity] ⚠️ separation detected: max |coef| = {np.abs(coef[1:]).max():.1f}")
    elif not converged:
        log.warning(f"[Propensity] ⚠️ logistic fit did not converge in {iterations} iterations")

    # стандартные ошибки из обратной информации Фишера
    x1 = np.column_stack([np.ones(sample.n), design])
    p = clf.predict_proba(design)[:, 1]
    fisher = x1.T @ (x1 * (p * (1.0 - p))[:, None]) + config.LOGIT_RIDGE * np.eye(x1.shape[1])
    try:
        se = np.sqrt(np.clip(np.diag(np.linalg.inv(fisher)), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(x1.shape[1], np.nan)

    return LogisticModel(
        coefficients=coef,
        feature_expansion=expansion,
        converged=converged,
        iterations=iterations,
        feature_names=names,
        standard_errors=se,
        scaler=scaler,
        expander=expander,
        separated=separated,
    )


def hajek_weights(sample: Sample, model: LogisticModel) -> np.ndarray:
    """Normalized inverse-odds weights π̂/(1−π̂) over controls."""
    clip = config.PROPENSITY_CLIP
    p = np.clip(model.predict_proba(sample.x.raw[sample.control_idx]), clip, 1.0 - clip)
    odds = p / (1.0 - p)
    return odds / odds.sum()


def hajek_att(sample: Sample, model: LogisticModel) -> float:
    w = hajek_weights(sample, model)
    psi_mod = float(w @ sample.y[sample.control_idx])
    return float(sample.y[sample.treated_idx].mean() - psi_mod)
