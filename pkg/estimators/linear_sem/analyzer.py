from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from ..errors import DegenerateSpectrum, DimensionMismatch, NoFactors, TooFewOutcomes

logger = logging.getLogger(__name__)

CENTER_TOL = 1e-10
# Covariance eigenvalues below this fraction of the largest count as zero.
POSITIVE_EIG_TOL = 1e-12


@dataclass(frozen=True)
class Dataset:
    """Exposure vector x (length n) and outcome matrix y (n x p)."""
    x: np.ndarray
    y: np.ndarray
    centered: bool = False
    outcome_names: Tuple[str, ...] = ()

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        y = np.array(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] != x.shape[0]:
            raise DimensionMismatch(f"x has {x.shape[0]} rows but y has shape {y.shape}",
                                    details={'n_x': x.shape[0], 'y_shape': y.shape})
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DimensionMismatch("Dataset contains non-finite values")
        names = tuple(self.outcome_names) or tuple(f'y{j + 1}' for j in range(y.shape[1]))
        if len(names) != y.shape[1]:
            raise DimensionMismatch(f"{len(names)} outcome names for {y.shape[1]} outcomes")
        if self.centered:
            worst = max(abs(x.mean()), float(np.abs(y.mean(axis=0)).max()))
            if worst > CENTER_TOL * max(1.0, float(np.abs(y).max()), float(np.abs(x).max())):
                raise DimensionMismatch(f"Dataset flagged as centered but a column mean is {worst:.3e}")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'outcome_names', names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    def center(self) -> 'Dataset':
        if self.centered:
            return self
        return Dataset(x=self.x - self.x.mean(), y=self.y - self.y.mean(axis=0), centered=True,
                       outcome_names=self.outcome_names)

    def take_rows(self, rows: np.ndarray) -> 'Dataset':
        return Dataset(x=self.x[rows], y=self.y[rows], outcome_names=self.outcome_names)

    def take_outcomes(self, columns: Sequence[int]) -> 'Dataset':
        columns = list(columns)
        return Dataset(x=self.x, y=self.y[:, columns], centered=self.centered,
                       outcome_names=tuple(self.outcome_names[j] for j in columns))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, exposure: str, outcomes: Optional[Sequence[str]] = None) -> 'Dataset':
        outcomes = list(outcomes) if outcomes else [c for c in frame.columns if c != exposure]
        return cls(x=frame[exposure].to_numpy(dtype=float), y=frame[outcomes].to_numpy(dtype=float),
                   outcome_names=tuple(outcomes))


@dataclass(frozen=True)
class FactorFit:
    """Principal-component factor model of the outcomes.

    ``num_factors`` counts r + 1 columns: the exposure noise plus r latent
    confounders. ``spectrum`` holds all covariance eigenvalues, descending.
    """
    num_factors: int
    loadings: np.ndarray
    spectrum: np.ndarray
    sigma2_hat: float
    delta: float
    n: int
    correlation_spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kaiser_count: int = 0
    overridden: bool = False

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.num_factors - 1

    @property
    def enough_outcomes(self) -> bool:
        """Necessary condition p >= 2(r+1)+1 for two disjoint full-rank loading blocks."""
        return self.p >= 2 * self.num_factors + 1

    def summary(self) -> Dict:
        return {
            'num_factors': self.num_factors,
            'kaiser_count': self.kaiser_count,
            'overridden': self.overridden,
            'sigma2_hat': self.sigma2_hat,
            'delta': self.delta,
            'spectrum': self.spectrum.tolist(),
            'enough_outcomes': self.enough_outcomes,
        }


def threshold_from_spectrum(spectrum: Sequence[float], num_factors: int, n: int) -> Tuple[float, float]:
    """Noise variance from the trailing eigenvalues and the threshold sqrt(2 log(p) sigma2 / n)."""
    spectrum = np.asarray(spectrum, dtype=float)
    p = spectrum.shape[0]
    sigma2 = float(spectrum[num_factors:].sum() / p)
    delta = float(np.sqrt(2.0 * np.log(p) * sigma2 / n))
    return sigma2, delta


def kaiser_count(y: np.ndarray) -> Tuple[int, np.ndarray]:
    """Number of correlation-matrix eigenvalues above one."""
    sd = y.std(axis=0, ddof=1)
    if np.any(sd == 0):
        constant = (np.flatnonzero(sd == 0) + 1).tolist()
        raise DegenerateSpectrum(f"Outcomes {constant} are constant", details={'constant_outcomes': constant})
    corr_spectrum = np.sort(np.linalg.eigvalsh(np.corrcoef(y, rowvar=False)))[::-1]
    return int(np.sum(corr_spectrum > 1.0)), corr_spectrum


def fit_factors(data: Dataset, num_factors_override: Optional[int] = None) -> FactorFit:
    if data.p < 3:
        raise TooFewOutcomes(f"At least 3 outcomes are needed, got {data.p}", details={'p': data.p})
    if data.n <= data.p:
        raise DimensionMismatch(f"Factor fitting needs n > p, got n={data.n}, p={data.p}",
                                details={'n': data.n, 'p': data.p})

    y = data.center().y
    cov = np.cov(y, rowvar=False)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    spectrum = np.clip(values[order], 0.0, None)
    vectors = vectors[:, order]

    kaiser, corr_spectrum = kaiser_count(y)
    if num_factors_override is not None:
        num_factors = int(num_factors_override)
        if num_factors < 1:
            raise NoFactors(f"Factor count override must be positive, got {num_factors}")
    elif kaiser == 0:
        raise NoFactors("Kaiser rule selects no factors; supply a factor count",
                        details={'correlation_spectrum': corr_spectrum.tolist()})
    else:
        num_factors = kaiser

    positive = int(np.sum(spectrum > POSITIVE_EIG_TOL * max(spectrum[0], np.finfo(float).tiny)))
    if positive < num_factors:
        raise DegenerateSpectrum(f"Only {positive} positive eigenvalues for {num_factors} factors",
                                 details={'spectrum': spectrum.tolist(), 'num_factors': num_factors})

    loadings = vectors[:, :num_factors] * np.sqrt(spectrum[:num_factors])
    sigma2, delta = threshold_from_spectrum(spectrum, num_factors, data.n)
    fit = FactorFit(num_factors=num_factors, loadings=loadings, spectrum=spectrum, sigma2_hat=sigma2,
                    delta=delta, n=data.n, correlation_spectrum=corr_spectrum, kaiser_count=kaiser,
                    overridden=num_factors_override is not None)
    if not fit.enough_outcomes:
        logger.warning(f"p={data.p} is below 2(r+1)+1={2 * num_factors + 1}; β may not be identified")
    logger.info(f"Factor fit: n={data.n}, p={data.p}, factors={num_factors} (Kaiser {kaiser}), "
                f"sigma2={sigma2:.4g}, delta={delta:.4g}")
    return fit


def population_loadings(sigma_x: float, beta: Sequence[float], alpha: np.ndarray,
                        alpha_x: Sequence[float]) -> np.ndarray:
    """Noiseless loading matrix with rows (sigma_X beta_j, alpha_j + beta_j alpha_X)."""
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(beta.shape[0], -1)
    alpha_x = np.asarray(alpha_x, dtype=float)
    return np.column_stack([sigma_x * beta, alpha + beta[:, None] * alpha_x[None, :]])


def spectral_truncation(data: Dataset, num_factors: int) -> np.ndarray:
    """Top-``num_factors`` spectral truncation of the sample outcome covariance."""
    cov = np.cov(data.center().y, rowvar=False)
    values, vectors = np.linalg.eigh(cov)
    top = np.argsort(values)[::-1][:num_factors]
    return (vectors[:, top] * values[top]) @ vectors[:, top].T


def residual_covariance(data: Dataset, fit: FactorFit) -> np.ndarray:
    """Sample covariance minus the fitted low-rank part."""
    cov = np.cov(data.center().y, rowvar=False)
    return cov - fit.loadings @ fit.loadings.T


def outcome_labels(data: Dataset, indices: Sequence[int]) -> List[str]:
    return [data.outcome_names[j] for j in indices]
