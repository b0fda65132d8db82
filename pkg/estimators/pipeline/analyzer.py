from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from ..errors import CovariateCollinearity, InputError, NonPositiveLog
from ..linear_sem.analyzer import Dataset, FactorFit, residual_covariance
from ..numerics import solve_ols

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-10
DEFAULT_THRESHOLD_MULT = 2.0


@dataclass
class RawTable:
    """Numeric exposure, outcome and covariate columns with missing rows removed."""
    frame: pd.DataFrame
    exposure: str
    outcomes: List[str]
    covariates: List[str] = field(default_factory=list)
    log_columns: Tuple[str, ...] = ()
    dropped_rows: int = 0

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def p(self) -> int:
        return len(self.outcomes)

    @property
    def q(self) -> int:
        return len(self.covariates)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, exposure: str, outcomes: Optional[Sequence[str]] = None,
                   covariates: Sequence[str] = (), log_columns: Sequence[str] = ()) -> 'RawTable':
        covariates = list(covariates)
        if outcomes is None:
            outcomes = [c for c in frame.columns if c != exposure and c not in covariates]
        outcomes = list(outcomes)
        columns = [exposure] + outcomes + covariates
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise InputError(f"Columns not found in input: {missing}", details={'missing_columns': missing})
        unknown_logs = [c for c in log_columns if c not in columns]
        if unknown_logs:
            raise InputError(f"Log-transform requested for unknown columns: {unknown_logs}")

        selected = frame[columns]
        non_numeric = [c for c in columns if not pd.api.types.is_numeric_dtype(selected[c])]
        if non_numeric:
            raise InputError(f"Non-numeric columns: {non_numeric}", details={'non_numeric': non_numeric})
        complete = selected.dropna().reset_index(drop=True)
        dropped = len(selected) - len(complete)
        if dropped:
            logger.warning(f"Dropped {dropped} rows with missing values ({len(complete)} remain)")
        return cls(frame=complete.astype(float), exposure=exposure, outcomes=outcomes, covariates=covariates,
                   log_columns=tuple(log_columns), dropped_rows=dropped)


def _apply_logs(raw: RawTable) -> pd.DataFrame:
    frame = raw.frame.copy()
    for column in raw.log_columns:
        bad = int((frame[column] <= 0).sum())
        if bad:
            raise NonPositiveLog(f"Column '{column}' has {bad} entries <= 0 and cannot be log-transformed",
                                 details={'column': column, 'nonpositive': bad})
        frame[column] = np.log(frame[column])
    return frame


def residualize(raw: RawTable) -> Dataset:
    """Residuals of the exposure and every outcome after OLS on an intercept and the covariates."""
    frame = _apply_logs(raw)
    design = np.column_stack([np.ones(raw.n), frame[raw.covariates].to_numpy()]) if raw.q else np.ones((raw.n, 1))
    rank = int(np.linalg.matrix_rank(design))
    if rank < design.shape[1]:
        raise CovariateCollinearity(f"Covariate design has rank {rank} < {design.shape[1]} columns",
                                    details={'rank': rank, 'columns': ['intercept'] + raw.covariates})

    responses = frame[[raw.exposure] + raw.outcomes].to_numpy()
    residuals = responses - design @ solve_ols(design, responses)
    # Exact mean-zero columns for the centered flag; the intercept already makes them so up to rounding.
    residuals = residuals - residuals.mean(axis=0)
    data = Dataset(x=residuals[:, 0], y=residuals[:, 1:], centered=True, outcome_names=tuple(raw.outcomes))
    if is_degenerate_exposure(data, responses[:, 0]):
        logger.warning(f"Exposure '{raw.exposure}' is explained by the covariates; its residual is zero")
    logger.info(f"Residualized {raw.p} outcomes on {raw.q} covariates (n={raw.n})")
    return data


def is_degenerate_exposure(data: Dataset, reference: Optional[np.ndarray] = None) -> bool:
    scale = float(np.linalg.norm(reference)) if reference is not None else 1.0
    return float(np.linalg.norm(data.x)) <= DEGENERATE_TOL * max(scale, 1.0)


@dataclass
class ScreeningResult:
    retained: np.ndarray
    statistics: pd.DataFrame


def screen_outcomes(data: Dataset) -> ScreeningResult:
    """Keep outcomes whose slope on X exceeds its OLS standard error times sqrt(2 log p).

    Standard errors are homoskedastic; a zero standard error with a nonzero
    slope counts as retained.
    """
    data = data.center()
    x, y = data.x, data.y
    sxx = float(x @ x)
    multiplier = float(np.sqrt(2.0 * np.log(data.p))) if data.p > 1 else 0.0
    if sxx == 0.0:
        logger.warning("Exposure has zero variance; no outcome is retained")
        coef = np.zeros(data.p)
        se = np.full(data.p, np.inf)
    else:
        coef = (x @ y) / sxx
        rss = np.sum((y - np.outer(x, coef)) ** 2, axis=0)
        se = np.sqrt(rss / (data.n - 2) / sxx)
    threshold = se * multiplier
    retained = np.abs(coef) > threshold
    statistics = pd.DataFrame({
        'outcome': list(data.outcome_names),
        'coefficient': coef,
        'se': se,
        'threshold': threshold,
        'retained': retained,
    })
    logger.info(f"Screening kept {int(retained.sum())} of {data.p} outcomes (multiplier {multiplier:.4f})")
    return ScreeningResult(retained=np.flatnonzero(retained), statistics=statistics)


@dataclass
class DiagonalityReport:
    """Thresholded residual covariance after removing the fitted factors."""
    thresholded: np.ndarray
    offdiagonals: List[Tuple[int, int, float]]
    suggested_subset: np.ndarray
    removed: List[int]
    variances: np.ndarray
    threshold_mult: float
    pervasive: bool = False

    @property
    def nonzero_offdiagonals(self) -> int:
        return len(self.offdiagonals)

    def summary(self, names: Optional[Sequence[str]] = None) -> Dict:
        label = (lambda j: names[j]) if names else (lambda j: j + 1)
        return {
            'nonzero_offdiagonals': self.nonzero_offdiagonals,
            'offdiagonals': [{'i': label(i), 'j': label(j), 'value': v} for i, j, v in self.offdiagonals],
            'suggested_subset': [label(j) for j in self.suggested_subset],
            'removed': [label(j) for j in self.removed],
            'variances': self.variances.tolist(),
            'threshold_mult': self.threshold_mult,
            'pervasive': self.pervasive,
        }


def threshold_rate(p: int, n: int, pervasive: bool = False) -> float:
    """sqrt(log(p) / n); ``pervasive`` adds 1/sqrt(p) for the error left by estimating the factors."""
    rate = float(np.sqrt(np.log(max(p, 2)) / n))
    return rate + 1.0 / np.sqrt(p) if pervasive else rate


def check_error_diagonality(data: Dataset, fit: FactorFit, threshold_mult: float = DEFAULT_THRESHOLD_MULT,
                            pervasive: bool = False) -> DiagonalityReport:
    """Hard-threshold R = S - Gamma Gamma' and greedily drop outcomes until R is diagonal.

    Off-diagonal R_ij survives when |R_ij| > mult * sqrt(R_ii R_jj * log(p) / n).
    Principal-component residuals carry an off-diagonal bias of order
    sigma^2 / p, which this rate flags at moderate n; ``pervasive=True``
    widens the rate by 1/sqrt(p).
    The greedy step removes the outcome with the most surviving entries, the
    higher index on ties.
    """
    resid = residual_covariance(data, fit)
    p = resid.shape[0]
    variances = np.diag(resid).copy()
    scale = np.sqrt(np.clip(np.outer(variances, variances), 0.0, None)) * threshold_rate(p, data.n, pervasive)
    survive = np.abs(resid) > threshold_mult * scale
    np.fill_diagonal(survive, False)
    thresholded = np.where(survive, resid, 0.0)
    np.fill_diagonal(thresholded, variances)

    upper_i, upper_j = np.nonzero(np.triu(survive, k=1))
    offdiagonals = [(int(i), int(j), float(resid[i, j])) for i, j in zip(upper_i, upper_j)]

    active = np.ones(p, dtype=bool)
    removed: List[int] = []
    while True:
        counts = (survive & active[None, :] & active[:, None]).sum(axis=1)
        if counts.max() == 0:
            break
        worst = int(np.flatnonzero(counts == counts.max())[-1])
        active[worst] = False
        removed.append(worst)

    subset = np.flatnonzero(active)
    block = thresholded[np.ix_(subset, subset)]
    assert not np.any(block[~np.eye(subset.size, dtype=bool)]), "greedy subset kept a nonzero off-diagonal"
    logger.info(f"Error diagonality: {len(offdiagonals)} off-diagonals survive, "
                f"suggested subset keeps {subset.size} of {p} outcomes")
    return DiagonalityReport(thresholded=thresholded, offdiagonals=offdiagonals, suggested_subset=subset,
                             removed=removed, variances=variances, threshold_mult=float(threshold_mult),
                             pervasive=pervasive)
