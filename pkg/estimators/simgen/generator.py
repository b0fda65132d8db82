from typing import Optional
import logging

import numpy as np
import pandas as pd

from ..categorical.models import CategoricalParams
from ..errors import ConfigError
from ..linear_sem.analyzer import Dataset
from .designs import LinearDesign, categorical_design

logger = logging.getLogger(__name__)


def _draw_levels(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per column of ``probs`` (k levels x n samples), 0-based."""
    cum = np.cumsum(probs, axis=0)
    levels = (rng.random(probs.shape[1])[None, :] > cum).sum(axis=0)
    return np.minimum(levels, probs.shape[0] - 1)


def gen_categorical(n: int, seed: Optional[int], params: Optional[CategoricalParams] = None,
                    include_latent: bool = False) -> pd.DataFrame:
    """n iid records (x, y1, y2, y3) with 1-based labels.

    U is drawn first, then X given U, then each outcome given (U, X).
    """
    if n < 1:
        raise ConfigError(f"Sample size must be positive, got {n}")
    params = params or categorical_design()
    rng = np.random.default_rng(seed)

    u = _draw_levels(rng, np.repeat(params.pr_u[:, None], n, axis=1))
    x = _draw_levels(rng, params.pr_x_given_u[:, u])
    records = {'x': x + 1}
    for j, table in enumerate(params.pr_y_given_ux):
        records[f'y{j + 1}'] = _draw_levels(rng, table[:, u, x]) + 1
    frame = pd.DataFrame(records)
    if include_latent:
        frame.insert(0, 'u', u + 1)
    logger.debug(f"gen_categorical: n={n}, seed={seed}, pr(X=1)={np.mean(x == 0):.4f}")
    return frame


def gen_linear(design: LinearDesign, n: int, seed: Optional[int]) -> Dataset:
    """Draw (U, eps_X / sigma_X, eps / sigma) from a standard normal and build X and Y.

    The dataset is returned uncentered.
    """
    if n < design.p + 2:
        raise ConfigError(f"Sample size must be at least p+2={design.p + 2}, got {n}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, design.r + 1 + design.p))
    u = z[:, :design.r]
    x = u @ np.asarray(design.alpha_x) + design.sigma_x * z[:, design.r]
    y = u @ design.alpha.T + x[:, None] * design.beta[None, :] + z[:, design.r + 1:] * design.sigma[None, :]
    return Dataset(x=x, y=y)
