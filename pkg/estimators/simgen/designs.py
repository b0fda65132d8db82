from dataclasses import dataclass
from typing import Dict, Tuple
import logging

import numpy as np

from ..categorical.analyzer import forward_joint, tables_from_joint
from ..categorical.models import CategoricalParams
from ..errors import ConfigError
from ..linear_sem.analyzer import population_loadings

logger = logging.getLogger(__name__)

# Binary design: U ~ Bernoulli(0.65) on level 1, then X | U and each Y | U, X.
CATEGORICAL_PR_U1 = 0.65
CATEGORICAL_PR_X1_GIVEN_U = (0.4, 0.7)
CATEGORICAL_PR_Y1_GIVEN_UX = (
    ((0.4, 0.3), (0.7, 0.6)),
    ((0.25, 0.45), (0.45, 0.75)),
    ((0.15, 0.25), (0.45, 0.65)),
)

GAMMA_BLOCK = (1.5, -1.8, 2.1, 2.4, -2.7, 3.0, -3.3)


def categorical_design() -> CategoricalParams:
    """Parameters of the binary simulation design, entries indexed [u][x]."""
    return CategoricalParams.binary(CATEGORICAL_PR_U1, CATEGORICAL_PR_X1_GIVEN_U, CATEGORICAL_PR_Y1_GIVEN_UX)


@dataclass(frozen=True)
class LinearDesign:
    """Linear structural equation design with r latent confounders and p outcomes.

    Column k of ``alpha`` is the k-th length-p stretch of the repeating gamma
    block, so at p=30 outcome 1 loads (1.5, 2.1) on (U1, U2).
    """
    p: int
    r: int = 2
    sigma_x: float = 1.0
    alpha_x: Tuple[float, ...] = (1.0, 1.0)
    nonzero_share: float = 0.4

    def __post_init__(self):
        if self.p < 3:
            raise ConfigError(f"LinearDesign needs p >= 3, got {self.p}")
        if len(self.alpha_x) != self.r:
            raise ConfigError(f"alpha_x must have {self.r} entries")

    @property
    def sigma(self) -> np.ndarray:
        j = np.arange(1, self.p + 1)
        return 1.5 + 0.25 * ((j + 2) % 3)

    @property
    def alpha(self) -> np.ndarray:
        gamma = np.resize(np.array(GAMMA_BLOCK), self.r * self.p)
        return gamma.reshape(self.r, self.p).T

    @property
    def beta(self) -> np.ndarray:
        j = np.arange(1, self.p + 1)
        values = (-1.0) ** j * (1 + (j + 3) % 4)
        return np.where(j <= self.nonzero_share * self.p, values, 0.0)

    @property
    def zero_set(self) -> np.ndarray:
        return np.flatnonzero(self.beta == 0)

    def loadings(self) -> np.ndarray:
        return population_loadings(self.sigma_x, self.beta, self.alpha, self.alpha_x)

    def var_x(self) -> float:
        return float(np.dot(self.alpha_x, self.alpha_x) + self.sigma_x ** 2)

    def cov_xy(self) -> np.ndarray:
        return self.alpha @ np.asarray(self.alpha_x) + self.beta * self.var_x()

    def as_dict(self) -> Dict:
        return {'p': self.p, 'r': self.r, 'sigma_x': self.sigma_x, 'alpha_x': list(self.alpha_x),
                'nonzero_share': self.nonzero_share}


COUNTEREXAMPLE_PR_U1 = 0.6
COUNTEREXAMPLE_PR_X1_GIVEN_U = (0.7, 0.4)
COUNTEREXAMPLE_PR_Y1_GIVEN_UX = ((0.1, 0.3), (0.2, 0.4))
# Free choices for the observationally equivalent set: pr*(U=1|x) and pr*(Y1=1|U=1,x).
COUNTEREXAMPLE_FREE_U1_GIVEN_X = (0.3, 0.2)
COUNTEREXAMPLE_FREE_Y1_GIVEN_U1X = (0.4, 0.6)


def _equivalent_two_outcome_model(base: CategoricalParams, pr_u1_given_x, pr_y1_given_u1x) -> CategoricalParams:
    """Re-solve a binary two-outcome model for chosen pr(U=1|x) and pr(Y1=1|U=1,x).

    The remaining pr(Y1=1|U=2,x), pr(Y2=1|U,x) follow from pr(Y1=1|x),
    pr(Y2=1|x) and pr(Y1=1,Y2=1|x) of the base model, so the observed law of
    (X, Y1, Y2) is unchanged.
    """
    tables = tables_from_joint(forward_joint(base))
    y1, y2 = np.zeros((2, 2)), np.zeros((2, 2))
    for x in range(2):
        both = tables.p123[x][:, :, 0]
        a, b, c = both[0].sum(), both[:, 0].sum(), both[0, 0]
        pi, q1 = pr_u1_given_x[x], pr_y1_given_u1x[x]
        q2 = (a - q1 * pi) / (1 - pi)
        r2 = (c - b * q1) / ((q2 - q1) * (1 - pi))
        r1 = (b - r2 * (1 - pi)) / pi
        y1[:, x], y2[:, x] = (q1, q2), (r1, r2)

    pr_u1_given_x = np.asarray(pr_u1_given_x, dtype=float)
    pr_u1 = float(pr_u1_given_x @ tables.pr_x)
    pr_x1_given_u = (pr_u1_given_x[0] * tables.pr_x[0] / pr_u1,
                     (1 - pr_u1_given_x[0]) * tables.pr_x[0] / (1 - pr_u1))
    return CategoricalParams.binary(pr_u1, pr_x1_given_u, (y1, y2, None))


def counterexample_pair() -> Tuple[CategoricalParams, CategoricalParams]:
    """Two binary models with a constant third outcome, equal joint law and different causal effects."""
    first = CategoricalParams.binary(COUNTEREXAMPLE_PR_U1, COUNTEREXAMPLE_PR_X1_GIVEN_U,
                                     (COUNTEREXAMPLE_PR_Y1_GIVEN_UX, COUNTEREXAMPLE_PR_Y1_GIVEN_UX, None))
    second = _equivalent_two_outcome_model(first, COUNTEREXAMPLE_FREE_U1_GIVEN_X, COUNTEREXAMPLE_FREE_Y1_GIVEN_U1X)
    return first, second


# pr(Y1=1|U=u,X=x) as [u][x] and pr(U=1|X=x) for the four latent codings of one observed law.
LOCAL_CASES = {
    'I': (((0.1, 0.4), (0.6, 0.8)), (0.2, 0.75)),
    'II': (((0.6, 0.8), (0.1, 0.4)), (0.8, 0.25)),
    'III': (((0.1, 0.8), (0.6, 0.4)), (0.2, 0.25)),
    'IV': (((0.6, 0.4), (0.1, 0.8)), (0.8, 0.75)),
}
LOCAL_CASE_PR_X1 = 0.5


def local_identifiability_case(case: str) -> CategoricalParams:
    """Binary model for one of the cases I-IV with pr(X=1) = 0.5 and pr(Y1=1|x) = 0.5.

    Y2 and Y3 reuse the binary simulation design so the model has three
    informative outcomes.
    """
    if case not in LOCAL_CASES:
        raise KeyError(f"Unknown case '{case}', expected one of {sorted(LOCAL_CASES)}")
    y1, pr_u1_given_x = LOCAL_CASES[case]
    pr_u1_given_x = np.asarray(pr_u1_given_x)
    pr_x = np.array([LOCAL_CASE_PR_X1, 1 - LOCAL_CASE_PR_X1])
    pr_u1 = float(pr_u1_given_x @ pr_x)
    pr_x1_given_u = (pr_u1_given_x[0] * pr_x[0] / pr_u1, (1 - pr_u1_given_x[0]) * pr_x[0] / (1 - pr_u1))
    return CategoricalParams.binary(pr_u1, pr_x1_given_u,
                                    (y1, CATEGORICAL_PR_Y1_GIVEN_UX[1], CATEGORICAL_PR_Y1_GIVEN_UX[2]))


def ordering_violation_case() -> CategoricalParams:
    """Case III with a three-level Y1 whose second level reverses its latent order across x.

    With a binary Y1 the per-stratum recoveries of cases I and III cannot be
    told apart; the extra level makes the violation observable.
    """
    base = local_identifiability_case('III')
    level1 = np.array(LOCAL_CASES['III'][0])
    level2 = np.array([[0.3, 0.15], [0.2, 0.05]])
    y1 = np.stack([level1, level2, 1.0 - level1 - level2])
    return CategoricalParams(pr_u=base.pr_u, pr_x_given_u=base.pr_x_given_u,
                             pr_y_given_ux=(y1,) + base.pr_y_given_ux[1:])
