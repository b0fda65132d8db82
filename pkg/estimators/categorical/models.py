from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from ..errors import BadParams, EmptyStratum

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise BadParams(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def _check_simplex(arr: np.ndarray, axis: int, name: str, tol: float) -> None:
    if np.any(arr < -tol) or np.any(arr > 1 + tol):
        raise BadParams(f"{name} has probabilities outside [0, 1]",
                        details={'min': float(arr.min()), 'max': float(arr.max())})
    sums = arr.sum(axis=axis)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > tol:
        raise BadParams(f"{name} does not sum to one (max deviation {worst:.3e})", details={'deviation': worst})


@dataclass(frozen=True)
class CategoricalParams:
    """pr(u), pr(x|u) and pr(y_j|u,x) of the discrete parallel-outcome model.

    Levels are stored 0-based. ``pr_x_given_u[x, u]`` is column-stochastic over x;
    ``pr_y_given_ux[j][y, u, x]`` is stochastic over y for every (u, x).
    """
    pr_u: np.ndarray
    pr_x_given_u: np.ndarray
    pr_y_given_ux: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, 'pr_u', _frozen(self.pr_u, 'pr_u'))
        object.__setattr__(self, 'pr_x_given_u', _frozen(self.pr_x_given_u, 'pr_x_given_u'))
        object.__setattr__(self, 'pr_y_given_ux',
                           tuple(_frozen(y, f'pr_y_given_ux[{j}]') for j, y in enumerate(self.pr_y_given_ux)))
        self.validate()

    @property
    def k_u(self) -> int:
        return self.pr_u.shape[0]

    @property
    def k_x(self) -> int:
        return self.pr_x_given_u.shape[0]

    @property
    def k_y(self) -> Tuple[int, ...]:
        return tuple(y.shape[0] for y in self.pr_y_given_ux)

    def validate(self, tol: float = SIMPLEX_TOL) -> None:
        if self.pr_u.ndim != 1:
            raise BadParams("pr_u must be a vector")
        if self.pr_x_given_u.ndim != 2 or self.pr_x_given_u.shape[1] != self.k_u:
            raise BadParams(f"pr_x_given_u must have shape (k_x, {self.k_u})",
                            details={'shape': self.pr_x_given_u.shape})
        _check_simplex(self.pr_u, 0, 'pr_u', tol)
        _check_simplex(self.pr_x_given_u, 0, 'pr_x_given_u', tol)
        for j, y in enumerate(self.pr_y_given_ux):
            if y.ndim != 3 or y.shape[1:] != (self.k_u, self.k_x):
                raise BadParams(f"pr_y_given_ux[{j}] must have shape (k_y, {self.k_u}, {self.k_x})",
                                details={'shape': y.shape})
            _check_simplex(y, 0, f'pr_y_given_ux[{j}]', tol)

    def y_matrix(self, j: int) -> np.ndarray:
        """pr(y_j | u, x) as a k_yj x (k_u*k_x) matrix, column u*k_x + x."""
        y = self.pr_y_given_ux[j]
        return y.reshape(y.shape[0], self.k_u * self.k_x)

    def pr_x(self) -> np.ndarray:
        return self.pr_x_given_u @ self.pr_u

    def pr_u_given_x(self) -> np.ndarray:
        """pr(u | x) with shape (k_u, k_x)."""
        joint = self.pr_x_given_u.T * self.pr_u[:, None]
        return joint / joint.sum(axis=0, keepdims=True)

    def relabel(self, order: Sequence[int]) -> 'CategoricalParams':
        """Reorder the latent levels: new level i is old level order[i]."""
        order = list(order)
        return CategoricalParams(
            pr_u=self.pr_u[order],
            pr_x_given_u=self.pr_x_given_u[:, order],
            pr_y_given_ux=tuple(y[:, order, :] for y in self.pr_y_given_ux),
        )

    def max_abs_diff(self, other: 'CategoricalParams') -> float:
        diffs = [np.abs(self.pr_u - other.pr_u).max(), np.abs(self.pr_x_given_u - other.pr_x_given_u).max()]
        diffs += [np.abs(a - b).max() for a, b in zip(self.pr_y_given_ux, other.pr_y_given_ux)]
        return float(max(diffs))

    def as_dict(self) -> Dict:
        return {
            'pr_u': self.pr_u.tolist(),
            'pr_x_given_u': self.pr_x_given_u.tolist(),
            'pr_y_given_ux': [y.tolist() for y in self.pr_y_given_ux],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'CategoricalParams':
        return cls(pr_u=data['pr_u'], pr_x_given_u=data['pr_x_given_u'],
                   pr_y_given_ux=tuple(np.array(y) for y in data['pr_y_given_ux']))

    @classmethod
    def binary(cls, pr_u1: float, pr_x1_given_u: Sequence[float],
               pr_y1_given_ux: Sequence[Sequence[Sequence[float]]]) -> 'CategoricalParams':
        """Build a model whose variables take levels 1 and 2.

        ``pr_y1_given_ux[j][u][x]`` is pr(Y_j = 1 | U = u+1, X = x+1). A ``None``
        entry marks a constant outcome with a single level.
        """
        pr_x1 = np.asarray(pr_x1_given_u, dtype=float)
        outcomes = []
        for table in pr_y1_given_ux:
            if table is None:
                outcomes.append(np.ones((1, 2, 2)))
                continue
            p1 = np.asarray(table, dtype=float)
            outcomes.append(np.stack([p1, 1.0 - p1]))
        return cls(pr_u=[pr_u1, 1.0 - pr_u1],
                   pr_x_given_u=np.stack([pr_x1, 1.0 - pr_x1]),
                   pr_y_given_ux=tuple(outcomes))


@dataclass(frozen=True)
class JointTable:
    """pr(x, y1, y2, y3) as a tensor indexed [x, y1, y2, y3] (0-based levels)."""
    prob: np.ndarray

    def __post_init__(self):
        prob = _frozen(self.prob, 'joint table')
        if prob.ndim != 4:
            raise BadParams(f"Joint table must be 4-dimensional, got shape {prob.shape}")
        if np.any(prob < -SIMPLEX_TOL):
            raise BadParams("Joint table has negative mass")
        total = float(prob.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise BadParams(f"Joint table mass is {total!r}, expected 1", details={'total': total})
        object.__setattr__(self, 'prob', prob)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.prob.shape

    def cell(self, x: int, y1: int, y2: int, y3: int = 1) -> float:
        """Probability of a cell given 1-based labels."""
        return float(self.prob[x - 1, y1 - 1, y2 - 1, y3 - 1])

    def max_abs_diff(self, other: 'JointTable') -> float:
        return float(np.abs(self.prob - other.prob).max())

    def to_frame(self) -> pd.DataFrame:
        idx = np.argwhere(np.ones(self.prob.shape, dtype=bool))
        frame = pd.DataFrame(idx + 1, columns=['x', 'y1', 'y2', 'y3'])
        frame['prob'] = self.prob.ravel()
        return frame


@dataclass(frozen=True)
class EmpiricalTables:
    """Per-x matrices P(Y2,Y3|x) and P(y1,Y2,Y3|x) plus the marginal of X.

    ``p23`` is always derived by summing ``p123`` over y1, so marginalization
    holds exactly. ``n`` is the sample count, 0 for population tables.
    """
    pr_x: np.ndarray
    p123: np.ndarray
    n: int = 0
    p23: np.ndarray = field(init=False)

    def __post_init__(self):
        pr_x = _frozen(self.pr_x, 'pr_x')
        p123 = _frozen(self.p123, 'p123')
        if p123.ndim != 4 or p123.shape[0] != pr_x.shape[0]:
            raise BadParams(f"p123 must have shape (k_x, k1, k2, k3), got {p123.shape}")
        if np.any(pr_x <= 0):
            raise EmptyStratum("Some exposure level has zero probability",
                               details={'pr_x': pr_x.tolist()})
        if np.any(p123 < -SIMPLEX_TOL):
            raise BadParams("Conditional tables have negative entries")
        per_x = p123.sum(axis=(1, 2, 3))
        if np.max(np.abs(per_x - 1.0)) > 1e-10:
            raise BadParams("Each P(y1,Y2,Y3|x) must sum to one", details={'sums': per_x.tolist()})
        p23 = p123.sum(axis=1)
        p23.flags.writeable = False
        object.__setattr__(self, 'pr_x', pr_x)
        object.__setattr__(self, 'p123', p123)
        object.__setattr__(self, 'p23', p23)

    @property
    def k_x(self) -> int:
        return self.p123.shape[0]

    @property
    def k_y(self) -> Tuple[int, int, int]:
        return tuple(self.p123.shape[1:])

    def joint(self) -> np.ndarray:
        """pr(x, y1, y2, y3) = pr(y1, y2, y3 | x) * pr(x)."""
        return self.p123 * self.pr_x[:, None, None, None]


@dataclass(frozen=True)
class PotentialOutcomeDist:
    """pr{y_j(x)} stored per outcome as a (k_yj, k_x) array."""
    probs: Tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = tuple(_frozen(p, f'probs[{j}]') for j, p in enumerate(self.probs))
        for j, p in enumerate(probs):
            _check_simplex(p, 0, f'potential outcome distribution {j + 1}', 1e-10)
        object.__setattr__(self, 'probs', probs)

    def prob(self, outcome: int, level: int, x: int) -> float:
        """pr{Y_outcome(x) = level} with 1-based arguments."""
        return float(self.probs[outcome - 1][level - 1, x - 1])

    def max_abs_diff(self, other: 'PotentialOutcomeDist') -> float:
        return float(max(np.abs(a - b).max() for a, b in zip(self.probs, other.probs)))

    def to_frame(self) -> pd.DataFrame:
        rows: List[Dict] = []
        for j, p in enumerate(self.probs):
            for level in range(p.shape[0]):
                for x in range(p.shape[1]):
                    rows.append({'outcome': j + 1, 'x': x + 1, 'level': level + 1,
                                 'probability': float(p[level, x])})
        return pd.DataFrame(rows)
