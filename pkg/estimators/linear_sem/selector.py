"""Thresholded l0 rotation search for the negative-control set.

Given loadings G (p x d) and a threshold delta, find a unit vector w making
as many entries of G w as possible fall within [-delta, delta]. Those rows
are the estimated negative controls.
"""
from dataclasses import dataclass, field
from itertools import combinations, product
from math import comb
from typing import Dict, Iterator, List, Optional, Tuple, Union
import logging

import numpy as np

from ..errors import LinearSEMError, NoCandidates
from .analyzer import FactorFit

logger = logging.getLogger(__name__)

DEFAULT_M = 30.0
POLISH_ITERATIONS = 100
GRID_FALLBACK_DEG = 2.0
NODE_BUDGET = 200_000
# Above this many threshold vertices the enumeration relies on null vectors and polishing.
VERTEX_BUDGET = 2_000_000
CHUNK = 50_000
METHODS = ('enumeration', 'branch_and_bound', 'sphere_grid')


def threshold_tolerance(delta: float) -> float:
    return delta * (1.0 + 1e-9) + 1e-12


@dataclass
class Selection:
    """Estimated negative controls, the rotation that reveals them and its threshold count.

    ``s0_hat`` holds 0-based outcome indices with |y_star_j| within the
    threshold (``threshold_tolerance(delta)``).
    """
    s0_hat: np.ndarray
    w_star: np.ndarray
    y_star: np.ndarray
    objective: int
    method: str
    delta: float
    diagnostics: Dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.y_star.shape[0]

    @property
    def targets(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.p), self.s0_hat)

    @classmethod
    def fixed(cls, s0_hat, p: int) -> 'Selection':
        """A selection supplied by the user instead of searched for."""
        s0 = np.unique(np.asarray(s0_hat, dtype=int))
        y_star = np.ones(p)
        y_star[s0] = 0.0
        return cls(s0_hat=s0, w_star=np.ones(1), y_star=y_star, objective=int(p - s0.size),
                   method='fixed', delta=0.0)


def _as_loadings(loadings: np.ndarray) -> np.ndarray:
    g = np.asarray(loadings, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.ndim != 2 or g.shape[1] < 1:
        raise LinearSEMError(f"Loadings must be a p x d matrix, got shape {g.shape}")
    return g


def selection_objective(loadings: np.ndarray, w: np.ndarray, delta: float) -> Union[int, np.ndarray]:
    """Number of rows with |G w| above delta; ``w`` may hold candidates as columns."""
    y = _as_loadings(loadings) @ w
    counts = np.sum(np.abs(y) > threshold_tolerance(delta), axis=0)
    return int(counts) if np.ndim(counts) == 0 else counts


def _finalize(loadings: np.ndarray, w: np.ndarray, delta: float, method: str, diagnostics: Dict) -> Selection:
    w = np.asarray(w, dtype=float)
    w = w / np.linalg.norm(w)
    y = loadings @ w
    if y[np.argmax(np.abs(y))] < 0:
        w, y = -w, -y
    zeros = np.flatnonzero(np.abs(y) <= threshold_tolerance(delta))
    return Selection(s0_hat=zeros, w_star=w, y_star=y, objective=int(y.shape[0] - zeros.size),
                     method=method, delta=float(delta), diagnostics=diagnostics)


def _pattern_score(loadings: np.ndarray, w: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Threshold count and the summed |y| over the thresholded rows, per candidate column."""
    y = np.abs(loadings @ w)
    inside = y <= threshold_tolerance(delta)
    return (~inside).sum(axis=0), np.where(inside, y, 0.0).sum(axis=0)


def _null_vector_candidates(loadings: np.ndarray) -> np.ndarray:
    """Unit null vectors of every r-row subset with rank r, in lexicographic subset order."""
    p, d = loadings.shape
    r = d - 1
    subsets = np.array(list(combinations(range(p), r)), dtype=int).reshape(-1, r)
    if subsets.shape[0] == 0:
        return np.zeros((d, 0))
    blocks = loadings[subsets]
    _, s, vt = np.linalg.svd(blocks)
    full_rank = s[:, -1] > 1e-10 * np.maximum(s[:, 0], np.finfo(float).tiny)
    return vt[full_rank, -1, :].T


def _vertex_candidates(rows: np.ndarray, bounds: np.ndarray) -> Iterator[np.ndarray]:
    """Vertices of {w : |rows w| <= bounds}, one chunk of columns at a time.

    Sign patterns are fixed positive in the first constraint since v and -v
    describe the same point of the sphere up to sign.
    """
    m, d = rows.shape
    signs = np.array([(1.0,) + s for s in product((1.0, -1.0), repeat=d - 1)])
    subsets = combinations(range(m), d)
    while True:
        batch = np.array([s for _, s in zip(range(max(1, CHUNK // len(signs))), subsets)], dtype=int)
        if batch.size == 0:
            return
        mats = rows[batch]
        dets = np.abs(np.linalg.det(mats))
        scale = np.prod(np.linalg.norm(mats, axis=2), axis=1)
        keep = dets > 1e-12 * np.maximum(scale, np.finfo(float).tiny)
        if not np.any(keep):
            continue
        mats, batch = mats[keep], batch[keep]
        rhs = signs[None, :, :] * bounds[batch][:, None, :]
        verts = np.linalg.solve(mats[:, None, :, :], rhs[..., None])[..., 0]
        yield verts.reshape(-1, d).T


def _polish(loadings: np.ndarray, w: np.ndarray, delta: float, iterations: int) -> Tuple[np.ndarray, int]:
    """Coordinate-plane rotation descent on (count, summed |y| of thresholded rows)."""
    d = w.shape[0]
    best_count, best_score = (v[0] for v in _pattern_score(loadings, w[:, None], delta))
    angle = 0.1
    steps = 0
    planes = list(combinations(range(d), 2))
    for steps in range(1, iterations + 1):
        moved = False
        for i, k in planes:
            for theta in (angle, -angle):
                c, s = np.cos(theta), np.sin(theta)
                trial = w.copy()
                trial[i], trial[k] = c * w[i] - s * w[k], s * w[i] + c * w[k]
                count, score = (v[0] for v in _pattern_score(loadings, trial[:, None], delta))
                if (count, score) < (best_count, best_score):
                    w, best_count, best_score, moved = trial, count, score, True
        if not moved:
            angle /= 2.0
            if angle < 1e-8:
                break
    return w, steps


def enumerate_rotations(loadings: np.ndarray, delta: float, polish_iterations: int = POLISH_ITERATIONS) -> Selection:
    """Exact candidate search over null vectors of r-row subsets and threshold vertices.

    Null vectors cover zero patterns whose loading block is rank deficient;
    normalized vertices of {w : |G_S w| <= delta} cover the full-rank ones.
    Ties prefer the smallest summed |y| over the zero pattern, then the
    earliest candidate.
    """
    g = _as_loadings(loadings)
    p, d = g.shape
    if d == 1:
        return _finalize(g, np.ones(1), delta, 'enumeration', {'candidates': 1})

    chunks = [_null_vector_candidates(g)]
    num_null = chunks[0].shape[1]
    num_vertices = comb(p, d) * 2 ** (d - 1)
    use_vertices = delta > 0 and num_vertices <= VERTEX_BUDGET
    if use_vertices:
        for verts in _vertex_candidates(g, np.full(p, float(delta))):
            norms = np.linalg.norm(verts, axis=0)
            on_sphere = norms >= 1.0 - 1e-12
            chunks.append(verts[:, on_sphere] / norms[on_sphere])
    elif delta > 0:
        logger.debug(f"Skipping {num_vertices} threshold vertices; relying on polish")

    best = None
    offset = 0
    for cands in chunks:
        for start in range(0, cands.shape[1], CHUNK):
            block = cands[:, start:start + CHUNK]
            counts, scores = _pattern_score(g, block, delta)
            idx = int(np.lexsort((scores, counts))[0])
            key = (int(counts[idx]), float(scores[idx]), offset + start + idx)
            if best is None or key < best[0]:
                best = (key, block[:, idx].copy())
        offset += cands.shape[1]
    if best is None:
        raise NoCandidates("Every r-row subset of the loadings is rank deficient",
                           details={'p': p, 'num_factors': d})

    (count, _, index), w = best
    polished, steps = _polish(g, w, delta, polish_iterations)
    diagnostics = {'candidates': offset, 'null_vectors': num_null, 'vertices_used': use_vertices,
                   'pre_polish_objective': count, 'polish_iterations': steps, 'chosen_candidate': index}
    logger.debug(f"Enumeration: {offset} candidates, best objective {count}, polished "
                 f"{selection_objective(g, polished, delta)}")
    return _finalize(g, polished, delta, 'enumeration', diagnostics)


class _FeasibilityOracle:
    """Decides whether some unit w keeps a given row set within the threshold."""

    def __init__(self, loadings: np.ndarray, delta: float, M: float):
        self.g = loadings
        self.delta = delta
        self.M = M
        norms = np.linalg.norm(loadings, axis=1)
        self.m_rows = np.flatnonzero(norms > delta + M)
        self.calls = 0

    def _satisfies_m(self, w: np.ndarray, zero_set: Tuple[int, ...]) -> bool:
        rows = np.setdiff1d(self.m_rows, zero_set)
        return bool(np.all(np.abs(self.g[rows] @ w) <= threshold_tolerance(self.delta + self.M)))

    def witness(self, zero_set: Tuple[int, ...]) -> Optional[np.ndarray]:
        self.calls += 1
        d = self.g.shape[1]
        if not zero_set:
            w = np.eye(d)[0]
            return w if self._satisfies_m(w, zero_set) else self._vertex_witness(zero_set)
        block = self.g[list(zero_set)]
        _, s, vt = np.linalg.svd(block)
        rank = int(np.sum(s > 1e-10 * max(s[0], np.finfo(float).tiny)))
        if rank < d:
            w = vt[-1]
            if self._satisfies_m(w, zero_set):
                return w
        return self._vertex_witness(zero_set)

    def _vertex_witness(self, zero_set: Tuple[int, ...]) -> Optional[np.ndarray]:
        d = self.g.shape[1]
        extra = np.setdiff1d(self.m_rows, zero_set)
        rows = np.vstack([self.g[list(zero_set)], self.g[extra]])
        bounds = np.concatenate([np.full(len(zero_set), self.delta), np.full(extra.size, self.delta + self.M)])
        if rows.shape[0] < d or np.linalg.matrix_rank(rows) < d:
            return None
        tol = threshold_tolerance(bounds)
        best_norm, best = 0.0, None
        for verts in _vertex_candidates(rows, bounds):
            inside = np.all(np.abs(rows @ verts) <= tol[:, None], axis=0)
            if not np.any(inside):
                continue
            norms = np.linalg.norm(verts[:, inside], axis=0)
            j = int(np.argmax(norms))
            if norms[j] > best_norm:
                best_norm, best = norms[j], verts[:, inside][:, j]
        if best is None or best_norm < 1.0 - 1e-12:
            return None
        return best / best_norm


def branch_and_bound(loadings: np.ndarray, delta: float, M: float = DEFAULT_M,
                     node_budget: int = NODE_BUDGET) -> Selection:
    """Exact search over zero sets, depth first with rows included before excluded.

    A node is pruned when even zeroing every remaining row cannot beat the
    incumbent. Feasibility is exact: a zero set is attainable iff its loading
    block is rank deficient or the threshold polytope has a vertex outside
    the unit ball.
    """
    g = _as_loadings(loadings)
    p, d = g.shape
    oracle = _FeasibilityOracle(g, delta, M)
    if oracle.m_rows.size:
        logger.warning(f"Bound M={M} is binding for {oracle.m_rows.size} rows; "
                       f"the search is restricted accordingly")

    order = np.argsort(np.linalg.norm(g, axis=1), kind='stable')
    root = oracle.witness(())
    if root is None:
        raise NoCandidates("No unit vector satisfies the M bounds", details={'M': M})
    best_set, best_w = (), root
    stack: List[Tuple[int, Tuple[int, ...], np.ndarray]] = [(0, (), root)]
    nodes = 0
    complete = True
    while stack:
        depth, zero_set, w = stack.pop()
        nodes += 1
        if nodes > node_budget:
            complete = False
            logger.warning(f"Branch and bound stopped after {node_budget} nodes; result may not be optimal")
            break
        if len(zero_set) + (p - depth) <= len(best_set):
            continue
        if depth == p:
            best_set, best_w = zero_set, w
            continue
        row = int(order[depth])
        stack.append((depth + 1, zero_set, w))
        if abs(g[row] @ w) <= threshold_tolerance(delta):
            stack.append((depth + 1, zero_set + (row,), w))
            continue
        extended = zero_set + (row,)
        witness = oracle.witness(tuple(sorted(extended)))
        if witness is not None:
            stack.append((depth + 1, extended, witness))

    diagnostics = {'nodes': nodes, 'feasibility_checks': oracle.calls, 'complete': complete,
                   'binding_m_rows': oracle.m_rows.tolist()}
    logger.debug(f"Branch and bound: {nodes} nodes, best zero set size {len(best_set)}")
    return _finalize(g, best_w, delta, 'branch_and_bound', diagnostics)


def _sphere_grid(d: int, resolution_deg: float) -> Iterator[np.ndarray]:
    """Hyperspherical grid over a half sphere, yielded as column blocks."""
    step = np.deg2rad(resolution_deg)
    inner = np.arange(0.0, np.pi + step / 2, step)
    last = np.arange(0.0, np.pi, step)
    if d == 1:
        yield np.ones((1, 1))
        return
    if d == 2:
        yield np.vstack([np.cos(last), np.sin(last)])
        return
    a, b = np.meshgrid(inner, last, indexing='ij')
    a, b = a.ravel(), b.ravel()
    for outer in product(inner, repeat=d - 3):
        prefix = np.ones_like(a)
        coords = []
        for phi in outer:
            coords.append(prefix * np.cos(phi))
            prefix = prefix * np.sin(phi)
        coords += [prefix * np.cos(a), prefix * np.sin(a) * np.cos(b), prefix * np.sin(a) * np.sin(b)]
        yield np.vstack(coords)


def sphere_grid_search(loadings: np.ndarray, delta: float, resolution_deg: float = 1.0) -> Selection:
    """Brute-force minimum over a hyperspherical angle grid."""
    g = _as_loadings(loadings)
    best = None
    evaluated = 0
    for block in _sphere_grid(g.shape[1], resolution_deg):
        counts, scores = _pattern_score(g, block, delta)
        idx = int(np.lexsort((scores, counts))[0])
        key = (int(counts[idx]), float(scores[idx]))
        if best is None or key < best[0]:
            best = (key, block[:, idx].copy())
        evaluated += block.shape[1]
    return _finalize(g, best[1], delta, 'sphere_grid',
                     {'grid_points': evaluated, 'resolution_deg': resolution_deg})


def select_negative_controls(fit: Union[FactorFit, np.ndarray], delta: Optional[float] = None,
                             M: float = DEFAULT_M, method: str = 'enumeration',
                             polish_iterations: int = POLISH_ITERATIONS,
                             node_budget: int = NODE_BUDGET) -> Selection:
    """Pick the rotation with the fewest loadings above threshold.

    ``fit`` is a FactorFit (its loadings and delta are used) or a bare loading
    matrix, in which case ``delta`` is required.
    """
    if isinstance(fit, FactorFit):
        loadings = fit.loadings
        delta = fit.delta if delta is None else delta
    else:
        loadings = _as_loadings(fit)
        if delta is None:
            raise LinearSEMError("A threshold is required when selecting from a bare loading matrix")
    if method not in METHODS:
        raise LinearSEMError(f"Unknown selection method '{method}', expected one of {METHODS}")
    if M <= 0:
        raise LinearSEMError(f"M must be positive, got {M}")
    max_norm = float(np.linalg.norm(loadings, axis=1).max())
    if M < max_norm:
        logger.warning(f"M={M} is below the largest loading norm {max_norm:.3f}")

    try:
        if method == 'branch_and_bound':
            selection = branch_and_bound(loadings, delta, M, node_budget)
        elif method == 'sphere_grid':
            selection = sphere_grid_search(loadings, delta)
        else:
            selection = enumerate_rotations(loadings, delta, polish_iterations)
    except NoCandidates as e:
        logger.warning(f"{str(e)}; falling back to a {GRID_FALLBACK_DEG} degree sphere grid")
        selection = sphere_grid_search(loadings, delta, GRID_FALLBACK_DEG)
        selection.diagnostics['fallback'] = str(e)

    logger.info(f"Selected {selection.s0_hat.size} negative controls of {selection.p} "
                f"by {selection.method} (delta={delta:.4g})")
    return selection
