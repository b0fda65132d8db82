from dataclasses import dataclass
from typing import Dict, List, Tuple
import logging

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from ..errors import (BadParams, ComplexSpectrum, NotIdentifiable, OrderInstability, ParallelOutcomesError,
                      RankDeficient)
from ..numerics import eig_real
from .analyzer import reconstruction_error
from .models import CategoricalParams, EmpiricalTables

logger = logging.getLogger(__name__)

EPS_RANK = 1e-8
IMAG_REL_TOL = 1e-6
ORDER_TOL = 0.02
CLIP_WARN = 0.05
# Eigenvector matches weaker than this fall back to projecting onto the y1=1 basis.
MATCH_COS_FLOOR = 0.9
MIN_EIGEN_GAP = 1e-10


@dataclass
class StratumFit:
    """Decomposition of one exposure stratum, latent levels in ascending pr(Y1=1|u,x)."""
    pr_y1: np.ndarray
    pr_y2: np.ndarray
    pr_y3: np.ndarray
    pr_u: np.ndarray
    eigenvalues: np.ndarray
    min_gap: float
    clip_total: float
    offdiag: float


def _clip_columns(mat: np.ndarray) -> Tuple[np.ndarray, float]:
    clipped = np.clip(mat, 0.0, 1.0)
    amount = float(np.abs(mat - clipped).sum())
    sums = clipped.sum(axis=0, keepdims=True)
    if np.any(sums <= 0):
        raise RankDeficient("A recovered probability column vanished after clipping")
    return clipped / sums, amount


def _probability_columns(vectors: np.ndarray) -> np.ndarray:
    sums = vectors.sum(axis=0)
    if np.any(np.abs(sums) < 1e-12):
        raise RankDeficient("An eigenvector cannot be scaled to a probability column",
                            details={'column_sums': sums.tolist()})
    return vectors / sums


def _real_spectrum(pairs, label: str, x: int, tol: float):
    radius = max(pairs.spectral_radius(), np.finfo(float).tiny)
    if pairs.max_imag() > tol * radius:
        raise ComplexSpectrum(f"{label} spectrum at x={x + 1} has imaginary part {pairs.max_imag():.3e}",
                              details={'x': x + 1, 'max_imag': pairs.max_imag(), 'spectral_radius': radius})
    return pairs.values.real, pairs.vectors.real


def _level_eigenvalues(m_a: np.ndarray, basis: np.ndarray, imag_tol: float) -> np.ndarray:
    """Eigenvalues of M_a assigned to the latent levels of ``basis`` by eigenvector matching."""
    projected = np.diag(scipy.linalg.solve(basis, m_a @ basis))
    try:
        pairs = eig_real(m_a)
    except ParallelOutcomesError:
        return projected
    if pairs.max_imag() > imag_tol * max(pairs.spectral_radius(), np.finfo(float).tiny):
        return projected

    vecs = pairs.vectors.real
    cos = np.abs(vecs.T @ basis) / np.outer(np.linalg.norm(vecs, axis=0), np.linalg.norm(basis, axis=0))
    rows, cols = linear_sum_assignment(-cos)
    if cos[rows, cols].min() < MATCH_COS_FLOOR:
        return projected
    values = np.empty(basis.shape[1])
    values[cols] = pairs.values.real[rows]
    return values


def decompose_stratum(p123_x: np.ndarray, p23_x: np.ndarray, x: int,
                      imag_rel_tol: float = IMAG_REL_TOL) -> StratumFit:
    """Recover pr(y|u,x) and pr(u|x) from the stratum's P23 and P123 matrices."""
    m1 = scipy.linalg.solve(p23_x.T, p123_x[0].T).T
    lam, v2 = _real_spectrum(eig_real(m1), 'P123 P23^-1', x, imag_rel_tol)
    gaps = np.diff(lam)
    min_gap = float(gaps.min()) if gaps.size else float('inf')
    if min_gap <= MIN_EIGEN_GAP:
        raise OrderInstability(f"pr(Y1=1|u,x) is tied across latent levels at x={x + 1}",
                               details={'x': x + 1, 'eigenvalues': lam.tolist()})

    m1_t = scipy.linalg.solve(p23_x, p123_x[0]).T
    _, v3 = _real_spectrum(eig_real(m1_t), "P123' P23'^-1", x, imag_rel_tol)

    b2, clip2 = _clip_columns(_probability_columns(v2))
    b3, clip3 = _clip_columns(_probability_columns(v3))

    middle = scipy.linalg.solve(b3, scipy.linalg.solve(b2, p23_x).T).T
    offdiag = float(np.abs(middle - np.diag(np.diag(middle))).max())
    du, clip_u = _clip_columns(np.diag(middle)[:, None])

    rows = [lam]
    for a in range(1, p123_x.shape[0]):
        m_a = scipy.linalg.solve(p23_x.T, p123_x[a].T).T
        rows.append(_level_eigenvalues(m_a, b2, imag_rel_tol))
    pr_y1, clip1 = _clip_columns(np.vstack(rows))

    clip_total = clip1 + clip2 + clip3 + clip_u
    logger.debug(f"Stratum x={x + 1}: eigenvalues={np.round(lam, 6).tolist()}, min_gap={min_gap:.3e}, "
                 f"clip={clip_total:.3e}, offdiag={offdiag:.3e}")
    return StratumFit(pr_y1=pr_y1, pr_y2=b2, pr_y3=b3, pr_u=du[:, 0], eigenvalues=lam,
                      min_gap=min_gap, clip_total=clip_total, offdiag=offdiag)


def ordering_conflicts(pr_y1: np.ndarray, tol: float = ORDER_TOL) -> Tuple[Dict, List[Dict]]:
    """Cross-stratum sign agreement of pairwise latent differences in pr(y1|u,x).

    ``pr_y1`` has shape (k1, k_u, k_x) under the per-x ascending coding. A pair of
    latent levels conflicts when its difference exceeds ``tol`` with opposite
    signs in two strata.

    Only Y1 levels after the first can conflict, since the coding sorts on the
    first. A binary Y1 therefore never reports a conflict: its second level is
    one minus the first and descends in every stratum, so a latent order that
    truly flips across x goes unseen. Detecting that needs Y1 with three or
    more levels.
    """
    k1, k_u, k_x = pr_y1.shape
    orderings = {f'x={x + 1}': {f'y1={a + 1}': (np.argsort(pr_y1[a, :, x], kind='stable') + 1).tolist()
                                for a in range(k1)}
                 for x in range(k_x)}
    conflicts = []
    for a in range(1, k1):
        for u in range(k_u):
            for v in range(u + 1, k_u):
                diff = pr_y1[a, v, :] - pr_y1[a, u, :]
                signs = set(np.sign(diff[np.abs(diff) > tol]).tolist())
                if len(signs) > 1:
                    conflicts.append({'y1': a + 1, 'latent_pair': [u + 1, v + 1], 'differences': diff.tolist()})
    return orderings, conflicts


def _require_three_outcomes(tables: EmpiricalTables) -> int:
    k1, k2, k3 = tables.k_y
    if k2 == 1 or k3 == 1:
        raise NotIdentifiable("A constant outcome carries no information; two outcomes do not identify "
                              "the potential outcome distributions", details={'k_y': [k1, k2, k3]})
    if k2 != k3:
        raise BadParams(f"Y2 and Y3 must share the latent cardinality, got {k2} and {k3}",
                        details={'k_y': [k1, k2, k3]})
    return k2


def identify_two_outcomes(tables: EmpiricalTables) -> None:
    """Two outcomes never suffice: the observed law admits distinct causal answers."""
    raise NotIdentifiable("Potential outcome distributions are not identified from two outcomes; "
                          "a third parallel outcome is required",
                          details={'k_y': list(tables.k_y)})


def plugin_identify(tables: EmpiricalTables, eps_rank: float = EPS_RANK, imag_rel_tol: float = IMAG_REL_TOL,
                    order_tol: float = ORDER_TOL) -> Tuple[CategoricalParams, Dict]:
    """Plug-in estimator: decompose each stratum, then assemble pr(u), pr(x|u) and pr(y|u,x)."""
    k = _require_three_outcomes(tables)

    conds = [float(np.linalg.cond(tables.p23[x])) for x in range(tables.k_x)]
    if any(not np.isfinite(c) or c > 1.0 / eps_rank for c in conds):
        raise RankDeficient("P(Y2,Y3|x) is not of full rank", details={'condition_numbers': conds})

    fits = [decompose_stratum(tables.p123[x], tables.p23[x], x, imag_rel_tol) for x in range(tables.k_x)]
    pr_y1 = np.stack([f.pr_y1 for f in fits], axis=2)
    orderings, conflicts = ordering_conflicts(pr_y1, order_tol)
    if conflicts:
        raise OrderInstability("Latent orderings of pr(y1|u,x) disagree across exposure levels",
                               details={'orderings': orderings, 'conflicts': conflicts})

    pr_u_given_x = np.stack([f.pr_u for f in fits], axis=1)
    pr_u = pr_u_given_x @ tables.pr_x
    if np.any(pr_u <= 0):
        raise RankDeficient("A latent level has no mass after recovery", details={'pr_u': pr_u.tolist()})
    pr_x_given_u = (pr_u_given_x * tables.pr_x[None, :]).T / pr_u[None, :]
    pr_x_given_u = pr_x_given_u / pr_x_given_u.sum(axis=0, keepdims=True)

    params = CategoricalParams(
        pr_u=pr_u / pr_u.sum(),
        pr_x_given_u=pr_x_given_u,
        pr_y_given_ux=(pr_y1,
                       np.stack([f.pr_y2 for f in fits], axis=2),
                       np.stack([f.pr_y3 for f in fits], axis=2)),
    )

    clip_total = float(sum(f.clip_total for f in fits))
    if clip_total > CLIP_WARN:
        logger.warning(f"Plug-in recovery clipped {clip_total:.4f} of probability mass; "
                       f"the fit may be unreliable")
    diagnostics = {
        'latent_levels': k,
        'condition_numbers': conds,
        'eigenvalues': [f.eigenvalues.tolist() for f in fits],
        'min_eigen_gap': [f.min_gap for f in fits],
        'clip_by_stratum': [f.clip_total for f in fits],
        'clip_total': clip_total,
        'offdiagonal_residual': [f.offdiag for f in fits],
        'reconstruction_error': reconstruction_error(params, tables).tolist(),
        'orderings': orderings,
    }
    logger.info(f"Plug-in identification done: k_u={k}, clip_total={clip_total:.3e}")
    return params, diagnostics


def check_conditions(tables: EmpiricalTables, eps_rank: float = EPS_RANK, imag_rel_tol: float = IMAG_REL_TOL,
                     order_tol: float = ORDER_TOL) -> Dict:
    """Observable checks of the full-rank and monotone-coding conditions. Never raises."""
    report = {
        'condition_numbers': [],
        'full_rank': [],
        'min_eigen_gap': [],
        'real_spectrum': [],
        'ordering_consistent': False,
        'orderings': {},
        'conflicts': [],
        'messages': [],
    }
    try:
        _require_three_outcomes(tables)
    except ParallelOutcomesError as e:
        report['messages'].append(str(e))
        report['identifiable'] = False
        return report

    fits = []
    for x in range(tables.k_x):
        cond = float(np.linalg.cond(tables.p23[x]))
        full_rank = bool(np.isfinite(cond) and cond <= 1.0 / eps_rank)
        report['condition_numbers'].append(cond)
        report['full_rank'].append(full_rank)
        if not full_rank:
            report['min_eigen_gap'].append(None)
            report['real_spectrum'].append(None)
            report['messages'].append(f"P23 at x={x + 1} is rank deficient (cond={cond:.3e})")
            continue
        try:
            fit = decompose_stratum(tables.p123[x], tables.p23[x], x, imag_rel_tol)
        except ComplexSpectrum as e:
            report['min_eigen_gap'].append(None)
            report['real_spectrum'].append(False)
            report['messages'].append(str(e))
            continue
        except (ParallelOutcomesError, np.linalg.LinAlgError) as e:
            report['min_eigen_gap'].append(None)
            report['real_spectrum'].append(True)
            report['messages'].append(f"x={x + 1}: {str(e)}")
            continue
        report['min_eigen_gap'].append(fit.min_gap)
        report['real_spectrum'].append(True)
        fits.append(fit)

    if len(fits) == tables.k_x:
        orderings, conflicts = ordering_conflicts(np.stack([f.pr_y1 for f in fits], axis=2), order_tol)
        report['orderings'] = orderings
        report['conflicts'] = conflicts
        report['ordering_consistent'] = not conflicts
        if conflicts:
            report['messages'].append(f"{len(conflicts)} latent orderings disagree across exposure levels")
    report['identifiable'] = bool(all(report['full_rank']) and report['ordering_consistent'])
    return report
