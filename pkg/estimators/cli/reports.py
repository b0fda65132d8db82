from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import json
import logging
import os
import tempfile

import numpy as np
import pandas as pd

from ..categorical.analyzer import average_causal_effect
from ..categorical.models import CategoricalParams, PotentialOutcomeDist
from ..simgen.manager import ReplicationReport

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """Plain Python structures with every number as a float or int that json round-trips exactly."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, pd.DataFrame):
        return to_jsonable(value.to_dict(orient='records'))
    if isinstance(value, CategoricalParams):
        return value.as_dict()
    if isinstance(value, PotentialOutcomeDist):
        return [p.tolist() for p in value.probs]
    if isinstance(value, Warning):
        return str(value)
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    return value


def write_atomic(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def report_paths(output: str) -> Tuple[Path, Path]:
    """Structured report path and its text companion."""
    base = Path(output)
    json_path = base if base.suffix == '.json' else base.with_suffix('.json')
    return json_path, json_path.with_suffix('.txt')


def write_report(output: str, document: Dict, text: str) -> Tuple[Path, Path]:
    json_path, text_path = report_paths(output)
    write_atomic(json_path, json.dumps(to_jsonable(document), indent=2, sort_keys=True) + '\n')
    write_atomic(text_path, text.rstrip() + '\n')
    logger.info(f"Report written to {json_path} and {text_path}")
    return json_path, text_path


def read_report(path: str) -> Dict:
    with open(path, 'r', encoding='utf-8') as handle:
        return json.load(handle)


def _header(title: str, status: str) -> List[str]:
    return [title, '=' * len(title), f"status: {status}", '']


def _failure_section(result: Dict) -> Dict:
    return {key: result.get(key) for key in ('stage', 'error_type', 'message', 'details')}


def categorical_document(result: Dict, config: Dict) -> Tuple[Dict, str]:
    """Structured and text reports of a categorical fit."""
    document: Dict = {'command': 'fit-categorical', 'status': result['status'], 'config': config,
                      'n': result.get('n')}
    lines = _header('Categorical fit with three parallel outcomes', result['status'])

    if 'conditions' in result:
        conditions = result['conditions']
        document['conditions'] = conditions
        lines.append(f"identifiable: {conditions['identifiable']}")
        lines.extend(f"  - {message}" for message in conditions['messages'])
        lines.append('')
    if 'crude' in result:
        document['crude'] = result['crude']
        lines += ['crude pr{Y_j(x) = level}:', result['crude'].to_frame().to_string(index=False), '']
    if 'plugin' in result:
        document['plugin'] = result['plugin']
        document['plugin_outcomes'] = result['plugin_outcomes']
        document['diagnostics'] = result['diagnostics']
    if 'refined' in result:
        fit = result['refined']
        document['refined'] = {'params': fit.params, 'objective': fit.objective,
                               'warm_objective': fit.warm_objective, 'iterations': fit.iterations,
                               'status': fit.status, 'message': fit.message}
        lines.append(f"GLS refinement: {fit.status}, objective {fit.objective:.6g} "
                     f"(start {fit.warm_objective:.6g}, {fit.iterations} evaluations)")
        lines += ['', 'recovered pr(U):', str(np.round(fit.params.pr_u, 6)), '']
    if 'potential_outcomes' in result:
        dist = result['potential_outcomes']
        document['potential_outcomes'] = dist
        document['average_causal_effect'] = average_causal_effect(dist)
        lines += ['pr{Y_j(x) = level}:', dist.to_frame().to_string(index=False), '',
                  'pr{Y_j(2)=1} - pr{Y_j(1)=1}: ' + ', '.join(f'{v:.6f}' for v in average_causal_effect(dist))]
    if result['status'] != 'success':
        document['failure'] = _failure_section(result)
        lines += ['', f"FAILED at stage {result.get('stage')}: {result.get('error_type')}: {result.get('message')}"]
    return document, '\n'.join(lines)


def linear_document(result: Dict, config: Dict) -> Tuple[Dict, str]:
    """Structured and text reports of the linear workflow; finished stages are kept on failure."""
    document: Dict = {'command': 'fit-linear', 'status': result['status'], 'config': config,
                      'n': result.get('n'), 'p': result.get('p'), 'q': result.get('q'),
                      'dropped_rows': result.get('dropped_rows')}
    lines = _header('Linear structural equation fit with negative-control outcomes', result['status'])
    lines.append(f"n={result.get('n')}, p={result.get('p')}, covariates={result.get('q')}, "
                 f"dropped rows={result.get('dropped_rows')}")
    names = result.get('analyzed_outcomes') or result.get('outcomes')

    if 'screening' in result:
        document['screening'] = result['screening']
        kept = int(result['screening']['retained'].sum())
        lines.append(f"screening kept {kept} of {len(result['screening'])} outcomes")
    if 'factors' in result:
        fit = result['factors']
        document['factors'] = fit.summary()
        lines.append(f"factors (r+1): {fit.num_factors}, sigma2={fit.sigma2_hat:.6g}, delta={fit.delta:.6g}")
    if 'diagonality' in result:
        document['diagonality'] = result['diagonality'].summary(names)
        lines.append(f"surviving error off-diagonals: {result['diagonality'].nonzero_offdiagonals}")
    if 'selection' in result:
        sel = result['selection']
        document['selection'] = {'s0_hat': [names[j] for j in sel.s0_hat], 's0_index': sel.s0_hat,
                                 'w_star': sel.w_star, 'y_star': sel.y_star, 'objective': sel.objective,
                                 'method': sel.method, 'delta': sel.delta, 'diagnostics': sel.diagnostics}
        lines.append(f"negative controls ({len(sel.s0_hat)}): {', '.join(names[j] for j in sel.s0_hat)}")
    if 'effects' in result:
        effects = result['effects']
        table = effects.table(names)
        document['effects'] = {'beta_hat': effects.beta_hat, 'table': table, 'level': effects.level,
                               'diagnostics': effects.diagnostics}
        lines += ['', pd.DataFrame(table).to_string(index=False)]
    if result['status'] != 'success':
        document['failure'] = _failure_section(result)
        lines += ['', f"FAILED at stage {result.get('stage')}: {result.get('error_type')}: {result.get('message')}"]
    return document, '\n'.join(lines)


def replication_document(report: ReplicationReport, config: Optional[Dict] = None) -> Tuple[Dict, str]:
    document = dict(report.as_dict(), command='replicate', config=config or {})
    lines = _header(f"Monte Carlo replication of {report.table}", 'success')
    lines.append(f"runs per cell: {report.runs}, seed: {report.seed}, workers: {report.workers}, "
                 f"failures: {report.failures} ({report.failure_rate:.2%})")
    frame = report.to_frame()
    if not frame.empty:
        lines += ['', frame.to_string(index=False)]
    return document, '\n'.join(lines)
