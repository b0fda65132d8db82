from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional
import logging
import os

import numpy as np
import yaml
from dotenv import load_dotenv

from ..errors import ConfigError
from ..linear_sem.selector import METHODS

logger = logging.getLogger(__name__)

SEED_ENV = 'PARALLEL_OUTCOMES_SEED'
COMMANDS = ('fit-categorical', 'fit-linear', 'simulate', 'replicate')
DESIGNS = ('categorical', 'linear')
STARTS = ('warm', 'random')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass
class RunConfig:
    """Effective settings of one command: defaults, then the YAML file, then flags."""
    command: str = ''
    input: Optional[str] = None
    output: Optional[str] = None
    seed: Optional[int] = None
    log_level: str = 'INFO'

    # categorical
    population: bool = False
    k_x: Optional[int] = None
    k_y: Optional[List[int]] = None
    start: str = 'warm'
    eps_rank: float = 1e-8
    imag_rel_tol: float = 1e-6
    order_tol: float = 0.02
    max_iter: int = 500

    # linear
    exposure: str = 'x'
    outcomes: Optional[List[str]] = None
    covariates: List[str] = field(default_factory=list)
    log_columns: List[str] = field(default_factory=list)
    screen: bool = True
    num_factors: Optional[int] = None
    M: float = 30.0
    method: str = 'enumeration'
    folds: int = 10
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None
    lambda_count: int = 50
    bootstrap: int = 0
    level: float = 0.95
    threshold_mult: float = 2.0
    pervasive_threshold: bool = False

    # simulate / replicate
    design: str = 'categorical'
    n: Optional[int] = None
    p: int = 30
    table: str = 'table2'
    runs: int = 100
    workers: int = 1
    full_grid: bool = False
    cells: Optional[List[List[int]]] = None

    @property
    def randomized(self) -> bool:
        return self.command in ('fit-linear', 'simulate', 'replicate') or \
            (self.command == 'fit-categorical' and self.start == 'random')

    def lambda_grid(self) -> Optional[np.ndarray]:
        if self.lambda_min is None:
            return None
        upper = self.lambda_max if self.lambda_max is not None else self.lambda_min
        return np.logspace(np.log10(self.lambda_min), np.log10(upper), self.lambda_count)

    def categorical_settings(self) -> Dict:
        return {'eps_rank': self.eps_rank, 'imag_rel_tol': self.imag_rel_tol, 'order_tol': self.order_tol,
                'max_iter': self.max_iter}

    def linear_settings(self) -> Dict:
        return {'num_factors': self.num_factors, 'M': self.M, 'method': self.method, 'folds': self.folds,
                'lambda_grid': self.lambda_grid(), 'seed': self.seed, 'bootstrap': self.bootstrap,
                'level': self.level, 'screen': self.screen, 'threshold_mult': self.threshold_mult,
                'pervasive_threshold': self.pervasive_threshold}

    def replication_settings(self) -> Dict:
        cells = self.cells
        if self.full_grid and cells is None:
            cells = [[n, p] for n in (500, 1000, 2000) for p in (30, 60, 100)]
        linear = self.linear_settings()
        linear.pop('seed')
        return {'runs': self.runs, 'seed': self.seed, 'workers': self.workers, 'cells': cells, 'n': self.n,
                'linear': linear, 'categorical': self.categorical_settings()}

    def validate(self) -> 'RunConfig':
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"unknown command '{self.command}'")
        if self.log_level.upper() not in LOG_LEVELS:
            problems.append(f"log level must be one of {LOG_LEVELS}")
        if self.folds < 2:
            problems.append(f"folds must be >= 2, got {self.folds}")
        if self.bootstrap and self.bootstrap < 100:
            problems.append(f"bootstrap resamples must be 0 or >= 100, got {self.bootstrap}")
        if not 0 < self.level < 1:
            problems.append(f"confidence level must lie in (0, 1), got {self.level}")
        if self.M <= 0:
            problems.append(f"M must be positive, got {self.M}")
        if self.threshold_mult <= 0:
            problems.append(f"threshold multiplier must be positive, got {self.threshold_mult}")
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}")
        if self.start not in STARTS:
            problems.append(f"start must be one of {STARTS}")
        if self.lambda_min is not None and (self.lambda_min <= 0
                                            or (self.lambda_max or self.lambda_min) < self.lambda_min):
            problems.append("lambda grid bounds must satisfy 0 < lambda_min <= lambda_max")
        if self.lambda_count < 1:
            problems.append(f"lambda count must be positive, got {self.lambda_count}")
        if self.command == 'replicate':
            if self.runs < 10:
                problems.append(f"runs must be >= 10, got {self.runs}")
            if self.workers < 1:
                problems.append(f"workers must be >= 1, got {self.workers}")
        if self.command == 'simulate':
            if self.design not in DESIGNS:
                problems.append(f"unknown design '{self.design}', expected one of {DESIGNS}")
            if not self.n or self.n < 1:
                problems.append("simulate needs a positive sample size")
        if self.command in ('fit-categorical', 'fit-linear') and not self.input:
            problems.append(f"{self.command} needs an input file")
        if self.randomized and self.seed is None:
            problems.append(f"{self.command} is randomized and needs a seed (flag, config file or {SEED_ENV})")
        if problems:
            raise ConfigError("Invalid configuration: " + "; ".join(problems), details={'problems': problems})
        return self

    def as_dict(self) -> Dict:
        return asdict(self)


def load_yaml(path: str) -> Dict:
    """Flatten the sections of a YAML config file into RunConfig field names."""
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            raw = yaml.safe_load(handle) or {}
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse config file {path}: {str(e)}")
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must hold a mapping")

    known = {f.name for f in fields(RunConfig)}
    flat: Dict = {}
    for key, value in raw.items():
        if key == 'logging' and isinstance(value, dict):
            if 'level' in value:
                flat['log_level'] = str(value['level'])
        elif isinstance(value, dict) and key not in known:
            flat.update(value)
        else:
            flat[key] = value
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in {path}: {unknown}", details={'unknown_keys': unknown})
    return flat


def resolve_config(command: str, flags: Dict, config_path: Optional[str] = None) -> RunConfig:
    """Merge defaults, the environment seed, the YAML file and non-None flags, in that order."""
    load_dotenv()
    values: Dict = {'command': command}
    env_seed = os.getenv(SEED_ENV)
    if env_seed:
        try:
            values['seed'] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{env_seed}'")
    if config_path:
        values.update(load_yaml(config_path))
    values.update({k: v for k, v in flags.items() if v is not None})
    values['command'] = command

    config = RunConfig(**values)
    config.log_level = config.log_level.upper()
    logger.debug(f"Effective configuration: {config.as_dict()}")
    return config.validate()
