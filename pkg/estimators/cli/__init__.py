from .commands import build_parser, main
from .config import RunConfig, load_yaml, resolve_config

__all__ = ['RunConfig', 'build_parser', 'load_yaml', 'main', 'resolve_config']
