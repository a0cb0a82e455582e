"""Command-line surface for cross-view synthesis"""

from .commands import build_parser, run

__all__ = [
    "build_parser",
    "run",
]
