"""Feature-space engine for domain generalizable continual learning."""

from . import (
    cli,
    diffmath,
    distributions,
    dot_transform,
    featurebank,
    metrics,
    objectives,
    pipeline,
    synthgen,
)

__all__ = [
    "cli",
    "diffmath",
    "distributions",
    "dot_transform",
    "featurebank",
    "metrics",
    "objectives",
    "pipeline",
    "synthgen",
]

__version__ = "0.1.0"
