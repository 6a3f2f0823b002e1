"""Searchable collaborative video-deraining toolkit.

Desk-scale library and CLI for restoring rain-degraded frame sequences.
Two collaborative restoration branches (DNA and CNA) are discovered by
differentiable architecture search over a compact operation set, fed by a
searchable frame-alignment stage (optical-flow vs. temporal-grouping), an
auxiliary rain-streak generator that hardens the dominant branch's inputs,
and fused by an attention-based averaging scheme.
"""

__version__ = "0.1.0"


class FormatError(ValueError):
    """On-disk data violates the documented layout."""


class ConfigurationError(RuntimeError):
    """Components are wired together with incompatible settings."""


class IntegrityError(RuntimeError):
    """A checkpoint fails validation against its manifest."""
