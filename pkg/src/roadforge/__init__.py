"""roadforge: road-network graph datasets, autoregressive graph generation, and transport-based evaluation."""

__version__ = "0.1.0"

from .graph import GeoSegment, Point2, RoadGraph, read_rgf, write_rgf
from .ordering import CanonicalSequence, canonical_order, canonicalize, from_sequence, to_sequence

__all__ = [
    "GeoSegment",
    "Point2",
    "RoadGraph",
    "read_rgf",
    "write_rgf",
    "CanonicalSequence",
    "canonical_order",
    "canonicalize",
    "from_sequence",
    "to_sequence",
    "__version__",
]
