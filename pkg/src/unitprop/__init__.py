"""Temporal unit regression for temporal action proposals.

Unit-feature clip pyramids, a two-head classification/offset-regression
network, NMS post-processing and the AR-N / AR-AN / AR-F evaluation suite.
"""

from unitprop.core import (
    GroundTruth,
    Proposal,
    SecondsInterval,
    UnitInterval,
    tiou,
    units_to_seconds,
)

__version__ = "0.1.0"

__all__ = [
    "GroundTruth",
    "Proposal",
    "SecondsInterval",
    "UnitInterval",
    "tiou",
    "units_to_seconds",
]
