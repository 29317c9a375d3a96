"""Uncertainty-aware segmentation of lung nodules annotated by several readers."""

from .errors import (CorruptSampleError, DataError, EmptyRegionError, InvalidInputError, TrainingDivergedError,
                     UASNetError)
from .masks import AnnotationSet, MultiConfidenceMask, build_mcm, intersection, lc_region, select_reference, union
from .model import ArchConfig, UASNet

__version__ = "0.1.0"
